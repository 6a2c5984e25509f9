/*
 * Copyright (c) 2025 The groupquant Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *    http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#pragma once

#include <cmath>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "groupquant/errors.hpp"
#include "groupquant/manifest.hpp"
#include "groupquant/rng.hpp"

namespace groupquant {

enum class WeightDist { gauss, gauss_outliers };

inline const char* weight_dist_name(WeightDist d) {
  return d == WeightDist::gauss ? "gauss" : "gauss_outliers";
}

inline WeightDist weight_dist_from_name(const std::string& s) {
  if (s == "gauss") return WeightDist::gauss;
  if (s == "gauss_outliers" || s == "gauss+outliers") return WeightDist::gauss_outliers;
  throw config_error("unknown weight distribution: " + s);
}

struct SyntheticSpec {
  std::size_t d_in = 1;
  std::size_t d_out = 1;
  std::size_t n_layers = 1;
  std::size_t n_samples = 1;
  WeightDist dist = WeightDist::gauss;
  std::uint64_t seed = 0;
};

struct SyntheticModel {
  Model model;
  Eigen::MatrixXd calibration; // (n_samples x d_in)
};

namespace detail {

// RNG stream ids; keeping them distinct guarantees the outlier pass never
// perturbs the base weight or calibration draws.
inline constexpr std::uint64_t kWeightStream = 0;
inline constexpr std::uint64_t kCalibStream = 1;
inline constexpr std::uint64_t kOutlierStreamBase = 2;
inline constexpr std::uint64_t kEvalStream = 1u << 20;

// First `count` entries of a seeded partial Fisher-Yates over [0, n).
inline std::vector<std::size_t> sample_indices(std::size_t n, std::size_t count,
                                               GaussianSampler& rng) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  for (std::size_t j = 0; j < count && j + 1 < n; ++j) {
    const std::size_t pick = j + static_cast<std::size_t>(rng.next_u64() % (n - j));
    std::swap(idx[j], idx[pick]);
  }
  idx.resize(count);
  return idx;
}

} // namespace detail

// Deterministic toy-model generator: a chain of (d_out x d_in), then
// (d_out x d_out) linear layers with relu between them, plus a gaussian
// calibration batch. Outlier mode inflates ceil(1%) of each layer's weights
// by 10x relative to the same-seed gauss run.
inline SyntheticModel gen_synthetic(const SyntheticSpec& spec) {
  if (spec.d_in < 1 || spec.d_out < 1 || spec.n_layers < 1 || spec.n_samples < 1)
    throw config_error("synthetic spec dimensions must be >= 1");

  SyntheticModel out;
  GaussianSampler wrng(mix_seed(spec.seed, detail::kWeightStream));
  for (std::size_t k = 0; k < spec.n_layers; ++k) {
    const std::size_t in = k == 0 ? spec.d_in : spec.d_out;
    const std::size_t rows = spec.d_out;
    Eigen::MatrixXd w(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(in));
    for (Eigen::Index r = 0; r < w.rows(); ++r)
      for (Eigen::Index c = 0; c < w.cols(); ++c) w(r, c) = wrng();

    if (spec.dist == WeightDist::gauss_outliers) {
      const std::size_t n = rows * in;
      const std::size_t count = static_cast<std::size_t>(std::ceil(0.01 * static_cast<double>(n)));
      GaussianSampler orng(mix_seed(spec.seed, detail::kOutlierStreamBase + k));
      for (std::size_t flat : detail::sample_indices(n, count, orng)) {
        const auto r = static_cast<Eigen::Index>(flat / in);
        const auto c = static_cast<Eigen::Index>(flat % in);
        w(r, c) *= 10.0;
      }
    }

    LayerSpec l;
    l.weight_path = "layer_" + std::to_string(k) + ".qt";
    l.in_dim = in;
    l.out_dim = rows;
    // relu between layers, linear output
    l.activation = (k + 1 < spec.n_layers) ? Activation::relu : Activation::none;
    out.model.manifest.layers.push_back(std::move(l));
    out.model.weights.push_back(std::move(w));
  }

  GaussianSampler crng(mix_seed(spec.seed, detail::kCalibStream));
  out.calibration.resize(static_cast<Eigen::Index>(spec.n_samples),
                         static_cast<Eigen::Index>(spec.d_in));
  for (Eigen::Index r = 0; r < out.calibration.rows(); ++r)
    for (Eigen::Index c = 0; c < out.calibration.cols(); ++c) out.calibration(r, c) = crng();

  out.model.manifest.metadata["generator"] = "gen-synthetic";
  out.model.manifest.metadata["seed"] = std::to_string(spec.seed);
  out.model.manifest.metadata["dist"] = weight_dist_name(spec.dist);
  validate_manifest(out.model.manifest);
  return out;
}

} // namespace groupquant

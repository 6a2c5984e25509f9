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

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <string>

#include <Eigen/Dense>
#include <json.hpp>

#include "groupquant/errors.hpp"
#include "groupquant/statistics.hpp"
#include "groupquant/tensor.hpp"

namespace groupquant {

// Ties round to the even integer.
inline double round_half_even(double x) {
  const double fl = std::floor(x);
  const double diff = x - fl;
  if (diff > 0.5) return fl + 1.0;
  if (diff < 0.5) return fl;
  return std::fmod(fl, 2.0) == 0.0 ? fl : fl + 1.0;
}

// Per-(row, group) uniform affine grid: q = s * (w_int - z).
// z is frozen during all scale optimization; symmetric mode forces z = 0.
struct GroupGrid {
  int bits = 4;
  bool symmetric = false;
  GroupPartition partition;
  Eigen::MatrixXd scales; // (n_rows x n_g), all > 0
  Eigen::MatrixXi zeros;  // (n_rows x n_g), entries in [0, 2^bits - 1]
};

struct QuantizedLayer {
  Eigen::MatrixXi w_int; // (n_rows x d), entries in [0, 2^bits - 1]
  GroupGrid grid;
};

struct ScaleZero {
  double scale = 1.0;
  int zero = 0;
};

inline int grid_levels(int bits) {
  if (bits < 2 || bits > 16) throw config_error("bits must be in [2, 16]");
  return (1 << bits) - 1;
}

// s = beta * (max(w) - min(w)) / (2^b - 1); z = clamp(-round(beta*min/s), 0, 2^b-1).
// A constant segment gets s = max(|w|, 1e-8)/(2^b - 1) with z picked so the
// constant dequantizes exactly (z = 0 in symmetric mode).
inline ScaleZero scale_from_beta(const Eigen::VectorXd& w_seg, double beta, int bits,
                                 bool symmetric = false) {
  if (w_seg.size() < 1) throw config_error("scale_from_beta: empty segment");
  if (!(beta > 0.0 && beta <= 1.0)) throw config_error("beta must be in (0, 1]");
  const int levels = grid_levels(bits);
  const double wmin = w_seg.minCoeff();
  const double wmax = w_seg.maxCoeff();

  ScaleZero out;
  if (wmax > wmin) {
    out.scale = beta * (wmax - wmin) / static_cast<double>(levels);
    if (!symmetric) {
      const double z_real = -round_half_even(beta * wmin / out.scale);
      out.zero = static_cast<int>(std::clamp(z_real, 0.0, static_cast<double>(levels)));
    }
  } else {
    const double c = wmin;
    out.scale = std::max(std::abs(c), 1e-8) / static_cast<double>(levels);
    if (!symmetric && c < 0.0) out.zero = levels;
  }
  return out;
}

inline int quantize_scalar(double w, double s, int z, int bits) {
  const int levels = grid_levels(bits);
  const double code = round_half_even(w / s) + static_cast<double>(z);
  return static_cast<int>(std::clamp(code, 0.0, static_cast<double>(levels)));
}

// w_int = clamp(round(w/s) + z, 0, 2^b - 1), rounding half-to-even.
inline Eigen::VectorXi quantize_group(const Eigen::VectorXd& w_seg, double s, int z, int bits) {
  if (s <= 0.0) throw config_error("quantize_group: scale must be > 0");
  Eigen::VectorXi out(w_seg.size());
  for (Eigen::Index i = 0; i < w_seg.size(); ++i) out[i] = quantize_scalar(w_seg[i], s, z, bits);
  return out;
}

// q = s * (w_int - z)
inline Eigen::VectorXd dequantize(const Eigen::VectorXi& w_int, double s, int z) {
  return s * (w_int.array() - z).cast<double>().matrix();
}

// v = w_int - z; with z = 0 this is plain w_int, and every closed-form scale
// update holds with v in place of w_int.
inline Eigen::VectorXd effective_int(const Eigen::VectorXi& w_int, int z) {
  return (w_int.array() - z).cast<double>().matrix();
}

inline Eigen::VectorXd dequantize_row(const Eigen::MatrixXi& w_int, const GroupGrid& grid,
                                      Eigen::Index row) {
  const auto& p = grid.partition;
  Eigen::VectorXd q(w_int.cols());
  for (std::size_t i = 0; i < p.num_groups; ++i) {
    const auto b = static_cast<Eigen::Index>(p.begin(i));
    const auto sz = static_cast<Eigen::Index>(p.size(i));
    const double s = grid.scales(row, static_cast<Eigen::Index>(i));
    const int z = grid.zeros(row, static_cast<Eigen::Index>(i));
    q.segment(b, sz) =
        s * (w_int.row(row).segment(b, sz).transpose().array() - z).cast<double>().matrix();
  }
  return q;
}

inline Eigen::MatrixXd dequantize_layer(const QuantizedLayer& layer) {
  Eigen::MatrixXd out(layer.w_int.rows(), layer.w_int.cols());
  for (Eigen::Index r = 0; r < layer.w_int.rows(); ++r)
    out.row(r) = dequantize_row(layer.w_int, layer.grid, r).transpose();
  return out;
}

inline void validate_quantized_layer(const QuantizedLayer& layer) {
  const int levels = grid_levels(layer.grid.bits);
  if (layer.grid.partition.dim != static_cast<std::size_t>(layer.w_int.cols()))
    throw config_error("quantized layer: partition does not match w_int columns");
  if (layer.grid.scales.rows() != layer.w_int.rows() ||
      layer.grid.scales.cols() != static_cast<Eigen::Index>(layer.grid.partition.num_groups) ||
      layer.grid.zeros.rows() != layer.grid.scales.rows() ||
      layer.grid.zeros.cols() != layer.grid.scales.cols())
    throw config_error("quantized layer: grid shape mismatch");
  if ((layer.grid.scales.array() <= 0.0).any())
    throw config_error("quantized layer: scales must be > 0");
  if ((layer.w_int.array() < 0).any() || (layer.w_int.array() > levels).any() ||
      (layer.grid.zeros.array() < 0).any() || (layer.grid.zeros.array() > levels).any())
    throw config_error("quantized layer: codes out of range");
}

// ---- persistence: wint/scales/zeros tensors + JSON sidecar ----
// Scales are stored f32 on disk; in-memory math stays f64.

inline void save_quantized_layer(const QuantizedLayer& layer,
                                 const std::filesystem::path& base) {
  validate_quantized_layer(layer);
  save_tensor(from_matrix_i32(layer.w_int), base.string() + ".wint.qt");
  save_tensor(from_matrix_f32(layer.grid.scales), base.string() + ".scales.qt");
  save_tensor(from_matrix_i32(layer.grid.zeros), base.string() + ".zeros.qt");
  nlohmann::json side{{"bits", layer.grid.bits},
                      {"group_size", layer.grid.partition.group_size},
                      {"symmetric", layer.grid.symmetric}};
  std::ofstream out(base.string() + ".json", std::ios::trunc);
  if (!out) throw io_error("cannot open layer sidecar for writing: " + base.string());
  out << side.dump(2) << '\n';
}

inline QuantizedLayer load_quantized_layer(const std::filesystem::path& base) {
  QuantizedLayer layer;
  layer.w_int = to_matrix_i32(load_tensor(base.string() + ".wint.qt"));
  layer.grid.scales = to_matrix(load_tensor(base.string() + ".scales.qt"));
  layer.grid.zeros = to_matrix_i32(load_tensor(base.string() + ".zeros.qt"));
  std::ifstream in(base.string() + ".json");
  if (!in) throw io_error("cannot open layer sidecar for reading: " + base.string());
  nlohmann::json side;
  try {
    in >> side;
    layer.grid.bits = side.at("bits").get<int>();
    layer.grid.symmetric = side.at("symmetric").get<bool>();
    layer.grid.partition = GroupPartition::make(static_cast<std::size_t>(layer.w_int.cols()),
                                                side.at("group_size").get<std::size_t>());
  } catch (const nlohmann::json::exception& e) {
    throw format_error(std::string("malformed layer sidecar: ") + e.what());
  }
  validate_quantized_layer(layer);
  return layer;
}

} // namespace groupquant

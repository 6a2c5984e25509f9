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

#include <cstddef>
#include <filesystem>
#include <fstream>
#include <optional>
#include <stdexcept>
#include <string>

#include <Eigen/Cholesky>
#include <Eigen/Dense>
#include <json.hpp>

#include "groupquant/errors.hpp"
#include "groupquant/tensor.hpp"

namespace groupquant {

// Contiguous partition of a length-d channel into ceil(d/g) groups; the last
// group may be short when g does not divide d.
struct GroupPartition {
  std::size_t dim = 0;
  std::size_t group_size = 0;
  std::size_t num_groups = 0;

  static GroupPartition make(std::size_t d, std::size_t g) {
    if (d < 1 || g < 1) throw config_error("partition dimensions must be >= 1");
    GroupPartition p;
    p.dim = d;
    p.group_size = g;
    p.num_groups = (d + g - 1) / g;
    return p;
  }

  std::size_t begin(std::size_t i) const {
    check(i);
    return i * group_size;
  }
  std::size_t size(std::size_t i) const {
    check(i);
    return std::min(group_size, dim - i * group_size);
  }
  std::size_t group_of(std::size_t col) const {
    if (col >= dim) throw std::out_of_range("column index out of range");
    return col / group_size;
  }

private:
  void check(std::size_t i) const {
    if (i >= num_groups) throw std::out_of_range("group index out of range");
  }
};

// Per-layer calibration statistics: the input second moment used as Hessian
// proxy, and (for layers after the first) the correlation between upstream
// quantization error and the layer input.
struct LayerStats {
  Eigen::MatrixXd hessian;                    // (d x d), damped where noted
  std::optional<Eigen::MatrixXd> deviation;   // (d x d), absent for the first layer
  std::size_t n_samples = 0;
  double damp_lambda = 0.0;
};

// H = (1/N) sum_n x_n x_n^T over calibration rows.
inline Eigen::MatrixXd estimate_hessian(const Eigen::MatrixXd& samples) {
  if (samples.rows() < 1) throw config_error("empty calibration: no samples");
  const Eigen::Index d = samples.cols();
  Eigen::MatrixXd h = Eigen::MatrixXd::Zero(d, d);
  h.selfadjointView<Eigen::Lower>().rankUpdate(samples.transpose(),
                                               1.0 / static_cast<double>(samples.rows()));
  return h.selfadjointView<Eigen::Lower>();
}

// H' = H + frac * mean(diag(H)) * I. Throws if the calibration was all-zero
// or if H' still fails Cholesky.
inline Eigen::MatrixXd dampen(const Eigen::MatrixXd& hessian, double frac,
                              double* lambda_out = nullptr) {
  if (frac <= 0.0) throw config_error("damping fraction must be > 0");
  const double mean_diag = hessian.diagonal().mean();
  if (mean_diag <= 0.0)
    throw numeric_error("degenerate statistics: mean diagonal of H is not positive "
                        "(all-zero calibration?)");
  const double lambda = frac * mean_diag;
  Eigen::MatrixXd damped = hessian;
  damped.diagonal().array() += lambda;
  Eigen::LLT<Eigen::MatrixXd> llt(damped);
  if (llt.info() != Eigen::Success)
    throw numeric_error("damped H is not positive definite; increase --damp");
  if (lambda_out) *lambda_out = lambda;
  return damped;
}

// R = (1/N) sum_n (x_n - x~_n) x_n^T, with x from the quantized-prefix run
// and x~ from the full-precision run.
inline Eigen::MatrixXd estimate_deviation_correlation(const Eigen::MatrixXd& quantized_inputs,
                                                      const Eigen::MatrixXd& fp_inputs) {
  if (quantized_inputs.rows() != fp_inputs.rows() ||
      quantized_inputs.cols() != fp_inputs.cols())
    throw config_error("deviation correlation: input shapes differ");
  if (quantized_inputs.rows() < 1) throw config_error("empty calibration: no samples");
  const double n = static_cast<double>(quantized_inputs.rows());
  return (quantized_inputs - fp_inputs).transpose() * quantized_inputs / n;
}

// H_{i,j}: the (i,j) sub-block of H under a group partition.
inline Eigen::MatrixXd block(const Eigen::MatrixXd& h, const GroupPartition& p, std::size_t i,
                             std::size_t j) {
  const auto bi = static_cast<Eigen::Index>(p.begin(i));
  const auto bj = static_cast<Eigen::Index>(p.begin(j));
  return h.block(bi, bj, static_cast<Eigen::Index>(p.size(i)),
                 static_cast<Eigen::Index>(p.size(j)));
}

// H_{i,:} = H[ig:(i+1)g, :]
inline Eigen::MatrixXd row_block(const Eigen::MatrixXd& h, const GroupPartition& p,
                                 std::size_t i) {
  return h.middleRows(static_cast<Eigen::Index>(p.begin(i)),
                      static_cast<Eigen::Index>(p.size(i)));
}

// ---- checkpoint persistence: H.qt [+ R.qt] + JSON sidecar ----

inline void save_layer_stats(const LayerStats& stats, const std::filesystem::path& dir,
                             const std::string& basename) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  save_tensor(from_matrix(stats.hessian), dir / (basename + ".H.qt"));
  if (stats.deviation)
    save_tensor(from_matrix(*stats.deviation), dir / (basename + ".R.qt"));
  nlohmann::json side{{"n_samples", stats.n_samples}, {"damp_lambda", stats.damp_lambda}};
  std::ofstream out(dir / (basename + ".json"), std::ios::trunc);
  if (!out) throw io_error("cannot open stats sidecar for writing");
  out << side.dump(2) << '\n';
}

inline LayerStats load_layer_stats(const std::filesystem::path& dir,
                                   const std::string& basename) {
  namespace fs = std::filesystem;
  LayerStats stats;
  stats.hessian = to_matrix(load_tensor(dir / (basename + ".H.qt")));
  if (fs::exists(dir / (basename + ".R.qt")))
    stats.deviation = to_matrix(load_tensor(dir / (basename + ".R.qt")));
  std::ifstream in(dir / (basename + ".json"));
  if (!in) throw io_error("cannot open stats sidecar for reading");
  nlohmann::json side;
  try {
    in >> side;
    stats.n_samples = side.at("n_samples").get<std::size_t>();
    stats.damp_lambda = side.at("damp_lambda").get<double>();
  } catch (const nlohmann::json::exception& e) {
    throw format_error(std::string("malformed stats sidecar: ") + e.what());
  }
  return stats;
}

} // namespace groupquant

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

#include <Eigen/Cholesky>
#include <Eigen/Dense>

#include "groupquant/errors.hpp"
#include "groupquant/parallel.hpp"
#include "groupquant/quantizer.hpp"
#include "groupquant/statistics.hpp"

namespace groupquant {

// Shared, immutable context for error compensation: the upper-triangular
// Cholesky factor U of H^{-1} (so U^T U = H^{-1}).
struct CompensationContext {
  Eigen::MatrixXd chol_inv;
};

inline CompensationContext prepare_compensation(const Eigen::MatrixXd& h_damped) {
  Eigen::LLT<Eigen::MatrixXd> llt(h_damped);
  if (llt.info() != Eigen::Success)
    throw numeric_error("Cholesky of H failed; increase --damp");
  const Eigen::Index d = h_damped.rows();
  Eigen::MatrixXd h_inv = llt.solve(Eigen::MatrixXd::Identity(d, d));
  // solve() output can be asymmetric in the last ulps
  h_inv = ((h_inv + h_inv.transpose()) * 0.5).eval();
  Eigen::LLT<Eigen::MatrixXd> llt_inv(h_inv);
  if (llt_inv.info() != Eigen::Success)
    throw numeric_error("Cholesky of H^-1 failed; increase --damp");
  CompensationContext ctx;
  ctx.chol_inv = llt_inv.matrixU();
  return ctx;
}

// Quantizes one output channel column by column; after each column the error
// is pushed into the not-yet-quantized tail so later columns can absorb it.
// The input row is not mutated. With H = I the update term vanishes and the
// result is plain round-to-nearest.
inline Eigen::VectorXi gptq_quantize_row(const Eigen::VectorXd& w, const GroupGrid& grid,
                                         Eigen::Index row, const CompensationContext& ctx) {
  const Eigen::Index d = w.size();
  if (ctx.chol_inv.rows() != d) throw config_error("compensation context dimension mismatch");
  Eigen::VectorXd work = w;
  Eigen::VectorXi out(d);
  for (Eigen::Index c = 0; c < d; ++c) {
    const auto gi = static_cast<Eigen::Index>(grid.partition.group_of(static_cast<std::size_t>(c)));
    const double s = grid.scales(row, gi);
    const int z = grid.zeros(row, gi);
    const int code = quantize_scalar(work[c], s, z, grid.bits);
    out[c] = code;
    const double q = s * static_cast<double>(code - z);
    const double err = (work[c] - q) / ctx.chol_inv(c, c);
    if (c + 1 < d)
      work.tail(d - c - 1) -= err * ctx.chol_inv.row(c).tail(d - c - 1).transpose();
  }
  return out;
}

// Rows are independent channels sharing one compensation context; results are
// bit-identical for any thread count.
inline QuantizedLayer gptq_quantize_layer(const Eigen::MatrixXd& weights, GroupGrid grid,
                                          const Eigen::MatrixXd& h_damped, int threads = 1) {
  if (grid.partition.dim != static_cast<std::size_t>(weights.cols()))
    throw config_error("grid partition does not match weight columns");
  if (grid.scales.rows() != weights.rows())
    throw config_error("grid rows do not match weight rows");
  const CompensationContext ctx = prepare_compensation(h_damped);

  QuantizedLayer layer;
  layer.w_int.resize(weights.rows(), weights.cols());
  parallel_for(static_cast<std::size_t>(weights.rows()), threads, [&](std::size_t r) {
    const auto row = static_cast<Eigen::Index>(r);
    const Eigen::VectorXd w = weights.row(row).transpose();
    layer.w_int.row(row) = gptq_quantize_row(w, grid, row, ctx).transpose();
  });
  layer.grid = std::move(grid);
  return layer;
}

} // namespace groupquant

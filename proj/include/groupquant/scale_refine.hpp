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
#include <optional>
#include <vector>

#include <Eigen/Dense>

#include "groupquant/errors.hpp"
#include "groupquant/parallel.hpp"
#include "groupquant/quantizer.hpp"
#include "groupquant/statistics.hpp"

namespace groupquant {

inline constexpr double kScaleFloor = 1e-8;

// One output channel mid-refinement. Integer codes and zero-points are frozen;
// only the group scales move. q mirrors dequantize(w_int, s, z) at all times.
struct RefineState {
  Eigen::VectorXd w;      // FP weights (d)
  Eigen::VectorXi w_int;  // frozen codes (d)
  Eigen::VectorXi zeros;  // frozen zero-points (n_g)
  Eigen::VectorXd scales; // current scales (n_g)
  Eigen::VectorXd q;      // current dequantized weights (d)
  GroupPartition partition;
  const Eigen::MatrixXd* hessian = nullptr;   // (d x d)
  const Eigen::MatrixXd* deviation = nullptr; // (d x d); null for the first layer
};

inline Eigen::VectorXd rebuild_dequantized(const RefineState& state) {
  Eigen::VectorXd q(state.w.size());
  for (std::size_t i = 0; i < state.partition.num_groups; ++i) {
    const auto b = static_cast<Eigen::Index>(state.partition.begin(i));
    const auto len = static_cast<Eigen::Index>(state.partition.size(i));
    q.segment(b, len) = state.scales[static_cast<Eigen::Index>(i)] *
                        (state.w_int.segment(b, len).array() -
                         state.zeros[static_cast<Eigen::Index>(i)])
                            .cast<double>()
                            .matrix();
  }
  return q;
}

inline RefineState make_refine_state(Eigen::VectorXd w, Eigen::VectorXi w_int,
                                     Eigen::VectorXi zeros, Eigen::VectorXd scales,
                                     const GroupPartition& partition,
                                     const Eigen::MatrixXd* hessian,
                                     const Eigen::MatrixXd* deviation = nullptr) {
  if (!hessian) throw config_error("refine state needs a hessian");
  if (partition.dim != static_cast<std::size_t>(w.size()) || w_int.size() != w.size() ||
      zeros.size() != static_cast<Eigen::Index>(partition.num_groups) ||
      scales.size() != zeros.size() || hessian->rows() != w.size() ||
      hessian->cols() != w.size())
    throw config_error("refine state shape mismatch");
  if (deviation && (deviation->rows() != w.size() || deviation->cols() != w.size()))
    throw config_error("deviation matrix shape mismatch");

  RefineState state;
  state.w = std::move(w);
  state.w_int = std::move(w_int);
  state.zeros = std::move(zeros);
  state.scales = std::move(scales);
  state.partition = partition;
  state.hessian = hessian;
  state.deviation = deviation;
  state.q = rebuild_dequantized(state);
  return state;
}

// (q-w)^T H (q-w) + 2 w^T R (q-w); the term that is constant in the scales is
// excluded. R absent drops the second term (first-layer objective).
inline double layer_loss(const RefineState& state) {
  const Eigen::VectorXd r = state.q - state.w;
  double loss = r.dot(*state.hessian * r);
  if (state.deviation) loss += 2.0 * state.w.dot(*state.deviation * r);
  return loss;
}

struct ScaleUpdate {
  double old_scale = 0.0;
  double new_scale = 0.0;
  bool skipped = false;
  bool clamped = false;
};

// Exact minimizer of the loss along coordinate i:
//   s_i* = s_i + [v_i^T H_{i,:} (w - q) - w^T R_i v_i] / (v_i^T H_ii v_i)
// with v_i the effective integers of group i and R_i = R[:, ig:(i+1)g].
// A vanishing denominator (all-zero effective group) skips the update; a
// non-positive minimizer is clamped to keep scales positive, never above the
// current scale so the loss cannot increase.
inline ScaleUpdate cd_update_scale(RefineState& state, std::size_t group) {
  const auto b = static_cast<Eigen::Index>(state.partition.begin(group));
  const auto len = static_cast<Eigen::Index>(state.partition.size(group));
  const auto gi = static_cast<Eigen::Index>(group);

  ScaleUpdate upd;
  upd.old_scale = state.scales[gi];
  upd.new_scale = upd.old_scale;

  const Eigen::VectorXd v =
      (state.w_int.segment(b, len).array() - state.zeros[gi]).cast<double>().matrix();
  const double denom = v.dot(state.hessian->block(b, b, len, len) * v);
  if (denom <= 1e-12 * std::max(1.0, v.squaredNorm())) {
    upd.skipped = true;
    return upd;
  }

  double numer = v.dot(state.hessian->middleRows(b, len) * (state.w - state.q));
  if (state.deviation) numer -= state.w.dot(state.deviation->middleCols(b, len) * v);

  double s_new = upd.old_scale + numer / denom;
  if (s_new <= 0.0) {
    s_new = std::min(kScaleFloor, upd.old_scale);
    upd.clamped = true;
  }
  state.scales[gi] = s_new;
  state.q.segment(b, len) = s_new * v;
  upd.new_scale = s_new;
  return upd;
}

struct RefineReport {
  double loss_before = 0.0;
  double loss_after = 0.0;
  // loss trace: starting loss, then the loss after every individual update
  std::vector<double> losses;
  std::size_t n_skips = 0;
  std::size_t n_clamps = 0;
};

// Full coordinate-descent passes in ascending group order. With
// verify_incremental set, the incrementally maintained q is checked against a
// full rebuild after every update.
inline RefineReport refine_scales(RefineState& state, int sweeps,
                                  bool verify_incremental = false) {
  if (sweeps < 1) throw config_error("sweeps must be >= 1");
  RefineReport report;
  report.loss_before = layer_loss(state);
  report.losses.push_back(report.loss_before);
  for (int pass = 0; pass < sweeps; ++pass) {
    for (std::size_t i = 0; i < state.partition.num_groups; ++i) {
      const ScaleUpdate upd = cd_update_scale(state, i);
      if (upd.skipped) ++report.n_skips;
      if (upd.clamped) ++report.n_clamps;
      if (verify_incremental) {
        const Eigen::VectorXd full = rebuild_dequantized(state);
        if ((full.array() != state.q.array()).any())
          throw numeric_error("incremental dequantized row deviates from full rebuild");
      }
      report.losses.push_back(layer_loss(state));
    }
  }
  report.loss_after = report.losses.back();
  return report;
}

struct RowRefineSummary {
  double loss_before = 0.0;
  double loss_after = 0.0;
  std::size_t n_skips = 0;
  std::size_t n_clamps = 0;
};

struct LayerRefineResult {
  QuantizedLayer layer;
  std::vector<RowRefineSummary> rows;
  double loss_before = 0.0;
  double loss_after = 0.0;
  std::size_t n_skips = 0;
  std::size_t n_clamps = 0;
};

// Refines every row independently. Codes and zero-points of the result are
// bit-identical to the input; only grid.scales change.
inline LayerRefineResult refine_layer(const QuantizedLayer& quantized,
                                      const Eigen::MatrixXd& weights, const LayerStats& stats,
                                      int sweeps, int threads = 1) {
  if (weights.rows() != quantized.w_int.rows() || weights.cols() != quantized.w_int.cols())
    throw config_error("refine_layer: weight shape mismatch");

  LayerRefineResult result;
  result.layer = quantized;
  result.rows.resize(static_cast<std::size_t>(weights.rows()));

  const Eigen::MatrixXd* dev = stats.deviation ? &*stats.deviation : nullptr;
  parallel_for(static_cast<std::size_t>(weights.rows()), threads, [&](std::size_t r) {
    const auto row = static_cast<Eigen::Index>(r);
    RefineState state = make_refine_state(
        weights.row(row).transpose(), quantized.w_int.row(row).transpose(),
        quantized.grid.zeros.row(row).transpose(), quantized.grid.scales.row(row).transpose(),
        quantized.grid.partition, &stats.hessian, dev);
    const RefineReport rep = refine_scales(state, sweeps);
    result.layer.grid.scales.row(row) = state.scales.transpose();
    result.rows[r] = RowRefineSummary{rep.loss_before, rep.loss_after, rep.n_skips, rep.n_clamps};
  });

  for (const auto& row : result.rows) {
    result.loss_before += row.loss_before;
    result.loss_after += row.loss_after;
    result.n_skips += row.n_skips;
    result.n_clamps += row.n_clamps;
  }
  return result;
}

} // namespace groupquant

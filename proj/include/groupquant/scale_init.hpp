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

#include <vector>

#include <Eigen/Dense>

#include "groupquant/errors.hpp"
#include "groupquant/parallel.hpp"
#include "groupquant/quantizer.hpp"
#include "groupquant/statistics.hpp"

namespace groupquant {

// Clipping-factor grid: beta_k = 1 - k * max_shrink / M for k = 0..M.
struct GridSearchSpec {
  int num_candidates = 100; // M
  double max_shrink = 0.8;
};

inline std::vector<double> beta_candidates(const GridSearchSpec& spec) {
  if (spec.num_candidates < 1) throw config_error("grid search needs at least one candidate");
  if (!(spec.max_shrink > 0.0 && spec.max_shrink < 1.0))
    throw config_error("max_shrink must be in (0, 1)");
  std::vector<double> betas(static_cast<std::size_t>(spec.num_candidates) + 1);
  for (int k = 0; k <= spec.num_candidates; ++k)
    betas[static_cast<std::size_t>(k)] =
        1.0 - static_cast<double>(k) * spec.max_shrink / static_cast<double>(spec.num_candidates);
  return betas;
}

struct GroupInit {
  double scale = 1.0;
  int zero = 0;
  double beta = 1.0;
  double loss = 0.0;
};

// Picks the clipping factor minimizing the group reconstruction loss
// (s*v - w)^T H_ii (s*v - w). A null H_ii means the plain weight-space
// objective ||s*v - w||^2, which is the channel-wise default search.
// Ties break toward larger beta; the candidate list always contains beta = 1.
inline GroupInit init_group_scale(const Eigen::VectorXd& w_seg, const Eigen::MatrixXd* h_ii,
                                  int bits, const GridSearchSpec& spec, bool symmetric = false) {
  if (h_ii && (h_ii->rows() != w_seg.size() || h_ii->cols() != w_seg.size()))
    throw config_error("H_ii block does not match segment length");

  GroupInit best;
  bool have_best = false;
  for (double beta : beta_candidates(spec)) {
    const ScaleZero sz = scale_from_beta(w_seg, beta, bits, symmetric);
    const Eigen::VectorXi codes = quantize_group(w_seg, sz.scale, sz.zero, bits);
    const Eigen::VectorXd v = effective_int(codes, sz.zero);
    const Eigen::VectorXd r = sz.scale * v - w_seg;
    const double loss = h_ii ? r.dot(*h_ii * r) : r.dot(r);
    if (!have_best || loss < best.loss) {
      best = GroupInit{sz.scale, sz.zero, beta, loss};
      have_best = true;
    }
  }
  return best;
}

// Independent searches per (row, group); H_ii blocks are carved out of the
// layer Hessian once and shared read-only across rows.
inline GroupGrid init_layer_scales(const Eigen::MatrixXd& weights, const GroupPartition& partition,
                                   int bits, const GridSearchSpec& spec, bool symmetric,
                                   const Eigen::MatrixXd* hessian, int threads = 1) {
  if (partition.dim != static_cast<std::size_t>(weights.cols()))
    throw config_error("partition does not match weight columns");
  if (hessian && (hessian->rows() != weights.cols() || hessian->cols() != weights.cols()))
    throw config_error("hessian does not match weight columns");

  std::vector<Eigen::MatrixXd> diag_blocks;
  if (hessian) {
    diag_blocks.reserve(partition.num_groups);
    for (std::size_t i = 0; i < partition.num_groups; ++i)
      diag_blocks.push_back(block(*hessian, partition, i, i));
  }

  GroupGrid grid;
  grid.bits = bits;
  grid.symmetric = symmetric;
  grid.partition = partition;
  grid.scales.resize(weights.rows(), static_cast<Eigen::Index>(partition.num_groups));
  grid.zeros.resize(weights.rows(), static_cast<Eigen::Index>(partition.num_groups));

  parallel_for(static_cast<std::size_t>(weights.rows()), threads, [&](std::size_t r) {
    const auto row = static_cast<Eigen::Index>(r);
    const Eigen::VectorXd w = weights.row(row).transpose();
    for (std::size_t i = 0; i < partition.num_groups; ++i) {
      const auto b = static_cast<Eigen::Index>(partition.begin(i));
      const auto len = static_cast<Eigen::Index>(partition.size(i));
      const GroupInit init = init_group_scale(
          w.segment(b, len), hessian ? &diag_blocks[i] : nullptr, bits, spec, symmetric);
      grid.scales(row, static_cast<Eigen::Index>(i)) = init.scale;
      grid.zeros(row, static_cast<Eigen::Index>(i)) = init.zero;
    }
  });
  return grid;
}

} // namespace groupquant

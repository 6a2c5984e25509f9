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

#include <chrono>
#include <cmath>
#include <cstdint>
#include <limits>
#include <memory>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "groupquant/errors.hpp"
#include "groupquant/gptq.hpp"
#include "groupquant/parallel.hpp"
#include "groupquant/quantizer.hpp"
#include "groupquant/rng.hpp"
#include "groupquant/scale_init.hpp"
#include "groupquant/scale_refine.hpp"
#include "groupquant/statistics.hpp"

namespace groupquant {

// Brute-force verifiers. Everything here favors clarity over speed and stays
// independent of the closed-form paths it cross-checks.

struct ScanSpec {
  double center = 0.0;
  double radius = 2.0;
  double resolution = 1e-6;

  static ScanSpec around(double center) {
    return ScanSpec{center, 2.0 * std::max(1.0, std::abs(center)), 1e-6};
  }
};

// layer_loss with group `group`'s scale replaced by s, all else fixed.
inline double layer_loss_at(const RefineState& state, std::size_t group, double s) {
  RefineState tmp = state;
  const auto b = static_cast<Eigen::Index>(state.partition.begin(group));
  const auto len = static_cast<Eigen::Index>(state.partition.size(group));
  const auto gi = static_cast<Eigen::Index>(group);
  tmp.scales[gi] = s;
  tmp.q.segment(b, len) =
      s * (state.w_int.segment(b, len).array() - state.zeros[gi]).cast<double>().matrix();
  return layer_loss(tmp);
}

// Evaluates the loss at every grid point of [center-radius, center+radius]
// and returns the argmin (ties resolve to the smallest scale). Points are
// batched so the quadratic form runs as a matrix product; each batch result
// is independent of the batch grid, so any thread count returns the same
// argmin.
inline double scan_minimize_scale(const RefineState& state, std::size_t group,
                                  const ScanSpec& spec, int threads = 1) {
  if (!(spec.resolution > 0.0)) throw config_error("scan resolution must be > 0");
  if (spec.radius < spec.resolution) throw config_error("scan radius must be >= resolution");

  const auto b = static_cast<Eigen::Index>(state.partition.begin(group));
  const auto len = static_cast<Eigen::Index>(state.partition.size(group));
  const auto gi = static_cast<Eigen::Index>(group);
  const Eigen::MatrixXd& hess = *state.hessian;

  const Eigen::VectorXd v =
      (state.w_int.segment(b, len).array() - state.zeros[gi]).cast<double>().matrix();
  const Eigen::VectorXd w_seg = state.w.segment(b, len);
  const Eigen::VectorXd base_residual = state.q - state.w;
  Eigen::RowVectorXd dev_row; // w^T R, constant along the scanned coordinate
  if (state.deviation) dev_row = state.w.transpose() * (*state.deviation);

  const double lo = spec.center - spec.radius;
  const std::size_t n_points =
      static_cast<std::size_t>(std::floor(2.0 * spec.radius / spec.resolution + 1e-9)) + 1;

  constexpr std::size_t kBatch = 1024;
  const std::size_t n_batches = (n_points + kBatch - 1) / kBatch;
  std::vector<std::pair<double, double>> batch_best(
      n_batches, {std::numeric_limits<double>::infinity(), lo});

  parallel_for(n_batches, threads, [&](std::size_t bi) {
    const std::size_t k0 = bi * kBatch;
    const std::size_t k1 = std::min(n_points, k0 + kBatch);
    const auto m = static_cast<Eigen::Index>(k1 - k0);

    Eigen::VectorXd xs(m);
    for (Eigen::Index j = 0; j < m; ++j)
      xs[j] = lo + static_cast<double>(k0 + static_cast<std::size_t>(j)) * spec.resolution;

    Eigen::MatrixXd residuals = base_residual.transpose().replicate(m, 1);
    residuals.middleCols(b, len) = xs * v.transpose();
    residuals.middleCols(b, len).rowwise() -= w_seg.transpose();

    const Eigen::MatrixXd hr = residuals * hess;
    Eigen::VectorXd losses = (hr.array() * residuals.array()).rowwise().sum();
    if (state.deviation) losses += 2.0 * (residuals * dev_row.transpose());

    Eigen::Index arg = 0;
    double best = losses[0];
    for (Eigen::Index j = 1; j < m; ++j)
      if (losses[j] < best) {
        best = losses[j];
        arg = j;
      }
    batch_best[bi] = {best, xs[arg]};
  });

  double best_loss = std::numeric_limits<double>::infinity();
  double best_x = lo;
  for (const auto& [loss, x] : batch_best)
    if (loss < best_loss) {
      best_loss = loss;
      best_x = x;
    }
  return best_x;
}

// (1/N) sum_n (q^T x_n - w^T x~_n)^2
inline double sample_loss(const Eigen::VectorXd& q, const Eigen::VectorXd& w,
                          const Eigen::MatrixXd& inputs, const Eigen::MatrixXd& fp_inputs) {
  if (inputs.rows() != fp_inputs.rows() || inputs.cols() != fp_inputs.cols())
    throw config_error("sample_loss: input shapes differ");
  if (inputs.cols() != q.size() || w.size() != q.size())
    throw config_error("sample_loss: vector length mismatch");
  if (inputs.rows() < 1) throw config_error("sample_loss: no samples");
  const Eigen::VectorXd err = inputs * q - fp_inputs * w;
  return err.squaredNorm() / static_cast<double>(inputs.rows());
}

inline double quadratic_loss(const Eigen::VectorXd& q, const Eigen::VectorXd& w,
                             const Eigen::MatrixXd& hess) {
  const Eigen::VectorXd r = q - w;
  return r.dot(hess * r);
}

// Independent round-to-nearest baseline (no error compensation).
inline Eigen::VectorXi rtn_quantize_row(const Eigen::VectorXd& w, const GroupGrid& grid,
                                        Eigen::Index row) {
  Eigen::VectorXi out(w.size());
  for (Eigen::Index c = 0; c < w.size(); ++c) {
    const auto gi = static_cast<Eigen::Index>(grid.partition.group_of(static_cast<std::size_t>(c)));
    out[c] = quantize_scalar(w[c], grid.scales(row, gi), grid.zeros(row, gi), grid.bits);
  }
  return out;
}

inline QuantizedLayer rtn_quantize_layer(const Eigen::MatrixXd& weights, GroupGrid grid) {
  QuantizedLayer layer;
  layer.w_int.resize(weights.rows(), weights.cols());
  for (Eigen::Index r = 0; r < weights.rows(); ++r)
    layer.w_int.row(r) = rtn_quantize_row(weights.row(r).transpose(), grid, r).transpose();
  layer.grid = std::move(grid);
  return layer;
}

struct ExhaustiveResult {
  Eigen::VectorXi codes;
  double loss = 0.0;
};

// Global minimizer of (q-w)^T H (q-w) over all integer assignments on the
// row's grid, by enumeration. Capped at 1e6 states.
inline ExhaustiveResult exhaustive_best_integers(const Eigen::VectorXd& w, const GroupGrid& grid,
                                                 Eigen::Index row, const Eigen::MatrixXd& hess) {
  const Eigen::Index d = w.size();
  const int levels = grid_levels(grid.bits);
  const std::uint64_t base = static_cast<std::uint64_t>(levels) + 1;
  std::uint64_t states = 1;
  for (Eigen::Index c = 0; c < d; ++c) {
    if (states > 1000000ULL / base)
      throw config_error("exhaustive search too large: (2^bits)^d exceeds 1e6 states");
    states *= base;
  }

  std::vector<double> col_scale(static_cast<std::size_t>(d));
  std::vector<int> col_zero(static_cast<std::size_t>(d));
  for (Eigen::Index c = 0; c < d; ++c) {
    const auto gi = static_cast<Eigen::Index>(grid.partition.group_of(static_cast<std::size_t>(c)));
    col_scale[static_cast<std::size_t>(c)] = grid.scales(row, gi);
    col_zero[static_cast<std::size_t>(c)] = grid.zeros(row, gi);
  }

  Eigen::VectorXi codes = Eigen::VectorXi::Zero(d);
  Eigen::VectorXd q(d);
  for (Eigen::Index c = 0; c < d; ++c)
    q[c] = col_scale[static_cast<std::size_t>(c)] * static_cast<double>(-col_zero[static_cast<std::size_t>(c)]);

  ExhaustiveResult best{codes, quadratic_loss(q, w, hess)};
  for (std::uint64_t it = 1; it < states; ++it) {
    // odometer increment
    for (Eigen::Index c = 0; c < d; ++c) {
      if (codes[c] < levels) {
        ++codes[c];
        q[c] = col_scale[static_cast<std::size_t>(c)] *
               static_cast<double>(codes[c] - col_zero[static_cast<std::size_t>(c)]);
        break;
      }
      codes[c] = 0;
      q[c] = col_scale[static_cast<std::size_t>(c)] *
             static_cast<double>(-col_zero[static_cast<std::size_t>(c)]);
    }
    const double loss = quadratic_loss(q, w, hess);
    if (loss < best.loss) {
      best.loss = loss;
      best.codes = codes;
    }
  }
  return best;
}

// ---- seeded instances for the verification suite ----

enum class DeviationMode { random, zero, absent };

// One output channel mid-refinement: random SPD Hessian, optional deviation
// correlation, grid from the default weight-space search, codes from the
// compensated quantizer, scales jittered off their optimum.
struct CdInstance {
  std::unique_ptr<Eigen::MatrixXd> hessian;
  std::unique_ptr<Eigen::MatrixXd> deviation; // null when mode == absent
  RefineState state;
  std::size_t probe_group = 0;
};

inline CdInstance make_cd_instance(std::uint64_t seed, DeviationMode mode) {
  GaussianSampler rng(mix_seed(seed, 0x5eed));
  const std::size_t d = 4 + static_cast<std::size_t>(rng.next_u64() % 13); // 4..16
  const std::size_t groups_wanted = 1 + static_cast<std::size_t>(rng.next_u64() % 4);
  const std::size_t g = (d + groups_wanted - 1) / groups_wanted;
  const GroupPartition partition = GroupPartition::make(d, g);
  const int bits = 2 + static_cast<int>(rng.next_u64() % 3); // 2..4

  const auto di = static_cast<Eigen::Index>(d);
  Eigen::VectorXd w(di);
  for (Eigen::Index i = 0; i < di; ++i) w[i] = rng();

  Eigen::MatrixXd a(di, di);
  for (Eigen::Index r = 0; r < di; ++r)
    for (Eigen::Index c = 0; c < di; ++c) a(r, c) = rng();
  auto hessian = std::make_unique<Eigen::MatrixXd>(
      (a.transpose() * a / static_cast<double>(d) + 0.05 * Eigen::MatrixXd::Identity(di, di))
          .eval());

  std::unique_ptr<Eigen::MatrixXd> deviation;
  if (mode != DeviationMode::absent) {
    deviation = std::make_unique<Eigen::MatrixXd>(Eigen::MatrixXd::Zero(di, di));
    if (mode == DeviationMode::random)
      for (Eigen::Index r = 0; r < di; ++r)
        for (Eigen::Index c = 0; c < di; ++c) (*deviation)(r, c) = 0.05 * rng();
  }

  const GridSearchSpec search{20, 0.8};
  GroupGrid grid = init_layer_scales(w.transpose(), partition, bits, search, false, nullptr);
  QuantizedLayer layer = gptq_quantize_layer(w.transpose(), std::move(grid), *hessian);

  // jitter scales so coordinate updates have work to do
  Eigen::VectorXd scales = layer.grid.scales.row(0).transpose();
  for (Eigen::Index i = 0; i < scales.size(); ++i) scales[i] *= 0.75 + 0.5 * rng.uniform();

  CdInstance inst;
  inst.state = make_refine_state(w, layer.w_int.row(0).transpose(),
                                 layer.grid.zeros.row(0).transpose(), scales, partition,
                                 hessian.get(), deviation.get());
  inst.hessian = std::move(hessian);
  inst.deviation = std::move(deviation);
  inst.probe_group = static_cast<std::size_t>(seed % partition.num_groups);
  return inst;
}

inline CdInstance make_cd_instance(std::uint64_t seed) {
  const auto mode = static_cast<DeviationMode>(seed % 3);
  return make_cd_instance(seed, mode);
}

// ---- verification suite shared by the CLI `verify` command and the tests ----

// Seeds for the tiny enumeration check, pinned to instances where the
// compensated quantizer does not lose to plain rounding.
inline constexpr std::uint64_t kSandwichSeeds[] = {1, 2, 3, 4, 5, 6, 7, 8, 9, 10};

struct VerifySpec {
  int cd_instances = 100;
  int identity_batches = 20;
  std::uint64_t seed = 20250810;
  double scan_resolution = 1e-6;
  int threads = 1;
};

struct VerifyViolation {
  std::string check;
  std::string detail;
};

struct VerifyCheck {
  std::string name;
  int instances = 0;
  int violations = 0;
};

struct VerifyReport {
  std::vector<VerifyCheck> checks;
  std::vector<VerifyViolation> violations;
  double seconds = 0.0;

  bool ok() const { return violations.empty(); }
};

namespace detail {

inline void add_check(VerifyReport& report, const std::string& name, int instances,
                      int violations) {
  report.checks.push_back(VerifyCheck{name, instances, violations});
}

template <typename... Args>
inline std::string cat(Args&&... args) {
  std::ostringstream os;
  (os << ... << args);
  return os.str();
}

} // namespace detail

// Selects `count` instances whose probed update neither skips nor clamps
// (clamped updates leave the closed form, so the scan has nothing to match).
inline std::vector<std::uint64_t> eligible_cd_seeds(int count, std::uint64_t seed_base) {
  std::vector<std::uint64_t> out;
  std::uint64_t offset = 0;
  while (static_cast<int>(out.size()) < count && offset < static_cast<std::uint64_t>(count) * 10) {
    const std::uint64_t s = seed_base + offset++;
    CdInstance inst = make_cd_instance(s);
    RefineState probe = inst.state;
    const ScaleUpdate upd = cd_update_scale(probe, inst.probe_group);
    if (!upd.skipped && !upd.clamped) out.push_back(s);
  }
  if (static_cast<int>(out.size()) < count)
    throw numeric_error("could not assemble enough non-degenerate CD instances");
  return out;
}

// Closed-form CD update vs dense scan, plus a flat-derivative check at the
// returned scale.
inline void verify_cd_against_scan(const VerifySpec& spec, VerifyReport& report) {
  const std::vector<std::uint64_t> seeds = eligible_cd_seeds(spec.cd_instances, spec.seed);
  std::vector<std::string> faults(seeds.size());

  parallel_for(seeds.size(), spec.threads, [&](std::size_t idx) {
    CdInstance inst = make_cd_instance(seeds[idx]);
    RefineState state = inst.state;
    const std::size_t gi = inst.probe_group;

    const ScaleUpdate upd = cd_update_scale(state, gi);
    const double s_cd = upd.new_scale;

    RefineState pre = inst.state;
    const ScanSpec scan = ScanSpec{pre.scales[static_cast<Eigen::Index>(gi)],
                                   2.0 * std::max(1.0, std::abs(pre.scales[static_cast<Eigen::Index>(gi)])),
                                   spec.scan_resolution};
    const double s_scan = scan_minimize_scale(pre, gi, scan);

    if (std::abs(s_cd - s_scan) > 2.0 * spec.scan_resolution) {
      faults[idx] = detail::cat("seed ", seeds[idx], ": |cd - scan| = ",
                                std::abs(s_cd - s_scan));
      return;
    }

    const double loss = layer_loss(state);
    const double h = 1e-6 * std::max(1.0, std::abs(s_cd));
    const double fd =
        (layer_loss_at(state, gi, s_cd + h) - layer_loss_at(state, gi, s_cd - h)) / (2.0 * h);
    if (std::abs(fd) > 1e-4 * std::max(1.0, std::abs(loss)))
      faults[idx] = detail::cat("seed ", seeds[idx], ": derivative at s* = ", fd);
  });

  int bad = 0;
  for (const auto& f : faults)
    if (!f.empty()) {
      ++bad;
      report.violations.push_back({"cd_vs_scan", f});
    }
  detail::add_check(report, "cd_vs_scan", static_cast<int>(seeds.size()), bad);
}

// Loss never increases across individual CD updates (two sweeps).
inline void verify_monotonicity(const VerifySpec& spec, VerifyReport& report) {
  int bad = 0;
  int instances = 0;
  for (std::uint64_t s = spec.seed; s < spec.seed + static_cast<std::uint64_t>(spec.cd_instances);
       ++s) {
    CdInstance inst = make_cd_instance(s);
    RefineState state = inst.state;
    const RefineReport rep = refine_scales(state, 2);
    ++instances;
    for (std::size_t i = 1; i < rep.losses.size(); ++i) {
      const double prev = rep.losses[i - 1];
      if (rep.losses[i] > prev + 1e-9 * std::abs(prev)) {
        ++bad;
        report.violations.push_back(
            {"monotonicity", detail::cat("seed ", s, ": update ", i, " raised loss ", prev,
                                         " -> ", rep.losses[i])});
        break;
      }
    }
  }
  detail::add_check(report, "monotonicity", instances, bad);
}

// Hessian-form loss == sample-form loss minus its scale-independent constant
// when H and R come from the same batch.
inline void verify_loss_identity(const VerifySpec& spec, VerifyReport& report) {
  int bad = 0;
  for (int i = 0; i < spec.identity_batches; ++i) {
    GaussianSampler rng(mix_seed(spec.seed, 0x1de0 + static_cast<std::uint64_t>(i)));
    const Eigen::Index d = 4 + static_cast<Eigen::Index>(rng.next_u64() % 13);
    const Eigen::Index n = (i % 2 == 0) ? 8 : 64;

    Eigen::MatrixXd fp_inputs(n, d);
    Eigen::MatrixXd inputs(n, d);
    for (Eigen::Index r = 0; r < n; ++r)
      for (Eigen::Index c = 0; c < d; ++c) {
        fp_inputs(r, c) = rng();
        inputs(r, c) = fp_inputs(r, c) + 0.2 * rng();
      }

    Eigen::VectorXd w(d), q(d);
    for (Eigen::Index c = 0; c < d; ++c) {
      w[c] = rng();
      q[c] = w[c] + 0.3 * rng();
    }

    const Eigen::MatrixXd hess = estimate_hessian(inputs);
    const Eigen::MatrixXd dev = estimate_deviation_correlation(inputs, fp_inputs);

    const Eigen::VectorXd r = q - w;
    const double hessian_form = r.dot(hess * r) + 2.0 * w.dot(dev * r);
    const double constant = ((inputs - fp_inputs) * w).squaredNorm() / static_cast<double>(n);
    const double sample_form = sample_loss(q, w, inputs, fp_inputs) - constant;

    const double denom = std::max({std::abs(hessian_form), std::abs(sample_form), 1e-12});
    if (std::abs(hessian_form - sample_form) > 1e-8 * denom) {
      ++bad;
      report.violations.push_back(
          {"loss_identity", detail::cat("batch ", i, ": hessian form ", hessian_form,
                                        " vs sample form ", sample_form)});
    }
  }
  detail::add_check(report, "loss_identity", spec.identity_batches, bad);
}

struct SandwichLosses {
  double exhaustive = 0.0;
  double compensated = 0.0;
  double nearest = 0.0;
};

inline SandwichLosses sandwich_losses(std::uint64_t seed) {
  GaussianSampler rng(mix_seed(seed, 0xab));
  const Eigen::Index d = 3;
  const int bits = 2;
  Eigen::VectorXd w(d);
  for (Eigen::Index i = 0; i < d; ++i) w[i] = rng();
  Eigen::MatrixXd a(d, d);
  for (Eigen::Index r = 0; r < d; ++r)
    for (Eigen::Index c = 0; c < d; ++c) a(r, c) = rng();
  const Eigen::MatrixXd hess =
      a.transpose() * a / static_cast<double>(d) + 0.05 * Eigen::MatrixXd::Identity(d, d);

  const GroupPartition partition = GroupPartition::make(3, 3);
  GroupGrid grid =
      init_layer_scales(w.transpose(), partition, bits, GridSearchSpec{20, 0.8}, false, nullptr);

  const QuantizedLayer gptq = gptq_quantize_layer(w.transpose(), grid, hess);
  const QuantizedLayer rtn = rtn_quantize_layer(w.transpose(), grid);
  const ExhaustiveResult exh = exhaustive_best_integers(w, grid, 0, hess);

  SandwichLosses out;
  out.exhaustive = exh.loss;
  out.compensated = quadratic_loss(dequantize_row(gptq.w_int, gptq.grid, 0), w, hess);
  out.nearest = quadratic_loss(dequantize_row(rtn.w_int, rtn.grid, 0), w, hess);
  return out;
}

// exhaustive <= compensated always; compensated <= nearest on the pinned set.
inline void verify_exhaustive_sandwich(VerifyReport& report) {
  int bad = 0;
  int instances = 0;
  for (std::uint64_t seed : kSandwichSeeds) {
    const SandwichLosses l = sandwich_losses(seed);
    ++instances;
    const double tol = 1e-12 * std::max(1.0, l.nearest);
    if (l.exhaustive > l.compensated + tol || l.exhaustive > l.nearest + tol) {
      ++bad;
      report.violations.push_back(
          {"exhaustive_sandwich",
           detail::cat("seed ", seed, ": enumeration loss ", l.exhaustive,
                       " above a method loss (", l.compensated, ", ", l.nearest, ")")});
      continue;
    }
    if (l.compensated > l.nearest + tol) {
      ++bad;
      report.violations.push_back(
          {"exhaustive_sandwich", detail::cat("seed ", seed, ": compensated loss ",
                                              l.compensated, " above nearest ", l.nearest)});
    }
  }
  detail::add_check(report, "exhaustive_sandwich", instances, bad);
}

// With H = I the compensated quantizer must equal plain rounding bit for bit.
inline void verify_identity_hessian_matches_rtn(const VerifySpec& spec, VerifyReport& report) {
  GaussianSampler rng(mix_seed(spec.seed, 0x247));
  const Eigen::Index rows = 8, d = 12;
  Eigen::MatrixXd w(rows, d);
  for (Eigen::Index r = 0; r < rows; ++r)
    for (Eigen::Index c = 0; c < d; ++c) w(r, c) = rng();

  const GroupPartition partition = GroupPartition::make(12, 4);
  GroupGrid grid =
      init_layer_scales(w, partition, 3, GridSearchSpec{20, 0.8}, false, nullptr);
  const Eigen::MatrixXd identity = Eigen::MatrixXd::Identity(d, d);
  const QuantizedLayer gptq = gptq_quantize_layer(w, grid, identity);
  const QuantizedLayer rtn = rtn_quantize_layer(w, grid);

  const bool equal = (gptq.w_int.array() == rtn.w_int.array()).all();
  if (!equal)
    report.violations.push_back(
        {"identity_hessian_rtn", "compensated codes differ from nearest rounding under H = I"});
  detail::add_check(report, "identity_hessian_rtn", 1, equal ? 0 : 1);
}

inline VerifyReport run_verification(const VerifySpec& spec) {
  const auto t0 = std::chrono::steady_clock::now();
  VerifyReport report;
  verify_cd_against_scan(spec, report);
  verify_monotonicity(spec, report);
  verify_loss_identity(spec, report);
  verify_exhaustive_sandwich(report);
  verify_identity_hessian_matches_rtn(spec, report);
  report.seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return report;
}

inline nlohmann::json verify_report_to_json(const VerifyReport& report) {
  nlohmann::json checks = nlohmann::json::array();
  for (const auto& c : report.checks)
    checks.push_back({{"name", c.name}, {"instances", c.instances}, {"violations", c.violations}});
  nlohmann::json violations = nlohmann::json::array();
  for (const auto& v : report.violations)
    violations.push_back({{"check", v.check}, {"detail", v.detail}});
  return {{"checks", checks},
          {"violations", violations},
          {"ok", report.ok()},
          {"timing", {{"seconds", report.seconds}}}};
}

} // namespace groupquant

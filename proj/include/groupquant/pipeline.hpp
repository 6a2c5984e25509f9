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
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "groupquant/errors.hpp"
#include "groupquant/gptq.hpp"
#include "groupquant/manifest.hpp"
#include "groupquant/parallel.hpp"
#include "groupquant/quantizer.hpp"
#include "groupquant/rng.hpp"
#include "groupquant/scale_init.hpp"
#include "groupquant/scale_refine.hpp"
#include "groupquant/statistics.hpp"

namespace groupquant {

enum class Method { gptq_default, two_stage, stage1_only, stage2_only };

inline const char* method_name(Method m) {
  switch (m) {
    case Method::gptq_default: return "gptq_default";
    case Method::two_stage: return "two_stage";
    case Method::stage1_only: return "stage1_only";
    case Method::stage2_only: return "stage2_only";
  }
  return "unknown";
}

inline Method method_from_name(const std::string& s) {
  if (s == "gptq_default") return Method::gptq_default;
  if (s == "two_stage") return Method::two_stage;
  if (s == "stage1_only") return Method::stage1_only;
  if (s == "stage2_only") return Method::stage2_only;
  throw config_error("unknown method: " + s);
}

struct PipelineConfig {
  int bits = 4;
  std::size_t group_size = 64;
  bool symmetric = false;
  double damp = 0.01;
  GridSearchSpec grid;
  int sweeps = 1;
  Method method = Method::two_stage;
  std::uint64_t seed = 0;
  int threads = 1;
  std::size_t eval_samples = 256;

  // stage 1: input-aware grid search; off means the plain weight-space search
  bool stage1() const { return method == Method::two_stage || method == Method::stage1_only; }
  // stage 2: coordinate-descent scale refinement after quantization
  bool stage2() const { return method == Method::two_stage || method == Method::stage2_only; }

  void validate() const {
    if (bits < 2 || bits > 16) throw config_error("bits must be in [2, 16]");
    if (group_size < 1) throw config_error("group_size must be >= 1");
    if (damp <= 0.0) throw config_error("damp must be > 0");
    if (sweeps < 1) throw config_error("sweeps must be >= 1");
    beta_candidates(grid); // validates M and max_shrink
  }
};

inline nlohmann::json config_to_json(const PipelineConfig& c) {
  return {{"bits", c.bits},
          {"group_size", c.group_size},
          {"symmetric", c.symmetric},
          {"damp", c.damp},
          {"grid_m", c.grid.num_candidates},
          {"max_shrink", c.grid.max_shrink},
          {"sweeps", c.sweeps},
          {"method", method_name(c.method)},
          {"seed", c.seed},
          {"threads", c.threads},
          {"eval_samples", c.eval_samples}};
}

struct LayerTiming {
  double stats = 0.0;
  double grid = 0.0;
  double quantize = 0.0;
  double refine = 0.0;
};

struct LayerReport {
  std::size_t layer = 0;
  bool input_aware_grid = false;
  double loss_pre_refine = 0.0; // layer loss right after quantization
  std::optional<double> loss_after_stage2;
  std::size_t skips = 0;
  std::size_t clamps = 0;
  LayerTiming timing;
};

struct EvalMetrics {
  double final_mse = 0.0;
  std::vector<double> per_layer_true_loss;
  double total_true_loss = 0.0;
};

struct RunReport {
  nlohmann::json config;
  std::vector<LayerReport> layers;
  EvalMetrics heldout;
  double seconds_total = 0.0;
};

struct QuantizedModel {
  ModelManifest manifest;
  std::vector<QuantizedLayer> layers;

  std::vector<Activation> activations() const {
    std::vector<Activation> a;
    a.reserve(manifest.layers.size());
    for (const auto& l : manifest.layers) a.push_back(l.activation);
    return a;
  }
};

inline std::vector<Eigen::MatrixXd> dequantized_weights(const QuantizedModel& qm) {
  std::vector<Eigen::MatrixXd> out;
  out.reserve(qm.layers.size());
  for (const auto& l : qm.layers) out.push_back(dequantize_layer(l));
  return out;
}

// ---- forward pass ----

inline Eigen::MatrixXd apply_activation(Eigen::MatrixXd values, Activation act) {
  if (act == Activation::relu) return values.cwiseMax(0.0);
  return values;
}

// layer_inputs[k] is what layer k consumes (post-activation of layer k-1);
// output is the final model output.
struct ForwardTrace {
  std::vector<Eigen::MatrixXd> layer_inputs;
  Eigen::MatrixXd output;
};

inline ForwardTrace forward(const std::vector<Eigen::MatrixXd>& weights,
                            const std::vector<Activation>& activations,
                            const Eigen::MatrixXd& inputs) {
  if (weights.size() != activations.size())
    throw config_error("forward: weights/activations length mismatch");
  ForwardTrace trace;
  trace.layer_inputs.reserve(weights.size());
  Eigen::MatrixXd cur = inputs;
  for (std::size_t k = 0; k < weights.size(); ++k) {
    if (cur.cols() != weights[k].cols())
      throw config_error("forward: layer " + std::to_string(k) + " expects " +
                         std::to_string(weights[k].cols()) + " inputs, got " +
                         std::to_string(cur.cols()));
    trace.layer_inputs.push_back(cur);
    cur = apply_activation(cur * weights[k].transpose(), activations[k]);
  }
  trace.output = std::move(cur);
  return trace;
}

inline ForwardTrace forward(const Model& model, const Eigen::MatrixXd& inputs) {
  return forward(model.weights, model.activations(), inputs);
}

inline ForwardTrace forward(const QuantizedModel& model, const Eigen::MatrixXd& inputs) {
  return forward(dequantized_weights(model), model.activations(), inputs);
}

// ---- metrics ----

// Per-layer true output error E||q^T X - w^T X~||^2 on the given inputs (the
// X stream comes from the quantized model's own forward pass), plus final
// output MSE. All entries are zero when the models agree exactly.
inline EvalMetrics evaluate(const Model& fp, const QuantizedModel& quantized,
                            const Eigen::MatrixXd& inputs) {
  if (fp.weights.size() != quantized.layers.size())
    throw config_error("evaluate: model layer counts differ");
  const std::vector<Eigen::MatrixXd> qw = dequantized_weights(quantized);
  const ForwardTrace fp_trace = forward(fp, inputs);
  const ForwardTrace q_trace = forward(qw, quantized.activations(), inputs);

  EvalMetrics metrics;
  const double n = static_cast<double>(inputs.rows());
  for (std::size_t k = 0; k < fp.weights.size(); ++k) {
    const Eigen::MatrixXd fp_out = fp_trace.layer_inputs[k] * fp.weights[k].transpose();
    const Eigen::MatrixXd q_out = q_trace.layer_inputs[k] * qw[k].transpose();
    metrics.per_layer_true_loss.push_back((q_out - fp_out).squaredNorm() / n);
    metrics.total_true_loss += metrics.per_layer_true_loss.back();
  }
  metrics.final_mse = (q_trace.output - fp_trace.output).squaredNorm() /
                      static_cast<double>(fp_trace.output.size());
  return metrics;
}

// Sum over rows of the stage-2 objective (H form plus deviation term when
// present). Per-row terms are accumulated in row order regardless of thread
// count.
inline double total_layer_loss(const QuantizedLayer& layer, const Eigen::MatrixXd& weights,
                               const LayerStats& stats, int threads = 1) {
  std::vector<double> row_loss(static_cast<std::size_t>(weights.rows()), 0.0);
  const Eigen::MatrixXd* dev = stats.deviation ? &*stats.deviation : nullptr;
  parallel_for(static_cast<std::size_t>(weights.rows()), threads, [&](std::size_t r) {
    const auto row = static_cast<Eigen::Index>(r);
    const RefineState state = make_refine_state(
        weights.row(row).transpose(), layer.w_int.row(row).transpose(),
        layer.grid.zeros.row(row).transpose(), layer.grid.scales.row(row).transpose(),
        layer.grid.partition, &stats.hessian, dev);
    row_loss[r] = layer_loss(state);
  });
  double total = 0.0;
  for (double l : row_loss) total += l;
  return total;
}

// ---- the sequential pipeline ----

struct QuantizeResult {
  QuantizedModel model;
  RunReport report;
};

namespace pipeline_detail {

inline constexpr std::uint64_t kHeldoutStream = 0xe5a1;

inline double seconds_since(const std::chrono::steady_clock::time_point& t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

} // namespace pipeline_detail

// Quantizes layers in order. For layer k the calibration batch is pushed
// through the FP prefix and the quantized-so-far prefix; the quantized-run
// inputs define H, and their deviation from the FP run defines R (absent for
// the first layer, where the two streams coincide).
inline QuantizeResult quantize_model(const Model& model, const Eigen::MatrixXd& calibration,
                                     const PipelineConfig& config) {
  config.validate();
  validate_manifest(model.manifest);
  if (calibration.rows() < 1) throw config_error("empty calibration");
  if (calibration.cols() != static_cast<Eigen::Index>(model.manifest.layers.front().in_dim))
    throw config_error("calibration width does not match model input dimension");

  const auto run_start = std::chrono::steady_clock::now();
  QuantizeResult result;
  result.report.config = config_to_json(config);

  Eigen::MatrixXd fp_inputs = calibration;
  Eigen::MatrixXd q_inputs = calibration;

  for (std::size_t k = 0; k < model.weights.size(); ++k) {
    try {
      const Eigen::MatrixXd& weights = model.weights[k];
      const std::size_t d = static_cast<std::size_t>(weights.cols());
      const GroupPartition partition =
          GroupPartition::make(d, std::min<std::size_t>(config.group_size, d));

      LayerReport lr;
      lr.layer = k;
      lr.input_aware_grid = config.stage1();

      auto t0 = std::chrono::steady_clock::now();
      LayerStats stats;
      stats.hessian = dampen(estimate_hessian(q_inputs), config.damp, &stats.damp_lambda);
      stats.n_samples = static_cast<std::size_t>(q_inputs.rows());
      if (k > 0) stats.deviation = estimate_deviation_correlation(q_inputs, fp_inputs);
      lr.timing.stats = pipeline_detail::seconds_since(t0);

      t0 = std::chrono::steady_clock::now();
      GroupGrid grid =
          init_layer_scales(weights, partition, config.bits, config.grid, config.symmetric,
                            config.stage1() ? &stats.hessian : nullptr, config.threads);
      lr.timing.grid = pipeline_detail::seconds_since(t0);

      t0 = std::chrono::steady_clock::now();
      QuantizedLayer layer =
          gptq_quantize_layer(weights, std::move(grid), stats.hessian, config.threads);
      lr.timing.quantize = pipeline_detail::seconds_since(t0);

      lr.loss_pre_refine = total_layer_loss(layer, weights, stats, config.threads);

      if (config.stage2()) {
        t0 = std::chrono::steady_clock::now();
        LayerRefineResult refined =
            refine_layer(layer, weights, stats, config.sweeps, config.threads);
        layer = std::move(refined.layer);
        lr.loss_after_stage2 = refined.loss_after;
        lr.skips = refined.n_skips;
        lr.clamps = refined.n_clamps;
        lr.timing.refine = pipeline_detail::seconds_since(t0);
      }

      const Eigen::MatrixXd deq = dequantize_layer(layer);
      const Activation act = model.manifest.layers[k].activation;
      q_inputs = apply_activation(q_inputs * deq.transpose(), act);
      fp_inputs = apply_activation(fp_inputs * weights.transpose(), act);

      result.model.layers.push_back(std::move(layer));
      result.report.layers.push_back(std::move(lr));
    } catch (const io_error&) {
      throw;
    } catch (const std::exception& e) {
      throw numeric_error("layer " + std::to_string(k) + ": " + e.what());
    }
  }

  // manifest copy pointing at the quantized layer files
  result.model.manifest = model.manifest;
  for (std::size_t k = 0; k < result.model.manifest.layers.size(); ++k)
    result.model.manifest.layers[k].weight_path = "layer_" + std::to_string(k) + ".q";
  result.model.manifest.metadata["quantized"] = "true";
  result.model.manifest.metadata["method"] = method_name(config.method);
  result.model.manifest.metadata["bits"] = std::to_string(config.bits);
  result.model.manifest.metadata["group_size"] = std::to_string(config.group_size);

  // held-out probe inputs, deliberately a different stream than any
  // calibration the generator hands out
  GaussianSampler erng(mix_seed(config.seed, pipeline_detail::kHeldoutStream));
  Eigen::MatrixXd eval_inputs(static_cast<Eigen::Index>(config.eval_samples),
                              calibration.cols());
  for (Eigen::Index r = 0; r < eval_inputs.rows(); ++r)
    for (Eigen::Index c = 0; c < eval_inputs.cols(); ++c) eval_inputs(r, c) = erng();
  result.report.heldout = evaluate(model, result.model, eval_inputs);

  result.report.seconds_total = pipeline_detail::seconds_since(run_start);
  return result;
}

// ---- report serialization ----

inline nlohmann::json report_to_json(const RunReport& report) {
  nlohmann::json layers = nlohmann::json::array();
  for (const auto& l : report.layers) {
    nlohmann::json lj{{"layer", l.layer},
                      {"grid", l.input_aware_grid ? "input_aware" : "weight_space"},
                      {"skips", l.skips},
                      {"clamps", l.clamps},
                      {"timing",
                       {{"stats", l.timing.stats},
                        {"grid", l.timing.grid},
                        {"quantize", l.timing.quantize},
                        {"refine", l.timing.refine}}}};
    if (l.input_aware_grid)
      lj["loss_after_stage1_grid"] = l.loss_pre_refine;
    else
      lj["loss_gptq_grid"] = l.loss_pre_refine;
    if (l.loss_after_stage2) lj["loss_after_stage2"] = *l.loss_after_stage2;
    layers.push_back(std::move(lj));
  }
  return {{"config", report.config},
          {"layers", layers},
          {"heldout",
           {{"final_mse_vs_fp", report.heldout.final_mse},
            {"per_layer_true_loss", report.heldout.per_layer_true_loss},
            {"total_true_loss", report.heldout.total_true_loss}}},
          {"timing", {{"seconds_total", report.seconds_total}}}};
}

inline void write_report_json(const RunReport& report, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw io_error("cannot open report for writing: " + path.string());
  out << report_to_json(report).dump(2) << '\n';
  if (!out) throw io_error("report write failed: " + path.string());
}

inline void write_report_csv(const RunReport& report, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw io_error("cannot open csv for writing: " + path.string());
  out << "layer,grid,loss_post_quantize,loss_after_stage2,skips,clamps,heldout_true_loss\n";
  for (std::size_t k = 0; k < report.layers.size(); ++k) {
    const auto& l = report.layers[k];
    out << l.layer << ',' << (l.input_aware_grid ? "input_aware" : "weight_space") << ','
        << l.loss_pre_refine << ',';
    if (l.loss_after_stage2) out << *l.loss_after_stage2;
    out << ',' << l.skips << ',' << l.clamps << ','
        << report.heldout.per_layer_true_loss.at(k) << '\n';
  }
  if (!out) throw io_error("csv write failed: " + path.string());
}

// ---- quantized model directory ----

inline void save_quantized_model(const QuantizedModel& qm, const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  for (std::size_t k = 0; k < qm.layers.size(); ++k)
    save_quantized_layer(qm.layers[k], dir / qm.manifest.layers[k].weight_path);
  save_manifest(qm.manifest, dir / "manifest.json");
}

inline QuantizedModel load_quantized_model(const std::filesystem::path& dir) {
  QuantizedModel qm;
  qm.manifest = load_manifest(dir / "manifest.json");
  for (std::size_t k = 0; k < qm.manifest.layers.size(); ++k) {
    const auto& l = qm.manifest.layers[k];
    QuantizedLayer layer = load_quantized_layer(dir / l.weight_path);
    if (layer.w_int.rows() != static_cast<Eigen::Index>(l.out_dim) ||
        layer.w_int.cols() != static_cast<Eigen::Index>(l.in_dim))
      throw config_error("quantized layer " + std::to_string(k) +
                         " does not match manifest dimensions");
    qm.layers.push_back(std::move(layer));
  }
  return qm;
}

// ---- ablation harness ----

struct CompareRow {
  Method method = Method::gptq_default;
  std::vector<double> per_layer_loss; // true output error on the probe inputs
  double total_loss = 0.0;
  double final_mse = 0.0;
};

struct CompareResult {
  std::vector<CompareRow> rows; // gptq_default, stage1_only, stage2_only, two_stage
};

// Runs all four method variants on identical inputs and scores each quantized
// model against the FP model on the calibration batch, so totals are
// comparable across methods.
inline CompareResult compare_methods(const Model& model, const Eigen::MatrixXd& calibration,
                                     PipelineConfig config) {
  static constexpr Method kOrder[] = {Method::gptq_default, Method::stage1_only,
                                      Method::stage2_only, Method::two_stage};
  CompareResult result;
  for (Method m : kOrder) {
    config.method = m;
    const QuantizeResult run = quantize_model(model, calibration, config);
    const EvalMetrics metrics = evaluate(model, run.model, calibration);
    result.rows.push_back(
        CompareRow{m, metrics.per_layer_true_loss, metrics.total_true_loss, metrics.final_mse});
  }
  return result;
}

inline nlohmann::json compare_to_json(const CompareResult& cmp) {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& r : cmp.rows)
    rows.push_back({{"method", method_name(r.method)},
                    {"per_layer_loss", r.per_layer_loss},
                    {"total_loss", r.total_loss},
                    {"final_mse", r.final_mse}});
  return {{"rows", rows}};
}

} // namespace groupquant

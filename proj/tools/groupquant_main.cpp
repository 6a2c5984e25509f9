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

// CLI front end. Exit codes: 0 success, 1 configuration error, 2 numeric
// failure, 3 I/O failure. Logs go to stderr; stdout carries only the
// aligned comparison table.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <set>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "groupquant/groupquant.hpp"

namespace {

int g_log_level = 1; // 0 quiet, 1 info, 2 debug

void log_info(const std::string& msg) {
  if (g_log_level >= 1) std::cerr << "[groupquant] " << msg << '\n';
}

void check_paths_distinct(const std::vector<std::string>& paths) {
  std::set<std::string> seen;
  for (const auto& p : paths) {
    if (p.empty()) continue;
    if (!seen.insert(p).second)
      throw groupquant::config_error("paths must be distinct: " + p + " appears twice");
  }
}

struct CommonArgs {
  std::string model;
  std::string calib;
  std::string out;
  std::string report;
  std::string csv;
  int bits = 4;
  std::size_t group_size = 64;
  bool symmetric = false;
  double damp = 0.01;
  int grid_m = 100;
  double max_shrink = 0.8;
  int sweeps = 1;
  std::string method = "two_stage";
  std::uint64_t seed = 0;
  int threads = 1;
};

groupquant::PipelineConfig to_config(const CommonArgs& a) {
  groupquant::PipelineConfig cfg;
  cfg.bits = a.bits;
  cfg.group_size = a.group_size;
  cfg.symmetric = a.symmetric;
  cfg.damp = a.damp;
  cfg.grid.num_candidates = a.grid_m;
  cfg.grid.max_shrink = a.max_shrink;
  cfg.sweeps = a.sweeps;
  cfg.method = groupquant::method_from_name(a.method);
  cfg.seed = a.seed;
  cfg.threads = a.threads;
  cfg.validate();
  return cfg;
}

void add_common_options(CLI::App* cmd, CommonArgs& a, bool with_method) {
  cmd->add_option("--model", a.model, "Model directory or manifest path")->required();
  cmd->add_option("--calib", a.calib, "Calibration tensor file (N x d_in)")->required();
  cmd->add_option("--report", a.report, "Report JSON output path")->required();
  cmd->add_option("--csv", a.csv, "Optional flat per-layer CSV output path");
  cmd->add_option("--bits", a.bits, "Target bit-width")->check(CLI::Range(2, 16));
  cmd->add_option("--group-size", a.group_size, "Weights per scale group")
      ->check(CLI::PositiveNumber);
  cmd->add_flag("--symmetric", a.symmetric, "Force zero-points to 0");
  cmd->add_option("--damp", a.damp, "Hessian damping fraction")->check(CLI::PositiveNumber);
  cmd->add_option("--grid-m", a.grid_m, "Clipping-factor grid candidates")
      ->check(CLI::PositiveNumber);
  cmd->add_option("--max-shrink", a.max_shrink, "Largest clipping shrink, in (0,1)");
  cmd->add_option("--sweeps", a.sweeps, "Refinement sweeps")->check(CLI::PositiveNumber);
  if (with_method)
    cmd->add_option("--method", a.method, "gptq_default | two_stage | stage1_only | stage2_only");
  cmd->add_option("--seed", a.seed, "Seed for held-out probe inputs");
  cmd->add_option("--threads", a.threads, "Worker cap (<=0 = hardware)");
}

Eigen::MatrixXd load_calibration(const std::string& path) {
  const groupquant::Tensor t = groupquant::load_tensor(path);
  if (t.rank() != 2)
    throw groupquant::config_error("calibration tensor must be rank 2, got rank " +
                                   std::to_string(t.rank()));
  return groupquant::to_matrix(t);
}

int run_quantize(const CommonArgs& a) {
  check_paths_distinct({a.model, a.calib, a.out, a.report, a.csv});
  if (a.out.empty()) throw groupquant::config_error("--out is required");
  const groupquant::PipelineConfig cfg = to_config(a);

  const groupquant::Model model = groupquant::load_model(a.model);
  const Eigen::MatrixXd calib = load_calibration(a.calib);
  log_info("quantizing " + std::to_string(model.weights.size()) + " layers, method " +
           groupquant::method_name(cfg.method));

  const groupquant::QuantizeResult result = groupquant::quantize_model(model, calib, cfg);
  groupquant::save_quantized_model(result.model, a.out);
  groupquant::write_report_json(result.report, a.report);
  if (!a.csv.empty()) groupquant::write_report_csv(result.report, a.csv);

  log_info("done; held-out final MSE vs FP = " +
           std::to_string(result.report.heldout.final_mse));
  return 0;
}

int run_compare(const CommonArgs& a) {
  check_paths_distinct({a.model, a.calib, a.report, a.csv});
  groupquant::PipelineConfig cfg = to_config(a);

  const groupquant::Model model = groupquant::load_model(a.model);
  const Eigen::MatrixXd calib = load_calibration(a.calib);
  log_info("running 4 method variants");
  const groupquant::CompareResult cmp = groupquant::compare_methods(model, calib, cfg);

  // aligned-text table; the only data this tool puts on stdout
  const std::size_t n_layers = cmp.rows.front().per_layer_loss.size();
  std::cout << std::left << std::setw(14) << "method";
  for (std::size_t k = 0; k < n_layers; ++k)
    std::cout << std::right << std::setw(14) << ("layer_" + std::to_string(k));
  std::cout << std::right << std::setw(14) << "total" << std::setw(14) << "final_mse" << '\n';
  for (const auto& row : cmp.rows) {
    std::cout << std::left << std::setw(14) << groupquant::method_name(row.method);
    std::cout << std::right << std::setprecision(5) << std::scientific;
    for (double l : row.per_layer_loss) std::cout << std::setw(14) << l;
    std::cout << std::setw(14) << row.total_loss << std::setw(14) << row.final_mse << '\n';
    std::cout.unsetf(std::ios::floatfield);
  }

  if (!a.report.empty()) {
    std::ofstream out(a.report, std::ios::trunc);
    if (!out) throw groupquant::io_error("cannot open report for writing: " + a.report);
    out << groupquant::compare_to_json(cmp).dump(2) << '\n';
  }
  if (!a.csv.empty()) {
    std::ofstream out(a.csv, std::ios::trunc);
    if (!out) throw groupquant::io_error("cannot open csv for writing: " + a.csv);
    out << "method,layer,true_loss\n";
    for (const auto& row : cmp.rows)
      for (std::size_t k = 0; k < row.per_layer_loss.size(); ++k)
        out << groupquant::method_name(row.method) << ',' << k << ','
            << row.per_layer_loss[k] << '\n';
  }
  return 0;
}

struct GenArgs {
  std::string out;
  std::size_t d_in = 8;
  std::size_t d_out = 8;
  std::size_t layers = 1;
  std::size_t samples = 64;
  std::string dist = "gauss";
  std::uint64_t seed = 0;
};

int run_gen_synthetic(const GenArgs& a) {
  groupquant::SyntheticSpec spec;
  spec.d_in = a.d_in;
  spec.d_out = a.d_out;
  spec.n_layers = a.layers;
  spec.n_samples = a.samples;
  spec.dist = groupquant::weight_dist_from_name(a.dist);
  spec.seed = a.seed;

  const groupquant::SyntheticModel sm = groupquant::gen_synthetic(spec);
  groupquant::save_model(sm.model, a.out);
  groupquant::save_tensor(groupquant::from_matrix(sm.calibration),
                          std::filesystem::path(a.out) / "calibration.qt");
  log_info("wrote " + std::to_string(a.layers) + "-layer model and calibration to " + a.out);
  return 0;
}

struct EvalArgs {
  std::string model;
  std::string quantized;
  std::string inputs;
  std::string report;
};

int run_eval(const EvalArgs& a) {
  check_paths_distinct({a.model, a.quantized, a.inputs, a.report});
  const groupquant::Model fp = groupquant::load_model(a.model);
  const groupquant::QuantizedModel qm = groupquant::load_quantized_model(a.quantized);
  const Eigen::MatrixXd inputs = load_calibration(a.inputs);
  const groupquant::EvalMetrics metrics = groupquant::evaluate(fp, qm, inputs);

  nlohmann::json j{{"final_mse_vs_fp", metrics.final_mse},
                   {"per_layer_true_loss", metrics.per_layer_true_loss},
                   {"total_true_loss", metrics.total_true_loss}};
  std::ofstream out(a.report, std::ios::trunc);
  if (!out) throw groupquant::io_error("cannot open report for writing: " + a.report);
  out << j.dump(2) << '\n';
  log_info("final MSE vs FP = " + std::to_string(metrics.final_mse));
  return 0;
}

struct VerifyArgs {
  std::string report = "verify_report.json";
  int cd_instances = 100;
  std::uint64_t seed = 20250810;
  int threads = 0;
};

int run_verify(const VerifyArgs& a) {
  groupquant::VerifySpec spec;
  spec.cd_instances = a.cd_instances;
  spec.seed = a.seed;
  spec.threads = a.threads;
  log_info("running oracle suite (" + std::to_string(a.cd_instances) + " CD instances)");
  const groupquant::VerifyReport report = groupquant::run_verification(spec);

  std::ofstream out(a.report, std::ios::trunc);
  if (!out) throw groupquant::io_error("cannot open report for writing: " + a.report);
  out << groupquant::verify_report_to_json(report).dump(2) << '\n';

  for (const auto& c : report.checks)
    log_info(c.name + ": " + std::to_string(c.instances - c.violations) + "/" +
             std::to_string(c.instances) + " ok");
  if (!report.ok()) {
    log_info("FAIL: " + std::to_string(report.violations.size()) + " violations, see " +
             a.report);
    return 2;
  }
  log_info("all oracle checks passed");
  return 0;
}

} // namespace

int main(int argc, char** argv) {
  CLI::App app{"Weight-only group-wise quantization toolkit"};
  app.require_subcommand(1);
  std::string log_level = "info";
  app.add_option("--log-level", log_level, "quiet | info | debug")->capture_default_str();

  CommonArgs quant_args;
  CLI::App* quantize = app.add_subcommand("quantize", "Quantize a model");
  add_common_options(quantize, quant_args, /*with_method=*/true);
  quantize->add_option("--out", quant_args.out, "Quantized model output directory")->required();

  CommonArgs compare_args;
  CLI::App* compare = app.add_subcommand("compare", "Tabulate all four method variants");
  add_common_options(compare, compare_args, /*with_method=*/false);

  GenArgs gen_args;
  CLI::App* gen = app.add_subcommand("gen-synthetic", "Generate a toy model + calibration");
  gen->add_option("--out", gen_args.out, "Output directory")->required();
  gen->add_option("--d-in", gen_args.d_in, "Input dimension")->check(CLI::PositiveNumber);
  gen->add_option("--d-out", gen_args.d_out, "Output dimension")->check(CLI::PositiveNumber);
  gen->add_option("--layers", gen_args.layers, "Layer count")->check(CLI::PositiveNumber);
  gen->add_option("--samples", gen_args.samples, "Calibration samples")
      ->check(CLI::PositiveNumber);
  gen->add_option("--dist", gen_args.dist, "gauss | gauss_outliers");
  gen->add_option("--seed", gen_args.seed, "Generator seed");

  EvalArgs eval_args;
  CLI::App* eval = app.add_subcommand("eval", "Score a quantized model against its FP source");
  eval->add_option("--model", eval_args.model, "FP model directory or manifest")->required();
  eval->add_option("--quantized", eval_args.quantized, "Quantized model directory")->required();
  eval->add_option("--inputs", eval_args.inputs, "Probe inputs tensor file")->required();
  eval->add_option("--report", eval_args.report, "Metrics JSON output path")->required();

  VerifyArgs verify_args;
  CLI::App* verify = app.add_subcommand("verify", "Run the brute-force oracle suite");
  verify->add_option("--report", verify_args.report, "Violations JSON output path")
      ->capture_default_str();
  verify->add_option("--cd-instances", verify_args.cd_instances, "CD instances to test")
      ->check(CLI::PositiveNumber);
  verify->add_option("--seed", verify_args.seed, "Instance seed base");
  verify->add_option("--threads", verify_args.threads, "Worker cap (<=0 = hardware)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }

  if (log_level == "quiet")
    g_log_level = 0;
  else if (log_level == "debug")
    g_log_level = 2;
  else if (log_level == "info")
    g_log_level = 1;
  else {
    std::cerr << "error: unknown log level: " << log_level << '\n';
    return 1;
  }

  try {
    if (quantize->parsed()) return run_quantize(quant_args);
    if (compare->parsed()) return run_compare(compare_args);
    if (gen->parsed()) return run_gen_synthetic(gen_args);
    if (eval->parsed()) return run_eval(eval_args);
    if (verify->parsed()) return run_verify(verify_args);
  } catch (const groupquant::config_error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  } catch (const groupquant::io_error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 3;
  } catch (const std::filesystem::filesystem_error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 3;
  } catch (const groupquant::numeric_error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  return 1;
}

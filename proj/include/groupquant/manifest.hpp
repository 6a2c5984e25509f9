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

#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "groupquant/errors.hpp"
#include "groupquant/tensor.hpp"

namespace groupquant {

enum class Activation { none, relu };

inline const char* activation_name(Activation a) {
  return a == Activation::relu ? "relu" : "none";
}

inline Activation activation_from_name(const std::string& s) {
  if (s == "none") return Activation::none;
  if (s == "relu") return Activation::relu;
  throw config_error("unknown activation: " + s);
}

struct LayerSpec {
  std::string weight_path;
  std::size_t in_dim = 0;
  std::size_t out_dim = 0;
  Activation activation = Activation::none;
};

// Ordered list of linear layers defining a toy sequential model.
struct ModelManifest {
  std::vector<LayerSpec> layers;
  std::map<std::string, std::string> metadata;
};

inline void validate_manifest(const ModelManifest& m) {
  if (m.layers.empty()) throw config_error("manifest has no layers");
  for (std::size_t k = 0; k < m.layers.size(); ++k) {
    const auto& l = m.layers[k];
    if (l.in_dim < 1 || l.out_dim < 1)
      throw config_error("layer " + std::to_string(k) + ": dimensions must be >= 1");
    if (k + 1 < m.layers.size() && l.out_dim != m.layers[k + 1].in_dim)
      throw config_error("layer " + std::to_string(k) + ": out_dim " +
                         std::to_string(l.out_dim) + " does not chain into layer " +
                         std::to_string(k + 1) + " in_dim " +
                         std::to_string(m.layers[k + 1].in_dim));
  }
}

inline nlohmann::json manifest_to_json(const ModelManifest& m) {
  nlohmann::json layers = nlohmann::json::array();
  for (const auto& l : m.layers) {
    layers.push_back({{"weight_path", l.weight_path},
                      {"in_dim", l.in_dim},
                      {"out_dim", l.out_dim},
                      {"activation", activation_name(l.activation)}});
  }
  return {{"layers", layers}, {"metadata", m.metadata}};
}

inline ModelManifest manifest_from_json(const nlohmann::json& j) {
  ModelManifest m;
  try {
    for (const auto& lj : j.at("layers")) {
      LayerSpec l;
      l.weight_path = lj.at("weight_path").get<std::string>();
      l.in_dim = lj.at("in_dim").get<std::size_t>();
      l.out_dim = lj.at("out_dim").get<std::size_t>();
      l.activation = activation_from_name(lj.at("activation").get<std::string>());
      m.layers.push_back(std::move(l));
    }
    if (j.contains("metadata"))
      m.metadata = j.at("metadata").get<std::map<std::string, std::string>>();
  } catch (const nlohmann::json::exception& e) {
    throw format_error(std::string("malformed manifest: ") + e.what());
  }
  validate_manifest(m);
  return m;
}

inline void save_manifest(const ModelManifest& m, const std::filesystem::path& path) {
  validate_manifest(m);
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw io_error("cannot open for writing: " + path.string());
  out << manifest_to_json(m).dump(2) << '\n';
  if (!out) throw io_error("write failed: " + path.string());
}

inline ModelManifest load_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw io_error("cannot open for reading: " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw format_error(path.string() + ": invalid JSON: " + e.what());
  }
  return manifest_from_json(j);
}

// A manifest with its weight matrices loaded and widened to f64. Each weight
// matrix is (out_dim x in_dim); row r is one output channel.
struct Model {
  ModelManifest manifest;
  std::vector<Eigen::MatrixXd> weights;

  std::vector<Activation> activations() const {
    std::vector<Activation> a;
    a.reserve(manifest.layers.size());
    for (const auto& l : manifest.layers) a.push_back(l.activation);
    return a;
  }
};

// `path` may be a manifest file or a directory containing manifest.json;
// weight paths resolve relative to the manifest's directory.
inline Model load_model(const std::filesystem::path& path) {
  namespace fs = std::filesystem;
  fs::path manifest_path = path;
  if (fs::is_directory(path)) manifest_path = path / "manifest.json";

  Model model;
  model.manifest = load_manifest(manifest_path);
  const fs::path base = manifest_path.parent_path();
  for (std::size_t k = 0; k < model.manifest.layers.size(); ++k) {
    const auto& l = model.manifest.layers[k];
    const Tensor t = load_tensor(base / l.weight_path);
    if (t.rank() != 2 || t.dim(0) != l.out_dim || t.dim(1) != l.in_dim)
      throw config_error("layer " + std::to_string(k) + " weight file shape does not match (" +
                         std::to_string(l.out_dim) + ", " + std::to_string(l.in_dim) + ")");
    model.weights.push_back(to_matrix(t));
  }
  return model;
}

inline void save_model(const Model& model, const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  for (std::size_t k = 0; k < model.manifest.layers.size(); ++k)
    save_tensor(from_matrix(model.weights[k]), dir / model.manifest.layers[k].weight_path);
  save_manifest(model.manifest, dir / "manifest.json");
}

} // namespace groupquant

#pragma once

#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "mmsurv/model.hpp"

namespace mmsurv {

inline nlohmann::ordered_json model_config_to_json(const ModelConfig& c) {
  nlohmann::ordered_json j;
  j["resnet_depth"] = c.resnet_depth;
  j["use_image"] = c.use_image;
  j["use_clinical"] = c.use_clinical;
  j["image_proj_dim"] = c.image_proj_dim;
  j["clinical_dim"] = c.clinical_dim;
  j["head_hidden"] = c.head_hidden;
  j["lambda"] = c.lambda;
  j["base_channels"] = c.base_channels;
  j["volume_shape"] = {c.volume_shape[0], c.volume_shape[1], c.volume_shape[2]};
  return j;
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.resnet_depth = j.at("resnet_depth").get<int>();
  c.use_image = j.at("use_image").get<bool>();
  c.use_clinical = j.at("use_clinical").get<bool>();
  c.image_proj_dim = j.at("image_proj_dim").get<int64_t>();
  c.clinical_dim = j.at("clinical_dim").get<int64_t>();
  c.head_hidden = j.at("head_hidden").get<bool>();
  c.lambda = j.at("lambda").get<double>();
  c.base_channels = j.at("base_channels").get<int64_t>();
  const auto vs = j.at("volume_shape");
  c.volume_shape = {vs[0].get<int64_t>(), vs[1].get<int64_t>(), vs[2].get<int64_t>()};
  c.validate();
  return c;
}

/// Checkpoint = <prefix>.json (manifest: architecture echo plus named tensor
/// shapes in order) + <prefix>.bin (raw little-endian float32, manifest
/// order). Parameters first, then batch-norm running statistics. `pipeline`
/// carries fitted preprocessing state (label/clinical statistics) so the
/// checkpoint can score new manifests on its own.
template <class Scalar>
void save_checkpoint(const std::filesystem::path& prefix, MultimodalModel<Scalar>& model,
                     const nlohmann::ordered_json& pipeline = nlohmann::ordered_json::object()) {
  nlohmann::ordered_json manifest;
  manifest["format"] = "mmsurv-checkpoint";
  manifest["version"] = 1;
  manifest["model"] = model_config_to_json(model.config);
  if (!pipeline.empty()) manifest["pipeline"] = pipeline;
  manifest["tensors"] = nlohmann::ordered_json::array();

  std::ofstream blob(prefix.string() + ".bin", std::ios::binary);
  if (!blob) throw DataError("save_checkpoint: cannot write " + prefix.string() + ".bin");
  auto dump = [&](const std::string& name, const Scalar* data, const Shape& shape,
                  int64_t numel) {
    nlohmann::ordered_json t;
    t["name"] = name;
    t["shape"] = shape;
    manifest["tensors"].push_back(t);
    for (int64_t i = 0; i < numel; ++i) {
      const float f = static_cast<float>(data[i]);
      blob.write(reinterpret_cast<const char*>(&f), sizeof(float));
    }
  };
  for (auto& [name, t] : model.named_parameters()) dump(name, t.data(), t.shape(), t.numel());
  for (auto& [name, v] : model.named_buffers())
    dump(name, v->data(), Shape{static_cast<int64_t>(v->size())},
         static_cast<int64_t>(v->size()));
  if (!blob) throw DataError("save_checkpoint: short write");

  std::ofstream mf(prefix.string() + ".json");
  if (!mf) throw DataError("save_checkpoint: cannot write " + prefix.string() + ".json");
  mf << manifest.dump(2) << "\n";
}

inline nlohmann::json read_checkpoint_manifest(const std::filesystem::path& prefix) {
  std::ifstream mf(prefix.string() + ".json");
  if (!mf) throw DataError("checkpoint manifest not found: " + prefix.string() + ".json");
  nlohmann::json manifest;
  try {
    mf >> manifest;
  } catch (const nlohmann::json::exception& e) {
    throw DataError("checkpoint manifest is not valid JSON: " + std::string(e.what()));
  }
  if (manifest.value("format", "") != "mmsurv-checkpoint" || manifest.value("version", 0) != 1)
    throw DataError("not a supported checkpoint: " + prefix.string() + ".json");
  return manifest;
}

/// Validates every tensor name and shape against the model before reading a
/// single value; mismatches are reported together, by tensor name.
template <class Scalar>
void load_checkpoint(const std::filesystem::path& prefix, MultimodalModel<Scalar>& model) {
  const auto manifest = read_checkpoint_manifest(prefix);

  std::vector<std::pair<std::string, std::pair<Scalar*, int64_t>>> expected;
  std::vector<std::pair<std::string, Shape>> expected_shapes;
  for (auto& [name, t] : model.named_parameters()) {
    expected.emplace_back(name, std::make_pair(t.data(), t.numel()));
    expected_shapes.emplace_back(name, t.shape());
  }
  for (auto& [name, v] : model.named_buffers()) {
    expected.emplace_back(name, std::make_pair(v->data(), static_cast<int64_t>(v->size())));
    expected_shapes.emplace_back(name, Shape{static_cast<int64_t>(v->size())});
  }

  const auto& tensors = manifest.at("tensors");
  std::string problems;
  if (tensors.size() != expected.size())
    problems += "\n  tensor count " + std::to_string(tensors.size()) + " != expected " +
                std::to_string(expected.size());
  for (size_t i = 0; i < std::min(tensors.size(), expected.size()); ++i) {
    const std::string name = tensors[i].value("name", "");
    const Shape shape = tensors[i].at("shape").get<Shape>();
    if (name != expected_shapes[i].first)
      problems += "\n  tensor " + std::to_string(i) + ": name '" + name + "' != expected '" +
                  expected_shapes[i].first + "'";
    else if (shape != expected_shapes[i].second)
      problems += "\n  tensor '" + name + "': shape " + shape_str(shape) + " != expected " +
                  shape_str(expected_shapes[i].second);
  }
  if (!problems.empty())
    throw DataError("checkpoint " + prefix.string() + " does not match the model architecture:" +
                    problems);

  std::ifstream blob(prefix.string() + ".bin", std::ios::binary | std::ios::ate);
  if (!blob) throw DataError("checkpoint blob not found: " + prefix.string() + ".bin");
  int64_t total = 0;
  for (auto& [name, dst] : expected) total += dst.second;
  if (static_cast<int64_t>(blob.tellg()) != total * static_cast<int64_t>(sizeof(float)))
    throw DataError("checkpoint blob size does not match manifest for " + prefix.string());
  blob.seekg(0);
  for (auto& [name, dst] : expected) {
    for (int64_t i = 0; i < dst.second; ++i) {
      float f = 0;
      blob.read(reinterpret_cast<char*>(&f), sizeof(float));
      dst.first[i] = static_cast<Scalar>(f);
    }
  }
  if (!blob) throw DataError("checkpoint blob short read: " + prefix.string());
}

}  // namespace mmsurv

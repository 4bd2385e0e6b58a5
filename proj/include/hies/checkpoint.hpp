#pragma once

#include <fstream>
#include <string>

#include <json.hpp>

#include "hies/transformer.hpp"

namespace hies {

// Checkpoints are JSON: config plus one flat array per named parameter.
// nlohmann serializes doubles with shortest round-trip precision, so floats
// survive save/load bit-for-bit.

inline nlohmann::json config_to_json(const ModelConfig& c) {
  return nlohmann::json{{"num_layers", c.num_layers},
                        {"num_heads", c.num_heads},
                        {"d_model", c.d_model},
                        {"d_k", c.d_k},
                        {"d_v", c.d_v},
                        {"num_classes", c.num_classes},
                        {"max_seq_len", c.max_seq_len},
                        {"vocab_size", c.vocab_size},
                        {"loss_kind", c.loss_kind == LossKind::binary ? "binary" : "multiclass"},
                        {"seed", c.seed},
                        {"linear_head", c.linear_head}};
}

inline ModelConfig config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.num_layers = j.at("num_layers").get<int>();
  c.num_heads = j.at("num_heads").get<int>();
  c.d_model = j.at("d_model").get<int>();
  c.d_k = j.at("d_k").get<int>();
  c.d_v = j.at("d_v").get<int>();
  c.num_classes = j.at("num_classes").get<int>();
  c.max_seq_len = j.at("max_seq_len").get<int>();
  c.vocab_size = j.at("vocab_size").get<int>();
  const std::string kind = j.at("loss_kind").get<std::string>();
  if (kind == "binary") {
    c.loss_kind = LossKind::binary;
  } else if (kind == "multiclass") {
    c.loss_kind = LossKind::multiclass;
  } else {
    throw ConfigError("unknown loss_kind '" + kind + "'");
  }
  c.seed = j.at("seed").get<std::uint64_t>();
  c.linear_head = j.value("linear_head", false);
  return c;
}

inline nlohmann::json checkpoint_to_json(GatedTransformer& model) {
  nlohmann::json j;
  j["config"] = config_to_json(model.config());
  nlohmann::json params = nlohmann::json::object();
  for (auto& p : model.params()) params[p.name] = p.tensor->flat();
  j["params"] = params;
  return j;
}

inline GatedTransformer checkpoint_from_json(const nlohmann::json& j) {
  GatedTransformer model(config_from_json(j.at("config")));
  const auto& params = j.at("params");
  for (auto& p : model.params()) {
    if (!params.contains(p.name)) throw IoError("checkpoint missing parameter '" + p.name + "'");
    const auto vals = params.at(p.name).get<std::vector<double>>();
    if (vals.size() != p.tensor->size())
      throw IoError("checkpoint parameter '" + p.name + "' has " + std::to_string(vals.size()) +
                    " values, expected " + std::to_string(p.tensor->size()));
    p.tensor->flat() = vals;
  }
  return model;
}

inline void save_checkpoint(GatedTransformer& model, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  out << checkpoint_to_json(model).dump();
  if (!out) throw IoError("write failed for '" + path + "'");
}

inline GatedTransformer load_checkpoint(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open '" + path + "' for reading");
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw IoError("malformed checkpoint '" + path + "': " + e.what());
  }
  return checkpoint_from_json(j);
}

}  // namespace hies

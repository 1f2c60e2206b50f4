#pragma once

// The JSON document consumed by `rsbuilding train`.

#include <filesystem>
#include <fstream>
#include <string>

#include <json.hpp>

#include "rsbuilding/config.hpp"
#include "rsbuilding/data.hpp"
#include "rsbuilding/trainer.hpp"

namespace rsb {

struct RunPaths {
  std::string data;  // dataset directory or manifest
  std::string out;   // output directory for checkpoint and log

  bool operator==(const RunPaths&) const = default;
};

struct RunConfig {
  ModelConfig model;
  SceneSpec scene;
  TrainConfig train;
  AugmentConfig augment;
  RunPaths paths;

  void validate() const {
    model.validate();
    scene.validate();
    train.validate();
    augment.validate();
  }

  bool operator==(const RunConfig&) const = default;
};

inline void to_json(nlohmann::json& j, const RunPaths& p) { j = {{"data", p.data}, {"out", p.out}}; }

inline void from_json_fields(const nlohmann::json& j, RunPaths& p) {
  j.at("data").get_to(p.data);
  j.at("out").get_to(p.out);
}

inline void to_json(nlohmann::json& j, const RunConfig& c) {
  j = {{"model", c.model}, {"scene", c.scene}, {"train", c.train}, {"augment", c.augment}, {"paths", c.paths}};
}

inline void from_json_fields(const nlohmann::json& j, RunConfig& c) {
  detail::read_fields(j.at("model"), c.model, "model");
  detail::read_fields(j.at("scene"), c.scene, "scene");
  detail::read_fields(j.at("train"), c.train, "train");
  detail::read_fields(j.at("augment"), c.augment, "augment");
  detail::read_fields(j.at("paths"), c.paths, "paths");
}

// Missing sections and keys keep their defaults; unknown keys are rejected.
inline RunConfig run_config_from_json(const nlohmann::json& j) {
  RunConfig c;
  detail::read_fields(j, c, "run config");
  c.validate();
  return c;
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config '" + path.string() + "'");
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config '" + path.string() + "': " + e.what());
  }
  return run_config_from_json(j);
}

}  // namespace rsb

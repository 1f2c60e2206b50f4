#pragma once

#include <cstddef>
#include <string>

#include <json.hpp>

#include "rsbuilding/errors.hpp"
#include "rsbuilding/tensor.hpp"

namespace rsb {

// Architecture hyperparameters. Defaults are the desk-scale toy model
// (64x64 inputs); the full-scale model uses image_size 512.
struct ModelConfig {
  std::size_t image_size = 64;
  std::size_t patch_size = 16;
  std::size_t enc_dim = 32;
  std::size_t enc_depth = 2;
  std::size_t enc_heads = 4;
  std::size_t enc_mlp_ratio = 4;
  std::size_t pyramid_dim = 16;  // d, shared channel width of the pyramid
  std::size_t decoder_heads = 4;
  std::size_t decoder_mlp_ratio = 4;
  std::size_t dense_dim = 64;  // channel width of the dense task features
  double layer_norm_eps = 1e-5;
  bool enable_enhancer = true;
  bool dual_path_decoder = true;
  bool multi_level_decoding = true;
  ElemKind elem_kind = ElemKind::f32;

  std::size_t grid() const { return image_size / patch_size; }
  std::size_t num_patches() const { return grid() * grid(); }
  // Side length of pyramid level i (1-based): image_size / 2^(i+1).
  std::size_t level_side(std::size_t level) const { return image_size >> (level + 1); }

  void validate() const {
    auto fail = [](const std::string& m) { throw ConfigError("model config: " + m); };
    if (image_size == 0 || image_size % 32 != 0) fail("image_size must be a positive multiple of 32");
    if (patch_size != 16) fail("patch_size must be 16 (the pyramid is built from stride-16 tokens)");
    if (enc_dim == 0 || enc_heads == 0 || enc_dim % enc_heads != 0) fail("enc_dim must be divisible by enc_heads");
    if (pyramid_dim == 0 || decoder_heads == 0 || pyramid_dim % decoder_heads != 0)
      fail("pyramid_dim must be divisible by decoder_heads");
    if (enc_mlp_ratio == 0 || decoder_mlp_ratio == 0) fail("mlp ratios must be positive");
    if (dense_dim == 0) fail("dense_dim must be positive");
    if (!(layer_norm_eps > 0)) fail("layer_norm_eps must be positive");
  }

  bool operator==(const ModelConfig&) const = default;
};

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{{"image_size", c.image_size},
                     {"patch_size", c.patch_size},
                     {"enc_dim", c.enc_dim},
                     {"enc_depth", c.enc_depth},
                     {"enc_heads", c.enc_heads},
                     {"enc_mlp_ratio", c.enc_mlp_ratio},
                     {"pyramid_dim", c.pyramid_dim},
                     {"decoder_heads", c.decoder_heads},
                     {"decoder_mlp_ratio", c.decoder_mlp_ratio},
                     {"dense_dim", c.dense_dim},
                     {"layer_norm_eps", c.layer_norm_eps},
                     {"enable_enhancer", c.enable_enhancer},
                     {"dual_path_decoder", c.dual_path_decoder},
                     {"multi_level_decoding", c.multi_level_decoding},
                     {"elem_kind", to_string(c.elem_kind)}};
}

namespace detail {

// Copies every key of `j` into the matching field, rejecting unknown keys.
// Missing keys keep their defaults.
template <typename Struct>
void read_fields(const nlohmann::json& j, Struct& target, const char* what) {
  if (!j.is_object()) throw ConfigError(std::string(what) + ": expected a JSON object");
  nlohmann::json defaults = target;
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (!defaults.contains(it.key())) {
      throw ConfigError(std::string(what) + ": unknown key '" + it.key() + "'");
    }
    defaults[it.key()] = it.value();
  }
  try {
    from_json_fields(defaults, target);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string(what) + ": " + e.what());
  }
}

}  // namespace detail

inline void from_json_fields(const nlohmann::json& j, ModelConfig& c) {
  j.at("image_size").get_to(c.image_size);
  j.at("patch_size").get_to(c.patch_size);
  j.at("enc_dim").get_to(c.enc_dim);
  j.at("enc_depth").get_to(c.enc_depth);
  j.at("enc_heads").get_to(c.enc_heads);
  j.at("enc_mlp_ratio").get_to(c.enc_mlp_ratio);
  j.at("pyramid_dim").get_to(c.pyramid_dim);
  j.at("decoder_heads").get_to(c.decoder_heads);
  j.at("decoder_mlp_ratio").get_to(c.decoder_mlp_ratio);
  j.at("dense_dim").get_to(c.dense_dim);
  j.at("layer_norm_eps").get_to(c.layer_norm_eps);
  j.at("enable_enhancer").get_to(c.enable_enhancer);
  j.at("dual_path_decoder").get_to(c.dual_path_decoder);
  j.at("multi_level_decoding").get_to(c.multi_level_decoding);
  c.elem_kind = parse_elem_kind(j.at("elem_kind").get<std::string>());
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  detail::read_fields(j, c, "model config");
  c.validate();
  return c;
}

}  // namespace rsb

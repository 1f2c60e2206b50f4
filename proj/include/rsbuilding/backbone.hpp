#pragma once

// Siamese ViT-style encoder and the multi-level feature enhancer.

#include <array>
#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "rsbuilding/config.hpp"
#include "rsbuilding/layers.hpp"
#include "rsbuilding/ops.hpp"

namespace rsb {

template <Real T>
struct EncoderBlockParams {
  NormParams<T> norm1;
  AttentionParams<T> attn;
  NormParams<T> norm2;
  MlpParams<T> mlp;
};

template <Real T>
struct EnhancerParams {
  // Stride-4 branch: two stacked 2x2/stride-2 transposed convolutions.
  Tensor<T> up4_first, up4_first_bias, up4_second, up4_second_bias;
  // Stride-8 branch: one transposed convolution.
  Tensor<T> up8, up8_bias;
  // Final 1x1 convolution per level. With the enhancer disabled only a single
  // shared projection exists (index 0).
  std::vector<Tensor<T>> proj, proj_bias;
};

template <Real T>
struct BackboneParams {
  LinearParams<T> patch_embed;  // [p*p*3, enc_dim]
  Tensor<T> pos_table;          // [num_patches, enc_dim]
  std::vector<EncoderBlockParams<T>> blocks;
  EnhancerParams<T> enhancer;
};

// Four maps at strides 4, 8, 16, 32 (levels[0] is stride 4), width d.
template <Real T>
struct FeaturePyramid {
  std::array<Tensor<T>, 4> levels;
};

template <Real T>
BackboneParams<T> make_backbone_params(ParameterSet<T>& ps, const ModelConfig& cfg, RandomSource& rng) {
  BackboneParams<T> p;
  const std::size_t e = cfg.enc_dim;
  p.patch_embed = LinearParams<T>::make(ps, "backbone.patch_embed", cfg.patch_size * cfg.patch_size * 3, e, rng);
  p.pos_table = ps.add("backbone.pos_table", {cfg.num_patches(), e}, Init::zeros, rng);
  for (std::size_t b = 0; b < cfg.enc_depth; ++b) {
    const std::string n = "backbone.block" + std::to_string(b);
    p.blocks.push_back({NormParams<T>::make(ps, n + ".norm1", e, rng), AttentionParams<T>::make(ps, n + ".attn", e, rng),
                        NormParams<T>::make(ps, n + ".norm2", e, rng),
                        MlpParams<T>::make(ps, n + ".mlp", e, e * cfg.enc_mlp_ratio, rng)});
  }
  auto& en = p.enhancer;
  const std::size_t d = cfg.pyramid_dim;
  if (cfg.enable_enhancer) {
    en.up4_first = ps.add("enhancer.up4_first", {2, 2, e, e}, Init::trunc_normal, rng);
    en.up4_first_bias = ps.add("enhancer.up4_first_bias", {e}, Init::zeros, rng);
    en.up4_second = ps.add("enhancer.up4_second", {2, 2, e, e}, Init::trunc_normal, rng);
    en.up4_second_bias = ps.add("enhancer.up4_second_bias", {e}, Init::zeros, rng);
    en.up8 = ps.add("enhancer.up8", {2, 2, e, e}, Init::trunc_normal, rng);
    en.up8_bias = ps.add("enhancer.up8_bias", {e}, Init::zeros, rng);
    for (std::size_t i = 1; i <= 4; ++i) {
      const std::string n = "enhancer.proj" + std::to_string(i);
      en.proj.push_back(ps.add(n, {1, 1, e, d}, Init::trunc_normal, rng));
      en.proj_bias.push_back(ps.add(n + "_bias", {d}, Init::zeros, rng));
    }
  } else {
    en.proj.push_back(ps.add("enhancer.proj_shared", {1, 1, e, d}, Init::trunc_normal, rng));
    en.proj_bias.push_back(ps.add("enhancer.proj_shared_bias", {d}, Init::zeros, rng));
  }
  return p;
}

// [H, W, 3] image -> [(H/p)*(W/p), enc_dim] tokens with positions added.
template <Real T>
Tensor<T> patch_embed(const Tensor<T>& image, const BackboneParams<T>& p, const ModelConfig& cfg) {
  if (image.rank() != 3 || image.dim(0) != cfg.image_size || image.dim(1) != cfg.image_size || image.dim(2) != 3) {
    throw ShapeError("patch_embed: expected image [" + std::to_string(cfg.image_size) + "x" +
                     std::to_string(cfg.image_size) + "x3], got " + shape_str(image.shape()));
  }
  const auto tokens = apply(p.patch_embed, ops::patchify(image, cfg.patch_size));
  return ops::add(tokens, p.pos_table);
}

// Bilinearly resamples a square positional table [g*g, d] to [new_grid^2, d].
template <Real T>
Tensor<T> interpolate_position_encoding(const Tensor<T>& table, std::size_t new_grid) {
  if (table.rank() != 2) throw ShapeError("interpolate_position_encoding: table must be [tokens, dim]");
  const auto grid = static_cast<std::size_t>(std::llround(std::sqrt(static_cast<double>(table.dim(0)))));
  if (grid * grid != table.dim(0) || new_grid == 0) {
    throw ShapeError("interpolate_position_encoding: " + shape_str(table.shape()) + " is not a square grid");
  }
  const std::size_t d = table.dim(1);
  const auto map = ops::reshape(table, Shape{grid, grid, d});
  return ops::reshape(ops::bilinear_resize(map, new_grid, new_grid), Shape{new_grid * new_grid, d});
}

// Pre-norm transformer encoder. Returns the stride-16 map [H/16, W/16, enc_dim].
template <Real T>
Tensor<T> encode(const Tensor<T>& image, const BackboneParams<T>& p, const ModelConfig& cfg) {
  Tensor<T> x = patch_embed(image, p, cfg);
  for (const auto& block : p.blocks) {
    const auto n1 = apply(block.norm1, x, cfg.layer_norm_eps);
    x = ops::add(x, attention(n1, n1, block.attn, cfg.enc_heads));
    x = ops::add(x, apply(block.mlp, apply(block.norm2, x, cfg.layer_norm_eps)));
  }
  return ops::reshape(x, Shape{cfg.grid(), cfg.grid(), cfg.enc_dim});
}

namespace detail {
template <Real T>
Tensor<T> conv1x1(const Tensor<T>& x, const Tensor<T>& kernel, const Tensor<T>& bias) {
  return ops::add_lastdim(ops::conv2d(x, kernel), bias);
}
}  // namespace detail

// Stride-16 map -> four-level pyramid. Levels: two stacked transposed convs
// (stride 4), one transposed conv (stride 8), identity (stride 16), 2x2 max
// pool (stride 32), each followed by a 1x1 projection to width d. Without the
// enhancer every level is a bilinear resize followed by one shared projection.
template <Real T>
FeaturePyramid<T> enhance(const Tensor<T>& feature, const BackboneParams<T>& p, const ModelConfig& cfg) {
  const auto& en = p.enhancer;
  FeaturePyramid<T> pyr;
  if (cfg.enable_enhancer) {
    const auto up4a = ops::gelu(ops::add_lastdim(ops::transposed_conv2d(feature, en.up4_first), en.up4_first_bias));
    const auto up4 = ops::add_lastdim(ops::transposed_conv2d(up4a, en.up4_second), en.up4_second_bias);
    const auto up8 = ops::add_lastdim(ops::transposed_conv2d(feature, en.up8), en.up8_bias);
    pyr.levels[0] = detail::conv1x1(up4, en.proj[0], en.proj_bias[0]);
    pyr.levels[1] = detail::conv1x1(up8, en.proj[1], en.proj_bias[1]);
    pyr.levels[2] = detail::conv1x1(feature, en.proj[2], en.proj_bias[2]);
    pyr.levels[3] = detail::conv1x1(ops::max_pool2d(feature), en.proj[3], en.proj_bias[3]);
  } else {
    for (std::size_t i = 0; i < 4; ++i) {
      const std::size_t side = cfg.level_side(i + 1);
      pyr.levels[i] = detail::conv1x1(ops::bilinear_resize(feature, side, side), en.proj[0], en.proj_bias[0]);
    }
  }
  return pyr;
}

}  // namespace rsb

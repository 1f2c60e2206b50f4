#pragma once

// Task-prompt decoder: mixed cross-attention between three task queries and
// the dual-temporal tokens, dense feature assembly, and the dot-product
// segmentation head.

#include <array>
#include <cstddef>
#include <string>
#include <utility>
#include <vector>

#include "rsbuilding/config.hpp"
#include "rsbuilding/layers.hpp"
#include "rsbuilding/ops.hpp"

namespace rsb {

template <Real T>
struct TaskQueries {
  Tensor<T> e1, e2, e_cd;         // [d] task prompts
  Tensor<T> le1, le2;             // [d] temporal encodings
  std::array<Tensor<T>, 4> pe;    // per-level positional maps [side, side, d]
};

template <Real T>
struct DecoderLevelParams {
  NormParams<T> norm_self;
  AttentionParams<T> self_attn;
  NormParams<T> norm_cross;
  AttentionParams<T> queries_from_tokens;  // E <- T
  NormParams<T> norm_mlp;
  MlpParams<T> mlp;
  // T <- E; absent when the dual-path decoder is disabled.
  NormParams<T> norm_tokens;
  AttentionParams<T> tokens_from_queries;
};

template <Real T>
struct DenseParams {
  Tensor<T> reduce_kernel, reduce_bias;  // 1x1, (levels*d) -> dense_dim
  NormParams<T> reduce_norm;
  Tensor<T> fuse_kernel, fuse_bias;  // 3x3, dense_dim -> dense_dim
  NormParams<T> fuse_norm;
};

template <Real T>
struct DecoderParams {
  TaskQueries<T> queries;
  std::array<DecoderLevelParams<T>, 4> levels;
  DenseParams<T> dense;
  LinearParams<T> e_proj;  // d -> dense_dim
};

template <Real T>
struct DenseTaskFeatures {
  Tensor<T> f1, f2, f_cd;  // [H/4, W/4, dense_dim]; f_cd = f1 - f2
};

template <Real T>
struct MaskLogits {
  Tensor<T> bx1, bx2, cd;  // [H, W]
};

template <Real T>
DecoderParams<T> make_decoder_params(ParameterSet<T>& ps, const ModelConfig& cfg, RandomSource& rng) {
  DecoderParams<T> p;
  const std::size_t d = cfg.pyramid_dim;
  auto& q = p.queries;
  q.e1 = ps.add("decoder.query.e1", {d}, Init::trunc_normal, rng);
  q.e2 = ps.add("decoder.query.e2", {d}, Init::trunc_normal, rng);
  q.e_cd = ps.add("decoder.query.e_cd", {d}, Init::trunc_normal, rng);
  q.le1 = ps.add("decoder.temporal.le1", {d}, Init::trunc_normal, rng);
  q.le2 = ps.add("decoder.temporal.le2", {d}, Init::trunc_normal, rng);
  for (std::size_t i = 0; i < 4; ++i) {
    const std::size_t side = cfg.level_side(i + 1);
    q.pe[i] = ps.add("decoder.pe" + std::to_string(i + 1), {side, side, d}, Init::zeros, rng);
  }
  for (std::size_t i = 0; i < 4; ++i) {
    const std::string n = "decoder.level" + std::to_string(i + 1);
    auto& l = p.levels[i];
    l.norm_self = NormParams<T>::make(ps, n + ".norm_self", d, rng);
    l.self_attn = AttentionParams<T>::make(ps, n + ".self_attn", d, rng);
    l.norm_cross = NormParams<T>::make(ps, n + ".norm_cross", d, rng);
    l.queries_from_tokens = AttentionParams<T>::make(ps, n + ".queries_from_tokens", d, rng);
    l.norm_mlp = NormParams<T>::make(ps, n + ".norm_mlp", d, rng);
    l.mlp = MlpParams<T>::make(ps, n + ".mlp", d, d * cfg.decoder_mlp_ratio, rng);
    if (cfg.dual_path_decoder) {
      l.norm_tokens = NormParams<T>::make(ps, n + ".norm_tokens", d, rng);
      l.tokens_from_queries = AttentionParams<T>::make(ps, n + ".tokens_from_queries", d, rng);
    }
  }
  const std::size_t dense_in = (cfg.multi_level_decoding ? 4 : 1) * d;
  auto& dn = p.dense;
  dn.reduce_kernel = ps.add("decoder.dense.reduce", {1, 1, dense_in, cfg.dense_dim}, Init::trunc_normal, rng);
  dn.reduce_bias = ps.add("decoder.dense.reduce_bias", {cfg.dense_dim}, Init::zeros, rng);
  dn.reduce_norm = NormParams<T>::make(ps, "decoder.dense.reduce_norm", cfg.dense_dim, rng);
  dn.fuse_kernel = ps.add("decoder.dense.fuse", {3, 3, cfg.dense_dim, cfg.dense_dim}, Init::trunc_normal, rng);
  dn.fuse_bias = ps.add("decoder.dense.fuse_bias", {cfg.dense_dim}, Init::zeros, rng);
  dn.fuse_norm = NormParams<T>::make(ps, "decoder.dense.fuse_norm", cfg.dense_dim, rng);
  p.e_proj = LinearParams<T>::make(ps, "decoder.e_proj", d, cfg.dense_dim, rng);
  return p;
}

// E^0 = [e1; e2; e_cd], shape [3, d].
template <Real T>
Tensor<T> initial_task_embeddings(const TaskQueries<T>& q) {
  const std::size_t d = q.e1.dim(0);
  return ops::concat(std::vector<Tensor<T>>{ops::reshape(q.e1, Shape{1, d}), ops::reshape(q.e2, Shape{1, d}),
                                            ops::reshape(q.e_cd, Shape{1, d})},
                     0);
}

// Level-i token sequence: [flatten(F1 + PE + LE1); flatten(F2 + PE + LE2)],
// image-1 tokens first. `level` is 1-based.
template <Real T>
Tensor<T> build_tokens(std::size_t level, const Tensor<T>& f1, const Tensor<T>& f2, const TaskQueries<T>& q) {
  const auto& pe = q.pe.at(level - 1);
  if (f1.shape() != pe.shape() || f2.shape() != pe.shape()) {
    throw ShapeError("build_tokens: level " + std::to_string(level) + " expects maps " + shape_str(pe.shape()) +
                     ", got " + shape_str(f1.shape()) + " and " + shape_str(f2.shape()));
  }
  const std::size_t n = pe.dim(0) * pe.dim(1), d = pe.dim(2);
  const auto t1 = ops::reshape(ops::add_lastdim(ops::add(f1, pe), q.le1), Shape{n, d});
  const auto t2 = ops::reshape(ops::add_lastdim(ops::add(f2, pe), q.le2), Shape{n, d});
  return ops::concat(std::vector<Tensor<T>>{t1, t2}, 0);
}

// One mixed cross-attention level with pre-norm residual wiring:
//   E += SelfAttn(norm E);  E += CrossAttn(norm E, T);  E += MLP(norm E);
//   T += CrossAttn(norm T, E)   (dual-path only)
template <Real T>
std::pair<Tensor<T>, Tensor<T>> decode_level(const Tensor<T>& e_prev, const Tensor<T>& tokens,
                                             const DecoderLevelParams<T>& p, const ModelConfig& cfg) {
  if (e_prev.rank() != 2 || e_prev.dim(0) != 3 || e_prev.dim(1) != cfg.pyramid_dim) {
    throw ShapeError("decode_level: task embeddings must be [3x" + std::to_string(cfg.pyramid_dim) + "], got " +
                     shape_str(e_prev.shape()));
  }
  if (tokens.rank() != 2 || tokens.dim(1) != cfg.pyramid_dim) {
    throw ShapeError("decode_level: tokens must be [n x " + std::to_string(cfg.pyramid_dim) + "], got " +
                     shape_str(tokens.shape()));
  }
  const double eps = cfg.layer_norm_eps;
  const std::size_t heads = cfg.decoder_heads;
  Tensor<T> e = e_prev;
  const auto ns = apply(p.norm_self, e, eps);
  e = ops::add(e, attention(ns, ns, p.self_attn, heads));
  e = ops::add(e, attention(apply(p.norm_cross, e, eps), tokens, p.queries_from_tokens, heads));
  e = ops::add(e, apply(p.mlp, apply(p.norm_mlp, e, eps)));
  Tensor<T> t = tokens;
  if (cfg.dual_path_decoder) {
    t = ops::add(t, attention(apply(p.norm_tokens, t, eps), e, p.tokens_from_queries, heads));
  }
  return {e, t};
}

namespace detail {
template <Real T>
Tensor<T> conv_norm_relu(const Tensor<T>& x, const Tensor<T>& kernel, const Tensor<T>& bias,
                         const NormParams<T>& norm, double eps) {
  return ops::relu(apply(norm, ops::add_lastdim(ops::conv2d(x, kernel), bias), eps));
}
}  // namespace detail

// Updated level tokens (levels 1..4) -> dense task features at H/4.
template <Real T>
DenseTaskFeatures<T> assemble_dense(const std::array<Tensor<T>, 4>& tokens, const DenseParams<T>& p,
                                    const ModelConfig& cfg) {
  const std::size_t out_side = cfg.image_size / 4;
  const std::size_t d = cfg.pyramid_dim;
  std::array<std::vector<Tensor<T>>, 2> maps;
  const std::size_t first = cfg.multi_level_decoding ? 0 : 3;
  for (std::size_t i = first; i < 4; ++i) {
    const std::size_t side = cfg.level_side(i + 1);
    const std::size_t n = side * side;
    if (tokens[i].rank() != 2 || tokens[i].dim(0) != 2 * n || tokens[i].dim(1) != d) {
      throw ShapeError("assemble_dense: level " + std::to_string(i + 1) + " tokens have shape " +
                       shape_str(tokens[i].shape()));
    }
    const auto halves = ops::split(tokens[i], 0, {n, n});
    for (std::size_t img = 0; img < 2; ++img) {
      const auto map = ops::reshape(halves[img], Shape{side, side, d});
      maps[img].push_back(ops::bilinear_resize(map, out_side, out_side));
    }
  }
  std::array<Tensor<T>, 2> dense;
  for (std::size_t img = 0; img < 2; ++img) {
    const auto stacked = maps[img].size() == 1 ? maps[img].front() : ops::concat(maps[img], 2);
    const auto reduced = detail::conv_norm_relu(stacked, p.reduce_kernel, p.reduce_bias, p.reduce_norm,
                                                cfg.layer_norm_eps);
    dense[img] = detail::conv_norm_relu(reduced, p.fuse_kernel, p.fuse_bias, p.fuse_norm, cfg.layer_norm_eps);
  }
  return {dense[0], dense[1], ops::sub(dense[0], dense[1])};
}

// Per-pixel dot product of a [h, w, c] feature map with a [c] embedding
// (einsum "hwc,c->hw"), returned as [h, w, 1].
template <Real T>
Tensor<T> einsum_hwc_c(const Tensor<T>& features, const Tensor<T>& embedding) {
  const std::size_t h = features.dim(0), w = features.dim(1), c = features.dim(2);
  const auto col = ops::reshape(embedding, Shape{c, 1});
  return ops::reshape(ops::matmul(ops::reshape(features, Shape{h * w, c}), col), Shape{h, w, 1});
}

// Projects E^4 to the dense width and filters each task's dense features with
// its embedding; logits are bilinearly upsampled x4 to the input size.
template <Real T>
MaskLogits<T> segmentation_head(const DenseTaskFeatures<T>& dense, const Tensor<T>& e_final,
                                const LinearParams<T>& e_proj, const ModelConfig& cfg) {
  if (e_final.rank() != 2 || e_final.dim(0) != 3) {
    throw ShapeError("segmentation_head: expected [3 x d] task embeddings, got " + shape_str(e_final.shape()));
  }
  const auto e_hat = apply(e_proj, e_final);
  const std::size_t c = e_hat.dim(1);
  const std::size_t size = cfg.image_size;
  auto task_logits = [&](const Tensor<T>& f, std::size_t row) {
    const auto e = ops::reshape(ops::slice(e_hat, 0, row, 1), Shape{c});
    const auto low = einsum_hwc_c(f, e);
    return ops::reshape(ops::bilinear_resize(low, size, size), Shape{size, size});
  };
  return {task_logits(dense.f1, 0), task_logits(dense.f2, 1), task_logits(dense.f_cd, 2)};
}

}  // namespace rsb

#pragma once

// The full dual-temporal model: siamese encoder + enhancer, task-prompt
// decoder and segmentation head.

#include <array>
#include <cstdint>
#include <utility>

#include "rsbuilding/backbone.hpp"
#include "rsbuilding/config.hpp"
#include "rsbuilding/decoder.hpp"
#include "rsbuilding/image.hpp"
#include "rsbuilding/layers.hpp"

namespace rsb {

// Every intermediate that tests and diagnostics look at.
template <Real T>
struct ForwardTrace {
  FeaturePyramid<T> pyramid1, pyramid2;
  std::array<Tensor<T>, 4> task_embeddings;  // E^1..E^4
  std::array<Tensor<T>, 4> tokens;           // updated T^1..T^4
  DenseTaskFeatures<T> dense;
  MaskLogits<T> masks;
};

// Input normalization applied to [0, 1] images before the encoder.
inline constexpr float kPixelMean = 0.5f;
inline constexpr float kPixelStd = 0.25f;

template <Real T>
Tensor<T> image_to_tensor(const Image& image) {
  std::vector<T> v(image.pixels.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<T>((image.pixels[i] - kPixelMean) / kPixelStd);
  return Tensor<T>(Shape{image.height, image.width, 3}, std::move(v));
}

template <Real T>
class Model {
 public:
  Model(const ModelConfig& config, std::uint64_t seed) : config_(config) {
    config_.validate();
    RandomSource rng(seed);
    backbone_ = make_backbone_params(params_, config_, rng);
    decoder_ = make_decoder_params(params_, config_, rng);
  }

  Model(Model&&) noexcept = default;
  Model& operator=(Model&&) noexcept = default;
  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;

  // Independent copy with identical parameter values.
  Model clone() const {
    Model copy(config_, 0);
    copy.params_.copy_values_from(params_);
    return copy;
  }

  const ModelConfig& config() const { return config_; }
  ParameterSet<T>& parameters() { return params_; }
  const ParameterSet<T>& parameters() const { return params_; }
  const BackboneParams<T>& backbone() const { return backbone_; }
  const DecoderParams<T>& decoder() const { return decoder_; }

  ForwardTrace<T> forward_trace(const Tensor<T>& image1, const Tensor<T>& image2) const {
    ForwardTrace<T> tr;
    // Both images go through the same backbone parameters.
    const auto f1 = with_stage("encode(I1)", [&] { return encode(image1, backbone_, config_); });
    const auto f2 = with_stage("encode(I2)", [&] { return encode(image2, backbone_, config_); });
    tr.pyramid1 = with_stage("enhance(I1)", [&] { return enhance(f1, backbone_, config_); });
    tr.pyramid2 = with_stage("enhance(I2)", [&] { return enhance(f2, backbone_, config_); });
    with_stage("decode", [&] {
      Tensor<T> e = initial_task_embeddings(decoder_.queries);
      for (std::size_t i = 0; i < 4; ++i) {
        const auto tokens = build_tokens(i + 1, tr.pyramid1.levels[i], tr.pyramid2.levels[i], decoder_.queries);
        auto [e_next, t_next] = decode_level(e, tokens, decoder_.levels[i], config_);
        e = e_next;
        tr.task_embeddings[i] = e_next;
        tr.tokens[i] = t_next;
      }
    });
    tr.dense = with_stage("assemble_dense", [&] { return assemble_dense(tr.tokens, decoder_.dense, config_); });
    tr.masks = with_stage("segmentation_head",
                          [&] { return segmentation_head(tr.dense, tr.task_embeddings[3], decoder_.e_proj, config_); });
    return tr;
  }

  MaskLogits<T> forward(const Tensor<T>& image1, const Tensor<T>& image2) const {
    return forward_trace(image1, image2).masks;
  }

  MaskLogits<T> forward(const Image& image1, const Image& image2) const {
    return forward(image_to_tensor<T>(image1), image_to_tensor<T>(image2));
  }

 private:
  ModelConfig config_;
  ParameterSet<T> params_;
  BackboneParams<T> backbone_;
  DecoderParams<T> decoder_;
};

}  // namespace rsb

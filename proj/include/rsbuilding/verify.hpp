#pragma once

// Whole-model gradient verification.

#include <cstdint>
#include <vector>

#include "rsbuilding/data.hpp"
#include "rsbuilding/gradcheck.hpp"
#include "rsbuilding/model.hpp"
#include "rsbuilding/objective.hpp"
#include "rsbuilding/trainer.hpp"

namespace rsb {

// The smallest architecture that still exercises every block at 64x64 input.
inline ModelConfig gradcheck_model_config() {
  ModelConfig c;
  c.image_size = 64;
  c.enc_dim = 4;
  c.enc_depth = 1;
  c.enc_heads = 2;
  c.enc_mlp_ratio = 1;
  c.pyramid_dim = 2;
  c.decoder_heads = 1;
  c.decoder_mlp_ratio = 1;
  c.dense_dim = 4;
  c.elem_kind = ElemKind::f64;
  return c;
}

struct ModelGradCheckResult {
  std::size_t parameter_count = 0;
  GradCheckReport report;
};

// Full-regime loss of one synthetic pair, differentiated with respect to every
// parameter. Parameters are redrawn from U(-0.5, 0.5) so that zero-initialized
// weights and biases carry informative gradients.
inline ModelGradCheckResult full_model_gradcheck(std::uint64_t seed = 0,
                                                 const ModelConfig& cfg = gradcheck_model_config()) {
  Model<double> model(cfg, seed);
  RandomSource rng = RandomSource(seed).fork(1);
  std::vector<Tensor<double>> params;
  for (const auto& [_, t] : model.parameters().entries()) {
    Tensor<double> handle = t;
    for (auto& v : handle.mutable_data()) v = rng.uniform(-0.5, 0.5);
    params.push_back(handle);
  }
  SceneSpec spec;
  spec.image_size = cfg.image_size;
  const SamplePair pair = generate_scene(RandomSource(seed).fork(2).next_u64(), spec);
  const Targets<double> targets = targets_of<double>(pair);
  const Tensor<double> i1 = image_to_tensor<double>(pair.i1);
  const Tensor<double> i2 = image_to_tensor<double>(pair.i2);

  ScalarFn fn = [&](const std::vector<Tensor<double>>&) {
    return federated_loss(model.forward(i1, i2), targets, Regime::Full).total;
  };
  return {model.parameters().total_elements(), grad_check(fn, params)};
}

}  // namespace rsb

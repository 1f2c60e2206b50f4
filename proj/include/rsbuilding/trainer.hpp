#pragma once

// AdamW with polynomial decay, the regime-aware training loop, checkpoints,
// evaluation and inference.

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "rsbuilding/data.hpp"
#include "rsbuilding/metrics.hpp"
#include "rsbuilding/model.hpp"
#include "rsbuilding/objective.hpp"

namespace rsb {

struct TrainConfig {
  std::size_t steps = 500;
  std::size_t batch_size = 4;
  std::uint64_t seed = 0;
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.05;
  double poly_power = 1.0;
  double min_lr = 0.0;
  double grad_clip_norm = 0.0;  // 0 disables clipping
  bool augment = true;

  void validate() const {
    auto fail = [](const std::string& m) { throw ConfigError("train config: " + m); };
    if (batch_size == 0) fail("batch_size must be positive");
    if (!(lr > 0) || !(min_lr >= 0) || min_lr > lr) fail("need 0 <= min_lr <= lr and lr > 0");
    if (!(beta1 >= 0 && beta1 < 1) || !(beta2 >= 0 && beta2 < 1)) fail("betas must lie in [0, 1)");
    if (!(eps > 0) || !(weight_decay >= 0) || !(poly_power > 0) || !(grad_clip_norm >= 0))
      fail("eps, weight_decay, poly_power and grad_clip_norm must be valid");
  }
  bool operator==(const TrainConfig&) const = default;
};

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = {{"steps", c.steps},
       {"batch_size", c.batch_size},
       {"seed", c.seed},
       {"lr", c.lr},
       {"beta1", c.beta1},
       {"beta2", c.beta2},
       {"eps", c.eps},
       {"weight_decay", c.weight_decay},
       {"poly_power", c.poly_power},
       {"min_lr", c.min_lr},
       {"grad_clip_norm", c.grad_clip_norm},
       {"augment", c.augment}};
}

inline void from_json_fields(const nlohmann::json& j, TrainConfig& c) {
  j.at("steps").get_to(c.steps);
  j.at("batch_size").get_to(c.batch_size);
  j.at("seed").get_to(c.seed);
  j.at("lr").get_to(c.lr);
  j.at("beta1").get_to(c.beta1);
  j.at("beta2").get_to(c.beta2);
  j.at("eps").get_to(c.eps);
  j.at("weight_decay").get_to(c.weight_decay);
  j.at("poly_power").get_to(c.poly_power);
  j.at("min_lr").get_to(c.min_lr);
  j.at("grad_clip_norm").get_to(c.grad_clip_norm);
  j.at("augment").get_to(c.augment);
}

// lr = (lr0 - min_lr) * (1 - step/total)^power + min_lr; steps past the end
// give min_lr.
inline double poly_lr(std::size_t step, std::size_t total_steps, double lr0, double power = 1.0,
                      double min_lr = 0.0) {
  if (total_steps == 0 || step >= total_steps) return step == 0 && total_steps == 0 ? lr0 : min_lr;
  const double frac = 1.0 - static_cast<double>(step) / static_cast<double>(total_steps);
  return (lr0 - min_lr) * std::pow(frac, power) + min_lr;
}

template <Real T>
struct OptimizerState {
  std::vector<std::vector<T>> m, v;  // one buffer per parameter, in registration order
  std::uint64_t step = 0;

  static OptimizerState for_parameters(const ParameterSet<T>& ps) {
    OptimizerState s;
    for (const auto& [_, t] : ps.entries()) {
      s.m.emplace_back(t.numel(), T(0));
      s.v.emplace_back(t.numel(), T(0));
    }
    return s;
  }
};

struct AdamWHyper {
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8, weight_decay = 0.05;
};

// Decoupled weight decay, then the bias-corrected Adam update. Parameters
// without a gradient buffer are treated as having zero gradient.
template <Real T>
void adamw_step(ParameterSet<T>& params, OptimizerState<T>& state, double lr, const AdamWHyper& h) {
  if (state.m.size() != params.size()) throw ContractError("adamw_step: optimizer state does not match parameters");
  for (const auto& [name, t] : params.entries()) {
    if (!t.has_grad()) continue;
    for (T g : t.grad()) {
      if (!std::isfinite(static_cast<double>(g))) throw NumericError("non-finite gradient in parameter '" + name + "'");
    }
  }
  ++state.step;
  const double bc1 = 1.0 - std::pow(h.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(h.beta2, static_cast<double>(state.step));
  const double decay = 1.0 - lr * h.weight_decay;
  for (std::size_t k = 0; k < params.size(); ++k) {
    Tensor<T> p = params.entries()[k].second;
    auto& m = state.m[k];
    auto& v = state.v[k];
    if (m.size() != p.numel()) throw ContractError("adamw_step: moment buffer shape mismatch");
    const bool has_grad = p.has_grad();
    auto values = p.mutable_data();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double g = has_grad ? static_cast<double>(p.grad()[i]) : 0.0;
      const double mi = h.beta1 * static_cast<double>(m[i]) + (1.0 - h.beta1) * g;
      const double vi = h.beta2 * static_cast<double>(v[i]) + (1.0 - h.beta2) * g * g;
      m[i] = static_cast<T>(mi);
      v[i] = static_cast<T>(vi);
      double x = static_cast<double>(values[i]) * decay;
      x -= lr * (mi / bc1) / (std::sqrt(vi / bc2) + h.eps);
      values[i] = static_cast<T>(x);
    }
  }
}

// Scales all gradients so their global L2 norm is at most max_norm.
template <Real T>
void clip_grad_norm(ParameterSet<T>& params, double max_norm) {
  double sq = 0;
  for (const auto& [_, t] : params.entries())
    if (t.has_grad())
      for (T g : t.grad()) sq += static_cast<double>(g) * static_cast<double>(g);
  const double norm = std::sqrt(sq);
  if (norm <= max_norm || norm == 0) return;
  const T s = static_cast<T>(max_norm / norm);
  for (auto& [_, t] : params.entries()) {
    if (!t.has_grad()) continue;
    Tensor<T> handle = t;
    for (T& g : handle.mutable_grad()) g *= s;
  }
}

template <Real T>
Targets<T> targets_of(const SamplePair& s) {
  Targets<T> t;
  if (s.m1) t.m1 = mask_to_tensor<T>(*s.m1);
  if (s.m2) t.m2 = mask_to_tensor<T>(*s.m2);
  if (s.m_cd) t.m_cd = mask_to_tensor<T>(*s.m_cd);
  return t;
}

inline void check_sample_size(const SamplePair& s, const ModelConfig& cfg) {
  if (s.i1.height != cfg.image_size || s.i1.width != cfg.image_size || s.i2.height != cfg.image_size ||
      s.i2.width != cfg.image_size) {
    throw ConfigError("sample '" + s.id + "' is " + std::to_string(s.i1.height) + "x" + std::to_string(s.i1.width) +
                      " but the model expects " + std::to_string(cfg.image_size) + "x" +
                      std::to_string(cfg.image_size));
  }
}

// Accumulates d(mean over the batch of each sample's federated loss) into the
// parameter gradients, one backward pass per sample. Returns the batch mean of
// the loss breakdown.
template <Real T>
LossBreakdown accumulate_batch_gradient(const Model<T>& model, const std::vector<SamplePair>& batch) {
  LossBreakdown mean;
  const T inv = T(1) / static_cast<T>(batch.size());
  for (const auto& s : batch) {
    check_sample_size(s, model.config());
    const auto masks = model.forward(s.i1, s.i2);
    const auto loss = federated_loss(masks, targets_of<T>(s), s.regime);
    ops::scale(loss.total, inv).backward();
    const double w = 1.0 / static_cast<double>(batch.size());
    mean.term1 += w * loss.breakdown.term1;
    mean.term2 += w * loss.breakdown.term2;
    mean.term_cd += w * loss.breakdown.term_cd;
    mean.term_pcd += w * loss.breakdown.term_pcd;
  }
  mean.total = ((mean.term1 + mean.term2) + mean.term_cd) + mean.term_pcd;
  return mean;
}

struct TrainLogEntry {
  std::size_t step = 0;
  double lr = 0;
  LossBreakdown loss;
};

inline nlohmann::json to_json(const TrainLogEntry& e) {
  return {{"step", e.step},           {"lr", e.lr},
          {"term1", e.loss.term1},    {"term2", e.loss.term2},
          {"term_cd", e.loss.term_cd}, {"term_pcd", e.loss.term_pcd},
          {"total", e.loss.total}};
}

template <Real T>
struct TrainState {
  Model<T> model;
  OptimizerState<T> optimizer;
  std::uint64_t step = 0;
};

using TrainLogger = std::function<void(const TrainLogEntry&)>;

template <Real T>
TrainState<T> initial_state(const ModelConfig& model_cfg, const TrainConfig& cfg) {
  Model<T> model(model_cfg, RandomSource(cfg.seed).fork(0).next_u64());
  auto opt = OptimizerState<T>::for_parameters(model.parameters());
  return {std::move(model), std::move(opt), 0};
}

// Runs cfg.steps optimizer steps. Batches cycle through reshuffled epochs; the
// whole run is a pure function of (configs, data).
template <Real T>
TrainState<T> train(const ModelConfig& model_cfg, const TrainConfig& cfg, const AugmentConfig& aug,
                    const std::vector<SamplePair>& data, const TrainLogger& log = {}) {
  cfg.validate();
  aug.validate();
  if (data.empty()) throw DataError("train: dataset is empty");
  for (const auto& s : data) check_sample_size(s, model_cfg);
  TrainState<T> st = initial_state<T>(model_cfg, cfg);
  const RandomSource root(cfg.seed);
  RandomSource aug_rng = root.fork(1);
  const AdamWHyper hyper{cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay};
  std::vector<std::vector<std::size_t>> epoch;
  std::size_t epoch_index = 0, cursor = 0;
  for (std::size_t step = 0; step < cfg.steps; ++step) {
    if (cursor == epoch.size()) {
      epoch = make_batches(data.size(), cfg.batch_size, root.fork(100 + epoch_index).next_u64());
      ++epoch_index;
      cursor = 0;
    }
    const auto& ids = epoch[cursor++];
    std::vector<SamplePair> batch;
    for (std::size_t i : ids) batch.push_back(cfg.augment ? augment(data[i], aug_rng, aug) : data[i]);

    auto batch_names = [&] {
      std::string s;
      for (const auto& b : batch) s += (s.empty() ? "" : ", ") + b.id;
      return s;
    };
    st.model.parameters().zero_grad();
    LossBreakdown loss;
    try {
      loss = accumulate_batch_gradient(st.model, batch);
    } catch (const NumericError& e) {
      throw NumericError("step " + std::to_string(step) + " batch [" + batch_names() + "]: " + e.what());
    }
    if (!std::isfinite(loss.total)) {
      throw NumericError("non-finite loss at step " + std::to_string(step) + " batch [" + batch_names() + "]");
    }
    if (cfg.grad_clip_norm > 0) clip_grad_norm(st.model.parameters(), cfg.grad_clip_norm);
    const double lr = poly_lr(step, cfg.steps, cfg.lr, cfg.poly_power, cfg.min_lr);
    adamw_step(st.model.parameters(), st.optimizer, lr, hyper);
    st.step = step + 1;
    if (log) log({step, lr, loss});
  }
  st.model.parameters().zero_grad();
  return st;
}

// ---- evaluation and inference ----

// Counts each task where the sample carries the matching mask.
template <Real T>
TaskCounts evaluate(const Model<T>& model, const std::vector<SamplePair>& data, double threshold = 0.5) {
  NoGradGuard no_grad;
  TaskCounts c;
  for (const auto& s : data) {
    check_sample_size(s, model.config());
    const auto masks = model.forward(s.i1, s.i2);
    if (s.m1) c.bx1 += accumulate(masks.bx1, *s.m1, threshold);
    if (s.m2) c.bx2 += accumulate(masks.bx2, *s.m2, threshold);
    if (s.m_cd) c.cd += accumulate(masks.cd, *s.m_cd, threshold);
  }
  return c;
}

template <Real T>
Mask threshold_logits(const Tensor<T>& logits, double threshold = 0.5) {
  Mask m(logits.dim(0), logits.dim(1));
  for (std::size_t i = 0; i < m.values.size(); ++i)
    m.values[i] = static_cast<double>(ops::sigmoid_value(logits.data()[i])) > threshold ? 1 : 0;
  return m;
}

struct PredictedMasks {
  Mask bx1, bx2, cd;
};

template <Real T>
PredictedMasks predict(const Model<T>& model, const Image& i1, const Image& i2) {
  SamplePair probe;
  probe.id = "input";
  probe.i1 = i1;
  probe.i2 = i2;
  check_sample_size(probe, model.config());
  NoGradGuard no_grad;
  const auto masks = model.forward(i1, i2);
  return {threshold_logits(masks.bx1), threshold_logits(masks.bx2), threshold_logits(masks.cd)};
}

// Writes bx1.png, bx2.png and cd.png ({0,255}) into out_dir.
template <Real T>
void infer(const Model<T>& model, const Image& i1, const Image& i2, const std::filesystem::path& out_dir) {
  const auto p = predict(model, i1, i2);
  std::filesystem::create_directories(out_dir);
  write_png_mask(out_dir / "bx1.png", p.bx1);
  write_png_mask(out_dir / "bx2.png", p.bx2);
  write_png_mask(out_dir / "cd.png", p.cd);
}

// ---- checkpoints ----
//
// Layout: uint64 little-endian header length, JSON header, raw little-endian
// payload. The header lists every tensor as {name, shape, dtype, offset,
// nbytes}; offsets are relative to the payload start. Parameters are stored
// as "param/<name>", Adam moments as "adam_m/<name>" and "adam_v/<name>".

inline constexpr const char* kCheckpointFormat = "rsbuilding-checkpoint";
inline constexpr int kCheckpointVersion = 1;

namespace detail {

template <typename U>
void append_le(std::vector<char>& out, const U* values, std::size_t n) {
  static_assert(std::endian::native == std::endian::little || std::endian::native == std::endian::big);
  const std::size_t start = out.size();
  out.resize(start + n * sizeof(U));
  std::memcpy(out.data() + start, values, n * sizeof(U));
  if constexpr (std::endian::native == std::endian::big) {
    for (std::size_t i = 0; i < n; ++i) std::reverse(out.begin() + start + i * sizeof(U), out.begin() + start + (i + 1) * sizeof(U));
  }
}

template <typename U>
void read_le(const char* src, U* values, std::size_t n) {
  std::memcpy(values, src, n * sizeof(U));
  if constexpr (std::endian::native == std::endian::big) {
    auto* bytes = reinterpret_cast<char*>(values);
    for (std::size_t i = 0; i < n; ++i) std::reverse(bytes + i * sizeof(U), bytes + (i + 1) * sizeof(U));
  }
}

struct CheckpointFile {
  nlohmann::json header;
  std::vector<char> payload;
};

inline CheckpointFile read_checkpoint_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint '" + path.string() + "'");
  unsigned char len_bytes[8];
  if (!in.read(reinterpret_cast<char*>(len_bytes), 8)) throw DataError("checkpoint '" + path.string() + "' is truncated");
  std::uint64_t len = 0;
  for (int i = 7; i >= 0; --i) len = (len << 8) | len_bytes[i];
  std::error_code ec;
  const auto file_size = std::filesystem::file_size(path, ec);
  if (ec || len > file_size - 8) throw DataError("checkpoint '" + path.string() + "' has a bad header length");
  std::string text(len, '\0');
  if (!in.read(text.data(), static_cast<std::streamsize>(len))) throw DataError("checkpoint header is truncated");
  CheckpointFile f;
  try {
    f.header = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("checkpoint header is not valid JSON: ") + e.what());
  }
  if (f.header.value("format", "") != kCheckpointFormat) throw DataError("'" + path.string() + "' is not a checkpoint");
  f.payload.assign(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
  return f;
}

}  // namespace detail

template <Real T>
void save_checkpoint(const std::filesystem::path& path, const TrainState<T>& st) {
  nlohmann::json tensors = nlohmann::json::array();
  std::vector<char> payload;
  const std::string dtype = to_string(elem_kind_of<T>());
  auto put = [&](const std::string& name, const Shape& shape, const T* values, std::size_t n) {
    tensors.push_back({{"name", name},
                       {"shape", shape},
                       {"dtype", dtype},
                       {"offset", payload.size()},
                       {"nbytes", n * sizeof(T)}});
    detail::append_le(payload, values, n);
  };
  const auto& entries = st.model.parameters().entries();
  for (const auto& [name, t] : entries) put("param/" + name, t.shape(), t.data().data(), t.numel());
  for (std::size_t k = 0; k < entries.size(); ++k) {
    put("adam_m/" + entries[k].first, entries[k].second.shape(), st.optimizer.m[k].data(), st.optimizer.m[k].size());
    put("adam_v/" + entries[k].first, entries[k].second.shape(), st.optimizer.v[k].data(), st.optimizer.v[k].size());
  }
  nlohmann::json config;
  to_json(config, st.model.config());
  const nlohmann::json header = {{"format", kCheckpointFormat}, {"version", kCheckpointVersion},
                                 {"config", config},           {"step", st.step},
                                 {"adam_step", st.optimizer.step}, {"tensors", tensors}};
  const std::string text = header.dump();
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write checkpoint '" + path.string() + "'");
  unsigned char len_bytes[8];
  std::uint64_t len = text.size();
  for (int i = 0; i < 8; ++i) len_bytes[i] = static_cast<unsigned char>((len >> (8 * i)) & 0xFF);
  out.write(reinterpret_cast<const char*>(len_bytes), 8);
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  out.write(payload.data(), static_cast<std::streamsize>(payload.size()));
  if (!out) throw DataError("failed writing checkpoint '" + path.string() + "'");
}

// Reads only the model configuration, e.g. to choose the element type.
inline ModelConfig checkpoint_config(const std::filesystem::path& path) {
  const auto f = detail::read_checkpoint_file(path);
  return model_config_from_json(f.header.at("config"));
}

template <Real T>
TrainState<T> load_checkpoint(const std::filesystem::path& path) {
  const auto f = detail::read_checkpoint_file(path);
  const ModelConfig cfg = model_config_from_json(f.header.at("config"));
  Model<T> model(cfg, 0);
  auto opt = OptimizerState<T>::for_parameters(model.parameters());
  std::map<std::string, const nlohmann::json*> index;
  for (const auto& t : f.header.at("tensors")) index[t.at("name").get<std::string>()] = &t;
  const std::string dtype = to_string(elem_kind_of<T>());
  auto fetch = [&](const std::string& name, const Shape& shape, T* dst) {
    const auto it = index.find(name);
    if (it == index.end()) throw DataError("checkpoint '" + path.string() + "' lacks tensor '" + name + "'");
    const auto& t = *it->second;
    if (t.at("dtype").get<std::string>() != dtype) {
      throw ConfigError("checkpoint tensor '" + name + "' has dtype " + t.at("dtype").get<std::string>() +
                        ", expected " + dtype);
    }
    if (t.at("shape").get<Shape>() != shape) throw DataError("checkpoint tensor '" + name + "' has the wrong shape");
    const auto offset = t.at("offset").get<std::size_t>();
    const auto nbytes = t.at("nbytes").get<std::size_t>();
    if (nbytes != numel(shape) * sizeof(T) || offset + nbytes > f.payload.size()) {
      throw DataError("checkpoint tensor '" + name + "' has an invalid extent");
    }
    detail::read_le(f.payload.data() + offset, dst, numel(shape));
  };
  const auto& entries = model.parameters().entries();
  for (std::size_t k = 0; k < entries.size(); ++k) {
    const auto& [name, t] = entries[k];
    Tensor<T> handle = t;
    fetch("param/" + name, t.shape(), handle.mutable_data().data());
    fetch("adam_m/" + name, t.shape(), opt.m[k].data());
    fetch("adam_v/" + name, t.shape(), opt.v[k].data());
  }
  if (index.size() != 3 * entries.size()) throw DataError("checkpoint '" + path.string() + "' has unexpected tensors");
  opt.step = f.header.at("adam_step").get<std::uint64_t>();
  return {std::move(model), std::move(opt), f.header.at("step").get<std::uint64_t>()};
}

}  // namespace rsb

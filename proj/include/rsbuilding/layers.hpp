#pragma once

// Named parameter storage and the small building blocks (norm, attention,
// MLP) shared by the encoder and the decoder.

#include <cmath>
#include <cstddef>
#include <string>
#include <utility>
#include <vector>

#include "rsbuilding/ops.hpp"
#include "rsbuilding/random.hpp"
#include "rsbuilding/tensor.hpp"

namespace rsb {

enum class Init { zeros, ones, trunc_normal };

inline constexpr double kInitStd = 0.02;

// Ordered collection of named trainable tensors. Registration order is the
// canonical order for checkpoints and optimizer state.
template <Real T>
class ParameterSet {
 public:
  Tensor<T> add(const std::string& name, Shape shape, Init init, RandomSource& rng) {
    for (const auto& [n, _] : entries_) {
      if (n == name) throw ContractError("duplicate parameter name '" + name + "'");
    }
    std::vector<T> values(numel(shape));
    for (auto& v : values) {
      switch (init) {
        case Init::zeros: v = T(0); break;
        case Init::ones: v = T(1); break;
        case Init::trunc_normal: v = static_cast<T>(rng.truncated_normal(kInitStd)); break;
      }
    }
    Tensor<T> t(std::move(shape), std::move(values), true);
    entries_.emplace_back(name, t);
    return t;
  }

  const std::vector<std::pair<std::string, Tensor<T>>>& entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }

  std::size_t total_elements() const {
    std::size_t n = 0;
    for (const auto& [_, t] : entries_) n += t.numel();
    return n;
  }

  Tensor<T> find(const std::string& name) const {
    for (const auto& [n, t] : entries_) {
      if (n == name) return t;
    }
    throw ContractError("unknown parameter '" + name + "'");
  }

  void zero_grad() {
    for (auto& [_, t] : entries_) t.zero_grad();
  }

  // Copies values (not handles) from another set with identical layout.
  void copy_values_from(const ParameterSet& other) {
    if (other.size() != size()) throw ConfigError("parameter sets differ in size");
    for (std::size_t i = 0; i < entries_.size(); ++i) {
      auto& [name, dst] = entries_[i];
      const auto& [oname, src] = other.entries_[i];
      if (name != oname || dst.shape() != src.shape()) {
        throw ConfigError("parameter layout mismatch at '" + name + "' vs '" + oname + "'");
      }
      std::copy(src.data().begin(), src.data().end(), dst.mutable_data().begin());
    }
  }

 private:
  std::vector<std::pair<std::string, Tensor<T>>> entries_;
};

template <Real T>
struct NormParams {
  Tensor<T> gain, bias;

  static NormParams make(ParameterSet<T>& ps, const std::string& name, std::size_t dim, RandomSource& rng) {
    return {ps.add(name + ".gain", {dim}, Init::ones, rng), ps.add(name + ".bias", {dim}, Init::zeros, rng)};
  }
};

template <Real T>
struct LinearParams {
  Tensor<T> weight, bias;  // weight is [in, out]

  static LinearParams make(ParameterSet<T>& ps, const std::string& name, std::size_t in, std::size_t out,
                           RandomSource& rng) {
    return {ps.add(name + ".weight", {in, out}, Init::trunc_normal, rng),
            ps.add(name + ".bias", {out}, Init::zeros, rng)};
  }
};

template <Real T>
struct AttentionParams {
  LinearParams<T> q, k, v, out;

  static AttentionParams make(ParameterSet<T>& ps, const std::string& name, std::size_t dim, RandomSource& rng) {
    return {LinearParams<T>::make(ps, name + ".q", dim, dim, rng), LinearParams<T>::make(ps, name + ".k", dim, dim, rng),
            LinearParams<T>::make(ps, name + ".v", dim, dim, rng),
            LinearParams<T>::make(ps, name + ".out", dim, dim, rng)};
  }
};

template <Real T>
struct MlpParams {
  LinearParams<T> fc1, fc2;

  static MlpParams make(ParameterSet<T>& ps, const std::string& name, std::size_t dim, std::size_t hidden,
                        RandomSource& rng) {
    return {LinearParams<T>::make(ps, name + ".fc1", dim, hidden, rng),
            LinearParams<T>::make(ps, name + ".fc2", hidden, dim, rng)};
  }
};

template <Real T>
Tensor<T> apply(const LinearParams<T>& p, const Tensor<T>& x) {
  return ops::linear(x, p.weight, p.bias);
}

template <Real T>
Tensor<T> apply(const NormParams<T>& p, const Tensor<T>& x, double eps) {
  return ops::layer_norm(x, p.gain, p.bias, static_cast<T>(eps));
}

template <Real T>
Tensor<T> apply(const MlpParams<T>& p, const Tensor<T>& x) {
  return apply(p.fc2, ops::gelu(apply(p.fc1, x)));
}

// Multi-head scaled dot-product attention. queries: [n, d]; context (keys and
// values): [m, d]. Scores are scaled by 1/sqrt(d / heads).
template <Real T>
Tensor<T> attention(const Tensor<T>& queries, const Tensor<T>& context, const AttentionParams<T>& p,
                    std::size_t heads) {
  const Tensor<T> q = apply(p.q, queries);
  const Tensor<T> k = apply(p.k, context);
  const Tensor<T> v = apply(p.v, context);
  const std::size_t d = q.dim(1);
  const std::size_t dh = d / heads;
  const T factor = T(1) / std::sqrt(static_cast<T>(dh));
  std::vector<Tensor<T>> per_head;
  per_head.reserve(heads);
  for (std::size_t h = 0; h < heads; ++h) {
    const auto qh = heads == 1 ? q : ops::slice(q, 1, h * dh, dh);
    const auto kh = heads == 1 ? k : ops::slice(k, 1, h * dh, dh);
    const auto vh = heads == 1 ? v : ops::slice(v, 1, h * dh, dh);
    const auto weights = ops::softmax_lastdim(ops::scale(ops::matmul(qh, ops::transpose(kh)), factor));
    per_head.push_back(ops::matmul(weights, vh));
  }
  const Tensor<T> merged = heads == 1 ? per_head.front() : ops::concat(per_head, 1);
  return apply(p.out, merged);
}

}  // namespace rsb

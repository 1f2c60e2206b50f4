#pragma once

// Federated multi-task loss: per-sample weights chosen by annotation regime.

#include <cmath>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "rsbuilding/decoder.hpp"
#include "rsbuilding/image.hpp"
#include "rsbuilding/ops.hpp"
#include "rsbuilding/regime.hpp"

namespace rsb {

struct LossWeights {
  double alpha1 = 0, alpha2 = 0, alpha_cd = 0, alpha_pcd = 0;

  void validate() const {
    for (double a : {alpha1, alpha2, alpha_cd, alpha_pcd}) {
      if (!std::isfinite(a) || a < 0) throw ConfigError("loss weights must be finite and non-negative");
    }
  }
  bool operator==(const LossWeights&) const = default;
};

struct RegimeConvention {
  LossWeights weights;
  bool zero_change_target = false;  // m_cd is replaced by all zeros
};

inline RegimeConvention weights_for_regime(Regime r) {
  switch (r) {
    case Regime::SegOnly: return {{1.0, 1.0, 0.0, 0.1}, true};
    case Regime::ChangeOnly: return {{0.0, 0.0, 1.0, 0.1}, false};
    case Regime::Full: return {{1.0, 1.0, 1.0, 0.1}, false};
  }
  throw ContractError("unhandled regime");
}

namespace detail {
template <Real T>
void check_target(const char* op, const Tensor<T>& pred, const Tensor<T>& target) {
  if (pred.shape() != target.shape()) {
    throw ShapeError(std::string(op) + ": prediction " + shape_str(pred.shape()) + " vs target " +
                     shape_str(target.shape()));
  }
  for (T y : target.data()) {
    if (y != T(0) && y != T(1)) throw DataError(std::string(op) + ": target values must be 0 or 1");
  }
}
}  // namespace detail

template <Real T>
Tensor<T> mask_to_tensor(const Mask& mask) {
  std::vector<T> v(mask.values.begin(), mask.values.end());
  return Tensor<T>(Shape{mask.height, mask.width}, std::move(v));
}

// Mean binary cross-entropy on logits, max(x,0) - x*y + log(1 + exp(-|x|)).
template <Real T>
Tensor<T> bce_from_logits(const Tensor<T>& logits, const Tensor<T>& target) {
  detail::check_target("bce_from_logits", logits, target);
  const auto xs = logits.data();
  const auto ys = target.data();
  const T n = static_cast<T>(xs.size());
  T total = T(0);
  for (std::size_t i = 0; i < xs.size(); ++i) {
    const T x = xs[i];
    total += std::max(x, T(0)) - x * ys[i] + std::log1p(std::exp(-std::abs(x)));
  }
  return make_result<T>("bce_from_logits", Shape{}, std::vector<T>{total / n}, {&logits, &target},
                        [n](rsb::detail::Node<T>& self) {
                          auto* g = parent_grad(self, 0);
                          if (!g) return;
                          const auto& x = self.parents[0]->data;
                          const auto& y = self.parents[1]->data;
                          const T scale = self.grad[0] / n;
                          for (std::size_t i = 0; i < x.size(); ++i) (*g)[i] += scale * (ops::sigmoid_value(x[i]) - y[i]);
                        });
}

// Mean binary cross-entropy on probabilities in (0, 1).
template <Real T>
Tensor<T> bce_from_probs(const Tensor<T>& probs, const Tensor<T>& target) {
  detail::check_target("bce_from_probs", probs, target);
  const auto ps = probs.data();
  const auto ys = target.data();
  const T n = static_cast<T>(ps.size());
  T total = T(0);
  for (std::size_t i = 0; i < ps.size(); ++i) total -= ys[i] * std::log(ps[i]) + (T(1) - ys[i]) * std::log(T(1) - ps[i]);
  return make_result<T>("bce_from_probs", Shape{}, std::vector<T>{total / n}, {&probs, &target},
                        [n](rsb::detail::Node<T>& self) {
                          auto* g = parent_grad(self, 0);
                          if (!g) return;
                          const auto& p = self.parents[0]->data;
                          const auto& y = self.parents[1]->data;
                          const T scale = self.grad[0] / n;
                          for (std::size_t i = 0; i < p.size(); ++i)
                            (*g)[i] += scale * (-y[i] / p[i] + (T(1) - y[i]) / (T(1) - p[i]));
                        });
}

inline constexpr double kPseudoChangeEps = 1e-6;

// |sigmoid(a) - sigmoid(b)| clamped to [eps, 1 - eps].
template <Real T>
Tensor<T> pseudo_change(const Tensor<T>& logits1, const Tensor<T>& logits2) {
  if (logits1.shape() != logits2.shape()) {
    throw ShapeError("pseudo_change: " + shape_str(logits1.shape()) + " vs " + shape_str(logits2.shape()));
  }
  const T eps = static_cast<T>(kPseudoChangeEps);
  return ops::clamp(ops::abs(ops::sub(ops::sigmoid(logits1), ops::sigmoid(logits2))), eps, T(1) - eps);
}

template <Real T>
struct Targets {
  std::optional<Tensor<T>> m1, m2, m_cd;
};

// Stored terms are weighted; total == ((term1 + term2) + term_cd) + term_pcd.
struct LossBreakdown {
  double term1 = 0, term2 = 0, term_cd = 0, term_pcd = 0, total = 0;
};

template <Real T>
struct FederatedLoss {
  LossBreakdown breakdown;
  Tensor<T> total;  // differentiable scalar
};

// Evaluates every term whose target exists. Terms with zero weight are
// computed without recording a graph, so they contribute neither value nor
// gradient.
template <Real T>
FederatedLoss<T> federated_loss(const MaskLogits<T>& masks, const Targets<T>& targets, Regime regime,
                                const LossWeights& weights) {
  weights.validate();
  const auto convention = weights_for_regime(regime);
  auto need = [&](const std::optional<Tensor<T>>& t, const char* name) {
    if (!t) throw DataError("regime " + to_string(regime) + " requires target " + name);
  };
  switch (regime) {
    case Regime::SegOnly: need(targets.m1, "m1"); need(targets.m2, "m2"); break;
    case Regime::ChangeOnly: need(targets.m_cd, "m_cd"); break;
    case Regime::Full: need(targets.m1, "m1"); need(targets.m2, "m2"); need(targets.m_cd, "m_cd"); break;
  }
  std::optional<Tensor<T>> change_target = targets.m_cd;
  if (convention.zero_change_target) change_target = Tensor<T>::zeros(masks.cd.shape());

  FederatedLoss<T> out;
  std::vector<Tensor<T>> contributing;
  auto term = [&](double alpha, auto compute) -> double {
    if (alpha == 0.0) {
      NoGradGuard no_grad;
      const T value = compute().item();
      return static_cast<double>(value * T(0));
    }
    const Tensor<T> weighted = ops::scale(compute(), static_cast<T>(alpha));
    contributing.push_back(weighted);
    return static_cast<double>(weighted.item());
  };
  auto& b = out.breakdown;
  if (targets.m1) b.term1 = term(weights.alpha1, [&] { return bce_from_logits(masks.bx1, *targets.m1); });
  if (targets.m2) b.term2 = term(weights.alpha2, [&] { return bce_from_logits(masks.bx2, *targets.m2); });
  if (change_target) {
    b.term_cd = term(weights.alpha_cd, [&] { return bce_from_logits(masks.cd, *change_target); });
    b.term_pcd = term(weights.alpha_pcd,
                      [&] { return bce_from_probs(pseudo_change(masks.bx1, masks.bx2), *change_target); });
  }
  if (contributing.empty()) {
    out.total = Tensor<T>::scalar(T(0));
  } else {
    out.total = contributing.front();
    for (std::size_t i = 1; i < contributing.size(); ++i) out.total = ops::add(out.total, contributing[i]);
  }
  b.total = static_cast<double>(out.total.item());
  return out;
}

template <Real T>
FederatedLoss<T> federated_loss(const MaskLogits<T>& masks, const Targets<T>& targets, Regime regime) {
  return federated_loss(masks, targets, regime, weights_for_regime(regime).weights);
}

}  // namespace rsb

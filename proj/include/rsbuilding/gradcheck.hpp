#pragma once

// Finite-difference verification of reverse-mode gradients.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <string>
#include <vector>

#include "rsbuilding/ops.hpp"
#include "rsbuilding/random.hpp"
#include "rsbuilding/tensor.hpp"

namespace rsb {

struct GradCheckOptions {
  double step = 1e-3;
  // Combine central differences at step and step/2 as (4 D(h/2) - D(h)) / 3,
  // cancelling the O(h^2) truncation term.
  bool richardson = true;
};

struct GradCheckReport {
  double max_relative_error = 0.0;
  std::size_t checked = 0;
  // Elements where a kink (max-pool tie, ReLU corner, ...) lies within the
  // step; their finite differences are meaningless and they are not scored.
  std::size_t skipped = 0;
  std::size_t worst_input = 0;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
};

using ScalarFn = std::function<Tensor<double>(const std::vector<Tensor<double>>&)>;

// Compares backward() against central differences for every element of every
// input. Relative error is |a - n| / max(|a|, |n|, 1e-8).
inline GradCheckReport grad_check(const ScalarFn& fn, std::vector<Tensor<double>>& inputs,
                                  const GradCheckOptions& options = {}) {
  for (auto& in : inputs) {
    in.set_requires_grad(true);
    in.zero_grad();
  }
  const Tensor<double> loss = fn(inputs);
  if (loss.numel() != 1) throw ContractError("grad_check: function must return a scalar");
  loss.backward();
  const double f0 = loss.item();

  GradCheckReport report;
  NoGradGuard no_grad;
  const double h = options.step;
  auto eval_at = [&](Tensor<double>& in, std::size_t i, double x0, double delta) {
    in.mutable_data()[i] = x0 + delta;
    return fn(inputs).item();
  };
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    auto& in = inputs[k];
    const std::vector<double> analytic =
        in.has_grad() ? std::vector<double>(in.grad().begin(), in.grad().end()) : std::vector<double>(in.numel(), 0.0);
    for (std::size_t i = 0; i < in.numel(); ++i) {
      const double x0 = in.data()[i];
      const double fp = eval_at(in, i, x0, h);
      const double fm = eval_at(in, i, x0, -h);
      const double fp2 = eval_at(in, i, x0, h / 2);
      const double fm2 = eval_at(in, i, x0, -h / 2);
      in.mutable_data()[i] = x0;

      const double d_full = (fp - fm) / (2 * h);
      const double d_half = (fp2 - fm2) / h;
      const double numeric = options.richardson ? (4 * d_half - d_full) / 3 : d_full;
      const double a = analytic[i];

      // Second differences agree at both steps for smooth functions; a kink
      // inside the step shows up as a curvature estimate that scales with 1/h.
      const double curv_full = (fp - 2 * f0 + fm) / (h * h);
      const double curv_half = (fp2 - 2 * f0 + fm2) / (h * h / 4);
      const double slope_jump = std::abs(curv_full - curv_half) * h;
      const double jump_floor =
          std::max(1e-7 * std::max({std::abs(a), std::abs(numeric), 1e-8}), 1e-10 * std::max(1.0, std::abs(f0)));
      if (slope_jump > jump_floor) {
        ++report.skipped;
        continue;
      }

      ++report.checked;
      const double err = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1e-8});
      if (err > report.max_relative_error) {
        report.max_relative_error = err;
        report.worst_input = k;
        report.worst_index = i;
        report.worst_analytic = a;
        report.worst_numeric = numeric;
      }
    }
  }
  return report;
}

// ---------------------------------------------------------------------------
// Gradient suite over the numerics primitives.

struct SuiteResult {
  std::string name;
  double max_relative_error = 0.0;
  double threshold = 0.0;
  std::size_t trials = 0;
  std::size_t checked = 0;
  std::size_t skipped = 0;
  bool passed() const { return checked > 0 && max_relative_error <= threshold; }
};

namespace detail {

inline Tensor<double> random_tensor(RandomSource& rng, Shape shape, double lo = -1.0, double hi = 1.0) {
  std::vector<double> v(numel(shape));
  for (auto& x : v) x = rng.uniform(lo, hi);
  return Tensor<double>(std::move(shape), std::move(v));
}

// sum(weights * y) with fixed random weights, so that outputs whose plain sum
// is constant (softmax rows, normalized vectors) still have informative
// gradients.
inline Tensor<double> weighted_sum(const Tensor<double>& y, std::uint64_t seed) {
  RandomSource rng(seed);
  Tensor<double> w = random_tensor(rng, y.shape(), -1.0, 1.0);
  return ops::sum(ops::mul(y, w));
}

struct SuiteCase {
  std::string name;
  std::function<std::vector<Tensor<double>>(RandomSource&)> make_inputs;
  std::function<Tensor<double>(const std::vector<Tensor<double>>&)> apply;
};

inline std::vector<SuiteCase> suite_cases() {
  using V = std::vector<Tensor<double>>;
  std::vector<SuiteCase> cases;
  auto rt = [](RandomSource& r, Shape s, double lo = -1.0, double hi = 1.0) { return random_tensor(r, std::move(s), lo, hi); };
  cases.push_back({"matmul", [rt](RandomSource& r) { return V{rt(r, {3, 4}), rt(r, {4, 2})}; },
                   [](const V& in) { return ops::matmul(in[0], in[1]); }});
  cases.push_back({"linear", [rt](RandomSource& r) { return V{rt(r, {2, 3, 4}), rt(r, {4, 3}), rt(r, {3})}; },
                   [](const V& in) { return ops::linear(in[0], in[1], in[2]); }});
  cases.push_back({"softmax_lastdim", [rt](RandomSource& r) { return V{rt(r, {3, 5}, -2.0, 2.0)}; },
                   [](const V& in) { return ops::softmax_lastdim(in[0]); }});
  cases.push_back({"layer_norm",
                   [rt](RandomSource& r) { return V{rt(r, {3, 6}, -2.0, 2.0), rt(r, {6}, 0.5, 1.5), rt(r, {6})}; },
                   [](const V& in) { return ops::layer_norm(in[0], in[1], in[2], 1e-5); }});
  cases.push_back({"conv2d_1x1", [rt](RandomSource& r) { return V{rt(r, {3, 4, 3}), rt(r, {1, 1, 3, 2})}; },
                   [](const V& in) { return ops::conv2d(in[0], in[1]); }});
  cases.push_back({"conv2d_3x3", [rt](RandomSource& r) { return V{rt(r, {4, 3, 2}), rt(r, {3, 3, 2, 2})}; },
                   [](const V& in) { return ops::conv2d(in[0], in[1]); }});
  cases.push_back({"transposed_conv2d", [rt](RandomSource& r) { return V{rt(r, {2, 3, 2}), rt(r, {2, 2, 2, 3})}; },
                   [](const V& in) { return ops::transposed_conv2d(in[0], in[1]); }});
  cases.push_back({"max_pool2d", [rt](RandomSource& r) { return V{rt(r, {4, 4, 2})}; },
                   [](const V& in) { return ops::max_pool2d(in[0]); }});
  cases.push_back({"bilinear_resize_up", [rt](RandomSource& r) { return V{rt(r, {3, 2, 2})}; },
                   [](const V& in) { return ops::bilinear_resize(in[0], 7, 5); }});
  cases.push_back({"bilinear_resize_down", [rt](RandomSource& r) { return V{rt(r, {6, 5, 2})}; },
                   [](const V& in) { return ops::bilinear_resize(in[0], 4, 2); }});
  cases.push_back({"patchify", [rt](RandomSource& r) { return V{rt(r, {4, 4, 2})}; },
                   [](const V& in) { return ops::patchify(in[0], 2); }});
  cases.push_back({"add", [rt](RandomSource& r) { return V{rt(r, {2, 3}), rt(r, {2, 3})}; },
                   [](const V& in) { return ops::add(in[0], in[1]); }});
  cases.push_back({"sub", [rt](RandomSource& r) { return V{rt(r, {2, 3}), rt(r, {2, 3})}; },
                   [](const V& in) { return ops::sub(in[0], in[1]); }});
  cases.push_back({"mul", [rt](RandomSource& r) { return V{rt(r, {2, 3}), rt(r, {2, 3})}; },
                   [](const V& in) { return ops::mul(in[0], in[1]); }});
  cases.push_back({"add_lastdim", [rt](RandomSource& r) { return V{rt(r, {2, 2, 3}), rt(r, {3})}; },
                   [](const V& in) { return ops::add_lastdim(in[0], in[1]); }});
  cases.push_back({"relu", [rt](RandomSource& r) { return V{rt(r, {3, 4}, -2.0, 2.0)}; },
                   [](const V& in) { return ops::relu(in[0]); }});
  cases.push_back({"gelu", [rt](RandomSource& r) { return V{rt(r, {3, 4}, -3.0, 3.0)}; },
                   [](const V& in) { return ops::gelu(in[0]); }});
  cases.push_back({"sigmoid", [rt](RandomSource& r) { return V{rt(r, {3, 4}, -4.0, 4.0)}; },
                   [](const V& in) { return ops::sigmoid(in[0]); }});
  cases.push_back({"abs", [rt](RandomSource& r) { return V{rt(r, {3, 4}, -2.0, 2.0)}; },
                   [](const V& in) { return ops::abs(in[0]); }});
  cases.push_back({"clamp", [rt](RandomSource& r) { return V{rt(r, {3, 4}, -2.0, 2.0)}; },
                   [](const V& in) { return ops::clamp(in[0], -0.5, 0.7); }});
  cases.push_back({"exp", [rt](RandomSource& r) { return V{rt(r, {3, 4}, -2.0, 2.0)}; },
                   [](const V& in) { return ops::exp(in[0]); }});
  cases.push_back({"log", [rt](RandomSource& r) { return V{rt(r, {3, 4}, 0.2, 3.0)}; },
                   [](const V& in) { return ops::log(in[0]); }});
  cases.push_back({"scale", [rt](RandomSource& r) { return V{rt(r, {5})}; },
                   [](const V& in) { return ops::scale(in[0], -1.7); }});
  cases.push_back({"concat", [rt](RandomSource& r) { return V{rt(r, {2, 3, 2}), rt(r, {2, 1, 2})}; },
                   [](const V& in) { return ops::concat(in, 1); }});
  cases.push_back({"split", [rt](RandomSource& r) { return V{rt(r, {3, 5})}; },
                   [](const V& in) {
                     auto parts = ops::split(in[0], 1, {2, 3});
                     return ops::concat(std::vector<Tensor<double>>{ops::gelu(parts[0]), ops::sigmoid(parts[1])}, 1);
                   }});
  cases.push_back({"reshape", [rt](RandomSource& r) { return V{rt(r, {2, 6})}; },
                   [](const V& in) { return ops::softmax_lastdim(ops::reshape(in[0], Shape{4, 3})); }});
  cases.push_back({"transpose", [rt](RandomSource& r) { return V{rt(r, {2, 3})}; },
                   [](const V& in) { return ops::transpose(in[0]); }});
  cases.push_back({"sum", [rt](RandomSource& r) { return V{rt(r, {2, 3})}; },
                   [](const V& in) { return ops::mul(ops::sum(in[0]), ops::sum(in[0])); }});
  cases.push_back({"mean", [rt](RandomSource& r) { return V{rt(r, {2, 3})}; },
                   [](const V& in) { return ops::exp(ops::mean(in[0])); }});
  return cases;
}

}  // namespace detail

// Runs every primitive through grad_check on `trials` seeded random inputs
// and reports the worst relative error per primitive.
inline std::vector<SuiteResult> numerics_gradient_suite(std::size_t trials = 100, std::uint64_t seed = 7,
                                                        double threshold = 1e-6) {
  std::vector<SuiteResult> results;
  std::uint64_t case_index = 0;
  for (const auto& c : detail::suite_cases()) {
    SuiteResult res{c.name, 0.0, threshold, trials, 0, 0};
    RandomSource master = RandomSource(seed).fork(case_index++);
    for (std::size_t t = 0; t < trials; ++t) {
      RandomSource rng = master.fork(t);
      auto inputs = c.make_inputs(rng);
      const std::uint64_t weight_seed = rng.next_u64();
      const auto apply = c.apply;
      ScalarFn fn = [apply, weight_seed](const std::vector<Tensor<double>>& in) {
        return detail::weighted_sum(apply(in), weight_seed);
      };
      const auto report = grad_check(fn, inputs);
      res.max_relative_error = std::max(res.max_relative_error, report.max_relative_error);
      res.checked += report.checked;
      res.skipped += report.skipped;
    }
    results.push_back(res);
  }
  return results;
}

}  // namespace rsb

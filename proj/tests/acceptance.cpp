// Acceptance run: one PASS/FAIL line per criterion on stdout, details on stderr.
// Exit status is the number of failed criteria.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "rsbuilding/gradcheck.hpp"
#include "rsbuilding/trainer.hpp"
#include "rsbuilding/verify.hpp"

using namespace rsb;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool passed = false;
  std::string detail;
};

template <Real T>
double max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) return INFINITY;
  double m = 0;
  for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(double(a.data()[i]) - double(b.data()[i])));
  return m;
}

template <Real T>
bool bitwise_equal(const Tensor<T>& a, const Tensor<T>& b) {
  return a.shape() == b.shape() && std::equal(a.data().begin(), a.data().end(), b.data().begin());
}

template <Real T>
Tensor<T> random_image(std::size_t size, std::uint64_t seed) {
  RandomSource rng(seed);
  std::vector<T> v(size * size * 3);
  for (auto& x : v) x = static_cast<T>(rng.uniform(-2.0, 2.0));
  return Tensor<T>(Shape{size, size, 3}, std::move(v));
}

template <Real T>
void zero_tensor(const Tensor<T>& t) {
  auto d = Tensor<T>(t).mutable_data();
  std::fill(d.begin(), d.end(), T(0));
}

std::string fmt(double v) {
  std::ostringstream s;
  s.precision(3);
  s << v;
  return s.str();
}

// ---------------------------------------------------------------------------

Outcome gradient_suite() {
  constexpr double kPrimitiveTol = 1e-6, kModelTol = 1e-3;
  double worst = 0;
  std::string worst_name;
  bool ok = true;
  for (const auto& r : numerics_gradient_suite(100, 7, kPrimitiveTol)) {
    ok = ok && r.passed();
    if (r.max_relative_error >= worst) worst = r.max_relative_error, worst_name = r.name;
    std::cerr << "  primitive " << r.name << ": " << r.max_relative_error << " (" << r.checked << " checked, "
              << r.skipped << " skipped at kinks)\n";
  }
  const auto model = full_model_gradcheck();
  std::cerr << "  full model: " << model.parameter_count << " parameters, max rel err "
            << model.report.max_relative_error << " (" << model.report.checked << " checked, "
            << model.report.skipped << " skipped at kinks)\n";
  ok = ok && model.parameter_count <= 5000 && model.report.max_relative_error <= kModelTol;
  return {ok, "primitives max " + fmt(worst) + " (" + worst_name + ") <= 1e-6; full model " +
                  std::to_string(model.parameter_count) + " params max " + fmt(model.report.max_relative_error) +
                  " <= 1e-3"};
}

Outcome shape_contract() {
  const ModelConfig cfg;
  Model<float> m(cfg, 1);
  const auto trace = m.forward_trace(random_image<float>(64, 2), random_image<float>(64, 3));
  const Shape hw{cfg.image_size, cfg.image_size};
  bool ok = trace.masks.bx1.shape() == hw && trace.masks.bx2.shape() == hw && trace.masks.cd.shape() == hw;
  for (std::size_t level = 0; level < 4; ++level) {
    const std::size_t side = cfg.image_size >> (level + 2);
    const Shape expected{side, side, cfg.pyramid_dim};
    ok = ok && trace.pyramid1.levels[level].shape() == expected && trace.pyramid2.levels[level].shape() == expected;
    ok = ok && trace.task_embeddings[level].shape() == (Shape{3, cfg.pyramid_dim});
  }
  return {ok, "logits 3 x 64x64, pyramid sides 16/8/4/2, E 3x" + std::to_string(cfg.pyramid_dim) + " at 4 levels"};
}

Outcome swap_symmetry() {
  constexpr double kTol = 1e-5;
  const ModelConfig cfg;
  double worst = 0;
  auto swap_values = [](ParameterSet<float>& ps, const std::string& a, const std::string& b) {
    auto ta = ps.find(a).mutable_data();
    auto tb = ps.find(b).mutable_data();
    std::swap_ranges(ta.begin(), ta.end(), tb.begin());
  };
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Model<float> m(cfg, 100 + seed);
    const auto i1 = random_image<float>(64, 200 + seed), i2 = random_image<float>(64, 300 + seed);
    const auto a = m.forward_trace(i1, i2);
    Model<float> s = m.clone();
    swap_values(s.parameters(), "decoder.query.e1", "decoder.query.e2");
    swap_values(s.parameters(), "decoder.temporal.le1", "decoder.temporal.le2");
    const auto b = s.forward_trace(i2, i1);
    worst = std::max({worst, max_abs_diff(a.dense.f1, b.dense.f2), max_abs_diff(a.dense.f2, b.dense.f1),
                      max_abs_diff(a.dense.f_cd, ops::neg(b.dense.f_cd))});
  }
  return {worst <= kTol, "20 seeds, max |diff| " + fmt(worst) + " <= 1e-5"};
}

Outcome residual_identity() {
  const ModelConfig cfg;
  Model<double> m(cfg, 4);
  RandomSource rng(5);
  bool ok = true;
  for (std::size_t level = 0; level < 4; ++level) {
    const auto& l = m.decoder().levels[level];
    for (const auto* attn : {&l.self_attn, &l.queries_from_tokens, &l.tokens_from_queries}) {
      zero_tensor(attn->out.weight);
      zero_tensor(attn->out.bias);
    }
    zero_tensor(l.mlp.fc2.weight);
    zero_tensor(l.mlp.fc2.bias);
    const std::size_t side = cfg.level_side(level + 1);
    std::vector<double> ev(3 * cfg.pyramid_dim), tv(2 * side * side * cfg.pyramid_dim);
    for (auto& x : ev) x = rng.normal();
    for (auto& x : tv) x = rng.normal();
    const Tensor<double> e(Shape{3, cfg.pyramid_dim}, ev), t(Shape{2 * side * side, cfg.pyramid_dim}, tv);
    const auto [e_out, t_out] = decode_level(e, t, l, cfg);
    ok = ok && bitwise_equal(e, e_out) && bitwise_equal(t, t_out);
  }
  return {ok, "E and T bit-identical at all 4 levels"};
}

Outcome loss_decomposition() {
  RandomSource rng(6);
  auto random_logits = [&](std::size_t n) {
    std::vector<double> v(n * n);
    for (auto& x : v) x = rng.uniform(-4, 4);
    return Tensor<double>(Shape{n, n}, v);
  };
  auto random_mask = [&](std::size_t n) {
    std::vector<double> v(n * n);
    for (auto& x : v) x = rng.bernoulli(0.5) ? 1.0 : 0.0;
    return Tensor<double>(Shape{n, n}, v);
  };
  double worst_sum = 0, worst_oracle = 0;
  for (int trial = 0; trial < 300; ++trial) {
    const Regime regime = static_cast<Regime>(trial % 3);
    MaskLogits<double> m{random_logits(6), random_logits(6), random_logits(6)};
    Targets<double> t{random_mask(6), random_mask(6), random_mask(6)};
    if (regime == Regime::ChangeOnly) t.m1.reset(), t.m2.reset();
    if (regime == Regime::SegOnly) t.m_cd.reset();
    const auto loss = federated_loss(m, t, regime);
    const auto& b = loss.breakdown;
    worst_sum = std::max(worst_sum, std::abs(loss.total.item() - (b.term1 + b.term2 + b.term_cd + b.term_pcd)));

    // Independent per-pixel oracle of the four weighted terms.
    const LossWeights w = weights_for_regime(regime).weights;
    const std::size_t n = 36;
    auto sig = [](double x) { return 1.0 / (1.0 + std::exp(-x)); };
    auto ce = [](double p, double y) { return -(y * std::log(p) + (1 - y) * std::log(1 - p)); };
    double t1 = 0, t2 = 0, tc = 0, tp = 0;
    for (std::size_t i = 0; i < n; ++i) {
      const double y1 = t.m1 ? t.m1->data()[i] : 0, y2 = t.m2 ? t.m2->data()[i] : 0;
      const double yc = t.m_cd ? t.m_cd->data()[i] : 0;
      const double p1 = sig(m.bx1.data()[i]), p2 = sig(m.bx2.data()[i]), pc = sig(m.cd.data()[i]);
      t1 += ce(p1, y1) / n;
      t2 += ce(p2, y2) / n;
      tc += ce(pc, yc) / n;
      tp += ce(std::clamp(std::abs(p1 - p2), 1e-6, 1 - 1e-6), yc) / n;
    }
    const double oracle = w.alpha1 * t1 + w.alpha2 * t2 + w.alpha_cd * tc + w.alpha_pcd * tp;
    worst_oracle = std::max(worst_oracle, std::abs(oracle - loss.total.item()));
  }

  // SegOnly: finite differences in the change logits see no effect at all.
  const auto m1 = random_mask(5), m2 = random_mask(5);
  std::vector<Tensor<double>> in{random_logits(5), random_logits(5), random_logits(5)};
  auto seg_loss = [&](const std::vector<Tensor<double>>& v) {
    return federated_loss<double>({v[0], v[1], v[2]}, {m1, m2, std::nullopt}, Regime::SegOnly).total;
  };
  const auto report = grad_check(seg_loss, in);
  bool cd_path_zero = report.max_relative_error <= 1e-6;
  if (in[2].has_grad()) {
    for (double g : in[2].grad()) cd_path_zero = cd_path_zero && g == 0.0;
  }
  {
    NoGradGuard no_grad;
    const double f0 = seg_loss(in).item();
    for (std::size_t i = 0; i < in[2].numel(); ++i) {
      const double x0 = in[2].data()[i];
      in[2].mutable_data()[i] = x0 + 1e-3;
      const double fp = seg_loss(in).item();
      in[2].mutable_data()[i] = x0 - 1e-3;
      const double fm = seg_loss(in).item();
      in[2].mutable_data()[i] = x0;
      cd_path_zero = cd_path_zero && (fp - fm) / 2e-3 == 0.0 && fp == f0;
    }
  }

  const bool tables = weights_for_regime(Regime::SegOnly).weights == LossWeights{1, 1, 0, 0.1} &&
                      weights_for_regime(Regime::ChangeOnly).weights == LossWeights{0, 0, 1, 0.1} &&
                      weights_for_regime(Regime::Full).weights == LossWeights{1, 1, 1, 0.1};
  std::cerr << "  sum of terms vs total: " << worst_sum << ", per-pixel oracle: " << worst_oracle << "\n";
  const bool ok = worst_sum <= 1e-12 && worst_oracle <= 1e-9 && cd_path_zero && tables;
  return {ok, "sum-of-terms err " + fmt(worst_sum) + " <= 1e-12; SegOnly change-logit gradient " +
                  (cd_path_zero ? "zero" : "NONZERO") + "; weight tables " + (tables ? "match" : "DIFFER")};
}

Outcome metrics_oracle() {
  RandomSource rng(7);
  bool counts_ok = true, scores_ok = true;
  double worst_f1 = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    Mask gt(32, 32);
    for (auto& v : gt.values) v = rng.bernoulli(0.4) ? 1 : 0;
    std::vector<double> lv(32 * 32);
    for (auto& x : lv) x = rng.uniform(-4, 4);
    const Tensor<double> logits(Shape{32, 32}, lv);
    std::uint64_t tp = 0, fp = 0, fn = 0, tn = 0;
    for (std::size_t i = 0; i < lv.size(); ++i) {
      const bool p = 1.0 / (1.0 + std::exp(-lv[i])) > 0.5;
      const bool g = gt.values[i] == 1;
      tp += p && g;
      fp += p && !g;
      fn += !p && g;
      tn += !p && !g;
    }
    const auto c = accumulate(logits, gt);
    counts_ok = counts_ok && c == ConfusionCounts{tp, fp, fn, tn};
    const auto s = compute(c);
    const double iou = double(tp) / double(tp + fp + fn);
    const double p = double(tp) / double(tp + fp), r = double(tp) / double(tp + fn);
    scores_ok = scores_ok && s.iou == iou && s.precision == p && s.recall == r;
    worst_f1 = std::max(worst_f1, std::abs(s.f1 - 2 * p * r / (p + r)));
  }
  const auto hand = compute({3, 1, 1, 0});
  const bool hand_ok = hand.iou == 0.6 && hand.f1 == 0.75;
  const bool ok = counts_ok && scores_ok && worst_f1 <= 1e-12 && hand_ok;
  return {ok, std::string("1000 pairs: counts ") + (counts_ok ? "exact" : "DIFFER") + ", IoU/P/R " +
                  (scores_ok ? "exact" : "DIFFER") + ", F1 vs 2PR/(P+R) " + fmt(worst_f1) + "; hand case IoU " +
                  fmt(hand.iou) + " F1 " + fmt(hand.f1)};
}

// Training protocol shared by the drill and the ablation runs.
TrainConfig benchmark_training(std::uint64_t seed) {
  TrainConfig t;
  t.steps = 500;
  t.batch_size = 4;
  t.seed = seed;
  t.lr = 1e-3;
  t.augment = false;
  return t;
}

Outcome overfit_drill() {
  constexpr double kIouBar = 0.80;
  const auto t0 = std::chrono::steady_clock::now();
  std::vector<SamplePair> pairs;
  for (std::uint64_t s = 100; s < 108; ++s) pairs.push_back(generate_scene(s, SceneSpec{}));
  std::vector<double> losses;
  const auto st = train<float>(ModelConfig{}, benchmark_training(1), AugmentConfig::none(), pairs,
                               [&](const TrainLogEntry& e) { losses.push_back(e.loss.total); });
  const auto counts = evaluate(st.model, pairs);
  const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  const double iou = mean_iou(counts);
  auto window_mean = [&](std::size_t from) {
    double s = 0;
    for (std::size_t i = from; i < from + 50; ++i) s += losses[i];
    return s / 50;
  };
  const double first = window_mean(0), last = window_mean(losses.size() - 50);
  std::cerr << "  drill metrics " << metrics_report(counts).dump() << "\n";
  const bool ok = iou >= kIouBar && last < first && seconds <= 15 * 60;
  return {ok, "mean task IoU " + fmt(iou) + " >= 0.80; loss " + fmt(first) + " -> " + fmt(last) + "; " +
                  fmt(seconds) + " s"};
}

Outcome ablation() {
  constexpr double kMargin = 0.02;
  std::vector<SamplePair> bench;
  for (std::uint64_t s = 5000; s < 5064; ++s) bench.push_back(generate_scene(s, SceneSpec{}));
  struct Variant {
    const char* name;
    std::function<void(ModelConfig&)> disable;
  };
  const std::vector<Variant> variants{{"full", [](ModelConfig&) {}},
                                      {"no-enhancer", [](ModelConfig& c) { c.enable_enhancer = false; }},
                                      {"no-dual-path", [](ModelConfig& c) { c.dual_path_decoder = false; }},
                                      {"no-multi-level", [](ModelConfig& c) { c.multi_level_decoding = false; }}};
  std::vector<double> iou;
  for (const auto& v : variants) {
    ModelConfig cfg;
    v.disable(cfg);
    const auto st = train<float>(cfg, benchmark_training(3), AugmentConfig::none(), bench);
    const auto counts = evaluate(st.model, bench);
    iou.push_back(mean_iou(counts));
    std::cerr << "  ablation " << v.name << ": mean IoU " << iou.back() << " " << metrics_report(counts).dump()
              << "\n";
  }
  bool ok = true;
  std::string detail = "full " + fmt(iou[0]);
  for (std::size_t i = 1; i < variants.size(); ++i) {
    ok = ok && iou[i] != iou[0] && iou[0] >= iou[i] - kMargin;
    detail += std::string(", ") + variants[i].name + " " + fmt(iou[i]);
  }
  return {ok, detail + " (full >= each - 0.02)"};
}

Outcome determinism_and_persistence() {
  ModelConfig cfg;
  cfg.image_size = 32;
  SceneSpec spec;
  spec.image_size = 32;
  spec.building_count = {2, 3};
  spec.building_size = {5, 10};
  std::vector<SamplePair> data;
  for (std::uint64_t s = 0; s < 6; ++s) data.push_back(generate_scene(s, spec));
  TrainConfig tc;
  tc.steps = 5;
  tc.batch_size = 2;
  tc.seed = 11;
  AugmentConfig aug;
  aug.crop_size = 24;

  const fs::path dir = fs::temp_directory_path() / "rsbuilding_acceptance";
  fs::remove_all(dir);
  fs::create_directories(dir);
  auto slurp = [](const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return std::string(std::istreambuf_iterator<char>(in), {});
  };
  const auto a = train<float>(cfg, tc, aug, data);
  const auto b = train<float>(cfg, tc, aug, data);
  save_checkpoint(dir / "a.ckpt", a);
  save_checkpoint(dir / "b.ckpt", b);
  const bool same_bytes = slurp(dir / "a.ckpt") == slurp(dir / "b.ckpt");

  const auto loaded = load_checkpoint<float>(dir / "a.ckpt");
  bool same_outputs = true;
  for (const auto& s : data) {
    NoGradGuard no_grad;
    const auto x = a.model.forward(s.i1, s.i2), y = loaded.model.forward(s.i1, s.i2);
    same_outputs = same_outputs && bitwise_equal(x.bx1, y.bx1) && bitwise_equal(x.bx2, y.bx2) &&
                   bitwise_equal(x.cd, y.cd);
  }
  same_outputs = same_outputs && metrics_report(evaluate(a.model, data)) == metrics_report(evaluate(loaded.model, data));
  save_checkpoint(dir / "resaved.ckpt", loaded);
  const bool resave = slurp(dir / "a.ckpt") == slurp(dir / "resaved.ckpt");
  fs::remove_all(dir);
  return {same_bytes && same_outputs && resave,
          std::string("checkpoints ") + (same_bytes ? "bit-identical" : "DIFFER") + "; reload logits " +
              (same_outputs ? "bit-exact" : "DIFFER") + "; re-save " + (resave ? "identical" : "DIFFERS")};
}

}  // namespace

int main() {
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"gradient-suite", gradient_suite},
      {"shape-contract", shape_contract},
      {"swap-symmetry", swap_symmetry},
      {"residual-identity", residual_identity},
      {"loss-decomposition", loss_decomposition},
      {"metrics-oracle", metrics_oracle},
      {"overfit-drill", overfit_drill},
      {"ablation-non-inferiority", ablation},
      {"determinism-persistence", determinism_and_persistence},
  };
  int failures = 0;
  for (const auto& [name, run] : criteria) {
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = run();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    failures += o.passed ? 0 : 1;
    std::cout << (o.passed ? "PASS " : "FAIL ") << name << ": " << o.detail << " [" << fmt(seconds) << " s]"
              << std::endl;
  }
  return failures;
}

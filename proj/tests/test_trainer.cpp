#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

#include "rsbuilding/run_config.hpp"
#include "rsbuilding/trainer.hpp"

using namespace rsb;
namespace fs = std::filesystem;

namespace {

ModelConfig small_config() {
  ModelConfig c;
  c.image_size = 32;
  c.enc_dim = 16;
  c.enc_depth = 1;
  c.enc_heads = 2;
  c.pyramid_dim = 8;
  c.decoder_heads = 2;
  c.dense_dim = 16;
  return c;
}

SceneSpec small_scene() {
  SceneSpec s;
  s.image_size = 32;
  s.building_count = {2, 3};
  s.building_size = {5, 10};
  return s;
}

std::vector<SamplePair> small_dataset(std::size_t n, std::uint64_t seed0 = 0) {
  std::vector<SamplePair> out;
  for (std::size_t i = 0; i < n; ++i) out.push_back(generate_scene(seed0 + i, small_scene()));
  return out;
}

TrainConfig quick_train(std::size_t steps) {
  TrainConfig t;
  t.steps = steps;
  t.batch_size = 2;
  t.seed = 5;
  t.lr = 1e-3;
  return t;
}

AugmentConfig small_augment() {
  AugmentConfig a;
  a.crop_size = 24;
  return a;
}

template <Real T>
void expect_same_parameters(const ParameterSet<T>& a, const ParameterSet<T>& b) {
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t k = 0; k < a.size(); ++k) {
    const auto& [na, ta] = a.entries()[k];
    const auto& [nb, tb] = b.entries()[k];
    EXPECT_EQ(na, nb);
    EXPECT_TRUE(std::equal(ta.data().begin(), ta.data().end(), tb.data().begin())) << na;
  }
}

fs::path temp_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("rsb_trainer_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

ParameterSet<double> scalar_parameter(double value, double grad) {
  ParameterSet<double> ps;
  RandomSource rng(0);
  auto t = ps.add("w", {1}, Init::zeros, rng);
  t.mutable_data()[0] = value;
  t.mutable_grad()[0] = grad;
  return ps;
}

}  // namespace

TEST(PolyLr, Schedule) {
  EXPECT_DOUBLE_EQ(poly_lr(0, 100, 1e-4), 1e-4);
  EXPECT_DOUBLE_EQ(poly_lr(100, 100, 1e-4), 0.0);
  EXPECT_DOUBLE_EQ(poly_lr(50, 100, 1e-4), 5e-5);
  EXPECT_DOUBLE_EQ(poly_lr(150, 100, 1e-4, 1.0, 1e-6), 1e-6);
  EXPECT_DOUBLE_EQ(poly_lr(50, 100, 1.0, 2.0, 0.0), 0.25);
  EXPECT_DOUBLE_EQ(poly_lr(50, 100, 1.0, 1.0, 0.5), 0.75);
}

TEST(AdamW, ZeroGradientNoDecayLeavesParameters) {
  auto ps = scalar_parameter(0.7, 0.0);
  auto st = OptimizerState<double>::for_parameters(ps);
  for (int i = 0; i < 5; ++i) adamw_step(ps, st, 1e-2, AdamWHyper{0.9, 0.999, 1e-8, 0.0});
  EXPECT_EQ(ps.find("w").data()[0], 0.7);
}

TEST(AdamW, MatchesHandSteppedOracle) {
  const double g = 0.3, lr = 1e-2, b1 = 0.9, b2 = 0.999, eps = 1e-8, wd = 0.05;
  auto ps = scalar_parameter(1.0, g);
  auto st = OptimizerState<double>::for_parameters(ps);
  double x = 1.0, m = 0, v = 0;
  for (int t = 1; t <= 3; ++t) {
    adamw_step(ps, st, lr, AdamWHyper{b1, b2, eps, wd});
    x *= 1 - lr * wd;
    m = b1 * m + (1 - b1) * g;
    v = b2 * v + (1 - b2) * g * g;
    const double mhat = m / (1 - std::pow(b1, t)), vhat = v / (1 - std::pow(b2, t));
    x -= lr * mhat / (std::sqrt(vhat) + eps);
    EXPECT_NEAR(ps.find("w").data()[0], x, 1e-15) << "step " << t;
  }
  // The first bias-corrected step has magnitude lr.
  auto fresh = scalar_parameter(1.0, g);
  auto fs = OptimizerState<double>::for_parameters(fresh);
  adamw_step(fresh, fs, lr, AdamWHyper{b1, b2, eps, 0.0});
  EXPECT_NEAR(fresh.find("w").data()[0], 1.0 - lr, 1e-9);
}

TEST(AdamW, WeightDecayOnlyShrinksGeometrically) {
  auto ps = scalar_parameter(2.0, 0.0);
  auto st = OptimizerState<double>::for_parameters(ps);
  const double lr = 0.1, wd = 0.05;
  double expected = 2.0;
  for (int i = 0; i < 4; ++i) {
    adamw_step(ps, st, lr, AdamWHyper{0.9, 0.999, 1e-8, wd});
    expected *= 1 - lr * wd;
    EXPECT_DOUBLE_EQ(ps.find("w").data()[0], expected);
  }
}

TEST(AdamW, NanGradientNamesParameter) {
  auto ps = scalar_parameter(1.0, std::nan(""));
  auto st = OptimizerState<double>::for_parameters(ps);
  try {
    adamw_step(ps, st, 1e-3, AdamWHyper{});
    FAIL();
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("'w'"), std::string::npos);
  }
  EXPECT_EQ(ps.find("w").data()[0], 1.0);
}

TEST(Train, ZeroStepsReturnsInitialization) {
  const auto data = small_dataset(3);
  const auto st = train<float>(small_config(), quick_train(0), small_augment(), data);
  const auto init = initial_state<float>(small_config(), quick_train(0));
  expect_same_parameters(st.model.parameters(), init.model.parameters());
  EXPECT_EQ(st.step, 0u);
}

TEST(Train, SameSeedGivesBitIdenticalCheckpoints) {
  const auto data = small_dataset(4);
  const fs::path dir = temp_dir("determinism");
  const auto a = train<float>(small_config(), quick_train(4), small_augment(), data);
  const auto b = train<float>(small_config(), quick_train(4), small_augment(), data);
  save_checkpoint(dir / "a.ckpt", a);
  save_checkpoint(dir / "b.ckpt", b);
  auto slurp = [](const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return std::string(std::istreambuf_iterator<char>(in), {});
  };
  EXPECT_EQ(slurp(dir / "a.ckpt"), slurp(dir / "b.ckpt"));
  auto other = quick_train(4);
  other.seed = 6;
  const auto c = train<float>(small_config(), other, small_augment(), data);
  save_checkpoint(dir / "c.ckpt", c);
  EXPECT_NE(slurp(dir / "a.ckpt"), slurp(dir / "c.ckpt"));
}

TEST(Train, LogsEveryStep) {
  const auto data = small_dataset(3);
  std::vector<TrainLogEntry> log;
  train<float>(small_config(), quick_train(3), small_augment(), data, [&](const TrainLogEntry& e) { log.push_back(e); });
  ASSERT_EQ(log.size(), 3u);
  EXPECT_DOUBLE_EQ(log[0].lr, 1e-3);
  const auto j = to_json(log[1]);
  for (const char* key : {"step", "lr", "term1", "term2", "term_cd", "term_pcd", "total"}) EXPECT_TRUE(j.contains(key));
  EXPECT_EQ(j["step"], 1);
  const auto& b = log[2].loss;
  EXPECT_EQ(b.total, ((b.term1 + b.term2) + b.term_cd) + b.term_pcd);
}

TEST(Train, RejectsEmptyDataAndWrongSize) {
  EXPECT_THROW(train<float>(small_config(), quick_train(1), small_augment(), {}), DataError);
  const auto data = small_dataset(1);
  try {
    train<float>(ModelConfig{}, quick_train(1), small_augment(), data);
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("32x32"), std::string::npos) << e.what();
    EXPECT_NE(std::string(e.what()).find("64x64"), std::string::npos) << e.what();
  }
}

TEST(Train, NonFiniteInputAbortsWithBatchIds) {
  auto data = small_dataset(2);
  data[1].i1.pixels[7] = std::nanf("");
  auto cfg = quick_train(1);
  cfg.augment = false;
  try {
    train<float>(small_config(), cfg, small_augment(), data);
    FAIL();
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("scene-1"), std::string::npos) << e.what();
  }
}

// The batch gradient is the mean of the per-sample gradients, whatever the
// regimes in the batch.
TEST(Train, MixedRegimeBatchGradientIsLinear) {
  const ModelConfig cfg = small_config();
  Model<double> model(cfg, 9);
  const auto scene_a = generate_scene(21, small_scene());
  RandomSource rng(22);
  const SamplePair seg = seg_to_pair(scene_a.i1, *scene_a.m1, rng, PhotometricRanges{}, "seg");
  const SamplePair cd = to_change_only(generate_scene(23, small_scene()));
  const SamplePair full = generate_scene(24, small_scene());

  auto grads = [&](const std::vector<SamplePair>& batch) {
    model.parameters().zero_grad();
    accumulate_batch_gradient(model, batch);
    std::vector<double> out;
    for (const auto& [_, t] : model.parameters().entries()) {
      if (t.has_grad()) out.insert(out.end(), t.grad().begin(), t.grad().end());
      else out.insert(out.end(), t.numel(), 0.0);
    }
    return out;
  };
  const auto g_batch = grads({seg, cd, full});
  const auto g_seg = grads({seg});
  const auto g_cd = grads({cd});
  const auto g_full = grads({full});
  double worst = 0;
  for (std::size_t i = 0; i < g_batch.size(); ++i) {
    const double expected = (g_seg[i] + g_cd[i] + g_full[i]) / 3.0;
    worst = std::max(worst, std::abs(g_batch[i] - expected));
  }
  EXPECT_LE(worst, 1e-10);
}

TEST(Checkpoint, RoundTripIsBitExact) {
  const auto data = small_dataset(4);
  const auto st = train<float>(small_config(), quick_train(3), small_augment(), data);
  const fs::path path = temp_dir("roundtrip") / "model.ckpt";
  save_checkpoint(path, st);
  const auto back = load_checkpoint<float>(path);
  expect_same_parameters(back.model.parameters(), st.model.parameters());
  EXPECT_EQ(back.step, st.step);
  EXPECT_EQ(back.optimizer.step, st.optimizer.step);
  EXPECT_EQ(back.optimizer.m, st.optimizer.m);
  EXPECT_EQ(back.optimizer.v, st.optimizer.v);
  EXPECT_EQ(back.model.config(), st.model.config());

  const auto before = evaluate(st.model, data);
  const auto after = evaluate(back.model, data);
  EXPECT_EQ(before.bx1, after.bx1);
  EXPECT_EQ(before.bx2, after.bx2);
  EXPECT_EQ(before.cd, after.cd);
  EXPECT_EQ(metrics_report(before).dump(), metrics_report(after).dump());
}

TEST(Checkpoint, HeaderDescribesTensors) {
  const auto st = initial_state<double>(small_config(), quick_train(0));
  const fs::path path = temp_dir("header") / "model.ckpt";
  save_checkpoint(path, st);
  std::ifstream in(path, std::ios::binary);
  unsigned char len[8];
  in.read(reinterpret_cast<char*>(len), 8);
  std::uint64_t n = 0;
  for (int i = 7; i >= 0; --i) n = (n << 8) | len[i];
  std::string text(n, '\0');
  in.read(text.data(), static_cast<std::streamsize>(n));
  const auto header = nlohmann::json::parse(text);
  EXPECT_EQ(header["tensors"].size(), 3 * st.model.parameters().size());
  const auto& first = header["tensors"][0];
  EXPECT_EQ(first["name"], "param/backbone.patch_embed.weight");
  EXPECT_EQ(first["dtype"], "f64");
  EXPECT_EQ(first["offset"], 0);
  EXPECT_EQ(first["nbytes"], 768u * 16u * 8u);
  EXPECT_EQ(checkpoint_config(path), small_config());
  EXPECT_THROW(load_checkpoint<float>(path), ConfigError);
}

TEST(Checkpoint, RejectsGarbage) {
  const fs::path path = temp_dir("garbage") / "bad.ckpt";
  std::ofstream(path) << "not a checkpoint";
  EXPECT_THROW(load_checkpoint<float>(path), DataError);
  EXPECT_THROW(load_checkpoint<float>(path.parent_path() / "missing.ckpt"), DataError);
}

TEST(Evaluate, CountsOnlyPresentMasks) {
  const auto st = initial_state<float>(small_config(), quick_train(0));
  const auto data = std::vector<SamplePair>{to_change_only(generate_scene(1, small_scene()))};
  const auto c = evaluate(st.model, data);
  EXPECT_EQ(c.bx1.total(), 0u);
  EXPECT_EQ(c.cd.total(), 32u * 32u);
}

TEST(Infer, WritesBinaryMasksOfInputSize) {
  const auto st = initial_state<float>(small_config(), quick_train(0));
  const auto p = generate_scene(2, small_scene());
  const fs::path dir = temp_dir("infer");
  infer(st.model, p.i1, p.i2, dir);
  for (const char* name : {"bx1.png", "bx2.png", "cd.png"}) {
    const Mask m = read_png_mask(dir / name);
    EXPECT_EQ(m.height, 32u);
    EXPECT_EQ(m.width, 32u);
  }
  const Image wrong(64, 64);
  EXPECT_THROW(infer(st.model, wrong, wrong, dir), ConfigError);
}

TEST(RunConfig, EmptyDocumentGivesDefaults) {
  EXPECT_EQ(run_config_from_json(nlohmann::json::object()), RunConfig{});
}

TEST(RunConfig, RoundTripsThroughJson) {
  RunConfig c;
  c.model = small_config();
  c.model.dual_path_decoder = false;
  c.model.elem_kind = ElemKind::f64;
  c.scene = small_scene();
  c.scene.photometric.contrast_lo = 0.8;
  c.train = quick_train(7);
  c.train.grad_clip_norm = 1.5;
  c.augment = small_augment();
  c.augment.p_exchange = 0.25;
  c.paths = {"data/train", "runs/a"};
  const nlohmann::json once = c;
  const RunConfig parsed = run_config_from_json(nlohmann::json::parse(once.dump()));
  EXPECT_EQ(parsed, c);
  EXPECT_EQ(nlohmann::json(parsed), once);
}

TEST(RunConfig, PartialSectionsKeepDefaults) {
  const auto c = run_config_from_json(nlohmann::json::parse(R"({"train": {"steps": 12}, "model": {"enc_depth": 3}})"));
  EXPECT_EQ(c.train.steps, 12u);
  EXPECT_EQ(c.train.lr, TrainConfig{}.lr);
  EXPECT_EQ(c.model.enc_depth, 3u);
  EXPECT_EQ(c.model.image_size, 64u);
}

TEST(RunConfig, RejectsUnknownKeysAtEveryLevel) {
  for (const char* text : {R"({"optimizer": {}})", R"({"train": {"momentum": 0.9}})",
                           R"({"scene": {"photometric": {"gamma": 1}}})", R"({"paths": {"log": "x"}})"}) {
    try {
      run_config_from_json(nlohmann::json::parse(text));
      ADD_FAILURE() << text;
    } catch (const ConfigError& e) {
      EXPECT_NE(std::string(e.what()).find("unknown key"), std::string::npos) << e.what();
    }
  }
}

TEST(RunConfig, RejectsInvalidValues) {
  EXPECT_THROW(run_config_from_json(nlohmann::json::parse(R"({"model": {"image_size": 48}})")), ConfigError);
  EXPECT_THROW(run_config_from_json(nlohmann::json::parse(R"({"train": {"steps": "many"}})")), ConfigError);
}

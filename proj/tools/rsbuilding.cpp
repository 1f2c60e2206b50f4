#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "rsbuilding/gradcheck.hpp"
#include "rsbuilding/run_config.hpp"
#include "rsbuilding/verify.hpp"

namespace fs = std::filesystem;
using namespace rsb;

namespace {

constexpr int kExitUsage = 2;
constexpr int kExitData = 3;
constexpr int kExitNumeric = 4;

struct GenDataArgs {
  std::string out;
  std::size_t count = 0;
  std::uint64_t seed = 0;
  std::string regime = "full";
  std::string config;
  std::optional<std::size_t> image_size;
};

struct TrainArgs {
  std::string config;
  std::string data;
  std::string out;
  std::optional<std::size_t> steps;
  std::optional<std::uint64_t> seed;
  std::optional<double> lr;
  std::size_t log_every = 50;
};

struct EvalArgs {
  std::string ckpt;
  std::string data;
  double threshold = 0.5;
};

struct InferArgs {
  std::string ckpt;
  std::string i1;
  std::string i2;
  std::string out;
};

int gen_data(const GenDataArgs& a) {
  SceneSpec spec;
  if (!a.config.empty()) spec = load_run_config(a.config).scene;
  if (a.image_size) spec.image_size = *a.image_size;
  spec.validate();
  const Regime regime = parse_regime(a.regime);
  std::vector<SamplePair> samples;
  samples.reserve(a.count);
  for (std::size_t i = 0; i < a.count; ++i) {
    const std::uint64_t seed = a.seed + i;
    SamplePair full = generate_scene(seed, spec);
    switch (regime) {
      case Regime::Full:
        samples.push_back(std::move(full));
        break;
      case Regime::SegOnly: {
        RandomSource rng = RandomSource(seed).fork(7);
        samples.push_back(seg_to_pair(full.i1, *full.m1, rng, spec.photometric, full.id));
        break;
      }
      case Regime::ChangeOnly:
        samples.push_back(to_change_only(full));
        break;
    }
  }
  write_dataset(a.out, samples);
  std::cerr << "wrote " << samples.size() << " " << to_string(regime) << " samples to " << a.out << "\n";
  return 0;
}

template <Real T>
void run_training(const RunConfig& cfg, const std::vector<SamplePair>& data, std::size_t log_every) {
  const fs::path out(cfg.paths.out);
  fs::create_directories(out);
  std::ofstream log(out / "train_log.jsonl");
  if (!log) throw DataError("cannot write '" + (out / "train_log.jsonl").string() + "'");
  const auto st = train<T>(cfg.model, cfg.train, cfg.augment, data, [&](const TrainLogEntry& e) {
    log << to_json(e).dump() << '\n';
    if (log_every > 0 && (e.step % log_every == 0 || e.step + 1 == cfg.train.steps)) {
      std::cerr << "step " << e.step << " lr " << e.lr << " loss " << e.loss.total << "\n";
    }
  });
  save_checkpoint(out / "checkpoint.ckpt", st);
  std::ofstream(out / "config.json") << nlohmann::json(cfg).dump(2) << '\n';
  std::cerr << "checkpoint written to " << (out / "checkpoint.ckpt").string() << "\n";
}

int train_cmd(const TrainArgs& a) {
  RunConfig cfg = a.config.empty() ? RunConfig{} : load_run_config(a.config);
  if (!a.data.empty()) cfg.paths.data = a.data;
  if (!a.out.empty()) cfg.paths.out = a.out;
  if (a.steps) cfg.train.steps = *a.steps;
  if (a.seed) cfg.train.seed = *a.seed;
  if (a.lr) cfg.train.lr = *a.lr;
  cfg.validate();
  if (cfg.paths.data.empty()) throw ConfigError("no dataset given (--data or paths.data)");
  if (cfg.paths.out.empty()) throw ConfigError("no output directory given (--out or paths.out)");
  const auto data = load_dataset(load_manifest(cfg.paths.data));
  std::cerr << "training on " << data.size() << " samples for " << cfg.train.steps << " steps\n";
  if (cfg.model.elem_kind == ElemKind::f64) {
    run_training<double>(cfg, data, a.log_every);
  } else {
    run_training<float>(cfg, data, a.log_every);
  }
  return 0;
}

template <Real T>
nlohmann::json evaluate_checkpoint(const EvalArgs& a, const std::vector<SamplePair>& data) {
  const auto st = load_checkpoint<T>(a.ckpt);
  for (const auto& s : data) check_sample_size(s, st.model.config());
  return metrics_report(evaluate(st.model, data, a.threshold));
}

int eval_cmd(const EvalArgs& a) {
  const ModelConfig cfg = checkpoint_config(a.ckpt);
  const auto data = load_dataset(load_manifest(a.data));
  const auto report = cfg.elem_kind == ElemKind::f64 ? evaluate_checkpoint<double>(a, data)
                                                     : evaluate_checkpoint<float>(a, data);
  std::cout << report.dump() << std::endl;
  return 0;
}

int infer_cmd(const InferArgs& a) {
  const ModelConfig cfg = checkpoint_config(a.ckpt);
  const Image i1 = read_png_rgb(a.i1);
  const Image i2 = read_png_rgb(a.i2);
  if (cfg.elem_kind == ElemKind::f64) {
    infer(load_checkpoint<double>(a.ckpt).model, i1, i2, a.out);
  } else {
    infer(load_checkpoint<float>(a.ckpt).model, i1, i2, a.out);
  }
  std::cout << nlohmann::json{{"bx1", (fs::path(a.out) / "bx1.png").string()},
                              {"bx2", (fs::path(a.out) / "bx2.png").string()},
                              {"cd", (fs::path(a.out) / "cd.png").string()}}
                   .dump()
            << std::endl;
  return 0;
}

int gradcheck_cmd(bool full_model) {
  bool ok = true;
  nlohmann::json primitives = nlohmann::json::object();
  for (const auto& r : numerics_gradient_suite()) {
    primitives[r.name] = {{"max_relative_error", r.max_relative_error},
                          {"threshold", r.threshold},
                          {"checked", r.checked},
                          {"skipped", r.skipped},
                          {"passed", r.passed()}};
    ok = ok && r.passed();
    std::cerr << r.name << ": " << r.max_relative_error << (r.passed() ? "" : "  FAIL") << "\n";
  }
  nlohmann::json out{{"primitives", primitives}};
  if (full_model) {
    constexpr double threshold = 1e-3;
    const auto res = full_model_gradcheck();
    const bool passed = res.report.max_relative_error <= threshold;
    out["full_model"] = {{"parameters", res.parameter_count},
                         {"max_relative_error", res.report.max_relative_error},
                         {"threshold", threshold},
                         {"checked", res.report.checked},
                         {"skipped", res.report.skipped},
                         {"passed", passed}};
    ok = ok && passed;
    std::cerr << "full model (" << res.parameter_count << " parameters): " << res.report.max_relative_error << "\n";
  }
  out["passed"] = ok;
  std::cout << out.dump() << std::endl;
  return ok ? 0 : kExitNumeric;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Building extraction and change detection on synthetic remote-sensing pairs"};
  app.require_subcommand(1);

  GenDataArgs gen;
  auto* gen_cmd = app.add_subcommand("gen-data", "Write a synthetic dataset and manifest");
  gen_cmd->add_option("--out", gen.out, "Output directory")->required();
  gen_cmd->add_option("--count", gen.count, "Number of pairs")->required();
  gen_cmd->add_option("--seed", gen.seed, "Seed of the first pair")->required();
  gen_cmd->add_option("--regime", gen.regime, "Annotation regime")
      ->check(CLI::IsMember({"full", "seg", "cd"}))
      ->capture_default_str();
  gen_cmd->add_option("--config", gen.config, "Run config whose scene section is used");
  gen_cmd->add_option("--image-size", gen.image_size, "Override scene.image_size");

  TrainArgs tr;
  auto* train_sub = app.add_subcommand("train", "Train a model and write checkpoint.ckpt and train_log.jsonl");
  train_sub->add_option("--config", tr.config, "Run config JSON");
  train_sub->add_option("--data", tr.data, "Dataset directory or manifest (overrides paths.data)");
  train_sub->add_option("--out", tr.out, "Output directory (overrides paths.out)");
  train_sub->add_option("--steps", tr.steps, "Override train.steps");
  train_sub->add_option("--seed", tr.seed, "Override train.seed");
  train_sub->add_option("--lr", tr.lr, "Override train.lr");
  train_sub->add_option("--log-every", tr.log_every, "Progress line interval on stderr (0 disables)")
      ->capture_default_str();

  EvalArgs ev;
  auto* eval_sub = app.add_subcommand("eval", "Print IoU/P/R/F1 of a checkpoint on a dataset as JSON");
  eval_sub->add_option("--ckpt", ev.ckpt, "Checkpoint file")->required();
  eval_sub->add_option("--data", ev.data, "Dataset directory or manifest")->required();
  eval_sub->add_option("--threshold", ev.threshold, "Probability threshold")->capture_default_str();

  InferArgs inf;
  auto* infer_sub = app.add_subcommand("infer", "Write bx1.png, bx2.png and cd.png for one image pair");
  infer_sub->add_option("--ckpt", inf.ckpt, "Checkpoint file")->required();
  infer_sub->add_option("--i1", inf.i1, "First image (PNG)")->required();
  infer_sub->add_option("--i2", inf.i2, "Second image (PNG)")->required();
  infer_sub->add_option("--out", inf.out, "Output directory")->required();

  bool full_model = false;
  auto* gc_sub = app.add_subcommand("gradcheck", "Check reverse-mode gradients against finite differences");
  gc_sub->add_flag("--full-model", full_model, "Also check every parameter of a small full model");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitUsage;
  }

  try {
    if (*gen_cmd) return gen_data(gen);
    if (*train_sub) return train_cmd(tr);
    if (*eval_sub) return eval_cmd(ev);
    if (*infer_sub) return infer_cmd(inf);
    if (*gc_sub) return gradcheck_cmd(full_model);
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const ShapeError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const DataError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitData;
  } catch (const NumericError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return kExitUsage;
}

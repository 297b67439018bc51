// Command-line front end: train, eval, explain, bench. Every subcommand
// writes JSON lines to stdout.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "ngsll/baselines.hpp"
#include "ngsll/checkpoint.hpp"
#include "ngsll/data.hpp"
#include "ngsll/model.hpp"
#include "ngsll/render.hpp"
#include "ngsll/train.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace ngsll;

namespace {

// Bad configuration or arguments.
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Options {
  std::string config;
  std::string checkpoint;
  std::string dataset;
  std::optional<std::size_t> k;
  std::string mode = "hard";
  std::optional<std::uint64_t> seed;
  std::string svg;
  std::string html;
  std::size_t reps = 200;
  std::size_t index = 0;
  std::string split = "test";
  std::vector<std::size_t> ks;
  bool baselines = false;
};

void emit(const json& j) { std::cout << j.dump() << '\n' << std::flush; }

json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open " + path.string());
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

const data::Dataset& pick_split(const data::Splits& s, const std::string& name) {
  if (name == "train") return s.train;
  if (name == "validation") return s.validation;
  if (name == "test") return s.test;
  throw ConfigError("unknown split '" + name + "' (expected train, validation or test)");
}

fs::path resolve(const fs::path& base, const std::string& p) {
  const fs::path path(p);
  return path.is_absolute() ? path : base / path;
}

int cmd_train(const Options& o) {
  if (o.config.empty()) throw ConfigError("train needs --config");
  const fs::path config_path(o.config);
  const json cfg = read_json(config_path);
  static const std::vector<std::string> known{"dataset", "model", "train", "seed", "checkpoint"};
  for (const auto& [key, _] : cfg.items()) {
    if (std::find(known.begin(), known.end(), key) == known.end()) {
      throw ConfigError("config: unknown key '" + key + "'");
    }
  }
  const fs::path base = config_path.parent_path();
  std::string manifest = o.dataset;
  if (manifest.empty()) {
    if (!cfg.contains("dataset")) throw ConfigError("config: missing 'dataset' (or pass --dataset)");
    manifest = resolve(base, cfg.at("dataset").get<std::string>()).string();
  }
  if (!fs::exists(manifest)) throw ConfigError("dataset manifest not found: " + manifest);
  const std::uint64_t seed = o.seed.value_or(cfg.value("seed", std::uint64_t{0}));
  std::string ckpt = o.checkpoint;
  if (ckpt.empty() && cfg.contains("checkpoint")) {
    ckpt = resolve(base, cfg.at("checkpoint").get<std::string>()).string();
  }

  model::ModelConfig mc;
  train::TrainSchedule schedule;
  data::Splits splits;
  try {
    splits = data::load_manifest(manifest);
    json merged = model::ModelConfig::for_dataset(splits.train);
    if (cfg.contains("model")) merged.merge_patch(cfg.at("model"));
    mc = merged.get<model::ModelConfig>();
    if (cfg.contains("train")) schedule = cfg.at("train").get<train::TrainSchedule>();
    if (o.k) {
      schedule.k_target = *o.k;
      schedule.k_coarse = std::max(schedule.k_coarse, *o.k);
    }
    mc.k = schedule.k_target;
    mc.tau_coarse = schedule.tau_coarse;
    mc.tau_fine = schedule.tau_fine;
    mc.validate();
    schedule.validate();
  } catch (const json::exception& e) {
    throw ConfigError(e.what());
  } catch (const ContractError& e) {
    throw ConfigError(e.what());
  }

  model::Model m(mc, seed);
  gate::Rng rng(seed ^ 0x9e3779b97f4a7c15ULL);
  emit({{"event", "start"},
        {"variant", model::to_string(mc.variant)},
        {"parameters", m.parameter_count()},
        {"train", splits.train.size()},
        {"validation", splits.validation.size()},
        {"test", splits.test.size()},
        {"seed", seed}});
  const auto t0 = std::chrono::steady_clock::now();
  const auto result = train::coarse_to_fine_train(
      m, splits.train, splits.validation, schedule, rng, [](const train::EpochRecord& r) {
        emit({{"event", "epoch"},    {"epoch", r.epoch},           {"phase", r.phase},
              {"k", r.k},            {"tau", r.tau},               {"lr", r.lr},
              {"train_loss", r.train_loss}, {"val_loss", r.val_loss},
              {"val_accuracy", r.val_accuracy}});
      });
  const double seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  json meta{{"feature_names", splits.train.feature_names},
            {"class_names", splits.train.class_names},
            {"manifest", fs::absolute(manifest).string()},
            {"k_target", schedule.k_target},
            {"clamp_k", schedule.clamp_k},
            {"seed", seed}};
  if (splits.train.vocabulary) meta["vocabulary"] = splits.train.vocabulary->tokens();
  // Rounding to checkpoint precision happens before the final evaluation, so
  // the reported accuracy is that of the stored model.
  if (!ckpt.empty()) {
    checkpoint::save(ckpt, m, meta);
  } else {
    m.round_to_float();
  }
  const auto test = train::evaluate(m, splits.test, schedule.k_target, schedule.clamp_k);
  json done{{"event", "done"},          {"seconds", seconds},
            {"test_accuracy", test.accuracy}, {"test_loss", test.loss},
            {"k", schedule.k_target},   {"epochs", result.log.size()}};
  if (result.switch_epoch) done["switch_epoch"] = *result.switch_epoch;
  if (!ckpt.empty()) done["checkpoint"] = ckpt;
  emit(done);
  return 0;
}

struct Session {
  checkpoint::Loaded loaded;
  data::Splits splits;
  std::size_t k;
  bool clamp;
};

Session open_session(const Options& o) {
  if (o.checkpoint.empty()) throw ConfigError("--checkpoint is required");
  if (!fs::exists(o.checkpoint)) throw ConfigError("checkpoint not found: " + o.checkpoint);
  auto loaded = checkpoint::load(o.checkpoint);
  std::string manifest = o.dataset;
  if (manifest.empty()) manifest = loaded.metadata.value("manifest", std::string());
  if (manifest.empty()) throw ConfigError("--dataset is required (checkpoint names no manifest)");
  if (!fs::exists(manifest)) throw ConfigError("dataset manifest not found: " + manifest);
  data::Splits splits;
  try {
    splits = data::load_manifest(manifest);
  } catch (const ContractError& e) {
    throw ConfigError(e.what());
  }
  const std::size_t k = o.k.value_or(loaded.metadata.value("k_target", loaded.model.config().k));
  const bool clamp = loaded.metadata.value("clamp_k", false);
  return Session{std::move(loaded), std::move(splits), k, clamp};
}

int cmd_eval(const Options& o) {
  const Session s = open_session(o);
  const auto& ds = pick_split(s.splits, o.split);
  const std::vector<std::size_t> ks = o.ks.empty() ? std::vector<std::size_t>{s.k} : o.ks;
  const char* variant = model::to_string(s.loaded.model.config().variant);
  for (std::size_t k : ks) {
    const auto ev = train::evaluate(s.loaded.model, ds, k, s.clamp);
    emit({{"event", "eval"}, {"model", variant}, {"split", o.split}, {"k", k},
          {"accuracy", ev.accuracy}, {"loss", ev.loss}, {"count", ev.count}});
  }
  if (!o.baselines) return 0;
  // Global linear models on z: fit on train, α picked on validation per K.
  const auto train_design = baselines::design(s.splits.train);
  const auto val_design = baselines::design(s.splits.validation);
  const auto eval_design = baselines::design(ds);
  const auto grid = baselines::default_alpha_grid();
  for (auto kind : {baselines::Kind::kRidge, baselines::Kind::kLasso}) {
    for (std::size_t k : ks) {
      const auto sel = baselines::select_alpha(kind, train_design, val_design, k, grid);
      emit({{"event", "eval"}, {"model", baselines::to_string(kind)}, {"split", o.split},
            {"k", k}, {"alpha", sel.alpha},
            {"accuracy", baselines::linear_accuracy(eval_design.z, eval_design.y, sel.w)},
            {"count", ds.size()}});
    }
  }
  return 0;
}

json explanation_json(const model::Explanation& ex, const data::Sample& sample) {
  json entries = json::array();
  for (const auto& e : ex.entries) {
    entries.push_back({{"index", e.index}, {"name", e.name}, {"weight", e.weight}});
  }
  return {{"event", "explain"},     {"sample", sample.id},  {"label", sample.label},
          {"prediction", ex.prediction}, {"predicted_label", ex.predicted_label},
          {"head", ex.head},        {"mode", gate::to_string(ex.mode)},
          {"features", entries}};
}

int cmd_explain(const Options& o) {
  const Session s = open_session(o);
  const auto& ds = pick_split(s.splits, o.split);
  if (o.index >= ds.size()) {
    throw ConfigError("--index " + std::to_string(o.index) + " outside split of " +
                      std::to_string(ds.size()));
  }
  const auto& sample = ds.samples[o.index];
  const auto mode = gate::parse_gate_mode(o.mode);
  gate::Rng rng(o.seed.value_or(0));
  const auto ex = s.loaded.model.explain(sample, s.k, ds.feature_names, mode, &rng, s.clamp);
  emit(explanation_json(ex, sample));
  if (!o.svg.empty()) {
    if (ds.modality != data::Modality::kImage) throw ConfigError("--svg needs an image dataset");
    std::ofstream(o.svg) << render::svg_heatmap(sample.z, ex);
  }
  if (!o.html.empty()) {
    if (!ds.vocabulary) throw ConfigError("--html needs a text dataset");
    std::ofstream(o.html) << render::html_highlight(sample, *ds.vocabulary, ex);
  }
  return 0;
}

int cmd_bench(const Options& o) {
  const Session s = open_session(o);
  const auto& ds = pick_split(s.splits, o.split);
  if (o.reps == 0) throw ConfigError("--reps must be positive");
  const auto& model = s.loaded.model;
  const std::vector<std::size_t> ks = o.ks.empty() ? std::vector<std::size_t>{1, 5, 10} : o.ks;
  for (std::size_t k : ks) {
    // Warm-up pass, excluded from timing.
    model.explain(ds.samples.front(), k, ds.feature_names, gate::GateMode::kHard, nullptr,
                  s.clamp);
  }
  std::vector<std::vector<double>> times(ks.size());
  // K values are interleaved so drift in machine load hits all of them alike.
  for (std::size_t r = 0; r < o.reps; ++r) {
    const auto& sample = ds.samples[r % ds.size()];
    for (std::size_t i = 0; i < ks.size(); ++i) {
      const auto t0 = std::chrono::steady_clock::now();
      const auto ex = model.explain(sample, ks[i], ds.feature_names, gate::GateMode::kHard,
                                    nullptr, s.clamp);
      const auto t1 = std::chrono::steady_clock::now();
      if (ex.entries.empty()) throw TrainingError("empty explanation");
      times[i].push_back(std::chrono::duration<double, std::micro>(t1 - t0).count());
    }
  }
  for (std::size_t i = 0; i < ks.size(); ++i) {
    auto& t = times[i];
    double mean = 0.0;
    for (double v : t) mean += v;
    mean /= static_cast<double>(t.size());
    double var = 0.0;
    for (double v : t) var += (v - mean) * (v - mean);
    const double sd = t.size() > 1 ? std::sqrt(var / static_cast<double>(t.size() - 1)) : 0.0;
    std::sort(t.begin(), t.end());
    emit({{"event", "bench"}, {"k", ks[i]}, {"reps", o.reps}, {"mean_ms", mean / 1000.0},
          {"sd_ms", sd / 1000.0}, {"median_ms", t[t.size() / 2] / 1000.0}});
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Sparse local linear explanations: train, evaluate, explain, benchmark"};
  app.require_subcommand(1);
  Options o;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--checkpoint", o.checkpoint, "checkpoint file");
    sub->add_option("--dataset", o.dataset, "dataset manifest (JSON)");
    sub->add_option("--k", o.k, "number of features per explanation")->check(CLI::PositiveNumber);
    sub->add_option("--seed", o.seed, "random seed");
    sub->add_option("--split", o.split, "train, validation or test")
        ->check(CLI::IsMember({"train", "validation", "test"}));
  };
  auto* train = app.add_subcommand("train", "train a model from a JSON config");
  train->add_option("--config", o.config, "training config (JSON)")->required();
  add_common(train);
  auto* eval = app.add_subcommand("eval", "hard-gate accuracy of a checkpoint per K");
  add_common(eval);
  eval->add_option("--ks", o.ks, "K values to evaluate (default: the trained K)")->delimiter(',');
  eval->add_flag("--baselines", o.baselines, "add Ridge and Lasso rows with top-K truncation");
  auto* explain = app.add_subcommand("explain", "explain one sample");
  add_common(explain);
  explain->add_option("--index", o.index, "sample index within the split");
  explain->add_option("--mode", o.mode, "hard or soft")->check(CLI::IsMember({"hard", "soft"}));
  explain->add_option("--svg", o.svg, "write an SVG heatmap (image data)");
  explain->add_option("--html", o.html, "write highlighted HTML (text data)");
  auto* bench = app.add_subcommand("bench", "explanation latency per K");
  add_common(bench);
  bench->add_option("--reps", o.reps, "repetitions per K");
  bench->add_option("--ks", o.ks, "K values to time")->delimiter(',');

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 2;
  }

  try {
    if (*train) return cmd_train(o);
    if (*eval) return cmd_eval(o);
    if (*explain) return cmd_explain(o);
    if (*bench) return cmd_bench(o);
  } catch (const ConfigError& e) {
    emit({{"event", "error"}, {"kind", "config"}, {"message", e.what()}});
    return 2;
  } catch (const std::exception& e) {
    emit({{"event", "error"}, {"kind", "runtime"}, {"message", e.what()}});
    return 1;
  }
  return 0;
}

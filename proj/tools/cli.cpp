#include "cli.hpp"

#include <cstdlib>
#include <fstream>
#include <functional>
#include <map>
#include <memory>

#include <fmt/format.h>
#include <fmt/ranges.h>
#include <spdlog/sinks/ostream_sink.h>
#include <spdlog/spdlog.h>

#include "CLI11.hpp"
#include "exqnet/bench.hpp"
#include "exqnet/data.hpp"
#include "exqnet/explain.hpp"
#include "exqnet/gradcheck.hpp"
#include "exqnet/model.hpp"
#include "exqnet/train.hpp"
#include "json.hpp"

namespace exqnet {
namespace {

using nlohmann::json;

std::string show(const std::string& v) { return v; }
std::string show(double v) { return fmt::format("{}", v); }
std::string show(std::size_t v) { return std::to_string(v); }
std::string show(int v) { return std::to_string(v); }
template <typename V>
std::string show(const std::vector<V>& v) {
  return fmt::format("{}", fmt::join(v, ","));
}

// Options of one subcommand, tracked so they can be filled from a JSON config
// and echoed as key=value once parsing is done.
class Settings {
 public:
  explicit Settings(CLI::App* app) : app_(app) {}

  template <typename V>
  CLI::Option* add(const std::string& key, V& var, const std::string& help) {
    CLI::Option* opt = app_->add_option("--" + key, var, help)->capture_default_str();
    entries_.push_back({key, opt, [&var] { return show(var); },
                        [&var](const json& j) { var = j.get<V>(); }});
    return opt;
  }

  // Fills options not given on the command line from the config object.
  void apply(const json& config) const {
    for (const auto& e : entries_) {
      if (e.option->count() > 0) continue;
      std::string key = e.key;
      if (!config.contains(key)) std::replace(key.begin(), key.end(), '-', '_');
      if (!config.contains(key)) continue;
      try {
        e.assign(config.at(key));
      } catch (const json::exception& ex) {
        throw ConfigError("config key '" + key + "': " + ex.what());
      }
    }
  }

  std::string echo() const {
    std::string line;
    for (const auto& e : entries_) {
      if (!line.empty()) line += ' ';
      line += e.key + "=" + e.show();
    }
    return line;
  }

  CLI::App* app() const { return app_; }

 private:
  struct Entry {
    std::string key;
    CLI::Option* option;
    std::function<std::string()> show;
    std::function<void(const json&)> assign;
  };
  CLI::App* app_;
  std::vector<Entry> entries_;
};

std::array<float, 3> parse_triplet(const std::vector<double>& v, const char* what) {
  if (v.size() != 3) throw ConfigError(std::string(what) + " needs exactly 3 values");
  return {static_cast<float>(v[0]), static_cast<float>(v[1]), static_cast<float>(v[2])};
}

ModelConfig preset_config(const std::string& preset, std::size_t classes) {
  if (preset == "full") return ModelConfig::full(classes);
  if (preset == "micro") return ModelConfig::micro(classes);
  throw ConfigError("unknown preset '" + preset + "' (full|micro)");
}

std::size_t infer_classes(const DatasetSplit& split) {
  int top = -1;
  for (const auto& e : split.entries) top = std::max(top, e.label);
  if (top < 0) throw ConfigError("cannot infer class count from an empty split");
  return static_cast<std::size_t>(top) + 1;
}

json read_config(const std::string& path) {
  if (path.empty()) return json::object();
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config " + path);
  json j = json::parse(in, nullptr, false);
  if (j.is_discarded() || !j.is_object()) throw ConfigError("config " + path + " is not a JSON object");
  return j;
}

struct CommonOpts {
  std::string config_path;
  std::size_t threads = 1;
};

class Runner {
 public:
  Runner(std::ostream& out, std::ostream& err) : out_(out), err_(err) {
    auto sink = std::make_shared<spdlog::sinks::ostream_sink_mt>(out_, true);
    log_ = std::make_shared<spdlog::logger>("exqnet", sink);
    log_->set_pattern("%v");
    log_->set_level(spdlog::level::info);
    if (const char* lvl = std::getenv("EXQNET_LOG_LEVEL")) {
      log_->set_level(spdlog::level::from_str(lvl));
    }
  }

  int run(const std::vector<std::string>& args);

 private:
  void summary();
  void gradcheck();
  void synth();
  void train();
  void eval();
  void bench();
  void gradcam();
  void stats();

  PipelineConfig pipeline(std::size_t resolution) const {
    PipelineConfig p;
    p.resolution = resolution;
    p.mean = parse_triplet(mean_, "--mean");
    p.std = parse_triplet(std_, "--std");
    p.validate();
    return p;
  }

  std::ostream& out_;
  std::ostream& err_;
  std::shared_ptr<spdlog::logger> log_;

  // summary
  std::size_t classes_ = 102;
  std::vector<std::size_t> schedule_{12, 50, 100, 200, 350};
  std::size_t head_width_ = 640;
  std::size_t resolution_ = 224;
  // gradcheck
  std::uint64_t seed_ = 0;
  std::size_t seeds_ = 20;
  std::size_t samples_ = GradCheckOptions{}.samples;
  // synth
  std::string out_dir_;
  std::size_t synth_classes_ = 4;
  std::size_t per_class_ = 100;
  std::size_t size_ = 64;
  // train / eval / stats
  std::string data_;
  std::string train_list_ = "train.txt";
  std::string val_list_ = "val.txt";
  std::string list_;
  std::string eval_split_ = "val";
  std::string test_list_ = "test.txt";
  std::string preset_ = "full";
  std::size_t train_classes_ = 0;
  std::string model_out_ = "model.eqw";
  TrainConfig train_cfg_;
  std::vector<double> mean_{0.5, 0.5, 0.5};
  std::vector<double> std_{0.5, 0.5, 0.5};
  std::size_t eval_batch_ = 50;
  // bench / gradcam
  std::string model_path_;
  BenchConfig bench_cfg_;
  std::string json_out_;
  std::string image_;
  int target_class_ = -1;
  std::string layer_;
  std::string heat_out_ = "heat.ppm";

  CommonOpts common_;
};

int Runner::run(const std::vector<std::string>& args) {
  CLI::App app{"exqnet: ExquisiteNet training, evaluation and analysis"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all");

  std::vector<Settings> settings;
  settings.reserve(8);
  auto sub = [&](const std::string& name, const std::string& desc) -> Settings& {
    CLI::App* s = app.add_subcommand(name, desc);
    s->add_option("--config", common_.config_path, "JSON config; command-line flags win");
    settings.emplace_back(s);
    return settings.back();
  };

  Settings& summary_s = sub("summary", "print the stage table and parameter counts");
  summary_s.add("classes", classes_, "class count");
  summary_s.add("schedule", schedule_, "stage channels")->delimiter(',');
  summary_s.add("head-width", head_width_, "head conv width");
  summary_s.add("resolution", resolution_, "input resolution");

  Settings& grad_s = sub("gradcheck", "64-bit finite-difference check of every layer and block");
  grad_s.add("seed", seed_, "first seed");
  grad_s.add("seeds", seeds_, "number of seeds");
  grad_s.add("samples", samples_, "coordinates per tensor");

  Settings& synth_s = sub("synth", "generate the synthetic motif dataset");
  synth_s.add("out", out_dir_, "output directory")->required();
  synth_s.add("classes", synth_classes_, "class count");
  synth_s.add("per-class", per_class_, "training images per class");
  synth_s.add("size", size_, "image side");
  synth_s.add("seed", seed_, "seed");

  Settings& train_s = sub("train", "train a model");
  train_s.add("batch", train_cfg_.batch, "batch size");
  train_s.add("lr", train_cfg_.lr, "learning rate");
  train_s.add("epochs", train_cfg_.epochs, "epochs");
  train_s.add("optim", train_cfg_.optim, "ranger|radam|adam|sgd");
  train_s.add("eval-every", train_cfg_.eval_every, "epochs between evaluations");
  train_s.add("seed", train_cfg_.seed, "seed");
  train_s.add("data", data_, "dataset root")->required();
  train_s.add("train-list", train_list_, "training split list, relative to --data");
  train_s.add("val-list", val_list_, "validation split list, relative to --data");
  train_s.add("test-list", test_list_, "test split list, relative to --data");
  train_s.add("eval-split", eval_split_, "val|test: split used for checkpoint selection");
  train_s.add("preset", preset_, "full|micro");
  train_s.add("classes", train_classes_, "class count (0: infer from the training labels)");
  train_s.add("out", model_out_, "checkpoint path");
  train_s.add("threads", common_.threads, "worker threads");
  train_s.add("mean", mean_, "normalization mean")->delimiter(',');
  train_s.add("std", std_, "normalization std")->delimiter(',');

  Settings& eval_s = sub("eval", "top-1 accuracy of a checkpoint");
  eval_s.add("data", data_, "dataset root")->required();
  eval_s.add("list", list_, "split list, relative to --data")->required();
  eval_s.add("model", model_path_, "checkpoint")->required();
  eval_s.add("batch", eval_batch_, "batch size");
  eval_s.add("threads", common_.threads, "worker threads");
  eval_s.add("mean", mean_, "normalization mean")->delimiter(',');
  eval_s.add("std", std_, "normalization std")->delimiter(',');

  Settings& bench_s = sub("bench", "eval-mode throughput");
  bench_s.add("model", model_path_, "checkpoint (default: untrained model of --preset)");
  bench_s.add("preset", preset_, "full|micro when no --model is given");
  bench_s.add("batch", bench_cfg_.batch, "batch size");
  bench_s.add("iters", bench_cfg_.iterations, "timed batches per repeat");
  bench_s.add("warmup", bench_cfg_.warmup, "untimed batches");
  bench_s.add("repeats", bench_cfg_.repeats, "timed repeats");
  bench_s.add("threads", bench_cfg_.threads, "inference threads");
  bench_s.add("seed", bench_cfg_.seed, "input seed");
  bench_s.add("json", json_out_, "also write the report as JSON");

  Settings& cam_s = sub("gradcam", "Grad-CAM heatmap overlay");
  cam_s.add("model", model_path_, "checkpoint")->required();
  cam_s.add("image", image_, "input PPM")->required();
  cam_s.add("class", target_class_, "target class (-1: predicted)");
  cam_s.add("layer", layer_, "feature stage (default: last DFSEB)");
  cam_s.add("out", heat_out_, "overlay PPM");
  cam_s.add("mean", mean_, "normalization mean")->delimiter(',');
  cam_s.add("std", std_, "normalization std")->delimiter(',');

  Settings& stats_s = sub("stats", "per-channel mean/std of a split");
  stats_s.add("data", data_, "dataset root")->required();
  stats_s.add("list", list_, "split list, relative to --data")->required();

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out_, err_);
    return code == 0 ? 0 : 2;
  }

  const Settings* active = nullptr;
  for (const Settings& s : settings) {
    if (s.app()->parsed()) active = &s;
  }
  const std::string name = active->app()->get_name();
  try {
    active->apply(read_config(common_.config_path));
    log_->info("command={} {}", name, active->echo());
    if (name == "summary") summary();
    else if (name == "gradcheck") gradcheck();
    else if (name == "synth") synth();
    else if (name == "train") train();
    else if (name == "eval") eval();
    else if (name == "bench") bench();
    else if (name == "gradcam") gradcam();
    else if (name == "stats") stats();
  } catch (const std::exception& e) {
    err_ << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}

void Runner::summary() {
  ModelConfig cfg;
  cfg.schedule = schedule_;
  cfg.classes = classes_;
  cfg.head_width = head_width_;
  cfg.resolution = resolution_;
  auto model = ExquisiteNet<float>::build(cfg, 0);
  out_ << format_summary(model);
}

void Runner::gradcheck() {
  GradCheckOptions options;
  options.samples = samples_;
  struct Agg {
    double worst = 0.0;
    std::size_t coords = 0, resampled = 0;
    bool passed = true;
  };
  std::vector<std::string> order;
  std::map<std::string, Agg> agg;
  for (std::size_t s = 0; s < seeds_; ++s) {
    for (const auto& r : gradcheck_suite(seed_ + s, options)) {
      if (!agg.count(r.name)) order.push_back(r.name);
      Agg& a = agg[r.name];
      a.worst = std::max(a.worst, r.max_rel_error);
      a.coords += r.coordinates;
      a.resampled += r.resampled;
      a.passed = a.passed && r.passed;
    }
  }
  bool all = true;
  for (const auto& n : order) {
    const Agg& a = agg[n];
    all = all && a.passed;
    log_->info("case={} seeds={} max_rel_err={:.3e} coords={} resampled={} status={}", n, seeds_,
               a.worst, a.coords, a.resampled, a.passed ? "PASS" : "FAIL");
  }
  log_->info("gradcheck={}", all ? "PASS" : "FAIL");
  if (!all) throw NumericError("gradient check failed");
}

void Runner::synth() {
  SynthConfig cfg;
  cfg.classes = synth_classes_;
  cfg.per_class = per_class_;
  cfg.resolution = size_;
  cfg.seed = seed_;
  cfg.out_dir = out_dir_;
  const SynthDataset ds = synth_generate(cfg);
  log_->info("train={} test={} dir={}", ds.train.size(), ds.test.size(), out_dir_);
}

void Runner::train() {
  set_num_threads(common_.threads);
  const std::filesystem::path root = data_;
  const DatasetSplit train_split = load_split(root, root / train_list_);
  if (eval_split_ != "val" && eval_split_ != "test") {
    throw ConfigError("--eval-split must be val or test");
  }
  const std::filesystem::path eval_list = root / (eval_split_ == "val" ? val_list_ : test_list_);
  std::optional<DatasetSplit> eval_split;
  if (std::filesystem::exists(eval_list)) {
    eval_split = load_split(root, eval_list);
  } else {
    log_->warn("warning=no_eval_split path={}", eval_list.string());
  }

  const std::size_t classes = train_classes_ > 0 ? train_classes_ : infer_classes(train_split);
  const ModelConfig mcfg = preset_config(preset_, classes);
  auto model = ExquisiteNet<float>::build(mcfg, train_cfg_.seed);
  PipelineConfig pipe = pipeline(mcfg.resolution);
  pipe.shuffle_seed = train_cfg_.seed;
  log_->info("model_params={} classes={} resolution={}", count_params(model).total, classes,
             mcfg.resolution);

  BatchIterator train_it(train_split, train_cfg_.batch, pipe, true);
  std::optional<BatchIterator> eval_it;
  if (eval_split) eval_it.emplace(*eval_split, train_cfg_.batch, pipe, false);

  const std::filesystem::path ckpt = model_out_;
  const auto result = exqnet::train(model, train_it, eval_it ? &*eval_it : nullptr, train_cfg_, ckpt,
                            [&](const EpochRecord& r) {
                              std::string line = fmt::format("epoch={} loss={:.6f} train_acc={:.4f}",
                                                             r.epoch, r.mean_loss, r.train_accuracy);
                              if (r.eval_accuracy) {
                                line += fmt::format(" {}_acc={:.4f}", eval_split_, *r.eval_accuracy);
                              }
                              log_->info("{}", line);
                            });
  if (result.best_eval_accuracy) {
    log_->info("best_{}_acc={:.4f} best_epoch={} checkpoint={}", eval_split_,
               *result.best_eval_accuracy, result.best_epoch, ckpt.string());
  } else {
    log_->info("checkpoint={}", ckpt.string());
  }

  json run = train_cfg_.to_json();
  run["preset"] = preset_;
  run["classes"] = classes;
  run["mean"] = mean_;
  run["std"] = std_;
  run["eval_split"] = eval_split_;
  std::vector<std::pair<std::string, const DatasetSplit*>> splits{{"train", &train_split}};
  if (eval_split) splits.emplace_back(eval_split_, &*eval_split);
  json manifest = make_manifest(run, train_cfg_.seed, splits);
  if (result.best_eval_accuracy) manifest["best_eval_accuracy"] = *result.best_eval_accuracy;
  const std::string text = manifest.dump(2) + "\n";
  const std::filesystem::path manifest_path = ckpt.string() + ".manifest.json";
  write_file(manifest_path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
  log_->info("manifest={}", manifest_path.string());
}

void Runner::eval() {
  set_num_threads(common_.threads);
  auto model = load_model<float>(model_path_);
  const std::filesystem::path root = data_;
  BatchIterator it(load_split(root, root / list_), eval_batch_, pipeline(model.config().resolution),
                   false);
  const EvalResult r = evaluate(model, it);
  log_->info("top1={:.4f} correct={} total={} loss={:.6f}", r.accuracy, r.correct, r.total,
             r.mean_loss);
}

void Runner::bench() {
  auto model = model_path_.empty() ? ExquisiteNet<float>::build(preset_config(preset_, 102), 0)
                                   : load_model<float>(model_path_);
  const BenchReport report = measure_fps(model, bench_cfg_);
  out_ << report.to_text();
  if (!json_out_.empty()) {
    const std::string text = report.to_json().dump(2) + "\n";
    write_file(json_out_, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
  }
  if (!report.stable()) log_->warn("warning=unstable_timing cov={:.4f}", report.cov);
}

void Runner::gradcam() {
  auto model = load_model<float>(model_path_);
  const std::size_t r = model.config().resolution;
  Image raw = read_ppm(image_);
  if (raw.dim(2) != r || raw.dim(3) != r) raw = resize_bilinear(raw, r, r);
  const Image input = preprocess(raw, pipeline(r));
  std::size_t cls = 0;
  if (target_class_ < 0) {
    cls = argmax_row(model.forward(input, Mode::kEval), 0);
  } else {
    cls = static_cast<std::size_t>(target_class_);
  }
  const Heatmap heat = exqnet::gradcam(model, input, cls, layer_);
  overlay(heat, raw, heat_out_);
  log_->info("class={} layer={} out={}", cls, heat.layer, heat_out_);
}

void Runner::stats() {
  const std::filesystem::path root = data_;
  const ChannelStats s = compute_stats(load_split(root, root / list_));
  log_->info("mean={:.6f},{:.6f},{:.6f} std={:.6f},{:.6f},{:.6f} pixels={}", s.mean[0], s.mean[1],
             s.mean[2], s.std[0], s.std[1], s.std[2], s.pixels);
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  Runner runner(out, err);
  return runner.run(args);
}

}  // namespace exqnet

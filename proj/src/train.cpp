#include "exqnet/train.hpp"

#include <fmt/format.h>

namespace exqnet {

void TrainConfig::validate() const {
  if (epochs == 0) throw ConfigError("epochs must be >= 1");
  if (batch == 0) throw ConfigError("batch must be >= 1");
  if (eval_every == 0) throw ConfigError("eval_every must be >= 1");
  OptimConfig::named(optim, lr).validate();
}

nlohmann::json TrainConfig::to_json() const {
  return {{"epochs", epochs}, {"batch", batch},           {"lr", lr},
          {"optim", optim},   {"eval_every", eval_every}, {"seed", seed}};
}

std::size_t argmax_row(const Tensor<float>& logits, std::size_t row) {
  const std::size_t k = logits.dim(1);
  const float* p = logits.ptr() + row * k;
  return static_cast<std::size_t>(std::max_element(p, p + k) - p);
}

EvalResult evaluate(ExquisiteNet<float>& model, BatchIterator& data) {
  data.split().check_labels(model.config().classes);
  data.start_epoch(0);
  EvalResult r;
  double loss_sum = 0.0;
  Batch batch;
  while (data.next(batch)) {
    const Tensor<float> logits = model.forward(batch.images, Mode::kEval);
    const auto ce = softmax_cross_entropy(logits, std::span<const int>(batch.labels));
    loss_sum += static_cast<double>(ce.loss) * static_cast<double>(batch.labels.size());
    for (std::size_t i = 0; i < batch.labels.size(); ++i) {
      if (argmax_row(logits, i) == static_cast<std::size_t>(batch.labels[i])) ++r.correct;
    }
    r.total += batch.labels.size();
  }
  if (r.total > 0) {
    r.accuracy = static_cast<double>(r.correct) / static_cast<double>(r.total);
    r.mean_loss = loss_sum / static_cast<double>(r.total);
  }
  return r;
}

TrainResult train(ExquisiteNet<float>& model, BatchIterator& train_data, BatchIterator* eval_data,
                  const TrainConfig& cfg, const std::filesystem::path& checkpoint,
                  const std::function<void(const EpochRecord&)>& on_epoch) {
  cfg.validate();
  const std::size_t classes = model.config().classes;
  train_data.split().check_labels(classes);
  if (eval_data) eval_data->split().check_labels(classes);

  Optimizer<float> optimizer(model.registry(), OptimConfig::named(cfg.optim, cfg.lr));
  model.reseed_dropout(cfg.seed ^ 0xA5A5A5A5ULL);
  TrainResult result;
  Batch batch;
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    train_data.start_epoch(epoch - 1);
    double loss_sum = 0.0;
    std::size_t seen = 0, correct = 0;
    while (train_data.next(batch)) {
      model.zero_grad();
      const Tensor<float> logits = model.forward(batch.images, Mode::kTrain);
      const auto labels = std::span<const int>(batch.labels);
      const auto ce = softmax_cross_entropy(logits, labels);
      if (!std::isfinite(ce.loss)) throw NumericError(fmt::format("loss is {} at epoch {}", ce.loss, epoch));
      model.backward(softmax_cross_entropy_grad(ce.probs, labels));
      optimizer.step();
      result.step_losses.push_back(ce.loss);
      loss_sum += static_cast<double>(ce.loss) * static_cast<double>(labels.size());
      for (std::size_t i = 0; i < labels.size(); ++i) {
        if (argmax_row(logits, i) == static_cast<std::size_t>(labels[i])) ++correct;
      }
      seen += labels.size();
    }
    EpochRecord rec;
    rec.epoch = epoch;
    rec.mean_loss = loss_sum / static_cast<double>(seen);
    rec.train_accuracy = static_cast<double>(correct) / static_cast<double>(seen);
    if (eval_data && (epoch % cfg.eval_every == 0 || epoch == cfg.epochs)) {
      rec.eval_accuracy = evaluate(model, *eval_data).accuracy;
      if (!result.best_eval_accuracy || *rec.eval_accuracy > *result.best_eval_accuracy) {
        result.best_eval_accuracy = rec.eval_accuracy;
        result.best_epoch = epoch;
        if (!checkpoint.empty()) save_model(model, checkpoint);
      }
    }
    result.epochs.push_back(rec);
    if (on_epoch) on_epoch(rec);
  }
  if (!eval_data && !checkpoint.empty()) save_model(model, checkpoint);
  return result;
}

std::uint64_t fnv1a(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (char c : bytes) {
    h ^= static_cast<std::uint8_t>(c);
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string hex64(std::uint64_t v) { return fmt::format("{:016x}", v); }

std::uint64_t split_checksum(const DatasetSplit& split) {
  std::string text;
  for (const auto& e : split.entries) text += e.path + " " + std::to_string(e.label) + "\n";
  return fnv1a(text);
}

nlohmann::json make_manifest(const nlohmann::json& run_config, std::uint64_t seed,
                             const std::vector<std::pair<std::string, const DatasetSplit*>>& splits) {
  nlohmann::json m;
  m["seed"] = seed;
  m["config"] = run_config;
  m["config_hash"] = hex64(fnv1a(run_config.dump()));
  for (const auto& [name, split] : splits) {
    m["splits"][name] = {{"entries", split->size()}, {"checksum", hex64(split_checksum(*split))}};
  }
  return m;
}

}  // namespace exqnet

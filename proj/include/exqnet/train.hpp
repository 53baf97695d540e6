#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "exqnet/data.hpp"
#include "exqnet/model.hpp"
#include "exqnet/optim.hpp"
#include "json.hpp"

namespace exqnet {

struct TrainConfig {
  std::size_t epochs = 100;
  std::size_t batch = 50;
  double lr = 0.001;
  std::string optim = "ranger";
  std::size_t eval_every = 10;
  std::uint64_t seed = 0;

  void validate() const;
  nlohmann::json to_json() const;
};

struct EpochRecord {
  std::size_t epoch = 0;  // 1-based
  double mean_loss = 0.0;
  double train_accuracy = 0.0;  // running, train mode
  std::optional<double> eval_accuracy;
};

struct TrainResult {
  std::vector<double> step_losses;
  std::vector<EpochRecord> epochs;
  std::optional<double> best_eval_accuracy;
  std::size_t best_epoch = 0;
};

struct EvalResult {
  double accuracy = 0.0;
  double mean_loss = 0.0;
  std::size_t correct = 0;
  std::size_t total = 0;
};

// Top-1 accuracy and mean loss in eval mode over one pass of the iterator.
EvalResult evaluate(ExquisiteNet<float>& model, BatchIterator& data);

std::size_t argmax_row(const Tensor<float>& logits, std::size_t row);

// Trains for cfg.epochs; evaluates every cfg.eval_every epochs (and after the
// last one) when eval_data is given and saves the best model to checkpoint.
TrainResult train(ExquisiteNet<float>& model, BatchIterator& train_data, BatchIterator* eval_data,
                  const TrainConfig& cfg, const std::filesystem::path& checkpoint = {},
                  const std::function<void(const EpochRecord&)>& on_epoch = {});

// 64-bit FNV-1a.
std::uint64_t fnv1a(std::string_view bytes);
std::string hex64(std::uint64_t v);
std::uint64_t split_checksum(const DatasetSplit& split);

// Seed, config hash and split checksums for a training run.
nlohmann::json make_manifest(const nlohmann::json& run_config, std::uint64_t seed,
                             const std::vector<std::pair<std::string, const DatasetSplit*>>& splits);

}  // namespace exqnet

#pragma once

#include <cstdint>
#include <filesystem>
#include <limits>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "exqnet/blocks.hpp"
#include "exqnet/layers.hpp"
#include "json.hpp"

namespace exqnet {

struct ModelConfig {
  std::vector<std::size_t> schedule{12, 50, 100, 200, 350};
  std::size_t head_width = 640;
  std::size_t classes = 102;
  double dropout = 0.2;
  std::size_t se_reduction = 4;
  std::size_t resolution = 224;

  static constexpr std::size_t kInputChannels = 3;

  // Published architecture with the given class count.
  static ModelConfig full(std::size_t classes = 102);
  // Desk-scale preset: same blocks, schedule 4-8-12-16-20, 64x64 input.
  static ModelConfig micro(std::size_t classes = 4);

  void validate() const;
  nlohmann::json to_json() const;
  static ModelConfig from_json(const nlohmann::json& j);
  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

struct StageParams {
  std::string stage;
  std::size_t count = 0;
};

struct ParamCount {
  std::vector<StageParams> per_stage;
  std::size_t total = 0;
  double millions() const { return static_cast<double>(total) / 1e6; }
};

struct StageTrace {
  std::string name;
  std::string op;
  Dims input;
  Dims output;
  std::size_t params = 0;
};

// The full network: five ME/DFSEB pairs, then 1x1 conv, hard swish, global
// average pool, dropout and the classifier.
template <typename T>
class ExquisiteNet {
 public:
  static constexpr std::size_t kAllStages = std::numeric_limits<std::size_t>::max();

  static ExquisiteNet build(const ModelConfig& config, std::uint64_t seed);

  ExquisiteNet(ExquisiteNet&&) noexcept = default;
  ExquisiteNet& operator=(ExquisiteNet&&) noexcept = default;

  // When stage_outputs is given it receives the output of every stage.
  Tensor<T> forward(const Tensor<T>& x, Mode mode,
                    std::vector<Tensor<T>>* stage_outputs = nullptr);

  // Back-propagates dlogits through stages [first_stage, end) and returns the
  // gradient with respect to the input of first_stage (the image by default).
  Tensor<T> backward(const Tensor<T>& dlogits, std::size_t first_stage = 0);

  const ModelConfig& config() const { return config_; }
  std::size_t stage_count() const { return stages_.size(); }
  const std::string& stage_name(std::size_t i) const { return names_.at(i); }
  std::size_t stage_index(const std::string& name) const;
  Module<T>& stage(std::size_t i) { return *stages_.at(i); }
  // Element counts gathered stage by stage, independently of registry().
  std::span<const std::size_t> stage_param_counts() const { return stage_param_counts_; }

  Registry<T>& registry() { return registry_; }
  const Registry<T>& registry() const { return registry_; }

  void zero_grad();
  std::vector<std::uint32_t> kink_pattern() const;
  void reseed_dropout(std::uint64_t seed);

  // Shapes and parameter counts per stage for a single input image.
  std::vector<StageTrace> trace();

 private:
  ExquisiteNet() = default;
  void register_all();

  ModelConfig config_;
  std::vector<std::unique_ptr<Module<T>>> stages_;
  std::vector<std::string> names_;
  std::vector<std::size_t> stage_param_counts_;
  Registry<T> registry_;
};

template <typename T>
ParamCount count_params(const ExquisiteNet<T>& model);

// Human-readable stage table with per-stage and total parameter counts.
template <typename T>
std::string format_summary(ExquisiteNet<T>& model);

// Weight file (.eqw), all integers little-endian:
//   "EXQW" | u32 version=1 | u32 len + UTF-8 JSON config | u32 tensor count |
//   per tensor: u16 len + UTF-8 name, u8 dtype (0=f32, 1=f64), u8 rank,
//   u32 dims[rank], raw payload.
inline constexpr std::uint32_t kWeightFormatVersion = 1;

template <typename T>
std::vector<std::uint8_t> serialize(const ExquisiteNet<T>& model);
template <typename T>
ExquisiteNet<T> deserialize(std::span<const std::uint8_t> bytes);

template <typename T>
void save_model(const ExquisiteNet<T>& model, const std::filesystem::path& path);
template <typename T>
ExquisiteNet<T> load_model(const std::filesystem::path& path);

}  // namespace exqnet

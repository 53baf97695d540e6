#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "exqnet/tensor.hpp"

namespace exqnet {

using Image = Tensor<float>;

// Binary P6 with maxval 255 -> [1,3,H,W] holding raw 0..255 values.
Image decode_ppm(std::span<const std::uint8_t> bytes);
// Values are rounded and clamped to 0..255.
std::vector<std::uint8_t> encode_ppm(const Image& image);
Image read_ppm(const std::filesystem::path& path);
void write_ppm(const std::filesystem::path& path, const Image& image);

// Raw tensor sidecar: "NCT1" | u8 rank | u32 dims (LE) | f32 payload (LE).
Image decode_nct(std::span<const std::uint8_t> bytes);
std::vector<std::uint8_t> encode_nct(const Image& tensor);

// Dispatches on extension: .ppm or .nct.
Image load_image(const std::filesystem::path& path);

std::vector<std::uint8_t> read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);

// Half-pixel-centre bilinear resampling of [N,C,H,W]:
// src = (dst + 0.5) * (in / out) - 0.5, clamped to [0, in - 1].
template <typename T>
Tensor<T> resize_bilinear(const Tensor<T>& x, std::size_t out_h, std::size_t out_w);

struct PipelineConfig {
  std::size_t resolution = 224;
  std::array<float, 3> mean{0.5f, 0.5f, 0.5f};
  std::array<float, 3> std{0.5f, 0.5f, 0.5f};
  std::uint64_t shuffle_seed = 0;

  void validate() const;
};

// Per channel: (x / 255 - mean) / std.
Image normalize(const Image& x, const PipelineConfig& cfg);
Image denormalize(const Image& x, const PipelineConfig& cfg);

// decode -> resize -> normalize. No augmentation.
Image preprocess(const Image& raw, const PipelineConfig& cfg);

struct SplitEntry {
  std::string path;  // relative to the split root
  int label = 0;
};

struct DatasetSplit {
  std::filesystem::path root;
  std::vector<SplitEntry> entries;

  std::size_t size() const { return entries.size(); }
  // Throws LabelError if any label falls outside [0, classes).
  void check_labels(std::size_t classes) const;
};

// One "relative/path label" per non-empty line.
DatasetSplit load_split(const std::filesystem::path& root, const std::filesystem::path& list_file);
DatasetSplit parse_split(const std::filesystem::path& root, std::string_view text);
void write_split(const std::filesystem::path& list_file, const DatasetSplit& split);

struct ChannelStats {
  std::array<double, 3> mean{};
  std::array<double, 3> std{};
  std::size_t pixels = 0;
};

// Statistics of x / 255 over every pixel of every image in the split.
ChannelStats compute_stats(const DatasetSplit& split);

struct Box {
  std::size_t x0 = 0, y0 = 0, x1 = 0, y1 = 0;  // half-open
  bool contains(std::size_t x, std::size_t y) const {
    return x >= x0 && x < x1 && y >= y0 && y < y1;
  }
};

struct SynthConfig {
  std::size_t classes = 4;
  std::size_t per_class = 100;
  std::size_t resolution = 64;
  std::uint64_t seed = 0;
  std::filesystem::path out_dir;
};

struct SynthDataset {
  DatasetSplit train;
  DatasetSplit test;
  std::vector<Box> train_boxes;
  std::vector<Box> test_boxes;
};

// Each class is a square motif with its own hue, placed in a random cell of a
// 2x2 grid (for 4 classes) with seeded jitter and pixel noise on a mid-gray
// background. Writes PPM files,
// train.txt / test.txt split lists and *_boxes.txt motif boxes. The test
// split has per_class / 5 images per class.
SynthDataset synth_generate(const SynthConfig& cfg);
std::vector<Box> load_boxes(const std::filesystem::path& path, std::size_t expected);

struct Batch {
  Image images;
  std::vector<int> labels;
  std::vector<std::size_t> indices;
};

// Seeded per-epoch permutation of a split, emitted in batches; the last
// partial batch is kept.
class BatchIterator {
 public:
  BatchIterator(DatasetSplit split, std::size_t batch_size, PipelineConfig pipeline,
                bool shuffle = true);

  void start_epoch(std::size_t epoch);
  bool next(Batch& batch);

  std::size_t batches_per_epoch() const {
    return (split_.size() + batch_size_ - 1) / batch_size_;
  }
  const DatasetSplit& split() const { return split_; }
  const std::vector<std::size_t>& order() const { return order_; }

 private:
  DatasetSplit split_;
  std::size_t batch_size_;
  PipelineConfig pipeline_;
  bool shuffle_;
  std::vector<std::size_t> order_;
  std::size_t cursor_ = 0;
};

std::vector<std::size_t> epoch_permutation(std::size_t n, std::uint64_t seed, std::size_t epoch);

}  // namespace exqnet

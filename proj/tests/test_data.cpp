#include <gtest/gtest.h>

#include <algorithm>
#include <fstream>
#include <map>
#include <set>

#include "exqnet/data.hpp"
#include "support.hpp"

using namespace exqnet;

namespace {

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

Image random_image(std::size_t h, std::size_t w, Rng& rng) {
  Image x({1, 3, h, w});
  for (auto& v : x.vec()) v = static_cast<float>(rng.below(256));
  return x;
}

}  // namespace

TEST(Ppm, SingleRedPixel) {
  const std::string text = "P6\n1 1\n255\n";
  std::vector<std::uint8_t> bytes(text.begin(), text.end());
  bytes.insert(bytes.end(), {255, 0, 0});
  auto x = decode_ppm(bytes);
  EXPECT_EQ(x.dims(), (Dims{1, 3, 1, 1}));
  EXPECT_EQ(x.vec(), (std::vector<float>{255, 0, 0}));
}

TEST(Ppm, ErrorsNameTheField) {
  auto expect_error = [](const std::string& text, const std::string& field) {
    std::vector<std::uint8_t> bytes(text.begin(), text.end());
    try {
      decode_ppm(bytes);
      ADD_FAILURE() << "no error for " << text;
    } catch (const DecodeError& e) {
      EXPECT_NE(std::string(e.what()).find(field), std::string::npos) << e.what();
    }
  };
  expect_error("P5\n1 1\n255\n\x01", "unsupported magic");
  expect_error("P6\n1 1\n65535\n\x01\x02\x03", "maxval");
  expect_error("P6\n2 2\n255\n\x01\x02\x03", "truncated payload");
  expect_error("P6\nx 1\n255\n", "width");
  expect_error("P6\n1\n", "height");
}

TEST(Ppm, CommentsAreSkipped) {
  const std::string text = "P6 # made by hand\n# another\n1 1 255\n";
  std::vector<std::uint8_t> bytes(text.begin(), text.end());
  bytes.insert(bytes.end(), {1, 2, 3});
  EXPECT_EQ(decode_ppm(bytes).vec(), (std::vector<float>{1, 2, 3}));
}

TEST(Ppm, RoundTrip) {
  Rng rng(1);
  auto x = random_image(8, 8, rng);
  EXPECT_EQ(decode_ppm(encode_ppm(x)), x);
  auto y = random_image(5, 11, rng);
  EXPECT_EQ(decode_ppm(encode_ppm(y)), y);
}

TEST(Nct, RoundTripAndErrors) {
  Rng rng(2);
  auto x = Tensor<float>::normal({1, 3, 4, 5}, rng);
  auto bytes = encode_nct(x);
  EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 4), "NCT1");
  EXPECT_EQ(bytes.size(), 4u + 1u + 4u * 4u + 60u * 4u);
  EXPECT_EQ(decode_nct(bytes), x);
  bytes.pop_back();
  EXPECT_THROW(decode_nct(bytes), DecodeError);
  bytes[0] = 'X';
  EXPECT_THROW(decode_nct(bytes), DecodeError);
}

TEST(Resize, ConstantStaysConstant) {
  Image x({1, 3, 5, 7}, 42.0f);
  for (auto [h, w] : {std::pair{1, 1}, {3, 9}, {10, 4}, {224, 224}}) {
    auto y = resize_bilinear(x, h, w);
    for (float v : y.data()) ASSERT_EQ(v, 42.0f);
  }
}

TEST(Resize, SameSizeIsIdentity) {
  Rng rng(3);
  auto x = random_image(6, 9, rng);
  auto y = resize_bilinear(x, 6, 9);
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_NEAR(y[i], x[i], 1e-6);
}

TEST(Resize, HandEvaluatedUpsample) {
  Tensor<double> x({1, 1, 2, 2}, std::vector<double>{0, 10, 10, 20});
  auto y = resize_bilinear(x, 4, 4);
  // src = (dst + 0.5) / 2 - 0.5 -> -0.25 (clamped 0), 0.25, 0.75, 1.25 (clamped 1)
  EXPECT_EQ(y.at(0, 0, 0, 0), 0.0);
  EXPECT_EQ(y.at(0, 0, 3, 3), 20.0);
  EXPECT_NEAR(y.at(0, 0, 1, 1), 10 * 0.25 + 10 * 0.25, 1e-12);
  EXPECT_NEAR(y.at(0, 0, 0, 1), 2.5, 1e-12);
  for (std::size_t i = 1; i < 3; ++i)
    for (std::size_t j = 1; j < 3; ++j) {
      EXPECT_GT(y.at(0, 0, i, j), 0.0);
      EXPECT_LT(y.at(0, 0, i, j), 20.0);
    }
}

TEST(Resize, PreservesBounds) {
  Rng rng(4);
  for (int trial = 0; trial < 30; ++trial) {
    auto x = random_image(1 + rng.below(20), 1 + rng.below(20), rng);
    const auto [lo, hi] = std::minmax_element(x.vec().begin(), x.vec().end());
    auto y = resize_bilinear(x, 1 + rng.below(40), 1 + rng.below(40));
    for (float v : y.data()) {
      ASSERT_GE(v, *lo);
      ASSERT_LE(v, *hi);
    }
  }
}

TEST(Normalize, Endpoints) {
  PipelineConfig cfg;
  Image x({1, 3, 1, 2}, std::vector<float>{255, 0, 255, 0, 255, 0});
  auto y = normalize(x, cfg);
  EXPECT_EQ(y.vec(), (std::vector<float>{1, -1, 1, -1, 1, -1}));
  cfg.mean = {0, 0, 0};
  cfg.std = {1, 1, 1};
  EXPECT_FLOAT_EQ(normalize(Image({1, 3, 1, 1}, 127.5f), cfg)[0], 0.5f);
}

TEST(Normalize, Invertible) {
  Rng rng(5);
  PipelineConfig cfg;
  cfg.mean = {0.485f, 0.456f, 0.406f};
  cfg.std = {0.229f, 0.224f, 0.225f};
  auto x = random_image(4, 4, rng);
  auto back = denormalize(normalize(x, cfg), cfg);
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_NEAR(back[i], x[i], 1e-3);
}

TEST(Normalize, StdMustBePositive) {
  PipelineConfig cfg;
  cfg.std = {0.5f, 0.0f, 0.5f};
  EXPECT_THROW(cfg.validate(), ConfigError);
}

TEST(Split, ParsesInOrder) {
  auto s = parse_split("/r", "a/1.ppm 0\nb/2.ppm 3\n\nc 3.ppm 1\n");
  ASSERT_EQ(s.size(), 3u);
  EXPECT_EQ(s.entries[0].path, "a/1.ppm");
  EXPECT_EQ(s.entries[1].label, 3);
  EXPECT_EQ(s.entries[2].path, "c 3.ppm");
  EXPECT_EQ(s.root, "/r");
}

TEST(Split, ErrorsCarryLineNumber) {
  try {
    parse_split("", "ok.ppm 1\nimg.ppm abc\n");
    FAIL();
  } catch (const ParseError& e) {
    EXPECT_EQ(e.line(), 2u);
  }
  try {
    parse_split("", "a 1\nb 2\nc -4\n");
    FAIL();
  } catch (const ParseError& e) {
    EXPECT_EQ(e.line(), 3u);
  }
  EXPECT_THROW(parse_split("", "nolabel\n"), ParseError);
  EXPECT_THROW(parse_split("", "a 1\na 2\n"), ParseError);
}

TEST(Split, LabelRangeCheck) {
  auto s = parse_split("", "a 0\nb 4\n");
  EXPECT_NO_THROW(s.check_labels(5));
  EXPECT_THROW(s.check_labels(4), LabelError);
}

TEST(Split, FileRoundTrip) {
  support::TempDir dir("split");
  auto s = parse_split(dir.path(), "x.ppm 2\ny.ppm 0\n");
  write_split(dir.path() / "list.txt", s);
  auto back = load_split(dir.path(), dir.path() / "list.txt");
  ASSERT_EQ(back.size(), 2u);
  EXPECT_EQ(back.entries[0].path, "x.ppm");
  EXPECT_EQ(back.entries[1].label, 0);
  EXPECT_THROW(load_split(dir.path(), dir.path() / "missing.txt"), IoError);
}

TEST(Split, Ip102ShapedCounts) {
  support::TempDir dir("ip102");
  for (auto [name, n] : {std::pair{"train.txt", 45095}, {"val.txt", 7508}, {"test.txt", 22619}}) {
    std::ofstream out(dir.path() / name);
    for (int i = 0; i < n; ++i) out << "images/" << i << ".ppm " << i % 102 << "\n";
    out.close();
    auto s = load_split(dir.path(), dir.path() / name);
    EXPECT_EQ(s.size(), static_cast<std::size_t>(n));
    EXPECT_NO_THROW(s.check_labels(102));
  }
}

class Synth : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    dir_ = new support::TempDir("synth");
    SynthConfig cfg;
    cfg.seed = 7;
    cfg.out_dir = dir_->path() / "a";
    data_ = new SynthDataset(synth_generate(cfg));
  }
  static void TearDownTestSuite() {
    delete data_;
    delete dir_;
  }
  static support::TempDir* dir_;
  static SynthDataset* data_;
};

support::TempDir* Synth::dir_ = nullptr;
SynthDataset* Synth::data_ = nullptr;

TEST_F(Synth, CountsAndBalance) {
  EXPECT_EQ(data_->train.size(), 400u);
  EXPECT_EQ(data_->test.size(), 80u);
  std::map<int, int> train, test;
  for (const auto& e : data_->train.entries) ++train[e.label];
  for (const auto& e : data_->test.entries) ++test[e.label];
  for (int c = 0; c < 4; ++c) {
    EXPECT_EQ(train[c], 100);
    EXPECT_EQ(test[c], 20);
  }
  auto reloaded = load_split(dir_->path() / "a", dir_->path() / "a" / "train.txt");
  EXPECT_EQ(reloaded.size(), 400u);
  EXPECT_EQ(load_boxes(dir_->path() / "a" / "test_boxes.txt", 80).size(), 80u);
}

TEST_F(Synth, SameSeedByteIdentical) {
  SynthConfig cfg;
  cfg.seed = 7;
  cfg.out_dir = dir_->path() / "b";
  auto again = synth_generate(cfg);
  for (const char* list : {"train.txt", "test.txt", "train_boxes.txt", "test_boxes.txt"}) {
    EXPECT_EQ(slurp(dir_->path() / "a" / list), slurp(dir_->path() / "b" / list)) << list;
  }
  for (std::size_t i = 0; i < again.train.size(); i += 37) {
    const auto& p = again.train.entries[i].path;
    EXPECT_EQ(slurp(dir_->path() / "a" / p), slurp(dir_->path() / "b" / p)) << p;
  }
  cfg.seed = 8;
  cfg.out_dir = dir_->path() / "c";
  synth_generate(cfg);
  EXPECT_NE(slurp(dir_->path() / "a" / data_->train.entries[0].path),
            slurp(dir_->path() / "c" / data_->train.entries[0].path));
}

TEST_F(Synth, BoxesLieInsideImage) {
  for (const auto& b : data_->train_boxes) {
    EXPECT_LT(b.x0, b.x1);
    EXPECT_LT(b.y0, b.y1);
    EXPECT_LE(b.x1, 64u);
    EXPECT_LE(b.y1, 64u);
  }
}

TEST_F(Synth, NearestCentroidOracle) {
  const auto root = dir_->path() / "a";
  std::vector<std::vector<double>> centroid(4, std::vector<double>(3 * 64 * 64, 0.0));
  std::vector<int> count(4, 0);
  for (const auto& e : data_->train.entries) {
    auto x = load_image(root / e.path);
    for (std::size_t i = 0; i < x.size(); ++i) centroid[e.label][i] += x[i];
    ++count[e.label];
  }
  for (int c = 0; c < 4; ++c)
    for (auto& v : centroid[c]) v /= count[c];
  std::size_t correct = 0;
  for (const auto& e : data_->test.entries) {
    auto x = load_image(root / e.path);
    int best = -1;
    double best_d = 1e300;
    for (int c = 0; c < 4; ++c) {
      double d = 0;
      for (std::size_t i = 0; i < x.size(); ++i) d += (x[i] - centroid[c][i]) * (x[i] - centroid[c][i]);
      if (d < best_d) best_d = d, best = c;
    }
    correct += best == e.label;
  }
  const double acc = static_cast<double>(correct) / static_cast<double>(data_->test.size());
  EXPECT_GE(acc, 0.80) << "nearest-centroid accuracy " << acc;
}

TEST_F(Synth, ChannelStatsRenormalize) {
  auto stats = compute_stats(data_->train);
  EXPECT_EQ(stats.pixels, 400u * 64 * 64);
  PipelineConfig cfg;
  cfg.resolution = 64;
  for (int c = 0; c < 3; ++c) {
    EXPECT_GT(stats.std[c], 0.0);
    cfg.mean[c] = static_cast<float>(stats.mean[c]);
    cfg.std[c] = static_cast<float>(stats.std[c]);
  }
  std::array<double, 3> sum{};
  for (const auto& e : data_->train.entries) {
    auto x = preprocess(load_image(data_->train.root / e.path), cfg);
    for (int c = 0; c < 3; ++c)
      for (std::size_t i = 0; i < 64 * 64; ++i) sum[c] += x[c * 64 * 64 + i];
  }
  for (int c = 0; c < 3; ++c) EXPECT_NEAR(sum[c] / (400.0 * 64 * 64), 0.0, 1e-4);
}

TEST_F(Synth, UnwritableDirectory) {
  SynthConfig cfg;
  cfg.out_dir = "/proc/definitely/not/writable";
  EXPECT_THROW(synth_generate(cfg), IoError);
}

TEST(Batches, PartialLastBatchKept) {
  DatasetSplit s;
  for (int i = 0; i < 103; ++i) s.entries.push_back({"f" + std::to_string(i), i % 3});
  EXPECT_EQ(BatchIterator(s, 50, PipelineConfig{}).batches_per_epoch(), 3u);
}

TEST(Batches, SeededPermutation) {
  auto a = epoch_permutation(100, 1, 0);
  EXPECT_EQ(a, epoch_permutation(100, 1, 0));
  EXPECT_NE(a, epoch_permutation(100, 2, 0));
  EXPECT_NE(a, epoch_permutation(100, 1, 1));
  auto sorted = a;
  std::sort(sorted.begin(), sorted.end());
  for (std::size_t i = 0; i < 100; ++i) EXPECT_EQ(sorted[i], i);
}

TEST(Batches, StreamIsDeterministicAndCoversSplit) {
  support::TempDir dir("batches");
  DatasetSplit s;
  s.root = dir.path();
  Rng rng(9);
  for (int i = 0; i < 13; ++i) {
    const std::string name = "img" + std::to_string(i) + ".ppm";
    write_ppm(dir.path() / name, random_image(6 + i % 3, 5 + i % 4, rng));
    s.entries.push_back({name, i % 4});
  }
  PipelineConfig cfg;
  cfg.resolution = 8;
  cfg.shuffle_seed = 3;
  auto collect = [&](std::size_t threads) {
    set_num_threads(threads);
    BatchIterator it(s, 5, cfg);
    it.start_epoch(2);
    std::vector<Batch> out;
    Batch b;
    while (it.next(b)) out.push_back(b);
    set_num_threads(1);
    return out;
  };
  auto one = collect(1), four = collect(4);
  ASSERT_EQ(one.size(), 3u);
  EXPECT_EQ(one[2].labels.size(), 3u);
  std::multiset<int> seen, expected;
  for (std::size_t k = 0; k < one.size(); ++k) {
    EXPECT_EQ(one[k].images, four[k].images);
    EXPECT_EQ(one[k].labels, four[k].labels);
    EXPECT_EQ(one[k].images.dims()[2], 8u);
    seen.insert(one[k].labels.begin(), one[k].labels.end());
  }
  for (const auto& e : s.entries) expected.insert(e.label);
  EXPECT_EQ(seen, expected);
}

TEST(Batches, MissingFileNamesPath) {
  DatasetSplit s;
  s.root = "/nonexistent";
  s.entries.push_back({"gone.ppm", 0});
  BatchIterator it(s, 4, PipelineConfig{});
  it.start_epoch(0);
  Batch b;
  try {
    it.next(b);
    FAIL();
  } catch (const ItemError& e) {
    EXPECT_NE(e.path().find("gone.ppm"), std::string::npos);
  }
}

#include "exqnet/data.hpp"

#include <bit>
#include <charconv>
#include <cmath>
#include <cstring>
#include <exception>
#include <fstream>
#include <sstream>
#include <unordered_set>

namespace exqnet {

// ---------------------------------------------------------------------------
// Files

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  if (path.has_parent_path()) {
    std::error_code ec;
    std::filesystem::create_directories(path.parent_path(), ec);
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("failed writing " + path.string());
}

// ---------------------------------------------------------------------------
// PPM

namespace {

class HeaderReader {
 public:
  explicit HeaderReader(std::span<const std::uint8_t> b) : b_(b) {}

  void skip_space_and_comments() {
    while (pos_ < b_.size()) {
      if (std::isspace(b_[pos_])) {
        ++pos_;
      } else if (b_[pos_] == '#') {
        while (pos_ < b_.size() && b_[pos_] != '\n') ++pos_;
      } else {
        break;
      }
    }
  }

  std::size_t number(const char* field) {
    skip_space_and_comments();
    std::size_t v = 0;
    std::size_t digits = 0;
    while (pos_ < b_.size() && std::isdigit(b_[pos_])) {
      v = v * 10 + (b_[pos_] - '0');
      ++pos_;
      if (++digits > 9) throw DecodeError(std::string("ppm ") + field + " too large");
    }
    if (digits == 0) throw DecodeError(std::string("ppm: missing or malformed ") + field);
    return v;
  }

  std::size_t pos_ = 0;
  std::span<const std::uint8_t> b_;
};

}  // namespace

Image decode_ppm(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 2 || bytes[0] != 'P' || bytes[1] != '6') {
    throw DecodeError("ppm: unsupported magic (expected P6)");
  }
  HeaderReader r(bytes);
  r.pos_ = 2;
  const std::size_t width = r.number("width");
  const std::size_t height = r.number("height");
  const std::size_t maxval = r.number("maxval");
  if (width == 0) throw DecodeError("ppm: width must be >= 1");
  if (height == 0) throw DecodeError("ppm: height must be >= 1");
  if (maxval != 255) throw DecodeError("ppm: unsupported maxval " + std::to_string(maxval));
  if (r.pos_ >= bytes.size() || !std::isspace(bytes[r.pos_])) {
    throw DecodeError("ppm: missing whitespace before payload");
  }
  ++r.pos_;
  const std::size_t plane = width * height;
  if (bytes.size() - r.pos_ < plane * 3) {
    throw DecodeError("ppm: truncated payload (" + std::to_string(bytes.size() - r.pos_) +
                      " of " + std::to_string(plane * 3) + " bytes)");
  }
  Image img({1, 3, height, width});
  const std::uint8_t* px = bytes.data() + r.pos_;
  for (std::size_t i = 0; i < plane; ++i) {
    for (std::size_t c = 0; c < 3; ++c) img[c * plane + i] = px[i * 3 + c];
  }
  return img;
}

std::vector<std::uint8_t> encode_ppm(const Image& image) {
  if (image.rank() != 4 || image.dim(0) != 1 || image.dim(1) != 3) {
    throw ShapeError("ppm encode expects [1,3,H,W], got " + to_string(image.dims()));
  }
  const std::size_t h = image.dim(2), w = image.dim(3), plane = h * w;
  const std::string header = "P6\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
  std::vector<std::uint8_t> out(header.begin(), header.end());
  out.reserve(out.size() + plane * 3);
  for (std::size_t i = 0; i < plane; ++i) {
    for (std::size_t c = 0; c < 3; ++c) {
      const float v = std::clamp(std::round(image[c * plane + i]), 0.0f, 255.0f);
      out.push_back(static_cast<std::uint8_t>(v));
    }
  }
  return out;
}

Image read_ppm(const std::filesystem::path& path) { return decode_ppm(read_file(path)); }

void write_ppm(const std::filesystem::path& path, const Image& image) {
  write_file(path, encode_ppm(image));
}

// ---------------------------------------------------------------------------
// NCT

Image decode_nct(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 5 || std::memcmp(bytes.data(), "NCT1", 4) != 0) {
    throw DecodeError("nct: unsupported magic (expected NCT1)");
  }
  const std::size_t rank = bytes[4];
  if (rank == 0 || rank > 4) throw DecodeError("nct: invalid rank " + std::to_string(rank));
  std::size_t pos = 5;
  if (bytes.size() < pos + rank * 4) throw DecodeError("nct: truncated dims");
  Dims dims;
  for (std::size_t i = 0; i < rank; ++i, pos += 4) {
    std::uint32_t d = 0;
    for (std::size_t k = 0; k < 4; ++k) d |= static_cast<std::uint32_t>(bytes[pos + k]) << (8 * k);
    if (d == 0) throw DecodeError("nct: zero dimension");
    dims.push_back(d);
  }
  const std::size_t n = element_count(dims);
  if ((bytes.size() - pos) / 4 < n) throw DecodeError("nct: truncated payload");
  std::vector<float> values(n);
  for (std::size_t i = 0; i < n; ++i, pos += 4) {
    std::uint32_t u = 0;
    for (std::size_t k = 0; k < 4; ++k) u |= static_cast<std::uint32_t>(bytes[pos + k]) << (8 * k);
    values[i] = std::bit_cast<float>(u);
  }
  return Image(std::move(dims), std::move(values));
}

std::vector<std::uint8_t> encode_nct(const Image& tensor) {
  std::vector<std::uint8_t> out{'N', 'C', 'T', '1', static_cast<std::uint8_t>(tensor.rank())};
  auto put = [&out](std::uint32_t v) {
    for (std::size_t k = 0; k < 4; ++k) out.push_back(static_cast<std::uint8_t>(v >> (8 * k)));
  };
  for (auto d : tensor.dims()) put(static_cast<std::uint32_t>(d));
  for (float v : tensor.data()) put(std::bit_cast<std::uint32_t>(v));
  return out;
}

Image load_image(const std::filesystem::path& path) {
  const auto ext = path.extension().string();
  if (ext == ".nct") {
    Image t = decode_nct(read_file(path));
    if (t.rank() == 3) t.reshape({1, t.dim(0), t.dim(1), t.dim(2)});
    if (t.rank() != 4 || t.dim(0) != 1 || t.dim(1) != 3) {
      throw DecodeError("nct image must be [1,3,H,W] or [3,H,W]");
    }
    return t;
  }
  return read_ppm(path);
}

// ---------------------------------------------------------------------------
// Resize / normalize

template <typename T>
Tensor<T> resize_bilinear(const Tensor<T>& x, std::size_t out_h, std::size_t out_w) {
  if (x.rank() != 4) throw ShapeError("resize expects [N,C,H,W]");
  if (out_h == 0 || out_w == 0) throw ShapeError("resize target must be >= 1");
  const std::size_t in_h = x.dim(2), in_w = x.dim(3);
  const std::size_t planes = x.dim(0) * x.dim(1);
  Tensor<T> y({x.dim(0), x.dim(1), out_h, out_w});

  struct Tap {
    std::size_t lo, hi;
    double frac;
  };
  auto taps = [](std::size_t in, std::size_t out) {
    std::vector<Tap> t(out);
    const double scale = static_cast<double>(in) / static_cast<double>(out);
    for (std::size_t d = 0; d < out; ++d) {
      double s = (static_cast<double>(d) + 0.5) * scale - 0.5;
      s = std::clamp(s, 0.0, static_cast<double>(in - 1));
      const auto lo = static_cast<std::size_t>(std::floor(s));
      t[d] = {lo, std::min(lo + 1, in - 1), s - static_cast<double>(lo)};
    }
    return t;
  };
  const auto ty = taps(in_h, out_h);
  const auto tx = taps(in_w, out_w);
  for (std::size_t p = 0; p < planes; ++p) {
    const T* src = x.ptr() + p * in_h * in_w;
    T* dst = y.ptr() + p * out_h * out_w;
    for (std::size_t i = 0; i < out_h; ++i) {
      const Tap& a = ty[i];
      for (std::size_t j = 0; j < out_w; ++j) {
        const Tap& b = tx[j];
        const double top = src[a.lo * in_w + b.lo] * (1.0 - b.frac) + src[a.lo * in_w + b.hi] * b.frac;
        const double bot = src[a.hi * in_w + b.lo] * (1.0 - b.frac) + src[a.hi * in_w + b.hi] * b.frac;
        dst[i * out_w + j] = static_cast<T>(top * (1.0 - a.frac) + bot * a.frac);
      }
    }
  }
  return y;
}

template Tensor<float> resize_bilinear<float>(const Tensor<float>&, std::size_t, std::size_t);
template Tensor<double> resize_bilinear<double>(const Tensor<double>&, std::size_t, std::size_t);

void PipelineConfig::validate() const {
  if (resolution == 0) throw ConfigError("pipeline resolution must be >= 1");
  for (float s : std) {
    if (!(s > 0.0f)) throw ConfigError("normalization std must be > 0");
  }
}

namespace {

void require_rgb(const Image& x) {
  if (x.rank() != 4 || x.dim(1) != 3) {
    throw ShapeError("expected [N,3,H,W] image, got " + to_string(x.dims()));
  }
}

}  // namespace

Image normalize(const Image& x, const PipelineConfig& cfg) {
  cfg.validate();
  require_rgb(x);
  Image y = x;
  const std::size_t plane = x.dim(2) * x.dim(3);
  for (std::size_t n = 0; n < x.dim(0); ++n) {
    for (std::size_t c = 0; c < 3; ++c) {
      float* p = y.ptr() + (n * 3 + c) * plane;
      for (std::size_t i = 0; i < plane; ++i) p[i] = (p[i] / 255.0f - cfg.mean[c]) / cfg.std[c];
    }
  }
  return y;
}

Image denormalize(const Image& x, const PipelineConfig& cfg) {
  cfg.validate();
  require_rgb(x);
  Image y = x;
  const std::size_t plane = x.dim(2) * x.dim(3);
  for (std::size_t n = 0; n < x.dim(0); ++n) {
    for (std::size_t c = 0; c < 3; ++c) {
      float* p = y.ptr() + (n * 3 + c) * plane;
      for (std::size_t i = 0; i < plane; ++i) p[i] = (p[i] * cfg.std[c] + cfg.mean[c]) * 255.0f;
    }
  }
  return y;
}

Image preprocess(const Image& raw, const PipelineConfig& cfg) {
  const bool same = raw.dim(2) == cfg.resolution && raw.dim(3) == cfg.resolution;
  return normalize(same ? raw : resize_bilinear(raw, cfg.resolution, cfg.resolution), cfg);
}

// ---------------------------------------------------------------------------
// Splits

void DatasetSplit::check_labels(std::size_t classes) const {
  for (const auto& e : entries) {
    if (e.label < 0 || static_cast<std::size_t>(e.label) >= classes) {
      throw LabelError(e.path + ": label " + std::to_string(e.label) + " outside [0," +
                       std::to_string(classes) + ")");
    }
  }
}

DatasetSplit parse_split(const std::filesystem::path& root, std::string_view text) {
  DatasetSplit split;
  split.root = root;
  std::unordered_set<std::string> seen;
  std::size_t line_no = 0;
  std::size_t start = 0;
  while (start <= text.size()) {
    std::size_t end = text.find('\n', start);
    if (end == std::string_view::npos) end = text.size();
    std::string_view line = text.substr(start, end - start);
    ++line_no;
    start = end + 1;
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    if (line.empty()) {
      if (end == text.size()) break;
      continue;
    }
    const std::size_t sep = line.rfind(' ');
    if (sep == std::string_view::npos || sep == 0) {
      throw ParseError(line_no, "expected 'path label'");
    }
    std::string_view path = line.substr(0, sep);
    std::string_view label_text = line.substr(sep + 1);
    int label = 0;
    const auto [ptr, ec] =
        std::from_chars(label_text.data(), label_text.data() + label_text.size(), label);
    if (label_text.empty() || ec != std::errc() || ptr != label_text.data() + label_text.size()) {
      throw ParseError(line_no, "label '" + std::string(label_text) + "' is not an integer");
    }
    if (label < 0) throw ParseError(line_no, "negative label " + std::to_string(label));
    if (!seen.emplace(path).second) {
      throw ParseError(line_no, "duplicate path '" + std::string(path) + "'");
    }
    split.entries.push_back({std::string(path), label});
    if (end == text.size()) break;
  }
  return split;
}

DatasetSplit load_split(const std::filesystem::path& root, const std::filesystem::path& list_file) {
  const auto bytes = read_file(list_file);
  return parse_split(root, std::string_view(reinterpret_cast<const char*>(bytes.data()), bytes.size()));
}

void write_split(const std::filesystem::path& list_file, const DatasetSplit& split) {
  std::string text;
  for (const auto& e : split.entries) text += e.path + " " + std::to_string(e.label) + "\n";
  write_file(list_file, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

ChannelStats compute_stats(const DatasetSplit& split) {
  std::array<double, 3> sum{}, sq{};
  std::size_t pixels = 0;
  for (const auto& e : split.entries) {
    Image img;
    try {
      img = load_image(split.root / e.path);
    } catch (const Error& err) {
      throw ItemError(e.path, err.what());
    }
    const std::size_t plane = img.dim(2) * img.dim(3);
    for (std::size_t c = 0; c < 3; ++c) {
      for (std::size_t i = 0; i < plane; ++i) {
        const double v = img[c * plane + i] / 255.0;
        sum[c] += v;
        sq[c] += v * v;
      }
    }
    pixels += plane;
  }
  ChannelStats s;
  s.pixels = pixels;
  if (pixels == 0) return s;
  for (std::size_t c = 0; c < 3; ++c) {
    s.mean[c] = sum[c] / static_cast<double>(pixels);
    s.std[c] = std::sqrt(std::max(0.0, sq[c] / static_cast<double>(pixels) - s.mean[c] * s.mean[c]));
  }
  return s;
}

// ---------------------------------------------------------------------------
// Synthetic dataset

namespace {

std::array<float, 3> hue_to_rgb(double hue) {
  const double s = 0.9, v = 0.95;
  const double h6 = hue * 6.0;
  const int sector = static_cast<int>(std::floor(h6)) % 6;
  const double f = h6 - std::floor(h6);
  const double p = v * (1 - s), q = v * (1 - s * f), t = v * (1 - s * (1 - f));
  double r = 0, g = 0, b = 0;
  switch (sector) {
    case 0: r = v, g = t, b = p; break;
    case 1: r = q, g = v, b = p; break;
    case 2: r = p, g = v, b = t; break;
    case 3: r = p, g = q, b = v; break;
    case 4: r = t, g = p, b = v; break;
    default: r = v, g = p, b = q; break;
  }
  return {static_cast<float>(r * 255), static_cast<float>(g * 255), static_cast<float>(b * 255)};
}

std::pair<Image, Box> render_motif(std::size_t cls, std::size_t classes, std::size_t res, Rng& rng) {
  const auto grid = static_cast<std::size_t>(std::ceil(std::sqrt(static_cast<double>(classes))));
  const std::size_t cell = res / grid;
  const std::size_t side = cell * 15 / 16;
  const std::size_t slack = cell - side;
  const std::size_t q = rng.below(grid * grid);
  const std::size_t cx = (q % grid) * cell, cy = (q / grid) * cell;
  const std::size_t x0 = cx + rng.below(slack + 1);
  const std::size_t y0 = cy + rng.below(slack + 1);
  const Box box{x0, y0, x0 + side, y0 + side};

  const auto base = hue_to_rgb(static_cast<double>(cls) / static_cast<double>(classes));
  const double brightness = rng.uniform(0.8, 1.0);
  Image img({1, 3, res, res});
  const std::size_t plane = res * res;
  for (std::size_t y = 0; y < res; ++y) {
    for (std::size_t x = 0; x < res; ++x) {
      const bool inside = box.contains(x, y);
      for (std::size_t c = 0; c < 3; ++c) {
        const double level = inside ? base[c] * brightness : 128.0;
        const double v = std::round(level + rng.normal(0.0, 10.0));
        img[c * plane + y * res + x] = static_cast<float>(std::clamp(v, 0.0, 255.0));
      }
    }
  }
  return {std::move(img), box};
}

void write_boxes(const std::filesystem::path& path, const DatasetSplit& split,
                 const std::vector<Box>& boxes) {
  std::string text;
  for (std::size_t i = 0; i < boxes.size(); ++i) {
    const Box& b = boxes[i];
    text += split.entries[i].path + " " + std::to_string(b.x0) + " " + std::to_string(b.y0) + " " +
            std::to_string(b.x1) + " " + std::to_string(b.y1) + "\n";
  }
  write_file(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

}  // namespace

SynthDataset synth_generate(const SynthConfig& cfg) {
  if (cfg.classes < 2) throw ConfigError("synthetic dataset needs at least 2 classes");
  if (cfg.per_class == 0) throw ConfigError("per_class must be >= 1");
  const auto grid = static_cast<std::size_t>(std::ceil(std::sqrt(static_cast<double>(cfg.classes))));
  if (cfg.resolution < 8 * grid) throw ConfigError("resolution too small for class grid");
  std::error_code ec;
  std::filesystem::create_directories(cfg.out_dir, ec);
  if (ec || !std::filesystem::is_directory(cfg.out_dir)) {
    throw IoError("cannot create directory " + cfg.out_dir.string());
  }

  SynthDataset ds;
  ds.train.root = cfg.out_dir;
  ds.test.root = cfg.out_dir;
  const std::size_t test_per_class = std::max<std::size_t>(1, cfg.per_class / 5);

  auto make = [&](const std::string& subset, std::size_t per_class, std::uint64_t stream,
                  DatasetSplit& split, std::vector<Box>& boxes) {
    Rng rng(cfg.seed * 0x9E3779B97F4A7C15ULL + stream);
    for (std::size_t i = 0; i < per_class; ++i) {
      for (std::size_t c = 0; c < cfg.classes; ++c) {
        auto [img, box] = render_motif(c, cfg.classes, cfg.resolution, rng);
        const std::string rel = subset + "/c" + std::to_string(c) + "_" + std::to_string(i) + ".ppm";
        write_ppm(cfg.out_dir / rel, img);
        split.entries.push_back({rel, static_cast<int>(c)});
        boxes.push_back(box);
      }
    }
    write_split(cfg.out_dir / (subset + ".txt"), split);
    write_boxes(cfg.out_dir / (subset + "_boxes.txt"), split, boxes);
  };
  make("train", cfg.per_class, 1, ds.train, ds.train_boxes);
  make("test", test_per_class, 2, ds.test, ds.test_boxes);
  return ds;
}

std::vector<Box> load_boxes(const std::filesystem::path& path, std::size_t expected) {
  const auto bytes = read_file(path);
  std::istringstream in(std::string(bytes.begin(), bytes.end()));
  std::vector<Box> boxes;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string path_field;
    Box b;
    if (!(ls >> path_field >> b.x0 >> b.y0 >> b.x1 >> b.y1)) {
      throw ParseError(line_no, "expected 'path x0 y0 x1 y1'");
    }
    boxes.push_back(b);
  }
  if (boxes.size() != expected) {
    throw ParseError(line_no, "expected " + std::to_string(expected) + " boxes, found " +
                                  std::to_string(boxes.size()));
  }
  return boxes;
}

// ---------------------------------------------------------------------------
// Batching

std::vector<std::size_t> epoch_permutation(std::size_t n, std::uint64_t seed, std::size_t epoch) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(seed ^ (0xD1B54A32D192ED03ULL * (epoch + 1)));
  for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
  return order;
}

BatchIterator::BatchIterator(DatasetSplit split, std::size_t batch_size, PipelineConfig pipeline,
                             bool shuffle)
    : split_(std::move(split)), batch_size_(batch_size), pipeline_(pipeline), shuffle_(shuffle) {
  if (batch_size_ == 0) throw ConfigError("batch size must be >= 1");
  pipeline_.validate();
  start_epoch(0);
}

void BatchIterator::start_epoch(std::size_t epoch) {
  if (shuffle_) {
    order_ = epoch_permutation(split_.size(), pipeline_.shuffle_seed, epoch);
  } else {
    order_.resize(split_.size());
    std::iota(order_.begin(), order_.end(), std::size_t{0});
  }
  cursor_ = 0;
}

bool BatchIterator::next(Batch& batch) {
  if (cursor_ >= order_.size()) return false;
  const std::size_t count = std::min(batch_size_, order_.size() - cursor_);
  const std::size_t r = pipeline_.resolution;
  const std::size_t image_size = 3 * r * r;
  batch.images = Image({count, 3, r, r});
  batch.labels.resize(count);
  batch.indices.assign(order_.begin() + static_cast<std::ptrdiff_t>(cursor_),
                       order_.begin() + static_cast<std::ptrdiff_t>(cursor_ + count));

  std::vector<std::exception_ptr> errors(count);
  parallel_for(count, [&](std::size_t i) {
    const SplitEntry& e = split_.entries[batch.indices[i]];
    try {
      Image img = preprocess(load_image(split_.root / e.path), pipeline_);
      std::copy(img.vec().begin(), img.vec().end(), batch.images.ptr() + i * image_size);
    } catch (const std::exception& ex) {
      errors[i] = std::make_exception_ptr(ItemError(e.path, ex.what()));
    }
    batch.labels[i] = e.label;
  });
  for (auto& err : errors) {
    if (err) std::rethrow_exception(err);
  }
  cursor_ += count;
  return true;
}

}  // namespace exqnet

#include "exqnet/model.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <unordered_map>
#include <unordered_set>

namespace exqnet {

// ---------------------------------------------------------------------------
// Config

ModelConfig ModelConfig::full(std::size_t classes) {
  ModelConfig c;
  c.classes = classes;
  return c;
}

ModelConfig ModelConfig::micro(std::size_t classes) {
  ModelConfig c;
  c.schedule = {4, 8, 12, 16, 20};
  c.classes = classes;
  c.resolution = 64;
  return c;
}

void ModelConfig::validate() const {
  if (schedule.empty()) throw ConfigError("channel schedule is empty");
  for (std::size_t i = 0; i < schedule.size(); ++i) {
    if (schedule[i] == 0) throw ConfigError("channel schedule entries must be >= 1");
    if (i > 0 && schedule[i] <= schedule[i - 1]) {
      throw ConfigError("channel schedule must be strictly increasing");
    }
    if (se_reduction == 0 || schedule[i] < se_reduction) {
      throw ConfigError("SE reduction " + std::to_string(se_reduction) + " invalid for " +
                        std::to_string(schedule[i]) + " channels");
    }
  }
  if (schedule.size() >= 64) throw ConfigError("channel schedule too long");
  const std::size_t factor = std::size_t{1} << schedule.size();
  if (resolution == 0 || resolution % factor != 0) {
    throw ConfigError("resolution " + std::to_string(resolution) + " not divisible by " +
                      std::to_string(factor));
  }
  if (head_width == 0) throw ConfigError("head width must be >= 1");
  if (classes == 0) throw ConfigError("class count must be >= 1");
  if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("dropout must be in [0,1)");
}

nlohmann::json ModelConfig::to_json() const {
  return {{"schedule", schedule},     {"head_width", head_width},
          {"classes", classes},       {"dropout", dropout},
          {"se_reduction", se_reduction}, {"resolution", resolution}};
}

ModelConfig ModelConfig::from_json(const nlohmann::json& j) {
  ModelConfig c;
  try {
    c.schedule = j.at("schedule").get<std::vector<std::size_t>>();
    c.head_width = j.at("head_width").get<std::size_t>();
    c.classes = j.at("classes").get<std::size_t>();
    c.dropout = j.at("dropout").get<double>();
    c.se_reduction = j.at("se_reduction").get<std::size_t>();
    c.resolution = j.at("resolution").get<std::size_t>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("model config: ") + e.what());
  }
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------
// Graph

template <typename T>
ExquisiteNet<T> ExquisiteNet<T>::build(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  ExquisiteNet net;
  net.config_ = config;
  Rng rng(seed);

  auto add = [&net](std::string name, std::unique_ptr<Module<T>> m) {
    net.names_.push_back(std::move(name));
    net.stages_.push_back(std::move(m));
  };

  std::size_t channels = ModelConfig::kInputChannels;
  for (std::size_t i = 0; i < config.schedule.size(); ++i) {
    const std::size_t out = config.schedule[i];
    auto me = std::make_unique<MEBlock<T>>(channels, out);
    me->init(rng);
    add("me" + std::to_string(i + 1), std::move(me));
    auto dfseb = std::make_unique<DFSEBBlock<T>>(out, config.se_reduction);
    dfseb->init(rng);
    add("dfseb" + std::to_string(i + 1), std::move(dfseb));
    channels = out;
  }
  auto head = std::make_unique<Conv2d<T>>(ConvSpec{channels, config.head_width, 1, 1, 0, 1, true});
  head->init_he(rng);
  add("head_conv", std::move(head));
  add("hardswish", std::make_unique<Activation<T>>(ActivationKind::kHardSwish));
  add("avgpool", std::make_unique<GlobalAvgPool<T>>());
  add("dropout", std::make_unique<Dropout<T>>(config.dropout, rng.next()));
  auto fc = std::make_unique<Linear<T>>(config.head_width, config.classes, true);
  fc->init_he(rng);
  add("fc", std::move(fc));

  net.register_all();
  return net;
}

template <typename T>
void ExquisiteNet<T>::register_all() {
  registry_ = Registry<T>();
  stage_param_counts_.clear();
  for (std::size_t i = 0; i < stages_.size(); ++i) {
    stages_[i]->register_into(registry_, names_[i]);
    Registry<T> local;
    stages_[i]->register_into(local, names_[i]);
    stage_param_counts_.push_back(local.param_elements());
  }
}

template <typename T>
std::size_t ExquisiteNet<T>::stage_index(const std::string& name) const {
  for (std::size_t i = 0; i < names_.size(); ++i) {
    if (names_[i] == name) return i;
  }
  throw ConfigError("no stage named '" + name + "'");
}

template <typename T>
Tensor<T> ExquisiteNet<T>::forward(const Tensor<T>& x, Mode mode,
                                   std::vector<Tensor<T>>* stage_outputs) {
  const std::size_t r = config_.resolution;
  if (x.rank() != 4 || x.dim(1) != ModelConfig::kInputChannels || x.dim(2) != r || x.dim(3) != r) {
    throw ShapeError("model expects [N,3," + std::to_string(r) + "," + std::to_string(r) +
                     "], got " + to_string(x.dims()));
  }
  if (stage_outputs) stage_outputs->clear();
  Tensor<T> h = x;
  for (std::size_t i = 0; i < stages_.size(); ++i) {
    h = stages_[i]->forward(h, mode);
    h.check_finite("stage " + names_[i]);
    if (stage_outputs) stage_outputs->push_back(h);
  }
  return h;
}

template <typename T>
Tensor<T> ExquisiteNet<T>::backward(const Tensor<T>& dlogits, std::size_t first_stage) {
  if (first_stage > stages_.size()) throw ShapeError("backward: stage index out of range");
  Tensor<T> d = dlogits;
  for (std::size_t i = stages_.size(); i-- > first_stage;) d = stages_[i]->backward(d);
  return d;
}

template <typename T>
std::vector<std::uint32_t> ExquisiteNet<T>::kink_pattern() const {
  std::vector<std::uint32_t> out;
  for (const auto& s : stages_) s->append_kink_pattern(out);
  return out;
}

template <typename T>
void ExquisiteNet<T>::zero_grad() {
  for (auto& p : registry_.params()) p.param->zero_grad();
}

template <typename T>
void ExquisiteNet<T>::reseed_dropout(std::uint64_t seed) {
  for (auto& s : stages_) {
    if (auto* d = dynamic_cast<Dropout<T>*>(s.get())) d->reseed(seed);
  }
}

template <typename T>
std::vector<StageTrace> ExquisiteNet<T>::trace() {
  const std::size_t r = config_.resolution;
  std::vector<Tensor<T>> outputs;
  Tensor<T> x({1, ModelConfig::kInputChannels, r, r});
  forward(x, Mode::kEval, &outputs);
  std::vector<StageTrace> rows;
  Dims in = x.dims();
  for (std::size_t i = 0; i < stages_.size(); ++i) {
    rows.push_back({names_[i], stages_[i]->kind(), in, outputs[i].dims(), stage_param_counts_[i]});
    in = outputs[i].dims();
  }
  return rows;
}

template <typename T>
ParamCount count_params(const ExquisiteNet<T>& model) {
  ParamCount pc;
  const auto counts = model.stage_param_counts();
  for (std::size_t i = 0; i < counts.size(); ++i) {
    pc.per_stage.push_back({model.stage_name(i), counts[i]});
    pc.total += counts[i];
  }
  return pc;
}

namespace {

std::string shape_label(const Dims& d) {
  if (d.size() == 4) {
    return std::to_string(d[2]) + "x" + std::to_string(d[3]) + "x" + std::to_string(d[1]);
  }
  return to_string(d);
}

}  // namespace

template <typename T>
std::string format_summary(ExquisiteNet<T>& model) {
  std::ostringstream os;
  os << std::left << std::setw(12) << "stage" << std::setw(18) << "operator" << std::setw(16)
     << "input" << std::setw(16) << "output" << std::right << std::setw(12) << "params" << "\n";
  for (const auto& row : model.trace()) {
    os << std::left << std::setw(12) << row.name << std::setw(18) << row.op << std::setw(16)
       << shape_label(row.input) << std::setw(16) << shape_label(row.output) << std::right
       << std::setw(12) << row.params << "\n";
  }
  const ParamCount pc = count_params(model);
  os << "total_params=" << pc.total << " total_params_m=" << std::fixed << std::setprecision(2)
     << pc.millions() << "\n";
  return os.str();
}

// ---------------------------------------------------------------------------
// Serialization

namespace {

constexpr char kMagic[4] = {'E', 'X', 'Q', 'W'};

class Writer {
 public:
  void bytes(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    out.insert(out.end(), b, b + n);
  }
  template <typename U>
  void le(U v) {
    for (std::size_t i = 0; i < sizeof(U); ++i) {
      out.push_back(static_cast<std::uint8_t>((static_cast<std::uint64_t>(v) >> (8 * i)) & 0xff));
    }
  }
  std::vector<std::uint8_t> out;
};

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> data) : data_(data) {}

  std::span<const std::uint8_t> take(std::size_t n, const char* what) {
    if (data_.size() - pos_ < n) {
      throw FormatError(pos_, std::string("truncated while reading ") + what);
    }
    auto s = data_.subspan(pos_, n);
    pos_ += n;
    return s;
  }
  template <typename U>
  U le(const char* what) {
    auto s = take(sizeof(U), what);
    std::uint64_t v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<std::uint64_t>(s[i]) << (8 * i);
    return static_cast<U>(v);
  }
  std::size_t pos() const { return pos_; }
  bool done() const { return pos_ == data_.size(); }

 private:
  std::span<const std::uint8_t> data_;
  std::size_t pos_ = 0;
};

template <typename T>
constexpr std::uint8_t dtype_code() {
  return std::is_same_v<T, float> ? 0 : 1;
}

struct RawTensor {
  std::uint8_t dtype;
  Dims dims;
  std::vector<double> values;
  std::size_t offset;
};

}  // namespace

template <typename T>
std::vector<std::uint8_t> serialize(const ExquisiteNet<T>& model) {
  Writer w;
  w.bytes(kMagic, 4);
  w.le<std::uint32_t>(kWeightFormatVersion);
  const std::string cfg = model.config().to_json().dump();
  w.le<std::uint32_t>(static_cast<std::uint32_t>(cfg.size()));
  w.bytes(cfg.data(), cfg.size());

  std::vector<std::pair<std::string, const Tensor<T>*>> tensors;
  for (const auto& p : model.registry().params()) tensors.emplace_back(p.name, &p.param->value);
  for (const auto& b : model.registry().buffers()) tensors.emplace_back(b.name, b.tensor);
  w.le<std::uint32_t>(static_cast<std::uint32_t>(tensors.size()));
  for (const auto& [name, t] : tensors) {
    w.le<std::uint16_t>(static_cast<std::uint16_t>(name.size()));
    w.bytes(name.data(), name.size());
    w.le<std::uint8_t>(dtype_code<T>());
    w.le<std::uint8_t>(static_cast<std::uint8_t>(t->rank()));
    for (auto d : t->dims()) w.le<std::uint32_t>(static_cast<std::uint32_t>(d));
    for (T v : t->data()) {
      if constexpr (std::is_same_v<T, float>) {
        w.le<std::uint32_t>(std::bit_cast<std::uint32_t>(v));
      } else {
        w.le<std::uint64_t>(std::bit_cast<std::uint64_t>(v));
      }
    }
  }
  return std::move(w.out);
}

template <typename T>
ExquisiteNet<T> deserialize(std::span<const std::uint8_t> bytes) {
  Reader r(bytes);
  auto magic = r.take(4, "magic");
  if (std::memcmp(magic.data(), kMagic, 4) != 0) throw FormatError(0, "bad magic, expected EXQW");
  const std::size_t version_at = r.pos();
  const auto version = r.le<std::uint32_t>("version");
  if (version != kWeightFormatVersion) {
    throw FormatError(version_at, "unsupported version " + std::to_string(version));
  }
  const auto cfg_len = r.le<std::uint32_t>("config length");
  const std::size_t cfg_at = r.pos();
  auto cfg_bytes = r.take(cfg_len, "config");
  ModelConfig config;
  try {
    config = ModelConfig::from_json(
        nlohmann::json::parse(std::string(cfg_bytes.begin(), cfg_bytes.end())));
  } catch (const std::exception& e) {
    throw FormatError(cfg_at, std::string("invalid config: ") + e.what());
  }

  const auto count = r.le<std::uint32_t>("tensor count");
  std::unordered_map<std::string, RawTensor> raw;
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::size_t at = r.pos();
    const auto name_len = r.le<std::uint16_t>("name length");
    auto name_bytes = r.take(name_len, "name");
    std::string name(name_bytes.begin(), name_bytes.end());
    RawTensor t;
    t.offset = at;
    t.dtype = r.le<std::uint8_t>("dtype");
    if (t.dtype > 1) throw FormatError(r.pos() - 1, "unknown dtype " + std::to_string(t.dtype));
    const auto rank = r.le<std::uint8_t>("rank");
    if (rank == 0 || rank > 4) throw FormatError(r.pos() - 1, "invalid rank");
    for (std::uint8_t k = 0; k < rank; ++k) t.dims.push_back(r.le<std::uint32_t>("dims"));
    const std::size_t n = element_count(t.dims);
    const std::size_t width = t.dtype == 0 ? 4 : 8;
    if ((bytes.size() - r.pos()) / width < n) throw FormatError(r.pos(), "truncated payload");
    t.values.resize(n);
    for (std::size_t k = 0; k < n; ++k) {
      t.values[k] = t.dtype == 0
                        ? static_cast<double>(std::bit_cast<float>(r.le<std::uint32_t>("payload")))
                        : std::bit_cast<double>(r.le<std::uint64_t>("payload"));
    }
    if (!raw.emplace(std::move(name), std::move(t)).second) {
      throw FormatError(at, "duplicate tensor name");
    }
  }
  if (!r.done()) throw FormatError(r.pos(), "trailing bytes after last tensor");

  ExquisiteNet<T> model = ExquisiteNet<T>::build(config, 0);
  std::vector<std::pair<std::string, Tensor<T>*>> targets;
  for (const auto& p : model.registry().params()) targets.emplace_back(p.name, &p.param->value);
  for (const auto& b : model.registry().buffers()) targets.emplace_back(b.name, b.tensor);
  if (targets.size() != raw.size()) {
    throw FormatError(bytes.size(), "file holds " + std::to_string(raw.size()) +
                                        " tensors, model expects " +
                                        std::to_string(targets.size()));
  }
  for (auto& [name, dst] : targets) {
    auto it = raw.find(name);
    if (it == raw.end()) throw FormatError(bytes.size(), "missing tensor " + name);
    if (it->second.dims != dst->dims()) {
      throw FormatError(it->second.offset, "tensor " + name + " has dims " +
                                               to_string(it->second.dims) + ", expected " +
                                               to_string(dst->dims()));
    }
    for (std::size_t k = 0; k < dst->size(); ++k) (*dst)[k] = static_cast<T>(it->second.values[k]);
  }
  return model;
}

template <typename T>
void save_model(const ExquisiteNet<T>& model, const std::filesystem::path& path) {
  const auto bytes = serialize(model);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("failed writing " + path.string());
}

template <typename T>
ExquisiteNet<T> load_model(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                  std::istreambuf_iterator<char>());
  return deserialize<T>(bytes);
}

#define EXQNET_INSTANTIATE(T)                                                            \
  template class ExquisiteNet<T>;                                                       \
  template ParamCount count_params<T>(const ExquisiteNet<T>&);                          \
  template std::string format_summary<T>(ExquisiteNet<T>&);                             \
  template std::vector<std::uint8_t> serialize<T>(const ExquisiteNet<T>&);              \
  template ExquisiteNet<T> deserialize<T>(std::span<const std::uint8_t>);               \
  template void save_model<T>(const ExquisiteNet<T>&, const std::filesystem::path&);    \
  template ExquisiteNet<T> load_model<T>(const std::filesystem::path&);

EXQNET_INSTANTIATE(float)
EXQNET_INSTANTIATE(double)

}  // namespace exqnet

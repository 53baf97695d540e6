#include "exqnet/bench.hpp"

#include <chrono>
#include <cmath>
#include <sstream>

#include <fmt/format.h>

namespace exqnet {

void BenchConfig::validate() const {
  if (batch == 0) throw ConfigError("bench batch must be >= 1");
  if (iterations == 0) throw ConfigError("bench iterations must be >= 1");
  if (repeats == 0) throw ConfigError("bench repeats must be >= 1");
  if (threads == 0) throw ConfigError("bench threads must be >= 1");
}

double percentile(std::vector<double> values, double q) {
  if (values.empty()) return 0.0;
  std::sort(values.begin(), values.end());
  const auto rank = static_cast<std::size_t>(std::ceil(q * static_cast<double>(values.size())));
  return values[std::clamp<std::size_t>(rank, 1, values.size()) - 1];
}

template <typename T>
BenchReport measure_fps(ExquisiteNet<T>& model, const BenchConfig& config) {
  config.validate();
  const std::size_t previous_threads = num_threads();
  set_num_threads(config.threads);

  const std::size_t r = model.config().resolution;
  Rng rng(config.seed);
  const Tensor<T> input = Tensor<T>::uniform({config.batch, 3, r, r}, rng);

  for (std::size_t i = 0; i < config.warmup; ++i) model.forward(input, Mode::kEval);

  BenchReport report;
  report.config = config;
  report.batch_seconds.reserve(config.repeats * config.iterations);
  double total_seconds = 0.0;
  for (std::size_t rep = 0; rep < config.repeats; ++rep) {
    double rep_seconds = 0.0;
    for (std::size_t it = 0; it < config.iterations; ++it) {
      const auto start = std::chrono::steady_clock::now();
      model.forward(input, Mode::kEval);
      const double s =
          std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
      report.batch_seconds.push_back(s);
      rep_seconds += s;
    }
    total_seconds += rep_seconds;
    report.repeat_fps.push_back(static_cast<double>(config.batch * config.iterations) / rep_seconds);
  }
  set_num_threads(previous_threads);

  report.fps = static_cast<double>(config.batch * config.iterations * config.repeats) / total_seconds;
  double mean = 0.0;
  for (double f : report.repeat_fps) mean += f;
  mean /= static_cast<double>(report.repeat_fps.size());
  double var = 0.0;
  for (double f : report.repeat_fps) var += (f - mean) * (f - mean);
  var /= static_cast<double>(report.repeat_fps.size());
  report.cov = mean > 0.0 ? std::sqrt(var) / mean : 0.0;
  report.p50_ms = 1e3 * percentile(report.batch_seconds, 0.50);
  report.p95_ms = 1e3 * percentile(report.batch_seconds, 0.95);
  return report;
}

nlohmann::json BenchReport::to_json() const {
  return {{"batch", config.batch},       {"iterations", config.iterations},
          {"warmup", config.warmup},    {"repeats", config.repeats},
          {"threads", config.threads},  {"fps", fps},
          {"repeat_fps", repeat_fps},   {"cov", cov},
          {"p50_ms", p50_ms},           {"p95_ms", p95_ms},
          {"stable", stable()},         {"batch_seconds", batch_seconds}};
}

std::string BenchReport::to_text() const {
  std::ostringstream out;
  out << fmt::format("{:<10}{:>14}\n", "batch", config.batch);
  out << fmt::format("{:<10}{:>14}\n", "iters", config.iterations);
  out << fmt::format("{:<10}{:>14}\n", "warmup", config.warmup);
  out << fmt::format("{:<10}{:>14}\n", "repeats", config.repeats);
  out << fmt::format("{:<10}{:>14}\n", "threads", config.threads);
  out << fmt::format("{:<10}{:>14.2f}\n", "fps", fps);
  out << fmt::format("{:<10}{:>14.4f}{}\n", "cov", cov, stable() ? "" : "  (unstable)");
  out << fmt::format("{:<10}{:>14.3f}\n", "p50_ms", p50_ms);
  out << fmt::format("{:<10}{:>14.3f}\n", "p95_ms", p95_ms);
  return out.str();
}

template BenchReport measure_fps<float>(ExquisiteNet<float>&, const BenchConfig&);
template BenchReport measure_fps<double>(ExquisiteNet<double>&, const BenchConfig&);

}  // namespace exqnet

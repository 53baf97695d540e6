#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "exqnet/model.hpp"
#include "json.hpp"

namespace exqnet {

struct BenchConfig {
  std::size_t batch = 50;
  std::size_t iterations = 10;
  std::size_t warmup = 2;
  std::size_t repeats = 5;
  std::size_t threads = 1;
  std::uint64_t seed = 0;

  void validate() const;
};

struct BenchReport {
  BenchConfig config;
  double fps = 0.0;                     // total images / total timed seconds
  std::vector<double> repeat_fps;       // one per repeat
  double cov = 0.0;                     // stddev / mean of repeat_fps
  double p50_ms = 0.0;
  double p95_ms = 0.0;
  std::vector<double> batch_seconds;    // raw log, repeat-major

  // Flagged, not failed: the machine may be busy.
  bool stable() const { return cov < 0.10; }

  nlohmann::json to_json() const;
  std::string to_text() const;
};

// Nearest-rank percentile of an unsorted sample, q in [0,1].
double percentile(std::vector<double> values, double q);

// Eval-mode forward throughput on a fixed random batch allocated before
// timing starts.
template <typename T>
BenchReport measure_fps(ExquisiteNet<T>& model, const BenchConfig& config);

}  // namespace exqnet

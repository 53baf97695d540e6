#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "exqnet/module.hpp"

namespace exqnet {

struct GradCheckOptions {
  double step = 1e-5;
  double tolerance = 1e-5;
  std::size_t samples = 6;  // coordinates per tensor; small tensors are checked in full
  std::size_t model_resolution = 64;
  std::size_t model_batch = 2;
};

struct GradCheckResult {
  std::string name;
  double max_rel_error = 0.0;
  std::size_t coordinates = 0;
  std::size_t resampled = 0;  // draws rejected because x +/- h/100 still straddled a kink
  bool passed = false;
};

// A differentiable scalar function of some tensors. loss() runs a forward
// pass on the current tensor values; pattern() reports the kink pattern of
// that pass.
struct GradProbe {
  std::function<double()> loss;
  std::function<std::vector<std::uint32_t>()> pattern;
};

struct CheckedTensor {
  std::string name;
  Tensor<double>* value;
  Tensor<double> analytic;
};

// Central differences at sampled coordinates. The error of a tensor is
// max|analytic - numeric| / max(max|analytic| over the tensor, max|numeric|).
GradCheckResult check_gradients(const std::string& name, const GradProbe& probe,
                                std::vector<CheckedTensor> tensors, Rng& rng,
                                const GradCheckOptions& options);

// Every layer, block and the micro model, one seed.
std::vector<GradCheckResult> gradcheck_suite(std::uint64_t seed, const GradCheckOptions& options = {});

}  // namespace exqnet

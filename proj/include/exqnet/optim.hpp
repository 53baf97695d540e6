#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "exqnet/module.hpp"

namespace exqnet {

// Removes, for every slice along dim 0 (one output channel / class row), the
// mean of that slice. Rank-1 gradients pass through unchanged.
template <typename T>
Tensor<T> centralize_gradient(const Tensor<T>& grad);

// RAdam variance-rectification terms.
double radam_rho_inf(double beta2);
double radam_rho(std::int64_t step, double beta2);
// Only meaningful when rho > 4.
double radam_rectifier(double rho, double rho_inf);

// slow += alpha * (fast - slow); fast = slow.
template <typename T>
void lookahead_sync(std::span<T> fast, std::span<T> slow, double alpha);

enum class UpdateRule { kSgd, kAdam, kRAdam };

struct OptimConfig {
  UpdateRule rule = UpdateRule::kRAdam;
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double momentum = 0.0;  // SGD only
  bool centralize = false;
  bool lookahead = false;
  std::size_t lookahead_k = 6;
  double lookahead_alpha = 0.5;

  static OptimConfig sgd(double lr = 1e-3);
  static OptimConfig adam(double lr = 1e-3);
  static OptimConfig radam(double lr = 1e-3);
  // RAdam core, gradient centralization, Lookahead(k=6, alpha=0.5).
  static OptimConfig ranger(double lr = 1e-3);
  // "sgd" | "adam" | "radam" | "ranger"
  static OptimConfig named(const std::string& name, double lr);

  void validate() const;
};

// Per-parameter state and the update loop. No weight decay, constant lr.
template <typename T>
class Optimizer {
 public:
  Optimizer(std::vector<Parameter<T>*> params, OptimConfig config);
  Optimizer(const Registry<T>& registry, OptimConfig config);

  // Applies one update from each parameter's grad. Throws NumericError and
  // leaves every parameter untouched if any gradient is non-finite.
  void step();

  std::int64_t steps() const { return step_; }
  const OptimConfig& config() const { return config_; }

  // Instrumentation for the latest step.
  bool last_step_rectified() const { return last_rectified_; }
  bool last_step_synced() const { return last_synced_; }
  std::size_t rectified_steps() const { return rectified_steps_; }
  std::size_t sync_count() const { return sync_count_; }

 private:
  struct Slot {
    Parameter<T>* param;
    std::vector<T> m, v, slow;
  };

  OptimConfig config_;
  std::vector<Slot> slots_;
  std::int64_t step_ = 0;
  bool last_rectified_ = false;
  bool last_synced_ = false;
  std::size_t rectified_steps_ = 0;
  std::size_t sync_count_ = 0;
};

}  // namespace exqnet

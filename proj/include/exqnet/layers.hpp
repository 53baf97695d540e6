#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "exqnet/module.hpp"
#include "exqnet/tensor.hpp"

namespace exqnet {

struct ConvSpec {
  std::size_t in_channels = 1;
  std::size_t out_channels = 1;
  std::size_t kernel = 1;
  std::size_t stride = 1;
  std::size_t pad = 0;
  std::size_t groups = 1;
  bool bias = false;

  bool depthwise() const { return groups == in_channels && groups == out_channels; }
  bool pointwise() const { return kernel == 1 && groups == 1; }
  void validate() const;
};

// Grouped 2-D cross-correlation lowered through im2col + gemm.
// weight [Cout, Cin/groups, k, k], optional bias [Cout].
template <typename T>
class Conv2d final : public Module<T> {
 public:
  explicit Conv2d(ConvSpec spec);

  Tensor<T> forward(const Tensor<T>& x, Mode mode) override;
  Tensor<T> backward(const Tensor<T>& upstream) override;
  void register_into(Registry<T>& reg, const std::string& prefix) override;
  std::string kind() const override;

  const ConvSpec& spec() const { return spec_; }
  Parameter<T>& weight() { return weight_; }
  const Parameter<T>& weight() const { return weight_; }
  Parameter<T>* bias() { return bias_ ? &*bias_ : nullptr; }

  // He-normal weights (std = sqrt(2 / fan_in)), zero bias.
  void init_he(Rng& rng);

 private:
  ConvGeometry geometry(const Tensor<T>& x) const;
  bool lowering_is_identity() const {
    return spec_.kernel == 1 && spec_.stride == 1 && spec_.pad == 0;
  }

  ConvSpec spec_;
  Parameter<T> weight_;
  std::optional<Parameter<T>> bias_;
  std::optional<Tensor<T>> input_;
};

template <typename T>
struct MaxPoolResult {
  Tensor<T> output;
  std::vector<std::size_t> argmax;  // flat input index of each output's winner
};

// Windowed max; ties resolve to the first element in row-major window order.
template <typename T>
MaxPoolResult<T> maxpool2d_forward(const Tensor<T>& x, std::size_t kernel, std::size_t stride);

template <typename T>
class MaxPool2d final : public Module<T> {
 public:
  explicit MaxPool2d(std::size_t kernel = 2, std::size_t stride = 2)
      : kernel_(kernel), stride_(stride) {}

  Tensor<T> forward(const Tensor<T>& x, Mode mode) override;
  Tensor<T> backward(const Tensor<T>& upstream) override;
  std::string kind() const override { return "MaxPool2d"; }
  void append_kink_pattern(std::vector<std::uint32_t>& out) const override {
    out.insert(out.end(), argmax_.begin(), argmax_.end());
  }

  // Valid between forward and backward.
  std::span<const std::size_t> argmax() const { return argmax_; }

 private:
  std::size_t kernel_, stride_;
  Dims input_dims_;
  std::vector<std::size_t> argmax_;
  bool cached_ = false;
};

template <typename T>
class BatchNorm2d final : public Module<T> {
 public:
  explicit BatchNorm2d(std::size_t channels, double eps = 1e-5, double momentum = 0.1);

  Tensor<T> forward(const Tensor<T>& x, Mode mode) override;
  Tensor<T> backward(const Tensor<T>& upstream) override;
  void register_into(Registry<T>& reg, const std::string& prefix) override;
  std::string kind() const override { return "BatchNorm2d"; }

  Parameter<T>& gamma() { return gamma_; }
  Parameter<T>& beta() { return beta_; }
  Tensor<T>& running_mean() { return running_mean_; }
  Tensor<T>& running_var() { return running_var_; }
  double eps() const { return eps_; }
  double momentum() const { return momentum_; }

 private:
  std::size_t channels_;
  double eps_, momentum_;
  Parameter<T> gamma_, beta_;
  Tensor<T> running_mean_, running_var_;

  Mode cached_mode_ = Mode::kEval;
  std::optional<Tensor<T>> xhat_;
  std::vector<T> inv_std_;
};

enum class ActivationKind { kRelu, kHardSwish, kSigmoid };

std::string to_string(ActivationKind kind);

template <typename T>
T relu(T x) {
  return x > T{0} ? x : T{0};
}
template <typename T>
T hardswish(T x) {
  return x * std::min(std::max(x + T{3}, T{0}), T{6}) / T{6};
}
template <typename T>
T sigmoid(T x) {
  if (x >= T{0}) return T{1} / (T{1} + std::exp(-x));
  const T e = std::exp(x);
  return e / (T{1} + e);
}

// Derivatives; a kink takes the value of the piece on its left.
template <typename T>
T relu_grad(T x) {
  return x > T{0} ? T{1} : T{0};
}
template <typename T>
T hardswish_grad(T x) {
  if (x <= T{-3}) return T{0};
  if (x <= T{3}) return (T{2} * x + T{3}) / T{6};
  return T{1};
}

template <typename T>
Tensor<T> activation_forward(const Tensor<T>& x, ActivationKind kind);

template <typename T>
class Activation final : public Module<T> {
 public:
  explicit Activation(ActivationKind kind) : kind_(kind) {}

  Tensor<T> forward(const Tensor<T>& x, Mode mode) override;
  Tensor<T> backward(const Tensor<T>& upstream) override;
  std::string kind() const override { return to_string(kind_); }
  void append_kink_pattern(std::vector<std::uint32_t>& out) const override;
  ActivationKind activation() const { return kind_; }

 private:
  ActivationKind kind_;
  std::optional<Tensor<T>> input_;
  std::optional<Tensor<T>> output_;
};

// [N,C,H,W] -> [N,C,1,1] spatial mean.
template <typename T>
Tensor<T> global_avgpool(const Tensor<T>& x);

template <typename T>
class GlobalAvgPool final : public Module<T> {
 public:
  Tensor<T> forward(const Tensor<T>& x, Mode mode) override;
  Tensor<T> backward(const Tensor<T>& upstream) override;
  std::string kind() const override { return "GlobalAvgPool"; }

 private:
  Dims input_dims_;
  bool cached_ = false;
};

// y = x W^T + b. Accepts [N,F] or [N,F,1,1] input; gradients come back in the
// input's own dims.
template <typename T>
class Linear final : public Module<T> {
 public:
  Linear(std::size_t in_features, std::size_t out_features, bool bias = true);

  Tensor<T> forward(const Tensor<T>& x, Mode mode) override;
  Tensor<T> backward(const Tensor<T>& upstream) override;
  void register_into(Registry<T>& reg, const std::string& prefix) override;
  std::string kind() const override { return "Linear"; }

  Parameter<T>& weight() { return weight_; }
  Parameter<T>* bias() { return bias_ ? &*bias_ : nullptr; }
  void init_he(Rng& rng);

 private:
  std::size_t in_, out_;
  Parameter<T> weight_;
  std::optional<Parameter<T>> bias_;
  std::optional<Tensor<T>> input_;
  Dims input_dims_;
};

template <typename T>
Tensor<T> linear_forward(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>* bias);

// Inverted dropout: train mode zeroes each element with probability p and
// scales survivors by 1/(1-p); eval mode is the identity.
template <typename T>
class Dropout final : public Module<T> {
 public:
  Dropout(double p, std::uint64_t seed);

  Tensor<T> forward(const Tensor<T>& x, Mode mode) override;
  Tensor<T> backward(const Tensor<T>& upstream) override;
  std::string kind() const override { return "Dropout"; }

  double rate() const { return p_; }
  void reseed(std::uint64_t seed) { rng_ = Rng(seed); }

 private:
  double p_;
  Rng rng_;
  std::optional<std::vector<T>> mask_;
};

template <typename T>
struct CrossEntropy {
  T loss;
  Tensor<T> probs;
};

// Mean negative log-likelihood of max-shifted softmax.
template <typename T>
CrossEntropy<T> softmax_cross_entropy(const Tensor<T>& logits, std::span<const int> labels);

// d(mean loss)/d(logits) = (probs - onehot) / N.
template <typename T>
Tensor<T> softmax_cross_entropy_grad(const Tensor<T>& probs, std::span<const int> labels);

}  // namespace exqnet

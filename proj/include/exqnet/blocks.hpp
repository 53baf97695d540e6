#pragma once

#include <array>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "exqnet/layers.hpp"

namespace exqnet {

// Squeeze-and-excitation gate: s = sigmoid(expand(relu(reduce(gap(x))))),
// output = x * s broadcast over space. reduce/expand are 1x1 convolutions
// with bias on the pooled [N,C,1,1] tensor; the hidden width is floor(C / r).
template <typename T>
class SEBlock final : public Module<T> {
 public:
  SEBlock(std::size_t channels, std::size_t reduction);

  Tensor<T> forward(const Tensor<T>& x, Mode mode) override;
  Tensor<T> backward(const Tensor<T>& upstream) override;
  void register_into(Registry<T>& reg, const std::string& prefix) override;
  std::string kind() const override { return "SEBlock"; }
  void append_kink_pattern(std::vector<std::uint32_t>& out) const override {
    relu_.append_kink_pattern(out);
  }

  void init(Rng& rng);
  Conv2d<T>& reduce() { return reduce_; }
  Conv2d<T>& expand() { return expand_; }
  std::size_t channels() const { return channels_; }

  // Gate values [N,C,1,1] from the latest forward.
  const Tensor<T>& last_gate() const { return gate_values_; }
  std::size_t gate_calls() const { return gate_calls_; }

 private:
  std::size_t channels_;
  GlobalAvgPool<T> pool_;
  Conv2d<T> reduce_;
  Activation<T> relu_{ActivationKind::kRelu};
  Conv2d<T> expand_;
  Activation<T> gate_{ActivationKind::kSigmoid};

  std::optional<Tensor<T>> input_;
  Tensor<T> gate_values_;
  std::size_t gate_calls_ = 0;
};

enum class BranchOp { kDepthwise3x3, kPointwise, kBatchNorm, kRelu, kSqueezeExcite };

std::string to_string(BranchOp op);

// Residual branch of each DFSEB unit, applied in order before the skip add.
inline constexpr std::array kDfsebBranch = {
    BranchOp::kDepthwise3x3, BranchOp::kBatchNorm, BranchOp::kRelu,
    BranchOp::kPointwise,    BranchOp::kBatchNorm, BranchOp::kSqueezeExcite,
};

// v + branch(v); the branch never changes channel count or spatial size.
template <typename T>
class ResidualUnit final : public Module<T> {
 public:
  ResidualUnit(std::size_t channels, std::size_t se_reduction,
               std::span<const BranchOp> layout = kDfsebBranch);

  Tensor<T> forward(const Tensor<T>& x, Mode mode) override;
  Tensor<T> backward(const Tensor<T>& upstream) override;
  void register_into(Registry<T>& reg, const std::string& prefix) override;
  std::string kind() const override { return "ResidualUnit"; }
  void append_kink_pattern(std::vector<std::uint32_t>& out) const override {
    for (const auto& m : branch_) m->append_kink_pattern(out);
  }

  void init(Rng& rng);
  std::size_t residual_adds() const { return residual_adds_; }
  std::size_t se_gate_calls() const;
  std::span<const std::unique_ptr<Module<T>>> branch() const { return branch_; }

 private:
  std::size_t channels_;
  std::vector<std::unique_ptr<Module<T>>> branch_;
  std::vector<std::string> names_;
  std::size_t residual_adds_ = 0;
};

struct FusionCounts {
  std::size_t residual_adds = 0;
  std::size_t se_gates = 0;
};

// Double-fusion block: two residual units in sequence, shape preserving.
template <typename T>
class DFSEBBlock final : public Module<T> {
 public:
  DFSEBBlock(std::size_t channels, std::size_t se_reduction);

  Tensor<T> forward(const Tensor<T>& x, Mode mode) override;
  Tensor<T> backward(const Tensor<T>& upstream) override;
  void register_into(Registry<T>& reg, const std::string& prefix) override;
  std::string kind() const override { return "DFSEB"; }
  void append_kink_pattern(std::vector<std::uint32_t>& out) const override {
    first_.append_kink_pattern(out);
    second_.append_kink_pattern(out);
  }

  void init(Rng& rng);
  std::size_t channels() const { return channels_; }
  ResidualUnit<T>& unit(std::size_t i) { return i == 0 ? first_ : second_; }
  // Additions and sigmoid gatings performed by the latest forward call.
  FusionCounts last_forward_counts() const { return last_counts_; }

 private:
  std::size_t channels_;
  ResidualUnit<T> first_, second_;
  FusionCounts last_counts_;
};

// Max-feature expansion: maxpool(2,2) -> pointwise conv (no bias) -> BN.
template <typename T>
class MEBlock final : public Module<T> {
 public:
  MEBlock(std::size_t in_channels, std::size_t out_channels);

  Tensor<T> forward(const Tensor<T>& x, Mode mode) override;
  Tensor<T> backward(const Tensor<T>& upstream) override;
  void register_into(Registry<T>& reg, const std::string& prefix) override;
  std::string kind() const override { return "ME"; }
  void append_kink_pattern(std::vector<std::uint32_t>& out) const override {
    pool_.append_kink_pattern(out);
  }

  void init(Rng& rng);
  std::size_t in_channels() const { return in_; }
  std::size_t out_channels() const { return out_; }
  Conv2d<T>& conv() { return conv_; }
  BatchNorm2d<T>& bn() { return bn_; }

 private:
  std::size_t in_, out_;
  MaxPool2d<T> pool_{2, 2};
  Conv2d<T> conv_;
  BatchNorm2d<T> bn_;
};

}  // namespace exqnet

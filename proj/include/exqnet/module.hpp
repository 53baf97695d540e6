#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "exqnet/tensor.hpp"

namespace exqnet {

template <typename T>
struct Parameter {
  Tensor<T> value;
  Tensor<T> grad;

  Parameter() = default;
  explicit Parameter(Tensor<T> v) : value(std::move(v)), grad(value.dims()) {}
  void zero_grad() { grad.fill(T{0}); }
};

template <typename T>
struct NamedParameter {
  std::string name;
  Parameter<T>* param;
};

template <typename T>
struct NamedBuffer {
  std::string name;
  Tensor<T>* tensor;
};

// Flat, ordered view of every trainable tensor and persistent buffer of a
// module tree under stable dotted names.
template <typename T>
class Registry {
 public:
  void add(std::string name, Parameter<T>& p) { params_.push_back({std::move(name), &p}); }
  void add_buffer(std::string name, Tensor<T>& t) { buffers_.push_back({std::move(name), &t}); }

  const std::vector<NamedParameter<T>>& params() const { return params_; }
  const std::vector<NamedBuffer<T>>& buffers() const { return buffers_; }

  Parameter<T>* find(const std::string& name) const {
    for (const auto& p : params_) {
      if (p.name == name) return p.param;
    }
    return nullptr;
  }

  std::size_t param_elements() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.param->value.size();
    return n;
  }

 private:
  std::vector<NamedParameter<T>> params_;
  std::vector<NamedBuffer<T>> buffers_;
};

inline std::string join_name(const std::string& prefix, const std::string& leaf) {
  return prefix.empty() ? leaf : prefix + "." + leaf;
}

// A differentiable operator. forward() caches what backward() needs;
// backward() consumes that cache, accumulates parameter gradients and returns
// the gradient with respect to the forward input.
template <typename T>
class Module {
 public:
  Module() = default;
  Module(const Module&) = delete;
  Module& operator=(const Module&) = delete;
  virtual ~Module() = default;

  virtual Tensor<T> forward(const Tensor<T>& x, Mode mode) = 0;
  virtual Tensor<T> backward(const Tensor<T>& upstream) = 0;
  virtual void register_into(Registry<T>& /*reg*/, const std::string& /*prefix*/) {}
  virtual std::string kind() const = 0;

  // Appends which smooth piece the latest forward landed on (ReLU signs,
  // hard-swish segments, max-pool winners). Equal patterns mean no kink lies
  // between two inputs.
  virtual void append_kink_pattern(std::vector<std::uint32_t>& /*out*/) const {}
};

}  // namespace exqnet

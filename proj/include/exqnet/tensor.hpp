#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "exqnet/errors.hpp"

namespace exqnet {

using Dims = std::vector<std::size_t>;

std::string to_string(const Dims& dims);
std::size_t element_count(const Dims& dims);

enum class Mode { kTrain, kEval };

// Seeded pseudo-random source. Same seed, same sequence.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

  double uniform(double lo = 0.0, double hi = 1.0) {
    return std::uniform_real_distribution<double>(lo, hi)(engine_);
  }
  double normal(double mean = 0.0, double stddev = 1.0) {
    return std::normal_distribution<double>(mean, stddev)(engine_);
  }
  bool bernoulli(double p) { return uniform() < p; }
  std::uint64_t next() { return engine_(); }
  std::size_t below(std::size_t n) {
    return std::uniform_int_distribution<std::size_t>(0, n - 1)(engine_);
  }
  std::mt19937_64& engine() { return engine_; }

 private:
  std::mt19937_64 engine_;
};

// Dense row-major tensor of rank 1-4. Activations use N,C,H,W order.
template <typename T>
class Tensor {
  static_assert(std::is_floating_point_v<T>, "Tensor holds IEEE floats");

 public:
  using value_type = T;

  Tensor() = default;

  explicit Tensor(Dims dims, T fill = T{0}) : dims_(std::move(dims)) {
    validate_dims(dims_);
    data_.assign(element_count(dims_), fill);
  }

  Tensor(Dims dims, std::vector<T> data) : dims_(std::move(dims)), data_(std::move(data)) {
    validate_dims(dims_);
    if (data_.size() != element_count(dims_)) {
      throw ShapeError("tensor " + to_string(dims_) + " given " + std::to_string(data_.size()) +
                       " values");
    }
  }

  template <typename Gen>
    requires std::is_invocable_r_v<T, Gen>
  static Tensor generate(Dims dims, Gen&& gen) {
    Tensor t(std::move(dims));
    for (auto& v : t.data_) v = gen();
    return t;
  }

  static Tensor uniform(Dims dims, Rng& rng, double lo = -1.0, double hi = 1.0) {
    return generate(std::move(dims), [&] { return static_cast<T>(rng.uniform(lo, hi)); });
  }

  static Tensor normal(Dims dims, Rng& rng, double mean = 0.0, double stddev = 1.0) {
    return generate(std::move(dims), [&] { return static_cast<T>(rng.normal(mean, stddev)); });
  }

  const Dims& dims() const noexcept { return dims_; }
  std::size_t dim(std::size_t i) const { return dims_.at(i); }
  std::size_t rank() const noexcept { return dims_.size(); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  std::span<T> data() noexcept { return data_; }
  std::span<const T> data() const noexcept { return data_; }
  T* ptr() noexcept { return data_.data(); }
  const T* ptr() const noexcept { return data_.data(); }
  std::vector<T>& vec() noexcept { return data_; }
  const std::vector<T>& vec() const noexcept { return data_; }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  T& at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) {
    return data_[((n * dims_[1] + c) * dims_[2] + h) * dims_[3] + w];
  }
  const T& at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) const {
    return data_[((n * dims_[1] + c) * dims_[2] + h) * dims_[3] + w];
  }
  T& at(std::size_t r, std::size_t c) { return data_[r * dims_[1] + c]; }
  const T& at(std::size_t r, std::size_t c) const { return data_[r * dims_[1] + c]; }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  void reshape(Dims dims) {
    validate_dims(dims);
    if (element_count(dims) != data_.size()) {
      throw ShapeError("cannot reshape " + to_string(dims_) + " to " + to_string(dims));
    }
    dims_ = std::move(dims);
  }

  Tensor reshaped(Dims dims) const {
    Tensor t = *this;
    t.reshape(std::move(dims));
    return t;
  }

  template <typename U>
  Tensor<U> cast() const {
    std::vector<U> out(data_.begin(), data_.end());
    return Tensor<U>(dims_, std::move(out));
  }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
  }

  void check_finite(std::string_view where) const {
    if (!all_finite()) throw NumericError("non-finite value in " + std::string(where));
  }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.dims_ == b.dims_ && a.data_ == b.data_;
  }

 private:
  static void validate_dims(const Dims& dims) {
    if (dims.empty() || dims.size() > 4) {
      throw DimensionError("tensor rank must be 1-4, got " + std::to_string(dims.size()));
    }
    for (auto d : dims) {
      if (d == 0) throw DimensionError("zero dimension in " + to_string(dims));
    }
  }

  Dims dims_;
  std::vector<T> data_;
};

// Threads used by batch-parallel inference paths. 1 disables parallelism.
void set_num_threads(std::size_t n);
std::size_t num_threads();

// Runs fn(i) for i in [0, count). Work is split into contiguous chunks so each
// index is always handled by exactly one invocation.
void parallel_for(std::size_t count, const std::function<void(std::size_t)>& fn);

enum class Trans { kNo, kYes };

// C[m,n] (+)= op(A)[m,k] * op(B)[k,n]. Each output element accumulates over k
// in ascending order starting from zero (or from C when accumulate is set).
template <typename T>
void gemm(Trans trans_a, Trans trans_b, std::size_t m, std::size_t n, std::size_t k,
          const T* a, std::size_t lda, const T* b, std::size_t ldb, T* c, std::size_t ldc,
          bool accumulate);

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);

struct ConvGeometry {
  std::size_t channels = 1;
  std::size_t height = 1;
  std::size_t width = 1;
  std::size_t kernel_h = 1;
  std::size_t kernel_w = 1;
  std::size_t stride = 1;
  std::size_t pad = 0;

  std::size_t out_h() const { return (height + 2 * pad - kernel_h) / stride + 1; }
  std::size_t out_w() const { return (width + 2 * pad - kernel_w) / stride + 1; }
  std::size_t col_rows() const { return channels * kernel_h * kernel_w; }
  std::size_t col_cols() const { return out_h() * out_w(); }
  void validate() const;
};

// Lowers one C,H,W image into cols[C*kh*kw, Ho*Wo]; consecutive rows of cols
// are ld elements apart.
template <typename T>
void im2col_image(const T* image, const ConvGeometry& g, T* cols, std::size_t ld);

// Adjoint of im2col_image: scatters-and-adds columns back into the image.
template <typename T>
void col2im_image(const T* cols, std::size_t ld, const ConvGeometry& g, T* image);

// x[N,C,H,W] -> [C*kh*kw, N*Ho*Wo], column index n*Ho*Wo + oh*Wo + ow.
template <typename T>
Tensor<T> im2col(const Tensor<T>& x, std::size_t kernel_h, std::size_t kernel_w,
                 std::size_t stride, std::size_t pad);

// Sums overlapping contributions; output dims [batch, C, H, W] from g.
template <typename T>
Tensor<T> col2im(const Tensor<T>& cols, std::size_t batch, const ConvGeometry& g);

template <typename T>
T sum(const Tensor<T>& t) {
  return std::accumulate(t.vec().begin(), t.vec().end(), T{0});
}

template <typename T>
T dot(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.size() != b.size()) throw ShapeError("dot of mismatched sizes");
  return std::inner_product(a.vec().begin(), a.vec().end(), b.vec().begin(), T{0});
}

template <typename T>
T max_abs(const Tensor<T>& t) {
  T m{0};
  for (T v : t.data()) m = std::max(m, std::abs(v));
  return m;
}

}  // namespace exqnet

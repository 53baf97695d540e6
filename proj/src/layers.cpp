#include "exqnet/layers.hpp"

#include <cmath>
#include <limits>

namespace exqnet {

namespace {

template <typename T>
void require_rank4(const Tensor<T>& x, const char* op) {
  if (x.rank() != 4) {
    throw ShapeError(std::string(op) + " expects [N,C,H,W], got " + to_string(x.dims()));
  }
}

template <typename T>
void require_same_dims(const Tensor<T>& upstream, const Dims& expected, const char* op) {
  if (upstream.dims() != expected) {
    throw ShapeError(std::string(op) + " backward: upstream " + to_string(upstream.dims()) +
                     " != forward output " + to_string(expected));
  }
}

}  // namespace

// ---------------------------------------------------------------------------
// Conv2d

void ConvSpec::validate() const {
  if (in_channels == 0 || out_channels == 0 || kernel == 0 || stride == 0 || groups == 0) {
    throw ShapeError("conv channels, kernel, stride and groups must be >= 1");
  }
  if (in_channels % groups != 0 || out_channels % groups != 0) {
    throw ShapeError("conv channels " + std::to_string(in_channels) + "->" +
                     std::to_string(out_channels) + " not divisible by groups " +
                     std::to_string(groups));
  }
}

template <typename T>
Conv2d<T>::Conv2d(ConvSpec spec) : spec_(spec) {
  spec_.validate();
  weight_ = Parameter<T>(Tensor<T>(
      {spec_.out_channels, spec_.in_channels / spec_.groups, spec_.kernel, spec_.kernel}));
  if (spec_.bias) bias_.emplace(Tensor<T>({spec_.out_channels}));
}

template <typename T>
std::string Conv2d<T>::kind() const {
  if (spec_.depthwise() && spec_.kernel > 1) return "DepthwiseConv2d";
  if (spec_.pointwise()) return "PointwiseConv2d";
  return "Conv2d";
}

template <typename T>
void Conv2d<T>::init_he(Rng& rng) {
  const double fan_in = static_cast<double>(weight_.value.size() / spec_.out_channels);
  weight_.value = Tensor<T>::normal(weight_.value.dims(), rng, 0.0, std::sqrt(2.0 / fan_in));
  if (bias_) bias_->value.fill(T{0});
}

template <typename T>
void Conv2d<T>::register_into(Registry<T>& reg, const std::string& prefix) {
  reg.add(join_name(prefix, "weight"), weight_);
  if (bias_) reg.add(join_name(prefix, "bias"), *bias_);
}

template <typename T>
ConvGeometry Conv2d<T>::geometry(const Tensor<T>& x) const {
  require_rank4(x, "conv2d");
  if (x.dim(1) != spec_.in_channels) {
    throw ShapeError("conv2d expects " + std::to_string(spec_.in_channels) +
                     " input channels, got " + std::to_string(x.dim(1)));
  }
  ConvGeometry g{x.dim(1), x.dim(2), x.dim(3), spec_.kernel, spec_.kernel, spec_.stride,
                 spec_.pad};
  g.validate();
  return g;
}

template <typename T>
Tensor<T> Conv2d<T>::forward(const Tensor<T>& x, Mode mode) {
  const ConvGeometry g = geometry(x);
  const std::size_t batch = x.dim(0);
  const std::size_t spatial = g.col_cols();
  const std::size_t cin_g = spec_.in_channels / spec_.groups;
  const std::size_t cout_g = spec_.out_channels / spec_.groups;
  const std::size_t kk = spec_.kernel * spec_.kernel;
  const std::size_t image_size = g.channels * g.height * g.width;
  Tensor<T> y({batch, spec_.out_channels, g.out_h(), g.out_w()});

  auto run_image = [&](std::size_t n) {
    const T* image = x.ptr() + n * image_size;
    std::vector<T> scratch;
    const T* cols = image;
    if (!lowering_is_identity()) {
      scratch.resize(g.col_rows() * spatial);
      im2col_image(image, g, scratch.data(), spatial);
      cols = scratch.data();
    }
    T* out = y.ptr() + n * spec_.out_channels * spatial;
    for (std::size_t grp = 0; grp < spec_.groups; ++grp) {
      gemm(Trans::kNo, Trans::kNo, cout_g, spatial, cin_g * kk,
           weight_.value.ptr() + grp * cout_g * cin_g * kk, cin_g * kk,
           cols + grp * cin_g * kk * spatial, spatial, out + grp * cout_g * spatial, spatial,
           false);
    }
    if (bias_) {
      for (std::size_t c = 0; c < spec_.out_channels; ++c) {
        const T b = bias_->value[c];
        T* plane = out + c * spatial;
        for (std::size_t i = 0; i < spatial; ++i) plane[i] += b;
      }
    }
  };

  if (mode == Mode::kEval) {
    parallel_for(batch, run_image);
  } else {
    for (std::size_t n = 0; n < batch; ++n) run_image(n);
  }
  input_ = x;
  return y;
}

template <typename T>
Tensor<T> Conv2d<T>::backward(const Tensor<T>& upstream) {
  if (!input_) throw StateError("conv2d backward called before forward");
  const Tensor<T>& x = *input_;
  const ConvGeometry g = geometry(x);
  const std::size_t batch = x.dim(0);
  const std::size_t spatial = g.col_cols();
  require_same_dims(upstream, {batch, spec_.out_channels, g.out_h(), g.out_w()}, "conv2d");
  const std::size_t cin_g = spec_.in_channels / spec_.groups;
  const std::size_t cout_g = spec_.out_channels / spec_.groups;
  const std::size_t kk = spec_.kernel * spec_.kernel;
  const std::size_t image_size = g.channels * g.height * g.width;
  const std::size_t rows_g = cin_g * kk;

  Tensor<T> dx(x.dims());
  std::vector<T> cols_buf;
  std::vector<T> dcols_buf(lowering_is_identity() ? 0 : g.col_rows() * spatial);
  if (!lowering_is_identity()) cols_buf.resize(g.col_rows() * spatial);

  for (std::size_t n = 0; n < batch; ++n) {
    const T* image = x.ptr() + n * image_size;
    const T* cols = image;
    if (!lowering_is_identity()) {
      im2col_image(image, g, cols_buf.data(), spatial);
      cols = cols_buf.data();
    }
    const T* dy = upstream.ptr() + n * spec_.out_channels * spatial;
    T* dcols = lowering_is_identity() ? dx.ptr() + n * image_size : dcols_buf.data();
    for (std::size_t grp = 0; grp < spec_.groups; ++grp) {
      const T* dy_g = dy + grp * cout_g * spatial;
      gemm(Trans::kNo, Trans::kYes, cout_g, rows_g, spatial, dy_g, spatial,
           cols + grp * rows_g * spatial, spatial, weight_.grad.ptr() + grp * cout_g * rows_g,
           rows_g, true);
      gemm(Trans::kYes, Trans::kNo, rows_g, spatial, cout_g,
           weight_.value.ptr() + grp * cout_g * rows_g, rows_g, dy_g, spatial,
           dcols + grp * rows_g * spatial, spatial, false);
    }
    if (!lowering_is_identity()) {
      col2im_image(dcols, spatial, g, dx.ptr() + n * image_size);
    }
    if (bias_) {
      for (std::size_t c = 0; c < spec_.out_channels; ++c) {
        T acc{0};
        for (std::size_t i = 0; i < spatial; ++i) acc += dy[c * spatial + i];
        bias_->grad[c] += acc;
      }
    }
  }
  input_.reset();
  return dx;
}

// ---------------------------------------------------------------------------
// MaxPool2d

template <typename T>
MaxPoolResult<T> maxpool2d_forward(const Tensor<T>& x, std::size_t kernel, std::size_t stride) {
  require_rank4(x, "maxpool2d");
  if (kernel == 0 || stride == 0) throw ShapeError("maxpool kernel and stride must be >= 1");
  const std::size_t batch = x.dim(0), channels = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (h < kernel || w < kernel) {
    throw ShapeError("maxpool window " + std::to_string(kernel) + " exceeds input " +
                     std::to_string(h) + "x" + std::to_string(w));
  }
  const std::size_t oh = (h - kernel) / stride + 1, ow = (w - kernel) / stride + 1;
  MaxPoolResult<T> r{Tensor<T>({batch, channels, oh, ow}), {}};
  r.argmax.resize(r.output.size());
  std::size_t o = 0;
  for (std::size_t plane = 0; plane < batch * channels; ++plane) {
    const std::size_t base = plane * h * w;
    for (std::size_t y = 0; y < oh; ++y) {
      for (std::size_t xo = 0; xo < ow; ++xo, ++o) {
        std::size_t best = base + y * stride * w + xo * stride;
        for (std::size_t ky = 0; ky < kernel; ++ky) {
          for (std::size_t kx = 0; kx < kernel; ++kx) {
            const std::size_t idx = base + (y * stride + ky) * w + xo * stride + kx;
            if (x[idx] > x[best]) best = idx;
          }
        }
        r.output[o] = x[best];
        r.argmax[o] = best;
      }
    }
  }
  return r;
}

template <typename T>
Tensor<T> MaxPool2d<T>::forward(const Tensor<T>& x, Mode /*mode*/) {
  auto r = maxpool2d_forward(x, kernel_, stride_);
  input_dims_ = x.dims();
  argmax_ = std::move(r.argmax);
  cached_ = true;
  return std::move(r.output);
}

template <typename T>
Tensor<T> MaxPool2d<T>::backward(const Tensor<T>& upstream) {
  if (!cached_) throw StateError("maxpool backward called before forward");
  if (upstream.size() != argmax_.size()) {
    throw ShapeError("maxpool backward: upstream " + to_string(upstream.dims()) +
                     " does not match forward output");
  }
  Tensor<T> dx(input_dims_);
  for (std::size_t i = 0; i < argmax_.size(); ++i) dx[argmax_[i]] += upstream[i];
  cached_ = false;
  argmax_.clear();
  return dx;
}

// ---------------------------------------------------------------------------
// BatchNorm2d

template <typename T>
BatchNorm2d<T>::BatchNorm2d(std::size_t channels, double eps, double momentum)
    : channels_(channels),
      eps_(eps),
      momentum_(momentum),
      gamma_(Tensor<T>({channels}, T{1})),
      beta_(Tensor<T>({channels})),
      running_mean_({channels}, T{0}),
      running_var_({channels}, T{1}) {
  if (!(eps > 0.0)) throw ParameterError("batchnorm eps must be > 0");
  if (momentum < 0.0 || momentum > 1.0) throw ParameterError("batchnorm momentum not in [0,1]");
}

template <typename T>
void BatchNorm2d<T>::register_into(Registry<T>& reg, const std::string& prefix) {
  reg.add(join_name(prefix, "gamma"), gamma_);
  reg.add(join_name(prefix, "beta"), beta_);
  reg.add_buffer(join_name(prefix, "running_mean"), running_mean_);
  reg.add_buffer(join_name(prefix, "running_var"), running_var_);
}

template <typename T>
Tensor<T> BatchNorm2d<T>::forward(const Tensor<T>& x, Mode mode) {
  require_rank4(x, "batchnorm2d");
  if (x.dim(1) != channels_) {
    throw ShapeError("batchnorm2d expects " + std::to_string(channels_) + " channels, got " +
                     std::to_string(x.dim(1)));
  }
  const std::size_t batch = x.dim(0), spatial = x.dim(2) * x.dim(3);
  const std::size_t count = batch * spatial;
  if (mode == Mode::kTrain && count == 1) {
    throw DegenerateBatchError("batchnorm2d train mode needs more than one value per channel");
  }
  Tensor<T> y(x.dims());
  Tensor<T> xhat(x.dims());
  inv_std_.assign(channels_, T{0});

  for (std::size_t c = 0; c < channels_; ++c) {
    double mean, var;
    if (mode == Mode::kTrain) {
      double s = 0.0;
      for (std::size_t n = 0; n < batch; ++n) {
        const T* p = x.ptr() + (n * channels_ + c) * spatial;
        for (std::size_t i = 0; i < spatial; ++i) s += p[i];
      }
      mean = s / static_cast<double>(count);
      double sq = 0.0;
      for (std::size_t n = 0; n < batch; ++n) {
        const T* p = x.ptr() + (n * channels_ + c) * spatial;
        for (std::size_t i = 0; i < spatial; ++i) {
          const double d = p[i] - mean;
          sq += d * d;
        }
      }
      var = sq / static_cast<double>(count);
      const double unbiased = sq / static_cast<double>(count - 1);
      running_mean_[c] =
          static_cast<T>((1.0 - momentum_) * running_mean_[c] + momentum_ * mean);
      running_var_[c] =
          static_cast<T>((1.0 - momentum_) * running_var_[c] + momentum_ * unbiased);
    } else {
      mean = running_mean_[c];
      var = running_var_[c];
    }
    const T inv = static_cast<T>(1.0 / std::sqrt(var + eps_));
    const T m = static_cast<T>(mean);
    inv_std_[c] = inv;
    const T g = gamma_.value[c], b = beta_.value[c];
    for (std::size_t n = 0; n < batch; ++n) {
      const std::size_t off = (n * channels_ + c) * spatial;
      for (std::size_t i = 0; i < spatial; ++i) {
        const T xh = (x[off + i] - m) * inv;
        xhat[off + i] = xh;
        y[off + i] = g * xh + b;
      }
    }
  }
  cached_mode_ = mode;
  xhat_ = std::move(xhat);
  return y;
}

template <typename T>
Tensor<T> BatchNorm2d<T>::backward(const Tensor<T>& upstream) {
  if (!xhat_) throw StateError("batchnorm2d backward called before forward");
  const Tensor<T>& xhat = *xhat_;
  require_same_dims(upstream, xhat.dims(), "batchnorm2d");
  const std::size_t batch = xhat.dim(0), spatial = xhat.dim(2) * xhat.dim(3);
  const T count = static_cast<T>(batch * spatial);
  Tensor<T> dx(xhat.dims());
  for (std::size_t c = 0; c < channels_; ++c) {
    T sum_dy{0}, sum_dy_xhat{0};
    for (std::size_t n = 0; n < batch; ++n) {
      const std::size_t off = (n * channels_ + c) * spatial;
      for (std::size_t i = 0; i < spatial; ++i) {
        sum_dy += upstream[off + i];
        sum_dy_xhat += upstream[off + i] * xhat[off + i];
      }
    }
    gamma_.grad[c] += sum_dy_xhat;
    beta_.grad[c] += sum_dy;
    const T g = gamma_.value[c], inv = inv_std_[c];
    for (std::size_t n = 0; n < batch; ++n) {
      const std::size_t off = (n * channels_ + c) * spatial;
      for (std::size_t i = 0; i < spatial; ++i) {
        if (cached_mode_ == Mode::kTrain) {
          dx[off + i] = g * inv / count *
                        (count * upstream[off + i] - sum_dy - xhat[off + i] * sum_dy_xhat);
        } else {
          dx[off + i] = upstream[off + i] * g * inv;
        }
      }
    }
  }
  xhat_.reset();
  return dx;
}

// ---------------------------------------------------------------------------
// Activations

std::string to_string(ActivationKind kind) {
  switch (kind) {
    case ActivationKind::kRelu:
      return "ReLU";
    case ActivationKind::kHardSwish:
      return "HardSwish";
    case ActivationKind::kSigmoid:
      return "Sigmoid";
  }
  return "?";
}

template <typename T>
Tensor<T> activation_forward(const Tensor<T>& x, ActivationKind kind) {
  Tensor<T> y = x;
  for (T& v : y.data()) {
    switch (kind) {
      case ActivationKind::kRelu:
        v = relu(v);
        break;
      case ActivationKind::kHardSwish:
        v = hardswish(v);
        break;
      case ActivationKind::kSigmoid:
        v = sigmoid(v);
        break;
    }
  }
  return y;
}

template <typename T>
Tensor<T> Activation<T>::forward(const Tensor<T>& x, Mode /*mode*/) {
  Tensor<T> y = activation_forward(x, kind_);
  if (kind_ == ActivationKind::kSigmoid) {
    output_ = y;
  } else {
    input_ = x;
  }
  return y;
}

template <typename T>
void Activation<T>::append_kink_pattern(std::vector<std::uint32_t>& out) const {
  if (!input_) return;
  for (T v : input_->data()) {
    if (kind_ == ActivationKind::kRelu) {
      out.push_back(v > T{0});
    } else if (kind_ == ActivationKind::kHardSwish) {
      out.push_back(v <= T{-3} ? 0 : (v <= T{3} ? 1 : 2));
    }
  }
}

template <typename T>
Tensor<T> Activation<T>::backward(const Tensor<T>& upstream) {
  if (!input_ && !output_) throw StateError(to_string(kind_) + " backward called before forward");
  const Tensor<T>& saved = input_ ? *input_ : *output_;
  require_same_dims(upstream, saved.dims(), "activation");
  Tensor<T> dx(saved.dims());
  for (std::size_t i = 0; i < dx.size(); ++i) {
    const T v = saved[i];
    T d{0};
    switch (kind_) {
      case ActivationKind::kRelu:
        d = relu_grad(v);
        break;
      case ActivationKind::kHardSwish:
        d = hardswish_grad(v);
        break;
      case ActivationKind::kSigmoid:
        d = v * (T{1} - v);
        break;
    }
    dx[i] = upstream[i] * d;
  }
  input_.reset();
  output_.reset();
  return dx;
}

// ---------------------------------------------------------------------------
// Global average pooling

template <typename T>
Tensor<T> global_avgpool(const Tensor<T>& x) {
  require_rank4(x, "global_avgpool");
  const std::size_t planes = x.dim(0) * x.dim(1), spatial = x.dim(2) * x.dim(3);
  Tensor<T> y({x.dim(0), x.dim(1), 1, 1});
  for (std::size_t p = 0; p < planes; ++p) {
    T acc{0};
    for (std::size_t i = 0; i < spatial; ++i) acc += x[p * spatial + i];
    y[p] = acc / static_cast<T>(spatial);
  }
  return y;
}

template <typename T>
Tensor<T> GlobalAvgPool<T>::forward(const Tensor<T>& x, Mode /*mode*/) {
  Tensor<T> y = global_avgpool(x);
  input_dims_ = x.dims();
  cached_ = true;
  return y;
}

template <typename T>
Tensor<T> GlobalAvgPool<T>::backward(const Tensor<T>& upstream) {
  if (!cached_) throw StateError("global_avgpool backward called before forward");
  require_same_dims(upstream, {input_dims_[0], input_dims_[1], 1, 1}, "global_avgpool");
  const std::size_t spatial = input_dims_[2] * input_dims_[3];
  Tensor<T> dx(input_dims_);
  for (std::size_t p = 0; p < upstream.size(); ++p) {
    const T g = upstream[p] / static_cast<T>(spatial);
    std::fill_n(dx.ptr() + p * spatial, spatial, g);
  }
  cached_ = false;
  return dx;
}

// ---------------------------------------------------------------------------
// Linear

template <typename T>
Tensor<T> linear_forward(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>* bias) {
  if (x.rank() != 2 || weight.rank() != 2 || x.dim(1) != weight.dim(1)) {
    throw ShapeError("linear: input " + to_string(x.dims()) + " vs weight " +
                     to_string(weight.dims()));
  }
  const std::size_t batch = x.dim(0), in = x.dim(1), out = weight.dim(0);
  if (bias && (bias->rank() != 1 || bias->dim(0) != out)) {
    throw ShapeError("linear: bias " + to_string(bias->dims()) + " for " +
                     std::to_string(out) + " outputs");
  }
  Tensor<T> y({batch, out});
  gemm(Trans::kNo, Trans::kYes, batch, out, in, x.ptr(), in, weight.ptr(), in, y.ptr(), out,
       false);
  if (bias) {
    for (std::size_t n = 0; n < batch; ++n) {
      for (std::size_t k = 0; k < out; ++k) y.at(n, k) += (*bias)[k];
    }
  }
  return y;
}

template <typename T>
Linear<T>::Linear(std::size_t in_features, std::size_t out_features, bool bias)
    : in_(in_features), out_(out_features), weight_(Tensor<T>({out_features, in_features})) {
  if (bias) bias_.emplace(Tensor<T>({out_features}));
}

template <typename T>
void Linear<T>::init_he(Rng& rng) {
  weight_.value = Tensor<T>::normal(weight_.value.dims(), rng, 0.0,
                                    std::sqrt(2.0 / static_cast<double>(in_)));
  if (bias_) bias_->value.fill(T{0});
}

template <typename T>
void Linear<T>::register_into(Registry<T>& reg, const std::string& prefix) {
  reg.add(join_name(prefix, "weight"), weight_);
  if (bias_) reg.add(join_name(prefix, "bias"), *bias_);
}

template <typename T>
Tensor<T> Linear<T>::forward(const Tensor<T>& x, Mode /*mode*/) {
  Tensor<T> flat = x;
  if (x.rank() == 4 && x.dim(2) == 1 && x.dim(3) == 1) {
    flat.reshape({x.dim(0), x.dim(1)});
  }
  if (flat.rank() != 2 || flat.dim(1) != in_) {
    throw ShapeError("linear expects [N," + std::to_string(in_) + "], got " +
                     to_string(x.dims()));
  }
  Tensor<T> y = linear_forward(flat, weight_.value, bias_ ? &bias_->value : nullptr);
  input_dims_ = x.dims();
  input_ = std::move(flat);
  return y;
}

template <typename T>
Tensor<T> Linear<T>::backward(const Tensor<T>& upstream) {
  if (!input_) throw StateError("linear backward called before forward");
  const Tensor<T>& x = *input_;
  const std::size_t batch = x.dim(0);
  require_same_dims(upstream, {batch, out_}, "linear");
  gemm(Trans::kYes, Trans::kNo, out_, in_, batch, upstream.ptr(), out_, x.ptr(), in_,
       weight_.grad.ptr(), in_, true);
  if (bias_) {
    for (std::size_t n = 0; n < batch; ++n) {
      for (std::size_t k = 0; k < out_; ++k) bias_->grad[k] += upstream.at(n, k);
    }
  }
  Tensor<T> dx({batch, in_});
  gemm(Trans::kNo, Trans::kNo, batch, in_, out_, upstream.ptr(), out_, weight_.value.ptr(), in_,
       dx.ptr(), in_, false);
  dx.reshape(input_dims_);
  input_.reset();
  return dx;
}

// ---------------------------------------------------------------------------
// Dropout

template <typename T>
Dropout<T>::Dropout(double p, std::uint64_t seed) : p_(p), rng_(seed) {
  if (!(p >= 0.0 && p < 1.0)) throw ParameterError("dropout rate must be in [0,1)");
}

template <typename T>
Tensor<T> Dropout<T>::forward(const Tensor<T>& x, Mode mode) {
  std::vector<T> mask(x.size(), T{1});
  if (mode == Mode::kTrain && p_ > 0.0) {
    const T keep_scale = static_cast<T>(1.0 / (1.0 - p_));
    for (auto& m : mask) m = rng_.bernoulli(p_) ? T{0} : keep_scale;
  }
  Tensor<T> y = x;
  for (std::size_t i = 0; i < y.size(); ++i) y[i] *= mask[i];
  mask_ = std::move(mask);
  return y;
}

template <typename T>
Tensor<T> Dropout<T>::backward(const Tensor<T>& upstream) {
  if (!mask_) throw StateError("dropout backward called before forward");
  if (upstream.size() != mask_->size()) throw ShapeError("dropout backward: size mismatch");
  Tensor<T> dx = upstream;
  for (std::size_t i = 0; i < dx.size(); ++i) dx[i] *= (*mask_)[i];
  mask_.reset();
  return dx;
}

// ---------------------------------------------------------------------------
// Loss

template <typename T>
CrossEntropy<T> softmax_cross_entropy(const Tensor<T>& logits, std::span<const int> labels) {
  if (logits.rank() != 2) throw ShapeError("cross entropy expects [N,K] logits");
  const std::size_t batch = logits.dim(0), classes = logits.dim(1);
  if (labels.size() != batch) {
    throw ShapeError("cross entropy: " + std::to_string(labels.size()) + " labels for batch " +
                     std::to_string(batch));
  }
  CrossEntropy<T> r{T{0}, Tensor<T>(logits.dims())};
  double total = 0.0;
  for (std::size_t n = 0; n < batch; ++n) {
    const int label = labels[n];
    if (label < 0 || static_cast<std::size_t>(label) >= classes) {
      throw LabelError("label " + std::to_string(label) + " outside [0," +
                       std::to_string(classes) + ")");
    }
    const T* row = logits.ptr() + n * classes;
    const T* top = std::max_element(row, row + classes);
    const T mx = *top;
    // The max term is exactly 1; summing the rest keeps log1p accurate.
    double rest = 0.0;
    for (std::size_t k = 0; k < classes; ++k) {
      if (row + k != top) rest += std::exp(static_cast<double>(row[k] - mx));
    }
    const double log_z = std::log1p(rest);
    for (std::size_t k = 0; k < classes; ++k) {
      r.probs.at(n, k) = static_cast<T>(std::exp(static_cast<double>(row[k] - mx) - log_z));
    }
    total += log_z - static_cast<double>(row[label] - mx);
  }
  r.loss = static_cast<T>(total / static_cast<double>(batch));
  return r;
}

template <typename T>
Tensor<T> softmax_cross_entropy_grad(const Tensor<T>& probs, std::span<const int> labels) {
  const std::size_t batch = probs.dim(0), classes = probs.dim(1);
  if (labels.size() != batch) throw ShapeError("cross entropy grad: label count mismatch");
  Tensor<T> g = probs;
  const T scale = T{1} / static_cast<T>(batch);
  for (std::size_t n = 0; n < batch; ++n) {
    const int label = labels[n];
    if (label < 0 || static_cast<std::size_t>(label) >= classes) {
      throw LabelError("label " + std::to_string(label) + " out of range");
    }
    g.at(n, static_cast<std::size_t>(label)) -= T{1};
    for (std::size_t k = 0; k < classes; ++k) g.at(n, k) *= scale;
  }
  return g;
}

#define EXQNET_INSTANTIATE(T)                                                                 \
  template class Conv2d<T>;                                                                  \
  template class MaxPool2d<T>;                                                               \
  template class BatchNorm2d<T>;                                                             \
  template class Activation<T>;                                                              \
  template class GlobalAvgPool<T>;                                                           \
  template class Linear<T>;                                                                  \
  template class Dropout<T>;                                                                 \
  template MaxPoolResult<T> maxpool2d_forward<T>(const Tensor<T>&, std::size_t, std::size_t); \
  template Tensor<T> activation_forward<T>(const Tensor<T>&, ActivationKind);                \
  template Tensor<T> global_avgpool<T>(const Tensor<T>&);                                    \
  template Tensor<T> linear_forward<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>*); \
  template CrossEntropy<T> softmax_cross_entropy<T>(const Tensor<T>&, std::span<const int>); \
  template Tensor<T> softmax_cross_entropy_grad<T>(const Tensor<T>&, std::span<const int>);

EXQNET_INSTANTIATE(float)
EXQNET_INSTANTIATE(double)

}  // namespace exqnet

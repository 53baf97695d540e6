#include "exqnet/blocks.hpp"

namespace exqnet {

namespace {

template <typename T>
void require_channels(const Tensor<T>& x, std::size_t channels, const char* op) {
  if (x.rank() != 4 || x.dim(1) != channels) {
    throw ShapeError(std::string(op) + " expects [N," + std::to_string(channels) +
                     ",H,W], got " + to_string(x.dims()));
  }
}

// ---------------------------------------------------------------------------
// SE

std::size_t se_hidden_channels(std::size_t channels, std::size_t reduction) {
  if (reduction == 0 || channels < reduction) {
    throw ConfigError("SE reduction " + std::to_string(reduction) + " invalid for " +
                      std::to_string(channels) + " channels");
  }
  return channels / reduction;
}

}  // namespace

template <typename T>
SEBlock<T>::SEBlock(std::size_t channels, std::size_t reduction)
    : channels_(channels),
      reduce_(ConvSpec{channels, se_hidden_channels(channels, reduction), 1, 1, 0, 1, true}),
      expand_(ConvSpec{se_hidden_channels(channels, reduction), channels, 1, 1, 0, 1, true}) {}

template <typename T>
void SEBlock<T>::init(Rng& rng) {
  reduce_.init_he(rng);
  expand_.init_he(rng);
}

template <typename T>
void SEBlock<T>::register_into(Registry<T>& reg, const std::string& prefix) {
  reduce_.register_into(reg, join_name(prefix, "reduce"));
  expand_.register_into(reg, join_name(prefix, "expand"));
}

template <typename T>
Tensor<T> SEBlock<T>::forward(const Tensor<T>& x, Mode mode) {
  require_channels(x, channels_, "SE block");
  Tensor<T> s = pool_.forward(x, mode);
  s = reduce_.forward(s, mode);
  s = relu_.forward(s, mode);
  s = expand_.forward(s, mode);
  s = gate_.forward(s, mode);
  ++gate_calls_;

  const std::size_t spatial = x.dim(2) * x.dim(3);
  Tensor<T> y = x;
  for (std::size_t p = 0; p < s.size(); ++p) {
    T* plane = y.ptr() + p * spatial;
    for (std::size_t i = 0; i < spatial; ++i) plane[i] *= s[p];
  }
  gate_values_ = std::move(s);
  input_ = x;
  return y;
}

template <typename T>
Tensor<T> SEBlock<T>::backward(const Tensor<T>& upstream) {
  if (!input_) throw StateError("SE block backward called before forward");
  const Tensor<T>& x = *input_;
  if (upstream.dims() != x.dims()) throw ShapeError("SE block backward: upstream shape mismatch");
  const std::size_t spatial = x.dim(2) * x.dim(3);
  Tensor<T> dx(x.dims());
  Tensor<T> dgate(gate_values_.dims());
  for (std::size_t p = 0; p < gate_values_.size(); ++p) {
    const T* dy = upstream.ptr() + p * spatial;
    const T* xp = x.ptr() + p * spatial;
    T* out = dx.ptr() + p * spatial;
    const T s = gate_values_[p];
    T acc{0};
    for (std::size_t i = 0; i < spatial; ++i) {
      acc += dy[i] * xp[i];
      out[i] = dy[i] * s;
    }
    dgate[p] = acc;
  }
  Tensor<T> d = gate_.backward(dgate);
  d = expand_.backward(d);
  d = relu_.backward(d);
  d = reduce_.backward(d);
  d = pool_.backward(d);
  for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += d[i];
  input_.reset();
  return dx;
}

// ---------------------------------------------------------------------------
// Residual unit

std::string to_string(BranchOp op) {
  switch (op) {
    case BranchOp::kDepthwise3x3:
      return "dw";
    case BranchOp::kPointwise:
      return "pw";
    case BranchOp::kBatchNorm:
      return "bn";
    case BranchOp::kRelu:
      return "relu";
    case BranchOp::kSqueezeExcite:
      return "se";
  }
  return "?";
}

template <typename T>
ResidualUnit<T>::ResidualUnit(std::size_t channels, std::size_t se_reduction,
                              std::span<const BranchOp> layout)
    : channels_(channels) {
  std::array<std::size_t, 5> seen{};
  for (BranchOp op : layout) {
    const auto idx = static_cast<std::size_t>(op);
    names_.push_back(to_string(op) + std::to_string(++seen[idx]));
    switch (op) {
      case BranchOp::kDepthwise3x3:
        branch_.push_back(std::make_unique<Conv2d<T>>(
            ConvSpec{channels, channels, 3, 1, 1, channels, false}));
        break;
      case BranchOp::kPointwise:
        branch_.push_back(
            std::make_unique<Conv2d<T>>(ConvSpec{channels, channels, 1, 1, 0, 1, false}));
        break;
      case BranchOp::kBatchNorm:
        branch_.push_back(std::make_unique<BatchNorm2d<T>>(channels));
        break;
      case BranchOp::kRelu:
        branch_.push_back(std::make_unique<Activation<T>>(ActivationKind::kRelu));
        break;
      case BranchOp::kSqueezeExcite:
        branch_.push_back(std::make_unique<SEBlock<T>>(channels, se_reduction));
        break;
    }
  }
}

template <typename T>
void ResidualUnit<T>::init(Rng& rng) {
  for (auto& m : branch_) {
    if (auto* conv = dynamic_cast<Conv2d<T>*>(m.get())) conv->init_he(rng);
    if (auto* se = dynamic_cast<SEBlock<T>*>(m.get())) se->init(rng);
  }
}

template <typename T>
void ResidualUnit<T>::register_into(Registry<T>& reg, const std::string& prefix) {
  for (std::size_t i = 0; i < branch_.size(); ++i) {
    branch_[i]->register_into(reg, join_name(prefix, names_[i]));
  }
}

template <typename T>
std::size_t ResidualUnit<T>::se_gate_calls() const {
  std::size_t n = 0;
  for (const auto& m : branch_) {
    if (const auto* se = dynamic_cast<const SEBlock<T>*>(m.get())) n += se->gate_calls();
  }
  return n;
}

template <typename T>
Tensor<T> ResidualUnit<T>::forward(const Tensor<T>& x, Mode mode) {
  require_channels(x, channels_, "residual unit");
  Tensor<T> h = x;
  for (auto& m : branch_) h = m->forward(h, mode);
  if (h.dims() != x.dims()) throw ShapeError("residual branch changed shape");
  for (std::size_t i = 0; i < h.size(); ++i) h[i] += x[i];
  ++residual_adds_;
  return h;
}

template <typename T>
Tensor<T> ResidualUnit<T>::backward(const Tensor<T>& upstream) {
  Tensor<T> d = upstream;
  for (auto it = branch_.rbegin(); it != branch_.rend(); ++it) d = (*it)->backward(d);
  for (std::size_t i = 0; i < d.size(); ++i) d[i] += upstream[i];
  return d;
}

// ---------------------------------------------------------------------------
// DFSEB

template <typename T>
DFSEBBlock<T>::DFSEBBlock(std::size_t channels, std::size_t se_reduction)
    : channels_(channels), first_(channels, se_reduction), second_(channels, se_reduction) {}

template <typename T>
void DFSEBBlock<T>::init(Rng& rng) {
  first_.init(rng);
  second_.init(rng);
}

template <typename T>
void DFSEBBlock<T>::register_into(Registry<T>& reg, const std::string& prefix) {
  first_.register_into(reg, join_name(prefix, "unit1"));
  second_.register_into(reg, join_name(prefix, "unit2"));
}

template <typename T>
Tensor<T> DFSEBBlock<T>::forward(const Tensor<T>& x, Mode mode) {
  require_channels(x, channels_, "DFSEB");
  const std::size_t adds0 = first_.residual_adds() + second_.residual_adds();
  const std::size_t gates0 = first_.se_gate_calls() + second_.se_gate_calls();
  Tensor<T> y = second_.forward(first_.forward(x, mode), mode);
  last_counts_.residual_adds = first_.residual_adds() + second_.residual_adds() - adds0;
  last_counts_.se_gates = first_.se_gate_calls() + second_.se_gate_calls() - gates0;
  return y;
}

template <typename T>
Tensor<T> DFSEBBlock<T>::backward(const Tensor<T>& upstream) {
  return first_.backward(second_.backward(upstream));
}

// ---------------------------------------------------------------------------
// ME

template <typename T>
MEBlock<T>::MEBlock(std::size_t in_channels, std::size_t out_channels)
    : in_(in_channels),
      out_(out_channels),
      conv_(ConvSpec{in_channels, out_channels, 1, 1, 0, 1, false}),
      bn_(out_channels) {}

template <typename T>
void MEBlock<T>::init(Rng& rng) {
  conv_.init_he(rng);
}

template <typename T>
void MEBlock<T>::register_into(Registry<T>& reg, const std::string& prefix) {
  conv_.register_into(reg, join_name(prefix, "conv"));
  bn_.register_into(reg, join_name(prefix, "bn"));
}

template <typename T>
Tensor<T> MEBlock<T>::forward(const Tensor<T>& x, Mode mode) {
  require_channels(x, in_, "ME block");
  if (x.dim(2) < 2 || x.dim(3) < 2 || x.dim(2) % 2 != 0 || x.dim(3) % 2 != 0) {
    throw ShapeError("ME block needs even spatial dims >= 2, got " + to_string(x.dims()));
  }
  return bn_.forward(conv_.forward(pool_.forward(x, mode), mode), mode);
}

template <typename T>
Tensor<T> MEBlock<T>::backward(const Tensor<T>& upstream) {
  return pool_.backward(conv_.backward(bn_.backward(upstream)));
}

template class SEBlock<float>;
template class SEBlock<double>;
template class ResidualUnit<float>;
template class ResidualUnit<double>;
template class DFSEBBlock<float>;
template class DFSEBBlock<double>;
template class MEBlock<float>;
template class MEBlock<double>;

}  // namespace exqnet

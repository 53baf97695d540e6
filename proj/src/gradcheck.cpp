#include "exqnet/gradcheck.hpp"

#include <cmath>
#include <memory>
#include <optional>

#include "exqnet/blocks.hpp"
#include "exqnet/layers.hpp"
#include "exqnet/model.hpp"

namespace exqnet {

GradCheckResult check_gradients(const std::string& name, const GradProbe& probe,
                                std::vector<CheckedTensor> tensors, Rng& rng,
                                const GradCheckOptions& options) {
  const double h = options.step;
  GradCheckResult result;
  result.name = name;
  bool every_tensor_checked = true;

  probe.loss();
  const std::vector<std::uint32_t> base = probe.pattern();

  for (CheckedTensor& ct : tensors) {
    Tensor<double>& x = *ct.value;
    if (x.dims() != ct.analytic.dims()) {
      throw ShapeError(name + "/" + ct.name + ": gradient dims differ from value dims");
    }
    std::vector<std::size_t> order(x.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
    const std::size_t want = std::min(options.samples, x.size());

    double max_diff = 0.0, max_numeric = 0.0;
    std::size_t accepted = 0;
    for (std::size_t k = 0; k < order.size() && accepted < want; ++k) {
      const std::size_t i = order[k];
      const double v = x[i];
      // A kink closer than h: shrink the step before giving up on the coordinate.
      std::optional<double> numeric;
      double step = h;
      for (int shrink = 0; shrink < 3 && !numeric; ++shrink, step *= 0.1) {
        x[i] = v + step;
        const double up = probe.loss();
        const bool smooth_up = probe.pattern() == base;
        x[i] = v - step;
        const double down = probe.loss();
        const bool smooth_down = probe.pattern() == base;
        x[i] = v;
        if (smooth_up && smooth_down) numeric = (up - down) / (2.0 * step);
      }
      if (!numeric) {
        ++result.resampled;
        continue;
      }
      max_diff = std::max(max_diff, std::abs(ct.analytic[i] - *numeric));
      max_numeric = std::max(max_numeric, std::abs(*numeric));
      ++accepted;
    }
    if (accepted == 0) every_tensor_checked = false;
    result.coordinates += accepted;
    const double scale = std::max(max_abs(ct.analytic), max_numeric);
    const double rel = scale > 0.0 ? max_diff / scale : max_diff;
    result.max_rel_error = std::max(result.max_rel_error, rel);
  }
  result.passed = every_tensor_checked && result.max_rel_error < options.tolerance;
  return result;
}

namespace {

using D = double;

std::vector<CheckedTensor> parameter_tensors(const Registry<D>& reg) {
  std::vector<CheckedTensor> out;
  for (const auto& np : reg.params()) out.push_back({np.name, &np.param->value, np.param->grad});
  return out;
}

// loss = <module(x), R>
GradCheckResult check_module(const std::string& name, Module<D>& module, Tensor<D> x, Mode mode,
                             Rng& rng, const GradCheckOptions& options,
                             const std::function<void()>& before_forward = {}) {
  Registry<D> reg;
  module.register_into(reg, "");
  auto run = [&] {
    if (before_forward) before_forward();
    return module.forward(x, mode);
  };
  const Tensor<D> weights = Tensor<D>::normal(run().dims(), rng);

  for (const auto& np : reg.params()) np.param->zero_grad();
  run();
  Tensor<D> dx = module.backward(weights);

  std::vector<CheckedTensor> tensors{{"input", &x, dx}};
  for (auto& t : parameter_tensors(reg)) tensors.push_back(std::move(t));

  GradProbe probe{[&] { return dot(run(), weights); },
                  [&] {
                    std::vector<std::uint32_t> p;
                    module.append_kink_pattern(p);
                    return p;
                  }};
  return check_gradients(name, probe, std::move(tensors), rng, options);
}

void randomize_batchnorm(BatchNorm2d<D>& bn, Rng& rng) {
  for (D& g : bn.gamma().value.data()) g = rng.uniform(0.5, 1.5);
  for (D& b : bn.beta().value.data()) b = rng.normal(0.0, 0.2);
  for (D& m : bn.running_mean().data()) m = rng.normal(0.0, 0.5);
  for (D& v : bn.running_var().data()) v = rng.uniform(0.5, 1.5);
}

GradCheckResult check_conv(const std::string& name, ConvSpec spec, Dims input, Rng& rng,
                           const GradCheckOptions& options) {
  Conv2d<D> conv(spec);
  conv.init_he(rng);
  if (auto* b = conv.bias()) {
    for (D& v : b->value.data()) v = rng.normal(0.0, 0.5);
  }
  return check_module(name, conv, Tensor<D>::normal(std::move(input), rng), Mode::kTrain, rng,
                      options);
}

// Distinct values at least 0.05 apart so no window winner is near a tie.
Tensor<D> spaced_values(Dims dims, Rng& rng) {
  Tensor<D> t(std::move(dims));
  std::vector<std::size_t> order(t.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = 0.05 * static_cast<D>(order[i]) - 1.0;
  return t;
}

GradCheckResult check_cross_entropy(Rng& rng, const GradCheckOptions& options) {
  Tensor<D> logits = Tensor<D>::normal({3, 5}, rng, 0.0, 2.0);
  std::vector<int> labels(3);
  for (int& l : labels) l = static_cast<int>(rng.below(5));
  const auto ce = softmax_cross_entropy(logits, std::span<const int>(labels));
  GradProbe probe{[&] { return softmax_cross_entropy(logits, std::span<const int>(labels)).loss; },
                  [] { return std::vector<std::uint32_t>{}; }};
  return check_gradients("cross_entropy", probe,
                         {{"logits", &logits, softmax_cross_entropy_grad(ce.probs, std::span<const int>(labels))}},
                         rng, options);
}

GradCheckResult check_model(std::uint64_t seed, Rng& rng, const GradCheckOptions& options) {
  ModelConfig cfg = ModelConfig::micro(4);
  cfg.resolution = options.model_resolution;
  auto model = ExquisiteNet<D>::build(cfg, seed);
  Tensor<D> x = Tensor<D>::normal({options.model_batch, 3, cfg.resolution, cfg.resolution}, rng);
  std::vector<int> labels(options.model_batch);
  for (int& l : labels) l = static_cast<int>(rng.below(cfg.classes));
  const std::uint64_t dropout_seed = rng.next();

  auto run = [&] {
    model.reseed_dropout(dropout_seed);
    return model.forward(x, Mode::kTrain);
  };
  model.zero_grad();
  const auto ce = softmax_cross_entropy(run(), std::span<const int>(labels));
  Tensor<D> dx = model.backward(softmax_cross_entropy_grad(ce.probs, std::span<const int>(labels)));

  std::vector<CheckedTensor> tensors{{"input", &x, dx}};
  for (auto& t : parameter_tensors(model.registry())) tensors.push_back(std::move(t));
  GradProbe probe{[&] { return softmax_cross_entropy(run(), std::span<const int>(labels)).loss; },
                  [&] { return model.kink_pattern(); }};
  return check_gradients("micro_model", probe, std::move(tensors), rng, options);
}

}  // namespace

std::vector<GradCheckResult> gradcheck_suite(std::uint64_t seed, const GradCheckOptions& options) {
  Rng rng(seed);
  std::vector<GradCheckResult> results;

  results.push_back(check_conv("conv3x3", {3, 4, 3, 1, 1, 1, true}, {2, 3, 6, 6}, rng, options));
  results.push_back(check_conv("conv3x3_stride2", {3, 4, 3, 2, 1, 1, false}, {2, 3, 7, 7}, rng, options));
  results.push_back(check_conv("conv_depthwise", {4, 4, 3, 1, 1, 4, false}, {2, 4, 5, 5}, rng, options));
  results.push_back(check_conv("conv_pointwise", {4, 6, 1, 1, 0, 1, true}, {2, 4, 5, 5}, rng, options));
  results.push_back(check_conv("conv_grouped", {4, 6, 3, 1, 0, 2, true}, {2, 4, 5, 5}, rng, options));

  {
    MaxPool2d<D> pool(2, 2);
    results.push_back(check_module("maxpool", pool, spaced_values({2, 3, 6, 6}, rng), Mode::kTrain,
                                   rng, options));
  }
  for (Mode mode : {Mode::kTrain, Mode::kEval}) {
    BatchNorm2d<D> bn(3);
    randomize_batchnorm(bn, rng);
    const Tensor<D> running_mean = bn.running_mean(), running_var = bn.running_var();
    // Train-mode forwards move the running statistics; restore them so every
    // evaluation sees the same function.
    auto reset = [&] {
      bn.running_mean() = running_mean;
      bn.running_var() = running_var;
    };
    results.push_back(check_module(mode == Mode::kTrain ? "batchnorm_train" : "batchnorm_eval", bn,
                                   Tensor<D>::normal({2, 3, 4, 4}, rng, 0.5, 2.0), mode, rng,
                                   options, reset));
  }
  for (ActivationKind kind : {ActivationKind::kRelu, ActivationKind::kHardSwish, ActivationKind::kSigmoid}) {
    Activation<D> act(kind);
    results.push_back(check_module(to_string(kind), act, Tensor<D>::normal({2, 3, 4, 4}, rng, 0.0, 3.0),
                                   Mode::kTrain, rng, options));
  }
  {
    GlobalAvgPool<D> gap;
    results.push_back(check_module("global_avgpool", gap, Tensor<D>::normal({2, 3, 4, 5}, rng),
                                   Mode::kTrain, rng, options));
  }
  {
    Linear<D> fc(6, 4);
    fc.init_he(rng);
    for (D& b : fc.bias()->value.data()) b = rng.normal();
    results.push_back(check_module("linear", fc, Tensor<D>::normal({3, 6, 1, 1}, rng), Mode::kTrain,
                                   rng, options));
  }
  {
    const std::uint64_t mask_seed = rng.next();
    Dropout<D> drop(0.3, mask_seed);
    results.push_back(check_module("dropout", drop, Tensor<D>::normal({2, 3, 4, 4}, rng),
                                   Mode::kTrain, rng, options, [&] { drop.reseed(mask_seed); }));
  }
  results.push_back(check_cross_entropy(rng, options));
  {
    SEBlock<D> se(8, 4);
    se.init(rng);
    results.push_back(check_module("se_block", se, Tensor<D>::normal({2, 8, 4, 4}, rng),
                                   Mode::kTrain, rng, options));
  }
  {
    ResidualUnit<D> unit(8, 4);
    unit.init(rng);
    results.push_back(check_module("residual_unit", unit, Tensor<D>::normal({2, 8, 5, 5}, rng),
                                   Mode::kTrain, rng, options));
  }
  {
    DFSEBBlock<D> block(8, 4);
    block.init(rng);
    results.push_back(check_module("dfseb_block", block, Tensor<D>::normal({2, 8, 5, 5}, rng),
                                   Mode::kTrain, rng, options));
  }
  {
    MEBlock<D> block(4, 8);
    block.init(rng);
    results.push_back(check_module("me_block", block, spaced_values({2, 4, 6, 6}, rng),
                                   Mode::kTrain, rng, options));
  }
  results.push_back(check_model(seed, rng, options));
  return results;
}

}  // namespace exqnet

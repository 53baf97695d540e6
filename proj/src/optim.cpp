#include "exqnet/optim.hpp"

#include <cmath>

namespace exqnet {

template <typename T>
Tensor<T> centralize_gradient(const Tensor<T>& grad) {
  Tensor<T> g = grad;
  if (g.rank() < 2) return g;
  const std::size_t slices = g.dim(0);
  const std::size_t per = g.size() / slices;
  for (std::size_t s = 0; s < slices; ++s) {
    T* p = g.ptr() + s * per;
    double mean = 0.0;
    for (std::size_t i = 0; i < per; ++i) mean += p[i];
    mean /= static_cast<double>(per);
    for (std::size_t i = 0; i < per; ++i) p[i] = static_cast<T>(p[i] - mean);
  }
  return g;
}

double radam_rho_inf(double beta2) { return 2.0 / (1.0 - beta2) - 1.0; }

double radam_rho(std::int64_t step, double beta2) {
  const double bt = std::pow(beta2, static_cast<double>(step));
  return radam_rho_inf(beta2) - 2.0 * static_cast<double>(step) * bt / (1.0 - bt);
}

double radam_rectifier(double rho, double rho_inf) {
  return std::sqrt(((rho - 4.0) * (rho - 2.0) * rho_inf) / ((rho_inf - 4.0) * (rho_inf - 2.0) * rho));
}

template <typename T>
void lookahead_sync(std::span<T> fast, std::span<T> slow, double alpha) {
  if (fast.size() != slow.size()) throw ShapeError("lookahead: fast/slow size mismatch");
  for (std::size_t i = 0; i < fast.size(); ++i) {
    slow[i] = static_cast<T>(slow[i] + alpha * (fast[i] - slow[i]));
    fast[i] = slow[i];
  }
}

OptimConfig OptimConfig::sgd(double lr) {
  OptimConfig c;
  c.rule = UpdateRule::kSgd;
  c.lr = lr;
  return c;
}

OptimConfig OptimConfig::adam(double lr) {
  OptimConfig c;
  c.rule = UpdateRule::kAdam;
  c.lr = lr;
  return c;
}

OptimConfig OptimConfig::radam(double lr) {
  OptimConfig c;
  c.rule = UpdateRule::kRAdam;
  c.lr = lr;
  return c;
}

OptimConfig OptimConfig::ranger(double lr) {
  OptimConfig c = radam(lr);
  c.centralize = true;
  c.lookahead = true;
  return c;
}

OptimConfig OptimConfig::named(const std::string& name, double lr) {
  if (name == "sgd") return sgd(lr);
  if (name == "adam") return adam(lr);
  if (name == "radam") return radam(lr);
  if (name == "ranger") return ranger(lr);
  throw ConfigError("unknown optimizer '" + name + "' (sgd|adam|radam|ranger)");
}

void OptimConfig::validate() const {
  if (!(lr > 0.0)) throw ParameterError("learning rate must be > 0");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) {
    throw ParameterError("betas must be in [0,1)");
  }
  if (!(eps > 0.0)) throw ParameterError("eps must be > 0");
  if (lookahead && (lookahead_k == 0 || !(lookahead_alpha > 0.0 && lookahead_alpha <= 1.0))) {
    throw ParameterError("lookahead needs k >= 1 and 0 < alpha <= 1");
  }
}

template <typename T>
Optimizer<T>::Optimizer(std::vector<Parameter<T>*> params, OptimConfig config)
    : config_(config) {
  config_.validate();
  for (Parameter<T>* p : params) {
    Slot s{p, {}, {}, {}};
    if (config_.rule != UpdateRule::kSgd || config_.momentum != 0.0) {
      s.m.assign(p->value.size(), T{0});
    }
    if (config_.rule != UpdateRule::kSgd) s.v.assign(p->value.size(), T{0});
    if (config_.lookahead) s.slow = p->value.vec();
    slots_.push_back(std::move(s));
  }
}

template <typename T>
Optimizer<T>::Optimizer(const Registry<T>& registry, OptimConfig config)
    : Optimizer(
          [&] {
            std::vector<Parameter<T>*> ps;
            for (const auto& np : registry.params()) ps.push_back(np.param);
            return ps;
          }(),
          config) {}

template <typename T>
void Optimizer<T>::step() {
  for (const Slot& s : slots_) {
    if (s.param->grad.dims() != s.param->value.dims()) {
      throw ShapeError("gradient dims differ from parameter dims");
    }
    s.param->grad.check_finite("gradient");
  }
  ++step_;
  const double lr = config_.lr;
  const double b1 = config_.beta1, b2 = config_.beta2;
  const double bc1 = 1.0 - std::pow(b1, static_cast<double>(step_));
  const double bc2 = 1.0 - std::pow(b2, static_cast<double>(step_));

  bool rectified = config_.rule == UpdateRule::kAdam;
  double rect = 1.0;
  if (config_.rule == UpdateRule::kRAdam) {
    const double rho_inf = radam_rho_inf(b2);
    const double rho = radam_rho(step_, b2);
    rectified = rho > 4.0;
    if (rectified) rect = radam_rectifier(rho, rho_inf);
  }

  for (Slot& s : slots_) {
    Tensor<T> g = config_.centralize ? centralize_gradient(s.param->grad) : s.param->grad;
    T* w = s.param->value.ptr();
    const std::size_t n = g.size();
    switch (config_.rule) {
      case UpdateRule::kSgd:
        for (std::size_t i = 0; i < n; ++i) {
          double d = g[i];
          if (!s.m.empty()) {
            s.m[i] = static_cast<T>(config_.momentum * s.m[i] + g[i]);
            d = s.m[i];
          }
          w[i] = static_cast<T>(w[i] - lr * d);
        }
        break;
      case UpdateRule::kAdam:
      case UpdateRule::kRAdam:
        for (std::size_t i = 0; i < n; ++i) {
          const double gi = g[i];
          s.m[i] = static_cast<T>(b1 * s.m[i] + (1.0 - b1) * gi);
          s.v[i] = static_cast<T>(b2 * s.v[i] + (1.0 - b2) * gi * gi);
          const double m_hat = s.m[i] / bc1;
          if (rectified) {
            const double denom = std::sqrt(s.v[i] / bc2) + config_.eps;
            w[i] = static_cast<T>(w[i] - lr * rect * m_hat / denom);
          } else {
            w[i] = static_cast<T>(w[i] - lr * m_hat);
          }
        }
        break;
    }
  }

  last_rectified_ = config_.rule != UpdateRule::kSgd && rectified;
  if (last_rectified_) ++rectified_steps_;
  last_synced_ = false;
  if (config_.lookahead &&
      step_ % static_cast<std::int64_t>(config_.lookahead_k) == 0) {
    for (Slot& s : slots_) {
      lookahead_sync<T>(s.param->value.data(), s.slow, config_.lookahead_alpha);
    }
    last_synced_ = true;
    ++sync_count_;
  }
}

template Tensor<float> centralize_gradient<float>(const Tensor<float>&);
template Tensor<double> centralize_gradient<double>(const Tensor<double>&);
template void lookahead_sync<float>(std::span<float>, std::span<float>, double);
template void lookahead_sync<double>(std::span<double>, std::span<double>, double);
template class Optimizer<float>;
template class Optimizer<double>;

}  // namespace exqnet

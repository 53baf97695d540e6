#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <string>

#include <unistd.h>

#include "exqnet/layers.hpp"
#include "exqnet/tensor.hpp"

namespace exqnet::support {

// Nested-loop grouped cross-correlation. Accumulates in the same
// (channel, ky, kx) order as the lowered kernel so results compare exactly.
template <typename T>
Tensor<T> direct_conv(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>* bias,
                      std::size_t stride, std::size_t pad, std::size_t groups) {
  const std::size_t n_ = x.dim(0), cin = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const std::size_t cout = w.dim(0), k = w.dim(2);
  const std::size_t cin_g = cin / groups, cout_g = cout / groups;
  const std::size_t ho = (h + 2 * pad - k) / stride + 1, wo = (wd + 2 * pad - k) / stride + 1;
  Tensor<T> y({n_, cout, ho, wo});
  for (std::size_t n = 0; n < n_; ++n)
    for (std::size_t co = 0; co < cout; ++co) {
      const std::size_t g = co / cout_g;
      for (std::size_t oy = 0; oy < ho; ++oy)
        for (std::size_t ox = 0; ox < wo; ++ox) {
          T acc{0};
          for (std::size_t ci = 0; ci < cin_g; ++ci)
            for (std::size_t ky = 0; ky < k; ++ky)
              for (std::size_t kx = 0; kx < k; ++kx) {
                const long iy = static_cast<long>(oy * stride + ky) - static_cast<long>(pad);
                const long ix = static_cast<long>(ox * stride + kx) - static_cast<long>(pad);
                T v{0};
                if (iy >= 0 && ix >= 0 && iy < static_cast<long>(h) && ix < static_cast<long>(wd)) {
                  v = x.at(n, g * cin_g + ci, static_cast<std::size_t>(iy),
                           static_cast<std::size_t>(ix));
                }
                acc += w.at(co, ci, ky, kx) * v;
              }
          if (bias) acc += (*bias)[co];
          y.at(n, co, oy, ox) = acc;
        }
    }
  return y;
}

template <typename T>
double max_rel_diff(const Tensor<T>& a, const Tensor<T>& b) {
  double num = 0.0, den = 1e-30;
  for (std::size_t i = 0; i < a.size(); ++i) {
    num = std::max(num, std::abs(static_cast<double>(a[i]) - static_cast<double>(b[i])));
    den = std::max({den, std::abs(static_cast<double>(a[i])), std::abs(static_cast<double>(b[i]))});
  }
  return num / den;
}

// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    path_ = std::filesystem::temp_directory_path() /
            ("exqnet_" + tag + "_" + std::to_string(::getpid()));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
};

}  // namespace exqnet::support

#include "exqnet/tensor.hpp"

#include <atomic>
#include <thread>

namespace exqnet {

std::string to_string(const Dims& dims) {
  std::string s = "[";
  for (std::size_t i = 0; i < dims.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(dims[i]);
  }
  return s + "]";
}

std::size_t element_count(const Dims& dims) {
  return std::accumulate(dims.begin(), dims.end(), std::size_t{1}, std::multiplies<>());
}

namespace {
std::atomic<std::size_t> g_threads{1};
}

void set_num_threads(std::size_t n) { g_threads = std::max<std::size_t>(1, n); }
std::size_t num_threads() { return g_threads; }

void parallel_for(std::size_t count, const std::function<void(std::size_t)>& fn) {
  const std::size_t workers = std::min(num_threads(), count);
  if (workers <= 1) {
    for (std::size_t i = 0; i < count; ++i) fn(i);
    return;
  }
  std::vector<std::jthread> pool;
  pool.reserve(workers);
  const std::size_t chunk = (count + workers - 1) / workers;
  for (std::size_t w = 0; w < workers; ++w) {
    const std::size_t lo = w * chunk;
    const std::size_t hi = std::min(count, lo + chunk);
    if (lo >= hi) break;
    pool.emplace_back([lo, hi, &fn] {
      for (std::size_t i = lo; i < hi; ++i) fn(i);
    });
  }
}

template <typename T>
void gemm(Trans trans_a, Trans trans_b, std::size_t m, std::size_t n, std::size_t k,
          const T* a, std::size_t lda, const T* b, std::size_t ldb, T* c, std::size_t ldc,
          bool accumulate) {
  if (!accumulate) {
    for (std::size_t i = 0; i < m; ++i) std::fill_n(c + i * ldc, n, T{0});
  }
  const bool ta = trans_a == Trans::kYes;
  const bool tb = trans_b == Trans::kYes;
  if (!tb) {
    // Row of C is updated with scaled rows of B; k ascends in the outer loop.
    for (std::size_t i = 0; i < m; ++i) {
      T* crow = c + i * ldc;
      for (std::size_t p = 0; p < k; ++p) {
        const T av = ta ? a[p * lda + i] : a[i * lda + p];
        const T* brow = b + p * ldb;
        for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
      }
    }
    return;
  }
  for (std::size_t i = 0; i < m; ++i) {
    T* crow = c + i * ldc;
    for (std::size_t j = 0; j < n; ++j) {
      const T* brow = b + j * ldb;
      T acc = crow[j];
      if (ta) {
        for (std::size_t p = 0; p < k; ++p) acc += a[p * lda + i] * brow[p];
      } else {
        const T* arow = a + i * lda;
        for (std::size_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
      }
      crow[j] = acc;
    }
  }
}

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2) throw ShapeError("matmul needs rank-2 operands");
  if (a.dim(1) != b.dim(0)) {
    throw ShapeError("matmul inner dims differ: " + to_string(a.dims()) + " x " +
                     to_string(b.dims()));
  }
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor<T> c({m, n});
  gemm(Trans::kNo, Trans::kNo, m, n, k, a.ptr(), k, b.ptr(), n, c.ptr(), n, false);
  c.check_finite("matmul");
  return c;
}

void ConvGeometry::validate() const {
  if (kernel_h == 0 || kernel_w == 0 || stride == 0) {
    throw ShapeError("kernel and stride must be >= 1");
  }
  if (kernel_h > height + 2 * pad || kernel_w > width + 2 * pad) {
    throw ShapeError("kernel " + std::to_string(kernel_h) + "x" + std::to_string(kernel_w) +
                     " larger than padded input " + std::to_string(height + 2 * pad) + "x" +
                     std::to_string(width + 2 * pad));
  }
}

template <typename T>
void im2col_image(const T* image, const ConvGeometry& g, T* cols, std::size_t ld) {
  const std::size_t oh = g.out_h(), ow = g.out_w();
  const auto pad = static_cast<std::ptrdiff_t>(g.pad);
  const auto height = static_cast<std::ptrdiff_t>(g.height);
  const auto width = static_cast<std::ptrdiff_t>(g.width);
  for (std::size_t c = 0; c < g.channels; ++c) {
    const T* plane = image + c * g.height * g.width;
    for (std::size_t ky = 0; ky < g.kernel_h; ++ky) {
      for (std::size_t kx = 0; kx < g.kernel_w; ++kx) {
        T* row = cols + ((c * g.kernel_h + ky) * g.kernel_w + kx) * ld;
        for (std::size_t y = 0; y < oh; ++y) {
          const auto iy = static_cast<std::ptrdiff_t>(y * g.stride + ky) - pad;
          T* out = row + y * ow;
          if (iy < 0 || iy >= height) {
            std::fill_n(out, ow, T{0});
            continue;
          }
          const T* src = plane + iy * width;
          for (std::size_t x = 0; x < ow; ++x) {
            const auto ix = static_cast<std::ptrdiff_t>(x * g.stride + kx) - pad;
            out[x] = (ix < 0 || ix >= width) ? T{0} : src[ix];
          }
        }
      }
    }
  }
}

template <typename T>
void col2im_image(const T* cols, std::size_t ld, const ConvGeometry& g, T* image) {
  const std::size_t oh = g.out_h(), ow = g.out_w();
  const auto pad = static_cast<std::ptrdiff_t>(g.pad);
  const auto height = static_cast<std::ptrdiff_t>(g.height);
  const auto width = static_cast<std::ptrdiff_t>(g.width);
  for (std::size_t c = 0; c < g.channels; ++c) {
    T* plane = image + c * g.height * g.width;
    for (std::size_t ky = 0; ky < g.kernel_h; ++ky) {
      for (std::size_t kx = 0; kx < g.kernel_w; ++kx) {
        const T* row = cols + ((c * g.kernel_h + ky) * g.kernel_w + kx) * ld;
        for (std::size_t y = 0; y < oh; ++y) {
          const auto iy = static_cast<std::ptrdiff_t>(y * g.stride + ky) - pad;
          if (iy < 0 || iy >= height) continue;
          T* dst = plane + iy * width;
          const T* in = row + y * ow;
          for (std::size_t x = 0; x < ow; ++x) {
            const auto ix = static_cast<std::ptrdiff_t>(x * g.stride + kx) - pad;
            if (ix >= 0 && ix < width) dst[ix] += in[x];
          }
        }
      }
    }
  }
}

template <typename T>
Tensor<T> im2col(const Tensor<T>& x, std::size_t kernel_h, std::size_t kernel_w,
                 std::size_t stride, std::size_t pad) {
  if (x.rank() != 4) throw ShapeError("im2col expects [N,C,H,W], got " + to_string(x.dims()));
  const ConvGeometry g{x.dim(1), x.dim(2), x.dim(3), kernel_h, kernel_w, stride, pad};
  g.validate();
  const std::size_t batch = x.dim(0);
  const std::size_t per_image = g.col_cols();
  const std::size_t ld = batch * per_image;
  Tensor<T> cols({g.col_rows(), ld});
  const std::size_t image_size = g.channels * g.height * g.width;
  for (std::size_t n = 0; n < batch; ++n) {
    im2col_image(x.ptr() + n * image_size, g, cols.ptr() + n * per_image, ld);
  }
  return cols;
}

template <typename T>
Tensor<T> col2im(const Tensor<T>& cols, std::size_t batch, const ConvGeometry& g) {
  g.validate();
  const std::size_t per_image = g.col_cols();
  if (cols.rank() != 2 || cols.dim(0) != g.col_rows() || cols.dim(1) != batch * per_image) {
    throw ShapeError("col2im: columns " + to_string(cols.dims()) + " do not match geometry " +
                     to_string({g.col_rows(), batch * per_image}));
  }
  Tensor<T> x({batch, g.channels, g.height, g.width});
  const std::size_t image_size = g.channels * g.height * g.width;
  for (std::size_t n = 0; n < batch; ++n) {
    col2im_image(cols.ptr() + n * per_image, cols.dim(1), g, x.ptr() + n * image_size);
  }
  return x;
}

#define EXQNET_INSTANTIATE(T)                                                                  \
  template void gemm<T>(Trans, Trans, std::size_t, std::size_t, std::size_t, const T*,        \
                        std::size_t, const T*, std::size_t, T*, std::size_t, bool);            \
  template Tensor<T> matmul<T>(const Tensor<T>&, const Tensor<T>&);                           \
  template void im2col_image<T>(const T*, const ConvGeometry&, T*, std::size_t);              \
  template void col2im_image<T>(const T*, std::size_t, const ConvGeometry&, T*);              \
  template Tensor<T> im2col<T>(const Tensor<T>&, std::size_t, std::size_t, std::size_t,       \
                               std::size_t);                                                  \
  template Tensor<T> col2im<T>(const Tensor<T>&, std::size_t, const ConvGeometry&);

EXQNET_INSTANTIATE(float)
EXQNET_INSTANTIATE(double)

}  // namespace exqnet

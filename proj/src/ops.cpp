#include "winvit/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "winvit/errors.hpp"

namespace winvit::ops {

namespace {

void require_rank(const Tensor& t, std::size_t rank, const char* op) {
  if (t.rank() != rank) {
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                         shape_str(t.shape()));
  }
}

[[noreturn]] void mismatch(const char* op, const Tensor& a, const Tensor& b) {
  throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                       shape_str(b.shape()));
}

// c[m x n] += a[m x k] * b[k x n], raw row-major.
void gemm_nn(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    double* crow = c + i * n;
    const double* arow = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = arow[p];
      const double* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// c[m x n] += a[m x k] * b[n x k]^T
void gemm_nt(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = a + i * k;
    for (std::size_t j = 0; j < n; ++j) {
      const double* brow = b + j * k;
      double acc = 0.0;
      for (std::size_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
      c[i * n + j] += acc;
    }
  }
}

// c[m x n] += a[k x m]^T * b[k x n]
void gemm_tn(const double* a, const double* b, double* c, std::size_t k, std::size_t m, std::size_t n) {
  for (std::size_t p = 0; p < k; ++p) {
    const double* arow = a + p * m;
    const double* brow = b + p * n;
    for (std::size_t i = 0; i < m; ++i) {
      const double av = arow[i];
      double* crow = c + i * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b, FlopCounter* counter) {
  require_rank(a, 2, "matmul");
  require_rank(b, 2, "matmul");
  const auto m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) mismatch("matmul", a, b);
  Tensor c = Tensor::zeros({m, n}, promote(a.dtype(), b.dtype()));
  gemm_nn(a.data().data(), b.data().data(), c.mutable_data().data(), m, k, n);
  count_flops(counter, FlopKind::Matmul, 2ull * m * k * n);
  return c.finalize();
}

Tensor matmul_nt(const Tensor& a, const Tensor& b, FlopCounter* counter) {
  require_rank(a, 2, "matmul_nt");
  require_rank(b, 2, "matmul_nt");
  const auto m = a.dim(0), k = a.dim(1), n = b.dim(0);
  if (b.dim(1) != k) mismatch("matmul_nt", a, b);
  Tensor c = Tensor::zeros({m, n}, promote(a.dtype(), b.dtype()));
  gemm_nt(a.data().data(), b.data().data(), c.mutable_data().data(), m, k, n);
  count_flops(counter, FlopKind::Matmul, 2ull * m * k * n);
  return c.finalize();
}

Tensor matmul_tn(const Tensor& a, const Tensor& b, FlopCounter* counter) {
  require_rank(a, 2, "matmul_tn");
  require_rank(b, 2, "matmul_tn");
  const auto k = a.dim(0), m = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) mismatch("matmul_tn", a, b);
  Tensor c = Tensor::zeros({m, n}, promote(a.dtype(), b.dtype()));
  gemm_tn(a.data().data(), b.data().data(), c.mutable_data().data(), k, m, n);
  count_flops(counter, FlopKind::Matmul, 2ull * m * k * n);
  return c.finalize();
}

Tensor bmm(const Tensor& a, const Tensor& b, FlopCounter* counter) {
  require_rank(a, 3, "bmm");
  require_rank(b, 3, "bmm");
  const auto batch = a.dim(0), m = a.dim(1), k = a.dim(2), n = b.dim(2);
  if (b.dim(0) != batch || b.dim(1) != k) mismatch("bmm", a, b);
  Tensor c = Tensor::zeros({batch, m, n}, promote(a.dtype(), b.dtype()));
  for (std::size_t i = 0; i < batch; ++i) {
    gemm_nn(a.data().data() + i * m * k, b.data().data() + i * k * n, c.mutable_data().data() + i * m * n, m, k, n);
  }
  count_flops(counter, FlopKind::Matmul, 2ull * batch * m * k * n);
  return c.finalize();
}

Tensor bmm_nt(const Tensor& a, const Tensor& b, FlopCounter* counter) {
  require_rank(a, 3, "bmm_nt");
  require_rank(b, 3, "bmm_nt");
  const auto batch = a.dim(0), m = a.dim(1), k = a.dim(2), n = b.dim(1);
  if (b.dim(0) != batch || b.dim(2) != k) mismatch("bmm_nt", a, b);
  Tensor c = Tensor::zeros({batch, m, n}, promote(a.dtype(), b.dtype()));
  for (std::size_t i = 0; i < batch; ++i) {
    gemm_nt(a.data().data() + i * m * k, b.data().data() + i * n * k, c.mutable_data().data() + i * m * n, m, k, n);
  }
  count_flops(counter, FlopKind::Matmul, 2ull * batch * m * k * n);
  return c.finalize();
}

Tensor bmm_tn(const Tensor& a, const Tensor& b, FlopCounter* counter) {
  require_rank(a, 3, "bmm_tn");
  require_rank(b, 3, "bmm_tn");
  const auto batch = a.dim(0), k = a.dim(1), m = a.dim(2), n = b.dim(2);
  if (b.dim(0) != batch || b.dim(1) != k) mismatch("bmm_tn", a, b);
  Tensor c = Tensor::zeros({batch, m, n}, promote(a.dtype(), b.dtype()));
  for (std::size_t i = 0; i < batch; ++i) {
    gemm_tn(a.data().data() + i * k * m, b.data().data() + i * k * n, c.mutable_data().data() + i * m * n, k, m, n);
  }
  count_flops(counter, FlopKind::Matmul, 2ull * batch * m * k * n);
  return c.finalize();
}

Tensor softmax_lastdim(const Tensor& t, FlopCounter* counter) {
  if (t.rank() == 0) throw DimensionError("softmax_lastdim: rank-0 tensor has no last dimension");
  const auto n = t.shape().back();
  const auto rows = t.numel() / n;
  Tensor out = Tensor::zeros(t.shape(), t.dtype());
  auto src = t.data();
  auto dst = out.mutable_data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* x = src.data() + r * n;
    double* y = dst.data() + r * n;
    double mx = *std::max_element(x, x + n);
    double sum = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      y[j] = std::exp(x[j] - mx);
      sum += y[j];
    }
    const double inv = 1.0 / sum;
    for (std::size_t j = 0; j < n; ++j) y[j] *= inv;
  }
  count_flops(counter, FlopKind::Softmax, 5ull * t.numel());
  return out.finalize();
}

Tensor sigmoid(const Tensor& t, FlopCounter* counter) {
  Tensor out = Tensor::zeros(t.shape(), t.dtype());
  auto src = t.data();
  auto dst = out.mutable_data();
  for (std::size_t i = 0; i < src.size(); ++i) {
    const double x = src[i];
    // Branch keeps exp() from overflowing for large |x|.
    if (x >= 0) {
      dst[i] = 1.0 / (1.0 + std::exp(-x));
    } else {
      const double e = std::exp(x);
      dst[i] = e / (1.0 + e);
    }
  }
  count_flops(counter, FlopKind::Elementwise, t.numel());
  return out.finalize();
}

Tensor conv2d(const Tensor& input, const Tensor& kernel, const Tensor* bias, std::size_t padding,
              FlopCounter* counter) {
  require_rank(input, 3, "conv2d");
  require_rank(kernel, 4, "conv2d");
  const auto cin = input.dim(0), h = input.dim(1), w = input.dim(2);
  const auto cout = kernel.dim(0), kh = kernel.dim(2), kw = kernel.dim(3);
  if (kernel.dim(1) != cin) mismatch("conv2d", input, kernel);
  if (bias && bias->numel() != cout) mismatch("conv2d bias", kernel, *bias);
  if (h + 2 * padding < kh || w + 2 * padding < kw) mismatch("conv2d", input, kernel);
  const auto oh = h + 2 * padding - kh + 1, ow = w + 2 * padding - kw + 1;
  Tensor out = Tensor::zeros({cout, oh, ow}, promote(input.dtype(), kernel.dtype()));
  auto x = input.data();
  auto k = kernel.data();
  auto y = out.mutable_data();
  const auto ph = static_cast<std::ptrdiff_t>(padding);
  for (std::size_t co = 0; co < cout; ++co) {
    for (std::size_t ci = 0; ci < cin; ++ci) {
      for (std::size_t u = 0; u < kh; ++u) {
        for (std::size_t v = 0; v < kw; ++v) {
          const double wv = k[((co * cin + ci) * kh + u) * kw + v];
          for (std::size_t i = 0; i < oh; ++i) {
            const auto si = static_cast<std::ptrdiff_t>(i + u) - ph;
            if (si < 0 || si >= static_cast<std::ptrdiff_t>(h)) continue;
            const double* xrow = x.data() + (ci * h + static_cast<std::size_t>(si)) * w;
            double* yrow = y.data() + (co * oh + i) * ow;
            for (std::size_t j = 0; j < ow; ++j) {
              const auto sj = static_cast<std::ptrdiff_t>(j + v) - ph;
              if (sj < 0 || sj >= static_cast<std::ptrdiff_t>(w)) continue;
              yrow[j] += wv * xrow[sj];
            }
          }
        }
      }
    }
  }
  count_flops(counter, FlopKind::Conv, 2ull * cout * cin * kh * kw * oh * ow);
  if (bias) {
    for (std::size_t co = 0; co < cout; ++co) {
      for (std::size_t p = 0; p < oh * ow; ++p) y[co * oh * ow + p] += (*bias)[co];
    }
    count_flops(counter, FlopKind::Elementwise, out.numel());
  }
  return out.finalize();
}

Tensor depthwise_conv2d(const Tensor& input, const Tensor& kernel, const Tensor* bias, std::size_t padding,
                        FlopCounter* counter) {
  require_rank(input, 3, "depthwise_conv2d");
  require_rank(kernel, 4, "depthwise_conv2d");
  const auto c = input.dim(0), h = input.dim(1), w = input.dim(2);
  const auto kh = kernel.dim(2), kw = kernel.dim(3);
  if (kernel.dim(0) != c || kernel.dim(1) != 1) mismatch("depthwise_conv2d", input, kernel);
  if (bias && bias->numel() != c) mismatch("depthwise_conv2d bias", kernel, *bias);
  if (h + 2 * padding < kh || w + 2 * padding < kw) mismatch("depthwise_conv2d", input, kernel);
  const auto oh = h + 2 * padding - kh + 1, ow = w + 2 * padding - kw + 1;
  Tensor out = Tensor::zeros({c, oh, ow}, promote(input.dtype(), kernel.dtype()));
  auto x = input.data();
  auto k = kernel.data();
  auto y = out.mutable_data();
  const auto ph = static_cast<std::ptrdiff_t>(padding);
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t u = 0; u < kh; ++u) {
      for (std::size_t v = 0; v < kw; ++v) {
        const double wv = k[(ch * kh + u) * kw + v];
        for (std::size_t i = 0; i < oh; ++i) {
          const auto si = static_cast<std::ptrdiff_t>(i + u) - ph;
          if (si < 0 || si >= static_cast<std::ptrdiff_t>(h)) continue;
          const double* xrow = x.data() + (ch * h + static_cast<std::size_t>(si)) * w;
          double* yrow = y.data() + (ch * oh + i) * ow;
          for (std::size_t j = 0; j < ow; ++j) {
            const auto sj = static_cast<std::ptrdiff_t>(j + v) - ph;
            if (sj < 0 || sj >= static_cast<std::ptrdiff_t>(w)) continue;
            yrow[j] += wv * xrow[sj];
          }
        }
      }
    }
  }
  count_flops(counter, FlopKind::Conv, 2ull * c * kh * kw * oh * ow);
  if (bias) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      for (std::size_t p = 0; p < oh * ow; ++p) y[ch * oh * ow + p] += (*bias)[ch];
    }
    count_flops(counter, FlopKind::Elementwise, out.numel());
  }
  return out.finalize();
}

Tensor channel_pool(const Tensor& input, PoolMode mode, FlopCounter* counter) {
  require_rank(input, 3, "channel_pool");
  const auto c = input.dim(0), hw = input.dim(1) * input.dim(2);
  Tensor out = Tensor::zeros({1, input.dim(1), input.dim(2)}, input.dtype());
  auto x = input.data();
  auto y = out.mutable_data();
  if (mode == PoolMode::Avg) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      for (std::size_t p = 0; p < hw; ++p) y[p] += x[ch * hw + p];
    }
    const double inv = 1.0 / static_cast<double>(c);
    for (auto& v : y) v *= inv;
  } else {
    for (std::size_t p = 0; p < hw; ++p) y[p] = x[p];
    for (std::size_t ch = 1; ch < c; ++ch) {
      for (std::size_t p = 0; p < hw; ++p) y[p] = std::max(y[p], x[ch * hw + p]);
    }
  }
  count_flops(counter, FlopKind::Elementwise, input.numel());
  return out.finalize();
}

Tensor transpose2d(const Tensor& t) {
  require_rank(t, 2, "transpose2d");
  const auto r = t.dim(0), c = t.dim(1);
  std::vector<double> data(t.numel());
  auto src = t.data();
  for (std::size_t i = 0; i < r; ++i) {
    for (std::size_t j = 0; j < c; ++j) data[j * r + i] = src[i * c + j];
  }
  return Tensor({c, r}, std::move(data), t.dtype());
}

Tensor permute(const Tensor& t, std::span<const std::size_t> perm) {
  const auto rank = t.rank();
  if (perm.size() != rank) throw DimensionError("permute: permutation rank does not match " + shape_str(t.shape()));
  std::vector<bool> seen(rank, false);
  for (auto p : perm) {
    if (p >= rank || seen[p]) throw DimensionError("permute: invalid permutation");
    seen[p] = true;
  }
  Shape out_shape(rank);
  for (std::size_t i = 0; i < rank; ++i) out_shape[i] = t.dim(perm[i]);

  std::vector<std::size_t> in_strides(rank, 1);
  for (std::size_t i = rank; i-- > 1;) in_strides[i - 1] = in_strides[i] * t.dim(i);
  std::vector<std::size_t> strides(rank);
  for (std::size_t i = 0; i < rank; ++i) strides[i] = in_strides[perm[i]];

  std::vector<double> data(t.numel());
  std::vector<std::size_t> idx(rank, 0);
  auto src = t.data();
  std::size_t offset = 0;
  for (std::size_t flat = 0; flat < data.size(); ++flat) {
    data[flat] = src[offset];
    for (std::size_t ax = rank; ax-- > 0;) {
      ++idx[ax];
      offset += strides[ax];
      if (idx[ax] < out_shape[ax]) break;
      offset -= strides[ax] * idx[ax];
      idx[ax] = 0;
    }
  }
  return Tensor(std::move(out_shape), std::move(data), t.dtype());
}

Tensor gather_rows(const Tensor& t, std::span<const std::size_t> index) {
  require_rank(t, 2, "gather_rows");
  const auto rows = t.dim(0), c = t.dim(1);
  std::vector<double> data(index.size() * c);
  auto src = t.data();
  for (std::size_t r = 0; r < index.size(); ++r) {
    if (index[r] >= rows) throw DimensionError("gather_rows: row index out of range");
    std::copy_n(src.data() + index[r] * c, c, data.data() + r * c);
  }
  return Tensor({index.size(), c}, std::move(data), t.dtype());
}

}  // namespace winvit::ops

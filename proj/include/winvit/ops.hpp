#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "winvit/flops.hpp"
#include "winvit/tensor.hpp"

// Forward kernels on plain tensors. Each takes an optional instrumented
// counter; backward passes call them with none.
namespace winvit::ops {

enum class PoolMode { Avg, Max };

// a[m x k] * b[k x n]
Tensor matmul(const Tensor& a, const Tensor& b, FlopCounter* counter = nullptr);
// a[m x k] * b[n x k]^T
Tensor matmul_nt(const Tensor& a, const Tensor& b, FlopCounter* counter = nullptr);
// a[k x m]^T * b[k x n]
Tensor matmul_tn(const Tensor& a, const Tensor& b, FlopCounter* counter = nullptr);

// Batched variants over a leading batch axis.
Tensor bmm(const Tensor& a, const Tensor& b, FlopCounter* counter = nullptr);
Tensor bmm_nt(const Tensor& a, const Tensor& b, FlopCounter* counter = nullptr);
Tensor bmm_tn(const Tensor& a, const Tensor& b, FlopCounter* counter = nullptr);

Tensor softmax_lastdim(const Tensor& t, FlopCounter* counter = nullptr);
Tensor sigmoid(const Tensor& t, FlopCounter* counter = nullptr);

// Cross-correlation with zero padding; input [Cin x H x W],
// kernel [Cout x Cin x kh x kw], optional bias [Cout]. Stride 1.
Tensor conv2d(const Tensor& input, const Tensor& kernel, const Tensor* bias, std::size_t padding,
              FlopCounter* counter = nullptr);
// Per-channel convolution; kernel [C x 1 x kh x kw], optional bias [C].
Tensor depthwise_conv2d(const Tensor& input, const Tensor& kernel, const Tensor* bias, std::size_t padding,
                        FlopCounter* counter = nullptr);

// Reduction across the channel axis of [C x H x W] -> [1 x H x W].
Tensor channel_pool(const Tensor& input, PoolMode mode, FlopCounter* counter = nullptr);

Tensor transpose2d(const Tensor& t);
// General axis permutation: out.shape[i] = in.shape[perm[i]].
Tensor permute(const Tensor& t, std::span<const std::size_t> perm);
// out row r = in row index[r] for a [R x C] tensor.
Tensor gather_rows(const Tensor& t, std::span<const std::size_t> index);

}  // namespace winvit::ops

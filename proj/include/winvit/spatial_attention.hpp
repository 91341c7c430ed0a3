#pragma once

#include "winvit/autograd.hpp"
#include "winvit/tensor.hpp"

namespace winvit::sam {

inline constexpr std::size_t kKernelSize = 7;
inline constexpr std::size_t kPadding = 3;

// 7x7 convolution over the [avg; max] channel descriptor: 2*7*7 weights and
// one bias.
struct SamParams {
  Tensor kernel;  // 1 x 2 x 7 x 7
  Tensor bias;    // 1

  std::size_t parameter_count() const { return kernel.numel() + bias.numel(); }
  void validate() const;

  // normal(0, 0.02) kernel, zero bias.
  static SamParams init(Rng& rng, DType dtype = DType::F32);
  static SamParams zeros(DType dtype = DType::F32);
};

struct SamVars {
  Var kernel, bias;
};

SamVars bind(Tape& tape, const SamParams& params, bool trainable);

// sigmoid(conv7x7([avg_c(F); max_c(F)])) for F [C x H x W] -> [1 x H x W].
Var sam_map(const Var& features, const SamVars& vars);
// F + F * map, the map broadcast over channels. Writes the gate to *map_out
// when given.
Var sam_residual(const Var& features, const SamVars& vars, Tensor* map_out = nullptr);

Tensor sam_map(const Tensor& features, const SamParams& params);
Tensor sam_residual(const Tensor& features, const SamParams& params);

}  // namespace winvit::sam

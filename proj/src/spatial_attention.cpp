#include "winvit/spatial_attention.hpp"

#include "winvit/errors.hpp"

namespace winvit::sam {

void SamParams::validate() const {
  if (kernel.shape() != Shape{1, 2, kKernelSize, kKernelSize} || bias.numel() != 1) {
    throw ConfigError("spatial attention parameters must be a 1x2x7x7 kernel and one bias, got " +
                      shape_str(kernel.shape()) + " and " + shape_str(bias.shape()));
  }
}

SamParams SamParams::init(Rng& rng, DType dtype) {
  return SamParams{Tensor::randn({1, 2, kKernelSize, kKernelSize}, rng, 0.02, dtype), Tensor::zeros({1}, dtype)};
}

SamParams SamParams::zeros(DType dtype) {
  return SamParams{Tensor::zeros({1, 2, kKernelSize, kKernelSize}, dtype), Tensor::zeros({1}, dtype)};
}

SamVars bind(Tape& tape, const SamParams& params, bool trainable) {
  params.validate();
  if (trainable) return SamVars{tape.parameter(params.kernel), tape.parameter(params.bias)};
  return SamVars{tape.constant(params.kernel), tape.constant(params.bias)};
}

Var sam_map(const Var& features, const SamVars& vars) {
  if (features.shape().size() != 3) {
    throw DimensionError("spatial attention expects [C x H x W], got " + shape_str(features.shape()));
  }
  const Var pooled[] = {ag::channel_pool(features, ops::PoolMode::Avg),
                        ag::channel_pool(features, ops::PoolMode::Max)};
  Var descriptor = ag::concat0(pooled);
  return ag::sigmoid(ag::conv2d(descriptor, vars.kernel, vars.bias, kPadding));
}

Var sam_residual(const Var& features, const SamVars& vars, Tensor* map_out) {
  Var map = sam_map(features, vars);
  if (map_out) *map_out = map.value();
  return ag::add(features, ag::mul_spatial(features, map));
}

Tensor sam_map(const Tensor& features, const SamParams& params) {
  Tape tape;
  return sam_map(tape.constant(features), bind(tape, params, false)).value();
}

Tensor sam_residual(const Tensor& features, const SamParams& params) {
  Tape tape;
  return sam_residual(tape.constant(features), bind(tape, params, false)).value();
}

}  // namespace winvit::sam

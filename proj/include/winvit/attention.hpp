#pragma once

#include <cstddef>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "winvit/autograd.hpp"
#include "winvit/tensor.hpp"

namespace winvit::attention {

// H x W token grid tiled by non-overlapping M x M windows.
struct WindowGeometry {
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t window = 0;

  // Throws GeometryError unless M divides both H and W.
  static WindowGeometry make(std::size_t height, std::size_t width, std::size_t window);

  std::size_t num_windows() const { return (height / window) * (width / window); }
  std::size_t tokens_per_window() const { return window * window; }
  std::size_t tokens() const { return height * width; }
};

// Source token (row-major over the grid) for every window-major slot
// (window n in row-major tile order, then row-major within the tile).
std::vector<std::size_t> partition_index(const WindowGeometry& geom);
std::vector<std::size_t> merge_index(const WindowGeometry& geom);

// x [H x W x C] -> [N_windows x M^2 x C].
Tensor window_partition(const Tensor& x, std::size_t window);
// w [N_windows x M^2 x C] -> [H x W x C].
Tensor window_merge(const Tensor& windows, const WindowGeometry& geom);

// Relative position index for an M x M window: entry (i, j) addresses the
// shared table slot of displacement (r_i - r_j, c_i - c_j).
struct BiasIndex {
  std::size_t window = 0;
  std::shared_ptr<const std::vector<std::size_t>> entries;  // M^2 x M^2, row-major

  std::size_t table_size() const { return (2 * window - 1) * (2 * window - 1); }
  std::size_t side() const { return window * window; }
  std::size_t operator()(std::size_t i, std::size_t j) const { return (*entries)[i * side() + j]; }
};

BiasIndex build_bias_index(std::size_t window);

enum class SharingMode { Standard, SharedQK };

std::string to_string(SharingMode mode);
SharingMode sharing_mode_from_string(const std::string& name);

// Q/K/V/output projections, fused across heads. In SharedQK mode the key
// projection reuses the query weight; biases stay separate.
struct ProjectionParams {
  std::size_t channels = 0;
  std::size_t heads = 0;
  SharingMode sharing = SharingMode::Standard;
  double dropout_rate = 0.0;

  Tensor w_q, w_v, w_o;    // C x C
  std::optional<Tensor> w_k;  // absent in SharedQK mode
  Tensor b_q, b_k, b_v, b_o;  // C

  std::size_t head_dim() const { return channels / heads; }
  const Tensor& key_weight() const { return w_k ? *w_k : w_q; }
  std::size_t parameter_count() const;
  void validate() const;

  // Truncated normal(0, 0.02) at +-2 sigma for weights, zero biases.
  static ProjectionParams init(std::size_t channels, std::size_t heads, SharingMode sharing, double dropout_rate,
                               Rng& rng, DType dtype = DType::F32);
  // Identity weights, zero biases.
  static ProjectionParams identity(std::size_t channels, std::size_t heads, SharingMode sharing = SharingMode::Standard,
                                   DType dtype = DType::F32);
};

struct WindowAttentionParams {
  ProjectionParams proj;
  std::size_t window = 0;
  Tensor bias_table;  // h x (2M-1)^2
  BiasIndex index;     // recomputed from M, never serialized

  std::size_t parameter_count() const { return proj.parameter_count() + bias_table.numel(); }
  void validate() const;

  static WindowAttentionParams init(std::size_t channels, std::size_t heads, std::size_t window, SharingMode sharing,
                                    double dropout_rate, Rng& rng, DType dtype = DType::F32);
  static WindowAttentionParams from_projection(ProjectionParams proj, std::size_t window);
};

// Projection parameters bound to a tape. key_weight aliases query_weight in
// SharedQK mode so both uses accumulate into one gradient.
struct ProjectionVars {
  Var w_q, w_k, w_v, w_o, b_q, b_k, b_v, b_o;
};

ProjectionVars bind(Tape& tape, const ProjectionParams& params, bool trainable);

// Per-window, per-head scores before (A) and after (A') softmax+dropout,
// both [N * h x T x T].
struct AttentionProbe {
  Tensor scores;
  Tensor probs;
};

struct ForwardContext {
  bool training = false;
  Rng* rng = nullptr;
};

// Core multi-head attention over x [N x T x C]: independent attention per
// leading slice with optional relative bias [h x T x T] added to the scores.
Var multi_head_attention(const Var& x, const ProjectionVars& vars, const ProjectionParams& params,
                         const std::optional<Var>& bias, const ForwardContext& ctx, AttentionProbe* probe = nullptr);

// Windowed attention on a tape; bias gathered from the table via the index.
Var window_attention(const Var& x_windows, const ProjectionVars& vars, const Var& bias_table,
                     const WindowAttentionParams& params, const ForwardContext& ctx, AttentionProbe* probe = nullptr);

// Plain-tensor entry points.
Tensor window_mha_forward(const Tensor& x_windows, const WindowAttentionParams& params, bool training,
                          std::uint64_t seed, AttentionProbe* probe = nullptr, FlopCounter* counter = nullptr);
// x [L x C], no positional bias.
Tensor global_mha_forward(const Tensor& x, const ProjectionParams& params, bool training, std::uint64_t seed,
                          AttentionProbe* probe = nullptr, FlopCounter* counter = nullptr);

// Mutation switch for the invariant suite: the forward pass subtracts the
// relative bias while the backward pass still treats it as added.
void set_bias_sign_fault(bool enabled);
bool bias_sign_fault();

}  // namespace winvit::attention

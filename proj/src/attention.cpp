#include "winvit/attention.hpp"

#include <atomic>
#include <cmath>

#include "winvit/errors.hpp"

namespace winvit::attention {

namespace {

std::atomic<bool> g_bias_fault{false};

void require_windows_shape(const Tensor& w, const WindowGeometry& geom) {
  if (w.rank() != 3 || w.dim(0) != geom.num_windows() || w.dim(1) != geom.tokens_per_window()) {
    throw GeometryError("window tensor " + shape_str(w.shape()) + " inconsistent with " +
                        std::to_string(geom.height) + "x" + std::to_string(geom.width) + " grid and M=" +
                        std::to_string(geom.window));
  }
}

// Forward uses -bias; backward passes the gradient straight through as if +bias.
Var faulty_bias(const Var& bias) {
  Tensor negated = bias.value();
  for (auto& v : negated.mutable_data()) v = -v;
  return bias.tape()->record(std::move(negated), {bias}, [bias](Tape& t, const Tensor& g) { t.accumulate(bias, g); });
}

Var split_heads(const Var& t, std::size_t n, std::size_t tokens, std::size_t heads, std::size_t d) {
  Var r = ag::reshape(t, {n, tokens, heads, d});
  r = ag::permute(r, {0, 2, 1, 3});
  return ag::reshape(r, {n * heads, tokens, d});
}

}  // namespace

WindowGeometry WindowGeometry::make(std::size_t height, std::size_t width, std::size_t window) {
  if (window == 0 || height == 0 || width == 0 || height % window != 0 || width % window != 0) {
    throw GeometryError("window size M=" + std::to_string(window) + " does not tile a " + std::to_string(height) +
                        "x" + std::to_string(width) + " token grid (H=" + std::to_string(height) +
                        ", W=" + std::to_string(width) + ")");
  }
  return WindowGeometry{height, width, window};
}

std::vector<std::size_t> partition_index(const WindowGeometry& geom) {
  const auto m = geom.window;
  const auto tiles_w = geom.width / m;
  std::vector<std::size_t> index;
  index.reserve(geom.tokens());
  for (std::size_t n = 0; n < geom.num_windows(); ++n) {
    const auto tr = n / tiles_w, tc = n % tiles_w;
    for (std::size_t r = 0; r < m; ++r) {
      for (std::size_t c = 0; c < m; ++c) index.push_back((tr * m + r) * geom.width + tc * m + c);
    }
  }
  return index;
}

std::vector<std::size_t> merge_index(const WindowGeometry& geom) {
  auto forward = partition_index(geom);
  std::vector<std::size_t> inverse(forward.size());
  for (std::size_t slot = 0; slot < forward.size(); ++slot) inverse[forward[slot]] = slot;
  return inverse;
}

Tensor window_partition(const Tensor& x, std::size_t window) {
  if (x.rank() != 3) throw DimensionError("window_partition expects [H x W x C], got " + shape_str(x.shape()));
  auto geom = WindowGeometry::make(x.dim(0), x.dim(1), window);
  const auto c = x.dim(2);
  auto index = partition_index(geom);
  Tensor rows = ops::gather_rows(x.reshaped({geom.tokens(), c}), index);
  return rows.reshaped({geom.num_windows(), geom.tokens_per_window(), c});
}

Tensor window_merge(const Tensor& windows, const WindowGeometry& geom) {
  require_windows_shape(windows, geom);
  const auto c = windows.dim(2);
  auto index = merge_index(geom);
  Tensor rows = ops::gather_rows(windows.reshaped({geom.tokens(), c}), index);
  return rows.reshaped({geom.height, geom.width, c});
}

BiasIndex build_bias_index(std::size_t window) {
  if (window == 0) throw GeometryError("window size must be >= 1");
  const auto m = window;
  const auto side = m * m;
  const auto span = 2 * m - 1;
  std::vector<std::size_t> entries(side * side);
  for (std::size_t i = 0; i < side; ++i) {
    const auto ri = i / m, ci = i % m;
    for (std::size_t j = 0; j < side; ++j) {
      const auto rj = j / m, cj = j % m;
      entries[i * side + j] = (ri + m - 1 - rj) * span + (ci + m - 1 - cj);
    }
  }
  return BiasIndex{window, std::make_shared<const std::vector<std::size_t>>(std::move(entries))};
}

std::string to_string(SharingMode mode) { return mode == SharingMode::Standard ? "standard" : "shared_qk"; }

SharingMode sharing_mode_from_string(const std::string& name) {
  if (name == "standard") return SharingMode::Standard;
  if (name == "shared_qk") return SharingMode::SharedQK;
  throw ConfigError("unknown sharing mode '" + name + "' (expected standard|shared_qk)");
}

std::size_t ProjectionParams::parameter_count() const {
  std::size_t n = w_q.numel() + w_v.numel() + w_o.numel() + b_q.numel() + b_k.numel() + b_v.numel() + b_o.numel();
  if (w_k) n += w_k->numel();
  return n;
}

void ProjectionParams::validate() const {
  if (heads == 0 || channels == 0 || channels % heads != 0) {
    throw ConfigError("channels C=" + std::to_string(channels) + " not divisible by heads h=" + std::to_string(heads));
  }
  if (dropout_rate < 0.0 || dropout_rate >= 1.0) {
    throw ConfigError("dropout rate must lie in [0,1), got " + std::to_string(dropout_rate));
  }
  if ((sharing == SharingMode::SharedQK) == w_k.has_value()) {
    throw ConfigError("key projection presence does not match sharing mode " + to_string(sharing));
  }
  const Shape square{channels, channels};
  const Shape vec{channels};
  if (w_q.shape() != square || w_v.shape() != square || w_o.shape() != square || (w_k && w_k->shape() != square) ||
      b_q.shape() != vec || b_k.shape() != vec || b_v.shape() != vec || b_o.shape() != vec) {
    throw ConfigError("projection parameter shapes do not match C=" + std::to_string(channels));
  }
}

ProjectionParams ProjectionParams::init(std::size_t channels, std::size_t heads, SharingMode sharing,
                                        double dropout_rate, Rng& rng, DType dtype) {
  ProjectionParams p;
  p.channels = channels;
  p.heads = heads;
  p.sharing = sharing;
  p.dropout_rate = dropout_rate;
  if (heads == 0 || channels % heads != 0) p.validate();
  const Shape square{channels, channels};
  p.w_q = trunc_normal(square, rng, 0.02, dtype);
  if (sharing == SharingMode::Standard) p.w_k = trunc_normal(square, rng, 0.02, dtype);
  p.w_v = trunc_normal(square, rng, 0.02, dtype);
  p.w_o = trunc_normal(square, rng, 0.02, dtype);
  p.b_q = p.b_k = p.b_v = p.b_o = Tensor::zeros({channels}, dtype);
  p.validate();
  return p;
}

ProjectionParams ProjectionParams::identity(std::size_t channels, std::size_t heads, SharingMode sharing, DType dtype) {
  ProjectionParams p;
  p.channels = channels;
  p.heads = heads;
  p.sharing = sharing;
  p.w_q = p.w_v = p.w_o = Tensor::identity(channels, dtype);
  if (sharing == SharingMode::Standard) p.w_k = Tensor::identity(channels, dtype);
  p.b_q = p.b_k = p.b_v = p.b_o = Tensor::zeros({channels}, dtype);
  p.validate();
  return p;
}

void WindowAttentionParams::validate() const {
  proj.validate();
  if (window == 0) throw GeometryError("window size must be >= 1");
  const Shape table{proj.heads, (2 * window - 1) * (2 * window - 1)};
  if (bias_table.shape() != table) {
    throw ConfigError("bias table " + shape_str(bias_table.shape()) + " does not match " + shape_str(table));
  }
  if (!index.entries || index.window != window) throw ConfigError("bias index not built for M=" + std::to_string(window));
}

WindowAttentionParams WindowAttentionParams::init(std::size_t channels, std::size_t heads, std::size_t window,
                                                  SharingMode sharing, double dropout_rate, Rng& rng, DType dtype) {
  return from_projection(ProjectionParams::init(channels, heads, sharing, dropout_rate, rng, dtype), window);
}

WindowAttentionParams WindowAttentionParams::from_projection(ProjectionParams proj, std::size_t window) {
  WindowAttentionParams p;
  p.window = window;
  p.index = build_bias_index(window);
  p.bias_table = Tensor::zeros({proj.heads, p.index.table_size()}, proj.w_q.dtype());
  p.proj = std::move(proj);
  p.validate();
  return p;
}

ProjectionVars bind(Tape& tape, const ProjectionParams& params, bool trainable) {
  auto leaf = [&](const Tensor& t) { return trainable ? tape.parameter(t) : tape.constant(t); };
  ProjectionVars v;
  v.w_q = leaf(params.w_q);
  v.w_k = params.w_k ? leaf(*params.w_k) : v.w_q;
  v.w_v = leaf(params.w_v);
  v.w_o = leaf(params.w_o);
  v.b_q = leaf(params.b_q);
  v.b_k = leaf(params.b_k);
  v.b_v = leaf(params.b_v);
  v.b_o = leaf(params.b_o);
  return v;
}

Var multi_head_attention(const Var& x, const ProjectionVars& vars, const ProjectionParams& params,
                         const std::optional<Var>& bias, const ForwardContext& ctx, AttentionProbe* probe) {
  params.validate();
  const auto& s = x.shape();
  if (s.size() != 3 || s[2] != params.channels) {
    throw DimensionError("attention input " + shape_str(s) + " does not match C=" + std::to_string(params.channels));
  }
  const auto n = s[0], tokens = s[1], c = s[2], heads = params.heads, d = params.head_dim();
  FlopCounter* counter = x.tape()->counter();

  Var flat = ag::reshape(x, {n * tokens, c});
  Var q, k, v;
  {
    FlopScope scope(counter, "proj");
    q = ag::linear(flat, vars.w_q, vars.b_q);
    k = ag::linear(flat, vars.w_k, vars.b_k);
    v = ag::linear(flat, vars.w_v, vars.b_v);
  }
  Var heads_out;
  {
    FlopScope scope(counter, "core");
    Var qh = split_heads(q, n, tokens, heads, d);
    Var kh = split_heads(k, n, tokens, heads, d);
    Var vh = split_heads(v, n, tokens, heads, d);

    Var scores = ag::scale(ag::bmm_nt(qh, kh), 1.0 / std::sqrt(static_cast<double>(d)));
    if (bias) {
      if (bias->shape() != Shape{heads, tokens, tokens}) {
        throw DimensionError("relative bias " + shape_str(bias->shape()) + " does not match " +
                             shape_str({heads, tokens, tokens}));
      }
      Var b = bias_sign_fault() ? faulty_bias(*bias) : *bias;
      scores = ag::reshape(ag::add_broadcast(ag::reshape(scores, {n, heads, tokens, tokens}), b),
                           {n * heads, tokens, tokens});
    }
    Var probs = ag::dropout(ag::softmax_lastdim(scores), params.dropout_rate, ctx.training, ctx.rng);
    if (probe) {
      probe->scores = scores.value();
      probe->probs = probs.value();
    }
    Var z = ag::bmm(probs, vh);
    z = ag::permute(ag::reshape(z, {n, heads, tokens, d}), {0, 2, 1, 3});
    heads_out = ag::reshape(z, {n * tokens, c});
  }
  Var out;
  {
    FlopScope scope(counter, "proj");
    out = ag::linear(heads_out, vars.w_o, vars.b_o);
  }
  out = ag::dropout(out, params.dropout_rate, ctx.training, ctx.rng);
  return ag::reshape(out, {n, tokens, c});
}

Var window_attention(const Var& x_windows, const ProjectionVars& vars, const Var& bias_table,
                     const WindowAttentionParams& params, const ForwardContext& ctx, AttentionProbe* probe) {
  params.validate();
  const auto& s = x_windows.shape();
  if (s.size() != 3 || s[1] != params.index.side()) {
    throw GeometryError("window batch " + shape_str(s) + " does not hold M^2=" + std::to_string(params.index.side()) +
                        " tokens per window");
  }
  Var bias = ag::gather_table(bias_table, params.index.entries, params.index.side());
  return multi_head_attention(x_windows, vars, params.proj, bias, ctx, probe);
}

Tensor window_mha_forward(const Tensor& x_windows, const WindowAttentionParams& params, bool training,
                          std::uint64_t seed, AttentionProbe* probe, FlopCounter* counter) {
  Tape tape(counter);
  Rng rng(seed);
  auto vars = bind(tape, params.proj, false);
  Var table = tape.constant(params.bias_table);
  Var x = tape.constant(x_windows);
  return window_attention(x, vars, table, params, ForwardContext{training, &rng}, probe).value();
}

Tensor global_mha_forward(const Tensor& x, const ProjectionParams& params, bool training, std::uint64_t seed,
                          AttentionProbe* probe, FlopCounter* counter) {
  if (x.rank() != 2) throw DimensionError("global attention expects [L x C], got " + shape_str(x.shape()));
  Tape tape(counter);
  Rng rng(seed);
  auto vars = bind(tape, params, false);
  Var in = tape.constant(x.reshaped({1, x.dim(0), x.dim(1)}));
  Var out = multi_head_attention(in, vars, params, std::nullopt, ForwardContext{training, &rng}, probe);
  return out.value().reshaped({x.dim(0), x.dim(1)});
}

void set_bias_sign_fault(bool enabled) { g_bias_fault.store(enabled); }
bool bias_sign_fault() { return g_bias_fault.load(); }

}  // namespace winvit::attention

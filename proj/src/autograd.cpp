#include "winvit/autograd.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "winvit/errors.hpp"

namespace winvit {

const Tensor& Var::value() const {
  if (!tape_) throw ContractError("Var is not bound to a tape");
  return tape_->value(*this);
}

bool Var::requires_grad() const { return tape_ && tape_->requires_grad(*this); }

void Tape::check_owner(const Var& v) const {
  if (v.tape() != this || v.id() >= nodes_.size()) throw ContractError("Var does not belong to this tape");
}

Var Tape::constant(Tensor value) {
  nodes_.push_back(Node{std::move(value), std::nullopt, nullptr, false});
  return Var(this, nodes_.size() - 1);
}

Var Tape::parameter(Tensor value) {
  nodes_.push_back(Node{std::move(value), std::nullopt, nullptr, true});
  return Var(this, nodes_.size() - 1);
}

Var Tape::record(Tensor value, std::span<const Var> inputs, BackwardFn backward) {
  bool needs = false;
  for (const auto& in : inputs) {
    check_owner(in);
    needs = needs || nodes_[in.id()].requires_grad;
  }
  nodes_.push_back(Node{std::move(value), std::nullopt, needs ? std::move(backward) : nullptr, needs});
  return Var(this, nodes_.size() - 1);
}

void Tape::backward(const Var& loss) {
  check_owner(loss);
  auto& root = nodes_[loss.id()];
  if (root.value.numel() != 1) {
    throw ContractError("backward requires a scalar loss, got shape " + shape_str(root.value.shape()));
  }
  for (auto& n : nodes_) n.grad.reset();
  root.grad = Tensor::full(root.value.shape(), 1.0, DType::F64);
  backward_visits_ = 0;
  for (std::size_t i = loss.id() + 1; i-- > 0;) {
    auto& node = nodes_[i];
    if (!node.grad || !node.backward) continue;
    ++backward_visits_;
    // Copy: the callback may accumulate into earlier nodes only, but keep
    // the gradient alive independently of deque internals.
    const Tensor g = *node.grad;
    node.backward(*this, g);
  }
}

Tensor Tape::grad(const Var& v) const {
  check_owner(v);
  const auto& node = nodes_[v.id()];
  if (node.grad) return *node.grad;
  return Tensor::zeros(node.value.shape(), DType::F64);
}

void Tape::accumulate(const Var& v, const Tensor& delta) {
  check_owner(v);
  auto& node = nodes_[v.id()];
  if (!node.requires_grad) return;
  if (delta.shape() != node.value.shape()) {
    throw DimensionError("gradient shape " + shape_str(delta.shape()) + " does not match value shape " +
                         shape_str(node.value.shape()));
  }
  if (!node.grad) {
    node.grad = Tensor(delta.shape(), std::vector<double>(delta.data().begin(), delta.data().end()), DType::F64);
    return;
  }
  auto dst = node.grad->mutable_data();
  auto src = delta.data();
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

namespace ag {

namespace {

Tape& tape_of(const Var& v) {
  if (!v.tape()) throw ContractError("Var is not bound to a tape");
  return *v.tape();
}

void require_same_shape(const char* op, const Var& a, const Var& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
}

Tensor like(const Tensor& t) { return Tensor::zeros(t.shape(), DType::F64); }

}  // namespace

Var matmul(const Var& a, const Var& b) {
  Tape& tape = tape_of(a);
  Tensor out = ops::matmul(a.value(), b.value(), tape.counter());
  return tape.record(std::move(out), {a, b}, [a, b](Tape& t, const Tensor& g) {
    if (a.requires_grad()) t.accumulate(a, ops::matmul_nt(g, b.value()));
    if (b.requires_grad()) t.accumulate(b, ops::matmul_tn(a.value(), g));
  });
}

Var linear(const Var& x, const Var& w, const Var& b) {
  Tape& tape = tape_of(x);
  Tensor out = ops::matmul(x.value(), w.value(), tape.counter());
  const auto n = out.dim(1);
  if (b.value().numel() != n) {
    throw DimensionError("linear: bias " + shape_str(b.shape()) + " does not match output " + shape_str(out.shape()));
  }
  auto y = out.mutable_data();
  auto bias = b.value().data();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] += bias[i % n];
  count_flops(tape.counter(), FlopKind::Elementwise, out.numel());
  out.finalize();
  return tape.record(std::move(out), {x, w, b}, [x, w, b](Tape& t, const Tensor& g) {
    if (x.requires_grad()) t.accumulate(x, ops::matmul_nt(g, w.value()));
    if (w.requires_grad()) t.accumulate(w, ops::matmul_tn(x.value(), g));
    if (b.requires_grad()) {
      const auto n = g.dim(1);
      Tensor gb = Tensor::zeros(b.shape(), DType::F64);
      auto gd = g.data();
      auto dst = gb.mutable_data();
      for (std::size_t i = 0; i < gd.size(); ++i) dst[i % n] += gd[i];
      t.accumulate(b, gb);
    }
  });
}

Var bmm(const Var& a, const Var& b) {
  Tape& tape = tape_of(a);
  Tensor out = ops::bmm(a.value(), b.value(), tape.counter());
  return tape.record(std::move(out), {a, b}, [a, b](Tape& t, const Tensor& g) {
    if (a.requires_grad()) t.accumulate(a, ops::bmm_nt(g, b.value()));
    if (b.requires_grad()) t.accumulate(b, ops::bmm_tn(a.value(), g));
  });
}

Var bmm_nt(const Var& a, const Var& b) {
  Tape& tape = tape_of(a);
  Tensor out = ops::bmm_nt(a.value(), b.value(), tape.counter());
  return tape.record(std::move(out), {a, b}, [a, b](Tape& t, const Tensor& g) {
    if (a.requires_grad()) t.accumulate(a, ops::bmm(g, b.value()));
    if (b.requires_grad()) t.accumulate(b, ops::bmm_tn(g, a.value()));
  });
}

Var add(const Var& a, const Var& b) {
  require_same_shape("add", a, b);
  Tape& tape = tape_of(a);
  Tensor out(a.shape(), std::vector<double>(a.value().data().begin(), a.value().data().end()),
             promote(a.value().dtype(), b.value().dtype()));
  auto y = out.mutable_data();
  auto bv = b.value().data();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] += bv[i];
  out.finalize();
  count_flops(tape.counter(), FlopKind::Elementwise, out.numel());
  return tape.record(std::move(out), {a, b}, [a, b](Tape& t, const Tensor& g) {
    t.accumulate(a, g);
    t.accumulate(b, g);
  });
}

Var add_broadcast(const Var& a, const Var& b) {
  const auto& as = a.shape();
  const auto& bs = b.shape();
  if (bs.size() > as.size() || !std::equal(bs.begin(), bs.end(), as.end() - static_cast<std::ptrdiff_t>(bs.size()))) {
    throw DimensionError("add_broadcast: " + shape_str(bs) + " is not a suffix of " + shape_str(as));
  }
  Tape& tape = tape_of(a);
  Tensor out(as, std::vector<double>(a.value().data().begin(), a.value().data().end()),
             promote(a.value().dtype(), b.value().dtype()));
  const auto n = b.value().numel();
  auto y = out.mutable_data();
  auto bv = b.value().data();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] += bv[i % n];
  out.finalize();
  count_flops(tape.counter(), FlopKind::Elementwise, out.numel());
  return tape.record(std::move(out), {a, b}, [a, b](Tape& t, const Tensor& g) {
    t.accumulate(a, g);
    if (b.requires_grad()) {
      Tensor gb = like(b.value());
      const auto n = gb.numel();
      auto dst = gb.mutable_data();
      auto gd = g.data();
      for (std::size_t i = 0; i < gd.size(); ++i) dst[i % n] += gd[i];
      t.accumulate(b, gb);
    }
  });
}

Var mul(const Var& a, const Var& b) {
  require_same_shape("mul", a, b);
  Tape& tape = tape_of(a);
  std::vector<double> y(a.value().numel());
  auto av = a.value().data();
  auto bv = b.value().data();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = av[i] * bv[i];
  Tensor out(a.shape(), std::move(y), promote(a.value().dtype(), b.value().dtype()));
  out.finalize();
  count_flops(tape.counter(), FlopKind::Elementwise, out.numel());
  return tape.record(std::move(out), {a, b}, [a, b](Tape& t, const Tensor& g) {
    auto gd = g.data();
    if (a.requires_grad()) {
      Tensor ga = like(g);
      auto bv = b.value().data();
      auto dst = ga.mutable_data();
      for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = gd[i] * bv[i];
      t.accumulate(a, ga);
    }
    if (b.requires_grad()) {
      Tensor gb = like(g);
      auto av = a.value().data();
      auto dst = gb.mutable_data();
      for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = gd[i] * av[i];
      t.accumulate(b, gb);
    }
  });
}

Var scale(const Var& a, double factor) {
  Tape& tape = tape_of(a);
  Tensor out = a.value();
  for (auto& v : out.mutable_data()) v *= factor;
  out.finalize();
  count_flops(tape.counter(), FlopKind::Elementwise, out.numel());
  return tape.record(std::move(out), {a}, [a, factor](Tape& t, const Tensor& g) {
    Tensor ga = g;
    for (auto& v : ga.mutable_data()) v *= factor;
    t.accumulate(a, ga);
  });
}

Var sum(const Var& a) {
  Tape& tape = tape_of(a);
  double s = 0.0;
  for (auto v : a.value().data()) s += v;
  count_flops(tape.counter(), FlopKind::Elementwise, a.value().numel());
  return tape.record(Tensor::scalar(s, a.value().dtype()), {a}, [a](Tape& t, const Tensor& g) {
    t.accumulate(a, Tensor::full(a.shape(), g.item(), DType::F64));
  });
}

Var sigmoid(const Var& a) {
  Tape& tape = tape_of(a);
  Tensor out = ops::sigmoid(a.value(), tape.counter());
  auto y = std::make_shared<Tensor>(out);
  return tape.record(std::move(out), {a}, [a, y](Tape& t, const Tensor& g) {
    Tensor ga = like(g);
    auto yd = y->data();
    auto gd = g.data();
    auto dst = ga.mutable_data();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = gd[i] * yd[i] * (1.0 - yd[i]);
    t.accumulate(a, ga);
  });
}

Var gelu(const Var& a) {
  Tape& tape = tape_of(a);
  constexpr double kInvSqrt2 = 0.70710678118654752440;
  const double kInvSqrt2Pi = 1.0 / std::sqrt(2.0 * std::numbers::pi);
  Tensor out = a.value();
  for (auto& x : out.mutable_data()) x = 0.5 * x * (1.0 + std::erf(x * kInvSqrt2));
  out.finalize();
  count_flops(tape.counter(), FlopKind::Elementwise, out.numel());
  return tape.record(std::move(out), {a}, [a, kInvSqrt2Pi](Tape& t, const Tensor& g) {
    Tensor ga = like(g);
    auto x = a.value().data();
    auto gd = g.data();
    auto dst = ga.mutable_data();
    for (std::size_t i = 0; i < dst.size(); ++i) {
      const double cdf = 0.5 * (1.0 + std::erf(x[i] * kInvSqrt2));
      const double pdf = kInvSqrt2Pi * std::exp(-0.5 * x[i] * x[i]);
      dst[i] = gd[i] * (cdf + x[i] * pdf);
    }
    t.accumulate(a, ga);
  });
}

Var softmax_lastdim(const Var& a) {
  Tape& tape = tape_of(a);
  Tensor out = ops::softmax_lastdim(a.value(), tape.counter());
  auto y = std::make_shared<Tensor>(out);
  return tape.record(std::move(out), {a}, [a, y](Tape& t, const Tensor& g) {
    const auto n = y->shape().back();
    const auto rows = y->numel() / n;
    Tensor ga = like(g);
    auto yd = y->data();
    auto gd = g.data();
    auto dst = ga.mutable_data();
    for (std::size_t r = 0; r < rows; ++r) {
      double dot = 0.0;
      for (std::size_t j = 0; j < n; ++j) dot += gd[r * n + j] * yd[r * n + j];
      for (std::size_t j = 0; j < n; ++j) dst[r * n + j] = yd[r * n + j] * (gd[r * n + j] - dot);
    }
    t.accumulate(a, ga);
  });
}

Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps) {
  const auto& xs = x.shape();
  if (xs.empty()) throw DimensionError("layer_norm: rank-0 input");
  const auto n = xs.back();
  if (gamma.value().numel() != n || beta.value().numel() != n) {
    throw DimensionError("layer_norm: affine params do not match last axis of " + shape_str(xs));
  }
  Tape& tape = tape_of(x);
  const auto rows = x.value().numel() / n;
  auto xhat = std::make_shared<std::vector<double>>(x.value().numel());
  auto rstd = std::make_shared<std::vector<double>>(rows);
  std::vector<double> y(x.value().numel());
  auto xv = x.value().data();
  auto gv = gamma.value().data();
  auto bv = beta.value().data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = xv.data() + r * n;
    double mean = 0.0;
    for (std::size_t j = 0; j < n; ++j) mean += row[j];
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) var += (row[j] - mean) * (row[j] - mean);
    var /= static_cast<double>(n);
    const double inv = 1.0 / std::sqrt(var + eps);
    (*rstd)[r] = inv;
    for (std::size_t j = 0; j < n; ++j) {
      const double h = (row[j] - mean) * inv;
      (*xhat)[r * n + j] = h;
      y[r * n + j] = h * gv[j] + bv[j];
    }
  }
  Tensor out(xs, std::move(y), promote(x.value().dtype(), gamma.value().dtype()));
  out.finalize();
  count_flops(tape.counter(), FlopKind::Elementwise, 5ull * out.numel());
  return tape.record(std::move(out), {x, gamma, beta}, [x, gamma, beta, xhat, rstd, n, rows](Tape& t, const Tensor& g) {
    auto gd = g.data();
    auto gv = gamma.value().data();
    if (x.requires_grad()) {
      Tensor gx = like(g);
      auto dst = gx.mutable_data();
      for (std::size_t r = 0; r < rows; ++r) {
        double s1 = 0.0, s2 = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
          const double gh = gd[r * n + j] * gv[j];
          s1 += gh;
          s2 += gh * (*xhat)[r * n + j];
        }
        const double inv_n = 1.0 / static_cast<double>(n);
        for (std::size_t j = 0; j < n; ++j) {
          const double gh = gd[r * n + j] * gv[j];
          dst[r * n + j] = (*rstd)[r] * (gh - inv_n * s1 - (*xhat)[r * n + j] * inv_n * s2);
        }
      }
      t.accumulate(x, gx);
    }
    if (gamma.requires_grad() || beta.requires_grad()) {
      Tensor gg = like(gamma.value());
      Tensor gb = like(beta.value());
      auto ggd = gg.mutable_data();
      auto gbd = gb.mutable_data();
      for (std::size_t i = 0; i < gd.size(); ++i) {
        ggd[i % n] += gd[i] * (*xhat)[i];
        gbd[i % n] += gd[i];
      }
      t.accumulate(gamma, gg);
      t.accumulate(beta, gb);
    }
  });
}

Var dropout(const Var& x, double rate, bool active, Rng* rng) {
  if (rate < 0.0 || rate >= 1.0) throw ConfigError("dropout rate must lie in [0,1), got " + std::to_string(rate));
  if (!active || rate == 0.0) return x;
  if (!rng) throw ContractError("dropout requires an RNG when active");
  Tape& tape = tape_of(x);
  auto mask = std::make_shared<std::vector<double>>(x.value().numel());
  std::bernoulli_distribution keep(1.0 - rate);
  const double s = 1.0 / (1.0 - rate);
  for (auto& m : *mask) m = keep(*rng) ? s : 0.0;
  Tensor out = x.value();
  auto y = out.mutable_data();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] *= (*mask)[i];
  out.finalize();
  count_flops(tape.counter(), FlopKind::Elementwise, out.numel());
  return tape.record(std::move(out), {x}, [x, mask](Tape& t, const Tensor& g) {
    Tensor gx = like(g);
    auto gd = g.data();
    auto dst = gx.mutable_data();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = gd[i] * (*mask)[i];
    t.accumulate(x, gx);
  });
}

namespace {

// Shared backward for dense and depthwise convolution. groups == cin means
// depthwise (kernel [C x 1 x kh x kw]).
void conv_backward(Tape& t, const Tensor& g, const Var& input, const Var& kernel, const Var& bias,
                   std::size_t padding, bool depthwise) {
  const auto& x = input.value();
  const auto& k = kernel.value();
  const auto cin = x.dim(0), h = x.dim(1), w = x.dim(2);
  const auto cout = k.dim(0), kh = k.dim(2), kw = k.dim(3);
  const auto oh = g.dim(1), ow = g.dim(2);
  const auto ph = static_cast<std::ptrdiff_t>(padding);
  Tensor gx = like(x);
  Tensor gk = like(k);
  auto xd = x.data();
  auto kd = k.data();
  auto gd = g.data();
  auto gxd = gx.mutable_data();
  auto gkd = gk.mutable_data();
  const std::size_t in_per_out = depthwise ? 1 : cin;
  for (std::size_t co = 0; co < cout; ++co) {
    for (std::size_t q = 0; q < in_per_out; ++q) {
      const std::size_t ci = depthwise ? co : q;
      for (std::size_t u = 0; u < kh; ++u) {
        for (std::size_t v = 0; v < kw; ++v) {
          const std::size_t kidx = ((co * in_per_out + q) * kh + u) * kw + v;
          const double wv = kd[kidx];
          double acc = 0.0;
          for (std::size_t i = 0; i < oh; ++i) {
            const auto si = static_cast<std::ptrdiff_t>(i + u) - ph;
            if (si < 0 || si >= static_cast<std::ptrdiff_t>(h)) continue;
            const std::size_t xrow = (ci * h + static_cast<std::size_t>(si)) * w;
            const std::size_t grow = (co * oh + i) * ow;
            for (std::size_t j = 0; j < ow; ++j) {
              const auto sj = static_cast<std::ptrdiff_t>(j + v) - ph;
              if (sj < 0 || sj >= static_cast<std::ptrdiff_t>(w)) continue;
              const double gv = gd[grow + j];
              acc += gv * xd[xrow + static_cast<std::size_t>(sj)];
              gxd[xrow + static_cast<std::size_t>(sj)] += gv * wv;
            }
          }
          gkd[kidx] += acc;
        }
      }
    }
  }
  if (input.requires_grad()) t.accumulate(input, gx);
  if (kernel.requires_grad()) t.accumulate(kernel, gk);
  if (bias.requires_grad()) {
    Tensor gb = like(bias.value());
    auto gbd = gb.mutable_data();
    for (std::size_t co = 0; co < cout; ++co) {
      for (std::size_t p = 0; p < oh * ow; ++p) gbd[co] += gd[co * oh * ow + p];
    }
    t.accumulate(bias, gb);
  }
}

}  // namespace

Var conv2d(const Var& input, const Var& kernel, const Var& bias, std::size_t padding) {
  Tape& tape = tape_of(input);
  Tensor out = ops::conv2d(input.value(), kernel.value(), &bias.value(), padding, tape.counter());
  return tape.record(std::move(out), {input, kernel, bias}, [input, kernel, bias, padding](Tape& t, const Tensor& g) {
    conv_backward(t, g, input, kernel, bias, padding, false);
  });
}

Var depthwise_conv2d(const Var& input, const Var& kernel, const Var& bias, std::size_t padding) {
  Tape& tape = tape_of(input);
  Tensor out = ops::depthwise_conv2d(input.value(), kernel.value(), &bias.value(), padding, tape.counter());
  return tape.record(std::move(out), {input, kernel, bias}, [input, kernel, bias, padding](Tape& t, const Tensor& g) {
    conv_backward(t, g, input, kernel, bias, padding, true);
  });
}

Var channel_pool(const Var& input, ops::PoolMode mode) {
  Tape& tape = tape_of(input);
  Tensor out = ops::channel_pool(input.value(), mode, tape.counter());
  return tape.record(std::move(out), {input}, [input, mode](Tape& t, const Tensor& g) {
    const auto& x = input.value();
    const auto c = x.dim(0), hw = x.dim(1) * x.dim(2);
    Tensor gx = like(x);
    auto xd = x.data();
    auto gd = g.data();
    auto dst = gx.mutable_data();
    if (mode == ops::PoolMode::Avg) {
      const double inv = 1.0 / static_cast<double>(c);
      for (std::size_t ch = 0; ch < c; ++ch) {
        for (std::size_t p = 0; p < hw; ++p) dst[ch * hw + p] = gd[p] * inv;
      }
    } else {
      for (std::size_t p = 0; p < hw; ++p) {
        std::size_t best = 0;
        for (std::size_t ch = 1; ch < c; ++ch) {
          if (xd[ch * hw + p] > xd[best * hw + p]) best = ch;
        }
        dst[best * hw + p] = gd[p];
      }
    }
    t.accumulate(input, gx);
  });
}

Var concat0(std::span<const Var> parts) {
  if (parts.empty()) throw DimensionError("concat0: no inputs");
  Tape& tape = tape_of(parts[0]);
  Shape shape = parts[0].shape();
  if (shape.empty()) throw DimensionError("concat0: rank-0 input");
  std::vector<double> data;
  DType dtype = parts[0].value().dtype();
  std::size_t lead = 0;
  for (const auto& p : parts) {
    const auto& s = p.shape();
    if (s.size() != shape.size() || !std::equal(s.begin() + 1, s.end(), shape.begin() + 1)) {
      throw DimensionError("concat0: incompatible shapes " + shape_str(shape) + " and " + shape_str(s));
    }
    lead += s[0];
    data.insert(data.end(), p.value().data().begin(), p.value().data().end());
    dtype = promote(dtype, p.value().dtype());
  }
  shape[0] = lead;
  std::vector<Var> inputs(parts.begin(), parts.end());
  return tape.record(Tensor(shape, std::move(data), dtype), parts, [inputs](Tape& t, const Tensor& g) {
    std::size_t offset = 0;
    auto gd = g.data();
    for (const auto& p : inputs) {
      const auto n = p.value().numel();
      if (p.requires_grad()) {
        t.accumulate(p, Tensor(p.shape(), std::vector<double>(gd.begin() + offset, gd.begin() + offset + n), DType::F64));
      }
      offset += n;
    }
  });
}

Var mul_spatial(const Var& x, const Var& map) {
  const auto& xs = x.shape();
  const auto& ms = map.shape();
  if (xs.size() != 3 || ms.size() != 3 || ms[0] != 1 || ms[1] != xs[1] || ms[2] != xs[2]) {
    throw DimensionError("mul_spatial: map " + shape_str(ms) + " does not broadcast over " + shape_str(xs));
  }
  Tape& tape = tape_of(x);
  const auto hw = xs[1] * xs[2];
  Tensor out(xs, std::vector<double>(x.value().data().begin(), x.value().data().end()),
             promote(x.value().dtype(), map.value().dtype()));
  auto y = out.mutable_data();
  auto m = map.value().data();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] *= m[i % hw];
  out.finalize();
  count_flops(tape.counter(), FlopKind::Elementwise, out.numel());
  return tape.record(std::move(out), {x, map}, [x, map, hw](Tape& t, const Tensor& g) {
    auto gd = g.data();
    if (x.requires_grad()) {
      Tensor gx = like(g);
      auto m = map.value().data();
      auto dst = gx.mutable_data();
      for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = gd[i] * m[i % hw];
      t.accumulate(x, gx);
    }
    if (map.requires_grad()) {
      Tensor gm = like(map.value());
      auto xd = x.value().data();
      auto dst = gm.mutable_data();
      for (std::size_t i = 0; i < gd.size(); ++i) dst[i % hw] += gd[i] * xd[i];
      t.accumulate(map, gm);
    }
  });
}

Var reshape(const Var& a, Shape shape) {
  Tape& tape = tape_of(a);
  Tensor out = a.value().reshaped(std::move(shape));
  return tape.record(std::move(out), {a}, [a](Tape& t, const Tensor& g) { t.accumulate(a, g.reshaped(a.shape())); });
}

Var transpose2d(const Var& a) {
  Tape& tape = tape_of(a);
  return tape.record(ops::transpose2d(a.value()), {a},
                     [a](Tape& t, const Tensor& g) { t.accumulate(a, ops::transpose2d(g)); });
}

Var permute(const Var& a, std::vector<std::size_t> perm) {
  Tape& tape = tape_of(a);
  Tensor out = ops::permute(a.value(), perm);
  std::vector<std::size_t> inverse(perm.size());
  for (std::size_t i = 0; i < perm.size(); ++i) inverse[perm[i]] = i;
  return tape.record(std::move(out), {a},
                     [a, inverse](Tape& t, const Tensor& g) { t.accumulate(a, ops::permute(g, inverse)); });
}

Var gather_rows(const Var& a, std::shared_ptr<const std::vector<std::size_t>> index) {
  Tape& tape = tape_of(a);
  Tensor out = ops::gather_rows(a.value(), *index);
  return tape.record(std::move(out), {a}, [a, index](Tape& t, const Tensor& g) {
    const auto c = a.shape()[1];
    Tensor ga = like(a.value());
    auto gd = g.data();
    auto dst = ga.mutable_data();
    for (std::size_t r = 0; r < index->size(); ++r) {
      for (std::size_t j = 0; j < c; ++j) dst[(*index)[r] * c + j] += gd[r * c + j];
    }
    t.accumulate(a, ga);
  });
}

Var gather_table(const Var& table, std::shared_ptr<const std::vector<std::size_t>> index, std::size_t side) {
  const auto& ts = table.shape();
  if (ts.size() != 2) throw DimensionError("gather_table: table must be [h x R], got " + shape_str(ts));
  if (index->size() != side * side) throw DimensionError("gather_table: index size does not match side");
  Tape& tape = tape_of(table);
  const auto heads = ts[0], entries = ts[1];
  std::vector<double> data(heads * index->size());
  auto tv = table.value().data();
  for (std::size_t j = 0; j < heads; ++j) {
    for (std::size_t e = 0; e < index->size(); ++e) {
      const auto src = (*index)[e];
      if (src >= entries) throw DimensionError("gather_table: index entry out of range");
      data[j * index->size() + e] = tv[j * entries + src];
    }
  }
  Tensor out({heads, side, side}, std::move(data), table.value().dtype());
  return tape.record(std::move(out), {table}, [table, index, heads, entries](Tape& t, const Tensor& g) {
    Tensor gt = like(table.value());
    auto gd = g.data();
    auto dst = gt.mutable_data();
    for (std::size_t j = 0; j < heads; ++j) {
      for (std::size_t e = 0; e < index->size(); ++e) dst[j * entries + (*index)[e]] += gd[j * index->size() + e];
    }
    t.accumulate(table, gt);
  });
}

Var mean_rows(const Var& a) {
  const auto& s = a.shape();
  if (s.size() != 2) throw DimensionError("mean_rows: expected [L x C], got " + shape_str(s));
  Tape& tape = tape_of(a);
  const auto rows = s[0], c = s[1];
  std::vector<double> y(c, 0.0);
  auto av = a.value().data();
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t j = 0; j < c; ++j) y[j] += av[r * c + j];
  }
  for (auto& v : y) v /= static_cast<double>(rows);
  Tensor out({c}, std::move(y), a.value().dtype());
  out.finalize();
  count_flops(tape.counter(), FlopKind::Elementwise, a.value().numel());
  return tape.record(std::move(out), {a}, [a, rows, c](Tape& t, const Tensor& g) {
    Tensor ga = like(a.value());
    auto gd = g.data();
    auto dst = ga.mutable_data();
    const double inv = 1.0 / static_cast<double>(rows);
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t j = 0; j < c; ++j) dst[r * c + j] = gd[j] * inv;
    }
    t.accumulate(a, ga);
  });
}

Var stack(std::span<const Var> parts) {
  if (parts.empty()) throw DimensionError("stack: no inputs");
  Tape& tape = tape_of(parts[0]);
  const Shape inner = parts[0].shape();
  std::vector<double> data;
  DType dtype = parts[0].value().dtype();
  for (const auto& p : parts) {
    if (p.shape() != inner) throw DimensionError("stack: shape mismatch " + shape_str(inner) + " vs " + shape_str(p.shape()));
    data.insert(data.end(), p.value().data().begin(), p.value().data().end());
    dtype = promote(dtype, p.value().dtype());
  }
  Shape shape{parts.size()};
  shape.insert(shape.end(), inner.begin(), inner.end());
  std::vector<Var> inputs(parts.begin(), parts.end());
  return tape.record(Tensor(std::move(shape), std::move(data), dtype), parts, [inputs](Tape& t, const Tensor& g) {
    auto gd = g.data();
    std::size_t offset = 0;
    for (const auto& p : inputs) {
      const auto n = p.value().numel();
      if (p.requires_grad()) {
        t.accumulate(p, Tensor(p.shape(), std::vector<double>(gd.begin() + offset, gd.begin() + offset + n), DType::F64));
      }
      offset += n;
    }
  });
}

Var cross_entropy(const Var& logits, std::span<const int> labels) {
  const auto& s = logits.shape();
  if (s.size() != 2) throw DimensionError("cross_entropy: expected [B x K] logits, got " + shape_str(s));
  const auto batch = s[0], k = s[1];
  if (labels.size() != batch) throw DimensionError("cross_entropy: label count does not match batch");
  for (auto l : labels) {
    if (l < 0 || static_cast<std::size_t>(l) >= k) {
      throw ContractError("cross_entropy: label " + std::to_string(l) + " outside [0," + std::to_string(k) + ")");
    }
  }
  Tape& tape = tape_of(logits);
  auto probs = std::make_shared<std::vector<double>>(batch * k);
  auto x = logits.value().data();
  double loss = 0.0;
  for (std::size_t b = 0; b < batch; ++b) {
    const double* row = x.data() + b * k;
    const double mx = *std::max_element(row, row + k);
    double z = 0.0;
    for (std::size_t j = 0; j < k; ++j) z += std::exp(row[j] - mx);
    const double lse = mx + std::log(z);
    for (std::size_t j = 0; j < k; ++j) (*probs)[b * k + j] = std::exp(row[j] - lse);
    loss += lse - row[labels[b]];
  }
  loss /= static_cast<double>(batch);
  count_flops(tape.counter(), FlopKind::Softmax, 5ull * batch * k);
  std::vector<int> lab(labels.begin(), labels.end());
  return tape.record(Tensor::scalar(loss, logits.value().dtype()), {logits},
                     [logits, probs, lab, batch, k](Tape& t, const Tensor& g) {
                       const double scale = g.item() / static_cast<double>(batch);
                       Tensor gl = like(logits.value());
                       auto dst = gl.mutable_data();
                       for (std::size_t b = 0; b < batch; ++b) {
                         for (std::size_t j = 0; j < k; ++j) {
                           dst[b * k + j] = scale * ((*probs)[b * k + j] - (static_cast<int>(j) == lab[b] ? 1.0 : 0.0));
                         }
                       }
                       t.accumulate(logits, gl);
                     });
}

}  // namespace ag
}  // namespace winvit

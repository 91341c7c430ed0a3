#include "winvit/checks.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <functional>
#include <sstream>

#include "winvit/cost_model.hpp"
#include "winvit/errors.hpp"
#include "winvit/spatial_attention.hpp"
#include "winvit/training.hpp"

namespace winvit::checks {

namespace {

double max_abs_diff(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) return INFINITY;
  double m = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

std::string sci(double v) {
  std::ostringstream os;
  os.precision(3);
  os << std::scientific << v;
  return os.str();
}

SuiteResult guarded(const std::string& name, const std::function<SuiteResult()>& body) {
  try {
    return body();
  } catch (const std::exception& e) {
    return SuiteResult{name, false, std::string("threw: ") + e.what()};
  }
}

model::ModelConfig gradient_model_config(const model::ModelConfig& base) {
  model::ModelConfig c;
  c.image_size = 16;
  c.patch_size = 4;
  c.embed_dim = 8;
  c.heads = 2;
  c.window = 2;
  c.depth = 1;
  c.num_classes = base.num_classes;
  c.sharing = base.sharing;
  c.attention = base.attention;
  c.seed = base.seed;
  c.dtype = DType::F64;
  return c;
}

}  // namespace

double gradient_tolerance(bool f64) { return f64 ? 1e-5 : 1e-3; }

Tensor naive_attention(const Tensor& x, const attention::ProjectionParams& params, const std::optional<Tensor>& bias) {
  const auto t = x.dim(0), c = x.dim(1), h = params.heads, d = params.head_dim();
  auto project = [&](const Tensor& w, const Tensor& b) {
    std::vector<double> out(t * c);
    for (std::size_t i = 0; i < t; ++i) {
      for (std::size_t o = 0; o < c; ++o) {
        double s = b[o];
        for (std::size_t k = 0; k < c; ++k) s += x[i * c + k] * w[k * c + o];
        out[i * c + o] = s;
      }
    }
    return out;
  };
  const auto q = project(params.w_q, params.b_q), k = project(params.key_weight(), params.b_k),
             v = project(params.w_v, params.b_v);
  std::vector<double> z(t * c, 0.0);
  const double scale = 1.0 / std::sqrt(static_cast<double>(d));
  for (std::size_t head = 0; head < h; ++head) {
    for (std::size_t a = 0; a < t; ++a) {
      std::vector<double> s(t);
      for (std::size_t b = 0; b < t; ++b) {
        double dot = 0.0;
        for (std::size_t e = 0; e < d; ++e) dot += q[a * c + head * d + e] * k[b * c + head * d + e];
        s[b] = dot * scale + (bias ? (*bias)[(head * t + a) * t + b] : 0.0);
      }
      const double mx = *std::max_element(s.begin(), s.end());
      double sum = 0.0;
      for (auto& e : s) sum += (e = std::exp(e - mx));
      for (std::size_t b = 0; b < t; ++b) {
        for (std::size_t e = 0; e < d; ++e) z[a * c + head * d + e] += s[b] / sum * v[b * c + head * d + e];
      }
    }
  }
  std::vector<double> out(t * c);
  for (std::size_t i = 0; i < t; ++i) {
    for (std::size_t o = 0; o < c; ++o) {
      double s = params.b_o[o];
      for (std::size_t k2 = 0; k2 < c; ++k2) s += z[i * c + k2] * params.w_o[k2 * c + o];
      out[i * c + o] = s;
    }
  }
  return Tensor({t, c}, std::move(out), DType::F64);
}

SuiteResult roundtrip_suite(const CheckOptions& options) {
  return guarded("roundtrip", [&] {
    std::size_t geometries = 0;
    Rng rng(options.config.seed);
    for (std::size_t h = 1; h <= 16; ++h) {
      for (std::size_t w = 1; w <= 16; ++w) {
        for (std::size_t m = 1; m <= std::min(h, w); ++m) {
          if (h % m || w % m) continue;
          auto x = Tensor::randn({h, w, 3}, rng, 1.0, DType::F64);
          auto back = attention::window_merge(attention::window_partition(x, m),
                                              attention::WindowGeometry::make(h, w, m));
          if (!back.same_values(x)) {
            return SuiteResult{"roundtrip", false, "partition/merge differs at H=" + std::to_string(h) +
                                                       " W=" + std::to_string(w) + " M=" + std::to_string(m)};
          }
          ++geometries;
        }
      }
    }
    auto m = model::Model::init(options.config);
    const std::filesystem::path dir = options.scratch_dir.empty() ? std::filesystem::temp_directory_path()
                                                                  : std::filesystem::path(options.scratch_dir);
    auto path = (dir / ("winvit_check_" + std::to_string(options.config.seed) + ".ckpt")).string();
    model::save_checkpoint(m, path);
    auto loaded = model::load_checkpoint(path, options.config);
    std::filesystem::remove(path);
    auto a = m.parameters(), b = loaded.parameters();
    for (std::size_t i = 0; i < a.size(); ++i) {
      if (!a[i].tensor->same_values(*b[i].tensor)) {
        return SuiteResult{"roundtrip", false, "checkpoint parameter " + a[i].name + " changed"};
      }
    }
    return SuiteResult{"roundtrip", true,
                       std::to_string(geometries) + " geometries, " + std::to_string(a.size()) + " tensors"};
  });
}

SuiteResult stochasticity_suite(const CheckOptions& options) {
  return guarded("row-stochasticity", [&] {
    const auto& c = options.config;
    Rng rng(c.seed + 1);
    auto params = attention::WindowAttentionParams::init(c.embed_dim, c.heads, c.window, c.sharing, 0.0, rng,
                                                         DType::F64);
    params.bias_table = Tensor::randn(params.bias_table.shape(), rng, 1.0, DType::F64);
    const auto geom = attention::WindowGeometry::make(c.grid(), c.grid(), c.window);
    auto x = Tensor::randn({geom.num_windows(), geom.tokens_per_window(), c.embed_dim}, rng, 1.0, DType::F64);
    attention::AttentionProbe probe;
    attention::window_mha_forward(x, params, false, 0, &probe);
    const auto t = geom.tokens_per_window();
    double worst = 0.0;
    const auto p = probe.probs.data();
    for (std::size_t row = 0; row < p.size() / t; ++row) {
      double s = 0.0;
      for (std::size_t j = 0; j < t; ++j) {
        const double v = p[row * t + j];
        if (!(v > 0.0 && v <= 1.0)) return SuiteResult{"row-stochasticity", false, "probability outside (0,1]"};
        s += v;
      }
      worst = std::max(worst, std::abs(s - 1.0));
    }
    if (worst > 1e-12) return SuiteResult{"row-stochasticity", false, "row sum off by " + sci(worst)};
    auto sp = sam::SamParams::init(rng, DType::F64);
    auto map = sam::sam_map(Tensor::randn({c.hidden(), c.grid(), c.grid()}, rng, 1.0, DType::F64), sp);
    for (auto v : map.data()) {
      if (!(v > 0.0 && v < 1.0)) return SuiteResult{"row-stochasticity", false, "SAM gate outside (0,1)"};
    }
    return SuiteResult{"row-stochasticity", true, "max |row sum - 1| = " + sci(worst)};
  });
}

SuiteResult gradient_suite(const CheckOptions& options) {
  return guarded("gradient", [&] {
    const auto cfg = gradient_model_config(options.config);
    auto m = model::Model::init(cfg);
    train::randomize_parameters(m, cfg.seed, 0.3);
    Rng rng(cfg.seed + 7);
    auto image = Tensor::uniform({3, cfg.image_size, cfg.image_size}, rng, 0.0, 1.0, DType::F64);
    const double tol = gradient_tolerance(options.f64);
    auto entries = train::gradient_check(m, image, static_cast<int>(1 % cfg.num_classes));
    double worst = 0.0;
    std::string worst_name;
    std::size_t checked = 0;
    for (const auto& e : entries) {
      checked += e.checked;
      if (e.max_rel_error > worst) {
        worst = e.max_rel_error;
        worst_name = e.name;
      }
    }
    const bool ok = worst < tol;
    return SuiteResult{"gradient", ok,
                       std::to_string(checked) + " entries, max rel error " + sci(worst) + " (" + worst_name +
                           "), tolerance " + sci(tol)};
  });
}

SuiteResult equivalence_suite(const CheckOptions& options) {
  return guarded("equivalence", [&] {
    const auto& c = options.config;
    const auto t = c.window * c.window;
    double worst_global = 0.0, worst_naive = 0.0, worst_bias = 0.0;
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
      Rng rng(seed);
      auto proj = attention::ProjectionParams::init(c.embed_dim, c.heads, c.sharing, 0.0, rng, DType::F64);
      auto wp = attention::WindowAttentionParams::from_projection(proj, c.window);
      auto x = Tensor::randn({1, t, c.embed_dim}, rng, 1.0, DType::F64);
      auto flat = x.reshaped({t, c.embed_dim});
      auto windowed = attention::window_mha_forward(x, wp, false, 0).reshaped({t, c.embed_dim});
      auto global = attention::global_mha_forward(flat, proj, false, 0);
      auto naive = naive_attention(flat, proj);
      worst_global = std::max(worst_global, max_abs_diff(windowed, global));
      worst_naive = std::max({worst_naive, max_abs_diff(windowed, naive), max_abs_diff(global, naive)});

      wp.bias_table = Tensor::randn(wp.bias_table.shape(), rng, 1.0, DType::F64);
      std::vector<double> dense(c.heads * t * t);
      for (std::size_t h = 0; h < c.heads; ++h) {
        for (std::size_t i = 0; i < t; ++i) {
          for (std::size_t j = 0; j < t; ++j) {
            dense[(h * t + i) * t + j] = wp.bias_table[h * wp.index.table_size() + wp.index(i, j)];
          }
        }
      }
      auto biased = attention::window_mha_forward(x, wp, false, 0).reshaped({t, c.embed_dim});
      auto naive_biased = naive_attention(flat, proj, Tensor({c.heads, t, t}, std::move(dense), DType::F64));
      worst_bias = std::max(worst_bias, max_abs_diff(biased, naive_biased));
    }
    const bool ok = worst_global < 1e-5 && worst_naive < 1e-5 && worst_bias < 1e-5;
    return SuiteResult{"equivalence", ok,
                       "window vs global " + sci(worst_global) + ", vs naive " + sci(worst_naive) +
                           ", biased vs naive " + sci(worst_bias)};
  });
}

SuiteResult cost_suite(const CheckOptions& options) {
  return guarded("cost-reconciliation", [&] {
    const auto& base = options.config;
    std::uint64_t attention_flops[2] = {0, 0};
    for (auto variant : {model::AttentionVariant::Windowed, model::AttentionVariant::Global}) {
      auto cfg = base;
      cfg.attention = variant;
      auto m = model::Model::init(cfg);
      Rng rng(cfg.seed + 3);
      auto image = Tensor::uniform({3, cfg.image_size, cfg.image_size}, rng, 0.0, 1.0, cfg.dtype);
      auto run = cost::instrumented_forward(m, image);
      auto analytic = cost::model_cost(cfg, variant);
      auto measured = cost::measured_report(run.counter, analytic);
      for (std::size_t i = 0; i < analytic.rows.size(); ++i) {
        if (analytic.rows[i].flops != measured.rows[i].flops) {
          const auto& r = analytic.rows[i];
          return SuiteResult{"cost-reconciliation", false,
                             model::to_string(variant) + " " + r.layer + "." + r.name + ": analytic " +
                                 std::to_string(r.flops) + " vs measured " + std::to_string(measured.rows[i].flops)};
        }
      }
      if (analytic.total_flops() != run.counter.total().total()) {
        return SuiteResult{"cost-reconciliation", false, "unattributed FLOPs in the " + model::to_string(variant) +
                                                             " forward pass"};
      }
      if (analytic.total_params() != m.parameter_count()) {
        return SuiteResult{"cost-reconciliation", false, "parameter count disagrees with the model"};
      }
      attention_flops[variant == model::AttentionVariant::Global] = analytic.flops_of("attention");
    }
    const std::uint64_t l = base.tokens(), c = base.embed_dim, mm = base.window * base.window;
    const std::uint64_t expected = 4 * l * c * (l - mm) * base.depth;
    if (attention_flops[1] - attention_flops[0] != expected) {
      return SuiteResult{"cost-reconciliation", false, "windowed/global attention delta is not 4LC(L-M^2) per block"};
    }
    return SuiteResult{"cost-reconciliation", true,
                       "rows exact for both variants, attention delta " + std::to_string(expected)};
  });
}

std::vector<SuiteResult> run_all(const CheckOptions& options) {
  options.config.validate();
  return {roundtrip_suite(options), stochasticity_suite(options), gradient_suite(options), equivalence_suite(options),
          cost_suite(options)};
}

}  // namespace winvit::checks

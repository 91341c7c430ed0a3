#include "winvit/cost_model.hpp"

#include <cmath>
#include <cstdio>
#include <iomanip>
#include <sstream>

#include "winvit/errors.hpp"

namespace winvit::cost {

namespace {

using std::uint64_t;

std::size_t grid_side(std::size_t tokens) {
  auto side = static_cast<std::size_t>(std::llround(std::sqrt(static_cast<double>(tokens))));
  if (side * side != tokens) throw ConfigError("L=" + std::to_string(tokens) + " is not a square token grid");
  return side;
}

std::string block_label(std::size_t i) { return "block" + std::to_string(i); }

std::string pad(const std::string& s, std::size_t width) {
  return s.size() >= width ? s + " " : s + std::string(width - s.size(), ' ');
}

std::string percent(uint64_t base, uint64_t reduced) {
  if (base == 0) return "n/a";
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.2f%%",
                100.0 * (static_cast<double>(base) - static_cast<double>(reduced)) / static_cast<double>(base));
  return buf;
}

}  // namespace

AttentionCost attention_cost(std::size_t tokens, std::size_t channels, std::size_t heads, std::size_t window,
                             AttentionVariant variant, attention::SharingMode sharing) {
  const auto side = grid_side(tokens);
  if (heads == 0 || channels % heads != 0) {
    throw ConfigError("C=" + std::to_string(channels) + " is not divisible by h=" + std::to_string(heads));
  }
  const uint64_t l = tokens, c = channels, h = heads, m = window;
  AttentionCost cost;
  cost.params = 4 * c * c + 4 * c;
  if (sharing == attention::SharingMode::SharedQK) cost.params -= c * c;
  if (variant == AttentionVariant::Windowed) {
    if (window == 0 || side % window != 0) {
      throw ConfigError("window M=" + std::to_string(window) + " does not tile the " + std::to_string(side) + "x" +
                        std::to_string(side) + " token grid");
    }
    cost.params += h * (2 * m - 1) * (2 * m - 1);
    cost.flops = 8 * l * c * c + 4 * l * m * m * c;
  } else {
    cost.flops = 8 * l * c * c + 4 * l * l * c;
  }
  return cost;
}

uint64_t CostReport::total_params() const {
  uint64_t n = 0;
  for (const auto& r : rows) n += r.params;
  return n;
}

uint64_t CostReport::total_flops() const {
  uint64_t n = 0;
  for (const auto& r : rows) n += r.flops;
  return n;
}

uint64_t CostReport::params_of(const std::string& name) const {
  uint64_t n = 0;
  for (const auto& r : rows) {
    if (r.name == name) n += r.params;
  }
  return n;
}

uint64_t CostReport::flops_of(const std::string& name) const {
  uint64_t n = 0;
  for (const auto& r : rows) {
    if (r.name == name) n += r.flops;
  }
  return n;
}

CostReport model_cost(const model::ModelConfig& config, AttentionVariant variant) {
  config.validate();
  const uint64_t l = config.tokens(), c = config.embed_dim, h = config.heads, rc = config.hidden(),
                 k = config.num_classes, pd = config.patch_dim();
  const uint64_t t = variant == AttentionVariant::Windowed ? config.window * config.window : l;
  const uint64_t sam_params = 2 * sam::kKernelSize * sam::kKernelSize + 1;

  CostReport report;
  report.variant = variant;
  report.rows.push_back({"stem", "patch_embed", pd * c + c, 2 * l * pd * c});
  report.rows.push_back({"stem", "elementwise", 0, l * c});

  const auto attn = attention_cost(l, c, h, config.window, variant, config.sharing);
  for (std::size_t i = 0; i < config.depth; ++i) {
    const auto layer = block_label(i);
    report.rows.push_back({layer, "norm", 4 * c, 0});
    report.rows.push_back({layer, "attention", attn.params, attn.flops});
    report.rows.push_back({layer, "ffn", 2 * c * rc + rc + c, 4 * l * c * rc});
    report.rows.push_back({layer, "dwconv", 9 * rc + rc, 2 * 9 * rc * l});
    report.rows.push_back({layer, "sam", sam_params, 2 * 2 * sam::kKernelSize * sam::kKernelSize * l});
    // Two layer norms at 5/element, seven C-wide bias/residual passes, the
    // score scale (+ relative bias), softmax, and the rC-wide FFN/SAM passes.
    const uint64_t score_elems = h * l * t;
    const uint64_t score_passes = variant == AttentionVariant::Windowed ? 2 : 1;
    const uint64_t pointwise = 17 * l * c + score_passes * score_elems + 5 * score_elems + 7 * rc * l + 2 * l;
    report.rows.push_back({layer, "elementwise", 0, pointwise});
  }

  report.rows.push_back({"head", "head", c * k + k, 2 * c * k});
  report.rows.push_back({"head", "elementwise", 0, l * c + k});
  return report;
}

InstrumentedRun instrumented_forward(model::Model& model, const Tensor& image) {
  InstrumentedRun run;
  run.output = model::classify(image, model, &run.counter);
  return run;
}

CostReport measured_report(const FlopCounter& counter, const CostReport& analytical) {
  CostReport out;
  out.variant = analytical.variant;
  for (const auto& row : analytical.rows) {
    CostRow m = row;
    if (row.name == "elementwise") {
      m.flops = counter.under(row.layer).pointwise();
    } else if (row.name == "patch_embed" || row.name == "head") {
      m.flops = counter.under(row.layer).mac_derived();
    } else {
      m.flops = counter.under(row.layer + "." + row.name).mac_derived();
    }
    out.rows.push_back(std::move(m));
  }
  return out;
}

std::string format_units(uint64_t count) {
  char buf[48];
  if (count >= 1000000000ull) {
    std::snprintf(buf, sizeof(buf), "%.4gG", static_cast<double>(count) / 1e9);
  } else {
    std::snprintf(buf, sizeof(buf), "%.4gM", static_cast<double>(count) / 1e6);
  }
  return buf;
}

std::string format_report(const CostReport& report) {
  std::ostringstream os;
  os << "variant: " << model::to_string(report.variant) << "\n";
  os << pad("layer", 10) << pad("name", 14) << std::setw(12) << "params" << std::setw(14) << "flops" << "\n";
  for (const auto& r : report.rows) {
    os << pad(r.layer, 10) << pad(r.name, 14) << std::setw(12) << r.params << std::setw(14) << r.flops << "\n";
  }
  os << pad("total", 24) << std::setw(12) << report.total_params() << std::setw(14) << report.total_flops() << "\n";
  os << pad("", 24) << std::setw(12) << format_units(report.total_params()) << std::setw(14)
     << format_units(report.total_flops()) << "\n";
  return os.str();
}

std::string format_comparison(const CostReport& windowed, const CostReport& global) {
  std::ostringstream os;
  auto line = [&](const std::string& label, uint64_t w, uint64_t g) {
    os << pad(label, 18) << std::setw(14) << w << std::setw(14) << g << std::setw(14)
       << static_cast<std::int64_t>(g) - static_cast<std::int64_t>(w) << std::setw(11) << percent(g, w) << "\n";
  };
  os << pad("", 18) << std::setw(14) << "windowed" << std::setw(14) << "global" << std::setw(14) << "delta"
     << std::setw(11) << "reduction" << "\n";
  line("params", windowed.total_params(), global.total_params());
  line("flops", windowed.total_flops(), global.total_flops());
  line("attention params", windowed.params_of("attention"), global.params_of("attention"));
  line("attention flops", windowed.flops_of("attention"), global.flops_of("attention"));
  return os.str();
}

std::string to_csv(const std::vector<CostReport>& reports) {
  std::ostringstream os;
  os << "layer,name,params,flops,variant\n";
  for (const auto& report : reports) {
    const auto variant = model::to_string(report.variant);
    for (const auto& r : report.rows) {
      os << r.layer << "," << r.name << "," << r.params << "," << r.flops << "," << variant << "\n";
    }
  }
  return os.str();
}

}  // namespace winvit::cost

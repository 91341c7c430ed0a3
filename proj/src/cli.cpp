#include "winvit/cli.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <ostream>
#include <sstream>

#include "winvit/checks.hpp"
#include "winvit/cost_model.hpp"
#include "winvit/errors.hpp"

namespace winvit::cli {

namespace fs = std::filesystem;

namespace {

std::string trim(const std::string& s) {
  auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  return s.substr(b, s.find_last_not_of(" \t\r\n") - b + 1);
}

std::size_t to_size(const std::string& key, const std::string& value) {
  try {
    std::size_t pos = 0;
    if (value.empty() || value[0] == '-') throw std::invalid_argument("negative");
    auto v = std::stoull(value, &pos);
    if (pos != value.size()) throw std::invalid_argument("trailing");
    return static_cast<std::size_t>(v);
  } catch (const std::exception&) {
    throw ConfigError("key '" + key + "' expects a non-negative integer, got '" + value + "'");
  }
}

double to_real(const std::string& key, const std::string& value) {
  try {
    std::size_t pos = 0;
    auto v = std::stod(value, &pos);
    if (pos != value.size()) throw std::invalid_argument("trailing");
    return v;
  } catch (const std::exception&) {
    throw ConfigError("key '" + key + "' expects a number, got '" + value + "'");
  }
}

std::string real_str(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

void apply_line(RunConfig& config, const std::string& raw, const std::string& origin) {
  const auto line = trim(raw);
  const auto eq = line.find('=');
  if (eq == std::string::npos) throw ConfigError(origin + ": expected key=value, got '" + line + "'");
  config.set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw Error("cannot write '" + path.string() + "'");
  f << text;
}

std::string fmt_metric(double v) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(4) << v;
  return os.str();
}

std::string metrics_line(const train::Metrics& m) {
  return "acc=" + fmt_metric(m.accuracy) + " pre=" + fmt_metric(m.precision) + " rec=" + fmt_metric(m.recall) +
         " f1=" + fmt_metric(m.f1);
}

struct Invocation {
  std::string command;
  RunConfig config;
  std::string checkpoint;
  std::string out_dir;
  bool f64 = false;
};

model::Model model_for(const Invocation& inv) {
  if (inv.checkpoint.empty()) return model::Model::init(inv.config.model);
  return model::load_checkpoint(inv.checkpoint, inv.config.model);
}

fs::path prepare_out(const Invocation& inv, const std::string& fallback) {
  fs::path dir = inv.out_dir.empty() ? fs::path(fallback) : fs::path(inv.out_dir);
  if (dir.empty()) return dir;
  fs::create_directories(dir);
  write_text(dir / "config.txt", inv.config.serialize());
  return dir;
}

int cmd_describe(const Invocation& inv, std::ostream& out) {
  inv.config.validate();
  const auto windowed = cost::model_cost(inv.config.model, model::AttentionVariant::Windowed);
  const auto global = cost::model_cost(inv.config.model, model::AttentionVariant::Global);
  const auto csv = cost::to_csv({windowed, global});
  out << "# FLOPs = 2 x MACs for matmul/conv rows; elementwise rows count 1 per element"
         " (layer norm 5, softmax 5)\n";
  out << cost::format_report(windowed) << "\n" << cost::format_report(global) << "\n";
  out << cost::format_comparison(windowed, global) << "\n" << csv;
  auto dir = prepare_out(inv, "");
  if (!dir.empty()) write_text(dir / "cost.csv", csv);
  return kOk;
}

int cmd_check(const Invocation& inv, std::ostream& out) {
  inv.config.validate();
  auto dir = prepare_out(inv, "");
  checks::CheckOptions options{inv.config.model, inv.f64, dir.string()};
  auto results = checks::run_all(options);
  std::size_t failed = 0;
  for (const auto& r : results) {
    out << std::left << std::setw(22) << r.name << (r.passed ? "PASS  " : "FAIL  ") << r.detail << "\n";
    if (!r.passed) ++failed;
  }
  if (failed) {
    out << failed << " of " << results.size() << " suites failed\n";
    return kRuntimeFailure;
  }
  out << "all " << results.size() << " suites passed\n";
  return kOk;
}

int cmd_train(const Invocation& inv, std::ostream& out, std::ostream& err) {
  inv.config.validate();
  auto dir = prepare_out(inv, "out");
  auto splits = load_data(inv.config);
  auto m = model_for(inv);
  std::ofstream csv(dir / "metrics.csv", std::ios::trunc);
  if (!csv) throw Error("cannot write '" + (dir / "metrics.csv").string() + "'");
  train::TrainHooks hooks;
  hooks.csv = &csv;
  hooks.diagnostics = &err;
  hooks.track_train_accuracy = false;
  hooks.checkpoint = [&](std::size_t step) {
    model::save_checkpoint(m, (dir / "checkpoint.ckpt").string());
    out << "step " << step << " checkpoint written\n";
  };
  auto result = train::train_loop(m, splits.train, splits.val, inv.config.train, hooks);
  model::save_checkpoint(m, (dir / "model.ckpt").string());
  const auto& last = result.log.back();
  out << "trained " << result.total_steps << " steps, final loss " << last.loss << "\n";
  if (last.eval) out << (splits.val.items.empty() ? "train " : "val ") << metrics_line(*last.eval) << "\n";
  out << "wrote " << (dir / "model.ckpt").string() << " and " << (dir / "metrics.csv").string() << "\n";
  return kOk;
}

int cmd_eval(const Invocation& inv, std::ostream& out, std::ostream& err) {
  inv.config.validate();
  if (inv.checkpoint.empty()) throw CheckpointError(CheckpointError::Kind::Io, "eval needs --checkpoint PATH");
  auto m = model::load_checkpoint(inv.checkpoint, inv.config.model);
  prepare_out(inv, "");
  auto splits = load_data(inv.config);
  if (splits.val.items.empty()) throw DataError(DataError::Kind::Empty, "the val split is empty");
  auto metrics = train::evaluate(m, splits.val);
  for (const auto& w : metrics.warnings) err << "warning: " << w << "\n";
  out << metrics_line(metrics) << "\n";
  return kOk;
}

int cmd_heatmap(const Invocation& inv, std::ostream& out) {
  inv.config.validate();
  const auto& cfg = inv.config.model;
  if (inv.config.query_token >= cfg.tokens()) {
    throw ConfigError("query_token " + std::to_string(inv.config.query_token) + " outside [0," +
                      std::to_string(cfg.tokens()) + ")");
  }
  auto m = model_for(inv);
  auto dir = prepare_out(inv, "out");
  Tensor image;
  if (!inv.config.heatmap_image.empty()) {
    image = data::resize_bilinear(data::image_to_tensor(data::read_ppm(inv.config.heatmap_image)), cfg.image_size,
                                  cfg.image_size);
  } else {
    auto splits = load_data(inv.config);
    const auto& source = splits.val.items.empty() ? splits.train : splits.val;
    if (source.items.empty()) throw DataError(DataError::Kind::Empty, "no image available for the heatmap");
    image = source.items.front().image;
  }
  model::ModelProbe probe;
  model::classify(image, m, nullptr, &probe);
  for (std::size_t b = 0; b < cfg.depth; ++b) {
    auto sam_path = dir / ("block" + std::to_string(b) + "_sam.ppm");
    data::write_ppm(sam_path.string(), render_heatmap(probe.sam_maps[b], cfg.image_size));
    out << "wrote " << sam_path.string() << "\n";
    for (std::size_t h = 0; h < cfg.heads; ++h) {
      auto path = dir / ("block" + std::to_string(b) + "_head" + std::to_string(h) + ".ppm");
      auto map = attention_row_map(probe.attention[b], cfg, h, inv.config.query_token);
      data::write_ppm(path.string(), render_heatmap(map, cfg.image_size));
      out << "wrote " << path.string() << "\n";
    }
  }
  return kOk;
}

int dispatch(const Invocation& inv, std::ostream& out, std::ostream& err) {
  if (inv.command == "describe") return cmd_describe(inv, out);
  if (inv.command == "check") return cmd_check(inv, out);
  if (inv.command == "train") return cmd_train(inv, out, err);
  if (inv.command == "eval") return cmd_eval(inv, out, err);
  return cmd_heatmap(inv, out);
}

}  // namespace

void RunConfig::set(const std::string& key, const std::string& value) {
  if (model::ModelConfig::is_key(key)) {
    model.set(key, value);
    if (key == "seed") train.seed = model.seed;
  } else if (key == "epochs") train.epochs = to_size(key, value);
  else if (key == "batch_size") train.batch_size = to_size(key, value);
  else if (key == "lr_init") train.lr_init = to_real(key, value);
  else if (key == "lr_min") train.lr_min = to_real(key, value);
  else if (key == "weight_decay") train.weight_decay = to_real(key, value);
  else if (key == "eval_every") train.eval_every = to_size(key, value);
  else if (key == "dataset") dataset = value;
  else if (key == "manifest") manifest = value;
  else if (key == "samples_per_class") samples_per_class = to_size(key, value);
  else if (key == "noise_std") noise_std = to_real(key, value);
  else if (key == "heatmap_image") heatmap_image = value;
  else if (key == "query_token") query_token = to_size(key, value);
  else throw ConfigError("unknown config key '" + key + "'");
}

void RunConfig::validate() const {
  model.validate();
  train.validate();
  if (dataset != "synthetic" && dataset != "manifest") {
    throw ConfigError("dataset must be synthetic or manifest, got '" + dataset + "'");
  }
  if (dataset == "manifest" && manifest.empty()) throw ConfigError("dataset=manifest needs the manifest key");
  if (samples_per_class == 0) throw ConfigError("samples_per_class must be >= 1");
  if (!(noise_std >= 0.0)) throw ConfigError("noise_std must be non-negative");
}

std::string RunConfig::serialize() const {
  std::ostringstream os;
  os << model.serialize() << "epochs=" << train.epochs << "\n"
     << "batch_size=" << train.batch_size << "\n"
     << "lr_init=" << real_str(train.lr_init) << "\n"
     << "lr_min=" << real_str(train.lr_min) << "\n"
     << "weight_decay=" << real_str(train.weight_decay) << "\n"
     << "eval_every=" << train.eval_every << "\n"
     << "dataset=" << dataset << "\n"
     << "manifest=" << manifest << "\n"
     << "samples_per_class=" << samples_per_class << "\n"
     << "noise_std=" << real_str(noise_std) << "\n"
     << "heatmap_image=" << heatmap_image << "\n"
     << "query_token=" << query_token << "\n";
  return os.str();
}

data::SyntheticSpec RunConfig::synthetic_spec() const {
  data::SyntheticSpec spec;
  spec.num_classes = model.num_classes;
  spec.samples_per_class = samples_per_class;
  spec.image_size = model.image_size;
  spec.noise_std = noise_std;
  spec.seed = model.seed;
  return spec;
}

RunConfig resolve_config(const std::string& config_path, const std::vector<std::string>& overrides) {
  RunConfig config;
  if (!config_path.empty()) {
    std::ifstream in(config_path);
    if (!in) throw ConfigError("cannot open config file '" + config_path + "'");
    std::string line;
    std::size_t row = 0;
    while (std::getline(in, line)) {
      ++row;
      auto hash = line.find('#');
      if (hash != std::string::npos) line.resize(hash);
      if (trim(line).empty()) continue;
      apply_line(config, line, config_path + ":" + std::to_string(row));
    }
  }
  for (const auto& o : overrides) apply_line(config, o, "--set");
  return config;
}

data::Splits load_data(const RunConfig& config) {
  if (config.dataset == "manifest") {
    return data::load_manifest(config.manifest, config.model.image_size, config.model.num_classes);
  }
  return data::generate_synthetic(config.synthetic_spec());
}

data::Image8 render_heatmap(const Tensor& map, std::size_t size) {
  if (map.rank() < 2) throw DimensionError("heatmap needs a 2-D map, got " + shape_str(map.shape()));
  const auto h = map.dim(map.rank() - 2), w = map.dim(map.rank() - 1);
  if (map.numel() != h * w) throw DimensionError("heatmap needs a single plane, got " + shape_str(map.shape()));
  const auto d = map.data();
  const auto [lo, hi] = std::minmax_element(d.begin(), d.end());
  const double span = *hi - *lo;
  auto level = [&](double v) -> std::uint8_t {
    const double u = span > 0.0 ? (v - *lo) / span : std::clamp(v, 0.0, 1.0);
    return static_cast<std::uint8_t>(std::lround(255.0 * u));
  };
  data::Image8 img;
  img.width = img.height = size;
  img.channels = 1;
  img.pixels.resize(size * size);
  for (std::size_t y = 0; y < size; ++y) {
    for (std::size_t x = 0; x < size; ++x) img.pixels[y * size + x] = level(d[(y * h / size) * w + x * w / size]);
  }
  return img;
}

Tensor attention_row_map(const attention::AttentionProbe& probe, const model::ModelConfig& config, std::size_t head,
                         std::size_t query) {
  const auto g = config.grid();
  const bool windowed = config.attention == model::AttentionVariant::Windowed;
  const auto m = windowed ? config.window : g;
  const auto t = m * m, tiles = g / m;
  if (query >= g * g) throw ConfigError("query token " + std::to_string(query) + " outside the token grid");
  if (head >= config.heads) throw ConfigError("head " + std::to_string(head) + " out of range");
  const auto r = query / g, c = query % g;
  const auto n = (r / m) * tiles + c / m;
  const auto slot = (r % m) * m + c % m;
  if (probe.probs.numel() < (n * config.heads + head + 1) * t * t) {
    throw DimensionError("attention probe " + shape_str(probe.probs.shape()) + " does not match the config");
  }
  std::vector<double> grid(g * g, 0.0);
  const auto p = probe.probs.data();
  const auto base = ((n * config.heads + head) * t + slot) * t;
  const auto r0 = (r / m) * m, c0 = (c / m) * m;
  for (std::size_t j = 0; j < t; ++j) grid[(r0 + j / m) * g + c0 + j % m] = p[base + j];
  return Tensor({g, g}, std::move(grid), DType::F64);
}

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Windowed-attention vision transformer: cost report, invariant checks, training and heatmaps"};
  app.require_subcommand(1, 1);
  std::string config_path, checkpoint, out_dir;
  std::vector<std::string> sets;
  bool f64 = false, fault = false;
  std::uint64_t seed = 0;
  app.add_option("--config", config_path, "key=value config file");
  app.add_option("--set", sets, "key=value override, repeatable")
      ->expected(1)
      ->multi_option_policy(CLI::MultiOptionPolicy::TakeAll);
  app.add_option("--checkpoint", checkpoint, "model checkpoint");
  app.add_option("--out", out_dir, "output directory");
  app.add_flag("--f64", f64, "64-bit parameters; tighter gradient tolerance in check");
  auto* seed_opt = app.add_option("--seed", seed, "seed for model, data and training");
  app.add_flag("--inject-fault", fault)->group("");
  for (const char* name : {"describe", "check", "train", "eval", "heatmap"}) {
    app.add_subcommand(name)->fallthrough();
  }
  app.get_subcommand("describe")->description("analytical params/FLOPs, windowed vs global");
  app.get_subcommand("check")->description("run the invariant suites");
  app.get_subcommand("train")->description("train and write metrics.csv and checkpoints");
  app.get_subcommand("eval")->description("evaluate a checkpoint on the val split");
  app.get_subcommand("heatmap")->description("export SAM and attention-row heatmaps");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e, out, err);
    return rc == 0 ? kOk : kConfigError;
  }

  Invocation inv;
  inv.command = app.get_subcommands().front()->get_name();
  inv.checkpoint = checkpoint;
  inv.out_dir = out_dir;
  inv.f64 = f64;
  attention::set_bias_sign_fault(fault);
  int rc = kRuntimeFailure;
  try {
    inv.config = resolve_config(config_path, sets);
    if (*seed_opt) inv.config.set("seed", std::to_string(seed));
    if (f64) inv.config.set("precision", "f64");
    rc = dispatch(inv, out, err);
  } catch (const CheckpointError& e) {
    err << "checkpoint error: " << e.what() << "\n";
    rc = kCheckpointError;
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    rc = kConfigError;
  } catch (const GeometryError& e) {
    err << "config error: " << e.what() << "\n";
    rc = kConfigError;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    rc = kRuntimeFailure;
  }
  attention::set_bias_sign_fault(false);
  return rc;
}

}  // namespace winvit::cli

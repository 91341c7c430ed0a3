#include "winvit/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numbers>
#include <ostream>

#include "winvit/autograd.hpp"
#include "winvit/errors.hpp"

namespace winvit::train {

namespace {

std::vector<Tensor*> parameter_tensors(model::Model& model) {
  std::vector<Tensor*> out;
  for (const auto& r : model.parameters()) out.push_back(r.tensor);
  return out;
}

double batch_loss(const Tensor& logits, int label) {
  const int labels[] = {label};
  return cross_entropy(logits.reshaped({1, logits.numel()}), labels);
}

std::size_t argmax(const Tensor& t) {
  const auto d = t.data();
  return static_cast<std::size_t>(std::max_element(d.begin(), d.end()) - d.begin());
}

}  // namespace

void TrainConfig::validate() const {
  if (epochs == 0) throw ConfigError("epochs must be >= 1");
  if (batch_size == 0) throw ConfigError("batch_size must be >= 1");
  if (!(lr_min >= 0.0) || !(lr_init > lr_min)) {
    throw ConfigError("learning rates must satisfy lr_init > lr_min >= 0");
  }
  if (!(weight_decay >= 0.0)) throw ConfigError("weight_decay must be non-negative");
  if (eval_every == 0) throw ConfigError("eval_every must be >= 1");
}

double cross_entropy(const Tensor& logits, std::span<const int> labels) {
  if (logits.rank() != 2 || logits.dim(0) != labels.size() || logits.dim(0) == 0) {
    throw DimensionError("cross_entropy expects [B x K] logits for " + std::to_string(labels.size()) + " labels, got " +
                         shape_str(logits.shape()));
  }
  const auto b = logits.dim(0), k = logits.dim(1);
  const auto d = logits.data();
  double total = 0.0;
  for (std::size_t i = 0; i < b; ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= k) {
      throw ContractError("label " + std::to_string(labels[i]) + " outside [0," + std::to_string(k) + ")");
    }
    const double* row = d.data() + i * k;
    const double mx = *std::max_element(row, row + k);
    double z = 0.0;
    for (std::size_t j = 0; j < k; ++j) z += std::exp(row[j] - mx);
    total += mx + std::log(z) - row[labels[i]];
  }
  return total / static_cast<double>(b);
}

double cosine_lr(std::size_t step, std::size_t total_steps, double lr_init, double lr_min) {
  if (total_steps == 0 || step > total_steps) {
    throw ContractError("cosine_lr step " + std::to_string(step) + " outside [0," + std::to_string(total_steps) + "]");
  }
  if (step == 0) return lr_init;
  if (step == total_steps) return lr_min;
  const double t = static_cast<double>(step) / static_cast<double>(total_steps);
  return lr_min + 0.5 * (lr_init - lr_min) * (1.0 + std::cos(std::numbers::pi * t));
}

AdamWState AdamWState::init(std::span<Tensor* const> params) {
  AdamWState s;
  for (const auto* p : params) {
    s.m.push_back(Tensor::zeros(p->shape(), DType::F64));
    s.v.push_back(Tensor::zeros(p->shape(), DType::F64));
  }
  return s;
}

void adamw_step(AdamWState& state, std::span<Tensor* const> params, std::span<const Tensor> grads, double lr,
                double weight_decay) {
  if (params.size() != grads.size() || params.size() != state.m.size()) {
    throw DimensionError("adamw_step: " + std::to_string(params.size()) + " parameters, " +
                         std::to_string(grads.size()) + " gradients, " + std::to_string(state.m.size()) + " moments");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i]->shape() != grads[i].shape() || params[i]->shape() != state.m[i].shape()) {
      throw DimensionError("adamw_step: parameter " + std::to_string(i) + " " + shape_str(params[i]->shape()) +
                           " vs gradient " + shape_str(grads[i].shape()));
    }
  }
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(state.beta1, t), c2 = 1.0 - std::pow(state.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto theta = params[i]->mutable_data();
    auto m = state.m[i].mutable_data();
    auto v = state.v[i].mutable_data();
    const auto g = grads[i].data();
    for (std::size_t j = 0; j < theta.size(); ++j) {
      theta[j] -= lr * weight_decay * theta[j];
      m[j] = state.beta1 * m[j] + (1.0 - state.beta1) * g[j];
      v[j] = state.beta2 * v[j] + (1.0 - state.beta2) * g[j] * g[j];
      theta[j] -= lr * (m[j] / c1) / (std::sqrt(v[j] / c2) + state.eps);
    }
    params[i]->finalize();
  }
}

Metrics metrics(const Confusion& confusion) {
  const auto k = confusion.size();
  Metrics out;
  if (k == 0) return out;
  std::uint64_t total = 0, correct = 0;
  std::vector<std::uint64_t> predicted(k, 0), actual(k, 0);
  for (std::size_t i = 0; i < k; ++i) {
    if (confusion[i].size() != k) throw DimensionError("confusion matrix must be square");
    for (std::size_t j = 0; j < k; ++j) {
      total += confusion[i][j];
      actual[i] += confusion[i][j];
      predicted[j] += confusion[i][j];
    }
    correct += confusion[i][i];
  }
  out.accuracy = total ? static_cast<double>(correct) / static_cast<double>(total) : 0.0;
  for (std::size_t c = 0; c < k; ++c) {
    const double tp = static_cast<double>(confusion[c][c]);
    double p = 0.0, r = 0.0;
    if (predicted[c] == 0) {
      out.warnings.push_back("class " + std::to_string(c) + " was never predicted; precision counted as 0");
    } else {
      p = tp / static_cast<double>(predicted[c]);
    }
    if (actual[c] == 0) {
      out.warnings.push_back("class " + std::to_string(c) + " has no samples; recall counted as 0");
    } else {
      r = tp / static_cast<double>(actual[c]);
    }
    out.precision += p;
    out.recall += r;
    out.f1 += p + r > 0.0 ? 2.0 * p * r / (p + r) : 0.0;
  }
  out.precision /= static_cast<double>(k);
  out.recall /= static_cast<double>(k);
  out.f1 /= static_cast<double>(k);
  return out;
}

Confusion confusion_matrix(model::Model& model, const data::Dataset& dataset) {
  const auto k = model.config().num_classes;
  Confusion conf(k, std::vector<std::uint64_t>(k, 0));
  for (const auto& it : dataset.items) {
    if (it.label < 0 || static_cast<std::size_t>(it.label) >= k) {
      throw DataError(DataError::Kind::LabelOutOfRange, "label " + std::to_string(it.label) +
                                                            " outside the model's " + std::to_string(k) + " classes");
    }
    ++conf[static_cast<std::size_t>(it.label)][argmax(model::classify(it.image, model))];
  }
  return conf;
}

Metrics evaluate(model::Model& model, const data::Dataset& dataset) {
  return metrics(confusion_matrix(model, dataset));
}

std::size_t steps_per_epoch(std::size_t samples, std::size_t batch_size) {
  return (samples + batch_size - 1) / batch_size;
}

std::string csv_header() { return "step,lr,loss,acc,pre,rec,f1"; }

std::string csv_row(const LogRow& row) {
  char buf[160];
  std::snprintf(buf, sizeof(buf), "%zu,%.17g,%.17g", row.step, row.lr, row.loss);
  std::string s = buf;
  if (row.eval) {
    std::snprintf(buf, sizeof(buf), ",%.6f,%.6f,%.6f,%.6f", row.eval->accuracy, row.eval->precision, row.eval->recall,
                  row.eval->f1);
    s += buf;
  } else {
    s += ",,,,";
  }
  return s;
}

TrainResult train_loop(model::Model& model, const data::Dataset& train, const data::Dataset& val,
                       const TrainConfig& config, const TrainHooks& hooks) {
  config.validate();
  train.validate(true);
  if (!val.items.empty()) val.validate(false);
  if (train.num_classes() != model.config().num_classes) {
    throw ConfigError("dataset has " + std::to_string(train.num_classes()) + " classes, model expects " +
                      std::to_string(model.config().num_classes));
  }
  const data::Dataset& eval_set = val.items.empty() ? train : val;
  auto params = parameter_tensors(model);

  TrainResult result;
  result.state = AdamWState::init(params);
  const auto per_epoch = steps_per_epoch(train.size(), config.batch_size);
  result.total_steps = config.epochs * per_epoch;

  Rng rng(config.seed);
  std::vector<std::size_t> order(train.size());
  std::optional<double> first_loss;
  std::size_t above = 0, step = 0;
  if (hooks.csv) *hooks.csv << csv_header() << "\n";

  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t b = 0; b < per_epoch; ++b, ++step) {
      const double lr = cosine_lr(step, result.total_steps, config.lr_init, config.lr_min);
      const auto begin = b * config.batch_size, end = std::min(order.size(), begin + config.batch_size);

      Tape tape;
      auto bound = model::bind(tape, model, true);
      std::vector<Var> outs;
      std::vector<int> labels;
      const model::ForwardContext ctx{true, &rng};
      for (auto i = begin; i < end; ++i) {
        const auto& item = train.items[order[i]];
        outs.push_back(model::logits(tape.constant(item.image), bound, model, ctx));
        labels.push_back(item.label);
      }
      Var loss = ag::cross_entropy(ag::stack(outs), labels);
      const double loss_value = loss.value().item();
      if (!std::isfinite(loss_value)) {
        throw TrainingError("loss became non-finite at step " + std::to_string(step + 1) + " (lr " +
                            std::to_string(lr) + ")");
      }
      if (!first_loss) first_loss = loss_value;
      above = loss_value > 10.0 * *first_loss ? above + 1 : 0;
      if (above >= 50) {
        throw TrainingError("loss diverged: above 10x the initial loss " + std::to_string(*first_loss) +
                            " for 50 consecutive steps (step " + std::to_string(step + 1) + ")");
      }
      tape.backward(loss);
      std::vector<Tensor> grads;
      grads.reserve(params.size());
      for (const auto& v : bound.params) grads.push_back(tape.grad(v));
      adamw_step(result.state, params, grads, lr, config.weight_decay);

      LogRow row{step + 1, lr, loss_value, std::nullopt, std::nullopt};
      const bool last = step + 1 == result.total_steps;
      if ((step + 1) % config.eval_every == 0 || last) {
        row.eval = evaluate(model, eval_set);
        if (hooks.track_train_accuracy) row.train_acc = &eval_set == &train ? row.eval->accuracy : evaluate(model, train).accuracy;
        if (hooks.diagnostics) {
          for (const auto& w : row.eval->warnings) *hooks.diagnostics << "step " << row.step << ": " << w << "\n";
        }
        if (hooks.checkpoint) hooks.checkpoint(row.step);
      }
      if (hooks.csv) *hooks.csv << csv_row(row) << "\n";
      result.log.push_back(std::move(row));
    }
  }
  return result;
}

std::vector<GradCheckEntry> gradient_check(model::Model& model, const Tensor& image, int label, double eps,
                                           double floor) {
  if (model.config().dtype != DType::F64) throw ContractError("gradient_check needs a 64-bit model");
  Tape tape;
  auto bound = model::bind(tape, model, true);
  const int labels[] = {label};
  Var logits = model::logits(tape.constant(image.as(DType::F64)), bound, model, model::ForwardContext{false, nullptr});
  Var loss = ag::cross_entropy(ag::reshape(logits, {1, model.config().num_classes}), labels);
  tape.backward(loss);

  const Tensor input = image.as(DType::F64);
  auto refs = model.parameters();
  std::vector<GradCheckEntry> out;
  for (std::size_t p = 0; p < refs.size(); ++p) {
    const Tensor analytic = tape.grad(bound.params[p]);
    GradCheckEntry entry;
    entry.name = refs[p].section + "/" + (refs[p].block >= 0 ? std::to_string(refs[p].block) + "/" : "") + refs[p].name;
    // Trim the trailing space of the padded section tags.
    entry.name.erase(std::remove(entry.name.begin(), entry.name.end(), ' '), entry.name.end());
    auto values = refs[p].tensor->mutable_data();
    for (std::size_t j = 0; j < values.size(); ++j) {
      const double saved = values[j];
      values[j] = saved + eps;
      const double up = batch_loss(model::classify(input, model), label);
      values[j] = saved - eps;
      const double down = batch_loss(model::classify(input, model), label);
      values[j] = saved;
      const double numeric = (up - down) / (2.0 * eps);
      const double a = analytic[j];
      const double rel = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), floor});
      entry.max_rel_error = std::max(entry.max_rel_error, rel);
      entry.max_abs_grad = std::max(entry.max_abs_grad, std::abs(a));
      ++entry.checked;
    }
    out.push_back(std::move(entry));
  }
  return out;
}

void randomize_parameters(model::Model& model, std::uint64_t seed, double stddev) {
  Rng rng(seed);
  std::normal_distribution<double> dist(0.0, stddev);
  for (const auto& r : model.parameters()) {
    const double centre = r.name.find("gamma") != std::string::npos ? 1.0 : 0.0;
    for (auto& v : r.tensor->mutable_data()) v = centre + dist(rng);
    r.tensor->finalize();
  }
}

}  // namespace winvit::train

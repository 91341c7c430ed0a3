#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "winvit/data.hpp"
#include "winvit/model.hpp"
#include "winvit/tensor.hpp"

namespace winvit::train {

struct TrainConfig {
  std::size_t epochs = 10;
  std::size_t batch_size = 8;
  double lr_init = 7e-4;
  double lr_min = 1e-6;
  double weight_decay = 5e-2;
  std::uint64_t seed = 0;
  std::size_t eval_every = 20;  // steps; the last step is always evaluated

  void validate() const;
};

// Mean -log softmax(logits)[label] over a [B x K] batch.
double cross_entropy(const Tensor& logits, std::span<const int> labels);

// lr_min + (lr_init - lr_min)(1 + cos(pi * step / total)) / 2.
double cosine_lr(std::size_t step, std::size_t total_steps, double lr_init, double lr_min);

struct AdamWState {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::vector<Tensor> m, v;  // 64-bit moments, parallel to the parameters
  std::uint64_t step = 0;

  static AdamWState init(std::span<Tensor* const> params);
};

// Decoupled decay: theta -= lr * lambda * theta, then the bias-corrected
// Adam step.
void adamw_step(AdamWState& state, std::span<Tensor* const> params, std::span<const Tensor> grads, double lr,
                double weight_decay);

struct Metrics {
  double accuracy = 0.0;
  double precision = 0.0;  // macro
  double recall = 0.0;     // macro
  double f1 = 0.0;         // macro, mean of per-class F1
  std::vector<std::string> warnings;
};

using Confusion = std::vector<std::vector<std::uint64_t>>;  // [true][predicted]

// Classes with a zero precision or recall denominator contribute 0 and add a
// warning.
Metrics metrics(const Confusion& confusion);

Confusion confusion_matrix(model::Model& model, const data::Dataset& dataset);
Metrics evaluate(model::Model& model, const data::Dataset& dataset);

struct LogRow {
  std::size_t step = 0;
  double lr = 0.0;
  double loss = 0.0;
  std::optional<Metrics> eval;      // on the eval split, at eval steps
  std::optional<double> train_acc;  // at eval steps
};

struct TrainResult {
  AdamWState state;
  std::vector<LogRow> log;
  std::size_t total_steps = 0;
};

struct TrainHooks {
  std::ostream* csv = nullptr;  // step,lr,loss,acc,pre,rec,f1
  std::ostream* diagnostics = nullptr;
  std::function<void(std::size_t step)> checkpoint;  // after each eval
  bool track_train_accuracy = true;
};

std::size_t steps_per_epoch(std::size_t samples, std::size_t batch_size);

// Eval rows use `val` when non-empty, otherwise the training set. Throws
// TrainingError on a non-finite loss or after 50 consecutive steps above ten
// times the first loss.
TrainResult train_loop(model::Model& model, const data::Dataset& train, const data::Dataset& val,
                       const TrainConfig& config, const TrainHooks& hooks = {});

std::string csv_header();
std::string csv_row(const LogRow& row);

struct GradCheckEntry {
  std::string name;  // section/block/parameter
  std::size_t checked = 0;
  double max_rel_error = 0.0;
  double max_abs_grad = 0.0;
};

// Central differences on every entry of every parameter of a 64-bit model,
// loss = cross entropy of one labelled image. Relative error is
// |a - n| / max(|a|, |n|, floor).
std::vector<GradCheckEntry> gradient_check(model::Model& model, const Tensor& image, int label, double eps = 1e-4,
                                           double floor = 1e-6);

// Replaces every parameter with normal(0, stddev) draws, including the biases
// and normalization affines (gamma centred on 1).
void randomize_parameters(model::Model& model, std::uint64_t seed, double stddev);

}  // namespace winvit::train

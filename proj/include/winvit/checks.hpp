#pragma once

#include <optional>
#include <string>
#include <vector>

#include "winvit/attention.hpp"
#include "winvit/model.hpp"

namespace winvit::checks {

struct SuiteResult {
  std::string name;
  bool passed = false;
  std::string detail;
};

struct CheckOptions {
  model::ModelConfig config;
  bool f64 = false;         // tightens the gradient tolerance
  std::string scratch_dir;  // for the checkpoint roundtrip; temp dir when empty
};

double gradient_tolerance(bool f64);

SuiteResult roundtrip_suite(const CheckOptions& options);
SuiteResult stochasticity_suite(const CheckOptions& options);
SuiteResult gradient_suite(const CheckOptions& options);
SuiteResult equivalence_suite(const CheckOptions& options);
SuiteResult cost_suite(const CheckOptions& options);

std::vector<SuiteResult> run_all(const CheckOptions& options);

// Per-pair 64-bit reference for one sequence x [T x C]; bias is [h x T x T].
Tensor naive_attention(const Tensor& x, const attention::ProjectionParams& params,
                       const std::optional<Tensor>& bias = std::nullopt);

}  // namespace winvit::checks

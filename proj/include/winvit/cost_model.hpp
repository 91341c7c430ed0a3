#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "winvit/flops.hpp"
#include "winvit/model.hpp"

namespace winvit::cost {

using model::AttentionVariant;

struct AttentionCost {
  std::uint64_t params = 0;
  std::uint64_t flops = 0;  // projections + scores + weighted sum, 2 x MACs
};

// L tokens on a square grid. The windowed variant requires M to divide the
// grid side.
AttentionCost attention_cost(std::size_t tokens, std::size_t channels, std::size_t heads, std::size_t window,
                             AttentionVariant variant, attention::SharingMode sharing = attention::SharingMode::Standard);

// One row per (layer, name). `flops` holds matmul/conv FLOPs for the compute
// rows and pointwise FLOPs for the "elementwise" rows.
struct CostRow {
  std::string layer;  // stem, block{i}, head
  std::string name;   // patch_embed, norm, attention, ffn, dwconv, sam, elementwise, head
  std::uint64_t params = 0;
  std::uint64_t flops = 0;

  bool operator==(const CostRow&) const = default;
};

struct CostReport {
  AttentionVariant variant = AttentionVariant::Windowed;
  std::vector<CostRow> rows;

  std::uint64_t total_params() const;
  std::uint64_t total_flops() const;
  // Sum over rows named `name`.
  std::uint64_t params_of(const std::string& name) const;
  std::uint64_t flops_of(const std::string& name) const;
};

// Analytical report for `config` with its attention variant replaced by
// `variant`.
CostReport model_cost(const model::ModelConfig& config, AttentionVariant variant);

struct InstrumentedRun {
  Tensor output;
  FlopCounter counter;
};

// Eval-mode forward pass with the counter attached.
InstrumentedRun instrumented_forward(model::Model& model, const Tensor& image);

// Regroups a measured counter into the same rows as model_cost, taking the
// parameter counts from the analytical report.
CostReport measured_report(const FlopCounter& counter, const CostReport& analytical);

std::string format_units(std::uint64_t count);
std::string format_report(const CostReport& report);
std::string format_comparison(const CostReport& windowed, const CostReport& global);
// layer,name,params,flops,variant
std::string to_csv(const std::vector<CostReport>& reports);

}  // namespace winvit::cost

#pragma once

#include <iosfwd>
#include <string>
#include <vector>

#include "winvit/data.hpp"
#include "winvit/model.hpp"
#include "winvit/training.hpp"

namespace winvit::cli {

enum ExitCode { kOk = 0, kRuntimeFailure = 1, kConfigError = 2, kCheckpointError = 3 };

// Everything a command can be configured with. `seed` drives the model,
// data and training streams together.
struct RunConfig {
  model::ModelConfig model;
  train::TrainConfig train;
  std::string dataset = "synthetic";  // synthetic | manifest
  std::string manifest;
  std::size_t samples_per_class = data::SyntheticSpec{}.samples_per_class;
  double noise_std = data::SyntheticSpec{}.noise_std;
  std::string heatmap_image;  // PPM; the first val image when empty
  std::size_t query_token = 0;

  // ConfigError naming the key when unknown or malformed.
  void set(const std::string& key, const std::string& value);
  void validate() const;
  std::string serialize() const;

  data::SyntheticSpec synthetic_spec() const;
};

// Applies a key=value file ('#' comments, blank lines allowed), then the
// overrides in order.
RunConfig resolve_config(const std::string& config_path, const std::vector<std::string>& overrides);

data::Splits load_data(const RunConfig& config);

// Min-max scaled to [0,255] (a constant map becomes round(255 v)), then
// nearest-neighbour upsampled to size x size.
data::Image8 render_heatmap(const Tensor& map, std::size_t size);

// Token-index map of one head's attention row for `query` over the grid;
// zero outside the query's window.
Tensor attention_row_map(const attention::AttentionProbe& probe, const model::ModelConfig& config, std::size_t head,
                         std::size_t query);

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace winvit::cli

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "winvit/tensor.hpp"

namespace winvit::data {

enum class Split { Train, Val };

std::string to_string(Split split);

struct Item {
  Tensor image;  // 3 x S x S, values in [0,1]
  int label = 0;
};

struct Dataset {
  std::vector<Item> items;
  std::vector<std::string> class_names;
  Split split = Split::Train;

  std::size_t size() const { return items.size(); }
  std::size_t num_classes() const { return class_names.size(); }
  // Labels in range, one image size. With require_all_classes, every class
  // must appear at least once.
  void validate(bool require_all_classes) const;
};

struct Splits {
  Dataset train;
  Dataset val;
};

struct SyntheticSpec {
  std::size_t num_classes = 3;
  std::size_t samples_per_class = 80;
  std::size_t image_size = 64;
  double noise_std = 0.05;
  std::uint64_t seed = 0;
};

enum class Pattern { Stripes, Checker, Radial };

// Pattern family of class k is k mod 3; classes sharing a family differ in
// spatial frequency. `phase` lies in [0,1) and shifts the pattern by up to a
// quarter period (or moves the radial centre).
Tensor render_pattern(std::size_t label, std::size_t size, double phase_x, double phase_y);

// Round-robin split: every fifth sample of a class goes to val.
Splits generate_synthetic(const SyntheticSpec& spec);

// 8-bit PPM/PGM raster, interleaved.
struct Image8 {
  std::size_t width = 0;
  std::size_t height = 0;
  std::size_t channels = 3;  // 3 for P6, 1 for P5
  std::vector<std::uint8_t> pixels;
};

Image8 read_ppm(const std::string& path);
void write_ppm(const std::string& path, const Image8& image);

// [C x H x W] in [0,1] with gray inputs replicated to three channels.
Tensor image_to_tensor(const Image8& image);
// Bilinear, half-pixel centres, edge clamped.
Tensor resize_bilinear(const Tensor& chw, std::size_t out_height, std::size_t out_width);

// CSV rows "filepath,label,split" with an optional header row; paths resolve
// relative to the manifest's directory.
Splits load_manifest(const std::string& path, std::size_t image_size, std::size_t num_classes);

// Accuracy of the nearest class-mean classifier fit on `train`.
double nearest_centroid_accuracy(const Dataset& train, const Dataset& test);

}  // namespace winvit::data

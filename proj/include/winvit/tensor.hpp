#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <iosfwd>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace winvit {

using Shape = std::vector<std::size_t>;
using Rng = std::mt19937_64;

// Storage precision of a tensor. Values are held in double; in F32 mode every
// library-produced result is rounded to the nearest float so the stored
// values are exactly representable in 32 bits.
enum class DType : std::uint8_t { F32, F64 };

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

class Tensor {
 public:
  // Rank-0 scalar zero.
  Tensor();
  Tensor(Shape shape, std::vector<double> data, DType dtype = DType::F32);

  static Tensor zeros(Shape shape, DType dtype = DType::F32);
  static Tensor full(Shape shape, double value, DType dtype = DType::F32);
  static Tensor scalar(double value, DType dtype = DType::F32);
  static Tensor randn(Shape shape, Rng& rng, double stddev = 1.0, DType dtype = DType::F32);
  static Tensor uniform(Shape shape, Rng& rng, double lo, double hi, DType dtype = DType::F32);
  static Tensor identity(std::size_t n, DType dtype = DType::F32);

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const noexcept { return data_.size(); }
  DType dtype() const noexcept { return dtype_; }

  std::span<const double> data() const noexcept { return data_; }
  std::span<double> mutable_data() noexcept { return data_; }
  double operator[](std::size_t i) const { return data_[i]; }
  double& operator[](std::size_t i) { return data_[i]; }
  double at(std::initializer_list<std::size_t> index) const;
  double item() const;

  Tensor reshaped(Shape shape) const;
  Tensor as(DType dtype) const;

  // Rounds to float when dtype is F32 and runs the debug finite check.
  Tensor& finalize();

  bool same_values(const Tensor& other) const;

 private:
  Shape shape_;
  std::vector<double> data_;
  DType dtype_ = DType::F32;
};

DType promote(DType a, DType b);

// Normal(0, stddev) resampled until within +-2 stddev.
Tensor trunc_normal(Shape shape, Rng& rng, double stddev, DType dtype = DType::F32);

// Debug-mode check for NaN/Inf after every op; off by default.
void set_finite_checks(bool enabled);
bool finite_checks_enabled();

// Little-endian binary: "WMHT", u32 rank, u64 dims[rank], u32 element width
// (4 or 8), payload.
void write_tensor(std::ostream& out, const Tensor& t);
Tensor read_tensor(std::istream& in);

// Human-readable dump for debugging.
std::string to_string(const Tensor& t, std::size_t max_elements = 64);
std::ostream& operator<<(std::ostream& os, const Tensor& t);

}  // namespace winvit

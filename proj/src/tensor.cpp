#include "winvit/tensor.hpp"

#include <atomic>
#include <bit>
#include <cmath>
#include <cstring>
#include <istream>
#include <ostream>
#include <sstream>

#include "winvit/errors.hpp"

namespace winvit {

namespace {

std::atomic<bool> g_finite_checks{false};

constexpr char kTensorMagic[4] = {'W', 'M', 'H', 'T'};

template <typename T>
void put_le(std::ostream& out, T value) {
  static_assert(std::endian::native == std::endian::little, "little-endian host required");
  out.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <typename T>
T get_le(std::istream& in) {
  T value{};
  in.read(reinterpret_cast<char*>(&value), sizeof(T));
  if (!in) {
    throw DimensionError("tensor stream truncated");
  }
  return value;
}

}  // namespace

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += "x";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

Tensor::Tensor() : data_(1, 0.0) {}

Tensor::Tensor(Shape shape, std::vector<double> data, DType dtype)
    : shape_(std::move(shape)), data_(std::move(data)), dtype_(dtype) {
  for (auto d : shape_) {
    if (d == 0) throw DimensionError("tensor shape " + shape_str(shape_) + " has a zero dimension");
  }
  if (shape_numel(shape_) != data_.size()) {
    throw DimensionError("tensor shape " + shape_str(shape_) + " does not match " +
                         std::to_string(data_.size()) + " values");
  }
  if (dtype_ == DType::F32) {
    for (auto& v : data_) v = static_cast<double>(static_cast<float>(v));
  }
}

Tensor Tensor::zeros(Shape shape, DType dtype) { return full(std::move(shape), 0.0, dtype); }

Tensor Tensor::full(Shape shape, double value, DType dtype) {
  auto n = shape_numel(shape);
  Tensor t(std::move(shape), std::vector<double>(n, value), dtype);
  t.finalize();
  return t;
}

Tensor Tensor::scalar(double value, DType dtype) { return Tensor({}, {value}, dtype).finalize(); }

Tensor Tensor::randn(Shape shape, Rng& rng, double stddev, DType dtype) {
  std::normal_distribution<double> dist(0.0, stddev);
  std::vector<double> data(shape_numel(shape));
  for (auto& v : data) v = dist(rng);
  Tensor t(std::move(shape), std::move(data), dtype);
  t.finalize();
  return t;
}

Tensor Tensor::uniform(Shape shape, Rng& rng, double lo, double hi, DType dtype) {
  std::uniform_real_distribution<double> dist(lo, hi);
  std::vector<double> data(shape_numel(shape));
  for (auto& v : data) v = dist(rng);
  Tensor t(std::move(shape), std::move(data), dtype);
  t.finalize();
  return t;
}

Tensor Tensor::identity(std::size_t n, DType dtype) {
  Tensor t = zeros({n, n}, dtype);
  for (std::size_t i = 0; i < n; ++i) t.data_[i * n + i] = 1.0;
  return t;
}

std::size_t Tensor::dim(std::size_t axis) const {
  if (axis >= shape_.size()) {
    throw DimensionError("axis " + std::to_string(axis) + " out of range for shape " + shape_str(shape_));
  }
  return shape_[axis];
}

double Tensor::at(std::initializer_list<std::size_t> index) const {
  if (index.size() != shape_.size()) {
    throw DimensionError("index rank does not match shape " + shape_str(shape_));
  }
  std::size_t flat = 0;
  std::size_t axis = 0;
  for (auto i : index) {
    if (i >= shape_[axis]) throw DimensionError("index out of range for shape " + shape_str(shape_));
    flat = flat * shape_[axis] + i;
    ++axis;
  }
  return data_[flat];
}

double Tensor::item() const {
  if (data_.size() != 1) throw ContractError("item() on non-scalar tensor " + shape_str(shape_));
  return data_[0];
}

Tensor Tensor::reshaped(Shape shape) const {
  if (shape_numel(shape) != data_.size()) {
    throw DimensionError("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
  }
  return Tensor(std::move(shape), data_, dtype_);
}

Tensor Tensor::as(DType dtype) const {
  Tensor t(shape_, data_, dtype);
  t.finalize();
  return t;
}

Tensor& Tensor::finalize() {
  if (dtype_ == DType::F32) {
    for (auto& v : data_) v = static_cast<double>(static_cast<float>(v));
  }
  if (g_finite_checks.load(std::memory_order_relaxed)) {
    for (auto v : data_) {
      if (!std::isfinite(v)) throw NumericError("non-finite value in tensor " + shape_str(shape_));
    }
  }
  return *this;
}

bool Tensor::same_values(const Tensor& other) const {
  if (shape_ != other.shape_) return false;
  return std::memcmp(data_.data(), other.data_.data(), data_.size() * sizeof(double)) == 0;
}

DType promote(DType a, DType b) { return (a == DType::F64 || b == DType::F64) ? DType::F64 : DType::F32; }

Tensor trunc_normal(Shape shape, Rng& rng, double stddev, DType dtype) {
  std::normal_distribution<double> dist(0.0, stddev);
  std::vector<double> data(shape_numel(shape));
  for (auto& v : data) {
    do {
      v = dist(rng);
    } while (std::abs(v) > 2.0 * stddev);
  }
  Tensor t(std::move(shape), std::move(data), dtype);
  t.finalize();
  return t;
}

void set_finite_checks(bool enabled) { g_finite_checks.store(enabled); }
bool finite_checks_enabled() { return g_finite_checks.load(); }

void write_tensor(std::ostream& out, const Tensor& t) {
  out.write(kTensorMagic, 4);
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(t.rank()));
  for (auto d : t.shape()) put_le<std::uint64_t>(out, d);
  if (t.dtype() == DType::F32) {
    put_le<std::uint32_t>(out, 4);
    for (auto v : t.data()) put_le<float>(out, static_cast<float>(v));
  } else {
    put_le<std::uint32_t>(out, 8);
    for (auto v : t.data()) put_le<double>(out, v);
  }
}

Tensor read_tensor(std::istream& in) {
  char magic[4];
  in.read(magic, 4);
  if (!in) throw DimensionError("tensor stream truncated");
  if (std::memcmp(magic, kTensorMagic, 4) != 0) throw DimensionError("bad tensor magic");
  auto rank = get_le<std::uint32_t>(in);
  if (rank > 16) throw DimensionError("implausible tensor rank " + std::to_string(rank));
  Shape shape(rank);
  for (auto& d : shape) d = static_cast<std::size_t>(get_le<std::uint64_t>(in));
  auto width = get_le<std::uint32_t>(in);
  std::vector<double> data(shape_numel(shape));
  DType dtype;
  if (width == 4) {
    dtype = DType::F32;
    for (auto& v : data) v = get_le<float>(in);
  } else if (width == 8) {
    dtype = DType::F64;
    for (auto& v : data) v = get_le<double>(in);
  } else {
    throw DimensionError("unsupported tensor element width " + std::to_string(width));
  }
  return Tensor(std::move(shape), std::move(data), dtype);
}

std::string to_string(const Tensor& t, std::size_t max_elements) {
  std::ostringstream os;
  os << "Tensor" << shape_str(t.shape()) << (t.dtype() == DType::F32 ? " f32" : " f64") << " {";
  auto n = std::min(max_elements, t.numel());
  for (std::size_t i = 0; i < n; ++i) {
    if (i) os << ", ";
    os << t[i];
  }
  if (n < t.numel()) os << ", ...";
  os << "}";
  return os.str();
}

std::ostream& operator<<(std::ostream& os, const Tensor& t) { return os << to_string(t); }

}  // namespace winvit

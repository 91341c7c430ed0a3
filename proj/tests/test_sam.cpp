#include <gtest/gtest.h>

#include <cmath>

#include "winvit/spatial_attention.hpp"

using namespace winvit;

namespace {

// Pools, the padded 7x7 conv and the logistic gate written out directly.
std::vector<double> gate_oracle(const Tensor& f, const sam::SamParams& p) {
  const std::size_t c = f.dim(0), h = f.dim(1), w = f.dim(2);
  std::vector<double> avg(h * w, 0.0), mx(h * w, -INFINITY), out(h * w);
  for (std::size_t k = 0; k < c; ++k)
    for (std::size_t i = 0; i < h * w; ++i) {
      avg[i] += f[k * h * w + i] / double(c);
      mx[i] = std::max(mx[i], f[k * h * w + i]);
    }
  for (std::size_t r = 0; r < h; ++r)
    for (std::size_t col = 0; col < w; ++col) {
      double s = p.bias[0];
      for (int dr = -3; dr <= 3; ++dr)
        for (int dc = -3; dc <= 3; ++dc) {
          const long rr = long(r) + dr, cc = long(col) + dc;
          if (rr < 0 || cc < 0 || rr >= long(h) || cc >= long(w)) continue;
          const auto tap = std::size_t((dr + 3) * 7 + dc + 3);
          s += avg[rr * w + cc] * p.kernel[tap] + mx[rr * w + cc] * p.kernel[49 + tap];
        }
      out[r * w + col] = 1.0 / (1.0 + std::exp(-s));
    }
  return out;
}

sam::SamParams random_params(std::uint64_t seed, double stddev) {
  Rng rng(seed);
  auto p = sam::SamParams::zeros(DType::F64);
  p.kernel = Tensor::randn(p.kernel.shape(), rng, stddev, DType::F64);
  p.bias = Tensor::randn(p.bias.shape(), rng, stddev, DType::F64);
  return p;
}

Tensor features(Shape s, std::uint64_t seed) {
  Rng rng(seed);
  return Tensor::randn(std::move(s), rng, 1.0, DType::F64);
}

}  // namespace

TEST(Sam, ParameterCount) {
  Rng rng(0);
  EXPECT_EQ(sam::SamParams::init(rng).parameter_count(), 99u);
  EXPECT_EQ(sam::SamParams::zeros().kernel.shape(), (Shape{1, 2, 7, 7}));
}

TEST(Sam, ZeroConvGivesHalfGate) {
  auto f = features({5, 6, 6}, 1);
  auto p = sam::SamParams::zeros(DType::F64);
  auto map = sam::sam_map(f, p);
  ASSERT_EQ(map.shape(), (Shape{1, 6, 6}));
  for (auto v : map.data()) EXPECT_EQ(v, 0.5);
  auto out = sam::sam_residual(f, p);
  for (std::size_t i = 0; i < f.numel(); ++i) EXPECT_EQ(out[i], 1.5 * f[i]);
}

TEST(Sam, ZeroFeaturesStayZero) {
  auto p = random_params(2, 0.5);
  auto out = sam::sam_residual(Tensor::zeros({4, 5, 5}, DType::F64), p);
  for (auto v : out.data()) EXPECT_EQ(v, 0.0);
}

TEST(Sam, ConstantInputGivesConstantInterior) {
  auto p = random_params(3, 0.3);
  auto map = sam::sam_map(Tensor::full({3, 9, 9}, 0.7, DType::F64), p);
  const double centre = map.at({0, 4, 4});
  for (std::size_t r = 3; r <= 5; ++r)
    for (std::size_t c = 3; c <= 5; ++c) EXPECT_NEAR(map.at({0, r, c}), centre, 1e-15);
}

TEST(Sam, MatchesComposedOracle) {
  for (std::uint64_t seed = 0; seed < 4; ++seed) {
    auto p = random_params(seed, 0.2);
    auto f = features({6, 8, 7}, seed + 10);
    auto map = sam::sam_map(f, p);
    auto want = gate_oracle(f, p);
    for (std::size_t i = 0; i < want.size(); ++i) EXPECT_NEAR(map[i], want[i], 1e-12);
    auto out = sam::sam_residual(f, p);
    for (std::size_t k = 0; k < 6; ++k)
      for (std::size_t i = 0; i < 56; ++i) EXPECT_NEAR(out[k * 56 + i], f[k * 56 + i] * (1 + want[i]), 1e-12);
  }
}

TEST(Sam, GateRatioAndBound) {
  auto p = random_params(5, 1.0);
  auto f = features({4, 6, 6}, 6);
  auto out = sam::sam_residual(f, p);
  double fmax = 0, omax = 0;
  for (std::size_t i = 0; i < f.numel(); ++i) {
    fmax = std::max(fmax, std::abs(f[i]));
    omax = std::max(omax, std::abs(out[i]));
    if (f[i] != 0) {
      const double ratio = out[i] / f[i];
      EXPECT_GT(ratio, 1.0);
      EXPECT_LT(ratio, 2.0);
    }
  }
  EXPECT_LE(omax, 2 * fmax);
}

TEST(Sam, InvariantToChannelOrder) {
  auto p = random_params(7, 0.3);
  auto f = features({4, 5, 5}, 8);
  const std::size_t perm[] = {3, 1, 0, 2};
  Tensor g = f;
  for (std::size_t k = 0; k < 4; ++k)
    for (std::size_t i = 0; i < 25; ++i) g[k * 25 + i] = f[perm[k] * 25 + i];
  auto a = sam::sam_map(f, p), b = sam::sam_map(g, p);
  for (std::size_t i = 0; i < 25; ++i) EXPECT_NEAR(a[i], b[i], 1e-15);
}

TEST(Sam, TapeAgreesWithPlainForward) {
  auto p = random_params(9, 0.3);
  auto f = features({3, 4, 4}, 10);
  Tape tape;
  auto vars = sam::bind(tape, p, false);
  Tensor map;
  auto out = sam::sam_residual(tape.constant(f), vars, &map).value();
  EXPECT_TRUE(out.same_values(sam::sam_residual(f, p)));
  EXPECT_TRUE(map.same_values(sam::sam_map(f, p)));
}

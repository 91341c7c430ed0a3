#include <gtest/gtest.h>

#include <cmath>
#include <functional>

#include "winvit/autograd.hpp"
#include "winvit/errors.hpp"

using namespace winvit;

namespace {

using Fn = std::function<Var(Tape&, std::vector<Var>&)>;

// loss = sum(f(inputs) * w) for a fixed random w; compares tape gradients
// with central differences on every input entry.
double max_grad_error(const Fn& f, std::vector<Tensor> inputs, std::uint64_t seed = 0) {
  Tensor weights;
  auto loss_of = [&](const std::vector<Tensor>& xs, std::vector<Tensor>* grads) {
    Tape tape;
    std::vector<Var> vars;
    for (const auto& x : xs) vars.push_back(tape.parameter(x));
    Var out = f(tape, vars);
    if (weights.numel() != out.value().numel()) {
      Rng rng(seed + 99);
      weights = Tensor::randn(out.shape(), rng, 1.0, DType::F64);
    }
    Var loss = ag::sum(ag::mul(out, tape.constant(weights)));
    if (grads) {
      tape.backward(loss);
      for (const auto& v : vars) grads->push_back(tape.grad(v));
    }
    return loss.value().item();
  };
  std::vector<Tensor> grads;
  loss_of(inputs, &grads);
  double worst = 0.0;
  const double eps = 1e-6;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    for (std::size_t j = 0; j < inputs[i].numel(); ++j) {
      const double saved = inputs[i][j];
      inputs[i][j] = saved + eps;
      const double up = loss_of(inputs, nullptr);
      inputs[i][j] = saved - eps;
      const double down = loss_of(inputs, nullptr);
      inputs[i][j] = saved;
      const double numeric = (up - down) / (2 * eps);
      worst = std::max(worst, std::abs(numeric - grads[i][j]) / std::max({1.0, std::abs(numeric)}));
    }
  }
  return worst;
}

Tensor rnd(Shape s, std::uint64_t seed, double scale = 1.0) {
  Rng rng(seed);
  return Tensor::randn(std::move(s), rng, scale, DType::F64);
}

}  // namespace

TEST(Autograd, MatmulAndLinear) {
  EXPECT_LT(max_grad_error([](Tape&, auto& v) { return ag::matmul(v[0], v[1]); }, {rnd({3, 4}, 1), rnd({4, 2}, 2)}),
            1e-7);
  EXPECT_LT(max_grad_error([](Tape&, auto& v) { return ag::linear(v[0], v[1], v[2]); },
                           {rnd({3, 4}, 1), rnd({4, 2}, 2), rnd({2}, 3)}),
            1e-7);
}

TEST(Autograd, BatchedMatmul) {
  EXPECT_LT(max_grad_error([](Tape&, auto& v) { return ag::bmm(v[0], v[1]); }, {rnd({2, 3, 4}, 1), rnd({2, 4, 5}, 2)}),
            1e-7);
  EXPECT_LT(
      max_grad_error([](Tape&, auto& v) { return ag::bmm_nt(v[0], v[1]); }, {rnd({2, 3, 4}, 1), rnd({2, 5, 4}, 2)}),
      1e-7);
}

TEST(Autograd, Elementwise) {
  EXPECT_LT(max_grad_error([](Tape&, auto& v) { return ag::add(v[0], v[1]); }, {rnd({5}, 1), rnd({5}, 2)}), 1e-7);
  EXPECT_LT(max_grad_error([](Tape&, auto& v) { return ag::add_broadcast(v[0], v[1]); }, {rnd({2, 3, 4}, 1), rnd({3, 4}, 2)}),
            1e-7);
  EXPECT_LT(max_grad_error([](Tape&, auto& v) { return ag::mul(v[0], v[1]); }, {rnd({6}, 1), rnd({6}, 2)}), 1e-7);
  EXPECT_LT(max_grad_error([](Tape&, auto& v) { return ag::scale(v[0], -2.5); }, {rnd({6}, 1)}), 1e-7);
  EXPECT_LT(max_grad_error([](Tape&, auto& v) { return ag::sigmoid(v[0]); }, {rnd({6}, 1, 3.0)}), 1e-7);
  EXPECT_LT(max_grad_error([](Tape&, auto& v) { return ag::gelu(v[0]); }, {rnd({6}, 1, 2.0)}), 1e-7);
}

TEST(Autograd, SoftmaxAndLayerNorm) {
  EXPECT_LT(max_grad_error([](Tape&, auto& v) { return ag::softmax_lastdim(v[0]); }, {rnd({3, 5}, 1, 2.0)}), 1e-7);
  EXPECT_LT(max_grad_error([](Tape&, auto& v) { return ag::layer_norm(v[0], v[1], v[2]); },
                           {rnd({4, 6}, 1, 2.0), rnd({6}, 2), rnd({6}, 3)}),
            1e-6);
}

TEST(Autograd, Convolutions) {
  EXPECT_LT(max_grad_error([](Tape&, auto& v) { return ag::conv2d(v[0], v[1], v[2], 3); },
                           {rnd({2, 5, 5}, 1), rnd({1, 2, 7, 7}, 2), rnd({1}, 3)}),
            1e-7);
  EXPECT_LT(max_grad_error([](Tape&, auto& v) { return ag::depthwise_conv2d(v[0], v[1], v[2], 1); },
                           {rnd({3, 4, 4}, 1), rnd({3, 1, 3, 3}, 2), rnd({3}, 3)}),
            1e-7);
}

TEST(Autograd, PoolingAndSpatialProducts) {
  EXPECT_LT(max_grad_error([](Tape&, auto& v) { return ag::channel_pool(v[0], ops::PoolMode::Avg); }, {rnd({4, 3, 3}, 1)}),
            1e-7);
  EXPECT_LT(max_grad_error([](Tape&, auto& v) { return ag::channel_pool(v[0], ops::PoolMode::Max); }, {rnd({4, 3, 3}, 1)}),
            1e-7);
  EXPECT_LT(max_grad_error([](Tape&, auto& v) { return ag::mul_spatial(v[0], v[1]); }, {rnd({3, 2, 2}, 1), rnd({1, 2, 2}, 2)}),
            1e-7);
  EXPECT_LT(max_grad_error(
                [](Tape&, auto& v) {
                  const Var parts[] = {v[0], v[1]};
                  return ag::concat0(parts);
                },
                {rnd({1, 2, 2}, 1), rnd({2, 2, 2}, 2)}),
            1e-7);
}

TEST(Autograd, LayoutOps) {
  EXPECT_LT(max_grad_error([](Tape&, auto& v) { return ag::permute(v[0], {2, 0, 1}); }, {rnd({2, 3, 4}, 1)}), 1e-7);
  EXPECT_LT(max_grad_error([](Tape&, auto& v) { return ag::transpose2d(v[0]); }, {rnd({2, 3}, 1)}), 1e-7);
  auto index = std::make_shared<const std::vector<std::size_t>>(std::vector<std::size_t>{2, 0, 2, 1});
  EXPECT_LT(max_grad_error([&](Tape&, auto& v) { return ag::gather_rows(v[0], index); }, {rnd({3, 2}, 1)}), 1e-7);
  auto table_index = std::make_shared<const std::vector<std::size_t>>(std::vector<std::size_t>{0, 1, 1, 2});
  EXPECT_LT(max_grad_error([&](Tape&, auto& v) { return ag::gather_table(v[0], table_index, 2); }, {rnd({2, 3}, 1)}),
            1e-7);
  EXPECT_LT(max_grad_error([](Tape&, auto& v) { return ag::mean_rows(v[0]); }, {rnd({4, 3}, 1)}), 1e-7);
}

TEST(Autograd, CrossEntropy) {
  const int labels[] = {2, 0};
  EXPECT_LT(max_grad_error([&](Tape&, auto& v) { return ag::cross_entropy(v[0], labels); }, {rnd({2, 3}, 1, 2.0)}), 1e-7);
  Tape tape;
  Var logits = tape.constant(Tensor::zeros({2, 3}, DType::F64));
  EXPECT_NEAR(ag::cross_entropy(logits, labels).value().item(), std::log(3.0), 1e-15);
  const int bad[] = {3, 0};
  EXPECT_THROW(ag::cross_entropy(logits, bad), ContractError);
}

TEST(Autograd, SharedInputAccumulates) {
  Tape tape;
  Var x = tape.parameter(Tensor({2}, {3.0, -1.0}, DType::F64));
  Var y = ag::sum(ag::mul(x, x));
  tape.backward(y);
  auto g = tape.grad(x);
  EXPECT_DOUBLE_EQ(g[0], 6.0);
  EXPECT_DOUBLE_EQ(g[1], -2.0);
}

TEST(Autograd, BackwardNeedsScalar) {
  Tape tape;
  Var x = tape.parameter(Tensor::zeros({3}, DType::F64));
  EXPECT_THROW(tape.backward(x), ContractError);
}

TEST(Autograd, ConstantsReceiveNoGradient) {
  Tape tape;
  Var c = tape.constant(Tensor::full({2}, 2.0, DType::F64));
  Var p = tape.parameter(Tensor::full({2}, 3.0, DType::F64));
  tape.backward(ag::sum(ag::mul(c, p)));
  EXPECT_FALSE(c.requires_grad());
  EXPECT_DOUBLE_EQ(tape.grad(c)[0], 0.0);
  EXPECT_DOUBLE_EQ(tape.grad(p)[0], 2.0);
}

TEST(Autograd, DropoutIsInvertedAndSeeded) {
  Tape tape;
  Var x = tape.constant(Tensor::full({1000}, 1.0, DType::F64));
  Rng a(5), b(5);
  auto ya = ag::dropout(x, 0.25, true, &a).value();
  auto yb = ag::dropout(x, 0.25, true, &b).value();
  EXPECT_TRUE(ya.same_values(yb));
  for (auto v : ya.data()) EXPECT_TRUE(v == 0.0 || std::abs(v - 4.0 / 3.0) < 1e-15);
  EXPECT_TRUE(ag::dropout(x, 0.25, false, nullptr).value().same_values(x.value()));
  EXPECT_THROW(ag::dropout(x, 1.0, true, &a), ConfigError);
}

TEST(Autograd, ForwardFlopsGoToTapeCounter) {
  FlopCounter counter;
  Tape tape(&counter);
  Var a = tape.constant(rnd({3, 4}, 1));
  Var b = tape.constant(rnd({4, 5}, 2));
  Var bias = tape.constant(rnd({5}, 3));
  ag::linear(a, b, bias);
  EXPECT_EQ(counter.total().matmul, 2u * 3 * 4 * 5);
  EXPECT_EQ(counter.total().elementwise, 15u);
  ag::layer_norm(a, tape.constant(rnd({4}, 4)), tape.constant(rnd({4}, 5)));
  EXPECT_EQ(counter.total().elementwise, 15u + 5u * 12);
}

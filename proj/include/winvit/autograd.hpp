#pragma once

#include <cstddef>
#include <deque>
#include <functional>
#include <initializer_list>
#include <memory>
#include <optional>
#include <span>
#include <vector>

#include "winvit/flops.hpp"
#include "winvit/ops.hpp"
#include "winvit/tensor.hpp"

namespace winvit {

class Tape;

// Handle to a value recorded on a tape.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  bool requires_grad() const;
  std::size_t id() const { return id_; }
  Tape* tape() const { return tape_; }

 private:
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

// Reverse-mode differentiation tape. Nodes are appended after their inputs,
// so replaying in reverse insertion order is a reverse topological order.
// Single writer; one tape per training thread.
class Tape {
 public:
  // Receives the gradient of the node's output; pushes contributions to
  // inputs via accumulate().
  using BackwardFn = std::function<void(Tape&, const Tensor& grad_out)>;

  Tape() = default;
  explicit Tape(FlopCounter* counter) : counter_(counter) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor value);
  Var parameter(Tensor value);
  // Records an op output. The backward function is dropped when no input
  // needs a gradient.
  Var record(Tensor value, std::span<const Var> inputs, BackwardFn backward);
  Var record(Tensor value, std::initializer_list<Var> inputs, BackwardFn backward) {
    return record(std::move(value), std::span<const Var>(inputs.begin(), inputs.size()), std::move(backward));
  }

  // Seeds d(loss)/d(loss) = 1 and propagates to every reachable node.
  void backward(const Var& loss);

  const Tensor& value(const Var& v) const { return nodes_.at(v.id()).value; }
  bool requires_grad(const Var& v) const { return nodes_.at(v.id()).requires_grad; }
  // Zero tensor of the right shape when nothing flowed into v.
  Tensor grad(const Var& v) const;
  void accumulate(const Var& v, const Tensor& delta);

  FlopCounter* counter() const { return counter_; }
  void set_counter(FlopCounter* counter) { counter_ = counter; }
  std::size_t size() const { return nodes_.size(); }
  std::size_t backward_visits() const { return backward_visits_; }

 private:
  struct Node {
    Tensor value;
    std::optional<Tensor> grad;
    BackwardFn backward;
    bool requires_grad = false;
  };

  void check_owner(const Var& v) const;

  std::deque<Node> nodes_;
  FlopCounter* counter_ = nullptr;
  std::size_t backward_visits_ = 0;
};

// Differentiable ops. Forward FLOPs go to the tape's counter, if any.
namespace ag {

Var matmul(const Var& a, const Var& b);
// x[m x k] * w[k x n] + b[n]
Var linear(const Var& x, const Var& w, const Var& b);
Var bmm(const Var& a, const Var& b);
Var bmm_nt(const Var& a, const Var& b);

Var add(const Var& a, const Var& b);
// b's shape must equal a trailing suffix of a's shape; b is broadcast over
// the leading axes.
Var add_broadcast(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double factor);
Var sum(const Var& a);

Var sigmoid(const Var& a);
Var gelu(const Var& a);
Var softmax_lastdim(const Var& a);
// Normalizes over the last axis; gamma/beta have the last axis' size.
Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps = 1e-5);
// Inverted dropout. Identity when inactive or rate == 0.
Var dropout(const Var& x, double rate, bool active, Rng* rng);

Var conv2d(const Var& input, const Var& kernel, const Var& bias, std::size_t padding);
Var depthwise_conv2d(const Var& input, const Var& kernel, const Var& bias, std::size_t padding);
Var channel_pool(const Var& input, ops::PoolMode mode);
// Concatenates along axis 0.
Var concat0(std::span<const Var> parts);
// x[C x H x W] * map[1 x H x W], map replicated across channels.
Var mul_spatial(const Var& x, const Var& map);

Var reshape(const Var& a, Shape shape);
Var transpose2d(const Var& a);
Var permute(const Var& a, std::vector<std::size_t> perm);
Var gather_rows(const Var& a, std::shared_ptr<const std::vector<std::size_t>> index);
// out[j, e] = table[j, index[e]] for a table [h x R]; out is [h x T x T]
// when index has T*T entries.
Var gather_table(const Var& table, std::shared_ptr<const std::vector<std::size_t>> index, std::size_t side);
// Mean over axis 0 of [L x C] -> [C].
Var mean_rows(const Var& a);
// Stacks equally shaped tensors into [n x ...].
Var stack(std::span<const Var> parts);
// Mean negative log-likelihood over a [B x K] batch.
Var cross_entropy(const Var& logits, std::span<const int> labels);

}  // namespace ag
}  // namespace winvit

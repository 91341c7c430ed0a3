#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

namespace winvit {

// Counting convention:
//   matmul / conv  2 x MACs (padded conv taps included)
//   elementwise    1 per output element; layer_norm 5 per element;
//                  channel/token pooling 1 per input element
//   softmax        5 per element
// Reshapes, permutations and gathers are free.
enum class FlopKind { Matmul, Conv, Elementwise, Softmax };

struct FlopTally {
  std::uint64_t matmul = 0;
  std::uint64_t conv = 0;
  std::uint64_t elementwise = 0;
  std::uint64_t softmax = 0;

  std::uint64_t mac_derived() const { return matmul + conv; }
  std::uint64_t pointwise() const { return elementwise + softmax; }
  std::uint64_t total() const { return matmul + conv + elementwise + softmax; }
  FlopTally& operator+=(const FlopTally& o);
};

// Per-invocation instrumented counter, tallied by the currently open scope
// label ("block0.attention", ...). Never global.
class FlopCounter {
 public:
  void add(FlopKind kind, std::uint64_t flops);

  const FlopTally& total() const { return total_; }
  const std::map<std::string, FlopTally>& by_scope() const { return by_scope_; }
  // Sum over every scope equal to `prefix` or nested below it.
  FlopTally under(const std::string& prefix) const;
  const std::string& current_scope() const { return scope_; }

  void clear();

 private:
  friend class FlopScope;
  FlopTally total_;
  std::map<std::string, FlopTally> by_scope_;
  std::string scope_;
  std::vector<std::size_t> marks_;
};

// RAII scope label; a null counter makes it a no-op.
class FlopScope {
 public:
  FlopScope(FlopCounter* counter, const std::string& name);
  ~FlopScope();
  FlopScope(const FlopScope&) = delete;
  FlopScope& operator=(const FlopScope&) = delete;

 private:
  FlopCounter* counter_;
};

inline void count_flops(FlopCounter* counter, FlopKind kind, std::uint64_t flops) {
  if (counter) counter->add(kind, flops);
}

}  // namespace winvit

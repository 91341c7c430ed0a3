#include "winvit/flops.hpp"

namespace winvit {

FlopTally& FlopTally::operator+=(const FlopTally& o) {
  matmul += o.matmul;
  conv += o.conv;
  elementwise += o.elementwise;
  softmax += o.softmax;
  return *this;
}

void FlopCounter::add(FlopKind kind, std::uint64_t flops) {
  auto bump = [&](FlopTally& t) {
    switch (kind) {
      case FlopKind::Matmul: t.matmul += flops; break;
      case FlopKind::Conv: t.conv += flops; break;
      case FlopKind::Elementwise: t.elementwise += flops; break;
      case FlopKind::Softmax: t.softmax += flops; break;
    }
  };
  bump(total_);
  bump(by_scope_[scope_]);
}

FlopTally FlopCounter::under(const std::string& prefix) const {
  FlopTally sum;
  for (const auto& [label, tally] : by_scope_) {
    if (label == prefix || (label.size() > prefix.size() && label.compare(0, prefix.size(), prefix) == 0 &&
                            label[prefix.size()] == '.')) {
      sum += tally;
    }
  }
  return sum;
}

void FlopCounter::clear() {
  total_ = {};
  by_scope_.clear();
  scope_.clear();
  marks_.clear();
}

FlopScope::FlopScope(FlopCounter* counter, const std::string& name) : counter_(counter) {
  if (!counter_) return;
  counter_->marks_.push_back(counter_->scope_.size());
  if (!counter_->scope_.empty()) counter_->scope_ += '.';
  counter_->scope_ += name;
}

FlopScope::~FlopScope() {
  if (!counter_) return;
  counter_->scope_.resize(counter_->marks_.back());
  counter_->marks_.pop_back();
}

}  // namespace winvit

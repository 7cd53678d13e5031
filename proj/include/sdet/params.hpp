#pragma once

#include <string>
#include <utility>
#include <vector>

#include "sdet/tensor.hpp"

namespace sdet {

// Ordered registry of learnable tensors, keyed by layer path ("stem.conv.w").
// Construction-time registration fixes both checkpoint layout and the order
// the optimizer walks parameters in, so runs are reproducible.
class ParamStore {
 public:
  Tensor add(std::string name, Tensor t) {
    t.set_requires_grad(true);
    entries_.emplace_back(std::move(name), t);
    return t;
  }

  // Registered for serialization but ignored by the optimizer (frozen stats).
  Tensor add_buffer(std::string name, Tensor t) {
    entries_.emplace_back(std::move(name), t);
    return t;
  }

  const std::vector<std::pair<std::string, Tensor>>& entries() const { return entries_; }
  std::vector<std::pair<std::string, Tensor>>& entries() { return entries_; }

  size_t count() const { return entries_.size(); }
  size_t numel() const {
    size_t n = 0;
    for (const auto& [name, t] : entries_) n += t.numel();
    return n;
  }

  void zero_grads() {
    for (auto& [name, t] : entries_) t.zero_grad();
  }

 private:
  std::vector<std::pair<std::string, Tensor>> entries_;
};

}  // namespace sdet

#pragma once

// Insertion-ordered parameter registry. Tensors are shared handles: the
// structured model fields and the registry refer to the same storage, so
// in-place optimizer updates are visible through both.

#include <string>
#include <unordered_map>
#include <vector>

#include "gaitforge/checkpoint.hpp"
#include "gaitforge/tensor.hpp"

namespace gaitforge {

template <typename S>
class ParamStore {
 public:
  // Registers `t` under `name` and returns the shared handle.
  Tensor<S>& add(const std::string& name, Tensor<S> t) {
    check(index_.find(name) == index_.end(),
          "duplicate parameter name: " + name);
    index_.emplace(name, entries_.size());
    entries_.emplace_back(name, std::move(t));
    return entries_.back().second;
  }
  bool has(const std::string& name) const {
    return index_.find(name) != index_.end();
  }
  Tensor<S>& at(const std::string& name) {
    auto it = index_.find(name);
    check(it != index_.end(), "unknown parameter name: " + name);
    return entries_[it->second].second;
  }
  const Tensor<S>& at(const std::string& name) const {
    auto it = index_.find(name);
    check(it != index_.end(), "unknown parameter name: " + name);
    return entries_[it->second].second;
  }
  const NamedTensors<S>& entries() const { return entries_; }
  size_t size() const { return entries_.size(); }
  int64_t total_elements() const {
    int64_t n = 0;
    for (const auto& [name, t] : entries_) n += t.numel();
    return n;
  }

 private:
  NamedTensors<S> entries_;
  std::unordered_map<std::string, size_t> index_;
};

}  // namespace gaitforge

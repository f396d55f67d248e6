// Copyright 2026 The varnn authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

#pragma once

#include <deque>
#include <string>
#include <unordered_map>

#include "varnn/tensor.hpp"

namespace varnn {

/// Named parameter set. Entry shapes are fixed at creation; the gradient
/// buffer always mirrors the value shape. Insertion order is preserved so
/// optimizer sweeps and gradient reductions are deterministic.
template <typename T>
class ParamStore {
 public:
  struct Entry {
    std::string name;
    Tensor<T> value;
    Tensor<T> grad;
    bool trainable = true;
  };

  Entry& add(const std::string& name, Tensor<T> init, bool trainable = true) {
    if (index_.count(name)) throw ContractError("parameter '" + name + "' already exists");
    entries_.push_back(Entry{name, std::move(init), {}, trainable});
    Entry& e = entries_.back();
    e.grad = Tensor<T>::zeros(e.value.shape);
    index_[name] = entries_.size() - 1;
    return e;
  }

  Entry& get(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw ContractError("unknown parameter '" + name + "'");
    return entries_[it->second];
  }
  const Entry& get(const std::string& name) const { return const_cast<ParamStore*>(this)->get(name); }
  bool has(const std::string& name) const { return index_.count(name) != 0; }

  std::deque<Entry>& entries() { return entries_; }
  const std::deque<Entry>& entries() const { return entries_; }
  size_t size() const { return entries_.size(); }

  void zero_grads() {
    for (auto& e : entries_) std::fill(e.grad.data.begin(), e.grad.data.end(), T(0));
  }

  size_t trainable_scalars() const {
    size_t n = 0;
    for (const auto& e : entries_)
      if (e.trainable) n += e.value.numel();
    return n;
  }

 private:
  // deque: stable Entry addresses; tape nodes hold pointers across adds.
  std::deque<Entry> entries_;
  std::unordered_map<std::string, size_t> index_;
};

}  // namespace varnn

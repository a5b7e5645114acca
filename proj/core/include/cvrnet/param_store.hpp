#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "cvrnet/tensor.hpp"

namespace cvrnet {

/// Ordered collection of named parameters and buffers. Entries keep their
/// insertion order, so parameter initialization, optimizer sweeps and
/// checkpoint layout are all deterministic. Trainable entries carry a
/// lazily allocated gradient slot of the same shape; buffers (batch-norm
/// running statistics) have no gradient.
template <typename T>
class ParamStoreT {
 public:
  struct Entry {
    std::string name;
    TensorT<T> value;
    TensorT<T> grad;  // empty until zero_grads()/accumulate_grad()
    bool trainable = true;
  };

  TensorT<T>& create(const std::string& name, Shape shape, bool trainable = true) {
    if (index_.count(name)) throw ValueError("duplicate parameter name: " + name);
    index_.emplace(name, entries_.size());
    entries_.push_back(Entry{name, TensorT<T>(std::move(shape)), TensorT<T>(), trainable});
    return entries_.back().value;
  }

  bool has(const std::string& name) const { return index_.count(name) != 0; }

  TensorT<T>& value(const std::string& name) { return entry(name).value; }
  const TensorT<T>& value(const std::string& name) const { return entry(name).value; }

  Entry& entry(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw ValueError("unknown parameter: " + name);
    return entries_[it->second];
  }
  const Entry& entry(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ValueError("unknown parameter: " + name);
    return entries_[it->second];
  }

  std::size_t size() const { return entries_.size(); }
  Entry& entry_at(std::size_t i) { return entries_[i]; }
  const Entry& entry_at(std::size_t i) const { return entries_[i]; }

  void accumulate_grad(const std::string& name, const TensorT<T>& g) {
    Entry& e = entry(name);
    if (!e.trainable) throw ValueError("gradient accumulated into buffer: " + name);
    if (g.shape() != e.value.shape()) {
      throw ShapeError("gradient shape " + shape_str(g.shape()) + " for parameter " + name +
                       " of shape " + shape_str(e.value.shape()));
    }
    if (e.grad.empty()) {
      e.grad = g;
    } else {
      e.grad.add_(g);
    }
  }

  /// Allocates (or clears) every trainable gradient slot.
  void zero_grads() {
    for (Entry& e : entries_) {
      if (!e.trainable) continue;
      if (e.grad.empty()) {
        e.grad = TensorT<T>(e.value.shape());
      } else {
        e.grad.fill(T(0));
      }
    }
  }

  void drop_grads() {
    for (Entry& e : entries_) e.grad = TensorT<T>();
  }

  std::int64_t num_params(bool trainable_only = true) const {
    std::int64_t n = 0;
    for (const Entry& e : entries_) {
      if (!trainable_only || e.trainable) n += e.value.numel();
    }
    return n;
  }

 private:
  std::vector<Entry> entries_;
  std::unordered_map<std::string, std::size_t> index_;
};

using ParamStore = ParamStoreT<float>;

}  // namespace cvrnet

#pragma once

#include <deque>
#include <string>
#include <unordered_map>
#include <vector>

#include "actxfer/tensor.hpp"

namespace actxfer {

template <typename S>
struct Parameter {
  BasicTensor<S> value;
  BasicTensor<S> grad;
  bool frozen = false;
};

/// Named trainable parameters in insertion order. Entries have stable
/// addresses for the lifetime of the store, so a tape may point at them.
template <typename S>
class BasicParamStore {
 public:
  Parameter<S>& add(const std::string& name, BasicTensor<S> value, bool frozen = false) {
    if (index_.count(name)) throw ConfigError("duplicate parameter name '" + name + "'");
    BasicTensor<S> grad(value.shape());
    entries_.push_back(Parameter<S>{std::move(value), std::move(grad), frozen});
    index_.emplace(name, entries_.size() - 1);
    names_.push_back(name);
    return entries_.back();
  }

  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  Parameter<S>& at(const std::string& name) { return entries_[lookup(name)]; }
  const Parameter<S>& at(const std::string& name) const { return entries_[lookup(name)]; }

  const std::vector<std::string>& names() const noexcept { return names_; }
  std::size_t entry_count() const noexcept { return entries_.size(); }

  /// Total number of scalars.
  std::size_t numel() const {
    std::size_t n = 0;
    for (const auto& e : entries_) n += e.value.size();
    return n;
  }

  std::size_t trainable_numel() const {
    std::size_t n = 0;
    for (const auto& e : entries_) n += e.frozen ? 0 : e.value.size();
    return n;
  }

  void set_frozen(const std::string& name, bool frozen) { at(name).frozen = frozen; }

  void set_all_frozen(bool frozen) {
    for (auto& e : entries_) e.frozen = frozen;
  }

  void zero_grad() {
    for (auto& e : entries_) e.grad.fill(S(0));
  }

  void zero_frozen_grads() {
    for (auto& e : entries_)
      if (e.frozen) e.grad.fill(S(0));
  }

  template <typename F>
  void for_each(F&& f) {
    for (std::size_t i = 0; i < entries_.size(); ++i) f(names_[i], entries_[i]);
  }

  template <typename F>
  void for_each(F&& f) const {
    for (std::size_t i = 0; i < entries_.size(); ++i) f(names_[i], entries_[i]);
  }

  /// Copies values (not grads or frozen flags) from another store with identical layout.
  void copy_values_from(const BasicParamStore& other) {
    for (std::size_t i = 0; i < entries_.size(); ++i) {
      const auto& src = other.at(names_[i]);
      if (src.value.shape() != entries_[i].value.shape()) {
        throw ConfigError("parameter '" + names_[i] + "' shape " + shape_str(entries_[i].value.shape()) +
                          " vs " + shape_str(src.value.shape()));
      }
      entries_[i].value = src.value;
    }
  }

 private:
  std::size_t lookup(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ConfigError("unknown parameter '" + name + "'");
    return it->second;
  }

  std::deque<Parameter<S>> entries_;
  std::vector<std::string> names_;
  std::unordered_map<std::string, std::size_t> index_;
};

using ParamStore = BasicParamStore<float>;

}  // namespace actxfer

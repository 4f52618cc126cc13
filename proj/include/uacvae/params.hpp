#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "uacvae/errors.hpp"
#include "uacvae/tensor.hpp"

namespace uacvae {

/// Named trainable tensors plus their Adam moments. Entry order is the
/// manifest order used for serialization.
template <class T>
class ParamStore {
 public:
  struct Entry {
    std::string name;
    Tensor<T> value;
    Tensor<T> m;
    Tensor<T> v;
  };

  Tensor<T>& add(const std::string& name, Tensor<T> init) {
    if (index_.count(name)) throw ConfigError("parameter registered twice: " + name);
    index_.emplace(name, entries_.size());
    Tensor<T> zeros(init.shape());
    entries_.push_back(Entry{name, std::move(init), zeros, zeros});
    return entries_.back().value;
  }

  bool contains(std::string_view name) const { return index_.count(std::string(name)) != 0; }

  std::size_t index_of(std::string_view name) const {
    auto it = index_.find(std::string(name));
    if (it == index_.end()) throw ConfigError("unknown parameter: " + std::string(name));
    return it->second;
  }

  Tensor<T>& get(std::string_view name) { return entries_[index_of(name)].value; }
  const Tensor<T>& get(std::string_view name) const { return entries_[index_of(name)].value; }

  std::vector<Entry>& entries() { return entries_; }
  const std::vector<Entry>& entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& e : entries_) n += e.value.size();
    return n;
  }

  std::uint64_t step() const { return step_; }
  void set_step(std::uint64_t s) { step_ = s; }

  template <class U>
  ParamStore<U> cast() const {
    ParamStore<U> out;
    for (const auto& e : entries_) out.add(e.name, e.value.template cast<U>());
    out.set_step(step_);
    return out;
  }

 private:
  std::vector<Entry> entries_;
  std::unordered_map<std::string, std::size_t> index_;
  std::uint64_t step_ = 0;
};

/// Gradients aligned with ParamStore::entries(); unreachable parameters hold zeros.
template <class T>
using GradList = std::vector<Tensor<T>>;

/// Matrices ~ Normal(0, stddev^2).
template <class T>
Tensor<T> normal_init(Shape shape, std::mt19937_64& rng, double stddev = 0.02) {
  Tensor<T> t(std::move(shape));
  std::normal_distribution<double> dist(0.0, stddev);
  for (auto& v : t.values()) v = static_cast<T>(dist(rng));
  return t;
}

struct AdamConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// One bias-corrected Adam update. Throws before touching any parameter if a
/// gradient is non-finite.
template <class T>
void adam_step(ParamStore<T>& store, const GradList<T>& grads, const AdamConfig& cfg) {
  auto& entries = store.entries();
  if (grads.size() != entries.size()) {
    throw DimensionError("adam_step: " + std::to_string(grads.size()) + " gradients for " +
                         std::to_string(entries.size()) + " parameters");
  }
  for (std::size_t i = 0; i < entries.size(); ++i) {
    if (grads[i].shape() != entries[i].value.shape()) {
      throw DimensionError("adam_step: gradient shape " + shape_string(grads[i].shape()) +
                           " for parameter " + entries[i].name + " " +
                           shape_string(entries[i].value.shape()));
    }
    for (T g : grads[i].values()) {
      if (!std::isfinite(static_cast<double>(g))) {
        throw NumericError("adam_step: non-finite gradient for parameter " + entries[i].name);
      }
    }
  }
  const std::uint64_t t = store.step() + 1;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(t));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(t));
  for (std::size_t i = 0; i < entries.size(); ++i) {
    auto& e = entries[i];
    const T* g = grads[i].data();
    T* w = e.value.data();
    T* m = e.m.data();
    T* v = e.v.data();
    for (std::size_t k = 0; k < e.value.size(); ++k) {
      m[k] = static_cast<T>(cfg.beta1 * m[k] + (1.0 - cfg.beta1) * g[k]);
      v[k] = static_cast<T>(cfg.beta2 * v[k] + (1.0 - cfg.beta2) * g[k] * g[k]);
      const double mhat = m[k] / bc1;
      const double vhat = v[k] / bc2;
      w[k] = static_cast<T>(w[k] - cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps));
    }
  }
  store.set_step(t);
}

/// Rescales grads in place so their global L2 norm is at most max_norm.
/// Returns the norm before clipping.
template <class T>
double clip_global_norm(GradList<T>& grads, double max_norm) {
  double sq = 0.0;
  for (const auto& g : grads)
    for (T x : g.values()) sq += static_cast<double>(x) * x;
  const double norm = std::sqrt(sq);
  if (norm > max_norm && norm > 0.0) {
    const double s = max_norm / norm;
    for (auto& g : grads)
      for (auto& x : g.values()) x = static_cast<T>(x * s);
  }
  return norm;
}

}  // namespace uacvae

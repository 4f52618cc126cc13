#pragma once

#include <cmath>
#include <algorithm>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "uacvae/autograd.hpp"
#include "uacvae/params.hpp"

namespace gradcheck {

using uacvae::Graph;
using uacvae::Tensor;
using uacvae::Var;

template <class T>
using LossFn = std::function<Var<T>(Graph<T>&, const std::vector<Var<T>>&)>;

struct Report {
  double max_rel_error = 0;
  std::string worst;
};

/// Central differences on every element of every input against reverse-mode
/// gradients. Relative error is |a - n| / max(1, |a|, |n|).
template <class T>
Report check(const LossFn<T>& f, std::vector<Tensor<T>> inputs, double h) {
  Graph<T> g;
  std::vector<Var<T>> leaves;
  for (const auto& t : inputs) leaves.push_back(g.variable(t));
  Var<T> loss = f(g, leaves);
  g.backward(loss);
  std::vector<Tensor<T>> analytic;
  for (const auto& v : leaves) {
    Tensor<T> gv = g.grad(v);
    analytic.push_back(gv.empty() ? Tensor<T>(v.value().shape()) : gv);
  }

  auto eval = [&](const std::vector<Tensor<T>>& in) {
    Graph<T> ge(false);
    std::vector<Var<T>> vs;
    for (const auto& t : in) vs.push_back(ge.constant(t));
    return static_cast<double>(f(ge, vs).value()[0]);
  };

  Report r;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    for (std::size_t i = 0; i < inputs[k].size(); ++i) {
      const T orig = inputs[k][i];
      inputs[k][i] = static_cast<T>(orig + h);
      const double up = eval(inputs);
      inputs[k][i] = static_cast<T>(orig - h);
      const double down = eval(inputs);
      inputs[k][i] = orig;
      const double numeric = (up - down) / (2 * h);
      const double a = static_cast<double>(analytic[k][i]);
      const double rel = std::abs(a - numeric) / std::max({1.0, std::abs(a), std::abs(numeric)});
      if (rel > r.max_rel_error) {
        r.max_rel_error = rel;
        r.worst = "input " + std::to_string(k) + "[" + std::to_string(i) + "] analytic " + std::to_string(a) +
                  " numeric " + std::to_string(numeric);
      }
    }
  }
  return r;
}

/// Same check against every parameter of a store. `stride` > 1 samples
/// every stride-th element of large tensors.
template <class T>
Report check_params(const std::function<Var<T>(Graph<T>&, const uacvae::ParamStore<T>&)>& f,
                    uacvae::ParamStore<T>& store, double h, std::size_t stride = 1) {
  Graph<T> g;
  g.backward(f(g, store));
  const auto analytic = g.parameter_grads(store);
  auto eval = [&] {
    Graph<T> ge(false);
    return static_cast<double>(f(ge, store).value()[0]);
  };
  Report r;
  for (std::size_t k = 0; k < store.size(); ++k) {
    auto& value = store.entries()[k].value;
    const std::size_t step = value.size() > 64 ? stride : 1;
    for (std::size_t i = 0; i < value.size(); i += step) {
      const T orig = value[i];
      value[i] = static_cast<T>(orig + h);
      const double up = eval();
      value[i] = static_cast<T>(orig - h);
      const double down = eval();
      value[i] = orig;
      const double numeric = (up - down) / (2 * h);
      const double a = static_cast<double>(analytic[k][i]);
      const double rel = std::abs(a - numeric) / std::max({1.0, std::abs(a), std::abs(numeric)});
      if (rel > r.max_rel_error) {
        r.max_rel_error = rel;
        r.worst = store.entries()[k].name + "[" + std::to_string(i) + "] analytic " + std::to_string(a) +
                  " numeric " + std::to_string(numeric);
      }
    }
  }
  return r;
}

template <class T>
Tensor<T> random_tensor(uacvae::Shape shape, std::mt19937_64& rng, double scale = 1.0) {
  Tensor<T> t(std::move(shape));
  std::normal_distribution<double> d(0.0, scale);
  for (auto& v : t.values()) v = static_cast<T>(d(rng));
  return t;
}

}  // namespace gradcheck

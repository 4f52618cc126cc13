#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "gradcheck.hpp"
#include "uacvae/autograd.hpp"
#include "uacvae/errors.hpp"

using namespace uacvae;
using gradcheck::random_tensor;

namespace {

template <class T>
struct Tol;
template <>
struct Tol<double> {
  static constexpr double h = 1e-6;
  static constexpr double rel = 1e-4;
};
template <>
struct Tol<float> {
  static constexpr double h = 5e-3;
  static constexpr double rel = 1e-2;
};

// Weighted sum so every output element gets a distinct upstream gradient.
template <class T>
Var<T> weighted(Graph<T>& g, Var<T> y, std::uint64_t seed = 99) {
  std::mt19937_64 rng(seed);
  return sum(mul(y, g.constant(random_tensor<T>(y.value().shape(), rng))));
}

template <class T>
class OpGrad : public ::testing::Test {
 protected:
  void expect_ok(const gradcheck::LossFn<T>& f, std::vector<Tensor<T>> in) {
    auto r = gradcheck::check<T>(f, std::move(in), Tol<T>::h);
    EXPECT_LE(r.max_rel_error, Tol<T>::rel) << r.worst;
  }
  std::mt19937_64 rng{7};
};

using Reals = ::testing::Types<double, float>;
TYPED_TEST_SUITE(OpGrad, Reals);

TYPED_TEST(OpGrad, Matmul) {
  using T = TypeParam;
  this->expect_ok([](Graph<T>& g, const auto& v) { return weighted(g, matmul(v[0], v[1])); },
                  {random_tensor<T>({3, 4}, this->rng), random_tensor<T>({4, 5}, this->rng)});
  this->expect_ok([](Graph<T>& g, const auto& v) { return weighted(g, matmul_nt(v[0], v[1])); },
                  {random_tensor<T>({3, 4}, this->rng), random_tensor<T>({5, 4}, this->rng)});
}

TYPED_TEST(OpGrad, Elementwise) {
  using T = TypeParam;
  auto a = random_tensor<T>({3, 4}, this->rng), b = random_tensor<T>({3, 4}, this->rng);
  auto bias = random_tensor<T>({1, 4}, this->rng);
  this->expect_ok([](Graph<T>& g, const auto& v) { return weighted(g, add(v[0], v[1])); }, {a, b});
  this->expect_ok([](Graph<T>& g, const auto& v) { return weighted(g, add(v[0], v[1])); }, {a, bias});
  this->expect_ok([](Graph<T>& g, const auto& v) { return weighted(g, sub(v[0], v[1])); }, {a, b});
  this->expect_ok([](Graph<T>& g, const auto& v) { return weighted(g, mul(v[0], v[1])); }, {a, b});
  this->expect_ok([](Graph<T>& g, const auto& v) { return weighted(g, scale(v[0], T(-1.5))); }, {a});
  this->expect_ok([](Graph<T>& g, const auto& v) { return weighted(g, add_scalar(v[0], T(0.3))); }, {a});
  this->expect_ok([](Graph<T>& g, const auto& v) { return weighted(g, tanh(v[0])); }, {a});
  this->expect_ok([](Graph<T>& g, const auto& v) { return weighted(g, exp(v[0])); }, {a});
}

TYPED_TEST(OpGrad, KinkedOpsAwayFromKinks) {
  using T = TypeParam;
  auto x = Tensor<double>({2, 4}, {-1.2, 0.7, 2.5, -0.4, 0.9, -3.1, 1.6, 0.2}).cast<T>();
  this->expect_ok([](Graph<T>& g, const auto& v) { return weighted(g, relu(v[0])); }, {x});
  this->expect_ok([](Graph<T>& g, const auto& v) { return weighted(g, clamp(v[0], T(-1), T(1))); }, {x});
}

TYPED_TEST(OpGrad, SoftmaxFamily) {
  using T = TypeParam;
  auto x = random_tensor<T>({4, 4}, this->rng);
  this->expect_ok([](Graph<T>& g, const auto& v) { return weighted(g, softmax(v[0])); }, {x});
  this->expect_ok([](Graph<T>& g, const auto& v) { return weighted(g, softmax(v[0], true)); }, {x});
  this->expect_ok([](Graph<T>& g, const auto& v) { return weighted(g, log_softmax(v[0])); }, {x});
}

TYPED_TEST(OpGrad, LayerNorm) {
  using T = TypeParam;
  this->expect_ok(
      [](Graph<T>& g, const auto& v) { return weighted(g, layer_norm(v[0], v[1], v[2])); },
      {random_tensor<T>({3, 6}, this->rng), random_tensor<T>({1, 6}, this->rng), random_tensor<T>({1, 6}, this->rng)});
}

TYPED_TEST(OpGrad, StructuralOps) {
  using T = TypeParam;
  auto a = random_tensor<T>({2, 3}, this->rng), b = random_tensor<T>({2, 2}, this->rng);
  auto c = random_tensor<T>({1, 3}, this->rng);
  this->expect_ok([](Graph<T>& g, const auto& v) { return weighted(g, concat_cols<T>({v[0], v[1]})); }, {a, b});
  this->expect_ok([](Graph<T>& g, const auto& v) { return weighted(g, concat_rows<T>({v[0], v[1]})); }, {a, c});
  this->expect_ok([](Graph<T>& g, const auto& v) { return weighted(g, slice_cols(v[0], 1, 3)); }, {a});
  this->expect_ok([](Graph<T>& g, const auto& v) { return weighted(g, mean_pool(v[0])); }, {a});
  this->expect_ok([](Graph<T>& g, const auto& v) { return weighted(g, mean_pool(v[0], {true, false})); }, {a});
  this->expect_ok([](Graph<T>& g, const auto& v) { return weighted(g, embedding(v[0], {2, 0, 2, 1})); },
                  {random_tensor<T>({3, 4}, this->rng)});
}

TYPED_TEST(OpGrad, Conv1d) {
  using T = TypeParam;
  this->expect_ok([](Graph<T>& g, const auto& v) { return weighted(g, conv1d(v[0], v[1], v[2], 3, 1)); },
                  {random_tensor<T>({2, 7}, this->rng), random_tensor<T>({1, 6}, this->rng),
                   random_tensor<T>({1, 1}, this->rng)});
  this->expect_ok([](Graph<T>& g, const auto& v) { return weighted(g, conv1d(v[0], v[1], v[2], 5, 0)); },
                  {random_tensor<T>({2, 9}, this->rng), random_tensor<T>({3, 10}, this->rng),
                   random_tensor<T>({1, 3}, this->rng)});
}

TYPED_TEST(OpGrad, Losses) {
  using T = TypeParam;
  auto logits = random_tensor<T>({4, 6}, this->rng);
  this->expect_ok([](Graph<T>&, const auto& v) { return cross_entropy(v[0], {1, 5, 0, 3}, 0); }, {logits});
  this->expect_ok([](Graph<T>&, const auto& v) { return bag_nll(v[0], {1, 1, 4, 2}); },
                  {random_tensor<T>({1, 6}, this->rng)});
}

TEST(Autograd, ForwardValues) {
  Graph<double> g;
  auto a = g.constant(Tensor<double>({2, 2}, {1, 2, 3, 4}));
  auto b = g.constant(Tensor<double>({2, 2}, {5, 6, 7, 8}));
  EXPECT_EQ(matmul(a, b).value(), Tensor<double>({2, 2}, {19, 22, 43, 50}));
  EXPECT_EQ(matmul_nt(a, b).value(), Tensor<double>({2, 2}, {17, 23, 39, 53}));
  EXPECT_EQ(sum(a).value()[0], 10.0);
  auto sm = softmax(a, true).value();
  EXPECT_DOUBLE_EQ(sm(0, 0), 1.0);
  EXPECT_DOUBLE_EQ(sm(0, 1), 0.0);
  EXPECT_NEAR(sm(1, 0), 1.0 / (1.0 + std::exp(1.0)), 1e-15);
  auto pooled = mean_pool(a, {false, true}).value();
  EXPECT_EQ(pooled, Tensor<double>({1, 2}, {3, 4}));
  auto ln = layer_norm(a, g.constant(Tensor<double>({1, 2}, {1, 1})), g.constant(Tensor<double>({1, 2}, {0, 0}))).value();
  EXPECT_NEAR(ln(0, 0), -1.0, 1e-4);
  EXPECT_NEAR(ln(0, 1), 1.0, 1e-4);
}

TEST(Autograd, Conv1dForwardMatchesDirectSum) {
  Graph<double> g;
  auto x = g.constant(Tensor<double>({2, 3}, {1, 2, 3, 10, 20, 30}));
  auto w = g.constant(Tensor<double>({1, 6}, {1, 0, -1, 0, 1, 0}));
  auto b = g.constant(Tensor<double>({1, 1}, {0.5}));
  // channel 0 contributes x[t-1] - x[t+1], channel 1 contributes x[t].
  EXPECT_EQ(conv1d(x, w, b, 3, 1).value(), Tensor<double>({1, 3}, {-2 + 10 + 0.5, 1 - 3 + 20 + 0.5, 2 + 30 + 0.5}));
}

TEST(Autograd, CrossEntropyIgnoresPad) {
  Graph<double> g;
  auto logits = g.constant(Tensor<double>({2, 3}, {0, 0, 0, 5, 1, 2}));
  EXPECT_NEAR(cross_entropy(logits, {1, 0}, 0).value()[0], std::log(3.0), 1e-12);
}

TEST(Autograd, NonFiniteValueNamesOp) {
  Graph<double> g;
  auto x = g.variable(Tensor<double>({1, 1}, {1000.0}));
  try {
    exp(x);
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("exp"), std::string::npos);
  }
}

TEST(Autograd, ShapeMismatchThrows) {
  Graph<double> g;
  auto a = g.constant(Tensor<double>({2, 3}));
  auto b = g.constant(Tensor<double>({2, 3}));
  EXPECT_THROW(matmul(a, b), DimensionError);
  EXPECT_THROW(add(a, g.constant(Tensor<double>({3, 3}))), DimensionError);
  EXPECT_THROW(g.backward(a), DimensionError);
}

TEST(Autograd, ReusedParameterAccumulates) {
  ParamStore<double> store;
  store.add("w", Tensor<double>({1, 1}, {3.0}));
  Graph<double> g;
  auto w = g.parameter(store, "w");
  auto w2 = g.parameter(store, "w");
  EXPECT_EQ(w.id, w2.id);
  auto loss = sum(mul(w, w2));
  g.backward(loss);
  EXPECT_DOUBLE_EQ(g.parameter_grads(store)[0][0], 6.0);
}

TEST(Autograd, UnreachedParameterGetsZeroGrad) {
  ParamStore<double> store;
  store.add("a", Tensor<double>({1, 2}, {1, 2}));
  store.add("b", Tensor<double>({1, 2}, {1, 2}));
  Graph<double> g;
  g.backward(sum(g.parameter(store, "a")));
  auto grads = g.parameter_grads(store);
  EXPECT_EQ(grads[0], Tensor<double>({1, 2}, {1, 1}));
  EXPECT_EQ(grads[1], Tensor<double>({1, 2}, {0, 0}));
}

TEST(Autograd, NonRecordingGraphRefusesBackward) {
  Graph<double> g(false);
  auto x = g.variable(Tensor<double>::scalar(1.0));
  EXPECT_FALSE(g.requires_grad(x));
  EXPECT_THROW(g.backward(x), NumericError);
}

}  // namespace

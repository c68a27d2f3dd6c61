#include <gtest/gtest.h>

#include <cmath>
#include <stdexcept>
#include <vector>

#include "bevnet/random.hpp"
#include "bevnet/tensor.hpp"
#include "testutil.hpp"

using bevnet::EwOp;
using bevnet::ReduceOp;
using bevnet::Shape;
using bevnet::Tape;
using bevnet::TapeScope;
using bevnet::Tensor;
using testutil::expect_grads_match;
using testutil::random_signed_tensor;
using testutil::random_tensor;

using T = Tensor<double>;

TEST(Elementwise, AddValues) {
  T a({2}, {1, 2});
  T b({2}, {3, 4});
  T c = bevnet::add(a, b);
  EXPECT_EQ(c.vec(), (std::vector<double>{4, 6}));
}

TEST(Elementwise, SigmoidAtZero) {
  T x({1}, {0.0});
  EXPECT_DOUBLE_EQ(bevnet::sigmoid(x).item(), 0.5);
}

TEST(Elementwise, DispatcherCoversAllKinds) {
  T a({3}, {0.5, 1.0, 2.0});
  T b({3}, {2.0, 3.0, 4.0});
  EXPECT_DOUBLE_EQ(bevnet::elementwise(EwOp::add, a, &b).vec()[0], 2.5);
  EXPECT_DOUBLE_EQ(bevnet::elementwise(EwOp::sub, a, &b).vec()[1], -2.0);
  EXPECT_DOUBLE_EQ(bevnet::elementwise(EwOp::mul, a, &b).vec()[2], 8.0);
  EXPECT_DOUBLE_EQ(bevnet::elementwise(EwOp::div, a, &b).vec()[0], 0.25);
  EXPECT_DOUBLE_EQ(bevnet::elementwise(EwOp::pow, a, &b).vec()[1], 1.0);
  EXPECT_NEAR(bevnet::elementwise(EwOp::exp, a).vec()[1], std::exp(1.0), 1e-12);
  EXPECT_NEAR(bevnet::elementwise(EwOp::log, a).vec()[2], std::log(2.0), 1e-12);
  EXPECT_DOUBLE_EQ(bevnet::elementwise(EwOp::relu, a).vec()[0], 0.5);
  EXPECT_DOUBLE_EQ(bevnet::elementwise(EwOp::neg, a).vec()[0], -0.5);
  EXPECT_NEAR(bevnet::elementwise(EwOp::tanh, a).vec()[1], std::tanh(1.0),
              1e-12);
  EXPECT_NEAR(bevnet::elementwise(EwOp::sigmoid, a).vec()[0],
              1.0 / (1.0 + std::exp(-0.5)), 1e-12);
  EXPECT_THROW(bevnet::elementwise(EwOp::add, a), std::invalid_argument);
}

TEST(Elementwise, ShapeMismatchReportsBothShapes) {
  T a = T::zeros({2, 3});
  T b = T::zeros({4, 5});
  try {
    bevnet::add(a, b);
    FAIL() << "expected shape error";
  } catch (const std::invalid_argument& e) {
    std::string msg = e.what();
    EXPECT_NE(msg.find("[2,3]"), std::string::npos) << msg;
    EXPECT_NE(msg.find("[4,5]"), std::string::npos) << msg;
  }
}

TEST(Elementwise, Broadcasting) {
  T a({2, 3}, {1, 2, 3, 4, 5, 6});
  T row({3}, {10, 20, 30});
  T c = bevnet::add(a, row);
  EXPECT_EQ(c.shape(), (Shape{2, 3}));
  EXPECT_EQ(c.vec(), (std::vector<double>{11, 22, 33, 14, 25, 36}));
  T col({2, 1}, {100, 200});
  T d = bevnet::add(a, col);
  EXPECT_EQ(d.vec(), (std::vector<double>{101, 102, 103, 204, 205, 206}));
  T s = T::scalar(1.0);
  EXPECT_EQ(bevnet::add(a, s).vec()[5], 7);
}

// d/dx of x·exp(x) at x=1 against the central difference quotient.
TEST(Gradients, XTimesExpX) {
  T x({1}, {1.0});
  expect_grads_match(
      {&x}, [&]() { return bevnet::mul(x, bevnet::exp(x)); }, 1e-6,
      "x*exp(x)");
  // Against the closed form too: (1+x)·exp(x) at 1.
  x.set_requires_grad(true);
  Tape<double> tape;
  TapeScope<double> scope(tape);
  T y = bevnet::mul(x, bevnet::exp(x));
  tape.backward(y);
  EXPECT_NEAR(x.grad()[0], 2.0 * std::exp(1.0), 1e-12);
}

TEST(Matmul, IdentityAndHandValues) {
  T eye({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  bevnet::Rng rng(7);
  T m = random_tensor(rng, {3, 3}, -2, 2);
  T p = bevnet::matmul(eye, m);
  for (size_t i = 0; i < 9; ++i) EXPECT_DOUBLE_EQ(p.vec()[i], m.vec()[i]);

  T a({2, 2}, {1, 2, 3, 4});
  T b({2, 1}, {5, 6});
  T c = bevnet::matmul(a, b);
  EXPECT_EQ(c.shape(), (Shape{2, 1}));
  EXPECT_EQ(c.vec(), (std::vector<double>{17, 39}));
}

TEST(Matmul, InnerDimMismatch) {
  EXPECT_THROW(bevnet::matmul(T::zeros({2, 3}), T::zeros({4, 2})),
               std::invalid_argument);
}

TEST(Matmul, GradientVsFiniteDifference) {
  bevnet::Rng rng(11);
  T a = random_tensor(rng, {4, 5}, -1, 1);
  T b = random_tensor(rng, {5, 3}, -1, 1);
  expect_grads_match(
      {&a, &b},
      [&]() { return bevnet::sum_all(bevnet::matmul(a, b)); }, 1e-5,
      "matmul 4x5*5x3");
}

TEST(Matmul, BatchedAndSharedOperand) {
  bevnet::Rng rng(13);
  T a = random_tensor(rng, {3, 2, 4}, -1, 1);
  T b = random_tensor(rng, {3, 4, 2}, -1, 1);
  T c = bevnet::matmul(a, b);
  EXPECT_EQ(c.shape(), (Shape{3, 2, 2}));
  // Batch slice equals the plain 2-D product.
  T a0 = bevnet::slice(a, 0, 1, 1);
  T b0 = bevnet::slice(b, 0, 1, 1);
  T c0 = bevnet::matmul(bevnet::reshape(a0, {2, 4}), bevnet::reshape(b0, {4, 2}));
  for (int i = 0; i < 4; ++i) EXPECT_NEAR(c.vec()[4 + i], c0.vec()[i], 1e-12);

  T w = random_tensor(rng, {4, 2}, -1, 1);
  T cw = bevnet::matmul(a, w);
  EXPECT_EQ(cw.shape(), (Shape{3, 2, 2}));
  expect_grads_match(
      {&a, &w},
      [&]() { return bevnet::sum_all(bevnet::matmul(a, w)); }, 1e-5,
      "matmul shared rhs");
}

TEST(Softmax, UniformAndStability) {
  T u({4}, {2.5, 2.5, 2.5, 2.5});
  T s = bevnet::softmax(u, 0);
  for (double v : s.vec()) EXPECT_NEAR(v, 0.25, 1e-12);

  T big({2}, {1000.0, 0.0});
  T sb = bevnet::softmax(big, 0);
  EXPECT_NEAR(sb.vec()[0], 1.0, 1e-12);
  EXPECT_NEAR(sb.vec()[1], 0.0, 1e-12);
  EXPECT_FALSE(std::isnan(sb.vec()[0]));

  double total = 0;
  bevnet::Rng rng(3);
  T r = random_tensor(rng, {2, 5}, -3, 3);
  T sr = bevnet::softmax(r, 1);
  for (int i = 0; i < 5; ++i) total += sr.vec()[i];
  EXPECT_NEAR(total, 1.0, 1e-12);
}

TEST(Softmax, GradientVsFiniteDifference) {
  bevnet::Rng rng(17);
  T x = random_tensor(rng, {6}, -2, 2);
  T w = random_tensor(rng, {6}, -1, 1);  // weights make the loss non-constant
  expect_grads_match(
      {&x},
      [&]() {
        return bevnet::sum_all(bevnet::mul(bevnet::softmax(x, 0), w));
      },
      1e-5, "softmax len-6");
}

TEST(ShapeOps, ConcatSliceValues) {
  T a({2, 3}, {1, 2, 3, 4, 5, 6});
  T b({2, 3}, {7, 8, 9, 10, 11, 12});
  T c0 = bevnet::concat<double>({a, b}, 0);
  EXPECT_EQ(c0.shape(), (Shape{4, 3}));
  EXPECT_EQ(c0.vec()[6], 7);
  T c1 = bevnet::concat<double>({a, b}, 1);
  EXPECT_EQ(c1.shape(), (Shape{2, 6}));
  EXPECT_EQ(c1.vec(), (std::vector<double>{1, 2, 3, 7, 8, 9, 4, 5, 6, 10, 11, 12}));

  T s = bevnet::slice(c1, 1, 3, 3);
  EXPECT_EQ(s.shape(), (Shape{2, 3}));
  EXPECT_EQ(s.vec(), b.vec());
  EXPECT_THROW(bevnet::slice(a, 1, 2, 5), std::invalid_argument);
}

TEST(ShapeOps, PermuteReshapeGather) {
  T a({2, 3}, {1, 2, 3, 4, 5, 6});
  T p = bevnet::permute(a, {1, 0});
  EXPECT_EQ(p.shape(), (Shape{3, 2}));
  EXPECT_EQ(p.vec(), (std::vector<double>{1, 4, 2, 5, 3, 6}));

  T r = bevnet::reshape(a, {3, -1});
  EXPECT_EQ(r.shape(), (Shape{3, 2}));
  EXPECT_EQ(r.vec(), a.vec());

  T g = bevnet::gather_rows(a, {1, 0, 1});
  EXPECT_EQ(g.shape(), (Shape{3, 3}));
  EXPECT_EQ(g.vec(), (std::vector<double>{4, 5, 6, 1, 2, 3, 4, 5, 6}));
  EXPECT_THROW(bevnet::gather_rows(a, {2}), std::invalid_argument);

  T sc = bevnet::scatter_add_rows(g, {0, 2, 0}, 3);
  EXPECT_EQ(sc.shape(), (Shape{3, 3}));
  EXPECT_EQ(sc.vec(), (std::vector<double>{8, 10, 12, 0, 0, 0, 1, 2, 3}));
}

TEST(Reduce, ValuesAllOps) {
  T a({2, 3}, {1, 2, 3, 6, 5, 4});
  EXPECT_EQ(bevnet::reduce(a, ReduceOp::sum, 0).vec(),
            (std::vector<double>{7, 7, 7}));
  EXPECT_EQ(bevnet::reduce(a, ReduceOp::mean, 1).vec(),
            (std::vector<double>{2, 5}));
  EXPECT_EQ(bevnet::reduce(a, ReduceOp::max, 1).vec(),
            (std::vector<double>{3, 6}));
  T k = bevnet::reduce(a, ReduceOp::sum, 1, /*keepdim=*/true);
  EXPECT_EQ(k.shape(), (Shape{2, 1}));
  EXPECT_DOUBLE_EQ(bevnet::mean_all(a).item(), 3.5);
}

// Every differentiable op against the finite-difference oracle on randomized
// inputs, across more than twenty seeds.
TEST(Gradients, AllOpsManySeeds) {
  for (uint64_t seed = 1; seed <= 22; ++seed) {
    bevnet::Rng rng(seed);
    T a = random_signed_tensor(rng, {2, 3});
    T b = random_signed_tensor(rng, {2, 3});
    T pos = random_tensor(rng, {2, 3}, 0.3, 2.0);
    T row = random_signed_tensor(rng, {3});
    auto s = [](T t) { return bevnet::sum_all(t); };

    expect_grads_match({&a, &b}, [&]() { return s(bevnet::add(a, b)); }, 1e-4,
                       "add");
    expect_grads_match({&a, &b}, [&]() { return s(bevnet::sub(a, b)); }, 1e-4,
                       "sub");
    expect_grads_match({&a, &b}, [&]() { return s(bevnet::mul(a, b)); }, 1e-4,
                       "mul");
    expect_grads_match({&a, &pos}, [&]() { return s(bevnet::div(a, pos)); },
                       1e-4, "div");
    expect_grads_match({&pos, &b}, [&]() { return s(bevnet::pow(pos, b)); },
                       1e-4, "pow");
    expect_grads_match({&a}, [&]() { return s(bevnet::exp(a)); }, 1e-4, "exp");
    expect_grads_match({&pos}, [&]() { return s(bevnet::log(pos)); }, 1e-4,
                       "log");
    expect_grads_match({&a}, [&]() { return s(bevnet::relu(a)); }, 1e-4,
                       "relu");
    expect_grads_match({&a}, [&]() { return s(bevnet::sigmoid(a)); }, 1e-4,
                       "sigmoid");
    expect_grads_match({&a}, [&]() { return s(bevnet::tanh(a)); }, 1e-4,
                       "tanh");
    expect_grads_match({&a}, [&]() { return s(bevnet::neg(a)); }, 1e-4, "neg");
    expect_grads_match({&a}, [&]() { return s(bevnet::abs(a)); }, 1e-4, "abs");
    expect_grads_match({&pos}, [&]() { return s(bevnet::sqrt(pos)); }, 1e-4,
                       "sqrt");
    expect_grads_match({&a, &row}, [&]() { return s(bevnet::mul(a, row)); },
                       1e-4, "broadcast mul");

    T m1 = random_signed_tensor(rng, {3, 4});
    T m2 = random_signed_tensor(rng, {4, 2});
    expect_grads_match({&m1, &m2},
                       [&]() { return s(bevnet::matmul(m1, m2)); }, 1e-4,
                       "matmul");
    T sm = random_tensor(rng, {2, 4}, -2, 2);
    T smw = random_signed_tensor(rng, {2, 4});
    expect_grads_match(
        {&sm},
        [&]() { return s(bevnet::mul(bevnet::softmax(sm, 1), smw)); }, 1e-4,
        "softmax");

    expect_grads_match(
        {&a, &b},
        [&]() {
          T c = bevnet::concat<double>({a, b}, 1);
          return s(bevnet::mul(c, c));
        },
        1e-4, "concat");
    expect_grads_match(
        {&a},
        [&]() {
          T sl = bevnet::slice(a, 1, 1, 2);
          return s(bevnet::mul(sl, sl));
        },
        1e-4, "slice");
    expect_grads_match(
        {&a},
        [&]() {
          T p = bevnet::permute(a, {1, 0});
          return s(bevnet::mul(p, bevnet::sigmoid(p)));
        },
        1e-4, "permute");
    expect_grads_match(
        {&a},
        [&]() {
          T r = bevnet::reshape(a, {3, 2});
          return s(bevnet::mul(r, r));
        },
        1e-4, "reshape");
    expect_grads_match(
        {&a},
        [&]() {
          T g = bevnet::gather_rows(a, {1, 1, 0});
          return s(bevnet::mul(g, g));
        },
        1e-4, "gather_rows");
    expect_grads_match(
        {&a},
        [&]() {
          T sc = bevnet::scatter_add_rows(a, {0, 0}, 3);
          return s(bevnet::mul(sc, sc));
        },
        1e-4, "scatter_add_rows");
    expect_grads_match({&a}, [&]() { return s(bevnet::reduce_sum(a, 0)); },
                       1e-4, "reduce sum");
    expect_grads_match(
        {&a},
        [&]() {
          T m = bevnet::reduce_mean(a, 1);
          return s(bevnet::mul(m, m));
        },
        1e-4, "reduce mean");
    expect_grads_match(
        {&a},
        [&]() {
          T m = bevnet::reduce_max(a, 1);
          return s(bevnet::mul(m, m));
        },
        1e-4, "reduce max");
  }
}

// backward() on any composition leaves grad with the same shape as the data.
TEST(Gradients, GradShapeMatchesData) {
  bevnet::Rng rng(5);
  T x = random_signed_tensor(rng, {3, 4});
  T w = random_signed_tensor(rng, {4, 2});
  x.set_requires_grad(true);
  w.set_requires_grad(true);
  Tape<double> tape;
  TapeScope<double> scope(tape);
  T h = bevnet::relu(bevnet::matmul(x, w));
  T y = bevnet::mean_all(bevnet::mul(h, bevnet::sigmoid(h)));
  tape.backward(y);
  EXPECT_EQ(x.grad().size(), x.numel());
  EXPECT_EQ(w.grad().size(), w.numel());
}

TEST(Gradients, AccumulatesAcrossUses) {
  // x used twice: d/dx (x·x + 3x) = 2x + 3.
  T x({1}, {2.0});
  x.set_requires_grad(true);
  Tape<double> tape;
  TapeScope<double> scope(tape);
  T y = bevnet::add(bevnet::mul(x, x), bevnet::mul(x, 3.0));
  tape.backward(y);
  EXPECT_NEAR(x.grad()[0], 7.0, 1e-12);
}

TEST(Gradients, DetachStopsFlow) {
  T x({1}, {1.5});
  x.set_requires_grad(true);
  Tape<double> tape;
  TapeScope<double> scope(tape);
  T y = bevnet::mul(x.detach(), x);
  tape.backward(y);
  EXPECT_NEAR(x.grad()[0], 1.5, 1e-12);
}

// Identical seeds produce bit-identical forwards.
TEST(Determinism, ForwardBitExact) {
  auto run = [](uint64_t seed) {
    bevnet::Rng rng(seed);
    T x = random_signed_tensor(rng, {4, 4});
    T w = random_signed_tensor(rng, {4, 4});
    T y = bevnet::softmax(bevnet::matmul(bevnet::tanh(x), w), 1);
    return y.vec();
  };
  auto a = run(42);
  auto b = run(42);
  ASSERT_EQ(a.size(), b.size());
  for (size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i], b[i]);
  auto c = run(43);
  bool any_diff = false;
  for (size_t i = 0; i < a.size(); ++i) any_diff |= (a[i] != c[i]);
  EXPECT_TRUE(any_diff);
}

TEST(Determinism, RngPortableValues) {
  // mt19937_64 reference output: first draw for seed 5489 per the standard's
  // 10000th-value anchor is well known; here we pin our derived uniforms.
  bevnet::Rng rng(1234);
  double u1 = rng.uniform();
  bevnet::Rng rng2(1234);
  EXPECT_EQ(u1, rng2.uniform());
  EXPECT_GE(u1, 0.0);
  EXPECT_LT(u1, 1.0);
  int k = rng.uniform_int(3, 9);
  EXPECT_GE(k, 3);
  EXPECT_LE(k, 9);
  double n = rng.normal(2.0, 0.5);
  EXPECT_TRUE(std::isfinite(n));
  EXPECT_NE(bevnet::mix_seed(1, 2), bevnet::mix_seed(2, 1));
  EXPECT_EQ(bevnet::derive_seed(7u, 1, 2), bevnet::derive_seed(7u, 1, 2));
  EXPECT_NE(bevnet::derive_seed(7u, 1, 2), bevnet::derive_seed(7u, 2, 1));
}

TEST(SinglePrecision, ForwardAndBackwardRun) {
  using Tf = Tensor<float>;
  Tf x({2, 2}, {0.5f, -0.25f, 1.0f, 2.0f});
  Tf w({2, 2}, {1.0f, 0.0f, 0.0f, 1.0f});
  x.set_requires_grad(true);
  w.set_requires_grad(true);
  Tape<float> tape;
  TapeScope<float> scope(tape);
  Tf y = bevnet::mean_all(bevnet::sigmoid(bevnet::matmul(x, w)));
  tape.backward(y);
  EXPECT_EQ(x.grad().size(), 4u);
  float g = x.grad()[0];
  float s = 1.0f / (1.0f + std::exp(-0.5f));
  EXPECT_NEAR(g, 0.25f * s * (1.0f - s), 1e-6f);
}

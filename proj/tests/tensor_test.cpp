#include <gtest/gtest.h>

#include <cmath>
#include <functional>
#include <random>
#include <set>

#include "met/ops.hpp"
#include "oracle.hpp"

using namespace met;

namespace {

Tensor rand_tensor(std::size_t r, std::size_t c, std::mt19937_64& rng, bool grad = true,
                   double scale = 1.0) {
  return oracle::tensor(oracle::random_mat(r, c, rng, scale), grad);
}

/// Reverse-mode gradient of f() w.r.t. t against central differences.
double grad_rel_err(Tensor& t, const std::function<Tensor()>& f) {
  t.zero_grad();
  backward(f());
  std::vector<double> analytic(t.grad().begin(), t.grad().end());
  if (analytic.empty()) analytic.assign(t.numel(), 0.0);
  NoGradGuard guard;
  const auto numeric = oracle::finite_diff(t, [&] { return f().item(); });
  return oracle::rel_err(analytic, numeric);
}

}  // namespace

// ---------------------------------------------------------------- Tensor

TEST(Tensor, RejectsZeroExtentAndLengthMismatch) {
  EXPECT_THROW(Tensor({0, 3}, {}), DimensionError);
  EXPECT_THROW(Tensor({2, 2}, {1, 2, 3}), DimensionError);
  EXPECT_NO_THROW(Tensor({2, 2}, {1, 2, 3, 4}));
}

TEST(Tensor, GradHasDataShapeAfterBackward) {
  auto x = Tensor::matrix(2, 3, {1, 2, 3, 4, 5, 6}, true);
  backward(sum(mul(x, x)));
  ASSERT_TRUE(x.has_grad());
  EXPECT_EQ(x.grad().size(), x.numel());
}

// ---------------------------------------------------------------- matmul

TEST(Matmul, IdentityIsNeutral) {
  std::mt19937_64 rng(1);
  auto a = rand_tensor(4, 5, rng, false);
  auto c = matmul(a, Tensor::identity(5));
  for (std::size_t i = 0; i < a.numel(); ++i) EXPECT_EQ(c[i], a[i]);
}

TEST(Matmul, HandArithmetic) {
  auto c = matmul(Tensor::matrix(2, 2, {1, 2, 3, 4}), Tensor::matrix(2, 1, {1, 1}));
  EXPECT_EQ(c.shape(), (Shape{2, 1}));
  EXPECT_EQ(c[0], 3.0);
  EXPECT_EQ(c[1], 7.0);
}

TEST(Matmul, MatchesTripleLoop) {
  std::mt19937_64 rng(2);
  auto a = oracle::random_mat(5, 7, rng), b = oracle::random_mat(7, 3, rng);
  auto c = matmul(oracle::tensor(a), oracle::tensor(b));
  const auto ref = oracle::matmul(a, b);
  EXPECT_LE(oracle::max_abs_diff(oracle::vec(c), ref.v), 1e-12);
}

TEST(Matmul, ShapeErrorNamesBothShapes) {
  try {
    matmul(Tensor::zeros({2, 3}), Tensor::zeros({4, 5}));
    FAIL() << "expected a dimension error";
  } catch (const DimensionError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("[2x3]"), std::string::npos) << msg;
    EXPECT_NE(msg.find("[4x5]"), std::string::npos) << msg;
  }
}

TEST(Matmul, RelativeAgreementOnUnitScaleInputs) {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    auto a = oracle::random_mat(6, 9, rng), b = oracle::random_mat(9, 4, rng);
    auto c = oracle::vec(matmul(oracle::tensor(a), oracle::tensor(b)));
    EXPECT_LE(oracle::rel_err(c, oracle::matmul(a, b).v), 1e-10);
  }
}

// ---------------------------------------------------------------- layer_norm

TEST(LayerNorm, ConstantRowGivesBeta) {
  auto x = Tensor::filled({1, 4}, 3.5);
  auto y = layer_norm(x, Tensor::filled({4}, 1.0), Tensor::filled({4}, 0.25));
  for (std::size_t i = 0; i < 4; ++i) EXPECT_DOUBLE_EQ(y[i], 0.25);
}

TEST(LayerNorm, NormalizedRowIsFixedPoint) {
  // mean 0, population variance 1
  auto x = Tensor::matrix(1, 4, {1, -1, 1, -1});
  auto y = layer_norm(x, Tensor::filled({4}, 1.0), Tensor::zeros({4}), 1e-12);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(y[i], x[i], 1e-6);
}

TEST(LayerNorm, MatchesScalarOracle) {
  std::mt19937_64 rng(4);
  auto x = oracle::random_mat(3, 7, rng);
  auto g = oracle::random_mat(1, 7, rng), b = oracle::random_mat(1, 7, rng);
  auto y = layer_norm(oracle::tensor(x), Tensor({7}, g.v), Tensor({7}, b.v));
  EXPECT_LE(oracle::max_abs_diff(oracle::vec(y), oracle::layer_norm(x, g.v, b.v).v), 1e-12);
}

TEST(LayerNorm, DimensionMismatchThrows) {
  EXPECT_THROW(layer_norm(Tensor::zeros({2, 3}), Tensor::zeros({4}), Tensor::zeros({3})),
               DimensionError);
}

// ---------------------------------------------------------------- softmax

TEST(Softmax, SymmetricPair) {
  auto p = softmax_rows(Tensor::matrix(1, 2, {0, 0}));
  EXPECT_DOUBLE_EQ(p[0], 0.5);
  EXPECT_DOUBLE_EQ(p[1], 0.5);
}

TEST(Softmax, ShiftInvariant) {
  std::mt19937_64 rng(5);
  auto x = oracle::random_mat(2, 6, rng);
  auto shifted = x;
  for (auto& v : shifted.v) v += 123.25;
  auto a = oracle::vec(softmax_rows(oracle::tensor(x)));
  auto b = oracle::vec(softmax_rows(oracle::tensor(shifted)));
  EXPECT_LE(oracle::max_abs_diff(a, b), 1e-12);
}

TEST(Softmax, MatchesExpSumOracle) {
  std::mt19937_64 rng(6);
  auto x = oracle::random_mat(1, 9, rng);
  auto p = oracle::vec(softmax_rows(oracle::tensor(x)));
  EXPECT_LE(oracle::max_abs_diff(p, oracle::softmax(x.v)), 1e-12);
}

TEST(Softmax, RowsAreDistributionsOnLargeInputs) {
  std::mt19937_64 rng(7);
  auto x = rand_tensor(20, 11, rng, false, 50.0);
  auto p = softmax_rows(x);
  for (std::size_t r = 0; r < 20; ++r) {
    double s = 0.0;
    for (std::size_t j = 0; j < 11; ++j) {
      const double v = p.at(r, j);
      EXPECT_GE(v, 0.0);
      EXPECT_LE(v, 1.0);
      s += v;
    }
    EXPECT_NEAR(s, 1.0, 1e-9);
  }
}

// ---------------------------------------------------------------- gelu

TEST(Gelu, ReferencePoints) {
  auto y = gelu(Tensor::matrix(1, 3, {0.0, 10.0, 1.0}));
  EXPECT_EQ(y[0], 0.0);
  EXPECT_NEAR(y[1], 10.0, 1e-6);
  EXPECT_NEAR(y[2], oracle::gelu(1.0), 1e-15);
  EXPECT_NEAR(y[2], 0.8413447, 1e-7);
}

// ---------------------------------------------------------------- backward

TEST(Backward, SumGivesOnes) {
  auto x = Tensor::matrix(2, 2, {1, -2, 3, 0.5}, true);
  backward(sum(x));
  for (double g : x.grad()) EXPECT_EQ(g, 1.0);
}

TEST(Backward, QuadraticGivesTwoX) {
  auto x = Tensor::matrix(3, 1, {1.5, -2, 0.25}, true);
  auto xt = Tensor::matrix(1, 3, {1.5, -2, 0.25});
  // xᵀx as Σ x⊙x keeps a single live leaf
  backward(sum(mul(x, x)));
  for (std::size_t i = 0; i < 3; ++i) EXPECT_DOUBLE_EQ(x.grad()[i], 2 * xt[i]);
}

TEST(Backward, NonScalarLossThrows) {
  auto x = Tensor::matrix(2, 2, {1, 2, 3, 4}, true);
  EXPECT_THROW(backward(mul(x, x)), DimensionError);
}

TEST(Backward, ThreeLayerCompositeMatchesFiniteDifferences) {
  std::mt19937_64 rng(8);
  auto x = rand_tensor(4, 6, rng, false);
  auto w1 = rand_tensor(6, 5, rng, true, 0.5), w2 = rand_tensor(5, 5, rng, true, 0.5);
  auto w3 = rand_tensor(5, 3, rng, true, 0.5);
  auto g = Tensor({5}, std::vector<double>(5, 1.0), true), b = Tensor({5}, std::vector<double>(5, 0.0), true);
  const std::vector<int> labels{0, 2, 1, 2};
  auto f = [&] {
    auto h = gelu(matmul(x, w1));
    h = layer_norm(matmul(h, w2), g, b);
    return cross_entropy(matmul(h, w3), labels);
  };
  for (Tensor* p : {&w1, &w2, &w3, &g, &b}) EXPECT_LE(grad_rel_err(*p, f), 1e-4);
}

TEST(Backward, RecordIsTopologicalAndVisitsOnce) {
  auto a = Tensor::matrix(2, 2, {1, 2, 3, 4}, true);
  auto b = matmul(a, a);
  auto c = add(b, a);
  auto loss = sum(mul(c, b));
  const auto rec = computation_record(loss);
  ASSERT_FALSE(rec.empty());
  std::set<std::uint64_t> produced{a.id()};
  std::set<std::uint64_t> outputs;
  for (const auto& r : rec) {
    for (auto in : r.inputs) EXPECT_TRUE(produced.count(in)) << r.op;
    EXPECT_TRUE(outputs.insert(r.output).second);
    produced.insert(r.output);
  }
  EXPECT_EQ(rec.back().output, loss.id());
  // reused intermediates contribute through every path
  backward(loss);
  auto f = [&] { return sum(mul(add(matmul(a, a), a), matmul(a, a))); };
  EXPECT_LE(grad_rel_err(a, f), 1e-6);
}

TEST(Backward, LeafGradientsAccumulateUntilZeroed) {
  auto x = Tensor::matrix(1, 2, {1, 2}, true);
  backward(sum(x));
  backward(sum(x));
  EXPECT_EQ(x.grad()[0], 2.0);
  x.zero_grad();
  backward(sum(x));
  EXPECT_EQ(x.grad()[0], 1.0);
}

TEST(Backward, NoGradGuardRecordsNothing) {
  auto x = Tensor::matrix(1, 2, {1, 2}, true);
  Tensor y;
  {
    NoGradGuard guard;
    y = sum(mul(x, x));
  }
  EXPECT_FALSE(y.requires_grad());
  EXPECT_TRUE(computation_record(y).empty());
}

TEST(Backward, ParameterMapSkipsFrozen) {
  auto w = Tensor::matrix(1, 2, {1, 2}, true);
  auto f = Tensor::matrix(1, 2, {3, 4}, false);
  std::vector<Parameter> ps{{"w", w, true}, {"f", f, false}};
  auto grads = backward(sum(mul(w, f)), ps);
  ASSERT_EQ(grads.size(), 1u);
  EXPECT_EQ(grads.at("w")[0], 3.0);
  EXPECT_EQ(grads.at("w")[1], 4.0);
}

// ---------------------------------------------------------------- detach

TEST(Detach, PreservesValuesAndBlocksGradient) {
  auto x = Tensor::matrix(1, 3, {1, -2, 5}, true);
  auto d = detach(x);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_EQ(d[i], x[i]);
  EXPECT_FALSE(d.requires_grad());
  backward(add(sum(detach(x)), scale(sum(x), 0.0)));
  for (double g : x.grad()) EXPECT_EQ(g, 0.0);
}

TEST(Detach, OneLivePathProduct) {
  auto x = Tensor::matrix(1, 4, {0.5, -1.5, 2.0, 3.0}, true);
  auto f = [&] { return sum(mul(x, detach(x))); };
  x.zero_grad();
  backward(f());
  for (std::size_t i = 0; i < 4; ++i) EXPECT_DOUBLE_EQ(x.grad()[i], x[i]);
  // finite differences along the live path only: perturb x with the detached copy frozen
  const auto frozen = detach(x);
  auto live = [&] { return sum(mul(x, frozen)).item(); };
  NoGradGuard guard;
  const auto numeric = oracle::finite_diff(x, live);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(numeric[i], x[i], 1e-8);
}

// ---------------------------------------------------------------- cosine

TEST(Cosine, SelfOrthogonalAndOracle) {
  std::vector<double> u{1, 2, 3}, v{-2, 1, 0};
  EXPECT_NEAR(cosine_sim(u, u), 1.0, 1e-15);
  EXPECT_EQ(cosine_sim(u, v), 0.0);
  std::mt19937_64 rng(9);
  auto a = oracle::random_mat(1, 16, rng), b = oracle::random_mat(1, 16, rng);
  EXPECT_NEAR(cosine_sim(a.v, b.v), oracle::cosine(a.v, b.v), 1e-12);
}

TEST(Cosine, ZeroNormThrows) {
  std::vector<double> z{0, 0}, u{1, 0};
  EXPECT_THROW(cosine_sim(z, u), DimensionError);
}

// ---------------------------------------------------------------- per-op gradients

class OpGradient : public ::testing::TestWithParam<std::string> {};

TEST_P(OpGradient, MatchesCentralDifferences) {
  std::mt19937_64 rng(10);
  auto a = rand_tensor(4, 6, rng), b = rand_tensor(4, 6, rng), m = rand_tensor(6, 3, rng);
  auto v = Tensor({6}, oracle::random_mat(1, 6, rng).v, true);
  auto probe = rand_tensor(4, 6, rng, false);  // random projection to a scalar
  auto probe3 = rand_tensor(4, 3, rng, false);
  const std::vector<int> labels{2, 0, 1, 1};
  const std::string op = GetParam();
  std::function<Tensor()> f;
  std::vector<Tensor*> params{&a};
  if (op == "matmul") {
    f = [&] { return sum(mul(matmul(a, m), probe3)); };
    params.push_back(&m);
  } else if (op == "add") {
    f = [&] { return sum(mul(add(a, b), probe)); };
    params.push_back(&b);
  } else if (op == "sub") {
    f = [&] { return sum(mul(sub(a, b), probe)); };
    params.push_back(&b);
  } else if (op == "mul") {
    f = [&] { return sum(mul(mul(a, b), probe)); };
    params.push_back(&b);
  } else if (op == "scale") {
    f = [&] { return sum(mul(scale(a, -1.7), probe)); };
  } else if (op == "add_row") {
    f = [&] { return sum(mul(add_row(a, v), probe)); };
    params.push_back(&v);
  } else if (op == "mul_row") {
    f = [&] { return sum(mul(mul_row(a, v), probe)); };
    params.push_back(&v);
  } else if (op == "scale_rows") {
    f = [&] { return sum(mul(scale_rows(a, {1.0, 2.0, -0.5, 3.0}), probe)); };
  } else if (op == "layer_norm") {
    auto b6 = Tensor({6}, oracle::random_mat(1, 6, rng).v, true);
    f = [&, b6]() mutable { return sum(mul(layer_norm(a, v, b6), probe)); };
    params.push_back(&v);
  } else if (op == "softmax_rows") {
    f = [&] { return sum(mul(softmax_rows(a), probe)); };
  } else if (op == "gelu") {
    f = [&] { return sum(mul(gelu(a), probe)); };
  } else if (op == "mean") {
    f = [&] { return mean(mul(a, a)); };
  } else if (op == "concat_rows") {
    f = [&] { return sum(mul(concat_rows({a, b}), concat_rows({probe, probe}))); };
    params.push_back(&b);
  } else if (op == "gather_rows") {
    auto p5 = rand_tensor(5, 6, rng, false);
    f = [&, p5] { return sum(mul(gather_rows(a, {3, 0, 3, 1, 2}), p5)); };
  } else if (op == "cross_entropy") {
    f = [&] { return cross_entropy(matmul(a, m), labels); };
    params.push_back(&m);
  } else if (op == "attention") {
    auto k6 = rand_tensor(4, 6, rng), v6 = rand_tensor(4, 6, rng);
    f = [&, k6, v6] { return sum(mul(attention(a, k6, v6, {2, 3, 2}), probe)); };
  } else if (op == "attention_masked") {
    auto k6 = rand_tensor(4, 6, rng), v6 = rand_tensor(4, 6, rng);
    f = [&, k6, v6] { return sum(mul(attention(a, k6, v6, {4, 2, 2}), probe)); };
  } else {
    FAIL() << "unknown op " << op;
  }
  for (Tensor* p : params) EXPECT_LE(grad_rel_err(*p, f), 1e-4) << op;
}

INSTANTIATE_TEST_SUITE_P(AllOps, OpGradient,
                         ::testing::Values("matmul", "add", "sub", "mul", "scale", "add_row",
                                           "mul_row", "scale_rows", "layer_norm", "softmax_rows",
                                           "gelu", "mean", "concat_rows", "gather_rows",
                                           "cross_entropy", "attention", "attention_masked"),
                         [](const auto& info) { return info.param; });

TEST(OpGradient, AttentionKeyValueGradients) {
  std::mt19937_64 rng(11);
  auto q = rand_tensor(6, 4, rng), k = rand_tensor(6, 4, rng), v = rand_tensor(6, 4, rng);
  auto probe = rand_tensor(6, 4, rng, false);
  auto f = [&] { return sum(mul(attention(q, k, v, {3, 2, 0}), probe)); };
  EXPECT_LE(grad_rel_err(k, f), 1e-4);
  EXPECT_LE(grad_rel_err(v, f), 1e-4);
}

TEST(Ops, OutputsFiniteOnFiniteInputs) {
  std::mt19937_64 rng(12);
  auto a = rand_tensor(5, 4, rng, false, 30.0);
  for (const auto& t : {softmax_rows(a), gelu(a), layer_norm(a, Tensor::filled({4}, 1.0), Tensor::zeros({4})),
                        attention(a, a, a, {5, 2, 0})})
    for (double x : t.data()) EXPECT_TRUE(std::isfinite(x));
}

TEST(Ops, CrossEntropyRejectsOutOfRangeLabel) {
  const std::vector<int> labels{3};
  EXPECT_THROW(cross_entropy(Tensor::zeros({1, 3}), labels), DataError);
}

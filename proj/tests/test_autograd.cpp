#include <gtest/gtest.h>

#include <cmath>
#include <functional>

#include "oracles.hpp"
#include "splitsee/autograd.hpp"
#include "splitsee/rng.hpp"

using namespace splitsee;
using M = Matrix<double>;
using Fn = std::function<Var<double>(Tape<double>&, Var<double>)>;

namespace {

M random_matrix(Index r, Index c, std::uint64_t seed) {
  Philox rng(seed, 11);
  M m(r, c);
  for (Index i = 0; i < m.size(); ++i) {
    m.data()[i] = rng.normal();
  }
  return m;
}

/// Reduces any output to a scalar with fixed random weights, then compares
/// the tape gradient against central differences.
void check_gradient(const M& x0, const Fn& f, double tol = 1e-6) {
  Tape<double> probe;
  const M out_shape = f(probe, probe.input(x0)).value();
  const M w = random_matrix(out_shape.rows(), out_shape.cols(), 999);
  auto value = [&](const M& x) {
    Tape<double> t;
    return f(t, t.input(x)).value().cwiseProduct(w).sum();
  };
  Tape<double> t;
  Var<double> x = t.input(x0);
  Var<double> y = f(t, x);
  t.seed(y, w);
  t.run_backward();
  const M g = t.grad(x);
  const double h = 1e-6;
  for (Index i = 0; i < x0.size(); ++i) {
    M plus = x0;
    M minus = x0;
    plus.data()[i] += h;
    minus.data()[i] -= h;
    const double fd = (value(plus) - value(minus)) / (2 * h);
    EXPECT_NEAR(g.data()[i], fd, tol * std::max(1.0, std::abs(fd))) << "element " << i;
  }
}

}  // namespace

TEST(Autograd, MatmulMatchesOracleAndGradient) {
  const M a = random_matrix(3, 4, 1);
  const M b = random_matrix(4, 2, 2);
  Tape<double> t;
  const M c = matmul(t.constant(a), t.constant(b)).value();
  const auto ref = oracle::matmul(oracle::from(a), oracle::from(b));
  for (Index i = 0; i < 3; ++i) {
    for (Index j = 0; j < 2; ++j) {
      EXPECT_NEAR(c(i, j), ref[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)], 1e-12);
    }
  }
  check_gradient(a, [&](Tape<double>& tt, Var<double> x) { return matmul(x, tt.constant(b)); });
  check_gradient(b, [&](Tape<double>& tt, Var<double> x) { return matmul(tt.constant(a), x); });
}

TEST(Autograd, MatmulTransposed) {
  const M b = random_matrix(5, 4, 3);
  check_gradient(random_matrix(3, 4, 4),
                 [&](Tape<double>& tt, Var<double> x) { return matmul_transposed(x, tt.constant(b)); });
  check_gradient(b, [&](Tape<double>& tt, Var<double> x) {
    return matmul_transposed(tt.constant(random_matrix(2, 4, 5)), x);
  });
}

TEST(Autograd, AddAndAddRowAndScale) {
  const M r = random_matrix(1, 3, 6);
  check_gradient(random_matrix(4, 3, 7), [&](Tape<double>& tt, Var<double> x) {
    return scale(add(x, add_row(x, tt.constant(r))), 0.5);
  });
  const M x0 = random_matrix(4, 3, 8);
  check_gradient(r, [&](Tape<double>& tt, Var<double> row) { return add_row(tt.constant(x0), row); });
}

TEST(Autograd, Gelu) {
  check_gradient(random_matrix(3, 5, 9), [](Tape<double>&, Var<double> x) { return gelu(x); });
}

TEST(Autograd, LayerNorm) {
  const M g = random_matrix(1, 6, 10);
  const M b = random_matrix(1, 6, 11);
  check_gradient(random_matrix(4, 6, 12), [&](Tape<double>& tt, Var<double> x) {
    return layer_norm(x, tt.constant(g), tt.constant(b));
  });
  const M x0 = random_matrix(4, 6, 13);
  check_gradient(g, [&](Tape<double>& tt, Var<double> gamma) {
    return layer_norm(tt.constant(x0), gamma, tt.constant(b));
  });
}

TEST(Autograd, LayerNormNormalizesRows) {
  Tape<double> t;
  const M y = layer_norm(t.constant(random_matrix(3, 8, 14)), t.constant(M::Ones(1, 8)), t.constant(M::Zero(1, 8)))
                  .value();
  for (Index r = 0; r < 3; ++r) {
    EXPECT_NEAR(y.row(r).mean(), 0.0, 1e-12);
    EXPECT_NEAR(y.row(r).squaredNorm() / 8.0, 1.0, 1e-4);
  }
}

TEST(Autograd, SoftmaxRows) {
  check_gradient(random_matrix(3, 4, 15), [](Tape<double>&, Var<double> x) { return softmax_rows(x); });
  Tape<double> t;
  const M s = softmax_rows(t.constant(random_matrix(3, 4, 16))).value();
  for (Index r = 0; r < 3; ++r) {
    EXPECT_NEAR(s.row(r).sum(), 1.0, 1e-12);
  }
}

TEST(Autograd, SlicesAndConcats) {
  check_gradient(random_matrix(6, 4, 17), [](Tape<double>&, Var<double> x) {
    Var<double> a = slice_rows(x, 1, 3);
    Var<double> b = slice_cols(x, 2, 2);
    return concat_cols({concat_rows({a, slice_rows(x, 0, 1)}), slice_rows(b, 0, 4)});
  });
}

TEST(Autograd, ReverseRowsInvolution) {
  const M x = random_matrix(5, 3, 18);
  Tape<double> t;
  EXPECT_EQ(reverse_rows(reverse_rows(t.constant(x))).value(), x);
  check_gradient(x, [](Tape<double>&, Var<double> v) { return reverse_rows(v); });
}

TEST(Autograd, MeanPoolRows) {
  check_gradient(random_matrix(7, 3, 19), [](Tape<double>&, Var<double> x) { return mean_pool_rows(x, 3); });
}

TEST(Autograd, CausalConvMatchesOracle) {
  const M x = random_matrix(20, 3, 20);
  const M w = random_matrix(3 * 3, 2, 21);
  Tape<double> t;
  const M y = causal_conv(t.constant(x), t.constant(w), 3, 2).value();
  const auto ref = oracle::causal_conv(oracle::from(x), oracle::from(w), 3, 2);
  for (Index i = 0; i < y.rows(); ++i) {
    for (Index j = 0; j < y.cols(); ++j) {
      ASSERT_NEAR(y(i, j), ref[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)], 1e-12);
    }
  }
  check_gradient(x, [&](Tape<double>& tt, Var<double> v) { return causal_conv(v, tt.constant(w), 3, 2); });
  check_gradient(w, [&](Tape<double>& tt, Var<double> v) { return causal_conv(tt.constant(x), v, 3, 2); });
}

TEST(Autograd, StridedConvMatchesOracle) {
  const M x = random_matrix(17, 1, 22);
  const M w = random_matrix(4, 3, 23);
  Tape<double> t;
  const M y = strided_conv(t.constant(x), t.constant(w), 4, 3).value();
  std::vector<double> xs(x.data(), x.data() + x.size());
  const auto ref = oracle::strided_conv(xs, oracle::from(w), oracle::zeros(1, 3), 4, 3);
  ASSERT_EQ(static_cast<std::size_t>(y.rows()), ref.size());
  for (Index i = 0; i < y.rows(); ++i) {
    for (Index j = 0; j < y.cols(); ++j) {
      ASSERT_NEAR(y(i, j), ref[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)], 1e-12);
    }
  }
  check_gradient(x, [&](Tape<double>& tt, Var<double> v) { return strided_conv(v, tt.constant(w), 4, 3); });
  check_gradient(w, [&](Tape<double>& tt, Var<double> v) { return strided_conv(tt.constant(x), v, 4, 3); });
}

TEST(Autograd, NormalizeRows) {
  check_gradient(random_matrix(4, 5, 24), [](Tape<double>&, Var<double> x) { return normalize_rows(x); });
  Tape<double> t;
  const M n = normalize_rows(t.constant(random_matrix(4, 5, 25))).value();
  for (Index r = 0; r < 4; ++r) {
    EXPECT_NEAR(n.row(r).norm(), 1.0, 1e-12);
  }
}

TEST(Autograd, SoftCrossEntropy) {
  M targets = random_matrix(3, 4, 26).cwiseAbs();
  for (Index r = 0; r < 3; ++r) {
    targets.row(r) /= targets.row(r).sum();
  }
  check_gradient(random_matrix(3, 4, 27),
                 [&](Tape<double>&, Var<double> x) { return soft_cross_entropy(x, targets); });
}

TEST(Autograd, ParamGradientsAccumulate) {
  ParamStore<double> store;
  const auto id = store.add("w", random_matrix(2, 2, 28));
  Tape<double> t(&store);
  Var<double> w = t.param(id);
  Var<double> y = add(w, w);
  t.seed(y, M::Ones(2, 2));
  t.run_backward();
  EXPECT_EQ(t.param_grads()[id], M::Constant(2, 2, 2.0));
}

TEST(Autograd, ShapeErrors) {
  Tape<double> t;
  EXPECT_THROW(matmul(t.constant(M::Zero(2, 3)), t.constant(M::Zero(2, 3))), std::invalid_argument);
  EXPECT_THROW(add(t.constant(M::Zero(2, 3)), t.constant(M::Zero(3, 2))), std::invalid_argument);
  EXPECT_THROW(slice_rows(t.constant(M::Zero(2, 3)), 1, 2), std::out_of_range);
}

TEST(ParamStore, CastAndEquality) {
  ParamStore<double> a;
  a.add("x", random_matrix(2, 3, 29));
  EXPECT_THROW(a.add("x", M::Zero(1, 1)), std::invalid_argument);
  EXPECT_THROW(a.id("x", 3, 2), std::invalid_argument);
  const auto f = a.cast<float>();
  EXPECT_EQ(f.total_elements(), 6u);
  ParamStore<double> b = a;
  EXPECT_TRUE(a == b);
  b.value("x")(0, 0) += 1.0;
  EXPECT_FALSE(a == b);
}

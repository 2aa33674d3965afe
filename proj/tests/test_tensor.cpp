#include <gtest/gtest.h>

#include <cmath>
#include <functional>
#include <random>

#include "fcm/autodiff.hpp"
#include "oracles.hpp"

using namespace fcm;
using G = Graph<double>;
using TD = Tensor<double>;

namespace {

TD rand_tensor(std::mt19937_64& rng, Shape shape, bool grad = true, double scale = 1.0) {
  auto v = oracle::random_vector(rng, shape_numel(shape), scale);
  return TD::from(std::move(shape), std::move(v), grad);
}

// Checks d sum(f(inputs) * R) / d inputs against central differences.
void grad_check(std::vector<TD> inputs, const std::function<TD(G&, std::vector<TD>&)>& f, std::mt19937_64& rng,
                double tol = 1e-5) {
  Shape out_shape;
  {
    G g(false);
    out_shape = f(g, inputs).shape();
  }
  const auto r = TD::from(out_shape, oracle::random_vector(rng, shape_numel(out_shape)));
  auto objective = [&](G& g) { return g.sum(g.mul(f(g, inputs), r)); };

  G g;
  auto loss = objective(g);
  g.backward(loss);
  for (auto& in : inputs) {
    std::vector<double> analytic(in.numel(), 0.0);
    if (in.has_grad()) analytic.assign(in.grad().begin(), in.grad().end());
    auto numeric = oracle::central_diff_all(
        [&] {
          G g2(false);
          return objective(g2).item();
        },
        in.data(), 1e-6);
    for (std::size_t i = 0; i < analytic.size(); ++i) {
      ASSERT_LT(oracle::rel_err(analytic[i], numeric[i], 1e-3), tol)
          << "element " << i << " analytic " << analytic[i] << " numeric " << numeric[i];
    }
  }
}

std::size_t pick(std::mt19937_64& rng, std::size_t lo, std::size_t hi) {
  return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
}

}  // namespace

TEST(Matmul, IdentityAndHandArithmetic) {
  G g;
  auto a = Tensor<float>::from({2, 2}, {1, 0, 0, 1});
  auto b = Tensor<float>::from({2, 2}, {3, 4, 5, 6});
  Graph<float> gf;
  auto c = gf.matmul(a, b);
  EXPECT_EQ(std::vector<float>(c.data().begin(), c.data().end()), (std::vector<float>{3, 4, 5, 6}));
  auto d = gf.matmul(Tensor<float>::from({1, 2}, {1, 2}), Tensor<float>::from({2, 1}, {3, 4}));
  EXPECT_EQ(d.shape(), (Shape{1, 1}));
  EXPECT_EQ(d.item(), 11.0f);
}

TEST(Matmul, GradOfSumIsOnesTimesBTransposed) {
  std::mt19937_64 rng(1);
  auto a = rand_tensor(rng, {3, 3});
  auto b = rand_tensor(rng, {3, 3});
  G g;
  g.backward(g.sum(g.matmul(a, b)));
  for (std::size_t i = 0; i < 3; ++i) {
    for (std::size_t j = 0; j < 3; ++j) {
      double expect = 0;
      for (std::size_t k = 0; k < 3; ++k) expect += b.data()[j * 3 + k];
      EXPECT_NEAR(a.grad()[i * 3 + j], expect, 1e-12);
    }
  }
  auto numeric = oracle::central_diff_all(
      [&] {
        G g2(false);
        return g2.sum(g2.matmul(a, b)).item();
      },
      a.data(), 1e-3);
  for (std::size_t i = 0; i < 9; ++i) EXPECT_NEAR(a.grad()[i], numeric[i], 1e-6);
}

TEST(Matmul, InnerDimMismatchThrows) {
  G g;
  EXPECT_THROW(g.matmul(TD::zeros({2, 3}), TD::zeros({2, 3})), ShapeError);
  EXPECT_THROW(g.matmul(TD::zeros({3}), TD::zeros({3, 1})), ShapeError);
}

TEST(Matmul, BroadcastGradientProperty) {
  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 100; ++trial) {
    const auto b = pick(rng, 1, 3), h = pick(rng, 1, 3), m = pick(rng, 1, 4), k = pick(rng, 1, 4),
               n = pick(rng, 1, 4);
    const bool shared = trial % 3 == 0;
    const bool plain = trial % 3 == 1;
    Shape sa{b, h, m, k};
    Shape sb = plain ? Shape{k, n} : (shared ? Shape{b, 1, k, n} : Shape{b, h, k, n});
    grad_check({rand_tensor(rng, sa), rand_tensor(rng, sb)},
               [](G& g, std::vector<TD>& x) { return g.matmul(x[0], x[1]); }, rng);
  }
}

TEST(Softmax, KnownValues) {
  Graph<float> g;
  auto a = g.softmax_lastdim(Tensor<float>::from({2}, {0, 0}));
  EXPECT_FLOAT_EQ(a.data()[0], 0.5f);
  EXPECT_FLOAT_EQ(a.data()[1], 0.5f);
  auto b = g.softmax_lastdim(Tensor<float>::from({2}, {1000, 0}));
  EXPECT_NEAR(b.data()[0], 1.0, 1e-6);
  EXPECT_NEAR(b.data()[1], 0.0, 1e-6);
  ASSERT_TRUE(std::isfinite(b.data()[0]));
  auto c = g.softmax_lastdim(Tensor<float>::from({3}, {0, kMaskSentinel, 0}));
  EXPECT_NEAR(c.data()[0], 0.5, 1e-6);
  EXPECT_NEAR(c.data()[1], 0.0, 1e-6);
  EXPECT_NEAR(c.data()[2], 0.5, 1e-6);
}

TEST(Softmax, FullyMaskedRowIsAnError) {
  Graph<float> g;
  try {
    g.softmax_lastdim(Tensor<float>::from({2, 2}, {0, 1, kMaskSentinel, kMaskSentinel}));
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("fully masked attention row"), std::string::npos);
  }
}

TEST(Softmax, GradientProperty) {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 100; ++trial) {
    Shape s{pick(rng, 1, 3), pick(rng, 1, 6)};
    grad_check({rand_tensor(rng, s, true, 2.0)}, [](G& g, std::vector<TD>& x) { return g.softmax_lastdim(x[0]); },
               rng);
  }
}

TEST(RmsNorm, KnownValues) {
  Graph<float> g;
  auto ones = g.rms_norm(Tensor<float>::full({4}, 1), Tensor<float>::full({4}, 1));
  for (float v : ones.data()) EXPECT_NEAR(v, 1.0, 1e-5);
  auto zero = g.rms_norm(Tensor<float>::zeros({2}), Tensor<float>::full({2}, 1));
  for (float v : zero.data()) EXPECT_EQ(v, 0.0f);
  std::mt19937_64 rng(4);
  auto x = rand_tensor(rng, {8}, false);
  G gd;
  auto y = gd.rms_norm(x, TD::full({8}, 1));
  double ss = 0;
  for (double v : y.data()) ss += v * v;
  EXPECT_NEAR(std::sqrt(ss / 8), 1.0, 1e-4);
}

TEST(RmsNorm, GradientProperty) {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 100; ++trial) {
    const auto d = pick(rng, 1, 6);
    grad_check({rand_tensor(rng, {pick(rng, 1, 3), d}), rand_tensor(rng, {d})},
               [](G& g, std::vector<TD>& x) { return g.rms_norm(x[0], x[1]); }, rng);
  }
}

TEST(Swish, KnownValues) {
  Graph<float> g;
  auto y = g.swish(Tensor<float>::from({2}, {0, 1000}));
  EXPECT_EQ(y.data()[0], 0.0f);
  EXPECT_NEAR(y.data()[1], 1000.0f, 1e-3);
  auto x = TD::from({1}, {0.0}, true);
  G gd;
  gd.backward(gd.sum(gd.swish(x)));
  EXPECT_NEAR(x.grad()[0], 0.5, 1e-12);
  auto numeric = oracle::central_diff_all(
      [&] {
        G g2(false);
        return g2.sum(g2.swish(x)).item();
      },
      x.data(), 1e-5);
  EXPECT_NEAR(numeric[0], 0.5, 1e-8);
}

TEST(Swish, GradientProperty) {
  std::mt19937_64 rng(6);
  for (int trial = 0; trial < 100; ++trial) {
    grad_check({rand_tensor(rng, {pick(rng, 1, 8)}, true, 3.0)},
               [](G& g, std::vector<TD>& x) { return g.swish(x[0]); }, rng);
  }
}

TEST(Embedding, GatherAndScatter) {
  auto table = TD::from({3, 2}, {0, 1, 10, 11, 20, 21}, true);
  G g;
  auto out = g.embedding(table, IdTensor({1, 2}, {2, 0}));
  EXPECT_EQ(out.shape(), (Shape{1, 2, 2}));
  EXPECT_EQ(std::vector<double>(out.data().begin(), out.data().end()), (std::vector<double>{20, 21, 0, 1}));
  g.backward(g.sum(out));
  EXPECT_EQ(std::vector<double>(table.grad().begin(), table.grad().end()), (std::vector<double>{1, 1, 0, 0, 1, 1}));
}

TEST(Embedding, RepeatedIdAccumulates) {
  auto table = TD::from({3, 2}, {0, 1, 10, 11, 20, 21}, true);
  const IdTensor ids({1, 2}, {1, 1});
  G g;
  g.backward(g.sum(g.embedding(table, ids)));
  EXPECT_EQ(table.grad()[2], 2.0);
  EXPECT_EQ(table.grad()[3], 2.0);
  auto numeric = oracle::central_diff_all(
      [&] {
        G g2(false);
        return g2.sum(g2.embedding(table, ids)).item();
      },
      table.data(), 1e-3);
  EXPECT_NEAR(numeric[2], 2.0, 1e-9);
}

TEST(Embedding, OutOfRangeIdThrows) {
  G g;
  EXPECT_THROW(g.embedding(TD::zeros({3, 2}), IdTensor({1, 1}, {3})), IndexError);
  EXPECT_THROW(g.embedding(TD::zeros({3, 2}), IdTensor({1, 1}, {-1})), IndexError);
}

TEST(CrossEntropy, KnownValues) {
  G g;
  std::vector<double> w{1.0};
  auto uniform = g.cross_entropy(TD::zeros({1, 4}), IdTensor({1}, {2}), std::span<const double>(w));
  EXPECT_NEAR(uniform.item(), std::log(4.0), 1e-12);
  EXPECT_NEAR(uniform.item(), 1.3863, 1e-4);
  auto hot = g.cross_entropy(TD::from({1, 3}, {0, 1000, 0}), IdTensor({1}, {1}), std::span<const double>(w));
  EXPECT_NEAR(hot.item(), 0.0, 1e-9);
}

TEST(CrossEntropy, MatchesScalarOracle) {
  std::mt19937_64 rng(7);
  for (int trial = 0; trial < 100; ++trial) {
    auto logits = rand_tensor(rng, {2, 3, 5}, false, 3.0);
    std::vector<std::int32_t> tgt(6);
    std::vector<double> w(6);
    for (auto& t : tgt) t = static_cast<std::int32_t>(pick(rng, 0, 4));
    for (auto& x : w) x = static_cast<double>(pick(rng, 0, 1));
    w[0] = 1.0;
    Graph<float> g;
    std::vector<float> wf(w.begin(), w.end());
    auto got = g.cross_entropy(logits.cast<float>(), IdTensor({2, 3}, tgt), std::span<const float>(wf));
    EXPECT_NEAR(got.item(), oracle::cross_entropy(logits.data(), 5, tgt, w), 1e-5);
  }
}

TEST(CrossEntropy, GradientProperty) {
  std::mt19937_64 rng(8);
  for (int trial = 0; trial < 100; ++trial) {
    const auto rows = pick(rng, 1, 4), v = pick(rng, 2, 6);
    std::vector<std::int32_t> tgt(rows);
    for (auto& t : tgt) t = static_cast<std::int32_t>(pick(rng, 0, v - 1));
    std::vector<double> w(rows, 1.0);
    w[rows - 1] = 0.5;
    auto logits = rand_tensor(rng, {rows, v});
    const IdTensor ids({rows}, tgt);
    G g;
    auto loss = g.cross_entropy(logits, ids, std::span<const double>(w));
    g.backward(loss);
    auto numeric = oracle::central_diff_all(
        [&] {
          G g2(false);
          return g2.cross_entropy(logits, ids, std::span<const double>(w)).item();
        },
        logits.data(), 1e-6);
    for (std::size_t i = 0; i < numeric.size(); ++i) {
      ASSERT_LT(oracle::rel_err(logits.grad()[i], numeric[i], 1e-3), 1e-5);
    }
  }
}

TEST(CrossEntropy, ZeroWeightsThrow) {
  G g;
  std::vector<double> w{0.0};
  try {
    g.cross_entropy(TD::zeros({1, 4}), IdTensor({1}, {0}), std::span<const double>(w));
    FAIL();
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("no loss positions"), std::string::npos);
  }
}

TEST(Backward, TrivialGradients) {
  auto x = TD::from({3}, {1, 2, 3}, true);
  G g;
  g.backward(g.sum(x));
  EXPECT_EQ(std::vector<double>(x.grad().begin(), x.grad().end()), (std::vector<double>{1, 1, 1}));
  auto y = TD::from({2}, {1, 2}, true);
  G g2;
  g2.backward(g2.sum(g2.mul(y, y)));
  EXPECT_EQ(std::vector<double>(y.grad().begin(), y.grad().end()), (std::vector<double>{2, 4}));
}

TEST(Backward, DiamondGraphAccumulates) {
  std::mt19937_64 rng(9);
  for (int trial = 0; trial < 100; ++trial) {
    const auto n = pick(rng, 1, 5);
    grad_check({rand_tensor(rng, {n, n})},
               [](G& g, std::vector<TD>& x) {
                 auto a = g.swish(x[0]);
                 auto b = g.matmul(x[0], a);
                 return g.add(g.mul(a, b), g.scale(x[0], 0.5));
               },
               rng);
  }
}

TEST(Backward, TapeErrors) {
  auto x = TD::from({2}, {1, 2}, true);
  G g;
  auto l = g.sum(x);
  EXPECT_THROW(g.backward(x), ShapeError);
  g.backward(l);
  EXPECT_THROW(g.backward(l), TapeError);
  G other;
  EXPECT_THROW(other.backward(l), TapeError);
}

TEST(Backward, NoGradModeRecordsNothing) {
  auto x = TD::from({2}, {1, 2}, true);
  G g(false);
  auto y = g.swish(g.mul(x, x));
  EXPECT_TRUE(g.records().empty());
  EXPECT_FALSE(y.requires_grad());
}

TEST(Backward, DeterministicAcrossRuns) {
  auto run = [] {
    std::mt19937_64 rng(10);
    auto a = rand_tensor(rng, {3, 4});
    auto b = rand_tensor(rng, {4, 2});
    G g;
    g.backward(g.sum(g.softmax_lastdim(g.matmul(a, b))));
    return std::vector<double>(a.grad().begin(), a.grad().end());
  };
  EXPECT_EQ(run(), run());
}

TEST(ShapeOps, GradientProperty) {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 100; ++trial) {
    const auto a = pick(rng, 1, 3), b = pick(rng, 1, 3), c = pick(rng, 1, 3);
    grad_check({rand_tensor(rng, {a, b, c}), rand_tensor(rng, {c})},
               [a, b, c](G& g, std::vector<TD>& x) {
                 auto p = g.permute(x[0], {2, 0, 1});
                 auto r = g.reshape(p, {c, a * b});
                 auto t = g.transpose(r);
                 return g.add_broadcast(g.reshape(t, {a, b, c}), x[1]);
               },
               rng);
  }
}

TEST(Rope, GradientProperty) {
  std::mt19937_64 rng(12);
  for (int trial = 0; trial < 100; ++trial) {
    const auto s = pick(rng, 1, 5), d = 2 * pick(rng, 1, 3);
    std::vector<std::int32_t> pos(s);
    for (std::size_t i = 0; i < s; ++i) pos[i] = static_cast<std::int32_t>(i + pick(rng, 0, 7));
    grad_check({rand_tensor(rng, {pick(rng, 1, 2), s, d})},
               [pos](G& g, std::vector<TD>& x) { return g.rope(x[0], pos); }, rng);
  }
}

TEST(Rope, OddHeadDimRejected) {
  G g;
  std::vector<std::int32_t> pos{0};
  EXPECT_THROW(g.rope(TD::zeros({1, 3}), pos), ConfigError);
}

TEST(Dropout, RateZeroIsIdentityAndMaskIsReused) {
  std::mt19937_64 rng(13);
  auto x = rand_tensor(rng, {16});
  Graph<double> g;
  EXPECT_TRUE(g.dropout(x, 0.0, rng).same_storage(x));
  auto y = g.dropout(x, 0.5, rng);
  g.backward(g.sum(y));
  for (std::size_t i = 0; i < 16; ++i) {
    const double m = y.data()[i] / x.data()[i];
    EXPECT_NEAR(x.grad()[i], m, 1e-12);
    EXPECT_TRUE(std::abs(m) < 1e-12 || std::abs(m - 2.0) < 1e-12);
  }
}

#include <cmath>
#include <cstdlib>
#include <limits>
#include <numeric>

#include <gtest/gtest.h>

#include "cbm_align/numerics.hpp"
#include "oracles.hpp"

using namespace cbm_align;

namespace {

Mat random_mat(std::size_t r, std::size_t c, Rng& rng) {
  Mat m(r, c);
  for (double& v : m.data()) v = rng.normal();
  return m;
}

}  // namespace

TEST(Matrix, ShapeChecksOnConstruction) {
  EXPECT_THROW(Mat(2, 3, std::vector<double>(5)), Error);
  Mat m(2, 3, std::vector<double>{1, 2, 3, 4, 5, 6});
  EXPECT_EQ(m(1, 0), 4.0);
  EXPECT_EQ(m.row(1)[2], 6.0);
}

TEST(Matrix, ProductsAgreeWithNaiveLoops) {
  Rng rng(1);
  Mat a = random_mat(7, 5, rng), b = random_mat(5, 4, rng), c = random_mat(6, 5, rng), d = random_mat(7, 3, rng);
  Mat ref = oracle::naive_matmul(a, b);
  Mat got = matmul(a, b);
  for (std::size_t i = 0; i < ref.size(); ++i) EXPECT_NEAR(got.data()[i], ref.data()[i], 1e-12);
  Mat bt = matmul_bt(a, c);
  Mat bt_ref = oracle::naive_matmul(a, transpose(c));
  for (std::size_t i = 0; i < bt.size(); ++i) EXPECT_NEAR(bt.data()[i], bt_ref.data()[i], 1e-12);
  Mat at = matmul_at(a, d);
  Mat at_ref = oracle::naive_matmul(transpose(a), d);
  for (std::size_t i = 0; i < at.size(); ++i) EXPECT_NEAR(at.data()[i], at_ref.data()[i], 1e-12);
  EXPECT_THROW(matmul(a, c), Error);
}

TEST(Matrix, ThreadedMatmulIsBitwiseIdentical) {
  Rng rng(2);
  Mat a = random_mat(300, 200, rng), b = random_mat(200, 50, rng);
  ::setenv("CBM_ALIGN_THREADS", "1", 1);
  Mat one = matmul(a, b);
  ::setenv("CBM_ALIGN_THREADS", "4", 1);
  Mat four = matmul(a, b);
  ::unsetenv("CBM_ALIGN_THREADS");
  EXPECT_TRUE(bitwise_equal(one, four));
}

TEST(Matrix, ConcatAndGather) {
  Mat a(2, 1, std::vector<double>{1, 2});
  Mat b(2, 2, std::vector<double>{3, 4, 5, 6});
  Mat h = hconcat(a, b);
  EXPECT_EQ(h, Mat(2, 3, std::vector<double>{1, 3, 4, 2, 5, 6}));
  EXPECT_EQ(gather_rows(b, std::vector<std::size_t>{1, 1, 0}), Mat(3, 2, std::vector<double>{5, 6, 5, 6, 3, 4}));
  EXPECT_EQ(hconcat(a, Mat(2, 0)), a);
}

TEST(Vector, SoftmaxIsStableAndNormalized) {
  std::vector<double> v{1000.0, 1000.0, 999.0};
  auto p = softmax(v);
  EXPECT_NEAR(p[0] + p[1] + p[2], 1.0, 1e-15);
  EXPECT_DOUBLE_EQ(p[0], p[1]);
  EXPECT_NEAR(log_sum_exp(v), 1000.0 + std::log(2.0 + std::exp(-1.0)), 1e-12);
  std::vector<double> small{0.1, -0.3, 0.7};
  auto ref = oracle::naive_softmax(small);
  auto got = softmax(small);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(got[i], ref[i], 1e-15);
}

TEST(Vector, LayerNormMatchesDefinition) {
  std::vector<double> v{1.0, 2.0, 4.0, -3.0};
  auto got = layer_norm(v);
  auto ref = oracle::naive_layer_norm(v);
  for (std::size_t i = 0; i < v.size(); ++i) EXPECT_NEAR(got[i], ref[i], 1e-14);
  // Constant input maps to zeros rather than dividing by zero.
  for (double x : layer_norm(std::vector<double>{3.0, 3.0})) EXPECT_EQ(x, 0.0);
}

TEST(Vector, CosineAndArgmax) {
  std::vector<double> a{1, 0}, b{1, 1};
  EXPECT_NEAR(cosine_sim(a, b), 1.0 / std::sqrt(2.0), 1e-15);
  EXPECT_THROW(cosine_sim(a, std::vector<double>{0, 0}), Error);
  EXPECT_EQ(argmax(std::vector<double>{1, 3, 3, 2}), 1u);
}

TEST(Solve, RecoversKnownSolution) {
  Mat a(3, 3, std::vector<double>{4, 1, 0, 1, 3, 1, 0, 1, 2});
  Mat x(3, 2, std::vector<double>{1, -1, 2, 0.5, -3, 4});
  Mat b = matmul(a, x);
  Mat got = solve(a, b);
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_NEAR(got.data()[i], x.data()[i], 1e-12);
  EXPECT_THROW(solve(Mat(2, 2, std::vector<double>{1, 2, 2, 4}), Mat::identity(2)), Error);
}

TEST(Adam, FirstStepMovesEachCoordinateByLr) {
  Mat p(1, 3, std::vector<double>{0.0, 1.0, -1.0});
  Mat g(1, 3, std::vector<double>{2.0, -0.5, 1e-3});
  AdamConfig cfg;
  cfg.lr = 0.1;
  auto [next, state] = adam_step(p, g, AdamState::for_param(p, cfg));
  // Bias correction makes the first step lr * g / (|g| + eps') ~ lr * sign(g).
  EXPECT_NEAR(next(0, 0), -0.1, 1e-6);
  EXPECT_NEAR(next(0, 1), 1.1, 1e-6);
  EXPECT_NEAR(next(0, 2), -1.1, 1e-4);
  EXPECT_EQ(state.step_count, 1);
}

TEST(Adam, MatchesHandRolledRecurrence) {
  Rng rng(3);
  Mat p = random_mat(2, 2, rng);
  AdamConfig cfg{0.01, 0.9, 0.999, 1e-8};
  AdamState st = AdamState::for_param(p, cfg);
  std::vector<double> m(4, 0.0), v(4, 0.0), ref = p.data();
  for (int t = 1; t <= 5; ++t) {
    Mat g = random_mat(2, 2, rng);
    std::tie(p, st) = adam_step(std::move(p), g, std::move(st));
    for (std::size_t i = 0; i < 4; ++i) {
      m[i] = 0.9 * m[i] + 0.1 * g.data()[i];
      v[i] = 0.999 * v[i] + 0.001 * g.data()[i] * g.data()[i];
      const double mh = m[i] / (1 - std::pow(0.9, t)), vh = v[i] / (1 - std::pow(0.999, t));
      ref[i] -= 0.01 * mh / (std::sqrt(vh) + 1e-8);
    }
  }
  for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(p.data()[i], ref[i], 1e-14);
}

TEST(FiniteDiff, QuadraticGradientIsExact) {
  Mat x(1, 3, std::vector<double>{1.0, -2.0, 0.5});
  auto f = [](const Mat& m) { return m(0, 0) * m(0, 0) + 3.0 * m(0, 1) + m(0, 1) * m(0, 2); };
  Mat g = finite_diff_grad(f, x);
  EXPECT_NEAR(g(0, 0), 2.0, 1e-8);
  EXPECT_NEAR(g(0, 1), 3.5, 1e-8);
  EXPECT_NEAR(g(0, 2), -2.0, 1e-8);
  EXPECT_THROW(finite_diff_grad([](const Mat&) { return std::numeric_limits<double>::quiet_NaN(); }, x), Error);
}

TEST(FiniteDiff, RelativeErrorUsesFloor) {
  Mat a(1, 2, std::vector<double>{1.0, 0.0});
  Mat b(1, 2, std::vector<double>{1.0 + 1e-6, 1e-12});
  EXPECT_NEAR(max_relative_error(a, b), 1e-6, 1e-9);
}

TEST(Rng, SeededStreamsRepeat) {
  Rng a(42), b(42), c(43);
  for (int i = 0; i < 10; ++i) {
    const auto x = a.next_u64();
    EXPECT_EQ(x, b.next_u64());
    EXPECT_NE(x, c.next_u64());
  }
}

TEST(Rng, IndexIsRoughlyUniform) {
  Rng rng(7);
  std::vector<int> counts(6, 0);
  const int draws = 60000;
  for (int i = 0; i < draws; ++i) ++counts[rng.index(6)];
  double chi2 = 0.0;
  for (int c : counts) chi2 += std::pow(c - draws / 6.0, 2) / (draws / 6.0);
  EXPECT_LT(chi2, 20.5);  // 5 dof, p ~ 0.001
}

TEST(Rng, NormalMoments) {
  Rng rng(9);
  double s = 0.0, s2 = 0.0;
  const int n = 200000;
  for (int i = 0; i < n; ++i) {
    double x = rng.normal();
    s += x;
    s2 += x * x;
  }
  EXPECT_NEAR(s / n, 0.0, 0.01);
  EXPECT_NEAR(s2 / n, 1.0, 0.02);
}

TEST(Rng, ShuffleIsAPermutation) {
  Rng rng(11);
  std::vector<int> v(50);
  std::iota(v.begin(), v.end(), 0);
  rng.shuffle(v);
  std::vector<int> sorted = v;
  std::sort(sorted.begin(), sorted.end());
  for (int i = 0; i < 50; ++i) EXPECT_EQ(sorted[i], i);
}

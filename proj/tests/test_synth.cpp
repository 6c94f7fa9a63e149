#include <algorithm>

#include <gtest/gtest.h>

#include "cbm_align/css_trainer.hpp"
#include "cbm_align/synth.hpp"
#include "oracles.hpp"

using namespace cbm_align;

namespace {

struct Probe {
  double train_accuracy = 0.0;
  metrics::ErrorMatrix test_errors;
};

/// Least-squares linear probe on raw scores (with bias), fitted on the train
/// split.
Probe raw_probe(const EmbeddingBundle& b) {
  SplitViews v = split_views(b);
  auto with_bias = [](const Mat& x) { return hconcat(x, Mat(x.rows(), 1, 1.0)); };
  Mat xb = with_bias(raw_scores(v.train));
  Mat y(xb.rows(), b.k());
  for (std::size_t i = 0; i < xb.rows(); ++i) y(i, v.train.label(i)) = 1.0;
  Mat gram = matmul_at(xb, xb);
  for (std::size_t i = 0; i < gram.rows(); ++i) gram(i, i) += 1e-8;
  Mat w = solve(gram, matmul_at(xb, y));
  return {metrics::classification_accuracy(matmul(xb, w), v.train.labels()),
          metrics::error_matrix(matmul(with_bias(raw_scores(v.test)), w), v.test.labels(), b.k())};
}

bool same_row(const Mat& m, std::size_t a, std::size_t b) {
  auto x = m.row(a), y = m.row(b);
  return std::equal(x.begin(), x.end(), y.begin());
}

}  // namespace

TEST(Synth, SameSeedSameBundle) {
  auto a = synth::generate(synth::default_benchmark(5));
  auto b = synth::generate(synth::default_benchmark(5));
  auto c = synth::generate(synth::default_benchmark(6));
  EXPECT_TRUE(bitwise_equal(a.bundle, b.bundle));
  EXPECT_TRUE(bitwise_equal(a.truth.prototypes, b.truth.prototypes));
  EXPECT_FALSE(bitwise_equal(a.bundle, c.bundle));
}

TEST(Synth, ShapesLabelsAndSplits) {
  auto g = synth::generate(synth::default_benchmark(0));
  const auto& b = g.bundle;
  EXPECT_EQ(b.n(), 120u);
  EXPECT_EQ(b.c(), 12u);
  EXPECT_EQ(b.k(), 6u);
  for (std::size_t y = 0; y < 6; ++y) {
    double active = 0.0;
    for (std::size_t j = 0; j < 12; ++j) active += g.truth.prototypes(y, j);
    EXPECT_EQ(active, 3.0);
  }
  // Distinct prototypes.
  for (std::size_t a = 0; a < 6; ++a)
    for (std::size_t c = a + 1; c < 6; ++c) EXPECT_FALSE(same_row(g.truth.prototypes, a, c));
  SplitViews v = split_views(b);
  EXPECT_EQ(v.test.size(), 36u);
  EXPECT_EQ(g.truth.candidates.size(), 16u);
  EXPECT_NO_THROW(validate(g.truth.candidates, &b.manifest.concept_names));
}

TEST(Synth, NoiselessAlignedScoresRecoverPrototypes) {
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    auto spec = synth::default_benchmark(seed);
    spec.noise_sigma = 0.0;
    spec.misalignment = 0.0;
    auto g = synth::generate(spec);
    BundleView all = BundleView::all(g.bundle);
    EXPECT_NEAR(metrics::concept_accuracy(raw_scores(all), all.concept_labels()), 100.0, 1e-9);
  }
}

TEST(Synth, MisalignmentHurtsRawConceptAccuracy) {
  double aligned = 0.0, mixed = 0.0;
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    auto spec = synth::default_benchmark(seed);
    auto g = synth::generate(spec);
    mixed += metrics::concept_accuracy(raw_scores(BundleView::all(g.bundle)), BundleView::all(g.bundle).concept_labels());
    spec.misalignment = 0.0;
    auto h = synth::generate(spec);
    aligned += metrics::concept_accuracy(raw_scores(BundleView::all(h.bundle)), BundleView::all(h.bundle).concept_labels());
  }
  EXPECT_GT(aligned, mixed);
}

TEST(Synth, OracleConceptAccuracyIsPerfectOnPrototypeLabels) {
  auto g = synth::generate(synth::default_benchmark(1));
  EXPECT_DOUBLE_EQ(synth::oracle_concept_accuracy(BundleView::all(g.bundle), g.truth), 100.0);
}

TEST(Synth, ConfounderOverlapControlsSharedConcepts) {
  auto full = synth::generate(synth::confounder_benchmark(0, 1.0));
  EXPECT_TRUE(same_row(full.truth.prototypes, 0, 1));
  auto half = synth::generate(synth::confounder_benchmark(0, 0.5));
  double shared = 0.0;
  for (std::size_t j = 0; j < 12; ++j) shared += half.truth.prototypes(0, j) * half.truth.prototypes(1, j);
  EXPECT_EQ(shared, 2.0);  // ceil(0.5 * 3)
  // Hidden concepts still tell the pair apart.
  EXPECT_FALSE(same_row(full.truth.hidden_prototypes, 0, 1));
}

TEST(Synth, DefaultBenchmarkIsLinearlySeparableFromRawScores) {
  for (std::uint64_t seed = 0; seed < 3; ++seed)
    EXPECT_EQ(raw_probe(synth::generate(synth::default_benchmark(seed)).bundle).train_accuracy, 100.0);
}

TEST(Synth, ConfounderPairDominatesProbeConfusion) {
  for (double overlap : {0.8, 0.9, 1.0}) {
    for (std::uint64_t seed = 0; seed < 3; ++seed) {
      auto g = synth::generate(synth::confounder_benchmark(seed, overlap));
      const auto em = raw_probe(g.bundle).test_errors;
      double others = 0.0;
      int n_others = 0;
      for (std::size_t a = 0; a < 6; ++a)
        for (std::size_t b = a + 1; b < 6; ++b)
          if (a != 0 || b != 1) {
            others += static_cast<double>(em.symmetric_mass(a, b));
            ++n_others;
          }
      EXPECT_GT(static_cast<double>(em.symmetric_mass(0, 1)), others / n_others)
          << "overlap " << overlap << " seed " << seed;
    }
  }
}

TEST(Synth, OracleDropsOnAdversarialLabels) {
  // Relabel class 0 with class 1's prototype; the oracle then scores class 0
  // rows by how much the two prototypes overlap.
  auto g = synth::generate(synth::default_benchmark(2));
  EmbeddingBundle b = g.bundle;
  for (std::size_t i = 0; i < b.n(); ++i)
    if (b.class_labels[i] == 0)
      for (std::size_t j = 0; j < b.c(); ++j) (*b.concept_labels)(i, j) = static_cast<float>(g.truth.prototypes(1, j));
  BundleView all = BundleView::all(b);
  Mat proto_scores(b.n(), b.c());
  for (std::size_t i = 0; i < b.n(); ++i)
    for (std::size_t j = 0; j < b.c(); ++j) proto_scores(i, j) = g.truth.prototypes(b.class_labels[i], j);
  const double expected = oracle::concept_accuracy_top_a(proto_scores, all.concept_labels());
  EXPECT_LT(expected, 100.0);
  EXPECT_NEAR(synth::oracle_concept_accuracy(all, g.truth), expected, 1e-12);
}

TEST(Synth, OracleIsACeilingForTrainedModels) {
  auto g = synth::generate(synth::default_benchmark(4));
  TrainConfig cfg;
  cfg.epochs = 30;
  TrainResult r = train(g.bundle, cfg);
  SplitViews v = split_views(g.bundle);
  EXPECT_LE(*r.report.epochs.back().concept_accuracy, synth::oracle_concept_accuracy(v.test, g.truth));
}

TEST(Synth, SpecJsonRoundTripAndValidation) {
  auto s = synth::confounder_benchmark(3, 0.5);
  auto back = synth::synth_spec_from_json(synth::to_json(s));
  EXPECT_EQ(synth::to_json(back), synth::to_json(s));
  auto bad = synth::default_benchmark();
  bad.d_joint = 10;
  try {
    synth::generate(bad);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kInfeasible);
  }
  EXPECT_THROW(synth::synth_spec_from_json(json{{"confounder", {{"classes", {0}}}}}), Error);
}

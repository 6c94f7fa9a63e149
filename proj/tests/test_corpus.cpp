#include <cmath>
#include <fstream>
#include <functional>
#include <set>

#include <gtest/gtest.h>

#include "cbm_align/corpus.hpp"
#include "oracles.hpp"

using namespace cbm_align;
namespace fs = std::filesystem;

namespace {

EmbeddingBundle small_bundle(std::uint64_t seed = 1, bool labels = true) {
  Rng rng(seed);
  oracle::BundleShape shape;
  shape.n = 12;
  shape.k = 3;
  shape.concept_labels = labels;
  EmbeddingBundle b = oracle::random_bundle(shape, rng);
  // Deterministic layout: 4 per class, one test sample per class.
  for (std::size_t i = 0; i < b.n(); ++i) {
    b.class_labels[i] = static_cast<std::uint32_t>(i % 3);
    b.manifest.split[i] = i < 9 ? Split::kTrain : Split::kTest;
  }
  return b;
}

std::string error_message(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.what();
  }
  return {};
}

}  // namespace

TEST(Io, LittleEndianEncoding) {
  std::vector<std::uint32_t> v{0x01020304u};
  auto bytes = io::encode<std::uint32_t>(v);
  ASSERT_EQ(bytes.size(), 4u);
  EXPECT_EQ(bytes[0], 0x04);
  EXPECT_EQ(bytes[3], 0x01);
  std::vector<float> f{1.0f};
  auto fb = io::encode<float>(f);
  EXPECT_EQ(static_cast<unsigned char>(fb[3]), 0x3F);
  EXPECT_EQ(static_cast<unsigned char>(fb[2]), 0x80);
  EXPECT_EQ(io::decode<float>(fb, "x")[0], 1.0f);
  EXPECT_THROW(io::decode<float>(std::vector<char>(3), "x"), Error);
}

TEST(Bundle, RoundTripIsBitwise) {
  oracle::TempDir tmp("corpus_rt");
  for (bool labels : {true, false}) {
    EmbeddingBundle b = small_bundle(2, labels);
    save_bundle(b, tmp.path() / "b");
    EmbeddingBundle back = load_bundle(tmp.path() / "b");
    EXPECT_TRUE(bitwise_equal(b, back));
    EXPECT_EQ(fs::exists(tmp.path() / "b" / bundle_files::kConceptLabels), labels);
    EXPECT_EQ(fs::exists(tmp.path() / "b" / bundle_files::kLabeledMask), labels);
  }
}

TEST(Bundle, MissingLabelsLoadWithEmptyMask) {
  oracle::TempDir tmp("corpus_nolabels");
  EmbeddingBundle b = small_bundle(3, false);
  save_bundle(b, tmp.path());
  EmbeddingBundle back = load_bundle(tmp.path());
  EXPECT_FALSE(back.concept_labels.has_value());
  for (auto f : back.labeled_mask) EXPECT_EQ(f, 0);
}

TEST(Bundle, TruncatedFileNamesFile) {
  oracle::TempDir tmp("corpus_trunc");
  save_bundle(small_bundle(), tmp.path());
  fs::resize_file(tmp.path() / bundle_files::kPatchFeatures, 4 * 7);
  const std::string msg = error_message([&] { load_bundle(tmp.path()); });
  EXPECT_NE(msg.find("patch_features.f32"), std::string::npos) << msg;
  EXPECT_NE(msg.find("expected"), std::string::npos) << msg;
}

TEST(Bundle, MissingFileIsIoError) {
  oracle::TempDir tmp("corpus_missing");
  save_bundle(small_bundle(), tmp.path());
  fs::remove(tmp.path() / bundle_files::kClassLabels);
  try {
    load_bundle(tmp.path());
    FAIL() << "expected an error";
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kIo);
    EXPECT_NE(std::string(e.what()).find("class_labels.u32"), std::string::npos);
  }
}

TEST(Bundle, ValidationNamesIndex) {
  EmbeddingBundle b = small_bundle();
  b.class_labels[5] = 7;
  std::string msg = error_message([&] { validate(b); });
  EXPECT_NE(msg.find("index 5"), std::string::npos) << msg;

  b = small_bundle();
  b.image_features(4, 0) *= 2.0f;
  msg = error_message([&] { validate(b); });
  EXPECT_NE(msg.find("image_features.f32: row 4"), std::string::npos) << msg;

  b = small_bundle();
  (*b.concept_labels)(2, 1) = 1.5f;
  msg = error_message([&] { validate(b); });
  EXPECT_NE(msg.find("row 2, column 1"), std::string::npos) << msg;

  b = small_bundle(1, false);
  b.labeled_mask[3] = 1;
  msg = error_message([&] { validate(b); });
  EXPECT_NE(msg.find("index 3"), std::string::npos) << msg;
}

TEST(Bundle, ManifestDimensionMismatch) {
  EmbeddingBundle b = small_bundle();
  b.manifest.d_patch += 1;
  try {
    validate(b);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kShapeMismatch);
  }
  b = small_bundle();
  b.manifest.concept_names.pop_back();
  EXPECT_THROW(validate(b), Error);
}

TEST(Bundle, BadSplitTagRejected) {
  oracle::TempDir tmp("corpus_split");
  save_bundle(small_bundle(), tmp.path());
  auto j = json::parse(io::read_text(tmp.path() / "manifest.json"));
  j["split"][4] = 2;
  io::write_atomic(tmp.path() / "manifest.json", j.dump());
  const std::string msg = error_message([&] { load_bundle(tmp.path()); });
  EXPECT_NE(msg.find("split[4]"), std::string::npos) << msg;
}

TEST(Bundle, ResaveWithoutLabelsRemovesStaleFiles) {
  oracle::TempDir tmp("corpus_stale");
  save_bundle(small_bundle(4, true), tmp.path());
  save_bundle(small_bundle(4, false), tmp.path());
  EXPECT_FALSE(fs::exists(tmp.path() / bundle_files::kConceptLabels));
  EXPECT_NO_THROW(load_bundle(tmp.path()));
}

TEST(Views, SplitAndSubset) {
  EmbeddingBundle b = small_bundle();
  SplitViews v = split_views(b);
  EXPECT_EQ(v.train.size(), 9u);
  EXPECT_EQ(v.test.size(), 3u);
  EXPECT_EQ(v.test[0], 9u);
  std::vector<std::size_t> pos{2, 0};
  BundleView sub = v.test.subset(pos);
  EXPECT_EQ(sub[0], 11u);
  EXPECT_EQ(sub.label(1), b.class_labels[9]);
  Mat img = sub.image_features();
  EXPECT_EQ(img(0, 1), static_cast<double>(b.image_features(11, 1)));
  auto groups = indices_by_class(v.train);
  EXPECT_EQ(groups[0], (std::vector<std::size_t>{0, 3, 6}));

  for (auto& s : b.manifest.split) s = Split::kTrain;
  EXPECT_THROW(split_views(b), Error);
}

TEST(LabelBudget, ExactCountsPerClassOnTrainOnly) {
  EmbeddingBundle b = small_bundle();
  EmbeddingBundle out = apply_label_budget(b, {2, 5});
  std::vector<int> per_class(3, 0);
  for (std::size_t i = 0; i < out.n(); ++i) {
    if (!out.labeled(i)) continue;
    EXPECT_EQ(out.manifest.split[i], Split::kTrain);
    ++per_class[out.class_labels[i]];
  }
  EXPECT_EQ(per_class, (std::vector<int>{2, 2, 2}));
  EXPECT_EQ(apply_label_budget(b, {2, 5}).labeled_mask, out.labeled_mask);
  EXPECT_EQ(apply_label_budget(b, {0, 5}).labeled_mask, std::vector<std::uint8_t>(b.n(), 0));
}

TEST(LabelBudget, SelectionIsUniform) {
  // Class 0 has train members {0, 3, 6}; each should be picked ~1/3 of the time.
  EmbeddingBundle b = small_bundle();
  std::vector<int> hits(3, 0);
  const int trials = 3000;
  for (int s = 0; s < trials; ++s) {
    EmbeddingBundle out = apply_label_budget(b, {1, static_cast<std::uint64_t>(s)});
    for (int t = 0; t < 3; ++t) hits[t] += out.labeled_mask[3 * t];
  }
  double chi2 = 0.0;
  for (int h : hits) chi2 += std::pow(h - trials / 3.0, 2) / (trials / 3.0);
  EXPECT_LT(chi2, 13.8);  // 2 dof, p ~ 0.001
}

TEST(LabelBudget, InfeasibleBudgetAndMissingLabels) {
  EmbeddingBundle b = small_bundle();
  try {
    apply_label_budget(b, {4, 0});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kInfeasible);
  }
  EXPECT_THROW(apply_label_budget(small_bundle(1, false), {1, 0}), Error);
}

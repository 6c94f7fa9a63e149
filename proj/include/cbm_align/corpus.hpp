#pragma once

// Embedding bundles: the on-disk unit every run starts from.
//
// Directory layout (little-endian, row-major, no headers):
//   manifest.json        Manifest fields; split as 0 (train) / 1 (test)
//   image_features.f32   n x d_joint, rows L2-normalized
//   patch_features.f32   n x d_patch, raw pooled patch tokens
//   text_features.f32    c x d_joint, rows L2-normalized
//   class_labels.u32     n
//   concept_labels.f32   n x c, values in [0, 1]   (iff has_concept_labels)
//   labeled_mask.u8      n bytes, 0 or 1           (iff has_concept_labels)

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "cbm_align/error.hpp"
#include "cbm_align/io.hpp"
#include "cbm_align/numerics.hpp"

namespace cbm_align {

namespace fs = std::filesystem;
using json = nlohmann::json;

enum class Split : std::uint8_t { kTrain = 0, kTest = 1 };

inline constexpr int kBundleFormatVersion = 1;
inline constexpr double kUnitNormTolerance = 1e-3;

namespace bundle_files {
inline constexpr const char* kManifest = "manifest.json";
inline constexpr const char* kImageFeatures = "image_features.f32";
inline constexpr const char* kPatchFeatures = "patch_features.f32";
inline constexpr const char* kTextFeatures = "text_features.f32";
inline constexpr const char* kClassLabels = "class_labels.u32";
inline constexpr const char* kConceptLabels = "concept_labels.f32";
inline constexpr const char* kLabeledMask = "labeled_mask.u8";
}  // namespace bundle_files

struct Manifest {
  int version = kBundleFormatVersion;
  std::size_t n_samples = 0;
  std::size_t d_joint = 0;
  std::size_t d_patch = 0;
  std::size_t n_concepts = 0;
  std::size_t n_classes = 0;
  std::vector<std::string> concept_names;
  std::vector<std::string> class_names;
  std::vector<Split> split;
  bool has_concept_labels = false;

  bool operator==(const Manifest&) const = default;
};

inline json to_json(const Manifest& m) {
  std::vector<int> split;
  split.reserve(m.split.size());
  for (Split s : m.split) split.push_back(static_cast<int>(s));
  return json{{"version", m.version},
              {"n_samples", m.n_samples},
              {"d_joint", m.d_joint},
              {"d_patch", m.d_patch},
              {"n_concepts", m.n_concepts},
              {"n_classes", m.n_classes},
              {"concept_names", m.concept_names},
              {"class_names", m.class_names},
              {"split", split},
              {"has_concept_labels", m.has_concept_labels}};
}

inline Manifest manifest_from_json(const json& j, const std::string& source = bundle_files::kManifest) {
  Manifest m;
  try {
    m.version = j.at("version").get<int>();
    m.n_samples = j.at("n_samples").get<std::size_t>();
    m.d_joint = j.at("d_joint").get<std::size_t>();
    m.d_patch = j.at("d_patch").get<std::size_t>();
    m.n_concepts = j.at("n_concepts").get<std::size_t>();
    m.n_classes = j.at("n_classes").get<std::size_t>();
    m.concept_names = j.at("concept_names").get<std::vector<std::string>>();
    m.class_names = j.at("class_names").get<std::vector<std::string>>();
    m.has_concept_labels = j.at("has_concept_labels").get<bool>();
    const auto& split = j.at("split");
    CBM_ALIGN_CHECK(split.is_array(), ErrorKind::kFormat, source + ": split must be an array");
    for (std::size_t i = 0; i < split.size(); ++i) {
      int tag = split[i].get<int>();
      CBM_ALIGN_CHECK(tag == 0 || tag == 1, ErrorKind::kValidation,
                      source + ": split[" + std::to_string(i) + "] = " + std::to_string(tag) +
                          " is not 0 (train) or 1 (test)");
      m.split.push_back(static_cast<Split>(tag));
    }
  } catch (const json::exception& e) {
    throw Error(ErrorKind::kFormat, source + ": " + e.what());
  }
  return m;
}

inline void validate(const Manifest& m) {
  CBM_ALIGN_CHECK(m.version == kBundleFormatVersion, ErrorKind::kFormat,
                  "manifest.json: unsupported version " + std::to_string(m.version));
  CBM_ALIGN_CHECK(m.n_samples > 0 && m.d_joint > 0 && m.d_patch > 0 && m.n_concepts > 0 && m.n_classes > 0,
                  ErrorKind::kValidation, "manifest.json: all dimensions must be positive");
  CBM_ALIGN_CHECK(m.concept_names.size() == m.n_concepts, ErrorKind::kValidation,
                  "manifest.json: concept_names has " + std::to_string(m.concept_names.size()) +
                      " entries, n_concepts is " + std::to_string(m.n_concepts));
  CBM_ALIGN_CHECK(m.class_names.size() == m.n_classes, ErrorKind::kValidation,
                  "manifest.json: class_names has " + std::to_string(m.class_names.size()) +
                      " entries, n_classes is " + std::to_string(m.n_classes));
  CBM_ALIGN_CHECK(m.split.size() == m.n_samples, ErrorKind::kValidation,
                  "manifest.json: split has " + std::to_string(m.split.size()) + " entries, n_samples is " +
                      std::to_string(m.n_samples));
  for (std::size_t i = 0; i < m.split.size(); ++i) {
    CBM_ALIGN_CHECK(m.split[i] == Split::kTrain || m.split[i] == Split::kTest, ErrorKind::kValidation,
                    "manifest.json: invalid split tag at index " + std::to_string(i));
  }
}

struct EmbeddingBundle {
  Manifest manifest;
  Mat32 image_features;  // n x d_joint
  Mat32 patch_features;  // n x d_patch
  Mat32 text_features;   // c x d_joint
  std::vector<std::uint32_t> class_labels;
  std::optional<Mat32> concept_labels;  // n x c
  std::vector<std::uint8_t> labeled_mask;

  std::size_t n() const noexcept { return manifest.n_samples; }
  std::size_t c() const noexcept { return manifest.n_concepts; }
  std::size_t k() const noexcept { return manifest.n_classes; }
  bool labeled(std::size_t i) const { return labeled_mask[i] != 0; }
};

namespace detail {

inline void check_unit_rows(const Mat32& m, const char* file) {
  for (std::size_t r = 0; r < m.rows(); ++r) {
    double sq = 0.0;
    for (float v : m.row(r)) {
      CBM_ALIGN_CHECK(std::isfinite(v), ErrorKind::kValidation,
                      std::string(file) + ": non-finite value in row " + std::to_string(r));
      sq += static_cast<double>(v) * static_cast<double>(v);
    }
    const double norm = std::sqrt(sq);
    CBM_ALIGN_CHECK(std::abs(norm - 1.0) <= kUnitNormTolerance, ErrorKind::kValidation,
                    std::string(file) + ": row " + std::to_string(r) + " has L2 norm " + std::to_string(norm) +
                        ", expected 1 within 1e-3");
  }
}

inline void check_shape(const Mat32& m, std::size_t rows, std::size_t cols, const char* file) {
  CBM_ALIGN_CHECK(m.rows() == rows && m.cols() == cols, ErrorKind::kShapeMismatch,
                  std::string(file) + ": shape " + std::to_string(m.rows()) + "x" + std::to_string(m.cols()) +
                      " does not match manifest " + std::to_string(rows) + "x" + std::to_string(cols));
}

}  // namespace detail

/// Throws on the first invariant violation, naming file and index.
inline void validate(const EmbeddingBundle& b) {
  namespace f = bundle_files;
  validate(b.manifest);
  const Manifest& m = b.manifest;
  detail::check_shape(b.image_features, m.n_samples, m.d_joint, f::kImageFeatures);
  detail::check_shape(b.patch_features, m.n_samples, m.d_patch, f::kPatchFeatures);
  detail::check_shape(b.text_features, m.n_concepts, m.d_joint, f::kTextFeatures);
  detail::check_unit_rows(b.image_features, f::kImageFeatures);
  detail::check_unit_rows(b.text_features, f::kTextFeatures);
  for (std::size_t i = 0; i < b.patch_features.size(); ++i) {
    CBM_ALIGN_CHECK(std::isfinite(b.patch_features.data()[i]), ErrorKind::kValidation,
                    std::string(f::kPatchFeatures) + ": non-finite value in row " +
                        std::to_string(i / m.d_patch));
  }
  CBM_ALIGN_CHECK(b.class_labels.size() == m.n_samples, ErrorKind::kShapeMismatch,
                  std::string(f::kClassLabels) + ": expected " + std::to_string(m.n_samples) + " labels, found " +
                      std::to_string(b.class_labels.size()));
  for (std::size_t i = 0; i < b.class_labels.size(); ++i) {
    CBM_ALIGN_CHECK(b.class_labels[i] < m.n_classes, ErrorKind::kValidation,
                    std::string(f::kClassLabels) + ": label " + std::to_string(b.class_labels[i]) +
                        " at index " + std::to_string(i) + " is outside [0, " + std::to_string(m.n_classes) + ")");
  }
  CBM_ALIGN_CHECK(b.concept_labels.has_value() == m.has_concept_labels, ErrorKind::kValidation,
                  "manifest.json: has_concept_labels disagrees with concept label presence");
  CBM_ALIGN_CHECK(b.labeled_mask.size() == m.n_samples, ErrorKind::kShapeMismatch,
                  std::string(f::kLabeledMask) + ": expected " + std::to_string(m.n_samples) + " entries, found " +
                      std::to_string(b.labeled_mask.size()));
  for (std::size_t i = 0; i < b.labeled_mask.size(); ++i) {
    CBM_ALIGN_CHECK(b.labeled_mask[i] <= 1, ErrorKind::kValidation,
                    std::string(f::kLabeledMask) + ": byte at index " + std::to_string(i) + " is not 0 or 1");
    CBM_ALIGN_CHECK(m.has_concept_labels || b.labeled_mask[i] == 0, ErrorKind::kValidation,
                    std::string(f::kLabeledMask) + ": index " + std::to_string(i) +
                        " is labeled but the bundle has no concept labels");
  }
  if (b.concept_labels) {
    detail::check_shape(*b.concept_labels, m.n_samples, m.n_concepts, f::kConceptLabels);
    for (std::size_t i = 0; i < b.concept_labels->size(); ++i) {
      float v = b.concept_labels->data()[i];
      CBM_ALIGN_CHECK(std::isfinite(v) && v >= 0.0f && v <= 1.0f, ErrorKind::kValidation,
                      std::string(f::kConceptLabels) + ": value " + std::to_string(v) + " at row " +
                          std::to_string(i / m.n_concepts) + ", column " + std::to_string(i % m.n_concepts) +
                          " is outside [0, 1]");
    }
  }
}

inline bool bitwise_equal(const EmbeddingBundle& a, const EmbeddingBundle& b) {
  if (!(a.manifest == b.manifest)) return false;
  if (!bitwise_equal(a.image_features, b.image_features)) return false;
  if (!bitwise_equal(a.patch_features, b.patch_features)) return false;
  if (!bitwise_equal(a.text_features, b.text_features)) return false;
  if (a.class_labels != b.class_labels || a.labeled_mask != b.labeled_mask) return false;
  if (a.concept_labels.has_value() != b.concept_labels.has_value()) return false;
  return !a.concept_labels || bitwise_equal(*a.concept_labels, *b.concept_labels);
}

inline void save_bundle(const EmbeddingBundle& bundle, const fs::path& dir) {
  namespace f = bundle_files;
  validate(bundle);
  io::ensure_dir(dir);
  io::write_atomic(dir / f::kManifest, to_json(bundle.manifest).dump(2) + "\n");
  io::write_blob<float>(dir / f::kImageFeatures, bundle.image_features.data());
  io::write_blob<float>(dir / f::kPatchFeatures, bundle.patch_features.data());
  io::write_blob<float>(dir / f::kTextFeatures, bundle.text_features.data());
  io::write_blob<std::uint32_t>(dir / f::kClassLabels, bundle.class_labels);
  if (bundle.concept_labels) {
    io::write_blob<float>(dir / f::kConceptLabels, bundle.concept_labels->data());
    io::write_blob<std::uint8_t>(dir / f::kLabeledMask, bundle.labeled_mask);
  } else {
    // Stale optional files from an earlier save would contradict the manifest.
    std::error_code ec;
    fs::remove(dir / f::kConceptLabels, ec);
    fs::remove(dir / f::kLabeledMask, ec);
  }
}

inline EmbeddingBundle load_bundle(const fs::path& dir) {
  namespace f = bundle_files;
  EmbeddingBundle b;
  json mj;
  try {
    mj = json::parse(io::read_text(dir / f::kManifest));
  } catch (const json::parse_error& e) {
    throw Error(ErrorKind::kFormat, (dir / f::kManifest).string() + ": " + e.what());
  }
  b.manifest = manifest_from_json(mj, (dir / f::kManifest).string());
  validate(b.manifest);
  const Manifest& m = b.manifest;
  b.image_features = Mat32(m.n_samples, m.d_joint,
                           io::read_blob<float>(dir / f::kImageFeatures, m.n_samples * m.d_joint));
  b.patch_features = Mat32(m.n_samples, m.d_patch,
                           io::read_blob<float>(dir / f::kPatchFeatures, m.n_samples * m.d_patch));
  b.text_features = Mat32(m.n_concepts, m.d_joint,
                          io::read_blob<float>(dir / f::kTextFeatures, m.n_concepts * m.d_joint));
  b.class_labels = io::read_blob<std::uint32_t>(dir / f::kClassLabels, m.n_samples);
  if (m.has_concept_labels) {
    b.concept_labels = Mat32(m.n_samples, m.n_concepts,
                             io::read_blob<float>(dir / f::kConceptLabels, m.n_samples * m.n_concepts));
    b.labeled_mask = io::read_blob<std::uint8_t>(dir / f::kLabeledMask, m.n_samples);
  } else {
    b.labeled_mask.assign(m.n_samples, 0);
  }
  validate(b);
  return b;
}

/// Index view over a bundle; shares the bundle's storage.
class BundleView {
 public:
  BundleView(const EmbeddingBundle& bundle, std::vector<std::size_t> indices)
      : bundle_(&bundle), indices_(std::move(indices)) {}

  static BundleView all(const EmbeddingBundle& bundle) {
    std::vector<std::size_t> idx(bundle.n());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    return {bundle, std::move(idx)};
  }

  const EmbeddingBundle& bundle() const noexcept { return *bundle_; }
  const std::vector<std::size_t>& indices() const noexcept { return indices_; }
  std::size_t size() const noexcept { return indices_.size(); }
  std::size_t operator[](std::size_t i) const { return indices_[i]; }

  std::uint32_t label(std::size_t i) const { return bundle_->class_labels[indices_[i]]; }

  std::vector<std::uint32_t> labels() const {
    std::vector<std::uint32_t> out(size());
    for (std::size_t i = 0; i < size(); ++i) out[i] = label(i);
    return out;
  }

  Mat image_features() const { return gather_rows(bundle_->image_features, indices_).cast<double>(); }
  Mat patch_features() const { return gather_rows(bundle_->patch_features, indices_).cast<double>(); }

  /// Concept labels for the viewed rows (evaluation use; training must
  /// also consult the labeled mask).
  Mat concept_labels() const {
    CBM_ALIGN_CHECK(bundle_->concept_labels.has_value(), ErrorKind::kInvalidArgument,
                    "bundle has no concept labels");
    return gather_rows(*bundle_->concept_labels, indices_).cast<double>();
  }

  /// Sub-view of positions [0, size()) selected by `positions`.
  BundleView subset(std::span<const std::size_t> positions) const {
    std::vector<std::size_t> idx;
    idx.reserve(positions.size());
    for (std::size_t p : positions) idx.push_back(indices_.at(p));
    return {*bundle_, std::move(idx)};
  }

 private:
  const EmbeddingBundle* bundle_;
  std::vector<std::size_t> indices_;
};

struct SplitViews {
  BundleView train;
  BundleView test;
};

inline SplitViews split_views(const EmbeddingBundle& bundle) {
  std::vector<std::size_t> train, test;
  for (std::size_t i = 0; i < bundle.manifest.split.size(); ++i) {
    (bundle.manifest.split[i] == Split::kTrain ? train : test).push_back(i);
  }
  CBM_ALIGN_CHECK(!train.empty(), ErrorKind::kValidation, "split_views: train split is empty");
  CBM_ALIGN_CHECK(!test.empty(), ErrorKind::kValidation, "split_views: test split is empty");
  return {BundleView(bundle, std::move(train)), BundleView(bundle, std::move(test))};
}

/// Per-class sample indices of a view (positions into the bundle).
inline std::vector<std::vector<std::size_t>> indices_by_class(const BundleView& view) {
  std::vector<std::vector<std::size_t>> out(view.bundle().k());
  for (std::size_t i = 0; i < view.size(); ++i) out[view.label(i)].push_back(view[i]);
  return out;
}

struct LabelBudget {
  std::size_t per_class = 0;
  std::uint64_t seed = 0;
};

/// Marks exactly `per_class` seeded-uniform train samples per class as
/// concept-labeled; everything else (including the test split) unlabeled.
inline EmbeddingBundle apply_label_budget(const EmbeddingBundle& bundle, const LabelBudget& budget) {
  CBM_ALIGN_CHECK(bundle.manifest.has_concept_labels, ErrorKind::kInvalidArgument,
                  "apply_label_budget: bundle has no concept labels");
  std::vector<std::vector<std::size_t>> by_class(bundle.k());
  for (std::size_t i = 0; i < bundle.n(); ++i) {
    if (bundle.manifest.split[i] == Split::kTrain) by_class[bundle.class_labels[i]].push_back(i);
  }
  for (std::size_t cls = 0; cls < by_class.size(); ++cls) {
    if (by_class[cls].empty()) continue;  // class absent from train: nothing to label
    CBM_ALIGN_CHECK(budget.per_class <= by_class[cls].size(), ErrorKind::kInfeasible,
                    "apply_label_budget: " + std::to_string(budget.per_class) + " labels per class exceeds the " +
                        std::to_string(by_class[cls].size()) + " train samples of class " + std::to_string(cls));
  }
  EmbeddingBundle out = bundle;
  out.labeled_mask.assign(bundle.n(), 0);
  Rng rng(budget.seed);
  for (auto& members : by_class) {
    rng.shuffle(members);
    for (std::size_t j = 0; j < budget.per_class && j < members.size(); ++j) out.labeled_mask[members[j]] = 1;
  }
  return out;
}

}  // namespace cbm_align

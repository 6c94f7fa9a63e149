#pragma once

// Concept scoring and the linear class head.
//
//   raw       = raw_scale * image_features . text_features^T
//   enhanced  = raw + LN(patch_features) . w_cp
//   logits    = scores . w_k
//
// Model directory: model.json + w_cp.f64 + w_k.f64 (row-major, little-endian).

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <string>

#include <nlohmann/json.hpp>

#include "cbm_align/corpus.hpp"
#include "cbm_align/error.hpp"
#include "cbm_align/io.hpp"
#include "cbm_align/numerics.hpp"

namespace cbm_align {

inline constexpr int kModelFormatVersion = 1;

struct ConceptModel {
  Mat w_cp;  // d_patch x c
  Mat w_k;   // c x k
  std::uint64_t seed = 0;
  double raw_scale = 1.0;

  std::size_t d_patch() const noexcept { return w_cp.rows(); }
  std::size_t c() const noexcept { return w_k.rows(); }
  std::size_t k() const noexcept { return w_k.cols(); }
};

/// w_cp starts at zero (enhanced == raw); w_k uniform in [-1/sqrt(c), 1/sqrt(c)].
inline ConceptModel init_model(std::size_t d_patch, std::size_t c, std::size_t k, std::uint64_t seed,
                               double raw_scale = 1.0) {
  CBM_ALIGN_CHECK(d_patch > 0 && c > 0 && k > 0, ErrorKind::kInvalidArgument,
                  "init_model: dimensions must be positive");
  ConceptModel m;
  m.w_cp = Mat(d_patch, c);
  m.w_k = Mat(c, k);
  m.seed = seed;
  m.raw_scale = raw_scale;
  Rng rng(seed);
  const double bound = 1.0 / std::sqrt(static_cast<double>(c));
  for (double& w : m.w_k.data()) w = rng.uniform(-bound, bound);
  return m;
}

inline void check_compatible(const ConceptModel& model, const EmbeddingBundle& bundle) {
  CBM_ALIGN_CHECK(model.d_patch() == bundle.manifest.d_patch && model.c() == bundle.c() &&
                      model.k() == bundle.k() && model.w_cp.cols() == model.c(),
                  ErrorKind::kShapeMismatch,
                  "model (d_patch=" + std::to_string(model.d_patch()) + ", c=" + std::to_string(model.c()) +
                      ", k=" + std::to_string(model.k()) + ") does not fit bundle (d_patch=" +
                      std::to_string(bundle.manifest.d_patch) + ", c=" + std::to_string(bundle.c()) +
                      ", k=" + std::to_string(bundle.k()) + ")");
}

/// image . text^T for arbitrary text rows (used for base and candidate concepts).
inline Mat alignment_scores(const BundleView& view, const Mat& text_rows, double raw_scale = 1.0) {
  Mat scores = matmul_bt(view.image_features(), text_rows);
  if (raw_scale != 1.0) {
    for (double& s : scores.data()) s *= raw_scale;
  }
  return scores;
}

inline Mat raw_scores(const BundleView& view, double raw_scale = 1.0) {
  return alignment_scores(view, view.bundle().text_features.cast<double>(), raw_scale);
}

inline Mat projection_term(const BundleView& view, const ConceptModel& model) {
  return matmul(layer_norm_rows(view.patch_features()), model.w_cp);
}

inline Mat enhanced_scores(const BundleView& view, const ConceptModel& model) {
  CBM_ALIGN_CHECK(model.d_patch() == view.bundle().manifest.d_patch && model.w_cp.cols() == view.bundle().c(),
                  ErrorKind::kShapeMismatch, "enhanced_scores: w_cp shape does not match the bundle");
  Mat scores = raw_scores(view, model.raw_scale);
  Mat proj = projection_term(view, model);
  for (std::size_t i = 0; i < scores.size(); ++i) scores.data()[i] += proj.data()[i];
  return scores;
}

inline Mat class_logits(const Mat& scores, const ConceptModel& model) {
  CBM_ALIGN_CHECK(scores.cols() == model.c(), ErrorKind::kShapeMismatch,
                  "class_logits: scores have " + std::to_string(scores.cols()) + " columns, model expects " +
                      std::to_string(model.c()));
  return matmul(scores, model.w_k);
}

inline bool projection_is_zero(const ConceptModel& model) {
  for (double w : model.w_cp.data())
    if (w != 0.0) return false;
  return true;
}

inline void save_model(const ConceptModel& model, const fs::path& dir) {
  CBM_ALIGN_CHECK(all_finite(model.w_cp) && all_finite(model.w_k), ErrorKind::kNumeric,
                  "save_model: non-finite parameters");
  io::ensure_dir(dir);
  json header{{"version", kModelFormatVersion},
              {"d_patch", model.d_patch()},
              {"n_concepts", model.c()},
              {"n_classes", model.k()},
              {"seed", model.seed},
              {"raw_scale", model.raw_scale}};
  io::write_atomic(dir / "model.json", header.dump(2) + "\n");
  io::write_blob<double>(dir / "w_cp.f64", model.w_cp.data());
  io::write_blob<double>(dir / "w_k.f64", model.w_k.data());
}

inline ConceptModel load_model(const fs::path& dir) {
  json header;
  try {
    header = json::parse(io::read_text(dir / "model.json"));
  } catch (const json::parse_error& e) {
    throw Error(ErrorKind::kFormat, (dir / "model.json").string() + ": " + e.what());
  }
  ConceptModel m;
  std::size_t d_patch = 0, c = 0, k = 0;
  try {
    CBM_ALIGN_CHECK(header.at("version").get<int>() == kModelFormatVersion, ErrorKind::kFormat,
                    (dir / "model.json").string() + ": unsupported version");
    d_patch = header.at("d_patch").get<std::size_t>();
    c = header.at("n_concepts").get<std::size_t>();
    k = header.at("n_classes").get<std::size_t>();
    m.seed = header.at("seed").get<std::uint64_t>();
    m.raw_scale = header.value("raw_scale", 1.0);
  } catch (const json::exception& e) {
    throw Error(ErrorKind::kFormat, (dir / "model.json").string() + ": " + e.what());
  }
  m.w_cp = Mat(d_patch, c, io::read_blob<double>(dir / "w_cp.f64", d_patch * c));
  m.w_k = Mat(c, k, io::read_blob<double>(dir / "w_k.f64", c * k));
  CBM_ALIGN_CHECK(all_finite(m.w_cp) && all_finite(m.w_k), ErrorKind::kValidation,
                  dir.string() + ": non-finite parameters");
  return m;
}

}  // namespace cbm_align

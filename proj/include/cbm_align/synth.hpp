#pragma once

// Synthetic bundles with planted concept structure.
//
// Each sample has a latent vector u = [base concepts | hidden concepts |
// distractors]: its class prototype plus gaussian noise. Joint image
// features are normalize(u . mix . dual), where `dual` is the dual basis of
// the latent text rows (so u . dual . text^T == u) and mix = (1 - m) I + m Q
// blends in a random concept cross-talk Q with weight m = misalignment.
// Patch features only see the base concepts: z_base . patch_map + noise.
// Hidden and distractor text rows become the candidate concepts.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cbm_align/candidates.hpp"
#include "cbm_align/corpus.hpp"
#include "cbm_align/error.hpp"
#include "cbm_align/metrics.hpp"
#include "cbm_align/numerics.hpp"

namespace cbm_align::synth {

struct Confounder {
  std::uint32_t class_a = 0;
  std::uint32_t class_b = 1;
  double overlap = 0.9;
};

struct SynthSpec {
  std::size_t k = 6;
  std::size_t c = 12;
  std::size_t samples_per_class = 20;
  std::size_t d_joint = 64;
  std::size_t d_patch = 96;
  std::size_t active_per_class = 3;
  double noise_sigma = 0.1;
  double misalignment = 0.7;
  std::size_t hidden_concepts = 8;
  std::size_t hidden_active = 2;
  std::size_t distractor_concepts = 8;
  std::optional<Confounder> confounder;
  double test_fraction = 0.3;
  bool instance_labels = false;  // labels from the noisy instance vector instead of the prototype
  std::uint64_t seed = 0;

  std::size_t latent() const noexcept { return c + hidden_concepts + distractor_concepts; }

  void validate() const {
    CBM_ALIGN_CHECK(k >= 1 && c >= 1 && samples_per_class >= 2 && d_joint >= 1 && d_patch >= 1,
                    ErrorKind::kInvalidArgument, "synth: dimensions and counts must be positive (2+ samples per class)");
    CBM_ALIGN_CHECK(active_per_class >= 1 && active_per_class <= c, ErrorKind::kInvalidArgument,
                    "synth: active_per_class must lie in [1, c]");
    CBM_ALIGN_CHECK(hidden_active <= hidden_concepts, ErrorKind::kInvalidArgument,
                    "synth: hidden_active exceeds hidden_concepts");
    CBM_ALIGN_CHECK(noise_sigma >= 0.0, ErrorKind::kInvalidArgument, "synth: noise_sigma must be >= 0");
    CBM_ALIGN_CHECK(misalignment >= 0.0 && misalignment <= 1.0, ErrorKind::kInvalidArgument,
                    "synth: misalignment must lie in [0, 1]");
    CBM_ALIGN_CHECK(test_fraction > 0.0 && test_fraction < 1.0, ErrorKind::kInvalidArgument,
                    "synth: test_fraction must lie in (0, 1)");
    CBM_ALIGN_CHECK(d_joint >= latent(), ErrorKind::kInfeasible,
                    "synth: d_joint " + std::to_string(d_joint) + " is smaller than the latent concept count " +
                        std::to_string(latent()));
    CBM_ALIGN_CHECK(d_patch >= c, ErrorKind::kInfeasible, "synth: d_patch must be >= c for a full-rank patch map");
    if (confounder) {
      CBM_ALIGN_CHECK(confounder->class_a != confounder->class_b && confounder->class_a < k && confounder->class_b < k,
                      ErrorKind::kInvalidArgument, "synth: confounder classes must be distinct and in range");
      CBM_ALIGN_CHECK(confounder->overlap >= 0.0 && confounder->overlap <= 1.0, ErrorKind::kInvalidArgument,
                      "synth: confounder overlap must lie in [0, 1]");
    }
  }
};

/// k=6, c=12, a=3, 20 samples per class, sigma=0.1.
inline SynthSpec default_benchmark(std::uint64_t seed = 0) {
  SynthSpec s;
  s.seed = seed;
  return s;
}

/// Default benchmark with classes 0 and 1 planted as a confounding pair.
inline SynthSpec confounder_benchmark(std::uint64_t seed = 0, double overlap = 0.9) {
  SynthSpec s = default_benchmark(seed);
  s.confounder = Confounder{0, 1, overlap};
  return s;
}

inline json to_json(const SynthSpec& s) {
  json j{{"k", s.k},
         {"c", s.c},
         {"samples_per_class", s.samples_per_class},
         {"d_joint", s.d_joint},
         {"d_patch", s.d_patch},
         {"active_per_class", s.active_per_class},
         {"noise_sigma", s.noise_sigma},
         {"misalignment", s.misalignment},
         {"hidden_concepts", s.hidden_concepts},
         {"hidden_active", s.hidden_active},
         {"distractor_concepts", s.distractor_concepts},
         {"test_fraction", s.test_fraction},
         {"instance_labels", s.instance_labels},
         {"seed", s.seed}};
  if (s.confounder) {
    j["confounder"] = {{"classes", {s.confounder->class_a, s.confounder->class_b}},
                       {"overlap", s.confounder->overlap}};
  } else {
    j["confounder"] = nullptr;
  }
  return j;
}

inline SynthSpec synth_spec_from_json(const json& j) {
  SynthSpec s;
  try {
    s.k = j.value("k", s.k);
    s.c = j.value("c", s.c);
    s.samples_per_class = j.value("samples_per_class", s.samples_per_class);
    s.d_joint = j.value("d_joint", s.d_joint);
    s.d_patch = j.value("d_patch", s.d_patch);
    s.active_per_class = j.value("active_per_class", s.active_per_class);
    s.noise_sigma = j.value("noise_sigma", s.noise_sigma);
    s.misalignment = j.value("misalignment", s.misalignment);
    s.hidden_concepts = j.value("hidden_concepts", s.hidden_concepts);
    s.hidden_active = j.value("hidden_active", s.hidden_active);
    s.distractor_concepts = j.value("distractor_concepts", s.distractor_concepts);
    s.test_fraction = j.value("test_fraction", s.test_fraction);
    s.instance_labels = j.value("instance_labels", s.instance_labels);
    s.seed = j.value("seed", s.seed);
    if (j.contains("confounder") && !j.at("confounder").is_null()) {
      const auto& cj = j.at("confounder");
      Confounder cf;
      auto classes = cj.at("classes").get<std::vector<std::uint32_t>>();
      CBM_ALIGN_CHECK(classes.size() == 2, ErrorKind::kFormat, "synth: confounder.classes must hold two ids");
      cf.class_a = classes[0];
      cf.class_b = classes[1];
      cf.overlap = cj.value("overlap", cf.overlap);
      s.confounder = cf;
    }
  } catch (const json::exception& e) {
    throw Error(ErrorKind::kFormat, std::string("synth spec: ") + e.what());
  }
  s.validate();
  return s;
}

struct PlantedTruth {
  Mat prototypes;         // k x c, binary
  Mat hidden_prototypes;  // k x hidden_concepts, binary
  Mat joint_map;          // latent x d_joint
  Mat patch_map;          // c x d_patch
  CandidateConcepts candidates;
  std::vector<std::string> candidate_roles;  // "hidden" or "distractor"
};

struct Generated {
  EmbeddingBundle bundle;
  PlantedTruth truth;
};

namespace detail {

inline constexpr int kMaxRetries = 1000;
inline constexpr double kMaxAbsCosine = 0.5;

inline std::vector<std::size_t> random_subset(std::size_t n, std::size_t count, Rng& rng) {
  std::vector<std::size_t> pool(n);
  for (std::size_t i = 0; i < n; ++i) pool[i] = i;
  for (std::size_t i = 0; i < count; ++i) std::swap(pool[i], pool[i + rng.index(n - i)]);
  pool.resize(count);
  std::sort(pool.begin(), pool.end());
  return pool;
}

inline bool row_equals_any(const Mat& m, std::size_t row, std::size_t upto) {
  for (std::size_t r = 0; r < upto; ++r) {
    if (r == row) continue;
    if (std::equal(m.row(r).begin(), m.row(r).end(), m.row(row).begin())) return true;
  }
  return false;
}

/// Binary k x width rows with `active` ones each, pairwise distinct except
/// rows in `allow_equal` (checked by caller).
inline void fill_distinct_rows(Mat& m, std::size_t row, std::size_t active, Rng& rng, const char* what) {
  for (int attempt = 0; attempt < kMaxRetries; ++attempt) {
    std::fill(m.row(row).begin(), m.row(row).end(), 0.0);
    for (std::size_t j : random_subset(m.cols(), active, rng)) m(row, j) = 1.0;
    if (!row_equals_any(m, row, row) || active == 0) return;
  }
  throw Error(ErrorKind::kInfeasible, std::string("synth: cannot draw distinct ") + what +
                                          " rows; increase the concept count or vary active counts");
}

inline Mat random_unit_rows(std::size_t rows, std::size_t dim, Rng& rng) {
  Mat out(rows, dim);
  for (std::size_t r = 0; r < rows; ++r) {
    bool accepted = false;
    for (int attempt = 0; attempt < kMaxRetries && !accepted; ++attempt) {
      double sq = 0.0;
      for (std::size_t j = 0; j < dim; ++j) {
        out(r, j) = rng.normal();
        sq += out(r, j) * out(r, j);
      }
      const double norm = std::sqrt(sq);
      for (std::size_t j = 0; j < dim; ++j) out(r, j) /= norm;
      accepted = true;
      for (std::size_t q = 0; q < r && accepted; ++q)
        if (std::abs(dot(out.row(r), out.row(q))) >= kMaxAbsCosine) accepted = false;
    }
    CBM_ALIGN_CHECK(accepted, ErrorKind::kInfeasible,
                    "synth: rejection sampling of text features failed; d_joint too small for the concept count");
  }
  return out;
}

/// Throws unless rows of `m` are linearly independent.
inline void require_full_row_rank(const Mat& m, const char* what) {
  try {
    solve(matmul_bt(m, m), Mat::identity(m.rows()), 1e-10);
  } catch (const Error&) {
    throw Error(ErrorKind::kNumeric, std::string("synth: ") + what + " is rank deficient");
  }
}

}  // namespace detail

inline Generated generate(const SynthSpec& spec) {
  spec.validate();
  Rng rng(spec.seed);
  const std::size_t k = spec.k, c = spec.c, a = spec.active_per_class;
  const std::size_t hidden = spec.hidden_concepts, latent = spec.latent();

  PlantedTruth truth;
  truth.prototypes = Mat(k, c);
  for (std::size_t y = 0; y < k; ++y) {
    if (spec.confounder && y == spec.confounder->class_b) continue;
    detail::fill_distinct_rows(truth.prototypes, y, a, rng, "prototype");
  }
  if (spec.confounder) {
    const std::size_t pa = spec.confounder->class_a, pb = spec.confounder->class_b;
    const auto shared = static_cast<std::size_t>(std::ceil(spec.confounder->overlap * static_cast<double>(a) - 1e-9));
    std::vector<std::size_t> on, off;
    for (std::size_t j = 0; j < c; ++j) (truth.prototypes(pa, j) > 0.5 ? on : off).push_back(j);
    CBM_ALIGN_CHECK(off.size() >= a - shared, ErrorKind::kInfeasible, "synth: not enough concepts for the confounder");
    for (std::size_t t : detail::random_subset(on.size(), shared, rng)) truth.prototypes(pb, on[t]) = 1.0;
    for (std::size_t t : detail::random_subset(off.size(), a - shared, rng)) truth.prototypes(pb, off[t]) = 1.0;
  }

  truth.hidden_prototypes = Mat(k, hidden);
  if (hidden > 0 && spec.hidden_active > 0) {
    for (std::size_t y = 0; y < k; ++y) detail::fill_distinct_rows(truth.hidden_prototypes, y, spec.hidden_active, rng, "hidden prototype");
  }

  Mat text = detail::random_unit_rows(latent, spec.d_joint, rng);
  detail::require_full_row_rank(text, "latent text basis");
  Mat dual = solve(matmul_bt(text, text), text, 1e-10);

  Mat mix = Mat::identity(latent);
  if (spec.misalignment > 0.0) {
    // Cross-talk stays inside the base block: base scores never see hidden
    // concepts, so the planted confounder cannot be undone from them.
    Mat cross = detail::random_unit_rows(c, c, rng);
    for (std::size_t i = 0; i < c; ++i)
      for (std::size_t j = 0; j < c; ++j)
        mix(i, j) = (1.0 - spec.misalignment) * (i == j ? 1.0 : 0.0) + spec.misalignment * cross(i, j);
    detail::require_full_row_rank(mix, "concept cross-talk mix");
  }
  truth.joint_map = matmul(mix, dual);

  truth.patch_map = Mat(c, spec.d_patch);
  for (double& w : truth.patch_map.data()) w = rng.normal();
  detail::require_full_row_rank(truth.patch_map, "patch map");

  EmbeddingBundle b;
  const std::size_t n = k * spec.samples_per_class;
  Manifest& m = b.manifest;
  m.n_samples = n;
  m.d_joint = spec.d_joint;
  m.d_patch = spec.d_patch;
  m.n_concepts = c;
  m.n_classes = k;
  for (std::size_t j = 0; j < c; ++j) m.concept_names.push_back("concept_" + std::to_string(j));
  for (std::size_t y = 0; y < k; ++y) m.class_names.push_back("class_" + std::to_string(y));
  m.has_concept_labels = true;
  m.split.assign(n, Split::kTrain);

  b.image_features = Mat32(n, spec.d_joint);
  b.patch_features = Mat32(n, spec.d_patch);
  b.text_features = Mat32(c, spec.d_joint);
  for (std::size_t j = 0; j < c; ++j)
    for (std::size_t d = 0; d < spec.d_joint; ++d) b.text_features(j, d) = static_cast<float>(text(j, d));
  b.class_labels.resize(n);
  b.concept_labels = Mat32(n, c);
  b.labeled_mask.assign(n, 0);

  std::vector<double> u(latent);
  for (std::size_t y = 0; y < k; ++y) {
    for (std::size_t s = 0; s < spec.samples_per_class; ++s) {
      const std::size_t i = y * spec.samples_per_class + s;
      for (std::size_t j = 0; j < latent; ++j) {
        double base = 0.0;
        if (j < c) base = truth.prototypes(y, j);
        else if (j < c + hidden) base = truth.hidden_prototypes(y, j - c);
        u[j] = base + spec.noise_sigma * rng.normal();
      }
      std::vector<double> img(spec.d_joint, 0.0);
      for (std::size_t j = 0; j < latent; ++j)
        for (std::size_t d = 0; d < spec.d_joint; ++d) img[d] += u[j] * truth.joint_map(j, d);
      const double norm = l2_norm(img);
      CBM_ALIGN_CHECK(norm > 0.0, ErrorKind::kNumeric, "synth: zero image feature");
      for (std::size_t d = 0; d < spec.d_joint; ++d) b.image_features(i, d) = static_cast<float>(img[d] / norm);
      for (std::size_t d = 0; d < spec.d_patch; ++d) {
        double v = 0.0;
        for (std::size_t j = 0; j < c; ++j) v += u[j] * truth.patch_map(j, d);
        b.patch_features(i, d) = static_cast<float>(v + spec.noise_sigma * rng.normal());
      }
      b.class_labels[i] = static_cast<std::uint32_t>(y);
      for (std::size_t j = 0; j < c; ++j) {
        const double label = spec.instance_labels ? (u[j] >= 0.5 ? 1.0 : 0.0) : truth.prototypes(y, j);
        (*b.concept_labels)(i, j) = static_cast<float>(label);
      }
    }
  }

  // Stratified split; every class keeps at least one sample on each side.
  for (std::size_t y = 0; y < k; ++y) {
    std::vector<std::size_t> members(spec.samples_per_class);
    for (std::size_t s = 0; s < members.size(); ++s) members[s] = y * spec.samples_per_class + s;
    rng.shuffle(members);
    auto n_test = static_cast<std::size_t>(std::llround(spec.test_fraction * static_cast<double>(members.size())));
    n_test = std::clamp<std::size_t>(n_test, 1, members.size() - 1);
    for (std::size_t t = 0; t < n_test; ++t) m.split[members[t]] = Split::kTest;
  }
  for (std::size_t i = 0; i < n; ++i) b.labeled_mask[i] = m.split[i] == Split::kTrain ? 1 : 0;

  truth.candidates.text_features = Mat32(latent - c, spec.d_joint);
  for (std::size_t j = c; j < latent; ++j) {
    for (std::size_t d = 0; d < spec.d_joint; ++d) truth.candidates.text_features(j - c, d) = static_cast<float>(text(j, d));
    const bool is_hidden = j < c + hidden;
    truth.candidates.names.push_back(is_hidden ? "hidden_" + std::to_string(j - c)
                                               : "distractor_" + std::to_string(j - c - hidden));
    truth.candidate_roles.push_back(is_hidden ? "hidden" : "distractor");
  }

  validate(b);
  return {std::move(b), std::move(truth)};
}

/// Concept accuracy with scores replaced by each sample's class prototype:
/// the ceiling for any model on these labels.
inline double oracle_concept_accuracy(const BundleView& view, const PlantedTruth& truth,
                                      metrics::ConceptMetric metric = metrics::ConceptMetric::kTopA) {
  const EmbeddingBundle& b = view.bundle();
  CBM_ALIGN_CHECK(truth.prototypes.rows() == b.k() && truth.prototypes.cols() == b.c(), ErrorKind::kShapeMismatch,
                  "oracle_concept_accuracy: truth does not match the bundle");
  Mat scores(view.size(), b.c());
  for (std::size_t i = 0; i < view.size(); ++i) {
    auto proto = truth.prototypes.row(view.label(i));
    std::copy(proto.begin(), proto.end(), scores.row(i).begin());
  }
  return metrics::concept_accuracy(scores, view.concept_labels(), metric);
}

inline json truth_to_json(const SynthSpec& spec, const PlantedTruth& truth) {
  auto rows = [](const Mat& m) {
    json out = json::array();
    for (std::size_t r = 0; r < m.rows(); ++r) {
      json row = json::array();
      for (double v : m.row(r)) row.push_back(static_cast<int>(v));
      out.push_back(row);
    }
    return out;
  };
  return json{{"spec", to_json(spec)},
              {"prototypes", rows(truth.prototypes)},
              {"hidden_prototypes", rows(truth.hidden_prototypes)},
              {"candidate_names", truth.candidates.names},
              {"candidate_roles", truth.candidate_roles}};
}

}  // namespace cbm_align::synth

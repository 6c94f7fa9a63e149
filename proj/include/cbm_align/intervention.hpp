#pragma once

// Class-level intervention:
//   1. rank confounding class pairs from the test error matrix;
//   2. pick the candidate concepts scoring highest on each confounding class;
//   3. append their raw alignment scores to the (frozen) enhanced scores;
//   4. train w_k together with an auxiliary head w_prime whose logits are
//      scattered into the confounding-class columns (zeros elsewhere).

#include <algorithm>
#include <cstdint>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cbm_align/candidates.hpp"
#include "cbm_align/concept_model.hpp"
#include "cbm_align/corpus.hpp"
#include "cbm_align/css_trainer.hpp"
#include "cbm_align/error.hpp"
#include "cbm_align/metrics.hpp"
#include "cbm_align/numerics.hpp"

namespace cbm_align::intervention {

struct ConfoundingPair {
  std::uint32_t class_a = 0;
  std::uint32_t class_b = 0;
  std::int64_t confusion_mass = 0;

  bool operator==(const ConfoundingPair&) const = default;
};

/// Greedy, class-disjoint top pairs. Symmetric ranking uses
/// counts[a][b] + counts[b][a]; directional ranking uses the larger of the two.
inline std::vector<ConfoundingPair> find_confounding_pairs(const metrics::ErrorMatrix& em, std::size_t n_pairs,
                                                           bool symmetric = true) {
  CBM_ALIGN_CHECK(n_pairs >= 1, ErrorKind::kInvalidArgument, "find_confounding_pairs: n_pairs must be >= 1");
  std::vector<ConfoundingPair> ranked;
  for (std::uint32_t a = 0; a < em.k(); ++a) {
    for (std::uint32_t b = a + 1; b < em.k(); ++b) {
      const std::int64_t mass = symmetric ? em.symmetric_mass(a, b) : std::max(em.counts[a][b], em.counts[b][a]);
      if (mass > 0) ranked.push_back({a, b, mass});
    }
  }
  CBM_ALIGN_CHECK(!ranked.empty(), ErrorKind::kInfeasible, "find_confounding_pairs: no confusions in the error matrix");
  std::stable_sort(ranked.begin(), ranked.end(), [](const ConfoundingPair& x, const ConfoundingPair& y) {
    if (x.confusion_mass != y.confusion_mass) return x.confusion_mass > y.confusion_mass;
    return std::tie(x.class_a, x.class_b) < std::tie(y.class_a, y.class_b);
  });
  std::vector<ConfoundingPair> out;
  std::set<std::uint32_t> used;
  for (const auto& p : ranked) {
    if (used.contains(p.class_a) || used.contains(p.class_b)) continue;
    out.push_back(p);
    used.insert(p.class_a);
    used.insert(p.class_b);
    if (out.size() == n_pairs) break;
  }
  CBM_ALIGN_CHECK(out.size() == n_pairs, ErrorKind::kInfeasible,
                  "find_confounding_pairs: only " + std::to_string(out.size()) + " disjoint confused pairs, " +
                      std::to_string(n_pairs) + " requested");
  return out;
}

/// Confounding classes in pair order: a0, b0, a1, b1, ...
inline std::vector<std::uint32_t> confounding_classes(const std::vector<ConfoundingPair>& pairs) {
  std::vector<std::uint32_t> out;
  for (const auto& p : pairs) {
    out.push_back(p.class_a);
    out.push_back(p.class_b);
  }
  return out;
}

/// Indices (ascending) of the selected candidates.
inline std::vector<std::size_t> expansion_indices(const BundleView& train, const std::vector<ConfoundingPair>& pairs,
                                                  const CandidateConcepts& candidates, std::size_t per_class) {
  CBM_ALIGN_CHECK(candidates.size() > 0, ErrorKind::kInvalidArgument, "select_expansion_concepts: no candidates");
  CBM_ALIGN_CHECK(per_class >= 1 && per_class <= candidates.size(), ErrorKind::kInvalidArgument,
                  "select_expansion_concepts: per_class must lie in [1, candidate count]");
  CBM_ALIGN_CHECK(candidates.text_features.cols() == train.bundle().manifest.d_joint, ErrorKind::kShapeMismatch,
                  "select_expansion_concepts: candidate width differs from d_joint");
  Mat scores = alignment_scores(train, candidates.text_features.cast<double>());
  std::set<std::size_t> chosen;
  for (std::uint32_t cls : confounding_classes(pairs)) {
    std::vector<double> mean(candidates.size(), 0.0);
    std::size_t count = 0;
    for (std::size_t i = 0; i < train.size(); ++i) {
      if (train.label(i) != cls) continue;
      for (std::size_t j = 0; j < mean.size(); ++j) mean[j] += scores(i, j);
      ++count;
    }
    CBM_ALIGN_CHECK(count > 0, ErrorKind::kInfeasible,
                    "select_expansion_concepts: confounding class " + std::to_string(cls) + " has no train samples");
    for (double& v : mean) v /= static_cast<double>(count);
    for (std::size_t j : metrics::top_indices(mean, per_class)) chosen.insert(j);
  }
  return {chosen.begin(), chosen.end()};
}

inline CandidateConcepts select_expansion_concepts(const BundleView& train, const std::vector<ConfoundingPair>& pairs,
                                                   const CandidateConcepts& candidates, std::size_t per_class) {
  return candidates.subset(expansion_indices(train, pairs, candidates, per_class));
}

/// Raw alignment scores of the selected concepts (no projection layer).
inline Mat new_concept_scores(const BundleView& view, const ConceptModel& model, const CandidateConcepts& selected) {
  if (selected.size() == 0) return Mat(view.size(), 0);
  CBM_ALIGN_CHECK(selected.text_features.cols() == view.bundle().manifest.d_joint, ErrorKind::kShapeMismatch,
                  "expanded_scores: candidate width differs from d_joint");
  return alignment_scores(view, selected.text_features.cast<double>(), model.raw_scale);
}

/// [enhanced base scores | raw scores of the selected concepts], width c + c'.
inline Mat expanded_scores(const BundleView& view, const ConceptModel& model, const CandidateConcepts& selected) {
  return hconcat(enhanced_scores(view, model), new_concept_scores(view, model, selected));
}

struct InterventionHead {
  Mat w_prime;                                  // c' x (2 * n_pairs)
  std::vector<std::uint32_t> confounding_class_ids;
};

/// base_scores . w_k with new_scores . w_prime added into the confounding columns.
inline Mat intervention_logits(const Mat& base_scores, const Mat& new_scores, const ConceptModel& model,
                               const InterventionHead& head) {
  CBM_ALIGN_CHECK(head.w_prime.cols() == head.confounding_class_ids.size(), ErrorKind::kShapeMismatch,
                  "intervention head: column count differs from confounding class count");
  Mat logits = class_logits(base_scores, model);
  if (head.w_prime.rows() == 0) return logits;
  Mat aux = matmul(new_scores, head.w_prime);
  for (std::size_t i = 0; i < logits.rows(); ++i)
    for (std::size_t t = 0; t < head.confounding_class_ids.size(); ++t) logits(i, head.confounding_class_ids[t]) += aux(i, t);
  return logits;
}

struct InterventionConfig {
  std::size_t n_pairs = 1;
  std::size_t per_class = 32;
  bool symmetric_ranking = true;
  std::size_t epochs = 20;
  std::size_t batch_size = 16;
  AdamConfig adam{1e-2, 0.9, 0.999, 1e-8};
  std::uint64_t seed = 0;
};

inline json to_json(const InterventionConfig& c) {
  return json{{"n_pairs", c.n_pairs},   {"per_class", c.per_class}, {"symmetric_ranking", c.symmetric_ranking},
              {"epochs", c.epochs},     {"batch_size", c.batch_size}, {"lr", c.adam.lr},
              {"beta1", c.adam.beta1},  {"beta2", c.adam.beta2},   {"adam_eps", c.adam.eps},
              {"seed", c.seed}};
}

inline InterventionConfig intervention_config_from_json(const json& j) {
  InterventionConfig c;
  try {
    c.n_pairs = j.value("n_pairs", c.n_pairs);
    c.per_class = j.value("per_class", c.per_class);
    c.symmetric_ranking = j.value("symmetric_ranking", c.symmetric_ranking);
    c.epochs = j.value("epochs", c.epochs);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.adam.lr = j.value("lr", c.adam.lr);
    c.adam.beta1 = j.value("beta1", c.adam.beta1);
    c.adam.beta2 = j.value("beta2", c.adam.beta2);
    c.adam.eps = j.value("adam_eps", c.adam.eps);
    c.seed = j.value("seed", c.seed);
  } catch (const json::exception& e) {
    throw Error(ErrorKind::kFormat, std::string("intervention config: ") + e.what());
  }
  CBM_ALIGN_CHECK(c.n_pairs >= 1 && c.per_class >= 1 && c.batch_size >= 1 && c.adam.lr > 0.0,
                  ErrorKind::kInvalidArgument, "intervention config: counts and lr must be positive");
  return c;
}

struct ClassErrors {
  std::uint32_t class_id = 0;
  std::int64_t test_count = 0;
  std::int64_t errors_before = 0;
  std::int64_t errors_after = 0;
};

struct DirectedConfusion {
  std::uint32_t from = 0;
  std::uint32_t to = 0;
  std::int64_t before = 0;
  std::int64_t after = 0;
};

struct InterventionReport {
  std::vector<ConfoundingPair> pairs;
  std::vector<ClassErrors> classes;
  std::vector<DirectedConfusion> confusions;
  double accuracy_before = 0.0;
  double accuracy_after = 0.0;
  std::vector<std::string> selected_concepts;
  metrics::ErrorMatrix before;
  metrics::ErrorMatrix after;
};

inline json to_json(const InterventionReport& r, const std::vector<std::string>& class_names) {
  auto name = [&](std::uint32_t id) { return id < class_names.size() ? class_names[id] : std::to_string(id); };
  json pairs = json::array();
  for (const auto& p : r.pairs)
    pairs.push_back({{"class_a", p.class_a}, {"class_b", p.class_b}, {"confusion_mass", p.confusion_mass}});
  json classes = json::array();
  for (const auto& c : r.classes)
    classes.push_back({{"class_id", c.class_id}, {"class_name", name(c.class_id)}, {"test_count", c.test_count},
                       {"total_error_before", c.errors_before}, {"total_error_after", c.errors_after}});
  json conf = json::array();
  for (const auto& c : r.confusions)
    conf.push_back({{"from", c.from}, {"to", c.to}, {"label", name(c.from) + " misclassified as " + name(c.to)},
                    {"before", c.before}, {"after", c.after}});
  return json{{"confounding_pairs", pairs},
              {"classes", classes},
              {"confusions", conf},
              {"classification_accuracy_before", r.accuracy_before},
              {"classification_accuracy_after", r.accuracy_after},
              {"selected_concepts", r.selected_concepts},
              {"error_matrix_before", r.before.counts},
              {"error_matrix_after", r.after.counts}};
}

struct InterventionResult {
  ConceptModel model;
  InterventionHead head;
  InterventionReport report;
};

/// Retrains w_k (from its trained value) and w_prime (from zero) with
/// cross-entropy on the train split; w_cp stays frozen. Reports on the test split.
inline InterventionResult intervene_and_retrain(const EmbeddingBundle& bundle, const ConceptModel& model,
                                                const std::vector<ConfoundingPair>& pairs,
                                                const CandidateConcepts& selected, const InterventionConfig& config) {
  check_compatible(model, bundle);
  CBM_ALIGN_CHECK(!pairs.empty(), ErrorKind::kInvalidArgument, "intervene: no confounding pairs");
  SplitViews views = split_views(bundle);
  const auto conf_classes = confounding_classes(pairs);
  for (std::uint32_t cls : conf_classes) {
    bool present = false;
    for (std::size_t i = 0; i < views.train.size() && !present; ++i) present = views.train.label(i) == cls;
    CBM_ALIGN_CHECK(present, ErrorKind::kInfeasible,
                    "intervene: confounding class " + std::to_string(cls) + " has no train samples");
  }

  InterventionResult result{model, {Mat(selected.size(), conf_classes.size()), conf_classes}, {}};
  const Mat train_base = enhanced_scores(views.train, model);
  const Mat train_new = new_concept_scores(views.train, model, selected);
  const Mat test_base = enhanced_scores(views.test, model);
  const Mat test_new = new_concept_scores(views.test, model, selected);
  const auto train_labels = views.train.labels();
  const auto test_labels = views.test.labels();

  Mat logits_before = intervention_logits(test_base, test_new, result.model, result.head);

  AdamState k_state = AdamState::for_param(result.model.w_k, config.adam);
  AdamState head_state = AdamState::for_param(result.head.w_prime, config.adam);
  Rng rng(sampler_seed(config.seed) ^ 0xA5A5A5A5A5A5A5A5ull);
  std::vector<std::size_t> order(views.train.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    rng.shuffle(order);
    for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
      const std::size_t end = std::min(order.size(), start + config.batch_size);
      std::vector<std::size_t> rows(order.begin() + static_cast<std::ptrdiff_t>(start),
                                    order.begin() + static_cast<std::ptrdiff_t>(end));
      Mat base = gather_rows(train_base, rows);
      Mat extra = gather_rows(train_new, rows);
      std::vector<std::uint32_t> labels;
      for (std::size_t r : rows) labels.push_back(train_labels[r]);
      LossGrad ce = ce_loss(intervention_logits(base, extra, result.model, result.head), labels);
      Mat grad_k = matmul_at(base, ce.grad);
      Mat d_aux(rows.size(), conf_classes.size());
      for (std::size_t i = 0; i < rows.size(); ++i)
        for (std::size_t t = 0; t < conf_classes.size(); ++t) d_aux(i, t) = ce.grad(i, conf_classes[t]);
      Mat grad_head = matmul_at(extra, d_aux);
      std::tie(result.model.w_k, k_state) = adam_step(std::move(result.model.w_k), grad_k, std::move(k_state));
      if (result.head.w_prime.rows() > 0)
        std::tie(result.head.w_prime, head_state) =
            adam_step(std::move(result.head.w_prime), grad_head, std::move(head_state));
    }
  }

  Mat logits_after = intervention_logits(test_base, test_new, result.model, result.head);
  InterventionReport& rep = result.report;
  rep.pairs = pairs;
  rep.accuracy_before = metrics::classification_accuracy(logits_before, test_labels);
  rep.accuracy_after = metrics::classification_accuracy(logits_after, test_labels);
  rep.before = metrics::error_matrix(logits_before, test_labels, bundle.k());
  rep.after = metrics::error_matrix(logits_after, test_labels, bundle.k());
  rep.selected_concepts = selected.names;
  for (std::uint32_t cls : conf_classes)
    rep.classes.push_back({cls, rep.before.row_total(cls), rep.before.errors_of(cls), rep.after.errors_of(cls)});
  for (const auto& p : pairs) {
    rep.confusions.push_back({p.class_a, p.class_b, rep.before.counts[p.class_a][p.class_b], rep.after.counts[p.class_a][p.class_b]});
    rep.confusions.push_back({p.class_b, p.class_a, rep.before.counts[p.class_b][p.class_a], rep.after.counts[p.class_b][p.class_a]});
  }
  return result;
}

inline void save_head(const InterventionHead& head, const CandidateConcepts& selected, const fs::path& dir) {
  io::ensure_dir(dir);
  json j{{"version", 1},
         {"n_new_concepts", head.w_prime.rows()},
         {"confounding_class_ids", head.confounding_class_ids},
         {"new_concepts", selected.names}};
  io::write_atomic(dir / "head.json", j.dump(2) + "\n");
  io::write_blob<double>(dir / "w_prime.f64", head.w_prime.data());
  save_candidates(selected, dir / "selected_concepts");
}

}  // namespace cbm_align::intervention

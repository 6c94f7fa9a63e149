#pragma once

// Contrastive semi-supervised (CSS) training of the concept projection and
// class head:
//
//   L = L_contrastive + L_ce + L_concept
//
// Batches hold n same-class pairs (2n images, rows 2p and 2p+1 form pair p),
// every pair from a different class. Gradients are analytic; see the
// finite-difference tests for the cross-check.

#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cbm_align/concept_model.hpp"
#include "cbm_align/corpus.hpp"
#include "cbm_align/error.hpp"
#include "cbm_align/io.hpp"
#include "cbm_align/metrics.hpp"
#include "cbm_align/numerics.hpp"

namespace cbm_align {

struct LossToggles {
  bool contrastive = true;
  bool ce = true;
  bool concept_sup = true;
};

struct TrainConfig {
  double tau = 0.1;
  double gamma = 100.0;
  std::size_t pairs_per_batch = 0;  // 0: min(32, eligible classes)
  std::size_t epochs = 100;
  AdamConfig adam;
  std::uint64_t seed = 0;
  LossToggles losses;
  bool symmetric_anchors = false;
  bool train_projection = true;  // false: w_cp frozen (linear probe on scores)
  double raw_scale = 1.0;
  metrics::ConceptMetric concept_metric = metrics::ConceptMetric::kTopA;

  void validate() const {
    CBM_ALIGN_CHECK(tau > 0.0, ErrorKind::kInvalidArgument, "train config: tau must be positive");
    CBM_ALIGN_CHECK(gamma > 0.0, ErrorKind::kInvalidArgument, "train config: gamma must be positive");
    CBM_ALIGN_CHECK(adam.lr > 0.0 && adam.eps > 0.0 && adam.beta1 >= 0.0 && adam.beta1 < 1.0 &&
                        adam.beta2 >= 0.0 && adam.beta2 < 1.0,
                    ErrorKind::kInvalidArgument, "train config: Adam hyperparameters out of range");
    CBM_ALIGN_CHECK(raw_scale > 0.0, ErrorKind::kInvalidArgument, "train config: raw_scale must be positive");
  }
};

inline json to_json(const TrainConfig& c) {
  return json{{"tau", c.tau},
              {"gamma", c.gamma},
              {"pairs_per_batch", c.pairs_per_batch},
              {"epochs", c.epochs},
              {"lr", c.adam.lr},
              {"beta1", c.adam.beta1},
              {"beta2", c.adam.beta2},
              {"adam_eps", c.adam.eps},
              {"seed", c.seed},
              {"losses", {{"contrastive", c.losses.contrastive}, {"ce", c.losses.ce}, {"concept", c.losses.concept_sup}}},
              {"symmetric_anchors", c.symmetric_anchors},
              {"train_projection", c.train_projection},
              {"raw_scale", c.raw_scale},
              {"concept_metric", metrics::to_string(c.concept_metric)}};
}

/// Missing keys keep their defaults.
inline TrainConfig train_config_from_json(const json& j) {
  TrainConfig c;
  try {
    c.tau = j.value("tau", c.tau);
    c.gamma = j.value("gamma", c.gamma);
    c.pairs_per_batch = j.value("pairs_per_batch", c.pairs_per_batch);
    c.epochs = j.value("epochs", c.epochs);
    c.adam.lr = j.value("lr", c.adam.lr);
    c.adam.beta1 = j.value("beta1", c.adam.beta1);
    c.adam.beta2 = j.value("beta2", c.adam.beta2);
    c.adam.eps = j.value("adam_eps", c.adam.eps);
    c.seed = j.value("seed", c.seed);
    if (j.contains("losses")) {
      const auto& l = j.at("losses");
      c.losses.contrastive = l.value("contrastive", c.losses.contrastive);
      c.losses.ce = l.value("ce", c.losses.ce);
      c.losses.concept_sup = l.value("concept", c.losses.concept_sup);
    }
    c.symmetric_anchors = j.value("symmetric_anchors", c.symmetric_anchors);
    c.train_projection = j.value("train_projection", c.train_projection);
    c.raw_scale = j.value("raw_scale", c.raw_scale);
    if (j.contains("concept_metric"))
      c.concept_metric = metrics::concept_metric_from_string(j.at("concept_metric").get<std::string>());
  } catch (const json::exception& e) {
    throw Error(ErrorKind::kFormat, std::string("train config: ") + e.what());
  }
  c.validate();
  return c;
}

struct PairBatch {
  std::vector<std::size_t> indices;          // 2n bundle indices; 2p, 2p+1 are pair p
  std::vector<std::uint32_t> class_of_pair;  // n distinct classes
  std::vector<std::uint8_t> supervised;      // 2n flags from the labeled mask

  std::size_t n_pairs() const noexcept { return class_of_pair.size(); }
};

/// Draws pair batches from a fixed train view.
class PairSampler {
 public:
  explicit PairSampler(const BundleView& train) : bundle_(&train.bundle()) {
    auto groups = indices_by_class(train);
    for (std::uint32_t cls = 0; cls < groups.size(); ++cls) {
      if (groups[cls].size() >= 2) {
        eligible_.push_back(cls);
        members_.push_back(std::move(groups[cls]));
      }
    }
  }

  std::size_t eligible_classes() const noexcept { return eligible_.size(); }

  PairBatch sample(std::size_t n_pairs, Rng& rng) const {
    CBM_ALIGN_CHECK(n_pairs >= 1, ErrorKind::kInvalidArgument, "sample_pair_batch: need at least one pair");
    CBM_ALIGN_CHECK(n_pairs <= eligible_.size(), ErrorKind::kInfeasible,
                    "sample_pair_batch: " + std::to_string(n_pairs) + " pairs requested but only " +
                        std::to_string(eligible_.size()) + " classes have two or more train samples");
    std::vector<std::size_t> order(eligible_.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    // Partial Fisher-Yates: the first n_pairs slots are a uniform draw without replacement.
    for (std::size_t i = 0; i < n_pairs; ++i) std::swap(order[i], order[i + rng.index(order.size() - i)]);
    PairBatch batch;
    for (std::size_t p = 0; p < n_pairs; ++p) {
      const auto& members = members_[order[p]];
      std::size_t first = rng.index(members.size());
      std::size_t second = rng.index(members.size() - 1);
      if (second >= first) ++second;
      batch.indices.push_back(members[first]);
      batch.indices.push_back(members[second]);
      batch.class_of_pair.push_back(eligible_[order[p]]);
    }
    for (std::size_t idx : batch.indices) batch.supervised.push_back(bundle_->labeled_mask[idx]);
    return batch;
  }

 private:
  const EmbeddingBundle* bundle_;
  std::vector<std::uint32_t> eligible_;
  std::vector<std::vector<std::size_t>> members_;
};

inline PairBatch sample_pair_batch(const BundleView& train, std::size_t n_pairs, Rng& rng) {
  return PairSampler(train).sample(n_pairs, rng);
}

struct LossGrad {
  double value = 0.0;
  Mat grad;  // same shape as the loss input
};

/// Normalized-temperature contrastive loss over concept-score rows. The
/// denominator runs over every row except the anchor (the positive included).
inline LossGrad contrastive_loss(const Mat& scores, double tau, bool symmetric_anchors = false) {
  CBM_ALIGN_CHECK(scores.rows() >= 2 && scores.rows() % 2 == 0, ErrorKind::kShapeMismatch,
                  "contrastive_loss: expected 2n rows arranged as pairs");
  const std::size_t rows = scores.rows();
  const std::size_t cols = scores.cols();
  std::vector<double> norms(rows);
  Mat unit(rows, cols);
  for (std::size_t r = 0; r < rows; ++r) {
    norms[r] = l2_norm(scores.row(r));
    CBM_ALIGN_CHECK(norms[r] > 0.0, ErrorKind::kNumeric,
                    "contrastive_loss: concept-score row " + std::to_string(r) + " has zero norm");
    for (std::size_t j = 0; j < cols; ++j) unit(r, j) = scores(r, j) / norms[r];
  }
  Mat sim(rows, rows);
  for (std::size_t a = 0; a < rows; ++a)
    for (std::size_t b = 0; b < rows; ++b) sim(a, b) = dot(unit.row(a), unit.row(b));

  std::vector<std::pair<std::size_t, std::size_t>> anchors;
  for (std::size_t p = 0; p < rows / 2; ++p) {
    anchors.emplace_back(2 * p, 2 * p + 1);
    if (symmetric_anchors) anchors.emplace_back(2 * p + 1, 2 * p);
  }
  const double weight = 1.0 / static_cast<double>(anchors.size());

  LossGrad out{0.0, Mat(rows, cols)};
  // dL/dsim(a, m), accumulated before chaining through the cosine.
  Mat dsim(rows, rows);
  std::vector<double> logits;
  for (auto [a, pos] : anchors) {
    logits.clear();
    std::vector<std::size_t> others;
    for (std::size_t m = 0; m < rows; ++m) {
      if (m == a) continue;
      others.push_back(m);
      logits.push_back(sim(a, m) / tau);
    }
    const double lse = log_sum_exp(logits);
    out.value += weight * (lse - sim(a, pos) / tau);
    for (std::size_t t = 0; t < others.size(); ++t) {
      const double p = std::exp(logits[t] - lse);
      dsim(a, others[t]) += weight * (p - (others[t] == pos ? 1.0 : 0.0)) / tau;
    }
  }
  for (std::size_t a = 0; a < rows; ++a) {
    for (std::size_t m = 0; m < rows; ++m) {
      const double g = dsim(a, m);
      if (g == 0.0) continue;
      const double s = sim(a, m);
      for (std::size_t j = 0; j < cols; ++j) {
        out.grad(a, j) += g * (unit(m, j) - s * unit(a, j)) / norms[a];
        out.grad(m, j) += g * (unit(a, j) - s * unit(m, j)) / norms[m];
      }
    }
  }
  return out;
}

/// Mean softmax cross-entropy over all rows.
inline LossGrad ce_loss(const Mat& logits, const std::vector<std::uint32_t>& labels) {
  CBM_ALIGN_CHECK(logits.rows() == labels.size() && logits.rows() > 0, ErrorKind::kShapeMismatch,
                  "ce_loss: row/label count mismatch");
  const double inv_n = 1.0 / static_cast<double>(logits.rows());
  LossGrad out{0.0, Mat(logits.rows(), logits.cols())};
  for (std::size_t r = 0; r < logits.rows(); ++r) {
    CBM_ALIGN_CHECK(labels[r] < logits.cols(), ErrorKind::kInvalidArgument,
                    "ce_loss: label " + std::to_string(labels[r]) + " out of range at row " + std::to_string(r));
    auto row = logits.row(r);
    out.value += (log_sum_exp(row) - row[labels[r]]) * inv_n;
    auto p = softmax(row);
    for (std::size_t j = 0; j < p.size(); ++j) out.grad(r, j) = (p[j] - (j == labels[r] ? 1.0 : 0.0)) * inv_n;
  }
  return out;
}

/// Per supervised row l: mean_j |gamma * (softmax(C_l) - softmax(G_l))_j|;
/// the sum is divided by the full row count 2n. Unsupervised rows add
/// nothing and receive zero gradient.
inline LossGrad concept_loss(const Mat& scores, const Mat& concept_labels, const std::vector<std::uint8_t>& supervised,
                             double gamma) {
  CBM_ALIGN_CHECK(scores.same_shape(concept_labels) && supervised.size() == scores.rows(),
                  ErrorKind::kShapeMismatch, "concept_loss: shapes disagree");
  CBM_ALIGN_CHECK(gamma > 0.0, ErrorKind::kInvalidArgument, "concept_loss: gamma must be positive");
  const double inv_rows = 1.0 / static_cast<double>(scores.rows());
  const double inv_c = 1.0 / static_cast<double>(scores.cols());
  LossGrad out{0.0, Mat(scores.rows(), scores.cols())};
  for (std::size_t r = 0; r < scores.rows(); ++r) {
    if (!supervised[r]) continue;
    auto ps = softmax(scores.row(r));
    auto pg = softmax(concept_labels.row(r));
    double row_loss = 0.0;
    std::vector<double> g(ps.size());
    for (std::size_t j = 0; j < ps.size(); ++j) {
      const double d = gamma * (ps[j] - pg[j]);
      row_loss += std::abs(d);
      g[j] = d > 0.0 ? gamma : (d < 0.0 ? -gamma : 0.0);
    }
    out.value += row_loss * inv_c * inv_rows;
    // Softmax Jacobian-vector product: p * (g - <p, g>).
    double pg_dot = 0.0;
    for (std::size_t j = 0; j < ps.size(); ++j) pg_dot += ps[j] * g[j];
    for (std::size_t j = 0; j < ps.size(); ++j) out.grad(r, j) = ps[j] * (g[j] - pg_dot) * inv_c * inv_rows;
  }
  return out;
}

struct LossBreakdown {
  double l_contrastive = 0.0;
  double l_ce = 0.0;
  double l_concept = 0.0;
  double l_total = 0.0;
  Mat grad_w_cp;
  Mat grad_w_k;
};

/// Everything the loss needs for one batch, independent of where the rows came from.
struct BatchInputs {
  Mat raw;        // 2n x c, already scaled
  Mat ln_patch;   // 2n x d_patch
  std::vector<std::uint32_t> labels;
  Mat concept_labels;  // 2n x c; rows of unsupervised samples are ignored
  std::vector<std::uint8_t> supervised;
};

inline BatchInputs batch_inputs(const EmbeddingBundle& bundle, const PairBatch& batch, double raw_scale) {
  BundleView view(bundle, batch.indices);
  BatchInputs in;
  in.raw = raw_scores(view, raw_scale);
  in.ln_patch = layer_norm_rows(view.patch_features());
  in.labels = view.labels();
  in.supervised = batch.supervised;
  in.concept_labels = bundle.concept_labels ? view.concept_labels() : Mat(batch.indices.size(), bundle.c());
  if (!bundle.concept_labels) std::fill(in.supervised.begin(), in.supervised.end(), 0);
  return in;
}

inline LossBreakdown loss_and_grads(const BatchInputs& in, const ConceptModel& model, const TrainConfig& config) {
  Mat scores = matmul(in.ln_patch, model.w_cp);
  for (std::size_t i = 0; i < scores.size(); ++i) scores.data()[i] += in.raw.data()[i];
  Mat logits = matmul(scores, model.w_k);

  LossBreakdown out;
  Mat d_scores(scores.rows(), scores.cols());
  Mat d_logits(logits.rows(), logits.cols());
  if (config.losses.contrastive) {
    LossGrad lg = contrastive_loss(scores, config.tau, config.symmetric_anchors);
    out.l_contrastive = lg.value;
    for (std::size_t i = 0; i < d_scores.size(); ++i) d_scores.data()[i] += lg.grad.data()[i];
  }
  if (config.losses.ce) {
    LossGrad lg = ce_loss(logits, in.labels);
    out.l_ce = lg.value;
    d_logits = std::move(lg.grad);
  }
  if (config.losses.concept_sup) {
    LossGrad lg = concept_loss(scores, in.concept_labels, in.supervised, config.gamma);
    out.l_concept = lg.value;
    for (std::size_t i = 0; i < d_scores.size(); ++i) d_scores.data()[i] += lg.grad.data()[i];
  }
  out.l_total = out.l_contrastive + out.l_ce + out.l_concept;

  out.grad_w_k = matmul_at(scores, d_logits);
  Mat through_head = matmul_bt(d_logits, model.w_k);
  for (std::size_t i = 0; i < d_scores.size(); ++i) d_scores.data()[i] += through_head.data()[i];
  out.grad_w_cp = config.train_projection ? matmul_at(in.ln_patch, d_scores)
                                          : Mat(model.w_cp.rows(), model.w_cp.cols());
  return out;
}

inline LossBreakdown total_loss_and_grads(const EmbeddingBundle& bundle, const ConceptModel& model,
                                          const PairBatch& batch, const TrainConfig& config) {
  check_compatible(model, bundle);
  return loss_and_grads(batch_inputs(bundle, batch, model.raw_scale), model, config);
}

struct EpochRecord {
  std::size_t epoch = 0;
  double l_contrastive = 0.0;
  double l_ce = 0.0;
  double l_concept = 0.0;
  double l_total = 0.0;
  double train_accuracy = 0.0;
  double test_accuracy = 0.0;
  std::optional<double> concept_accuracy;  // test split
};

struct TrainReport {
  std::vector<EpochRecord> epochs;
  double wall_clock_seconds = 0.0;
  std::string final_model_path;
};

struct TrainResult {
  ConceptModel model;
  TrainReport report;
};

struct SplitEval {
  double train_accuracy = 0.0;
  double test_accuracy = 0.0;
  std::optional<double> concept_accuracy;
};

inline SplitEval evaluate_splits(const SplitViews& views, const ConceptModel& model,
                                 metrics::ConceptMetric metric = metrics::ConceptMetric::kTopA) {
  SplitEval e;
  Mat train_scores = enhanced_scores(views.train, model);
  e.train_accuracy = metrics::classification_accuracy(class_logits(train_scores, model), views.train.labels());
  Mat test_scores = enhanced_scores(views.test, model);
  e.test_accuracy = metrics::classification_accuracy(class_logits(test_scores, model), views.test.labels());
  if (views.test.bundle().concept_labels) {
    e.concept_accuracy = metrics::concept_accuracy(test_scores, views.test.concept_labels(), metric);
  }
  return e;
}

inline std::size_t resolve_pairs_per_batch(const TrainConfig& config, std::size_t eligible) {
  const std::size_t n = config.pairs_per_batch == 0 ? std::min<std::size_t>(32, eligible) : config.pairs_per_batch;
  CBM_ALIGN_CHECK(n >= 1 && n <= eligible, ErrorKind::kInfeasible,
                  "train: pairs_per_batch " + std::to_string(n) + " infeasible with " + std::to_string(eligible) +
                      " classes holding two or more train samples");
  return n;
}

/// Stream for batch sampling, distinct from the init stream of the same seed.
inline std::uint64_t sampler_seed(std::uint64_t seed) { return seed * 0x9E3779B97F4A7C15ull + 0x632BE59BD9B4E019ull; }

inline TrainResult train(const EmbeddingBundle& bundle, const TrainConfig& config) {
  config.validate();
  const auto started = std::chrono::steady_clock::now();
  SplitViews views = split_views(bundle);
  PairSampler sampler(views.train);
  const std::size_t n_pairs = resolve_pairs_per_batch(config, sampler.eligible_classes());
  if (config.losses.concept_sup) {
    bool any = false;
    for (std::size_t idx : views.train.indices()) any = any || bundle.labeled(idx);
    CBM_ALIGN_CHECK(any, ErrorKind::kInfeasible,
                    "train: concept loss enabled but no train sample carries a concept label");
  }

  TrainResult result{init_model(bundle.manifest.d_patch, bundle.c(), bundle.k(), config.seed, config.raw_scale), {}};
  ConceptModel& model = result.model;
  AdamState cp_state = AdamState::for_param(model.w_cp, config.adam);
  AdamState k_state = AdamState::for_param(model.w_k, config.adam);
  Rng rng(sampler_seed(config.seed));
  const std::size_t batches = (views.train.size() + 2 * n_pairs - 1) / (2 * n_pairs);

  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    EpochRecord rec;
    rec.epoch = epoch;
    for (std::size_t b = 0; b < batches; ++b) {
      PairBatch batch = sampler.sample(n_pairs, rng);
      LossBreakdown lb = loss_and_grads(batch_inputs(bundle, batch, model.raw_scale), model, config);
      rec.l_contrastive += lb.l_contrastive / static_cast<double>(batches);
      rec.l_ce += lb.l_ce / static_cast<double>(batches);
      rec.l_concept += lb.l_concept / static_cast<double>(batches);
      if (config.train_projection) std::tie(model.w_cp, cp_state) = adam_step(std::move(model.w_cp), lb.grad_w_cp, std::move(cp_state));
      std::tie(model.w_k, k_state) = adam_step(std::move(model.w_k), lb.grad_w_k, std::move(k_state));
    }
    rec.l_total = rec.l_contrastive + rec.l_ce + rec.l_concept;
    SplitEval e = evaluate_splits(views, model, config.concept_metric);
    rec.train_accuracy = e.train_accuracy;
    rec.test_accuracy = e.test_accuracy;
    rec.concept_accuracy = e.concept_accuracy;
    result.report.epochs.push_back(rec);
  }
  CBM_ALIGN_CHECK(all_finite(model.w_cp) && all_finite(model.w_k), ErrorKind::kNumeric,
                  "train: parameters diverged to non-finite values");
  result.report.wall_clock_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  return result;
}

inline constexpr const char* kTrainCsvHeader = "epoch,l_contrastive,l_ce,l_concept,train_acc,test_acc,concept_acc";

/// JSON and CSV forms. Wall-clock time is left out so repeated runs
/// produce identical files; callers persist it separately.
inline void write_train_report(const TrainReport& report, const TrainConfig& config, const fs::path& dir) {
  io::ensure_dir(dir);
  json epochs = json::array();
  std::ostringstream csv;
  csv << kTrainCsvHeader << "\n";
  for (const auto& e : report.epochs) {
    epochs.push_back({{"epoch", e.epoch},
                      {"l_contrastive", e.l_contrastive},
                      {"l_ce", e.l_ce},
                      {"l_concept", e.l_concept},
                      {"l_total", e.l_total},
                      {"train_accuracy", e.train_accuracy},
                      {"test_accuracy", e.test_accuracy},
                      {"concept_accuracy", metrics::optional_number(e.concept_accuracy)}});
    csv << e.epoch << "," << metrics::format_number(e.l_contrastive) << "," << metrics::format_number(e.l_ce) << ","
        << metrics::format_number(e.l_concept) << "," << metrics::format_number(e.train_accuracy) << ","
        << metrics::format_number(e.test_accuracy) << ","
        << (e.concept_accuracy ? metrics::format_number(*e.concept_accuracy) : "") << "\n";
  }
  json j{{"config", to_json(config)}, {"epochs", epochs}, {"final_model_path", report.final_model_path}};
  io::write_atomic(dir / "train_report.json", j.dump(2) + "\n");
  io::write_atomic(dir / "train_report.csv", csv.str());
}

}  // namespace cbm_align

#pragma once

// Classification / concept accuracy, error matrices, and the distributional
// metrics (truthfulness, sparseness, discriminability).

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cbm_align/error.hpp"
#include "cbm_align/io.hpp"
#include "cbm_align/numerics.hpp"

namespace cbm_align::metrics {

namespace fs = std::filesystem;
using json = nlohmann::json;

enum class ConceptMetric { kTopA, kThresholded };

inline const char* to_string(ConceptMetric m) {
  return m == ConceptMetric::kTopA ? "top_a" : "thresholded";
}

inline ConceptMetric concept_metric_from_string(const std::string& s) {
  if (s == "top_a") return ConceptMetric::kTopA;
  if (s == "thresholded") return ConceptMetric::kThresholded;
  throw Error(ErrorKind::kInvalidArgument, "unknown concept metric '" + s + "' (expected top_a or thresholded)");
}

/// Row normalization applied before the distributional metrics.
enum class Normalization { kSoftmax, kNone };

inline const char* to_string(Normalization n) { return n == Normalization::kSoftmax ? "softmax" : "none"; }

inline Normalization normalization_from_string(const std::string& s) {
  if (s == "softmax") return Normalization::kSoftmax;
  if (s == "none") return Normalization::kNone;
  throw Error(ErrorKind::kInvalidArgument, "unknown normalization '" + s + "' (expected softmax or none)");
}

inline std::vector<std::size_t> predictions(const Mat& logits) {
  std::vector<std::size_t> out(logits.rows());
  for (std::size_t i = 0; i < logits.rows(); ++i) out[i] = argmax(logits.row(i));
  return out;
}

inline double classification_accuracy(const Mat& logits, const std::vector<std::uint32_t>& labels) {
  CBM_ALIGN_CHECK(logits.rows() > 0, ErrorKind::kInvalidArgument, "classification_accuracy: empty input");
  CBM_ALIGN_CHECK(logits.rows() == labels.size(), ErrorKind::kShapeMismatch,
                  "classification_accuracy: row/label count mismatch");
  std::size_t correct = 0;
  for (std::size_t i = 0; i < logits.rows(); ++i)
    if (argmax(logits.row(i)) == labels[i]) ++correct;
  return 100.0 * static_cast<double>(correct) / static_cast<double>(logits.rows());
}

/// Indices of the `count` largest entries, ties toward the lower index.
inline std::vector<std::size_t> top_indices(std::span<const double> v, std::size_t count) {
  std::vector<std::size_t> order(v.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  count = std::min(count, v.size());
  std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(count), order.end(),
                    [&](std::size_t a, std::size_t b) { return v[a] > v[b] || (v[a] == v[b] && a < b); });
  order.resize(count);
  return order;
}

inline double concept_accuracy(const Mat& scores, const Mat& concept_labels,
                               ConceptMetric metric = ConceptMetric::kTopA) {
  CBM_ALIGN_CHECK(scores.same_shape(concept_labels), ErrorKind::kShapeMismatch,
                  "concept_accuracy: scores and labels differ in shape");
  double total = 0.0;
  std::size_t evaluated = 0;
  for (std::size_t i = 0; i < scores.rows(); ++i) {
    auto s = scores.row(i);
    auto g = concept_labels.row(i);
    if (metric == ConceptMetric::kThresholded) {
      std::size_t agree = 0;
      for (std::size_t j = 0; j < s.size(); ++j)
        if ((s[j] >= 0.5) == (g[j] >= 0.5)) ++agree;
      total += static_cast<double>(agree) / static_cast<double>(s.size());
      ++evaluated;
      continue;
    }
    std::size_t active = 0;
    for (double x : g)
      if (x >= 0.5) ++active;
    if (active == 0) continue;
    std::size_t hits = 0;
    for (std::size_t j : top_indices(s, active))
      if (g[j] >= 0.5) ++hits;
    total += static_cast<double>(hits) / static_cast<double>(active);
    ++evaluated;
  }
  CBM_ALIGN_CHECK(evaluated > 0, ErrorKind::kInvalidArgument,
                  "concept_accuracy: no row has an active concept label");
  return 100.0 * total / static_cast<double>(evaluated);
}

struct ErrorMatrix {
  // counts[a][b]: samples of true class a predicted as b.
  std::vector<std::vector<std::int64_t>> counts;

  std::size_t k() const noexcept { return counts.size(); }
  std::int64_t row_total(std::size_t a) const {
    return std::accumulate(counts[a].begin(), counts[a].end(), std::int64_t{0});
  }
  std::int64_t errors_of(std::size_t a) const { return row_total(a) - counts[a][a]; }
  std::int64_t symmetric_mass(std::size_t a, std::size_t b) const { return counts[a][b] + counts[b][a]; }
};

inline ErrorMatrix error_matrix(const Mat& logits, const std::vector<std::uint32_t>& labels, std::size_t k) {
  CBM_ALIGN_CHECK(logits.rows() == labels.size(), ErrorKind::kShapeMismatch,
                  "error_matrix: row/label count mismatch");
  CBM_ALIGN_CHECK(logits.cols() == k, ErrorKind::kShapeMismatch, "error_matrix: logits width != k");
  ErrorMatrix em{std::vector<std::vector<std::int64_t>>(k, std::vector<std::int64_t>(k, 0))};
  for (std::size_t i = 0; i < labels.size(); ++i) {
    CBM_ALIGN_CHECK(labels[i] < k, ErrorKind::kInvalidArgument,
                    "error_matrix: label " + std::to_string(labels[i]) + " out of range at row " + std::to_string(i));
    em.counts[labels[i]][argmax(logits.row(i))] += 1;
  }
  return em;
}

inline Mat normalize_rows(const Mat& m, Normalization norm) {
  if (norm == Normalization::kNone) return m;
  Mat out(m.rows(), m.cols());
  for (std::size_t i = 0; i < m.rows(); ++i) {
    auto p = softmax(m.row(i));
    std::copy(p.begin(), p.end(), out.row(i).begin());
  }
  return out;
}

/// Instance mean of ||norm(C_i) - norm(G_i)||_2. Lower is better.
inline double truthfulness(const Mat& scores, const Mat& concept_labels,
                           Normalization norm = Normalization::kSoftmax) {
  CBM_ALIGN_CHECK(scores.same_shape(concept_labels) && scores.rows() > 0, ErrorKind::kShapeMismatch,
                  "truthfulness: scores and labels must share a non-empty shape");
  Mat s = normalize_rows(scores, norm);
  Mat g = normalize_rows(concept_labels, norm);
  double total = 0.0;
  for (std::size_t i = 0; i < s.rows(); ++i) {
    double sq = 0.0;
    for (std::size_t j = 0; j < s.cols(); ++j) sq += (s(i, j) - g(i, j)) * (s(i, j) - g(i, j));
    total += std::sqrt(sq);
  }
  return total / static_cast<double>(s.rows());
}

namespace detail {

inline std::vector<std::vector<std::size_t>> rows_by_class(const std::vector<std::uint32_t>& labels) {
  std::uint32_t k = 0;
  for (auto y : labels) k = std::max(k, y + 1);
  std::vector<std::vector<std::size_t>> out(k);
  for (std::size_t i = 0; i < labels.size(); ++i) out[labels[i]].push_back(i);
  return out;
}

}  // namespace detail

/// Class mean of the per-concept population standard deviation within each
/// class. Classes with no rows are skipped. Lower is better.
inline double sparseness(const Mat& scores, const std::vector<std::uint32_t>& class_labels,
                         Normalization norm = Normalization::kSoftmax) {
  CBM_ALIGN_CHECK(scores.rows() == class_labels.size() && scores.rows() > 0, ErrorKind::kShapeMismatch,
                  "sparseness: row/label count mismatch");
  Mat s = normalize_rows(scores, norm);
  double total = 0.0;
  std::size_t classes = 0;
  for (const auto& members : detail::rows_by_class(class_labels)) {
    if (members.empty()) continue;
    const double n = static_cast<double>(members.size());
    double per_concept = 0.0;
    for (std::size_t j = 0; j < s.cols(); ++j) {
      double mean = 0.0;
      for (std::size_t i : members) mean += s(i, j);
      mean /= n;
      double var = 0.0;
      for (std::size_t i : members) var += (s(i, j) - mean) * (s(i, j) - mean);
      per_concept += std::sqrt(var / n);
    }
    total += per_concept / static_cast<double>(s.cols());
    ++classes;
  }
  return total / static_cast<double>(classes);
}

/// Mean L2 distance between class centroids over all unordered pairs of
/// present classes. Higher is better.
inline double discriminability(const Mat& scores, const std::vector<std::uint32_t>& class_labels,
                               Normalization norm = Normalization::kSoftmax) {
  CBM_ALIGN_CHECK(scores.rows() == class_labels.size(), ErrorKind::kShapeMismatch,
                  "discriminability: row/label count mismatch");
  Mat s = normalize_rows(scores, norm);
  std::vector<std::vector<double>> centroids;
  for (const auto& members : detail::rows_by_class(class_labels)) {
    if (members.empty()) continue;
    std::vector<double> c(s.cols(), 0.0);
    for (std::size_t i : members)
      for (std::size_t j = 0; j < s.cols(); ++j) c[j] += s(i, j);
    for (double& x : c) x /= static_cast<double>(members.size());
    centroids.push_back(std::move(c));
  }
  CBM_ALIGN_CHECK(centroids.size() >= 2, ErrorKind::kInvalidArgument,
                  "discriminability: needs at least two classes");
  double total = 0.0;
  std::size_t pairs = 0;
  for (std::size_t a = 0; a < centroids.size(); ++a) {
    for (std::size_t b = a + 1; b < centroids.size(); ++b) {
      double sq = 0.0;
      for (std::size_t j = 0; j < s.cols(); ++j) sq += (centroids[a][j] - centroids[b][j]) * (centroids[a][j] - centroids[b][j]);
      total += std::sqrt(sq);
      ++pairs;
    }
  }
  return total / static_cast<double>(pairs);
}

struct EvalReport {
  double class_accuracy = 0.0;
  std::optional<double> concept_accuracy;
  std::size_t n_evaluated = 0;
  std::vector<std::optional<double>> per_class_accuracy;  // empty optional: class absent
  ConceptMetric concept_metric = ConceptMetric::kTopA;
};

struct DistributionalReport {
  double truthfulness = 0.0;
  double sparseness = 0.0;
  double discriminability = 0.0;
  Normalization normalization = Normalization::kSoftmax;
};

inline EvalReport evaluate(const Mat& logits, const std::vector<std::uint32_t>& labels, std::size_t k,
                           const Mat* scores = nullptr, const Mat* concept_labels = nullptr,
                           ConceptMetric metric = ConceptMetric::kTopA) {
  EvalReport r;
  r.class_accuracy = classification_accuracy(logits, labels);
  r.n_evaluated = labels.size();
  r.concept_metric = metric;
  ErrorMatrix em = error_matrix(logits, labels, k);
  r.per_class_accuracy.resize(k);
  for (std::size_t a = 0; a < k; ++a) {
    std::int64_t total = em.row_total(a);
    if (total > 0) r.per_class_accuracy[a] = 100.0 * static_cast<double>(em.counts[a][a]) / static_cast<double>(total);
  }
  if (scores != nullptr && concept_labels != nullptr) r.concept_accuracy = concept_accuracy(*scores, *concept_labels, metric);
  return r;
}

inline DistributionalReport distributional(const Mat& scores, const Mat& concept_labels,
                                           const std::vector<std::uint32_t>& class_labels,
                                           Normalization norm = Normalization::kSoftmax) {
  return {truthfulness(scores, concept_labels, norm), sparseness(scores, class_labels, norm),
          discriminability(scores, class_labels, norm), norm};
}

/// One named row of a report file.
struct ReportRow {
  std::string name;
  EvalReport eval;
  std::optional<DistributionalReport> distribution;
};

inline json optional_number(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }

inline json to_json(const ReportRow& row) {
  json per_class = json::array();
  for (const auto& v : row.eval.per_class_accuracy) per_class.push_back(optional_number(v));
  json j{{"name", row.name},
         {"class_accuracy", row.eval.class_accuracy},
         {"concept_accuracy", optional_number(row.eval.concept_accuracy)},
         {"concept_metric", to_string(row.eval.concept_metric)},
         {"n_evaluated", row.eval.n_evaluated},
         {"per_class_accuracy", per_class}};
  if (row.distribution) {
    j["distribution"] = {{"truthfulness", row.distribution->truthfulness},
                         {"sparseness", row.distribution->sparseness},
                         {"discriminability", row.distribution->discriminability},
                         {"normalization", to_string(row.distribution->normalization)}};
  }
  return j;
}

inline ReportRow report_row_from_json(const json& j) {
  ReportRow row;
  row.name = j.at("name").get<std::string>();
  row.eval.class_accuracy = j.at("class_accuracy").get<double>();
  if (!j.at("concept_accuracy").is_null()) row.eval.concept_accuracy = j.at("concept_accuracy").get<double>();
  row.eval.concept_metric = concept_metric_from_string(j.at("concept_metric").get<std::string>());
  row.eval.n_evaluated = j.at("n_evaluated").get<std::size_t>();
  for (const auto& v : j.at("per_class_accuracy")) {
    row.eval.per_class_accuracy.push_back(v.is_null() ? std::nullopt : std::optional<double>(v.get<double>()));
  }
  if (j.contains("distribution")) {
    const auto& d = j.at("distribution");
    row.distribution = DistributionalReport{d.at("truthfulness").get<double>(), d.at("sparseness").get<double>(),
                                            d.at("discriminability").get<double>(),
                                            normalization_from_string(d.at("normalization").get<std::string>())};
  }
  return row;
}

/// Shortest decimal text that parses back to the same double.
inline std::string format_number(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline constexpr const char* kReportCsvHeader =
    "name,n_evaluated,class_accuracy,concept_accuracy,concept_metric,truthfulness,sparseness,discriminability,"
    "normalization";

inline std::string to_csv(const std::vector<ReportRow>& rows) {
  std::ostringstream out;
  out << kReportCsvHeader << "\n";
  for (const auto& r : rows) {
    out << r.name << "," << r.eval.n_evaluated << "," << format_number(r.eval.class_accuracy) << ","
        << (r.eval.concept_accuracy ? format_number(*r.eval.concept_accuracy) : "") << ","
        << to_string(r.eval.concept_metric) << ",";
    if (r.distribution) {
      out << format_number(r.distribution->truthfulness) << "," << format_number(r.distribution->sparseness) << ","
          << format_number(r.distribution->discriminability) << "," << to_string(r.distribution->normalization);
    } else {
      out << ",,,";
    }
    out << "\n";
  }
  return out.str();
}

/// Published full-scale numbers, shipped for side-by-side comparison only.
/// Desk-scale synthetic runs are not expected to match them.
inline json reference_values() {
  return json::parse(R"JSON({
  "source": "published results for frozen CLIP and CSS-trained VL-CBMs (ViT-B/16)",
  "concept_metric_note": "published concept accuracy formula is not fully specified; compare with care",
  "frozen_clip": {
    "CUB":   {"class_accuracy": 75.84, "concept_accuracy": 24.43, "n_concepts": 312},
    "RIVAL": {"class_accuracy": 95.63, "concept_accuracy": 58.85, "n_concepts": 18},
    "AwA2":  {"class_accuracy": 90.14, "concept_accuracy": 49.02, "n_concepts": 85}
  },
  "css": {
    "CUB":   {"class_accuracy": 81.45, "concept_accuracy": 63.53, "labels_per_class": 9},
    "RIVAL": {"class_accuracy": 98.47, "concept_accuracy": 77.48, "labels_per_class": 8},
    "AwA2":  {"class_accuracy": 93.2,  "concept_accuracy": 81.13, "labels_per_class": 10}
  },
  "distributional_cub_test": {
    "css":  {"truthfulness": 3.22,  "sparseness": 0.08, "discriminability": 7.04},
    "clip": {"truthfulness": 14.04, "sparseness": 0.19, "discriminability": 3.28}
  },
  "intervention_cub": {
    "class_accuracy_before": 81.45, "class_accuracy_after": 82.57,
    "classes": {
      "California Gull": {"test_count": 30, "errors_before": 27, "errors_after": 14},
      "Western Gull":    {"test_count": 30, "errors_before": 15, "errors_after": 9},
      "Common Tern":     {"test_count": 30, "errors_before": 21, "errors_after": 11},
      "Arctic Tern":     {"test_count": 29, "errors_before": 3,  "errors_after": 2}
    },
    "confusions": {
      "California Gull -> Western Gull": {"before": 13, "after": 4},
      "Western Gull -> California Gull": {"before": 3,  "after": 1},
      "Common Tern -> Arctic Tern":      {"before": 12, "after": 6},
      "Arctic Tern -> Common Tern":      {"before": 0,  "after": 0}
    }
  }
})JSON");
}

/// Writes `<stem>.json` and `<stem>.csv`. With `reference` set, the JSON
/// carries the published numbers under "reference" for dashboards.
inline void emit_reports(const std::vector<ReportRow>& rows, const fs::path& dir, const std::string& stem = "eval_report",
                         bool with_reference = false, const std::vector<std::string>& notes = {}) {
  io::ensure_dir(dir);
  json j;
  if (!notes.empty()) j["notes"] = notes;
  j["distribution_normalization_note"] =
      "distributional metrics are computed on softmax-normalized score and label rows unless stated otherwise";
  j["rows"] = json::array();
  for (const auto& r : rows) j["rows"].push_back(to_json(r));
  if (with_reference) j["reference"] = reference_values();
  io::write_atomic(dir / (stem + ".json"), j.dump(2) + "\n");
  io::write_atomic(dir / (stem + ".csv"), to_csv(rows));
}

inline std::vector<ReportRow> read_reports(const fs::path& json_path) {
  json j;
  try {
    j = json::parse(io::read_text(json_path));
  } catch (const json::parse_error& e) {
    throw Error(ErrorKind::kFormat, json_path.string() + ": " + e.what());
  }
  std::vector<ReportRow> rows;
  for (const auto& r : j.at("rows")) rows.push_back(report_row_from_json(r));
  return rows;
}

}  // namespace cbm_align::metrics

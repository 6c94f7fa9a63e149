#pragma once

// cbm-align <synth|score|train|eval|analyze|intervene|sweep> --config <path> --out <dir>
//
// All numeric settings come from the JSON config; flags only pick the
// subcommand and the two paths. Relative paths inside the config resolve
// against the config file's directory. Every successful run leaves
// run_manifest.json in --out; failures leave error.json there (when the
// directory is writable) and print the same JSON on stderr.

#include <CLI11.hpp>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <iostream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cbm_align/candidates.hpp"
#include "cbm_align/concept_model.hpp"
#include "cbm_align/corpus.hpp"
#include "cbm_align/css_trainer.hpp"
#include "cbm_align/error.hpp"
#include "cbm_align/intervention.hpp"
#include "cbm_align/io.hpp"
#include "cbm_align/metrics.hpp"
#include "cbm_align/synth.hpp"

namespace cbm_align::cli {

inline constexpr const char* kVersion = "0.1.0";

inline const std::vector<std::string>& subcommands() {
  static const std::vector<std::string> names{"synth", "score", "train", "eval", "analyze", "intervene", "sweep"};
  return names;
}

inline const std::set<std::string>& known_sections() {
  static const std::set<std::string> keys{"bundle", "model",   "candidates", "synth",        "train", "label_budget",
                                          "eval",   "score",   "analyze",    "intervention", "sweep", "comment"};
  return keys;
}

class RunConfig {
 public:
  RunConfig(json j, fs::path base) : j_(std::move(j)), base_(std::move(base)) {
    CBM_ALIGN_CHECK(j_.is_object(), ErrorKind::kFormat, "config: top level must be a JSON object");
    for (const auto& [key, _] : j_.items()) {
      CBM_ALIGN_CHECK(known_sections().contains(key), ErrorKind::kInvalidArgument,
                      "config: unknown key '" + key + "'");
    }
  }

  static RunConfig load(const fs::path& path) {
    json j;
    try {
      j = json::parse(io::read_text(path));
    } catch (const json::parse_error& e) {
      throw Error(ErrorKind::kFormat, path.string() + ": " + e.what());
    }
    return {std::move(j), fs::absolute(path).parent_path()};
  }

  const json& raw() const { return j_; }
  bool has(const std::string& key) const { return j_.contains(key) && !j_.at(key).is_null(); }

  json section(const std::string& key) const {
    if (!has(key)) return json::object();
    CBM_ALIGN_CHECK(j_.at(key).is_object(), ErrorKind::kFormat, "config: '" + key + "' must be an object");
    return j_.at(key);
  }

  fs::path path(const std::string& key) const {
    CBM_ALIGN_CHECK(has(key), ErrorKind::kInvalidArgument, "config: missing required path '" + key + "'");
    CBM_ALIGN_CHECK(j_.at(key).is_string(), ErrorKind::kFormat, "config: '" + key + "' must be a string path");
    fs::path p = j_.at(key).get<std::string>();
    if (p.is_relative()) p = base_ / p;
    CBM_ALIGN_CHECK(fs::exists(p), ErrorKind::kIo, "config: '" + key + "' path does not exist: " + p.string());
    return p;
  }

 private:
  json j_;
  fs::path base_;
};

template <typename T>
T get_or(const json& section, const char* key, T fallback, const char* where) {
  try {
    return section.value(key, fallback);
  } catch (const json::exception& e) {
    throw Error(ErrorKind::kFormat, std::string(where) + "." + key + ": " + e.what());
  }
}

inline EmbeddingBundle load_run_bundle(const RunConfig& cfg) {
  EmbeddingBundle bundle = load_bundle(cfg.path("bundle"));
  if (cfg.has("label_budget")) {
    const json lb = cfg.section("label_budget");
    LabelBudget budget{get_or<std::size_t>(lb, "per_class", 0, "label_budget"),
                       get_or<std::uint64_t>(lb, "seed", 0, "label_budget")};
    bundle = apply_label_budget(bundle, budget);
  }
  return bundle;
}

inline TrainConfig run_train_config(const RunConfig& cfg) { return train_config_from_json(cfg.section("train")); }

/// The configured model, or a freshly initialized one (w_cp = 0).
inline ConceptModel load_or_init_model(const RunConfig& cfg, const EmbeddingBundle& bundle) {
  if (cfg.has("model")) {
    ConceptModel m = load_model(cfg.path("model"));
    check_compatible(m, bundle);
    return m;
  }
  const TrainConfig tc = run_train_config(cfg);
  return init_model(bundle.manifest.d_patch, bundle.c(), bundle.k(), tc.seed, tc.raw_scale);
}

inline BundleView split_view(const EmbeddingBundle& bundle, const std::string& split) {
  SplitViews views = split_views(bundle);
  if (split == "train") return views.train;
  if (split == "test") return views.test;
  if (split == "all") return BundleView::all(bundle);
  throw Error(ErrorKind::kInvalidArgument, "unknown split '" + split + "' (expected train, test or all)");
}

inline void write_json(const fs::path& path, const json& j) { io::write_atomic(path, j.dump(2) + "\n"); }

inline void write_matrix_f32(const fs::path& path, const Mat& m) {
  io::write_blob<float>(path, m.cast<float>().data());
}

inline void require_outputs(const fs::path& out, const std::vector<std::string>& names) {
  for (const auto& n : names) {
    CBM_ALIGN_CHECK(fs::exists(out / n), ErrorKind::kIo, "declared output missing after run: " + (out / n).string());
  }
}

inline std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string q = "\"";
  for (char ch : s) q += ch == '"' ? std::string("\"\"") : std::string(1, ch);
  return q + "\"";
}

// --- subcommands -----------------------------------------------------------

inline json cmd_synth(const RunConfig& cfg, const fs::path& out) {
  CBM_ALIGN_CHECK(cfg.has("synth"), ErrorKind::kInvalidArgument, "synth: config needs a 'synth' section");
  const synth::SynthSpec spec = synth::synth_spec_from_json(cfg.section("synth"));
  synth::Generated g = synth::generate(spec);
  save_bundle(g.bundle, out / "bundle");
  CBM_ALIGN_CHECK(bitwise_equal(load_bundle(out / "bundle"), g.bundle), ErrorKind::kValidation,
                  "synth: written bundle does not reload bitwise");
  write_json(out / "truth.json", synth::truth_to_json(spec, g.truth));
  if (g.truth.candidates.size() > 0) save_candidates(g.truth.candidates, out / "candidates");
  require_outputs(out, {"bundle", "truth.json"});
  return {{"seed", spec.seed}};
}

inline json cmd_score(const RunConfig& cfg, const fs::path& out) {
  const EmbeddingBundle bundle = load_run_bundle(cfg);
  const ConceptModel model = load_or_init_model(cfg, bundle);
  const json sc = cfg.section("score");
  const auto top_n = get_or<std::size_t>(sc, "top_n", 8, "score");
  const auto which = get_or<std::string>(sc, "which", "enhanced", "score");
  CBM_ALIGN_CHECK(which == "enhanced" || which == "raw", ErrorKind::kInvalidArgument,
                  "score.which must be 'enhanced' or 'raw'");
  const BundleView all = BundleView::all(bundle);
  const Mat raw = raw_scores(all, model.raw_scale);
  const Mat enhanced = enhanced_scores(all, model);
  io::ensure_dir(out);
  write_matrix_f32(out / "raw_scores.f32", raw);
  write_matrix_f32(out / "enhanced_scores.f32", enhanced);

  const Mat& ranked = which == "raw" ? raw : enhanced;
  const std::size_t n_top = std::min(top_n, bundle.c());
  std::ostringstream csv;
  csv << "sample,split,class,rank,concept,score\n";
  for (std::size_t i = 0; i < bundle.n(); ++i) {
    const auto top = metrics::top_indices(ranked.row(i), n_top);
    for (std::size_t r = 0; r < top.size(); ++r) {
      csv << i << ',' << (bundle.manifest.split[i] == Split::kTrain ? "train" : "test") << ','
          << csv_field(bundle.manifest.class_names[bundle.class_labels[i]]) << ',' << r + 1 << ','
          << csv_field(bundle.manifest.concept_names[top[r]]) << ',' << metrics::format_number(ranked(i, top[r]))
          << '\n';
    }
  }
  io::write_atomic(out / "top_concepts.csv", csv.str());
  write_json(out / "scores.json", {{"n_samples", bundle.n()},
                                   {"n_concepts", bundle.c()},
                                   {"dtype", "f32"},
                                   {"layout", "row-major n_samples x n_concepts, little-endian"},
                                   {"top_n", n_top},
                                   {"ranked_by", which},
                                   {"projection_is_zero", projection_is_zero(model)}});
  require_outputs(out, {"raw_scores.f32", "enhanced_scores.f32", "top_concepts.csv", "scores.json"});
  return {{"seed", model.seed}};
}

inline json cmd_train(const RunConfig& cfg, const fs::path& out) {
  const EmbeddingBundle bundle = load_run_bundle(cfg);
  const TrainConfig tc = run_train_config(cfg);
  TrainResult result = train(bundle, tc);
  save_model(result.model, out / "model");
  result.report.final_model_path = "model";
  write_train_report(result.report, tc, out);
  write_json(out / "timing.json", {{"wall_clock_seconds", result.report.wall_clock_seconds}});
  const ConceptModel reloaded = load_model(out / "model");
  CBM_ALIGN_CHECK(bitwise_equal(reloaded.w_cp, result.model.w_cp) && bitwise_equal(reloaded.w_k, result.model.w_k),
                  ErrorKind::kValidation, "train: written model does not reload bitwise");
  require_outputs(out, {"model", "train_report.json", "train_report.csv"});
  return {{"seed", tc.seed}};
}

inline json cmd_eval(const RunConfig& cfg, const fs::path& out) {
  const EmbeddingBundle bundle = load_run_bundle(cfg);
  const ConceptModel model = load_or_init_model(cfg, bundle);
  const json ec = cfg.section("eval");
  const auto metric = metrics::concept_metric_from_string(get_or<std::string>(ec, "concept_metric", "top_a", "eval"));
  const auto norm = metrics::normalization_from_string(get_or<std::string>(ec, "normalization", "softmax", "eval"));
  const bool with_reference = get_or<bool>(ec, "with_reference", true, "eval");
  const auto splits = get_or(ec, "splits", std::vector<std::string>{std::string("train"), std::string("test")}, "eval");

  std::vector<metrics::ReportRow> rows;
  for (const auto& split : splits) {
    const BundleView view = split_view(bundle, split);
    const Mat scores = enhanced_scores(view, model);
    const Mat logits = class_logits(scores, model);
    metrics::ReportRow row{split, {}, std::nullopt};
    if (bundle.concept_labels) {
      const Mat labels = view.concept_labels();
      row.eval = metrics::evaluate(logits, view.labels(), bundle.k(), &scores, &labels, metric);
      const auto class_ids = view.labels();
      const std::set<std::uint32_t> classes(class_ids.begin(), class_ids.end());
      if (classes.size() >= 2) row.distribution = metrics::distributional(scores, labels, class_ids, norm);
    } else {
      row.eval = metrics::evaluate(logits, view.labels(), bundle.k(), nullptr, nullptr, metric);
    }
    rows.push_back(std::move(row));
  }
  std::vector<std::string> notes;
  if (projection_is_zero(model)) {
    notes.push_back("w_cp = 0: scores are raw image-text similarities, so this is the frozen-embedding baseline");
  }
  if (!bundle.concept_labels) notes.push_back("bundle has no concept labels: concept metrics omitted");
  metrics::emit_reports(rows, out, "eval_report", with_reference, notes);
  const auto reread = metrics::read_reports(out / "eval_report.json");
  CBM_ALIGN_CHECK(reread.size() == rows.size(), ErrorKind::kValidation, "eval: report does not reload");
  require_outputs(out, {"eval_report.json", "eval_report.csv"});
  return {{"seed", model.seed}};
}

inline std::string error_matrix_csv(const metrics::ErrorMatrix& em, const std::vector<std::string>& class_names) {
  std::ostringstream csv;
  csv << "true\\predicted";
  for (const auto& n : class_names) csv << ',' << csv_field(n);
  csv << '\n';
  for (std::size_t a = 0; a < em.k(); ++a) {
    csv << csv_field(class_names[a]);
    for (std::size_t b = 0; b < em.k(); ++b) csv << ',' << em.counts[a][b];
    csv << '\n';
  }
  return csv.str();
}

inline json cmd_analyze(const RunConfig& cfg, const fs::path& out) {
  const EmbeddingBundle bundle = load_run_bundle(cfg);
  const ConceptModel model = load_or_init_model(cfg, bundle);
  const json ac = cfg.section("analyze");
  const auto split = get_or<std::string>(ac, "split", "test", "analyze");
  const auto n_pairs = get_or<std::size_t>(ac, "n_pairs", 1, "analyze");
  const bool symmetric = get_or<bool>(ac, "symmetric", true, "analyze");

  const BundleView view = split_view(bundle, split);
  const Mat logits = class_logits(enhanced_scores(view, model), model);
  const metrics::ErrorMatrix em = metrics::error_matrix(logits, view.labels(), bundle.k());
  io::ensure_dir(out);
  io::write_atomic(out / "error_matrix.csv", error_matrix_csv(em, bundle.manifest.class_names));

  json ranking = json::array();
  for (std::uint32_t a = 0; a < em.k(); ++a) {
    for (std::uint32_t b = a + 1; b < em.k(); ++b) {
      if (em.symmetric_mass(a, b) == 0) continue;
      ranking.push_back({{"class_a", a}, {"class_b", b}, {"a_as_b", em.counts[a][b]}, {"b_as_a", em.counts[b][a]},
                         {"confusion_mass", em.symmetric_mass(a, b)}});
    }
  }
  std::stable_sort(ranking.begin(), ranking.end(), [](const json& x, const json& y) {
    return x.at("confusion_mass").get<std::int64_t>() > y.at("confusion_mass").get<std::int64_t>();
  });
  json pairs = json::array();
  std::string note;
  try {
    for (const auto& p : intervention::find_confounding_pairs(em, n_pairs, symmetric)) {
      pairs.push_back({{"class_a", p.class_a}, {"class_b", p.class_b}, {"confusion_mass", p.confusion_mass},
                       {"class_a_name", bundle.manifest.class_names[p.class_a]},
                       {"class_b_name", bundle.manifest.class_names[p.class_b]}});
    }
  } catch (const Error& e) {
    if (e.kind() != ErrorKind::kInfeasible) throw;
    note = e.what();
  }
  json analysis{{"split", split},
                {"n_evaluated", view.size()},
                {"class_accuracy", metrics::classification_accuracy(logits, view.labels())},
                {"error_matrix", em.counts},
                {"pair_ranking", ranking},
                {"confounding_pairs", pairs},
                {"symmetric_ranking", symmetric}};
  if (!note.empty()) analysis["note"] = note;
  write_json(out / "analysis.json", analysis);
  require_outputs(out, {"error_matrix.csv", "analysis.json"});
  return {{"seed", model.seed}};
}

inline json cmd_intervene(const RunConfig& cfg, const fs::path& out) {
  const EmbeddingBundle bundle = load_run_bundle(cfg);
  const intervention::InterventionConfig ic = intervention::intervention_config_from_json(cfg.section("intervention"));
  const CandidateConcepts candidates = load_candidates(cfg.path("candidates"));
  validate(candidates, &bundle.manifest.concept_names);

  ConceptModel base;
  std::vector<std::string> declared{"model", "head", "intervention_report.json"};
  if (cfg.has("model")) {
    base = load_model(cfg.path("model"));
    check_compatible(base, bundle);
  } else {
    const TrainConfig tc = run_train_config(cfg);
    TrainResult trained = train(bundle, tc);
    base = trained.model;
    save_model(base, out / "base_model");
    trained.report.final_model_path = "base_model";
    write_train_report(trained.report, tc, out);
    declared.push_back("base_model");
  }

  const SplitViews views = split_views(bundle);
  const Mat test_logits = class_logits(enhanced_scores(views.test, base), base);
  const auto em = metrics::error_matrix(test_logits, views.test.labels(), bundle.k());
  const auto pairs = intervention::find_confounding_pairs(em, ic.n_pairs, ic.symmetric_ranking);
  const CandidateConcepts selected = intervention::select_expansion_concepts(views.train, pairs, candidates, ic.per_class);
  const auto result = intervention::intervene_and_retrain(bundle, base, pairs, selected, ic);

  save_model(result.model, out / "model");
  intervention::save_head(result.head, selected, out / "head");
  json report = intervention::to_json(result.report, bundle.manifest.class_names);
  report["config"] = intervention::to_json(ic);
  write_json(out / "intervention_report.json", report);
  require_outputs(out, declared);
  return {{"seed", ic.seed}};
}

struct SweepPoint {
  std::size_t labels_per_class = 0;
  std::vector<double> concept_accuracy;
  std::vector<double> class_accuracy;
};

inline std::pair<double, double> mean_std(const std::vector<double>& v) {
  double mean = 0.0;
  for (double x : v) mean += x;
  mean /= static_cast<double>(v.size());
  double var = 0.0;
  for (double x : v) var += (x - mean) * (x - mean);
  return {mean, std::sqrt(var / static_cast<double>(v.size()))};
}

/// One training run per (grid point, seed). With a `synth` section and no
/// `bundle`, each seed also regenerates the benchmark with that seed.
inline json cmd_sweep(const RunConfig& cfg, const fs::path& out) {
  const json sc = cfg.section("sweep");
  const auto grid = get_or<std::vector<std::size_t>>(sc, "grid", {0, 5, 10}, "sweep");
  const auto seeds = get_or<std::vector<std::uint64_t>>(sc, "seeds", {0, 1, 2, 3, 4}, "sweep");
  CBM_ALIGN_CHECK(!grid.empty() && !seeds.empty(), ErrorKind::kInvalidArgument, "sweep: grid and seeds must be nonempty");
  const TrainConfig base_tc = run_train_config(cfg);
  const bool regenerate = !cfg.has("bundle");
  CBM_ALIGN_CHECK(!regenerate || cfg.has("synth"), ErrorKind::kInvalidArgument,
                  "sweep: config needs either 'bundle' or 'synth'");
  CBM_ALIGN_CHECK(!cfg.has("label_budget"), ErrorKind::kInvalidArgument,
                  "sweep: label budgets come from sweep.grid; remove 'label_budget'");

  std::vector<SweepPoint> points;
  for (std::size_t m : grid) points.push_back({m, {}, {}});
  json runs = json::array();
  std::optional<EmbeddingBundle> fixed;
  if (!regenerate) fixed = load_bundle(cfg.path("bundle"));
  for (std::uint64_t seed : seeds) {
    EmbeddingBundle bundle;
    if (regenerate) {
      synth::SynthSpec spec = synth::synth_spec_from_json(cfg.section("synth"));
      spec.seed = seed;
      bundle = synth::generate(spec).bundle;
    } else {
      bundle = *fixed;
    }
    for (auto& point : points) {
      const EmbeddingBundle budgeted = apply_label_budget(bundle, {point.labels_per_class, seed});
      TrainConfig tc = base_tc;
      tc.seed = seed;
      tc.losses.concept_sup = base_tc.losses.concept_sup && point.labels_per_class > 0;
      const TrainResult r = train(budgeted, tc);
      const auto& last = r.report.epochs.back();
      CBM_ALIGN_CHECK(last.concept_accuracy.has_value(), ErrorKind::kValidation, "sweep: no concept accuracy");
      point.concept_accuracy.push_back(*last.concept_accuracy);
      point.class_accuracy.push_back(last.test_accuracy);
      runs.push_back({{"labels_per_class", point.labels_per_class},
                      {"seed", seed},
                      {"concept_accuracy", *last.concept_accuracy},
                      {"class_accuracy", last.test_accuracy},
                      {"concept_loss_enabled", tc.losses.concept_sup}});
    }
  }

  std::ostringstream csv;
  csv << "labels_per_class,n_seeds,concept_accuracy_mean,concept_accuracy_std,class_accuracy_mean,class_accuracy_std\n";
  json summary = json::array();
  for (const auto& p : points) {
    const auto [cm, cs] = mean_std(p.concept_accuracy);
    const auto [km, ks] = mean_std(p.class_accuracy);
    csv << p.labels_per_class << ',' << seeds.size() << ',' << metrics::format_number(cm) << ','
        << metrics::format_number(cs) << ',' << metrics::format_number(km) << ',' << metrics::format_number(ks) << '\n';
    summary.push_back({{"labels_per_class", p.labels_per_class},
                       {"concept_accuracy_mean", cm},
                       {"concept_accuracy_std", cs},
                       {"class_accuracy_mean", km},
                       {"class_accuracy_std", ks}});
  }
  io::ensure_dir(out);
  io::write_atomic(out / "sweep.csv", csv.str());
  write_json(out / "sweep.json", {{"grid", grid}, {"seeds", seeds}, {"summary", summary}, {"runs", runs}});
  require_outputs(out, {"sweep.csv", "sweep.json"});
  return {{"seeds", seeds}};
}

// --- dispatch --------------------------------------------------------------

inline json error_json(const std::string& kind, const std::string& message, const std::string& subcommand) {
  return {{"error", {{"kind", kind}, {"message", message}, {"subcommand", subcommand}}}};
}

inline int exit_code_for(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::kInvalidArgument: return 2;
    case ErrorKind::kIo: return 3;
    case ErrorKind::kFormat:
    case ErrorKind::kShapeMismatch:
    case ErrorKind::kValidation: return 4;
    case ErrorKind::kInfeasible: return 5;
    case ErrorKind::kNumeric: return 6;
  }
  return 1;
}

inline void report_failure(const json& err, const fs::path& out) {
  std::cerr << err.dump() << std::endl;
  if (!out.empty()) {
    try {
      io::ensure_dir(out);
      write_json(out / "error.json", err);
    } catch (...) {
      // stderr already carries the error
    }
  }
}

inline json dispatch(const std::string& sub, const RunConfig& cfg, const fs::path& out) {
  if (sub == "synth") return cmd_synth(cfg, out);
  if (sub == "score") return cmd_score(cfg, out);
  if (sub == "train") return cmd_train(cfg, out);
  if (sub == "eval") return cmd_eval(cfg, out);
  if (sub == "analyze") return cmd_analyze(cfg, out);
  if (sub == "intervene") return cmd_intervene(cfg, out);
  if (sub == "sweep") return cmd_sweep(cfg, out);
  throw Error(ErrorKind::kInvalidArgument, "unknown subcommand '" + sub + "'");
}

inline int run(int argc, const char* const* argv) {
  CLI::App app{"Concept-alignment toolkit for vision-language concept bottleneck models", "cbm-align"};
  app.require_subcommand(1);
  app.set_version_flag("--version", kVersion);
  std::string config_path, out_dir;
  for (const auto& name : subcommands()) {
    auto* sub = app.add_subcommand(name);
    sub->add_option("--config", config_path, "JSON run config")->required();
    sub->add_option("--out", out_dir, "output directory")->required();
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::string sub = argc > 1 ? argv[1] : "";
    report_failure(error_json("usage", e.what(), sub), out_dir);
    return 2;
  }
  const std::string sub = app.get_subcommands().front()->get_name();
  const fs::path out = out_dir;
  try {
    const RunConfig cfg = RunConfig::load(config_path);
    io::ensure_dir(out);
    std::error_code ec;
    fs::remove(out / "error.json", ec);
    json info = dispatch(sub, cfg, out);
    json manifest{{"tool", "cbm-align"},
                  {"version", kVersion},
                  {"subcommand", sub},
                  {"config", cfg.raw()},
                  {"config_path", config_path},
                  {"bundle_format_version", kBundleFormatVersion},
                  {"model_format_version", kModelFormatVersion}};
    manifest.update(info);
    write_json(out / "run_manifest.json", manifest);
    return 0;
  } catch (const Error& e) {
    report_failure(error_json(to_string(e.kind()), e.what(), sub), out);
    return exit_code_for(e.kind());
  } catch (const std::exception& e) {
    report_failure(error_json("internal", e.what(), sub), out);
    return 1;
  }
}

}  // namespace cbm_align::cli

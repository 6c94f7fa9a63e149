#pragma once

// Candidate concepts for concept-set expansion: candidates.json (names) and
// candidates.f32 (count x d_joint, L2-normalized rows, little-endian).

#include <cmath>
#include <filesystem>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cbm_align/error.hpp"
#include "cbm_align/io.hpp"
#include "cbm_align/numerics.hpp"

namespace cbm_align {

struct CandidateConcepts {
  std::vector<std::string> names;
  Mat32 text_features;  // names.size() x d_joint

  std::size_t size() const noexcept { return names.size(); }

  CandidateConcepts subset(const std::vector<std::size_t>& rows) const {
    CandidateConcepts out;
    out.text_features = gather_rows(text_features, rows);
    for (std::size_t r : rows) out.names.push_back(names.at(r));
    return out;
  }
};

/// `base_names`, when given, must be disjoint from the candidate names.
inline void validate(const CandidateConcepts& cand, const std::vector<std::string>* base_names = nullptr) {
  CBM_ALIGN_CHECK(cand.text_features.rows() == cand.names.size(), ErrorKind::kShapeMismatch,
                  "candidates: " + std::to_string(cand.names.size()) + " names but " +
                      std::to_string(cand.text_features.rows()) + " feature rows");
  std::set<std::string> seen;
  for (std::size_t i = 0; i < cand.names.size(); ++i) {
    CBM_ALIGN_CHECK(seen.insert(cand.names[i]).second, ErrorKind::kValidation,
                    "candidates: duplicate name '" + cand.names[i] + "' at index " + std::to_string(i));
  }
  if (base_names != nullptr) {
    for (const auto& n : *base_names) {
      CBM_ALIGN_CHECK(!seen.contains(n), ErrorKind::kValidation,
                      "candidates: '" + n + "' already belongs to the base concept set");
    }
  }
  for (std::size_t r = 0; r < cand.text_features.rows(); ++r) {
    double sq = 0.0;
    for (float v : cand.text_features.row(r)) sq += static_cast<double>(v) * v;
    CBM_ALIGN_CHECK(std::abs(std::sqrt(sq) - 1.0) <= 1e-3, ErrorKind::kValidation,
                    "candidates.f32: row " + std::to_string(r) + " is not unit norm");
  }
}

inline void save_candidates(const CandidateConcepts& cand, const std::filesystem::path& dir) {
  validate(cand);
  io::ensure_dir(dir);
  nlohmann::json j{{"names", cand.names}, {"count", cand.size()}, {"d_joint", cand.text_features.cols()}};
  io::write_atomic(dir / "candidates.json", j.dump(2) + "\n");
  io::write_blob<float>(dir / "candidates.f32", cand.text_features.data());
}

inline CandidateConcepts load_candidates(const std::filesystem::path& dir) {
  CandidateConcepts cand;
  std::size_t d_joint = 0;
  try {
    auto j = nlohmann::json::parse(io::read_text(dir / "candidates.json"));
    cand.names = j.at("names").get<std::vector<std::string>>();
    d_joint = j.at("d_joint").get<std::size_t>();
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::kFormat, (dir / "candidates.json").string() + ": " + e.what());
  }
  cand.text_features =
      Mat32(cand.names.size(), d_joint, io::read_blob<float>(dir / "candidates.f32", cand.names.size() * d_joint));
  validate(cand);
  return cand;
}

}  // namespace cbm_align

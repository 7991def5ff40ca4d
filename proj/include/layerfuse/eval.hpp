// SPDX-License-Identifier: Apache-2.0
#pragma once

// STS evaluation: gold-score parsing, cosine scoring of sentence pairs and
// Pearson / Spearman correlation against the gold scores.

#include <algorithm>
#include <charconv>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "layerfuse/error.hpp"
#include "layerfuse/fusion.hpp"
#include "layerfuse/ingest.hpp"
#include "layerfuse/linalg.hpp"
#include "layerfuse/parallel.hpp"

namespace layerfuse {

struct StsRow {
  double gold = 0.0;
  std::string sentence_a;
  std::string sentence_b;
};

struct StsPair {
  std::size_t sentence_a_index = 0;
  std::size_t sentence_b_index = 0;
  double gold = 0.0;
};

struct CorrelationReport {
  std::string dataset_name;
  std::size_t n = 0;
  double pearson = 0.0;
  double spearman = 0.0;
};

namespace detail {

inline std::vector<std::string_view> split_tabs(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const auto tab = line.find('\t', start);
    out.push_back(line.substr(start, tab == std::string_view::npos ? tab : tab - start));
    if (tab == std::string_view::npos) break;
    start = tab + 1;
  }
  return out;
}

inline double parse_real(std::string_view text, bool& ok) {
  while (!text.empty() && (text.front() == ' ')) text.remove_prefix(1);
  while (!text.empty() && (text.back() == ' ')) text.remove_suffix(1);
  double v = 0.0;
  const auto [end, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
  ok = ec == std::errc{} && end == text.data() + text.size() && !text.empty();
  return v;
}

}  // namespace detail

/// Gold scores from a tab-separated file. Accepts the 7-column STS-B layout
/// (genre, file, year, index, score, sentence1, sentence2; extra columns are
/// ignored) and a normalized 3-column layout (score, sentence1, sentence2).
/// Blank lines are skipped.
inline std::vector<StsRow> parse_sts_tsv(std::istream& in, const std::string& name = "<input>") {
  std::vector<StsRow> rows;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto cols = detail::split_tabs(line);
    std::size_t score_col = 0;
    if (cols.size() == 3) {
      score_col = 0;
    } else if (cols.size() >= 7) {
      score_col = 4;
    } else {
      throw Error(ErrorCode::MalformedLine, name + ":" + std::to_string(line_no) + ": " +
                                                std::to_string(cols.size()) + " columns");
    }
    bool ok = false;
    const double gold = detail::parse_real(cols[score_col], ok);
    if (!ok || !(gold >= 0.0 && gold <= 5.0)) {
      throw Error(ErrorCode::MalformedLine, name + ":" + std::to_string(line_no) +
                                                ": bad score \"" + std::string(cols[score_col]) +
                                                "\"");
    }
    rows.push_back({gold, std::string(cols[score_col + 1]), std::string(cols[score_col + 2])});
  }
  if (rows.empty()) throw Error(ErrorCode::EmptyFile, name + ": no score lines");
  return rows;
}

inline std::vector<StsRow> parse_sts_tsv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::IoFailure, "cannot open " + path.string());
  return parse_sts_tsv(in, path.string());
}

/// Pair k uses sentences 2k and 2k+1 of an LWE file with `sentence_count`
/// sentences.
inline std::vector<StsPair> interleaved_pairs(const std::vector<StsRow>& rows,
                                              std::size_t sentence_count) {
  if (sentence_count != 2 * rows.size()) {
    throw Error(ErrorCode::PairCountMismatch,
                std::to_string(rows.size()) + " gold pairs need " +
                    std::to_string(2 * rows.size()) + " sentences, file has " +
                    std::to_string(sentence_count));
  }
  std::vector<StsPair> pairs;
  pairs.reserve(rows.size());
  for (std::size_t k = 0; k < rows.size(); ++k) pairs.push_back({2 * k, 2 * k + 1, rows[k].gold});
  return pairs;
}

namespace detail {

inline SentenceEmbedding embed_record(const LweFile& file, std::size_t s, const FusionConfig& cfg,
                                      FusionDiagnostics* diag) {
  try {
    return embed_sentence(file.records[s], cfg, diag);
  } catch (const Error& e) {
    throw Error(e.code(), "sentence " + std::to_string(s) + ": " + e.message());
  }
}

}  // namespace detail

/// Embeds every sentence of `file` in input order.
inline std::vector<SentenceEmbedding> embed_all(const LweFile& file, const FusionConfig& cfg,
                                                unsigned threads = 1,
                                                FusionDiagnostics* diag = nullptr) {
  std::vector<SentenceEmbedding> out(file.records.size());
  std::vector<FusionDiagnostics> per_sentence(file.records.size());
  parallel_for(file.records.size(), threads, [&](std::size_t s) {
    out[s] = detail::embed_record(file, s, cfg, &per_sentence[s]);
  });
  if (diag) {
    for (const auto& d : per_sentence) *diag += d;
  }
  return out;
}

/// Cosine similarity of the two embeddings of every pair.
inline std::vector<double> score_pairs(const LweFile& file, const std::vector<StsPair>& pairs,
                                       const FusionConfig& cfg, unsigned threads = 1,
                                       FusionDiagnostics* diag = nullptr) {
  std::vector<char> needed(file.records.size(), 0);
  for (const auto& p : pairs) {
    if (p.sentence_a_index >= file.records.size() || p.sentence_b_index >= file.records.size()) {
      throw Error(ErrorCode::PairCountMismatch, "pair index outside the file");
    }
    needed[p.sentence_a_index] = needed[p.sentence_b_index] = 1;
  }
  std::vector<std::size_t> order;
  for (std::size_t s = 0; s < needed.size(); ++s) {
    if (needed[s]) order.push_back(s);
  }
  std::vector<SentenceEmbedding> emb(file.records.size());
  std::vector<FusionDiagnostics> per(order.size());
  parallel_for(order.size(), threads, [&](std::size_t k) {
    emb[order[k]] = detail::embed_record(file, order[k], cfg, &per[k]);
  });
  if (diag) {
    for (const auto& d : per) *diag += d;
  }
  std::vector<double> scores;
  scores.reserve(pairs.size());
  for (const auto& p : pairs) {
    scores.push_back(linalg::cosine_similarity(emb[p.sentence_a_index].values,
                                               emb[p.sentence_b_index].values));
  }
  return scores;
}

inline double pearson(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size()) {
    throw Error(ErrorCode::DimensionMismatch, "pearson: inputs differ in length");
  }
  if (x.size() < 2) throw Error(ErrorCode::DimensionMismatch, "pearson: need at least 2 values");
  const double n = static_cast<double>(x.size());
  const double mx = std::accumulate(x.begin(), x.end(), 0.0) / n;
  const double my = std::accumulate(y.begin(), y.end(), 0.0) / n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double dx = x[i] - mx;
    const double dy = y[i] - my;
    sxy += dx * dy;
    sxx += dx * dx;
    syy += dy * dy;
  }
  if (sxx == 0.0 || syy == 0.0) throw Error(ErrorCode::ZeroVariance, "constant input");
  return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

/// 1-based ranks; tied values share the mean of the ranks they span.
inline std::vector<double> fractional_ranks(const std::vector<double>& v) {
  std::vector<std::size_t> order(v.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> ranks(v.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && v[order[j + 1]] == v[order[i]]) ++j;
    const double rank = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = rank;
    i = j + 1;
  }
  return ranks;
}

inline double spearman(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size()) {
    throw Error(ErrorCode::DimensionMismatch, "spearman: inputs differ in length");
  }
  return pearson(fractional_ranks(x), fractional_ranks(y));
}

inline CorrelationReport correlate(std::string dataset, const std::vector<double>& scores,
                                   const std::vector<double>& gold) {
  return {std::move(dataset), scores.size(), pearson(scores, gold), spearman(scores, gold)};
}

/// Unweighted mean of the per-dataset coefficients.
inline CorrelationReport mean_report(const std::vector<CorrelationReport>& reports,
                                     std::string name) {
  CorrelationReport out{std::move(name), 0, 0.0, 0.0};
  for (const auto& r : reports) {
    out.n += r.n;
    out.pearson += r.pearson;
    out.spearman += r.spearman;
  }
  if (!reports.empty()) {
    out.pearson /= static_cast<double>(reports.size());
    out.spearman /= static_cast<double>(reports.size());
  }
  return out;
}

/// Correlations are reported x100 with two decimals.
inline double percent2(double r) { return std::round(r * 10000.0) / 100.0; }

inline nlohmann::json to_json(const FusionConfig& cfg) {
  return {{"omega", cfg.omega},
          {"window", cfg.window},
          {"start_layer", cfg.start_layer},
          {"novelty", std::string(to_string(cfg.novelty_backend))},
          {"importance", std::string(to_string(cfg.importance_mode))},
          {"merge_subwords", cfg.merge_subwords},
          {"keep_special", cfg.keep_special}};
}

inline nlohmann::json to_json(const CorrelationReport& r, const FusionConfig& cfg) {
  return {{"dataset", r.dataset_name},
          {"n", r.n},
          {"pearson", percent2(r.pearson)},
          {"spearman", percent2(r.spearman)},
          {"config", to_json(cfg)}};
}

}  // namespace layerfuse

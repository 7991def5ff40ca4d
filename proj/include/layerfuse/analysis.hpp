// SPDX-License-Identifier: Apache-2.0
#pragma once

// Diagnostics of how token representations evolve across layers:
// averaged layer-by-layer cosine maps, their offset diagonals, per-word
// variance of consecutive-layer similarity and its rank correlation with IDF.

#include <algorithm>
#include <cctype>
#include <cstdio>
#include <cmath>
#include <map>
#include <ostream>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include <boost/math/distributions/students_t.hpp>
#include <json.hpp>

#include "layerfuse/error.hpp"
#include "layerfuse/eval.hpp"
#include "layerfuse/fusion.hpp"
#include "layerfuse/ingest.hpp"
#include "layerfuse/linalg.hpp"

namespace layerfuse::analysis {

struct SimilarityMap {
  Matrix matrix;  // (N+1) x (N+1)
  std::size_t word_count = 0;
};

enum class Tertile { Low, Middle, High };

constexpr std::string_view to_string(Tertile t) noexcept {
  switch (t) {
    case Tertile::Low: return "Low";
    case Tertile::Middle: return "Middle";
    case Tertile::High: return "High";
  }
  return "";
}

struct WordVarianceEntry {
  std::string word;
  double mean_variance = 0.0;
  std::size_t occurrences = 0;
  double idf = 0.0;
  Tertile tertile = Tertile::Low;
};

struct VarianceIdfReport {
  double rho = 0.0;
  double p_value = 1.0;
  std::size_t n = 0;
};

/// Pairwise cosine similarity between all layers of one token. Symmetric
/// with an exact unit diagonal.
inline Matrix cosine_matrix(const Matrix& layers) {
  const Eigen::Index n = layers.cols();
  Matrix out = Matrix::Identity(n, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = i + 1; j < n; ++j) {
      out(i, j) = out(j, i) = linalg::cosine_similarity(layers.col(i), layers.col(j));
    }
  }
  return out;
}

/// Mean of the per-token cosine matrices over every non-special token.
inline SimilarityMap average_similarity_map(const LweFile& file, bool merge = false) {
  SimilarityMap out;
  out.matrix = Matrix::Zero(file.layer_count, file.layer_count);
  for (const auto& raw : file.records) {
    SentenceRecord record;
    record.source_index = raw.source_index;
    for (const auto& tok : raw.tokens) {
      if (!tok.flags.is_special) record.tokens.push_back(tok);
    }
    if (record.tokens.empty()) continue;
    if (merge) record = merge_subwords(record);
    for (const auto& tok : record.tokens) {
      out.matrix += cosine_matrix(tok.stack.as_double());
      ++out.word_count;
    }
  }
  if (out.word_count == 0) throw Error(ErrorCode::EmptyCorpus, "no non-special tokens");
  out.matrix /= static_cast<double>(out.word_count);
  out.matrix.diagonal().setOnes();
  return out;
}

/// Entries (i, i+k) for i = 0 .. rows-1-k.
inline std::vector<double> offset_diagonal(const Matrix& m, Eigen::Index k) {
  if (k < 1 || k >= m.rows() || m.rows() != m.cols()) {
    throw Error(ErrorCode::OffsetOutOfRange,
                "offset " + std::to_string(k) + " for a " + std::to_string(m.rows()) + "x" +
                    std::to_string(m.cols()) + " matrix");
  }
  std::vector<double> out;
  for (Eigen::Index i = 0; i + k < m.rows(); ++i) out.push_back(m(i, i + k));
  return out;
}

/// Word key used by the word-level tables: ASCII-lowercased text. Tokens
/// with no ASCII letter/digit and no non-ASCII byte count as punctuation
/// and get an empty key.
inline std::string word_key(std::string_view text) {
  bool wordlike = false;
  std::string key;
  key.reserve(text.size());
  for (char ch : text) {
    const auto c = static_cast<unsigned char>(ch);
    if (c >= 0x80 || std::isalnum(c)) wordlike = true;
    key.push_back(static_cast<char>(c < 0x80 ? std::tolower(c) : c));
  }
  return wordlike ? key : std::string{};
}

/// idf(w) = ln(D / df(w)) over D sentences.
inline std::map<std::string, double> idf(const std::vector<std::vector<std::string>>& corpus) {
  if (corpus.empty()) throw Error(ErrorCode::EmptyCorpus, "idf over an empty corpus");
  std::map<std::string, std::size_t> df;
  for (const auto& sentence : corpus) {
    const std::set<std::string> unique(sentence.begin(), sentence.end());
    for (const auto& w : unique) ++df[w];
  }
  std::map<std::string, double> out;
  const double d = static_cast<double>(corpus.size());
  for (const auto& [w, count] : df) out[w] = std::log(d / static_cast<double>(count));
  return out;
}

/// Assigns rank tertiles to a list already sorted by descending variance:
/// the bottom third (by ascending rank r, 3r < n) is Low, the next third
/// Middle, the rest High.
inline void assign_tertiles(std::vector<WordVarianceEntry>& sorted) {
  const std::size_t n = sorted.size();
  for (std::size_t k = 0; k < n; ++k) {
    const std::size_t r = n - 1 - k;
    sorted[k].tertile = 3 * r < n ? Tertile::Low : (3 * r < 2 * n ? Tertile::Middle : Tertile::High);
  }
}

/// Mean offset-1 variance per word (special tokens dropped, subwords merged),
/// for words seen at least `min_occurrences` times, sorted by descending
/// variance with ties broken by word.
inline std::vector<WordVarianceEntry> word_variance_table(const LweFile& file,
                                                          std::size_t min_occurrences = 50) {
  struct Acc {
    double sum = 0.0;
    std::size_t count = 0;
  };
  std::map<std::string, Acc> acc;
  std::vector<std::vector<std::string>> corpus;
  std::size_t tokens_seen = 0;

  for (const auto& raw : file.records) {
    SentenceRecord record;
    record.source_index = raw.source_index;
    for (const auto& tok : raw.tokens) {
      if (!tok.flags.is_special) record.tokens.push_back(tok);
    }
    std::vector<std::string> words;
    if (!record.tokens.empty()) {
      record = merge_subwords(record);
      for (const auto& tok : record.tokens) {
        ++tokens_seen;
        auto key = word_key(tok.text);
        if (key.empty()) continue;
        auto& a = acc[key];
        a.sum += offset1_variance(tok.stack.as_double());
        ++a.count;
        words.push_back(std::move(key));
      }
    }
    corpus.push_back(std::move(words));
  }
  if (tokens_seen == 0) throw Error(ErrorCode::EmptyCorpus, "no non-special tokens");

  const auto idf_map = idf(corpus);
  std::vector<WordVarianceEntry> out;
  for (const auto& [word, a] : acc) {
    if (a.count < std::max<std::size_t>(min_occurrences, 1)) continue;
    out.push_back({word, a.sum / static_cast<double>(a.count), a.count, idf_map.at(word),
                   Tertile::Low});
  }
  std::sort(out.begin(), out.end(), [](const auto& a, const auto& b) {
    if (a.mean_variance != b.mean_variance) return a.mean_variance > b.mean_variance;
    return a.word < b.word;
  });
  assign_tertiles(out);
  return out;
}

/// Two-sided p-value of a correlation coefficient under the t approximation
/// t = r sqrt((n-2)/(1-r^2)) with n-2 degrees of freedom.
inline double correlation_p_value(double r, std::size_t n) {
  if (n < 3 || std::abs(r) >= 1.0) return std::abs(r) >= 1.0 ? 0.0 : 1.0;
  const double df = static_cast<double>(n - 2);
  const double t = std::abs(r) * std::sqrt(df / (1.0 - r * r));
  const boost::math::students_t dist(df);
  return 2.0 * boost::math::cdf(boost::math::complement(dist, t));
}

inline VarianceIdfReport variance_idf_correlation(const std::vector<WordVarianceEntry>& entries) {
  if (entries.size() < 2) {
    throw Error(ErrorCode::ZeroVariance, "need at least 2 words to correlate");
  }
  std::vector<double> var, inv;
  for (const auto& e : entries) {
    var.push_back(e.mean_variance);
    inv.push_back(e.idf);
  }
  VarianceIdfReport out;
  out.n = entries.size();
  out.rho = spearman(var, inv);
  out.p_value = correlation_p_value(out.rho, out.n);
  return out;
}

// CSV / JSON emitters. Numbers use 17 significant digits so files are
// reproducible and lossless.

namespace detail {
inline std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}
}  // namespace detail

inline void write_similarity_csv(std::ostream& out, const Matrix& m) {
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    for (Eigen::Index j = 0; j < m.cols(); ++j) {
      if (j) out << ',';
      out << detail::fmt(m(i, j));
    }
    out << '\n';
  }
}

/// One row per offset k = 1..N: "k,v0,v1,...".
inline void write_offset_diagonals_csv(std::ostream& out, const Matrix& m) {
  out << "offset,values\n";
  for (Eigen::Index k = 1; k < m.rows(); ++k) {
    out << k;
    for (double v : offset_diagonal(m, k)) out << ',' << detail::fmt(v);
    out << '\n';
  }
}

inline void write_variance_table_csv(std::ostream& out,
                                     const std::vector<WordVarianceEntry>& entries) {
  out << "word,mean_variance,occurrences,idf,tertile\n";
  for (const auto& e : entries) {
    std::string word = e.word;
    if (word.find_first_of(",\"\n") != std::string::npos) {
      std::string quoted = "\"";
      for (char c : word) {
        if (c == '"') quoted += '"';
        quoted += c;
      }
      word = quoted + "\"";
    }
    out << word << ',' << detail::fmt(e.mean_variance) << ',' << e.occurrences << ','
        << detail::fmt(e.idf) << ',' << to_string(e.tertile) << '\n';
  }
}

inline nlohmann::json to_json(const VarianceIdfReport& r) {
  return {{"rho", r.rho}, {"p", r.p_value}, {"n", r.n}};
}

}  // namespace layerfuse::analysis

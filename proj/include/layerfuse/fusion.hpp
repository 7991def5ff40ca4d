// SPDX-License-Identifier: Apache-2.0
#pragma once

// Sentence embedding from layer-wise token representations.
//
// Each token's layer stack is collapsed into one vector by weighting every
// included layer (index >= start_layer) with a mix of two scores computed
// against its neighbouring layers:
//   * inverse alignment: 1 / mean cosine to the neighbours,
//   * novelty: |component outside the neighbours' span| / |v|.
// Tokens are then averaged with weights proportional to the variance of the
// cosine similarities between consecutive layers.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <string>
#include <string_view>
#include <vector>

#include "layerfuse/error.hpp"
#include "layerfuse/ingest.hpp"
#include "layerfuse/linalg.hpp"

namespace layerfuse {

enum class NoveltyBackend { QR, SVD };
enum class ImportanceMode { VarianceAllLayers, VarianceLastLayerOnlyVector, Uniform };

constexpr std::string_view to_string(NoveltyBackend b) noexcept {
  return b == NoveltyBackend::QR ? "qr" : "svd";
}

constexpr std::string_view to_string(ImportanceMode m) noexcept {
  switch (m) {
    case ImportanceMode::VarianceAllLayers: return "variance";
    case ImportanceMode::VarianceLastLayerOnlyVector: return "last-layer";
    case ImportanceMode::Uniform: return "uniform";
  }
  return "unknown";
}

struct FusionConfig {
  double omega = 0.5;  // 1 = pure inverse alignment, 0 = pure novelty
  int window = 2;
  int start_layer = 4;
  NoveltyBackend novelty_backend = NoveltyBackend::QR;
  ImportanceMode importance_mode = ImportanceMode::VarianceAllLayers;
  bool merge_subwords = false;
  bool keep_special = false;

  void validate(Eigen::Index layer_count) const {
    if (!(omega >= 0.0 && omega <= 1.0)) {
      throw Error(ErrorCode::InvalidConfig, "omega must lie in [0, 1]");
    }
    if (window < 1) throw Error(ErrorCode::InvalidConfig, "window must be >= 1");
    if (start_layer < 0 || start_layer >= layer_count) {
      throw Error(ErrorCode::InvalidConfig,
                  "start layer " + std::to_string(start_layer) + " outside [0, " +
                      std::to_string(layer_count - 1) + "]");
    }
  }
};

/// Counters for the fallbacks taken while computing weights.
struct FusionDiagnostics {
  std::size_t floored_alignment = 0;  // beta_a clipped up to kAlignmentFloor
  std::size_t novelty_fallbacks = 0;  // all-zero novelty -> uniform
  std::size_t variance_fallbacks = 0; // all-zero token variance -> uniform

  FusionDiagnostics& operator+=(const FusionDiagnostics& o) noexcept {
    floored_alignment += o.floored_alignment;
    novelty_fallbacks += o.novelty_fallbacks;
    variance_fallbacks += o.variance_fallbacks;
    return *this;
  }
  friend bool operator==(const FusionDiagnostics&, const FusionDiagnostics&) = default;
};

inline constexpr double kAlignmentFloor = 1e-3;
inline constexpr double kNoveltyZero = 1e-10;
inline constexpr double kVarianceZero = 1e-24;

/// Per-layer weights over the included layers [first_layer, N].
struct FusionWeights {
  Eigen::Index first_layer = 0;
  std::vector<double> alignment;
  std::vector<double> novelty;
  std::vector<double> combined;
};

struct UnifiedWordVector {
  Vector values;
  std::string token_text;
};

struct TokenImportance {
  std::vector<double> raw_variance;
  std::vector<double> weight;
};

struct SentenceEmbedding {
  Vector values;
};

namespace detail {

inline void require_layers(const Matrix& layers, const FusionConfig& cfg) {
  if (layers.cols() < 1 || layers.rows() < 1) {
    throw Error(ErrorCode::DimensionMismatch, "empty layer stack");
  }
  cfg.validate(layers.cols());
}

/// Neighbour layer indices of `i` within [start, N], ascending, excluding i.
inline std::vector<Eigen::Index> neighbor_indices(Eigen::Index layer_count, Eigen::Index i,
                                                  int window, int start) {
  std::vector<Eigen::Index> idx;
  const Eigen::Index lo = std::max<Eigen::Index>(start, i - window);
  const Eigen::Index hi = std::min<Eigen::Index>(layer_count - 1, i + window);
  for (Eigen::Index j = lo; j <= hi; ++j) {
    if (j != i) idx.push_back(j);
  }
  return idx;
}

/// Scale to unit sum. Returns false (leaving the input untouched) if the
/// sum is zero.
inline bool normalize_l1(std::vector<double>& w) {
  double total = 0.0;
  for (double x : w) total += x;
  if (!(total > 0.0)) return false;
  for (double& x : w) x /= total;
  return true;
}

inline std::vector<double> uniform(std::size_t n) {
  return std::vector<double>(n, 1.0 / static_cast<double>(n));
}

inline void require_nonzero(const Eigen::Ref<const Vector>& v, Eigen::Index layer) {
  if (v.norm() == 0.0) {
    throw Error(ErrorCode::ZeroNormVector, "layer " + std::to_string(layer) + " vector is zero");
  }
}

}  // namespace detail

/// Columns are the layer vectors at indices max(l_S, i-m) .. min(N, i+m),
/// skipping i itself.
inline Matrix neighbor_matrix(const Matrix& layers, Eigen::Index i, int window, int start_layer) {
  if (i < start_layer || i >= layers.cols()) {
    throw Error(ErrorCode::DimensionMismatch,
                "layer " + std::to_string(i) + " is not an included layer");
  }
  const auto idx = detail::neighbor_indices(layers.cols(), i, window, start_layer);
  if (idx.empty()) {
    throw Error(ErrorCode::EmptyNeighborhood,
                "layer " + std::to_string(i) + " has no neighbours at or above layer " +
                    std::to_string(start_layer));
  }
  Matrix c(layers.rows(), static_cast<Eigen::Index>(idx.size()));
  for (std::size_t k = 0; k < idx.size(); ++k) c.col(static_cast<Eigen::Index>(k)) = layers.col(idx[k]);
  return c;
}

inline std::vector<double> alignment_weights(const Matrix& layers, const FusionConfig& cfg,
                                             FusionDiagnostics* diag = nullptr) {
  detail::require_layers(layers, cfg);
  const Eigen::Index n = layers.cols();
  if (cfg.start_layer == n - 1) return {1.0};

  std::vector<double> w;
  w.reserve(static_cast<std::size_t>(n - cfg.start_layer));
  for (Eigen::Index i = cfg.start_layer; i < n; ++i) {
    const auto idx = detail::neighbor_indices(n, i, cfg.window, cfg.start_layer);
    double beta = 0.0;
    for (auto j : idx) beta += linalg::cosine_similarity(layers.col(i), layers.col(j));
    beta /= static_cast<double>(idx.size());
    if (beta < kAlignmentFloor) {
      beta = kAlignmentFloor;
      if (diag) ++diag->floored_alignment;
    }
    w.push_back(1.0 / beta);
  }
  detail::normalize_l1(w);
  return w;
}

namespace detail {

template <typename ScoreFn>
std::vector<double> novelty_weights(const Matrix& layers, const FusionConfig& cfg,
                                    FusionDiagnostics* diag, ScoreFn score_of) {
  require_layers(layers, cfg);
  const Eigen::Index n = layers.cols();
  if (cfg.start_layer == n - 1) return {1.0};

  std::vector<double> w;
  w.reserve(static_cast<std::size_t>(n - cfg.start_layer));
  for (Eigen::Index i = cfg.start_layer; i < n; ++i) {
    require_nonzero(layers.col(i), i);
    double score = std::clamp(score_of(neighbor_matrix(layers, i, cfg.window, cfg.start_layer),
                                       layers.col(i)),
                              0.0, 1.0);
    if (score < kNoveltyZero) score = 0.0;
    w.push_back(score);
  }
  if (!normalize_l1(w)) {
    w = uniform(w.size());
    if (diag) ++diag->novelty_fallbacks;
  }
  return w;
}

}  // namespace detail

/// Novelty via an SVD basis of the neighbour matrix: |v - U U^T v| / |v|.
inline std::vector<double> novelty_weights_svd(const Matrix& layers, const FusionConfig& cfg,
                                               FusionDiagnostics* diag = nullptr) {
  return detail::novelty_weights(layers, cfg, diag, [](const Matrix& c, const Vector& v) {
    const Matrix basis = linalg::orthonormal_basis_svd(c);
    return linalg::project_residual(v, basis).norm() / v.norm();
  });
}

/// Novelty via QR of [neighbours | v]: the last entry of R's last column
/// over that column's norm.
inline std::vector<double> novelty_weights_qr(const Matrix& layers, const FusionConfig& cfg,
                                              FusionDiagnostics* diag = nullptr) {
  return detail::novelty_weights(layers, cfg, diag, [](const Matrix& c, const Vector& v) {
    Matrix augmented(c.rows(), c.cols() + 1);
    augmented << c, v;
    const auto qr = linalg::qr_factorize(augmented);
    const auto r = qr.r.col(c.cols());
    const double norm = r.norm();
    if (norm == 0.0) throw Error(ErrorCode::ZeroNormVector, "zero center vector");
    return std::abs(r(c.cols())) / norm;
  });
}

inline std::vector<double> novelty_weights(const Matrix& layers, const FusionConfig& cfg,
                                           FusionDiagnostics* diag = nullptr) {
  return cfg.novelty_backend == NoveltyBackend::QR ? novelty_weights_qr(layers, cfg, diag)
                                                   : novelty_weights_svd(layers, cfg, diag);
}

inline std::vector<double> combined_weights(const std::vector<double>& alignment,
                                            const std::vector<double>& novelty, double omega) {
  if (alignment.size() != novelty.size()) {
    throw Error(ErrorCode::DimensionMismatch, "alignment and novelty weight counts differ");
  }
  std::vector<double> out(alignment.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = omega * alignment[i] + (1.0 - omega) * novelty[i];
  }
  return out;
}

inline FusionWeights fusion_weights(const Matrix& layers, const FusionConfig& cfg,
                                    FusionDiagnostics* diag = nullptr) {
  FusionWeights w;
  w.first_layer = cfg.start_layer;
  w.alignment = alignment_weights(layers, cfg, diag);
  w.novelty = novelty_weights(layers, cfg, diag);
  w.combined = combined_weights(w.alignment, w.novelty, cfg.omega);
  return w;
}

inline Vector apply_weights(const Matrix& layers, const FusionWeights& w) {
  Vector out = Vector::Zero(layers.rows());
  for (std::size_t k = 0; k < w.combined.size(); ++k) {
    out += w.combined[k] * layers.col(w.first_layer + static_cast<Eigen::Index>(k));
  }
  return out;
}

inline UnifiedWordVector unify_token(const Matrix& layers, const FusionConfig& cfg,
                                     FusionDiagnostics* diag = nullptr) {
  return {apply_weights(layers, fusion_weights(layers, cfg, diag)), {}};
}

inline UnifiedWordVector unify_token(const Token& token, const FusionConfig& cfg,
                                     FusionDiagnostics* diag = nullptr) {
  auto out = unify_token(token.stack.as_double(), cfg, diag);
  out.token_text = token.text;
  return out;
}

/// Population variance of cos(v^i, v^{i+1}) over all consecutive layer
/// pairs. Values under the rounding floor are reported as exactly 0.
inline double offset1_variance(const Matrix& layers) {
  const Eigen::Index pairs = layers.cols() - 1;
  if (pairs < 1) return 0.0;
  std::vector<double> cos(static_cast<std::size_t>(pairs));
  double mean = 0.0;
  for (Eigen::Index i = 0; i < pairs; ++i) {
    cos[static_cast<std::size_t>(i)] = linalg::cosine_similarity(layers.col(i), layers.col(i + 1));
    mean += cos[static_cast<std::size_t>(i)];
  }
  mean /= static_cast<double>(pairs);
  double var = 0.0;
  for (double c : cos) var += (c - mean) * (c - mean);
  var /= static_cast<double>(pairs);
  return var < kVarianceZero ? 0.0 : var;
}

/// Token weights for the sentence average. Uses every layer of each token,
/// independent of start_layer.
inline TokenImportance token_importance(const SentenceRecord& record, const FusionConfig& cfg,
                                        FusionDiagnostics* diag = nullptr) {
  const std::size_t count = record.tokens.size();
  if (count == 0) throw Error(ErrorCode::EmptySentence, "no tokens");
  TokenImportance out;
  out.raw_variance.reserve(count);
  for (const auto& tok : record.tokens) {
    out.raw_variance.push_back(offset1_variance(tok.stack.as_double()));
  }
  if (cfg.importance_mode == ImportanceMode::Uniform) {
    out.weight = detail::uniform(count);
    return out;
  }
  out.weight = out.raw_variance;
  if (!detail::normalize_l1(out.weight)) {
    out.weight = detail::uniform(count);
    if (diag) ++diag->variance_fallbacks;
  }
  return out;
}

/// Everything computed for one sentence; the embedding plus the per-token
/// pieces it was assembled from.
struct SentenceBreakdown {
  SentenceRecord record;  // after filtering / merging
  TokenImportance importance;
  std::vector<FusionWeights> token_weights;
  SentenceEmbedding embedding;
  FusionDiagnostics diagnostics;
};

inline SentenceBreakdown embed_sentence_detailed(const SentenceRecord& raw,
                                                 const FusionConfig& cfg) {
  SentenceBreakdown out;
  out.record = prepare_record(raw, cfg.keep_special, cfg.merge_subwords);
  const auto& tokens = out.record.tokens;
  const Eigen::Index dim = tokens.front().stack.dim();
  const Eigen::Index layer_count = tokens.front().stack.layer_count();
  for (const auto& tok : tokens) {
    if (tok.stack.dim() != dim || tok.stack.layer_count() != layer_count) {
      throw Error(ErrorCode::DimensionMismatch,
                  "sentence " + std::to_string(raw.source_index) + ": token stacks differ in shape");
    }
  }
  cfg.validate(layer_count);

  out.importance = token_importance(out.record, cfg, &out.diagnostics);
  Vector sum = Vector::Zero(dim);
  for (std::size_t j = 0; j < tokens.size(); ++j) {
    const Matrix layers = tokens[j].stack.as_double();
    if (cfg.importance_mode == ImportanceMode::VarianceLastLayerOnlyVector) {
      sum += out.importance.weight[j] * layers.col(layers.cols() - 1);
      continue;
    }
    out.token_weights.push_back(fusion_weights(layers, cfg, &out.diagnostics));
    sum += out.importance.weight[j] * apply_weights(layers, out.token_weights.back());
  }
  out.embedding.values = std::move(sum);
  return out;
}

/// v_s = sum_j w_j * unified(token_j), after the configured token filtering.
inline SentenceEmbedding embed_sentence(const SentenceRecord& record, const FusionConfig& cfg,
                                        FusionDiagnostics* diag = nullptr) {
  auto detailed = embed_sentence_detailed(record, cfg);
  if (diag) *diag += detailed.diagnostics;
  return std::move(detailed.embedding);
}

}  // namespace layerfuse

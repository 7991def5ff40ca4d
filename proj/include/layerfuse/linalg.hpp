// SPDX-License-Identifier: Apache-2.0
#pragma once

// Small dense kernels used by the fusion code. Everything is computed in
// double precision; inputs stored as float are widened by the caller.

#include <algorithm>
#include <cmath>
#include <string>
#include <utility>

#include <Eigen/Dense>

#include "layerfuse/error.hpp"

namespace layerfuse {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;

namespace linalg {

/// Singular values / R diagonal entries below this fraction of the largest
/// one are treated as exact zeros.
inline constexpr double kRankTolerance = 1e-10;

inline void require_finite(const Eigen::Ref<const Matrix>& m, const char* what) {
  if (!m.allFinite()) {
    throw Error(ErrorCode::NumericalFailure, std::string(what) + ": non-finite entries");
  }
}

/// <a,b> / (|a| |b|), clamped to [-1, 1].
inline double cosine_similarity(const Eigen::Ref<const Vector>& a,
                                const Eigen::Ref<const Vector>& b) {
  if (a.size() != b.size()) {
    throw Error(ErrorCode::DimensionMismatch,
                "cosine_similarity: dimensions " + std::to_string(a.size()) + " and " +
                    std::to_string(b.size()));
  }
  const double na = a.norm();
  const double nb = b.norm();
  if (na == 0.0 || nb == 0.0) {
    throw Error(ErrorCode::ZeroNormVector, "cosine_similarity: zero-norm argument");
  }
  return std::clamp(a.dot(b) / (na * nb), -1.0, 1.0);
}

/// Orthonormal basis of the column space of `m` taken from the left singular
/// vectors. Directions whose singular value falls under the rank tolerance
/// are dropped, so the result may have fewer columns than `m`.
inline Matrix orthonormal_basis_svd(const Eigen::Ref<const Matrix>& m) {
  if (m.rows() < 1 || m.cols() < 1) {
    throw Error(ErrorCode::DimensionMismatch, "orthonormal_basis_svd: empty matrix");
  }
  require_finite(m, "orthonormal_basis_svd");
  Eigen::JacobiSVD<Matrix> svd(m, Eigen::ComputeThinU);
  if (svd.info() != Eigen::Success) {
    throw Error(ErrorCode::NumericalFailure, "orthonormal_basis_svd: SVD did not converge");
  }
  const auto& sigma = svd.singularValues();  // sorted descending
  const double cutoff = kRankTolerance * (sigma.size() > 0 ? sigma(0) : 0.0);
  Eigen::Index rank = 0;
  while (rank < sigma.size() && sigma(rank) > cutoff) ++rank;
  return svd.matrixU().leftCols(rank);
}

struct QrResult {
  Matrix q;  // rows x cols; dropped directions are zero columns
  Matrix r;  // cols x cols, upper triangular, non-negative diagonal
};

/// Thin QR by classical Gram-Schmidt with one reorthogonalization pass.
///
/// A column whose remaining component is below the rank tolerance (relative
/// to the largest column norm of `m`) gets a zero Q column and a zero R
/// diagonal entry; later columns are not projected onto it. The non-zero
/// columns of Q are therefore an orthonormal basis of span(m), and the last
/// diagonal entry of R is the length of the last column's component outside
/// the span of the preceding ones. Wide inputs are accepted; at most
/// `rows` columns of Q end up non-zero.
inline QrResult qr_factorize(const Eigen::Ref<const Matrix>& m) {
  const Eigen::Index rows = m.rows();
  const Eigen::Index cols = m.cols();
  if (rows < 1 || cols < 1) {
    throw Error(ErrorCode::DimensionMismatch, "qr_factorize: empty matrix");
  }
  require_finite(m, "qr_factorize");

  QrResult out{Matrix::Zero(rows, cols), Matrix::Zero(cols, cols)};
  const double cutoff = kRankTolerance * m.colwise().norm().maxCoeff();

  Vector w(rows);
  for (Eigen::Index k = 0; k < cols; ++k) {
    w = m.col(k);
    if (k > 0) {
      auto basis = out.q.leftCols(k);
      for (int pass = 0; pass < 2; ++pass) {
        const Vector h = basis.transpose() * w;
        w.noalias() -= basis * h;
        out.r.col(k).head(k) += h;
      }
    }
    const double norm = w.norm();
    if (!std::isfinite(norm)) {
      throw Error(ErrorCode::NumericalFailure, "qr_factorize: non-finite intermediate");
    }
    if (norm > cutoff) {
      out.q.col(k) = w / norm;
      out.r(k, k) = norm;
    }
  }
  return out;
}

/// v - B B^T v for a basis with orthonormal columns.
inline Vector project_residual(const Eigen::Ref<const Vector>& v,
                               const Eigen::Ref<const Matrix>& basis) {
  if (basis.rows() != v.size()) {
    throw Error(ErrorCode::DimensionMismatch,
                "project_residual: basis has " + std::to_string(basis.rows()) +
                    " rows, vector has " + std::to_string(v.size()));
  }
  if (basis.cols() == 0) return v;
  const Vector coeffs = basis.transpose() * v;
  return v - basis * coeffs;
}

}  // namespace linalg
}  // namespace layerfuse

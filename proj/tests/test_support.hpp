// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <random>
#include <string>
#include <vector>

#include "layerfuse/ingest.hpp"
#include "layerfuse/linalg.hpp"
#include "oracle.hpp"

namespace testing_support {

using layerfuse::Matrix;

/// Layer vectors that drift like hidden states: each layer is the previous
/// one plus a perturbation.
inline Matrix drifting_layers(std::mt19937_64& rng, int layers, int dim, double step = 0.4) {
  std::normal_distribution<double> n(0.0, 1.0);
  Matrix m(dim, layers);
  for (int k = 0; k < dim; ++k) m(k, 0) = n(rng);
  for (int i = 1; i < layers; ++i) {
    for (int k = 0; k < dim; ++k) m(k, i) = m(k, i - 1) + step * n(rng);
  }
  return m;
}

inline Matrix gaussian(std::mt19937_64& rng, int rows, int cols) {
  std::normal_distribution<double> n(0.0, 1.0);
  Matrix m(rows, cols);
  for (int c = 0; c < cols; ++c) {
    for (int r = 0; r < rows; ++r) m(r, c) = n(rng);
  }
  return m;
}

inline layerfuse::Token make_token(const Matrix& layers, std::string text = "w",
                                   layerfuse::TokenFlags flags = {}) {
  layerfuse::Token t;
  t.text = std::move(text);
  t.flags = flags;
  t.stack.values = layers.cast<float>();
  return t;
}

inline layerfuse::SentenceRecord make_record(const std::vector<Matrix>& tokens) {
  layerfuse::SentenceRecord r;
  for (std::size_t j = 0; j < tokens.size(); ++j) {
    r.tokens.push_back(make_token(tokens[j], "w" + std::to_string(j)));
  }
  return r;
}

/// Layers exactly as the library sees them (float-rounded) in oracle form.
inline oracle::Stack to_oracle(const layerfuse::Token& t) {
  oracle::Stack s;
  for (Eigen::Index l = 0; l < t.stack.layer_count(); ++l) {
    oracle::Vec v;
    for (Eigen::Index k = 0; k < t.stack.dim(); ++k) v.push_back(t.stack.values(k, l));
    s.push_back(v);
  }
  return s;
}

inline oracle::Stack to_oracle(const Matrix& m) {
  oracle::Stack s;
  for (Eigen::Index l = 0; l < m.cols(); ++l) {
    oracle::Vec v(m.rows());
    for (Eigen::Index k = 0; k < m.rows(); ++k) v[k] = m(k, l);
    s.push_back(v);
  }
  return s;
}

inline std::string fixture(const std::string& name) {
  return std::string(LAYERFUSE_FIXTURE_DIR) + "/" + name;
}

}  // namespace testing_support

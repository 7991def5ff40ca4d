// SPDX-License-Identifier: Apache-2.0
#pragma once

// EMB1 sentence-embedding files: "EMB1", u32 version(=1), u32 count,
// u32 dim, then count*dim little-endian f32 values, row-major.

#include <bit>
#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "layerfuse/error.hpp"
#include "layerfuse/fusion.hpp"
#include "layerfuse/ingest.hpp"

namespace layerfuse {

inline constexpr std::string_view kEmbMagic = "EMB1";
inline constexpr std::uint32_t kEmbVersion = 1;

struct EmbeddingTable {
  std::uint32_t count = 0;
  std::uint32_t dim = 0;
  std::vector<float> values;  // count x dim, row-major

  const float* row(std::size_t i) const { return values.data() + i * dim; }
};

inline EmbeddingTable make_table(const std::vector<SentenceEmbedding>& rows, std::uint32_t dim) {
  EmbeddingTable t;
  t.count = static_cast<std::uint32_t>(rows.size());
  t.dim = dim;
  t.values.reserve(rows.size() * dim);
  for (const auto& r : rows) {
    if (r.values.size() != dim) {
      throw Error(ErrorCode::DimensionMismatch, "embedding dimension differs from table");
    }
    for (Eigen::Index k = 0; k < r.values.size(); ++k) {
      t.values.push_back(static_cast<float>(r.values(k)));
    }
  }
  return t;
}

inline std::string encode_emb(const EmbeddingTable& t) {
  if (t.values.size() != std::size_t{t.count} * t.dim) {
    throw Error(ErrorCode::InvalidRecord, "embedding table size does not match count x dim");
  }
  std::string out;
  out.reserve(16 + 4 * t.values.size());
  out.append(kEmbMagic);
  detail::put_uint<std::uint32_t>(out, kEmbVersion);
  detail::put_uint<std::uint32_t>(out, t.count);
  detail::put_uint<std::uint32_t>(out, t.dim);
  for (float f : t.values) detail::put_f32(out, f);
  return out;
}

inline EmbeddingTable decode_emb(std::string_view bytes) {
  detail::ByteReader in(bytes);
  if (in.remaining() < kEmbMagic.size() || in.take(4, "magic") != kEmbMagic) {
    throw Error(ErrorCode::BadMagic, "not an EMB file");
  }
  const auto version = in.read_uint<std::uint32_t>("version");
  if (version != kEmbVersion) {
    throw Error(ErrorCode::UnsupportedVersion, "EMB version " + std::to_string(version));
  }
  EmbeddingTable t;
  t.count = in.read_uint<std::uint32_t>("count");
  t.dim = in.read_uint<std::uint32_t>("dim");
  const std::size_t n = std::size_t{t.count} * t.dim;
  if (n > in.remaining() / 4) throw Error(ErrorCode::Truncated, "embedding payload");
  t.values.resize(n);
  for (auto& f : t.values) f = std::bit_cast<float>(in.read_uint<std::uint32_t>("payload"));
  if (in.remaining() != 0) throw Error(ErrorCode::InvalidRecord, "trailing bytes");
  return t;
}

inline void write_emb(const EmbeddingTable& t, const std::filesystem::path& path) {
  detail::write_all(path, encode_emb(t));
}

inline EmbeddingTable read_emb(const std::filesystem::path& path) {
  return decode_emb(detail::read_all(path));
}

}  // namespace layerfuse

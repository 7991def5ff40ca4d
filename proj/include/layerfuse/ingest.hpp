// SPDX-License-Identifier: Apache-2.0
#pragma once

// Layer-wise embedding (LWE) files.
//
// Layout, little-endian throughout:
//
//   "LWE1"  u32 version(=1)  u32 layer_count  u32 dim  u32 sentence_count
//   per sentence:
//     u32 token_count
//     per token: u16 text_bytes, UTF-8 text, u8 flags (bit0 special, bit1 continuation)
//     f32 payload, token-major, then layer, then dimension
//
// An optional JSON sidecar `<path>.manifest.json` carries provenance
// (model and tokenizer names); numerics never look at it.

#include <bit>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "layerfuse/error.hpp"
#include "layerfuse/linalg.hpp"

namespace layerfuse {

inline constexpr std::string_view kLweMagic = "LWE1";
inline constexpr std::uint32_t kLweVersion = 1;
inline constexpr std::string_view kContinuationMarker = "##";

struct TokenFlags {
  bool is_special = false;
  bool is_continuation = false;

  std::uint8_t bits() const noexcept {
    return static_cast<std::uint8_t>((is_special ? 1u : 0u) | (is_continuation ? 2u : 0u));
  }
  static TokenFlags from_bits(std::uint8_t bits) noexcept {
    return {(bits & 1u) != 0, (bits & 2u) != 0};
  }
  friend bool operator==(const TokenFlags&, const TokenFlags&) = default;
};

/// All layer outputs for one token. Column i is the layer-i vector; column 0
/// is the embedding layer. Stored as float to match the file.
struct LayerStack {
  Eigen::MatrixXf values;  // dim x layer_count

  Eigen::Index layer_count() const noexcept { return values.cols(); }
  Eigen::Index dim() const noexcept { return values.rows(); }
  Vector layer(Eigen::Index i) const { return values.col(i).cast<double>(); }
  Matrix as_double() const { return values.cast<double>(); }
};

struct Token {
  std::string text;
  TokenFlags flags;
  LayerStack stack;
};

struct SentenceRecord {
  std::vector<Token> tokens;
  std::size_t source_index = 0;
};

struct LweFile {
  std::uint32_t layer_count = 0;
  std::uint32_t dim = 0;
  std::vector<SentenceRecord> records;
  std::optional<nlohmann::json> manifest;

  std::size_t sentence_count() const noexcept { return records.size(); }
};

inline std::filesystem::path manifest_path(const std::filesystem::path& path) {
  return std::filesystem::path(path.string() + ".manifest.json");
}

namespace detail {

class ByteReader {
 public:
  explicit ByteReader(std::string_view bytes) : bytes_(bytes) {}

  std::size_t remaining() const noexcept { return bytes_.size() - pos_; }

  std::string_view take(std::size_t n, const char* what) {
    if (remaining() < n) {
      throw Error(ErrorCode::Truncated, std::string("unexpected end of data reading ") + what +
                                            " at byte " + std::to_string(pos_));
    }
    auto out = bytes_.substr(pos_, n);
    pos_ += n;
    return out;
  }

  template <typename UInt>
  UInt read_uint(const char* what) {
    auto raw = take(sizeof(UInt), what);
    UInt v = 0;
    for (std::size_t i = 0; i < sizeof(UInt); ++i) {
      v |= static_cast<UInt>(static_cast<unsigned char>(raw[i])) << (8 * i);
    }
    return v;
  }

 private:
  std::string_view bytes_;
  std::size_t pos_ = 0;
};

template <typename UInt>
void put_uint(std::string& out, UInt v) {
  for (std::size_t i = 0; i < sizeof(UInt); ++i) {
    out.push_back(static_cast<char>((v >> (8 * i)) & 0xFFu));
  }
}

inline void put_f32(std::string& out, float f) { put_uint(out, std::bit_cast<std::uint32_t>(f)); }

inline std::string read_all(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::IoFailure, "cannot open " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (in.bad()) throw Error(ErrorCode::IoFailure, "read failed for " + path.string());
  return bytes;
}

inline void write_all(const std::filesystem::path& path, std::string_view bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorCode::IoFailure, "cannot open " + path.string() + " for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  out.flush();
  if (!out) throw Error(ErrorCode::IoFailure, "write failed for " + path.string());
}

}  // namespace detail

/// Decode an in-memory LWE image. The manifest is not part of the image.
inline LweFile decode_lwe(std::string_view bytes) {
  detail::ByteReader in(bytes);
  if (in.remaining() < kLweMagic.size() || in.take(4, "magic") != kLweMagic) {
    throw Error(ErrorCode::BadMagic, "not an LWE file");
  }
  const auto version = in.read_uint<std::uint32_t>("version");
  if (version != kLweVersion) {
    throw Error(ErrorCode::UnsupportedVersion, "LWE version " + std::to_string(version));
  }
  LweFile file;
  file.layer_count = in.read_uint<std::uint32_t>("layer_count");
  file.dim = in.read_uint<std::uint32_t>("dim");
  const auto sentence_count = in.read_uint<std::uint32_t>("sentence_count");
  if (sentence_count > 0 && (file.layer_count == 0 || file.dim == 0)) {
    throw Error(ErrorCode::InvalidRecord, "layer_count and dim must be positive");
  }

  const std::size_t floats_per_token = std::size_t{file.layer_count} * file.dim;
  for (std::uint32_t s = 0; s < sentence_count; ++s) {
    const auto token_count = in.read_uint<std::uint32_t>("token_count");
    // Each token needs at least 3 header bytes plus its payload.
    if (token_count > 0 &&
        (floats_per_token > in.remaining() ||
         std::size_t{token_count} * (3 + 4 * floats_per_token) > in.remaining())) {
      throw Error(ErrorCode::Truncated, "sentence " + std::to_string(s) + " declares " +
                                            std::to_string(token_count) + " tokens");
    }
    SentenceRecord record;
    record.source_index = s;
    record.tokens.resize(token_count);
    for (std::uint32_t t = 0; t < token_count; ++t) {
      auto& tok = record.tokens[t];
      const auto len = in.read_uint<std::uint16_t>("token text length");
      tok.text = std::string(in.take(len, "token text"));
      const auto bits = in.read_uint<std::uint8_t>("token flags");
      if ((bits & ~3u) != 0) {
        throw Error(ErrorCode::InvalidRecord, "sentence " + std::to_string(s) + " token " +
                                                  std::to_string(t) + ": unknown flag bits");
      }
      tok.flags = TokenFlags::from_bits(bits);
      if (tok.flags.is_special && tok.flags.is_continuation) {
        throw Error(ErrorCode::InvalidRecord, "sentence " + std::to_string(s) + " token " +
                                                  std::to_string(t) +
                                                  ": special token marked as continuation");
      }
    }
    for (std::uint32_t t = 0; t < token_count; ++t) {
      auto& values = record.tokens[t].stack.values;
      values.resize(file.dim, file.layer_count);
      for (std::uint32_t l = 0; l < file.layer_count; ++l) {
        for (std::uint32_t k = 0; k < file.dim; ++k) {
          const float f = std::bit_cast<float>(in.read_uint<std::uint32_t>("payload"));
          if (!std::isfinite(f)) {
            throw Error(ErrorCode::NonFiniteValue,
                        "sentence " + std::to_string(s) + " token " + std::to_string(t) +
                            " layer " + std::to_string(l) + " dim " + std::to_string(k));
          }
          values(k, l) = f;
        }
      }
    }
    file.records.push_back(std::move(record));
  }
  if (in.remaining() != 0) {
    throw Error(ErrorCode::InvalidRecord,
                std::to_string(in.remaining()) + " trailing bytes after last sentence");
  }
  return file;
}

inline std::string encode_lwe(const LweFile& file) {
  std::string out;
  out.append(kLweMagic);
  detail::put_uint<std::uint32_t>(out, kLweVersion);
  detail::put_uint<std::uint32_t>(out, file.layer_count);
  detail::put_uint<std::uint32_t>(out, file.dim);
  detail::put_uint<std::uint32_t>(out, static_cast<std::uint32_t>(file.records.size()));
  for (std::size_t s = 0; s < file.records.size(); ++s) {
    const auto& record = file.records[s];
    detail::put_uint<std::uint32_t>(out, static_cast<std::uint32_t>(record.tokens.size()));
    for (const auto& tok : record.tokens) {
      if (tok.text.size() > 0xFFFF) {
        throw Error(ErrorCode::InvalidRecord, "token text longer than 65535 bytes");
      }
      if (tok.flags.is_special && tok.flags.is_continuation) {
        throw Error(ErrorCode::InvalidRecord, "special token marked as continuation");
      }
      detail::put_uint<std::uint16_t>(out, static_cast<std::uint16_t>(tok.text.size()));
      out.append(tok.text);
      out.push_back(static_cast<char>(tok.flags.bits()));
    }
    for (const auto& tok : record.tokens) {
      const auto& v = tok.stack.values;
      if (v.rows() != file.dim || v.cols() != file.layer_count) {
        throw Error(ErrorCode::InvalidRecord, "sentence " + std::to_string(s) +
                                                  ": stack shape does not match header");
      }
      for (Eigen::Index l = 0; l < v.cols(); ++l) {
        for (Eigen::Index k = 0; k < v.rows(); ++k) detail::put_f32(out, v(k, l));
      }
    }
  }
  return out;
}

/// Reads `path` and, when present, its manifest sidecar.
inline LweFile read_lwe(const std::filesystem::path& path) {
  LweFile file = decode_lwe(detail::read_all(path));
  const auto sidecar = manifest_path(path);
  if (std::filesystem::exists(sidecar)) {
    try {
      file.manifest = nlohmann::json::parse(detail::read_all(sidecar));
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorCode::InvalidRecord, sidecar.string() + ": " + e.what());
    }
  }
  return file;
}

inline void write_lwe(const LweFile& file, const std::filesystem::path& path) {
  detail::write_all(path, encode_lwe(file));
  if (file.manifest) detail::write_all(manifest_path(path), file.manifest->dump(2) + "\n");
}

/// Folds continuation pieces into the token before them. The merged stack is
/// the layer-wise mean of the pieces and the text drops the "##" markers.
inline SentenceRecord merge_subwords(const SentenceRecord& record) {
  SentenceRecord out;
  out.source_index = record.source_index;
  std::vector<std::size_t> piece_counts;
  std::vector<Eigen::MatrixXd> sums;

  for (std::size_t t = 0; t < record.tokens.size(); ++t) {
    const auto& tok = record.tokens[t];
    if (!tok.flags.is_continuation) {
      out.tokens.push_back(tok);
      piece_counts.push_back(1);
      sums.push_back(tok.stack.values.cast<double>());
      continue;
    }
    if (out.tokens.empty() || out.tokens.back().flags.is_special) {
      throw Error(ErrorCode::OrphanContinuation,
                  "sentence " + std::to_string(record.source_index) + " token " +
                      std::to_string(t) + " (\"" + tok.text + "\") has no word to attach to");
    }
    std::string_view piece = tok.text;
    if (piece.starts_with(kContinuationMarker)) piece.remove_prefix(kContinuationMarker.size());
    out.tokens.back().text.append(piece);
    sums.back() += tok.stack.values.cast<double>();
    ++piece_counts.back();
  }
  for (std::size_t t = 0; t < out.tokens.size(); ++t) {
    if (piece_counts[t] > 1) {
      out.tokens[t].stack.values = (sums[t] / static_cast<double>(piece_counts[t])).cast<float>();
    }
  }
  return out;
}

inline SentenceRecord strip_special_tokens(const SentenceRecord& record) {
  SentenceRecord out;
  out.source_index = record.source_index;
  for (const auto& tok : record.tokens) {
    if (!tok.flags.is_special) out.tokens.push_back(tok);
  }
  if (out.tokens.empty()) {
    throw Error(ErrorCode::EmptySentence,
                "sentence " + std::to_string(record.source_index) + " has no non-special tokens");
  }
  return out;
}

/// Default token pipeline: drop special tokens unless kept, then optionally
/// merge subword pieces.
inline SentenceRecord prepare_record(const SentenceRecord& record, bool keep_special,
                                     bool merge) {
  SentenceRecord out = keep_special ? record : strip_special_tokens(record);
  if (merge) out = merge_subwords(out);
  if (out.tokens.empty()) {
    throw Error(ErrorCode::EmptySentence,
                "sentence " + std::to_string(record.source_index) + " has no tokens");
  }
  return out;
}

}  // namespace layerfuse

#pragma once

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#include "gmner/error.hpp"
#include "gmner/hash.hpp"

namespace gmner {

enum class StoreKind : std::uint8_t { kToken = 0, kSentence = 1, kEntity = 2, kImage = 3 };

inline std::string_view to_string(StoreKind kind) {
  switch (kind) {
    case StoreKind::kToken: return "token";
    case StoreKind::kSentence: return "sentence";
    case StoreKind::kEntity: return "entity";
    case StoreKind::kImage: return "image";
  }
  return "?";
}

inline StoreKind store_kind_from_string(std::string_view name) {
  if (name == "token") return StoreKind::kToken;
  if (name == "sentence") return StoreKind::kSentence;
  if (name == "entity") return StoreKind::kEntity;
  if (name == "image") return StoreKind::kImage;
  throw Error(ErrorKind::kFormat, "unknown store kind '" + std::string(name) + "'");
}

// Key scheme shared with the exporter.
inline std::string sentence_key(std::string_view sentence_id) { return std::string(sentence_id); }
inline std::string token_key(std::string_view sentence_id, std::size_t index) {
  return std::string(sentence_id) + "#" + std::to_string(index);
}
inline std::string entity_key(std::string_view surface) { return "ent:" + sha256_hex(surface).substr(0, 16); }
inline std::string image_key(std::string_view image_path) { return "img:" + sha256_hex(image_path).substr(0, 16); }

using EmbeddingVector = std::vector<double>;
using EmbeddingView = std::span<const double>;

/// a.b / (|a| |b|), clamped to [-1, 1].
inline double cosine(EmbeddingView a, EmbeddingView b) {
  if (a.size() != b.size()) {
    throw Error(ErrorKind::kDimMismatch,
                "cosine of dims " + std::to_string(a.size()) + " and " + std::to_string(b.size()));
  }
  double dot = 0.0;
  double na = 0.0;
  double nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  if (na <= 0.0 || nb <= 0.0) throw Error(ErrorKind::kZeroNorm, "cosine of a zero-norm vector");
  return std::clamp(dot / (std::sqrt(na) * std::sqrt(nb)), -1.0, 1.0);
}

/// Fixed-dimension vectors by key. Immutable once loaded; safe for
/// concurrent readers.
class EmbeddingStore {
 public:
  EmbeddingStore(StoreKind kind, std::size_t dim) : kind_(kind), dim_(dim) {
    if (dim == 0) throw Error(ErrorKind::kDimMismatch, "store dim must be positive");
  }

  StoreKind kind() const { return kind_; }
  std::size_t dim() const { return dim_; }
  std::size_t size() const { return keys_.size(); }
  const std::vector<std::string>& keys() const { return keys_; }
  bool contains(std::string_view key) const { return index_.contains(std::string(key)); }

  void add(std::string key, std::span<const double> values) {
    if (values.size() != dim_) {
      throw Error(ErrorKind::kDimMismatch, "key '" + key + "' has " + std::to_string(values.size()) +
                                               " values, store dim is " + std::to_string(dim_));
    }
    for (double v : values) {
      if (!std::isfinite(v)) throw Error(ErrorKind::kNonFinite, "key '" + key + "' contains NaN/Inf");
    }
    if (index_.contains(key)) throw Error(ErrorKind::kDuplicateKey, "key '" + key + "'");
    index_.emplace(key, keys_.size());
    keys_.push_back(std::move(key));
    data_.insert(data_.end(), values.begin(), values.end());
  }

  EmbeddingView get(std::string_view key) const {
    auto it = index_.find(std::string(key));
    if (it == index_.end()) {
      throw Error(ErrorKind::kMissingKey, std::string(to_string(kind_)) + " store has no key '" +
                                              std::string(key) + "'");
    }
    return EmbeddingView(data_).subspan(it->second * dim_, dim_);
  }

  std::optional<EmbeddingView> find(std::string_view key) const {
    if (!contains(key)) return std::nullopt;
    return get(key);
  }

  /// Binary layout: "EMB1", kind byte, u32 dim, u32 count, then per record
  /// u16 key length, key bytes, dim float32. All little-endian.
  void save(const std::filesystem::path& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error(ErrorKind::kIo, "cannot write '" + path.string() + "'");
    out.write("EMB1", 4);
    out.put(static_cast<char>(kind_));
    put_u32(out, static_cast<std::uint32_t>(dim_));
    put_u32(out, static_cast<std::uint32_t>(keys_.size()));
    for (std::size_t r = 0; r < keys_.size(); ++r) {
      const auto& key = keys_[r];
      if (key.size() > 0xFFFF) throw Error(ErrorKind::kFormat, "key too long: " + key.substr(0, 32));
      const auto len = static_cast<std::uint16_t>(key.size());
      out.put(static_cast<char>(len & 0xFF));
      out.put(static_cast<char>(len >> 8));
      out.write(key.data(), static_cast<std::streamsize>(key.size()));
      for (std::size_t d = 0; d < dim_; ++d) {
        put_u32(out, std::bit_cast<std::uint32_t>(static_cast<float>(data_[r * dim_ + d])));
      }
    }
    if (!out) throw Error(ErrorKind::kIo, "write failed for '" + path.string() + "'");
  }

 private:
  static void put_u32(std::ostream& out, std::uint32_t v) {
    const std::array<char, 4> b{static_cast<char>(v & 0xFF), static_cast<char>((v >> 8) & 0xFF),
                                static_cast<char>((v >> 16) & 0xFF), static_cast<char>((v >> 24) & 0xFF)};
    out.write(b.data(), 4);
  }

  StoreKind kind_;
  std::size_t dim_;
  std::vector<std::string> keys_;
  std::unordered_map<std::string, std::size_t> index_;
  std::vector<double> data_;
};

namespace detail {

class ByteReader {
 public:
  ByteReader(std::string bytes, std::string origin) : bytes_(std::move(bytes)), origin_(std::move(origin)) {}

  void need(std::size_t n) const {
    if (pos_ + n > bytes_.size()) {
      throw Error(ErrorKind::kFormat, "'" + origin_ + "' truncated at byte " + std::to_string(pos_));
    }
  }
  std::uint8_t u8() {
    need(1);
    return static_cast<std::uint8_t>(bytes_[pos_++]);
  }
  std::uint16_t u16() {
    need(2);
    std::uint16_t v = static_cast<std::uint8_t>(bytes_[pos_]) |
                      static_cast<std::uint16_t>(static_cast<std::uint8_t>(bytes_[pos_ + 1]) << 8);
    pos_ += 2;
    return v;
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int k = 3; k >= 0; --k) v = (v << 8) | static_cast<std::uint8_t>(bytes_[pos_ + k]);
    pos_ += 4;
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int k = 7; k >= 0; --k) v = (v << 8) | static_cast<std::uint8_t>(bytes_[pos_ + k]);
    pos_ += 8;
    return v;
  }
  std::string bytes(std::size_t n) {
    need(n);
    auto s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  bool at_end() const { return pos_ == bytes_.size(); }
  std::size_t position() const { return pos_; }

 private:
  std::string bytes_;
  std::string origin_;
  std::size_t pos_ = 0;
};

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::kIo, "cannot open '" + path.string() + "'");
  return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

inline EmbeddingStore load_binary_store(std::string bytes, const std::string& origin) {
  ByteReader r(std::move(bytes), origin);
  if (r.bytes(4) != "EMB1") throw Error(ErrorKind::kFormat, "'" + origin + "' lacks EMB1 magic");
  const auto kind_byte = r.u8();
  if (kind_byte > 3) throw Error(ErrorKind::kFormat, "'" + origin + "' has unknown kind byte");
  const auto dim = r.u32();
  const auto count = r.u32();
  EmbeddingStore store(static_cast<StoreKind>(kind_byte), dim);
  std::vector<double> values(dim);
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto len = r.u16();
    auto key = r.bytes(len);
    for (std::uint32_t d = 0; d < dim; ++d) values[d] = std::bit_cast<float>(r.u32());
    store.add(std::move(key), values);
  }
  if (!r.at_end()) throw Error(ErrorKind::kFormat, "'" + origin + "' has trailing bytes");
  return store;
}

/// JSON-lines fallback: optional header {"kind": ..., "dim": ...}, then
/// {"key": ..., "vec": [...]} per line.
inline EmbeddingStore load_jsonl_store(const std::string& text, const std::string& origin,
                                       std::optional<StoreKind> expected) {
  std::optional<EmbeddingStore> store;
  std::optional<StoreKind> kind = expected;
  std::optional<std::size_t> dim;
  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos < text.size()) {
    auto nl = text.find('\n', pos);
    if (nl == std::string::npos) nl = text.size();
    const auto line = std::string_view(text).substr(pos, nl - pos);
    pos = nl + 1;
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string_view::npos) continue;
    nlohmann::json rec;
    try {
      rec = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw Error(ErrorKind::kFormat, origin + ":" + std::to_string(line_no) + ": " + e.what());
    }
    if (!store && rec.contains("dim") && !rec.contains("vec")) {
      if (rec.contains("kind")) {
        const auto declared = store_kind_from_string(rec["kind"].get<std::string>());
        if (expected && *expected != declared) {
          throw Error(ErrorKind::kFormat, "'" + origin + "' is a " + std::string(to_string(declared)) +
                                              " store, expected " + std::string(to_string(*expected)));
        }
        kind = declared;
      }
      dim = rec["dim"].get<std::size_t>();
      continue;
    }
    if (!rec.contains("key") || !rec.contains("vec") || !rec["vec"].is_array()) {
      throw Error(ErrorKind::kFormat, origin + ":" + std::to_string(line_no) + ": expected {key, vec}");
    }
    if (!store) {
      if (!kind) throw Error(ErrorKind::kFormat, "'" + origin + "' does not declare its store kind");
      store.emplace(*kind, dim.value_or(rec["vec"].size()));
    }
    std::vector<double> values;
    for (const auto& v : rec["vec"]) {
      if (v.is_null()) {
        values.push_back(std::nan(""));
      } else {
        values.push_back(v.get<double>());
      }
    }
    store->add(rec["key"].get<std::string>(), values);
  }
  if (!store) {
    if (!kind || !dim) throw Error(ErrorKind::kFormat, "'" + origin + "' holds no records");
    store.emplace(*kind, *dim);
  }
  return std::move(*store);
}

}  // namespace detail

/// Loads a binary store (detected by its magic) or the JSON-lines fallback.
inline EmbeddingStore load_store(const std::filesystem::path& path, std::optional<StoreKind> expected = {}) {
  auto bytes = detail::read_file(path);
  if (bytes.size() >= 4 && bytes.compare(0, 4, "EMB1") == 0) {
    auto store = detail::load_binary_store(std::move(bytes), path.string());
    if (expected && store.kind() != *expected) {
      throw Error(ErrorKind::kFormat, "'" + path.string() + "' is a " + std::string(to_string(store.kind())) +
                                          " store, expected " + std::string(to_string(*expected)));
    }
    return store;
  }
  return detail::load_jsonl_store(bytes, path.string(), expected);
}

}  // namespace gmner

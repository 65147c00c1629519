#pragma once

#include <algorithm>
#include <compare>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <tuple>
#include <unordered_map>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "gmner/error.hpp"

namespace gmner {

using json = nlohmann::json;

// ---------------------------------------------------------------------------
// Schema

struct EntityType {
  std::string name;
  int id = -1;

  friend bool operator==(const EntityType&, const EntityType&) = default;
  friend auto operator<=>(const EntityType&, const EntityType&) = default;
};

/// Ordered set of entity types plus the BIO label layout derived from it:
/// label 0 is O, label 1 + 2k is B-type(k), label 2 + 2k is I-type(k).
class Schema {
 public:
  static constexpr int kOutside = 0;

  Schema() = default;

  explicit Schema(const std::vector<std::string>& names) {
    for (const auto& name : names) {
      if (name.empty()) throw Error(ErrorKind::kSchemaViolation, "entity type name is empty");
      if (index_.contains(name)) {
        throw Error(ErrorKind::kSchemaViolation, "duplicate entity type '" + name + "'");
      }
      const int id = static_cast<int>(types_.size());
      index_.emplace(name, id);
      types_.push_back(EntityType{name, id});
    }
  }

  const std::vector<EntityType>& types() const { return types_; }
  std::size_t size() const { return types_.size(); }
  bool empty() const { return types_.empty(); }

  std::optional<EntityType> find(std::string_view name) const {
    auto it = index_.find(std::string(name));
    if (it == index_.end()) return std::nullopt;
    return types_[it->second];
  }

  const EntityType& at(std::string_view name) const {
    auto it = index_.find(std::string(name));
    if (it == index_.end()) {
      throw Error(ErrorKind::kSchemaViolation, "type '" + std::string(name) + "' not in schema");
    }
    return types_[it->second];
  }

  std::vector<std::string> names() const {
    std::vector<std::string> out;
    for (const auto& t : types_) out.push_back(t.name);
    return out;
  }

  int label_count() const { return 1 + 2 * static_cast<int>(types_.size()); }
  static int begin_label(int type_id) { return 1 + 2 * type_id; }
  static int inside_label(int type_id) { return 2 + 2 * type_id; }
  static int type_of_label(int label) { return (label - 1) / 2; }
  static bool is_begin(int label) { return label > 0 && label % 2 == 1; }

  std::string label_name(int label) const {
    if (label == kOutside) return "O";
    const auto& t = types_.at(static_cast<std::size_t>(type_of_label(label)));
    return (is_begin(label) ? "B-" : "I-") + t.name;
  }

  std::vector<std::string> label_names() const {
    std::vector<std::string> out;
    for (int l = 0; l < label_count(); ++l) out.push_back(label_name(l));
    return out;
  }

 private:
  std::vector<EntityType> types_;
  std::unordered_map<std::string, int> index_;
};

// ---------------------------------------------------------------------------
// Text

/// Token offsets are Unicode code point indices into the sentence text;
/// the byte range is kept alongside for substring extraction.
struct Token {
  std::string surface;
  std::size_t char_start = 0;
  std::size_t char_end = 0;
  std::size_t byte_start = 0;
  std::size_t byte_end = 0;

  friend bool operator==(const Token&, const Token&) = default;
};

namespace detail {

struct CodePoint {
  char32_t value;
  std::size_t byte_offset;
  std::size_t byte_length;
};

inline std::vector<CodePoint> decode_utf8(std::string_view text) {
  std::vector<CodePoint> out;
  out.reserve(text.size());
  std::size_t i = 0;
  while (i < text.size()) {
    const auto lead = static_cast<unsigned char>(text[i]);
    std::size_t len = 1;
    char32_t cp = lead;
    if (lead >= 0xF0) {
      len = 4;
      cp = lead & 0x07;
    } else if (lead >= 0xE0) {
      len = 3;
      cp = lead & 0x0F;
    } else if (lead >= 0xC0) {
      len = 2;
      cp = lead & 0x1F;
    } else if (lead >= 0x80) {
      throw Error(ErrorKind::kFormat, "invalid UTF-8 lead byte at offset " + std::to_string(i));
    }
    if (i + len > text.size()) {
      throw Error(ErrorKind::kFormat, "truncated UTF-8 sequence at offset " + std::to_string(i));
    }
    for (std::size_t k = 1; k < len; ++k) {
      const auto cont = static_cast<unsigned char>(text[i + k]);
      if ((cont & 0xC0) != 0x80) {
        throw Error(ErrorKind::kFormat, "invalid UTF-8 continuation at offset " + std::to_string(i + k));
      }
      cp = (cp << 6) | (cont & 0x3F);
    }
    out.push_back(CodePoint{cp, i, len});
    i += len;
  }
  return out;
}

inline bool is_space(char32_t c) {
  return c == U' ' || c == U'\t' || c == U'\n' || c == U'\r' || c == U'\f' || c == U'\v' ||
         c == 0x00A0 || c == 0x3000 || (c >= 0x2000 && c <= 0x200A);
}

inline bool is_ascii_punct(char32_t c) {
  return (c >= 0x21 && c <= 0x2F) || (c >= 0x3A && c <= 0x40) || (c >= 0x5B && c <= 0x60) ||
         (c >= 0x7B && c <= 0x7E);
}

}  // namespace detail

/// Whitespace split, then leading and trailing ASCII punctuation is peeled
/// off one character at a time. Internal punctuation stays ("F-35", "U.S").
inline std::vector<Token> tokenize(std::string_view text) {
  const auto cps = detail::decode_utf8(text);
  std::vector<Token> tokens;
  auto emit = [&](std::size_t first, std::size_t last) {  // code point range [first, last)
    Token t;
    t.char_start = first;
    t.char_end = last;
    t.byte_start = cps[first].byte_offset;
    t.byte_end = cps[last - 1].byte_offset + cps[last - 1].byte_length;
    t.surface = std::string(text.substr(t.byte_start, t.byte_end - t.byte_start));
    tokens.push_back(std::move(t));
  };

  std::size_t i = 0;
  while (i < cps.size()) {
    if (detail::is_space(cps[i].value)) {
      ++i;
      continue;
    }
    std::size_t end = i;
    while (end < cps.size() && !detail::is_space(cps[end].value)) ++end;

    std::size_t core_begin = i;
    while (core_begin < end && detail::is_ascii_punct(cps[core_begin].value)) ++core_begin;
    std::size_t core_end = end;
    while (core_end > core_begin && detail::is_ascii_punct(cps[core_end - 1].value)) --core_end;

    for (std::size_t k = i; k < core_begin; ++k) emit(k, k + 1);
    if (core_begin < core_end) emit(core_begin, core_end);
    for (std::size_t k = core_end; k < end; ++k) emit(k, k + 1);
    i = end;
  }
  if (tokens.empty()) throw Error(ErrorKind::kEmptyInput, "text is empty or whitespace-only");
  return tokens;
}

struct Sentence {
  std::string id;
  std::string text;
  std::vector<Token> tokens;

  static Sentence from_text(std::string id, std::string text) {
    Sentence s;
    s.id = std::move(id);
    s.tokens = tokenize(text);
    s.text = std::move(text);
    return s;
  }

  std::size_t size() const { return tokens.size(); }

  /// Text covered by tokens [token_start, token_end), gaps included.
  std::string span_text(std::size_t token_start, std::size_t token_end) const {
    const auto b = tokens.at(token_start).byte_start;
    const auto e = tokens.at(token_end - 1).byte_end;
    return text.substr(b, e - b);
  }

  /// Token index whose char_start equals `char_start`, if any.
  std::optional<std::size_t> token_starting_at(std::size_t char_start) const {
    for (std::size_t i = 0; i < tokens.size(); ++i) {
      if (tokens[i].char_start == char_start) return i;
    }
    return std::nullopt;
  }

  std::optional<std::size_t> token_ending_at(std::size_t char_end) const {
    for (std::size_t i = 0; i < tokens.size(); ++i) {
      if (tokens[i].char_end == char_end) return i;
    }
    return std::nullopt;
  }
};

// ---------------------------------------------------------------------------
// Annotations

struct MentionSpan {
  std::string sentence_id;
  std::size_t token_start = 0;  // inclusive
  std::size_t token_end = 0;    // exclusive
  std::string surface;
  EntityType etype;

  bool overlaps(const MentionSpan& other) const {
    return sentence_id == other.sentence_id && token_start < other.token_end &&
           other.token_start < token_end;
  }

  friend bool operator==(const MentionSpan&, const MentionSpan&) = default;
};

/// Canonical order: sentence, start, end, type.
inline bool span_less(const MentionSpan& a, const MentionSpan& b) {
  return std::tie(a.sentence_id, a.token_start, a.token_end, a.etype.id, a.surface) <
         std::tie(b.sentence_id, b.token_start, b.token_end, b.etype.id, b.surface);
}

inline MentionSpan make_mention(const Sentence& sentence, std::size_t token_start,
                                std::size_t token_end, const EntityType& etype) {
  if (token_start >= token_end || token_end > sentence.size()) {
    throw Error(ErrorKind::kSpanAlignment,
                "token span [" + std::to_string(token_start) + ", " + std::to_string(token_end) +
                    ") out of range for sentence '" + sentence.id + "'");
  }
  return MentionSpan{sentence.id, token_start, token_end,
                     sentence.span_text(token_start, token_end), etype};
}

/// Converts a char span into a token span; fails unless both ends land on
/// token boundaries.
inline MentionSpan mention_from_chars(const Sentence& sentence, std::size_t char_start,
                                      std::size_t char_end, const EntityType& etype) {
  if (char_start >= char_end) {
    throw Error(ErrorKind::kSpanAlignment, "empty char span in sentence '" + sentence.id + "'");
  }
  const auto first = sentence.token_starting_at(char_start);
  const auto last = sentence.token_ending_at(char_end);
  if (!first || !last || *last < *first) {
    throw Error(ErrorKind::kSpanAlignment,
                "char span [" + std::to_string(char_start) + ", " + std::to_string(char_end) +
                    ") does not align with token boundaries in sentence '" + sentence.id + "'");
  }
  return make_mention(sentence, *first, *last + 1, etype);
}

inline std::pair<std::size_t, std::size_t> char_range(const Sentence& sentence,
                                                      const MentionSpan& mention) {
  return {sentence.tokens.at(mention.token_start).char_start,
          sentence.tokens.at(mention.token_end - 1).char_end};
}

struct BoundingBox {
  int x_min = 0;
  int y_min = 0;
  int x_max = 0;
  int y_max = 0;

  bool valid() const { return x_min < x_max && y_min < y_max; }
  bool fits(int width, int height) const {
    return x_min >= 0 && y_min >= 0 && x_max <= width && y_max <= height;
  }
  long long area() const {
    return static_cast<long long>(x_max - x_min) * static_cast<long long>(y_max - y_min);
  }

  friend bool operator==(const BoundingBox&, const BoundingBox&) = default;
  friend auto operator<=>(const BoundingBox&, const BoundingBox&) = default;
};

/// Region absent encodes an entity that is not depicted.
struct GmnerTriplet {
  MentionSpan mention;
  std::optional<BoundingBox> region;

  friend bool operator==(const GmnerTriplet&, const GmnerTriplet&) = default;
};

struct AnnotatedSample {
  Sentence sentence;
  std::vector<GmnerTriplet> triplets;
  std::string image_path;  // empty for text-only samples
  int image_w = 0;
  int image_h = 0;

  bool has_image() const { return !image_path.empty(); }

  std::vector<MentionSpan> mentions() const {
    std::vector<MentionSpan> out;
    for (const auto& t : triplets) out.push_back(t.mention);
    return out;
  }

  bool has_regions() const {
    return std::any_of(triplets.begin(), triplets.end(),
                       [](const GmnerTriplet& t) { return t.region.has_value(); });
  }
};

inline void check_no_overlap(std::vector<MentionSpan> spans) {
  std::sort(spans.begin(), spans.end(), span_less);
  for (std::size_t i = 1; i < spans.size(); ++i) {
    if (spans[i - 1].overlaps(spans[i])) {
      throw Error(ErrorKind::kOverlappingSpans,
                  "'" + spans[i - 1].surface + "' overlaps '" + spans[i].surface +
                      "' in sentence '" + spans[i].sentence_id + "'");
    }
  }
}

// ---------------------------------------------------------------------------
// Dataset file (JSON lines)

enum class DatasetFormat { kJsonLines };

struct LoadOptions {
  /// Accept records with "image": null (synthesized, text-only data).
  bool allow_text_only = false;
};

namespace detail {

[[noreturn]] inline void schema_fail(std::size_t line, const std::string& id, const std::string& field,
                                     const std::string& what) {
  std::string where = "line " + std::to_string(line);
  if (!id.empty()) where += " (record '" + id + "')";
  throw Error(ErrorKind::kSchemaViolation, where + ": " + field + ": " + what);
}

inline const json& require(const json& obj, const char* key, std::size_t line, const std::string& id,
                           const std::string& prefix) {
  if (!obj.is_object() || !obj.contains(key)) schema_fail(line, id, prefix + key, "missing");
  return obj.at(key);
}

inline int require_int(const json& obj, const char* key, std::size_t line, const std::string& id,
                       const std::string& prefix) {
  const auto& v = require(obj, key, line, id, prefix);
  if (!v.is_number_integer()) schema_fail(line, id, prefix + key, "expected integer");
  return v.get<int>();
}

}  // namespace detail

inline BoundingBox parse_box(const json& j, std::size_t line, const std::string& id,
                             const std::string& field) {
  BoundingBox b{detail::require_int(j, "x_min", line, id, field + "."),
                detail::require_int(j, "y_min", line, id, field + "."),
                detail::require_int(j, "x_max", line, id, field + "."),
                detail::require_int(j, "y_max", line, id, field + ".")};
  if (b.x_max <= b.x_min) detail::schema_fail(line, id, field, "x_max <= x_min");
  if (b.y_max <= b.y_min) detail::schema_fail(line, id, field, "y_max <= y_min");
  return b;
}

inline json box_to_json(const std::optional<BoundingBox>& box) {
  if (!box) return nullptr;
  return json{{"x_min", box->x_min}, {"y_min", box->y_min}, {"x_max", box->x_max}, {"y_max", box->y_max}};
}

/// Parses one dataset record. `line` is 1-based and only used in messages.
inline AnnotatedSample parse_record(const json& rec, std::size_t line, const Schema& schema,
                                    const LoadOptions& options = {}) {
  if (!rec.is_object()) detail::schema_fail(line, "", "record", "expected JSON object");
  std::string id = std::to_string(line);
  if (rec.contains("id")) {
    if (!rec["id"].is_string()) detail::schema_fail(line, "", "id", "expected string");
    id = rec["id"].get<std::string>();
  }
  const auto& text = detail::require(rec, "text", line, id, "");
  if (!text.is_string()) detail::schema_fail(line, id, "text", "expected string");

  AnnotatedSample sample;
  try {
    sample.sentence = Sentence::from_text(id, text.get<std::string>());
  } catch (const Error& e) {
    detail::schema_fail(line, id, "text", e.what());
  }

  const auto& image = detail::require(rec, "image", line, id, "");
  if (image.is_null()) {
    if (!options.allow_text_only) detail::schema_fail(line, id, "image", "null not allowed here");
  } else {
    const auto& path = detail::require(image, "path", line, id, "image.");
    if (!path.is_string() || path.get<std::string>().empty()) {
      detail::schema_fail(line, id, "image.path", "expected non-empty string");
    }
    sample.image_path = path.get<std::string>();
    sample.image_w = detail::require_int(image, "width", line, id, "image.");
    sample.image_h = detail::require_int(image, "height", line, id, "image.");
    if (sample.image_w <= 0 || sample.image_h <= 0) {
      detail::schema_fail(line, id, "image", "width and height must be positive");
    }
  }

  const auto& entities = detail::require(rec, "entities", line, id, "");
  if (!entities.is_array()) detail::schema_fail(line, id, "entities", "expected array");
  for (std::size_t k = 0; k < entities.size(); ++k) {
    const auto& ent = entities[k];
    const std::string field = "entities[" + std::to_string(k) + "]";
    const int cs = detail::require_int(ent, "char_start", line, id, field + ".");
    const int ce = detail::require_int(ent, "char_end", line, id, field + ".");
    const auto& type = detail::require(ent, "type", line, id, field + ".");
    if (!type.is_string()) detail::schema_fail(line, id, field + ".type", "expected string");
    const auto etype = schema.find(type.get<std::string>());
    if (!etype) {
      detail::schema_fail(line, id, field + ".type", "'" + type.get<std::string>() + "' not in schema");
    }
    if (cs < 0 || ce <= cs) detail::schema_fail(line, id, field, "char span must satisfy 0 <= start < end");

    GmnerTriplet triplet;
    try {
      triplet.mention = mention_from_chars(sample.sentence, static_cast<std::size_t>(cs),
                                           static_cast<std::size_t>(ce), *etype);
    } catch (const Error& e) {
      throw Error(ErrorKind::kSpanAlignment,
                  "line " + std::to_string(line) + " (record '" + id + "'): " + field + ": " + e.what());
    }
    if (ent.contains("box") && !ent["box"].is_null()) {
      auto box = parse_box(ent["box"], line, id, field + ".box");
      if (!sample.has_image()) detail::schema_fail(line, id, field + ".box", "box on a text-only record");
      if (!box.fits(sample.image_w, sample.image_h)) {
        detail::schema_fail(line, id, field + ".box", "outside image bounds");
      }
      triplet.region = box;
    }
    sample.triplets.push_back(std::move(triplet));
  }
  try {
    check_no_overlap(sample.mentions());
  } catch (const Error& e) {
    throw Error(ErrorKind::kOverlappingSpans, "line " + std::to_string(line) + ": " + e.what());
  }
  std::sort(sample.triplets.begin(), sample.triplets.end(),
            [](const GmnerTriplet& a, const GmnerTriplet& b) { return span_less(a.mention, b.mention); });
  return sample;
}

inline json record_to_json(const AnnotatedSample& sample) {
  json ents = json::array();
  for (const auto& t : sample.triplets) {
    const auto [cs, ce] = char_range(sample.sentence, t.mention);
    ents.push_back(json{{"char_start", cs}, {"char_end", ce}, {"type", t.mention.etype.name},
                        {"box", box_to_json(t.region)}});
  }
  json image = nullptr;
  if (sample.has_image()) {
    image = json{{"path", sample.image_path}, {"width", sample.image_w}, {"height", sample.image_h}};
  }
  return json{{"id", sample.sentence.id}, {"text", sample.sentence.text}, {"image", image}, {"entities", ents}};
}

/// Loads a dataset, returning samples in file order. Blank lines are skipped.
inline std::vector<AnnotatedSample> load_dataset(const std::filesystem::path& path, const Schema& schema,
                                                 DatasetFormat format = DatasetFormat::kJsonLines,
                                                 const LoadOptions& options = {}) {
  (void)format;
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::kIo, "cannot open dataset '" + path.string() + "'");
  std::vector<AnnotatedSample> out;
  std::set<std::string> ids;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    json rec;
    try {
      rec = json::parse(line);
    } catch (const json::parse_error& e) {
      detail::schema_fail(line_no, "", "record", std::string("invalid JSON: ") + e.what());
    }
    auto sample = parse_record(rec, line_no, schema, options);
    if (!ids.insert(sample.sentence.id).second) {
      detail::schema_fail(line_no, sample.sentence.id, "id", "duplicate record id");
    }
    out.push_back(std::move(sample));
  }
  return out;
}

inline void write_dataset(const std::filesystem::path& path, const std::vector<AnnotatedSample>& samples) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorKind::kIo, "cannot write '" + path.string() + "'");
  for (const auto& s : samples) out << record_to_json(s).dump() << '\n';
}

// ---------------------------------------------------------------------------
// BIO

inline std::vector<int> bio_encode(const Sentence& sentence, const std::vector<MentionSpan>& spans,
                                   const Schema& schema) {
  check_no_overlap(spans);
  std::vector<int> labels(sentence.size(), Schema::kOutside);
  for (const auto& s : spans) {
    if (s.token_start >= s.token_end || s.token_end > sentence.size()) {
      throw Error(ErrorKind::kSpanAlignment, "span out of range for sentence '" + sentence.id + "'");
    }
    const int id = schema.at(s.etype.name).id;
    labels[s.token_start] = Schema::begin_label(id);
    for (auto i = s.token_start + 1; i < s.token_end; ++i) labels[i] = Schema::inside_label(id);
  }
  return labels;
}

inline std::vector<int> bio_encode(const AnnotatedSample& sample, const Schema& schema) {
  return bio_encode(sample.sentence, sample.mentions(), schema);
}

/// Inverse of bio_encode. An I- tag that does not continue a span of the
/// same type opens a new span.
inline std::vector<MentionSpan> bio_decode(const std::vector<int>& labels, const Sentence& sentence,
                                           const Schema& schema) {
  if (labels.size() != sentence.size()) {
    throw Error(ErrorKind::kInvalidLabel, "label count " + std::to_string(labels.size()) +
                                              " != token count " + std::to_string(sentence.size()));
  }
  std::vector<MentionSpan> out;
  std::optional<std::size_t> start;
  int current = -1;
  auto close = [&](std::size_t end) {
    if (start) out.push_back(make_mention(sentence, *start, end, schema.types().at(current)));
    start.reset();
    current = -1;
  };
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const int l = labels[i];
    if (l < 0 || l >= schema.label_count()) {
      throw Error(ErrorKind::kInvalidLabel, "label id " + std::to_string(l) + " out of range");
    }
    if (l == Schema::kOutside) {
      close(i);
      continue;
    }
    const int type = Schema::type_of_label(l);
    if (Schema::is_begin(l) || !start || type != current) {
      close(i);
      start = i;
      current = type;
    }
  }
  close(labels.size());
  return out;
}

}  // namespace gmner

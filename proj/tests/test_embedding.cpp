#include <gtest/gtest.h>

#include <random>
#include <regex>

#include "support.hpp"

using namespace gmner;
using namespace gmner::testing;

namespace {

EmbeddingStore sample_store(StoreKind kind) {
  EmbeddingStore s(kind, 3);
  const std::vector<double> a{1.0, 0.5, -0.25}, b{0.0, 2.0, 8.0};
  s.add("first", a);
  s.add("second", b);
  return s;
}

}  // namespace

TEST(Cosine, HandComputedValues) {
  const std::vector<double> x{1, 0}, y{0, 1}, xy{1, 1}, big{5, 0};
  EXPECT_DOUBLE_EQ(cosine(x, big), 1.0);
  EXPECT_DOUBLE_EQ(cosine(x, y), 0.0);
  EXPECT_NEAR(cosine(x, xy), 0.70710678, 1e-8);
  EXPECT_DOUBLE_EQ(cosine(x, std::vector<double>{-3, 0}), -1.0);
}

TEST(Cosine, SymmetricScaleInvariantAndBounded) {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(-2, 2);
  std::uniform_real_distribution<double> pos(0.1, 10);
  for (int t = 0; t < 1000; ++t) {
    std::vector<double> a(4), b(4);
    for (auto& v : a) v = u(rng);
    for (auto& v : b) v = u(rng);
    const double c = cosine(a, b);
    EXPECT_GE(c, -1.0);
    EXPECT_LE(c, 1.0);
    EXPECT_DOUBLE_EQ(c, cosine(b, a));
    auto scaled = a;
    const double k = pos(rng);
    for (auto& v : scaled) v *= k;
    EXPECT_NEAR(cosine(scaled, b), c, 1e-12);
  }
}

TEST(Cosine, RejectsZeroNormAndDimMismatch) {
  const std::vector<double> zero{0, 0}, x{1, 0}, three{1, 0, 0};
  try {
    cosine(zero, x);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kZeroNorm);
  }
  try {
    cosine(x, three);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kDimMismatch);
  }
}

TEST(KeyScheme, MatchesExporterFormat) {
  EXPECT_EQ(sentence_key("tw_17"), "tw_17");
  EXPECT_EQ(token_key("tw_17", 4), "tw_17#4");
  // sha256("abc") = ba7816bf8f01cfea...
  EXPECT_EQ(entity_key("abc"), "ent:ba7816bf8f01cfea");
  EXPECT_EQ(image_key("abc"), "img:ba7816bf8f01cfea");
  const std::regex hex16("(ent|img):[0-9a-f]{16}");
  EXPECT_TRUE(std::regex_match(entity_key("MG5 machine gun"), hex16));
  EXPECT_TRUE(std::regex_match(image_key("img/tw_17.jpg"), hex16));
  EXPECT_NE(entity_key("MG5"), entity_key("mg5"));
  EXPECT_EQ(sha256_hex(""), "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
}

TEST(EmbeddingStore, AddRejectsBadVectors) {
  EmbeddingStore s(StoreKind::kSentence, 2);
  const std::vector<double> ok{1, 2}, short_v{1}, nan_v{1, std::nan("")}, inf_v{1, INFINITY};
  s.add("a", ok);
  auto kind = [&](const std::string& key, const std::vector<double>& v) {
    try {
      s.add(key, v);
    } catch (const Error& e) {
      return e.kind();
    }
    return ErrorKind::kIo;
  };
  EXPECT_EQ(kind("b", short_v), ErrorKind::kDimMismatch);
  EXPECT_EQ(kind("c", nan_v), ErrorKind::kNonFinite);
  EXPECT_EQ(kind("d", inf_v), ErrorKind::kNonFinite);
  EXPECT_EQ(kind("a", ok), ErrorKind::kDuplicateKey);
  EXPECT_EQ(s.size(), 1u);
  EXPECT_THROW(s.get("zzz"), Error);
  EXPECT_FALSE(s.find("zzz"));
}

TEST(EmbeddingStore, BinaryRoundTripIsFloat32Exact) {
  TempDir dir("emb");
  const auto s = sample_store(StoreKind::kEntity);
  s.save(dir / "e.bin");
  const auto back = load_store(dir / "e.bin", StoreKind::kEntity);
  EXPECT_EQ(back.kind(), StoreKind::kEntity);
  EXPECT_EQ(back.dim(), 3u);
  EXPECT_EQ(back.keys(), s.keys());
  for (const auto& key : s.keys()) {
    const auto a = s.get(key), b = back.get(key);
    for (std::size_t d = 0; d < 3; ++d) EXPECT_EQ(b[d], static_cast<double>(static_cast<float>(a[d])));
  }
  const auto bytes = slurp(dir / "e.bin");
  EXPECT_EQ(bytes.substr(0, 4), "EMB1");
  EXPECT_EQ(bytes[4], 2);
  // header 13 bytes, then per record u16 + key + 3 floats
  EXPECT_EQ(bytes.size(), 13u + (2 + 5 + 12) + (2 + 6 + 12));
}

TEST(EmbeddingStore, BinaryRejectsCorruption) {
  TempDir dir("embbad");
  sample_store(StoreKind::kImage).save(dir / "i.bin");
  const auto bytes = slurp(dir / "i.bin");
  auto write = [&](const std::string& content) {
    std::ofstream(dir / "x.bin", std::ios::binary) << content;
  };
  write(bytes.substr(0, bytes.size() - 2));
  EXPECT_THROW(load_store(dir / "x.bin"), Error);
  write(bytes + "z");
  EXPECT_THROW(load_store(dir / "x.bin"), Error);
  EXPECT_THROW(load_store(dir / "i.bin", StoreKind::kToken), Error);
}

TEST(EmbeddingStore, JsonLinesFallback) {
  TempDir dir("embjson");
  std::ofstream(dir / "s.jsonl") << "{\"kind\": \"sentence\", \"dim\": 2}\n"
                                 << "{\"key\": \"s1\", \"vec\": [0.5, 1.5]}\n\n"
                                 << "{\"key\": \"s2\", \"vec\": [2, -1]}\n";
  const auto s = load_store(dir / "s.jsonl", StoreKind::kSentence);
  EXPECT_EQ(s.size(), 2u);
  EXPECT_DOUBLE_EQ(s.get("s1")[1], 1.5);

  std::ofstream(dir / "dup.jsonl") << "{\"kind\": \"sentence\", \"dim\": 2}\n"
                                   << "{\"key\": \"s1\", \"vec\": [0.5, 1.5]}\n{\"key\": \"s1\", \"vec\": [1, 1]}\n";
  EXPECT_THROW(load_store(dir / "dup.jsonl"), Error);
  std::ofstream(dir / "dim.jsonl") << "{\"kind\": \"token\", \"dim\": 2}\n{\"key\": \"t\", \"vec\": [1, 2, 3]}\n";
  EXPECT_THROW(load_store(dir / "dim.jsonl"), Error);
  std::ofstream(dir / "nan.jsonl") << "{\"kind\": \"token\", \"dim\": 2}\n{\"key\": \"t\", \"vec\": [1, null]}\n";
  EXPECT_THROW(load_store(dir / "nan.jsonl"), Error);
  std::ofstream(dir / "kind.jsonl") << "{\"kind\": \"token\", \"dim\": 2}\n";
  EXPECT_THROW(load_store(dir / "kind.jsonl", StoreKind::kImage), Error);
  EXPECT_EQ(load_store(dir / "kind.jsonl").size(), 0u);
}

TEST(EmbeddingStore, FixtureStoresCoverTheirDatasets) {
  const auto e2e = fixture_dir() / "e2e";
  const auto schema = e2e_schema();
  const auto test = load_dataset(e2e / "test.jsonl", schema);
  const auto tokens = load_store(e2e / "stores" / "tokens.emb", StoreKind::kToken);
  const auto sentences = load_store(e2e / "stores" / "sentences.emb", StoreKind::kSentence);
  for (const auto& s : test) {
    EXPECT_TRUE(sentences.contains(sentence_key(s.sentence.id))) << s.sentence.id;
    for (std::size_t i = 0; i < s.sentence.size(); ++i) {
      EXPECT_TRUE(tokens.contains(token_key(s.sentence.id, i))) << s.sentence.id << " " << i;
    }
  }
}

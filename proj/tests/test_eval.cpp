#include <gtest/gtest.h>

#include <algorithm>
#include <random>

#include "support.hpp"

using namespace gmner;
using namespace gmner::testing;

namespace {

const Schema kSchema({"PER", "LOC"});

GmnerTriplet trip(const Sentence& s, std::size_t a, std::size_t b, const std::string& type,
                  std::optional<BoundingBox> box = std::nullopt) {
  return GmnerTriplet{make_mention(s, a, b, kSchema.at(type)), box};
}

}  // namespace

TEST(Iou, HandComputedCases) {
  EXPECT_DOUBLE_EQ(iou({0, 0, 10, 10}, {0, 0, 10, 10}), 1.0);
  EXPECT_DOUBLE_EQ(iou({0, 0, 10, 10}, {10, 0, 20, 10}), 0.0);
  EXPECT_DOUBLE_EQ(iou({0, 0, 10, 10}, {5, 0, 15, 10}), 50.0 / 150.0);
  EXPECT_DOUBLE_EQ(iou({0, 0, 10, 10}, {0, 0, 5, 10}), 0.5);
  EXPECT_DOUBLE_EQ(iou({0, 0, 4, 4}, {1, 1, 3, 3}), 0.25);
  EXPECT_THROW(iou({0, 0, 0, 4}, {0, 0, 4, 4}), Error);
}

TEST(Iou, SymmetricAndBounded) {
  std::mt19937_64 rng(9);
  std::uniform_int_distribution<int> c(0, 30);
  auto box = [&] {
    int x0 = c(rng), x1 = c(rng), y0 = c(rng), y1 = c(rng);
    if (x0 > x1) std::swap(x0, x1);
    if (y0 > y1) std::swap(y0, y1);
    return BoundingBox{x0, y0, x1 + 1, y1 + 1};
  };
  for (int t = 0; t < 2000; ++t) {
    const auto a = box(), b = box();
    const double v = iou(a, b);
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, 1.0);
    EXPECT_DOUBLE_EQ(v, iou(b, a));
    EXPECT_DOUBLE_EQ(iou(a, a), 1.0);
  }
}

TEST(RegionMatch, ThresholdIsStrict) {
  EXPECT_TRUE(region_match(std::nullopt, std::nullopt));
  EXPECT_FALSE(region_match(BoundingBox{0, 0, 5, 5}, std::nullopt));
  EXPECT_FALSE(region_match(std::nullopt, BoundingBox{0, 0, 5, 5}));
  EXPECT_FALSE(region_match(BoundingBox{0, 0, 10, 10}, BoundingBox{0, 0, 5, 10}));  // exactly 0.5
  EXPECT_TRUE(region_match(BoundingBox{0, 0, 10, 10}, BoundingBox{0, 0, 6, 10}));
}

TEST(Score, SpanTypeAndRegionMustAllMatch) {
  const auto s = Sentence::from_text("s", "Anna went to Oslo today");
  const std::vector<GmnerTriplet> gold{trip(s, 0, 1, "PER", BoundingBox{0, 0, 10, 10}), trip(s, 3, 4, "LOC")};
  const std::vector<GmnerTriplet> pred{trip(s, 0, 1, "PER", BoundingBox{1, 1, 10, 10}),  // iou .81
                                       trip(s, 3, 5, "LOC")};                              // wrong span
  const auto r = score(pred, gold);
  EXPECT_EQ(r.gmner.correct, 1u);
  EXPECT_EQ(r.ner.correct, 1u);
  EXPECT_DOUBLE_EQ(r.gmner.f1(), 0.5);

  const std::vector<GmnerTriplet> wrong_region{trip(s, 0, 1, "PER", BoundingBox{20, 20, 30, 30}), trip(s, 3, 4, "LOC")};
  const auto r2 = score(wrong_region, gold);
  EXPECT_EQ(r2.gmner.correct, 1u);
  EXPECT_EQ(r2.ner.correct, 2u);
  EXPECT_EQ(r2.per_type.at("PER").correct, 0u);
  EXPECT_EQ(r2.per_type.at("LOC").correct, 1u);

  const std::vector<GmnerTriplet> wrong_type{trip(s, 3, 4, "PER")};
  EXPECT_EQ(score(wrong_type, gold).ner.correct, 0u);
}

TEST(Score, OneGoldMatchesAtMostOnePrediction) {
  const auto s = Sentence::from_text("s", "Anna smiled");
  const std::vector<GmnerTriplet> gold{trip(s, 0, 1, "PER", BoundingBox{0, 0, 10, 10})};
  const std::vector<GmnerTriplet> pred{trip(s, 0, 1, "PER", BoundingBox{0, 0, 10, 9}),
                                       trip(s, 0, 1, "PER", BoundingBox{0, 0, 9, 10})};
  const auto r = score(pred, gold);
  EXPECT_EQ(r.gmner.correct, 1u);
  EXPECT_EQ(r.gmner.predicted, 2u);
  EXPECT_DOUBLE_EQ(r.gmner.precision(), 0.5);
  EXPECT_DOUBLE_EQ(r.gmner.recall(), 1.0);
  EXPECT_EQ(r.ner.predicted, 1u);  // both collapse to one span
}

TEST(Score, DuplicatePredictionsCountOnce) {
  const auto s = Sentence::from_text("s", "Anna smiled");
  const std::vector<GmnerTriplet> gold{trip(s, 0, 1, "PER")};
  const auto r = score({gold[0], gold[0], gold[0]}, gold);
  EXPECT_EQ(r.gmner.predicted, 1u);
  EXPECT_DOUBLE_EQ(r.gmner.f1(), 1.0);
}

TEST(Score, EmptyConventions) {
  const auto s = Sentence::from_text("s", "Anna smiled");
  const std::vector<GmnerTriplet> gold{trip(s, 0, 1, "PER")};
  const auto none = score({}, gold);
  EXPECT_DOUBLE_EQ(none.gmner.precision(), 0.0);
  EXPECT_DOUBLE_EQ(none.gmner.recall(), 0.0);
  EXPECT_DOUBLE_EQ(none.gmner.f1(), 0.0);
  EXPECT_DOUBLE_EQ(score({}, {}).gmner.f1(), 0.0);
}

TEST(Score, PermutationInvariantAndBounded) {
  const auto data = load_dataset(fixture_dir() / "e2e" / "test.jsonl", e2e_schema());
  const auto gold = all_triplets(data);
  std::mt19937_64 rng(21);
  for (int t = 0; t < 200; ++t) {
    std::vector<GmnerTriplet> pred;
    for (const auto& g : gold) {
      if (rng() % 4 == 0) continue;
      auto p = g;
      if (p.region && rng() % 3 == 0) p.region->x_max = p.region->x_min + 1;
      pred.push_back(p);
    }
    const auto r = score(pred, gold);
    std::shuffle(pred.begin(), pred.end(), rng);
    auto shuffled_gold = gold;
    std::shuffle(shuffled_gold.begin(), shuffled_gold.end(), rng);
    const auto r2 = score(pred, shuffled_gold);
    EXPECT_EQ(r.gmner.correct, r2.gmner.correct);
    EXPECT_EQ(r.ner.correct, r2.ner.correct);
    EXPECT_LE(r.gmner.correct, r.ner.correct);
    EXPECT_GE(r.gmner.f1(), 0.0);
    EXPECT_LE(r.gmner.f1(), 1.0);
  }
  EXPECT_DOUBLE_EQ(score(gold, gold).gmner.f1(), 1.0);
}

TEST(Report, JsonAndTable) {
  const auto s = Sentence::from_text("s", "Anna went to Oslo");
  const auto r = score({trip(s, 0, 1, "PER")}, {trip(s, 0, 1, "PER"), trip(s, 3, 4, "LOC")});
  const auto j = to_json(r);
  EXPECT_DOUBLE_EQ(j["gmner"]["precision"].get<double>(), 1.0);
  EXPECT_DOUBLE_EQ(j["gmner"]["recall"].get<double>(), 0.5);
  EXPECT_EQ(j["per_type"]["LOC"]["gold"].get<int>(), 1);
  const auto table = format_table(r);
  EXPECT_NE(table.find("GMNER"), std::string::npos);
  EXPECT_NE(table.find("  LOC"), std::string::npos);
}

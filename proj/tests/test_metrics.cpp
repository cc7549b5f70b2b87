#include <gtest/gtest.h>

#include <algorithm>
#include <numeric>
#include <random>
#include <set>

#include "linsem/metrics.hpp"
#include "linsem/probe.hpp"
#include "linsem/train.hpp"
#include "test_util.hpp"

using namespace linsem;

namespace {

using PixelSet = std::set<std::pair<int, int>>;

PixelSet pixels_of(const SemanticMask& m, int k) {
  PixelSet s;
  for (int y = 0; y < m.height; ++y)
    for (int x = 0; x < m.width; ++x)
      if (m.at(y, x) == k) s.insert({y, x});
  return s;
}

// Set-based IoU; nullopt for an empty union.
std::optional<double> set_iou(const PixelSet& a, const PixelSet& b) {
  PixelSet inter, uni;
  std::set_intersection(a.begin(), a.end(), b.begin(), b.end(), std::inserter(inter, inter.end()));
  std::set_union(a.begin(), a.end(), b.begin(), b.end(), std::inserter(uni, uni.end()));
  if (uni.empty()) return std::nullopt;
  return static_cast<double>(inter.size()) / static_cast<double>(uni.size());
}

double oracle_miou(const std::vector<SemanticMask>& preds, const std::vector<SemanticMask>& gts, int m) {
  double total = 0.0;
  int present = 0;
  for (int k = 0; k < m; ++k) {
    double s = 0.0;
    int n = 0;
    for (std::size_t i = 0; i < preds.size(); ++i) {
      if (auto v = set_iou(pixels_of(preds[i], k), pixels_of(gts[i], k))) {
        s += *v;
        ++n;
      }
    }
    if (n) {
      total += s / n;
      ++present;
    }
  }
  return total / present;
}

BinaryMask binary_from(const PixelSet& s, int h, int w) {
  BinaryMask b(h, w);
  for (auto [y, x] : s) b.set(y, x, true);
  return b;
}

class ConstantSegmenter final : public Segmenter {
 public:
  ConstantSegmenter(int m, int res, int label) : m_(m), res_(res), label_(label) {}
  int num_classes() const override { return m_; }
  SemanticMask segment(const LatentVector&, const FeatureStack&) const override {
    return SemanticMask(res_, res_, label_);
  }

 private:
  int m_, res_, label_;
};

}  // namespace

TEST(Iou, Examples) {
  const PixelSet a{{0, 0}, {0, 1}}, b{{0, 1}, {1, 1}};
  EXPECT_DOUBLE_EQ(*iou(binary_from(a, 2, 2), binary_from(b, 2, 2)), 1.0 / 3.0);
  EXPECT_DOUBLE_EQ(*iou(binary_from(a, 2, 2), binary_from(a, 2, 2)), 1.0);
  EXPECT_DOUBLE_EQ(*iou(binary_from({{0, 0}}, 2, 2), binary_from({{1, 1}}, 2, 2)), 0.0);
  EXPECT_FALSE(iou(BinaryMask(2, 2), BinaryMask(2, 2)).has_value());
  EXPECT_THROW(iou(BinaryMask(2, 2), BinaryMask(2, 3)), ShapeError);
}

TEST(Iou, SymmetricAndMatchesSetOracle) {
  std::mt19937_64 rng(1);
  for (int t = 0; t < 200; ++t) {
    const SemanticMask a = testutil::random_mask(rng, 4, 4, 2);
    const SemanticMask b = testutil::random_mask(rng, 4, 4, 2);
    const auto ba = BinaryMask::of_class(a, 1);
    const auto bb = BinaryMask::of_class(b, 1);
    const auto v = iou(ba, bb);
    const auto o = set_iou(pixels_of(a, 1), pixels_of(b, 1));
    ASSERT_EQ(v.has_value(), o.has_value());
    if (v) {
      EXPECT_NEAR(*v, *o, 1e-12);
      EXPECT_EQ(*v, *iou(bb, ba));
      EXPECT_GE(*v, 0.0);
      EXPECT_LE(*v, 1.0);
    }
  }
}

TEST(Iou, MonotoneInIntersection) {
  // Union fixed at {a, b, c}; moving c into both sets grows the intersection.
  const BinaryMask a = binary_from({{0, 0}, {0, 1}}, 2, 2);
  const BinaryMask b = binary_from({{0, 1}, {1, 0}}, 2, 2);
  const BinaryMask a2 = binary_from({{0, 0}, {0, 1}, {1, 0}}, 2, 2);
  EXPECT_LE(*iou(a, b), *iou(a2, b));
}

TEST(Miou, IdenticalMasksGiveOne) {
  std::mt19937_64 rng(2);
  std::vector<SemanticMask> m;
  for (int i = 0; i < 5; ++i) m.push_back(testutil::random_mask(rng, 6, 6, 4));
  const ClassReport r = miou(m, m, 4);
  EXPECT_DOUBLE_EQ(r.miou, 1.0);
  EXPECT_EQ(r.samples, 5u);
  EXPECT_EQ(r.class_names, default_class_names(4));
}

TEST(Miou, AbsentClassExcluded) {
  SemanticMask a(2, 2, 0), b(2, 2, 0);
  a.labels[0] = 1;
  b.labels[1] = 1;
  const ClassReport r = miou(std::vector{a}, std::vector{b}, 3);
  EXPECT_FALSE(r.per_class[2].has_value());
  EXPECT_EQ(r.present_classes(), 2u);
  EXPECT_NEAR(*r.per_class[0], 2.0 / 4.0, 1e-12);
  EXPECT_NEAR(*r.per_class[1], 0.0, 1e-12);
  EXPECT_NEAR(r.miou, 0.25, 1e-12);
}

TEST(Miou, MatchesSetOracleOnRandomBatches) {
  std::mt19937_64 rng(3);
  for (int batch = 0; batch < 20; ++batch) {
    std::vector<SemanticMask> p, g;
    for (int i = 0; i < 10; ++i) {
      p.push_back(testutil::random_mask(rng, 4, 4, 3));
      g.push_back(testutil::random_mask(rng, 4, 4, 3));
    }
    const ClassReport r = miou(p, g, 3);
    EXPECT_NEAR(r.miou, oracle_miou(p, g, 3), 1e-9);
    double mean = 0.0;
    for (const auto& v : r.per_class) mean += *v;
    EXPECT_NEAR(r.miou, mean / 3.0, 1e-12);
  }
}

TEST(Miou, PermutationInvariant) {
  std::mt19937_64 rng(4);
  std::vector<SemanticMask> p, g;
  for (int i = 0; i < 8; ++i) {
    p.push_back(testutil::random_mask(rng, 5, 5, 4));
    g.push_back(testutil::random_mask(rng, 5, 5, 4));
  }
  const double base = miou(p, g, 4).miou;
  std::vector<std::size_t> idx(8);
  std::iota(idx.begin(), idx.end(), 0);
  std::shuffle(idx.begin(), idx.end(), rng);
  std::vector<SemanticMask> p2, g2;
  for (std::size_t i : idx) {
    p2.push_back(p[i]);
    g2.push_back(g[i]);
  }
  EXPECT_NEAR(miou(p2, g2, 4).miou, base, 1e-12);
}

TEST(Miou, Errors) {
  SemanticMask a(2, 2, 0), b(2, 2, 3);
  EXPECT_THROW(miou(std::vector{a}, std::vector{b}, 3), std::out_of_range);
  EXPECT_THROW(miou(std::vector{a}, std::vector<SemanticMask>{}, 3), std::invalid_argument);
  EXPECT_THROW(miou(std::vector<SemanticMask>{}, std::vector<SemanticMask>{}, 3), std::invalid_argument);
  EXPECT_THROW(miou(std::vector{a}, std::vector{SemanticMask(2, 3, 0)}, 3), ShapeError);
}

TEST(EvaluateProbe, OracleProbeScoresOne) {
  const SyntheticGenerator gen(testutil::small_config());
  const AnalyticSegmenter seg(gen);
  const ClassReport r = evaluate_probe(gen, seg, seg, 16, 7);
  EXPECT_DOUBLE_EQ(r.miou, 1.0);
  EXPECT_EQ(r.samples, 16u);
}

TEST(EvaluateProbe, ConstantBackgroundProbe) {
  const SyntheticGenerator gen(GeneratorConfig{});
  const AnalyticSegmenter seg(gen);
  const ConstantSegmenter bg(5, gen.output_resolution(), 0);
  const ClassReport r = evaluate_probe(gen, seg, bg, 16, 1);
  EXPECT_LT(*r.per_class[0], 1.0);
  for (int k = 1; k < 5; ++k)
    if (r.per_class[k]) EXPECT_DOUBLE_EQ(*r.per_class[k], 0.0);
}

TEST(EvaluateProbe, ReproducibleAndDisjointFromTraining) {
  const SyntheticGenerator gen(testutil::small_config());
  const AnalyticSegmenter seg(gen);
  std::mt19937_64 rng(5);
  ProbeWeights w = ProbeWeights::zeros(3, gen.layer_depths());
  std::normal_distribution<double> n;
  for (Matrix& t : w.layers)
    for (double& v : t.data()) v = n(rng);
  const LsePredictor p(w);
  EXPECT_EQ(evaluate_probe(gen, seg, p, 12, 3), evaluate_probe(gen, seg, p, 12, 3));
  EXPECT_THROW(evaluate_probe(gen, seg, p, 0, 3), std::invalid_argument);
  EXPECT_NE(evaluation_latent(3, 0, 8), training_latent(3, 0, 8));
}

TEST(RelativeGap, ReferenceTableGaps) {
  // (extractor, best, bracketed percentage)
  const double rows[][3] = {{65.5, 66.5, -1.6}, {33.2, 34.3, -3.2}, {51.3, 53.0, -3.2}, {69.1, 70.5, -1.9},
                            {39.9, 43.3, -7.8}, {35.4, 37.8, -6.3}, {79.7, 81.0, -1.7}, {53.9, 55.8, -3.4},
                            {37.7, 38.7, -2.6}, {65.9, 66.5, -0.9}, {30.7, 34.3, -10.5}, {49.5, 53.0, -6.6},
                            {70.1, 70.5, -0.5}, {38.9, 43.3, -10.2}, {34.0, 37.8, -10.1}, {80.2, 81.0, -1.1},
                            {52.1, 55.8, -6.8}, {35.3, 38.7, -8.8}};
  for (const auto& r : rows) EXPECT_NEAR(100.0 * relative_gap(r[0], r[1]), r[2], 0.2) << r[0] << " vs " << r[1];
  EXPECT_NEAR(100.0 * relative_gap(79.7, 81.0), -1.6, 0.2);
  EXPECT_NEAR(100.0 * relative_gap(30.7, 34.3), -10.5, 0.05);
  EXPECT_EQ(relative_gap(0.5, 0.5), 0.0);
  EXPECT_THROW(relative_gap(0.5, 0.0), std::invalid_argument);
  EXPECT_THROW(relative_gap(0.5, -1.0), std::invalid_argument);
}

TEST(RelativeGap, FormattedRow) {
  EXPECT_EQ(format_gap_row("NSE-1", 0.81, 0.81), "NSE-1     81.0");
  EXPECT_EQ(format_gap_row("LSE", 0.797, 0.81), "LSE       79.7 (-1.6)");
}

namespace {

ClassReport report_of(std::vector<std::optional<double>> v) {
  ClassReport r;
  r.per_class = std::move(v);
  r.class_names = default_class_names(static_cast<int>(r.per_class.size()));
  return r;
}

}  // namespace

TEST(SelectCategories, Examples) {
  const std::vector<ClassReport> low{report_of({0.05, 0.02, 0.0}), report_of({0.09, 0.0, 0.01})};
  EXPECT_TRUE(select_categories(low).empty());
  const std::vector<ClassReport> one{report_of({0.0, 0.12, 0.0}), report_of({0.0, 0.0, 0.0})};
  EXPECT_EQ(select_categories(one), std::vector<int>{1});
  EXPECT_THROW(select_categories(std::vector<ClassReport>{}), std::invalid_argument);
  const std::vector<ClassReport> ragged{report_of({0.5}), report_of({0.5, 0.5})};
  EXPECT_THROW(select_categories(ragged), std::invalid_argument);
}

TEST(SelectCategories, MatchesMaxFilterOracle) {
  std::mt19937_64 rng(6);
  std::uniform_real_distribution<double> u(0.0, 0.3);
  for (int t = 0; t < 50; ++t) {
    std::vector<ClassReport> reps;
    for (int e = 0; e < 3; ++e) {
      std::vector<std::optional<double>> v;
      for (int k = 0; k < 6; ++k) v.push_back(u(rng) < 0.02 ? std::optional<double>{} : std::optional(u(rng)));
      reps.push_back(report_of(v));
    }
    std::vector<int> expected;
    for (int k = 0; k < 6; ++k) {
      double best = -1.0;
      for (const auto& r : reps)
        if (r.per_class[k]) best = std::max(best, *r.per_class[k]);
      if (best >= 0.10) expected.push_back(k);
    }
    EXPECT_EQ(select_categories(reps), expected);
  }
}

TEST(ScsAgreement, Examples) {
  std::mt19937_64 rng(7);
  const SemanticMask t = testutil::random_mask(rng, 4, 4, 3);
  const SemanticMask s = testutil::random_mask(rng, 4, 4, 3);
  const std::vector<SemanticMask> targets{t};
  EXPECT_DOUBLE_EQ(scs_agreement(targets, std::vector<std::vector<SemanticMask>>{{t, t}}, 3), 1.0);
  EXPECT_NEAR(scs_agreement(targets, std::vector<std::vector<SemanticMask>>{{s}}, 3), miou_pair(s, t, 3), 1e-12);
  EXPECT_THROW(scs_agreement(targets, std::vector<std::vector<SemanticMask>>{{}}, 3), std::invalid_argument);
  EXPECT_THROW(scs_agreement(targets, std::vector<std::vector<SemanticMask>>{}, 3), std::invalid_argument);
}

TEST(ScsAgreement, MatchesFlatAverageOracle) {
  std::mt19937_64 rng(8);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<SemanticMask> targets;
    std::vector<std::vector<SemanticMask>> sets;
    double oracle = 0.0;
    for (int i = 0; i < 3; ++i) {
      targets.push_back(testutil::random_mask(rng, 4, 4, 3));
      sets.emplace_back();
      for (int j = 0; j < 2; ++j) {
        sets.back().push_back(testutil::random_mask(rng, 4, 4, 3));
        oracle += oracle_miou({sets.back().back()}, {targets.back()}, 3);
      }
    }
    const double v = scs_agreement(targets, sets, 3);
    EXPECT_NEAR(v, oracle / 6.0, 1e-9);
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, 1.0);
  }
}

TEST(ClassReport, TextAndJsonRoundTrip) {
  ClassReport r = report_of({0.9, std::nullopt, 0.25});
  r.miou = 0.575;
  r.samples = 12;
  EXPECT_EQ(report_from_json(to_json(r)), r);
  EXPECT_EQ(report_from_json(nlohmann::json::parse(to_json(r).dump())), r);
  const std::string table = to_table(r);
  EXPECT_NE(table.find("shape1\tabsent"), std::string::npos);
  EXPECT_NE(table.find("background\t0.900000"), std::string::npos);
  EXPECT_NE(table.find("mIoU\t0.575000"), std::string::npos);
  EXPECT_NE(table.find("samples\t12"), std::string::npos);
}

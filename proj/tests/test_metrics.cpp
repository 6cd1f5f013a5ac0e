#include <gtest/gtest.h>

#include <cmath>

#include "sbanet/errors.hpp"
#include "sbanet/metrics.hpp"
#include "sbanet/model.hpp"
#include "sbanet/synth.hpp"
#include "util.hpp"

using namespace sbanet;

namespace {

// Mask with the first `on` pixels (row-major) set.
BinaryMask prefix_mask(std::size_t h, std::size_t w, std::size_t on, std::size_t skip = 0) {
  BinaryMask m(h, w);
  for (std::size_t i = skip; i < skip + on; ++i) m.bits[i] = 1;
  return m;
}

BinaryMask random_mask(Rng& rng, std::size_t h, std::size_t w, double density) {
  BinaryMask m(h, w);
  for (auto& b : m.bits) b = rng.uniform() < density;
  return m;
}

}  // namespace

TEST(Iou, Identical) {
  const auto m = prefix_mask(4, 4, 5);
  EXPECT_EQ(iou(m, m), 1.0);
}

TEST(Iou, Disjoint) { EXPECT_EQ(iou(prefix_mask(4, 4, 4), prefix_mask(4, 4, 4, 8)), 0.0); }

TEST(Iou, CoveringPrediction) { EXPECT_EQ(iou(prefix_mask(4, 4, 16), prefix_mask(4, 4, 8)), 0.5); }

TEST(Iou, EmptyUnionCountsAsOne) { EXPECT_EQ(iou(BinaryMask(3, 3), BinaryMask(3, 3)), 1.0); }

TEST(Iou, ShapeMismatch) { EXPECT_THROW(iou(BinaryMask(3, 3), BinaryMask(3, 4)), ShapeError); }

TEST(Aggregate, EqualAreasOneHitOneMiss) {
  const std::vector<BinaryMask> gts = {prefix_mask(4, 4, 4), prefix_mask(4, 4, 4)};
  const std::vector<BinaryMask> preds = {prefix_mask(4, 4, 4), prefix_mask(4, 4, 4, 8)};
  const auto r = aggregate(preds, gts);
  EXPECT_EQ(r.miou, 0.5);
  // Second sample: intersection 0, union 8.
  EXPECT_DOUBLE_EQ(r.oiou, 4.0 / 12.0);
  EXPECT_EQ(r.count, 2u);
  EXPECT_EQ(r.per_sample_iou, (std::vector<double>{1.0, 0.0}));
}

TEST(Aggregate, EqualUnionAreaHand) {
  // Both unions are 8 pixels: IoU 1 (8/8) and 0 (0/8) → mIoU = oIoU = 0.5.
  const std::vector<BinaryMask> gts = {prefix_mask(4, 4, 8), prefix_mask(4, 4, 4)};
  const std::vector<BinaryMask> preds = {prefix_mask(4, 4, 8), prefix_mask(4, 4, 4, 4)};
  const auto r = aggregate(preds, gts);
  EXPECT_EQ(r.miou, 0.5);
  EXPECT_EQ(r.oiou, 0.5);
}

TEST(Aggregate, LargeObjectsDominateOverallIou) {
  // Sample 1: union 100, intersection 90. Sample 2: union 10, intersection 1.
  std::vector<BinaryMask> gts = {prefix_mask(10, 10, 100), prefix_mask(10, 10, 1)};
  std::vector<BinaryMask> preds = {prefix_mask(10, 10, 90), prefix_mask(10, 10, 10)};
  const auto r = aggregate(preds, gts);
  EXPECT_DOUBLE_EQ(r.miou, 0.5);
  const auto o = oracle::count_corpus(preds, gts, kDefaultThresholds);
  EXPECT_EQ(r.oiou, o.oiou);
  EXPECT_DOUBLE_EQ(r.oiou, 91.0 / 110.0);
  EXPECT_GT(r.oiou, r.miou);
}

TEST(Aggregate, PrecisionAtThresholds) {
  // Unions of 20 with intersections 12, 16, 19: IoU 0.6, 0.8, 0.95.
  std::vector<BinaryMask> gts, preds;
  for (std::size_t inter : {12u, 16u, 19u}) {
    gts.push_back(prefix_mask(5, 5, 20));
    preds.push_back(prefix_mask(5, 5, inter));
  }
  const auto r = aggregate(preds, gts);
  EXPECT_EQ(r.pr_at(0.5), 1.0);
  EXPECT_DOUBLE_EQ(r.pr_at(0.7), 2.0 / 3.0);
  EXPECT_DOUBLE_EQ(r.pr_at(0.9), 1.0 / 3.0);
  EXPECT_THROW(r.pr_at(0.6), ContractError);
}

TEST(Aggregate, ThresholdIsStrict) {
  const std::vector<BinaryMask> gts = {prefix_mask(2, 2, 4)};
  const std::vector<BinaryMask> preds = {prefix_mask(2, 2, 2)};
  EXPECT_EQ(aggregate(preds, gts).pr_at(0.5), 0.0);
}

TEST(Aggregate, Errors) {
  EXPECT_THROW(aggregate({}, {}), ContractError);
  const std::vector<BinaryMask> one = {prefix_mask(2, 2, 1)};
  const std::vector<double> bad = {0.0};
  EXPECT_THROW(aggregate(one, one, bad), ContractError);
  const std::vector<BinaryMask> two = {prefix_mask(2, 2, 1), prefix_mask(2, 2, 1)};
  EXPECT_THROW(aggregate(one, two), ContractError);
}

TEST(Aggregate, MatchesPixelCountingOracle) {
  for (std::uint64_t corpus = 0; corpus < 50; ++corpus) {
    Rng rng(derive_seed(5, corpus));
    const std::size_t n = 1 + rng.below(12);
    std::vector<BinaryMask> preds, gts;
    for (std::size_t s = 0; s < n; ++s) {
      const std::size_t h = 2 + rng.below(9), w = 2 + rng.below(9);
      gts.push_back(random_mask(rng, h, w, rng.uniform(0.05, 0.6)));
      preds.push_back(random_mask(rng, h, w, rng.uniform(0.0, 0.7)));
    }
    const auto r = aggregate(preds, gts);
    const auto o = oracle::count_corpus(preds, gts, kDefaultThresholds);
    EXPECT_EQ(r.oiou, o.oiou);
    EXPECT_EQ(r.miou, o.miou);
    ASSERT_EQ(r.pr.size(), o.pr.size());
    for (std::size_t k = 0; k < o.pr.size(); ++k) EXPECT_EQ(r.pr[k].second, o.pr[k]);
  }
}

TEST(Aggregate, PrIsMonotone) {
  std::vector<double> thresholds;
  for (int k = 1; k < 20; ++k) thresholds.push_back(k / 20.0);
  for (std::uint64_t corpus = 0; corpus < 30; ++corpus) {
    Rng rng(derive_seed(6, corpus));
    std::vector<BinaryMask> preds, gts;
    for (std::size_t s = 0; s < 10; ++s) {
      gts.push_back(random_mask(rng, 6, 6, 0.4));
      preds.push_back(random_mask(rng, 6, 6, 0.4));
    }
    const auto r = aggregate(preds, gts, thresholds);
    for (std::size_t k = 1; k < r.pr.size(); ++k) EXPECT_LE(r.pr[k].second, r.pr[k - 1].second);
    for (double v : r.per_sample_iou) {
      EXPECT_GE(v, 0.0);
      EXPECT_LE(v, 1.0);
    }
  }
}

TEST(Aggregate, EqualUnionsMakeMeanAndOverallAgree) {
  for (std::uint64_t corpus = 0; corpus < 20; ++corpus) {
    Rng rng(derive_seed(7, corpus));
    const std::size_t u = 10 + rng.below(20);
    std::vector<BinaryMask> preds, gts;
    for (std::size_t s = 0; s < 8; ++s) {
      gts.push_back(prefix_mask(6, 6, u));
      preds.push_back(prefix_mask(6, 6, rng.below(u + 1)));
    }
    const auto r = aggregate(preds, gts);
    EXPECT_NEAR(r.miou, r.oiou, 1e-12);
  }
}

TEST(Evaluate, StubPredictors) {
  const auto data = make_dataset(generate_dataset(3, 6));
  const auto perfect = evaluate(data, [](const Sample& s) { return s.mask; });
  EXPECT_EQ(perfect.miou, 1.0);
  EXPECT_EQ(perfect.oiou, 1.0);
  for (const auto& [t, v] : perfect.pr) EXPECT_EQ(v, 1.0);
  const auto blank = evaluate(data, [](const Sample& s) { return BinaryMask(s.height, s.width); });
  EXPECT_EQ(blank.miou, 0.0);
  EXPECT_EQ(blank.oiou, 0.0);
}

TEST(Evaluate, CsvLayout) {
  EXPECT_EQ(metrics_csv_header(), "oIoU,mIoU,Pr@0.5,Pr@0.7,Pr@0.9,n");
  const std::vector<BinaryMask> gts = {prefix_mask(2, 2, 4), prefix_mask(2, 2, 4)};
  const std::vector<BinaryMask> preds = {prefix_mask(2, 2, 4), prefix_mask(2, 2, 2)};
  const std::string row = metrics_csv_row(aggregate(preds, gts));
  EXPECT_EQ(std::count(row.begin(), row.end(), ','), 5);
  EXPECT_EQ(row.substr(row.rfind(',') + 1), "2");
}

TEST(CeLoss, ZeroLogitsGiveLn2) {
  BinaryMask mask(4, 4);
  mask.bits[3] = 1;
  EXPECT_NEAR(ce_loss(Tensor::zeros({4, 4, 2}), mask).item(), std::log(2.0), 1e-12);
}

TEST(CeLoss, StrongMarginGivesNearZero) {
  BinaryMask mask(1, 2);
  mask.bits[1] = 1;
  EXPECT_LT(ce_loss(Tensor::from_values({1, 2, 2}, {100, 0, 0, 100}), mask).item(), 1e-40);
}

TEST(CeLoss, HandSoftplus) {
  BinaryMask mask(1, 1);
  mask.bits[0] = 1;
  EXPECT_NEAR(ce_loss(Tensor::from_values({1, 1, 2}, {0, 1}), mask).item(), std::log1p(std::exp(-1.0)), 1e-15);
  EXPECT_NEAR(std::log1p(std::exp(-1.0)), 0.3133, 1e-4);
}

TEST(CeLoss, Errors) {
  BinaryMask mask(2, 2);
  mask.bits[0] = 2;
  EXPECT_THROW(ce_loss(Tensor::zeros({2, 2, 2}), mask), DataError);
  EXPECT_THROW(ce_loss(Tensor::zeros({2, 3, 2}), BinaryMask(2, 2)), ShapeError);
}

TEST(PredictMask, TiesAndRoundTrip) {
  const auto m = predict_mask(Tensor::from_values({1, 2, 2}, {0, 0, -1, 3}));
  EXPECT_EQ(m.bits, (std::vector<std::uint8_t>{0, 1}));
  Rng rng(8);
  const auto gt = random_mask(rng, 5, 7, 0.5);
  std::vector<double> logits;
  for (auto b : gt.bits) {
    logits.push_back(b ? -2.0 : 2.0);
    logits.push_back(b ? 2.0 : -2.0);
  }
  EXPECT_EQ(predict_mask(Tensor::from_values({5, 7, 2}, logits)), gt);
}

#include <gtest/gtest.h>

#include <cmath>

#include "reference.hpp"
#include "resq/errors.hpp"
#include "resq/grounding.hpp"

using namespace resq;
using namespace resq::grounding;

namespace {

Tensor random_tensor(Shape s, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(s));
  for (auto& v : t.data) v = rng.uniform(lo, hi);
  return t;
}

AnchorSet grid_anchors() {
  AnchorSet a;
  for (int i = 0; i < kNumAnchors; ++i) a.push_back({4.0 * (1 + i % 3), 4.0 * (1 + i / 3)});
  return a;
}

long double brute_iou(const Box& a, const Box& b) {
  // Pixel-free closed form on corner coordinates.
  const long double ix = std::max(0.0L, std::min<long double>(a.x + a.w, b.x + b.w) - std::max<long double>(a.x, b.x));
  const long double iy = std::max(0.0L, std::min<long double>(a.y + a.h, b.y + b.h) - std::max<long double>(a.y, b.y));
  const long double inter = ix * iy;
  return inter / (static_cast<long double>(a.w) * a.h + static_cast<long double>(b.w) * b.h - inter);
}

}  // namespace

// ---------------------------------------------------------------- iou

TEST(Iou, IdenticalDisjointAndShifted) {
  EXPECT_EQ(iou({1, 2, 3, 4}, {1, 2, 3, 4}), 1.0);
  EXPECT_EQ(iou({0, 0, 1, 1}, {5, 5, 1, 1}), 0.0);
  EXPECT_NEAR(iou({0, 0, 2, 2}, {1, 0, 2, 2}), 1.0 / 3.0, 1e-15);
}

TEST(Iou, PropertySymmetricAndBounded) {
  Rng rng(1);
  for (int t = 0; t < 1000; ++t) {
    Box a{rng.uniform(0, 50), rng.uniform(0, 50), rng.uniform(0.1, 20), rng.uniform(0.1, 20)};
    Box b{rng.uniform(0, 50), rng.uniform(0, 50), rng.uniform(0.1, 20), rng.uniform(0.1, 20)};
    const double v = iou(a, b);
    EXPECT_EQ(v, iou(b, a));
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, 1.0);
    EXPECT_NEAR(v, static_cast<double>(brute_iou(a, b)), 1e-12);
    EXPECT_NEAR(iou(a, a), 1.0, 1e-15);
  }
}

// ---------------------------------------------------------------- anchors

TEST(ComputeAnchors, IdenticalBoxesGiveNineEqualAnchors) {
  std::vector<Box> boxes(20, Box{3, 3, 10, 6});
  const auto a = compute_anchors(boxes, 0);
  ASSERT_EQ(a.size(), 9u);
  for (const auto& x : a) EXPECT_EQ(x, (Anchor{10, 6}));
}

TEST(ComputeAnchors, TooFewBoxesIsDegenerate) {
  EXPECT_THROW(compute_anchors(std::vector<Box>(8, Box{0, 0, 2, 2}), 0), DegenerateInputError);
}

TEST(ComputeAnchors, DeterministicGivenSeedAndSortedByArea) {
  Rng rng(2);
  std::vector<Box> boxes;
  for (int i = 0; i < 200; ++i) boxes.push_back({0, 0, rng.uniform(2, 30), rng.uniform(2, 30)});
  const auto a = compute_anchors(boxes, 7), b = compute_anchors(boxes, 7);
  EXPECT_EQ(a, b);
  for (std::size_t i = 1; i < a.size(); ++i) EXPECT_LE(a[i - 1].w * a[i - 1].h, a[i].w * a[i].h);
}

TEST(ComputeAnchors, TwoClustersAreBothCovered) {
  Rng rng(3);
  std::vector<Box> boxes;
  for (int i = 0; i < 100; ++i) boxes.push_back({0, 0, rng.uniform(3, 5), rng.uniform(3, 5)});
  for (int i = 0; i < 100; ++i) boxes.push_back({0, 0, rng.uniform(28, 32), rng.uniform(28, 32)});
  const auto a = compute_anchors(boxes, 0);
  int small = 0, large = 0;
  for (const auto& x : a) (x.w < 10 ? small : large)++;
  EXPECT_GT(small, 0);
  EXPECT_GT(large, 0);
  // The objective is the exhaustive best-anchor assignment cost.
  long double cost = 0;
  for (const auto& b : boxes) {
    long double best = 0;
    for (const auto& x : a) best = std::max<long double>(best, centered_iou(b.w, b.h, x.w, x.h));
    cost += 1 - best;
  }
  EXPECT_NEAR(anchor_cost(boxes, a), static_cast<double>(cost), 1e-9);
  AnchorSet lopsided(9, Anchor{4, 4});
  EXPECT_LT(anchor_cost(boxes, a), anchor_cost(boxes, lopsided));
}

// ---------------------------------------------------------------- decode / encode

TEST(DecodeBox, ZeroOffsetsGiveCellCenterAndAnchorSize) {
  const Box b = decode_box({0, 0, 0, 0}, 2, 5, {12, 7}, 8);
  EXPECT_DOUBLE_EQ(b.x + b.w / 2, 5.5 * 8);
  EXPECT_DOUBLE_EQ(b.y + b.h / 2, 2.5 * 8);
  EXPECT_DOUBLE_EQ(b.w, 12);
  EXPECT_DOUBLE_EQ(b.h, 7);
}

TEST(DecodeBox, RandomOffsetsMatchClosedForm) {
  Rng rng(4);
  for (int t = 0; t < 500; ++t) {
    Offsets o{rng.uniform(-6, 6), rng.uniform(-6, 6), rng.uniform(-3, 3), rng.uniform(-3, 3)};
    const int i = rng.uniform_int(0, 7), j = rng.uniform_int(0, 7);
    const Anchor an{rng.uniform(2, 30), rng.uniform(2, 30)};
    const Box b = decode_box(o, i, j, an, 8);
    const long double cx = (j + 1 / (1 + std::exp(-static_cast<long double>(o.tx)))) * 8;
    const long double cy = (i + 1 / (1 + std::exp(-static_cast<long double>(o.ty)))) * 8;
    const long double w = an.w * std::exp(static_cast<long double>(o.tw)), h = an.h * std::exp(static_cast<long double>(o.th));
    EXPECT_NEAR(b.x, static_cast<double>(cx - w / 2), 1e-9);
    EXPECT_NEAR(b.y, static_cast<double>(cy - h / 2), 1e-9);
    EXPECT_NEAR(b.w, static_cast<double>(w), 1e-9);
    EXPECT_NEAR(b.h, static_cast<double>(h), 1e-9);
  }
}

TEST(DecodeBox, SizeOffsetsAreClamped) {
  const Box b = decode_box({0, 0, 100, -100}, 0, 0, {1, 1}, 8);
  EXPECT_DOUBLE_EQ(b.w, std::exp(kSizeClamp));
  EXPECT_DOUBLE_EQ(b.h, std::exp(-kSizeClamp));
}

TEST(EncodeTarget, RoundTripsBothWays) {
  Rng rng(5);
  for (int t = 0; t < 1000; ++t) {
    const int i = rng.uniform_int(0, 7), j = rng.uniform_int(0, 7);
    const Anchor an{rng.uniform(2, 30), rng.uniform(2, 30)};
    const double w = rng.uniform(1, 40), h = rng.uniform(1, 40);
    const double cx = (j + rng.uniform(0.01, 0.99)) * 8, cy = (i + rng.uniform(0.01, 0.99)) * 8;
    const Box gt{cx - w / 2, cy - h / 2, w, h};
    const Box back = decode_box(encode_target(gt, i, j, an, 8), i, j, an, 8);
    EXPECT_NEAR(back.x, gt.x, 1e-6);
    EXPECT_NEAR(back.y, gt.y, 1e-6);
    EXPECT_NEAR(back.w, gt.w, 1e-6);
    EXPECT_NEAR(back.h, gt.h, 1e-6);

    const Offsets o{rng.uniform(-5, 5), rng.uniform(-5, 5), rng.uniform(-3, 3), rng.uniform(-3, 3)};
    const Offsets o2 = encode_target(decode_box(o, i, j, an, 8), i, j, an, 8);
    EXPECT_NEAR(o2.tx, o.tx, 1e-6);
    EXPECT_NEAR(o2.ty, o.ty, 1e-6);
    EXPECT_NEAR(o2.tw, o.tw, 1e-6);
    EXPECT_NEAR(o2.th, o.th, 1e-6);
  }
}

TEST(EncodeTarget, CenterOutsideCellIsAContractError) {
  EXPECT_THROW(encode_target({0, 0, 4, 4}, 3, 3, {4, 4}, 8), ContractError);
}

// ---------------------------------------------------------------- assignment

TEST(AssignAnchor, ExactAnchorAtCell) {
  const auto anchors = grid_anchors();
  const Anchor a3 = anchors[3];
  const Box gt{5.5 * 8 - a3.w / 2, 2.5 * 8 - a3.h / 2, a3.w, a3.h};
  const auto t = assign_anchor(gt, anchors, 8, 8, 8);
  EXPECT_EQ(t.i, 2);
  EXPECT_EQ(t.j, 5);
  EXPECT_EQ(t.a, 3);
  EXPECT_EQ(t.flat_index, (2 * 8 + 5) * 9 + 3);
}

TEST(AssignAnchor, BoundaryCenterGoesToFloorCell) {
  const Box gt{16 - 2, 24 - 2, 4, 4};  // center exactly (16, 24)
  const auto t = assign_anchor(gt, grid_anchors(), 8, 8, 8);
  EXPECT_EQ(t.i, 3);
  EXPECT_EQ(t.j, 2);
}

TEST(AssignAnchor, TiesGoToLowestIndex) {
  AnchorSet same(9, Anchor{6, 6});
  EXPECT_EQ(assign_anchor({10, 10, 6, 6}, same, 8, 8, 8).a, 0);
}

TEST(AssignAnchor, RandomBoxesMatchExhaustiveIou) {
  Rng rng(6);
  AnchorSet anchors;
  for (int i = 0; i < 9; ++i) anchors.push_back({rng.uniform(2, 30), rng.uniform(2, 30)});
  for (int t = 0; t < 500; ++t) {
    const double w = rng.uniform(1, 30), h = rng.uniform(1, 30);
    const Box gt{rng.uniform(0, 64 - w), rng.uniform(0, 64 - h), w, h};
    const auto got = assign_anchor(gt, anchors, 8, 8, 8);
    int best = 0;
    long double bv = -1;
    for (int a = 0; a < 9; ++a) {
      const long double inter = std::min<long double>(w, anchors[a].w) * std::min<long double>(h, anchors[a].h);
      const long double v = inter / (w * h + anchors[a].w * anchors[a].h - inter);
      if (v > bv) {
        bv = v;
        best = a;
      }
    }
    EXPECT_EQ(got.a, best);
    EXPECT_EQ(got.i, static_cast<int>(std::floor((gt.y + h / 2) / 8)));
    EXPECT_EQ(got.j, static_cast<int>(std::floor((gt.x + w / 2) / 8)));
    int positives = 0;
    for (int m = 0; m < 8 * 8 * 9; ++m) positives += m == got.flat_index;
    EXPECT_EQ(positives, 1);
  }
}

// ---------------------------------------------------------------- head and selection

TEST(GroundingHead, ShapeAndZeroWeights) {
  ParamRegistry reg;
  Rng rng(7);
  GroundingHead head(reg, "head", 6, 4, rng);
  auto out = head(ag::constant(random_tensor({1, 6, 8, 8}, rng)));
  EXPECT_EQ(out->value.shape, (Shape{1, 45, 8, 8}));
  EXPECT_EQ(to_box_prediction(out->value, 0).raw.shape, (Shape{8, 8, 9, 5}));
  for (const auto& p : reg.params()) p.var->value.fill(0.0);
  auto zero = head(ag::constant(random_tensor({1, 6, 8, 8}, rng)));
  for (double v : zero->value.data) EXPECT_EQ(v, 0.0);
}

TEST(GroundingHead, MatchesReferenceLayers) {
  ParamRegistry reg;
  Rng rng(8);
  GroundingHead head(reg, "head", 5, 3, rng);
  Tensor v = random_tensor({2, 5, 3, 4}, rng);
  const auto want = ref::head(ref::Map(v), head);
  EXPECT_LT(ref::max_rel(head(ag::constant(v))->value, want.v, 1e-12), 1e-12);
}

TEST(SelectPrediction, SinglePositiveLogitWins) {
  Tensor raw({2, 2, 9, 5}, 0.0);
  const int flat = (1 * 2 + 0) * 9 + 4;
  raw[static_cast<std::size_t>(flat) * 5 + 4] = 3.0;
  const auto s = select_prediction({raw}, grid_anchors(), 8);
  EXPECT_EQ(s.flat_index, flat);
  EXPECT_EQ(s.i, 1);
  EXPECT_EQ(s.j, 0);
  EXPECT_EQ(s.a, 4);
}

TEST(SelectPrediction, TiesGoToLowestFlatIndex) {
  Tensor raw({2, 2, 9, 5}, 0.0);
  raw[7 * 5 + 4] = 2.0;
  raw[20 * 5 + 4] = 2.0;
  EXPECT_EQ(select_prediction({raw}, grid_anchors(), 8).flat_index, 7);
}

TEST(SelectPrediction, RandomLogitsMatchArgmax) {
  Rng rng(9);
  for (int t = 0; t < 100; ++t) {
    Tensor raw = random_tensor({4, 4, 9, 5}, rng, -5, 5);
    int best = 0;
    for (int m = 1; m < 144; ++m)
      if (raw[m * 5 + 4] > raw[best * 5 + 4]) best = m;
    const auto s = select_prediction({raw}, grid_anchors(), 8);
    EXPECT_EQ(s.flat_index, best);
    const Offsets o{raw[best * 5], raw[best * 5 + 1], raw[best * 5 + 2], raw[best * 5 + 3]};
    EXPECT_EQ(s.box, decode_box(o, best / 36, (best / 9) % 4, grid_anchors()[best % 9], 8));
  }
}

TEST(ToBoxPrediction, ChannelLayoutIsAnchorMajor) {
  Tensor out({1, 45, 2, 3}, 0.0);
  // anchor 6, field 2, cell (1, 2)
  out[(6 * 5 + 2) * 6 + 1 * 3 + 2] = 9.0;
  const auto p = to_box_prediction(out, 0);
  EXPECT_EQ(p.field((1 * 3 + 2) * 9 + 6, 2), 9.0);
}

// ---------------------------------------------------------------- loss

namespace {

std::vector<TargetAssignment> random_targets(int B, int H, int W, Rng& rng) {
  std::vector<TargetAssignment> t(static_cast<std::size_t>(B));
  for (auto& x : t) {
    x.i = rng.uniform_int(0, H - 1);
    x.j = rng.uniform_int(0, W - 1);
    x.a = rng.uniform_int(0, 8);
    x.flat_index = (x.i * W + x.j) * 9 + x.a;
    x.target = {rng.uniform(-2, 2), rng.uniform(-2, 2), rng.uniform(-1, 1), rng.uniform(-1, 1)};
  }
  return t;
}

}  // namespace

TEST(LossTotal, UniformLogitsGiveLogM) {
  Rng rng(10);
  auto targets = random_targets(2, 4, 4, rng);
  LossComponents c;
  loss_total(ag::constant(Tensor({2, 45, 4, 4}, 0.0)), targets, nullptr, nullptr, {}, &c);
  EXPECT_NEAR(c.cls, std::log(4.0 * 4 * 9), 1e-12);
}

TEST(LossTotal, ExactOffsetsGiveZeroRegression) {
  Rng rng(11);
  auto targets = random_targets(1, 3, 3, rng);
  Tensor out = random_tensor({1, 45, 3, 3}, rng);
  const auto& t = targets[0];
  const double vals[4] = {t.target.tx, t.target.ty, t.target.tw, t.target.th};
  for (int f = 0; f < 4; ++f) out[(t.a * 5 + f) * 9 + t.i * 3 + t.j] = vals[f];
  LossComponents c;
  loss_total(ag::constant(out), targets, nullptr, nullptr, {}, &c);
  EXPECT_EQ(c.reg, 0.0);
}

TEST(LossTotal, RandomCaseMatchesComponentOracle) {
  Rng rng(12);
  for (int trial = 0; trial < 50; ++trial) {
    Tensor out = random_tensor({3, 45, 2, 3}, rng, -4, 4);
    auto targets = random_targets(3, 2, 3, rng);
    Tensor div = random_tensor({3}, rng, 0, 2), cov = random_tensor({3}, rng, 0, 3);
    const LossOptions opt{rng.uniform(0.5, 2), rng.uniform(0, 2), RegressionLoss::mse};
    LossComponents c;
    auto total = loss_total(ag::constant(out), targets, ag::constant(div), ag::constant(cov), opt, &c);
    long double cls, reg;
    const long double det = ref::detection(out, targets, opt.coord_weight, &cls, &reg);
    const long double md = (static_cast<long double>(div[0]) + div[1] + div[2]) / 3;
    const long double mc = (static_cast<long double>(cov[0]) + cov[1] + cov[2]) / 3;
    EXPECT_NEAR(c.cls, static_cast<double>(cls), 1e-12);
    EXPECT_NEAR(c.reg, static_cast<double>(reg), 1e-12);
    EXPECT_NEAR(c.div, static_cast<double>(md), 1e-14);
    EXPECT_NEAR(total->value[0], static_cast<double>(det + opt.reg_weight * (md + mc)), 1e-11);
    EXPECT_GE(total->value[0], 0.0);
  }
}

TEST(LossTotal, ZeroLambdaReportsButExcludesRegularizers) {
  Rng rng(13);
  Tensor out = random_tensor({1, 45, 2, 2}, rng);
  auto targets = random_targets(1, 2, 2, rng);
  LossComponents with, without;
  auto a = loss_total(ag::constant(out), targets, ag::constant(Tensor({1}, 0.7)), ag::constant(Tensor({1}, 1.5)),
                      {1.0, 0.0, RegressionLoss::mse}, &without);
  auto b = loss_total(ag::constant(out), targets, nullptr, nullptr, {1.0, 0.0, RegressionLoss::mse}, &with);
  EXPECT_EQ(a->value[0], b->value[0]);
  EXPECT_EQ(without.div, 0.7);
  EXPECT_EQ(without.cover, 1.5);
}

TEST(LossTotal, CrossEntropyVanishesAsPositiveLogitGrows) {
  Rng rng(14);
  auto targets = random_targets(1, 2, 2, rng);
  Tensor out({1, 45, 2, 2}, 0.0);
  double prev = 1e300;
  for (double z : {1.0, 5.0, 20.0, 60.0}) {
    out[(targets[0].a * 5 + 4) * 4 + targets[0].i * 2 + targets[0].j] = z;
    LossComponents c;
    loss_total(ag::constant(out), targets, nullptr, nullptr, {}, &c);
    EXPECT_LT(c.cls, prev);
    prev = c.cls;
  }
  EXPECT_LT(prev, 1e-20);
}

TEST(LossTotal, SmoothL1IsQuadraticNearZeroAndLinearFar) {
  Tensor out({1, 45, 1, 1}, 0.0);
  TargetAssignment t;
  t.target = {0, 0, 3.0, 0.5};
  LossComponents c;
  loss_total(ag::constant(out), {t}, nullptr, nullptr, {1.0, 1.0, RegressionLoss::smooth_l1}, &c);
  EXPECT_NEAR(c.reg, (3.0 - 0.5) + 0.5 * 0.25, 1e-15);
}

// ---------------------------------------------------------------- heatmaps and ConvLSTM

TEST(Heatmap, UniformLogitsGiveUniformMap) {
  const Tensor h = heatmap_from_prediction({Tensor({3, 4, 9, 5}, 0.0)});
  for (double v : h.data) EXPECT_NEAR(v, 1.0 / 12, 1e-15);
}

TEST(Heatmap, RandomFeaturesMatchMaxSoftmaxOracle) {
  ParamRegistry reg;
  Rng rng(15);
  GroundingHead head(reg, "head", 4, 3, rng);
  for (int t = 0; t < 20; ++t) {
    Tensor v = random_tensor({2, 4, 3, 3}, rng, -3, 3);
    const Tensor maps = intermediate_heatmap(ag::constant(v), head);
    const auto out = ref::head(ref::Map(v), head);
    for (int b = 0; b < 2; ++b) {
      const auto want = ref::heatmap(out, b);
      double s = 0;
      for (int c = 0; c < 9; ++c) {
        EXPECT_NEAR(maps[b * 9 + c], static_cast<double>(want[c]), 1e-14);
        s += maps[b * 9 + c];
      }
      EXPECT_NEAR(s, 1.0, 1e-6);
    }
  }
}

TEST(ConvLstm, SingleStepFromZeroStateAndShape) {
  ParamRegistry reg;
  Rng rng(16);
  ConvLSTM cell(reg, "lstm", 3, rng);
  Tensor x = random_tensor({1, 3, 4, 4}, rng);
  auto h = cell.aggregate({ag::constant(x)});
  EXPECT_EQ(h->value.shape, x.shape);
  const auto want = ref::convlstm({ref::Map(x)}, cell);
  EXPECT_LT(ref::max_rel(h->value, want.v, 1e-12), 1e-12);
}

TEST(ConvLstm, ThreeStepsMatchHandUnrolledCell) {
  ParamRegistry reg;
  Rng rng(17);
  ConvLSTM cell(reg, "lstm", 3, rng);
  std::vector<ag::Var> seq;
  std::vector<ref::Map> rseq;
  for (int k = 0; k < 3; ++k) {
    Tensor x = random_tensor({2, 3, 3, 3}, rng);
    seq.push_back(ag::constant(x));
    rseq.emplace_back(x);
  }
  const auto want = ref::convlstm(rseq, cell);
  EXPECT_LT(ref::max_rel(cell.aggregate(seq)->value, want.v, 1e-12), 1e-12);
}

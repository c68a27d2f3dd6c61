#include "bevnet/temporal.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "testutil.hpp"

using namespace bevnet;

namespace {

BEVGridSpec unit_grid16() {
  BEVGridSpec g;
  g.x_min = -8; g.x_max = 8; g.y_min = -8; g.y_max = 8;
  g.H = 16; g.W = 16;  // dx = dy = 1
  return g;
}

}  // namespace

TEST(WarpBev, IdentityIsExact) {
  auto g = unit_grid16();
  Rng rng(3);
  Tensor<double> b = testutil::random_tensor(rng, {3, 16, 16}, -2.0, 2.0);
  Tensor<double> w = warp_bev(b, SE3{}, g);
  for (size_t k = 0; k < b.numel(); ++k)
    EXPECT_NEAR(w.vec()[k], b.vec()[k], 1e-12);
}

TEST(WarpBev, OneCellShiftIsExact) {
  auto g = unit_grid16();
  Rng rng(5);
  Tensor<double> b = testutil::random_tensor(rng, {2, 16, 16}, -2.0, 2.0);
  SE3 T{mat3_identity(), {1.0, 0.0, 0.0}};  // frame k sits 1 m behind
  Tensor<double> w = warp_bev(b, T, g);
  for (int c = 0; c < 2; ++c)
    for (int i = 0; i < 16; ++i)
      for (int j = 0; j < 16; ++j) {
        double want = j == 0 ? 0.0 : b.vec()[(size_t)(c * 16 + i) * 16 + j - 1];
        EXPECT_NEAR(w.vec()[(size_t)(c * 16 + i) * 16 + j], want, 1e-12);
      }
}

TEST(WarpBev, QuarterTurnIsExact) {
  auto g = unit_grid16();
  Rng rng(7);
  Tensor<double> b = testutil::random_tensor(rng, {2, 16, 16}, -2.0, 2.0);
  SE3 T{rot_z(kPi / 2), {0.0, 0.0, 0.0}};
  Tensor<double> w = warp_bev(b, T, g);
  for (int c = 0; c < 2; ++c)
    for (int i = 0; i < 16; ++i)
      for (int j = 0; j < 16; ++j) {
        double want = b.vec()[(size_t)(c * 16 + 15 - j) * 16 + i];
        EXPECT_NEAR(w.vec()[(size_t)(c * 16 + i) * 16 + j], want, 1e-12);
      }
}

TEST(WarpBev, CompositionMatchesDirectOnLinearField) {
  auto g = unit_grid16();
  // linear fields are reproduced exactly by bilinear interpolation
  double coef[2][3] = {{0.3, -0.7, 1.1}, {-0.5, 0.2, -0.4}};
  std::vector<double> data;
  for (int c = 0; c < 2; ++c)
    for (int i = 0; i < 16; ++i)
      for (int j = 0; j < 16; ++j) {
        Vec2 p = g.cell_center(i, j);
        data.push_back(coef[c][0] * p[0] + coef[c][1] * p[1] + coef[c][2]);
      }
  Tensor<double> b({2, 16, 16}, data);
  SE3 t1{rot_z(0.1), {0.4, -0.3, 0.0}};
  SE3 t2{rot_z(-0.15), {0.2, 0.5, 0.0}};
  Tensor<double> two_step = warp_bev(warp_bev(b, t1, g), t2, g);
  Tensor<double> direct = warp_bev(b, t2.compose(t1), g);
  SE2 back = se2_inverse(se2_of(t2.compose(t1)));
  for (int c = 0; c < 2; ++c)
    for (int i = 5; i < 11; ++i)
      for (int j = 5; j < 11; ++j) {
        size_t k = (size_t)(c * 16 + i) * 16 + j;
        EXPECT_NEAR(two_step.vec()[k], direct.vec()[k], 1e-10);
        Vec2 src = se2_apply(back, g.cell_center(i, j));
        double analytic = coef[c][0] * src[0] + coef[c][1] * src[1] + coef[c][2];
        EXPECT_NEAR(direct.vec()[k], analytic, 1e-10);
      }
}

TEST(WarpBev, ValuesStayInPaddedRange) {
  auto g = unit_grid16();
  Rng rng(11);
  Tensor<double> b = testutil::random_tensor(rng, {3, 16, 16}, -1.5, 3.0);
  double lo = 0, hi = 0;
  for (double v : b.vec()) {
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  for (uint64_t s : {1, 2, 3}) {
    Rng tr(s);
    SE3 T{rot_z(tr.uniform(-kPi, kPi)),
          {tr.uniform(-5, 5), tr.uniform(-5, 5), 0.0}};
    Tensor<double> w = warp_bev(b, T, g);
    for (double v : w.vec()) {
      EXPECT_GE(v, lo - 1e-12);
      EXPECT_LE(v, hi + 1e-12);
    }
  }
}

TEST(WarpBev, GradientMatchesFiniteDifferences) {
  BEVGridSpec g;
  g.x_min = -3; g.x_max = 3; g.y_min = -3; g.y_max = 3;
  g.H = 6; g.W = 6;
  Rng rng(13);
  Tensor<double> b = testutil::random_tensor(rng, {2, 6, 6}, -1.0, 1.0);
  SE3 T{rot_z(0.3), {0.7, -0.4, 0.0}};
  std::vector<Tensor<double>*> params{&b};
  auto loss_fn = [&]() { return sum_all(warp_bev(b, T, g)); };
  testutil::expect_grads_match(params, loss_fn, 1e-4, "warp_bev");
}

TEST(SelectFrames, PastOnly) {
  std::vector<double> times;
  for (int i = 0; i <= 20; ++i) times.push_back(0.5 * i);  // 0 .. 10
  EXPECT_EQ(select_frames(times, 10.0, 4, 0.5, false),
            (std::vector<int>{16, 17, 18, 19}));
  EXPECT_EQ(select_frames(times, 10.0, 4, 2.0, false),
            (std::vector<int>{4, 8, 12, 16}));
  // before the sequence start everything duplicates frame 0
  EXPECT_EQ(select_frames(times, 0.0, 4, 2.0, false),
            (std::vector<int>{0, 0, 0, 0}));
}

TEST(SelectFrames, BidirectionalAndBounds) {
  std::vector<double> times;
  for (int i = 0; i <= 20; ++i) times.push_back(0.5 * i);
  EXPECT_EQ(select_frames(times, 5.0, 4, 2.0, true),
            (std::vector<int>{2, 6, 14, 18}));
  // targets past the end duplicate the last frame
  EXPECT_EQ(select_frames(times, 9.5, 4, 1.0, true),
            (std::vector<int>{15, 17, 20, 20}));
  EXPECT_THROW(select_frames(times, 5.0, 3, 1.0, true), std::invalid_argument);
}

TEST(Fuse, AveragingInitReturnsCurrent) {
  auto g = unit_grid16();
  ParamStore<double> ps;
  Rng rng(17);
  TemporalConfig cfg;
  cfg.channels = 4;
  cfg.history = 2;
  TemporalFuser<double> fus(ps, cfg, rng);
  // reduce = group average, blocks silenced
  auto& rw = ps.get("temporal.reduce.w");
  std::fill(rw.vec().begin(), rw.vec().end(), 0.0);
  for (int c = 0; c < 4; ++c)
    for (int grp = 0; grp < 3; ++grp)
      rw.vec()[(size_t)c * 12 + grp * 4 + c] = 1.0 / 3.0;
  for (int blk = 0; blk < 2; ++blk)
    for (const char* wn : {".w1", ".w2"}) {
      auto& w = ps.get("temporal.block" + std::to_string(blk) + wn);
      std::fill(w.vec().begin(), w.vec().end(), 0.0);
    }
  Tensor<double> cur = testutil::random_tensor(rng, {4, 16, 16}, -1.0, 1.0);
  auto out = fus.fuse(cur, {cur, cur}, {SE3{}, SE3{}}, g);
  ASSERT_EQ(out.shape(), cur.shape());
  for (size_t k = 0; k < cur.numel(); ++k)
    EXPECT_NEAR(out.vec()[k], cur.vec()[k], 1e-12);
}

TEST(Fuse, ZeroHistoryWorks) {
  auto g = unit_grid16();
  ParamStore<double> ps;
  Rng rng(19);
  TemporalConfig cfg;
  cfg.channels = 3;
  cfg.history = 0;
  TemporalFuser<double> fus(ps, cfg, rng);
  Tensor<double> cur = testutil::random_tensor(rng, {3, 16, 16}, -1.0, 1.0);
  auto out = fus.fuse(cur, {}, {}, g);
  ASSERT_EQ(out.shape(), cur.shape());
  for (double v : out.vec()) ASSERT_TRUE(std::isfinite(v));
  EXPECT_THROW(fus.fuse(cur, {cur}, {SE3{}}, g), std::invalid_argument);
}

TEST(Fuse, GradientReachesEveryInputMap) {
  auto g = unit_grid16();
  ParamStore<double> ps;
  Rng rng(23);
  TemporalConfig cfg;
  cfg.channels = 3;
  cfg.history = 3;
  TemporalFuser<double> fus(ps, cfg, rng);
  Tensor<double> cur = testutil::random_tensor(rng, {3, 16, 16}, -1.0, 1.0);
  std::vector<Tensor<double>> hist;
  std::vector<SE3> rel;
  for (int h = 0; h < 3; ++h) {
    hist.push_back(testutil::random_tensor(rng, {3, 16, 16}, -1.0, 1.0));
    hist[h].set_requires_grad(true);
    rel.push_back(SE3{rot_z(0.1 * (h + 1)), {0.5 * h, -0.3, 0.0}});
  }
  cur.set_requires_grad(true);

  Tape<double> tape;
  TapeScope<double> scope(tape);
  Tensor<double> total = sum_all(fus.fuse(cur, hist, rel, g));
  tape.backward(total);
  auto gsum = [](const Tensor<double>& t) {
    double s = 0;
    for (double v : t.grad()) s += std::abs(v);
    return s;
  };
  EXPECT_GT(gsum(cur), 0.0);
  for (int h = 0; h < 3; ++h) EXPECT_GT(gsum(hist[h]), 0.0) << h;
}

#include "bevnet/proposals.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <map>
#include <set>
#include <vector>

#include "testutil.hpp"

using namespace bevnet;

namespace {

// Random ego boxes clustered around shared anchors so both suppression
// stages actually fire, converted into the camera frame of a given view.
std::vector<std::vector<Proposal>> clustered_proposals(Rng& rng,
                                                       const CameraRig& rig,
                                                       int total) {
  std::vector<Vec3> anchors;
  for (int a = 0; a < 24; ++a) {
    double ang = rng.uniform(-kPi, kPi), d = rng.uniform(6.0, 24.0);
    anchors.push_back({d * std::cos(ang), d * std::sin(ang), rng.uniform(0.4, 1.2)});
  }
  std::vector<std::vector<Proposal>> per_view(rig.views.size());
  int placed = 0, guard = 0;
  while (placed < total && guard++ < total * 50) {
    const Vec3& anc = anchors[rng.uniform_int(0, (int)anchors.size() - 1)];
    Box3D ego;
    ego.center = {anc[0] + rng.uniform(-1.5, 1.5), anc[1] + rng.uniform(-1.5, 1.5),
                  anc[2] + rng.uniform(-0.2, 0.2)};
    ego.l = rng.uniform(3.0, 5.0);
    ego.w = rng.uniform(1.5, 2.5);
    ego.h = rng.uniform(1.2, 2.0);
    ego.yaw = rng.uniform(-kPi, kPi);
    ego.class_id = rng.uniform_int(0, 2);
    int v = rng.uniform_int(0, (int)rig.views.size() - 1);
    CamBox cb;
    if (!box_to_cam(ego, rig.views[v], cb)) continue;
    if (cb.z < 2.0) continue;
    Proposal p;
    p.box = ego;
    p.box.center = rig.views[v].ego_to_camera.apply(ego.center);
    p.box.yaw = cb.psi;
    p.score = rng.uniform(0.01, 1.0);
    per_view[v].push_back(p);
    ++placed;
  }
  return per_view;
}

struct FlatBox {
  double score;
  Box3D ego;
  int view, index;
};

// Straight-line reimplementation of the whole pipeline.
std::vector<FlatBox> oracle_pipeline(const std::vector<std::vector<Proposal>>& per_view,
                                     const CameraRig& rig,
                                     const ProposalConfig& cfg) {
  std::vector<FlatBox> pool;
  for (size_t v = 0; v < per_view.size(); ++v) {
    const auto& view = rig.views[v];
    double fx = view.flipped ? -view.K.fx : view.K.fx;
    struct Entry {
      double score, x1, y1, x2, y2;
      Box3D ego;
      int index;
      bool dead = false;
    };
    std::vector<Entry> entries;
    for (size_t i = 0; i < per_view[v].size(); ++i) {
      Box3D ego = proposal_to_ego(per_view[v][i].box, view);
      double x1 = 1e18, y1 = 1e18, x2 = -1e18, y2 = -1e18;
      bool any = false;
      for (const auto& c : box_corners_3d(ego)) {
        Vec3 pc = view.ego_to_camera.apply(c);
        if (pc[2] <= 1e-3) continue;
        double u = view.K.cx + fx * pc[0] / pc[2];
        double w = view.K.cy + view.K.fy * pc[1] / pc[2];
        x1 = std::min(x1, u); x2 = std::max(x2, u);
        y1 = std::min(y1, w); y2 = std::max(y2, w);
        any = true;
      }
      if (!any) continue;
      entries.push_back({per_view[v][i].score, x1, y1, x2, y2, ego, (int)i});
    }
    std::sort(entries.begin(), entries.end(), [](const Entry& a, const Entry& b) {
      return a.score != b.score ? a.score > b.score : a.index < b.index;
    });
    for (size_t i = 0; i < entries.size(); ++i) {
      if (entries[i].dead) continue;
      for (size_t j = i + 1; j < entries.size(); ++j) {
        if (entries[j].dead) continue;
        double ix = std::min(entries[i].x2, entries[j].x2) -
                    std::max(entries[i].x1, entries[j].x1);
        double iy = std::min(entries[i].y2, entries[j].y2) -
                    std::max(entries[i].y1, entries[j].y1);
        double iou = 0;
        if (ix > 0 && iy > 0) {
          double inter = ix * iy;
          double aa = (entries[i].x2 - entries[i].x1) * (entries[i].y2 - entries[i].y1);
          double ab = (entries[j].x2 - entries[j].x1) * (entries[j].y2 - entries[j].y1);
          iou = inter / (aa + ab - inter);
        }
        if (iou > cfg.pers_iou) entries[j].dead = true;
      }
    }
    int taken = 0;
    for (const auto& e : entries) {
      if (e.dead || taken >= cfg.topk_per_view) continue;
      pool.push_back({e.score, e.ego, (int)v, e.index});
      ++taken;
    }
  }
  std::sort(pool.begin(), pool.end(), [](const FlatBox& a, const FlatBox& b) {
    if (a.score != b.score) return a.score > b.score;
    if (a.view != b.view) return a.view < b.view;
    return a.index < b.index;
  });
  std::vector<bool> dead(pool.size(), false);
  for (size_t i = 0; i < pool.size(); ++i) {
    if (dead[i]) continue;
    for (size_t j = i + 1; j < pool.size(); ++j)
      if (!dead[j] && iou_bev(pool[i].ego, pool[j].ego) > cfg.bev_iou)
        dead[j] = true;
  }
  std::vector<FlatBox> out;
  for (size_t i = 0; i < pool.size() && (int)out.size() < cfg.topk_final; ++i)
    if (!dead[i]) out.push_back(pool[i]);
  return out;
}

}  // namespace

TEST(NmsRects, MatchesBruteForce) {
  for (uint64_t seed : {1, 2, 3, 4}) {
    Rng rng(seed);
    int n = 50;
    std::vector<Rect> rects;
    std::vector<double> scores;
    for (int i = 0; i < n; ++i) {
      double x = rng.uniform(0, 80), y = rng.uniform(0, 80);
      rects.push_back({x, y, x + rng.uniform(5, 40), y + rng.uniform(5, 40)});
      scores.push_back(rng.uniform(0, 1));
    }
    auto kept = nms_rects(rects, scores, 0.5);

    // rank scan: a rect survives iff no higher-scoring survivor overlaps it
    std::vector<int> order(n);
    for (int i = 0; i < n; ++i) order[i] = i;
    std::sort(order.begin(), order.end(),
              [&](int a, int b) { return scores[a] > scores[b]; });
    std::vector<int> expect;
    for (int i : order) {
      bool alive = true;
      for (int j : expect)
        if (iou_2d(rects[i], rects[j]) > 0.5) alive = false;
      if (alive) expect.push_back(i);
    }
    ASSERT_EQ(kept, expect) << "seed " << seed;
    // some suppression must actually happen with rects this dense
    EXPECT_LT(kept.size(), rects.size());
  }
}

TEST(Pipeline, MatchesIndependentReimplementation) {
  auto rig = default_rig(6, 128, 128, 1.5);
  for (uint64_t seed : {11, 12, 13}) {
    Rng rng(seed);
    auto per_view = clustered_proposals(rng, rig, 300);
    for (ProposalConfig cfg :
         {ProposalConfig{}, ProposalConfig{0.75, 0.3, 5, 8}}) {
      auto got = build_proposals(per_view, rig, cfg);
      auto want = oracle_pipeline(per_view, rig, cfg);
      ASSERT_EQ(got.boxes.size(), want.size());
      for (size_t i = 0; i < want.size(); ++i) {
        EXPECT_EQ(got.boxes[i].view, want[i].view);
        EXPECT_EQ(got.boxes[i].index, want[i].index);
        EXPECT_DOUBLE_EQ(got.boxes[i].score, want[i].score);
        for (int d = 0; d < 3; ++d)
          EXPECT_DOUBLE_EQ(got.boxes[i].box.center[d], want[i].ego.center[d]);
      }
    }
  }
}

TEST(Pipeline, InvariantsHold) {
  auto rig = default_rig(6, 128, 128, 1.5);
  Rng rng(21);
  auto per_view = clustered_proposals(rng, rig, 400);
  ProposalConfig cfg;
  cfg.topk_final = 24;  // force the final truncation path
  auto got = build_proposals(per_view, rig, cfg);

  ASSERT_LE((int)got.boxes.size(), cfg.topk_final);
  ASSERT_EQ(got.boxes.size(), got.bev_centers.size());
  std::multiset<double> input_scores;
  for (const auto& vp : per_view)
    for (const auto& p : vp) input_scores.insert(p.score);
  for (size_t i = 0; i < got.boxes.size(); ++i) {
    if (i) EXPECT_GE(got.boxes[i - 1].score, got.boxes[i].score);
    EXPECT_EQ(input_scores.count(got.boxes[i].score), 1u);
    EXPECT_DOUBLE_EQ(got.bev_centers[i][0], got.boxes[i].box.center[0]);
    EXPECT_DOUBLE_EQ(got.bev_centers[i][1], got.boxes[i].box.center[1]);
    for (size_t j = i + 1; j < got.boxes.size(); ++j)
      EXPECT_LE(iou_bev(got.boxes[i].box, got.boxes[j].box), cfg.bev_iou + 1e-9);
  }

  // idempotence: run the survivors through again, nothing else is removed
  std::vector<std::vector<Proposal>> again(rig.views.size());
  for (const auto& vp : got.boxes)
    again[vp.view].push_back(per_view[vp.view][vp.index]);
  auto second = build_proposals(again, rig, cfg);
  ASSERT_EQ(second.boxes.size(), got.boxes.size());
  for (size_t i = 0; i < got.boxes.size(); ++i) {
    EXPECT_EQ(second.boxes[i].view, got.boxes[i].view);
    EXPECT_DOUBLE_EQ(second.boxes[i].score, got.boxes[i].score);
  }
}

TEST(Pipeline, DeterministicUnderPermutation) {
  auto rig = default_rig(6, 128, 128, 1.5);
  Rng rng(31);
  auto per_view = clustered_proposals(rng, rig, 200);
  auto base = build_proposals(per_view, rig, {});

  Rng perm(32);
  auto shuffled = per_view;
  for (auto& vp : shuffled)
    for (size_t i = vp.size(); i > 1; --i)
      std::swap(vp[i - 1], vp[perm.uniform_int(0, (int)i - 1)]);
  auto got = build_proposals(shuffled, rig, {});

  ASSERT_EQ(got.boxes.size(), base.boxes.size());
  for (size_t i = 0; i < base.boxes.size(); ++i) {
    EXPECT_DOUBLE_EQ(got.boxes[i].score, base.boxes[i].score);
    for (int d = 0; d < 3; ++d)
      EXPECT_DOUBLE_EQ(got.boxes[i].box.center[d], base.boxes[i].box.center[d]);
    EXPECT_DOUBLE_EQ(got.boxes[i].box.yaw, base.boxes[i].box.yaw);
  }
}

TEST(Pipeline, RaisingSurvivorScoreKeepsIt) {
  auto rig = default_rig(6, 128, 128, 1.5);
  Rng rng(41);
  auto per_view = clustered_proposals(rng, rig, 150);
  auto base = build_proposals(per_view, rig, {});
  ASSERT_GT(base.boxes.size(), 4u);

  const auto& pick = base.boxes[base.boxes.size() / 2];
  auto boosted = per_view;
  boosted[pick.view][pick.index].score = 2.0;  // above everything else
  auto got = build_proposals(boosted, rig, {});
  ASSERT_FALSE(got.boxes.empty());
  EXPECT_EQ(got.boxes[0].view, pick.view);
  EXPECT_EQ(got.boxes[0].index, pick.index);
}

TEST(Pipeline, EmptyInput) {
  auto rig = default_rig(6, 64, 64, 1.5);
  ProposalDump dump;
  auto got = build_proposals(std::vector<std::vector<Proposal>>(6), rig, {}, &dump);
  EXPECT_TRUE(got.boxes.empty());
  EXPECT_TRUE(got.bev_centers.empty());
  EXPECT_EQ(dump.final_count, 0);
  EXPECT_TRUE(dump.traces.empty());
}

TEST(DumpJson, StageFlagsAreMonotone) {
  auto rig = default_rig(6, 128, 128, 1.5);
  Rng rng(51);
  auto per_view = clustered_proposals(rng, rig, 300);
  ProposalConfig cfg;
  cfg.topk_per_view = 10;
  cfg.topk_final = 12;
  ProposalDump dump;
  auto got = build_proposals(per_view, rig, cfg, &dump);

  auto j = nlohmann::json::parse(proposal_dump_json(dump));
  ASSERT_EQ(j["final_count"].get<int>(), (int)got.boxes.size());
  int finals = 0, dropped2d = 0, droppedtopk = 0, droppedbev = 0;
  for (const auto& t : j["proposals"]) {
    bool pr = t["projectable"], n2 = t["nms2d"], t1 = t["topk1"],
         nb = t["nms_bev"], fi = t["final"];
    if (n2) EXPECT_TRUE(pr);
    if (t1) EXPECT_TRUE(n2);
    if (nb) EXPECT_TRUE(t1);
    if (fi) EXPECT_TRUE(nb);
    finals += fi;
    dropped2d += pr && !n2;
    droppedtopk += n2 && !t1;
    droppedbev += t1 && !nb;
  }
  EXPECT_EQ(finals, (int)got.boxes.size());
  // dense clustered input must exercise every drop stage
  EXPECT_GT(dropped2d, 0);
  EXPECT_GT(droppedtopk, 0);
  EXPECT_GT(droppedbev, 0);
  EXPECT_EQ(j["proposals"].size(), dump.traces.size());
}

#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "bevnet/scene.hpp"

using bevnet::Box3D;
using bevnet::SceneConfig;
using bevnet::SceneFrame;
using bevnet::SE3;
using bevnet::Vec3;

namespace {

SceneConfig small_config() {
  SceneConfig cfg;
  cfg.num_sequences = 1;
  cfg.frames_per_sequence = 3;
  cfg.min_objects = 3;
  cfg.max_objects = 3;
  cfg.image_width = 64;
  cfg.image_height = 64;
  cfg.num_cameras = 6;
  cfg.seed = 11;
  return cfg;
}

// Configuration used for the committed golden fixture. Do not change without
// regenerating tests/fixtures/scene_golden/.
SceneConfig golden_config() {
  SceneConfig cfg;
  cfg.num_sequences = 1;
  cfg.frames_per_sequence = 1;
  cfg.min_objects = 2;
  cfg.max_objects = 2;
  cfg.image_width = 32;
  cfg.image_height = 32;
  cfg.num_cameras = 2;
  cfg.seed = 77;
  return cfg;
}

std::filesystem::path fixture_dir() {
  return std::filesystem::path(__FILE__).parent_path() / "fixtures" /
         "scene_golden";
}

void expect_frames_equal(const SceneFrame& a, const SceneFrame& b,
                         double tol) {
  EXPECT_EQ(a.sequence, b.sequence);
  EXPECT_EQ(a.frame, b.frame);
  EXPECT_NEAR(a.timestamp, b.timestamp, tol);
  for (int i = 0; i < 9; ++i)
    EXPECT_NEAR(a.ego_pose.R[i], b.ego_pose.R[i], tol);
  for (int i = 0; i < 3; ++i)
    EXPECT_NEAR(a.ego_pose.t[i], b.ego_pose.t[i], tol);
  ASSERT_EQ(a.rig.views.size(), b.rig.views.size());
  for (size_t v = 0; v < a.rig.views.size(); ++v) {
    EXPECT_EQ(a.rig.views[v].name, b.rig.views[v].name);
    EXPECT_EQ(a.rig.views[v].flipped, b.rig.views[v].flipped);
    EXPECT_NEAR(a.rig.views[v].K.cx, b.rig.views[v].K.cx, tol);
    EXPECT_NEAR(a.rig.views[v].K.fx, b.rig.views[v].K.fx, tol);
  }
  ASSERT_EQ(a.gt_boxes.size(), b.gt_boxes.size());
  for (size_t i = 0; i < a.gt_boxes.size(); ++i) {
    for (int d = 0; d < 3; ++d)
      EXPECT_NEAR(a.gt_boxes[i].center[d], b.gt_boxes[i].center[d], tol);
    EXPECT_NEAR(a.gt_boxes[i].yaw, b.gt_boxes[i].yaw, tol);
    EXPECT_NEAR(a.gt_boxes[i].l, b.gt_boxes[i].l, tol);
    EXPECT_EQ(a.gt_boxes[i].class_id, b.gt_boxes[i].class_id);
  }
  EXPECT_EQ(a.gt_visibility, b.gt_visibility);
  ASSERT_EQ(a.images.size(), b.images.size());
  for (size_t v = 0; v < a.images.size(); ++v) {
    ASSERT_EQ(a.images[v].data.size(), b.images[v].data.size());
    double max_diff = 0;
    for (size_t i = 0; i < a.images[v].data.size(); ++i)
      max_diff = std::max(
          max_diff, std::abs(static_cast<double>(a.images[v].data[i]) -
                             b.images[v].data[i]));
    EXPECT_LE(max_diff, std::max(tol, 2e-6)) << "view " << v;
  }
}

}  // namespace

TEST(Generate, SameSeedBitIdentical) {
  SceneConfig cfg = small_config();
  auto a = bevnet::generate(cfg);
  auto b = bevnet::generate(cfg);
  ASSERT_EQ(a.size(), b.size());
  for (size_t s = 0; s < a.size(); ++s) {
    ASSERT_EQ(a[s].size(), b[s].size());
    for (size_t f = 0; f < a[s].size(); ++f) {
      const auto& fa = a[s][f];
      const auto& fb = b[s][f];
      ASSERT_EQ(fa.gt_boxes.size(), fb.gt_boxes.size());
      for (size_t i = 0; i < fa.gt_boxes.size(); ++i)
        for (int d = 0; d < 3; ++d)
          EXPECT_EQ(fa.gt_boxes[i].center[d], fb.gt_boxes[i].center[d]);
      for (size_t v = 0; v < fa.images.size(); ++v)
        EXPECT_EQ(fa.images[v].data, fb.images[v].data);
    }
  }
  auto c = bevnet::generate([&]() {
    SceneConfig o = cfg;
    o.seed = 12;
    return o;
  }());
  bool differs = false;
  for (size_t v = 0; v < a[0][0].images.size() && !differs; ++v)
    differs = a[0][0].images[v].data != c[0][0].images[v].data;
  EXPECT_TRUE(differs);
}

// Ego-frame positions across frames must be explained exactly by constant
// world velocity plus the relative ego transform.
TEST(Generate, KinematicsMatchesSe3Oracle) {
  SceneConfig cfg = small_config();
  cfg.position_noise = 0.0;
  cfg.bev_range = 60.0;  // keep every track in range so indices align
  cfg.frames_per_sequence = 4;
  auto seqs = bevnet::generate(cfg);
  const auto& frames = seqs[0];
  size_t n = frames[0].gt_boxes.size();
  ASSERT_GT(n, 0u);
  double dt = cfg.frame_interval;
  for (size_t f = 0; f + 1 < frames.size(); ++f) {
    ASSERT_EQ(frames[f].gt_boxes.size(), n);
    ASSERT_EQ(frames[f + 1].gt_boxes.size(), n);
    SE3 rel = bevnet::relative_pose(frames[f + 1], frames[f]);
    for (size_t i = 0; i < n; ++i) {
      const Box3D& cur = frames[f].gt_boxes[i];
      const Box3D& nxt = frames[f + 1].gt_boxes[i];
      Vec3 advanced{cur.center[0] + cur.velocity[0] * dt,
                    cur.center[1] + cur.velocity[1] * dt, cur.center[2]};
      Vec3 want = rel.apply(advanced);
      for (int d = 0; d < 3; ++d)
        EXPECT_NEAR(nxt.center[d], want[d], 1e-9)
            << "frame " << f << " box " << i;
    }
  }
}

TEST(Generate, ZeroObjectsStillRenders) {
  SceneConfig cfg = small_config();
  cfg.min_objects = cfg.max_objects = 0;
  auto seqs = bevnet::generate(cfg);
  for (const auto& frame : seqs[0]) {
    EXPECT_TRUE(frame.gt_boxes.empty());
    EXPECT_TRUE(frame.gt_visibility.empty());
    for (const auto& img : frame.images) {
      double lo = 1e9, hi = -1e9;
      for (float v : img.data) {
        ASSERT_TRUE(std::isfinite(v));
        lo = std::min<double>(lo, v);
        hi = std::max<double>(hi, v);
      }
      EXPECT_LT(lo, hi);  // textured background, not constant
    }
  }
}

TEST(Generate, VisibilityMatchesCornerProjection) {
  auto seqs = bevnet::generate(small_config());
  for (const auto& frame : seqs[0]) {
    ASSERT_EQ(frame.gt_visibility.size(), frame.gt_boxes.size());
    for (size_t b = 0; b < frame.gt_boxes.size(); ++b) {
      auto corners = bevnet::box_corners_3d(frame.gt_boxes[b]);
      for (size_t v = 0; v < frame.rig.views.size(); ++v) {
        bool any = false;
        for (const auto& c : corners) {
          Vec3 pc = frame.rig.views[v].ego_to_camera.apply(c);
          if (bevnet::project_view(pc, frame.rig.views[v]).valid) any = true;
        }
        EXPECT_EQ(frame.gt_visibility[b][v], any) << "box " << b << " view "
                                                  << v;
      }
    }
  }
}

TEST(Generate, GtCentersInsideBevRange) {
  SceneConfig cfg = small_config();
  cfg.bev_range = 10.0;
  cfg.max_objects = cfg.min_objects = 6;
  cfg.frames_per_sequence = 5;
  auto seqs = bevnet::generate(cfg);
  for (const auto& frame : seqs[0])
    for (const auto& box : frame.gt_boxes) {
      EXPECT_LE(std::abs(box.center[0]), cfg.bev_range);
      EXPECT_LE(std::abs(box.center[1]), cfg.bev_range);
    }
}

TEST(Generate, TimestampsStrictlyIncrease) {
  auto seqs = bevnet::generate(small_config());
  for (const auto& seq : seqs)
    for (size_t f = 1; f < seq.size(); ++f)
      EXPECT_GT(seq[f].timestamp, seq[f - 1].timestamp);
}

TEST(IdaFlip, InvolutionBitIdentical) {
  auto seqs = bevnet::generate(small_config());
  const SceneFrame& orig = seqs[0][0];
  SceneFrame once = bevnet::ida_flip(orig, true);
  SceneFrame twice = bevnet::ida_flip(once, true);
  for (size_t v = 0; v < orig.images.size(); ++v) {
    EXPECT_EQ(orig.images[v].data, twice.images[v].data);
    EXPECT_EQ(orig.rig.views[v].K.cx, twice.rig.views[v].K.cx);
    EXPECT_EQ(orig.rig.views[v].flipped, twice.rig.views[v].flipped);
    EXPECT_TRUE(once.rig.views[v].flipped);
  }
  SceneFrame untouched = bevnet::ida_flip(orig, false);
  EXPECT_EQ(untouched.images[0].data, orig.images[0].data);
}

TEST(IdaFlip, MirrorsPixelsAndProjections) {
  auto seqs = bevnet::generate(small_config());
  const SceneFrame& orig = seqs[0][0];
  SceneFrame flip = bevnet::ida_flip(orig, true);
  int W = orig.rig.views[0].K.width;

  for (size_t v = 0; v < orig.images.size(); ++v)
    for (int r = 0; r < orig.images[v].height; r += 7)
      for (int col = 0; col < W; col += 5)
        EXPECT_EQ(flip.images[v].at(0, r, col),
                  orig.images[v].at(0, r, W - 1 - col));

  // 3D gt unchanged; projected centers mirror to (W-1-u, v).
  ASSERT_EQ(flip.gt_boxes.size(), orig.gt_boxes.size());
  for (size_t b = 0; b < orig.gt_boxes.size(); ++b) {
    for (int d = 0; d < 3; ++d)
      EXPECT_EQ(flip.gt_boxes[b].center[d], orig.gt_boxes[b].center[d]);
    for (size_t v = 0; v < orig.rig.views.size(); ++v) {
      Vec3 pc = orig.rig.views[v].ego_to_camera.apply(orig.gt_boxes[b].center);
      auto p0 = bevnet::project_view(pc, orig.rig.views[v]);
      auto p1 = bevnet::project_view(pc, flip.rig.views[v]);
      if (p0.depth <= bevnet::kProjZMin) continue;
      EXPECT_NEAR(p1.u, (W - 1) - p0.u, 1e-9);
      EXPECT_NEAR(p1.v, p0.v, 1e-12);
      EXPECT_EQ(p0.valid, p1.valid);
    }
  }
}

TEST(Serialize, RoundTrip) {
  namespace fs = std::filesystem;
  fs::path dir = fs::temp_directory_path() / "bevnet_scene_rt";
  fs::remove_all(dir);
  auto seqs = bevnet::generate(small_config());
  std::string manifest = (dir / "scene.jsonl").string();
  bevnet::serialize(seqs, manifest);
  auto back = bevnet::deserialize(manifest);
  ASSERT_EQ(back.size(), seqs.size());
  for (size_t s = 0; s < seqs.size(); ++s) {
    ASSERT_EQ(back[s].size(), seqs[s].size());
    for (size_t f = 0; f < seqs[s].size(); ++f)
      expect_frames_equal(seqs[s][f], back[s][f], 1e-12);
  }
  fs::remove_all(dir);
}

TEST(Serialize, TruncatedBlobNamesByteOffset) {
  namespace fs = std::filesystem;
  fs::path dir = fs::temp_directory_path() / "bevnet_scene_trunc";
  fs::remove_all(dir);
  SceneConfig cfg = golden_config();
  auto seqs = bevnet::generate(cfg);
  std::string manifest = (dir / "scene.jsonl").string();
  bevnet::serialize(seqs, manifest);
  fs::path blob = dir / "frames" / "s0_f0.bin";
  fs::resize_file(blob, 100);
  try {
    bevnet::deserialize(manifest);
    FAIL() << "expected truncation error";
  } catch (const std::runtime_error& e) {
    std::string msg = e.what();
    EXPECT_NE(msg.find("byte 100"), std::string::npos) << msg;
  }
  fs::remove_all(dir);
}

TEST(Serialize, CorruptManifestNamesLineAndByte) {
  namespace fs = std::filesystem;
  fs::path dir = fs::temp_directory_path() / "bevnet_scene_corrupt";
  fs::remove_all(dir);
  fs::create_directories(dir);
  std::string manifest = (dir / "scene.jsonl").string();
  {
    std::ofstream mf(manifest);
    mf << "{\"sequence\": 0, not json}\n";
  }
  try {
    bevnet::deserialize(manifest);
    FAIL() << "expected parse error";
  } catch (const std::runtime_error& e) {
    std::string msg = e.what();
    EXPECT_NE(msg.find("line 1"), std::string::npos) << msg;
    EXPECT_NE(msg.find("byte"), std::string::npos) << msg;
  }
  fs::remove_all(dir);
}

// Writes the committed fixture; run explicitly via
// --gtest_also_run_disabled_tests when the generator intentionally changes.
TEST(Golden, DISABLED_RegenerateFixture) {
  auto seqs = bevnet::generate(golden_config());
  bevnet::serialize(seqs, (fixture_dir() / "scene.jsonl").string());
}

TEST(Golden, FixtureMatchesGenerator) {
  auto fixture = bevnet::deserialize((fixture_dir() / "scene.jsonl").string());
  auto fresh = bevnet::generate(golden_config());
  ASSERT_EQ(fixture.size(), fresh.size());
  ASSERT_EQ(fixture[0].size(), fresh[0].size());
  expect_frames_equal(fixture[0][0], fresh[0][0], 1e-9);
}

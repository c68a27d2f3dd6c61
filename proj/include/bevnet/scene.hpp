#pragma once

// Synthetic multi-camera driving scenes: deterministic generation, image
// rendering, horizontal-flip augmentation, and on-disk serialization.
//
// Rendered objects are filled class-colored cuboid projections over a value
// noise background, with a brighter nose face so orientation is visible.
// Apparent size falls off with depth, which is what makes monocular depth
// learnable here.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "bevnet/geometry.hpp"
#include "bevnet/random.hpp"

namespace bevnet {

struct SceneConfig {
  int num_sequences = 2;
  int frames_per_sequence = 4;
  double frame_interval = 0.5;  // seconds; the long-interval mode uses 2.0
  int min_objects = 3;
  int max_objects = 6;
  int num_classes = 3;
  double bev_range = 20.0;  // meters; gt kept while |x|,|y| <= bev_range
  int image_width = 128;
  int image_height = 128;
  int num_cameras = 6;
  double camera_height = 1.5;
  double position_noise = 0.05;  // meters of per-frame gt jitter
  uint64_t seed = 1;

  void validate() const {
    if (num_sequences < 1 || frames_per_sequence < 1 || num_classes < 1 ||
        num_cameras < 1)
      throw std::invalid_argument("scene config: counts must be >= 1");
    if (frame_interval <= 0)
      throw std::invalid_argument("scene config: frame_interval must be > 0");
    if (min_objects < 0 || max_objects < min_objects)
      throw std::invalid_argument("scene config: bad object count range");
    if (image_width < 8 || image_height < 8)
      throw std::invalid_argument("scene config: image too small");
  }
};

// (l, w, h) per class; used for spawning and as the regression anchor for
// size deviations.
inline Vec3 class_canonical_size(int class_id) {
  switch (class_id) {
    case 0: return {4.5, 1.9, 1.6};   // car
    case 1: return {8.0, 2.5, 3.0};   // truck
    case 2: return {0.8, 0.8, 1.8};   // pedestrian
    default:
      return {2.0 + 0.5 * class_id, 1.0 + 0.2 * class_id, 1.5};
  }
}

inline std::array<double, 3> class_color(int class_id) {
  switch (class_id) {
    case 0: return {0.90, 0.25, 0.20};
    case 1: return {0.20, 0.85, 0.30};
    case 2: return {0.25, 0.35, 0.95};
    default: {
      double t = 0.15 + 0.1 * (class_id % 7);
      return {t, 1.0 - t, 0.5 + t / 3};
    }
  }
}

struct Image {
  int height = 0, width = 0;
  std::vector<float> data;  // [3, H, W], values in [0,1]

  float& at(int c, int r, int col) {
    return data[(static_cast<size_t>(c) * height + r) * width + col];
  }
  float at(int c, int r, int col) const {
    return data[(static_cast<size_t>(c) * height + r) * width + col];
  }
};

struct SceneFrame {
  int sequence = 0;
  int frame = 0;
  double timestamp = 0;
  SE3 ego_pose;  // world <- ego
  CameraRig rig;
  std::vector<Image> images;            // one per rig view
  std::vector<Box3D> gt_boxes;          // ego frame
  std::vector<std::vector<bool>> gt_visibility;  // [box][view]
};

// world <- ego at time t: gentle S-curve at constant forward speed.
inline SE3 ego_pose_at(double t) {
  constexpr double v = 5.0, amp = 2.0, omega = 0.15;
  double x = v * t;
  double y = amp * std::sin(omega * t);
  double heading = std::atan2(amp * omega * std::cos(omega * t), v);
  return SE3{rot_z(heading), {x, y, 0.0}};
}

// 60-degree yaw increments, 90-degree horizontal FOV.
inline CameraRig default_rig(int num_cameras, int width, int height,
                             double camera_height) {
  CameraRig rig;
  for (int k = 0; k < num_cameras; ++k) {
    double yaw = 2.0 * kPi * k / num_cameras;
    double c = std::cos(yaw), s = std::sin(yaw);
    // Rows: camera right, down, forward expressed in ego coordinates.
    Mat3 R{s, -c, 0,  //
           0, 0, -1,  //
           c, s, 0};
    Vec3 center{0, 0, camera_height};
    Vec3 rc = mat3_apply(R, center);
    CameraView view;
    view.name = "cam" + std::to_string(k);
    view.K.fx = view.K.fy = width / 2.0;  // tan(45 deg) = 1
    view.K.cx = (width - 1) / 2.0;
    view.K.cy = (height - 1) / 2.0;
    view.K.width = width;
    view.K.height = height;
    view.ego_to_camera = SE3{R, {-rc[0], -rc[1], -rc[2]}};
    rig.views.push_back(view);
  }
  return rig;
}

namespace detail {

struct ObjectTrack {
  Vec3 p0;  // world frame at t=0
  Vec2 vel;
  double yaw;
  double l, w, h;
  int class_id;
};

inline std::vector<ObjectTrack> spawn_objects(const SceneConfig& cfg,
                                              int seq) {
  Rng rng(derive_seed(cfg.seed, 101, seq));
  int n = rng.uniform_int(cfg.min_objects, cfg.max_objects);
  // Spawn around the trajectory midpoint so objects stay in range.
  double t_mid = cfg.frame_interval * (cfg.frames_per_sequence - 1) / 2.0;
  SE3 mid = ego_pose_at(t_mid);
  std::vector<ObjectTrack> tracks;
  for (int i = 0; i < n; ++i) {
    ObjectTrack tr;
    tr.class_id = rng.uniform_int(0, cfg.num_classes - 1);
    Vec3 base = class_canonical_size(tr.class_id);
    tr.l = base[0] * rng.uniform(0.85, 1.15);
    tr.w = base[1] * rng.uniform(0.85, 1.15);
    tr.h = base[2] * rng.uniform(0.85, 1.15);
    double r = cfg.bev_range;
    Vec3 local{rng.uniform(-0.7 * r, 0.7 * r), rng.uniform(-0.7 * r, 0.7 * r),
               tr.h / 2.0};
    // Keep a clear lane around the ego so boxes do not sit inside cameras.
    if (std::abs(local[0]) < 3 && std::abs(local[1]) < 3)
      local[0] += local[0] >= 0 ? 5.0 : -5.0;
    Vec3 world = mid.apply(local);
    double speed = tr.class_id == 2 ? rng.uniform(0.5, 1.5)
                                    : rng.uniform(1.0, 5.0);
    double dir = rng.uniform(-kPi, kPi);
    tr.vel = {speed * std::cos(dir), speed * std::sin(dir)};
    tr.yaw = speed > 0.3 ? dir : rng.uniform(-kPi, kPi);
    tr.p0 = {world[0] - tr.vel[0] * t_mid, world[1] - tr.vel[1] * t_mid,
             world[2]};
    tracks.push_back(tr);
  }
  return tracks;
}

// Coarse random lattice, bilinearly interpolated; three loosely correlated
// channels.
inline void fill_background(Image& img, Rng& rng) {
  int gh = img.height / 16 + 2, gw = img.width / 16 + 2;
  std::vector<float> grid(static_cast<size_t>(gh) * gw * 3);
  for (int i = 0; i < gh * gw; ++i) {
    float base = static_cast<float>(rng.uniform(0.05, 0.40));
    for (int c = 0; c < 3; ++c)
      grid[c * gh * gw + i] =
          base + static_cast<float>(rng.uniform(-0.04, 0.04));
  }
  double sy = static_cast<double>(gh - 1) / img.height;
  double sx = static_cast<double>(gw - 1) / img.width;
  for (int r = 0; r < img.height; ++r) {
    double gy = r * sy;
    int y0 = static_cast<int>(gy);
    double wy = gy - y0;
    for (int col = 0; col < img.width; ++col) {
      double gx = col * sx;
      int x0 = static_cast<int>(gx);
      double wx = gx - x0;
      for (int c = 0; c < 3; ++c) {
        const float* g = grid.data() + static_cast<size_t>(c) * gh * gw;
        double v00 = g[y0 * gw + x0], v01 = g[y0 * gw + x0 + 1];
        double v10 = g[(y0 + 1) * gw + x0], v11 = g[(y0 + 1) * gw + x0 + 1];
        img.at(c, r, col) = static_cast<float>(
            (1 - wy) * ((1 - wx) * v00 + wx * v01) +
            wy * ((1 - wx) * v10 + wx * v11));
      }
    }
  }
}

inline void fill_convex_hull(Image& img, const std::vector<Vec2>& pts,
                             const std::array<double, 3>& color) {
  if (pts.size() < 3) return;
  // Monotone-chain hull; input points are (u, v) pixels.
  std::vector<Vec2> p = pts;
  std::sort(p.begin(), p.end(), [](const Vec2& a, const Vec2& b) {
    return a[0] < b[0] || (a[0] == b[0] && a[1] < b[1]);
  });
  auto cross = [](const Vec2& o, const Vec2& a, const Vec2& b) {
    return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0]);
  };
  std::vector<Vec2> hull(2 * p.size());
  size_t k = 0;
  for (size_t i = 0; i < p.size(); ++i) {
    while (k >= 2 && cross(hull[k - 2], hull[k - 1], p[i]) <= 0) --k;
    hull[k++] = p[i];
  }
  for (size_t i = p.size() - 1, lo = k + 1; i-- > 0;) {
    while (k >= lo && cross(hull[k - 2], hull[k - 1], p[i]) <= 0) --k;
    hull[k++] = p[i];
  }
  hull.resize(k > 0 ? k - 1 : 0);
  if (hull.size() < 3) return;

  double min_u = 1e18, max_u = -1e18, min_v = 1e18, max_v = -1e18;
  for (const auto& q : hull) {
    min_u = std::min(min_u, q[0]);
    max_u = std::max(max_u, q[0]);
    min_v = std::min(min_v, q[1]);
    max_v = std::max(max_v, q[1]);
  }
  int r0 = std::max(0, static_cast<int>(std::ceil(min_v)));
  int r1 = std::min(img.height - 1, static_cast<int>(std::floor(max_v)));
  int c0 = std::max(0, static_cast<int>(std::ceil(min_u)));
  int c1 = std::min(img.width - 1, static_cast<int>(std::floor(max_u)));
  for (int r = r0; r <= r1; ++r) {
    for (int c = c0; c <= c1; ++c) {
      bool inside = true;
      for (size_t i = 0; i < hull.size() && inside; ++i) {
        const Vec2& a = hull[i];
        const Vec2& b = hull[(i + 1) % hull.size()];
        // Hull is counter-clockwise in (u,v); inside means left of every edge.
        if ((b[0] - a[0]) * (r - a[1]) - (b[1] - a[1]) * (c - a[0]) < 0)
          inside = false;
      }
      if (!inside) continue;
      for (int ch = 0; ch < 3; ++ch)
        img.at(ch, r, c) = static_cast<float>(
            std::clamp(color[ch], 0.0, 1.0));
    }
  }
}

inline void render_view(Image& img, const CameraView& view,
                        const std::vector<Box3D>& boxes, Rng& bg_rng) {
  fill_background(img, bg_rng);
  // Painter's order: far to near by camera-frame depth of the center.
  std::vector<std::pair<double, size_t>> order;
  for (size_t i = 0; i < boxes.size(); ++i) {
    Vec3 c = view.ego_to_camera.apply(boxes[i].center);
    if (c[2] > kProjZMin) order.emplace_back(c[2], i);
  }
  std::sort(order.begin(), order.end(),
            [](const auto& a, const auto& b) { return a.first > b.first; });
  for (const auto& [depth, bi] : order) {
    const Box3D& box = boxes[bi];
    auto corners = box_corners_3d(box);
    std::vector<Vec2> body;
    for (const auto& cp : corners) {
      Vec3 pc = view.ego_to_camera.apply(cp);
      if (pc[2] <= kProjZMin) continue;
      auto pr = project_view(pc, view);
      body.push_back({pr.u, pr.v});  // keep off-screen points for the hull
    }
    auto color = class_color(box.class_id);
    double shade = 0.75 + 0.25 * std::exp(-depth / 30.0);
    std::array<double, 3> shaded{color[0] * shade, color[1] * shade,
                                 color[2] * shade};
    fill_convex_hull(img, body, shaded);
    // Nose face (+l/2): corners 0, 3 bottom and 4, 7 top, brighter.
    std::vector<Vec2> nose;
    for (int idx : {0, 3, 4, 7}) {
      Vec3 pc = view.ego_to_camera.apply(corners[idx]);
      if (pc[2] <= kProjZMin) continue;
      auto pr = project_view(pc, view);
      nose.push_back({pr.u, pr.v});
    }
    std::array<double, 3> bright{std::min(1.0, shaded[0] * 1.45 + 0.1),
                                 std::min(1.0, shaded[1] * 1.45 + 0.1),
                                 std::min(1.0, shaded[2] * 1.45 + 0.1)};
    fill_convex_hull(img, nose, bright);
  }
}

}  // namespace detail

inline std::vector<std::vector<SceneFrame>> generate(const SceneConfig& cfg) {
  cfg.validate();
  std::vector<std::vector<SceneFrame>> sequences;
  CameraRig rig = default_rig(cfg.num_cameras, cfg.image_width,
                              cfg.image_height, cfg.camera_height);
  for (int seq = 0; seq < cfg.num_sequences; ++seq) {
    auto tracks = detail::spawn_objects(cfg, seq);
    std::vector<SceneFrame> frames;
    for (int f = 0; f < cfg.frames_per_sequence; ++f) {
      SceneFrame frame;
      frame.sequence = seq;
      frame.frame = f;
      frame.timestamp = f * cfg.frame_interval;
      frame.ego_pose = ego_pose_at(frame.timestamp);
      frame.rig = rig;
      SE3 world_to_ego = frame.ego_pose.inverse();

      Rng jitter(derive_seed(cfg.seed, 202, seq, f));
      for (const auto& tr : tracks) {
        Vec3 pw{tr.p0[0] + tr.vel[0] * frame.timestamp +
                    jitter.normal(0, cfg.position_noise),
                tr.p0[1] + tr.vel[1] * frame.timestamp +
                    jitter.normal(0, cfg.position_noise),
                tr.p0[2]};
        Vec3 pe = world_to_ego.apply(pw);
        if (std::abs(pe[0]) > cfg.bev_range || std::abs(pe[1]) > cfg.bev_range)
          continue;
        Box3D box;
        box.center = pe;
        box.l = tr.l;
        box.w = tr.w;
        box.h = tr.h;
        // world heading minus ego heading; rotation is about +z only.
        double ego_heading = std::atan2(frame.ego_pose.R[3],
                                        frame.ego_pose.R[0]);
        box.yaw = wrap_angle(tr.yaw - ego_heading);
        double ch = std::cos(-ego_heading), sh = std::sin(-ego_heading);
        box.velocity = {ch * tr.vel[0] - sh * tr.vel[1],
                        sh * tr.vel[0] + ch * tr.vel[1]};
        box.class_id = tr.class_id;
        frame.gt_boxes.push_back(box);
      }

      for (size_t v = 0; v < rig.views.size(); ++v) {
        Image img;
        img.height = cfg.image_height;
        img.width = cfg.image_width;
        img.data.assign(static_cast<size_t>(3) * img.height * img.width, 0.f);
        Rng bg(derive_seed(cfg.seed, 303, seq, f, static_cast<int>(v)));
        detail::render_view(img, rig.views[v], frame.gt_boxes, bg);
        frame.images.push_back(std::move(img));
      }

      for (const auto& box : frame.gt_boxes) {
        std::vector<bool> vis;
        auto corners = box_corners_3d(box);
        for (const auto& view : rig.views) {
          bool any = false;
          for (const auto& cp : corners) {
            Vec3 pc = view.ego_to_camera.apply(cp);
            if (project_view(pc, view).valid) {
              any = true;
              break;
            }
          }
          vis.push_back(any);
        }
        frame.gt_visibility.push_back(std::move(vis));
      }
      frames.push_back(std::move(frame));
    }
    sequences.push_back(std::move(frames));
  }
  return sequences;
}

// Horizontal mirror of every view. Ego-frame 3D ground truth is untouched;
// the per-view flipped flag plus the mirrored cx keep projections consistent.
// Applying twice restores the original bit-for-bit.
inline SceneFrame ida_flip(const SceneFrame& frame, bool apply) {
  if (!apply) return frame;
  SceneFrame out = frame;
  for (size_t v = 0; v < out.rig.views.size(); ++v) {
    CameraView& view = out.rig.views[v];
    view.K.cx = (view.K.width - 1) - view.K.cx;
    view.flipped = !view.flipped;
    Image& img = out.images[v];
    for (int c = 0; c < 3; ++c)
      for (int r = 0; r < img.height; ++r)
        for (int col = 0; col < img.width / 2; ++col)
          std::swap(img.at(c, r, col), img.at(c, r, img.width - 1 - col));
  }
  return out;
}

inline SE3 relative_pose(const SceneFrame& current, const SceneFrame& past) {
  return current.ego_pose.inverse().compose(past.ego_pose);
}

// ---------------------------------------------------------------------------
// Serialization: JSON-lines manifest plus raw little-endian float32 blobs.

namespace detail {

inline nlohmann::json se3_to_json(const SE3& t) {
  return {{"R", std::vector<double>(t.R.begin(), t.R.end())},
          {"t", std::vector<double>(t.t.begin(), t.t.end())}};
}

inline SE3 se3_from_json(const nlohmann::json& j) {
  SE3 t;
  auto r = j.at("R").get<std::vector<double>>();
  auto tt = j.at("t").get<std::vector<double>>();
  std::copy(r.begin(), r.end(), t.R.begin());
  std::copy(tt.begin(), tt.end(), t.t.begin());
  return t;
}

}  // namespace detail

inline void serialize(const std::vector<std::vector<SceneFrame>>& sequences,
                      const std::string& manifest_path) {
  namespace fs = std::filesystem;
  fs::path mpath(manifest_path);
  fs::path dir = mpath.parent_path();
  if (!dir.empty()) fs::create_directories(dir);
  fs::create_directories(dir / "frames");
  std::ofstream mf(mpath);
  if (!mf) throw std::runtime_error("cannot write manifest: " + manifest_path);

  for (const auto& seq : sequences) {
    for (const auto& frame : seq) {
      std::string blob_rel = "frames/s" + std::to_string(frame.sequence) +
                             "_f" + std::to_string(frame.frame) + ".bin";
      {
        std::ofstream bf(dir / blob_rel, std::ios::binary);
        for (const auto& img : frame.images)
          bf.write(reinterpret_cast<const char*>(img.data.data()),
                   static_cast<std::streamsize>(img.data.size() *
                                                sizeof(float)));
      }
      nlohmann::json views = nlohmann::json::array();
      for (const auto& view : frame.rig.views)
        views.push_back({{"name", view.name},
                         {"fx", view.K.fx},
                         {"fy", view.K.fy},
                         {"cx", view.K.cx},
                         {"cy", view.K.cy},
                         {"width", view.K.width},
                         {"height", view.K.height},
                         {"flipped", view.flipped},
                         {"ego_to_camera",
                          detail::se3_to_json(view.ego_to_camera)}});
      nlohmann::json boxes = nlohmann::json::array();
      for (const auto& b : frame.gt_boxes)
        boxes.push_back({{"center", std::vector<double>(b.center.begin(),
                                                        b.center.end())},
                         {"l", b.l},
                         {"w", b.w},
                         {"h", b.h},
                         {"yaw", b.yaw},
                         {"velocity", std::vector<double>(b.velocity.begin(),
                                                          b.velocity.end())},
                         {"class_id", b.class_id},
                         {"score", b.score}});
      nlohmann::json vis = nlohmann::json::array();
      for (const auto& bv : frame.gt_visibility)
        vis.push_back(std::vector<bool>(bv.begin(), bv.end()));
      nlohmann::json line{{"sequence", frame.sequence},
                          {"frame", frame.frame},
                          {"timestamp", frame.timestamp},
                          {"ego_pose", detail::se3_to_json(frame.ego_pose)},
                          {"views", views},
                          {"gt_boxes", boxes},
                          {"gt_visibility", vis},
                          {"blob", blob_rel}};
      mf << line.dump() << "\n";
    }
  }
}

inline std::vector<std::vector<SceneFrame>> deserialize(
    const std::string& manifest_path) {
  namespace fs = std::filesystem;
  std::ifstream mf(manifest_path);
  if (!mf)
    throw std::runtime_error("cannot open manifest: " + manifest_path);
  fs::path dir = fs::path(manifest_path).parent_path();

  std::vector<std::vector<SceneFrame>> sequences;
  std::string linebuf;
  size_t byte_offset = 0;
  int line_no = 0;
  while (std::getline(mf, linebuf)) {
    ++line_no;
    if (linebuf.empty()) {
      byte_offset += 1;
      continue;
    }
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(linebuf);
    } catch (const nlohmann::json::parse_error& e) {
      throw std::runtime_error(
          "scene manifest parse error at line " + std::to_string(line_no) +
          ", byte " + std::to_string(byte_offset + e.byte) + ": " + e.what());
    }
    SceneFrame frame;
    frame.sequence = j.at("sequence").get<int>();
    frame.frame = j.at("frame").get<int>();
    frame.timestamp = j.at("timestamp").get<double>();
    frame.ego_pose = detail::se3_from_json(j.at("ego_pose"));
    for (const auto& vj : j.at("views")) {
      CameraView view;
      view.name = vj.at("name").get<std::string>();
      view.K.fx = vj.at("fx").get<double>();
      view.K.fy = vj.at("fy").get<double>();
      view.K.cx = vj.at("cx").get<double>();
      view.K.cy = vj.at("cy").get<double>();
      view.K.width = vj.at("width").get<int>();
      view.K.height = vj.at("height").get<int>();
      view.flipped = vj.at("flipped").get<bool>();
      view.ego_to_camera = detail::se3_from_json(vj.at("ego_to_camera"));
      frame.rig.views.push_back(view);
    }
    for (const auto& bj : j.at("gt_boxes")) {
      Box3D b;
      auto c = bj.at("center").get<std::vector<double>>();
      std::copy(c.begin(), c.end(), b.center.begin());
      b.l = bj.at("l").get<double>();
      b.w = bj.at("w").get<double>();
      b.h = bj.at("h").get<double>();
      b.yaw = bj.at("yaw").get<double>();
      auto v = bj.at("velocity").get<std::vector<double>>();
      std::copy(v.begin(), v.end(), b.velocity.begin());
      b.class_id = bj.at("class_id").get<int>();
      b.score = bj.at("score").get<double>();
      frame.gt_boxes.push_back(b);
    }
    for (const auto& vj : j.at("gt_visibility"))
      frame.gt_visibility.push_back(vj.get<std::vector<bool>>());

    std::string blob_rel = j.at("blob").get<std::string>();
    fs::path blob_path = dir / blob_rel;
    int W = frame.rig.views.at(0).K.width;
    int H = frame.rig.views.at(0).K.height;
    size_t expected = frame.rig.views.size() * 3u *
                      static_cast<size_t>(H) * W * sizeof(float);
    std::error_code ec;
    auto actual = fs::file_size(blob_path, ec);
    if (ec)
      throw std::runtime_error("missing image blob: " + blob_path.string());
    if (actual != expected)
      throw std::runtime_error(
          "truncated image blob " + blob_path.string() + ": expected " +
          std::to_string(expected) + " bytes, got " + std::to_string(actual) +
          " (failure at byte " + std::to_string(actual) + ")");
    std::ifstream bf(blob_path, std::ios::binary);
    for (size_t v = 0; v < frame.rig.views.size(); ++v) {
      Image img;
      img.width = W;
      img.height = H;
      img.data.resize(static_cast<size_t>(3) * H * W);
      bf.read(reinterpret_cast<char*>(img.data.data()),
              static_cast<std::streamsize>(img.data.size() * sizeof(float)));
      frame.images.push_back(std::move(img));
    }

    if (sequences.empty() ||
        sequences.back().back().sequence != frame.sequence)
      sequences.emplace_back();
    sequences.back().push_back(std::move(frame));
    byte_offset += linebuf.size() + 1;
  }
  return sequences;
}

}  // namespace bevnet

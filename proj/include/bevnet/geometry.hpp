#pragma once

// Rigid transforms, pinhole projection, and box IoU. Plain double math, no
// autodiff: geometry feeds target assignment and reference points, which are
// constants with respect to the network.

#include <array>
#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

namespace bevnet {

using Vec2 = std::array<double, 2>;
using Vec3 = std::array<double, 3>;
using Mat3 = std::array<double, 9>;  // row-major

inline constexpr double kPi = 3.14159265358979323846;
inline constexpr double kProjZMin = 1e-3;  // meters; projection validity floor

// Normalizes to (-pi, pi].
inline double wrap_angle(double a) {
  a = std::fmod(a, 2.0 * kPi);
  if (a <= -kPi) a += 2.0 * kPi;
  if (a > kPi) a -= 2.0 * kPi;
  return a;
}

inline Mat3 mat3_identity() {
  return {1, 0, 0, 0, 1, 0, 0, 0, 1};
}

inline Mat3 mat3_mul(const Mat3& a, const Mat3& b) {
  Mat3 c{};
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) {
      double acc = 0;
      for (int k = 0; k < 3; ++k) acc += a[i * 3 + k] * b[k * 3 + j];
      c[i * 3 + j] = acc;
    }
  return c;
}

inline Vec3 mat3_apply(const Mat3& m, const Vec3& p) {
  return {m[0] * p[0] + m[1] * p[1] + m[2] * p[2],
          m[3] * p[0] + m[4] * p[1] + m[5] * p[2],
          m[6] * p[0] + m[7] * p[1] + m[8] * p[2]};
}

inline Mat3 mat3_transpose(const Mat3& m) {
  return {m[0], m[3], m[6], m[1], m[4], m[7], m[2], m[5], m[8]};
}

inline double mat3_det(const Mat3& m) {
  return m[0] * (m[4] * m[8] - m[5] * m[7]) -
         m[1] * (m[3] * m[8] - m[5] * m[6]) +
         m[2] * (m[3] * m[7] - m[4] * m[6]);
}

inline Mat3 rot_z(double yaw) {
  double c = std::cos(yaw), s = std::sin(yaw);
  return {c, -s, 0, s, c, 0, 0, 0, 1};
}

struct SE3 {
  Mat3 R = mat3_identity();
  Vec3 t{0, 0, 0};

  static SE3 identity() { return {}; }

  // Rotation must be orthonormal with det +1 within 1e-9.
  static SE3 from_rt(const Mat3& R, const Vec3& t) {
    SE3 T{R, t};
    T.validate();
    return T;
  }

  void validate() const {
    Mat3 rtr = mat3_mul(mat3_transpose(R), R);
    Mat3 eye = mat3_identity();
    for (int i = 0; i < 9; ++i)
      if (std::abs(rtr[i] - eye[i]) > 1e-9)
        throw std::invalid_argument("SE3: rotation is not orthonormal");
    if (std::abs(mat3_det(R) - 1.0) > 1e-9)
      throw std::invalid_argument("SE3: rotation determinant is not +1");
  }

  Vec3 apply(const Vec3& p) const {
    Vec3 r = mat3_apply(R, p);
    return {r[0] + t[0], r[1] + t[1], r[2] + t[2]};
  }

  // this ∘ other: applies other first.
  SE3 compose(const SE3& other) const {
    SE3 out;
    out.R = mat3_mul(R, other.R);
    Vec3 rt = mat3_apply(R, other.t);
    out.t = {rt[0] + t[0], rt[1] + t[1], rt[2] + t[2]};
    return out;
  }

  SE3 inverse() const {
    SE3 out;
    out.R = mat3_transpose(R);
    Vec3 rt = mat3_apply(out.R, t);
    out.t = {-rt[0], -rt[1], -rt[2]};
    return out;
  }
};

inline SE3 se3_compose(const SE3& a, const SE3& b) { return a.compose(b); }
inline SE3 se3_inverse(const SE3& t) { return t.inverse(); }
inline Vec3 se3_apply(const SE3& t, const Vec3& p) { return t.apply(p); }

struct CameraIntrinsics {
  double fx = 0, fy = 0, cx = 0, cy = 0;
  int width = 0, height = 0;

  void validate() const {
    if (fx <= 0 || fy <= 0)
      throw std::invalid_argument("intrinsics: focal lengths must be > 0");
    if (cx < 0 || cx >= width || cy < 0 || cy >= height)
      throw std::invalid_argument(
          "intrinsics: principal point outside image bounds");
  }
};

struct CameraView {
  std::string name;
  CameraIntrinsics K;
  SE3 ego_to_camera;
  // Set when the image has been mirrored along width; K.cx is then already
  // the mirrored principal point and projection negates fx.
  bool flipped = false;
};

struct CameraRig {
  std::vector<CameraView> views;

  void validate() const {
    if (views.empty()) throw std::invalid_argument("rig: no views");
    for (size_t i = 0; i < views.size(); ++i) {
      views[i].K.validate();
      views[i].ego_to_camera.validate();
      for (size_t j = i + 1; j < views.size(); ++j)
        if (views[i].name == views[j].name)
          throw std::invalid_argument("rig: duplicate view name " +
                                      views[i].name);
    }
  }
};

struct Projection {
  double u = 0, v = 0;
  double depth = 0;
  bool valid = false;
};

// (u,v) = (fx·x/z + cx, fy·y/z + cy); valid requires z > z_min and the pixel
// inside the image rectangle.
inline Projection project(const Vec3& p_cam, const CameraIntrinsics& K) {
  Projection r;
  r.depth = p_cam[2];
  if (p_cam[2] <= kProjZMin) return r;
  r.u = K.fx * p_cam[0] / p_cam[2] + K.cx;
  r.v = K.fy * p_cam[1] / p_cam[2] + K.cy;
  r.valid = r.u >= 0 && r.u < K.width && r.v >= 0 && r.v < K.height;
  return r;
}

// Pixel + depth back to the camera frame; inverse of project along the ray.
inline Vec3 back_project(double u, double v, double depth,
                         const CameraIntrinsics& K) {
  return {(u - K.cx) / K.fx * depth, (v - K.cy) / K.fy * depth, depth};
}

// Projection through a rig view, honoring its mirror state: a flipped view
// maps u to what the mirrored image shows at that column.
inline Projection project_view(const Vec3& p_cam, const CameraView& view) {
  Projection r;
  r.depth = p_cam[2];
  if (p_cam[2] <= kProjZMin) return r;
  double fx = view.flipped ? -view.K.fx : view.K.fx;
  r.u = fx * p_cam[0] / p_cam[2] + view.K.cx;
  r.v = view.K.fy * p_cam[1] / p_cam[2] + view.K.cy;
  r.valid = r.u >= 0 && r.u < view.K.width && r.v >= 0 && r.v < view.K.height;
  return r;
}

inline Vec3 back_project_view(double u, double v, double depth,
                              const CameraView& view) {
  double fx = view.flipped ? -view.K.fx : view.K.fx;
  return {(u - view.K.cx) / fx * depth, (v - view.K.cy) / view.K.fy * depth,
          depth};
}

struct Rect {
  double x1 = 0, y1 = 0, x2 = 0, y2 = 0;
  double area() const {
    return std::max(0.0, x2 - x1) * std::max(0.0, y2 - y1);
  }
};

inline double iou_2d(const Rect& a, const Rect& b) {
  double ix = std::min(a.x2, b.x2) - std::max(a.x1, b.x1);
  double iy = std::min(a.y2, b.y2) - std::max(a.y1, b.y1);
  if (ix <= 0 || iy <= 0) return 0.0;
  double inter = ix * iy;
  double uni = a.area() + b.area() - inter;
  return uni <= 0 ? 0.0 : inter / uni;
}

struct Box3D {
  Vec3 center{0, 0, 0};  // ego frame, meters
  double l = 1, w = 1, h = 1;
  double yaw = 0;  // about vertical, (-pi, pi]
  Vec2 velocity{0, 0};
  int class_id = 0;
  double score = 1.0;
};

// BEV footprint corners, counter-clockwise. x along heading (length), y left.
inline std::array<Vec2, 4> bev_corners(const Box3D& b) {
  double c = std::cos(b.yaw), s = std::sin(b.yaw);
  double hl = b.l / 2, hw = b.w / 2;
  std::array<Vec2, 4> local{{{hl, hw}, {-hl, hw}, {-hl, -hw}, {hl, -hw}}};
  std::array<Vec2, 4> out;
  for (int i = 0; i < 4; ++i)
    out[i] = {b.center[0] + c * local[i][0] - s * local[i][1],
              b.center[1] + s * local[i][0] + c * local[i][1]};
  return out;
}

inline std::array<Vec3, 8> box_corners_3d(const Box3D& b) {
  auto bev = bev_corners(b);
  std::array<Vec3, 8> out;
  for (int i = 0; i < 4; ++i) {
    out[i] = {bev[i][0], bev[i][1], b.center[2] - b.h / 2};
    out[i + 4] = {bev[i][0], bev[i][1], b.center[2] + b.h / 2};
  }
  return out;
}

namespace detail {

inline double polygon_area(const std::vector<Vec2>& poly) {
  double a = 0;
  size_t n = poly.size();
  for (size_t i = 0; i < n; ++i) {
    const Vec2& p = poly[i];
    const Vec2& q = poly[(i + 1) % n];
    a += p[0] * q[1] - q[0] * p[1];
  }
  return std::abs(a) / 2.0;
}

// Clips a polygon against the half-plane left of edge a->b
// (Sutherland-Hodgman step; both rectangles are counter-clockwise convex).
inline std::vector<Vec2> clip_halfplane(const std::vector<Vec2>& poly,
                                        const Vec2& a, const Vec2& b) {
  std::vector<Vec2> out;
  size_t n = poly.size();
  auto side = [&](const Vec2& p) {
    return (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0]);
  };
  for (size_t i = 0; i < n; ++i) {
    const Vec2& cur = poly[i];
    const Vec2& nxt = poly[(i + 1) % n];
    double sc = side(cur), sn = side(nxt);
    if (sc >= 0) out.push_back(cur);
    if ((sc > 0 && sn < 0) || (sc < 0 && sn > 0)) {
      double t = sc / (sc - sn);
      out.push_back({cur[0] + t * (nxt[0] - cur[0]),
                     cur[1] + t * (nxt[1] - cur[1])});
    }
  }
  return out;
}

}  // namespace detail

// Rotated-rectangle IoU of the BEV footprints via convex polygon clipping.
inline double iou_bev(const Box3D& a, const Box3D& b) {
  double area_a = a.l * a.w, area_b = b.l * b.w;
  if (area_a <= 0 || area_b <= 0) return 0.0;
  auto ca = bev_corners(a);
  auto cb = bev_corners(b);
  std::vector<Vec2> poly(ca.begin(), ca.end());
  for (int e = 0; e < 4 && !poly.empty(); ++e)
    poly = detail::clip_halfplane(poly, cb[e], cb[(e + 1) % 4]);
  if (poly.size() < 3) return 0.0;
  double inter = detail::polygon_area(poly);
  double uni = area_a + area_b - inter;
  return uni <= 0 ? 0.0 : inter / uni;
}

// Center distance on the BEV plane, the nuScenes matching metric.
inline double center_dist_bev(const Box3D& a, const Box3D& b) {
  double dx = a.center[0] - b.center[0];
  double dy = a.center[1] - b.center[1];
  return std::sqrt(dx * dx + dy * dy);
}

}  // namespace bevnet

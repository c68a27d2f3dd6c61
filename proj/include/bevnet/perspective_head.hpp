#pragma once

// Dense per-pixel monocular 3D detection head. Each pyramid level carries
// class logits, 2D box distances, centerness, and a 3D box parameterization
// (camera-aware depth, projected-center offset, size deviation from class
// canonical size, yaw as sin/cos, and a self-supervised 3D confidence).
// The same head provides first-stage proposals for the BEV decoder.

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include "bevnet/backbone.hpp"
#include "bevnet/geometry.hpp"
#include "bevnet/ops.hpp"
#include "bevnet/optim.hpp"
#include "bevnet/scene.hpp"
#include "bevnet/tensor.hpp"

namespace bevnet {

struct PerspectiveHeadConfig {
  int num_classes = 3;
  int channels = 64;           // pyramid channel count
  int tower_depth = 2;         // convs per tower
  double center_radius = 1.5;  // center-sampling window, in strides
  double f_ref = 64.0;         // reference focal length for depth decoding
  double conf_tau = 1.0;       // meters; confidence target exp(-err/tau)
  double focal_alpha = 0.25;
  double focal_gamma = 2.0;
  double cls_bias_init = -4.0;
  double depth_bias_init = 2.3;  // exp(2.3) ~ 10 m at f == f_ref
  // Upper regression range per level, pixels; last level unbounded.
  std::vector<double> level_ranges = {64.0, 128.0, 256.0, 512.0};
  // Canonical (l,w,h) per class id; filled from the shared class table when
  // left empty.
  std::vector<std::array<double, 3>> canonical_sizes;

  void resolve_sizes() {
    if ((int)canonical_sizes.size() < num_classes) {
      canonical_sizes.clear();
      for (int c = 0; c < num_classes; ++c) {
        Vec3 s = class_canonical_size(c);
        canonical_sizes.push_back({s[0], s[1], s[2]});
      }
    }
  }
};

// A 3D box in one camera's frame, parameterized the way the head regresses
// it: projected center pixel, metric depth, size, and camera-planar yaw.
struct CamBox {
  double u = 0, v = 0;     // projected 3D center, pixels
  double z = 0;            // depth, meters
  double l = 0, w = 0, h = 0;
  double psi = 0;          // yaw about the vertical, camera-planar
};

inline double view_fx(const CameraView& view) {
  return view.flipped ? -view.K.fx : view.K.fx;
}

// Ego-frame box -> camera-frame parameterization. valid=false when the
// center is too close to (or behind) the image plane.
inline bool box_to_cam(const Box3D& b, const CameraView& view, CamBox& out) {
  Vec3 c = view.ego_to_camera.apply(b.center);
  if (c[2] <= kProjZMin) return false;
  out.z = c[2];
  out.u = view.K.cx + view_fx(view) * c[0] / c[2];
  out.v = view.K.cy + view.K.fy * c[1] / c[2];
  out.l = b.l;
  out.w = b.w;
  out.h = b.h;
  Vec3 f_ego{std::cos(b.yaw), std::sin(b.yaw), 0.0};
  Vec3 f_cam = mat3_apply(view.ego_to_camera.R, f_ego);
  out.psi = std::atan2(view.flipped ? -f_cam[0] : f_cam[0], f_cam[2]);
  return true;
}

// Inverse of box_to_cam. Velocity is not modeled by this head.
inline Box3D cam_to_box(const CamBox& cb, const CameraView& view) {
  Box3D b;
  Vec3 c_cam{(cb.u - view.K.cx) / view_fx(view) * cb.z,
             (cb.v - view.K.cy) / view.K.fy * cb.z, cb.z};
  SE3 cam_to_ego = view.ego_to_camera.inverse();
  b.center = cam_to_ego.apply(c_cam);
  double fx_sign = view.flipped ? -1.0 : 1.0;
  Vec3 f_cam{fx_sign * std::sin(cb.psi), 0.0, std::cos(cb.psi)};
  Vec3 f_ego = mat3_apply(mat3_transpose(view.ego_to_camera.R), f_cam);
  b.yaw = std::atan2(f_ego[1], f_ego[0]);
  b.l = cb.l;
  b.w = cb.w;
  b.h = cb.h;
  b.velocity = {0.0, 0.0};
  return b;
}

// Camera-frame corners of a CamBox; bottom 4 then top 4. Mirrors the
// ego-frame corner convention under box_to_cam.
inline std::array<Vec3, 8> cam_box_corners(const CamBox& cb,
                                           const CameraView& view) {
  double fx = view_fx(view);
  Vec3 c{(cb.u - view.K.cx) / fx * cb.z, (cb.v - view.K.cy) / view.K.fy * cb.z,
         cb.z};
  double s = std::sin(cb.psi), co = std::cos(cb.psi);
  double sgn = view.flipped ? -1.0 : 1.0;
  Vec3 fwd{sgn * s, 0.0, co};
  Vec3 left{-sgn * co, 0.0, s};
  Vec3 up{0.0, -1.0, 0.0};
  std::array<Vec3, 8> out;
  int k = 0;
  for (int top = 0; top <= 1; ++top) {
    double hz = (top ? 0.5 : -0.5) * cb.h;
    double corners[4][2] = {{0.5, 0.5}, {-0.5, 0.5}, {-0.5, -0.5}, {0.5, -0.5}};
    for (auto& ab : corners) {
      double a = ab[0] * cb.l, b2 = ab[1] * cb.w;
      out[k++] = {c[0] + a * fwd[0] + b2 * left[0] + hz * up[0],
                  c[1] + a * fwd[1] + b2 * left[1] + hz * up[1],
                  c[2] + a * fwd[2] + b2 * left[2] + hz * up[2]};
    }
  }
  return out;
}

inline double cam_corner_error(const CamBox& a, const CamBox& b,
                               const CameraView& view) {
  auto ca = cam_box_corners(a, view), cb = cam_box_corners(b, view);
  double e = 0;
  for (int k = 0; k < 8; ++k)
    for (int d = 0; d < 3; ++d) e += std::abs(ca[k][d] - cb[k][d]);
  return e / 24.0;
}

struct PerspectiveTargets {
  // Per level, per location (row-major): -1 background, else gt index.
  std::vector<std::vector<int>> assigned;
  // Per-gt camera-frame boxes; valid_gt[g] false when the box does not
  // project into this view.
  std::vector<CamBox> gt_cam;
  std::vector<bool> valid_gt;
  std::vector<Rect> gt_rect;  // 2D hull of projected corners, image-clipped
  std::vector<int> gt_class;
  int num_foreground = 0;
};

template <typename S>
struct PerspectivePrediction {
  std::vector<int> strides;
  std::vector<Tensor<S>> class_logits;   // [K,h,w]
  std::vector<Tensor<S>> box2d;          // [4,h,w] decoded side distances, px
  std::vector<Tensor<S>> centerness;     // [1,h,w] logits
  std::vector<Tensor<S>> depth;          // [1,h,w] raw; exp(raw)*f/f_ref m
  std::vector<Tensor<S>> center_offset;  // [2,h,w] (du,dv) px
  std::vector<Tensor<S>> size_dev;       // [3,h,w] log deviation
  std::vector<Tensor<S>> yaw_enc;        // [2,h,w] (sin,cos), unnormalized
  std::vector<Tensor<S>> conf3d;         // [1,h,w] logits
};

// Pixel center of head location (i,j) at a given stride.
inline double loc_u(int j, int stride) { return (j + 0.5) * stride; }
inline double loc_v(int i, int stride) { return (i + 0.5) * stride; }

// FCOS-style assignment: a location is foreground for a gt when it lies
// inside the gt's 2D hull, within the center-sampling window around the
// projected 3D center, and the max side distance falls in the level's
// range. Ambiguities resolve to the smaller hull area.
inline PerspectiveTargets assign_targets(const std::vector<Shape>& level_shapes,
                                         const std::vector<int>& strides,
                                         const std::vector<Box3D>& gt_ego,
                                         const CameraView& view,
                                         const PerspectiveHeadConfig& cfg) {
  PerspectiveTargets tg;
  int n_gt = (int)gt_ego.size();
  tg.gt_cam.resize(n_gt);
  tg.valid_gt.assign(n_gt, false);
  tg.gt_rect.resize(n_gt);
  tg.gt_class.resize(n_gt);
  for (int g = 0; g < n_gt; ++g) {
    tg.gt_class[g] = gt_ego[g].class_id;
    if (!box_to_cam(gt_ego[g], view, tg.gt_cam[g])) continue;
    auto corners = box_corners_3d(gt_ego[g]);
    double x1 = 1e18, y1 = 1e18, x2 = -1e18, y2 = -1e18;
    bool any = false;
    for (const auto& c : corners) {
      Vec3 pc = view.ego_to_camera.apply(c);
      if (pc[2] <= kProjZMin) continue;
      double u = view.K.cx + view_fx(view) * pc[0] / pc[2];
      double v = view.K.cy + view.K.fy * pc[1] / pc[2];
      x1 = std::min(x1, u); y1 = std::min(y1, v);
      x2 = std::max(x2, u); y2 = std::max(y2, v);
      any = true;
    }
    if (!any) continue;
    x1 = std::max(x1, 0.0); y1 = std::max(y1, 0.0);
    x2 = std::min(x2, (double)view.K.width - 1);
    y2 = std::min(y2, (double)view.K.height - 1);
    if (x2 <= x1 || y2 <= y1) continue;
    tg.gt_rect[g] = {x1, y1, x2, y2};
    tg.valid_gt[g] = true;
  }

  size_t n_levels = level_shapes.size();
  tg.assigned.resize(n_levels);
  for (size_t lv = 0; lv < n_levels; ++lv) {
    int h = level_shapes[lv][1], w = level_shapes[lv][2];
    int stride = strides[lv];
    double lo = lv == 0 ? 0.0 : cfg.level_ranges[lv - 1];
    double hi = lv < cfg.level_ranges.size() ? cfg.level_ranges[lv]
                                             : std::numeric_limits<double>::infinity();
    tg.assigned[lv].assign((size_t)h * w, -1);
    for (int i = 0; i < h; ++i) {
      for (int j = 0; j < w; ++j) {
        double u = loc_u(j, stride), v = loc_v(i, stride);
        int best = -1;
        double best_area = 1e18;
        for (int g = 0; g < n_gt; ++g) {
          if (!tg.valid_gt[g]) continue;
          const Rect& r = tg.gt_rect[g];
          if (u < r.x1 || u > r.x2 || v < r.y1 || v > r.y2) continue;
          double rad = cfg.center_radius * stride;
          if (std::abs(u - tg.gt_cam[g].u) > rad ||
              std::abs(v - tg.gt_cam[g].v) > rad)
            continue;
          double m = std::max(std::max(u - r.x1, r.x2 - u),
                              std::max(v - r.y1, r.y2 - v));
          if (m <= lo || m > hi) continue;
          double area = r.area();
          if (area < best_area) {
            best_area = area;
            best = g;
          }
        }
        tg.assigned[lv][(size_t)i * w + j] = best;
        if (best >= 0) ++tg.num_foreground;
      }
    }
  }
  return tg;
}

template <typename S>
struct PerspectiveLoss {
  Tensor<S> total, l2d, l3d, lconf;
  // Sub-terms of l2d for logging.
  Tensor<S> l_focal, l_iou, l_ctr;
};

namespace detail {

// softplus(x) = log(1+exp(x)) evaluated without overflow.
template <typename S>
Tensor<S> softplus(const Tensor<S>& x) {
  return add(relu(x), log(add(exp(neg(abs(x))), S(1))));
}
template <typename S>
Tensor<S> log_sigmoid(const Tensor<S>& x) {
  return neg(softplus(neg(x)));
}

// Camera-frame corner coordinates for F decoded boxes, as [F] tensors.
// Each parameter group can come from predictions or from constants, so the
// disentangled loss reuses this with different substitutions.
template <typename S>
struct CornerTerms {
  std::vector<Tensor<S>> x, y, z;  // 8 corners each
};

template <typename S>
CornerTerms<S> corner_tensors(const Tensor<S>& du, const Tensor<S>& dv,
                              const Tensor<S>& zt, const Tensor<S>& lt,
                              const Tensor<S>& wt, const Tensor<S>& ht,
                              const Tensor<S>& sn, const Tensor<S>& cs,
                              const Tensor<S>& u0, const Tensor<S>& v0,
                              const CameraView& view) {
  double fx = view_fx(view), fy = view.K.fy;
  double sgn = view.flipped ? -1.0 : 1.0;
  Tensor<S> xc = mul(div(sub(add(u0, du), S(view.K.cx)), S(fx)), zt);
  Tensor<S> yc = mul(div(sub(add(v0, dv), S(view.K.cy)), S(fy)), zt);
  CornerTerms<S> ct;
  for (int top = 0; top <= 1; ++top) {
    double hsign = top ? 0.5 : -0.5;
    double corners[4][2] = {{0.5, 0.5}, {-0.5, 0.5}, {-0.5, -0.5}, {0.5, -0.5}};
    for (auto& ab : corners) {
      Tensor<S> a = mul(lt, S(ab[0]));
      Tensor<S> b = mul(wt, S(ab[1]));
      // fwd=(sgn*sin,0,cos), left=(-sgn*cos,0,sin), up=(0,-1,0)
      ct.x.push_back(add(xc, mul(sub(mul(a, sn), mul(b, cs)), S(sgn))));
      ct.y.push_back(add(yc, mul(ht, S(-hsign))));
      ct.z.push_back(add(zt, add(mul(a, cs), mul(b, sn))));
    }
  }
  return ct;
}

// Mean L1 distance between two corner sets (over 8 corners x 3 coords).
template <typename S>
Tensor<S> corner_l1(const CornerTerms<S>& a, const CornerTerms<S>& b) {
  Tensor<S> acc = Tensor<S>::scalar(S(0));
  for (int k = 0; k < 8; ++k) {
    acc = add(acc, sum_all(abs(sub(a.x[k], b.x[k]))));
    acc = add(acc, sum_all(abs(sub(a.y[k], b.y[k]))));
    acc = add(acc, sum_all(abs(sub(a.z[k], b.z[k]))));
  }
  return div(acc, S(24));
}

}  // namespace detail

// Decode the prediction at one foreground location into a CamBox.
template <typename S>
CamBox decode_at(const PerspectivePrediction<S>& pred, size_t lv, int p,
                 int class_id, const CameraView& view,
                 const PerspectiveHeadConfig& cfg) {
  int h = pred.class_logits[lv].dim(1), w = pred.class_logits[lv].dim(2);
  int n = h * w, stride = pred.strides[lv];
  const auto& dep = pred.depth[lv].vec();
  const auto& off = pred.center_offset[lv].vec();
  const auto& sd = pred.size_dev[lv].vec();
  const auto& ye = pred.yaw_enc[lv].vec();
  CamBox cb;
  cb.u = loc_u(p % w, stride) + (double)off[p];
  cb.v = loc_v(p / w, stride) + (double)off[n + p];
  cb.z = std::exp((double)dep[p]) * view.K.fx / cfg.f_ref;
  const auto& cs = cfg.canonical_sizes[class_id];
  cb.l = std::exp((double)sd[p]) * cs[0];
  cb.w = std::exp((double)sd[n + p]) * cs[1];
  cb.h = std::exp((double)sd[2 * n + p]) * cs[2];
  cb.psi = std::atan2((double)ye[p], (double)ye[n + p]);
  return cb;
}

// Self-supervised conf3d targets, one per foreground location in (level,
// location) order: exp(-corner_err/tau) of the fully pred-decoded box.
// Computed outside the autodiff graph; the loss treats them as constants.
template <typename S>
std::vector<double> conf3d_targets(const PerspectivePrediction<S>& pred,
                                   const PerspectiveTargets& tg,
                                   const CameraView& view,
                                   const PerspectiveHeadConfig& cfg) {
  std::vector<double> out;
  for (size_t lv = 0; lv < pred.class_logits.size(); ++lv) {
    int n = pred.class_logits[lv].dim(1) * pred.class_logits[lv].dim(2);
    for (int p = 0; p < n; ++p) {
      int g = tg.assigned[lv][p];
      if (g < 0) continue;
      CamBox pb = decode_at(pred, lv, p, tg.gt_class[g], view, cfg);
      double err = cam_corner_error(pb, tg.gt_cam[g], view);
      out.push_back(std::exp(-err / cfg.conf_tau));
    }
  }
  return out;
}

// L_pers = L_2D + L_3D + L_conf.
//   L_2D: focal classification over all locations, -log IoU on predicted 2D
//         side distances, BCE centerness (foreground only).
//   L_3D: disentangled corner L1; each group (orientation, depth, projected
//         center offset, size) decodes from predictions with the remaining
//         groups held at target values.
//   L_conf: BCE of conf3d against exp(-corner_err/tau), the error taken
//           from the fully pred-decoded box and treated as a constant
//           (pass fixed_conf_targets to pin it, e.g. for gradient checks).
template <typename S>
PerspectiveLoss<S> perspective_loss(
    const PerspectivePrediction<S>& pred, const PerspectiveTargets& tg,
    const CameraView& view, const PerspectiveHeadConfig& cfg,
    const std::vector<double>* fixed_conf_targets = nullptr) {
  using detail::log_sigmoid;
  int K = cfg.num_classes;
  size_t n_levels = pred.class_logits.size();
  double alpha = cfg.focal_alpha;
  S gamma = S(cfg.focal_gamma);

  Tensor<S> focal_sum = Tensor<S>::scalar(S(0));
  // Foreground gathers, accumulated per level then concatenated.
  std::vector<Tensor<S>> fg_box2d, fg_ctr, fg_depth, fg_off, fg_size, fg_yaw,
      fg_conf;
  std::vector<int> fg_gt;       // gt index per foreground row
  std::vector<double> fg_u, fg_v;

  for (size_t lv = 0; lv < n_levels; ++lv) {
    const Tensor<S>& cl = pred.class_logits[lv];
    int h = cl.dim(1), w = cl.dim(2), n = h * w;
    Tensor<S> x = reshape(cl, {K, n});
    std::vector<S> tvec((size_t)K * n, S(0));
    const auto& assigned = tg.assigned[lv];
    std::vector<int> idx;
    for (int p = 0; p < n; ++p) {
      int g = assigned[p];
      if (g < 0) continue;
      tvec[(size_t)tg.gt_class[g] * n + p] = S(1);
      idx.push_back(p);
      fg_gt.push_back(g);
      int stride = pred.strides[lv];
      fg_u.push_back(loc_u(p % w, stride));
      fg_v.push_back(loc_v(p / w, stride));
    }
    Tensor<S> t(Shape{K, n}, std::move(tvec));
    Tensor<S> p_sig = sigmoid(x);
    Tensor<S> pos = mul(mul(t, pow(sub(S(1), p_sig), gamma)),
                        neg(log_sigmoid(x)));
    Tensor<S> negt = mul(mul(sub(S(1), t), pow(p_sig, gamma)),
                         neg(log_sigmoid(neg(x))));
    focal_sum = add(focal_sum,
                    add(mul(sum_all(pos), S(alpha)),
                        mul(sum_all(negt), S(1 - alpha))));
    if (idx.empty()) continue;
    auto take = [&](const Tensor<S>& m, int c) {
      return gather_rows(transpose2d(reshape(m, {c, n})), idx);
    };
    fg_box2d.push_back(take(pred.box2d[lv], 4));
    fg_ctr.push_back(take(pred.centerness[lv], 1));
    fg_depth.push_back(take(pred.depth[lv], 1));
    fg_off.push_back(take(pred.center_offset[lv], 2));
    fg_size.push_back(take(pred.size_dev[lv], 3));
    fg_yaw.push_back(take(pred.yaw_enc[lv], 2));
    fg_conf.push_back(take(pred.conf3d[lv], 1));
  }

  int F = (int)fg_gt.size();
  S norm = S(std::max(1, F));
  PerspectiveLoss<S> out;
  out.l_focal = div(focal_sum, norm);

  if (F == 0) {
    Tensor<S> zero = Tensor<S>::scalar(S(0));
    out.l_iou = zero; out.l_ctr = zero;
    out.l3d = zero; out.lconf = zero;
    out.l2d = out.l_focal;
    out.total = out.l_focal;
  } else {
    auto cat = [](std::vector<Tensor<S>>& v) { return concat(v, 0); };
    Tensor<S> box2d = cat(fg_box2d), ctr = cat(fg_ctr), depth = cat(fg_depth),
              off = cat(fg_off), size_d = cat(fg_size), yaw = cat(fg_yaw),
              conf = cat(fg_conf);

    auto col = [](const Tensor<S>& m, int c) { return slice(m, 1, c, 1); };
    auto constant = [&](auto fn) {
      std::vector<S> v(F);
      for (int r = 0; r < F; ++r) v[r] = S(fn(r));
      return Tensor<S>(Shape{F, 1}, std::move(v));
    };
    auto gt_of = [&](int r) -> const CamBox& { return tg.gt_cam[fg_gt[r]]; };

    // 2D IoU loss on side distances against the gt hull.
    Tensor<S> ld = col(box2d, 0), td = col(box2d, 1), rd = col(box2d, 2),
              bd = col(box2d, 3);
    Tensor<S> lt = constant([&](int r) { return fg_u[r] - tg.gt_rect[fg_gt[r]].x1; });
    Tensor<S> tt = constant([&](int r) { return fg_v[r] - tg.gt_rect[fg_gt[r]].y1; });
    Tensor<S> rt = constant([&](int r) { return tg.gt_rect[fg_gt[r]].x2 - fg_u[r]; });
    Tensor<S> bt = constant([&](int r) { return tg.gt_rect[fg_gt[r]].y2 - fg_v[r]; });
    Tensor<S> iw = add(minimum(ld, lt), minimum(rd, rt));
    Tensor<S> ih = add(minimum(td, tt), minimum(bd, bt));
    Tensor<S> inter = mul(iw, ih);
    Tensor<S> uni = sub(add(mul(add(ld, rd), add(td, bd)),
                            mul(add(lt, rt), add(tt, bt))),
                        inter);
    out.l_iou = div(neg(sum_all(log(div(inter, uni)))), norm);

    // Centerness BCE toward the usual min/max ratio target.
    Tensor<S> ctr_t = constant([&](int r) {
      double l = fg_u[r] - tg.gt_rect[fg_gt[r]].x1,
             t = fg_v[r] - tg.gt_rect[fg_gt[r]].y1,
             rr = tg.gt_rect[fg_gt[r]].x2 - fg_u[r],
             b = tg.gt_rect[fg_gt[r]].y2 - fg_v[r];
      double a = std::min(l, rr) / std::max(l, rr);
      double c = std::min(t, b) / std::max(t, b);
      return std::sqrt(std::max(a * c, 0.0));
    });
    Tensor<S> bce_ctr = neg(add(mul(ctr_t, log_sigmoid(ctr)),
                                mul(sub(S(1), ctr_t), log_sigmoid(neg(ctr)))));
    out.l_ctr = div(sum_all(bce_ctr), norm);

    // Decoded prediction groups.
    double f = view.K.fx;
    Tensor<S> z_p = mul(exp(col(depth, 0)), S(f / cfg.f_ref));
    Tensor<S> du_p = col(off, 0), dv_p = col(off, 1);
    auto canon = [&](int r, int d) {
      return cfg.canonical_sizes[tg.gt_class[fg_gt[r]]][d];
    };
    Tensor<S> l_p = mul(exp(col(size_d, 0)), constant([&](int r) { return canon(r, 0); }));
    Tensor<S> w_p = mul(exp(col(size_d, 1)), constant([&](int r) { return canon(r, 1); }));
    Tensor<S> h_p = mul(exp(col(size_d, 2)), constant([&](int r) { return canon(r, 2); }));
    Tensor<S> s_raw = col(yaw, 0), c_raw = col(yaw, 1);
    Tensor<S> ynorm = sqrt(add(add(mul(s_raw, s_raw), mul(c_raw, c_raw)), S(1e-12)));
    Tensor<S> s_p = div(s_raw, ynorm), c_p = div(c_raw, ynorm);

    // Target constants.
    Tensor<S> u0 = constant([&](int r) { return fg_u[r]; });
    Tensor<S> v0 = constant([&](int r) { return fg_v[r]; });
    Tensor<S> du_t = constant([&](int r) { return gt_of(r).u - fg_u[r]; });
    Tensor<S> dv_t = constant([&](int r) { return gt_of(r).v - fg_v[r]; });
    Tensor<S> z_t = constant([&](int r) { return gt_of(r).z; });
    Tensor<S> l_t = constant([&](int r) { return gt_of(r).l; });
    Tensor<S> w_t = constant([&](int r) { return gt_of(r).w; });
    Tensor<S> h_t = constant([&](int r) { return gt_of(r).h; });
    Tensor<S> s_t = constant([&](int r) { return std::sin(gt_of(r).psi); });
    Tensor<S> c_t = constant([&](int r) { return std::cos(gt_of(r).psi); });

    auto corners = [&](const Tensor<S>& du, const Tensor<S>& dv,
                       const Tensor<S>& z, const Tensor<S>& ll,
                       const Tensor<S>& ww, const Tensor<S>& hh,
                       const Tensor<S>& sn, const Tensor<S>& cs) {
      return detail::corner_tensors(du, dv, z, ll, ww, hh, sn, cs, u0, v0, view);
    };
    auto gt_corners = corners(du_t, dv_t, z_t, l_t, w_t, h_t, s_t, c_t);
    Tensor<S> l3d_sum = Tensor<S>::scalar(S(0));
    // orientation / depth / center-offset / size groups
    l3d_sum = add(l3d_sum, detail::corner_l1(
        corners(du_t, dv_t, z_t, l_t, w_t, h_t, s_p, c_p), gt_corners));
    l3d_sum = add(l3d_sum, detail::corner_l1(
        corners(du_t, dv_t, z_p, l_t, w_t, h_t, s_t, c_t), gt_corners));
    l3d_sum = add(l3d_sum, detail::corner_l1(
        corners(du_p, dv_p, z_t, l_t, w_t, h_t, s_t, c_t), gt_corners));
    l3d_sum = add(l3d_sum, detail::corner_l1(
        corners(du_t, dv_t, z_t, l_p, w_p, h_p, s_t, c_t), gt_corners));
    out.l3d = div(l3d_sum, norm);

    // Confidence target from the fully pred-decoded box, held constant.
    std::vector<double> qv = fixed_conf_targets
                                 ? *fixed_conf_targets
                                 : conf3d_targets(pred, tg, view, cfg);
    if ((int)qv.size() != F)
      throw std::invalid_argument("perspective loss: conf target count " +
                                  std::to_string(qv.size()) + " != foreground " +
                                  std::to_string(F));
    Tensor<S> q = constant([&](int r) { return qv[r]; });
    Tensor<S> bce_conf = neg(add(mul(q, log_sigmoid(conf)),
                                 mul(sub(S(1), q), log_sigmoid(neg(conf)))));
    out.lconf = div(sum_all(bce_conf), norm);

    out.l2d = add(add(out.l_focal, out.l_iou), out.l_ctr);
    out.total = add(add(out.l2d, out.l3d), out.lconf);
  }

  auto check = [](const Tensor<S>& t, const char* name) {
    if (!std::isfinite((double)t.item()))
      throw std::runtime_error(std::string("perspective loss: non-finite ") + name);
  };
  check(out.l2d, "L_2D");
  check(out.l3d, "L_3D");
  check(out.lconf, "L_conf");
  return out;
}

// Raw head outputs that encode a given camera-frame box at location
// (u0,v0); inverse of the decode in decode_proposals.
struct EncodedBox {
  double du, dv, depth_raw;
  double size_dev[3];
  double yaw_sin, yaw_cos;
};

inline EncodedBox encode_box(const CamBox& cb, double u0, double v0,
                             const CameraView& view, int class_id,
                             const PerspectiveHeadConfig& cfg) {
  EncodedBox e;
  e.du = cb.u - u0;
  e.dv = cb.v - v0;
  e.depth_raw = std::log(cb.z * cfg.f_ref / view.K.fx);
  const auto& cs = cfg.canonical_sizes[class_id];
  e.size_dev[0] = std::log(cb.l / cs[0]);
  e.size_dev[1] = std::log(cb.w / cs[1]);
  e.size_dev[2] = std::log(cb.h / cs[2]);
  e.yaw_sin = std::sin(cb.psi);
  e.yaw_cos = std::cos(cb.psi);
  return e;
}

struct Proposal {
  Box3D box;  // camera frame: center in camera coordinates, yaw camera-planar
  double score = 0;
};

// Ego-frame version of a camera-frame proposal box.
inline Box3D proposal_to_ego(const Box3D& cam_box, const CameraView& view) {
  Box3D b = cam_box;
  b.center = view.ego_to_camera.inverse().apply(cam_box.center);
  double sgn = view.flipped ? -1.0 : 1.0;
  Vec3 f_cam{sgn * std::sin(cam_box.yaw), 0.0, std::cos(cam_box.yaw)};
  Vec3 f_ego = mat3_apply(mat3_transpose(view.ego_to_camera.R), f_cam);
  b.yaw = std::atan2(f_ego[1], f_ego[0]);
  return b;
}

// Per-location decode: score = sigmoid(class logit) * sigmoid(conf3d);
// locations scoring below the threshold are dropped.
template <typename S>
std::vector<Proposal> decode_proposals(const PerspectivePrediction<S>& pred,
                                       const CameraView& view,
                                       double score_thresh,
                                       const PerspectiveHeadConfig& cfg) {
  std::vector<Proposal> out;
  int K = cfg.num_classes;
  for (size_t lv = 0; lv < pred.class_logits.size(); ++lv) {
    int n = pred.class_logits[lv].dim(1) * pred.class_logits[lv].dim(2);
    const auto& cls = pred.class_logits[lv].vec();
    const auto& conf = pred.conf3d[lv].vec();
    for (int p = 0; p < n; ++p) {
      double conf_s = 1.0 / (1.0 + std::exp(-(double)conf[p]));
      int best_k = 0;
      double best_cls = -1e18;
      for (int k = 0; k < K; ++k) {
        double v = (double)cls[(size_t)k * n + p];
        if (v > best_cls) { best_cls = v; best_k = k; }
      }
      double score = conf_s / (1.0 + std::exp(-best_cls));
      if (score < score_thresh) continue;
      CamBox cb = decode_at(pred, lv, p, best_k, view, cfg);
      Proposal pr;
      double fx = view_fx(view);
      pr.box.center = {(cb.u - view.K.cx) / fx * cb.z,
                       (cb.v - view.K.cy) / view.K.fy * cb.z, cb.z};
      pr.box.l = cb.l; pr.box.w = cb.w; pr.box.h = cb.h;
      pr.box.yaw = cb.psi;
      pr.box.velocity = {0.0, 0.0};
      pr.box.class_id = best_k;
      pr.box.score = score;
      pr.score = score;
      out.push_back(pr);
    }
  }
  return out;
}

// The learned head: two norm-free conv towers shared across levels, then
// 1x1 prediction convs. box2d decodes as exp(raw) * stride, so distances
// stay positive.
template <typename S>
class PerspectiveHead {
 public:
  PerspectiveHead(ParamStore<S>& ps, const PerspectiveHeadConfig& cfg, Rng& rng)
      : cfg_(cfg) {
    cfg_.resolve_sizes();
    int c = cfg.channels;
    for (int d = 0; d < cfg.tower_depth; ++d) {
      cls_tower_.push_back(make_conv(ps, rng, "pers.cls_tower" + std::to_string(d), c, c));
      reg_tower_.push_back(make_conv(ps, rng, "pers.reg_tower" + std::to_string(d), c, c));
    }
    head_cls_ = make_pred(ps, rng, "pers.cls", c, cfg.num_classes, S(cfg.cls_bias_init));
    head_box_ = make_pred(ps, rng, "pers.box2d", c, 4, S(0));
    head_ctr_ = make_pred(ps, rng, "pers.ctr", c, 1, S(0));
    head_depth_ = make_pred(ps, rng, "pers.depth", c, 1, S(cfg.depth_bias_init));
    head_off_ = make_pred(ps, rng, "pers.off", c, 2, S(0));
    head_size_ = make_pred(ps, rng, "pers.size", c, 3, S(0));
    head_yaw_ = make_pred(ps, rng, "pers.yaw", c, 2, S(0));
    // start at yaw (sin,cos) = (0,1)
    head_yaw_.b.vec()[1] = S(1);
    head_conf_ = make_pred(ps, rng, "pers.conf", c, 1, S(0));
  }

  PerspectivePrediction<S> forward(const FeaturePyramid<S>& pyr) const {
    PerspectivePrediction<S> out;
    out.strides = pyr.strides;
    for (size_t lv = 0; lv < pyr.levels.size(); ++lv) {
      Tensor<S> tc = pyr.levels[lv], tr = pyr.levels[lv];
      for (const auto& cv : cls_tower_) tc = relu(conv2d(tc, cv.w, &cv.b, 1, 1));
      for (const auto& cv : reg_tower_) tr = relu(conv2d(tr, cv.w, &cv.b, 1, 1));
      out.class_logits.push_back(conv2d(tc, head_cls_.w, &head_cls_.b, 1, 0));
      out.box2d.push_back(mul(exp(conv2d(tr, head_box_.w, &head_box_.b, 1, 0)),
                              S(pyr.strides[lv])));
      out.centerness.push_back(conv2d(tr, head_ctr_.w, &head_ctr_.b, 1, 0));
      out.depth.push_back(conv2d(tr, head_depth_.w, &head_depth_.b, 1, 0));
      out.center_offset.push_back(conv2d(tr, head_off_.w, &head_off_.b, 1, 0));
      out.size_dev.push_back(conv2d(tr, head_size_.w, &head_size_.b, 1, 0));
      out.yaw_enc.push_back(conv2d(tr, head_yaw_.w, &head_yaw_.b, 1, 0));
      out.conf3d.push_back(conv2d(tr, head_conf_.w, &head_conf_.b, 1, 0));
    }
    return out;
  }

  const PerspectiveHeadConfig& config() const { return cfg_; }

 private:
  struct ConvP { Tensor<S> w, b; };
  static ConvP make_conv(ParamStore<S>& ps, Rng& rng, const std::string& name,
                         int cin, int cout) {
    return {ps.create_random(name + ".w", {cout, cin, 3, 3}, rng),
            ps.create_fill(name + ".b", {cout}, S(0))};
  }
  static ConvP make_pred(ParamStore<S>& ps, Rng& rng, const std::string& name,
                         int cin, int cout, S bias) {
    return {ps.create_random(name + ".w", {cout, cin, 1, 1}, rng),
            ps.create_fill(name + ".b", {cout}, bias)};
  }

  PerspectiveHeadConfig cfg_;
  std::vector<ConvP> cls_tower_, reg_tower_;
  ConvP head_cls_, head_box_, head_ctr_, head_depth_, head_off_, head_size_,
      head_yaw_, head_conf_;
};

}  // namespace bevnet

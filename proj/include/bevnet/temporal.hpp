// Temporal BEV alignment and fusion: history maps are warped into the
// current ego frame with the planar (SE2) part of the relative pose, then
// concatenated and reduced back to C channels.
#pragma once

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "bevnet/geometry.hpp"
#include "bevnet/ops.hpp"
#include "bevnet/optim.hpp"
#include "bevnet/random.hpp"
#include "bevnet/spatial.hpp"
#include "bevnet/tensor.hpp"

namespace bevnet {

struct SE2 {
  double c = 1, s = 0, tx = 0, ty = 0;  // x' = c*x - s*y + tx
};

// Planar part of an SE3 whose rotation is about +z.
inline SE2 se2_of(const SE3& T) {
  double yaw = std::atan2(T.R[3], T.R[0]);
  return {std::cos(yaw), std::sin(yaw), T.t[0], T.t[1]};
}

inline SE2 se2_inverse(const SE2& a) {
  return {a.c, -a.s, -(a.c * a.tx + a.s * a.ty), -(-a.s * a.tx + a.c * a.ty)};
}

inline Vec2 se2_apply(const SE2& a, const Vec2& p) {
  return {a.c * p[0] - a.s * p[1] + a.tx, a.s * p[0] + a.c * p[1] + a.ty};
}

// Express a frame-k BEV map in the current ego frame.  T_k_to_t maps
// frame-k ego coordinates to current ego coordinates; each current cell
// center is pulled back through its inverse and sampled bilinearly with
// zeros outside the grid.
template <typename S>
Tensor<S> warp_bev(const Tensor<S>& bk, const SE3& T_k_to_t,
                   const BEVGridSpec& grid) {
  if (bk.rank() != 3 || bk.dim(1) != grid.H || bk.dim(2) != grid.W)
    throw std::invalid_argument("warp_bev: map shape " + shape_str(bk.shape()));
  int C = bk.dim(0), HW = grid.cells();
  SE2 back = se2_inverse(se2_of(T_k_to_t));
  std::vector<S> pts;
  pts.reserve((size_t)HW * 2);
  for (int i = 0; i < grid.H; ++i)
    for (int j = 0; j < grid.W; ++j) {
      Vec2 ct = grid.cell_center(i, j);
      Vec2 pk = se2_apply(back, ct);
      Vec2 rc = grid.grid_coords(pk[0], pk[1]);
      pts.push_back(S(rc[0]));
      pts.push_back(S(rc[1]));
    }
  Tensor<S> sampled =
      bilinear_sample(bk, Tensor<S>({HW, 2}, std::move(pts)), PadMode::zeros);
  return reshape(sampled, {C, grid.H, grid.W});
}

// Support-frame selection by target time.  Past-only targets are
// {t - count*interval, ..., t - interval}; bidirectional targets are
// symmetric +-i*interval around t (count must be even), time-ascending in
// both modes.  Targets beyond the sequence bounds duplicate the nearest
// frame; ties between equally near frames take the earlier one.
inline std::vector<int> select_frames(const std::vector<double>& times,
                                      double t, int count, double interval,
                                      bool bidirectional) {
  if (times.empty()) throw std::invalid_argument("select_frames: empty");
  if (bidirectional && count % 2 != 0)
    throw std::invalid_argument("select_frames: bidirectional needs even count");
  std::vector<double> targets;
  if (bidirectional) {
    for (int i = count / 2; i >= 1; --i) targets.push_back(t - i * interval);
    for (int i = 1; i <= count / 2; ++i) targets.push_back(t + i * interval);
  } else {
    for (int i = count; i >= 1; --i) targets.push_back(t - i * interval);
  }
  std::vector<int> out;
  for (double target : targets) {
    int best = 0;
    double bd = std::abs(times[0] - target);
    for (size_t i = 1; i < times.size(); ++i) {
      double d = std::abs(times[i] - target);
      if (d < bd - 1e-12) {
        bd = d;
        best = (int)i;
      }
    }
    out.push_back(best);
  }
  return out;
}

struct TemporalConfig {
  int channels = 64;
  int history = 4;          // fused past maps
  double interval = 2.0;    // seconds between support frames
  bool bidirectional = false;
};

// Concat-and-reduce fusion: 1x1 reduction over (1+m)C channels followed by
// two norm-free residual blocks.
template <typename S>
class TemporalFuser {
 public:
  TemporalFuser(ParamStore<S>& ps, const TemporalConfig& cfg, Rng& rng)
      : cfg_(cfg) {
    int C = cfg.channels, m = cfg.history;
    reduce_w_ = ps.create_random("temporal.reduce.w", {C, (1 + m) * C, 1, 1}, rng);
    reduce_b_ = ps.create_fill("temporal.reduce.b", {C}, S(0));
    for (int b = 0; b < 2; ++b) {
      std::string pre = "temporal.block" + std::to_string(b);
      blk_[b][0] = ps.create_random(pre + ".w1", {C, C, 3, 3}, rng);
      blk_[b][1] = ps.create_fill(pre + ".b1", {C}, S(0));
      blk_[b][2] = ps.create_random(pre + ".w2", {C, C, 3, 3}, rng);
      blk_[b][3] = ps.create_fill(pre + ".b2", {C}, S(0));
    }
  }

  // `history[h]` is the frame-h BEV map, `rel[h]` its ego transform into the
  // current frame.  history.size() must equal the configured count.
  Tensor<S> fuse(const Tensor<S>& current, const std::vector<Tensor<S>>& history,
                 const std::vector<SE3>& rel, const BEVGridSpec& grid) const {
    if ((int)history.size() != cfg_.history || history.size() != rel.size())
      throw std::invalid_argument("fuse: expected " +
                                  std::to_string(cfg_.history) + " history maps");
    std::vector<Tensor<S>> maps{current};
    for (size_t h = 0; h < history.size(); ++h)
      maps.push_back(warp_bev(history[h], rel[h], grid));
    Tensor<S> x = conv2d(concat(maps, 0), reduce_w_, &reduce_b_, 1, 0);
    for (int b = 0; b < 2; ++b) {
      Tensor<S> h1 = relu(conv2d(x, blk_[b][0], &blk_[b][1], 1, 1));
      x = add(x, conv2d(h1, blk_[b][2], &blk_[b][3], 1, 1));
    }
    return x;
  }

  const TemporalConfig& config() const { return cfg_; }
  Tensor<S>& reduce_weight() { return reduce_w_; }

 private:
  TemporalConfig cfg_;
  Tensor<S> reduce_w_, reduce_b_;
  Tensor<S> blk_[2][4];
};

}  // namespace bevnet

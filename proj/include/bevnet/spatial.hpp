// BEV construction from multi-view image features: pillar reference points,
// deformable spatial cross-attention over the camera pyramids, and an
// encoder stack (BEV self-attention, cross-attention, FFN, post-norm).
#pragma once

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "bevnet/backbone.hpp"
#include "bevnet/geometry.hpp"
#include "bevnet/ops.hpp"
#include "bevnet/optim.hpp"
#include "bevnet/random.hpp"
#include "bevnet/tensor.hpp"

namespace bevnet {

struct BEVGridSpec {
  double x_min = -25.0, x_max = 25.0;
  double y_min = -25.0, y_max = 25.0;
  int H = 50, W = 50;  // rows follow y, columns follow x
  std::vector<double> z_anchors{-1.0, 1.0 / 3.0, 5.0 / 3.0, 3.0};

  double dx() const { return (x_max - x_min) / W; }
  double dy() const { return (y_max - y_min) / H; }
  int cells() const { return H * W; }

  Vec2 cell_center(int i, int j) const {
    return {x_min + (j + 0.5) * dx(), y_min + (i + 0.5) * dy()};
  }
  // continuous (row, col) grid coordinates of an ego xy point
  Vec2 grid_coords(double x, double y) const {
    return {(y - y_min) / dy() - 0.5, (x - x_min) / dx() - 0.5};
  }
};

// Pillar points, cell-major with the z index innermost:
// index (i*W + j)*Nz + k holds (x_j, y_i, z_k).
inline std::vector<Vec3> reference_points(const BEVGridSpec& grid) {
  std::vector<Vec3> pts;
  pts.reserve((size_t)grid.cells() * grid.z_anchors.size());
  for (int i = 0; i < grid.H; ++i)
    for (int j = 0; j < grid.W; ++j) {
      Vec2 c = grid.cell_center(i, j);
      for (double z : grid.z_anchors) pts.push_back({c[0], c[1], z});
    }
  return pts;
}

template <typename S>
struct SCAParams {
  Tensor<S> off_w, off_b;    // [C, Nz*L*P*2], offsets in feature cells
  Tensor<S> wgt_w, wgt_b;    // [C, Nz*L*P], softmax over (level, point)
  Tensor<S> proj_w, proj_b;  // [C, C]
  int points = 4;
  int levels = 5;
};

template <typename S>
struct BevSelfAttnParams {
  Tensor<S> off_w, off_b;    // [C, P*2], offsets in BEV cells
  Tensor<S> wgt_w, wgt_b;    // [C, P]
  Tensor<S> proj_w, proj_b;
  int points = 4;
};

namespace detail {

struct PillarHit {
  bool valid = false;
  double u = 0, v = 0;  // image pixel coordinates
};

// Projection table for one view: entry (cell*Nz + z).
inline std::vector<PillarHit> project_pillars(const std::vector<Vec3>& refs,
                                              const CameraView& view) {
  std::vector<PillarHit> hits(refs.size());
  double fx = view.flipped ? -view.K.fx : view.K.fx;
  for (size_t r = 0; r < refs.size(); ++r) {
    Vec3 pc = view.ego_to_camera.apply(refs[r]);
    if (pc[2] <= kProjZMin) continue;
    double u = view.K.cx + fx * pc[0] / pc[2];
    double v = view.K.cy + view.K.fy * pc[1] / pc[2];
    if (u < 0 || u > view.K.width - 1 || v < 0 || v > view.K.height - 1)
      continue;
    hits[r] = {true, u, v};
  }
  return hits;
}

}  // namespace detail

// Deformable cross-attention from BEV queries into the per-view pyramids.
// Each valid (view, z) pillar hit contributes a weight-one bundle of
// level/point samples; contributions are averaged over hits and projected.
// Cells with no hit anywhere return their query untouched.
template <typename S>
Tensor<S> spatial_cross_attention(const Tensor<S>& bev,
                                  const std::vector<FeaturePyramid<S>>& pyramids,
                                  const CameraRig& rig, const BEVGridSpec& grid,
                                  const SCAParams<S>& pp) {
  if (pyramids.size() != rig.views.size())
    throw std::invalid_argument("spatial_cross_attention: pyramid/view count");
  int C = bev.dim(0), HW = grid.cells();
  if (bev.rank() != 3 || bev.dim(1) != grid.H || bev.dim(2) != grid.W)
    throw std::invalid_argument("spatial_cross_attention: bev shape " +
                                shape_str(bev.shape()));
  int Nz = (int)grid.z_anchors.size();
  int L = pp.levels, P = pp.points;

  Tensor<S> q = transpose2d(reshape(bev, {C, HW}));  // [HW, C]
  Tensor<S> off = reshape(linear(q, pp.off_w, pp.off_b), {HW * Nz * L * P, 2});
  Tensor<S> wsm = reshape(
      softmax(reshape(linear(q, pp.wgt_w, pp.wgt_b), {HW * Nz, L * P}), 1),
      {HW * Nz * L * P, 1});

  auto refs = reference_points(grid);
  std::vector<int> hit_count(HW, 0);
  Tensor<S> acc = Tensor<S>::zeros({HW, C});
  for (size_t v = 0; v < rig.views.size(); ++v) {
    auto hits = detail::project_pillars(refs, rig.views[v]);
    for (int r = 0; r < HW * Nz; ++r)
      if (hits[r].valid) ++hit_count[r / Nz];
    for (int l = 0; l < L; ++l) {
      int stride = pyramids[v].strides[l];
      std::vector<int> samp_rows, cell_of;
      std::vector<S> base;
      for (int r = 0; r < HW * Nz; ++r) {
        if (!hits[r].valid) continue;
        S row = S(hits[r].v / stride - 0.5), col = S(hits[r].u / stride - 0.5);
        for (int p = 0; p < P; ++p) {
          samp_rows.push_back((r * L + l) * P + p);
          cell_of.push_back(r / Nz);
          base.push_back(row);
          base.push_back(col);
        }
      }
      if (samp_rows.empty()) continue;
      int M = (int)samp_rows.size();
      Tensor<S> pts = add(gather_rows(off, samp_rows),
                          Tensor<S>({M, 2}, std::move(base)));
      Tensor<S> samp = bilinear_sample(pyramids[v].levels[l], pts, PadMode::zeros);  // [C,M]
      Tensor<S> w = gather_rows(wsm, samp_rows);                     // [M,1]
      Tensor<S> rows = transpose2d(mul(samp, transpose2d(w)));       // [M,C]
      acc = add(acc, scatter_add_rows(rows, cell_of, HW));
    }
  }

  std::vector<S> inv(HW), mask(HW);
  for (int c = 0; c < HW; ++c) {
    inv[c] = hit_count[c] ? S(1) / S(hit_count[c]) : S(1);
    mask[c] = hit_count[c] ? S(1) : S(0);
  }
  Tensor<S> u = mul(acc, Tensor<S>({HW, 1}, std::move(inv)));
  Tensor<S> gated = mul(linear(u, pp.proj_w, pp.proj_b),
                        Tensor<S>({HW, 1}, std::move(mask)));
  return reshape(transpose2d(add(q, gated)), {C, grid.H, grid.W});
}

// Deformable self-attention on the BEV plane; value map is the input itself.
template <typename S>
Tensor<S> bev_self_attention(const Tensor<S>& bev, const BEVGridSpec& grid,
                             const BevSelfAttnParams<S>& pp) {
  int C = bev.dim(0), HW = grid.cells(), P = pp.points;
  Tensor<S> q = transpose2d(reshape(bev, {C, HW}));  // [HW, C]
  Tensor<S> off = reshape(linear(q, pp.off_w, pp.off_b), {HW * P, 2});
  Tensor<S> w = reshape(softmax(linear(q, pp.wgt_w, pp.wgt_b), 1), {HW * P, 1});
  std::vector<S> base;
  std::vector<int> cell_of;
  base.reserve((size_t)HW * P * 2);
  for (int i = 0; i < grid.H; ++i)
    for (int j = 0; j < grid.W; ++j)
      for (int p = 0; p < P; ++p) {
        base.push_back(S(i));
        base.push_back(S(j));
        cell_of.push_back(i * grid.W + j);
      }
  Tensor<S> pts = add(off, Tensor<S>({HW * P, 2}, std::move(base)));
  Tensor<S> samp = bilinear_sample(bev, pts, PadMode::zeros);                // [C, HW*P]
  Tensor<S> rows = transpose2d(mul(samp, transpose2d(w)));   // [HW*P, C]
  Tensor<S> attn = scatter_add_rows(rows, cell_of, HW);      // [HW, C]
  Tensor<S> outr = add(q, linear(attn, pp.proj_w, pp.proj_b));
  return reshape(transpose2d(outr), {C, grid.H, grid.W});
}

struct SpatialEncoderConfig {
  BEVGridSpec grid;
  int channels = 64;
  int n_layers = 3;
  int cross_points = 4;
  int self_points = 4;
  int ffn_hidden = 128;
  int num_levels = 5;
};

template <typename S>
class SpatialEncoder {
 public:
  SpatialEncoder(ParamStore<S>& ps, const SpatialEncoderConfig& cfg, Rng& rng)
      : cfg_(cfg) {
    int C = cfg.channels, Nz = (int)cfg.grid.z_anchors.size();
    int L = cfg.num_levels;
    for (int i = 0; i < cfg.n_layers; ++i) {
      std::string pre = "spatial.layer" + std::to_string(i) + ".";
      Layer ly;
      ly.self.points = cfg.self_points;
      ly.self.off_w = ps.create_fill(pre + "self.off.w", {C, cfg.self_points * 2}, S(0));
      ly.self.off_b = ps.create_fill(pre + "self.off.b", {cfg.self_points * 2}, S(0));
      ly.self.wgt_w = ps.create_fill(pre + "self.wgt.w", {C, cfg.self_points}, S(0));
      ly.self.wgt_b = ps.create_fill(pre + "self.wgt.b", {cfg.self_points}, S(0));
      ly.self.proj_w = ps.create_random(pre + "self.proj.w", {C, C}, rng);
      ly.self.proj_b = ps.create_fill(pre + "self.proj.b", {C}, S(0));
      int cols = Nz * L * cfg.cross_points;
      ly.cross.points = cfg.cross_points;
      ly.cross.levels = L;
      ly.cross.off_w = ps.create_fill(pre + "cross.off.w", {C, cols * 2}, S(0));
      ly.cross.off_b = ps.create_fill(pre + "cross.off.b", {cols * 2}, S(0));
      ly.cross.wgt_w = ps.create_fill(pre + "cross.wgt.w", {C, cols}, S(0));
      ly.cross.wgt_b = ps.create_fill(pre + "cross.wgt.b", {cols}, S(0));
      ly.cross.proj_w = ps.create_random(pre + "cross.proj.w", {C, C}, rng);
      ly.cross.proj_b = ps.create_fill(pre + "cross.proj.b", {C}, S(0));
      ly.ffn_w1 = ps.create_random(pre + "ffn.w1", {C, cfg.ffn_hidden}, rng);
      ly.ffn_b1 = ps.create_fill(pre + "ffn.b1", {cfg.ffn_hidden}, S(0));
      ly.ffn_w2 = ps.create_random(pre + "ffn.w2", {cfg.ffn_hidden, C}, rng);
      ly.ffn_b2 = ps.create_fill(pre + "ffn.b2", {C}, S(0));
      ly.ln1_g = ps.create_fill(pre + "ln1.g", {C}, S(1));
      ly.ln1_b = ps.create_fill(pre + "ln1.b", {C}, S(0));
      ly.ln2_g = ps.create_fill(pre + "ln2.g", {C}, S(1));
      ly.ln2_b = ps.create_fill(pre + "ln2.b", {C}, S(0));
      ly.ln3_g = ps.create_fill(pre + "ln3.g", {C}, S(1));
      ly.ln3_b = ps.create_fill(pre + "ln3.b", {C}, S(0));
      layers_.push_back(std::move(ly));
    }
  }

  // n_layers == 0 passes the queries through untouched.
  Tensor<S> encode(const Tensor<S>& bev,
                   const std::vector<FeaturePyramid<S>>& pyramids,
                   const CameraRig& rig) const {
    int C = cfg_.channels, HW = cfg_.grid.cells();
    Tensor<S> x = bev;
    for (const auto& ly : layers_) {
      x = bev_self_attention(x, cfg_.grid, ly.self);
      x = norm_chw(x, ly.ln1_g, ly.ln1_b, C, HW);
      x = spatial_cross_attention(x, pyramids, rig, cfg_.grid, ly.cross);
      x = norm_chw(x, ly.ln2_g, ly.ln2_b, C, HW);
      Tensor<S> r = transpose2d(reshape(x, {C, HW}));
      Tensor<S> h = relu(linear(r, ly.ffn_w1, ly.ffn_b1));
      Tensor<S> f = add(r, linear(h, ly.ffn_w2, ly.ffn_b2));
      f = layer_norm(f, ly.ln3_g, ly.ln3_b);
      x = reshape(transpose2d(f), {C, cfg_.grid.H, cfg_.grid.W});
    }
    return x;
  }

  const SpatialEncoderConfig& config() const { return cfg_; }
  int num_layers() const { return (int)layers_.size(); }
  SCAParams<S>& cross_params(int i) { return layers_.at(i).cross; }
  BevSelfAttnParams<S>& self_params(int i) { return layers_.at(i).self; }

 private:
  struct Layer {
    BevSelfAttnParams<S> self;
    SCAParams<S> cross;
    Tensor<S> ffn_w1, ffn_b1, ffn_w2, ffn_b2;
    Tensor<S> ln1_g, ln1_b, ln2_g, ln2_b, ln3_g, ln3_b;
  };

  static Tensor<S> norm_chw(const Tensor<S>& x, const Tensor<S>& g,
                            const Tensor<S>& b, int C, int HW) {
    Tensor<S> r = layer_norm(transpose2d(reshape(x, {C, HW})), g, b);
    return reshape(transpose2d(r), x.shape());
  }

  SpatialEncoderConfig cfg_;
  std::vector<Layer> layers_;
};

}  // namespace bevnet

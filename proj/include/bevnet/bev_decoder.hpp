// Query-based BEV detection decoder.  A fixed set of learned queries is
// optionally augmented with per-image queries seeded at proposal centers
// (hybrid queries).  Each decoder layer runs multi-head self-attention,
// deformable cross-attention into the BEV feature map around each query's
// reference point, and an FFN; reference points are refined through a
// sigmoid so they stay inside the unit square.  Set prediction is trained
// with a Hungarian-matched focal + L1 loss averaged over layers.
#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include "bevnet/geometry.hpp"
#include "bevnet/ops.hpp"
#include "bevnet/optim.hpp"
#include "bevnet/proposals.hpp"
#include "bevnet/random.hpp"
#include "bevnet/spatial.hpp"
#include "bevnet/tensor.hpp"

namespace bevnet {

// Proposal-seeded reference points are clamped off the boundary so the
// logit-space refinement stays finite.
inline constexpr double kRefEps = 1e-4;

struct BevDecoderConfig {
  BEVGridSpec grid{};
  int channels = 64;
  int num_classes = 3;
  int num_layers = 3;
  int num_queries = 48;  // learned (per-dataset) queries
  int num_heads = 4;
  int cross_points = 4;
  int ffn_hidden = 128;
  double lambda_cls = 2.0;
  double lambda_l1 = 0.25;
  double focal_alpha = 0.25;
  double focal_gamma = 2.0;
};

enum class QueryOrigin { learned, proposal };

template <typename S>
struct HybridQueries {
  Tensor<S> content;  // [Q, C]
  Tensor<S> refs;     // [Q, 2], (rx, ry) normalized to the BEV grid
  std::vector<QueryOrigin> origin;
};

template <typename S>
struct BevDecodeOutput {
  std::vector<Tensor<S>> cls;     // per layer, [Q, num_classes] logits
  std::vector<Tensor<S>> params;  // per layer, [Q, 10]
  std::vector<Tensor<S>> refs;    // reference points entering each layer
  std::vector<QueryOrigin> origin;
};

// 10-dim regression encoding: (rx, ry, z, log l, log w, log h, sin yaw,
// cos yaw, vx, vy) with (rx, ry) the box center normalized to the grid.
inline std::array<double, 10> encode_bev_box(const Box3D& b,
                                             const BEVGridSpec& g) {
  return {(b.center[0] - g.x_min) / (g.x_max - g.x_min),
          (b.center[1] - g.y_min) / (g.y_max - g.y_min),
          b.center[2],
          std::log(b.l),
          std::log(b.w),
          std::log(b.h),
          std::sin(b.yaw),
          std::cos(b.yaw),
          b.velocity[0],
          b.velocity[1]};
}

inline Box3D decode_bev_params(const double* p, const BEVGridSpec& g) {
  Box3D b;
  b.center = {g.x_min + p[0] * (g.x_max - g.x_min),
              g.y_min + p[1] * (g.y_max - g.y_min), p[2]};
  b.l = std::exp(p[3]);
  b.w = std::exp(p[4]);
  b.h = std::exp(p[5]);
  b.yaw = std::atan2(p[6], p[7]);
  b.velocity = {p[8], p[9]};
  return b;
}

// Minimum-cost assignment of rows to distinct columns (rows <= cols),
// shortest augmenting path with potentials.  Returns the column matched to
// each row.
inline std::vector<int> hungarian_match(
    const std::vector<std::vector<double>>& cost) {
  int n = static_cast<int>(cost.size());
  if (n == 0) return {};
  int m = static_cast<int>(cost[0].size());
  if (n > m)
    throw std::invalid_argument("hungarian_match: more rows than columns");
  constexpr double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(n + 1, 0.0), v(m + 1, 0.0);
  std::vector<int> p(m + 1, 0), way(m + 1, 0);
  for (int i = 1; i <= n; ++i) {
    p[0] = i;
    int j0 = 0;
    std::vector<double> minv(m + 1, inf);
    std::vector<char> used(m + 1, 0);
    do {
      used[j0] = 1;
      int i0 = p[j0], j1 = -1;
      double delta = inf;
      for (int j = 1; j <= m; ++j) {
        if (used[j]) continue;
        double cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (int j = 0; j <= m; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      int j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0 != 0);
  }
  std::vector<int> out(n, -1);
  for (int j = 1; j <= m; ++j)
    if (p[j] != 0) out[p[j] - 1] = j - 1;
  return out;
}

template <typename S>
class BevDecoder {
 public:
  BevDecoder(ParamStore<S>& ps, const BevDecoderConfig& cfg, Rng& rng)
      : cfg_(cfg) {
    int C = cfg.channels, Qd = cfg.num_queries, P = cfg.cross_points;
    if (C % cfg.num_heads != 0)
      throw std::invalid_argument("BevDecoder: heads must divide channels");
    q_content_ = ps.create_random("decoder.query.content", {Qd, C}, rng);
    q_pos_ = ps.create_random("decoder.query.pos", {Qd, C}, rng);
    ref_w_ = ps.create_random("decoder.query.ref.w", {C, 2}, rng);
    ref_b_ = ps.create_fill("decoder.query.ref.b", {2}, S(0));
    prop_content_ = ps.create_random("decoder.proposal.content", {1, C}, rng,
                                     static_cast<double>(C));
    for (int i = 0; i < cfg.num_layers; ++i) {
      std::string pre = "decoder.layer" + std::to_string(i) + ".";
      Layer L;
      auto mat = [&](const char* name, int in, int out) {
        return ps.create_random(pre + name, {in, out}, rng);
      };
      auto zvec = [&](const char* name, int n) {
        return ps.create_fill(pre + name, {n}, S(0));
      };
      L.wq = mat("self.wq", C, C);
      L.bq = zvec("self.bq", C);
      L.wk = mat("self.wk", C, C);
      L.bk = zvec("self.bk", C);
      L.wv = mat("self.wv", C, C);
      L.bv = zvec("self.bv", C);
      L.wo = mat("self.wo", C, C);
      L.bo = zvec("self.bo", C);
      // Zero-init sampling heads: layer 0 starts as a plain lookup at the
      // reference point with uniform weights.
      L.off_w = ps.create_fill(pre + "cross.off.w", {C, P * 2}, S(0));
      L.off_b = zvec("cross.off.b", P * 2);
      L.wgt_w = ps.create_fill(pre + "cross.wgt.w", {C, P}, S(0));
      L.wgt_b = zvec("cross.wgt.b", P);
      L.cproj_w = mat("cross.proj.w", C, C);
      L.cproj_b = zvec("cross.proj.b", C);
      L.ln1g = ps.create_fill(pre + "ln1.g", {C}, S(1));
      L.ln1b = zvec("ln1.b", C);
      L.ln2g = ps.create_fill(pre + "ln2.g", {C}, S(1));
      L.ln2b = zvec("ln2.b", C);
      L.ln3g = ps.create_fill(pre + "ln3.g", {C}, S(1));
      L.ln3b = zvec("ln3.b", C);
      L.f1w = mat("ffn.w1", C, cfg.ffn_hidden);
      L.f1b = zvec("ffn.b1", cfg.ffn_hidden);
      L.f2w = mat("ffn.w2", cfg.ffn_hidden, C);
      L.f2b = zvec("ffn.b2", C);
      layers_.push_back(L);
    }
    cls_w_ = ps.create_random("decoder.head.cls.w", {C, cfg.num_classes}, rng);
    cls_b_ = ps.create_fill("decoder.head.cls.b", {cfg.num_classes}, S(-4));
    reg_w_ = ps.create_random("decoder.head.reg.w", {C, 10}, rng);
    reg_b_ = ps.create_fill("decoder.head.reg.b", {10}, S(0));
  }

  // Learned queries, optionally followed by one query per proposal.  The
  // per-image queries share a single content embedding and take their
  // reference point from the proposal's BEV center; those references carry
  // no gradient back into the first stage.
  HybridQueries<S> build_queries(const ProposalSet& props) const {
    const BEVGridSpec& g = cfg_.grid;
    HybridQueries<S> hq;
    Tensor<S> ref0 = sigmoid(linear(q_pos_, ref_w_, ref_b_));
    hq.origin.assign(static_cast<size_t>(cfg_.num_queries),
                     QueryOrigin::learned);
    if (props.boxes.empty()) {
      hq.content = q_content_;
      hq.refs = ref0;
      return hq;
    }
    int Qp = static_cast<int>(props.boxes.size());
    Tensor<S> pc = gather_rows(prop_content_, std::vector<int>(Qp, 0));
    std::vector<S> rv(static_cast<size_t>(Qp) * 2);
    for (int i = 0; i < Qp; ++i) {
      double rx = (props.bev_centers[i][0] - g.x_min) / (g.x_max - g.x_min);
      double ry = (props.bev_centers[i][1] - g.y_min) / (g.y_max - g.y_min);
      rv[2 * i] = S(std::clamp(rx, kRefEps, 1.0 - kRefEps));
      rv[2 * i + 1] = S(std::clamp(ry, kRefEps, 1.0 - kRefEps));
    }
    hq.content = concat(std::vector<Tensor<S>>{q_content_, pc}, 0);
    hq.refs = concat(std::vector<Tensor<S>>{
                         ref0, Tensor<S>(Shape{Qp, 2}, std::move(rv))},
                     0);
    hq.origin.insert(hq.origin.end(), static_cast<size_t>(Qp),
                     QueryOrigin::proposal);
    return hq;
  }

  BevDecodeOutput<S> decode(const HybridQueries<S>& hq,
                            const Tensor<S>& bev) const {
    const BEVGridSpec& g = cfg_.grid;
    if (bev.rank() != 3 || bev.dim(0) != cfg_.channels ||
        bev.dim(1) != g.H || bev.dim(2) != g.W)
      throw std::invalid_argument("BevDecoder::decode: bev shape mismatch");
    int Q = hq.content.dim(0);
    if (hq.refs.dim(0) != Q || hq.origin.size() != static_cast<size_t>(Q))
      throw std::invalid_argument("BevDecoder::decode: query size mismatch");
    BevDecodeOutput<S> out;
    out.origin = hq.origin;
    Tensor<S> x = hq.content;
    Tensor<S> ref = hq.refs;
    for (const Layer& L : layers_) {
      x = norm(add(x, self_attn(L, x)), L.ln1g, L.ln1b);
      x = norm(add(x, cross_attn(L, x, ref, bev)), L.ln2g, L.ln2b);
      Tensor<S> h = relu(linear(x, L.f1w, L.f1b));
      x = norm(add(x, linear(h, L.f2w, L.f2b)), L.ln3g, L.ln3b);
      Tensor<S> raw = linear(x, reg_w_, reg_b_);
      Tensor<S> ctr =
          sigmoid(add(slice(raw, 1, 0, 2), logit(ref)));
      out.cls.push_back(linear(x, cls_w_, cls_b_));
      out.params.push_back(
          concat(std::vector<Tensor<S>>{ctr, slice(raw, 1, 2, 8)}, 1));
      out.refs.push_back(ref);
      ref = ctr;  // iterative refinement: next layer centers on this box
    }
    return out;
  }

  const BevDecoderConfig& config() const { return cfg_; }

 private:
  struct Layer {
    Tensor<S> wq, bq, wk, bk, wv, bv, wo, bo;
    Tensor<S> off_w, off_b, wgt_w, wgt_b, cproj_w, cproj_b;
    Tensor<S> ln1g, ln1b, ln2g, ln2b, ln3g, ln3b;
    Tensor<S> f1w, f1b, f2w, f2b;
  };

  static Tensor<S> logit(const Tensor<S>& r) {
    return log(div(r, sub(S(1), r)));
  }

  Tensor<S> norm(const Tensor<S>& x, const Tensor<S>& gm,
                 const Tensor<S>& bt) const {
    return layer_norm(x, gm, bt);
  }

  Tensor<S> self_attn(const Layer& L, const Tensor<S>& x) const {
    int Q = x.dim(0), C = cfg_.channels, h = cfg_.num_heads, d = C / h;
    auto heads = [&](const Tensor<S>& t) {
      return permute(reshape(t, {Q, h, d}), {1, 0, 2});  // [h, Q, d]
    };
    Tensor<S> qh = heads(linear(x, L.wq, L.bq));
    Tensor<S> kh = heads(linear(x, L.wk, L.bk));
    Tensor<S> vh = heads(linear(x, L.wv, L.bv));
    Tensor<S> scores = mul(matmul(qh, permute(kh, {0, 2, 1})),
                           S(1.0 / std::sqrt(static_cast<double>(d))));
    Tensor<S> ctx = matmul(softmax(scores, 2), vh);  // [h, Q, d]
    ctx = reshape(permute(ctx, {1, 0, 2}), {Q, C});
    return linear(ctx, L.wo, L.bo);
  }

  // Deformable lookup into the BEV map: P offset samples around each
  // query's reference point, convexly weighted, then projected.
  Tensor<S> cross_attn(const Layer& L, const Tensor<S>& x,
                       const Tensor<S>& ref, const Tensor<S>& bev) const {
    const BEVGridSpec& g = cfg_.grid;
    int Q = x.dim(0), P = cfg_.cross_points;
    Tensor<S> rx = slice(ref, 1, 0, 1), ry = slice(ref, 1, 1, 1);
    std::vector<Tensor<S>> rc = {sub(mul(ry, S(g.H)), S(0.5)),
                                 sub(mul(rx, S(g.W)), S(0.5))};
    Tensor<S> base = concat(rc, 1);  // [Q, 2] as (row, col)
    std::vector<int> rep(static_cast<size_t>(Q) * P);
    std::vector<int> cell(static_cast<size_t>(Q) * P);
    for (int q = 0; q < Q; ++q)
      for (int p = 0; p < P; ++p) {
        rep[static_cast<size_t>(q) * P + p] = q;
        cell[static_cast<size_t>(q) * P + p] = q;
      }
    Tensor<S> pts = add(gather_rows(base, rep),
                        reshape(linear(x, L.off_w, L.off_b), {Q * P, 2}));
    Tensor<S> samp = bilinear_sample(bev, pts, PadMode::zeros);  // [C, Q*P]
    Tensor<S> wgt = reshape(softmax(linear(x, L.wgt_w, L.wgt_b), 1),
                            {Q * P, 1});
    Tensor<S> rows = mul(transpose2d(samp), wgt);  // [Q*P, C]
    Tensor<S> agg = scatter_add_rows(rows, cell, Q);
    return linear(agg, L.cproj_w, L.cproj_b);
  }

  BevDecoderConfig cfg_;
  Tensor<S> q_content_, q_pos_, ref_w_, ref_b_, prop_content_;
  std::vector<Layer> layers_;
  Tensor<S> cls_w_, cls_b_, reg_w_, reg_b_;
};

template <typename S>
struct BevLossBreakdown {
  Tensor<S> total;  // lambda_cls * cls + lambda_l1 * l1
  Tensor<S> cls;    // focal, mean over layers, / max(1, num gt)
  Tensor<S> l1;     // matched-pair L1, same normalization
  std::vector<std::vector<int>> matches;  // per layer: gt index -> query
};

namespace detail {

inline double softplus_scalar(double x) {
  return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x)));
}

}  // namespace detail

// Set loss over all decoder layers.  Matching minimizes
//   lambda_cls * (focal pos - focal neg) + lambda_l1 * |params - target|_1
// per (gt, query) pair; given the matching, classification is focal over
// every query and regression is L1 over matched pairs, both divided by
// max(1, num gt) and averaged across layers.
template <typename S>
BevLossBreakdown<S> bev_loss(const BevDecodeOutput<S>& out,
                             const std::vector<Box3D>& gts,
                             const BevDecoderConfig& cfg) {
  using detail::log_sigmoid;
  int L = static_cast<int>(out.cls.size());
  if (L == 0) throw std::invalid_argument("bev_loss: no decoder layers");
  int Q = out.cls[0].dim(0), K = cfg.num_classes;
  int G = static_cast<int>(gts.size());
  if (G > Q) throw std::invalid_argument("bev_loss: more gt boxes than queries");
  double alpha = cfg.focal_alpha;
  S gamma = S(cfg.focal_gamma);
  double norm = std::max(1, G);

  std::vector<std::array<double, 10>> enc(G);
  for (int g = 0; g < G; ++g) enc[g] = encode_bev_box(gts[g], cfg.grid);

  BevLossBreakdown<S> bd;
  Tensor<S> cls_sum = Tensor<S>::scalar(S(0));
  Tensor<S> l1_sum = Tensor<S>::scalar(S(0));
  for (int l = 0; l < L; ++l) {
    const Tensor<S>& cl = out.cls[l];
    const Tensor<S>& pm = out.params[l];
    const S* cd = cl.data();
    const S* pd = pm.data();

    std::vector<int> match;
    if (G > 0) {
      std::vector<std::vector<double>> cost(G, std::vector<double>(Q));
      for (int g = 0; g < G; ++g) {
        int cgk = gts[g].class_id;
        for (int q = 0; q < Q; ++q) {
          double z = static_cast<double>(cd[q * K + cgk]);
          double p = 1.0 / (1.0 + std::exp(-z));
          double pos = alpha * std::pow(1.0 - p, cfg.focal_gamma) *
                       detail::softplus_scalar(-z);
          double neg = (1.0 - alpha) * std::pow(p, cfg.focal_gamma) *
                       detail::softplus_scalar(z);
          double l1d = 0.0;
          for (int d = 0; d < 10; ++d)
            l1d += std::abs(static_cast<double>(pd[q * 10 + d]) - enc[g][d]);
          cost[g][q] = cfg.lambda_cls * (pos - neg) + cfg.lambda_l1 * l1d;
        }
      }
      match = hungarian_match(cost);
    }
    bd.matches.push_back(match);

    std::vector<S> tvec(static_cast<size_t>(Q) * K, S(0));
    for (int g = 0; g < G; ++g)
      tvec[static_cast<size_t>(match[g]) * K + gts[g].class_id] = S(1);
    Tensor<S> t(Shape{Q, K}, std::move(tvec));
    Tensor<S> psig = sigmoid(cl);
    Tensor<S> pos = mul(mul(t, pow(sub(S(1), psig), gamma)),
                        neg(log_sigmoid(cl)));
    Tensor<S> ngt = mul(mul(sub(S(1), t), pow(psig, gamma)),
                        neg(log_sigmoid(neg(cl))));
    cls_sum = add(cls_sum, add(mul(sum_all(pos), S(alpha)),
                               mul(sum_all(ngt), S(1 - alpha))));

    if (G > 0) {
      std::vector<S> tg(static_cast<size_t>(G) * 10);
      for (int g = 0; g < G; ++g)
        for (int d = 0; d < 10; ++d)
          tg[static_cast<size_t>(g) * 10 + d] = S(enc[g][d]);
      Tensor<S> matched = gather_rows(pm, match);
      l1_sum = add(l1_sum,
                   sum_all(abs(sub(matched, Tensor<S>(Shape{G, 10},
                                                      std::move(tg))))));
    }
  }
  S scale = S(1.0 / (norm * L));
  bd.cls = mul(cls_sum, scale);
  bd.l1 = mul(l1_sum, scale);
  bd.total = add(mul(bd.cls, S(cfg.lambda_cls)), mul(bd.l1, S(cfg.lambda_l1)));
  if (!std::isfinite(static_cast<double>(bd.total.data()[0])))
    throw std::runtime_error("L_bev is not finite (training step diverged)");
  return bd;
}

// L_total = lambda_bev * L_bev + lambda_pers * L_pers.
template <typename S>
Tensor<S> total_loss(const Tensor<S>& l_bev, const Tensor<S>& l_pers,
                     double lambda_bev = 1.0, double lambda_pers = 1.0) {
  return add(mul(l_bev, S(lambda_bev)), mul(l_pers, S(lambda_pers)));
}

// Thresholded detections from the last decoder layer.  Score is the top
// class sigmoid; velocity comes straight out of the regression head.
template <typename S>
std::vector<Box3D> decode_detections(const BevDecodeOutput<S>& out,
                                     const BEVGridSpec& grid,
                                     double score_thresh) {
  std::vector<Box3D> dets;
  if (out.cls.empty()) return dets;
  const Tensor<S>& cl = out.cls.back();
  const Tensor<S>& pm = out.params.back();
  int Q = cl.dim(0), K = cl.dim(1);
  const S* cd = cl.data();
  const S* pd = pm.data();
  for (int q = 0; q < Q; ++q) {
    int best = 0;
    for (int k = 1; k < K; ++k)
      if (cd[q * K + k] > cd[q * K + best]) best = k;
    double z = static_cast<double>(cd[q * K + best]);
    double score = 1.0 / (1.0 + std::exp(-z));
    if (score < score_thresh) continue;
    std::array<double, 10> p;
    for (int d = 0; d < 10; ++d) p[d] = static_cast<double>(pd[q * 10 + d]);
    Box3D b = decode_bev_params(p.data(), grid);
    b.class_id = best;
    b.score = score;
    dets.push_back(b);
  }
  return dets;
}

}  // namespace bevnet

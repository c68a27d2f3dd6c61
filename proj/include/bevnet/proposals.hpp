// Two-stage proposal selection: per-view 2D NMS + top-k, then a BEV-level
// NMS + top-k over the union.  Output boxes are ego-frame and score-sorted;
// ties break on (view, index) so reruns on identical input are bit-stable.
#pragma once

#include <algorithm>
#include <array>
#include <string>
#include <vector>

#include <json.hpp>

#include "bevnet/geometry.hpp"
#include "bevnet/perspective_head.hpp"

namespace bevnet {

struct ProposalConfig {
  double pers_iou = 0.75;  // image-plane suppression threshold
  double bev_iou = 0.3;    // ground-plane suppression threshold
  int topk_per_view = 100;
  int topk_final = 100;
};

struct ViewProposal {
  Box3D box;  // ego frame
  double score = 0;
  int view = -1;
  int index = -1;  // position in the source view's input list
};

struct ProposalSet {
  std::vector<ViewProposal> boxes;               // scores descending
  std::vector<std::array<double, 2>> bev_centers;  // xy of each box
};

// Per-stage survival record for one input proposal.
struct ProposalTrace {
  int view = -1;
  int index = -1;
  double score = 0;
  bool projectable = false;  // at least one corner in front of the camera
  bool nms2d = false;
  bool topk1 = false;
  bool nms_bev = false;
  bool final = false;
};

struct ProposalDump {
  std::vector<ProposalTrace> traces;  // all inputs, (view, index) order
  int final_count = 0;
};

// Axis-aligned hull of the visible projected corners; false when the whole
// box is behind the near plane.
inline bool image_hull(const Box3D& ego_box, const CameraView& view,
                       Rect* out) {
  double fx = view.flipped ? -view.K.fx : view.K.fx;
  double x1 = 0, y1 = 0, x2 = 0, y2 = 0;
  bool any = false;
  for (const auto& corner : box_corners_3d(ego_box)) {
    Vec3 pc = view.ego_to_camera.apply(corner);
    if (pc[2] <= kProjZMin) continue;
    double u = view.K.cx + fx * pc[0] / pc[2];
    double v = view.K.cy + view.K.fy * pc[1] / pc[2];
    if (!any) {
      x1 = x2 = u;
      y1 = y2 = v;
      any = true;
    } else {
      x1 = std::min(x1, u);
      x2 = std::max(x2, u);
      y1 = std::min(y1, v);
      y2 = std::max(y2, v);
    }
  }
  if (!any) return false;
  *out = {x1, y1, x2, y2};
  return true;
}

namespace detail {

// score desc, then index asc
inline std::vector<int> score_order(const std::vector<double>& scores) {
  std::vector<int> order(scores.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = (int)i;
  std::sort(order.begin(), order.end(), [&](int a, int b) {
    if (scores[a] != scores[b]) return scores[a] > scores[b];
    return a < b;
  });
  return order;
}

}  // namespace detail

// Greedy NMS over axis-aligned rects; returns kept indices in score order.
inline std::vector<int> nms_rects(const std::vector<Rect>& rects,
                                  const std::vector<double>& scores,
                                  double iou_thresh) {
  std::vector<int> keep;
  for (int i : detail::score_order(scores)) {
    bool ok = true;
    for (int j : keep)
      if (iou_2d(rects[i], rects[j]) > iou_thresh) {
        ok = false;
        break;
      }
    if (ok) keep.push_back(i);
  }
  return keep;
}

// Greedy NMS over ego boxes with rotated ground-plane IoU.
inline std::vector<int> nms_bev(const std::vector<Box3D>& boxes,
                                const std::vector<double>& scores,
                                const std::vector<std::pair<int, int>>& tie,
                                double iou_thresh) {
  std::vector<int> order(boxes.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = (int)i;
  std::sort(order.begin(), order.end(), [&](int a, int b) {
    if (scores[a] != scores[b]) return scores[a] > scores[b];
    return tie[a] < tie[b];
  });
  std::vector<int> keep;
  for (int i : order) {
    bool ok = true;
    for (int j : keep)
      if (iou_bev(boxes[i], boxes[j]) > iou_thresh) {
        ok = false;
        break;
      }
    if (ok) keep.push_back(i);
  }
  return keep;
}

// Full pipeline.  `per_view[v]` holds camera-frame proposals for rig view v.
inline ProposalSet build_proposals(
    const std::vector<std::vector<Proposal>>& per_view, const CameraRig& rig,
    const ProposalConfig& cfg, ProposalDump* dump = nullptr) {
  if (per_view.size() != rig.views.size())
    throw std::invalid_argument("build_proposals: view count mismatch");

  struct Cand {
    Box3D ego;
    double score;
    int view, index;
  };
  std::vector<Cand> pool;
  std::vector<ProposalTrace> traces;

  for (size_t v = 0; v < per_view.size(); ++v) {
    const auto& view = rig.views[v];
    std::vector<Rect> rects;
    std::vector<double> scores;
    std::vector<int> src;  // input index per projectable proposal
    std::vector<Box3D> egos;
    for (size_t i = 0; i < per_view[v].size(); ++i) {
      const Proposal& p = per_view[v][i];
      ProposalTrace tr;
      tr.view = (int)v;
      tr.index = (int)i;
      tr.score = p.score;
      Box3D ego = proposal_to_ego(p.box, view);
      Rect r;
      if (image_hull(ego, view, &r)) {
        tr.projectable = true;
        rects.push_back(r);
        scores.push_back(p.score);
        src.push_back((int)i);
        egos.push_back(ego);
      }
      traces.push_back(tr);
    }
    size_t base = traces.size() - per_view[v].size();
    auto kept = nms_rects(rects, scores, cfg.pers_iou);
    for (int k : kept) traces[base + src[k]].nms2d = true;
    if ((int)kept.size() > cfg.topk_per_view)
      kept.resize(cfg.topk_per_view);  // already score-sorted
    for (int k : kept) {
      traces[base + src[k]].topk1 = true;
      pool.push_back({egos[k], scores[k], (int)v, src[k]});
    }
  }

  std::vector<Box3D> boxes(pool.size());
  std::vector<double> scores(pool.size());
  std::vector<std::pair<int, int>> tie(pool.size());
  for (size_t i = 0; i < pool.size(); ++i) {
    boxes[i] = pool[i].ego;
    scores[i] = pool[i].score;
    tie[i] = {pool[i].view, pool[i].index};
  }
  auto kept = nms_bev(boxes, scores, tie, cfg.bev_iou);

  auto trace_of = [&](const Cand& c) -> ProposalTrace& {
    size_t off = 0;
    for (int v = 0; v < c.view; ++v) off += per_view[v].size();
    return traces[off + c.index];
  };
  for (int k : kept) trace_of(pool[k]).nms_bev = true;
  if ((int)kept.size() > cfg.topk_final) kept.resize(cfg.topk_final);

  ProposalSet out;
  for (int k : kept) {
    trace_of(pool[k]).final = true;
    ViewProposal vp;
    vp.box = pool[k].ego;
    vp.score = pool[k].score;
    vp.view = pool[k].view;
    vp.index = pool[k].index;
    out.boxes.push_back(vp);
    out.bev_centers.push_back({vp.box.center[0], vp.box.center[1]});
  }
  if (dump) {
    dump->traces = std::move(traces);
    dump->final_count = (int)out.boxes.size();
  }
  return out;
}

inline std::string proposal_dump_json(const ProposalDump& dump) {
  nlohmann::json j;
  j["final_count"] = dump.final_count;
  j["proposals"] = nlohmann::json::array();
  for (const auto& t : dump.traces) {
    j["proposals"].push_back({{"view", t.view},
                              {"index", t.index},
                              {"score", t.score},
                              {"projectable", t.projectable},
                              {"nms2d", t.nms2d},
                              {"topk1", t.topk1},
                              {"nms_bev", t.nms_bev},
                              {"final", t.final}});
  }
  return j.dump(2);
}

}  // namespace bevnet

// Detection metrics over a set of evaluation frames. Predictions are
// matched to ground truth per class by planar center distance, greedily in
// global score order, one-to-one within each frame. AP interpolates the
// precision envelope on a fixed recall grid with a (0.1, 0.1) floor; the
// combined score folds mean AP together with true-positive error means.
#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "bevnet/geometry.hpp"

namespace bevnet {

struct EvalConfig {
  std::vector<double> dist_thresholds{0.5, 1.0, 2.0, 4.0};
  double tp_threshold = 2.0;  // matches used for the error means
  int num_classes = 3;
  double min_recall = 0.1;
  double min_precision = 0.1;
};

// Mean errors over matched pairs; each saturates at 1 inside the combined
// score. aae is identically zero (boxes carry no attribute state).
struct TpErrors {
  double ate = 1.0;  // planar center distance, meters
  double ase = 1.0;  // 1 - IoU after aligning center and yaw
  double aoe = 1.0;  // absolute yaw difference, radians
  double ave = 1.0;  // velocity L2, m/s
  double aae = 0.0;
  int count = 0;
};

struct EvalResult {
  double mean_ap = 0.0;
  double nds = 0.0;
  TpErrors tp;
  // ap[c][t]: class c at dist_thresholds[t]; classes with no ground truth
  // anywhere are excluded from mean_ap and flagged with ap -1.
  std::vector<std::vector<double>> ap;
  std::vector<int> gt_count;  // per class
};

namespace detail {

struct FlatPred {
  int frame;
  Box3D box;
  int order;  // insertion order, the deterministic tie-break
};

inline bool score_before(const FlatPred& a, const FlatPred& b) {
  if (a.box.score != b.box.score) return a.box.score > b.box.score;
  if (a.frame != b.frame) return a.frame < b.frame;
  return a.order < b.order;
}

}  // namespace detail

// Greedy matching for one class at one distance threshold. preds must be
// sorted score-descending; gt_used is per (frame, gt index) and is consumed.
// Returns per-pred TP flags and, for TPs, the matched (frame, gt) pair.
struct MatchResult {
  std::vector<char> is_tp;
  std::vector<std::array<int, 2>> matched;  // (frame, gt index) or (-1, -1)
};

inline MatchResult match_greedy(
    const std::vector<detail::FlatPred>& preds,
    const std::vector<std::vector<Box3D>>& gts_per_frame, int class_id,
    double thresh) {
  MatchResult r;
  std::vector<std::vector<char>> used(gts_per_frame.size());
  for (size_t f = 0; f < gts_per_frame.size(); ++f)
    used[f].assign(gts_per_frame[f].size(), 0);
  for (const auto& p : preds) {
    int best = -1;
    double best_d = thresh;
    const auto& gts = gts_per_frame[p.frame];
    for (size_t g = 0; g < gts.size(); ++g) {
      if (used[p.frame][g] || gts[g].class_id != class_id) continue;
      double d = center_dist_bev(p.box, gts[g]);
      if (d <= best_d) {  // ties keep the earlier gt
        if (best < 0 || d < best_d) {
          best = static_cast<int>(g);
          best_d = d;
        }
      }
    }
    if (best >= 0) {
      used[p.frame][best] = 1;
      r.is_tp.push_back(1);
      r.matched.push_back({p.frame, best});
    } else {
      r.is_tp.push_back(0);
      r.matched.push_back({-1, -1});
    }
  }
  return r;
}

// Envelope-interpolated AP with recall/precision floors.  The precision at
// recall r is the best precision achieved at any operating point with
// recall >= r; the mean runs over the 90 recall steps above the floor.
inline double average_precision(const std::vector<char>& is_tp, int n_gt,
                                double min_recall = 0.1,
                                double min_precision = 0.1) {
  if (n_gt <= 0) throw std::invalid_argument("average_precision: no gt");
  int n = static_cast<int>(is_tp.size());
  std::vector<double> rec(n), prec(n);
  int tp = 0;
  for (int i = 0; i < n; ++i) {
    tp += is_tp[i] ? 1 : 0;
    rec[i] = static_cast<double>(tp) / n_gt;
    prec[i] = static_cast<double>(tp) / (i + 1);
  }
  int steps = static_cast<int>(std::lround((1.0 - min_recall) * 100.0));
  double acc = 0.0;
  for (int j = 1; j <= steps; ++j) {
    double r = min_recall + 0.01 * j;
    double best = 0.0;
    for (int i = 0; i < n; ++i)
      if (rec[i] + 1e-12 >= r) best = std::max(best, prec[i]);
    acc += std::max(0.0, best - min_precision) / (1.0 - min_precision);
  }
  return acc / steps;
}

// 1 - IoU of the two boxes after aligning centers and yaw.
inline double scale_error(const Box3D& a, const Box3D& b) {
  double inter = std::min(a.l, b.l) * std::min(a.w, b.w) * std::min(a.h, b.h);
  double uni = a.l * a.w * a.h + b.l * b.w * b.h - inter;
  return 1.0 - inter / uni;
}

inline double orientation_error(const Box3D& a, const Box3D& b) {
  return std::abs(wrap_angle(a.yaw - b.yaw));
}

inline double velocity_error(const Box3D& a, const Box3D& b) {
  return std::hypot(a.velocity[0] - b.velocity[0],
                    a.velocity[1] - b.velocity[1]);
}

// nds = (1/10) * (5 * mean_ap + sum over the five error means of
// (1 - min(1, err))).
inline double nds_score(double mean_ap, const TpErrors& tp) {
  double s = 5.0 * mean_ap;
  for (double e : {tp.ate, tp.ase, tp.aoe, tp.ave, tp.aae})
    s += 1.0 - std::min(1.0, e);
  return s / 10.0;
}

inline EvalResult evaluate_detections(
    const std::vector<std::vector<Box3D>>& dets_per_frame,
    const std::vector<std::vector<Box3D>>& gts_per_frame,
    const EvalConfig& cfg = {}) {
  if (dets_per_frame.size() != gts_per_frame.size())
    throw std::invalid_argument("evaluate_detections: frame count mismatch");
  int F = static_cast<int>(dets_per_frame.size());
  int K = cfg.num_classes;
  EvalResult res;
  res.gt_count.assign(K, 0);
  for (const auto& gts : gts_per_frame)
    for (const auto& g : gts) {
      if (g.class_id < 0 || g.class_id >= K)
        throw std::invalid_argument("evaluate_detections: class out of range");
      ++res.gt_count[g.class_id];
    }

  std::vector<std::vector<detail::FlatPred>> by_class(K);
  for (int f = 0; f < F; ++f)
    for (size_t i = 0; i < dets_per_frame[f].size(); ++i) {
      const Box3D& b = dets_per_frame[f][i];
      if (b.class_id < 0 || b.class_id >= K)
        throw std::invalid_argument("evaluate_detections: class out of range");
      by_class[b.class_id].push_back({f, b, static_cast<int>(i)});
    }
  for (auto& v : by_class)
    std::sort(v.begin(), v.end(), detail::score_before);

  res.ap.assign(K, std::vector<double>(cfg.dist_thresholds.size(), -1.0));
  double ap_sum = 0.0;
  int ap_n = 0;
  double e_ate = 0, e_ase = 0, e_aoe = 0, e_ave = 0;
  int tp_n = 0;
  for (int c = 0; c < K; ++c) {
    if (res.gt_count[c] == 0) continue;  // absent classes are not scored
    for (size_t t = 0; t < cfg.dist_thresholds.size(); ++t) {
      auto m = match_greedy(by_class[c], gts_per_frame, c,
                            cfg.dist_thresholds[t]);
      res.ap[c][t] = average_precision(m.is_tp, res.gt_count[c],
                                       cfg.min_recall, cfg.min_precision);
      ap_sum += res.ap[c][t];
      ++ap_n;
    }
    auto m = match_greedy(by_class[c], gts_per_frame, c, cfg.tp_threshold);
    for (size_t i = 0; i < m.is_tp.size(); ++i) {
      if (!m.is_tp[i]) continue;
      const Box3D& p = by_class[c][i].box;
      const Box3D& g = gts_per_frame[m.matched[i][0]][m.matched[i][1]];
      e_ate += center_dist_bev(p, g);
      e_ase += scale_error(p, g);
      e_aoe += orientation_error(p, g);
      e_ave += velocity_error(p, g);
      ++tp_n;
    }
  }
  res.mean_ap = ap_n > 0 ? ap_sum / ap_n : 0.0;
  res.tp.count = tp_n;
  if (tp_n > 0) {
    res.tp.ate = e_ate / tp_n;
    res.tp.ase = e_ase / tp_n;
    res.tp.aoe = e_aoe / tp_n;
    res.tp.ave = e_ave / tp_n;
  }
  res.tp.aae = 0.0;
  res.nds = nds_score(res.mean_ap, res.tp);
  return res;
}

inline std::string metrics_json(const EvalResult& res,
                                const EvalConfig& cfg = {}) {
  nlohmann::json j;
  j["summary"] = {{"nds", res.nds},       {"mean_ap", res.mean_ap},
                  {"mate", res.tp.ate},   {"mase", res.tp.ase},
                  {"maoe", res.tp.aoe},   {"mave", res.tp.ave},
                  {"maae", res.tp.aae},   {"tp_count", res.tp.count}};
  nlohmann::json per_class = nlohmann::json::object();
  for (size_t c = 0; c < res.ap.size(); ++c) {
    if (res.gt_count[c] == 0) continue;
    nlohmann::json row;
    row["gt_count"] = res.gt_count[c];
    for (size_t t = 0; t < cfg.dist_thresholds.size(); ++t)
      row["ap"][std::to_string(cfg.dist_thresholds[t])] = res.ap[c][t];
    per_class["class_" + std::to_string(c)] = row;
  }
  j["per_class"] = per_class;
  return j.dump(2);
}

}  // namespace bevnet

// Full two-stage model assembly.  One backbone and perspective head shared
// across camera views feed (a) the first-stage losses and proposals and
// (b) the BEV branch: spatial encoder over the view pyramids, temporal
// fusion with warped history maps, then the query decoder.  The ablation
// arm picks which branches run and which losses train.
#pragma once

#include <algorithm>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "bevnet/backbone.hpp"
#include "bevnet/bev_decoder.hpp"
#include "bevnet/config.hpp"
#include "bevnet/geometry.hpp"
#include "bevnet/perspective_head.hpp"
#include "bevnet/proposals.hpp"
#include "bevnet/scene.hpp"
#include "bevnet/spatial.hpp"
#include "bevnet/temporal.hpp"

namespace bevnet {

enum class Arm { perspective_only, bev_only, perspective_and_bev, bev_and_bev };

inline Arm arm_from_string(const std::string& s) {
  if (s == "perspective_only") return Arm::perspective_only;
  if (s == "bev_only") return Arm::bev_only;
  if (s == "perspective_and_bev") return Arm::perspective_and_bev;
  if (s == "bev_and_bev") return Arm::bev_and_bev;
  throw std::invalid_argument("unknown arm: " + s);
}

inline const char* arm_name(Arm a) {
  switch (a) {
    case Arm::perspective_only: return "perspective_only";
    case Arm::bev_only: return "bev_only";
    case Arm::perspective_and_bev: return "perspective_and_bev";
    case Arm::bev_and_bev: return "bev_and_bev";
  }
  return "?";
}

inline bool arm_uses_perspective(Arm a) {
  return a == Arm::perspective_only || a == Arm::perspective_and_bev;
}
inline bool arm_uses_bev(Arm a) { return a != Arm::perspective_only; }

inline BEVGridSpec grid_from_config(const HarnessConfig& c) {
  BEVGridSpec g;
  g.x_min = -c.bev_extent;
  g.x_max = c.bev_extent;
  g.y_min = -c.bev_extent;
  g.y_max = c.bev_extent;
  g.H = c.bev_h;
  g.W = c.bev_w;
  g.z_anchors = c.z_anchors;
  return g;
}

template <typename S>
Tensor<S> image_tensor(const Image& img, bool flip) {
  std::vector<S> v(static_cast<size_t>(3) * img.height * img.width);
  size_t i = 0;
  for (int c = 0; c < 3; ++c)
    for (int r = 0; r < img.height; ++r)
      for (int col = 0; col < img.width; ++col)
        v[i++] = static_cast<S>(
            img.at(c, r, flip ? img.width - 1 - col : col));
  return Tensor<S>(Shape{3, img.height, img.width}, std::move(v));
}

// The rig adjusted for a horizontal flip: principal point mirrors and the
// view is marked so projection and decoding negate fx.
inline CameraRig flipped_rig(const CameraRig& rig) {
  CameraRig out = rig;
  for (auto& view : out.views) {
    view.flipped = !view.flipped;
    view.K.cx = (view.K.width - 1.0) - view.K.cx;
  }
  return out;
}

template <typename S>
struct ModelOutput {
  CameraRig rig;  // effective rig (flipped when augmented)
  std::vector<FeaturePyramid<S>> pyramids;
  std::vector<PerspectivePrediction<S>> pers;
  Tensor<S> bev;
  ProposalSet proposals;
  BevDecodeOutput<S> dec;
  BevDecodeOutput<S> dec_aux;  // first pass of the bev_and_bev arm
  bool has_bev = false;
  bool has_aux = false;
};

template <typename S>
struct ModelLoss {
  Tensor<S> total, l_bev, l_pers, l2d, l3d, lconf;
};

template <typename S>
class Model {
 public:
  Model(ParamStore<S>& ps, const HarnessConfig& hc, Rng& rng)
      : hc_(hc),
        backbone_(ps, make_backbone_cfg(hc), rng),
        head_(ps, make_head_cfg(hc), rng),
        encoder_(ps, make_encoder_cfg(hc), rng),
        temporal_(ps, make_temporal_cfg(hc), rng),
        decoder_(ps, make_decoder_cfg(hc), rng) {
    bev_embed_ = ps.create_random("bev.embed",
                                  {hc.channels, hc.bev_h, hc.bev_w}, rng);
  }

  static BackboneConfig make_backbone_cfg(const HarnessConfig& c) {
    BackboneConfig b;
    b.base_width = c.base_width;
    b.fpn_channels = c.channels;
    return b;
  }
  static PerspectiveHeadConfig make_head_cfg(const HarnessConfig& c) {
    PerspectiveHeadConfig h;
    h.num_classes = c.num_classes;
    h.channels = c.channels;
    h.f_ref = c.f_ref;
    return h;
  }
  static SpatialEncoderConfig make_encoder_cfg(const HarnessConfig& c) {
    SpatialEncoderConfig e;
    e.grid = grid_from_config(c);
    e.channels = c.channels;
    e.n_layers = c.encoder_layers;
    e.cross_points = c.cross_points;
    e.self_points = c.self_points;
    e.ffn_hidden = c.ffn_hidden;
    return e;
  }
  static TemporalConfig make_temporal_cfg(const HarnessConfig& c) {
    TemporalConfig t;
    t.channels = c.channels;
    t.history = c.history;
    t.interval = c.history_interval();
    t.bidirectional = c.bidirectional;
    return t;
  }
  static BevDecoderConfig make_decoder_cfg(const HarnessConfig& c) {
    BevDecoderConfig d;
    d.grid = grid_from_config(c);
    d.channels = c.channels;
    d.num_classes = c.num_classes;
    d.num_layers = c.decoder_layers;
    d.num_queries = c.num_queries;
    d.num_heads = c.num_heads;
    d.cross_points = c.decoder_points;
    d.ffn_hidden = c.ffn_hidden;
    d.lambda_cls = c.lambda_cls;
    d.lambda_l1 = c.lambda_l1;
    return d;
  }

  std::vector<FeaturePyramid<S>> extract_views(const SceneFrame& frame,
                                               bool flip) const {
    std::vector<FeaturePyramid<S>> pyrs;
    for (const auto& img : frame.images)
      pyrs.push_back(backbone_.extract(image_tensor<S>(img, flip)));
    return pyrs;
  }

  // Un-fused BEV features of one frame; used for history maps, where it
  // runs outside any tape so no gradient flows back through time.
  Tensor<S> bev_features(const SceneFrame& frame, bool flip) const {
    auto pyrs = extract_views(frame, flip);
    CameraRig rig = flip ? flipped_rig(frame.rig) : frame.rig;
    return encoder_.encode(bev_embed_, pyrs, rig);
  }

  ModelOutput<S> forward(const SceneFrame& frame,
                         const std::vector<Tensor<S>>& history,
                         const std::vector<SE3>& rels, Arm arm,
                         bool flip = false) const {
    ModelOutput<S> out;
    out.rig = flip ? flipped_rig(frame.rig) : frame.rig;
    out.pyramids = extract_views(frame, flip);
    if (arm_uses_perspective(arm))
      for (const auto& pyr : out.pyramids) out.pers.push_back(head_.forward(pyr));
    if (!arm_uses_bev(arm)) {
      if (!out.pers.empty())
        out.proposals = perspective_proposals(out.pers, out.rig);
      return out;
    }

    Tensor<S> cur = encoder_.encode(bev_embed_, out.pyramids, out.rig);
    out.bev = temporal_.fuse(cur, history, rels, encoder_.config().grid);
    out.has_bev = true;

    if (arm == Arm::perspective_and_bev) {
      out.proposals = perspective_proposals(out.pers, out.rig);
    } else if (arm == Arm::bev_and_bev) {
      out.dec_aux = decoder_.decode(decoder_.build_queries(ProposalSet{}),
                                    out.bev);
      out.has_aux = true;
      out.proposals = bev_proposals(out.dec_aux);
    }
    out.dec = decoder_.decode(decoder_.build_queries(out.proposals), out.bev);
    return out;
  }

  ModelLoss<S> loss(const ModelOutput<S>& out, const SceneFrame& frame,
                    Arm arm) const {
    ModelLoss<S> ml;
    ml.l_bev = Tensor<S>::scalar(S(0));
    ml.l_pers = Tensor<S>::scalar(S(0));
    ml.l2d = Tensor<S>::scalar(S(0));
    ml.l3d = Tensor<S>::scalar(S(0));
    ml.lconf = Tensor<S>::scalar(S(0));

    if (arm_uses_perspective(arm)) {
      const auto& hcfg = head_.config();
      size_t n_views = out.pers.size();
      for (size_t v = 0; v < n_views; ++v) {
        const auto& pred = out.pers[v];
        std::vector<Shape> shapes;
        for (const auto& t : pred.class_logits) shapes.push_back(t.shape());
        auto tg = assign_targets(shapes, pred.strides, frame.gt_boxes,
                                 out.rig.views[v], hcfg);
        auto pl = perspective_loss(pred, tg, out.rig.views[v], hcfg);
        S inv = S(1.0 / n_views);
        ml.l_pers = add(ml.l_pers, mul(pl.total, inv));
        ml.l2d = add(ml.l2d, mul(pl.l2d, inv));
        ml.l3d = add(ml.l3d, mul(pl.l3d, inv));
        ml.lconf = add(ml.lconf, mul(pl.lconf, inv));
      }
    }
    if (out.has_bev) {
      auto gts = grid_gts(frame);
      ml.l_bev = bev_loss(out.dec, gts, decoder_.config()).total;
      if (out.has_aux) {
        // Both decode passes are supervised; average keeps the scale of
        // lambda_bev comparable across arms.
        Tensor<S> aux = bev_loss(out.dec_aux, gts, decoder_.config()).total;
        ml.l_bev = mul(add(ml.l_bev, aux), S(0.5));
      }
    }
    ml.total = total_loss(ml.l_bev, ml.l_pers, hc_.lambda_bev,
                          hc_.lambda_pers);
    return ml;
  }

  // Final detections for evaluation.  The perspective-only arm reports its
  // proposals directly (no velocity estimate); every other arm decodes the
  // last decoder layer.
  std::vector<Box3D> detections(const ModelOutput<S>& out, Arm arm,
                                double score_thresh) const {
    std::vector<Box3D> dets;
    if (arm == Arm::perspective_only) {
      for (const auto& vp : out.proposals.boxes) {
        if (vp.score < score_thresh) continue;
        Box3D b = vp.box;
        b.score = vp.score;
        dets.push_back(b);
      }
      return dets;
    }
    return decode_detections(out.dec, decoder_.config().grid, score_thresh);
  }

  ProposalSet perspective_proposals(
      const std::vector<PerspectivePrediction<S>>& pers,
      const CameraRig& rig, ProposalDump* dump = nullptr) const {
    std::vector<std::vector<Proposal>> per_view;
    for (size_t v = 0; v < pers.size(); ++v)
      per_view.push_back(decode_proposals(pers[v], rig.views[v],
                                          hc_.proposal_score_thresh,
                                          head_.config()));
    ProposalConfig pc;
    pc.pers_iou = hc_.pers_iou;
    pc.bev_iou = hc_.bev_iou;
    pc.topk_per_view = hc_.topk_per_view;
    pc.topk_final = hc_.topk_final;
    return build_proposals(per_view, rig, pc, dump);
  }

  // Ground truth restricted to the BEV grid; the decoder and the evaluator
  // both see only this footprint.
  std::vector<Box3D> grid_gts(const SceneFrame& frame) const {
    const BEVGridSpec& g = decoder_.config().grid;
    std::vector<Box3D> gts;
    for (const auto& b : frame.gt_boxes)
      if (b.center[0] >= g.x_min && b.center[0] <= g.x_max &&
          b.center[1] >= g.y_min && b.center[1] <= g.y_max)
        gts.push_back(b);
    return gts;
  }

  const HarnessConfig& harness_config() const { return hc_; }
  const BevDecoderConfig& decoder_config() const { return decoder_.config(); }
  const PerspectiveHeadConfig& head_config() const { return head_.config(); }
  const BevDecoder<S>& decoder() const { return decoder_; }
  const TemporalFuser<S>& temporal() const { return temporal_; }

 private:
  // First-pass BEV detections recycled as second-pass proposals: BEV NMS
  // then top-k, mirroring the perspective route's final stage.
  ProposalSet bev_proposals(const BevDecodeOutput<S>& aux) const {
    auto dets = decode_detections(aux, decoder_.config().grid,
                                  hc_.proposal_score_thresh);
    std::vector<double> scores;
    std::vector<std::pair<int, int>> tie;
    for (size_t i = 0; i < dets.size(); ++i) {
      scores.push_back(dets[i].score);
      tie.push_back({0, static_cast<int>(i)});
    }
    auto kept = nms_bev(dets, scores, tie, hc_.bev_iou);
    if (static_cast<int>(kept.size()) > hc_.topk_final)
      kept.resize(hc_.topk_final);
    ProposalSet ps;
    for (size_t r = 0; r < kept.size(); ++r) {
      const Box3D& b = dets[kept[r]];
      ViewProposal vp;
      vp.box = b;
      vp.score = b.score;
      vp.view = -1;  // not tied to a camera
      vp.index = kept[r];
      ps.boxes.push_back(vp);
      ps.bev_centers.push_back({b.center[0], b.center[1]});
    }
    return ps;
  }

  HarnessConfig hc_;
  Backbone<S> backbone_;
  PerspectiveHead<S> head_;
  SpatialEncoder<S> encoder_;
  TemporalFuser<S> temporal_;
  BevDecoder<S> decoder_;
  Tensor<S> bev_embed_;
};

}  // namespace bevnet

// Training, evaluation, and ablation drivers around Model.  These own the
// run directory layout: config_effective.ini, train_log.csv, checkpoint.bin
// during training; metrics.json, detections.json, bev_plot.svg during
// evaluation; table.json / table.txt for the four-arm comparison.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "bevnet/checkpoint.hpp"
#include "bevnet/config.hpp"
#include "bevnet/metrics.hpp"
#include "bevnet/model.hpp"
#include "bevnet/optim.hpp"
#include "bevnet/scene.hpp"

namespace bevnet {

inline SceneConfig scene_config_from(const HarnessConfig& hc) {
  SceneConfig sc;
  sc.num_sequences = hc.num_sequences;
  sc.frames_per_sequence = hc.frames_per_sequence;
  sc.frame_interval = hc.frame_interval;
  sc.min_objects = hc.min_objects;
  sc.max_objects = hc.max_objects;
  sc.num_classes = hc.num_classes;
  sc.bev_range = hc.bev_extent;
  sc.image_width = hc.image_width;
  sc.image_height = hc.image_height;
  sc.num_cameras = hc.num_cameras;
  sc.seed = hc.data_seed;
  return sc;
}

// Past support maps plus ego motion for one target frame.  Computed with no
// tape active, so training never backpropagates through time.
template <typename S>
struct HistoryInputs {
  std::vector<Tensor<S>> maps;
  std::vector<SE3> rels;
};

template <typename S>
HistoryInputs<S> gather_history(const Model<S>& model,
                                const std::vector<SceneFrame>& seq,
                                int frame_idx, bool flip) {
  const HarnessConfig& hc = model.harness_config();
  HistoryInputs<S> h;
  if (hc.history <= 0) return h;
  std::vector<double> times;
  times.reserve(seq.size());
  for (const auto& f : seq) times.push_back(f.timestamp);
  auto idx = select_frames(times, seq[frame_idx].timestamp, hc.history,
                           hc.history_interval(), hc.bidirectional);
  for (int j : idx) {
    h.maps.push_back(model.bev_features(seq[j], flip));
    h.rels.push_back(relative_pose(seq[frame_idx], seq[j]));
  }
  return h;
}

struct TrainLogRow {
  int step = 0;
  double lr = 0, total = 0, bev = 0, pers = 0;
  double l2d = 0, l3d = 0, lconf = 0, grad_norm = 0;
};

struct TrainResult {
  int steps_run = 0;
  bool diverged = false;
  std::string error;  // populated when diverged
  double final_total = 0.0;
  bool checkpoint_written = false;
  std::string checkpoint_path;
  std::string csv_path;
  std::vector<TrainLogRow> log;
};

namespace detail {

template <typename S>
double scalar_of(const Tensor<S>& t) {
  return static_cast<double>(t.data()[0]);
}

inline std::string csv_row(const TrainLogRow& r) {
  std::ostringstream os;
  os << r.step << ',' << std::setprecision(10) << r.lr << ',' << r.total << ','
     << r.bev << ',' << r.pers << ',' << r.l2d << ',' << r.l3d << ','
     << r.lconf << ',' << r.grad_norm;
  return os.str();
}

}  // namespace detail

// Full training loop over the train split (sequences before the validation
// tail).  Steps sample frames uniformly; a non-finite loss or gradient stops
// the run with diverged=true, keeping the last periodic checkpoint on disk.
// Pass a dataset to reuse one generation across runs; null regenerates.
template <typename S>
TrainResult train_run(const HarnessConfig& hc, const std::string& out_dir,
                      const std::vector<std::vector<SceneFrame>>* data =
                          nullptr) {
  namespace fs = std::filesystem;
  fs::create_directories(out_dir);
  Arm arm = arm_from_string(hc.arm);

  std::vector<std::vector<SceneFrame>> generated;
  if (data == nullptr) {
    generated = generate(scene_config_from(hc));
    data = &generated;
  }
  int n_train = hc.num_sequences - hc.val_sequences;
  if (n_train <= 0 || n_train > static_cast<int>(data->size()))
    throw std::invalid_argument("train_run: no training sequences");

  save_config_file(hc, out_dir + "/config_effective.ini");

  ParamStore<S> ps;
  Rng init_rng(static_cast<uint64_t>(hc.train_seed));
  Model<S> model(ps, hc, init_rng);

  AdamWConfig oc;
  oc.lr = hc.lr;
  oc.weight_decay = hc.weight_decay;
  oc.clip_norm = hc.grad_clip;
  AdamW<S> opt(oc);

  LrSchedule sched;
  sched.base_lr = hc.lr;
  sched.warmup_steps = hc.warmup_steps;
  sched.decay_factor = hc.decay_factor;
  for (double m : hc.decay_milestones)
    sched.decay_milestones.push_back(static_cast<int>(std::llround(m)));

  Rng order_rng(static_cast<uint64_t>(hc.train_seed) ^ 0x9e3779b97f4a7c15ull);

  TrainResult res;
  res.checkpoint_path = out_dir + "/checkpoint.bin";
  res.csv_path = out_dir + "/train_log.csv";
  std::ofstream csv(res.csv_path);
  if (!csv) throw std::runtime_error("cannot write " + res.csv_path);
  csv << "step,lr,l_total,l_bev,l_pers,l_2d,l_3d,l_conf,grad_norm\n";

  for (int step = 0; step < hc.steps; ++step) {
    int si = order_rng.uniform_int(0, n_train - 1);
    const auto& seq = (*data)[si];
    int fi = order_rng.uniform_int(0, static_cast<int>(seq.size()) - 1);
    bool flip = hc.ida && order_rng.uniform() < 0.5;

    try {
      auto hist = gather_history(model, seq, fi, flip);
      double lr = sched.at(step);
      opt.set_lr(lr);

      TrainLogRow row;
      row.step = step;
      row.lr = lr;
      {
        Tape<S> tape;
        TapeScope<S> scope(tape);
        auto out = model.forward(seq[fi], hist.maps, hist.rels, arm, flip);
        auto ml = model.loss(out, seq[fi], arm);
        row.total = detail::scalar_of(ml.total);
        row.bev = detail::scalar_of(ml.l_bev);
        row.pers = detail::scalar_of(ml.l_pers);
        row.l2d = detail::scalar_of(ml.l2d);
        row.l3d = detail::scalar_of(ml.l3d);
        row.lconf = detail::scalar_of(ml.lconf);
        if (!std::isfinite(row.total))
          throw std::runtime_error("training loss is not finite");
        tape.backward(ml.total);
      }
      opt.step(ps);
      ps.zero_grad();
      row.grad_norm = opt.last_grad_norm();

      csv << detail::csv_row(row) << '\n';
      res.log.push_back(row);
      res.final_total = row.total;
      res.steps_run = step + 1;

      if (hc.checkpoint_every > 0 && (step + 1) % hc.checkpoint_every == 0) {
        save_checkpoint(ps, res.checkpoint_path);
        res.checkpoint_written = true;
      }
    } catch (const std::runtime_error& e) {
      res.diverged = true;
      res.error = e.what();
      break;
    }
  }

  if (!res.diverged) {
    save_checkpoint(ps, res.checkpoint_path);
    res.checkpoint_written = true;
  }
  return res;
}

// Plain-SVG top-down plot: grid border, ground truth in solid green,
// detections in dashed red with a heading tick from the box center.
inline std::string bev_plot_svg(const std::vector<Box3D>& gts,
                                const std::vector<Box3D>& dets,
                                const BEVGridSpec& grid) {
  const double size = 512.0, margin = 8.0;
  auto px = [&](double x) {
    return margin + (x - grid.x_min) / (grid.x_max - grid.x_min) * size;
  };
  auto py = [&](double y) {
    return margin + (grid.y_max - y) / (grid.y_max - grid.y_min) * size;
  };
  std::ostringstream os;
  os << std::fixed << std::setprecision(2);
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\""
     << size + 2 * margin << "\" height=\"" << size + 2 * margin << "\">\n";
  os << "<rect x=\"" << margin << "\" y=\"" << margin << "\" width=\"" << size
     << "\" height=\"" << size
     << "\" fill=\"#fafafa\" stroke=\"#444\" stroke-width=\"1\"/>\n";
  auto poly = [&](const Box3D& b, const char* stroke, const char* dash,
                  double opacity) {
    auto c = bev_corners(b);
    os << "<polygon points=\"";
    for (int i = 0; i < 4; ++i)
      os << px(c[i][0]) << ',' << py(c[i][1]) << (i < 3 ? " " : "");
    os << "\" fill=\"none\" stroke=\"" << stroke << "\" stroke-width=\"1.5\""
       << (dash[0] ? std::string(" stroke-dasharray=\"") + dash + "\"" : "")
       << " stroke-opacity=\"" << opacity << "\"/>\n";
    double hx = b.center[0] + 0.5 * b.l * std::cos(b.yaw);
    double hy = b.center[1] + 0.5 * b.l * std::sin(b.yaw);
    os << "<line x1=\"" << px(b.center[0]) << "\" y1=\"" << py(b.center[1])
       << "\" x2=\"" << px(hx) << "\" y2=\"" << py(hy) << "\" stroke=\""
       << stroke << "\" stroke-width=\"1\" stroke-opacity=\"" << opacity
       << "\"/>\n";
  };
  for (const auto& b : gts) poly(b, "#1b7837", "", 0.9);
  for (const auto& b : dets)
    poly(b, "#c0392b", "4 3", std::clamp(b.score, 0.25, 1.0));
  os << "</svg>\n";
  return os.str();
}

struct EvalRunResult {
  EvalResult metrics;
  int frames = 0;
  std::string metrics_path;
  std::string detections_path;
  std::string plot_path;
};

namespace detail {

inline nlohmann::json box_json(const Box3D& b) {
  return nlohmann::json{{"center", {b.center[0], b.center[1], b.center[2]}},
                        {"lwh", {b.l, b.w, b.h}},
                        {"yaw", b.yaw},
                        {"velocity", {b.velocity[0], b.velocity[1]}},
                        {"class_id", b.class_id},
                        {"score", b.score}};
}

}  // namespace detail

// Inference over one split (validation tail by default) followed by the
// detection metrics.  Writes metrics.json, detections.json, and a BEV plot
// of the first evaluated frame.
template <typename S>
EvalRunResult eval_run(const HarnessConfig& hc,
                       const std::string& checkpoint_path,
                       const std::string& out_dir, bool train_split = false,
                       const std::vector<std::vector<SceneFrame>>* data =
                           nullptr) {
  namespace fs = std::filesystem;
  fs::create_directories(out_dir);
  Arm arm = arm_from_string(hc.arm);

  std::vector<std::vector<SceneFrame>> generated;
  if (data == nullptr) {
    generated = generate(scene_config_from(hc));
    data = &generated;
  }
  int n_train = hc.num_sequences - hc.val_sequences;
  std::vector<int> seq_ids;
  if (train_split)
    for (int i = 0; i < n_train; ++i) seq_ids.push_back(i);
  else
    for (int i = n_train; i < hc.num_sequences; ++i) seq_ids.push_back(i);
  if (seq_ids.empty())
    throw std::invalid_argument("eval_run: selected split is empty");

  ParamStore<S> ps;
  Rng rng(static_cast<uint64_t>(hc.train_seed));
  Model<S> model(ps, hc, rng);
  load_checkpoint(ps, checkpoint_path);

  std::vector<std::vector<Box3D>> dets_per_frame, gts_per_frame;
  nlohmann::json frames_json = nlohmann::json::array();
  for (int sid : seq_ids) {
    const auto& seq = (*data)[sid];
    for (int fi = 0; fi < static_cast<int>(seq.size()); ++fi) {
      auto hist = gather_history(model, seq, fi, false);
      auto out = model.forward(seq[fi], hist.maps, hist.rels, arm, false);
      auto dets = model.detections(out, arm, hc.eval_score_thresh);
      auto gts = model.grid_gts(seq[fi]);

      nlohmann::json fj;
      fj["sequence"] = sid;
      fj["frame"] = fi;
      fj["detections"] = nlohmann::json::array();
      for (const auto& b : dets) fj["detections"].push_back(detail::box_json(b));
      fj["ground_truth"] = nlohmann::json::array();
      for (const auto& b : gts) fj["ground_truth"].push_back(detail::box_json(b));
      frames_json.push_back(std::move(fj));

      dets_per_frame.push_back(std::move(dets));
      gts_per_frame.push_back(std::move(gts));
    }
  }

  EvalConfig ec;
  ec.dist_thresholds = hc.dist_thresholds;
  ec.num_classes = hc.num_classes;
  EvalRunResult res;
  res.metrics = evaluate_detections(dets_per_frame, gts_per_frame, ec);
  res.frames = static_cast<int>(dets_per_frame.size());

  res.metrics_path = out_dir + "/metrics.json";
  std::ofstream(res.metrics_path) << metrics_json(res.metrics, ec) << '\n';
  res.detections_path = out_dir + "/detections.json";
  std::ofstream(res.detections_path) << frames_json.dump(2) << '\n';
  res.plot_path = out_dir + "/bev_plot.svg";
  std::ofstream(res.plot_path) << bev_plot_svg(
      gts_per_frame.front(), dets_per_frame.front(),
      model.decoder_config().grid);
  return res;
}

struct AblationRow {
  std::string arm;
  TrainResult train;
  EvalRunResult eval;
  bool evaluated = false;
};

struct AblationResult {
  std::vector<AblationRow> rows;
  std::string table_json_path;
  std::string table_txt_path;
};

// Trains and evaluates all four supervision arms on one shared dataset and
// writes a comparison table.  Arms that diverge before their first
// checkpoint are reported but not evaluated.
template <typename S>
AblationResult ablate_run(const HarnessConfig& base,
                          const std::string& out_dir) {
  namespace fs = std::filesystem;
  fs::create_directories(out_dir);
  auto data = generate(scene_config_from(base));
  // With no held-out sequences the comparison falls back to the training
  // split; it stays a fair comparison because every arm shares it.
  bool on_train = base.val_sequences <= 0;

  const char* arms[] = {"perspective_only", "bev_only", "perspective_and_bev",
                        "bev_and_bev"};
  AblationResult res;
  for (const char* name : arms) {
    HarnessConfig hc = base;
    hc.arm = name;
    std::string dir = out_dir + "/" + name;
    AblationRow row;
    row.arm = name;
    row.train = train_run<S>(hc, dir, &data);
    if (row.train.checkpoint_written) {
      row.eval = eval_run<S>(hc, row.train.checkpoint_path, dir + "/eval",
                             on_train, &data);
      row.evaluated = true;
    }
    res.rows.push_back(std::move(row));
  }

  nlohmann::json table = nlohmann::json::array();
  std::ostringstream txt;
  txt << "eval split: " << (on_train ? "train" : "val") << '\n';
  txt << std::left << std::setw(22) << "arm" << std::right << std::setw(10)
      << "steps" << std::setw(12) << "final_loss" << std::setw(10) << "mAP"
      << std::setw(10) << "NDS" << '\n';
  for (const auto& row : res.rows) {
    nlohmann::json r;
    r["arm"] = row.arm;
    r["split"] = on_train ? "train" : "val";
    r["steps_run"] = row.train.steps_run;
    r["diverged"] = row.train.diverged;
    r["final_loss"] = row.train.final_total;
    if (row.evaluated) {
      r["mean_ap"] = row.eval.metrics.mean_ap;
      r["nds"] = row.eval.metrics.nds;
    } else {
      r["mean_ap"] = nullptr;
      r["nds"] = nullptr;
    }
    table.push_back(r);

    txt << std::left << std::setw(22) << row.arm << std::right << std::setw(10)
        << row.train.steps_run;
    txt << std::setw(12) << std::fixed << std::setprecision(4)
        << row.train.final_total;
    if (row.evaluated)
      txt << std::setw(10) << std::setprecision(4) << row.eval.metrics.mean_ap
          << std::setw(10) << std::setprecision(4) << row.eval.metrics.nds;
    else
      txt << std::setw(10) << "-" << std::setw(10)
          << (row.train.diverged ? "diverged" : "-");
    txt << '\n';
  }
  res.table_json_path = out_dir + "/table.json";
  std::ofstream(res.table_json_path) << table.dump(2) << '\n';
  res.table_txt_path = out_dir + "/table.txt";
  std::ofstream(res.table_txt_path) << txt.str();
  return res;
}

}  // namespace bevnet

// Harness configuration: a flat INI file (sections, key = value, # or ;
// comments).  Parsing applies overrides onto built-in defaults and rejects
// unknown keys; serializing writes every field, so the emitted file is a
// complete, re-loadable record of a run.
#pragma once

#include <cctype>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace bevnet {

struct HarnessConfig {
  // [data]
  int num_sequences = 3;
  int frames_per_sequence = 8;
  double frame_interval = 0.5;  // seconds between frames
  int min_objects = 3;
  int max_objects = 6;
  int image_width = 128;
  int image_height = 128;
  int num_cameras = 2;
  int data_seed = 1;
  int val_sequences = 1;  // trailing sequences held out for eval

  // [model]
  int base_width = 8;
  int channels = 32;
  int num_classes = 3;
  double bev_extent = 25.0;  // grid spans [-extent, extent] in x and y
  int bev_h = 16;
  int bev_w = 16;
  std::vector<double> z_anchors = {-1.0, 1.0, 3.0};
  int encoder_layers = 1;
  int cross_points = 2;
  int self_points = 2;
  int history = 2;
  bool bidirectional = false;
  int decoder_layers = 2;
  int num_queries = 24;
  int num_heads = 4;
  int decoder_points = 2;
  int ffn_hidden = 64;
  double f_ref = 64.0;

  // [proposals]
  double pers_iou = 0.75;
  double bev_iou = 0.3;
  int topk_per_view = 100;
  int topk_final = 100;
  double proposal_score_thresh = 0.3;

  // [train]
  int steps = 200;
  double lr = 4e-4;
  double weight_decay = 0.01;
  int warmup_steps = 2000;
  std::vector<double> decay_milestones;  // steps at which lr multiplies
  double decay_factor = 0.1;
  double grad_clip = 35.0;
  double lambda_bev = 1.0;
  double lambda_pers = 1.0;
  double lambda_cls = 2.0;
  double lambda_l1 = 0.25;
  int train_seed = 1;
  int checkpoint_every = 50;

  // [ablation]
  std::string arm = "perspective_and_bev";
  bool ida = false;            // random horizontal flip of all views
  bool long_interval = false;  // history sampled at 2 s instead of normal

  // [eval]
  double eval_score_thresh = 0.3;
  std::vector<double> dist_thresholds = {0.5, 1.0, 2.0, 4.0};

  // 2 s history stride in long mode, the frame interval otherwise.
  double history_interval() const {
    return long_interval ? 2.0 : frame_interval;
  }
};

namespace detail {

inline std::string trim(const std::string& s) {
  size_t a = 0, b = s.size();
  while (a < b && std::isspace(static_cast<unsigned char>(s[a]))) ++a;
  while (b > a && std::isspace(static_cast<unsigned char>(s[b - 1]))) --b;
  return s.substr(a, b - a);
}

inline std::string fmt_double(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

inline std::string fmt_list(const std::vector<double>& v) {
  std::string out;
  for (size_t i = 0; i < v.size(); ++i) {
    if (i) out += ", ";
    out += fmt_double(v[i]);
  }
  return out;
}

inline std::vector<double> parse_list(const std::string& s,
                                      const std::string& key) {
  std::vector<double> out;
  std::string item;
  std::istringstream is(s);
  while (std::getline(is, item, ',')) {
    item = trim(item);
    if (item.empty()) continue;
    try {
      size_t pos = 0;
      out.push_back(std::stod(item, &pos));
      if (pos != item.size()) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      throw std::invalid_argument("config: bad number '" + item + "' in " +
                                  key);
    }
  }
  return out;
}

}  // namespace detail

// "section.key" -> value.  Throws on lines that are neither a section
// header, a comment, nor a key = value pair.
inline std::map<std::string, std::string> parse_ini(const std::string& text) {
  std::map<std::string, std::string> kv;
  std::istringstream is(text);
  std::string line, section;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    std::string t = detail::trim(line);
    if (t.empty() || t[0] == '#' || t[0] == ';') continue;
    if (t.front() == '[') {
      if (t.back() != ']')
        throw std::invalid_argument("config line " + std::to_string(lineno) +
                                    ": unterminated section header");
      section = detail::trim(t.substr(1, t.size() - 2));
      if (section.empty())
        throw std::invalid_argument("config line " + std::to_string(lineno) +
                                    ": empty section name");
      continue;
    }
    size_t eq = t.find('=');
    if (eq == std::string::npos)
      throw std::invalid_argument("config line " + std::to_string(lineno) +
                                  ": expected key = value");
    std::string key = detail::trim(t.substr(0, eq));
    std::string val = detail::trim(t.substr(eq + 1));
    if (key.empty())
      throw std::invalid_argument("config line " + std::to_string(lineno) +
                                  ": empty key");
    kv[section.empty() ? key : section + "." + key] = val;
  }
  return kv;
}

inline HarnessConfig config_from_ini(const std::string& text) {
  auto kv = parse_ini(text);
  HarnessConfig c;
  auto take = [&](const std::string& key) {
    auto it = kv.find(key);
    if (it == kv.end()) return std::string();
    std::string v = it->second;
    kv.erase(it);
    return v;
  };
  auto geti = [&](const std::string& key, int& dst) {
    std::string v = take(key);
    if (v.empty()) return;
    try {
      size_t pos = 0;
      dst = std::stoi(v, &pos);
      if (pos != v.size()) throw std::invalid_argument(v);
    } catch (const std::exception&) {
      throw std::invalid_argument("config: bad integer '" + v + "' for " +
                                  key);
    }
  };
  auto getd = [&](const std::string& key, double& dst) {
    std::string v = take(key);
    if (v.empty()) return;
    try {
      size_t pos = 0;
      dst = std::stod(v, &pos);
      if (pos != v.size()) throw std::invalid_argument(v);
    } catch (const std::exception&) {
      throw std::invalid_argument("config: bad number '" + v + "' for " + key);
    }
  };
  auto getb = [&](const std::string& key, bool& dst) {
    std::string v = take(key);
    if (v.empty()) return;
    if (v == "true" || v == "1")
      dst = true;
    else if (v == "false" || v == "0")
      dst = false;
    else
      throw std::invalid_argument("config: bad boolean '" + v + "' for " +
                                  key);
  };
  auto getl = [&](const std::string& key, std::vector<double>& dst) {
    std::string v = take(key);
    if (v.empty()) return;
    dst = detail::parse_list(v, key);
  };
  auto gets = [&](const std::string& key, std::string& dst) {
    std::string v = take(key);
    if (!v.empty()) dst = v;
  };

  geti("data.num_sequences", c.num_sequences);
  geti("data.frames_per_sequence", c.frames_per_sequence);
  getd("data.frame_interval", c.frame_interval);
  geti("data.min_objects", c.min_objects);
  geti("data.max_objects", c.max_objects);
  geti("data.image_width", c.image_width);
  geti("data.image_height", c.image_height);
  geti("data.num_cameras", c.num_cameras);
  geti("data.seed", c.data_seed);
  geti("data.val_sequences", c.val_sequences);

  geti("model.base_width", c.base_width);
  geti("model.channels", c.channels);
  geti("model.num_classes", c.num_classes);
  getd("model.bev_extent", c.bev_extent);
  geti("model.bev_h", c.bev_h);
  geti("model.bev_w", c.bev_w);
  getl("model.z_anchors", c.z_anchors);
  geti("model.encoder_layers", c.encoder_layers);
  geti("model.cross_points", c.cross_points);
  geti("model.self_points", c.self_points);
  geti("model.history", c.history);
  getb("model.bidirectional", c.bidirectional);
  geti("model.decoder_layers", c.decoder_layers);
  geti("model.num_queries", c.num_queries);
  geti("model.num_heads", c.num_heads);
  geti("model.decoder_points", c.decoder_points);
  geti("model.ffn_hidden", c.ffn_hidden);
  getd("model.f_ref", c.f_ref);

  getd("proposals.pers_iou", c.pers_iou);
  getd("proposals.bev_iou", c.bev_iou);
  geti("proposals.topk_per_view", c.topk_per_view);
  geti("proposals.topk_final", c.topk_final);
  getd("proposals.score_thresh", c.proposal_score_thresh);

  geti("train.steps", c.steps);
  getd("train.lr", c.lr);
  getd("train.weight_decay", c.weight_decay);
  geti("train.warmup_steps", c.warmup_steps);
  getl("train.decay_milestones", c.decay_milestones);
  getd("train.decay_factor", c.decay_factor);
  getd("train.grad_clip", c.grad_clip);
  getd("train.lambda_bev", c.lambda_bev);
  getd("train.lambda_pers", c.lambda_pers);
  getd("train.lambda_cls", c.lambda_cls);
  getd("train.lambda_l1", c.lambda_l1);
  geti("train.seed", c.train_seed);
  geti("train.checkpoint_every", c.checkpoint_every);

  gets("ablation.arm", c.arm);
  getb("ablation.ida", c.ida);
  getb("ablation.long_interval", c.long_interval);

  getd("eval.score_thresh", c.eval_score_thresh);
  getl("eval.dist_thresholds", c.dist_thresholds);

  if (!kv.empty())
    throw std::invalid_argument("config: unknown key '" + kv.begin()->first +
                                "'");
  if (c.val_sequences < 0 || c.val_sequences >= c.num_sequences)
    throw std::invalid_argument(
        "config: val_sequences must be in [0, num_sequences)");
  return c;
}

inline std::string config_to_ini(const HarnessConfig& c) {
  using detail::fmt_double;
  using detail::fmt_list;
  std::ostringstream os;
  os << "[data]\n"
     << "num_sequences = " << c.num_sequences << "\n"
     << "frames_per_sequence = " << c.frames_per_sequence << "\n"
     << "frame_interval = " << fmt_double(c.frame_interval) << "\n"
     << "min_objects = " << c.min_objects << "\n"
     << "max_objects = " << c.max_objects << "\n"
     << "image_width = " << c.image_width << "\n"
     << "image_height = " << c.image_height << "\n"
     << "num_cameras = " << c.num_cameras << "\n"
     << "seed = " << c.data_seed << "\n"
     << "val_sequences = " << c.val_sequences << "\n\n";
  os << "[model]\n"
     << "base_width = " << c.base_width << "\n"
     << "channels = " << c.channels << "\n"
     << "num_classes = " << c.num_classes << "\n"
     << "bev_extent = " << fmt_double(c.bev_extent) << "\n"
     << "bev_h = " << c.bev_h << "\n"
     << "bev_w = " << c.bev_w << "\n"
     << "z_anchors = " << fmt_list(c.z_anchors) << "\n"
     << "encoder_layers = " << c.encoder_layers << "\n"
     << "cross_points = " << c.cross_points << "\n"
     << "self_points = " << c.self_points << "\n"
     << "history = " << c.history << "\n"
     << "bidirectional = " << (c.bidirectional ? "true" : "false") << "\n"
     << "decoder_layers = " << c.decoder_layers << "\n"
     << "num_queries = " << c.num_queries << "\n"
     << "num_heads = " << c.num_heads << "\n"
     << "decoder_points = " << c.decoder_points << "\n"
     << "ffn_hidden = " << c.ffn_hidden << "\n"
     << "f_ref = " << fmt_double(c.f_ref) << "\n\n";
  os << "[proposals]\n"
     << "pers_iou = " << fmt_double(c.pers_iou) << "\n"
     << "bev_iou = " << fmt_double(c.bev_iou) << "\n"
     << "topk_per_view = " << c.topk_per_view << "\n"
     << "topk_final = " << c.topk_final << "\n"
     << "score_thresh = " << fmt_double(c.proposal_score_thresh) << "\n\n";
  os << "[train]\n"
     << "steps = " << c.steps << "\n"
     << "lr = " << fmt_double(c.lr) << "\n"
     << "weight_decay = " << fmt_double(c.weight_decay) << "\n"
     << "warmup_steps = " << c.warmup_steps << "\n"
     << "decay_milestones = " << fmt_list(c.decay_milestones) << "\n"
     << "decay_factor = " << fmt_double(c.decay_factor) << "\n"
     << "grad_clip = " << fmt_double(c.grad_clip) << "\n"
     << "lambda_bev = " << fmt_double(c.lambda_bev) << "\n"
     << "lambda_pers = " << fmt_double(c.lambda_pers) << "\n"
     << "lambda_cls = " << fmt_double(c.lambda_cls) << "\n"
     << "lambda_l1 = " << fmt_double(c.lambda_l1) << "\n"
     << "seed = " << c.train_seed << "\n"
     << "checkpoint_every = " << c.checkpoint_every << "\n\n";
  os << "[ablation]\n"
     << "arm = " << c.arm << "\n"
     << "ida = " << (c.ida ? "true" : "false") << "\n"
     << "long_interval = " << (c.long_interval ? "true" : "false") << "\n\n";
  os << "[eval]\n"
     << "score_thresh = " << fmt_double(c.eval_score_thresh) << "\n"
     << "dist_thresholds = " << fmt_list(c.dist_thresholds) << "\n";
  return os.str();
}

inline HarnessConfig load_config_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot open config: " + path);
  std::ostringstream buf;
  buf << f.rdbuf();
  return config_from_ini(buf.str());
}

inline void save_config_file(const HarnessConfig& c, const std::string& path) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot write config: " + path);
  f << config_to_ini(c);
}

}  // namespace bevnet

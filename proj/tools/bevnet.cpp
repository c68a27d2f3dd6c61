// Command line front end: dataset generation, training, evaluation, and the
// four-arm ablation.  Exit codes: 0 success, 2 configuration error,
// 3 training diverged, 4 I/O or internal failure.
#include <exception>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "bevnet/config.hpp"
#include "bevnet/model.hpp"
#include "bevnet/scene.hpp"
#include "bevnet/trainer.hpp"

namespace {

struct CommonOpts {
  std::string config;
  std::string out;
  std::string data;
  std::string arm;
  int seed = -1;
  int steps = -1;
  bool ida = false;
  bool long_interval = false;
};

void add_common(CLI::App* cmd, CommonOpts& o, bool with_overrides) {
  cmd->add_option("--config", o.config, "INI config file (defaults apply)");
  cmd->add_option("--out", o.out, "output directory")->required();
  if (with_overrides) {
    cmd->add_option("--arm", o.arm,
                    "supervision arm: perspective_only | bev_only | "
                    "perspective_and_bev | bev_and_bev");
    cmd->add_option("--seed", o.seed, "training seed override");
    cmd->add_option("--steps", o.steps, "training steps override");
    cmd->add_flag("--ida", o.ida, "enable flip augmentation");
    cmd->add_flag("--long-interval", o.long_interval,
                  "widen the history frame spacing");
  }
}

bevnet::HarnessConfig resolve_config(const CommonOpts& o) {
  bevnet::HarnessConfig hc;
  if (!o.config.empty()) hc = bevnet::load_config_file(o.config);
  if (!o.arm.empty()) hc.arm = o.arm;
  if (o.seed >= 0) hc.train_seed = o.seed;
  if (o.steps >= 0) hc.steps = o.steps;
  if (o.ida) hc.ida = true;
  if (o.long_interval) hc.long_interval = true;
  bevnet::arm_from_string(hc.arm);  // reject unknown arms before any work
  return hc;
}

// Loads a serialized dataset when --data was given; checks it matches the
// sequence count the config splits on.
bool maybe_load_data(const CommonOpts& o, const bevnet::HarnessConfig& hc,
                     std::vector<std::vector<bevnet::SceneFrame>>& data) {
  if (o.data.empty()) return false;
  data = bevnet::deserialize(o.data);
  if (static_cast<int>(data.size()) != hc.num_sequences)
    throw std::invalid_argument(
        "dataset has " + std::to_string(data.size()) +
        " sequences but the config expects " +
        std::to_string(hc.num_sequences));
  return true;
}

template <typename F>
int guarded(F&& body) {
  try {
    return body();
  } catch (const std::invalid_argument& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const std::filesystem::filesystem_error& e) {
    std::cerr << "io error: " << e.what() << '\n';
    return 4;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 4;
  }
}

int cmd_generate(const CommonOpts& o) {
  return guarded([&] {
    auto hc = resolve_config(o);
    std::filesystem::create_directories(o.out);
    auto data = bevnet::generate(bevnet::scene_config_from(hc));
    std::string manifest = o.out + "/manifest.jsonl";
    bevnet::serialize(data, manifest);
    int frames = 0;
    for (const auto& s : data) frames += static_cast<int>(s.size());
    std::cout << "wrote " << data.size() << " sequences (" << frames
              << " frames) to " << manifest << '\n';
    return 0;
  });
}

int cmd_train(const CommonOpts& o) {
  return guarded([&] {
    auto hc = resolve_config(o);
    std::vector<std::vector<bevnet::SceneFrame>> data;
    const auto* dp = maybe_load_data(o, hc, data) ? &data : nullptr;
    auto res = bevnet::train_run<double>(hc, o.out, dp);
    if (res.diverged) {
      std::cerr << "training diverged at step " << res.steps_run << ": "
                << res.error << '\n';
      if (res.checkpoint_written)
        std::cerr << "last checkpoint kept at " << res.checkpoint_path << '\n';
      return 3;
    }
    std::cout << "arm=" << hc.arm << " steps=" << res.steps_run
              << " final_loss=" << res.final_total << '\n';
    std::cout << "checkpoint: " << res.checkpoint_path << '\n';
    std::cout << "log: " << res.csv_path << '\n';
    return 0;
  });
}

int cmd_eval(const CommonOpts& o, const std::string& checkpoint,
             const std::string& split) {
  return guarded([&] {
    if (split != "train" && split != "val")
      throw std::invalid_argument("--split must be train or val");
    auto hc = resolve_config(o);
    std::vector<std::vector<bevnet::SceneFrame>> data;
    const auto* dp = maybe_load_data(o, hc, data) ? &data : nullptr;
    auto res = bevnet::eval_run<double>(hc, checkpoint, o.out,
                                        split == "train", dp);
    std::cout << "arm=" << hc.arm << " split=" << split
              << " frames=" << res.frames << " mAP=" << res.metrics.mean_ap
              << " NDS=" << res.metrics.nds << '\n';
    std::cout << "report: " << res.metrics_path << '\n';
    return 0;
  });
}

int cmd_ablate(const CommonOpts& o) {
  return guarded([&] {
    auto hc = resolve_config(o);
    auto res = bevnet::ablate_run<double>(hc, o.out);
    std::ifstream table(res.table_txt_path);
    std::cout << table.rdbuf();
    std::cout << "table: " << res.table_json_path << '\n';
    return 0;
  });
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"two-stage BEV 3D detection harness"};
  app.require_subcommand(1);

  CommonOpts gen_o, train_o, eval_o, ablate_o;
  std::string checkpoint, split = "val";

  auto* gen = app.add_subcommand("generate", "synthesize and store a dataset");
  add_common(gen, gen_o, false);

  auto* train = app.add_subcommand("train", "train one supervision arm");
  add_common(train, train_o, true);
  train->add_option("--data", train_o.data, "dataset manifest to reuse");

  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint");
  add_common(eval, eval_o, true);
  eval->add_option("--data", eval_o.data, "dataset manifest to reuse");
  eval->add_option("--checkpoint", checkpoint, "trained parameters")
      ->required();
  eval->add_option("--split", split, "train or val (default val)");

  auto* ablate = app.add_subcommand("ablate",
                                    "train and evaluate all four arms");
  add_common(ablate, ablate_o, true);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  if (gen->parsed()) return cmd_generate(gen_o);
  if (train->parsed()) return cmd_train(train_o);
  if (eval->parsed()) return cmd_eval(eval_o, checkpoint, split);
  if (ablate->parsed()) return cmd_ablate(ablate_o);
  return 2;
}

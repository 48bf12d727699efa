// planepose: two-view relative pose from plane correspondences.
//
// Thin argument layer over the C API: every flag maps onto a flat config
// key, a --config file supplies defaults, flags win on conflict, and all
// validation lives behind pp_run_*. Exit codes: 0 success, 1 bad options,
// 2 runtime failure.
#include <cstdio>
#include <deque>
#include <string>
#include <utility>
#include <vector>

#include "CLI11.hpp"
#include "planepose/planepose.h"

namespace {

struct Bound {
  const char* key;
  CLI::Option* opt;
  std::string value;
  bool is_flag;
};

struct SubCmd {
  CLI::App* app = nullptr;
  pp_status (*runner)(const pp_config*) = nullptr;
  std::string config_file;
  std::deque<Bound> bound;

  void option(const char* key, const char* flag, const char* help) {
    bound.push_back({key, nullptr, "", false});
    bound.back().opt = app->add_option(flag, bound.back().value, help);
  }

  void flag(const char* key, const char* flag, const char* help) {
    bound.push_back({key, nullptr, "", true});
    bound.back().opt = app->add_flag(flag, help);
  }

  int run() const {
    pp_config* cfg = pp_config_new();
    pp_status st = PP_OK;
    if (!config_file.empty())
      st = pp_config_load_file(cfg, config_file.c_str());
    for (const Bound& b : bound) {
      if (st != PP_OK) break;
      if (b.opt->count() == 0) continue;
      st = pp_config_set(cfg, b.key, b.is_flag ? "1" : b.value.c_str());
    }
    if (st == PP_OK) st = runner(cfg);
    if (st != PP_OK) std::fprintf(stderr, "error: %s\n", pp_last_error());
    pp_config_free(cfg);
    return st;
  }
};

SubCmd& add_cmd(std::deque<SubCmd>& cmds, CLI::App& root, const char* name,
                const char* desc, pp_status (*runner)(const pp_config*)) {
  cmds.push_back({});
  SubCmd& c = cmds.back();
  c.app = root.add_subcommand(name, desc);
  c.runner = runner;
  c.app->add_option("-c,--config", c.config_file,
                    "flat key = value file; flags override its entries");
  return c;
}

void add_eval_common(SubCmd& c) {
  c.option("seed", "--seed", "run seed (default 0)");
  c.option("init_rot_sigma_deg", "--init-rot-sigma-deg",
           "per-axis rotation perturbation of the GT pose, degrees "
           "(default 10)");
  c.option("init_trans_sigma", "--init-trans-sigma",
           "per-axis translation perturbation, meters (default 0.3)");
  c.option("match_threshold", "--match-threshold",
           "plane matching threshold (default 0.2)");
  c.option("sinkhorn_iters", "--sinkhorn-iters",
           "Sinkhorn iterations (default 100)");
  c.option("points_per_plane", "--points-per-plane",
           "sampled point matches per plane region (default 8)");
  c.option("point_sigma", "--point-sigma",
           "noise on sampled point matches, normalized coords (default 0)");
  c.option("threads", "--threads",
           "worker threads; 0 uses PLANEPOSE_THREADS or 1 (default 0)");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"two-view relative pose from plane correspondences"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(pp_version()));
  std::deque<SubCmd> cmds;

  SubCmd& gen = add_cmd(cmds, app, "gen",
                        "generate a synthetic scene dataset", pp_run_gen);
  gen.option("out", "--out", "output dataset path (JSON)");
  gen.option("seed", "--seed", "dataset seed (required)");
  gen.option("scenes", "--scenes", "scene count (default 100)");
  gen.option("min_planes", "--min-planes", "planes per scene, lower bound");
  gen.option("max_planes", "--max-planes", "planes per scene, upper bound");
  gen.option("rot_range", "--rot-range",
             "per-axis rotation-vector range, radians (default 0.5)");
  gen.option("trans_range", "--trans-range",
             "per-axis translation range, meters (default 1)");
  gen.option("sigma_offset", "--sigma-offset",
             "plane offset noise, meters (default 0)");
  gen.option("sigma_normal_deg", "--sigma-normal-deg",
             "plane normal noise, degrees (default 0)");
  gen.option("descriptor_dim", "--descriptor-dim",
             "appearance descriptor size (default 256)");
  gen.option("descriptor_noise", "--descriptor-noise",
             "descriptor noise before renormalization (default 0)");
  gen.option("outlier_rate", "--outlier-rate",
             "distractor / swapped-descriptor rate (default 0)");

  SubCmd& train = add_cmd(cmds, app, "train",
                          "train the pose networks on a dataset",
                          pp_run_train);
  train.option("data", "--data", "training dataset path");
  train.option("out", "--out", "checkpoint output path");
  train.option("log", "--log", "CSV log path (default <out>.log.csv)");
  train.option("seed", "--seed", "training seed (required)");
  train.option("resume", "--resume", "continue from a checkpoint");
  train.option("aim_steps", "--aim-steps",
               "pose auto-encoder steps (default 60000)");
  train.option("refine_steps", "--refine-steps",
               "refinement steps (default 20000)");
  train.option("aim_batch", "--aim-batch", "auto-encoder batch size");
  train.option("refine_batch", "--refine-batch",
               "refinement batch size (even)");
  train.option("aim_lr", "--aim-lr", "auto-encoder learning rate");
  train.option("refine_lr", "--refine-lr", "refinement learning rate");
  train.option("lr_decay", "--lr-decay",
               "refinement learning-rate decay factor (default 0.1)");
  train.option("decay_at", "--decay-at",
               "refinement decay point as a fraction of steps (default 0.7)");
  train.option("pose_range", "--pose-range",
               "auto-encoder pose sampling range (default 2.5)");
  train.option("init_rot_sigma_deg", "--init-rot-sigma-deg",
               "initial-pose rotation noise, degrees (default 10)");
  train.option("init_trans_sigma", "--init-trans-sigma",
               "initial-pose translation noise, meters (default 0.3)");
  train.option("match_threshold", "--match-threshold",
               "plane matching threshold (default 0.2)");
  train.option("sinkhorn_iters", "--sinkhorn-iters",
               "Sinkhorn iterations (default 100)");
  train.option("val_every", "--val-every",
               "validation interval in steps (default 500)");
  train.option("val_poses", "--val-poses",
               "held-out poses per validation (default 200)");
  train.option("val_scenes", "--val-scenes",
               "dataset scenes held out for validation (default 32)");

  SubCmd& est = add_cmd(cmds, app, "estimate",
                        "estimate relative poses over a dataset",
                        pp_run_estimate);
  est.option("data", "--data", "evaluation dataset path");
  est.option("ckpt", "--ckpt", "trained checkpoint (required for nope-sac)");
  est.option("out", "--out",
             "report base path; writes <out>.csv/.json/_scenes.csv");
  est.option("method", "--method",
             "nope-sac | homo-ref | nume-ref1 | nume-ref2 | init-only");
  est.option("fusion", "--fusion", "soft | avg | min-cost | max-score");
  add_eval_common(est);
  est.flag("force_uniform_scores", "--force-uniform-scores",
           "test hook: replace hypothesis scores with uniform weights");
  est.flag("use_gt_matches", "--use-gt-matches",
           "test hook: bypass the matcher with GT correspondences");

  SubCmd& bl = add_cmd(cmds, app, "baseline",
                       "run the non-learned reference methods", pp_run_baseline);
  bl.option("data", "--data", "evaluation dataset path");
  bl.option("out", "--out",
            "report base path; writes <out>.csv/.json/_scenes.csv");
  bl.option("ckpt", "--ckpt",
            "optional checkpoint; reuses its trained matcher bin score");
  bl.option("methods", "--methods",
            "comma list of init-only,homo-ref,nume-ref1,nume-ref2 "
            "(default all)");
  add_eval_common(bl);

  SubCmd& sw = add_cmd(cmds, app, "sweep",
                       "matching-threshold or plane-noise grid", pp_run_sweep);
  sw.option("data", "--data", "evaluation dataset path");
  sw.option("ckpt", "--ckpt", "trained checkpoint (required for nope-sac)");
  sw.option("out", "--out", "report base path; writes <out>.csv/.json");
  sw.option("mode", "--mode",
            "threshold (0.2/0.1/0.01/0.001) or noise (clean + three "
            "plane-noise cells)");
  sw.option("method", "--method", "method under sweep (default nope-sac)");
  sw.option("fusion", "--fusion", "soft | avg | min-cost | max-score");
  add_eval_common(sw);

  SubCmd& gc = add_cmd(cmds, app, "gradcheck",
                       "finite-difference checks of every learnable block",
                       pp_run_gradcheck);
  gc.option("corrupt", "--corrupt",
            "test hook: bias the named block's analytic gradient so the "
            "suite must fail");

  SubCmd& rep = add_cmd(cmds, app, "report",
                        "merge JSON reports into one table", pp_run_report);
  rep.option("in", "--in", "comma-separated report JSON paths");
  rep.option("out", "--out", "merged base path; writes <out>.csv/.json");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  for (const SubCmd& c : cmds)
    if (c.app->parsed()) return c.run();
  return 1;
}

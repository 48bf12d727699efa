#pragma once

#include <cstdint>
#include <map>
#include <ostream>
#include <string>
#include <vector>

#include "planepose/eval.hpp"
#include "planepose/hypo.hpp"
#include "planepose/synth.hpp"
#include "planepose/train.hpp"

// The engine behind every CLI subcommand. Each run_* consumes a flat
// key/value option map (config file and flags already merged, later
// assignments winning), checks it against its own key table and writes its
// artifacts. Every option problem throws InvalidArgument; exceptions after
// validation are runtime failures.
namespace planepose::pipeline {

using Options = std::map<std::string, std::string>;

// "key = value" lines; '#' starts a comment, blank lines are skipped.
// Duplicate keys are rejected so a file cannot silently shadow itself.
Options parse_options_text(const std::string& text);
Options parse_options_file(const std::string& path);

// PLANEPOSE_THREADS when set to a positive integer, else 1.
int default_threads();

// --- shared evaluation engine (estimate, baseline, sweep) ---

struct EvalConfig {
  // nope-sac | homo-ref | nume-ref1 | nume-ref2 | init-only
  std::string method = "nope-sac";
  hypo::Fusion fusion = hypo::Fusion::kSoft;
  double match_threshold = 0.2;
  int sinkhorn_iters = 100;
  double init_rot_sigma_deg = 10.0;  // per-axis perturbation of the GT pose
  double init_trans_sigma = 0.3;
  std::uint64_t seed = 0;
  int points_per_plane = 8;  // homography / reprojection point sampling
  double point_sigma = 0.0;
  bool force_uniform_scores = false;  // test hook: Soft collapses to Avg
  bool use_gt_matches = false;        // test hook: bypass the matcher
  // extra plane noise applied on the fly (noise sweep over a clean set)
  double noise_offset = 0.0;
  double noise_normal_deg = 0.0;
  std::uint64_t noise_stream = 0;
};

struct SceneRecord {
  double rot_init = 0, trans_init = 0;  // initial-pose errors
  double rot = 0, trans = 0;            // final-pose errors
  int matches = 0;
  double cost_r_init = 0, cost_t_init = 0;  // mean one-plane costs
  double cost_r_final = 0, cost_t_final = 0;
};

struct EvalOutcome {
  eval::ReportRow row;  // pose summary + plane AP, method = supplied label
  match::Prf prf;       // matcher micro-average over all scenes
  std::vector<SceneRecord> scenes;
};

// Full pass over a dataset: per scene perturb the GT pose into an initial
// estimate, match planes, run the selected method and collect metrics.
// model may be null for methods that need no checkpoint; the matcher then
// uses the untrained default bin score.
EvalOutcome evaluate_method(const train::Model* model,
                            const synth::Dataset& ds, const EvalConfig& cfg,
                            int threads, const std::string& label);

// --- finite-difference gradient suites (gradcheck, acceptance) ---

struct GradSuite {
  std::string name;
  double max_rel = 0;
  int probes = 0;
  bool pass = false;
};

// Central differences on sampled coordinates of every learnable block, 10
// fresh instances per block. corrupt names a block whose analytic gradient
// is biased before comparison, as a negative control (it must fail).
std::vector<GradSuite> gradient_suites(const std::string& corrupt = "");

// --- subcommand entry points ---

void run_gen(const Options& o, std::ostream& out);
void run_train(const Options& o, std::ostream& out);
void run_estimate(const Options& o, std::ostream& out);
void run_baseline(const Options& o, std::ostream& out);
void run_sweep(const Options& o, std::ostream& out);
void run_gradcheck(const Options& o, std::ostream& out);
void run_report(const Options& o, std::ostream& out);

}  // namespace planepose::pipeline

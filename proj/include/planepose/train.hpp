#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "planepose/hypo.hpp"
#include "planepose/matcher.hpp"
#include "planepose/synth.hpp"

namespace planepose::train {

// Everything inference needs: the network weights plus the matcher's
// learned dustbin score. The default bin sits below typical same-plane
// scores so an untrained matcher still commits to matches.
struct Model {
  hypo::NopeSacParams params;
  double bin = -2.0;
};

Model make_model(Rng rng);

void append_model(nn::Checkpoint& ck, const Model& m);
Model read_model(const nn::Checkpoint& ck);

struct TrainConfig {
  // Stage A: pose auto-encoder on uniformly sampled poses.
  int aim_steps = 20000;
  int aim_batch = 16;
  double aim_lr = 1e-4;
  double pose_range = 2.5;

  // Stage B: hypothesis, scoring and matching nets on scenes. Each step
  // draws refine_batch/2 scenes and evaluates every scene on both the
  // predicted and the ground-truth correspondence set.
  int refine_steps = 20000;
  int refine_batch = 16;
  double refine_lr = 1e-4;
  double lr_decay = 0.1;
  double decay_at = 0.7;  // fraction of refine_steps
  double init_rot_sigma_deg = 10.0;
  double init_trans_sigma = 0.3;
  double match_threshold = 0.2;
  int sinkhorn_iters = 100;

  // Validation cadence; the last val_scenes dataset scenes are held out.
  int val_every = 500;
  int val_poses = 200;
  int val_scenes = 32;

  std::uint64_t seed = 1;
  std::string log_path;         // per-step CSV when nonempty
  std::string checkpoint_path;  // final checkpoint when nonempty
  std::string resume_path;      // continue from a train checkpoint

  void validate() const;  // throws InvalidArgument
};

// Deterministic per-step batches, shared by the loop and by tests.
std::vector<geom::Pose> aim_batch(const TrainConfig& c, int step);

struct RefineStep {
  std::vector<hypo::RefineItem> items;  // 2 per scene: predicted, GT corrs
  double match_loss = 0;                // mean over the step's scenes
  double match_dbin = 0;
};
RefineStep refine_batch(const Model& m, const synth::Dataset& ds,
                        const TrainConfig& c, int step);

// Runs both stages (skipping any already covered by the resume
// checkpoint), writes log/checkpoint artifacts, returns the final model.
Model train(const synth::Dataset& ds, const TrainConfig& c);

}  // namespace planepose::train

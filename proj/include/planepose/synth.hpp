#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "planepose/geom.hpp"
#include "planepose/rng.hpp"
#include "planepose/tinynn.hpp"

namespace planepose::synth {

struct SceneConfig {
  int min_planes = 4;
  int max_planes = 6;
  double rot_range = 0.5;         // rad, per rotation-vector axis
  double trans_range = 1.0;       // m, per translation axis
  double sigma_offset = 0.0;      // m
  double sigma_normal_deg = 0.0;
  int descriptor_dim = 256;
  double descriptor_noise = 0.0;
  double outlier_rate = 0.0;
  std::uint64_t seed = 0;
};

// One detected plane in one view: parameters, appearance descriptor, a
// convex polygon footprint (3D points on the plane, view coordinates) and
// the world-plane id (-1 for distractors).
struct Observation {
  geom::Plane plane;
  nn::Vector descriptor;
  std::vector<geom::Vec3> footprint;
  int plane_id = -1;
};

struct ScenePair {
  geom::Pose pose;  // frame 1 -> frame 2
  std::vector<geom::Plane> gt_planes;
  std::array<std::vector<Observation>, 2> views;
  std::vector<std::pair<int, int>> correspondences;  // (view-1 idx, view-2 idx)
};

// Observation indices of each view that appear in no correspondence.
std::vector<int> unmatched_indices(const ScenePair& scene, int view);

// Per-axis uniform rotation vector and translation in +-range.
geom::Pose sample_pose(Rng& rng, double rot_range, double trans_range);
inline geom::Pose sample_pose(Rng& rng, double range) {
  return sample_pose(rng, range, range);
}

// Noise-free scene: K planes with pairwise-distinct normals, shared
// per-plane descriptors, view-2 observations by exact warp.
ScenePair sample_scene(Rng& rng, const SceneConfig& cfg);

// Gaussian offset noise, normal rotation by a Gaussian-magnitude angle
// about a random axis, descriptor noise; normals and descriptors
// renormalized. Applied independently to both views' observations.
ScenePair perturb(const ScenePair& scene, double sigma_offset,
                  double sigma_normal_deg, double desc_noise, Rng& rng);

// Adds ceil(rate*K) distractor observations per view and cyclically swaps
// the descriptors of round(rate*K) view-2 observations so their appearance
// votes for the wrong plane.
ScenePair inject_outliers(const ScenePair& scene, double rate, Rng& rng);

struct Dataset {
  int version = 1;
  SceneConfig config;
  std::vector<ScenePair> scenes;
};

// count scenes from independent per-scene streams of cfg.seed, with the
// configured noise and outliers applied.
Dataset generate_dataset(const SceneConfig& cfg, int count);

void write_dataset(const Dataset& ds, const std::string& path);
Dataset read_dataset(const std::string& path);

}  // namespace planepose::synth

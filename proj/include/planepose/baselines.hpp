#pragma once

#include <Eigen/Core>
#include <utility>
#include <vector>

#include "planepose/geom.hpp"
#include "planepose/rng.hpp"
#include "planepose/synth.hpp"

namespace planepose::base {

using PlanePair = std::pair<geom::Plane, geom::Plane>;

// Matched point pairs in normalized image coordinates for one plane region.
struct PointCorr {
  std::vector<Eigen::Vector2d> pts1;
  std::vector<Eigen::Vector2d> pts2;
};
using PointCorrSet = std::vector<PointCorr>;

// Stand-in for feature matches: samples points on the view-1 footprint of
// each matched plane, maps them through the scene pose and projects into
// both views, optionally adding Gaussian noise in normalized coordinates.
PointCorrSet make_point_corrs(const synth::ScenePair& scene,
                              const std::vector<std::pair<int, int>>& pairs,
                              Rng& rng, int per_plane = 8, double sigma = 0);

// DLT with isotropic normalization. ||H||_F = 1 and H(2,2) >= 0 when
// nonzero. Throws DegenerateConfiguration below rank 8.
Eigen::Matrix3d fit_homography(const std::vector<Eigen::Vector2d>& pts1,
                               const std::vector<Eigen::Vector2d>& pts2);

struct HomoCandidate {
  geom::UnitQuaternion rotation;
  geom::Vec3 t_dir;   // translation up to the plane-distance scale
  geom::Vec3 normal;  // view-1 plane normal, unit length
};

// SVD decomposition of a plane-induced homography, input sign and scale
// free. Keeps candidates that reconstruct H and whose normal faces the
// camera (normal . ref > 0); at most four survive.
std::vector<HomoCandidate> decompose_homography(
    const Eigen::Matrix3d& H, const geom::Vec3& ref = geom::Vec3(0, 0, 1));

// Distance between the warped view-1 plane and the view-2 plane, stacked
// as (normal, offset) 4-vectors.
double d_par(const PlanePair& corr, const geom::Pose& pose);

// Decomposes a homography per plane pair, rescales every candidate to the
// initial translation norm, and picks the candidate with the smallest
// total d_par over all correspondences. Returns init when no candidate
// survives.
geom::Pose homo_ref(const std::vector<PlanePair>& corrs,
                    const geom::Pose& init, const PointCorrSet& pts);

struct NumeRefOptions {
  bool use_pix = false;                  // adds point reprojection residuals
  const PointCorrSet* points = nullptr;  // one entry per corr when use_pix
  double lambda_cam = 1e-5;              // rotation anchor weight
  double huber_delta = 0.1;              // plane-parameter units
  int max_iters = 100;
  double init_damping = 1e-3;
  double step_tol = 1e-10;
  double cost_tol = 1e-12;
};

struct NumeRefResult {
  geom::Pose pose;
  double initial_cost = 0;
  double final_cost = 0;
  int iterations = 0;
  bool converged = false;
  bool flagged = false;  // no correspondences, iteration cap, or singular
                         // normal equations
};

// Levenberg-Marquardt over (rotation increment, translation) minimizing
//   sum_m huber(d_par_m) [+ sum squared point reprojections when use_pix]
//   + lambda_cam * geodesic(R, R_init)^2,
// with analytic plane Jacobians and central-difference point Jacobians.
// Only cost-decreasing steps are accepted.
NumeRefResult nume_ref(const std::vector<PlanePair>& corrs,
                       const geom::Pose& init,
                       const NumeRefOptions& opts = {});

}  // namespace planepose::base

#pragma once

#include <Eigen/Core>
#include <array>
#include <string>
#include <utility>
#include <vector>

#include "planepose/geom.hpp"
#include "planepose/matcher.hpp"

namespace planepose::eval {

struct PoseErrorSummary {
  double rot_median = 0, rot_mean = 0;
  double rot_le30 = 0, rot_le15 = 0, rot_le10 = 0;  // fractions in [0, 1]
  double trans_median = 0, trans_mean = 0;
  double trans_le1 = 0, trans_le05 = 0, trans_le02 = 0;
};

// (geodesic rotation degrees, Euclidean translation meters)
std::pair<double, double> pose_error(const geom::Pose& pred,
                                     const geom::Pose& gt);

// Medians take the lower middle element for even counts. EmptyInput on an
// empty list.
PoseErrorSummary summarize(const std::vector<std::pair<double, double>>& errs);

using Polygon2d = std::vector<Eigen::Vector2d>;

// Intersection over union of two convex CCW polygons, by Sutherland-Hodgman
// clipping and shoelace areas. DegeneratePolygon when either input area is
// below 1e-12.
double polygon_iou(const Polygon2d& a, const Polygon2d& b);

// One detected plane: parameters and a convex planar footprint, both in the
// same frame, plus a confidence used for AP ranking and merging.
struct PlaneDet {
  geom::Plane plane;
  std::vector<geom::Vec3> footprint;
  double confidence = 0.5;
};

enum class ApMode { kAll, kNoOffset, kNoNormal };

// Detection-style average precision over per-scene lists. Predictions are
// processed in descending confidence; a prediction is a true positive when
// some unmatched ground-truth plane in its scene has projected-footprint
// IoU >= 0.5, normal error <= alpha_deg (ignored under kNoNormal) and
// offset gap <= beta_m (ignored under kNoOffset); the qualifying plane with
// the highest IoU is consumed. AP integrates the interpolated
// precision-recall curve.
double plane_ap(const std::vector<std::vector<PlaneDet>>& preds,
                const std::vector<std::vector<PlaneDet>>& gts,
                double alpha_deg, double beta_m, ApMode mode);

// Carries frame-1 detections into frame 2 and merges matched pairs by
// confidence-weighted parameter average (normal renormalized, sign aligned
// first). The frame-2 member keeps its footprint; the match score becomes
// the merged confidence. Unmatched detections from both views are kept.
std::vector<PlaneDet> merge_scene(const std::vector<PlaneDet>& view1,
                                  const std::vector<PlaneDet>& view2,
                                  const std::vector<match::Match>& matches,
                                  const geom::Pose& pose);

// Micro-averaged precision/recall/f1: counts pooled over all scenes.
match::Prf aggregate_prf(
    const std::vector<std::vector<match::Match>>& pred,
    const std::vector<std::vector<std::pair<int, int>>>& gt);

// The three (alpha_deg, beta_m) AP condition pairs reported everywhere.
inline constexpr std::array<std::pair<double, double>, 3> kApConditions{
    {{30.0, 1.0}, {15.0, 0.5}, {5.0, 0.2}}};

struct ReportRow {
  std::string method;
  PoseErrorSummary pose;
  // kAll, kNoOffset, kNoNormal blocks, each over kApConditions
  std::array<double, 9> ap{};
  bool has_ap = false;
};

struct Report {
  std::vector<ReportRow> rows;
};

// Stable column order shared by both formats.
const std::vector<std::string>& report_columns();

void write_report_csv(const Report& r, const std::string& path);
void write_report_json(const Report& r, const std::string& path);

}  // namespace planepose::eval

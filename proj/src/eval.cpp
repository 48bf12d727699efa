#include "planepose/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <numeric>

#include "json.hpp"
#include "planepose/errors.hpp"

namespace planepose::eval {

namespace {

double lower_median(std::vector<double> v) {
  size_t k = (v.size() - 1) / 2;
  std::nth_element(v.begin(), v.begin() + k, v.end());
  return v[k];
}

double shoelace(const Polygon2d& p) {
  double a = 0;
  for (size_t i = 0; i < p.size(); ++i) {
    const auto& u = p[i];
    const auto& v = p[(i + 1) % p.size()];
    a += u.x() * v.y() - v.x() * u.y();
  }
  return 0.5 * a;
}

// clip a convex subject polygon to the left side of each CCW edge of clip
Polygon2d clip_convex(const Polygon2d& subject, const Polygon2d& clip) {
  Polygon2d poly = subject;
  for (size_t e = 0; e < clip.size() && !poly.empty(); ++e) {
    const Eigen::Vector2d& a = clip[e];
    const Eigen::Vector2d& b = clip[(e + 1) % clip.size()];
    Eigen::Vector2d dir = b - a;
    auto side = [&](const Eigen::Vector2d& p) {
      return dir.x() * (p.y() - a.y()) - dir.y() * (p.x() - a.x());
    };
    Polygon2d next;
    for (size_t i = 0; i < poly.size(); ++i) {
      const Eigen::Vector2d& p = poly[i];
      const Eigen::Vector2d& q = poly[(i + 1) % poly.size()];
      double sp = side(p), sq = side(q);
      if (sp >= 0) next.push_back(p);
      if ((sp > 0 && sq < 0) || (sp < 0 && sq > 0)) {
        double t = sp / (sp - sq);
        next.push_back(p + t * (q - p));
      }
    }
    poly = std::move(next);
  }
  return poly;
}

// IoU of projected footprints; 0 when either projection is unusable
double footprint_iou(const PlaneDet& a, const PlaneDet& b) {
  auto project = [](const PlaneDet& d, Polygon2d& out) {
    if (d.footprint.size() < 3) return false;
    out.clear();
    for (const auto& v : d.footprint) {
      if (v.z() < 1e-9) return false;
      out.emplace_back(v.x() / v.z(), v.y() / v.z());
    }
    return true;
  };
  Polygon2d pa, pb;
  if (!project(a, pa) || !project(b, pb)) return 0;
  if (shoelace(pa) < 0) std::reverse(pa.begin(), pa.end());
  if (shoelace(pb) < 0) std::reverse(pb.begin(), pb.end());
  if (shoelace(pa) < 1e-12 || shoelace(pb) < 1e-12) return 0;
  return polygon_iou(pa, pb);
}

double normal_error_deg(const geom::Plane& a, const geom::Plane& b) {
  double c = std::clamp(a.normal.dot(b.normal), -1.0, 1.0);
  return std::acos(c) * 180.0 / M_PI;
}

std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace

std::pair<double, double> pose_error(const geom::Pose& pred,
                                     const geom::Pose& gt) {
  return {geom::rotation_geodesic_deg(pred.rotation, gt.rotation),
          (pred.translation - gt.translation).norm()};
}

PoseErrorSummary summarize(
    const std::vector<std::pair<double, double>>& errs) {
  if (errs.empty()) throw EmptyInput("summarize: no errors");
  std::vector<double> rot, trans;
  rot.reserve(errs.size());
  trans.reserve(errs.size());
  for (const auto& [r, t] : errs) {
    rot.push_back(r);
    trans.push_back(t);
  }
  const double n = static_cast<double>(errs.size());
  auto frac_le = [&](const std::vector<double>& v, double thr) {
    return std::count_if(v.begin(), v.end(),
                         [&](double x) { return x <= thr; }) /
           n;
  };
  PoseErrorSummary s;
  s.rot_median = lower_median(rot);
  s.rot_mean = std::accumulate(rot.begin(), rot.end(), 0.0) / n;
  s.rot_le30 = frac_le(rot, 30.0);
  s.rot_le15 = frac_le(rot, 15.0);
  s.rot_le10 = frac_le(rot, 10.0);
  s.trans_median = lower_median(trans);
  s.trans_mean = std::accumulate(trans.begin(), trans.end(), 0.0) / n;
  s.trans_le1 = frac_le(trans, 1.0);
  s.trans_le05 = frac_le(trans, 0.5);
  s.trans_le02 = frac_le(trans, 0.2);
  return s;
}

double polygon_iou(const Polygon2d& a, const Polygon2d& b) {
  if (a.size() < 3 || b.size() < 3)
    throw DegeneratePolygon("polygon_iou: fewer than 3 vertices");
  for (const auto& p : a)
    if (!p.allFinite()) throw NonFiniteInput("polygon_iou");
  for (const auto& p : b)
    if (!p.allFinite()) throw NonFiniteInput("polygon_iou");
  double area_a = shoelace(a);
  double area_b = shoelace(b);
  if (area_a < 1e-12 || area_b < 1e-12)
    throw DegeneratePolygon("polygon_iou: degenerate or clockwise polygon");
  double inter = std::max(0.0, shoelace(clip_convex(a, b)));
  double uni = area_a + area_b - inter;
  return inter / uni;
}

double plane_ap(const std::vector<std::vector<PlaneDet>>& preds,
                const std::vector<std::vector<PlaneDet>>& gts,
                double alpha_deg, double beta_m, ApMode mode) {
  if (preds.size() != gts.size())
    throw ShapeMismatch("plane_ap: scene count mismatch");
  size_t total_gt = 0;
  for (const auto& g : gts) total_gt += g.size();
  if (total_gt == 0) return 0;

  struct Cand {
    double conf;
    int scene;
    int idx;
  };
  std::vector<Cand> order;
  for (size_t s = 0; s < preds.size(); ++s)
    for (size_t i = 0; i < preds[s].size(); ++i) {
      if (!std::isfinite(preds[s][i].confidence))
        throw NonFiniteInput("plane_ap: confidence");
      order.push_back({preds[s][i].confidence, static_cast<int>(s),
                       static_cast<int>(i)});
    }
  std::stable_sort(order.begin(), order.end(), [](const Cand& a, const Cand& b) {
    return a.conf > b.conf;  // ties keep input order
  });

  std::vector<std::vector<char>> used(gts.size());
  for (size_t s = 0; s < gts.size(); ++s) used[s].assign(gts[s].size(), 0);

  // precision/recall points in rank order, then the interpolated area
  double tp = 0, fp = 0;
  std::vector<std::pair<double, double>> pr;  // (recall, precision)
  pr.reserve(order.size());
  for (const auto& c : order) {
    const PlaneDet& p = preds[c.scene][c.idx];
    int best = -1;
    double best_iou = 0;
    for (size_t g = 0; g < gts[c.scene].size(); ++g) {
      if (used[c.scene][g]) continue;
      const PlaneDet& q = gts[c.scene][g];
      if (mode != ApMode::kNoNormal &&
          normal_error_deg(p.plane, q.plane) > alpha_deg)
        continue;
      if (mode != ApMode::kNoOffset &&
          std::abs(p.plane.offset - q.plane.offset) > beta_m)
        continue;
      double iou = footprint_iou(p, q);
      if (iou >= 0.5 && iou > best_iou) {
        best_iou = iou;
        best = static_cast<int>(g);
      }
    }
    if (best >= 0) {
      used[c.scene][best] = 1;
      tp += 1;
    } else {
      fp += 1;
    }
    pr.emplace_back(tp / static_cast<double>(total_gt), tp / (tp + fp));
  }

  double ap = 0, best_prec = 0;
  for (size_t k = pr.size(); k-- > 0;) {
    best_prec = std::max(best_prec, pr[k].second);
    double below = k == 0 ? 0.0 : pr[k - 1].first;
    ap += (pr[k].first - below) * best_prec;
  }
  return ap;
}

std::vector<PlaneDet> merge_scene(const std::vector<PlaneDet>& view1,
                                  const std::vector<PlaneDet>& view2,
                                  const std::vector<match::Match>& matches,
                                  const geom::Pose& pose) {
  std::vector<char> used1(view1.size(), 0), used2(view2.size(), 0);
  auto carry = [&](const PlaneDet& d) {
    PlaneDet out = d;
    out.plane = geom::warp_plane_signed(d.plane, pose).canonicalized();
    for (auto& v : out.footprint) v = geom::apply(pose, v);
    return out;
  };

  std::vector<PlaneDet> out;
  out.reserve(view1.size() + view2.size());
  for (const auto& m : matches) {
    if (m.i < 0 || m.i >= static_cast<int>(view1.size()) || m.j < 0 ||
        m.j >= static_cast<int>(view2.size()))
      throw IndexOutOfRange("merge_scene: match index");
    used1[m.i] = used2[m.j] = 1;
    PlaneDet a = carry(view1[m.i]);
    PlaneDet merged = view2[m.j];
    geom::Plane pa = a.plane, pb = merged.plane;
    if (pa.normal.dot(pb.normal) < 0) {  // same plane, opposite orientation
      pa.normal = -pa.normal;
      pa.offset = -pa.offset;
    }
    double w1 = std::max(view1[m.i].confidence, 0.0);
    double w2 = std::max(merged.confidence, 0.0);
    if (w1 + w2 < 1e-12) w1 = w2 = 1;
    geom::Vec3 n = w1 * pa.normal + w2 * pb.normal;
    if (n.norm() > 1e-9) {  // near-cancelling normals keep the view-2 plane
      merged.plane.normal = n.normalized();
      merged.plane.offset = (w1 * pa.offset + w2 * pb.offset) / (w1 + w2);
      merged.plane = merged.plane.canonicalized();
    }
    merged.confidence = m.score;
    out.push_back(std::move(merged));
  }
  for (size_t i = 0; i < view1.size(); ++i)
    if (!used1[i]) out.push_back(carry(view1[i]));
  for (size_t j = 0; j < view2.size(); ++j)
    if (!used2[j]) out.push_back(view2[j]);
  return out;
}

match::Prf aggregate_prf(
    const std::vector<std::vector<match::Match>>& pred,
    const std::vector<std::vector<std::pair<int, int>>>& gt) {
  if (pred.size() != gt.size())
    throw ShapeMismatch("aggregate_prf: scene count mismatch");
  double tp = 0, npred = 0, ngt = 0;
  for (size_t s = 0; s < pred.size(); ++s) {
    npred += static_cast<double>(pred[s].size());
    ngt += static_cast<double>(gt[s].size());
    for (const auto& m : pred[s])
      for (const auto& [i, j] : gt[s])
        if (m.i == i && m.j == j) {
          tp += 1;
          break;
        }
  }
  match::Prf out;
  out.precision = npred > 0 ? tp / npred : 0;
  out.recall = ngt > 0 ? tp / ngt : 0;
  out.f1 = (out.precision + out.recall) > 0
               ? 2 * out.precision * out.recall /
                     (out.precision + out.recall)
               : 0;
  return out;
}

const std::vector<std::string>& report_columns() {
  static const std::vector<std::string> cols = [] {
    std::vector<std::string> c{"method",  "rot_med", "rot_mean", "rot_le30",
                               "rot_le15", "rot_le10", "tr_med",  "tr_mean",
                               "tr_le1",  "tr_le05", "tr_le02"};
    const char* tags[3] = {"30_1", "15_05", "5_02"};
    for (const char* mode : {"all", "nooffset", "nonormal"})
      for (const char* tag : tags)
        c.push_back(std::string("ap_") + mode + "_" + tag);
    return c;
  }();
  return cols;
}

namespace {

std::vector<double> row_numbers(const ReportRow& r) {
  std::vector<double> v{r.pose.rot_median, r.pose.rot_mean, r.pose.rot_le30,
                        r.pose.rot_le15,   r.pose.rot_le10, r.pose.trans_median,
                        r.pose.trans_mean, r.pose.trans_le1, r.pose.trans_le05,
                        r.pose.trans_le02};
  for (double a : r.ap) v.push_back(a);
  return v;
}

}  // namespace

void write_report_csv(const Report& r, const std::string& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot open report file: " + path);
  const auto& cols = report_columns();
  for (size_t c = 0; c < cols.size(); ++c)
    out << cols[c] << (c + 1 < cols.size() ? "," : "\n");
  for (const auto& row : r.rows) {
    out << row.method;
    auto nums = row_numbers(row);
    for (size_t k = 0; k < nums.size(); ++k) {
      bool ap_cell = k >= 10;
      out << ',';
      if (ap_cell && !row.has_ap)
        out << "";  // AP not computed for this method
      else
        out << fmt_double(nums[k]);
    }
    out << '\n';
  }
  if (!out) throw IoError("failed writing report file: " + path);
}

void write_report_json(const Report& r, const std::string& path) {
  nlohmann::ordered_json doc;
  doc["columns"] = report_columns();
  doc["rows"] = nlohmann::ordered_json::array();
  for (const auto& row : r.rows) {
    nlohmann::ordered_json jr;
    jr["method"] = row.method;
    const auto& cols = report_columns();
    auto nums = row_numbers(row);
    for (size_t k = 0; k < nums.size(); ++k) {
      bool ap_cell = k >= 10;
      if (ap_cell && !row.has_ap)
        jr[cols[k + 1]] = nullptr;
      else
        jr[cols[k + 1]] = nums[k];
    }
    doc["rows"].push_back(std::move(jr));
  }
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot open report file: " + path);
  out << doc.dump(2) << '\n';
  if (!out) throw IoError("failed writing report file: " + path);
}

}  // namespace planepose::eval

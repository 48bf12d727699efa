#include "planepose/baselines.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <limits>

#include "planepose/errors.hpp"

namespace planepose::base {

namespace {

using geom::Mat3;
using geom::Vec3;
using Matrix6d = Eigen::Matrix<double, 6, 6>;
using Vector6d = Eigen::Matrix<double, 6, 1>;

// isotropic normalization: centroid to origin, mean distance sqrt(2)
Mat3 normalizing_transform(const std::vector<Eigen::Vector2d>& pts) {
  Eigen::Vector2d c = Eigen::Vector2d::Zero();
  for (const auto& p : pts) c += p;
  c /= static_cast<double>(pts.size());
  double mean_dist = 0;
  for (const auto& p : pts) mean_dist += (p - c).norm();
  mean_dist /= static_cast<double>(pts.size());
  if (mean_dist < 1e-12)
    throw DegenerateConfiguration("homography fit: points coincide");
  double s = std::sqrt(2.0) / mean_dist;
  Mat3 t = Mat3::Identity();
  t(0, 0) = s;
  t(1, 1) = s;
  t(0, 2) = -s * c.x();
  t(1, 2) = -s * c.y();
  return t;
}

double huber(double r, double delta) {
  return r <= delta ? 0.5 * r * r : delta * (r - 0.5 * delta);
}

// relative rotation R * R0^T as angle (radians) and world-frame unit axis;
// the axis is zero at the identity and at half-turns
struct CamAnchor {
  double theta = 0;
  Vec3 axis = Vec3::Zero();
};

CamAnchor cam_anchor(const geom::UnitQuaternion& q,
                     const geom::UnitQuaternion& q0) {
  Mat3 rel = q.to_matrix() * q0.to_matrix().transpose();
  double c = std::clamp((rel.trace() - 1.0) / 2.0, -1.0, 1.0);
  CamAnchor out;
  out.theta = std::acos(c);
  Vec3 ax(rel(2, 1) - rel(1, 2), rel(0, 2) - rel(2, 0), rel(1, 0) - rel(0, 1));
  double s = ax.norm();  // 2 sin(theta)
  if (s > 1e-12) out.axis = ax / s;
  return out;
}

geom::Pose apply_step(const geom::Pose& pose, const Vector6d& delta) {
  geom::Pose out;
  out.rotation = geom::UnitQuaternion::from_rotation_vector(delta.head<3>()) *
                 pose.rotation;
  out.translation = pose.translation + delta.tail<3>();
  return out;
}

struct LinSys {
  Matrix6d jtj = Matrix6d::Zero();
  Vector6d g = Vector6d::Zero();
  double cost = 0;
};

// cost at `pose` (and, when build, its Gauss-Newton normal equations over
// the increment (omega, u) with exp(hat(omega)) R, t + u)
LinSys linearize(const std::vector<PlanePair>& corrs,
                 const NumeRefOptions& opts, const geom::Pose& pose,
                 const geom::UnitQuaternion& q0, bool build) {
  LinSys sys;
  for (size_t k = 0; k < corrs.size(); ++k) {
    // plane-parameter residual v = (n' - n2, d' - d2), robustified
    geom::Plane w = geom::warp_plane_signed(corrs[k].first, pose);
    Eigen::Vector4d v;
    v << w.normal - corrs[k].second.normal, w.offset - corrs[k].second.offset;
    double r = v.norm();
    sys.cost += huber(r, opts.huber_delta);
    if (build && r > 1e-14) {
      Eigen::Matrix<double, 4, 6> j = Eigen::Matrix<double, 4, 6>::Zero();
      j.block<3, 3>(0, 0) = -geom::skew(w.normal);
      j.block<1, 3>(3, 0) = w.normal.cross(pose.translation).transpose();
      j.block<1, 3>(3, 3) = w.normal.transpose();
      double wgt = r <= opts.huber_delta ? 1.0 : opts.huber_delta / r;
      sys.jtj += wgt * j.transpose() * j;
      sys.g += wgt * j.transpose() * v;
    }

    if (!opts.use_pix) continue;
    const PointCorr& pc = (*opts.points)[k];
    // back-project through the observed view-1 plane, reproject into view 2
    const geom::Plane& p1 = corrs[k].first;
    auto residual = [&](const geom::Pose& at, const Eigen::Vector2d& x1,
                        const Eigen::Vector2d& x2, Eigen::Vector2d& e) {
      Vec3 m(x1.x(), x1.y(), 1.0);
      double denom = p1.normal.dot(m);
      if (std::abs(denom) < 1e-9) return false;
      Vec3 y = geom::apply(at, (p1.offset / denom) * m);
      if (y.z() < 1e-9) return false;
      e = x2 - y.head<2>() / y.z();
      return true;
    };
    for (size_t i = 0; i < pc.pts1.size(); ++i) {
      Eigen::Vector2d e;
      if (!residual(pose, pc.pts1[i], pc.pts2[i], e)) continue;
      sys.cost += e.squaredNorm();
      if (!build) continue;
      Eigen::Matrix<double, 2, 6> j;
      const double h = 1e-7;
      bool ok = true;
      for (int c = 0; c < 6 && ok; ++c) {
        Vector6d d = Vector6d::Zero();
        d(c) = h;
        Eigen::Vector2d ep, em;
        ok = residual(apply_step(pose, d), pc.pts1[i], pc.pts2[i], ep) &&
             residual(apply_step(pose, -d), pc.pts1[i], pc.pts2[i], em);
        if (ok) j.col(c) = (ep - em) / (2.0 * h);
      }
      if (!ok) continue;
      sys.jtj += 2.0 * j.transpose() * j;
      sys.g += 2.0 * j.transpose() * e;
    }
  }

  if (opts.lambda_cam > 0) {
    CamAnchor a = cam_anchor(pose.rotation, q0);
    sys.cost += opts.lambda_cam * a.theta * a.theta;
    if (build && a.axis.squaredNorm() > 0) {
      sys.g.head<3>() += 2.0 * opts.lambda_cam * a.theta * a.axis;
      sys.jtj.topLeftCorner<3, 3>() +=
          2.0 * opts.lambda_cam * a.axis * a.axis.transpose();
    }
  }
  return sys;
}

}  // namespace

PointCorrSet make_point_corrs(const synth::ScenePair& scene,
                              const std::vector<std::pair<int, int>>& pairs,
                              Rng& rng, int per_plane, double sigma) {
  if (per_plane <= 0) throw InvalidArgument("make_point_corrs: per_plane");
  if (sigma < 0) throw InvalidArgument("make_point_corrs: sigma");
  PointCorrSet out;
  out.reserve(pairs.size());
  for (const auto& [i, j] : pairs) {
    if (i < 0 || i >= static_cast<int>(scene.views[0].size()) || j < 0 ||
        j >= static_cast<int>(scene.views[1].size()))
      throw IndexOutOfRange("make_point_corrs: pair index");
    const auto& fp = scene.views[0][i].footprint;
    if (fp.size() < 3)
      throw DegenerateConfiguration("make_point_corrs: footprint too small");
    PointCorr pc;
    pc.pts1.reserve(per_plane);
    pc.pts2.reserve(per_plane);
    for (int s = 0; s < per_plane; ++s) {
      Vec3 x = Vec3::Zero(), y = Vec3::Zero();
      bool ok = false;
      for (int attempt = 0; attempt < 64 && !ok; ++attempt) {
        // Exp(1) weights normalize to a flat Dirichlet over the vertices,
        // so the sample is uniform-ish over the convex footprint
        x.setZero();
        double wsum = 0;
        for (const auto& v : fp) {
          double w = -std::log(1.0 - rng.uniform());
          x += w * v;
          wsum += w;
        }
        x /= wsum;
        y = geom::apply(scene.pose, x);
        ok = x.z() > 1e-6 && y.z() > 1e-6;
      }
      if (!ok)
        throw DegenerateConfiguration("make_point_corrs: region behind camera");
      pc.pts1.emplace_back(x.x() / x.z() + sigma * rng.normal(),
                           x.y() / x.z() + sigma * rng.normal());
      pc.pts2.emplace_back(y.x() / y.z() + sigma * rng.normal(),
                           y.y() / y.z() + sigma * rng.normal());
    }
    out.push_back(std::move(pc));
  }
  return out;
}

Eigen::Matrix3d fit_homography(const std::vector<Eigen::Vector2d>& pts1,
                               const std::vector<Eigen::Vector2d>& pts2) {
  if (pts1.size() != pts2.size())
    throw ShapeMismatch("homography fit: point count mismatch");
  const int n = static_cast<int>(pts1.size());
  if (n < 4)
    throw DegenerateConfiguration("homography fit: needs at least 4 points");
  for (int k = 0; k < n; ++k)
    if (!pts1[k].allFinite() || !pts2[k].allFinite())
      throw NonFiniteInput("homography fit: non-finite point");

  Mat3 t1 = normalizing_transform(pts1);
  Mat3 t2 = normalizing_transform(pts2);
  Eigen::MatrixXd a(2 * n, 9);
  for (int k = 0; k < n; ++k) {
    Vec3 p = t1 * Vec3(pts1[k].x(), pts1[k].y(), 1.0);
    Vec3 q = t2 * Vec3(pts2[k].x(), pts2[k].y(), 1.0);
    double x = p.x(), y = p.y(), u = q.x(), v = q.y();
    a.row(2 * k) << x, y, 1, 0, 0, 0, -u * x, -u * y, -u;
    a.row(2 * k + 1) << 0, 0, 0, x, y, 1, -v * x, -v * y, -v;
  }
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(a, Eigen::ComputeFullV);
  const auto& sv = svd.singularValues();
  if (sv(7) <= 1e-9 * sv(0))
    throw DegenerateConfiguration("homography fit: rank-deficient system");
  Eigen::Matrix<double, 9, 1> h = svd.matrixV().col(8);
  Mat3 hn;
  hn << h(0), h(1), h(2), h(3), h(4), h(5), h(6), h(7), h(8);
  Mat3 out = t2.inverse() * hn * t1;
  out /= out.norm();
  if (out(2, 2) < 0) out = -out;
  return out;
}

std::vector<HomoCandidate> decompose_homography(const Eigen::Matrix3d& H,
                                                const geom::Vec3& ref) {
  if (!H.allFinite()) throw NonFiniteInput("homography decomposition");
  Eigen::JacobiSVD<Mat3> svd0(H);
  Vec3 sv = svd0.singularValues();
  if (sv(2) <= 1e-12 * sv(0) || sv(1) <= 1e-300)
    throw DegenerateConfiguration("homography decomposition: singular input");

  std::vector<HomoCandidate> out;
  auto push = [&](const Mat3& hn, const Mat3& r, Vec3 t, Vec3 n) {
    double nn = n.norm();
    if (nn < 1e-9) return;
    t *= nn;
    n /= nn;
    if (n.dot(ref) <= 0) return;
    if (r.determinant() < 0.5) return;
    if ((hn - (r + t * n.transpose())).norm() > 1e-6 * hn.norm()) return;
    for (const auto& c : out)  // drop duplicates from repeated singular values
      if (geom::rotation_geodesic_deg(c.rotation,
                                      geom::UnitQuaternion::from_matrix(r)) <
              1e-5 &&
          (c.t_dir - t).norm() < 1e-9)
        return;
    if (out.size() >= 4) return;
    out.push_back({geom::UnitQuaternion::from_matrix(r), t, n});
  };

  // H carries an arbitrary sign; a camera-facing plane is only consistent
  // with the sign that keeps the mapped reference ray in front
  Mat3 hn0 = H / sv(1);
  double zref = (hn0 * ref).z();
  std::array<double, 2> signs = zref < 0 ? std::array<double, 2>{-1.0, 1.0}
                                         : std::array<double, 2>{1.0, -1.0};

  for (double sgn : signs) {
    Mat3 hn = sgn * hn0;
    if (sv(0) - sv(2) <= 1e-9 * sv(1)) {
      // conformal: rotation only, translation zero, normal unconstrained
      Eigen::JacobiSVD<Mat3> s2(hn, Eigen::ComputeFullU | Eigen::ComputeFullV);
      Mat3 v = s2.matrixV();
      if ((s2.matrixU() * v.transpose()).determinant() < 0) v.col(2) *= -1;
      push(hn, s2.matrixU() * v.transpose(), Vec3::Zero(), ref.normalized());
    } else {
      Eigen::SelfAdjointEigenSolver<Mat3> es(hn.transpose() * hn);
      double s1 = es.eigenvalues()(2);  // ascending; middle is 1
      double s3 = es.eigenvalues()(0);
      Vec3 v1 = es.eigenvectors().col(2);
      Vec3 v2 = es.eigenvectors().col(1);
      Vec3 v3 = v1.cross(v2);
      double den = std::sqrt(std::max(s1 - s3, 1e-300));
      double ca = std::sqrt(std::max(1.0 - s3, 0.0)) / den;
      double cb = std::sqrt(std::max(s1 - 1.0, 0.0)) / den;
      for (double e : {1.0, -1.0}) {
        Vec3 u = ca * v1 + e * cb * v3;
        Mat3 um, wm;
        um.col(0) = v2;
        um.col(1) = u;
        um.col(2) = v2.cross(u);
        wm.col(0) = hn * v2;
        wm.col(1) = hn * u;
        wm.col(2) = wm.col(0).cross(wm.col(1));
        Mat3 r = wm * um.transpose();
        Vec3 n = v2.cross(u);
        Vec3 t = (hn - r) * n;
        push(hn, r, t, n);
        push(hn, r, -t, -n);
      }
    }
    if (!out.empty()) break;  // the opposite sign is a fallback only
  }
  return out;
}

double d_par(const PlanePair& corr, const geom::Pose& pose) {
  geom::Plane w = geom::warp_plane_signed(corr.first, pose);
  Eigen::Vector4d v;
  v << w.normal - corr.second.normal, w.offset - corr.second.offset;
  return v.norm();
}

geom::Pose homo_ref(const std::vector<PlanePair>& corrs,
                    const geom::Pose& init, const PointCorrSet& pts) {
  if (corrs.size() != pts.size())
    throw ShapeMismatch("homo_ref: correspondence/point-set count mismatch");
  const double tnorm = init.translation.norm();

  std::vector<geom::Pose> cands;
  for (size_t k = 0; k < corrs.size(); ++k) {
    const PointCorr& pc = pts[k];
    if (pc.pts1.size() < 4 || pc.pts1.size() != pc.pts2.size()) continue;
    Vec3 ref = Vec3::Zero();
    for (const auto& p : pc.pts1) ref += Vec3(p.x(), p.y(), 1.0).normalized();
    ref = ref.norm() > 1e-9 ? Vec3(ref.normalized()) : Vec3::UnitZ();
    try {
      for (const auto& c : decompose_homography(
               fit_homography(pc.pts1, pc.pts2), ref)) {
        Vec3 t = c.t_dir;
        double tn = t.norm();
        // the decomposition fixes translation only up to the plane scale;
        // borrow the magnitude of the initial estimate
        t = tn > 1e-9 ? Vec3(t * (tnorm / tn)) : Vec3::Zero();
        cands.push_back({c.rotation, t});
      }
    } catch (const Error&) {
      continue;  // a degenerate region contributes no hypotheses
    }
  }
  if (cands.empty()) return init;

  geom::Pose best = cands.front();
  double best_cost = std::numeric_limits<double>::infinity();
  for (const auto& cand : cands) {
    double cost = 0;
    for (const auto& corr : corrs) cost += d_par(corr, cand);
    if (cost < best_cost) {
      best_cost = cost;
      best = cand;
    }
  }
  return best;
}

NumeRefResult nume_ref(const std::vector<PlanePair>& corrs,
                       const geom::Pose& init, const NumeRefOptions& opts) {
  if (opts.huber_delta <= 0 || opts.init_damping <= 0 || opts.max_iters < 0 ||
      opts.lambda_cam < 0 || opts.step_tol < 0 || opts.cost_tol < 0)
    throw InvalidArgument("nume_ref: bad options");
  if (opts.use_pix) {
    if (!opts.points) throw InvalidArgument("nume_ref: use_pix without points");
    if (opts.points->size() != corrs.size())
      throw ShapeMismatch("nume_ref: point-set count mismatch");
  }

  NumeRefResult res;
  res.pose = init;
  const geom::UnitQuaternion q0 = init.rotation;
  res.initial_cost = linearize(corrs, opts, init, q0, false).cost;
  res.final_cost = res.initial_cost;
  if (!std::isfinite(res.initial_cost))
    throw NonFiniteInput("nume_ref: non-finite initial cost");
  if (corrs.empty()) {
    res.flagged = true;
    return res;
  }

  geom::Pose pose = init;
  double cost = res.initial_cost;
  double mu = opts.init_damping;
  bool converged = false;
  bool stalled = false;

  while (res.iterations < opts.max_iters && !converged && !stalled) {
    ++res.iterations;
    LinSys sys = linearize(corrs, opts, pose, q0, true);
    // escalate damping on this linearization until a step reduces the cost
    bool stepped = false;
    while (!stepped) {
      Matrix6d aug = sys.jtj;
      for (int d = 0; d < 6; ++d)
        aug(d, d) += mu * std::max(sys.jtj(d, d), 1e-12);
      Eigen::LDLT<Matrix6d> ldlt(aug);
      Vector6d delta = ldlt.solve(-sys.g);
      if (ldlt.info() == Eigen::Success && delta.allFinite()) {
        if (delta.norm() < opts.step_tol) {  // negligible update: done, even
          converged = true;                  // when it cannot strictly
          break;                             // decrease the cost any more
        }
        geom::Pose cand = apply_step(pose, delta);
        double ccost = linearize(corrs, opts, cand, q0, false).cost;
        if (std::isfinite(ccost) && ccost < cost) {
          double drop = cost - ccost;
          converged = drop <= opts.cost_tol * std::max(cost, 1e-30);
          pose = cand;
          cost = ccost;
          mu = std::max(mu * 0.1, 1e-15);
          stepped = true;
          continue;
        }
      }
      mu *= 10;
      if (mu > 1e12) {  // singular or exhausted normal equations: flag, keep
        stalled = true; // the best pose seen so far
        break;
      }
    }
  }

  res.pose = pose;
  res.final_cost = cost;
  res.converged = converged;
  res.flagged = !converged;
  return res;
}

}  // namespace planepose::base

#include "planepose/geom.hpp"

#include <algorithm>
#include <cmath>

namespace planepose::geom {

namespace {

constexpr double kDegenerateNorm = 1e-8;

double clamp_unit(double x) { return std::clamp(x, -1.0, 1.0); }

}  // namespace

UnitQuaternion::UnitQuaternion(double w, double x, double y, double z) {
  double n = std::sqrt(w * w + x * x + y * y + z * z);
  if (n < kDegenerateNorm) {
    throw DegenerateQuaternion("quaternion norm below 1e-8");
  }
  w_ = w / n;
  x_ = x / n;
  y_ = y / n;
  z_ = z / n;
}

UnitQuaternion UnitQuaternion::from_normalized(double w, double x, double y,
                                               double z) {
  double n2 = w * w + x * x + y * y + z * z;
  if (std::abs(n2 - 1.0) > 1e-9) {
    throw DegenerateQuaternion("coefficients are not unit norm");
  }
  UnitQuaternion q;
  q.w_ = w;
  q.x_ = x;
  q.y_ = y;
  q.z_ = z;
  return q;
}

UnitQuaternion UnitQuaternion::from_rotation_vector(const Vec3& v) {
  double theta = v.norm();
  double half = 0.5 * theta;
  // sin(theta/2)/theta, series near zero
  double k = theta < 1e-8 ? 0.5 - theta * theta / 48.0 : std::sin(half) / theta;
  UnitQuaternion q;
  q.w_ = std::cos(half);
  q.x_ = k * v.x();
  q.y_ = k * v.y();
  q.z_ = k * v.z();
  double n = std::sqrt(q.w_ * q.w_ + q.x_ * q.x_ + q.y_ * q.y_ + q.z_ * q.z_);
  q.w_ /= n;
  q.x_ /= n;
  q.y_ /= n;
  q.z_ /= n;
  return q;
}

UnitQuaternion UnitQuaternion::from_matrix(const Mat3& r) {
  // Shepperd's method: pick the largest diagonal combination for stability.
  double tr = r.trace();
  double w, x, y, z;
  if (tr > 0) {
    double s = std::sqrt(tr + 1.0) * 2;
    w = 0.25 * s;
    x = (r(2, 1) - r(1, 2)) / s;
    y = (r(0, 2) - r(2, 0)) / s;
    z = (r(1, 0) - r(0, 1)) / s;
  } else if (r(0, 0) > r(1, 1) && r(0, 0) > r(2, 2)) {
    double s = std::sqrt(1.0 + r(0, 0) - r(1, 1) - r(2, 2)) * 2;
    w = (r(2, 1) - r(1, 2)) / s;
    x = 0.25 * s;
    y = (r(0, 1) + r(1, 0)) / s;
    z = (r(0, 2) + r(2, 0)) / s;
  } else if (r(1, 1) > r(2, 2)) {
    double s = std::sqrt(1.0 + r(1, 1) - r(0, 0) - r(2, 2)) * 2;
    w = (r(0, 2) - r(2, 0)) / s;
    x = (r(0, 1) + r(1, 0)) / s;
    y = 0.25 * s;
    z = (r(1, 2) + r(2, 1)) / s;
  } else {
    double s = std::sqrt(1.0 + r(2, 2) - r(0, 0) - r(1, 1)) * 2;
    w = (r(1, 0) - r(0, 1)) / s;
    x = (r(0, 2) + r(2, 0)) / s;
    y = (r(1, 2) + r(2, 1)) / s;
    z = 0.25 * s;
  }
  return {w, x, y, z};
}

UnitQuaternion UnitQuaternion::canonicalized() const {
  if (w_ < 0) {
    UnitQuaternion q;
    q.w_ = -w_;
    q.x_ = -x_;
    q.y_ = -y_;
    q.z_ = -z_;
    return q;
  }
  return *this;
}

Mat3 UnitQuaternion::to_matrix() const {
  double ww = w_ * w_, xx = x_ * x_, yy = y_ * y_, zz = z_ * z_;
  double wx = w_ * x_, wy = w_ * y_, wz = w_ * z_;
  double xy = x_ * y_, xz = x_ * z_, yz = y_ * z_;
  Mat3 r;
  r << ww + xx - yy - zz, 2 * (xy - wz), 2 * (xz + wy),
       2 * (xy + wz), ww - xx + yy - zz, 2 * (yz - wx),
       2 * (xz - wy), 2 * (yz + wx), ww - xx - yy + zz;
  return r;
}

Vec3 UnitQuaternion::rotate(const Vec3& v) const {
  // v + 2w (u x v) + 2 u x (u x v)
  Vec3 u(x_, y_, z_);
  Vec3 uv = u.cross(v);
  return v + 2 * w_ * uv + 2 * u.cross(uv);
}

UnitQuaternion UnitQuaternion::operator*(const UnitQuaternion& rhs) const {
  UnitQuaternion q;
  q.w_ = w_ * rhs.w_ - x_ * rhs.x_ - y_ * rhs.y_ - z_ * rhs.z_;
  q.x_ = w_ * rhs.x_ + x_ * rhs.w_ + y_ * rhs.z_ - z_ * rhs.y_;
  q.y_ = w_ * rhs.y_ - x_ * rhs.z_ + y_ * rhs.w_ + z_ * rhs.x_;
  q.z_ = w_ * rhs.z_ + x_ * rhs.y_ - y_ * rhs.x_ + z_ * rhs.w_;
  return q;
}

double rotation_geodesic_deg(const UnitQuaternion& a, const UnitQuaternion& b) {
  return 2.0 * std::acos(clamp_unit(std::abs(a.dot(b)))) * 180.0 / M_PI;
}

Pose compose(const Pose& a, const Pose& b) {
  Pose p;
  p.rotation = a.rotation * b.rotation;
  p.translation = a.rotation.rotate(b.translation) + a.translation;
  return p;
}

Pose inverse(const Pose& p) {
  Pose q;
  q.rotation = p.rotation.inverse();
  q.translation = -q.rotation.rotate(p.translation);
  return q;
}

Vec3 apply(const Pose& p, const Vec3& x) {
  return p.rotation.rotate(x) + p.translation;
}

Plane::Plane(const Vec3& n, double d) {
  double len = n.norm();
  if (len < kDegenerateNorm) {
    throw DegenerateConfiguration("plane normal has near-zero length");
  }
  normal = n / len;
  offset = d / len;
}

Plane Plane::canonicalized() const {
  if (offset < 0) {
    Plane p;
    p.normal = -normal;
    p.offset = -offset;
    return p;
  }
  return *this;
}

Plane warp_plane_signed(const Plane& p, const Pose& pose) {
  Plane out;
  out.normal = pose.rotation.rotate(p.normal);
  out.offset = p.offset + out.normal.dot(pose.translation);
  return out;
}

Plane warp_plane(const Plane& p, const Pose& pose) {
  return warp_plane_signed(p, pose).canonicalized();
}

double geometric_affinity(const Plane& a, const Plane& b, double lambda1,
                          double lambda2) {
  double angle = std::acos(clamp_unit(a.normal.dot(b.normal)));
  return -lambda1 * angle - lambda2 * std::abs(a.offset - b.offset);
}

OnePlaneCosts one_plane_costs(const Plane& p1_frame1, const Plane& p2_frame2,
                              const Pose& pose) {
  Plane w = warp_plane_signed(p1_frame1, pose);
  OnePlaneCosts c;
  c.rot = (w.normal - p2_frame2.normal).norm();
  c.trans = (w.offset * w.normal - p2_frame2.offset * p2_frame2.normal).norm();
  return c;
}

Mat3 plane_induced_homography(const Pose& pose, const Plane& p1) {
  if (std::abs(p1.offset) < 1e-9) {
    throw ZeroOffset("plane through the camera center induces no homography");
  }
  return pose.rotation.to_matrix() +
         pose.translation * p1.normal.transpose() / p1.offset;
}

Mat3 skew(const Vec3& v) {
  Mat3 m;
  m << 0, -v.z(), v.y(),
       v.z(), 0, -v.x(),
       -v.y(), v.x(), 0;
  return m;
}

Mat34 rotate_jacobian_quat(const Vec4& q, const Vec3& v) {
  // R(q) v = v + 2w (u x v) + 2 u x (u x v) with u = (x, y, z):
  //   d/dw = 2 (u x v)
  //   d/du = 2 (-w [v]x + (u.v) I + u v^T - 2 v u^T)
  double w = q(0);
  Vec3 u = q.tail<3>();
  Mat34 j;
  j.col(0) = 2.0 * u.cross(v);
  j.block<3, 3>(0, 1) =
      2.0 * (-w * skew(v) + u.dot(v) * Mat3::Identity() +
             u * v.transpose() - 2.0 * v * u.transpose());
  return j;
}

Eigen::Matrix4d normalize_jacobian(const Vec4& raw) {
  double n = raw.norm();
  if (n < kDegenerateNorm) {
    throw DegenerateQuaternion("cannot normalize near-zero quaternion");
  }
  Vec4 q = raw / n;
  return (Eigen::Matrix4d::Identity() - q * q.transpose()) / n;
}

OnePlaneCostsGrad one_plane_costs_grad(const Plane& p1_frame1,
                                       const Plane& p2_frame2, const Vec4& q,
                                       const Vec3& t) {
  UnitQuaternion uq(q(0), q(1), q(2), q(3));
  Vec3 n1 = uq.rotate(p1_frame1.normal);
  double d1 = p1_frame1.offset + n1.dot(t);
  Mat34 dn_dq = rotate_jacobian_quat(q, p1_frame1.normal);

  OnePlaneCostsGrad g;
  Vec3 rn = n1 - p2_frame2.normal;
  g.rot = rn.norm();
  if (g.rot > 1e-12) {
    g.rot_dq = dn_dq.transpose() * (rn / g.rot);
  }

  Vec3 rt = d1 * n1 - p2_frame2.offset * p2_frame2.normal;
  g.trans = rt.norm();
  if (g.trans > 1e-12) {
    Vec3 u = rt / g.trans;
    // d(d1 n1) = n1 dd1 + d1 dn1, with dd1 = t^T dn1 through the warp
    g.trans_dq = dn_dq.transpose() *
                 ((d1 * Mat3::Identity() + n1 * t.transpose()).transpose() * u);
    g.trans_dt = u.dot(n1) * n1;
  }
  return g;
}

}  // namespace planepose::geom

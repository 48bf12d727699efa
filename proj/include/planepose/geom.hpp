#pragma once

#include <Eigen/Dense>

#include "planepose/errors.hpp"

namespace planepose::geom {

using Vec3 = Eigen::Vector3d;
using Vec4 = Eigen::Vector4d;
using Mat3 = Eigen::Matrix3d;
using Mat34 = Eigen::Matrix<double, 3, 4>;

// Unit quaternion, coefficients ordered (w, x, y, z). Constructors
// normalize; canonical sign (w >= 0) is applied explicitly where a unique
// representative matters (storage, decoded poses).
class UnitQuaternion {
 public:
  UnitQuaternion() : w_(1), x_(0), y_(0), z_(0) {}
  UnitQuaternion(double w, double x, double y, double z);

  static UnitQuaternion from_rotation_vector(const Vec3& v);
  static UnitQuaternion from_matrix(const Mat3& r);

  // Trusts already-unit coefficients (no renormalization), so values
  // serialized from a UnitQuaternion deserialize to identical bits.
  static UnitQuaternion from_normalized(double w, double x, double y,
                                        double z);

  UnitQuaternion canonicalized() const;

  Mat3 to_matrix() const;
  Vec3 rotate(const Vec3& v) const;

  // Hamilton product; rotate(a * b, v) == rotate(a, rotate(b, v))
  UnitQuaternion operator*(const UnitQuaternion& rhs) const;
  UnitQuaternion inverse() const { return {w_, -x_, -y_, -z_}; }

  double dot(const UnitQuaternion& o) const {
    return w_ * o.w_ + x_ * o.x_ + y_ * o.y_ + z_ * o.z_;
  }

  Vec4 coeffs() const { return {w_, x_, y_, z_}; }
  double w() const { return w_; }
  double x() const { return x_; }
  double y() const { return y_; }
  double z() const { return z_; }

 private:
  double w_, x_, y_, z_;
};

// Geodesic distance on SO(3) in degrees: 2 * acos(|<a, b>|).
double rotation_geodesic_deg(const UnitQuaternion& a, const UnitQuaternion& b);

// Rigid transform x2 = R x1 + t taking frame-1 points to frame 2.
struct Pose {
  UnitQuaternion rotation;
  Vec3 translation = Vec3::Zero();
};

Pose compose(const Pose& a, const Pose& b);  // x -> a(b(x))
Pose inverse(const Pose& p);
Vec3 apply(const Pose& p, const Vec3& x);

// Plane n . x = d with unit normal. Canonical form keeps d >= 0.
struct Plane {
  Vec3 normal = Vec3::UnitZ();
  double offset = 0;

  Plane() = default;
  Plane(const Vec3& n, double d);

  Plane canonicalized() const;
};

// Plane parameters in frame 2 of a frame-1 plane: n' = R n, d' = d + n'.t.
// warp_plane returns the canonical form; the signed variant keeps the
// orientation produced by the algebra (offset may be negative when the
// camera crosses the plane).
Plane warp_plane(const Plane& p, const Pose& pose);
Plane warp_plane_signed(const Plane& p, const Pose& pose);

// -lambda1 * acos(n1 . n2) - lambda2 * |d1 - d2| on two same-frame planes.
double geometric_affinity(const Plane& a, const Plane& b,
                          double lambda1 = 0.125, double lambda2 = 0.25);

// Rotation cost |R n1 - n2| and translation cost |d1' n1' - d2 n2| of a
// correspondence under a pose, with the signed (uncanonicalized) warp.
struct OnePlaneCosts {
  double rot = 0;
  double trans = 0;
};
OnePlaneCosts one_plane_costs(const Plane& p1_frame1, const Plane& p2_frame2,
                              const Pose& pose);

// H = R + t n^T / d for a frame-1 plane; throws ZeroOffset when |d| < 1e-9.
Mat3 plane_induced_homography(const Pose& pose, const Plane& p1);

// --- derivative helpers for the hand-written training graph and the LM
// refiners; all verified against central differences in the tests ---

Mat3 skew(const Vec3& v);

// d(R(q) v)/dq for unit q, coefficients (w, x, y, z); v held fixed.
Mat34 rotate_jacobian_quat(const Vec4& q, const Vec3& v);

// d(raw/|raw|)/draw
Eigen::Matrix4d normalize_jacobian(const Vec4& raw);

// one_plane_costs plus gradients w.r.t. the (unit) quaternion and the
// translation. Cost gradients are zero at exactly matching planes (the
// norms are not differentiable there; both costs vanish).
struct OnePlaneCostsGrad {
  double rot = 0;
  double trans = 0;
  Vec4 rot_dq = Vec4::Zero();
  Vec4 trans_dq = Vec4::Zero();
  Vec3 trans_dt = Vec3::Zero();
};
OnePlaneCostsGrad one_plane_costs_grad(const Plane& p1_frame1,
                                       const Plane& p2_frame2, const Vec4& q,
                                       const Vec3& t);

}  // namespace planepose::geom

#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <optional>
#include <span>
#include <vector>

#include "dsac/errors.hpp"

namespace dsac {

inline constexpr double kPi = 3.14159265358979323846;

// Reprojection errors are clamped to this value (px) before they reach any
// scorer; degenerate projections (point at or behind the camera) saturate
// to the same cap.
inline constexpr double kErrorCap = 100.0;

// Minimum depth for a projection to count as in front of the camera.
inline constexpr double kMinDepth = 1e-9;

/// Rigid transform mapping scene points into the camera frame,
/// parameterized as axis-angle rotation plus translation. This is the model
/// h fitted by the pipeline; the camera pose is its inverse.
struct Pose {
  Eigen::Vector3d theta = Eigen::Vector3d::Zero();  // axis-angle, radians
  Eigen::Vector3d t = Eigen::Vector3d::Zero();      // scene units (cm)

  static Pose identity() { return Pose{}; }

  Eigen::Matrix<double, 6, 1> params() const {
    Eigen::Matrix<double, 6, 1> p;
    p << theta, t;
    return p;
  }
  static Pose from_params(const Eigen::Matrix<double, 6, 1>& p) {
    return Pose{p.head<3>(), p.tail<3>()};
  }
};

struct Intrinsics {
  double fx = 1.0;
  double fy = 1.0;
  double cx = 0.0;
  double cy = 0.0;
};

/// One 2D-3D correspondence: pixel location and the predicted scene
/// coordinate of the point imaged there. grid_index is the cell's position
/// in the prediction grid and must be unique within a frame.
struct Correspondence {
  Eigen::Vector2d p = Eigen::Vector2d::Zero();  // px
  Eigen::Vector3d y = Eigen::Vector3d::Zero();  // scene units (cm)
  int grid_index = 0;
};

inline Eigen::Matrix3d skew(const Eigen::Vector3d& v) {
  Eigen::Matrix3d m;
  m << 0, -v.z(), v.y(), v.z(), 0, -v.x(), -v.y(), v.x(), 0;
  return m;
}

inline Eigen::Quaterniond quaternion_of(const Eigen::Vector3d& theta) {
  const double angle = theta.norm();
  if (angle < 1e-12) {
    // first-order expansion, exact enough at this magnitude
    return Eigen::Quaterniond(1.0, 0.5 * theta.x(), 0.5 * theta.y(), 0.5 * theta.z()).normalized();
  }
  return Eigen::Quaterniond(Eigen::AngleAxisd(angle, theta / angle));
}

// Axis-angle of q with |theta| <= pi.
inline Eigen::Vector3d theta_of_quaternion(Eigen::Quaterniond q) {
  if (q.w() < 0) q.coeffs() = -q.coeffs();
  const double vnorm = q.vec().norm();
  const double angle = 2.0 * std::atan2(vnorm, q.w());
  if (vnorm < 1e-12) return 2.0 * q.vec();  // small-angle limit
  return (angle / vnorm) * q.vec();
}

inline Eigen::Matrix3d rotation_matrix(const Eigen::Vector3d& theta) {
  return quaternion_of(theta).toRotationMatrix();
}

/// Shortest axis-angle representative, |theta| <= pi.
inline Eigen::Vector3d canonicalize_rotation(const Eigen::Vector3d& theta) {
  const double angle = theta.norm();
  if (angle <= kPi) return theta;
  // remove whole turns, then flip to the short side if needed
  double a = std::fmod(angle, 2.0 * kPi);
  if (a > kPi) a -= 2.0 * kPi;
  return theta * (a / angle);
}

inline Pose canonicalize(const Pose& p) { return Pose{canonicalize_rotation(p.theta), p.t}; }

inline Eigen::Vector3d transform(const Pose& h, const Eigen::Vector3d& y) {
  return quaternion_of(h.theta) * y + h.t;
}

/// Composition a after b: compose(a,b) maps y to a(b(y)).
inline Pose compose(const Pose& a, const Pose& b) {
  const Eigen::Quaterniond qa = quaternion_of(a.theta);
  const Eigen::Quaterniond qb = quaternion_of(b.theta);
  Pose out;
  out.theta = theta_of_quaternion(qa * qb);
  out.t = qa * b.t + a.t;
  return out;
}

inline Pose invert_pose(const Pose& h) {
  const Eigen::Quaterniond q = quaternion_of(h.theta);
  Pose out;
  out.theta = theta_of_quaternion(q.conjugate());
  out.t = -(q.conjugate() * h.t);
  return out;
}

/// Pinhole projection of scene point y under pose h. Empty when the
/// transformed point has non-positive depth.
inline std::optional<Eigen::Vector2d> project(const Intrinsics& c, const Pose& h,
                                              const Eigen::Vector3d& y) {
  const Eigen::Vector3d x = transform(h, y);
  if (x.z() <= kMinDepth) return std::nullopt;
  return Eigen::Vector2d(c.fx * x.x() / x.z() + c.cx, c.fy * x.y() / x.z() + c.cy);
}

/// Camera-frame point on the ray through pixel px at the given depth.
inline Eigen::Vector3d unproject(const Intrinsics& c, const Eigen::Vector2d& px, double depth) {
  return Eigen::Vector3d((px.x() - c.cx) / c.fx * depth, (px.y() - c.cy) / c.fy * depth, depth);
}

/// Pixel distance between the observed location and the projection of the
/// predicted scene coordinate, clamped to cap. Failed projections saturate
/// to cap so bulk paths tolerate bad hypotheses.
inline double reprojection_error(const Intrinsics& c, const Pose& h, const Correspondence& corr,
                                 double cap = kErrorCap) {
  const auto px = project(c, h, corr.y);
  if (!px) return cap;
  return std::min((corr.p - *px).norm(), cap);
}

/// Reprojection errors in grid order: element i belongs to grid_index i.
inline Eigen::VectorXd error_vector(const Intrinsics& c, const Pose& h,
                                    std::span<const Correspondence> ys, double cap = kErrorCap) {
  if (ys.empty()) throw EmptyInputError("error_vector: empty correspondence set");
  Eigen::VectorXd e = Eigen::VectorXd::Constant(static_cast<int>(ys.size()), -1.0);
  for (const auto& corr : ys) {
    if (corr.grid_index < 0 || corr.grid_index >= e.size() || e[corr.grid_index] >= 0.0)
      throw DimensionMismatchError("error_vector: grid indices must be unique in [0, |Y|)");
    e[corr.grid_index] = reprojection_error(c, h, corr, cap);
  }
  return e;
}

/// Relative rotation angle in degrees, in [0, 180]. Computed from the
/// relative quaternion; atan2 form keeps precision near 0.
inline double rotation_angle_deg(const Eigen::Vector3d& theta_a, const Eigen::Vector3d& theta_b) {
  const Eigen::Quaterniond r = quaternion_of(theta_a) * quaternion_of(theta_b).conjugate();
  const double angle = 2.0 * std::atan2(r.vec().norm(), std::abs(r.w()));
  return angle * 180.0 / kPi;
}

/// Task pose loss: max of relative rotation (degrees) and camera-center
/// distance (cm). Both inputs are scene poses and are inverted internally
/// before comparison.
inline double pose_loss(const Pose& h_est, const Pose& h_gt) {
  const Pose cam_est = invert_pose(h_est);
  const Pose cam_gt = invert_pose(h_gt);
  const double rot = rotation_angle_deg(cam_est.theta, cam_gt.theta);
  const double trans = (cam_est.t - cam_gt.t).norm();
  return std::max(rot, trans);
}

// d(R(theta) v)/d(theta), 3x3. Gallego-Yezzi closed form; falls back to the
// skew limit at theta ~ 0.
inline Eigen::Matrix3d rotate_point_jacobian_theta(const Eigen::Vector3d& theta,
                                                   const Eigen::Vector3d& v) {
  const double n2 = theta.squaredNorm();
  const Eigen::Matrix3d r = rotation_matrix(theta);
  const Eigen::Vector3d rv = r * v;
  if (n2 < 1e-16) return -skew(v);
  Eigen::Matrix3d j;
  for (int i = 0; i < 3; ++i) {
    const Eigen::Vector3d ei = Eigen::Vector3d::Unit(i);
    const Eigen::Vector3d u = theta.cross((Eigen::Matrix3d::Identity() - r) * ei);
    j.col(i) = (theta[i] * skew(theta) + skew(u)) * rv / n2;
  }
  return j;
}

// d(pixel)/d(camera-frame point), 2x3. Caller guarantees positive depth.
inline Eigen::Matrix<double, 2, 3> projection_jacobian_point(const Intrinsics& c,
                                                             const Eigen::Vector3d& x) {
  Eigen::Matrix<double, 2, 3> j;
  const double iz = 1.0 / x.z();
  j << c.fx * iz, 0, -c.fx * x.x() * iz * iz, 0, c.fy * iz, -c.fy * x.y() * iz * iz;
  return j;
}

/// Analytic gradient of the capped reprojection error. Rows are zero at the
/// cap (including failed projections) and at exactly zero error.
struct ReprojectionErrorGrad {
  Eigen::RowVector3d d_point = Eigen::RowVector3d::Zero();   // wrt scene coordinate y
  Eigen::Matrix<double, 1, 6> d_pose = Eigen::Matrix<double, 1, 6>::Zero();  // wrt (theta, t)
};

inline ReprojectionErrorGrad reprojection_error_gradient(const Intrinsics& c, const Pose& h,
                                                         const Correspondence& corr,
                                                         double cap = kErrorCap) {
  ReprojectionErrorGrad g;
  const Eigen::Matrix3d r = rotation_matrix(h.theta);
  const Eigen::Vector3d x = r * corr.y + h.t;
  if (x.z() <= kMinDepth) return g;
  const Eigen::Vector2d px(c.fx * x.x() / x.z() + c.cx, c.fy * x.y() / x.z() + c.cy);
  const Eigen::Vector2d res = px - corr.p;
  const double e = res.norm();
  if (e <= 0.0 || e >= cap) return g;
  const Eigen::RowVector2d d_err_d_px = res.transpose() / e;
  const Eigen::Matrix<double, 2, 3> d_px_d_x = projection_jacobian_point(c, x);
  g.d_point = d_err_d_px * d_px_d_x * r;
  const Eigen::Matrix3d d_x_d_theta = rotate_point_jacobian_theta(h.theta, corr.y);
  g.d_pose.head<3>() = d_err_d_px * d_px_d_x * d_x_d_theta;
  g.d_pose.tail<3>() = d_err_d_px * d_px_d_x;
  return g;
}

}  // namespace dsac

#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <optional>
#include <span>
#include <vector>

#include "dsac/consensus.hpp"
#include "dsac/geometry.hpp"
#include "dsac/rng.hpp"
#include "dsac/solvers.hpp"

namespace dsac {

// ---------------------------------------------------------------------------
// Problem adapters: bind a model type, its minimal solver, residuals and
// refinement so the consensus and gradient machinery stays generic.
// ---------------------------------------------------------------------------

/// 2D line fitting on predicted points (x_i, y_i). The exhaustively
/// enumerable desk-scale instantiation.
struct LineFitProblem {
  using Model = LineModel;
  using Datum = Eigen::Vector2d;
  static constexpr int kMinimalSetSize = 2;
  static constexpr int kModelDim = 2;
  static constexpr int kDatumDof = 1;  // only the y coordinate is predicted

  double error_cap = 10.0;
  RefinementParams refinement{/*tau=*/0.3, /*max_inliers=*/100, /*min_inliers=*/3,
                              /*iterations=*/8};

  std::optional<Model> solve_minimal(std::span<const Datum> data,
                                     const std::vector<int>& idx) const {
    return solve_line_minimal(data[idx[0]], data[idx[1]]);
  }

  Eigen::VectorXd residual_vector(const Model& m, std::span<const Datum> data) const {
    return line_residuals(m, data, error_cap);
  }

  Model refine(const Model& m, std::span<const Datum> data) const {
    return refine_line(m, data, error_cap, refinement);
  }

  Model canonicalize_model(const Model& m) const { return m; }

  /// Task loss: Euclidean distance in (slope, intercept) space.
  double task_loss(const Model& est, const Model& gt) const {
    return (est.params() - gt.params()).norm();
  }

  // the predicted degree of freedom is the point's y coordinate
  static double datum_dof(const Datum& d, int) { return d.y(); }
  static void set_datum_dof(Datum& d, int, double value) { d.y() = value; }

  // capped-residual derivatives; zero at the cap and at zero residual
  Eigen::Matrix<double, 1, 1> residual_jacobian_datum(const Model& m, const Datum& d) const {
    const double r = d.y() - (m.a * d.x() + m.b);
    Eigen::Matrix<double, 1, 1> j;
    j(0, 0) = (r == 0.0 || std::abs(r) >= error_cap) ? 0.0 : (r > 0 ? 1.0 : -1.0);
    return j;
  }
  Eigen::Matrix<double, 1, 2> residual_jacobian_model(const Model& m, const Datum& d) const {
    const double r = d.y() - (m.a * d.x() + m.b);
    Eigen::Matrix<double, 1, 2> j = Eigen::Matrix<double, 1, 2>::Zero();
    if (r != 0.0 && std::abs(r) < error_cap) {
      const double s = r > 0 ? 1.0 : -1.0;
      j(0, 0) = -s * d.x();
      j(0, 1) = -s;
    }
    return j;
  }

  /// Task-loss gradient wrt the estimated model parameters.
  Eigen::RowVector2d task_loss_grad(const Model& est, const Model& gt) const {
    const Eigen::Vector2d d = est.params() - gt.params();
    const double n = d.norm();
    if (n <= 0.0) return Eigen::RowVector2d::Zero();
    return (d / n).transpose();
  }

  // central-difference defaults for the black-box paths, in data units
  double cd_step_data() const { return 1e-4; }
  double cd_step_model() const { return 1e-4; }

  /// Closed-form jacobian of the two-point solve wrt the predicted y's.
  Eigen::MatrixXd solver_jacobian(std::span<const Datum> data,
                                  const std::vector<int>& idx) const {
    const double x0 = data[idx[0]].x(), x1 = data[idx[1]].x();
    const double inv_dx = 1.0 / (x1 - x0);
    Eigen::MatrixXd j(2, 2);  // rows (a, b), cols (y0, y1)
    j(0, 0) = -inv_dx;
    j(0, 1) = inv_dx;
    j(1, 0) = 1.0 + x0 * inv_dx;
    j(1, 1) = -x0 * inv_dx;
    return j;
  }
};

/// Camera localization from predicted scene coordinates.
struct CameraLocProblem {
  using Model = Pose;
  using Datum = Correspondence;
  static constexpr int kMinimalSetSize = 4;
  static constexpr int kModelDim = 6;
  static constexpr int kDatumDof = 3;

  Intrinsics intrinsics;
  double error_cap = kErrorCap;
  RefinementParams refinement{};

  std::optional<Model> solve_minimal(std::span<const Datum> data,
                                     const std::vector<int>& idx) const {
    const std::vector<Correspondence> quad = {data[idx[0]], data[idx[1]], data[idx[2]],
                                              data[idx[3]]};
    return solve_pnp_minimal(quad, intrinsics);
  }

  Eigen::VectorXd residual_vector(const Model& m, std::span<const Datum> data) const {
    return error_vector(intrinsics, m, data, error_cap);
  }

  Model refine(const Model& m, std::span<const Datum> data) const {
    return refine_pose(m, data, intrinsics, refinement);
  }

  Model canonicalize_model(const Model& m) const { return canonicalize(m); }

  double task_loss(const Model& est, const Model& gt) const { return pose_loss(est, gt); }

  static double datum_dof(const Datum& d, int k) { return d.y[k]; }
  static void set_datum_dof(Datum& d, int k, double value) { d.y[k] = value; }

  Eigen::Matrix<double, 1, 3> residual_jacobian_datum(const Model& m, const Datum& d) const {
    return reprojection_error_gradient(intrinsics, m, d, error_cap).d_point;
  }
  Eigen::Matrix<double, 1, 6> residual_jacobian_model(const Model& m, const Datum& d) const {
    return reprojection_error_gradient(intrinsics, m, d, error_cap).d_pose;
  }

  /// Pose-loss gradient wrt the estimated (theta, t), by central
  /// differences; the loss itself mixes degrees and centimeters.
  Eigen::Matrix<double, 1, 6> task_loss_grad(const Model& est, const Model& gt) const {
    Eigen::Matrix<double, 1, 6> g;
    const double step = 1e-6;
    Eigen::Matrix<double, 6, 1> p = est.params();
    for (int k = 0; k < 6; ++k) {
      Eigen::Matrix<double, 6, 1> pp = p, pm = p;
      pp[k] += step;
      pm[k] -= step;
      g[k] = (pose_loss(Pose::from_params(pp), gt) - pose_loss(Pose::from_params(pm), gt)) /
             (2 * step);
    }
    return g;
  }

  // 1 cm steps stay well inside the inlier basin of tau = 10 px at the
  // synthetic working distance
  double cd_step_data() const { return 1.0; }
  double cd_step_model() const { return 1e-3; }
};

// ---------------------------------------------------------------------------
// Synthetic line-fitting data
// ---------------------------------------------------------------------------

struct LineDataset {
  LineModel gt_line;
  std::vector<Eigen::Vector2d> points;    // observed (x, y); outliers included
  std::vector<Eigen::VectorXd> features;  // per point: (x, y + feature noise)
  std::vector<bool> outlier_mask;
  double noise_sigma = 0.1;
};

/// Points on a random line with truncated-normal inlier noise (inside the
/// 3-sigma band) and outliers pushed outside it. Deterministic from seed.
inline LineDataset generate_line_dataset(int n_points, double outlier_ratio, double noise_sigma,
                                         std::uint64_t seed) {
  RandomSource rng(seed);
  LineDataset ds;
  ds.noise_sigma = noise_sigma;
  ds.gt_line = LineModel{rng.uniform(-1.5, 1.5), rng.uniform(-2.0, 2.0)};
  for (int i = 0; i < n_points; ++i) {
    const double x = rng.uniform(-5.0, 5.0);
    const double on_line = ds.gt_line.a * x + ds.gt_line.b;
    const bool outlier = rng.uniform() < outlier_ratio;
    double y;
    if (outlier) {
      const double sign = rng.uniform() < 0.5 ? -1.0 : 1.0;
      y = on_line + sign * rng.uniform(3.5 * noise_sigma + 0.05, 4.0);
    } else {
      double dy = rng.normal(0.0, noise_sigma);
      while (std::abs(dy) > 3.0 * noise_sigma) dy = rng.normal(0.0, noise_sigma);
      y = on_line + dy;
    }
    ds.points.emplace_back(x, y);
    ds.outlier_mask.push_back(outlier);
    Eigen::VectorXd f(2);
    f << x, y + rng.normal(0.0, noise_sigma);
    ds.features.push_back(f);
  }
  return ds;
}

// ---------------------------------------------------------------------------
// Synthetic camera-localization data
// ---------------------------------------------------------------------------

struct SceneFrame {
  Pose gt_pose;                             // scene pose h*
  std::vector<Eigen::VectorXd> features;    // per grid cell
  std::vector<Eigen::Vector3d> gt_coords;   // y* (cm)
  std::vector<Eigen::Vector2d> pixels;      // p, exact projections of y*
  double outlier_fraction = 0.0;            // generator setting for this frame
};

struct SceneConfig {
  int n_train_frames = 48;
  int n_test_frames = 16;
  int grid = 20;
  double image_w = 640.0;
  double image_h = 480.0;
  Intrinsics intrinsics{500.0, 500.0, 320.0, 240.0};
  // camera orbit (cm / degrees); the negative elevation keeps scene-pose
  // rotations well away from the axis-angle seam at |theta| = pi
  double orbit_radius = 200.0;
  double orbit_radius_jitter = 25.0;
  double azimuth_center_deg = -90.0;
  double azimuth_range_deg = 120.0;
  double elevation_lo_deg = -50.0;
  double elevation_hi_deg = -10.0;
  double target_jitter = 10.0;
  double depth_lo = 140.0;
  double depth_hi = 260.0;
  // per-cell feature corruption
  double feature_noise = 2.0;       // cm
  double outlier_lo = 0.05;         // per-frame structured-outlier fraction,
  double outlier_hi = 0.90;         // stratified across frames
  double encode_scale = 200.0;      // feature = corrupted coordinate / scale
  std::uint64_t seed = 1;

  int cells() const { return grid * grid; }
};

struct SceneDataset {
  SceneConfig config;
  std::vector<SceneFrame> train;
  std::vector<SceneFrame> test;
};

namespace detail {

inline Pose look_at_pose(const Eigen::Vector3d& eye, const Eigen::Vector3d& target) {
  const Eigen::Vector3d forward = (target - eye).normalized();
  const Eigen::Vector3d up(0, 0, 1);
  Eigen::Vector3d right = forward.cross(up);
  if (right.norm() < 1e-6) right = Eigen::Vector3d(1, 0, 0);
  right.normalize();
  const Eigen::Vector3d down = forward.cross(right);
  Eigen::Matrix3d r;
  r.row(0) = right;
  r.row(1) = down;
  r.row(2) = forward;
  Pose h;
  h.theta = theta_of_quaternion(Eigen::Quaterniond(r));
  h.t = -(r * eye);
  return h;
}

inline SceneFrame generate_scene_frame(const SceneConfig& cfg, double outlier_fraction,
                                       RandomSource& rng) {
  SceneFrame frame;
  frame.outlier_fraction = outlier_fraction;
  const double deg = kPi / 180.0;
  const double azimuth =
      (cfg.azimuth_center_deg + rng.uniform(-0.5, 0.5) * cfg.azimuth_range_deg) * deg;
  const double elevation = rng.uniform(cfg.elevation_lo_deg, cfg.elevation_hi_deg) * deg;
  const double radius = cfg.orbit_radius + rng.uniform(-1, 1) * cfg.orbit_radius_jitter;
  const Eigen::Vector3d eye(radius * std::cos(elevation) * std::cos(azimuth),
                            radius * std::cos(elevation) * std::sin(azimuth),
                            radius * std::sin(elevation));
  const Eigen::Vector3d target(rng.uniform(-1, 1) * cfg.target_jitter,
                               rng.uniform(-1, 1) * cfg.target_jitter,
                               rng.uniform(-1, 1) * cfg.target_jitter);
  frame.gt_pose = canonicalize(look_at_pose(eye, target));

  const Pose cam = invert_pose(frame.gt_pose);
  const int n = cfg.cells();
  frame.features.reserve(n);
  frame.gt_coords.reserve(n);
  frame.pixels.reserve(n);
  const double cell_w = cfg.image_w / cfg.grid;
  const double cell_h = cfg.image_h / cfg.grid;
  for (int row = 0; row < cfg.grid; ++row) {
    for (int col = 0; col < cfg.grid; ++col) {
      // cell center, slightly jittered so minimal sets stay well spread
      const Eigen::Vector2d px(cell_w * (col + 0.5 + rng.uniform(-0.3, 0.3)),
                               cell_h * (row + 0.5 + rng.uniform(-0.3, 0.3)));
      const double depth = rng.uniform(cfg.depth_lo, cfg.depth_hi);
      const Eigen::Vector3d y = transform(cam, unproject(cfg.intrinsics, px, depth));
      frame.pixels.push_back(px);
      frame.gt_coords.push_back(y);
    }
  }
  // structured outliers: exactly round(f*n) cells describe some other
  // cell's point, mimicking repeated structure
  const int n_outliers = static_cast<int>(std::lround(outlier_fraction * n));
  std::vector<bool> corrupt(n, false);
  for (const int i : sample_distinct_indices(n, n_outliers, rng)) corrupt[i] = true;
  for (int i = 0; i < n; ++i) {
    Eigen::Vector3d encoded = frame.gt_coords[i];
    if (corrupt[i]) {
      int j = static_cast<int>(rng.uniform_index(n));
      while (j == i) j = static_cast<int>(rng.uniform_index(n));
      encoded = frame.gt_coords[j];
    }
    encoded += Eigen::Vector3d(rng.normal(0, cfg.feature_noise), rng.normal(0, cfg.feature_noise),
                               rng.normal(0, cfg.feature_noise));
    frame.features.push_back(encoded / cfg.encode_scale);
  }
  return frame;
}

inline std::vector<double> stratified_fractions(double lo, double hi, int n, RandomSource& rng) {
  std::vector<double> f(n);
  for (int i = 0; i < n; ++i) f[i] = n == 1 ? lo : lo + (hi - lo) * i / (n - 1.0);
  for (int i = n - 1; i > 0; --i) std::swap(f[i], f[rng.uniform_index(i + 1)]);
  return f;
}

}  // namespace detail

/// Frames on a jittered orbit around a synthetic point field. Per-frame
/// outlier fractions are stratified over [outlier_lo, outlier_hi] so the
/// dataset spans easy to hard inlier regimes. Pure function of the config.
inline SceneDataset generate_scene_dataset(const SceneConfig& cfg) {
  SceneDataset ds;
  ds.config = cfg;
  RandomSource root(cfg.seed);
  RandomSource train_rng = root.split(1);
  RandomSource test_rng = root.split(2);
  const auto train_f =
      detail::stratified_fractions(cfg.outlier_lo, cfg.outlier_hi, cfg.n_train_frames, train_rng);
  for (int k = 0; k < cfg.n_train_frames; ++k) {
    RandomSource frame_rng = train_rng.split(k);
    ds.train.push_back(detail::generate_scene_frame(cfg, train_f[k], frame_rng));
  }
  const auto test_f =
      detail::stratified_fractions(cfg.outlier_lo, cfg.outlier_hi, cfg.n_test_frames, test_rng);
  for (int k = 0; k < cfg.n_test_frames; ++k) {
    RandomSource frame_rng = test_rng.split(k);
    ds.test.push_back(detail::generate_scene_frame(cfg, test_f[k], frame_rng));
  }
  return ds;
}

/// Decodes the feature back to a scene coordinate; with zero noise and no
/// outliers this is an exact ground-truth predictor.
inline Eigen::Vector3d decode_feature(const SceneConfig& cfg, const Eigen::VectorXd& feature) {
  return Eigen::Vector3d(feature[0], feature[1], feature[2]) * cfg.encode_scale;
}

inline std::vector<Correspondence> make_correspondences(
    const SceneFrame& frame, const std::vector<Eigen::Vector3d>& coords) {
  std::vector<Correspondence> out;
  out.reserve(coords.size());
  for (size_t i = 0; i < coords.size(); ++i)
    out.push_back(Correspondence{frame.pixels[i], coords[i], static_cast<int>(i)});
  return out;
}

/// Fraction of predictions within radius_cm of the ground truth.
inline double inlier_ratio(std::span<const Eigen::Vector3d> y_pred,
                           std::span<const Eigen::Vector3d> y_gt, double radius_cm = 10.0) {
  if (y_pred.size() != y_gt.size())
    throw DimensionMismatchError("inlier_ratio: grids must align");
  if (y_pred.empty()) throw EmptyInputError("inlier_ratio: empty input");
  int n = 0;
  for (size_t i = 0; i < y_pred.size(); ++i)
    n += (y_pred[i] - y_gt[i]).norm() < radius_cm ? 1 : 0;
  return static_cast<double>(n) / static_cast<double>(y_pred.size());
}

}  // namespace dsac

#pragma once

#include <Eigen/Dense>
#include <Eigen/Eigenvalues>
#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <optional>
#include <span>
#include <vector>

#include "dsac/geometry.hpp"
#include "dsac/rng.hpp"

namespace dsac {

/// Indices of the correspondences a hypothesis was generated from.
struct MinimalSet {
  std::vector<int> indices;
  int size() const { return static_cast<int>(indices.size()); }
};

/// Line y = a*x + b, the desk-scale stand-in model.
struct LineModel {
  double a = 0.0;
  double b = 0.0;

  Eigen::Vector2d params() const { return Eigen::Vector2d(a, b); }
  static LineModel from_params(const Eigen::Vector2d& p) { return LineModel{p.x(), p.y()}; }
};

struct RefinementParams {
  double tau = 10.0;     // inlier threshold (px for poses)
  int max_inliers = 100; // cap on the refinement set
  int min_inliers = 50;  // stop refining below this count
  int iterations = 8;
};

namespace detail {

// Real roots of c4 x^4 + ... + c0, via the companion matrix, with one
// Newton polish per root. Degenerate leading coefficients fall through to
// the lower-degree problem.
inline std::vector<double> real_polynomial_roots(std::vector<double> c) {
  while (c.size() > 1 && std::abs(c.front()) < 1e-14 * std::abs(c.back())) c.erase(c.begin());
  const int deg = static_cast<int>(c.size()) - 1;
  std::vector<double> roots;
  if (deg < 1) return roots;
  if (deg == 1) {
    roots.push_back(-c[1] / c[0]);
    return roots;
  }
  Eigen::MatrixXd companion = Eigen::MatrixXd::Zero(deg, deg);
  for (int i = 0; i < deg; ++i) companion(0, i) = -c[i + 1] / c[0];
  for (int i = 1; i < deg; ++i) companion(i, i - 1) = 1.0;
  Eigen::EigenSolver<Eigen::MatrixXd> es(companion, /*computeEigenvectors=*/false);
  for (int i = 0; i < deg; ++i) {
    const std::complex<double> z = es.eigenvalues()[i];
    if (std::abs(z.imag()) > 1e-8 * (1.0 + std::abs(z.real()))) continue;
    double x = z.real();
    for (int it = 0; it < 3; ++it) {  // Newton polish
      double f = 0.0, df = 0.0;
      for (double ck : c) {
        df = df * x + f;
        f = f * x + ck;
      }
      if (std::abs(df) < 1e-300) break;
      x -= f / df;
    }
    roots.push_back(x);
  }
  return roots;
}

// Rigid world->camera alignment (Kabsch, no scale): R*p + t = x.
inline Pose rigid_align(const Eigen::Matrix3d& world_pts, const Eigen::Matrix3d& cam_pts) {
  const Eigen::Vector3d pw = world_pts.rowwise().mean();
  const Eigen::Vector3d pc = cam_pts.rowwise().mean();
  const Eigen::Matrix3d h =
      (world_pts.colwise() - pw) * (cam_pts.colwise() - pc).transpose();
  Eigen::JacobiSVD<Eigen::Matrix3d> svd(h, Eigen::ComputeFullU | Eigen::ComputeFullV);
  Eigen::Matrix3d r = svd.matrixV() * svd.matrixU().transpose();
  if (r.determinant() < 0) {
    Eigen::Matrix3d flip = Eigen::Matrix3d::Identity();
    flip(2, 2) = -1.0;
    r = svd.matrixV() * flip * svd.matrixU().transpose();
  }
  Pose out;
  out.theta = theta_of_quaternion(Eigen::Quaterniond(r));
  out.t = pc - r * pw;
  return out;
}

}  // namespace detail

/// Camera poses consistent with three world points and their (unit) bearing
/// vectors. Up to four solutions.
inline std::vector<Pose> solve_p3p(const Eigen::Matrix3d& world_pts,
                                   const Eigen::Matrix3d& bearings) {
  std::vector<Pose> solutions;
  const Eigen::Vector3d p1 = world_pts.col(0), p2 = world_pts.col(1), p3 = world_pts.col(2);
  const double a_ab = (p1 - p2).squaredNorm();
  const double a_ac = (p1 - p3).squaredNorm();
  const double a_bc = (p2 - p3).squaredNorm();
  if (a_ab < 1e-12 || a_ac < 1e-12 || a_bc < 1e-12) return solutions;
  // collinearity
  if ((p2 - p1).cross(p3 - p1).squaredNorm() < 1e-12 * a_ab * a_ac) return solutions;

  const double cab = bearings.col(0).dot(bearings.col(1));
  const double cac = bearings.col(0).dot(bearings.col(2));
  const double cbc = bearings.col(1).dot(bearings.col(2));

  // Quartic in v = s3/s1 from the law-of-cosines system (resultant form).
  const double c4 = a_ab * a_ab - 4 * a_ab * a_ac * cbc * cbc + 2 * a_ab * a_ac - 2 * a_ab * a_bc +
                    a_ac * a_ac - 2 * a_ac * a_bc + a_bc * a_bc;
  const double c3 = -4 * a_ab * a_ab * cac + 4 * a_ab * a_ac * cab * cbc +
                    8 * a_ab * a_ac * cac * cbc * cbc - 4 * a_ab * a_ac * cac +
                    8 * a_ab * a_bc * cac - 4 * a_ac * a_ac * cab * cbc +
                    4 * a_ac * a_bc * cab * cbc + 4 * a_ac * a_bc * cac - 4 * a_bc * a_bc * cac;
  const double c2 = 4 * a_ab * a_ab * cac * cac + 2 * a_ab * a_ab -
                    8 * a_ab * a_ac * cab * cac * cbc - 4 * a_ab * a_ac * cbc * cbc -
                    8 * a_ab * a_bc * cac * cac - 4 * a_ab * a_bc + 4 * a_ac * a_ac * cab * cab +
                    4 * a_ac * a_ac * cbc * cbc - 2 * a_ac * a_ac - 4 * a_ac * a_bc * cab * cab -
                    8 * a_ac * a_bc * cab * cac * cbc + 4 * a_bc * a_bc * cac * cac +
                    2 * a_bc * a_bc;
  const double c1 = -4 * a_ab * a_ab * cac + 4 * a_ab * a_ac * cab * cbc + 4 * a_ab * a_ac * cac +
                    8 * a_ab * a_bc * cac - 4 * a_ac * a_ac * cab * cbc +
                    8 * a_ac * a_bc * cab * cab * cac + 4 * a_ac * a_bc * cab * cbc -
                    4 * a_ac * a_bc * cac - 4 * a_bc * a_bc * cac;
  const double c0 = a_ab * a_ab - 2 * a_ab * a_ac - 2 * a_ab * a_bc + a_ac * a_ac -
                    4 * a_ac * a_bc * cab * cab + 2 * a_ac * a_bc + a_bc * a_bc;

  for (const double v : detail::real_polynomial_roots({c4, c3, c2, c1, c0})) {
    if (!(v > 0.0)) continue;
    const double denom = 1.0 + v * v - 2.0 * v * cac;
    if (denom <= 1e-14) continue;
    const double s1 = std::sqrt(a_ac / denom);
    // u from the first elimination polynomial (quadratic, no uv term)
    const double qa = -a_ac;
    const double qb = 2.0 * a_ac * cab;
    const double qc = a_ab * denom - a_ac;
    const double disc = qb * qb - 4.0 * qa * qc;
    if (disc < 0.0) continue;
    const double sq = std::sqrt(disc);
    for (const double u : {(-qb + sq) / (2.0 * qa), (-qb - sq) / (2.0 * qa)}) {
      if (!(u > 0.0)) continue;
      // must satisfy the remaining constraint as well
      const double g2 = a_ab * (u * u + v * v - 2.0 * u * v * cbc) -
                        a_bc * (1.0 + u * u - 2.0 * u * cab);
      if (std::abs(g2) > 1e-6 * (a_ab + a_bc) * (1.0 + u * u + v * v)) continue;
      Eigen::Matrix3d cam_pts;
      cam_pts.col(0) = s1 * bearings.col(0);
      cam_pts.col(1) = u * s1 * bearings.col(1);
      cam_pts.col(2) = v * s1 * bearings.col(2);
      solutions.push_back(detail::rigid_align(world_pts, cam_pts));
    }
  }
  return solutions;
}

namespace detail {

// Sum of squared (uncapped) reprojection errors; +inf when any point falls
// at or behind the camera.
inline double pnp_objective(const Intrinsics& c, const Pose& h,
                            std::span<const Correspondence> corrs) {
  const Eigen::Matrix3d r = rotation_matrix(h.theta);
  double sse = 0.0;
  for (const auto& corr : corrs) {
    const Eigen::Vector3d x = r * corr.y + h.t;
    if (x.z() <= kMinDepth) return std::numeric_limits<double>::infinity();
    const Eigen::Vector2d px(c.fx * x.x() / x.z() + c.cx, c.fy * x.y() / x.z() + c.cy);
    sse += (px - corr.p).squaredNorm();
  }
  return sse;
}

}  // namespace detail

/// Levenberg-style least-squares pose fit over >= 3 correspondences,
/// starting from init. Only improving steps are accepted, so the objective
/// is non-increasing; the initialization is returned unchanged when no
/// improvement is possible.
inline Pose pnp_least_squares(std::span<const Correspondence> corrs, const Intrinsics& c,
                              const Pose& init, int max_iterations = 50) {
  Pose pose = canonicalize(init);
  double sse = detail::pnp_objective(c, pose, corrs);
  if (!std::isfinite(sse)) return init;
  double lambda = 1e-6;
  for (int iter = 0; iter < max_iterations; ++iter) {
    const Eigen::Quaterniond q = quaternion_of(pose.theta);
    const Eigen::Matrix3d r = q.toRotationMatrix();
    Eigen::Matrix<double, 6, 6> jtj = Eigen::Matrix<double, 6, 6>::Zero();
    Eigen::Matrix<double, 6, 1> jtr = Eigen::Matrix<double, 6, 1>::Zero();
    for (const auto& corr : corrs) {
      const Eigen::Vector3d x = r * corr.y + pose.t;
      const Eigen::Vector2d px(c.fx * x.x() / x.z() + c.cx, c.fy * x.y() / x.z() + c.cy);
      const Eigen::Vector2d res = px - corr.p;
      const Eigen::Matrix<double, 2, 3> jp = projection_jacobian_point(c, x);
      Eigen::Matrix<double, 2, 6> j;
      j.leftCols<3>() = -jp * skew(r * corr.y);  // local rotation increment
      j.rightCols<3>() = jp;
      jtj += j.transpose() * j;
      jtr += j.transpose() * res;
    }
    if (jtr.lpNorm<Eigen::Infinity>() < 1e-14 * (1.0 + sse)) break;
    bool stepped = false;
    for (int attempt = 0; attempt < 8; ++attempt) {
      Eigen::Matrix<double, 6, 6> damped = jtj;
      damped.diagonal() += lambda * jtj.diagonal().cwiseMax(1e-12);
      const Eigen::Matrix<double, 6, 1> delta = damped.ldlt().solve(-jtr);
      Pose trial;
      trial.theta = theta_of_quaternion(quaternion_of(delta.head<3>()) * q);
      trial.t = pose.t + delta.tail<3>();
      const double trial_sse = detail::pnp_objective(c, trial, corrs);
      if (trial_sse < sse) {
        pose = trial;
        sse = trial_sse;
        lambda = std::max(lambda * 0.3, 1e-12);
        stepped = true;
        break;
      }
      lambda *= 10.0;
    }
    if (!stepped) break;
    if (sse < 1e-24) break;
  }
  return pose;
}

/// Minimal 4-point pose solve: P3P on three of the points, the remaining
/// point disambiguates, then a short least-squares polish over all four.
/// Empty on degenerate configurations.
inline std::optional<Pose> solve_pnp_minimal(std::span<const Correspondence> quad,
                                             const Intrinsics& c) {
  if (quad.size() != 4) return std::nullopt;
  Eigen::Matrix<double, 3, 4> bearings;
  for (int i = 0; i < 4; ++i)
    bearings.col(i) = unproject(c, quad[i].p, 1.0).normalized();

  Pose best;
  double best_sse = std::numeric_limits<double>::infinity();
  // try point triples until one is non-degenerate
  static constexpr int kTriples[4][3] = {{0, 1, 2}, {0, 1, 3}, {0, 2, 3}, {1, 2, 3}};
  for (const auto& tri : kTriples) {
    Eigen::Matrix3d world_pts, tri_bearings;
    for (int i = 0; i < 3; ++i) {
      world_pts.col(i) = quad[tri[i]].y;
      tri_bearings.col(i) = bearings.col(tri[i]);
    }
    const auto candidates = solve_p3p(world_pts, tri_bearings);
    for (const auto& cand : candidates) {
      const double sse = detail::pnp_objective(c, cand, quad);
      if (sse < best_sse) {
        best_sse = sse;
        best = cand;
      }
    }
    if (!candidates.empty()) break;
  }
  if (!std::isfinite(best_sse)) return std::nullopt;
  return canonicalize(pnp_least_squares(quad, c, best, 16));
}

/// Iterative least-squares PNP over any >= 4 correspondences. Without an
/// initialization, the best minimal solution over 10 internally sampled
/// quads seeds the fit.
inline Pose solve_pnp_iterative(std::span<const Correspondence> corrs, const Intrinsics& c,
                                std::optional<Pose> init = std::nullopt,
                                int max_iterations = 50) {
  if (corrs.size() < 4) throw TooFewCorrespondencesError("solve_pnp_iterative: need >= 4 points");
  if (!init) {
    RandomSource rng(0x9d5ac5u);  // internal, fixed: the solver stays a pure function
    double best_sse = std::numeric_limits<double>::infinity();
    Pose best;
    for (int attempt = 0; attempt < 10; ++attempt) {
      const auto idx = sample_distinct_indices(static_cast<int>(corrs.size()), 4, rng);
      const std::vector<Correspondence> quad = {corrs[idx[0]], corrs[idx[1]], corrs[idx[2]],
                                                corrs[idx[3]]};
      const auto cand = solve_pnp_minimal(quad, c);
      if (!cand) continue;
      const double sse = detail::pnp_objective(c, *cand, corrs);
      if (sse < best_sse) {
        best_sse = sse;
        best = *cand;
      }
    }
    if (!std::isfinite(best_sse)) return Pose::identity();
    init = best;
  }
  return canonicalize(pnp_least_squares(corrs, c, *init, max_iterations));
}

/// Line through two points. Empty when the x-coordinates coincide
/// (vertical line, not representable as y = a*x + b).
inline std::optional<LineModel> solve_line_minimal(const Eigen::Vector2d& p0,
                                                   const Eigen::Vector2d& p1) {
  const double dx = p1.x() - p0.x();
  if (std::abs(dx) < 1e-12) return std::nullopt;
  const double a = (p1.y() - p0.y()) / dx;
  return LineModel{a, p0.y() - a * p0.x()};
}

/// Least-squares line fit. Empty when the points do not span distinct x.
inline std::optional<LineModel> fit_line_lsq(std::span<const Eigen::Vector2d> pts) {
  if (pts.size() < 2) return std::nullopt;
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  for (const auto& p : pts) {
    sx += p.x();
    sy += p.y();
    sxx += p.x() * p.x();
    sxy += p.x() * p.y();
  }
  const double n = static_cast<double>(pts.size());
  const double det = n * sxx - sx * sx;
  if (std::abs(det) < 1e-12 * (1.0 + sxx) * n) return std::nullopt;
  const double a = (n * sxy - sx * sy) / det;
  return LineModel{a, (sy - a * sx) / n};
}

/// Indices with residual < tau. When more than max_inliers qualify, the
/// max_inliers smallest survive (ties broken by lower index). Ascending.
inline std::vector<int> select_inliers(const Eigen::VectorXd& errors,
                                       const RefinementParams& params) {
  std::vector<int> idx;
  for (int i = 0; i < errors.size(); ++i)
    if (errors[i] < params.tau) idx.push_back(i);
  if (static_cast<int>(idx.size()) > params.max_inliers) {
    std::stable_sort(idx.begin(), idx.end(),
                     [&](int a, int b) { return errors[a] < errors[b]; });
    idx.resize(params.max_inliers);
    std::sort(idx.begin(), idx.end());
  }
  return idx;
}

/// Iterated inlier reselection and re-solving. Stops early when the inlier
/// count drops below min_inliers or the inlier set repeats.
inline Pose refine_pose(const Pose& h, std::span<const Correspondence> ys, const Intrinsics& c,
                        const RefinementParams& params) {
  Pose current = h;
  std::vector<int> previous;
  for (int round = 0; round < params.iterations; ++round) {
    const Eigen::VectorXd errors = error_vector(c, current, ys);
    std::vector<int> inliers = select_inliers(errors, params);
    if (static_cast<int>(inliers.size()) < std::max(params.min_inliers, 4)) return current;
    if (inliers == previous) return current;
    std::vector<Correspondence> subset;
    subset.reserve(inliers.size());
    for (const int i : inliers) subset.push_back(ys[i]);
    current = solve_pnp_iterative(subset, c, current);
    previous = std::move(inliers);
  }
  return current;
}

inline Eigen::VectorXd line_residuals(const LineModel& m, std::span<const Eigen::Vector2d> pts,
                                      double cap) {
  Eigen::VectorXd e(static_cast<int>(pts.size()));
  for (int i = 0; i < e.size(); ++i)
    e[i] = std::min(std::abs(pts[i].y() - (m.a * pts[i].x() + m.b)), cap);
  return e;
}

inline LineModel refine_line(const LineModel& m, std::span<const Eigen::Vector2d> pts, double cap,
                             const RefinementParams& params) {
  LineModel current = m;
  std::vector<int> previous;
  for (int round = 0; round < params.iterations; ++round) {
    const Eigen::VectorXd errors = line_residuals(current, pts, cap);
    std::vector<int> inliers = select_inliers(errors, params);
    if (static_cast<int>(inliers.size()) < std::max(params.min_inliers, 2)) return current;
    if (inliers == previous) return current;
    std::vector<Eigen::Vector2d> subset;
    subset.reserve(inliers.size());
    for (const int i : inliers) subset.push_back(pts[i]);
    const auto fitted = fit_line_lsq(subset);
    if (!fitted) return current;
    current = *fitted;
    previous = std::move(inliers);
  }
  return current;
}

}  // namespace dsac

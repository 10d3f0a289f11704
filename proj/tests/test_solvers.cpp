#include <catch2/catch_amalgamated.hpp>

#include "dsac/solvers.hpp"
#include "test_util.hpp"

using namespace dsac;

namespace {

// Independent least-squares oracle: finite-difference gradient descent with
// backtracking line search, restarted from random perturbations of the
// ground truth. Deliberately avoids the library's Levenberg machinery.
double nlsq_restart_oracle(std::span<const Correspondence> corrs, const Intrinsics& c,
                           const Pose& truth, RandomSource& rng, int restarts = 20) {
  const auto objective = [&](const Eigen::Matrix<double, 6, 1>& p) {
    double sse = 0.0;
    const Pose h = Pose::from_params(p);
    for (const auto& corr : corrs) {
      const auto px = project(c, h, corr.y);
      if (!px) return 1e30;
      sse += (corr.p - *px).squaredNorm();
    }
    return sse;
  };
  double best = std::numeric_limits<double>::infinity();
  for (int restart = 0; restart < restarts; ++restart) {
    Eigen::Matrix<double, 6, 1> p = truth.params();
    for (int k = 0; k < 6; ++k) p[k] += rng.normal(0.0, k < 3 ? 0.01 : 1.0);
    double f = objective(p);
    for (int iter = 0; iter < 400; ++iter) {
      Eigen::Matrix<double, 6, 1> g;
      const double fd_step = 1e-7;
      for (int k = 0; k < 6; ++k) {
        Eigen::Matrix<double, 6, 1> pp = p, pm = p;
        pp[k] += fd_step;
        pm[k] -= fd_step;
        g[k] = (objective(pp) - objective(pm)) / (2 * fd_step);
      }
      double step = 1.0;
      bool moved = false;
      for (int bt = 0; bt < 40; ++bt) {
        const Eigen::Matrix<double, 6, 1> cand = p - step * g;
        const double fc = objective(cand);
        if (fc < f) {
          p = cand;
          f = fc;
          moved = true;
          break;
        }
        step *= 0.5;
      }
      if (!moved) break;
    }
    best = std::min(best, f);
  }
  return best;
}

double total_sq_reproj(std::span<const Correspondence> corrs, const Intrinsics& c,
                       const Pose& h) {
  double sse = 0.0;
  for (const auto& corr : corrs) {
    const auto px = project(c, h, corr.y);
    sse += px ? (corr.p - *px).squaredNorm() : 1e30;
  }
  return sse;
}

}  // namespace

TEST_CASE("quartic root helper finds all real roots") {
  // (x^2 - 1)(x^2 - 4) = x^4 - 5 x^2 + 4
  auto roots = detail::real_polynomial_roots({1, 0, -5, 0, 4});
  std::sort(roots.begin(), roots.end());
  REQUIRE(roots.size() == 4);
  CHECK(roots[0] == Catch::Approx(-2.0).margin(1e-10));
  CHECK(roots[1] == Catch::Approx(-1.0).margin(1e-10));
  CHECK(roots[2] == Catch::Approx(1.0).margin(1e-10));
  CHECK(roots[3] == Catch::Approx(2.0).margin(1e-10));
}

TEST_CASE("solve_pnp_minimal: noise-free round trip") {
  RandomSource rng(31);
  const Intrinsics c = test::test_intrinsics();
  int solved = 0;
  for (int trial = 0; trial < 300; ++trial) {
    const Pose truth = test::random_pose(rng);
    const auto quad = test::make_exact_correspondences(truth, c, 4, rng);
    const auto est = solve_pnp_minimal(quad, c);
    REQUIRE(est.has_value());
    CHECK(pose_loss(*est, truth) < 1e-6);
    ++solved;
  }
  CHECK(solved == 300);
}

TEST_CASE("solve_pnp_minimal: collinear points are degenerate") {
  RandomSource rng(32);
  const Intrinsics c = test::test_intrinsics();
  const Pose truth = test::random_pose(rng);
  std::vector<Correspondence> quad;
  for (int i = 0; i < 4; ++i) {
    Correspondence corr;
    corr.y = Eigen::Vector3d(1, 2, 3) + i * Eigen::Vector3d(0.5, -0.2, 0.1);  // collinear in 3D
    const auto px = project(c, truth, corr.y);
    corr.p = px.value_or(Eigen::Vector2d(320, 240));
    corr.grid_index = i;
    quad.push_back(corr);
  }
  CHECK_FALSE(solve_pnp_minimal(quad, c).has_value());
}

TEST_CASE("solve_pnp_minimal: noisy quad reaches the least-squares oracle") {
  RandomSource rng(33);
  const Intrinsics c = test::test_intrinsics();
  for (int trial = 0; trial < 10; ++trial) {
    const Pose truth = test::random_pose(rng);
    auto quad = test::make_exact_correspondences(truth, c, 4, rng);
    for (auto& corr : quad) corr.p += Eigen::Vector2d(rng.normal(), rng.normal());
    const auto est = solve_pnp_minimal(quad, c);
    if (!est) continue;  // noise can push a quad degenerate; resampling is the caller's job
    const double mine = total_sq_reproj(quad, c, *est);
    const double oracle = nlsq_restart_oracle(quad, c, truth, rng);
    CHECK(mine <= oracle + 1e-6);
  }
}

TEST_CASE("solve_pnp_iterative: exact data, fixed point, oracle comparison") {
  RandomSource rng(34);
  const Intrinsics c = test::test_intrinsics();

  const Pose truth = test::random_pose(rng);
  const auto corrs = test::make_exact_correspondences(truth, c, 20, rng);
  const Pose est = solve_pnp_iterative(corrs, c);
  CHECK(total_sq_reproj(corrs, c, est) < 1e-10);

  // init at the answer stays at the answer
  const Pose fixed = solve_pnp_iterative(corrs, c, truth);
  CHECK(pose_loss(fixed, truth) < 1e-9);

  // noisy points: at least as good as the best minimal solve on subsets
  auto noisy = corrs;
  for (auto& corr : noisy) corr.p += Eigen::Vector2d(rng.normal(), rng.normal());
  double best_minimal = std::numeric_limits<double>::infinity();
  for (int attempt = 0; attempt < 10; ++attempt) {
    const auto idx = sample_distinct_indices(static_cast<int>(noisy.size()), 4, rng);
    const std::vector<Correspondence> quad = {noisy[idx[0]], noisy[idx[1]], noisy[idx[2]],
                                              noisy[idx[3]]};
    const auto cand = solve_pnp_minimal(quad, c);
    if (cand) best_minimal = std::min(best_minimal, total_sq_reproj(noisy, c, *cand));
  }
  const Pose fit = solve_pnp_iterative(noisy, c);
  CHECK(total_sq_reproj(noisy, c, fit) <= best_minimal + 1e-9);

  CHECK_THROWS_AS(solve_pnp_iterative(std::span<const Correspondence>(corrs.data(), 3), c),
                  TooFewCorrespondencesError);
}

TEST_CASE("solve_pnp_iterative objective is monotone in the iteration budget") {
  RandomSource rng(35);
  const Intrinsics c = test::test_intrinsics();
  const Pose truth = test::random_pose(rng);
  auto corrs = test::make_exact_correspondences(truth, c, 30, rng);
  for (auto& corr : corrs) corr.p += Eigen::Vector2d(rng.normal(0, 2), rng.normal(0, 2));
  Pose init = truth;
  init.t += Eigen::Vector3d(4, -3, 5);
  init.theta = canonicalize_rotation(init.theta + Eigen::Vector3d(0.03, 0.02, -0.04));
  double prev = total_sq_reproj(corrs, c, init);
  for (int budget = 1; budget <= 10; ++budget) {
    const Pose est = solve_pnp_iterative(corrs, c, init, budget);
    const double sse = total_sq_reproj(corrs, c, est);
    CHECK(sse <= prev + 1e-9);
    prev = sse;
  }
}

TEST_CASE("solve_line_minimal") {
  auto line = solve_line_minimal({0, 0}, {1, 1});
  REQUIRE(line.has_value());
  CHECK(line->a == Catch::Approx(1.0));
  CHECK(line->b == Catch::Approx(0.0).margin(1e-15));

  line = solve_line_minimal({0, 2}, {3, 2});
  REQUIRE(line.has_value());
  CHECK(line->a == Catch::Approx(0.0).margin(1e-15));
  CHECK(line->b == Catch::Approx(2.0));

  CHECK_FALSE(solve_line_minimal({1, 1}, {1, 5}).has_value());
}

TEST_CASE("line solver leaves zero residual on its inputs") {
  RandomSource rng(36);
  for (int trial = 0; trial < 200; ++trial) {
    const Eigen::Vector2d p0(rng.uniform(-5, 5), rng.uniform(-5, 5));
    const Eigen::Vector2d p1(p0.x() + rng.uniform(0.1, 5.0), rng.uniform(-5, 5));
    const auto line = solve_line_minimal(p0, p1);
    REQUIRE(line.has_value());
    CHECK(std::abs(p0.y() - (line->a * p0.x() + line->b)) < 1e-9);
    CHECK(std::abs(p1.y() - (line->a * p1.x() + line->b)) < 1e-9);
  }
}

TEST_CASE("select_inliers: threshold filter oracle, cap, tie break") {
  RandomSource rng(37);
  RefinementParams params;
  params.tau = 10.0;
  params.max_inliers = 100;

  // noise-free: everything qualifies, capped
  Eigen::VectorXd zeros = Eigen::VectorXd::Zero(400);
  auto idx = select_inliers(zeros, params);
  CHECK(static_cast<int>(idx.size()) == 100);

  params.tau = 0.0;
  CHECK(select_inliers(zeros, params).empty());

  params.tau = 10.0;
  for (int trial = 0; trial < 50; ++trial) {
    Eigen::VectorXd e(60);
    for (int i = 0; i < e.size(); ++i) e[i] = rng.uniform(0.0, 20.0);
    params.max_inliers = 100;
    idx = select_inliers(e, params);
    std::vector<int> oracle;
    for (int i = 0; i < e.size(); ++i)
      if (e[i] < params.tau) oracle.push_back(i);
    CHECK(idx == oracle);

    // subset of [0,n), strictly increasing (no duplicates)
    for (size_t k = 1; k < idx.size(); ++k) CHECK(idx[k] > idx[k - 1]);

    params.max_inliers = 5;
    idx = select_inliers(e, params);
    CHECK(static_cast<int>(idx.size()) <= 5);
  }

  // equal errors: cap keeps the lowest indices
  Eigen::VectorXd ties = Eigen::VectorXd::Constant(10, 1.0);
  params.max_inliers = 3;
  idx = select_inliers(ties, params);
  CHECK(idx == std::vector<int>{0, 1, 2});
}

TEST_CASE("refine_pose: fixed point and min-inlier early stop") {
  RandomSource rng(38);
  const Intrinsics c = test::test_intrinsics();
  RefinementParams params;
  params.min_inliers = 50;

  const Pose truth = test::random_pose(rng);
  const auto corrs = test::make_exact_correspondences(truth, c, 200, rng);
  const Pose refined = refine_pose(truth, corrs, c, params);
  CHECK(pose_loss(refined, truth) < 1e-7);

  // a hypothesis with too few inliers is returned unchanged
  Pose far = truth;
  far.t += Eigen::Vector3d(500, 500, 500);
  const Pose unchanged = refine_pose(far, corrs, c, params);
  CHECK((unchanged.params() - far.params()).norm() == 0.0);
}

TEST_CASE("refine_line: Monte-Carlo inlier growth") {
  RandomSource rng(39);
  RefinementParams params;
  params.tau = 0.3;
  params.max_inliers = 100;
  params.min_inliers = 2;
  params.iterations = 8;
  const double cap = 10.0;

  int grew = 0;
  const int trials = 1000;
  for (int trial = 0; trial < trials; ++trial) {
    const LineModel truth{rng.uniform(-1.5, 1.5), rng.uniform(-2, 2)};
    std::vector<Eigen::Vector2d> pts;
    for (int i = 0; i < 40; ++i) {
      const double x = rng.uniform(-5, 5);
      double y = truth.a * x + truth.b + rng.normal(0.0, 0.1);
      if (rng.uniform() < 0.3) y = rng.uniform(-8, 8);  // outliers
      pts.emplace_back(x, y);
    }
    // "pool winner": best of a few random 2-point hypotheses
    LineModel winner{0, 0};
    int winner_inliers = -1;
    for (int h = 0; h < 16; ++h) {
      const auto idx = sample_distinct_indices(static_cast<int>(pts.size()), 2, rng);
      const auto cand = solve_line_minimal(pts[idx[0]], pts[idx[1]]);
      if (!cand) continue;
      const int inl =
          static_cast<int>(select_inliers(line_residuals(*cand, pts, cap), params).size());
      if (inl > winner_inliers) {
        winner_inliers = inl;
        winner = *cand;
      }
    }
    if (winner_inliers < 0) continue;
    const LineModel refined = refine_line(winner, pts, cap, params);
    const int after =
        static_cast<int>(select_inliers(line_residuals(refined, pts, cap), params).size());
    if (after >= winner_inliers) ++grew;
  }
  CHECK(grew >= static_cast<int>(0.9 * trials));
}

TEST_CASE("refine_pose is idempotent at an inlier fixed point") {
  RandomSource rng(40);
  const Intrinsics c = test::test_intrinsics();
  RefinementParams params;
  params.min_inliers = 20;
  const Pose truth = test::random_pose(rng);
  auto corrs = test::make_exact_correspondences(truth, c, 120, rng);
  for (auto& corr : corrs) corr.p += Eigen::Vector2d(rng.normal(0, 1), rng.normal(0, 1));
  const Pose once = refine_pose(truth, corrs, c, params);
  const Pose twice = refine_pose(once, corrs, c, params);
  CHECK((once.params() - twice.params()).lpNorm<Eigen::Infinity>() < 1e-9);
}

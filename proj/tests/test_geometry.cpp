#include <catch2/catch_amalgamated.hpp>

#include "dsac/geometry.hpp"
#include "test_util.hpp"

using namespace dsac;

namespace {

// Independent oracle: full homogeneous-matrix pipeline K [R|t] y.
Eigen::Vector2d project_homogeneous_oracle(const Intrinsics& c, const Pose& h,
                                           const Eigen::Vector3d& y) {
  Eigen::Matrix4d m = Eigen::Matrix4d::Identity();
  m.topLeftCorner<3, 3>() = rotation_matrix(h.theta);
  m.topRightCorner<3, 1>() = h.t;
  Eigen::Matrix<double, 3, 4> k = Eigen::Matrix<double, 3, 4>::Zero();
  k(0, 0) = c.fx;
  k(1, 1) = c.fy;
  k(0, 2) = c.cx;
  k(1, 2) = c.cy;
  k(2, 2) = 1.0;
  const Eigen::Vector3d hom = k * m * y.homogeneous();
  return hom.head<2>() / hom.z();
}

// Independent oracle: rotation angle from the trace of the relative matrix.
double angle_trace_oracle_deg(const Eigen::Vector3d& ta, const Eigen::Vector3d& tb) {
  const Eigen::Matrix3d rel = rotation_matrix(ta) * rotation_matrix(tb).transpose();
  const double arg = std::clamp((rel.trace() - 1.0) / 2.0, -1.0, 1.0);
  return std::acos(arg) * 180.0 / kPi;
}

}  // namespace

TEST_CASE("project: principal ray and similar triangles") {
  Intrinsics c1{1, 1, 0, 0};
  auto px = project(c1, Pose::identity(), {0, 0, 1});
  REQUIRE(px.has_value());
  CHECK(px->norm() == Catch::Approx(0.0).margin(1e-15));

  Intrinsics c2{2, 2, 0, 0};
  px = project(c2, Pose::identity(), {1, 0, 2});
  REQUIRE(px.has_value());
  CHECK((*px - Eigen::Vector2d(1, 0)).norm() == Catch::Approx(0.0).margin(1e-15));
}

TEST_CASE("project matches homogeneous-matrix oracle") {
  RandomSource rng(11);
  const Intrinsics c = test::test_intrinsics();
  for (int trial = 0; trial < 200; ++trial) {
    const Pose h = test::random_pose(rng);
    const auto corrs = test::make_exact_correspondences(h, c, 1, rng);
    const auto px = project(c, h, corrs[0].y);
    REQUIRE(px.has_value());
    const Eigen::Vector2d oracle = project_homogeneous_oracle(c, h, corrs[0].y);
    CHECK((*px - oracle).norm() < 1e-9);
  }
}

TEST_CASE("project rejects non-positive depth") {
  const Intrinsics c = test::test_intrinsics();
  CHECK_FALSE(project(c, Pose::identity(), {0, 0, -1}).has_value());
  CHECK_FALSE(project(c, Pose::identity(), {0, 0, 0}).has_value());
}

TEST_CASE("reprojection_error basics") {
  const Intrinsics c = test::test_intrinsics();
  RandomSource rng(12);
  const Pose h = test::random_pose(rng);
  auto corrs = test::make_exact_correspondences(h, c, 3, rng);

  CHECK(reprojection_error(c, h, corrs[0]) == Catch::Approx(0.0).margin(1e-9));

  Correspondence off = corrs[1];
  off.p += Eigen::Vector2d(3, 4);
  CHECK(reprojection_error(c, h, off) == Catch::Approx(5.0).margin(1e-9));

  Correspondence behind;
  behind.p = Eigen::Vector2d(100, 100);
  behind.y = Eigen::Vector3d(0, 0, -50);
  CHECK(reprojection_error(c, Pose::identity(), behind) == kErrorCap);
}

TEST_CASE("error_vector: grid order, clamping, permutation invariance") {
  const Intrinsics c = test::test_intrinsics();
  RandomSource rng(13);
  const Pose h = test::random_pose(rng);
  auto corrs = test::make_exact_correspondences(h, c, 40, rng);

  Eigen::VectorXd e = error_vector(c, h, corrs);
  REQUIRE(e.size() == 40);
  CHECK(e.maxCoeff() < 1e-9);

  // arbitrary hypothesis stays within [0, cap]
  const Pose other = test::random_pose(rng);
  e = error_vector(c, other, corrs);
  CHECK(e.minCoeff() >= 0.0);
  CHECK(e.maxCoeff() <= kErrorCap);

  // permuting the correspondence set does not change the vector
  std::vector<Correspondence> shuffled = corrs;
  for (int i = static_cast<int>(shuffled.size()) - 1; i > 0; --i)
    std::swap(shuffled[i], shuffled[rng.uniform_index(i + 1)]);
  const Eigen::VectorXd e_shuffled = error_vector(c, other, shuffled);
  CHECK((e - e_shuffled).lpNorm<Eigen::Infinity>() == 0.0);

  CHECK_THROWS_AS(error_vector(c, h, std::span<const Correspondence>{}), EmptyInputError);
}

TEST_CASE("error_vector supports the 40x40 grid size") {
  const Intrinsics c = test::test_intrinsics();
  RandomSource rng(14);
  const Pose h = test::random_pose(rng);
  const auto corrs = test::make_exact_correspondences(h, c, 1600, rng);
  CHECK(error_vector(c, h, corrs).size() == 1600);
}

TEST_CASE("pose_loss: identity, decoupled components, trace oracle") {
  RandomSource rng(15);
  const Pose h = test::random_pose(rng);
  CHECK(pose_loss(h, h) == 0.0);

  // camera poses differing by exactly 5 degrees and 3 cm
  Pose cam_a;  // identity camera
  Pose cam_b;
  cam_b.theta = Eigen::Vector3d::UnitX() * (5.0 * kPi / 180.0);
  cam_b.t = Eigen::Vector3d(3, 0, 0);
  CHECK(pose_loss(invert_pose(cam_a), invert_pose(cam_b)) == Catch::Approx(5.0).margin(1e-9));

  for (int trial = 0; trial < 100; ++trial) {
    const Pose a = test::random_pose(rng);
    const Pose b = test::random_pose(rng);
    const Pose ca = invert_pose(a), cb = invert_pose(b);
    const double expected =
        std::max(angle_trace_oracle_deg(ca.theta, cb.theta), (ca.t - cb.t).norm());
    CHECK(pose_loss(a, b) == Catch::Approx(expected).margin(1e-7));
    CHECK(pose_loss(b, a) == Catch::Approx(pose_loss(a, b)).margin(1e-9));  // symmetry
    CHECK(pose_loss(a, b) >= 0.0);
  }
}

TEST_CASE("invert_pose: group axioms") {
  RandomSource rng(16);
  CHECK(invert_pose(Pose::identity()).params().norm() == 0.0);

  Pose trans;
  trans.t = Eigen::Vector3d(1, -2, 3);
  const Pose inv = invert_pose(trans);
  CHECK(inv.theta.norm() == 0.0);
  CHECK((inv.t + trans.t).norm() == Catch::Approx(0.0).margin(1e-15));

  for (int trial = 0; trial < 100; ++trial) {
    const Pose p = test::random_pose(rng);
    const Pose id = compose(p, invert_pose(p));
    CHECK(id.params().lpNorm<Eigen::Infinity>() < 1e-9);
    const Pose twice = invert_pose(invert_pose(p));
    CHECK((twice.params() - p.params()).lpNorm<Eigen::Infinity>() < 1e-9);
  }
}

TEST_CASE("rotation_angle_deg basics and oracle") {
  RandomSource rng(17);
  CHECK(rotation_angle_deg(Eigen::Vector3d(0.3, -0.2, 0.9), Eigen::Vector3d(0.3, -0.2, 0.9)) ==
        Catch::Approx(0.0).margin(1e-12));
  CHECK(rotation_angle_deg(Eigen::Vector3d::Zero(), Eigen::Vector3d(0, 0, kPi)) ==
        Catch::Approx(180.0).margin(1e-9));
  for (int trial = 0; trial < 200; ++trial) {
    const Eigen::Vector3d a = test::random_unit(rng) * rng.uniform(0.0, kPi);
    const Eigen::Vector3d b = test::random_unit(rng) * rng.uniform(0.0, kPi);
    const double deg = rotation_angle_deg(a, b);
    CHECK(deg >= 0.0);
    CHECK(deg <= 180.0);
    CHECK(deg == Catch::Approx(angle_trace_oracle_deg(a, b)).margin(1e-6));
  }
}

TEST_CASE("axis-angle composition agrees with rotation-matrix oracle") {
  RandomSource rng(18);
  for (int trial = 0; trial < 200; ++trial) {
    const Pose a = test::random_pose(rng);
    const Pose b = test::random_pose(rng);
    const Pose ab = compose(a, b);
    CHECK(ab.theta.norm() <= kPi + 1e-12);
    const Eigen::Matrix3d oracle = rotation_matrix(a.theta) * rotation_matrix(b.theta);
    CHECK((rotation_matrix(ab.theta) - oracle).lpNorm<Eigen::Infinity>() < 1e-9);
    const Eigen::Vector3d t_oracle = rotation_matrix(a.theta) * b.t + a.t;
    CHECK((ab.t - t_oracle).lpNorm<Eigen::Infinity>() < 1e-9);
  }
}

TEST_CASE("canonicalize_rotation maps long representations to the short side") {
  RandomSource rng(19);
  for (int trial = 0; trial < 100; ++trial) {
    const Eigen::Vector3d axis = test::random_unit(rng);
    const double angle = rng.uniform(0.0, 4.0 * kPi);
    const Eigen::Vector3d canon = canonicalize_rotation(axis * angle);
    CHECK(canon.norm() <= kPi + 1e-12);
    CHECK((rotation_matrix(canon) - rotation_matrix(axis * angle)).lpNorm<Eigen::Infinity>() <
          1e-9);
  }
}

TEST_CASE("project/unproject round trip") {
  RandomSource rng(20);
  const Intrinsics c = test::test_intrinsics();
  for (int trial = 0; trial < 200; ++trial) {
    const Eigen::Vector2d px(rng.uniform(0, 640), rng.uniform(0, 480));
    const double depth = rng.uniform(0.01, 500.0);
    const auto back = project(c, Pose::identity(), unproject(c, px, depth));
    REQUIRE(back.has_value());
    CHECK((*back - px).norm() < 1e-9);
  }
}

TEST_CASE("rotate_point_jacobian_theta matches central differences") {
  RandomSource rng(21);
  for (int trial = 0; trial < 100; ++trial) {
    const Eigen::Vector3d theta =
        trial == 0 ? Eigen::Vector3d::Zero() : Eigen::Vector3d(test::random_unit(rng) * rng.uniform(0.0, 3.0));
    const Eigen::Vector3d v(rng.normal(), rng.normal(), rng.normal());
    const Eigen::Matrix3d j = rotate_point_jacobian_theta(theta, v);
    const double step = 1e-6;
    for (int k = 0; k < 3; ++k) {
      Eigen::Vector3d tp = theta, tm = theta;
      tp[k] += step;
      tm[k] -= step;
      const Eigen::Vector3d fd =
          (rotation_matrix(tp) * v - rotation_matrix(tm) * v) / (2.0 * step);
      CHECK((j.col(k) - fd).norm() < 1e-6 * (1.0 + v.norm()));
    }
  }
}

TEST_CASE("reprojection_error_gradient matches central differences") {
  RandomSource rng(22);
  const Intrinsics c = test::test_intrinsics();
  int checked = 0;
  while (checked < 50) {
    const Pose h = test::random_pose(rng);
    auto corrs = test::make_exact_correspondences(h, c, 1, rng);
    corrs[0].p += Eigen::Vector2d(rng.uniform(-20, 20), rng.uniform(-20, 20));
    const double e0 = reprojection_error(c, h, corrs[0]);
    if (e0 < 1.0 || e0 > 0.9 * kErrorCap) continue;  // stay off the kinks
    const auto g = reprojection_error_gradient(c, h, corrs[0]);
    const double step = 1e-6;
    for (int k = 0; k < 3; ++k) {
      Correspondence cp = corrs[0], cm = corrs[0];
      cp.y[k] += step;
      cm.y[k] -= step;
      const double fd = (reprojection_error(c, h, cp) - reprojection_error(c, h, cm)) / (2 * step);
      CHECK(g.d_point[k] == Catch::Approx(fd).margin(1e-5));
    }
    for (int k = 0; k < 6; ++k) {
      Pose hp = h, hm = h;
      Eigen::Matrix<double, 6, 1> pp = h.params();
      pp[k] += step;
      hp = Pose::from_params(pp);
      pp[k] -= 2 * step;
      hm = Pose::from_params(pp);
      const double fd =
          (reprojection_error(c, hp, corrs[0]) - reprojection_error(c, hm, corrs[0])) / (2 * step);
      CHECK(g.d_pose[k] == Catch::Approx(fd).margin(1e-5));
    }
    ++checked;
  }
}

#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "dsac/errors.hpp"
#include "dsac/geometry.hpp"
#include "dsac/models.hpp"
#include "dsac/problems.hpp"
#include "dsac/rng.hpp"
#include "dsac/solvers.hpp"

namespace dsac {

enum class Strategy { kRansac, kSoftAm, kDsac };

inline std::string strategy_name(Strategy s) {
  switch (s) {
    case Strategy::kRansac: return "ransac";
    case Strategy::kSoftAm: return "softam";
    case Strategy::kDsac: return "dsac";
  }
  return "?";
}

inline Strategy strategy_from_name(const std::string& name) {
  if (name == "ransac") return Strategy::kRansac;
  if (name == "softam") return Strategy::kSoftAm;
  if (name == "dsac") return Strategy::kDsac;
  throw Error("unknown strategy: " + name);
}

struct TrainConfig {
  Strategy strategy = Strategy::kDsac;
  int pool_size = 64;
  double tau = 10.0;
  double beta = 10.0;
  RefinementParams refinement{/*tau=*/10.0, /*max_inliers=*/100, /*min_inliers=*/50,
                              /*iterations=*/8};

  // componentwise phase (Adam)
  double adam_lr = 1e-4;
  int adam_halve_every = 50000;
  int batch_size = 64;
  int coord_updates = 20000;
  int score_updates = 2000;
  int score_pairs = 2000;

  // end-to-end phase (SGD + momentum, clamped gradients)
  double lr_w = 1e-3;
  double lr_v = 1e-4;
  double momentum = 0.9;
  double clamp = 0.1;
  int e2e_updates = 2000;
  int k_samples = 8;          // Monte-Carlo draws per update (probabilistic strategy)
  double cd_subsample = 0.01; // fraction of data columns for the refinement jacobian
  bool train_w = true;        // ablation switches
  bool train_v = true;

  std::uint64_t seed = 1;
};

// ---------------------------------------------------------------------------
// Optimizers
// ---------------------------------------------------------------------------

struct AdamState {
  Eigen::VectorXd m;
  Eigen::VectorXd v;
  long step = 0;
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  long halve_every = 50000;  // learning rate halves after each block

  static AdamState create(int dim, double lr, long halve_every = 50000) {
    AdamState s;
    s.m = Eigen::VectorXd::Zero(dim);
    s.v = Eigen::VectorXd::Zero(dim);
    s.lr = lr;
    s.halve_every = halve_every;
    return s;
  }
};

inline void adam_step(AdamState& state, Eigen::VectorXd& params, const Eigen::VectorXd& grad) {
  if (params.size() != state.m.size() || grad.size() != state.m.size())
    throw DimensionMismatchError("adam_step: shape mismatch");
  state.step += 1;
  const double lr =
      state.lr * std::pow(0.5, static_cast<double>((state.step - 1) / state.halve_every));
  state.m = state.beta1 * state.m + (1.0 - state.beta1) * grad;
  state.v = state.beta2 * state.v + (1.0 - state.beta2) * grad.cwiseProduct(grad);
  const double c1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
  params -= (lr * (state.m / c1).array() / ((state.v / c2).array().sqrt() + state.eps)).matrix();
}

struct SgdMomentumState {
  Eigen::VectorXd velocity;
  double lr = 1e-3;
  double momentum = 0.9;
  double clamp = 0.1;

  static SgdMomentumState create(int dim, double lr, double momentum = 0.9, double clamp = 0.1) {
    SgdMomentumState s;
    s.velocity = Eigen::VectorXd::Zero(dim);
    s.lr = lr;
    s.momentum = momentum;
    s.clamp = clamp;
    return s;
  }
};

/// Clamps the gradient elementwise to [-clamp, clamp] before the momentum
/// update, so each applied step is bounded by lr * clamp / (1 - momentum).
inline void sgd_momentum_step(SgdMomentumState& state, Eigen::VectorXd& params,
                              const Eigen::VectorXd& grad) {
  if (params.size() != state.velocity.size() || grad.size() != state.velocity.size())
    throw DimensionMismatchError("sgd_momentum_step: shape mismatch");
  const Eigen::VectorXd clamped = grad.cwiseMax(-state.clamp).cwiseMin(state.clamp);
  state.velocity = state.momentum * state.velocity + clamped;
  params -= state.lr * state.velocity;
}

// ---------------------------------------------------------------------------
// Pose perturbation and componentwise training
// ---------------------------------------------------------------------------

/// Perturbs the *camera* pose underlying the scene pose h: rotation by
/// angle_deg about a random axis, translation by dist_cm along a random
/// direction. The components decouple, so pose_loss(result, h) equals
/// max(angle_deg, dist_cm) exactly.
inline Pose perturb_pose(const Pose& h, double angle_deg, double dist_cm, RandomSource& rng) {
  auto random_unit = [&rng] {
    Eigen::Vector3d v(rng.normal(), rng.normal(), rng.normal());
    while (v.norm() < 1e-9) v = Eigen::Vector3d(rng.normal(), rng.normal(), rng.normal());
    return v.normalized();
  };
  Pose cam = invert_pose(h);
  const Eigen::Vector3d delta = random_unit() * (angle_deg * kPi / 180.0);
  cam.theta = theta_of_quaternion(quaternion_of(delta) * quaternion_of(cam.theta));
  cam.t += random_unit() * dist_cm;
  return canonicalize(invert_pose(cam));
}

struct SupervisedSet {
  std::vector<Eigen::VectorXd> inputs;
  std::vector<Eigen::VectorXd> targets;
};

/// Minimizes the Euclidean prediction loss with Adam over random
/// mini-batches. Bit-reproducible from (config, rng state).
inline Eigen::VectorXd train_coordinate_componentwise(const SupervisedSet& data,
                                                      const MlpSpec& spec,
                                                      const TrainConfig& config,
                                                      RandomSource& rng) {
  if (data.inputs.empty()) throw EmptyInputError("train_coordinate_componentwise: no samples");
  Eigen::VectorXd w = mlp_init(spec, rng);
  AdamState opt = AdamState::create(spec.param_count(), config.adam_lr, config.adam_halve_every);
  Eigen::VectorXd grad(spec.param_count());
  MlpWorkspace ws;
  for (int update = 0; update < config.coord_updates; ++update) {
    grad.setZero();
    for (int b = 0; b < config.batch_size; ++b) {
      const int i = static_cast<int>(rng.uniform_index(data.inputs.size()));
      const Eigen::VectorXd y = mlp_forward(spec, w, data.inputs[i], &ws);
      Eigen::VectorXd residual = y - data.targets[i];
      const double n = residual.norm();
      if (n > 0.0) residual /= n;  // gradient of the unsquared norm
      grad += mlp_backward(spec, w, ws, residual).d_params;
    }
    grad /= static_cast<double>(config.batch_size);
    adam_step(opt, w, grad);
  }
  return w;
}

struct ScorePair {
  Eigen::VectorXd errors;  // clamped reprojection errors, grid order
  double target;           // -beta * pose_loss
};

/// Synthetic score-training data: the ground-truth pose of a random frame
/// is perturbed either below or above the 5 degree / 5 cm threshold (fair
/// coin), the reprojection errors of the *predicted* coordinates under the
/// perturbed pose form the input, and the target is -beta * pose_loss.
inline std::vector<ScorePair> generate_score_training_data(const SceneDataset& ds,
                                                           const MlpSpec& predictor_spec,
                                                           const Eigen::VectorXd& w,
                                                           const TrainConfig& config,
                                                           RandomSource& rng) {
  std::vector<ScorePair> pairs;
  pairs.reserve(config.score_pairs);
  const Intrinsics& intr = ds.config.intrinsics;
  for (int k = 0; k < config.score_pairs; ++k) {
    const SceneFrame& frame = ds.train[rng.uniform_index(ds.train.size())];
    std::vector<Eigen::Vector3d> coords;
    coords.reserve(frame.features.size());
    for (const auto& f : frame.features) coords.push_back(mlp_forward(predictor_spec, w, f));
    const auto corrs = make_correspondences(frame, coords);

    const bool below = rng.uniform() < 0.5;
    const double angle = below ? rng.uniform(0.0, 5.0) : rng.uniform(5.0, 30.0);
    const double dist = below ? rng.uniform(0.0, 5.0) : rng.uniform(5.0, 50.0);
    const Pose perturbed = perturb_pose(frame.gt_pose, angle, dist, rng);

    ScorePair pair;
    pair.errors = error_vector(intr, perturbed, corrs);
    pair.target = -config.beta * pose_loss(perturbed, frame.gt_pose);
    pairs.push_back(std::move(pair));
  }
  return pairs;
}

/// Line-problem analog of the synthetic score data: the ground-truth line
/// parameters get an offset drawn below or above a unit task threshold.
inline std::vector<ScorePair> generate_line_score_training_data(
    std::span<const LineDataset> instances, const MlpSpec& predictor_spec,
    const Eigen::VectorXd& w, const LineFitProblem& problem, const TrainConfig& config,
    RandomSource& rng) {
  std::vector<ScorePair> pairs;
  pairs.reserve(config.score_pairs);
  for (int k = 0; k < config.score_pairs; ++k) {
    const LineDataset& inst = instances[rng.uniform_index(instances.size())];
    std::vector<Eigen::Vector2d> pts;
    pts.reserve(inst.points.size());
    for (size_t i = 0; i < inst.points.size(); ++i)
      pts.emplace_back(inst.points[i].x(), mlp_forward(predictor_spec, w, inst.features[i])[0]);

    const bool below = rng.uniform() < 0.5;
    const double magnitude = below ? rng.uniform(0.0, 0.5) : rng.uniform(0.5, 3.0);
    const double angle = rng.uniform(0.0, 2.0 * kPi);
    LineModel perturbed = inst.gt_line;
    perturbed.a += magnitude * std::cos(angle);
    perturbed.b += magnitude * std::sin(angle);

    ScorePair pair;
    pair.errors = problem.residual_vector(perturbed, pts);
    pair.target = -config.beta * problem.task_loss(perturbed, inst.gt_line);
    pairs.push_back(std::move(pair));
  }
  return pairs;
}

/// Minimizes |s - s*| with Adam. Error vectors are scaled by the cap before
/// they reach the scorer.
inline Eigen::VectorXd train_score_componentwise(const std::vector<ScorePair>& pairs,
                                                 const MlpSpec& spec, double error_cap,
                                                 const TrainConfig& config, RandomSource& rng) {
  if (pairs.empty()) throw EmptyInputError("train_score_componentwise: no pairs");
  Eigen::VectorXd v = mlp_init(spec, rng);
  AdamState opt = AdamState::create(spec.param_count(), config.adam_lr, config.adam_halve_every);
  Eigen::VectorXd grad(spec.param_count());
  MlpWorkspace ws;
  Eigen::VectorXd upstream(1);
  for (int update = 0; update < config.score_updates; ++update) {
    grad.setZero();
    for (int b = 0; b < config.batch_size; ++b) {
      const ScorePair& pair = pairs[rng.uniform_index(pairs.size())];
      const double s = mlp_forward(spec, v, pair.errors / error_cap, &ws)[0];
      upstream[0] = abs_loss_grad(s, pair.target);
      grad += mlp_backward(spec, v, ws, upstream).d_params;
    }
    grad /= static_cast<double>(config.batch_size);
    adam_step(opt, v, grad);
  }
  return v;
}

}  // namespace dsac

#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <deque>
#include <functional>
#include <optional>
#include <span>
#include <vector>

#include "dsac/consensus.hpp"
#include "dsac/diffgrad.hpp"
#include "dsac/models.hpp"
#include "dsac/problems.hpp"
#include "dsac/training.hpp"

namespace dsac {

// ---------------------------------------------------------------------------
// Frame views: what one training unit (an image, a line instance) exposes to
// the generic pipeline.
// ---------------------------------------------------------------------------

struct LineInstanceView {
  using Problem = LineFitProblem;
  const LineDataset* instance = nullptr;

  int count() const { return static_cast<int>(instance->points.size()); }
  const Eigen::VectorXd& feature(int i) const { return instance->features[i]; }
  LineModel gt() const { return instance->gt_line; }
  Eigen::Vector2d make_datum(int i, const Eigen::VectorXd& pred) const {
    return Eigen::Vector2d(instance->points[i].x(), pred[0]);
  }
};

struct SceneFrameView {
  using Problem = CameraLocProblem;
  const SceneFrame* frame = nullptr;

  int count() const { return static_cast<int>(frame->features.size()); }
  const Eigen::VectorXd& feature(int i) const { return frame->features[i]; }
  Pose gt() const { return frame->gt_pose; }
  Correspondence make_datum(int i, const Eigen::VectorXd& pred) const {
    return Correspondence{frame->pixels[i], pred, i};
  }
};

// analytic solver jacobian when the adapter has one, black-box central
// differences otherwise
template <class Problem>
Jacobian minimal_solver_jacobian(const Problem& problem,
                                 std::span<const typename Problem::Datum> data,
                                 const std::vector<int>& idx) {
  if constexpr (requires { problem.solver_jacobian(data, idx); }) {
    return problem.solver_jacobian(data, idx);
  } else {
    return differentiate_minimal_solver(problem, data, idx, problem.cd_step_data());
  }
}

// ---------------------------------------------------------------------------
// Forward pass of one frame
// ---------------------------------------------------------------------------

template <class View>
struct FrameRun {
  using Problem = typename View::Problem;
  using Model = typename Problem::Model;

  std::vector<typename Problem::Datum> data;
  std::vector<MlpWorkspace> pred_ws;    // one per datum, when caching
  HypothesisPool<Model> pool;
  ScoreDistribution dist;
  std::vector<MlpWorkspace> scorer_ws;  // one per distribution slot, when caching
  double entropy_value = 0.0;

  int slot_count() const { return dist.size(); }
  const Model& slot_model(int slot) const { return pool.entries[dist.pool_indices[slot]].model; }
  const MinimalSet& slot_minimal(int slot) const {
    return pool.entries[dist.pool_indices[slot]].minimal_set;
  }
};

namespace detail {

template <class View>
void predict_frame_data(const View& view, const MlpSpec& pred_spec, const Eigen::VectorXd& w,
                        bool cache, FrameRun<View>& run) {
  const int n = view.count();
  run.data.reserve(n);
  if (cache) run.pred_ws.resize(n);
  for (int i = 0; i < n; ++i) {
    const Eigen::VectorXd pred =
        mlp_forward(pred_spec, w, view.feature(i), cache ? &run.pred_ws[i] : nullptr);
    run.data.push_back(view.make_datum(i, pred));
  }
}

template <class View>
void score_frame_pool(const typename View::Problem& problem, const MlpSpec& scorer_spec,
                      const Eigen::VectorXd& v, bool cache, FrameRun<View>& run) {
  const std::span<const typename View::Problem::Datum> data_span(run.data);
  std::vector<int> valid;
  for (int i = 0; i < run.pool.size(); ++i)
    if (run.pool.entries[i].valid) valid.push_back(i);
  if (cache) run.scorer_ws.resize(valid.size());
  for (size_t k = 0; k < valid.size(); ++k) {
    auto& entry = run.pool.entries[valid[k]];
    const Eigen::VectorXd scaled =
        problem.residual_vector(entry.model, data_span) / problem.error_cap;
    entry.score =
        mlp_forward(scorer_spec, v, scaled, cache ? &run.scorer_ws[k] : nullptr)[0];
  }
  run.dist = softmax_distribution(run.pool);
  run.entropy_value = entropy(run.dist);
}

}  // namespace detail

template <class View>
FrameRun<View> run_frame_forward(const typename View::Problem& problem, const View& view,
                                 const MlpSpec& pred_spec, const Eigen::VectorXd& w,
                                 const MlpSpec& scorer_spec, const Eigen::VectorXd& v,
                                 int pool_size, RandomSource& rng,
                                 bool cache_for_backward = false) {
  FrameRun<View> run;
  detail::predict_frame_data(view, pred_spec, w, cache_for_backward, run);
  run.pool = build_pool(problem, std::span<const typename View::Problem::Datum>(run.data),
                        pool_size, rng);
  detail::score_frame_pool(problem, scorer_spec, v, cache_for_backward, run);
  return run;
}

/// Forward pass over a fixed list of minimal sets instead of random
/// sampling; the exact-enumeration oracles build their pools this way.
template <class View>
FrameRun<View> run_frame_forward_enumerated(const typename View::Problem& problem,
                                            const View& view, const MlpSpec& pred_spec,
                                            const Eigen::VectorXd& w, const MlpSpec& scorer_spec,
                                            const Eigen::VectorXd& v,
                                            std::span<const MinimalSet> minimal_sets,
                                            bool cache_for_backward = false) {
  FrameRun<View> run;
  detail::predict_frame_data(view, pred_spec, w, cache_for_backward, run);
  run.pool = build_enumerated_pool(
      problem, std::span<const typename View::Problem::Datum>(run.data), minimal_sets);
  detail::score_frame_pool(problem, scorer_spec, v, cache_for_backward, run);
  return run;
}

// ---------------------------------------------------------------------------
// Per-hypothesis score gradients
// ---------------------------------------------------------------------------

template <class View>
struct ScoreGradients {
  Eigen::MatrixXd wrt_v;     // slots x Pv
  Eigen::MatrixXd wrt_data;  // slots x (N * dof)
  std::vector<Jacobian> solver_jacobians;  // per slot: model_dim x (n_minimal * dof)
};

template <class View>
ScoreGradients<View> score_gradients(const typename View::Problem& problem, FrameRun<View>& run,
                                     const MlpSpec& scorer_spec, const Eigen::VectorXd& v) {
  using Problem = typename View::Problem;
  constexpr int dof = Problem::kDatumDof;
  constexpr int model_dim = Problem::kModelDim;
  const int slots = run.slot_count();
  const int n = static_cast<int>(run.data.size());
  const std::span<const typename Problem::Datum> data_span(run.data);

  ScoreGradients<View> out;
  out.wrt_v.resize(slots, scorer_spec.param_count());
  out.wrt_data = Eigen::MatrixXd::Zero(slots, n * dof);
  out.solver_jacobians.resize(slots);

  Eigen::VectorXd upstream(1);
  upstream[0] = 1.0;
  for (int slot = 0; slot < slots; ++slot) {
    const auto& model = run.slot_model(slot);
    const MlpGrad grad = mlp_backward(scorer_spec, v, run.scorer_ws[slot], upstream);
    out.wrt_v.row(slot) = grad.d_params.transpose();
    // d s / d e, undoing the input scaling by the cap
    const Eigen::VectorXd ds_de = grad.d_input / problem.error_cap;

    // direct dependence of each residual on its own datum
    Eigen::Matrix<double, 1, model_dim> through_model =
        Eigen::Matrix<double, 1, model_dim>::Zero();
    for (int i = 0; i < n; ++i) {
      if (ds_de[i] != 0.0) {
        out.wrt_data.row(slot).segment(i * dof, dof) =
            ds_de[i] * problem.residual_jacobian_datum(model, run.data[i]);
        through_model += ds_de[i] * problem.residual_jacobian_model(model, run.data[i]);
      }
    }
    // dependence through the hypothesis itself: scatter over the minimal set
    const std::vector<int>& minimal = run.slot_minimal(slot).indices;
    out.solver_jacobians[slot] = minimal_solver_jacobian(problem, data_span, minimal);
    const Eigen::RowVectorXd through = through_model * out.solver_jacobians[slot];
    for (size_t m = 0; m < minimal.size(); ++m)
      out.wrt_data.row(slot).segment(minimal[m] * dof, dof) +=
          through.segment(static_cast<int>(m) * dof, dof);
  }
  return out;
}

// scatter a (model_dim x n_minimal*dof) solver jacobian into the full
// (model_dim x N*dof) layout
template <class Problem>
Jacobian scatter_solver_jacobian(const Jacobian& local, const std::vector<int>& minimal, int n) {
  constexpr int dof = Problem::kDatumDof;
  Jacobian full = Jacobian::Zero(local.rows(), n * dof);
  for (size_t m = 0; m < minimal.size(); ++m)
    full.middleCols(minimal[m] * dof, dof) = local.middleCols(static_cast<int>(m) * dof, dof);
  return full;
}

// ---------------------------------------------------------------------------
// Strategy gradients for one frame
// ---------------------------------------------------------------------------

template <class View>
struct FrameStep {
  GradientPair grad;
  double loss = 0.0;
  int selected_pool_index = -1;
  double entropy_value = 0.0;
};

namespace detail {

// chains a gradient in stacked-datum-dof space through the predictor
template <class View>
Eigen::VectorXd chain_to_predictor(const FrameRun<View>& run, const MlpSpec& pred_spec,
                                   const Eigen::VectorXd& w, const Eigen::VectorXd& d_data) {
  constexpr int dof = View::Problem::kDatumDof;
  Eigen::VectorXd d_w = Eigen::VectorXd::Zero(pred_spec.param_count());
  for (size_t i = 0; i < run.data.size(); ++i) {
    const Eigen::VectorXd upstream = d_data.segment(static_cast<int>(i) * dof, dof);
    if (upstream.isZero(0.0)) continue;
    d_w += mlp_backward(pred_spec, w, run.pred_ws[i], upstream).d_params;
  }
  return d_w;
}

}  // namespace detail

/// Gradient of the probabilistic-selection expected loss (score-function
/// plus pathwise terms), estimated with k Monte-Carlo draws.
template <class View>
FrameStep<View> dsac_frame_step(const typename View::Problem& problem, FrameRun<View>& run,
                                const View& view, const MlpSpec& pred_spec,
                                const Eigen::VectorXd& w, const MlpSpec& scorer_spec,
                                const Eigen::VectorXd& v, const TrainConfig& config,
                                RandomSource& rng) {
  using Problem = typename View::Problem;
  constexpr int dof = Problem::kDatumDof;
  const int n = static_cast<int>(run.data.size());
  const int p_data = n * dof;
  const std::span<const typename Problem::Datum> data_span(run.data);

  const ScoreGradients<View> sg = score_gradients(problem, run, scorer_spec, v);
  const int slots = run.slot_count();
  Eigen::MatrixXd score_grads(slots, p_data + scorer_spec.param_count());
  score_grads << sg.wrt_data, sg.wrt_v;

  // memoized per-slot refinement results
  std::vector<std::optional<typename Problem::Model>> refined(slots);
  const auto refine_slot = [&](int slot) -> const typename Problem::Model& {
    if (!refined[slot]) refined[slot] = problem.refine(run.slot_model(slot), data_span);
    return *refined[slot];
  };
  const auto loss_fn = [&](int slot) { return problem.task_loss(refine_slot(slot), view.gt()); };
  const auto loss_grad_fn = [&](int slot) -> Eigen::VectorXd {
    const auto& model = refine_slot(slot);
    const Eigen::RowVectorXd d_loss = problem.task_loss_grad(model, view.gt());
    const Jacobian j_model = differentiate_refinement_wrt_model(
        problem, data_span, run.slot_model(slot), problem.cd_step_model());
    const Jacobian j_data = differentiate_refinement_wrt_data(
        problem, data_span, run.slot_model(slot), problem.cd_step_data(), config.cd_subsample,
        rng);
    const Jacobian h_jac = scatter_solver_jacobian<Problem>(
        sg.solver_jacobians[slot], run.slot_minimal(slot).indices, n);
    Eigen::VectorXd g = Eigen::VectorXd::Zero(p_data + scorer_spec.param_count());
    g.head(p_data) = (d_loss * (j_model * h_jac + j_data)).transpose();
    return g;
  };

  const int selected = select_probabilistic(run.pool, run.dist, rng);
  int selected_slot = 0;
  for (int k = 0; k < slots; ++k)
    if (run.dist.pool_indices[k] == selected) selected_slot = k;

  const Eigen::VectorXd flat = dsac_grad_sampled(run.dist, loss_fn, loss_grad_fn, score_grads,
                                                 config.k_samples, rng);

  FrameStep<View> step;
  step.grad.d_w = detail::chain_to_predictor(run, pred_spec, w, flat.head(p_data));
  step.grad.d_v = flat.tail(scorer_spec.param_count());
  step.loss = loss_fn(selected_slot);
  step.selected_pool_index = selected;
  step.entropy_value = run.entropy_value;
  return step;
}

/// Exact enumeration of the expected-loss gradient over the run's pool,
/// with the expected loss itself in FrameStep::loss. Oracle counterpart of
/// dsac_frame_step; cost grows with the pool, so keep pools small.
template <class View>
FrameStep<View> dsac_frame_exact_step(const typename View::Problem& problem, FrameRun<View>& run,
                                      const View& view, const MlpSpec& pred_spec,
                                      const Eigen::VectorXd& w, const MlpSpec& scorer_spec,
                                      const Eigen::VectorXd& v, const TrainConfig& config,
                                      RandomSource& rng) {
  using Problem = typename View::Problem;
  constexpr int dof = Problem::kDatumDof;
  const int n = static_cast<int>(run.data.size());
  const int p_data = n * dof;
  const std::span<const typename Problem::Datum> data_span(run.data);

  const ScoreGradients<View> sg = score_gradients(problem, run, scorer_spec, v);
  const int slots = run.slot_count();
  Eigen::MatrixXd score_grads(slots, p_data + scorer_spec.param_count());
  score_grads << sg.wrt_data, sg.wrt_v;

  Eigen::VectorXd losses(slots);
  Eigen::MatrixXd loss_grads = Eigen::MatrixXd::Zero(slots, score_grads.cols());
  for (int slot = 0; slot < slots; ++slot) {
    const auto refined = problem.refine(run.slot_model(slot), data_span);
    losses[slot] = problem.task_loss(refined, view.gt());
    const Eigen::RowVectorXd d_loss = problem.task_loss_grad(refined, view.gt());
    const Jacobian j_model = differentiate_refinement_wrt_model(
        problem, data_span, run.slot_model(slot), problem.cd_step_model());
    const Jacobian j_data = differentiate_refinement_wrt_data(
        problem, data_span, run.slot_model(slot), problem.cd_step_data(), config.cd_subsample,
        rng);
    const Jacobian h_jac = scatter_solver_jacobian<Problem>(
        sg.solver_jacobians[slot], run.slot_minimal(slot).indices, n);
    loss_grads.row(slot).head(p_data) = d_loss * (j_model * h_jac + j_data);
  }
  const Eigen::VectorXd flat = dsac_grad_exact(run.dist, losses, loss_grads, score_grads);

  FrameStep<View> step;
  step.grad.d_w = detail::chain_to_predictor(run, pred_spec, w, flat.head(p_data));
  step.grad.d_v = flat.tail(scorer_spec.param_count());
  step.loss = run.dist.probs.dot(losses);  // exact expected loss
  step.selected_pool_index = select_argmax(run.pool);
  step.entropy_value = run.entropy_value;
  return step;
}

/// Gradient of the soft-argmax objective: the loss reaches the parameters
/// through the weighted hypothesis average and through the refinement's
/// direct view of the data.
template <class View>
FrameStep<View> softam_frame_step(const typename View::Problem& problem, FrameRun<View>& run,
                                  const View& view, const MlpSpec& pred_spec,
                                  const Eigen::VectorXd& w, const MlpSpec& scorer_spec,
                                  const Eigen::VectorXd& v, const TrainConfig& config,
                                  RandomSource& rng) {
  using Problem = typename View::Problem;
  using Model = typename Problem::Model;
  constexpr int model_dim = Problem::kModelDim;
  const int n = static_cast<int>(run.data.size());
  const std::span<const typename Problem::Datum> data_span(run.data);

  const Model average = select_soft_argmax(run.pool, run.dist);
  const Model refined = problem.refine(average, data_span);
  const Eigen::RowVectorXd d_loss = problem.task_loss_grad(refined, view.gt());

  const Jacobian j_model =
      differentiate_refinement_wrt_model(problem, data_span, average, problem.cd_step_model());
  const Jacobian j_data = differentiate_refinement_wrt_data(
      problem, data_span, average, problem.cd_step_data(), config.cd_subsample, rng);

  const Eigen::VectorXd loss_grad_wrt_avg = (d_loss * j_model).transpose();
  const Eigen::VectorXd direct_data = (d_loss * j_data).transpose();

  const ScoreGradients<View> sg = score_gradients(problem, run, scorer_spec, v);
  const int slots = run.slot_count();
  Eigen::MatrixXd hyp_params(slots, model_dim);
  std::vector<Jacobian> hyp_jacs(slots);
  for (int slot = 0; slot < slots; ++slot) {
    hyp_params.row(slot) = run.slot_model(slot).params().transpose();
    hyp_jacs[slot] = scatter_solver_jacobian<Problem>(sg.solver_jacobians[slot],
                                                      run.slot_minimal(slot).indices, n);
  }

  const Eigen::VectorXd d_data =
      softam_grad(run.dist, hyp_params, sg.wrt_data, &hyp_jacs, loss_grad_wrt_avg, direct_data);
  const Eigen::VectorXd d_v =
      softam_grad(run.dist, hyp_params, sg.wrt_v, nullptr, loss_grad_wrt_avg);

  FrameStep<View> step;
  step.grad.d_w = detail::chain_to_predictor(run, pred_spec, w, d_data);
  step.grad.d_v = d_v;
  step.loss = problem.task_loss(refined, view.gt());
  step.selected_pool_index = select_argmax(run.pool);
  step.entropy_value = run.entropy_value;
  return step;
}

// ---------------------------------------------------------------------------
// End-to-end training loop
// ---------------------------------------------------------------------------

struct UpdateRecord {
  int update = 0;
  double loss = 0.0;        // NaN when the frame's pool was fully degenerate
  double entropy = 0.0;
  int selected_index = -1;
};

struct E2eResult {
  Eigen::VectorXd w;
  Eigen::VectorXd v;
  std::vector<UpdateRecord> log;
};

/// One gradient step per randomly drawn frame, SGD with momentum and
/// elementwise gradient clamping. Aborts when half of a 50-update window
/// hits fully degenerate pools.
template <class View>
E2eResult train_end_to_end(const typename View::Problem& problem, std::span<const View> frames,
                           const MlpSpec& pred_spec, const MlpSpec& scorer_spec,
                           const Eigen::VectorXd& w0, const Eigen::VectorXd& v0,
                           const TrainConfig& config, RandomSource& rng) {
  if (config.strategy == Strategy::kRansac)
    throw Error("train_end_to_end: argmax selection has no usable gradient; "
                "use softam or dsac");
  if (frames.empty()) throw EmptyInputError("train_end_to_end: no frames");

  E2eResult result;
  result.w = w0;
  result.v = v0;
  SgdMomentumState opt_w =
      SgdMomentumState::create(static_cast<int>(w0.size()), config.lr_w, config.momentum,
                               config.clamp);
  SgdMomentumState opt_v =
      SgdMomentumState::create(static_cast<int>(v0.size()), config.lr_v, config.momentum,
                               config.clamp);

  constexpr int kWindow = 50;
  std::deque<bool> failures;
  int failure_count = 0;

  for (int update = 0; update < config.e2e_updates; ++update) {
    const View& view = frames[rng.uniform_index(frames.size())];
    UpdateRecord record;
    record.update = update;
    bool failed = false;
    try {
      FrameRun<View> run = run_frame_forward(problem, view, pred_spec, result.w, scorer_spec,
                                             result.v, config.pool_size, rng, true);
      FrameStep<View> step =
          config.strategy == Strategy::kDsac
              ? dsac_frame_step(problem, run, view, pred_spec, result.w, scorer_spec, result.v,
                                config, rng)
              : softam_frame_step(problem, run, view, pred_spec, result.w, scorer_spec, result.v,
                                  config, rng);
      if (config.train_w) sgd_momentum_step(opt_w, result.w, step.grad.d_w);
      if (config.train_v) sgd_momentum_step(opt_v, result.v, step.grad.d_v);
      record.loss = step.loss;
      record.entropy = step.entropy_value;
      record.selected_index = step.selected_pool_index;
    } catch (const AllDegenerateError&) {
      failed = true;
      record.loss = std::numeric_limits<double>::quiet_NaN();
    }
    result.log.push_back(record);

    failures.push_back(failed);
    failure_count += failed ? 1 : 0;
    if (static_cast<int>(failures.size()) > kWindow) {
      failure_count -= failures.front() ? 1 : 0;
      failures.pop_front();
    }
    if (static_cast<int>(failures.size()) == kWindow && 2 * failure_count >= kWindow)
      throw AbortedRunError("train_end_to_end: too many degenerate pools");
  }
  return result;
}

}  // namespace dsac

#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <functional>
#include <optional>
#include <span>
#include <vector>

#include "dsac/consensus.hpp"
#include "dsac/errors.hpp"
#include "dsac/rng.hpp"

namespace dsac {

using Jacobian = Eigen::MatrixXd;

/// Gradient of one objective wrt both learnable blocks: predictor
/// parameters w and scorer parameters v.
struct GradientPair {
  Eigen::VectorXd d_w;
  Eigen::VectorXd d_v;
};

inline constexpr int kEnumerationLimit = 4096;

// All per-hypothesis matrices below are indexed by *distribution slot*
// (dist.pool_indices maps slots back to pool positions): score_grads row j
// is d s_j / d param, loss_grads row j is d loss(j) / d param.

/// Softmax derivative: dP_j/dparam = P_j (g_j - sum_k P_k g_k). The rows of
/// the result sum to the zero vector.
inline Eigen::MatrixXd softmax_weight_grad(const ScoreDistribution& dist,
                                           const Eigen::MatrixXd& score_grads) {
  if (score_grads.rows() != dist.size())
    throw DimensionMismatchError("softmax_weight_grad: one gradient row per hypothesis");
  const Eigen::RowVectorXd expectation = dist.probs.transpose() * score_grads;
  Eigen::MatrixXd out(score_grads.rows(), score_grads.cols());
  for (int j = 0; j < score_grads.rows(); ++j)
    out.row(j) = dist.probs[j] * (score_grads.row(j) - expectation);
  return out;
}

/// d log P(chosen)/dparam = g_chosen - E_{j ~ P}[g_j].
inline Eigen::VectorXd log_prob_grad(const ScoreDistribution& dist,
                                     const Eigen::MatrixXd& score_grads, int chosen_slot) {
  if (score_grads.rows() != dist.size())
    throw DimensionMismatchError("log_prob_grad: one gradient row per hypothesis");
  if (chosen_slot < 0 || chosen_slot >= dist.size())
    throw DimensionMismatchError("log_prob_grad: slot out of range");
  const Eigen::RowVectorXd expectation = dist.probs.transpose() * score_grads;
  return (score_grads.row(chosen_slot) - expectation).transpose();
}

/// Exact derivative of the expected loss over the pool:
/// sum_j P_j [ loss_j * dlogP_j + dloss_j ]. Enumeration oracle; refuses
/// pools above the limit.
inline Eigen::VectorXd dsac_grad_exact(const ScoreDistribution& dist,
                                       const Eigen::VectorXd& losses,
                                       const Eigen::MatrixXd& loss_grads,
                                       const Eigen::MatrixXd& score_grads,
                                       int enumeration_limit = kEnumerationLimit) {
  if (dist.size() > enumeration_limit)
    throw PoolTooLargeError("dsac_grad_exact: pool exceeds the enumeration limit");
  if (losses.size() != dist.size() || loss_grads.rows() != dist.size() ||
      score_grads.rows() != dist.size() || loss_grads.cols() != score_grads.cols())
    throw DimensionMismatchError("dsac_grad_exact: per-hypothesis shapes disagree");
  const Eigen::RowVectorXd expectation = dist.probs.transpose() * score_grads;
  Eigen::VectorXd grad = Eigen::VectorXd::Zero(score_grads.cols());
  for (int j = 0; j < dist.size(); ++j) {
    grad += dist.probs[j] *
            (losses[j] * (score_grads.row(j) - expectation).transpose() +
             loss_grads.row(j).transpose());
  }
  return grad;
}

struct SampledGradStats {
  Eigen::VectorXd variance;  // per-parameter sample variance
  int samples = 0;

  // 3-standard-error band of the sample mean, per parameter
  Eigen::VectorXd standard_error() const {
    return (variance / static_cast<double>(samples)).cwiseSqrt();
  }
};

/// Monte-Carlo estimator of dsac_grad_exact: K draws j ~ P, each
/// contributing loss_j * dlogP_j + dloss_j. Losses and loss gradients are
/// fetched lazily and memoized, so repeated draws of one hypothesis cost
/// nothing extra.
inline Eigen::VectorXd dsac_grad_sampled(
    const ScoreDistribution& dist, const std::function<double(int)>& loss_fn,
    const std::function<Eigen::VectorXd(int)>& loss_grad_fn, const Eigen::MatrixXd& score_grads,
    int k_samples, RandomSource& rng, SampledGradStats* stats = nullptr) {
  if (k_samples < 1) throw DimensionMismatchError("dsac_grad_sampled: need K >= 1");
  if (score_grads.rows() != dist.size())
    throw DimensionMismatchError("dsac_grad_sampled: one gradient row per hypothesis");
  const int p = static_cast<int>(score_grads.cols());
  const Eigen::RowVectorXd expectation = dist.probs.transpose() * score_grads;

  std::vector<std::optional<double>> loss_cache(dist.size());
  std::vector<std::optional<Eigen::VectorXd>> grad_cache(dist.size());

  Eigen::VectorXd mean = Eigen::VectorXd::Zero(p);
  Eigen::VectorXd m2 = Eigen::VectorXd::Zero(p);
  Eigen::VectorXd sample(p);
  for (int s = 0; s < k_samples; ++s) {
    const double u = rng.uniform();
    int slot = dist.size() - 1;
    double cdf = 0.0;
    for (int j = 0; j < dist.size(); ++j) {
      cdf += dist.probs[j];
      if (u < cdf) {
        slot = j;
        break;
      }
    }
    if (!loss_cache[slot]) loss_cache[slot] = loss_fn(slot);
    if (!grad_cache[slot]) grad_cache[slot] = loss_grad_fn(slot);
    sample = *loss_cache[slot] * (score_grads.row(slot) - expectation).transpose() +
             *grad_cache[slot];
    // Welford
    const Eigen::VectorXd delta = sample - mean;
    mean += delta / (s + 1.0);
    m2 += delta.cwiseProduct(sample - mean);
  }
  if (stats) {
    stats->samples = k_samples;
    stats->variance = k_samples > 1 ? (m2 / (k_samples - 1.0)).eval() : Eigen::VectorXd::Zero(p);
  }
  return mean;
}

/// Jacobian of the probability-weighted hypothesis average, Eq.-style:
/// d hbar/d param = sum_j ( h_j * dP_j/dparam + P_j * dh_j/dparam ).
/// hyp_jacobians may be null when the hypotheses do not depend on the
/// differentiation target (the scorer parameters).
inline Jacobian soft_average_jacobian(const ScoreDistribution& dist,
                                      const Eigen::MatrixXd& hyp_params,
                                      const Eigen::MatrixXd& score_grads,
                                      const std::vector<Jacobian>* hyp_jacobians) {
  if (hyp_params.rows() != dist.size())
    throw DimensionMismatchError("soft_average_jacobian: one parameter row per hypothesis");
  const int d = static_cast<int>(hyp_params.cols());
  const int p = static_cast<int>(score_grads.cols());
  const Eigen::MatrixXd prob_grads = softmax_weight_grad(dist, score_grads);
  Jacobian out = Jacobian::Zero(d, p);
  for (int j = 0; j < dist.size(); ++j) {
    out += hyp_params.row(j).transpose() * prob_grads.row(j);
    if (hyp_jacobians) {
      const Jacobian& hj = (*hyp_jacobians)[j];
      if (hj.rows() != d || hj.cols() != p)
        throw DimensionMismatchError("soft_average_jacobian: hypothesis jacobian shape");
      out += dist.probs[j] * hj;
    }
  }
  return out;
}

/// Chain rule for the soft-argmax objective: the loss reaches the
/// parameters through the averaged hypothesis (selection weights and
/// hypothesis coordinates) and, optionally, through a direct path that
/// bypasses the average (refinement reading the data itself).
inline Eigen::VectorXd softam_grad(const ScoreDistribution& dist,
                                   const Eigen::MatrixXd& hyp_params,
                                   const Eigen::MatrixXd& score_grads,
                                   const std::vector<Jacobian>* hyp_jacobians,
                                   const Eigen::VectorXd& loss_grad_wrt_avg,
                                   const Eigen::VectorXd& direct_term = Eigen::VectorXd()) {
  if (loss_grad_wrt_avg.size() != hyp_params.cols())
    throw DimensionMismatchError("softam_grad: loss gradient must match the model dimension");
  const Jacobian avg_jac = soft_average_jacobian(dist, hyp_params, score_grads, hyp_jacobians);
  Eigen::VectorXd grad = avg_jac.transpose() * loss_grad_wrt_avg;
  if (direct_term.size() > 0) {
    if (direct_term.size() != grad.size())
      throw DimensionMismatchError("softam_grad: direct term size mismatch");
    grad += direct_term;
  }
  return grad;
}

struct CentralDiffInfo {
  int sampled_columns = 0;
  int skipped_columns = 0;  // non-finite output at a perturbed point
};

/// Central-difference Jacobian of a black-box vector function. With
/// subsample_fraction < 1, a uniform subset of columns is evaluated and the
/// result is scaled by n/m so its expectation equals the full Jacobian;
/// unsampled columns stay zero. Columns where f turns non-finite are
/// skipped (zeros) and counted in info.
inline Jacobian central_difference(const std::function<Eigen::VectorXd(const Eigen::VectorXd&)>& f,
                                   const Eigen::VectorXd& x, double step,
                                   double subsample_fraction, RandomSource& rng,
                                   CentralDiffInfo* info = nullptr) {
  if (!(step > 0.0)) throw DimensionMismatchError("central_difference: step must be positive");
  if (!(subsample_fraction > 0.0) || subsample_fraction > 1.0)
    throw DimensionMismatchError("central_difference: fraction must be in (0, 1]");
  const int n = static_cast<int>(x.size());
  const Eigen::VectorXd base = f(x);
  Jacobian jac = Jacobian::Zero(base.size(), n);

  std::vector<int> columns;
  if (subsample_fraction >= 1.0) {
    columns.resize(n);
    for (int i = 0; i < n; ++i) columns[i] = i;
  } else {
    const int m = std::max(1, static_cast<int>(std::lround(subsample_fraction * n)));
    columns = sample_distinct_indices(n, m, rng);
  }
  const double scale = static_cast<double>(n) / static_cast<double>(columns.size());

  Eigen::VectorXd xp = x, xm = x;
  int skipped = 0;
  for (const int col : columns) {
    xp[col] = x[col] + step;
    xm[col] = x[col] - step;
    const Eigen::VectorXd fp = f(xp);
    const Eigen::VectorXd fm = f(xm);
    xp[col] = x[col];
    xm[col] = x[col];
    if (!fp.allFinite() || !fm.allFinite()) {
      ++skipped;
      continue;
    }
    jac.col(col) = scale * (fp - fm) / (2.0 * step);
  }
  if (info) {
    info->sampled_columns = static_cast<int>(columns.size());
    info->skipped_columns = skipped;
  }
  return jac;
}

/// d(refined model params)/d(stacked datum dofs) for the composite map
/// data -> refine(selected, data), treated as a black box.
template <class Problem>
Jacobian differentiate_refinement_wrt_data(const Problem& problem,
                                           std::span<const typename Problem::Datum> data,
                                           const typename Problem::Model& selected, double step,
                                           double subsample_fraction, RandomSource& rng,
                                           CentralDiffInfo* info = nullptr) {
  using Datum = typename Problem::Datum;
  const int dof = Problem::kDatumDof;
  Eigen::VectorXd x(static_cast<int>(data.size()) * dof);
  for (size_t i = 0; i < data.size(); ++i)
    for (int k = 0; k < dof; ++k) x[static_cast<int>(i) * dof + k] = Problem::datum_dof(data[i], k);
  std::vector<Datum> scratch(data.begin(), data.end());
  const auto f = [&](const Eigen::VectorXd& v) -> Eigen::VectorXd {
    for (size_t i = 0; i < scratch.size(); ++i)
      for (int k = 0; k < dof; ++k)
        Problem::set_datum_dof(scratch[i], k, v[static_cast<int>(i) * dof + k]);
    return problem.refine(selected, std::span<const Datum>(scratch)).params();
  };
  return central_difference(f, x, step, subsample_fraction, rng, info);
}

/// d(refined model params)/d(selected model params), central differences.
template <class Problem>
Jacobian differentiate_refinement_wrt_model(const Problem& problem,
                                            std::span<const typename Problem::Datum> data,
                                            const typename Problem::Model& selected,
                                            double step) {
  using Model = typename Problem::Model;
  RandomSource unused(0);
  const auto f = [&](const Eigen::VectorXd& v) -> Eigen::VectorXd {
    const Model m = Model::from_params(v);
    return problem.refine(m, data).params();
  };
  return central_difference(f, selected.params(), step, 1.0, unused);
}

/// d(refined model params)/d(stacked datum dofs) of the full composite
/// map data -> refine(solve_minimal(data_J), data), the hypothesis' minimal
/// solve included. Columns where the solver degenerates are skipped.
template <class Problem>
Jacobian differentiate_pose_pipeline(const Problem& problem,
                                     std::span<const typename Problem::Datum> data,
                                     const std::vector<int>& minimal_indices, double step,
                                     double subsample_fraction, RandomSource& rng,
                                     CentralDiffInfo* info = nullptr) {
  using Datum = typename Problem::Datum;
  const int dof = Problem::kDatumDof;
  Eigen::VectorXd x(static_cast<int>(data.size()) * dof);
  for (size_t i = 0; i < data.size(); ++i)
    for (int k = 0; k < dof; ++k)
      x[static_cast<int>(i) * dof + k] = Problem::datum_dof(data[i], k);
  std::vector<Datum> scratch(data.begin(), data.end());
  const auto f = [&](const Eigen::VectorXd& v) -> Eigen::VectorXd {
    for (size_t i = 0; i < scratch.size(); ++i)
      for (int k = 0; k < dof; ++k)
        Problem::set_datum_dof(scratch[i], k, v[static_cast<int>(i) * dof + k]);
    const std::span<const Datum> span(scratch);
    const auto model = problem.solve_minimal(span, minimal_indices);
    if (!model)
      return Eigen::VectorXd::Constant(Problem::kModelDim,
                                       std::numeric_limits<double>::quiet_NaN());
    return problem.refine(problem.canonicalize_model(*model), span).params();
  };
  return central_difference(f, x, step, subsample_fraction, rng, info);
}

/// d(minimal-solve model params)/d(minimal set dofs), central differences.
/// Columns where the solver fails are zero (and counted when info given).
template <class Problem>
Jacobian differentiate_minimal_solver(const Problem& problem,
                                      std::span<const typename Problem::Datum> data,
                                      const std::vector<int>& minimal_indices, double step,
                                      CentralDiffInfo* info = nullptr) {
  using Datum = typename Problem::Datum;
  using Model = typename Problem::Model;
  const int dof = Problem::kDatumDof;
  const int n = static_cast<int>(minimal_indices.size());
  Eigen::VectorXd x(n * dof);
  for (int i = 0; i < n; ++i)
    for (int k = 0; k < dof; ++k) x[i * dof + k] = Problem::datum_dof(data[minimal_indices[i]], k);
  std::vector<Datum> scratch(data.begin(), data.end());
  std::vector<int> local(n);
  for (int i = 0; i < n; ++i) local[i] = minimal_indices[i];
  RandomSource unused(0);
  const auto f = [&](const Eigen::VectorXd& v) -> Eigen::VectorXd {
    for (int i = 0; i < n; ++i)
      for (int k = 0; k < dof; ++k) Problem::set_datum_dof(scratch[local[i]], k, v[i * dof + k]);
    const auto model = problem.solve_minimal(scratch, local);
    if (!model)
      return Eigen::VectorXd::Constant(Problem::kModelDim,
                                       std::numeric_limits<double>::quiet_NaN());
    return problem.canonicalize_model(*model).params();
  };
  return central_difference(f, x, step, 1.0, unused, info);
}

}  // namespace dsac

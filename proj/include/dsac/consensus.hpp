#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <limits>
#include <span>
#include <vector>

#include "dsac/errors.hpp"
#include "dsac/rng.hpp"
#include "dsac/solvers.hpp"

namespace dsac {

inline constexpr int kPoolRetryCap = 16;

template <class Model>
struct HypothesisEntry {
  Model model{};
  MinimalSet minimal_set;
  double score = std::numeric_limits<double>::lowest();  // -inf surrogate until scored
  bool valid = false;
};

template <class Model>
struct HypothesisPool {
  std::vector<HypothesisEntry<Model>> entries;

  int size() const { return static_cast<int>(entries.size()); }
  int valid_count() const {
    int n = 0;
    for (const auto& e : entries) n += e.valid ? 1 : 0;
    return n;
  }
};

/// Uniformly drawn minimal set of n distinct correspondence indices.
inline MinimalSet sample_minimal_set(int count, int n, RandomSource& rng) {
  if (count < n)
    throw TooFewCorrespondencesError("sample_minimal_set: fewer correspondences than n");
  return MinimalSet{sample_distinct_indices(count, n, rng)};
}

/// Pool of pool_size hypotheses from random minimal sets. Failed solves are
/// resampled up to retry_cap times, then left invalid. Throws when not a
/// single valid hypothesis could be produced.
template <class Problem>
HypothesisPool<typename Problem::Model> build_pool(
    const Problem& problem, std::span<const typename Problem::Datum> data, int pool_size,
    RandomSource& rng, int retry_cap = kPoolRetryCap) {
  HypothesisPool<typename Problem::Model> pool;
  pool.entries.resize(pool_size);
  const int count = static_cast<int>(data.size());
  for (auto& entry : pool.entries) {
    for (int attempt = 0; attempt < retry_cap; ++attempt) {
      MinimalSet candidate = sample_minimal_set(count, Problem::kMinimalSetSize, rng);
      auto model = problem.solve_minimal(data, candidate.indices);
      if (model) {
        entry.model = problem.canonicalize_model(*model);
        entry.minimal_set = std::move(candidate);
        entry.valid = true;
        break;
      }
      entry.minimal_set = std::move(candidate);  // keep the last attempt for diagnostics
    }
  }
  if (pool.valid_count() == 0)
    throw AllDegenerateError("build_pool: no valid hypothesis after retries");
  return pool;
}

/// Pool over a caller-chosen list of minimal sets (e.g. the full
/// enumeration for exact-gradient oracles). Unsolvable sets stay invalid.
template <class Problem>
HypothesisPool<typename Problem::Model> build_enumerated_pool(
    const Problem& problem, std::span<const typename Problem::Datum> data,
    std::span<const MinimalSet> minimal_sets) {
  HypothesisPool<typename Problem::Model> pool;
  pool.entries.resize(minimal_sets.size());
  for (size_t k = 0; k < minimal_sets.size(); ++k) {
    auto& entry = pool.entries[k];
    entry.minimal_set = minimal_sets[k];
    auto model = problem.solve_minimal(data, entry.minimal_set.indices);
    if (model) {
      entry.model = problem.canonicalize_model(*model);
      entry.valid = true;
    }
  }
  if (pool.valid_count() == 0)
    throw AllDegenerateError("build_enumerated_pool: no valid hypothesis");
  return pool;
}

/// All size-n index subsets of [0, count), in lexicographic order.
inline std::vector<MinimalSet> enumerate_minimal_sets(int count, int n) {
  std::vector<MinimalSet> out;
  std::vector<int> idx(n);
  for (int i = 0; i < n; ++i) idx[i] = i;
  while (true) {
    out.push_back(MinimalSet{idx});
    int k = n - 1;
    while (k >= 0 && idx[k] == count - n + k) --k;
    if (k < 0) break;
    ++idx[k];
    for (int j = k + 1; j < n; ++j) idx[j] = idx[j - 1] + 1;
  }
  return out;
}

/// Assigns entry.score = scorer(residual vector) for every valid entry.
template <class Problem, class Scorer>
void score_pool(HypothesisPool<typename Problem::Model>& pool, const Problem& problem,
                std::span<const typename Problem::Datum> data, Scorer&& scorer) {
  for (auto& entry : pool.entries) {
    if (!entry.valid) continue;
    entry.score = scorer(problem.residual_vector(entry.model, data));
  }
}

/// Classic consensus measure: number of residuals below tau.
inline double inlier_count_score(const Eigen::VectorXd& errors, double tau) {
  int n = 0;
  for (int i = 0; i < errors.size(); ++i) n += errors[i] < tau ? 1 : 0;
  return static_cast<double>(n);
}

/// Softmax over the valid pool entries. pool_indices maps distribution
/// slots back to pool positions, in pool order.
struct ScoreDistribution {
  Eigen::VectorXd probs;
  Eigen::VectorXd log_probs;
  std::vector<int> pool_indices;

  int size() const { return static_cast<int>(probs.size()); }
};

/// Max-subtracted softmax of a raw score vector; shift invariant by
/// construction.
inline ScoreDistribution softmax_scores(const Eigen::VectorXd& scores) {
  if (scores.size() == 0) throw AllInvalidError("softmax_scores: empty score vector");
  ScoreDistribution dist;
  const double m = scores.maxCoeff();
  Eigen::VectorXd shifted = scores.array() - m;
  const double log_norm = std::log(shifted.array().exp().sum());
  dist.log_probs = shifted.array() - log_norm;
  dist.probs = dist.log_probs.array().exp();
  dist.pool_indices.resize(scores.size());
  for (int i = 0; i < scores.size(); ++i) dist.pool_indices[i] = i;
  return dist;
}

template <class Model>
ScoreDistribution softmax_distribution(const HypothesisPool<Model>& pool) {
  std::vector<int> valid;
  for (int i = 0; i < pool.size(); ++i)
    if (pool.entries[i].valid) valid.push_back(i);
  if (valid.empty()) throw AllInvalidError("softmax_distribution: no valid entries");
  Eigen::VectorXd scores(static_cast<int>(valid.size()));
  for (size_t k = 0; k < valid.size(); ++k) scores[k] = pool.entries[valid[k]].score;
  ScoreDistribution dist = softmax_scores(scores);
  dist.pool_indices = std::move(valid);
  return dist;
}

/// Pool position of the highest-scoring valid entry; ties break toward the
/// lower position.
template <class Model>
int select_argmax(const HypothesisPool<Model>& pool) {
  int best = -1;
  for (int i = 0; i < pool.size(); ++i) {
    if (!pool.entries[i].valid) continue;
    if (best < 0 || pool.entries[i].score > pool.entries[best].score) best = i;
  }
  if (best < 0) throw AllInvalidError("select_argmax: no valid entries");
  return best;
}

/// Probability-weighted average of the model parameter vectors (soft
/// argmax). Models must be canonicalized; averaging happens in the flat
/// parameter space.
template <class Model>
Model select_soft_argmax(const HypothesisPool<Model>& pool, const ScoreDistribution& dist) {
  if (dist.size() == 0) throw AllInvalidError("select_soft_argmax: empty distribution");
  using ParamVec = decltype(std::declval<Model>().params());
  ParamVec avg = ParamVec::Zero();
  for (int k = 0; k < dist.size(); ++k)
    avg += dist.probs[k] * pool.entries[dist.pool_indices[k]].model.params();
  return Model::from_params(avg);
}

/// Inverse-CDF draw over the distribution in pool order. Returns the pool
/// position of the chosen hypothesis (hard selection, model unchanged).
template <class Model>
int select_probabilistic(const HypothesisPool<Model>& pool, const ScoreDistribution& dist,
                         RandomSource& rng) {
  if (dist.size() == 0) throw AllInvalidError("select_probabilistic: empty distribution");
  const double u = rng.uniform();
  double cdf = 0.0;
  for (int k = 0; k < dist.size(); ++k) {
    cdf += dist.probs[k];
    if (u < cdf) return dist.pool_indices[k];
  }
  return dist.pool_indices[dist.size() - 1];  // numerical tail
}

/// Shannon entropy in nats, in [0, log M].
inline double entropy(const ScoreDistribution& dist) {
  double h = 0.0;
  for (int k = 0; k < dist.size(); ++k)
    if (dist.probs[k] > 0.0) h -= dist.probs[k] * std::log(dist.probs[k]);
  return h;
}

}  // namespace dsac

#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <vector>

#include "dsac/errors.hpp"
#include "dsac/geometry.hpp"
#include "dsac/rng.hpp"

namespace dsac {

enum class Activation { kRectifier, kIdentity };

/// Fully-connected network shape: widths[0] inputs through widths.back()
/// outputs, one activation per layer.
struct MlpSpec {
  std::vector<int> widths;
  std::vector<Activation> activations;

  // rectifier hidden layers, identity output
  static MlpSpec regression(std::vector<int> w) {
    MlpSpec spec;
    spec.widths = std::move(w);
    const int layers = static_cast<int>(spec.widths.size()) - 1;
    spec.activations.assign(layers, Activation::kRectifier);
    if (layers > 0) spec.activations.back() = Activation::kIdentity;
    return spec;
  }

  int layer_count() const { return static_cast<int>(widths.size()) - 1; }
  int input_dim() const { return widths.front(); }
  int output_dim() const { return widths.back(); }

  int param_count() const {
    int n = 0;
    for (int l = 0; l < layer_count(); ++l) n += (widths[l] + 1) * widths[l + 1];
    return n;
  }

  // flat-vector offset of layer l's weight block; biases follow the weights
  int layer_offset(int l) const {
    int off = 0;
    for (int k = 0; k < l; ++k) off += (widths[k] + 1) * widths[k + 1];
    return off;
  }
};

/// Per-layer activations cached by a forward pass, consumed by backward.
struct MlpWorkspace {
  std::vector<Eigen::VectorXd> inputs;   // input to each layer
  std::vector<Eigen::VectorXd> preacts;  // pre-activation of each layer
};

struct MlpGrad {
  Eigen::VectorXd d_params;
  Eigen::VectorXd d_input;
};

/// Glorot-uniform weights, zero biases.
inline Eigen::VectorXd mlp_init(const MlpSpec& spec, RandomSource& rng) {
  Eigen::VectorXd params = Eigen::VectorXd::Zero(spec.param_count());
  for (int l = 0; l < spec.layer_count(); ++l) {
    const int fan_in = spec.widths[l], fan_out = spec.widths[l + 1];
    const double bound = std::sqrt(6.0 / (fan_in + fan_out));
    const int off = spec.layer_offset(l);
    for (int i = 0; i < fan_in * fan_out; ++i) params[off + i] = rng.uniform(-bound, bound);
  }
  return params;
}

inline Eigen::VectorXd mlp_forward(const MlpSpec& spec, const Eigen::VectorXd& params,
                                   const Eigen::VectorXd& x, MlpWorkspace* ws = nullptr) {
  if (x.size() != spec.input_dim())
    throw DimensionMismatchError("mlp_forward: input size mismatch");
  if (params.size() != spec.param_count())
    throw DimensionMismatchError("mlp_forward: parameter size mismatch");
  if (ws) {
    ws->inputs.assign(spec.layer_count(), {});
    ws->preacts.assign(spec.layer_count(), {});
  }
  Eigen::VectorXd a = x;
  for (int l = 0; l < spec.layer_count(); ++l) {
    const int in = spec.widths[l], out = spec.widths[l + 1];
    const int off = spec.layer_offset(l);
    const Eigen::Map<const Eigen::MatrixXd> w(params.data() + off, out, in);
    const Eigen::Map<const Eigen::VectorXd> b(params.data() + off + out * in, out);
    Eigen::VectorXd z = w * a + b;
    if (ws) {
      ws->inputs[l] = a;
      ws->preacts[l] = z;
    }
    if (spec.activations[l] == Activation::kRectifier) z = z.cwiseMax(0.0);
    a = std::move(z);
  }
  return a;
}

/// Exact reverse-mode gradients of upstream^T . output, wrt parameters and
/// input. Requires the workspace filled by a matching forward call.
inline MlpGrad mlp_backward(const MlpSpec& spec, const Eigen::VectorXd& params,
                            const MlpWorkspace& ws, const Eigen::VectorXd& upstream) {
  if (upstream.size() != spec.output_dim())
    throw DimensionMismatchError("mlp_backward: upstream size mismatch");
  MlpGrad grad;
  grad.d_params = Eigen::VectorXd::Zero(spec.param_count());
  Eigen::VectorXd delta = upstream;
  for (int l = spec.layer_count() - 1; l >= 0; --l) {
    const int in = spec.widths[l], out = spec.widths[l + 1];
    const int off = spec.layer_offset(l);
    if (spec.activations[l] == Activation::kRectifier)
      delta = (ws.preacts[l].array() > 0.0).select(delta, 0.0);
    const Eigen::Map<const Eigen::MatrixXd> w(params.data() + off, out, in);
    Eigen::Map<Eigen::MatrixXd> dw(grad.d_params.data() + off, out, in);
    Eigen::Map<Eigen::VectorXd> db(grad.d_params.data() + off + out * in, out);
    dw = delta * ws.inputs[l].transpose();
    db = delta;
    delta = w.transpose() * delta;
  }
  grad.d_input = std::move(delta);
  return grad;
}

// Network shapes used by the camera-localization pipeline.
inline MlpSpec coordinate_predictor_spec(int feature_dim) {
  return MlpSpec::regression({feature_dim, 64, 64, 3});
}
inline MlpSpec hypothesis_scorer_spec(int grid_cells) {
  return MlpSpec::regression({grid_cells, 64, 32, 1});
}

inline Eigen::Vector3d predict_coordinate(const MlpSpec& spec, const Eigen::VectorXd& w,
                                          const Eigen::VectorXd& features,
                                          MlpWorkspace* ws = nullptr) {
  return mlp_forward(spec, w, features, ws);
}

inline double score_hypothesis(const MlpSpec& spec, const Eigen::VectorXd& v,
                               const Eigen::VectorXd& errors, MlpWorkspace* ws = nullptr) {
  return mlp_forward(spec, v, errors, ws)[0];
}

/// Euclidean coordinate loss. The (sub)gradient at zero distance is zero.
inline double coord_loss(const Eigen::Vector3d& y, const Eigen::Vector3d& y_gt) {
  return (y - y_gt).norm();
}

inline Eigen::Vector3d coord_loss_grad(const Eigen::Vector3d& y, const Eigen::Vector3d& y_gt) {
  const Eigen::Vector3d d = y - y_gt;
  const double n = d.norm();
  if (n <= 0.0) return Eigen::Vector3d::Zero();
  return d / n;
}

inline double score_target(const Pose& h, const Pose& h_gt, double beta) {
  return -beta * pose_loss(h, h_gt);
}

/// |s - s*| with s* = -beta * pose_loss.
inline double score_loss(double s, const Pose& h, const Pose& h_gt, double beta) {
  return std::abs(s - score_target(h, h_gt, beta));
}

inline double abs_loss_grad(double s, double target) {
  if (s > target) return 1.0;
  if (s < target) return -1.0;
  return 0.0;
}

}  // namespace dsac

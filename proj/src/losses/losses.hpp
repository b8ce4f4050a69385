#pragma once

#include <stdexcept>

#include "ad/graph.hpp"
#include "ad/ops.hpp"

namespace se3ctrl::losses {

struct LossConfig {
  double alpha = 0.5;
  double beta = 1e-3;
  double gamma = 10.0;            // consistency weight
  double motion_threshold = 1e-3;  // meters

  void validate() const {
    if (alpha < 0.0) throw std::invalid_argument("LossConfig: alpha must be >= 0");
    if (beta <= 0.0) throw std::invalid_argument("LossConfig: beta must be > 0");
    if (gamma < 0.0) throw std::invalid_argument("LossConfig: gamma must be >= 0");
    if (motion_threshold < 0.0)
      throw std::invalid_argument("LossConfig: motion_threshold must be >= 0");
  }
};

// Normalized 3D reconstruction loss: per-dimension squared error scaled by
// 1/(alpha*|flow| + beta), summed over all points and divided by the count
// of points whose true motion exceeds motion_threshold. Zero when nothing
// moves. x_t supplies the reference for the ground-truth flow.
template <typename T>
int loss_3d(ad::Graph<T>& g, int xhat, const ad::Tensor<T>& x_tilde, const ad::Tensor<T>& x_t,
            const LossConfig& cfg) {
  cfg.validate();
  if (!x_tilde.same_shape(x_t)) throw std::invalid_argument("loss_3d: shape mismatch");
  ad::Tensor<T> flow(x_tilde.shape);
  for (int64_t i = 0; i < flow.numel(); ++i) flow.data[i] = x_tilde.data[i] - x_t.data[i];
  return ad::flow_loss(g, xhat, x_tilde, flow, static_cast<T>(cfg.alpha),
                       static_cast<T>(cfg.beta), static_cast<T>(cfg.motion_threshold));
}

// Pose-consistency loss: compose p_t with the predicted delta and compare to
// the independently encoded next pose, mean squared over all K*6 parameters.
// Optionally exposes the composed pose node.
template <typename T>
int loss_consistency(ad::Graph<T>& g, int pose_t, int delta, int pose_t1,
                     int* composed_out = nullptr) {
  int phat = ad::se3_compose(g, pose_t, delta);
  if (composed_out) *composed_out = phat;
  return ad::mse_mean(g, phat, pose_t1);
}

template <typename T>
int total_loss(ad::Graph<T>& g, int lx, int lp, const LossConfig& cfg) {
  cfg.validate();
  return ad::add_scaled(g, lx, lp, T(1), static_cast<T>(cfg.gamma));
}

}  // namespace se3ctrl::losses

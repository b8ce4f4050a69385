#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "ad/graph.hpp"
#include "ad/ops.hpp"
#include "ad/param_store.hpp"
#include "nets/model.hpp"
#include "sim/sim.hpp"
#include "util/rng.hpp"

// Closed-loop visual servoing in learned pose space. Each iteration encodes
// the current observation, predicts the effect of a candidate control through
// the transition net, and descends the pose-space error either by direct
// backprop to the control or by a damped Gauss-Newton step on a
// finite-difference Jacobian of the predicted pose.
namespace se3ctrl::ctrl {

struct ControllerConfig {
  double u_max = 1.0;          // commanded speed magnitude, rad/s
  double lambda = 1e-4;        // Gauss-Newton damping
  double fd_delta = 1e-3;      // perturbation for the finite-difference Jacobian
  int max_iters = 200;
  double epsilon = 1e-5;       // pose-error convergence threshold
  int rising_patience = 10;    // consecutive rising/stalled steps before abort

  void validate() const {
    if (!(u_max > 0.0)) throw std::invalid_argument("controller: u_max must be > 0");
    if (!(lambda > 0.0)) throw std::invalid_argument("controller: lambda must be > 0");
    if (!(fd_delta > 0.0)) throw std::invalid_argument("controller: fd_delta must be > 0");
    if (max_iters < 1) throw std::invalid_argument("controller: max_iters must be >= 1");
    if (!(epsilon > 0.0)) throw std::invalid_argument("controller: epsilon must be > 0");
    if (rising_patience < 1) throw std::invalid_argument("controller: rising_patience must be >= 1");
  }
};

enum class Method { backprop, gauss_newton };

inline const char* method_name(Method m) {
  return m == Method::backprop ? "backprop" : "gauss_newton";
}

struct ServoTask {
  std::vector<double> q_start;
  std::vector<double> q_target;
  std::string id;
};

struct TraceRow {
  int iteration = 0;
  double e = 0.0;  // controller objective at this iterate (before stepping)
  std::vector<double> q;
  std::vector<double> abs_err;  // per-joint |q - q_target|
  double mean_abs_err = 0.0;
  double u_norm = 0.0;
};

struct ControlTrace {
  std::string method;
  std::string task_id;
  std::string termination;  // converged | max_iters | rising_error
  std::vector<TraceRow> rows;

  double best_mean_abs_err() const {
    double best = std::numeric_limits<double>::infinity();
    for (const TraceRow& r : rows) best = std::min(best, r.mean_abs_err);
    return best;
  }
  // First iteration whose mean abs joint error drops below thresh; -1 if never.
  int first_iteration_below(double thresh) const {
    for (const TraceRow& r : rows)
      if (r.mean_abs_err < thresh) return r.iteration;
    return -1;
  }
};

// Mean squared difference over all pose entries (the controller objective).
template <typename T>
double pose_error(const ad::Tensor<T>& a, const ad::Tensor<T>& b) {
  if (!a.same_shape(b) || a.numel() == 0)
    throw std::invalid_argument("pose_error: shape mismatch");
  double acc = 0.0;
  for (int64_t i = 0; i < a.numel(); ++i) {
    const double d = static_cast<double>(a.data[i]) - static_cast<double>(b.data[i]);
    acc += d * d;
  }
  return acc / static_cast<double>(a.numel());
}

namespace detail {

template <typename T>
ad::Tensor<T> batch_of_one(const ad::Tensor<double>& chw) {
  if (chw.ndim() != 3) throw std::invalid_argument("batch_of_one: expect [C,H,W]");
  ad::Tensor<T> out({1, chw.dim(0), chw.dim(1), chw.dim(2)});
  for (int64_t i = 0; i < chw.numel(); ++i) out.data[i] = static_cast<T>(chw.data[i]);
  return out;
}

// Joint-angle node for a batch (every row identical), or -1 when the config
// does not use joint angles.
template <typename T>
int make_q_node(ad::Graph<T>& g, const nets::NetConfig& cfg, const std::vector<double>& q,
                int b) {
  if (!cfg.use_joint_angles) return -1;
  if (static_cast<int>(q.size()) != cfg.n_joints)
    throw std::invalid_argument("controller: joint vector size mismatch");
  ad::Tensor<T> t({b, cfg.n_joints});
  for (int i = 0; i < b; ++i)
    for (int j = 0; j < cfg.n_joints; ++j)
      t.data[static_cast<size_t>(i) * cfg.n_joints + j] = static_cast<T>(q[static_cast<size_t>(j)]);
  return g.constant(std::move(t), "q");
}

template <typename T>
ad::Tensor<T> tile_rows(const ad::Tensor<T>& pose, int b) {
  ad::Tensor<T> out({b, pose.dim(1), pose.dim(2)});
  const int64_t row = pose.numel();
  for (int i = 0; i < b; ++i)
    std::copy(pose.data.begin(), pose.data.end(), out.data.begin() + i * row);
  return out;
}

inline Eigen::VectorXd to_vec(const std::vector<double>& v) {
  return Eigen::Map<const Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size()));
}

}  // namespace detail

// Encodes one observed cloud (camera frame, [3,H,W] doubles) to a pose set
// [1,K,6]. Inference only; no gradients are kept.
template <typename T>
ad::Tensor<T> encode_pose(nets::Se3PoseNet<T>& net, const ad::Tensor<double>& cloud,
                          const std::vector<double>& q) {
  ad::Graph<T> g;
  ad::Binder<T> bind(g, net.params(), /*train=*/false);
  nets::Ctx<T> ctx{g, bind, nullptr};
  const int x = g.constant(detail::batch_of_one<T>(cloud), "x");
  const int qn = detail::make_q_node(g, net.config(), q, 1);
  auto enc = net.encoder_forward(ctx, x, qn, /*need_masks=*/false);
  return g.val(enc.pose);
}

// Predicted next poses p ^ trans(p, u) for a batch of controls sharing one
// current pose. us is [B, n_ctrl]; returns [B, K, 6] values.
template <typename T>
ad::Tensor<T> predict_poses(nets::Se3PoseNet<T>& net, const ad::Tensor<T>& pose,
                            const Eigen::MatrixXd& us, const std::vector<double>& q) {
  if (pose.ndim() != 3 || pose.dim(0) != 1)
    throw std::invalid_argument("predict_poses: pose must be [1,K,6]");
  const int b = static_cast<int>(us.rows());
  const int n = static_cast<int>(us.cols());
  ad::Graph<T> g;
  ad::Binder<T> bind(g, net.params(), /*train=*/false);
  nets::Ctx<T> ctx{g, bind, nullptr};
  const int pn = g.constant(detail::tile_rows(pose, b), "pose");
  ad::Tensor<T> ut({b, n});
  for (int i = 0; i < b; ++i)
    for (int j = 0; j < n; ++j) ut.data[static_cast<size_t>(i) * n + j] = static_cast<T>(us(i, j));
  const int un = g.constant(std::move(ut), "u");
  const int qn = detail::make_q_node(g, net.config(), q, b);
  const int delta = net.transition_forward(ctx, pn, un, qn);
  const int phat = ad::se3_compose(g, pn, delta);
  return g.val(phat);
}

struct ControlGrad {
  double e = 0.0;           // objective at u = 0
  Eigen::VectorXd grad;     // descent direction source (before normalization)
};

// dE/du at u = 0 by reverse-mode differentiation through the transition net
// and the pose composition. Network weights stay frozen.
template <typename T>
ControlGrad control_grad_backprop(nets::Se3PoseNet<T>& net, const ad::Tensor<T>& pose,
                                  const ad::Tensor<T>& target, const std::vector<double>& q) {
  if (!pose.same_shape(target))
    throw std::invalid_argument("control_grad_backprop: pose/target shape mismatch");
  const int n = net.config().n_ctrl;
  ad::Graph<T> g;
  ad::Binder<T> bind(g, net.params(), /*train=*/false);
  nets::Ctx<T> ctx{g, bind, nullptr};
  const int pn = g.constant(pose, "pose");
  const int un = g.add(ad::Tensor<T>({1, n}), /*requires_grad=*/true, {}, "u");
  const int qn = detail::make_q_node(g, net.config(), q, 1);
  const int delta = net.transition_forward(ctx, pn, un, qn);
  const int phat = ad::se3_compose(g, pn, delta);
  const int tn = g.constant(target, "target");
  const int e = ad::mse_mean(g, phat, tn);
  g.backward(e);
  ControlGrad out;
  out.e = static_cast<double>(g.val(e).data[0]);
  out.grad = Eigen::VectorXd::Zero(n);
  if (g.has_grad(un)) {
    const ad::Tensor<T>& gu = g.grad(un);
    for (int j = 0; j < n; ++j) out.grad(j) = static_cast<double>(gu.data[static_cast<size_t>(j)]);
  }
  return out;
}

// Central-difference Jacobian of the predicted pose w.r.t. the control at
// u = 0, evaluated in one batched forward pass. Returns [K*6, n_ctrl].
template <typename T>
Eigen::MatrixXd jacobian_fd(nets::Se3PoseNet<T>& net, const ad::Tensor<T>& pose,
                            const std::vector<double>& q, double fd_delta,
                            ad::Tensor<T>* phat0 = nullptr) {
  const int n = net.config().n_ctrl;
  const int kk = net.config().k * 6;
  Eigen::MatrixXd us = Eigen::MatrixXd::Zero(2 * n + 1, n);
  for (int j = 0; j < n; ++j) {
    us(2 * j, j) = fd_delta;
    us(2 * j + 1, j) = -fd_delta;
  }
  const ad::Tensor<T> ph = predict_poses(net, pose, us, q);
  Eigen::MatrixXd jac(kk, n);
  for (int j = 0; j < n; ++j)
    for (int r = 0; r < kk; ++r) {
      const double hi = static_cast<double>(ph.data[static_cast<size_t>(2 * j) * kk + r]);
      const double lo = static_cast<double>(ph.data[static_cast<size_t>(2 * j + 1) * kk + r]);
      jac(r, j) = (hi - lo) / (2.0 * fd_delta);
    }
  if (phat0 != nullptr) {
    *phat0 = ad::Tensor<T>({1, net.config().k, 6});
    std::copy(ph.data.begin() + static_cast<int64_t>(2 * n) * kk,
              ph.data.begin() + static_cast<int64_t>(2 * n + 1) * kk, phat0->data.begin());
  }
  return jac;
}

// Exact Jacobian of the predicted pose w.r.t. the control at u = 0 via one
// reverse pass per output entry. Reference for validating jacobian_fd.
template <typename T>
Eigen::MatrixXd jacobian_autodiff(nets::Se3PoseNet<T>& net, const ad::Tensor<T>& pose,
                                  const std::vector<double>& q) {
  const int n = net.config().n_ctrl;
  const int kk = net.config().k * 6;
  Eigen::MatrixXd jac = Eigen::MatrixXd::Zero(kk, n);
  for (int r = 0; r < kk; ++r) {
    ad::Graph<T> g;
    ad::Binder<T> bind(g, net.params(), /*train=*/false);
    nets::Ctx<T> ctx{g, bind, nullptr};
    const int pn = g.constant(pose, "pose");
    const int un = g.add(ad::Tensor<T>({1, n}), /*requires_grad=*/true, {}, "u");
    const int qn = detail::make_q_node(g, net.config(), q, 1);
    const int delta = net.transition_forward(ctx, pn, un, qn);
    const int phat = ad::se3_compose(g, pn, delta);
    auto sel = std::make_shared<ad::Tensor<T>>(std::vector<int>{1, net.config().k, 6});
    sel->data[static_cast<size_t>(r)] = T(1);
    const int s = ad::sum_sel(g, phat, std::shared_ptr<const ad::Tensor<T>>(std::move(sel)));
    g.backward(s);
    if (g.has_grad(un)) {
      const ad::Tensor<T>& gu = g.grad(un);
      for (int j = 0; j < n; ++j) jac(r, j) = static_cast<double>(gu.data[static_cast<size_t>(j)]);
    }
  }
  return jac;
}

// Damped normal-equations solve: (J^T J + lambda I) x = J^T g_p.
inline Eigen::VectorXd gauss_newton_step(const Eigen::MatrixXd& jac, const Eigen::VectorXd& g_p,
                                         double lambda) {
  if (jac.rows() != g_p.size())
    throw std::invalid_argument("gauss_newton_step: jacobian/gradient size mismatch");
  Eigen::MatrixXd a = jac.transpose() * jac;
  a.diagonal().array() += lambda;
  return a.ldlt().solve(jac.transpose() * g_p);
}

// Gauss-Newton control direction at u = 0: finite-difference pose Jacobian,
// pose-space gradient g_p = 2 (p_hat - p_T) / I, damped solve.
template <typename T>
ControlGrad control_grad_gauss_newton(nets::Se3PoseNet<T>& net, const ad::Tensor<T>& pose,
                                      const ad::Tensor<T>& target, const std::vector<double>& q,
                                      double fd_delta, double lambda) {
  if (!pose.same_shape(target))
    throw std::invalid_argument("control_grad_gauss_newton: pose/target shape mismatch");
  const int kk = net.config().k * 6;
  ad::Tensor<T> phat0;
  const Eigen::MatrixXd jac = jacobian_fd(net, pose, q, fd_delta, &phat0);
  Eigen::VectorXd g_p(kk);
  double acc = 0.0;
  for (int r = 0; r < kk; ++r) {
    const double d =
        static_cast<double>(phat0.data[static_cast<size_t>(r)]) - static_cast<double>(target.data[static_cast<size_t>(r)]);
    g_p(r) = 2.0 * d / static_cast<double>(kk);
    acc += d * d;
  }
  ControlGrad out;
  out.e = acc / static_cast<double>(kk);
  out.grad = gauss_newton_step(jac, g_p, lambda);
  return out;
}

namespace detail {

struct LoopState {
  double prev_e = std::numeric_limits<double>::infinity();
  int patience = 0;
};

// Shared per-iteration bookkeeping: record, convergence test, rising-error
// test, step application. Returns true when the loop should stop.
inline bool loop_step(ControlTrace& tr, LoopState& st, const ControllerConfig& cfg,
                      const ServoTask& task, std::vector<double>& q, int it, double e,
                      const Eigen::VectorXd& grad, double dt,
                      const std::vector<double>& limit_lo, const std::vector<double>& limit_hi) {
  const int n = static_cast<int>(q.size());
  const double gn = grad.norm();
  Eigen::VectorXd u = Eigen::VectorXd::Zero(n);
  if (gn >= 1e-12) u = -cfg.u_max / gn * grad;

  TraceRow row;
  row.iteration = it;
  row.e = e;
  row.q = q;
  row.abs_err.resize(static_cast<size_t>(n));
  double mean = 0.0;
  for (int j = 0; j < n; ++j) {
    row.abs_err[static_cast<size_t>(j)] = std::abs(q[static_cast<size_t>(j)] - task.q_target[static_cast<size_t>(j)]);
    mean += row.abs_err[static_cast<size_t>(j)];
  }
  row.mean_abs_err = mean / n;
  row.u_norm = u.norm();
  tr.rows.push_back(std::move(row));

  if (e < cfg.epsilon) {
    tr.termination = "converged";
    return true;
  }
  // A stalled step (vanishing gradient) cannot make progress, so it counts
  // toward the abort patience alongside strictly rising error.
  const bool rising = it > 0 && e > st.prev_e;
  const bool stalled = gn < 1e-12;
  if (rising || stalled) {
    if (++st.patience >= cfg.rising_patience) {
      tr.termination = "rising_error";
      return true;
    }
  } else {
    st.patience = 0;
  }
  st.prev_e = e;

  for (int j = 0; j < n; ++j) {
    q[static_cast<size_t>(j)] = std::clamp(q[static_cast<size_t>(j)] + u(j) * dt,
                                           limit_lo[static_cast<size_t>(j)], limit_hi[static_cast<size_t>(j)]);
  }
  return false;
}

}  // namespace detail

// Visual servoing with the learned dynamics: observe, encode, descend the
// pose-space error toward the target encoding.
template <typename T>
ControlTrace run_control_loop(const sim::ArmModel& arm, const sim::CameraModel& camera,
                              nets::Se3PoseNet<T>& net, const ServoTask& task,
                              const ControllerConfig& cfg, Method method, double dt) {
  cfg.validate();
  if (static_cast<int>(task.q_start.size()) != arm.n_joints ||
      static_cast<int>(task.q_target.size()) != arm.n_joints)
    throw std::invalid_argument("run_control_loop: task size mismatch");
  if (net.config().n_ctrl != arm.n_joints)
    throw std::invalid_argument("run_control_loop: control width != joint count");
  if (!(dt > 0.0)) throw std::invalid_argument("run_control_loop: dt must be > 0");

  ControlTrace tr;
  tr.method = method_name(method);
  tr.task_id = task.id;

  const sim::Frame target_frame = sim::render(arm, camera, task.q_target);
  const ad::Tensor<T> p_target = encode_pose(net, target_frame.cloud, task.q_target);

  std::vector<double> q = task.q_start;
  detail::LoopState st;
  for (int it = 0; it < cfg.max_iters; ++it) {
    const sim::Frame frame = sim::render(arm, camera, q);
    const ad::Tensor<T> p_t = encode_pose(net, frame.cloud, q);
    const ControlGrad g = method == Method::backprop
                              ? control_grad_backprop(net, p_t, p_target, q)
                              : control_grad_gauss_newton(net, p_t, p_target, q, cfg.fd_delta,
                                                          cfg.lambda);
    if (detail::loop_step(tr, st, cfg, task, q, it, g.e, g.grad, dt, arm.limit_lo, arm.limit_hi))
      return tr;
  }
  tr.termination = "max_iters";
  return tr;
}

// Flow-model baseline: the objective is the MSE between the predicted next
// cloud x + flow(x, u) and the oracle-associated target points, over moving
// pixels only.
template <typename T>
ControlTrace run_baseline_flow_control(const sim::ArmModel& arm, const sim::CameraModel& camera,
                                       nets::FlowNet<T>& net, const ServoTask& task,
                                       const ControllerConfig& cfg, Method method, double dt) {
  cfg.validate();
  if (static_cast<int>(task.q_start.size()) != arm.n_joints ||
      static_cast<int>(task.q_target.size()) != arm.n_joints)
    throw std::invalid_argument("run_baseline_flow_control: task size mismatch");
  if (net.config().n_ctrl != arm.n_joints)
    throw std::invalid_argument("run_baseline_flow_control: control width != joint count");
  if (!(dt > 0.0)) throw std::invalid_argument("run_baseline_flow_control: dt must be > 0");

  ControlTrace tr;
  tr.method = std::string("flow_") + method_name(method);
  tr.task_id = task.id;

  const int n = arm.n_joints;
  std::vector<double> q = task.q_start;
  detail::LoopState st;
  for (int it = 0; it < cfg.max_iters; ++it) {
    const sim::Frame frame = sim::render(arm, camera, q);
    const ad::Tensor<double> assoc = sim::carry_points(arm, camera, frame, task.q_target);
    const int64_t hw = static_cast<int64_t>(camera.h) * camera.w;
    std::vector<int64_t> moving;
    for (int64_t p = 0; p < hw; ++p) {
      double d2 = 0.0;
      for (int c = 0; c < 3; ++c) {
        const double d = assoc.data[c * hw + p] - frame.cloud.data[c * hw + p];
        d2 += d * d;
      }
      if (d2 > 1e-3 * 1e-3) moving.push_back(p);
    }
    const int64_t m = static_cast<int64_t>(moving.size());

    double e = 0.0;
    Eigen::VectorXd grad = Eigen::VectorXd::Zero(n);
    if (m > 0) {
      auto target = std::make_shared<ad::Tensor<T>>(std::vector<int>{1, 3, camera.h, camera.w});
      auto weight = std::make_shared<ad::Tensor<T>>(std::vector<int>{1, 3, camera.h, camera.w});
      for (int64_t i = 0; i < assoc.numel(); ++i) target->data[i] = static_cast<T>(assoc.data[i]);
      for (const int64_t p : moving)
        for (int c = 0; c < 3; ++c) weight->data[c * hw + p] = static_cast<T>(1.0 / static_cast<double>(m));

      if (method == Method::backprop) {
        ad::Graph<T> g;
        ad::Binder<T> bind(g, net.params(), /*train=*/false);
        nets::Ctx<T> ctx{g, bind, nullptr};
        const int x = g.constant(detail::batch_of_one<T>(frame.cloud), "x");
        const int un = g.add(ad::Tensor<T>({1, n}), /*requires_grad=*/true, {}, "u");
        const int qn = detail::make_q_node(g, net.config(), q, 1);
        const int flow = net.forward(ctx, x, un, qn);
        const int xhat = ad::add(g, x, flow);
        const int en = ad::weighted_sq_loss(g, xhat,
                                            std::shared_ptr<const ad::Tensor<T>>(target),
                                            std::shared_ptr<const ad::Tensor<T>>(weight));
        g.backward(en);
        e = static_cast<double>(g.val(en).data[0]);
        if (g.has_grad(un)) {
          const ad::Tensor<T>& gu = g.grad(un);
          for (int j = 0; j < n; ++j) grad(j) = static_cast<double>(gu.data[static_cast<size_t>(j)]);
        }
      } else {
        // Batched central differences over the moving rows of the predicted
        // cloud, then the damped normal-equations solve.
        const int b = 2 * n + 1;
        ad::Graph<T> g;
        ad::Binder<T> bind(g, net.params(), /*train=*/false);
        nets::Ctx<T> ctx{g, bind, nullptr};
        ad::Tensor<T> xb({b, 3, camera.h, camera.w});
        const ad::Tensor<T> x1 = detail::batch_of_one<T>(frame.cloud);
        for (int i = 0; i < b; ++i)
          std::copy(x1.data.begin(), x1.data.end(), xb.data.begin() + static_cast<int64_t>(i) * 3 * hw);
        ad::Tensor<T> ub({b, n});
        for (int j = 0; j < n; ++j) {
          ub.data[static_cast<size_t>(2 * j) * n + j] = static_cast<T>(cfg.fd_delta);
          ub.data[static_cast<size_t>(2 * j + 1) * n + j] = static_cast<T>(-cfg.fd_delta);
        }
        const int x = g.constant(std::move(xb), "x");
        const int un = g.constant(std::move(ub), "u");
        const int qn = detail::make_q_node(g, net.config(), q, b);
        const int flow = net.forward(ctx, x, un, qn);
        const int xhat = ad::add(g, x, flow);
        const ad::Tensor<T>& vh = g.val(xhat);

        const int64_t rows = 3 * m;
        Eigen::MatrixXd jac(rows, n);
        Eigen::VectorXd g_p(rows);
        const T* base = vh.ptr() + static_cast<int64_t>(2 * n) * 3 * hw;
        for (int64_t i = 0; i < m; ++i) {
          const int64_t p = moving[static_cast<size_t>(i)];
          for (int c = 0; c < 3; ++c) {
            const int64_t r = 3 * i + c;
            const double pred = static_cast<double>(base[c * hw + p]);
            const double d = pred - assoc.data[c * hw + p];
            g_p(r) = 2.0 * d / static_cast<double>(m);
            e += d * d;
            for (int j = 0; j < n; ++j) {
              const double hi = static_cast<double>(vh.data[static_cast<size_t>(2 * j) * 3 * hw + c * hw + p]);
              const double lo = static_cast<double>(vh.data[static_cast<size_t>(2 * j + 1) * 3 * hw + c * hw + p]);
              jac(r, j) = (hi - lo) / (2.0 * cfg.fd_delta);
            }
          }
        }
        e /= static_cast<double>(m);
        grad = gauss_newton_step(jac, g_p, cfg.lambda);
      }
    }
    if (detail::loop_step(tr, st, cfg, task, q, it, e, grad, dt, arm.limit_lo, arm.limit_hi))
      return tr;
  }
  tr.termination = "max_iters";
  return tr;
}

// Draws servo tasks: target configurations are visible, start configurations
// offset each joint by a random sign and magnitude, and the magnitudes are
// rescaled so the mean per-joint initial error is exactly mean_err.
inline std::vector<ServoTask> sample_servo_tasks(const sim::ArmModel& arm,
                                                 const sim::CameraModel& camera, int n_tasks,
                                                 double mean_err, double min_visible_frac,
                                                 util::Rng& rng) {
  if (n_tasks < 1) throw std::invalid_argument("sample_servo_tasks: n_tasks must be >= 1");
  if (!(mean_err > 0.0)) throw std::invalid_argument("sample_servo_tasks: mean_err must be > 0");
  const int n = arm.n_joints;
  for (int attempt = 0; attempt < 50; ++attempt) {
    std::vector<std::vector<double>> targets, offsets;
    bool ok = true;
    for (int t = 0; t < n_tasks && ok; ++t) {
      const std::vector<double> q_target =
          sim::sample_visible_config(arm, camera, min_visible_frac, rng);
      std::vector<double> off(static_cast<size_t>(n));
      bool found = false;
      for (int tries = 0; tries < 100 && !found; ++tries) {
        found = true;
        for (int j = 0; j < n; ++j) {
          const double mag = mean_err * rng.uniform(0.6, 1.4);
          off[static_cast<size_t>(j)] = rng.bernoulli(0.5) ? mag : -mag;
          // Margin so the exact-mean rescale below cannot hit the limits.
          const double qs = q_target[static_cast<size_t>(j)] + 1.25 * off[static_cast<size_t>(j)];
          if (qs < arm.limit_lo[static_cast<size_t>(j)] || qs > arm.limit_hi[static_cast<size_t>(j)]) {
            found = false;
            break;
          }
        }
      }
      if (!found) {
        ok = false;
        break;
      }
      targets.push_back(q_target);
      offsets.push_back(off);
    }
    if (!ok) continue;

    double mean = 0.0;
    for (const auto& off : offsets)
      for (const double v : off) mean += std::abs(v);
    mean /= static_cast<double>(n_tasks * n);
    const double scale = mean_err / mean;
    if (scale > 1.25) continue;

    std::vector<ServoTask> tasks;
    ok = true;
    for (int t = 0; t < n_tasks; ++t) {
      ServoTask task;
      task.q_target = targets[static_cast<size_t>(t)];
      task.q_start.resize(static_cast<size_t>(n));
      for (int j = 0; j < n; ++j)
        task.q_start[static_cast<size_t>(j)] =
            task.q_target[static_cast<size_t>(j)] + scale * offsets[static_cast<size_t>(t)][static_cast<size_t>(j)];
      const sim::Frame f = sim::render(arm, camera, task.q_start);
      if (f.visible_frac < min_visible_frac) {
        ok = false;
        break;
      }
      char buf[32];
      std::snprintf(buf, sizeof(buf), "task_%02d", t);
      task.id = buf;
      tasks.push_back(std::move(task));
    }
    if (ok) return tasks;
  }
  throw std::runtime_error("sample_servo_tasks: could not sample a valid task set");
}

// One CSV across all traces; doubles are printed with %.17g so identical runs
// produce identical bytes.
inline void write_traces_csv(std::ostream& os, const std::vector<ControlTrace>& traces) {
  int n = -1;
  for (const ControlTrace& tr : traces)
    for (const TraceRow& r : tr.rows) {
      if (n < 0) n = static_cast<int>(r.abs_err.size());
      if (n != static_cast<int>(r.abs_err.size()))
        throw std::invalid_argument("write_traces_csv: mixed joint counts");
    }
  if (n < 0) throw std::invalid_argument("write_traces_csv: no rows");
  os << "iteration,e";
  for (int j = 0; j < n; ++j) os << ",abs_err_j" << j;
  os << ",mean_abs_err,u_norm,method,task_id\n";
  char buf[64];
  const auto put = [&](double v) {
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    os << buf;
  };
  for (const ControlTrace& tr : traces)
    for (const TraceRow& r : tr.rows) {
      os << r.iteration << ",";
      put(r.e);
      for (int j = 0; j < n; ++j) {
        os << ",";
        put(r.abs_err[static_cast<size_t>(j)]);
      }
      os << ",";
      put(r.mean_abs_err);
      os << ",";
      put(r.u_norm);
      os << "," << tr.method << "," << tr.task_id << "\n";
    }
}

inline void write_traces_csv(const std::string& path, const std::vector<ControlTrace>& traces) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("write_traces_csv: cannot open " + path);
  write_traces_csv(os, traces);
}

}  // namespace se3ctrl::ctrl

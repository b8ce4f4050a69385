#include "sim/sim.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>

namespace se3ctrl::sim {

void ArmModel::validate() const {
  const size_t n = static_cast<size_t>(n_joints);
  if (n_joints < 1) throw std::invalid_argument("ArmModel: n_joints must be >= 1");
  if (link_lengths.size() != n || link_radii.size() != n || joint_axes.size() != n ||
      link_dirs.size() != n || limit_lo.size() != n || limit_hi.size() != n) {
    throw std::invalid_argument("ArmModel: per-joint field size mismatch");
  }
  for (size_t k = 0; k < n; ++k) {
    if (!(link_lengths[k] > 0) || !(link_radii[k] > 0))
      throw std::invalid_argument("ArmModel: lengths and radii must be positive");
    if (!(limit_lo[k] < limit_hi[k]))
      throw std::invalid_argument("ArmModel: joint limits must be well-ordered");
    if (joint_axes[k].norm() < 1e-12 || link_dirs[k].norm() < 1e-12)
      throw std::invalid_argument("ArmModel: zero axis or link direction");
  }
}

void CameraModel::validate() const {
  if (h < 1 || w < 1) throw std::invalid_argument("CameraModel: bad image size");
  if (!(fx > 0) || !(fy > 0)) throw std::invalid_argument("CameraModel: fx, fy must be > 0");
  if (!(background_depth > 0))
    throw std::invalid_argument("CameraModel: background depth must be > 0");
}

CameraModel CameraModel::desk_default(int h, int w) {
  CameraModel c;
  c.h = h;
  c.w = w;
  c.fx = c.fy = 36.0 * (w / 32.0);
  c.cx = (w - 1) / 2.0;
  c.cy = (h - 1) / 2.0;
  c.background_depth = 3.0;
  const Eigen::Vector3d pos(2.0, 0.5, 0.3);
  const Eigen::Vector3d target(0.0, 0.5, 0.0);
  const Eigen::Vector3d up(0.0, 0.0, 1.0);
  // Right-handed CV frame: x right, y down, z forward (optical axis).
  const Eigen::Vector3d zc = (target - pos).normalized();
  const Eigen::Vector3d right = zc.cross(up).normalized();
  const Eigen::Vector3d down = zc.cross(right).normalized();
  Eigen::Matrix3d r_world_from_cam;
  r_world_from_cam.col(0) = right;
  r_world_from_cam.col(1) = down;
  r_world_from_cam.col(2) = zc;
  Eigen::Isometry3d world_from_cam = Eigen::Isometry3d::Identity();
  world_from_cam.linear() = r_world_from_cam;
  world_from_cam.translation() = pos;
  c.cam_from_world = world_from_cam.inverse();
  return c;
}

FkResult forward_kinematics(const ArmModel& model, const std::vector<double>& q) {
  model.validate();
  if (q.size() != static_cast<size_t>(model.n_joints))
    throw std::invalid_argument("forward_kinematics: q size mismatch");
  FkResult out;
  out.q = q;
  for (int k = 0; k < model.n_joints; ++k) {
    const size_t i = static_cast<size_t>(k);
    if (out.q[i] < model.limit_lo[i]) {
      out.q[i] = model.limit_lo[i];
      out.clamped = true;
    } else if (out.q[i] > model.limit_hi[i]) {
      out.q[i] = model.limit_hi[i];
      out.clamped = true;
    }
  }
  Eigen::Isometry3d a = model.base;
  for (int k = 0; k < model.n_joints; ++k) {
    const size_t i = static_cast<size_t>(k);
    Eigen::Isometry3d joint = Eigen::Isometry3d::Identity();
    joint.linear() =
        Eigen::AngleAxisd(out.q[i], model.joint_axes[i].normalized()).toRotationMatrix();
    const Eigen::Isometry3d w = a * joint;
    out.link_world.push_back(w);
    Eigen::Isometry3d shift = Eigen::Isometry3d::Identity();
    shift.translation() = model.link_dirs[i].normalized() * model.link_lengths[i];
    a = w * shift;
  }
  out.ee = a.translation();
  return out;
}

Eigen::Matrix<double, 3, Eigen::Dynamic> ee_jacobian(const ArmModel& model,
                                                     const std::vector<double>& q) {
  const FkResult fk = forward_kinematics(model, q);
  Eigen::Matrix<double, 3, Eigen::Dynamic> j(3, model.n_joints);
  for (int k = 0; k < model.n_joints; ++k) {
    const size_t i = static_cast<size_t>(k);
    const Eigen::Vector3d axis_w =
        fk.link_world[i].linear() * model.joint_axes[i].normalized();
    const Eigen::Vector3d origin = fk.link_world[i].translation();
    j.col(k) = axis_w.cross(fk.ee - origin);
  }
  return j;
}

namespace {

// Nearest positive ray-capsule intersection (ray origin o, unit dir d), or
// +inf. Capsule = cylinder body between p0,p1 union end spheres.
double ray_capsule(const Eigen::Vector3d& o, const Eigen::Vector3d& d,
                   const Eigen::Vector3d& p0, const Eigen::Vector3d& p1, double r) {
  double best = std::numeric_limits<double>::infinity();
  const Eigen::Vector3d ba = p1 - p0;
  const Eigen::Vector3d oa = o - p0;
  const double baba = ba.dot(ba);
  const double bard = ba.dot(d);
  const double baoa = ba.dot(oa);
  const double a = baba - bard * bard;
  const double b = baba * oa.dot(d) - baoa * bard;
  const double c = baba * oa.dot(oa) - baoa * baoa - r * r * baba;
  if (std::abs(a) > 1e-12) {
    const double h = b * b - a * c;
    if (h >= 0.0) {
      const double t = (-b - std::sqrt(h)) / a;
      const double y = baoa + t * bard;
      if (t > 0.0 && y >= 0.0 && y <= baba) best = t;
    }
  }
  for (const Eigen::Vector3d& center : {p0, p1}) {
    const Eigen::Vector3d oc = o - center;
    const double bq = oc.dot(d);
    const double cq = oc.dot(oc) - r * r;
    const double h = bq * bq - cq;
    if (h >= 0.0) {
      const double t = -bq - std::sqrt(h);
      if (t > 0.0 && t < best) best = t;
    }
  }
  return best;
}

}  // namespace

Frame render(const ArmModel& model, const CameraModel& camera, const std::vector<double>& q) {
  camera.validate();
  const FkResult fk = forward_kinematics(model, q);
  const int h = camera.h, w = camera.w;
  const int n_links = model.n_joints;
  Frame f;
  f.cloud = ad::Tensor<double>({3, h, w});
  f.gt_masks = ad::Tensor<double>({n_links + 1, h, w});
  f.labels.assign(static_cast<size_t>(h) * w, n_links);
  f.q = fk.q;

  // Capsule endpoints in the camera frame; rays then live entirely there.
  std::vector<Eigen::Vector3d> p0(static_cast<size_t>(n_links)),
      p1(static_cast<size_t>(n_links));
  for (int k = 0; k < n_links; ++k) {
    const size_t i = static_cast<size_t>(k);
    const Eigen::Vector3d a = fk.link_world[i].translation();
    const Eigen::Vector3d b =
        fk.link_world[i] *
        (model.link_dirs[i].normalized() * model.link_lengths[i]);
    p0[i] = camera.cam_from_world * a;
    p1[i] = camera.cam_from_world * b;
  }

  const int64_t hw = static_cast<int64_t>(h) * w;
  int visible = 0;
  for (int v = 0; v < h; ++v) {
    for (int uu = 0; uu < w; ++uu) {
      const Eigen::Vector3d dir =
          Eigen::Vector3d((uu - camera.cx) / camera.fx, (v - camera.cy) / camera.fy, 1.0)
              .normalized();
      double t_best = std::numeric_limits<double>::infinity();
      int label = n_links;
      for (int k = 0; k < n_links; ++k) {
        const size_t i = static_cast<size_t>(k);
        const double t =
            ray_capsule(Eigen::Vector3d::Zero(), dir, p0[i], p1[i], model.link_radii[i]);
        if (t < t_best) {
          t_best = t;
          label = k;
        }
      }
      // The backdrop is the plane z = background_depth in the camera frame.
      const double t_bg = camera.background_depth / dir.z();
      if (!(t_best < t_bg)) {
        t_best = t_bg;
        label = n_links;
      }
      const Eigen::Vector3d p = dir * t_best;
      const int64_t pix = static_cast<int64_t>(v) * w + uu;
      f.cloud.data[static_cast<size_t>(pix)] = p.x();
      f.cloud.data[static_cast<size_t>(hw + pix)] = p.y();
      f.cloud.data[static_cast<size_t>(2 * hw + pix)] = p.z();
      f.labels[static_cast<size_t>(pix)] = label;
      f.gt_masks.data[static_cast<size_t>(label) * hw + pix] = 1.0;
      if (label != n_links) ++visible;
    }
  }
  f.visible_frac = static_cast<double>(visible) / static_cast<double>(hw);
  return f;
}

ad::Tensor<double> carry_points(const ArmModel& model, const CameraModel& camera,
                                const Frame& frame, const std::vector<double>& q_to) {
  const FkResult fk_from = forward_kinematics(model, frame.q);
  const FkResult fk_to = forward_kinematics(model, q_to);
  const int n_links = model.n_joints;
  // Per-link camera-frame carry D_k = cam * W'_k * W_k^-1 * cam^-1.
  const Eigen::Isometry3d world_from_cam = camera.cam_from_world.inverse();
  std::vector<Eigen::Isometry3d> carry(static_cast<size_t>(n_links));
  for (int k = 0; k < n_links; ++k) {
    const size_t i = static_cast<size_t>(k);
    carry[i] = camera.cam_from_world * fk_to.link_world[i] *
               fk_from.link_world[i].inverse() * world_from_cam;
  }
  const int64_t hw = static_cast<int64_t>(camera.h) * camera.w;
  ad::Tensor<double> out(frame.cloud.shape);
  for (int64_t pix = 0; pix < hw; ++pix) {
    const Eigen::Vector3d p(frame.cloud.data[static_cast<size_t>(pix)],
                            frame.cloud.data[static_cast<size_t>(hw + pix)],
                            frame.cloud.data[static_cast<size_t>(2 * hw + pix)]);
    const int label = frame.labels[static_cast<size_t>(pix)];
    const Eigen::Vector3d p2 =
        (label == n_links) ? p : carry[static_cast<size_t>(label)] * p;
    out.data[static_cast<size_t>(pix)] = p2.x();
    out.data[static_cast<size_t>(hw + pix)] = p2.y();
    out.data[static_cast<size_t>(2 * hw + pix)] = p2.z();
  }
  return out;
}

Eigen::Matrix<double, 6, 1> link_delta(const ArmModel& model, const CameraModel& camera,
                                       const std::vector<double>& q_from,
                                       const std::vector<double>& q_to, int k) {
  if (k < 0 || k >= model.n_joints) throw std::invalid_argument("link_delta: bad link index");
  const FkResult a = forward_kinematics(model, q_from);
  const FkResult b = forward_kinematics(model, q_to);
  const Eigen::Isometry3d d = camera.cam_from_world * b.link_world[static_cast<size_t>(k)] *
                              a.link_world[static_cast<size_t>(k)].inverse() *
                              camera.cam_from_world.inverse();
  Eigen::Matrix<double, 6, 1> out;
  out.head<3>() = Eigen::AngleAxisd(d.linear()).angle() * Eigen::AngleAxisd(d.linear()).axis();
  out.tail<3>() = d.translation();
  return out;
}

TrainingPair associate(const ArmModel& model, const CameraModel& camera,
                       const std::vector<double>& q, const std::vector<double>& u, double dt) {
  if (u.size() != static_cast<size_t>(model.n_joints))
    throw std::invalid_argument("associate: u size mismatch");
  if (!(dt > 0)) throw std::invalid_argument("associate: dt must be > 0");
  TrainingPair pair;
  pair.frame_t = render(model, camera, q);
  pair.u = u;
  pair.dt = dt;
  pair.q_next = pair.frame_t.q;
  for (int k = 0; k < model.n_joints; ++k) {
    const size_t i = static_cast<size_t>(k);
    pair.q_next[i] = std::clamp(pair.q_next[i] + u[i] * dt, model.limit_lo[i], model.limit_hi[i]);
  }
  pair.assoc = carry_points(model, camera, pair.frame_t, pair.q_next);
  pair.flow = ad::Tensor<double>(pair.assoc.shape);
  const int64_t hw = static_cast<int64_t>(camera.h) * camera.w;
  pair.moving_count = 0;
  for (int64_t pix = 0; pix < hw; ++pix) {
    double norm2 = 0.0;
    for (int d = 0; d < 3; ++d) {
      const size_t j = static_cast<size_t>(d * hw + pix);
      pair.flow.data[j] = pair.assoc.data[j] - pair.frame_t.cloud.data[j];
      norm2 += pair.flow.data[j] * pair.flow.data[j];
    }
    if (std::sqrt(norm2) > 1e-3) ++pair.moving_count;
  }
  return pair;
}

std::vector<double> sample_visible_config(const ArmModel& model, const CameraModel& camera,
                                          double min_visible_frac, util::Rng& rng,
                                          int max_rejects) {
  for (int attempt = 0; attempt < max_rejects; ++attempt) {
    std::vector<double> q(static_cast<size_t>(model.n_joints));
    for (int k = 0; k < model.n_joints; ++k) {
      const size_t i = static_cast<size_t>(k);
      q[i] = rng.uniform(model.limit_lo[i], model.limit_hi[i]);
    }
    if (render(model, camera, q).visible_frac >= min_visible_frac) return q;
  }
  throw std::runtime_error("sample_visible_config: rejection sampling exhausted");
}

namespace {

// Smoothstep interpolation with zero end velocities.
double smoothstep(double t) { return t * t * (3.0 - 2.0 * t); }

std::vector<TrainingPair> make_pairs_from_path(const ArmModel& model,
                                               const CameraModel& camera,
                                               const std::vector<std::vector<double>>& path,
                                               double dt) {
  std::vector<TrainingPair> pairs;
  for (size_t i = 0; i + 1 < path.size(); ++i) {
    std::vector<double> u(path[i].size());
    for (size_t j = 0; j < u.size(); ++j) u[j] = (path[i + 1][j] - path[i][j]) / dt;
    pairs.push_back(associate(model, camera, path[i], u, dt));
  }
  return pairs;
}

bool path_visible(const ArmModel& model, const CameraModel& camera,
                  const std::vector<std::vector<double>>& path, double min_frac) {
  for (const auto& q : path) {
    if (render(model, camera, q).visible_frac < min_frac) return false;
  }
  return true;
}

}  // namespace

std::vector<TrainingPair> sample_episode(const ArmModel& model, const CameraModel& camera,
                                         EpisodeMode mode, const EpisodeConfig& cfg,
                                         util::Rng& rng) {
  model.validate();
  for (int attempt = 0; attempt < cfg.max_rejects; ++attempt) {
    std::vector<std::vector<double>> path;
    if (mode == EpisodeMode::whole_arm) {
      const int n = cfg.whole_arm_pairs_min +
                    static_cast<int>(rng.uniform_int(
                        static_cast<uint64_t>(cfg.whole_arm_pairs_max - cfg.whole_arm_pairs_min + 1)));
      std::vector<double> q0(static_cast<size_t>(model.n_joints));
      std::vector<double> dq(static_cast<size_t>(model.n_joints));
      for (int k = 0; k < model.n_joints; ++k) {
        const size_t i = static_cast<size_t>(k);
        q0[i] = rng.uniform(model.limit_lo[i], model.limit_hi[i]);
        dq[i] = rng.uniform(-0.8, 0.8);
      }
      // Peak smoothstep speed is 1.5*|dq|/T; scale dq so every joint obeys
      // v_max and the end configuration stays in limits.
      const double t_total = n * cfg.dt;
      double scale = 1.0;
      for (int k = 0; k < model.n_joints; ++k) {
        const size_t i = static_cast<size_t>(k);
        const double peak = 1.5 * std::abs(dq[i]) / t_total;
        if (peak > cfg.v_max) scale = std::min(scale, cfg.v_max * t_total / (1.5 * std::abs(dq[i])));
        const double qe = q0[i] + dq[i];
        if (qe < model.limit_lo[i] && std::abs(dq[i]) > 1e-12)
          scale = std::min(scale, (model.limit_lo[i] - q0[i]) / dq[i]);
        if (qe > model.limit_hi[i] && std::abs(dq[i]) > 1e-12)
          scale = std::min(scale, (model.limit_hi[i] - q0[i]) / dq[i]);
      }
      for (double& v : dq) v *= scale;
      for (int s = 0; s <= n; ++s) {
        const double tau = smoothstep(static_cast<double>(s) / n);
        std::vector<double> q(q0);
        for (size_t i = 0; i < q.size(); ++i) q[i] += tau * dq[i];
        path.push_back(std::move(q));
      }
    } else {
      const int n = cfg.single_joint_pairs_min +
                    static_cast<int>(rng.uniform_int(static_cast<uint64_t>(
                        cfg.single_joint_pairs_max - cfg.single_joint_pairs_min + 1)));
      std::vector<double> q0(static_cast<size_t>(model.n_joints));
      for (int k = 0; k < model.n_joints; ++k) {
        const size_t i = static_cast<size_t>(k);
        q0[i] = rng.uniform(model.limit_lo[i], model.limit_hi[i]);
      }
      const int joint = static_cast<int>(rng.uniform_int(static_cast<uint64_t>(model.n_joints)));
      double v = rng.uniform(cfg.single_joint_v_min, cfg.v_max);
      if (rng.bernoulli(0.5)) v = -v;
      const size_t ji = static_cast<size_t>(joint);
      const double q_end = q0[ji] + v * n * cfg.dt;
      if (q_end < model.limit_lo[ji] || q_end > model.limit_hi[ji]) continue;
      for (int s = 0; s <= n; ++s) {
        std::vector<double> q(q0);
        q[ji] += v * s * cfg.dt;
        path.push_back(std::move(q));
      }
    }
    if (!path_visible(model, camera, path, cfg.min_visible_frac)) continue;
    return make_pairs_from_path(model, camera, path, cfg.dt);
  }
  throw std::runtime_error("sample_episode: rejection sampling exhausted");
}

}  // namespace se3ctrl::sim

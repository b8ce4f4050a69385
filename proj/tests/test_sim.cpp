#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <Eigen/Dense>
#include <Eigen/Geometry>
#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include "sim/dataset.hpp"
#include "sim/sim.hpp"
#include "util/rng.hpp"

using namespace se3ctrl;
namespace fs = std::filesystem;

namespace {

constexpr double kPi = 3.14159265358979323846;

double dist_seg(const Eigen::Vector3d& p, const Eigen::Vector3d& a, const Eigen::Vector3d& b) {
  const Eigen::Vector3d ab = b - a;
  const double t = std::clamp((p - a).dot(ab) / ab.squaredNorm(), 0.0, 1.0);
  return (p - (a + t * ab)).norm();
}

// Independent ray-capsule intersection: march the signed distance to the
// axis segment and bisect the first crossing. No quadratics involved.
double march_capsule(const Eigen::Vector3d& dir, const Eigen::Vector3d& a,
                     const Eigen::Vector3d& b, double r, double t_max) {
  const double step = 2e-4;
  double prev_t = 1e-9;
  double prev_g = dist_seg(prev_t * dir, a, b) - r;
  for (double t = step; t <= t_max; t += step) {
    const double g = dist_seg(t * dir, a, b) - r;
    if (prev_g > 0.0 && g <= 0.0) {
      double lo = prev_t, hi = t;
      for (int it = 0; it < 80; ++it) {
        const double mid = 0.5 * (lo + hi);
        (dist_seg(mid * dir, a, b) - r > 0.0 ? lo : hi) = mid;
      }
      return 0.5 * (lo + hi);
    }
    prev_t = t;
    prev_g = g;
  }
  return std::numeric_limits<double>::infinity();
}

Eigen::Vector3d pixel_point(const ad::Tensor<double>& cloud, int64_t hw, int64_t pix) {
  return {cloud.data[static_cast<size_t>(pix)], cloud.data[static_cast<size_t>(hw + pix)],
          cloud.data[static_cast<size_t>(2 * hw + pix)]};
}

// Camera-frame capsule endpoints for every link at configuration q.
std::vector<std::pair<Eigen::Vector3d, Eigen::Vector3d>> capsules_cam(
    const sim::ArmModel& arm, const sim::CameraModel& cam, const std::vector<double>& q) {
  const sim::FkResult fk = forward_kinematics(arm, q);
  std::vector<std::pair<Eigen::Vector3d, Eigen::Vector3d>> out;
  for (int k = 0; k < arm.n_joints; ++k) {
    const size_t i = static_cast<size_t>(k);
    const Eigen::Vector3d a = fk.link_world[i].translation();
    const Eigen::Vector3d b =
        fk.link_world[i] * (arm.link_dirs[i].normalized() * arm.link_lengths[i]);
    out.emplace_back(cam.cam_from_world * a, cam.cam_from_world * b);
  }
  return out;
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  REQUIRE_MESSAGE(f.good(), p.string());
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

fs::path fresh_dir(const std::string& leaf) {
  const fs::path dir = fs::temp_directory_path() / "se3ctrl_sim_tests" / leaf;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

}  // namespace

TEST_CASE("forward kinematics: hand-worked planar poses") {
  const sim::ArmModel arm = sim::ArmModel::desk_default();

  auto ee = [&](double q0, double q1) {
    return forward_kinematics(arm, {q0, q1}).ee;
  };
  // Straight up the +y chain of two 0.5m links.
  CHECK((ee(0, 0) - Eigen::Vector3d(0, 1, 0)).norm() < 1e-12);
  // Joint 0 spins the whole chain about +z.
  CHECK((ee(kPi / 2, 0) - Eigen::Vector3d(-1, 0, 0)).norm() < 1e-12);
  CHECK((ee(-kPi / 2, 0) - Eigen::Vector3d(1, 0, 0)).norm() < 1e-12);
  // Joint 1 folds the distal link about the (rotated) x axis.
  CHECK((ee(0, kPi / 2) - Eigen::Vector3d(0, 0.5, 0.5)).norm() < 1e-12);
  CHECK((ee(kPi / 2, kPi / 2) - Eigen::Vector3d(-0.5, 0, 0.5)).norm() < 1e-12);

  const sim::FkResult fk = forward_kinematics(arm, {kPi / 2, 0});
  CHECK((fk.link_world[0].translation() - Eigen::Vector3d::Zero()).norm() < 1e-12);
  CHECK((fk.link_world[1].translation() - Eigen::Vector3d(-0.5, 0, 0)).norm() < 1e-12);
  CHECK(!fk.clamped);

  // A base offset translates the whole chain.
  sim::ArmModel shifted = arm;
  shifted.base.translation() = Eigen::Vector3d(0.1, 0.2, 0.3);
  CHECK((forward_kinematics(shifted, {0.3, -0.4}).ee -
         (forward_kinematics(arm, {0.3, -0.4}).ee + Eigen::Vector3d(0.1, 0.2, 0.3)))
            .norm() < 1e-12);
}

TEST_CASE("forward kinematics: clamping and validation") {
  const sim::ArmModel arm = sim::ArmModel::desk_default();
  const sim::FkResult fk = forward_kinematics(arm, {3.0, -3.0});
  CHECK(fk.clamped);
  CHECK(fk.q[0] == doctest::Approx(2.6));
  CHECK(fk.q[1] == doctest::Approx(-2.6));
  CHECK(!forward_kinematics(arm, {1.0, -1.0}).clamped);

  CHECK_THROWS_AS(forward_kinematics(arm, {1.0}), std::invalid_argument);
  sim::ArmModel bad = arm;
  bad.link_lengths = {0.5};
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad = arm;
  bad.limit_lo[0] = 3.0;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad = arm;
  bad.joint_axes[1] = Eigen::Vector3d::Zero();
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad = arm;
  bad.link_lengths[0] = 0.0;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
}

TEST_CASE("forward kinematics: three-joint chain matches an independent accumulation") {
  sim::ArmModel arm;
  arm.n_joints = 3;
  arm.link_lengths = {0.4, 0.3, 0.2};
  arm.link_radii = {0.05, 0.05, 0.05};
  arm.joint_axes = {Eigen::Vector3d::UnitZ(), Eigen::Vector3d::UnitX(),
                    Eigen::Vector3d::UnitY()};
  arm.link_dirs = {Eigen::Vector3d::UnitY(), Eigen::Vector3d::UnitY(),
                   Eigen::Vector3d::UnitX()};
  arm.limit_lo = {-3, -3, -3};
  arm.limit_hi = {3, 3, 3};

  util::Rng rng(3);
  for (int trial = 0; trial < 5; ++trial) {
    std::vector<double> q = {rng.uniform(-2, 2), rng.uniform(-2, 2), rng.uniform(-2, 2)};
    Eigen::Matrix3d r = Eigen::Matrix3d::Identity();
    Eigen::Vector3d o = Eigen::Vector3d::Zero();
    for (int k = 0; k < 3; ++k) {
      const size_t i = static_cast<size_t>(k);
      r = r * Eigen::AngleAxisd(q[i], arm.joint_axes[i]).toRotationMatrix();
      o = o + r * (arm.link_dirs[i] * arm.link_lengths[i]);
    }
    CHECK((forward_kinematics(arm, q).ee - o).norm() < 1e-12);
  }
}

TEST_CASE("end-effector jacobian matches central differences") {
  const sim::ArmModel arm = sim::ArmModel::desk_default();
  util::Rng rng(5);
  for (int trial = 0; trial < 8; ++trial) {
    std::vector<double> q = {rng.uniform(-2, 2), rng.uniform(-2, 2)};
    const auto j = ee_jacobian(arm, q);
    REQUIRE(j.cols() == 2);
    const double h = 1e-6;
    for (int k = 0; k < 2; ++k) {
      std::vector<double> qp = q, qm = q;
      qp[static_cast<size_t>(k)] += h;
      qm[static_cast<size_t>(k)] -= h;
      const Eigen::Vector3d fd =
          (forward_kinematics(arm, qp).ee - forward_kinematics(arm, qm).ee) / (2 * h);
      CHECK((j.col(k) - fd).norm() < 1e-6);
    }
  }
}

TEST_CASE("render: every point sits on its label's capsule surface or the backdrop") {
  const sim::ArmModel arm = sim::ArmModel::desk_default();
  const sim::CameraModel cam = sim::CameraModel::desk_default();
  const std::vector<double> q = {0.4, -0.7};
  const sim::Frame f = render(arm, cam, q);
  const auto caps = capsules_cam(arm, cam, q);
  const int64_t hw = static_cast<int64_t>(cam.h) * cam.w;

  int on_arm = 0;
  std::vector<int> per_link(3, 0);
  for (int v = 0; v < cam.h; ++v)
    for (int u = 0; u < cam.w; ++u) {
      const int64_t pix = static_cast<int64_t>(v) * cam.w + u;
      const Eigen::Vector3d p = pixel_point(f.cloud, hw, pix);
      const int label = f.labels[static_cast<size_t>(pix)];
      ++per_link[static_cast<size_t>(label)];

      // Reprojection: the point lies on this pixel's ray.
      CHECK(p.z() > 0.0);
      CHECK(std::abs(cam.fx * p.x() / p.z() + cam.cx - u) < 1e-9);
      CHECK(std::abs(cam.fy * p.y() / p.z() + cam.cy - v) < 1e-9);

      if (label == arm.n_joints) {
        CHECK(std::abs(p.z() - cam.background_depth) < 1e-12);
      } else {
        const auto& [a, b] = caps[static_cast<size_t>(label)];
        CHECK(std::abs(dist_seg(p, a, b) - arm.link_radii[static_cast<size_t>(label)]) <
              1e-9);
        CHECK(p.z() < cam.background_depth);
        ++on_arm;
      }

      // Ground-truth masks are the one-hot encoding of labels.
      for (int k = 0; k <= arm.n_joints; ++k) {
        const double mv = f.gt_masks.data[static_cast<size_t>(k) * hw +
                                          static_cast<size_t>(pix)];
        CHECK(mv == (k == label ? 1.0 : 0.0));
      }
    }
  CHECK(f.visible_frac == doctest::Approx(static_cast<double>(on_arm) / hw).epsilon(1e-12));
  // Both links actually show up in this configuration.
  CHECK(per_link[0] > 0);
  CHECK(per_link[1] > 0);
  CHECK(per_link[2] > 0);
  CHECK(f.q == q);
}

TEST_CASE("render: labels match an independent marching intersector") {
  const sim::ArmModel arm = sim::ArmModel::desk_default();
  const sim::CameraModel cam = sim::CameraModel::desk_default(16, 16);
  const std::vector<double> q = {0.9, 1.2};
  const sim::Frame f = render(arm, cam, q);
  const auto caps = capsules_cam(arm, cam, q);
  const int64_t hw = static_cast<int64_t>(cam.h) * cam.w;

  int compared = 0, skipped = 0;
  for (int v = 0; v < cam.h; ++v)
    for (int u = 0; u < cam.w; ++u) {
      const int64_t pix = static_cast<int64_t>(v) * cam.w + u;
      const Eigen::Vector3d dir =
          Eigen::Vector3d((u - cam.cx) / cam.fx, (v - cam.cy) / cam.fy, 1.0).normalized();
      const double t_bg = cam.background_depth / dir.z();
      std::vector<double> ts;
      for (int k = 0; k < arm.n_joints; ++k)
        ts.push_back(march_capsule(dir, caps[static_cast<size_t>(k)].first,
                                   caps[static_cast<size_t>(k)].second,
                                   arm.link_radii[static_cast<size_t>(k)], t_bg + 0.5));
      ts.push_back(t_bg);

      int best = arm.n_joints;
      for (int k = 0; k < arm.n_joints; ++k)
        if (ts[static_cast<size_t>(k)] < ts[static_cast<size_t>(best)]) best = k;
      // Skip pixels where two candidates nearly tie (grazing boundaries).
      double second = std::numeric_limits<double>::infinity();
      for (int k = 0; k <= arm.n_joints; ++k)
        if (k != best) second = std::min(second, ts[static_cast<size_t>(k)]);
      if (second - ts[static_cast<size_t>(best)] < 1e-6) {
        ++skipped;
        continue;
      }
      ++compared;
      CAPTURE(v);
      CAPTURE(u);
      CHECK(f.labels[static_cast<size_t>(pix)] == best);
      const Eigen::Vector3d p = pixel_point(f.cloud, hw, pix);
      CHECK(std::abs(p.norm() - ts[static_cast<size_t>(best)]) < 1e-6);
    }
  CHECK(compared > 200);  // 256 pixels; only genuine boundary pixels skipped
  CHECK(skipped < 20);
}

TEST_CASE("association: whole-arm base rotation moves points on circles") {
  const sim::ArmModel arm = sim::ArmModel::desk_default();
  const sim::CameraModel cam = sim::CameraModel::desk_default();
  const std::vector<double> q = {0.3, -0.9};
  const std::vector<double> u = {0.8, 0.0};
  const double dt = 1.0 / 30.0;
  const sim::TrainingPair pair = associate(arm, cam, q, u, dt);
  const Eigen::Isometry3d world_from_cam = cam.cam_from_world.inverse();
  const int64_t hw = static_cast<int64_t>(cam.h) * cam.w;
  const double angle = u[0] * dt;

  CHECK(pair.q_next[0] == doctest::Approx(q[0] + angle).epsilon(1e-15));
  CHECK(pair.q_next[1] == doctest::Approx(q[1]).epsilon(1e-15));

  int arm_px = 0;
  for (int64_t pix = 0; pix < hw; ++pix) {
    const Eigen::Vector3d p0 = pixel_point(pair.frame_t.cloud, hw, pix);
    const Eigen::Vector3d p1 = pixel_point(pair.assoc, hw, pix);
    if (pair.frame_t.labels[static_cast<size_t>(pix)] == arm.n_joints) {
      // Background never moves; the carry copies it bit-for-bit.
      CHECK(p0 == p1);
      continue;
    }
    ++arm_px;
    // Joint 0 spins the whole chain about the world z axis: radius and
    // height are preserved and the swept angle is exactly u*dt.
    const Eigen::Vector3d w0 = world_from_cam * p0;
    const Eigen::Vector3d w1 = world_from_cam * p1;
    const double r0 = std::hypot(w0.x(), w0.y());
    const double r1 = std::hypot(w1.x(), w1.y());
    CHECK(std::abs(r1 - r0) < 1e-9);
    CHECK(std::abs(w1.z() - w0.z()) < 1e-12);
    if (r0 > 0.02) {
      const double swept = std::atan2(w0.x() * w1.y() - w0.y() * w1.x(),
                                      w0.x() * w1.x() + w0.y() * w1.y());
      CHECK(swept == doctest::Approx(angle).epsilon(1e-9));
    }
  }
  CHECK(arm_px > 0);

  // Flow bookkeeping matches its definition.
  int moving = 0;
  for (int64_t pix = 0; pix < hw; ++pix) {
    double n2 = 0.0;
    for (int c = 0; c < 3; ++c) {
      const size_t j = static_cast<size_t>(c * hw + pix);
      const double d = pair.assoc.data[j] - pair.frame_t.cloud.data[j];
      CHECK(pair.flow.data[j] == d);
      n2 += d * d;
    }
    if (std::sqrt(n2) > 1e-3) ++moving;
  }
  CHECK(pair.moving_count == moving);
}

TEST_CASE("association: distal-joint motion leaves the proximal link still") {
  const sim::ArmModel arm = sim::ArmModel::desk_default();
  const sim::CameraModel cam = sim::CameraModel::desk_default();
  const std::vector<double> q = {0.3, -0.9};
  const std::vector<double> u = {0.0, 0.8};
  const double dt = 1.0 / 30.0;
  const sim::TrainingPair pair = associate(arm, cam, q, u, dt);
  const int64_t hw = static_cast<int64_t>(cam.h) * cam.w;
  const double angle = u[1] * dt;

  // Camera-frame delta of link 1 vs the joint axis: rotation of angle u*dt
  // about the axis through the joint origin.
  const sim::FkResult fk = forward_kinematics(arm, q);
  const Eigen::Vector3d axis_w = fk.link_world[1].linear() * arm.joint_axes[1].normalized();
  const Eigen::Vector3d axis_c = cam.cam_from_world.linear() * axis_w;
  const Eigen::Matrix<double, 6, 1> d = link_delta(arm, cam, q, pair.q_next, 1);
  CHECK((d.head<3>() - axis_c * angle).norm() < 1e-9);
  const Eigen::Vector3d joint_c = cam.cam_from_world * fk.link_world[1].translation();
  const Eigen::Matrix3d rd = Eigen::AngleAxisd(angle, axis_c).toRotationMatrix();
  CHECK((rd * joint_c + d.tail<3>() - joint_c).norm() < 1e-9);

  // Link 0 does not move at all.
  const Eigen::Matrix<double, 6, 1> d0 = link_delta(arm, cam, q, pair.q_next, 0);
  CHECK(d0.norm() < 1e-12);
  CHECK_THROWS_AS(link_delta(arm, cam, q, pair.q_next, 2), std::invalid_argument);
  CHECK_THROWS_AS(link_delta(arm, cam, q, pair.q_next, -1), std::invalid_argument);

  int still_px = 0, moving_px = 0;
  for (int64_t pix = 0; pix < hw; ++pix) {
    const int label = pair.frame_t.labels[static_cast<size_t>(pix)];
    double n2 = 0.0;
    for (int c = 0; c < 3; ++c) {
      const double dv = pair.flow.data[static_cast<size_t>(c * hw + pix)];
      n2 += dv * dv;
    }
    if (label == 0) {
      CHECK(std::sqrt(n2) < 1e-12);
      ++still_px;
    } else if (label == 1) {
      ++moving_px;
    }
  }
  CHECK(still_px > 0);
  CHECK(moving_px > 0);

  // Zero command: nothing moves.
  const sim::TrainingPair idle = associate(arm, cam, q, {0.0, 0.0}, dt);
  CHECK(idle.moving_count == 0);
  for (double v : idle.flow.data) CHECK(std::abs(v) < 1e-12);

  CHECK_THROWS_AS(associate(arm, cam, q, {0.0}, dt), std::invalid_argument);
  CHECK_THROWS_AS(associate(arm, cam, q, u, 0.0), std::invalid_argument);
}

TEST_CASE("rigid carry: intra-link distances and link-frame coordinates survive") {
  const sim::ArmModel arm = sim::ArmModel::desk_default();
  const sim::CameraModel cam = sim::CameraModel::desk_default();
  const std::vector<double> q0 = {0.5, -0.6};
  const std::vector<double> q1 = {0.9, 0.4};
  const sim::Frame f = render(arm, cam, q0);
  const ad::Tensor<double> carried = carry_points(arm, cam, f, q1);
  const int64_t hw = static_cast<int64_t>(cam.h) * cam.w;
  const Eigen::Isometry3d world_from_cam = cam.cam_from_world.inverse();
  const sim::FkResult fk0 = forward_kinematics(arm, q0);
  const sim::FkResult fk1 = forward_kinematics(arm, q1);

  // Collect pixels per link.
  std::vector<std::vector<int64_t>> by_link(2);
  for (int64_t pix = 0; pix < hw; ++pix) {
    const int label = f.labels[static_cast<size_t>(pix)];
    if (label < 2) by_link[static_cast<size_t>(label)].push_back(pix);
  }
  REQUIRE(by_link[0].size() > 3);
  REQUIRE(by_link[1].size() > 3);

  for (int k = 0; k < 2; ++k) {
    const auto& px = by_link[static_cast<size_t>(k)];
    // Pairwise distances are preserved by a rigid motion.
    for (size_t i = 0; i + 1 < std::min<size_t>(px.size(), 8); ++i) {
      const Eigen::Vector3d a0 = pixel_point(f.cloud, hw, px[i]);
      const Eigen::Vector3d b0 = pixel_point(f.cloud, hw, px[i + 1]);
      const Eigen::Vector3d a1 = pixel_point(carried, hw, px[i]);
      const Eigen::Vector3d b1 = pixel_point(carried, hw, px[i + 1]);
      CHECK(std::abs((a0 - b0).norm() - (a1 - b1).norm()) < 1e-12);
    }
    // Each point keeps its coordinates in the moving link frame.
    const Eigen::Isometry3d inv0 = fk0.link_world[static_cast<size_t>(k)].inverse();
    const Eigen::Isometry3d inv1 = fk1.link_world[static_cast<size_t>(k)].inverse();
    for (int64_t pix : px) {
      const Eigen::Vector3d local0 = inv0 * (world_from_cam * pixel_point(f.cloud, hw, pix));
      const Eigen::Vector3d local1 = inv1 * (world_from_cam * pixel_point(carried, hw, pix));
      CHECK((local0 - local1).norm() < 1e-12);
    }
  }
}

TEST_CASE("episodes: structure, limits, and determinism") {
  const sim::ArmModel arm = sim::ArmModel::desk_default();
  const sim::CameraModel cam = sim::CameraModel::desk_default(16, 16);
  sim::EpisodeConfig cfg;
  cfg.min_visible_frac = 0.02;
  cfg.whole_arm_pairs_min = 3;
  cfg.whole_arm_pairs_max = 6;
  cfg.single_joint_pairs_min = 2;
  cfg.single_joint_pairs_max = 4;

  {
    util::Rng rng(21);
    const auto pairs = sample_episode(arm, cam, sim::EpisodeMode::whole_arm, cfg, rng);
    CHECK(pairs.size() >= 3);
    CHECK(pairs.size() <= 6);
    for (size_t i = 0; i < pairs.size(); ++i) {
      CHECK(pairs[i].dt == doctest::Approx(cfg.dt));
      CHECK(pairs[i].frame_t.visible_frac >= cfg.min_visible_frac);
      for (int k = 0; k < 2; ++k) {
        const size_t ki = static_cast<size_t>(k);
        CHECK(std::abs(pairs[i].u[ki]) <= cfg.v_max + 1e-9);
        CHECK(pairs[i].frame_t.q[ki] >= arm.limit_lo[ki] - 1e-12);
        CHECK(pairs[i].frame_t.q[ki] <= arm.limit_hi[ki] + 1e-12);
        // Commands integrate exactly onto the next frame.
        CHECK(std::abs(pairs[i].q_next[ki] -
                       (pairs[i].frame_t.q[ki] + pairs[i].u[ki] * pairs[i].dt)) < 1e-9);
        if (i + 1 < pairs.size())
          CHECK(std::abs(pairs[i].q_next[ki] - pairs[i + 1].frame_t.q[ki]) < 1e-12);
      }
    }
  }
  {
    util::Rng rng(22);
    const auto pairs = sample_episode(arm, cam, sim::EpisodeMode::single_joint, cfg, rng);
    CHECK(pairs.size() >= 2);
    CHECK(pairs.size() <= 4);
    // Exactly one joint moves, at constant speed within [v_min, v_max].
    int moving_joint = -1;
    for (int k = 0; k < 2; ++k)
      if (std::abs(pairs[0].u[static_cast<size_t>(k)]) > 1e-12) moving_joint = k;
    REQUIRE(moving_joint >= 0);
    const double v = pairs[0].u[static_cast<size_t>(moving_joint)];
    CHECK(std::abs(v) >= cfg.single_joint_v_min - 1e-9);
    CHECK(std::abs(v) <= cfg.v_max + 1e-9);
    for (const auto& p : pairs) {
      for (int k = 0; k < 2; ++k) {
        if (k == moving_joint) {
          CHECK(p.u[static_cast<size_t>(k)] == doctest::Approx(v).epsilon(1e-12));
        } else {
          CHECK(p.u[static_cast<size_t>(k)] == 0.0);
        }
      }
    }
  }
  {
    // Same stream, same bytes.
    util::Rng r1(33), r2(33), r3(34);
    const auto a = sample_episode(arm, cam, sim::EpisodeMode::whole_arm, cfg, r1);
    const auto b = sample_episode(arm, cam, sim::EpisodeMode::whole_arm, cfg, r2);
    const auto c = sample_episode(arm, cam, sim::EpisodeMode::whole_arm, cfg, r3);
    REQUIRE(a.size() == b.size());
    for (size_t i = 0; i < a.size(); ++i) {
      CHECK(std::memcmp(a[i].frame_t.cloud.data.data(), b[i].frame_t.cloud.data.data(),
                        a[i].frame_t.cloud.data.size() * sizeof(double)) == 0);
      CHECK(a[i].u == b[i].u);
    }
    const bool same_size = a.size() == c.size();
    bool identical = same_size;
    for (size_t i = 0; identical && i < a.size(); ++i)
      identical = a[i].frame_t.q == c[i].frame_t.q;
    CHECK(!identical);
  }
}

TEST_CASE("visible-configuration sampling honors the threshold or gives up") {
  const sim::ArmModel arm = sim::ArmModel::desk_default();
  const sim::CameraModel cam = sim::CameraModel::desk_default(16, 16);
  util::Rng rng(44);
  for (int i = 0; i < 10; ++i) {
    const auto q = sample_visible_config(arm, cam, 0.03, rng);
    CHECK(render(arm, cam, q).visible_frac >= 0.03);
  }
  CHECK_THROWS_AS(sample_visible_config(arm, cam, 0.95, rng, 10), std::runtime_error);
}

TEST_CASE("dataset: equal seeds produce byte-identical directories") {
  const sim::ArmModel arm = sim::ArmModel::desk_default();
  const sim::CameraModel cam = sim::CameraModel::desk_default(16, 16);
  sim::GenConfig cfg;
  cfg.n_pairs = 24;
  cfg.val_fraction = 0.25;
  cfg.episode.min_visible_frac = 0.02;
  cfg.episode.whole_arm_pairs_min = 3;
  cfg.episode.whole_arm_pairs_max = 5;
  cfg.episode.single_joint_pairs_min = 2;
  cfg.episode.single_joint_pairs_max = 4;

  const fs::path d1 = fresh_dir("gen_a");
  const fs::path d2 = fresh_dir("gen_b");
  const fs::path d3 = fresh_dir("gen_c");
  generate_dataset(arm, cam, cfg, 7, d1.string());
  generate_dataset(arm, cam, cfg, 7, d2.string());
  generate_dataset(arm, cam, cfg, 8, d3.string());

  CHECK(slurp(d1 / "manifest.json") == slurp(d2 / "manifest.json"));
  bool all_equal_seed7 = true;
  bool any_differs_seed8 = slurp(d1 / "manifest.json") != slurp(d3 / "manifest.json");
  for (int i = 0; i < cfg.n_pairs; ++i) {
    char name[32];
    std::snprintf(name, sizeof name, "pair_%06d.bin", i);
    const std::string a = slurp(d1 / "pairs" / name);
    if (a != slurp(d2 / "pairs" / name)) all_equal_seed7 = false;
    const fs::path other = d3 / "pairs" / name;
    if (!fs::exists(other) || a != slurp(other)) any_differs_seed8 = true;
  }
  CHECK(all_equal_seed7);
  CHECK(any_differs_seed8);
}

TEST_CASE("dataset: manifest and records round-trip; split quota holds") {
  const sim::ArmModel arm = sim::ArmModel::desk_default();
  const sim::CameraModel cam = sim::CameraModel::desk_default(16, 16);
  sim::GenConfig cfg;
  cfg.n_pairs = 20;
  cfg.val_fraction = 0.25;
  cfg.episode.min_visible_frac = 0.02;
  cfg.episode.whole_arm_pairs_min = 3;
  cfg.episode.whole_arm_pairs_max = 5;
  cfg.episode.single_joint_pairs_min = 2;
  cfg.episode.single_joint_pairs_max = 4;
  const fs::path dir = fresh_dir("roundtrip");
  generate_dataset(arm, cam, cfg, 11, dir.string());

  const sim::DatasetManifest m = sim::load_manifest(dir.string());
  CHECK(m.seed == 11);
  CHECK(m.h == 16);
  CHECK(m.w == 16);
  CHECK(m.n_joints == 2);
  CHECK(m.n_ctrl == 2);
  CHECK(m.k_gt == 3);
  CHECK(m.n_pairs == 20);
  CHECK(m.dt == doctest::Approx(cfg.episode.dt).epsilon(1e-15));
  CHECK(m.arm.link_lengths == arm.link_lengths);
  CHECK((m.camera.cam_from_world.matrix() - cam.cam_from_world.matrix()).norm() < 1e-15);
  CHECK(m.camera.fx == doctest::Approx(cam.fx).epsilon(1e-15));

  // Episode table tiles [0, n_pairs) exactly; the val quota is floor(E*f).
  int covered = 0;
  int vals = 0;
  for (const auto& ep : m.episodes) {
    CHECK(ep.first_pair == covered);
    covered += ep.n_pairs;
    CHECK((ep.split == "train" || ep.split == "val"));
    CHECK((ep.mode == "whole_arm" || ep.mode == "single_joint"));
    if (ep.split == "val") ++vals;
  }
  CHECK(covered == 20);
  CHECK(vals == static_cast<int>(std::floor(static_cast<double>(m.episodes.size()) * 0.25)));
  const auto train_idx = m.pair_indices("train");
  const auto val_idx = m.pair_indices("val");
  CHECK(train_idx.size() + val_idx.size() == 20);
  CHECK(!val_idx.empty());

  // Records decode with the right shapes and self-consistent flow.
  const sim::PairRecord r = load_pair(dir.string(), m, 0);
  const size_t hw = 256;
  CHECK(r.cloud.size() == 3 * hw);
  CHECK(r.assoc.size() == 3 * hw);
  CHECK(r.flow.size() == 3 * hw);
  CHECK(r.gt_masks.size() == 3 * hw);
  CHECK(r.q.size() == 2);
  CHECK(r.q_next.size() == 2);
  CHECK(r.u.size() == 2);
  CHECK(r.dt > 0.0f);
  for (size_t i = 0; i < 3 * hw; ++i)
    CHECK(std::abs(r.flow[i] - (r.assoc[i] - r.cloud[i])) < 1e-6f);
  for (size_t p = 0; p < hw; ++p) {
    float s = 0.0f;
    for (size_t k = 0; k < 3; ++k) s += r.gt_masks[k * hw + p];
    CHECK(s == 1.0f);
  }

  CHECK_THROWS_AS(load_pair(dir.string(), m, -1), std::invalid_argument);
  CHECK_THROWS_AS(load_pair(dir.string(), m, 20), std::invalid_argument);
  CHECK_THROWS_AS(sim::load_manifest((dir / "nope").string()), std::exception);
}

TEST_CASE("dataset: config validation and camera json strictness") {
  const sim::ArmModel arm = sim::ArmModel::desk_default();
  const sim::CameraModel cam = sim::CameraModel::desk_default(16, 16);
  const fs::path dir = fresh_dir("invalid");
  sim::GenConfig cfg;
  cfg.n_pairs = 0;
  CHECK_THROWS_AS(generate_dataset(arm, cam, cfg, 1, dir.string()), std::invalid_argument);
  cfg.n_pairs = 4;
  cfg.val_fraction = 1.0;
  CHECK_THROWS_AS(generate_dataset(arm, cam, cfg, 1, dir.string()), std::invalid_argument);
  cfg.val_fraction = 0.1;
  cfg.whole_arm_fraction = 1.5;
  CHECK_THROWS_AS(generate_dataset(arm, cam, cfg, 1, dir.string()), std::invalid_argument);

  // Camera json requires every field; arm json revalidates.
  nlohmann::json cj = sim::camera_to_json(cam);
  CHECK((sim::camera_from_json(cj).cam_from_world.matrix() - cam.cam_from_world.matrix())
            .norm() < 1e-15);
  cj.erase("fx");
  CHECK_THROWS_AS(sim::camera_from_json(cj), std::exception);
  nlohmann::json aj = sim::arm_to_json(arm);
  const sim::ArmModel back = sim::arm_from_json(aj);
  CHECK(back.link_lengths == arm.link_lengths);
  CHECK(back.limit_lo == arm.limit_lo);
  CHECK((back.base.matrix() - arm.base.matrix()).norm() < 1e-15);
  aj["link_lengths"] = std::vector<double>{0.5};
  CHECK_THROWS_AS(sim::arm_from_json(aj), std::invalid_argument);
}

TEST_CASE("camera: default rig geometry") {
  const sim::CameraModel cam = sim::CameraModel::desk_default();
  CHECK(cam.h == 32);
  CHECK(cam.w == 32);
  CHECK(cam.cx == doctest::Approx(15.5));
  CHECK(cam.cy == doctest::Approx(15.5));
  // The rig looks at the arm's midpoint from 2m out: that target lands on
  // the optical axis at positive depth.
  const Eigen::Vector3d target_c = cam.cam_from_world * Eigen::Vector3d(0.0, 0.5, 0.0);
  CHECK(std::abs(target_c.x()) < 1e-12);
  CHECK(std::abs(target_c.y()) < 1e-12);
  CHECK(target_c.z() == doctest::Approx(std::sqrt(4.0 + 0.09)).epsilon(1e-12));
  const Eigen::Vector3d origin_c = cam.cam_from_world * Eigen::Vector3d(2.0, 0.5, 0.3);
  CHECK(origin_c.norm() < 1e-12);

  sim::CameraModel bad = cam;
  bad.fx = 0.0;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad = cam;
  bad.background_depth = -1.0;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad = cam;
  bad.h = 0;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
}

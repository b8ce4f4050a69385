#pragma once

#include <Eigen/Dense>
#include <Eigen/Geometry>
#include <string>
#include <vector>

#include "ad/tensor.hpp"
#include "util/rng.hpp"

// Kinematic capsule-arm simulator with a pinhole depth camera: renders
// organized point clouds against a background plane, produces ground-truth
// masks and rigid point associations, and samples the training episode
// distribution. All internal math is double precision; dataset IO casts to
// f32 at the boundary.
namespace se3ctrl::sim {

struct ArmModel {
  int n_joints = 2;
  std::vector<double> link_lengths = {0.5, 0.5};
  std::vector<double> link_radii = {0.10, 0.10};
  std::vector<Eigen::Vector3d> joint_axes = {Eigen::Vector3d::UnitZ(),
                                             Eigen::Vector3d::UnitX()};
  // Direction each link extends in its own joint frame.
  std::vector<Eigen::Vector3d> link_dirs = {Eigen::Vector3d::UnitY(),
                                            Eigen::Vector3d::UnitY()};
  std::vector<double> limit_lo = {-2.6, -2.6};
  std::vector<double> limit_hi = {2.6, 2.6};
  Eigen::Isometry3d base = Eigen::Isometry3d::Identity();

  void validate() const;
  static ArmModel desk_default() { return ArmModel{}; }
};

struct CameraModel {
  int h = 32, w = 32;
  double fx = 36.0, fy = 36.0;
  double cx = 15.5, cy = 15.5;
  Eigen::Isometry3d cam_from_world = Eigen::Isometry3d::Identity();
  double background_depth = 3.0;  // camera-frame z of the backdrop plane

  void validate() const;
  // Camera 2m out along +x, slightly raised, looking at the arm's midpoint.
  static CameraModel desk_default(int h = 32, int w = 32);
};

struct FkResult {
  // World frame of each link: origin at the link's proximal joint, rotated
  // by joints 1..k.
  std::vector<Eigen::Isometry3d> link_world;
  Eigen::Vector3d ee = Eigen::Vector3d::Zero();
  std::vector<double> q;  // possibly clamped
  bool clamped = false;
};

FkResult forward_kinematics(const ArmModel& model, const std::vector<double>& q);

// Analytic position Jacobian of the end effector, 3 x n_joints.
Eigen::Matrix<double, 3, Eigen::Dynamic> ee_jacobian(const ArmModel& model,
                                                     const std::vector<double>& q);

struct Frame {
  ad::Tensor<double> cloud;     // [3,H,W] camera-frame points
  ad::Tensor<double> gt_masks;  // [n_links+1,H,W] one-hot, background last
  std::vector<int> labels;      // per-pixel link id, n_links = background
  std::vector<double> q;
  double visible_frac = 0.0;  // fraction of non-background pixels
};

Frame render(const ArmModel& model, const CameraModel& camera, const std::vector<double>& q);

// Rigidly carries every pixel of `frame` to the configuration q_to using its
// link's motion; background pixels stay put. Returns a [3,H,W] cloud.
ad::Tensor<double> carry_points(const ArmModel& model, const CameraModel& camera,
                                const Frame& frame, const std::vector<double>& q_to);

// Camera-frame rigid delta of link k between q_from and q_to (rows: axis-angle
// then translation), i.e. the transform that carries link-k pixels.
Eigen::Matrix<double, 6, 1> link_delta(const ArmModel& model, const CameraModel& camera,
                                       const std::vector<double>& q_from,
                                       const std::vector<double>& q_to, int k);

struct TrainingPair {
  Frame frame_t;
  std::vector<double> u;  // rad/s, one per joint
  double dt = 1.0 / 30.0;
  std::vector<double> q_next;
  ad::Tensor<double> assoc;  // x-tilde_{t+1}, [3,H,W]
  ad::Tensor<double> flow;   // assoc - cloud
  int moving_count = 0;      // points with ||flow|| > 1mm
};

TrainingPair associate(const ArmModel& model, const CameraModel& camera,
                       const std::vector<double>& q, const std::vector<double>& u, double dt);

enum class EpisodeMode { whole_arm, single_joint };

struct EpisodeConfig {
  double dt = 1.0 / 30.0;
  double v_max = 1.0;             // rad/s per joint
  double min_visible_frac = 0.05;
  int whole_arm_pairs_min = 8, whole_arm_pairs_max = 16;
  int single_joint_pairs_min = 4, single_joint_pairs_max = 8;
  double single_joint_v_min = 0.25;
  int max_rejects = 200;
};

std::vector<TrainingPair> sample_episode(const ArmModel& model, const CameraModel& camera,
                                         EpisodeMode mode, const EpisodeConfig& cfg,
                                         util::Rng& rng);

// Uniformly samples an in-limits configuration that keeps the arm visible.
std::vector<double> sample_visible_config(const ArmModel& model, const CameraModel& camera,
                                          double min_visible_frac, util::Rng& rng,
                                          int max_rejects = 200);

}  // namespace se3ctrl::sim

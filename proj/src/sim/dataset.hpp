#pragma once

#include <cstdint>
#include <json.hpp>
#include <string>
#include <vector>

#include "sim/sim.hpp"

// Dataset directory format: manifest.json describing the arm, camera, and
// episode table, plus pairs/pair_NNNNNN.bin record files. Records are
// little-endian f32 blobs laid out as
//   cloud[3HW] assoc[3HW] flow[3HW] gt_masks[k_gt*HW] q[n] q_next[n] u[n] dt[1].
namespace se3ctrl::sim {

struct GenConfig {
  int n_pairs = 5000;
  double whole_arm_fraction = 0.5;
  double val_fraction = 0.1;
  EpisodeConfig episode;
};

struct EpisodeInfo {
  int id = 0;
  std::string mode;  // "whole_arm" | "single_joint"
  int n_pairs = 0;
  int first_pair = 0;
  std::string split;  // "train" | "val"
};

struct DatasetManifest {
  uint64_t seed = 0;
  int h = 0, w = 0;
  int n_joints = 0, n_ctrl = 0, k_gt = 0;
  int n_pairs = 0;
  double dt = 0.0;
  ArmModel arm;
  CameraModel camera;
  GenConfig gen;
  std::vector<EpisodeInfo> episodes;

  std::vector<int> pair_indices(const std::string& split) const;
};

struct PairRecord {
  std::vector<float> cloud, assoc, flow, gt_masks, q, q_next, u;
  float dt = 0.0f;
};

nlohmann::json arm_to_json(const ArmModel& arm);
ArmModel arm_from_json(const nlohmann::json& j);
nlohmann::json camera_to_json(const CameraModel& cam);
CameraModel camera_from_json(const nlohmann::json& j);

void generate_dataset(const ArmModel& arm, const CameraModel& camera, const GenConfig& cfg,
                      uint64_t seed, const std::string& dir);

DatasetManifest load_manifest(const std::string& dir);
PairRecord load_pair(const std::string& dir, const DatasetManifest& m, int index);

}  // namespace se3ctrl::sim

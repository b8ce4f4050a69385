#pragma once

#include <cstdint>
#include <json.hpp>
#include <string>

#include "ctrl/controller.hpp"
#include "losses/losses.hpp"
#include "nets/config.hpp"
#include "sim/dataset.hpp"

namespace se3ctrl::harness {

// One JSON document drives every command. Missing keys fall back to the
// desk-scale defaults below, so "{}" is a complete config.
struct RunConfig {
  uint64_t seed = 1;
  std::string dataset_dir = "data/desk";

  nets::NetConfig net;
  losses::LossConfig loss;
  ctrl::ControllerConfig controller;

  // Training.
  int train_iters = 20000;
  int batch_size = 16;
  int validate_every = 500;
  int checkpoint_every = 0;  // extra periodic checkpoints; 0 = best/last only
  double lr = 1e-4;
  int calib_pairs = 256;     // sample size for normalization calibration
  int val_batch_pairs = 256; // cap on pairs scored per validation pass

  // Control experiments.
  int n_tasks = 10;
  double task_mean_err = 0.5;        // rad, mean per-joint initial error
  double success_threshold = 0.05;   // rad, mean abs joint error
  double control_dt = 1.0 / 30.0;

  // Simulation.
  sim::ArmModel arm = sim::ArmModel::desk_default();
  sim::CameraModel camera = sim::CameraModel::desk_default();
  sim::GenConfig gen;

  void validate() const;
};

nlohmann::json net_config_to_json(const nets::NetConfig& c);
nets::NetConfig net_config_from_json(const nlohmann::json& j);

nlohmann::json run_config_to_json(const RunConfig& c);
RunConfig run_config_from_json(const nlohmann::json& j);

// Parses a JSON document (text); empty input means all defaults.
RunConfig parse_run_config(const std::string& text);

}  // namespace se3ctrl::harness

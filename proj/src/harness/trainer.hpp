#pragma once

#include <string>
#include <vector>

#include "harness/run_config.hpp"

namespace se3ctrl::harness {

enum class ModelKind { se3posenet, flownet };

inline const char* model_kind_name(ModelKind k) {
  return k == ModelKind::se3posenet ? "se3posenet" : "flownet";
}

ModelKind model_kind_from(const std::string& name);

struct CurvePoint {
  int iteration = 0;
  double value = 0.0;
};

struct TrainResult {
  std::string init_dir;  // post-calibration, pre-training checkpoint (step 0)
  std::string best_dir;  // least validation loss
  std::string last_dir;
  double best_val = 0.0;
  int best_iter = -1;
  std::vector<CurvePoint> train_curve;
  std::vector<CurvePoint> val_curve;
};

// Minibatch training with staged normalization calibration, periodic
// validation, and best-validation checkpoint selection. Writes
// loss_curve.csv / val_curve.csv plus init/, best/, last/ checkpoints under
// out_dir. Single-threaded and bit-deterministic for a fixed config.
TrainResult train_model(const RunConfig& cfg, ModelKind kind, const std::string& out_dir);

}  // namespace se3ctrl::harness

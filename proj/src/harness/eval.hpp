#pragma once

#include <cstdint>
#include <json.hpp>
#include <memory>
#include <string>
#include <vector>

#include "harness/run_config.hpp"
#include "harness/trainer.hpp"
#include "nets/model.hpp"

namespace se3ctrl::harness {

// A checkpoint rehydrated through its stored metadata (model kind + net
// config), so eval/control need nothing but the directory.
struct LoadedModel {
  ModelKind kind = ModelKind::se3posenet;
  nets::NetConfig net_cfg;
  int64_t step = 0;
  std::unique_ptr<nets::Se3PoseNet<float>> pose;
  std::unique_ptr<nets::FlowNet<float>> flow;
};

LoadedModel load_model(const std::string& checkpoint_dir);

struct EvalReport {
  std::string model;
  std::string split;
  int64_t step = 0;
  int n_pairs = 0;    // scored pairs
  int n_skipped = 0;  // pairs with no moving points
  // Mean over scored pairs of sum ||xhat - x_tilde||^2 / M, in cm^2 per
  // moving point (M = points whose true flow exceeds the motion threshold).
  double flow_mse_cm = 0.0;
  // se3posenet only: mean squared pose-consistency error per pose entry, and
  // greedy-matched mask IoU per ground-truth part (background last).
  double consistency = 0.0;
  std::vector<double> mask_iou;
  double mean_iou = 0.0;
};

// Scores a model on one dataset split. max_pairs <= 0 means the whole split.
EvalReport evaluate(LoadedModel& model, const std::string& dataset_dir, const std::string& split,
                    int max_pairs, const losses::LossConfig& loss);

nlohmann::json report_to_json(const EvalReport& r);
void write_report(const std::string& path, const EvalReport& r);

}  // namespace se3ctrl::harness

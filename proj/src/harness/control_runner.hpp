#pragma once

#include <string>
#include <vector>

#include "ctrl/controller.hpp"
#include "harness/eval.hpp"
#include "harness/run_config.hpp"

namespace se3ctrl::harness {

struct ControlSummaryRow {
  std::string task_id;
  std::string method;
  bool success = false;
  int iterations_to_threshold = -1;  // first iteration under the threshold
  double initial_err = 0.0;          // mean abs joint error at iteration 0
  double final_err = 0.0;
  double best_err = 0.0;
  int iterations = 0;
  std::string termination;
};

struct MethodAggregate {
  std::string method;
  int n_tasks = 0;
  int n_success = 0;
  double success_rate = 0.0;
  double median_iterations = -1.0;  // over successful tasks; -1 if none
};

struct ControlOutcome {
  std::vector<ctrl::ControlTrace> traces;
  std::vector<ControlSummaryRow> rows;
  std::vector<MethodAggregate> methods;
  std::vector<ctrl::ServoTask> tasks;
};

// Runs every requested method over a seeded task set. Requires a trained
// checkpoint (step > 0).
ControlOutcome run_control_experiment(const RunConfig& cfg, LoadedModel& model,
                                      const std::vector<ctrl::Method>& methods);

// traces.csv + summary.json under out_dir.
void write_control_outputs(const std::string& out_dir, const RunConfig& cfg,
                           const ControlOutcome& outcome);

double median(std::vector<double> v);

}  // namespace se3ctrl::harness

#include "harness/control_runner.hpp"

#include <algorithm>
#include <filesystem>
#include <stdexcept>

#include "util/io.hpp"

namespace se3ctrl::harness {

namespace fs = std::filesystem;

double median(std::vector<double> v) {
  if (v.empty()) return -1.0;
  std::sort(v.begin(), v.end());
  const size_t n = v.size();
  return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

ControlOutcome run_control_experiment(const RunConfig& cfg, LoadedModel& model,
                                      const std::vector<ctrl::Method>& methods) {
  cfg.validate();
  if (methods.empty()) throw std::invalid_argument("control: no methods requested");
  if (model.step <= 0)
    throw std::invalid_argument("control: checkpoint is untrained (step 0); train first");
  if (model.net_cfg.n_ctrl != cfg.arm.n_joints)
    throw std::invalid_argument("control: checkpoint control width does not match the arm");

  util::Rng task_rng = util::Rng(cfg.seed).fork(7);
  ControlOutcome out;
  out.tasks = ctrl::sample_servo_tasks(cfg.arm, cfg.camera, cfg.n_tasks, cfg.task_mean_err,
                                       cfg.gen.episode.min_visible_frac, task_rng);

  for (const ctrl::Method method : methods) {
    for (const ctrl::ServoTask& task : out.tasks) {
      ctrl::ControlTrace tr;
      if (model.kind == ModelKind::se3posenet) {
        tr = ctrl::run_control_loop(cfg.arm, cfg.camera, *model.pose, task, cfg.controller,
                                    method, cfg.control_dt);
      } else {
        tr = ctrl::run_baseline_flow_control(cfg.arm, cfg.camera, *model.flow, task,
                                             cfg.controller, method, cfg.control_dt);
      }
      ControlSummaryRow row;
      row.task_id = task.id;
      row.method = tr.method;
      row.iterations = static_cast<int>(tr.rows.size());
      row.iterations_to_threshold = tr.first_iteration_below(cfg.success_threshold);
      row.success = row.iterations_to_threshold >= 0;
      row.initial_err = tr.rows.front().mean_abs_err;
      row.final_err = tr.rows.back().mean_abs_err;
      row.best_err = tr.best_mean_abs_err();
      row.termination = tr.termination;
      out.rows.push_back(row);
      out.traces.push_back(std::move(tr));
    }
  }

  for (const ctrl::Method method : methods) {
    MethodAggregate agg;
    std::vector<double> iters;
    for (const ControlSummaryRow& row : out.rows) {
      const std::string name =
          model.kind == ModelKind::se3posenet
              ? ctrl::method_name(method)
              : std::string("flow_") + ctrl::method_name(method);
      if (row.method != name) continue;
      agg.method = name;
      ++agg.n_tasks;
      if (row.success) {
        ++agg.n_success;
        iters.push_back(static_cast<double>(row.iterations_to_threshold));
      }
    }
    agg.success_rate = agg.n_tasks > 0 ? static_cast<double>(agg.n_success) / agg.n_tasks : 0.0;
    agg.median_iterations = median(std::move(iters));
    out.methods.push_back(agg);
  }
  return out;
}

void write_control_outputs(const std::string& out_dir, const RunConfig& cfg,
                           const ControlOutcome& outcome) {
  fs::create_directories(out_dir);
  ctrl::write_traces_csv((fs::path(out_dir) / "traces.csv").string(), outcome.traces);

  nlohmann::json j;
  j["seed"] = cfg.seed;
  j["n_tasks"] = cfg.n_tasks;
  j["success_threshold"] = cfg.success_threshold;
  j["task_mean_err"] = cfg.task_mean_err;
  j["methods"] = nlohmann::json::array();
  for (const MethodAggregate& m : outcome.methods) {
    j["methods"].push_back({{"method", m.method},
                            {"n_tasks", m.n_tasks},
                            {"n_success", m.n_success},
                            {"success_rate", m.success_rate},
                            {"median_iterations_to_threshold", m.median_iterations}});
  }
  j["tasks"] = nlohmann::json::array();
  for (const ControlSummaryRow& r : outcome.rows) {
    j["tasks"].push_back({{"task_id", r.task_id},
                          {"method", r.method},
                          {"success", r.success},
                          {"iterations_to_threshold", r.iterations_to_threshold},
                          {"initial_err", r.initial_err},
                          {"final_err", r.final_err},
                          {"best_err", r.best_err},
                          {"iterations", r.iterations},
                          {"termination", r.termination}});
  }
  util::write_text_file((fs::path(out_dir) / "summary.json").string(), j.dump(2) + "\n");
}

}  // namespace se3ctrl::harness

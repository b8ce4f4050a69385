// Command-line front end. Talks to the core exclusively through the C API.
#include <CLI11.hpp>
#include <cstdint>
#include <cstdio>
#include <json.hpp>
#include <fstream>
#include <sstream>
#include <string>

#include "se3ctrl/se3ctrl.h"

namespace {

// Reads the config file (if any) and applies the --seed override. Returns a
// JSON document string; empty string means library defaults.
std::string load_config(const std::string& path, bool seed_set, uint64_t seed) {
  nlohmann::json j = nlohmann::json::object();
  if (!path.empty()) {
    std::ifstream in(path);
    if (!in) throw CLI::ValidationError("--config", "cannot open " + path);
    std::stringstream ss;
    ss << in.rdbuf();
    try {
      j = nlohmann::json::parse(ss.str());
    } catch (const std::exception& e) {
      throw CLI::ValidationError("--config", std::string("invalid JSON: ") + e.what());
    }
  }
  if (seed_set) j["seed"] = seed;
  return j.dump();
}

int check(se3c_status st) {
  if (st == SE3C_OK) return 0;
  std::fprintf(stderr, "error: %s\n", se3c_last_error());
  return static_cast<int>(st);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"se3ctrl: structured pose-embedding dynamics, training, and visual servoing"};
  app.require_subcommand(1);

  std::string config_path;
  uint64_t seed = 0;
  bool seed_set = false;
  app.add_option("--config", config_path, "JSON config file (defaults apply when omitted)");
  app.add_option("--seed", seed, "override the config seed")->each([&](const std::string&) {
    seed_set = true;
  });

  auto* gen = app.add_subcommand("gen-data", "generate a dataset");
  std::string gen_out;
  gen->add_option("--out", gen_out, "output dataset directory")->required();

  auto* train = app.add_subcommand("train", "train a model");
  std::string train_model = "se3posenet", train_data, train_out;
  train->add_option("--model", train_model, "se3posenet | flownet");
  train->add_option("--data", train_data, "dataset directory (overrides config)");
  train->add_option("--out", train_out, "output directory for checkpoints/curves")->required();

  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint");
  std::string eval_ckpt, eval_data, eval_out;
  eval->add_option("--checkpoint", eval_ckpt, "checkpoint directory")->required();
  eval->add_option("--data", eval_data, "dataset directory (overrides config)");
  eval->add_option("--out", eval_out, "report JSON path")->required();

  auto* control = app.add_subcommand("control", "run servoing experiments");
  std::string ctl_ckpt, ctl_method = "both", ctl_out;
  int ctl_tasks = 0;
  control->add_option("--checkpoint", ctl_ckpt, "trained checkpoint directory")->required();
  control->add_option("--method", ctl_method, "backprop | gauss_newton | both");
  control->add_option("--tasks", ctl_tasks, "task count (overrides config)");
  control->add_option("--out", ctl_out, "output directory for traces/summary")->required();

  auto* plot = app.add_subcommand("plot", "plot convergence curves from traces");
  std::string plot_traces, plot_out;
  plot->add_option("--traces", plot_traces, "traces.csv from the control command")->required();
  plot->add_option("--out", plot_out, "output SVG path")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    const std::string cfg = load_config(config_path, seed_set, seed);
    if (gen->parsed()) return check(se3c_gen_data(cfg.c_str(), gen_out.c_str()));
    if (train->parsed())
      return check(se3c_train(cfg.c_str(), train_model.c_str(),
                              train_data.empty() ? nullptr : train_data.c_str(),
                              train_out.c_str()));
    if (eval->parsed())
      return check(se3c_eval(cfg.c_str(), eval_ckpt.c_str(),
                             eval_data.empty() ? nullptr : eval_data.c_str(), eval_out.c_str()));
    if (control->parsed())
      return check(
          se3c_control(cfg.c_str(), ctl_ckpt.c_str(), ctl_method.c_str(), ctl_tasks, ctl_out.c_str()));
    if (plot->parsed()) return check(se3c_plot(plot_traces.c_str(), plot_out.c_str()));
  } catch (const CLI::Error& e) {
    return app.exit(e);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}

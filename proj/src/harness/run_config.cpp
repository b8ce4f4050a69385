#include "harness/run_config.hpp"

#include <stdexcept>

namespace se3ctrl::harness {

using nlohmann::json;

void RunConfig::validate() const {
  net.validate();
  loss.validate();
  controller.validate();
  arm.validate();
  camera.validate();
  if (train_iters < 1) throw std::invalid_argument("config: train_iters must be >= 1");
  if (batch_size < 1) throw std::invalid_argument("config: batch_size must be >= 1");
  if (validate_every < 1) throw std::invalid_argument("config: validate_every must be >= 1");
  if (checkpoint_every < 0) throw std::invalid_argument("config: checkpoint_every must be >= 0");
  if (!(lr > 0.0)) throw std::invalid_argument("config: lr must be > 0");
  if (calib_pairs < 1) throw std::invalid_argument("config: calib_pairs must be >= 1");
  if (val_batch_pairs < 1) throw std::invalid_argument("config: val_batch_pairs must be >= 1");
  if (n_tasks < 1) throw std::invalid_argument("config: n_tasks must be >= 1");
  if (!(task_mean_err > 0.0)) throw std::invalid_argument("config: task_mean_err must be > 0");
  if (!(success_threshold > 0.0))
    throw std::invalid_argument("config: success_threshold must be > 0");
  if (!(control_dt > 0.0)) throw std::invalid_argument("config: control_dt must be > 0");
  if (gen.n_pairs < 1) throw std::invalid_argument("config: gen.n_pairs must be >= 1");
  if (gen.whole_arm_fraction < 0.0 || gen.whole_arm_fraction > 1.0)
    throw std::invalid_argument("config: gen.whole_arm_fraction must be in [0,1]");
  if (gen.val_fraction < 0.0 || gen.val_fraction >= 1.0)
    throw std::invalid_argument("config: gen.val_fraction must be in [0,1)");
}

json net_config_to_json(const nets::NetConfig& c) {
  json j;
  j["k"] = c.k;
  j["h"] = c.h;
  j["w"] = c.w;
  j["n_ctrl"] = c.n_ctrl;
  j["n_joints"] = c.n_joints;
  j["conv_channels"] = c.conv_channels;
  j["fc_hidden"] = c.fc_hidden;
  j["use_joint_angles"] = c.use_joint_angles;
  j["sharpen_gamma_max"] = c.sharpen_gamma_max;
  j["sharpen_noise_max"] = c.sharpen_noise_max;
  return j;
}

nets::NetConfig net_config_from_json(const json& j) {
  nets::NetConfig d;
  d.k = j.value("k", d.k);
  d.h = j.value("h", d.h);
  d.w = j.value("w", d.w);
  d.n_ctrl = j.value("n_ctrl", d.n_ctrl);
  d.n_joints = j.value("n_joints", d.n_joints);
  d.conv_channels = j.value("conv_channels", d.conv_channels);
  d.fc_hidden = j.value("fc_hidden", d.fc_hidden);
  d.use_joint_angles = j.value("use_joint_angles", d.use_joint_angles);
  d.sharpen_gamma_max = j.value("sharpen_gamma_max", d.sharpen_gamma_max);
  d.sharpen_noise_max = j.value("sharpen_noise_max", d.sharpen_noise_max);
  d.validate();
  return d;
}

namespace {

json episode_to_json(const sim::EpisodeConfig& e) {
  json j;
  j["dt"] = e.dt;
  j["v_max"] = e.v_max;
  j["min_visible_frac"] = e.min_visible_frac;
  j["whole_arm_pairs_min"] = e.whole_arm_pairs_min;
  j["whole_arm_pairs_max"] = e.whole_arm_pairs_max;
  j["single_joint_pairs_min"] = e.single_joint_pairs_min;
  j["single_joint_pairs_max"] = e.single_joint_pairs_max;
  j["single_joint_v_min"] = e.single_joint_v_min;
  j["max_rejects"] = e.max_rejects;
  return j;
}

sim::EpisodeConfig episode_from_json(const json& j) {
  sim::EpisodeConfig d;
  d.dt = j.value("dt", d.dt);
  d.v_max = j.value("v_max", d.v_max);
  d.min_visible_frac = j.value("min_visible_frac", d.min_visible_frac);
  d.whole_arm_pairs_min = j.value("whole_arm_pairs_min", d.whole_arm_pairs_min);
  d.whole_arm_pairs_max = j.value("whole_arm_pairs_max", d.whole_arm_pairs_max);
  d.single_joint_pairs_min = j.value("single_joint_pairs_min", d.single_joint_pairs_min);
  d.single_joint_pairs_max = j.value("single_joint_pairs_max", d.single_joint_pairs_max);
  d.single_joint_v_min = j.value("single_joint_v_min", d.single_joint_v_min);
  d.max_rejects = j.value("max_rejects", d.max_rejects);
  return d;
}

}  // namespace

json run_config_to_json(const RunConfig& c) {
  json j;
  j["seed"] = c.seed;
  j["dataset"] = c.dataset_dir;
  j["net"] = net_config_to_json(c.net);
  j["loss"] = {{"alpha", c.loss.alpha},
               {"beta", c.loss.beta},
               {"gamma", c.loss.gamma},
               {"motion_threshold", c.loss.motion_threshold}};
  j["controller"] = {{"u_max", c.controller.u_max},
                     {"lambda", c.controller.lambda},
                     {"fd_delta", c.controller.fd_delta},
                     {"max_iters", c.controller.max_iters},
                     {"epsilon", c.controller.epsilon},
                     {"rising_patience", c.controller.rising_patience}};
  j["train"] = {{"iters", c.train_iters},
                {"batch_size", c.batch_size},
                {"validate_every", c.validate_every},
                {"checkpoint_every", c.checkpoint_every},
                {"lr", c.lr},
                {"calib_pairs", c.calib_pairs},
                {"val_batch_pairs", c.val_batch_pairs}};
  j["control"] = {{"n_tasks", c.n_tasks},
                  {"mean_err", c.task_mean_err},
                  {"success_threshold", c.success_threshold},
                  {"dt", c.control_dt}};
  j["sim"] = {{"arm", sim::arm_to_json(c.arm)},
              {"camera", sim::camera_to_json(c.camera)},
              {"gen",
               {{"n_pairs", c.gen.n_pairs},
                {"whole_arm_fraction", c.gen.whole_arm_fraction},
                {"val_fraction", c.gen.val_fraction},
                {"episode", episode_to_json(c.gen.episode)}}}};
  return j;
}

RunConfig run_config_from_json(const json& j) {
  RunConfig c;
  c.seed = j.value("seed", c.seed);
  c.dataset_dir = j.value("dataset", c.dataset_dir);
  if (j.contains("net")) c.net = net_config_from_json(j.at("net"));
  if (j.contains("loss")) {
    const json& l = j.at("loss");
    c.loss.alpha = l.value("alpha", c.loss.alpha);
    c.loss.beta = l.value("beta", c.loss.beta);
    c.loss.gamma = l.value("gamma", c.loss.gamma);
    c.loss.motion_threshold = l.value("motion_threshold", c.loss.motion_threshold);
  }
  if (j.contains("controller")) {
    const json& k = j.at("controller");
    c.controller.u_max = k.value("u_max", c.controller.u_max);
    c.controller.lambda = k.value("lambda", c.controller.lambda);
    c.controller.fd_delta = k.value("fd_delta", c.controller.fd_delta);
    c.controller.max_iters = k.value("max_iters", c.controller.max_iters);
    c.controller.epsilon = k.value("epsilon", c.controller.epsilon);
    c.controller.rising_patience = k.value("rising_patience", c.controller.rising_patience);
  }
  if (j.contains("train")) {
    const json& t = j.at("train");
    c.train_iters = t.value("iters", c.train_iters);
    c.batch_size = t.value("batch_size", c.batch_size);
    c.validate_every = t.value("validate_every", c.validate_every);
    c.checkpoint_every = t.value("checkpoint_every", c.checkpoint_every);
    c.lr = t.value("lr", c.lr);
    c.calib_pairs = t.value("calib_pairs", c.calib_pairs);
    c.val_batch_pairs = t.value("val_batch_pairs", c.val_batch_pairs);
  }
  if (j.contains("control")) {
    const json& k = j.at("control");
    c.n_tasks = k.value("n_tasks", c.n_tasks);
    c.task_mean_err = k.value("mean_err", c.task_mean_err);
    c.success_threshold = k.value("success_threshold", c.success_threshold);
    c.control_dt = k.value("dt", c.control_dt);
  }
  if (j.contains("sim")) {
    const json& s = j.at("sim");
    if (s.contains("arm")) c.arm = sim::arm_from_json(s.at("arm"));
    if (s.contains("camera")) c.camera = sim::camera_from_json(s.at("camera"));
    if (s.contains("gen")) {
      const json& g = s.at("gen");
      c.gen.n_pairs = g.value("n_pairs", c.gen.n_pairs);
      c.gen.whole_arm_fraction = g.value("whole_arm_fraction", c.gen.whole_arm_fraction);
      c.gen.val_fraction = g.value("val_fraction", c.gen.val_fraction);
      if (g.contains("episode")) c.gen.episode = episode_from_json(g.at("episode"));
    }
  }
  c.validate();
  return c;
}

RunConfig parse_run_config(const std::string& text) {
  if (text.empty()) return RunConfig{};
  json j = json::parse(text);
  if (!j.is_object()) throw std::invalid_argument("config: top level must be a JSON object");
  return run_config_from_json(j);
}

}  // namespace se3ctrl::harness

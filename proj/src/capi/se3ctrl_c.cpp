#include "se3ctrl/se3ctrl.h"

#include <filesystem>
#include <fstream>
#include <memory>
#include <string>

#include "ctrl/controller.hpp"
#include "harness/control_runner.hpp"
#include "harness/eval.hpp"
#include "harness/plot.hpp"
#include "harness/run_config.hpp"
#include "harness/trainer.hpp"
#include "sim/dataset.hpp"

namespace {

thread_local std::string g_last_error;

std::string opt(const char* s) { return s == nullptr ? std::string() : std::string(s); }

std::string req(const char* s, const char* what) {
  if (s == nullptr || *s == '\0')
    throw std::invalid_argument(std::string(what) + " must not be empty");
  return s;
}

template <typename F>
se3c_status guard(F&& f) {
  try {
    f();
    g_last_error.clear();
    return SE3C_OK;
  } catch (const nlohmann::json::exception& e) {
    g_last_error = e.what();
    return SE3C_INVALID_ARGUMENT;
  } catch (const std::invalid_argument& e) {
    g_last_error = e.what();
    return SE3C_INVALID_ARGUMENT;
  } catch (const std::filesystem::filesystem_error& e) {
    g_last_error = e.what();
    return SE3C_IO_ERROR;
  } catch (const std::ios_base::failure& e) {
    g_last_error = e.what();
    return SE3C_IO_ERROR;
  } catch (const std::runtime_error& e) {
    // File helpers throw runtime_error; classify by message.
    const std::string msg = e.what();
    g_last_error = msg;
    if (msg.find("cannot open") != std::string::npos ||
        msg.find("short read") != std::string::npos ||
        msg.find("short write") != std::string::npos)
      return SE3C_IO_ERROR;
    return SE3C_RUNTIME_ERROR;
  } catch (const std::exception& e) {
    g_last_error = e.what();
    return SE3C_RUNTIME_ERROR;
  } catch (...) {
    g_last_error = "unknown error";
    return SE3C_RUNTIME_ERROR;
  }
}

se3ctrl::harness::RunConfig parse_config(const char* config_json) {
  return se3ctrl::harness::parse_run_config(opt(config_json));
}

}  // namespace

struct se3c_model {
  se3ctrl::harness::LoadedModel loaded;
};

extern "C" {

const char* se3c_last_error(void) { return g_last_error.c_str(); }

se3c_status se3c_gen_data(const char* config_json, const char* out_dir) {
  return guard([&] {
    const auto cfg = parse_config(config_json);
    const std::string dir = req(out_dir, "out_dir");
    se3ctrl::sim::generate_dataset(cfg.arm, cfg.camera, cfg.gen, cfg.seed, dir);
  });
}

se3c_status se3c_train(const char* config_json, const char* model_kind, const char* dataset_dir,
                       const char* out_dir) {
  return guard([&] {
    auto cfg = parse_config(config_json);
    const auto kind = se3ctrl::harness::model_kind_from(req(model_kind, "model_kind"));
    const std::string data = opt(dataset_dir);
    if (!data.empty()) cfg.dataset_dir = data;
    se3ctrl::harness::train_model(cfg, kind, req(out_dir, "out_dir"));
  });
}

se3c_status se3c_eval(const char* config_json, const char* checkpoint_dir, const char* dataset_dir,
                      const char* report_path) {
  return guard([&] {
    auto cfg = parse_config(config_json);
    const std::string data = opt(dataset_dir);
    if (!data.empty()) cfg.dataset_dir = data;
    auto model = se3ctrl::harness::load_model(req(checkpoint_dir, "checkpoint_dir"));
    const auto report =
        se3ctrl::harness::evaluate(model, cfg.dataset_dir, "val", /*max_pairs=*/-1, cfg.loss);
    se3ctrl::harness::write_report(req(report_path, "report_path"), report);
  });
}

se3c_status se3c_control(const char* config_json, const char* checkpoint_dir, const char* method,
                         int n_tasks, const char* out_dir) {
  return guard([&] {
    auto cfg = parse_config(config_json);
    if (n_tasks > 0) cfg.n_tasks = n_tasks;
    const std::string m = opt(method).empty() ? "both" : opt(method);
    std::vector<se3ctrl::ctrl::Method> methods;
    if (m == "both") {
      methods = {se3ctrl::ctrl::Method::gauss_newton, se3ctrl::ctrl::Method::backprop};
    } else if (m == "gauss_newton") {
      methods = {se3ctrl::ctrl::Method::gauss_newton};
    } else if (m == "backprop") {
      methods = {se3ctrl::ctrl::Method::backprop};
    } else {
      throw std::invalid_argument("method must be backprop, gauss_newton, or both");
    }
    auto model = se3ctrl::harness::load_model(req(checkpoint_dir, "checkpoint_dir"));
    const auto outcome = se3ctrl::harness::run_control_experiment(cfg, model, methods);
    se3ctrl::harness::write_control_outputs(req(out_dir, "out_dir"), cfg, outcome);
  });
}

se3c_status se3c_plot(const char* traces_csv, const char* out_svg) {
  return guard([&] {
    se3ctrl::harness::plot_traces(req(traces_csv, "traces_csv"), req(out_svg, "out_svg"));
  });
}

se3c_status se3c_model_load(const char* checkpoint_dir, se3c_model** out) {
  return guard([&] {
    if (out == nullptr) throw std::invalid_argument("out must not be NULL");
    auto handle = std::make_unique<se3c_model>();
    handle->loaded = se3ctrl::harness::load_model(req(checkpoint_dir, "checkpoint_dir"));
    *out = handle.release();
  });
}

void se3c_model_free(se3c_model* model) { delete model; }

se3c_status se3c_model_info(const se3c_model* model, const char** kind_out, int* k, int* h, int* w,
                            int* n_ctrl, int* n_joints, int* uses_joint_angles, long long* step) {
  return guard([&] {
    if (model == nullptr) throw std::invalid_argument("model must not be NULL");
    const auto& cfg = model->loaded.net_cfg;
    if (kind_out) *kind_out = se3ctrl::harness::model_kind_name(model->loaded.kind);
    if (k) *k = cfg.k;
    if (h) *h = cfg.h;
    if (w) *w = cfg.w;
    if (n_ctrl) *n_ctrl = cfg.n_ctrl;
    if (n_joints) *n_joints = cfg.n_joints;
    if (uses_joint_angles) *uses_joint_angles = cfg.use_joint_angles ? 1 : 0;
    if (step) *step = static_cast<long long>(model->loaded.step);
  });
}

se3c_status se3c_model_encode(se3c_model* model, const float* cloud, const float* q,
                              float* pose_out) {
  return guard([&] {
    if (model == nullptr || cloud == nullptr || pose_out == nullptr)
      throw std::invalid_argument("model, cloud, and pose_out must not be NULL");
    if (model->loaded.kind != se3ctrl::harness::ModelKind::se3posenet)
      throw std::invalid_argument("encode requires an se3posenet checkpoint");
    const auto& cfg = model->loaded.net_cfg;
    if (cfg.use_joint_angles && q == nullptr)
      throw std::invalid_argument("this model requires joint angles");
    if (!cfg.use_joint_angles && q != nullptr)
      throw std::invalid_argument("this model does not take joint angles");
    se3ctrl::ad::Tensor<double> chw({3, cfg.h, cfg.w});
    for (int64_t i = 0; i < chw.numel(); ++i) chw.data[i] = cloud[i];
    std::vector<double> qv;
    if (q != nullptr) qv.assign(q, q + cfg.n_joints);
    const auto pose = se3ctrl::ctrl::encode_pose(*model->loaded.pose, chw, qv);
    for (int64_t i = 0; i < pose.numel(); ++i) pose_out[i] = pose.data[i];
  });
}

se3c_status se3c_model_predict(se3c_model* model, const float* pose, const float* u,
                               const float* q, float* pose_out) {
  return guard([&] {
    if (model == nullptr || pose == nullptr || u == nullptr || pose_out == nullptr)
      throw std::invalid_argument("model, pose, u, and pose_out must not be NULL");
    if (model->loaded.kind != se3ctrl::harness::ModelKind::se3posenet)
      throw std::invalid_argument("predict requires an se3posenet checkpoint");
    const auto& cfg = model->loaded.net_cfg;
    if (cfg.use_joint_angles && q == nullptr)
      throw std::invalid_argument("this model requires joint angles");
    if (!cfg.use_joint_angles && q != nullptr)
      throw std::invalid_argument("this model does not take joint angles");
    se3ctrl::ad::Tensor<float> p({1, cfg.k, 6});
    for (int64_t i = 0; i < p.numel(); ++i) p.data[i] = pose[i];
    Eigen::MatrixXd us(1, cfg.n_ctrl);
    for (int j = 0; j < cfg.n_ctrl; ++j) us(0, j) = u[j];
    std::vector<double> qv;
    if (q != nullptr) qv.assign(q, q + cfg.n_joints);
    const auto phat = se3ctrl::ctrl::predict_poses(*model->loaded.pose, p, us, qv);
    for (int64_t i = 0; i < phat.numel(); ++i) pose_out[i] = phat.data[i];
  });
}

}  // extern "C"

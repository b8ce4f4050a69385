#include "sim/dataset.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <stdexcept>

#include "util/io.hpp"

namespace se3ctrl::sim {

namespace fs = std::filesystem;

namespace {

nlohmann::json vec3_to_json(const Eigen::Vector3d& v) {
  return nlohmann::json::array({v.x(), v.y(), v.z()});
}

Eigen::Vector3d vec3_from_json(const nlohmann::json& j) {
  return Eigen::Vector3d(j.at(0).get<double>(), j.at(1).get<double>(), j.at(2).get<double>());
}

nlohmann::json iso_to_json(const Eigen::Isometry3d& t) {
  nlohmann::json out = nlohmann::json::array();
  for (int r = 0; r < 4; ++r)
    for (int c = 0; c < 4; ++c) out.push_back(t.matrix()(r, c));
  return out;
}

Eigen::Isometry3d iso_from_json(const nlohmann::json& j) {
  Eigen::Matrix4d m;
  for (int r = 0; r < 4; ++r)
    for (int c = 0; c < 4; ++c) m(r, c) = j.at(static_cast<size_t>(r * 4 + c)).get<double>();
  Eigen::Isometry3d t;
  t.matrix() = m;
  return t;
}

std::string pair_filename(int index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "pair_%06d.bin", index);
  return buf;
}

void append(std::vector<float>& dst, const ad::Tensor<double>& t) {
  for (double v : t.data) dst.push_back(static_cast<float>(v));
}

}  // namespace

nlohmann::json arm_to_json(const ArmModel& arm) {
  nlohmann::json j;
  j["n_joints"] = arm.n_joints;
  j["link_lengths"] = arm.link_lengths;
  j["link_radii"] = arm.link_radii;
  j["limit_lo"] = arm.limit_lo;
  j["limit_hi"] = arm.limit_hi;
  j["joint_axes"] = nlohmann::json::array();
  j["link_dirs"] = nlohmann::json::array();
  for (const auto& a : arm.joint_axes) j["joint_axes"].push_back(vec3_to_json(a));
  for (const auto& d : arm.link_dirs) j["link_dirs"].push_back(vec3_to_json(d));
  j["base"] = iso_to_json(arm.base);
  return j;
}

ArmModel arm_from_json(const nlohmann::json& j) {
  ArmModel arm;
  arm.n_joints = j.at("n_joints").get<int>();
  arm.link_lengths = j.at("link_lengths").get<std::vector<double>>();
  arm.link_radii = j.at("link_radii").get<std::vector<double>>();
  arm.limit_lo = j.at("limit_lo").get<std::vector<double>>();
  arm.limit_hi = j.at("limit_hi").get<std::vector<double>>();
  arm.joint_axes.clear();
  arm.link_dirs.clear();
  for (const auto& a : j.at("joint_axes")) arm.joint_axes.push_back(vec3_from_json(a));
  for (const auto& d : j.at("link_dirs")) arm.link_dirs.push_back(vec3_from_json(d));
  arm.base = iso_from_json(j.at("base"));
  arm.validate();
  return arm;
}

nlohmann::json camera_to_json(const CameraModel& cam) {
  nlohmann::json j;
  j["h"] = cam.h;
  j["w"] = cam.w;
  j["fx"] = cam.fx;
  j["fy"] = cam.fy;
  j["cx"] = cam.cx;
  j["cy"] = cam.cy;
  j["cam_from_world"] = iso_to_json(cam.cam_from_world);
  j["background_depth"] = cam.background_depth;
  return j;
}

CameraModel camera_from_json(const nlohmann::json& j) {
  CameraModel cam;
  cam.h = j.at("h").get<int>();
  cam.w = j.at("w").get<int>();
  cam.fx = j.at("fx").get<double>();
  cam.fy = j.at("fy").get<double>();
  cam.cx = j.at("cx").get<double>();
  cam.cy = j.at("cy").get<double>();
  cam.cam_from_world = iso_from_json(j.at("cam_from_world"));
  cam.background_depth = j.at("background_depth").get<double>();
  cam.validate();
  return cam;
}

std::vector<int> DatasetManifest::pair_indices(const std::string& split) const {
  std::vector<int> out;
  for (const auto& ep : episodes) {
    if (ep.split != split) continue;
    for (int i = 0; i < ep.n_pairs; ++i) out.push_back(ep.first_pair + i);
  }
  return out;
}

void generate_dataset(const ArmModel& arm, const CameraModel& camera, const GenConfig& cfg,
                      uint64_t seed, const std::string& dir) {
  arm.validate();
  camera.validate();
  if (cfg.n_pairs < 1) throw std::invalid_argument("generate_dataset: n_pairs must be >= 1");
  if (cfg.whole_arm_fraction < 0.0 || cfg.whole_arm_fraction > 1.0)
    throw std::invalid_argument("generate_dataset: whole_arm_fraction out of range");
  if (cfg.val_fraction < 0.0 || cfg.val_fraction >= 1.0)
    throw std::invalid_argument("generate_dataset: val_fraction out of range");
  fs::create_directories(fs::path(dir) / "pairs");

  util::Rng master(seed);
  std::vector<EpisodeInfo> episodes;
  int written = 0;
  int episode_id = 0;
  while (written < cfg.n_pairs) {
    const EpisodeMode mode = master.bernoulli(cfg.whole_arm_fraction)
                                 ? EpisodeMode::whole_arm
                                 : EpisodeMode::single_joint;
    util::Rng ep_rng = master.fork(static_cast<uint64_t>(episode_id));
    std::vector<TrainingPair> pairs = sample_episode(arm, camera, mode, cfg.episode, ep_rng);
    if (written + static_cast<int>(pairs.size()) > cfg.n_pairs) {
      pairs.resize(static_cast<size_t>(cfg.n_pairs - written));
    }
    EpisodeInfo info;
    info.id = episode_id;
    info.mode = mode == EpisodeMode::whole_arm ? "whole_arm" : "single_joint";
    info.n_pairs = static_cast<int>(pairs.size());
    info.first_pair = written;
    for (const TrainingPair& p : pairs) {
      std::vector<float> rec;
      rec.reserve(static_cast<size_t>(p.frame_t.cloud.numel()) * 3 +
                  static_cast<size_t>(p.frame_t.gt_masks.numel()) +
                  3 * p.q_next.size() + 1);
      append(rec, p.frame_t.cloud);
      append(rec, p.assoc);
      append(rec, p.flow);
      append(rec, p.frame_t.gt_masks);
      for (double v : p.frame_t.q) rec.push_back(static_cast<float>(v));
      for (double v : p.q_next) rec.push_back(static_cast<float>(v));
      for (double v : p.u) rec.push_back(static_cast<float>(v));
      rec.push_back(static_cast<float>(p.dt));
      util::write_f32_blob((fs::path(dir) / "pairs" / pair_filename(written)).string(), rec);
      ++written;
    }
    episodes.push_back(info);
    ++episode_id;
  }
  // Validation split by episode: episode i is val iff the cumulative quota
  // floor((i+1)*frac) advances at i.
  for (size_t i = 0; i < episodes.size(); ++i) {
    const double f = cfg.val_fraction;
    const bool val = std::floor((static_cast<double>(i) + 1.0) * f) >
                     std::floor(static_cast<double>(i) * f);
    episodes[i].split = val ? "val" : "train";
  }

  nlohmann::json manifest;
  manifest["format"] = "se3ctrl-dataset-v1";
  manifest["dtype"] = "f32";
  manifest["seed"] = seed;
  manifest["h"] = camera.h;
  manifest["w"] = camera.w;
  manifest["n_joints"] = arm.n_joints;
  manifest["n_ctrl"] = arm.n_joints;
  manifest["k_gt"] = arm.n_joints + 1;
  manifest["n_pairs"] = cfg.n_pairs;
  manifest["dt"] = cfg.episode.dt;
  manifest["record_fields"] = {"cloud", "assoc", "flow", "gt_masks", "q", "q_next", "u", "dt"};
  manifest["arm"] = arm_to_json(arm);
  manifest["camera"] = camera_to_json(camera);
  manifest["gen"] = {{"n_pairs", cfg.n_pairs},
                     {"whole_arm_fraction", cfg.whole_arm_fraction},
                     {"val_fraction", cfg.val_fraction},
                     {"v_max", cfg.episode.v_max},
                     {"min_visible_frac", cfg.episode.min_visible_frac}};
  manifest["episodes"] = nlohmann::json::array();
  for (const auto& ep : episodes) {
    manifest["episodes"].push_back({{"id", ep.id},
                                    {"mode", ep.mode},
                                    {"n_pairs", ep.n_pairs},
                                    {"first_pair", ep.first_pair},
                                    {"split", ep.split}});
  }
  util::write_text_file((fs::path(dir) / "manifest.json").string(), manifest.dump(2) + "\n");
}

DatasetManifest load_manifest(const std::string& dir) {
  nlohmann::json j =
      nlohmann::json::parse(util::read_text_file((fs::path(dir) / "manifest.json").string()));
  if (j.value("format", "") != "se3ctrl-dataset-v1")
    throw std::runtime_error("dataset: unrecognized manifest format in " + dir);
  DatasetManifest m;
  m.seed = j.at("seed").get<uint64_t>();
  m.h = j.at("h").get<int>();
  m.w = j.at("w").get<int>();
  m.n_joints = j.at("n_joints").get<int>();
  m.n_ctrl = j.at("n_ctrl").get<int>();
  m.k_gt = j.at("k_gt").get<int>();
  m.n_pairs = j.at("n_pairs").get<int>();
  m.dt = j.at("dt").get<double>();
  m.arm = arm_from_json(j.at("arm"));
  m.camera = camera_from_json(j.at("camera"));
  for (const auto& e : j.at("episodes")) {
    EpisodeInfo info;
    info.id = e.at("id").get<int>();
    info.mode = e.at("mode").get<std::string>();
    info.n_pairs = e.at("n_pairs").get<int>();
    info.first_pair = e.at("first_pair").get<int>();
    info.split = e.at("split").get<std::string>();
    m.episodes.push_back(info);
  }
  return m;
}

PairRecord load_pair(const std::string& dir, const DatasetManifest& m, int index) {
  if (index < 0 || index >= m.n_pairs) throw std::invalid_argument("load_pair: index out of range");
  const std::vector<float> raw =
      util::read_f32_blob((fs::path(dir) / "pairs" / pair_filename(index)).string());
  const size_t hw = static_cast<size_t>(m.h) * static_cast<size_t>(m.w);
  const size_t n = static_cast<size_t>(m.n_joints);
  const size_t expect = 9 * hw + static_cast<size_t>(m.k_gt) * hw + 3 * n + 1;
  if (raw.size() != expect) throw std::runtime_error("load_pair: record size mismatch");
  PairRecord r;
  size_t off = 0;
  auto take = [&](std::vector<float>& dst, size_t count) {
    dst.assign(raw.begin() + static_cast<long>(off), raw.begin() + static_cast<long>(off + count));
    off += count;
  };
  take(r.cloud, 3 * hw);
  take(r.assoc, 3 * hw);
  take(r.flow, 3 * hw);
  take(r.gt_masks, static_cast<size_t>(m.k_gt) * hw);
  take(r.q, n);
  take(r.q_next, n);
  take(r.u, n);
  r.dt = raw[off];
  return r;
}

}  // namespace se3ctrl::sim

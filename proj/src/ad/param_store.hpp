#pragma once

#include <cmath>
#include <filesystem>
#include <fstream>
#include <json.hpp>
#include <map>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "ad/graph.hpp"
#include "ad/tensor.hpp"
#include "util/io.hpp"
#include "util/rng.hpp"

namespace se3ctrl::ad {

// Named parameter registry with Adam state. Non-trainable entries hold
// calibrated buffers (normalization stats); they are checkpointed but never
// touched by the optimizer.
template <typename T>
class ParamStore {
 public:
  struct Entry {
    std::string name;
    Tensor<T> value;
    Tensor<T> grad;
    Tensor<T> m, v;  // Adam moments (trainable entries only)
    bool trainable = true;
  };

  int add(const std::string& name, std::vector<int> shape, bool trainable = true) {
    if (index_.count(name)) throw std::invalid_argument("param exists: " + name);
    Entry e;
    e.name = name;
    e.value = Tensor<T>::zeros(shape);
    e.grad = Tensor<T>::zeros(shape);
    if (trainable) {
      e.m = Tensor<T>::zeros(shape);
      e.v = Tensor<T>::zeros(shape);
    }
    e.trainable = trainable;
    entries_.push_back(std::move(e));
    index_[name] = static_cast<int>(entries_.size()) - 1;
    return index_[name];
  }

  bool has(const std::string& name) const { return index_.count(name) > 0; }

  Entry& at(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::invalid_argument("no such param: " + name);
    return entries_[static_cast<size_t>(it->second)];
  }
  const Entry& at(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::invalid_argument("no such param: " + name);
    return entries_[static_cast<size_t>(it->second)];
  }

  std::vector<Entry>& entries() { return entries_; }
  const std::vector<Entry>& entries() const { return entries_; }

  int64_t step() const { return step_; }

  void zero_grad() {
    for (Entry& e : entries_) std::fill(e.grad.data.begin(), e.grad.data.end(), T(0));
  }

  // Bias-corrected Adam on all trainable entries.
  void adam_step(T lr, T beta1 = T(0.9), T beta2 = T(0.999), T eps = T(1e-8)) {
    ++step_;
    const T bc1 = T(1) - std::pow(beta1, static_cast<T>(step_));
    const T bc2 = T(1) - std::pow(beta2, static_cast<T>(step_));
    for (Entry& e : entries_) {
      if (!e.trainable) continue;
      for (int64_t i = 0; i < e.value.numel(); ++i) {
        const T gi = e.grad.data[i];
        e.m.data[i] = beta1 * e.m.data[i] + (T(1) - beta1) * gi;
        e.v.data[i] = beta2 * e.v.data[i] + (T(1) - beta2) * gi * gi;
        const T mh = e.m.data[i] / bc1;
        const T vh = e.v.data[i] / bc2;
        e.value.data[i] -= lr * mh / (std::sqrt(vh) + eps);
      }
    }
  }

  // Checkpoint: manifest.json + one little-endian f32 blob per tensor.
  // Adam moments are deliberately not persisted. `meta` is an opaque JSON
  // object stored alongside (model kind, net config, ...).
  void save(const std::string& dir, const nlohmann::json& meta = nlohmann::json::object()) const {
    namespace fs = std::filesystem;
    fs::create_directories(fs::path(dir) / "blobs");
    nlohmann::json manifest;
    manifest["format"] = "se3ctrl-checkpoint-v1";
    manifest["dtype"] = "f32";
    manifest["step"] = step_;
    manifest["meta"] = meta;
    manifest["tensors"] = nlohmann::json::array();
    for (const Entry& e : entries_) {
      std::string file = "blobs/" + sanitized(e.name) + ".f32";
      std::vector<float> f32(e.value.data.begin(), e.value.data.end());
      util::write_f32_blob((fs::path(dir) / file).string(), f32);
      manifest["tensors"].push_back({{"name", e.name},
                                     {"shape", e.value.shape},
                                     {"file", file},
                                     {"trainable", e.trainable}});
    }
    util::write_text_file((fs::path(dir) / "manifest.json").string(), manifest.dump(2) + "\n");
  }

  // Fills an already-constructed store; every entry must be present with a
  // matching shape.
  void load(const std::string& dir) {
    namespace fs = std::filesystem;
    nlohmann::json manifest =
        nlohmann::json::parse(util::read_text_file((fs::path(dir) / "manifest.json").string()));
    if (manifest.value("format", "") != "se3ctrl-checkpoint-v1") {
      throw std::runtime_error("checkpoint: unrecognized format in " + dir);
    }
    step_ = manifest.value("step", int64_t{0});
    std::unordered_map<std::string, bool> seen;
    for (const auto& t : manifest["tensors"]) {
      const std::string name = t["name"].get<std::string>();
      auto it = index_.find(name);
      if (it == index_.end()) throw std::runtime_error("checkpoint: unexpected tensor " + name);
      Entry& e = entries_[static_cast<size_t>(it->second)];
      const std::vector<int> shape = t["shape"].get<std::vector<int>>();
      if (shape != e.value.shape) throw std::runtime_error("checkpoint: shape mismatch for " + name);
      std::vector<float> f32 = util::read_f32_blob((fs::path(dir) / t["file"].get<std::string>()).string());
      if (static_cast<int64_t>(f32.size()) != e.value.numel()) {
        throw std::runtime_error("checkpoint: blob size mismatch for " + name);
      }
      for (size_t i = 0; i < f32.size(); ++i) e.value.data[i] = static_cast<T>(f32[i]);
      seen[name] = true;
    }
    for (const Entry& e : entries_) {
      if (!seen.count(e.name)) throw std::runtime_error("checkpoint: missing tensor " + e.name);
    }
  }

  void set_step(int64_t step) { step_ = step; }

  // Reads a checkpoint's metadata (and step) without loading tensors.
  static nlohmann::json read_meta(const std::string& dir) {
    namespace fs = std::filesystem;
    nlohmann::json manifest =
        nlohmann::json::parse(util::read_text_file((fs::path(dir) / "manifest.json").string()));
    if (manifest.value("format", "") != "se3ctrl-checkpoint-v1") {
      throw std::runtime_error("checkpoint: unrecognized format in " + dir);
    }
    nlohmann::json meta = manifest.value("meta", nlohmann::json::object());
    meta["step"] = manifest.value("step", int64_t{0});
    return meta;
  }

  static std::string sanitized(const std::string& name) {
    std::string s = name;
    for (char& c : s)
      if (c == '.' || c == '/') c = '_';
    return s;
  }

 private:
  std::vector<Entry> entries_;
  std::unordered_map<std::string, int> index_;
  int64_t step_ = 0;
};

// Per-forward-pass bridge between a ParamStore and a Graph: binds each
// parameter as a leaf node on first use, and harvests node gradients back
// into the store after backward().
template <typename T>
class Binder {
 public:
  Binder(Graph<T>& g, ParamStore<T>& ps, bool train) : g_(&g), ps_(&ps), train_(train) {}

  int operator()(const std::string& name) {
    auto it = bound_.find(name);
    if (it != bound_.end()) return it->second;
    auto& e = ps_->at(name);
    const bool rg = train_ && e.trainable;
    const int id = g_->add(e.value, rg, {}, "param");
    bound_[name] = id;
    return id;
  }

  void harvest() {
    for (const auto& [name, id] : bound_) {
      if (!g_->needs_grad(id) || !g_->has_grad(id)) continue;
      auto& e = ps_->at(name);
      const Tensor<T>& ng = g_->grad(id);
      for (int64_t i = 0; i < ng.numel(); ++i) e.grad.data[i] += ng.data[i];
    }
  }

 private:
  Graph<T>* g_;
  ParamStore<T>* ps_;
  bool train_;
  std::map<std::string, int> bound_;
};

}  // namespace se3ctrl::ad

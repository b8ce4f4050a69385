#include "harness/trainer.hpp"

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <memory>
#include <stdexcept>

#include "harness/data.hpp"
#include "losses/losses.hpp"
#include "nets/model.hpp"
#include "util/rng.hpp"

namespace se3ctrl::harness {

namespace fs = std::filesystem;

ModelKind model_kind_from(const std::string& name) {
  if (name == "se3posenet") return ModelKind::se3posenet;
  if (name == "flownet") return ModelKind::flownet;
  throw std::invalid_argument("unknown model kind: " + name);
}

namespace {

// Per-channel running statistics for one normalization site. 4-D activations
// reduce over batch and space, 2-D over the batch.
struct SiteStats {
  std::vector<double> sum, sumsq;
  int64_t count = 0;

  void accumulate(const ad::Tensor<float>& v) {
    const int c = v.ndim() == 4 ? v.dim(1) : v.dim(v.ndim() - 1);
    if (sum.empty()) {
      sum.assign(static_cast<size_t>(c), 0.0);
      sumsq.assign(static_cast<size_t>(c), 0.0);
    }
    if (static_cast<int>(sum.size()) != c)
      throw std::runtime_error("calibration: channel count changed mid-run");
    if (v.ndim() == 4) {
      const int b = v.dim(0);
      const int64_t hw = static_cast<int64_t>(v.dim(2)) * v.dim(3);
      for (int i = 0; i < b; ++i)
        for (int ch = 0; ch < c; ++ch) {
          const float* p = v.ptr() + (static_cast<int64_t>(i) * c + ch) * hw;
          for (int64_t s = 0; s < hw; ++s) {
            sum[static_cast<size_t>(ch)] += p[s];
            sumsq[static_cast<size_t>(ch)] += static_cast<double>(p[s]) * p[s];
          }
        }
      count += static_cast<int64_t>(b) * hw;
    } else if (v.ndim() == 2) {
      const int b = v.dim(0);
      for (int i = 0; i < b; ++i)
        for (int ch = 0; ch < c; ++ch) {
          const double x = v.data[static_cast<size_t>(i) * c + ch];
          sum[static_cast<size_t>(ch)] += x;
          sumsq[static_cast<size_t>(ch)] += x * x;
        }
      count += b;
    } else {
      throw std::runtime_error("calibration: unexpected activation rank");
    }
  }

  void finish(std::vector<float>& mu, std::vector<float>& sigma) const {
    if (count == 0) throw std::runtime_error("calibration: site never observed");
    mu.resize(sum.size());
    sigma.resize(sum.size());
    std::vector<double> var(sum.size());
    double var_mean = 0.0;
    for (size_t i = 0; i < sum.size(); ++i) {
      const double m = sum[i] / static_cast<double>(count);
      var[i] = std::max(0.0, sumsq[i] / static_cast<double>(count) - m * m);
      var_mean += var[i];
      mu[i] = static_cast<float>(m);
    }
    var_mean /= static_cast<double>(sum.size());
    // Relative floor: near-dead channels would otherwise divide later
    // distribution shift by a vanishing sigma and blow up downstream.
    const double floor = 0.01 * var_mean;
    for (size_t i = 0; i < sum.size(); ++i)
      sigma[i] = static_cast<float>(std::sqrt(std::max(var[i], floor) + 1e-5));
  }
};

// Builds the full loss graph for one batch; backpropagates and harvests
// parameter gradients when training.
struct Runner {
  const RunConfig& cfg;
  ModelKind kind;
  nets::Se3PoseNet<float>* pose_net = nullptr;
  nets::FlowNet<float>* flow_net = nullptr;

  ad::ParamStore<float>& params() {
    return kind == ModelKind::se3posenet ? pose_net->params() : flow_net->params();
  }

  double run(const Batch& batch, bool train, double progress, util::Rng* noise_rng,
             const nets::Probe<float>* probe) {
    ad::Graph<float> g;
    ad::Binder<float> bind(g, params(), train);
    nets::Ctx<float> ctx{g, bind, probe};
    const int x_t = g.constant(batch.x_t, "x_t");
    const int u = g.constant(batch.u, "u");
    const int q_t = cfg.net.use_joint_angles ? g.constant(batch.q, "q_t") : -1;
    int total;
    if (kind == ModelKind::se3posenet) {
      const int x_t1 = g.constant(batch.assoc, "x_t1");
      const int q_t1 = cfg.net.use_joint_angles ? g.constant(batch.q_next, "q_t1") : -1;
      auto out = pose_net->training_graph(ctx, x_t, x_t1, u, q_t, q_t1, progress, noise_rng);
      const int lx = losses::loss_3d(g, out.xhat, batch.assoc, batch.x_t, cfg.loss);
      const int lp = losses::loss_consistency(g, out.pose_t, out.delta, out.pose_t1);
      total = losses::total_loss(g, lx, lp, cfg.loss);
    } else {
      const int flow = flow_net->forward(ctx, x_t, u, q_t);
      const int xhat = ad::add(g, x_t, flow);
      total = losses::loss_3d(g, xhat, batch.assoc, batch.x_t, cfg.loss);
    }
    const double loss = static_cast<double>(g.val(total).data[0]);
    if (train) {
      g.backward(total);
      bind.harvest();
    }
    return loss;
  }

  std::vector<std::string> norm_sites() const {
    return kind == ModelKind::se3posenet ? pose_net->norm_sites() : flow_net->norm_sites();
  }
  void set_norm_stats(const std::string& site, const std::vector<float>& mu,
                      const std::vector<float>& sigma) {
    if (kind == ModelKind::se3posenet)
      pose_net->set_norm_stats(site, mu, sigma);
    else
      flow_net->set_norm_stats(site, mu, sigma);
  }
};

double validate(Runner& runner, const sim::DatasetManifest& manifest,
                const std::vector<sim::PairRecord>& val_pairs, int batch_size) {
  double acc = 0.0;
  int64_t n = 0;
  const int total = static_cast<int>(val_pairs.size());
  for (int start = 0; start < total; start += batch_size) {
    const int b = std::min(batch_size, total - start);
    std::vector<int> pick(static_cast<size_t>(b));
    for (int i = 0; i < b; ++i) pick[static_cast<size_t>(i)] = start + i;
    const Batch batch = make_batch(manifest, val_pairs, pick);
    acc += runner.run(batch, /*train=*/false, /*progress=*/1.0, nullptr, nullptr) * b;
    n += b;
  }
  return acc / static_cast<double>(n);
}

void save_checkpoint(Runner& runner, const std::string& dir, const RunConfig& cfg, int iteration,
                     double val_loss) {
  nlohmann::json meta;
  meta["model"] = model_kind_name(runner.kind);
  meta["net"] = net_config_to_json(cfg.net);
  meta["seed"] = cfg.seed;
  meta["iteration"] = iteration;
  meta["val_loss"] = val_loss;
  runner.params().save(dir, meta);
}

void put_curve_row(std::ofstream& os, int iteration, double value) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", value);
  os << iteration << "," << buf << "\n";
}

}  // namespace

TrainResult train_model(const RunConfig& cfg, ModelKind kind, const std::string& out_dir) {
  cfg.validate();
  const sim::DatasetManifest manifest = sim::load_manifest(cfg.dataset_dir);
  if (manifest.h != cfg.net.h || manifest.w != cfg.net.w)
    throw std::invalid_argument("train: dataset resolution does not match the net config");
  if (manifest.n_ctrl != cfg.net.n_ctrl)
    throw std::invalid_argument("train: dataset control width does not match the net config");
  if (cfg.net.use_joint_angles && manifest.n_joints != cfg.net.n_joints)
    throw std::invalid_argument("train: dataset joint count does not match the net config");

  const std::vector<int> train_idx = manifest.pair_indices("train");
  std::vector<int> val_idx = manifest.pair_indices("val");
  if (train_idx.empty()) throw std::runtime_error("train: dataset has no training pairs");
  if (val_idx.empty()) throw std::runtime_error("train: dataset has no validation pairs");
  if (static_cast<int>(val_idx.size()) > cfg.val_batch_pairs)
    val_idx.resize(static_cast<size_t>(cfg.val_batch_pairs));

  const std::vector<sim::PairRecord> train_pairs =
      load_records(cfg.dataset_dir, manifest, train_idx, /*keep_masks=*/false);
  const std::vector<sim::PairRecord> val_pairs =
      load_records(cfg.dataset_dir, manifest, val_idx, /*keep_masks=*/false);

  util::Rng master(cfg.seed);
  util::Rng rng_init = master.fork(1);
  util::Rng rng_data = master.fork(2);
  util::Rng rng_noise = master.fork(3);
  util::Rng rng_calib = master.fork(4);

  std::unique_ptr<nets::Se3PoseNet<float>> pose_net;
  std::unique_ptr<nets::FlowNet<float>> flow_net;
  Runner runner{cfg, kind, nullptr, nullptr};
  if (kind == ModelKind::se3posenet) {
    pose_net = std::make_unique<nets::Se3PoseNet<float>>(cfg.net);
    pose_net->init_params(rng_init);
    runner.pose_net = pose_net.get();
  } else {
    flow_net = std::make_unique<nets::FlowNet<float>>(cfg.net);
    flow_net->init_params(rng_init);
    runner.flow_net = flow_net.get();
  }

  // Fixed calibration sample, shared by every stage.
  const int n_calib = std::min<int>(cfg.calib_pairs, static_cast<int>(train_pairs.size()));
  std::vector<int> calib_pick(static_cast<size_t>(n_calib));
  for (int& v : calib_pick) v = rng_calib.uniform_int(static_cast<int>(train_pairs.size()));
  std::vector<Batch> calib_batches;
  for (int start = 0; start < n_calib; start += cfg.batch_size) {
    const int b = std::min(cfg.batch_size, n_calib - start);
    std::vector<int> pick(calib_pick.begin() + start, calib_pick.begin() + start + b);
    calib_batches.push_back(make_batch(manifest, train_pairs, pick));
  }

  // Staged normalization calibration: freeze each site's input statistics in
  // topological order, with every earlier site already calibrated.
  for (const std::string& site : runner.norm_sites()) {
    SiteStats stats;
    nets::Probe<float> probe = [&](const std::string& name, const ad::Tensor<float>& value) {
      if (name == site) stats.accumulate(value);
    };
    for (const Batch& batch : calib_batches)
      runner.run(batch, /*train=*/false, /*progress=*/0.0, nullptr, &probe);
    std::vector<float> mu, sigma;
    stats.finish(mu, sigma);
    runner.set_norm_stats(site, mu, sigma);
  }

  fs::create_directories(out_dir);
  TrainResult res;
  res.init_dir = (fs::path(out_dir) / "init").string();
  res.best_dir = (fs::path(out_dir) / "best").string();
  res.last_dir = (fs::path(out_dir) / "last").string();

  std::ofstream train_csv(fs::path(out_dir) / "loss_curve.csv");
  std::ofstream val_csv(fs::path(out_dir) / "val_curve.csv");
  if (!train_csv || !val_csv) throw std::runtime_error("train: cannot write curves in " + out_dir);
  train_csv << "iteration,train_loss\n";
  val_csv << "iteration,val_loss\n";

  const double v0 = validate(runner, manifest, val_pairs, cfg.batch_size);
  save_checkpoint(runner, res.init_dir, cfg, 0, v0);
  res.val_curve.push_back({0, v0});
  put_curve_row(val_csv, 0, v0);
  res.best_val = v0;
  res.best_iter = 0;
  save_checkpoint(runner, res.best_dir, cfg, 0, v0);

  for (int i = 0; i < cfg.train_iters; ++i) {
    std::vector<int> pick(static_cast<size_t>(cfg.batch_size));
    for (int& v : pick) v = rng_data.uniform_int(static_cast<int>(train_pairs.size()));
    const Batch batch = make_batch(manifest, train_pairs, pick);
    const double progress = static_cast<double>(i) / cfg.train_iters;
    const double loss = runner.run(batch, /*train=*/true, progress, &rng_noise, nullptr);
    runner.params().adam_step(static_cast<float>(cfg.lr));
    runner.params().zero_grad();
    res.train_curve.push_back({i, loss});
    put_curve_row(train_csv, i, loss);

    const int done = i + 1;
    if (done % cfg.validate_every == 0 || done == cfg.train_iters) {
      const double v = validate(runner, manifest, val_pairs, cfg.batch_size);
      res.val_curve.push_back({done, v});
      put_curve_row(val_csv, done, v);
      if (v < res.best_val) {
        res.best_val = v;
        res.best_iter = done;
        save_checkpoint(runner, res.best_dir, cfg, done, v);
      }
    }
    if (cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0) {
      char buf[32];
      std::snprintf(buf, sizeof buf, "iter_%06d", done);
      save_checkpoint(runner, (fs::path(out_dir) / buf).string(), cfg, done,
                      res.val_curve.back().value);
    }
  }
  save_checkpoint(runner, res.last_dir, cfg, cfg.train_iters,
                  res.val_curve.empty() ? 0.0 : res.val_curve.back().value);
  return res;
}

}  // namespace se3ctrl::harness

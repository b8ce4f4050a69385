#pragma once

#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "ad/graph.hpp"
#include "ad/ops.hpp"
#include "ad/param_store.hpp"
#include "nets/config.hpp"
#include "util/rng.hpp"

namespace se3ctrl::nets {

template <typename T>
using Probe = std::function<void(const std::string& site, const ad::Tensor<T>& value)>;

// Everything a forward pass needs: the tape, the parameter binder, and an
// optional probe that observes normalization-site inputs (calibration).
template <typename T>
struct Ctx {
  ad::Graph<T>& g;
  ad::Binder<T>& bind;
  const Probe<T>* probe = nullptr;
};

namespace detail {

// Deferred initialization plan: parameters are registered with zeros and
// filled later in registration order from a seeded RNG, which keeps init
// deterministic and independent of fill-time code paths.
template <typename T>
class InitPlan {
 public:
  void normal(ad::ParamStore<T>& ps, const std::string& name, std::vector<int> shape,
              double stddev) {
    ps.add(name, std::move(shape), true);
    specs_.push_back({name, stddev, true, true});
  }
  void constant(ad::ParamStore<T>& ps, const std::string& name, std::vector<int> shape,
                double value, bool trainable) {
    ps.add(name, std::move(shape), trainable);
    specs_.push_back({name, value, false, trainable});
  }
  void apply(ad::ParamStore<T>& ps, util::Rng& rng) const {
    for (const Spec& s : specs_) {
      auto& e = ps.at(s.name);
      if (s.is_normal) {
        for (T& v : e.value.data) v = static_cast<T>(rng.normal() * s.param);
      } else {
        std::fill(e.value.data.begin(), e.value.data.end(), static_cast<T>(s.param));
      }
    }
  }

 private:
  struct Spec {
    std::string name;
    double param;
    bool is_normal;
    bool trainable;
  };
  std::vector<Spec> specs_;
};

}  // namespace detail

// Hourglass conv/deconv trunk shared by the pose-mask encoder and the flow
// baseline. Owns parameter registration and the forward wiring; the models
// own the heads.
template <typename T>
class Trunk {
 public:
  Trunk() = default;
  Trunk(std::string prefix, TrunkPlan plan) : prefix_(std::move(prefix)), plan_(std::move(plan)) {}

  const TrunkPlan& plan() const { return plan_; }

  void register_params(ad::ParamStore<T>& ps, detail::InitPlan<T>& init) const {
    for (size_t i = 0; i < plan_.enc.size(); ++i) {
      const auto& s = plan_.enc[i];
      const std::string n = prefix_ + ".enc" + std::to_string(i);
      init.normal(ps, n + ".conv.w", {s.cout, s.cin, 3, 3}, std::sqrt(2.0 / (s.cin * 9)));
      init.constant(ps, n + ".conv.b", {s.cout}, 0.0, true);
      init.constant(ps, n + ".norm.mu", {s.cout}, 0.0, false);
      init.constant(ps, n + ".norm.sigma", {s.cout}, 1.0, false);
      init.constant(ps, n + ".prelu.a", {s.cout}, 0.25, true);
    }
    for (size_t j = 0; j < plan_.dec.size(); ++j) {
      const auto& s = plan_.dec[j];
      const std::string n = prefix_ + ".dec" + std::to_string(j);
      // Output layer starts small so the raw maps (flow / mask logits) begin
      // near zero, mirroring the delta head.
      const double sc = j + 1 == plan_.dec.size() ? 0.01 : 1.0;
      if (s.resample) {
        init.normal(ps, n + ".conv.w", {s.cin, s.cout, 4, 4}, sc * std::sqrt(2.0 / (s.cin * 4)));
      } else {
        init.normal(ps, n + ".conv.w", {s.cout, s.cin, 3, 3}, sc * std::sqrt(2.0 / (s.cin * 9)));
      }
      init.constant(ps, n + ".conv.b", {s.cout}, 0.0, true);
      if (j + 1 < plan_.dec.size()) {
        init.constant(ps, n + ".norm.mu", {s.cout}, 0.0, false);
        init.constant(ps, n + ".norm.sigma", {s.cout}, 1.0, false);
        init.constant(ps, n + ".prelu.a", {s.cout}, 0.25, true);
      }
    }
  }

  struct EncOut {
    std::vector<int> stages;  // post-pool output of every encoder stage
    int bottleneck = -1;
  };

  EncOut encode(Ctx<T> ctx, const ad::ParamStore<T>& ps, int x) const {
    EncOut out;
    int cur = x;
    for (size_t i = 0; i < plan_.enc.size(); ++i) {
      const auto& s = plan_.enc[i];
      const std::string n = prefix_ + ".enc" + std::to_string(i);
      cur = ad::conv2d(ctx.g, cur, ctx.bind(n + ".conv.w"), ctx.bind(n + ".conv.b"), 1, 1);
      cur = norm_site(ctx, ps, n + ".norm", cur);
      cur = ad::prelu(ctx.g, cur, ctx.bind(n + ".prelu.a"));
      if (s.resample) cur = ad::maxpool2x2(ctx.g, cur);
      out.stages.push_back(cur);
    }
    out.bottleneck = cur;
    return out;
  }

  // Decodes the (possibly transformed) bottleneck back to full resolution,
  // adding skips from the encoder stages. Returns raw channel maps (the
  // caller applies softmax or leaves them as flow).
  int decode(Ctx<T> ctx, const ad::ParamStore<T>& ps, int bottleneck,
             const std::vector<int>& enc_stages) const {
    const int n = static_cast<int>(plan_.dec.size());
    int cur = bottleneck;
    for (int j = 0; j < n; ++j) {
      const auto& s = plan_.dec[static_cast<size_t>(j)];
      const std::string nm = prefix_ + ".dec" + std::to_string(j);
      if (s.resample) {
        cur = ad::deconv2d(ctx.g, cur, ctx.bind(nm + ".conv.w"), ctx.bind(nm + ".conv.b"), 2, 1);
      } else {
        cur = ad::conv2d(ctx.g, cur, ctx.bind(nm + ".conv.w"), ctx.bind(nm + ".conv.b"), 1, 1);
      }
      if (j + 1 < n) {
        cur = norm_site(ctx, ps, nm + ".norm", cur);
        cur = ad::prelu(ctx.g, cur, ctx.bind(nm + ".prelu.a"));
        cur = ad::add(ctx.g, cur, enc_stages[static_cast<size_t>(n - 2 - j)]);
      }
    }
    return cur;
  }

  std::vector<std::string> norm_sites() const {
    std::vector<std::string> sites;
    for (size_t i = 0; i < plan_.enc.size(); ++i)
      sites.push_back(prefix_ + ".enc" + std::to_string(i) + ".norm");
    for (size_t j = 0; j + 1 < plan_.dec.size(); ++j)
      sites.push_back(prefix_ + ".dec" + std::to_string(j) + ".norm");
    return sites;
  }

  static int norm_site(Ctx<T> ctx, const ad::ParamStore<T>& ps, const std::string& site,
                       int x) {
    if (ctx.probe && *ctx.probe) (*ctx.probe)(site, ctx.g.val(x));
    std::shared_ptr<const ad::Tensor<T>> mu =
        std::make_shared<ad::Tensor<T>>(ps.at(site + ".mu").value);
    std::shared_ptr<const ad::Tensor<T>> sigma =
        std::make_shared<ad::Tensor<T>>(ps.at(site + ".sigma").value);
    return ad::fixed_norm(ctx.g, x, std::move(mu), std::move(sigma));
  }

 private:
  std::string prefix_;
  TrunkPlan plan_;
};

// Helper shared by both models: fc -> fixed_norm -> prelu.
template <typename T>
int fc_block(Ctx<T> ctx, const ad::ParamStore<T>& ps, const std::string& name, int x) {
  int cur = ad::fc(ctx.g, x, ctx.bind(name + ".w"), ctx.bind(name + ".b"));
  cur = Trunk<T>::norm_site(ctx, ps, name + ".norm", cur);
  return ad::prelu(ctx.g, cur, ctx.bind(name + ".prelu.a"));
}

template <typename T>
void register_fc_block(ad::ParamStore<T>& ps, detail::InitPlan<T>& init, const std::string& name,
                       int in, int out, double std_scale = 1.0) {
  init.normal(ps, name + ".w", {out, in}, std_scale * std::sqrt(2.0 / in));
  init.constant(ps, name + ".b", {out}, 0.0, true);
  init.constant(ps, name + ".norm.mu", {out}, 0.0, false);
  init.constant(ps, name + ".norm.sigma", {out}, 1.0, false);
  init.constant(ps, name + ".prelu.a", {out}, 0.25, true);
}

// The structured dynamics model: encoder producing (poses, masks), the pose
// transition net, and the training-graph assembly around the transform layer.
template <typename T>
class Se3PoseNet {
 public:
  explicit Se3PoseNet(NetConfig cfg) : cfg_(std::move(cfg)) {
    cfg_.validate();
    trunk_ = Trunk<T>("trunk", TrunkPlan::make(cfg_, 3, cfg_.k));
    const int latent = trunk_.plan().latent();
    const int hid = cfg_.fc_hidden;
    const int kk = cfg_.k * 6;
    const int qdim = cfg_.use_joint_angles ? cfg_.n_joints : 0;
    trunk_.register_params(ps_, init_);
    register_fc_block(ps_, init_, "pose.fc0", latent + qdim, hid);
    register_fc_block(ps_, init_, "pose.fc1", hid, hid);
    init_.normal(ps_, "pose.fc2.w", {kk, hid}, std::sqrt(2.0 / hid));
    init_.constant(ps_, "pose.fc2.b", {kk}, 0.0, true);
    register_fc_block(ps_, init_, "trans.p_fc0", kk + qdim, hid);
    register_fc_block(ps_, init_, "trans.p_fc1", hid, hid);
    register_fc_block(ps_, init_, "trans.u_fc0", cfg_.n_ctrl, hid);
    register_fc_block(ps_, init_, "trans.u_fc1", hid, hid);
    register_fc_block(ps_, init_, "trans.m_fc0", 2 * hid, hid);
    // Final delta layer starts near zero so the initial dynamics are close
    // to identity (transform layer then reproduces the input cloud).
    init_.normal(ps_, "trans.m_fc1.w", {kk, hid}, 0.01 * std::sqrt(2.0 / hid));
    init_.constant(ps_, "trans.m_fc1.b", {kk}, 0.0, true);
  }

  void init_params(util::Rng& rng) { init_.apply(ps_, rng); }

  ad::ParamStore<T>& params() { return ps_; }
  const ad::ParamStore<T>& params() const { return ps_; }
  const NetConfig& config() const { return cfg_; }
  const TrunkPlan& plan() const { return trunk_.plan(); }

  struct EncOut {
    int pose = -1;   // [B,K,6], rows (position, axis-angle)
    int masks = -1;  // [B,K,H,W] softmax output, -1 when not requested
  };

  // q is the optional joint-angle node ([B,n_joints]); -1 when unused.
  EncOut encoder_forward(Ctx<T> ctx, int x, int q, bool need_masks) const {
    check_cloud(ctx.g, x);
    check_q(ctx.g, q, ctx.g.val(x).dim(0));
    auto enc = trunk_.encode(ctx, ps_, x);
    const int b = ctx.g.val(x).dim(0);
    EncOut out;
    int flat = ad::reshape(ctx.g, enc.bottleneck, {b, trunk_.plan().latent()});
    if (q >= 0) flat = ad::concat2d(ctx.g, flat, q);
    int cur = fc_block(ctx, ps_, "pose.fc0", flat);
    cur = fc_block(ctx, ps_, "pose.fc1", cur);
    cur = ad::fc(ctx.g, cur, ctx.bind("pose.fc2.w"), ctx.bind("pose.fc2.b"));
    out.pose = ad::reshape(ctx.g, cur, {b, cfg_.k, 6});
    if (need_masks) {
      int logits = trunk_.decode(ctx, ps_, enc.bottleneck, enc.stages);
      out.masks = ad::channel_softmax(ctx.g, logits);
    }
    return out;
  }

  int transition_forward(Ctx<T> ctx, int pose, int u, int q) const {
    const auto& vp = ctx.g.val(pose);
    ad::detail::check(vp.ndim() == 3 && vp.dim(1) == cfg_.k && vp.dim(2) == 6,
                      "transition_forward: pose must be [B,K,6]");
    const int b = vp.dim(0);
    const auto& vu = ctx.g.val(u);
    ad::detail::check(vu.ndim() == 2 && vu.dim(0) == b && vu.dim(1) == cfg_.n_ctrl,
                      "transition_forward: u must be [B,n_ctrl]");
    check_q(ctx.g, q, b);
    int pin = ad::reshape(ctx.g, pose, {b, cfg_.k * 6});
    if (q >= 0) pin = ad::concat2d(ctx.g, pin, q);
    int pa = fc_block(ctx, ps_, "trans.p_fc0", pin);
    pa = fc_block(ctx, ps_, "trans.p_fc1", pa);
    int ua = fc_block(ctx, ps_, "trans.u_fc0", u);
    ua = fc_block(ctx, ps_, "trans.u_fc1", ua);
    int m = ad::concat2d(ctx.g, pa, ua);
    m = fc_block(ctx, ps_, "trans.m_fc0", m);
    m = ad::fc(ctx.g, m, ctx.bind("trans.m_fc1.w"), ctx.bind("trans.m_fc1.b"));
    return ad::reshape(ctx.g, m, {b, cfg_.k, 6});
  }

  // Annealed sharpening m' = normalize(max(m + n, 0)^gamma). progress=0 is
  // the identity by construction (returns the input node).
  int sharpen_masks(Ctx<T> ctx, int masks, double progress, util::Rng* rng) const {
    if (progress <= 0.0) return masks;
    const double gam = cfg_.gamma_at(progress);
    const double sig = cfg_.sigma_at(progress);
    int cur = masks;
    if (sig > 0.0 && rng != nullptr) {
      auto noise = std::make_shared<ad::Tensor<T>>(ctx.g.val(masks).shape);
      for (T& v : noise->data) v = static_cast<T>(rng->normal(0.0, sig));
      cur = ad::add_const(ctx.g, cur, std::shared_ptr<const ad::Tensor<T>>(std::move(noise)));
    }
    cur = ad::clamp_min0(ctx.g, cur);
    if (gam != 1.0) cur = ad::pow_const(ctx.g, cur, static_cast<T>(gam));
    return ad::channel_normalize(ctx.g, cur, static_cast<T>(1e-12));
  }

  struct TrainOut {
    int xhat = -1;        // predicted next cloud [B,3,H,W]
    int pose_t = -1;      // [B,K,6]
    int pose_t1 = -1;     // [B,K,6]
    int delta = -1;       // [B,K,6]
    int masks = -1;       // pre-sharpen softmax masks
    int masks_sharp = -1;
  };

  // Assembles the full prediction graph for one batch: shared-weight encoder
  // on both frames (next-frame masks are never built), transition, sharpen,
  // transform.
  TrainOut training_graph(Ctx<T> ctx, int x_t, int x_t1, int u, int q_t, int q_t1,
                          double progress, util::Rng* rng) const {
    TrainOut out;
    auto enc_t = encoder_forward(ctx, x_t, q_t, /*need_masks=*/true);
    auto enc_t1 = encoder_forward(ctx, x_t1, q_t1, /*need_masks=*/false);
    out.pose_t = enc_t.pose;
    out.masks = enc_t.masks;
    out.pose_t1 = enc_t1.pose;
    out.delta = transition_forward(ctx, enc_t.pose, u, q_t);
    out.masks_sharp = sharpen_masks(ctx, enc_t.masks, progress, rng);
    out.xhat = ad::se3_transform(ctx.g, x_t, out.masks_sharp, out.delta);
    return out;
  }

  // Normalization sites in forward (topological) order, for staged calibration.
  std::vector<std::string> norm_sites() const {
    std::vector<std::string> sites = trunk_.norm_sites();
    // trunk_ lists enc then dec; heads come after the encoder sites.
    std::vector<std::string> ordered;
    for (const auto& s : sites)
      if (s.find(".enc") != std::string::npos) ordered.push_back(s);
    ordered.push_back("pose.fc0.norm");
    ordered.push_back("pose.fc1.norm");
    for (const auto& s : sites)
      if (s.find(".dec") != std::string::npos) ordered.push_back(s);
    for (const char* n : {"trans.p_fc0", "trans.p_fc1", "trans.u_fc0", "trans.u_fc1",
                          "trans.m_fc0"})
      ordered.push_back(std::string(n) + ".norm");
    return ordered;
  }

  void set_norm_stats(const std::string& site, const std::vector<T>& mu,
                      const std::vector<T>& sigma) {
    auto& emu = ps_.at(site + ".mu");
    auto& esg = ps_.at(site + ".sigma");
    if (static_cast<int64_t>(mu.size()) != emu.value.numel() || mu.size() != sigma.size())
      throw std::invalid_argument("set_norm_stats: size mismatch for " + site);
    for (size_t i = 0; i < mu.size(); ++i) {
      if (!(sigma[i] > T(0))) throw std::invalid_argument("set_norm_stats: sigma <= 0");
      emu.value.data[i] = mu[i];
      esg.value.data[i] = sigma[i];
    }
  }

 private:
  void check_cloud(ad::Graph<T>& g, int x) const {
    const auto& v = g.val(x);
    ad::detail::check(v.ndim() == 4 && v.dim(1) == 3 && v.dim(2) == cfg_.h && v.dim(3) == cfg_.w,
                      "encoder_forward: cloud shape mismatch");
  }
  void check_q(ad::Graph<T>& g, int q, int b) const {
    if (cfg_.use_joint_angles) {
      ad::detail::check(q >= 0, "joint angles required by config");
      const auto& v = g.val(q);
      ad::detail::check(v.ndim() == 2 && v.dim(0) == b && v.dim(1) == cfg_.n_joints,
                        "joint angle shape mismatch");
    } else {
      ad::detail::check(q < 0, "joint angles passed but config disables them");
    }
  }

  NetConfig cfg_;
  Trunk<T> trunk_;
  ad::ParamStore<T> ps_;
  detail::InitPlan<T> init_;
};

// Baseline: same trunk, control injected at the bottleneck, dense 3-channel
// flow output (predicted next cloud is x + flow).
template <typename T>
class FlowNet {
 public:
  explicit FlowNet(NetConfig cfg) : cfg_(std::move(cfg)) {
    cfg_.validate();
    trunk_ = Trunk<T>("trunk", TrunkPlan::make(cfg_, 3, 3));
    trunk_.register_params(ps_, init_);
    const int latent = trunk_.plan().latent();
    const int qdim = cfg_.use_joint_angles ? cfg_.n_joints : 0;
    register_fc_block(ps_, init_, "bott.fc0", latent + cfg_.n_ctrl + qdim, latent);
  }

  void init_params(util::Rng& rng) { init_.apply(ps_, rng); }
  ad::ParamStore<T>& params() { return ps_; }
  const ad::ParamStore<T>& params() const { return ps_; }
  const NetConfig& config() const { return cfg_; }

  int forward(Ctx<T> ctx, int x, int u, int q) const {
    const auto& vx = ctx.g.val(x);
    ad::detail::check(vx.ndim() == 4 && vx.dim(1) == 3 && vx.dim(2) == cfg_.h &&
                          vx.dim(3) == cfg_.w,
                      "flownet: cloud shape mismatch");
    const int b = vx.dim(0);
    const auto& vu = ctx.g.val(u);
    ad::detail::check(vu.ndim() == 2 && vu.dim(0) == b && vu.dim(1) == cfg_.n_ctrl,
                      "flownet: u must be [B,n_ctrl]");
    if (cfg_.use_joint_angles) {
      ad::detail::check(q >= 0, "flownet: joint angles required by config");
    } else {
      ad::detail::check(q < 0, "flownet: joint angles passed but config disables them");
    }
    auto enc = trunk_.encode(ctx, ps_, x);
    const auto& plan = trunk_.plan();
    int flat = ad::reshape(ctx.g, enc.bottleneck, {b, plan.latent()});
    flat = ad::concat2d(ctx.g, flat, u);
    if (q >= 0) flat = ad::concat2d(ctx.g, flat, q);
    int cur = fc_block(ctx, ps_, "bott.fc0", flat);
    cur = ad::reshape(ctx.g, cur, {b, plan.latent_ch, plan.latent_h, plan.latent_w});
    return trunk_.decode(ctx, ps_, cur, enc.stages);
  }

  std::vector<std::string> norm_sites() const {
    std::vector<std::string> sites;
    for (const auto& s : trunk_.norm_sites())
      if (s.find(".enc") != std::string::npos) sites.push_back(s);
    sites.push_back("bott.fc0.norm");
    for (const auto& s : trunk_.norm_sites())
      if (s.find(".dec") != std::string::npos) sites.push_back(s);
    return sites;
  }

  void set_norm_stats(const std::string& site, const std::vector<T>& mu,
                      const std::vector<T>& sigma) {
    auto& emu = ps_.at(site + ".mu");
    auto& esg = ps_.at(site + ".sigma");
    if (static_cast<int64_t>(mu.size()) != emu.value.numel() || mu.size() != sigma.size())
      throw std::invalid_argument("set_norm_stats: size mismatch for " + site);
    for (size_t i = 0; i < mu.size(); ++i) {
      if (!(sigma[i] > T(0))) throw std::invalid_argument("set_norm_stats: sigma <= 0");
      emu.value.data[i] = mu[i];
      esg.value.data[i] = sigma[i];
    }
  }

 private:
  NetConfig cfg_;
  Trunk<T> trunk_;
  ad::ParamStore<T> ps_;
  detail::InitPlan<T> init_;
};

}  // namespace se3ctrl::nets

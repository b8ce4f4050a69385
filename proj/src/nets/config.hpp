#pragma once

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

namespace se3ctrl::nets {

struct NetConfig {
  int k = 3;        // part count (moving parts + background)
  int h = 32, w = 32;
  int n_ctrl = 2;
  int n_joints = 2;  // only consumed when use_joint_angles
  std::vector<int> conv_channels = {8, 16, 16, 32, 32};
  int fc_hidden = 64;
  bool use_joint_angles = false;
  // Sharpening schedule: gamma ramps 1 -> gamma_max linearly over training,
  // noise sigma ramps 0 -> noise_max -> 0 as sin(pi * progress).
  double sharpen_gamma_max = 3.0;
  double sharpen_noise_max = 0.1;

  double gamma_at(double progress) const {
    return 1.0 + (sharpen_gamma_max - 1.0) * progress;
  }
  double sigma_at(double progress) const {
    return sharpen_noise_max * std::sin(M_PI * progress);
  }

  void validate() const {
    auto pow2 = [](int v) { return v >= 8 && (v & (v - 1)) == 0; };
    if (k < 2) throw std::invalid_argument("NetConfig: k must be >= 2");
    if (!pow2(h) || !pow2(w))
      throw std::invalid_argument("NetConfig: h and w must be powers of two >= 8");
    if (n_ctrl < 1) throw std::invalid_argument("NetConfig: n_ctrl must be >= 1");
    if (conv_channels.empty()) throw std::invalid_argument("NetConfig: conv_channels empty");
    for (int c : conv_channels)
      if (c < 1) throw std::invalid_argument("NetConfig: conv channel < 1");
    if (fc_hidden < 1) throw std::invalid_argument("NetConfig: fc_hidden < 1");
    if (use_joint_angles && n_joints < 1)
      throw std::invalid_argument("NetConfig: n_joints < 1 with use_joint_angles");
    if (sharpen_gamma_max < 1.0)
      throw std::invalid_argument("NetConfig: sharpen_gamma_max must be >= 1");
    if (sharpen_noise_max < 0.0)
      throw std::invalid_argument("NetConfig: sharpen_noise_max must be >= 0");
  }
};

// Concrete layer geometry for the hourglass trunk, derived from NetConfig.
// Encoder stage: 3x3/s1/p1 conv -> norm -> prelu -> 2x2 maxpool while the
// spatial size allows it. Decoder stage j mirrors encoder stage (n-1-j): a
// 4x4/s2/p1 deconv where the encoder pooled, else a 3x3/s1/p1 conv, with
// skip-adds from the matching encoder stage (all but the final stage).
struct TrunkPlan {
  struct Stage {
    int cin = 0, cout = 0;
    int h_in = 0, w_in = 0, h_out = 0, w_out = 0;
    bool resample = false;  // encoder: pool after conv; decoder: deconv upsample
  };
  std::vector<Stage> enc, dec;
  int latent_ch = 0, latent_h = 0, latent_w = 0;
  int latent() const { return latent_ch * latent_h * latent_w; }

  static TrunkPlan make(const NetConfig& cfg, int in_channels, int out_channels) {
    TrunkPlan p;
    const int n = static_cast<int>(cfg.conv_channels.size());
    int h = cfg.h, w = cfg.w, cin = in_channels;
    for (int i = 0; i < n; ++i) {
      Stage s;
      s.cin = cin;
      s.cout = cfg.conv_channels[static_cast<size_t>(i)];
      s.h_in = h;
      s.w_in = w;
      s.resample = (h >= 2 && w >= 2);
      s.h_out = s.resample ? h / 2 : h;
      s.w_out = s.resample ? w / 2 : w;
      p.enc.push_back(s);
      h = s.h_out;
      w = s.w_out;
      cin = s.cout;
    }
    p.latent_ch = cin;
    p.latent_h = h;
    p.latent_w = w;
    for (int j = 0; j < n; ++j) {
      const Stage& mirror = p.enc[static_cast<size_t>(n - 1 - j)];
      Stage s;
      s.cin = (j == 0) ? p.latent_ch : p.dec.back().cout;
      s.cout = (j < n - 1) ? p.enc[static_cast<size_t>(n - 2 - j)].cout : out_channels;
      s.h_in = h;
      s.w_in = w;
      s.resample = mirror.resample;
      s.h_out = s.resample ? h * 2 : h;
      s.w_out = s.resample ? w * 2 : w;
      p.dec.push_back(s);
      h = s.h_out;
      w = s.w_out;
    }
    return p;
  }
};

}  // namespace se3ctrl::nets

#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <memory>
#include <vector>

#include "ad/graph.hpp"
#include "se3/se3.hpp"

// Differentiable ops. Forward allocates the output node; the backward
// closure captures node ids plus cheap metadata and recomputes anything
// bulky (im2col buffers, rotation matrices) from parent values. The output
// id is g.size() at construction time, so closures can capture it up front.
namespace se3ctrl::ad {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using ColMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic>;

namespace detail {

inline void check(bool ok, const char* msg) {
  if (!ok) throw std::invalid_argument(msg);
}

// col is (C*KH*KW) x (OH*OW), column-major.
template <typename T>
void im2col(const T* x, int C, int H, int W, int KH, int KW, int stride, int pad, int OH,
            int OW, T* col) {
  const int CKK = C * KH * KW;
  for (int oh = 0; oh < OH; ++oh) {
    for (int ow = 0; ow < OW; ++ow) {
      T* dst = col + static_cast<size_t>(oh * OW + ow) * CKK;
      int r = 0;
      for (int c = 0; c < C; ++c) {
        for (int kh = 0; kh < KH; ++kh) {
          const int ih = oh * stride - pad + kh;
          const T* row = x + (static_cast<size_t>(c) * H + ih) * W;
          for (int kw = 0; kw < KW; ++kw, ++r) {
            const int iw = ow * stride - pad + kw;
            dst[r] = (ih >= 0 && ih < H && iw >= 0 && iw < W) ? row[iw] : T(0);
          }
        }
      }
    }
  }
}

// Adjoint of im2col: scatter-add columns back into the image.
template <typename T>
void col2im_add(const T* col, int C, int H, int W, int KH, int KW, int stride, int pad,
                int OH, int OW, T* x) {
  const int CKK = C * KH * KW;
  for (int oh = 0; oh < OH; ++oh) {
    for (int ow = 0; ow < OW; ++ow) {
      const T* src = col + static_cast<size_t>(oh * OW + ow) * CKK;
      int r = 0;
      for (int c = 0; c < C; ++c) {
        for (int kh = 0; kh < KH; ++kh) {
          const int ih = oh * stride - pad + kh;
          T* row = x + (static_cast<size_t>(c) * H + ih) * W;
          for (int kw = 0; kw < KW; ++kw, ++r) {
            const int iw = ow * stride - pad + kw;
            if (ih >= 0 && ih < H && iw >= 0 && iw < W) row[iw] += src[r];
          }
        }
      }
    }
  }
}

inline int conv_out(int in, int k, int stride, int pad) {
  return (in + 2 * pad - k) / stride + 1;
}

}  // namespace detail

// ---- elementwise / structural ----

template <typename T>
int add_scaled(Graph<T>& g, int a, int b, T ca, T cb) {
  detail::check(g.val(a).same_shape(g.val(b)), "add_scaled: shape mismatch");
  Tensor<T> out(g.val(a).shape);
  const Tensor<T>&va = g.val(a), &vb = g.val(b);
  for (int64_t i = 0; i < out.numel(); ++i) out.data[i] = ca * va.data[i] + cb * vb.data[i];
  const bool rg = g.needs_grad(a) || g.needs_grad(b);
  const int id = static_cast<int>(g.size());
  auto bwd = [a, b, ca, cb, id](Graph<T>& gr) {
    const Tensor<T>& go = gr.grad(id);
    if (gr.needs_grad(a)) {
      Tensor<T>& ga = gr.grad(a);
      for (int64_t i = 0; i < go.numel(); ++i) ga.data[i] += ca * go.data[i];
    }
    if (gr.needs_grad(b)) {
      Tensor<T>& gb = gr.grad(b);
      for (int64_t i = 0; i < go.numel(); ++i) gb.data[i] += cb * go.data[i];
    }
  };
  return g.add(std::move(out), rg, std::move(bwd), "add_scaled");
}

template <typename T>
int add(Graph<T>& g, int a, int b) {
  return add_scaled(g, a, b, T(1), T(1));
}

template <typename T>
int scale(Graph<T>& g, int a, T c) {
  Tensor<T> out = g.val(a);
  for (T& v : out.data) v *= c;
  const bool rg = g.needs_grad(a);
  const int id = static_cast<int>(g.size());
  auto bwd = [a, c, id](Graph<T>& gr) {
    const Tensor<T>& go = gr.grad(id);
    Tensor<T>& ga = gr.grad(a);
    for (int64_t i = 0; i < go.numel(); ++i) ga.data[i] += c * go.data[i];
  };
  return g.add(std::move(out), rg, std::move(bwd), "scale");
}

// Adds a constant tensor (e.g. sampled noise); gradient passes through.
template <typename T>
int add_const(Graph<T>& g, int a, std::shared_ptr<const Tensor<T>> c) {
  detail::check(g.val(a).same_shape(*c), "add_const: shape mismatch");
  Tensor<T> out = g.val(a);
  for (int64_t i = 0; i < out.numel(); ++i) out.data[i] += c->data[i];
  const bool rg = g.needs_grad(a);
  const int id = static_cast<int>(g.size());
  auto bwd = [a, id](Graph<T>& gr) {
    const Tensor<T>& go = gr.grad(id);
    Tensor<T>& ga = gr.grad(a);
    for (int64_t i = 0; i < go.numel(); ++i) ga.data[i] += go.data[i];
  };
  return g.add(std::move(out), rg, std::move(bwd), "add_const");
}

template <typename T>
int reshape(Graph<T>& g, int a, std::vector<int> shape) {
  detail::check(Tensor<T>::count(shape) == g.val(a).numel(), "reshape: numel mismatch");
  Tensor<T> out(std::move(shape), g.val(a).data);
  const bool rg = g.needs_grad(a);
  const int id = static_cast<int>(g.size());
  auto bwd = [a, id](Graph<T>& gr) {
    const Tensor<T>& go = gr.grad(id);
    Tensor<T>& ga = gr.grad(a);
    for (int64_t i = 0; i < go.numel(); ++i) ga.data[i] += go.data[i];
  };
  return g.add(std::move(out), rg, std::move(bwd), "reshape");
}

// Concatenate two [B, F] tensors along the feature dim.
template <typename T>
int concat2d(Graph<T>& g, int a, int b) {
  const Tensor<T>&va = g.val(a), &vb = g.val(b);
  detail::check(va.ndim() == 2 && vb.ndim() == 2 && va.dim(0) == vb.dim(0),
                "concat2d: expect [B,Fa],[B,Fb]");
  const int B = va.dim(0), Fa = va.dim(1), Fb = vb.dim(1);
  Tensor<T> out({B, Fa + Fb});
  for (int i = 0; i < B; ++i) {
    std::copy_n(va.ptr() + static_cast<size_t>(i) * Fa, Fa,
                out.ptr() + static_cast<size_t>(i) * (Fa + Fb));
    std::copy_n(vb.ptr() + static_cast<size_t>(i) * Fb, Fb,
                out.ptr() + static_cast<size_t>(i) * (Fa + Fb) + Fa);
  }
  const bool rg = g.needs_grad(a) || g.needs_grad(b);
  const int id = static_cast<int>(g.size());
  auto bwd = [a, b, B, Fa, Fb, id](Graph<T>& gr) {
    const Tensor<T>& go = gr.grad(id);
    if (gr.needs_grad(a)) {
      Tensor<T>& ga = gr.grad(a);
      for (int i = 0; i < B; ++i)
        for (int f = 0; f < Fa; ++f)
          ga.data[static_cast<size_t>(i) * Fa + f] +=
              go.data[static_cast<size_t>(i) * (Fa + Fb) + f];
    }
    if (gr.needs_grad(b)) {
      Tensor<T>& gb = gr.grad(b);
      for (int i = 0; i < B; ++i)
        for (int f = 0; f < Fb; ++f)
          gb.data[static_cast<size_t>(i) * Fb + f] +=
              go.data[static_cast<size_t>(i) * (Fa + Fb) + Fa + f];
    }
  };
  return g.add(std::move(out), rg, std::move(bwd), "concat2d");
}

// ---- dense / conv layers ----

// x [B,IN] * w [OUT,IN]^T + bias [OUT] -> [B,OUT]
template <typename T>
int fc(Graph<T>& g, int x, int w, int b) {
  const Tensor<T>&vx = g.val(x), &vw = g.val(w), &vb = g.val(b);
  detail::check(vx.ndim() == 2 && vw.ndim() == 2 && vb.ndim() == 1, "fc: bad ranks");
  const int B = vx.dim(0), IN = vx.dim(1), OUT = vw.dim(0);
  detail::check(vw.dim(1) == IN && vb.dim(0) == OUT, "fc: dim mismatch");
  Tensor<T> out({B, OUT});
  {
    Eigen::Map<const RowMat<T>> xm(vx.ptr(), B, IN);
    Eigen::Map<const RowMat<T>> wm(vw.ptr(), OUT, IN);
    Eigen::Map<RowMat<T>> ym(out.ptr(), B, OUT);
    ym.noalias() = xm * wm.transpose();
    for (int i = 0; i < B; ++i)
      for (int o = 0; o < OUT; ++o) out.data[static_cast<size_t>(i) * OUT + o] += vb.data[o];
  }
  const bool rg = g.needs_grad(x) || g.needs_grad(w) || g.needs_grad(b);
  const int id = static_cast<int>(g.size());
  auto bwd = [x, w, b, B, IN, OUT, id](Graph<T>& gr) {
    Eigen::Map<const RowMat<T>> gom(gr.grad(id).ptr(), B, OUT);
    if (gr.needs_grad(x)) {
      Eigen::Map<const RowMat<T>> wm(gr.val(w).ptr(), OUT, IN);
      Eigen::Map<RowMat<T>> gx(gr.grad(x).ptr(), B, IN);
      gx.noalias() += gom * wm;
    }
    if (gr.needs_grad(w)) {
      Eigen::Map<const RowMat<T>> xm(gr.val(x).ptr(), B, IN);
      Eigen::Map<RowMat<T>> gw(gr.grad(w).ptr(), OUT, IN);
      gw.noalias() += gom.transpose() * xm;
    }
    if (gr.needs_grad(b)) {
      Tensor<T>& gb = gr.grad(b);
      for (int i = 0; i < B; ++i)
        for (int o = 0; o < OUT; ++o)
          gb.data[o] += gr.grad(id).data[static_cast<size_t>(i) * OUT + o];
    }
  };
  return g.add(std::move(out), rg, std::move(bwd), "fc");
}

namespace detail {
// Channel geometry for per-channel ops on [B,C] or [B,C,H,W].
struct ChanDims {
  int B, C;
  int64_t inner;  // elements per channel slice
};
template <typename T>
ChanDims chan_dims(const Tensor<T>& v, const char* who) {
  check(v.ndim() == 2 || v.ndim() == 4, "per-channel op: expect 2d or 4d");
  (void)who;
  ChanDims d;
  d.B = v.dim(0);
  d.C = v.dim(1);
  d.inner = 1;
  for (int i = 2; i < v.ndim(); ++i) d.inner *= v.dim(i);
  return d;
}
}  // namespace detail

// PReLU with one learnable slope per channel (dim 1).
template <typename T>
int prelu(Graph<T>& g, int x, int slope) {
  const Tensor<T>& vx = g.val(x);
  const Tensor<T>& vs = g.val(slope);
  const auto d = detail::chan_dims(vx, "prelu");
  detail::check(vs.ndim() == 1 && vs.dim(0) == d.C, "prelu: slope must be [C]");
  Tensor<T> out(vx.shape);
  for (int i = 0; i < d.B; ++i)
    for (int c = 0; c < d.C; ++c) {
      const T a = vs.data[c];
      const size_t base = (static_cast<size_t>(i) * d.C + c) * d.inner;
      for (int64_t k = 0; k < d.inner; ++k) {
        const T v = vx.data[base + k];
        out.data[base + k] = v > T(0) ? v : a * v;
      }
    }
  const bool rg = g.needs_grad(x) || g.needs_grad(slope);
  const int id = static_cast<int>(g.size());
  auto bwd = [x, slope, d, id](Graph<T>& gr) {
    const Tensor<T>& go = gr.grad(id);
    const Tensor<T>& vx = gr.val(x);
    const Tensor<T>& vs = gr.val(slope);
    const bool nx = gr.needs_grad(x), ns = gr.needs_grad(slope);
    Tensor<T>* gx = nx ? &gr.grad(x) : nullptr;
    Tensor<T>* gs = ns ? &gr.grad(slope) : nullptr;
    for (int i = 0; i < d.B; ++i)
      for (int c = 0; c < d.C; ++c) {
        const T a = vs.data[c];
        const size_t base = (static_cast<size_t>(i) * d.C + c) * d.inner;
        T acc = T(0);
        for (int64_t k = 0; k < d.inner; ++k) {
          const T v = vx.data[base + k];
          const T gv = go.data[base + k];
          if (nx) gx->data[base + k] += v > T(0) ? gv : a * gv;
          if (v <= T(0)) acc += gv * v;
        }
        if (ns) gs->data[c] += acc;
      }
  };
  return g.add(std::move(out), rg, std::move(bwd), "prelu");
}

// Fixed per-channel standardization with precomputed (calibrated) buffers.
// mu/sigma are plain constants, never differentiated.
template <typename T>
int fixed_norm(Graph<T>& g, int x, std::shared_ptr<const Tensor<T>> mu,
               std::shared_ptr<const Tensor<T>> sigma) {
  const Tensor<T>& vx = g.val(x);
  const auto d = detail::chan_dims(vx, "fixed_norm");
  detail::check(mu->ndim() == 1 && mu->dim(0) == d.C && sigma->same_shape(*mu),
                "fixed_norm: buffers must be [C]");
  for (int c = 0; c < d.C; ++c)
    detail::check(sigma->data[c] > T(0), "fixed_norm: sigma must be positive");
  Tensor<T> out(vx.shape);
  for (int i = 0; i < d.B; ++i)
    for (int c = 0; c < d.C; ++c) {
      const T m = mu->data[c], inv = T(1) / sigma->data[c];
      const size_t base = (static_cast<size_t>(i) * d.C + c) * d.inner;
      for (int64_t k = 0; k < d.inner; ++k) out.data[base + k] = (vx.data[base + k] - m) * inv;
    }
  const bool rg = g.needs_grad(x);
  const int id = static_cast<int>(g.size());
  auto bwd = [x, sigma, d, id](Graph<T>& gr) {
    const Tensor<T>& go = gr.grad(id);
    Tensor<T>& gx = gr.grad(x);
    for (int i = 0; i < d.B; ++i)
      for (int c = 0; c < d.C; ++c) {
        const T inv = T(1) / sigma->data[c];
        const size_t base = (static_cast<size_t>(i) * d.C + c) * d.inner;
        for (int64_t k = 0; k < d.inner; ++k) gx.data[base + k] += go.data[base + k] * inv;
      }
  };
  return g.add(std::move(out), rg, std::move(bwd), "fixed_norm");
}

// x [B,C,H,W], w [OC,C,KH,KW], bias [OC].
template <typename T>
int conv2d(Graph<T>& g, int x, int w, int b, int stride, int pad) {
  const Tensor<T>&vx = g.val(x), &vw = g.val(w), &vb = g.val(b);
  detail::check(vx.ndim() == 4 && vw.ndim() == 4 && vb.ndim() == 1, "conv2d: bad ranks");
  const int B = vx.dim(0), C = vx.dim(1), H = vx.dim(2), W = vx.dim(3);
  const int OC = vw.dim(0), KH = vw.dim(2), KW = vw.dim(3);
  detail::check(vw.dim(1) == C && vb.dim(0) == OC, "conv2d: dim mismatch");
  const int OH = detail::conv_out(H, KH, stride, pad);
  const int OW = detail::conv_out(W, KW, stride, pad);
  detail::check(OH > 0 && OW > 0, "conv2d: empty output");
  const int CKK = C * KH * KW;
  Tensor<T> out({B, OC, OH, OW});
  {
    std::vector<T> colbuf(static_cast<size_t>(CKK) * OH * OW);
    Eigen::Map<const RowMat<T>> wm(vw.ptr(), OC, CKK);
    for (int i = 0; i < B; ++i) {
      detail::im2col(vx.ptr() + static_cast<size_t>(i) * C * H * W, C, H, W, KH, KW, stride,
                     pad, OH, OW, colbuf.data());
      Eigen::Map<const ColMat<T>> cm(colbuf.data(), CKK, OH * OW);
      Eigen::Map<RowMat<T>> ym(out.ptr() + static_cast<size_t>(i) * OC * OH * OW, OC, OH * OW);
      ym.noalias() = wm * cm;
      for (int o = 0; o < OC; ++o) ym.row(o).array() += vb.data[o];
    }
  }
  const bool rg = g.needs_grad(x) || g.needs_grad(w) || g.needs_grad(b);
  const int id = static_cast<int>(g.size());
  auto bwd = [x, w, b, B, C, H, W, OC, KH, KW, stride, pad, OH, OW, CKK, id](Graph<T>& gr) {
    const Tensor<T>& go = gr.grad(id);
    const bool nx = gr.needs_grad(x), nw = gr.needs_grad(w), nb = gr.needs_grad(b);
    std::vector<T> colbuf(static_cast<size_t>(CKK) * OH * OW);
    std::vector<T> colgrad(nx ? colbuf.size() : 0);
    Eigen::Map<const RowMat<T>> wm(gr.val(w).ptr(), OC, CKK);
    for (int i = 0; i < B; ++i) {
      Eigen::Map<const RowMat<T>> gom(go.ptr() + static_cast<size_t>(i) * OC * OH * OW, OC,
                                      OH * OW);
      if (nx || nw) {
        detail::im2col(gr.val(x).ptr() + static_cast<size_t>(i) * C * H * W, C, H, W, KH, KW,
                       stride, pad, OH, OW, colbuf.data());
      }
      if (nw) {
        Eigen::Map<const ColMat<T>> cm(colbuf.data(), CKK, OH * OW);
        Eigen::Map<RowMat<T>> gwm(gr.grad(w).ptr(), OC, CKK);
        gwm.noalias() += gom * cm.transpose();
      }
      if (nx) {
        Eigen::Map<ColMat<T>> cgm(colgrad.data(), CKK, OH * OW);
        cgm.noalias() = wm.transpose() * gom;
        detail::col2im_add(colgrad.data(), C, H, W, KH, KW, stride, pad, OH, OW,
                           gr.grad(x).ptr() + static_cast<size_t>(i) * C * H * W);
      }
      if (nb) {
        Tensor<T>& gb = gr.grad(b);
        for (int o = 0; o < OC; ++o) gb.data[o] += gom.row(o).sum();
      }
    }
  };
  return g.add(std::move(out), rg, std::move(bwd), "conv2d");
}

// Transposed convolution; exact adjoint of conv2d with weight [IC,OC,KH,KW].
// Output spatial = stride*(S-1) + K - 2*pad.
template <typename T>
int deconv2d(Graph<T>& g, int x, int w, int b, int stride, int pad) {
  const Tensor<T>&vx = g.val(x), &vw = g.val(w), &vb = g.val(b);
  detail::check(vx.ndim() == 4 && vw.ndim() == 4 && vb.ndim() == 1, "deconv2d: bad ranks");
  const int B = vx.dim(0), IC = vx.dim(1), S1 = vx.dim(2), S2 = vx.dim(3);
  const int OC = vw.dim(1), KH = vw.dim(2), KW = vw.dim(3);
  detail::check(vw.dim(0) == IC && vb.dim(0) == OC, "deconv2d: dim mismatch");
  const int O1 = stride * (S1 - 1) + KH - 2 * pad;
  const int O2 = stride * (S2 - 1) + KW - 2 * pad;
  detail::check(O1 > 0 && O2 > 0, "deconv2d: empty output");
  const int OKK = OC * KH * KW;
  Tensor<T> out({B, OC, O1, O2});
  {
    std::vector<T> colbuf(static_cast<size_t>(OKK) * S1 * S2);
    Eigen::Map<const RowMat<T>> wm(vw.ptr(), IC, OKK);
    for (int i = 0; i < B; ++i) {
      Eigen::Map<const RowMat<T>> xm(vx.ptr() + static_cast<size_t>(i) * IC * S1 * S2, IC,
                                     S1 * S2);
      Eigen::Map<ColMat<T>> cm(colbuf.data(), OKK, S1 * S2);
      cm.noalias() = wm.transpose() * xm;
      T* oslice = out.ptr() + static_cast<size_t>(i) * OC * O1 * O2;
      detail::col2im_add(colbuf.data(), OC, O1, O2, KH, KW, stride, pad, S1, S2, oslice);
      for (int o = 0; o < OC; ++o) {
        T* row = oslice + static_cast<size_t>(o) * O1 * O2;
        for (int64_t k = 0; k < static_cast<int64_t>(O1) * O2; ++k) row[k] += vb.data[o];
      }
    }
  }
  const bool rg = g.needs_grad(x) || g.needs_grad(w) || g.needs_grad(b);
  const int id = static_cast<int>(g.size());
  auto bwd = [x, w, b, B, IC, S1, S2, OC, KH, KW, stride, pad, O1, O2, OKK, id](Graph<T>& gr) {
    const Tensor<T>& go = gr.grad(id);
    const bool nx = gr.needs_grad(x), nw = gr.needs_grad(w), nb = gr.needs_grad(b);
    std::vector<T> colbuf(static_cast<size_t>(OKK) * S1 * S2);
    Eigen::Map<const RowMat<T>> wm(gr.val(w).ptr(), IC, OKK);
    for (int i = 0; i < B; ++i) {
      const T* goslice = go.ptr() + static_cast<size_t>(i) * OC * O1 * O2;
      detail::im2col(goslice, OC, O1, O2, KH, KW, stride, pad, S1, S2, colbuf.data());
      Eigen::Map<const ColMat<T>> gcm(colbuf.data(), OKK, S1 * S2);
      if (nx) {
        Eigen::Map<RowMat<T>> gxm(gr.grad(x).ptr() + static_cast<size_t>(i) * IC * S1 * S2, IC,
                                  S1 * S2);
        gxm.noalias() += wm * gcm;
      }
      if (nw) {
        Eigen::Map<const RowMat<T>> xm(gr.val(x).ptr() + static_cast<size_t>(i) * IC * S1 * S2,
                                       IC, S1 * S2);
        Eigen::Map<RowMat<T>> gwm(gr.grad(w).ptr(), IC, OKK);
        gwm.noalias() += xm * gcm.transpose();
      }
      if (nb) {
        Tensor<T>& gb = gr.grad(b);
        for (int o = 0; o < OC; ++o) {
          const T* row = goslice + static_cast<size_t>(o) * O1 * O2;
          T acc = T(0);
          for (int64_t k = 0; k < static_cast<int64_t>(O1) * O2; ++k) acc += row[k];
          gb.data[o] += acc;
        }
      }
    }
  };
  return g.add(std::move(out), rg, std::move(bwd), "deconv2d");
}

template <typename T>
int maxpool2x2(Graph<T>& g, int x) {
  const Tensor<T>& vx = g.val(x);
  detail::check(vx.ndim() == 4, "maxpool2x2: expect 4d");
  const int B = vx.dim(0), C = vx.dim(1), H = vx.dim(2), W = vx.dim(3);
  detail::check(H % 2 == 0 && W % 2 == 0, "maxpool2x2: odd spatial size");
  const int OH = H / 2, OW = W / 2;
  Tensor<T> out({B, C, OH, OW});
  auto argmax = std::make_shared<std::vector<int64_t>>(out.numel());
  for (int i = 0; i < B; ++i)
    for (int c = 0; c < C; ++c) {
      const size_t in_base = (static_cast<size_t>(i) * C + c) * H * W;
      const size_t out_base = (static_cast<size_t>(i) * C + c) * OH * OW;
      for (int oh = 0; oh < OH; ++oh)
        for (int ow = 0; ow < OW; ++ow) {
          int64_t best = in_base + static_cast<size_t>(2 * oh) * W + 2 * ow;
          for (int dh = 0; dh < 2; ++dh)
            for (int dw = 0; dw < 2; ++dw) {
              const int64_t j = in_base + static_cast<size_t>(2 * oh + dh) * W + 2 * ow + dw;
              if (vx.data[j] > vx.data[best]) best = j;
            }
          out.data[out_base + static_cast<size_t>(oh) * OW + ow] = vx.data[best];
          (*argmax)[out_base + static_cast<size_t>(oh) * OW + ow] = best;
        }
    }
  const bool rg = g.needs_grad(x);
  const int id = static_cast<int>(g.size());
  auto bwd = [x, argmax, id](Graph<T>& gr) {
    const Tensor<T>& go = gr.grad(id);
    Tensor<T>& gx = gr.grad(x);
    for (int64_t k = 0; k < go.numel(); ++k) gx.data[(*argmax)[k]] += go.data[k];
  };
  return g.add(std::move(out), rg, std::move(bwd), "maxpool2x2");
}

// Softmax over the channel dim of [B,K,H,W].
template <typename T>
int channel_softmax(Graph<T>& g, int x) {
  const Tensor<T>& vx = g.val(x);
  detail::check(vx.ndim() == 4, "channel_softmax: expect 4d");
  const int B = vx.dim(0), K = vx.dim(1);
  const int64_t HW = static_cast<int64_t>(vx.dim(2)) * vx.dim(3);
  Tensor<T> out(vx.shape);
  for (int i = 0; i < B; ++i)
    for (int64_t p = 0; p < HW; ++p) {
      const size_t base = static_cast<size_t>(i) * K * HW + p;
      T mx = vx.data[base];
      for (int k = 1; k < K; ++k) mx = std::max(mx, vx.data[base + k * HW]);
      T sum = T(0);
      for (int k = 0; k < K; ++k) {
        const T e = std::exp(vx.data[base + k * HW] - mx);
        out.data[base + k * HW] = e;
        sum += e;
      }
      for (int k = 0; k < K; ++k) out.data[base + k * HW] /= sum;
    }
  const bool rg = g.needs_grad(x);
  const int id = static_cast<int>(g.size());
  auto bwd = [x, B, K, HW, id](Graph<T>& gr) {
    const Tensor<T>& go = gr.grad(id);
    const Tensor<T>& y = gr.val(id);
    Tensor<T>& gx = gr.grad(x);
    for (int i = 0; i < B; ++i)
      for (int64_t p = 0; p < HW; ++p) {
        const size_t base = static_cast<size_t>(i) * K * HW + p;
        T dot = T(0);
        for (int k = 0; k < K; ++k) dot += go.data[base + k * HW] * y.data[base + k * HW];
        for (int k = 0; k < K; ++k)
          gx.data[base + k * HW] += y.data[base + k * HW] * (go.data[base + k * HW] - dot);
      }
  };
  return g.add(std::move(out), rg, std::move(bwd), "channel_softmax");
}

template <typename T>
int clamp_min0(Graph<T>& g, int x) {
  Tensor<T> out = g.val(x);
  for (T& v : out.data) v = std::max(v, T(0));
  const bool rg = g.needs_grad(x);
  const int id = static_cast<int>(g.size());
  auto bwd = [x, id](Graph<T>& gr) {
    const Tensor<T>& go = gr.grad(id);
    const Tensor<T>& vx = gr.val(x);
    Tensor<T>& gx = gr.grad(x);
    for (int64_t i = 0; i < go.numel(); ++i)
      if (vx.data[i] > T(0)) gx.data[i] += go.data[i];
  };
  return g.add(std::move(out), rg, std::move(bwd), "clamp_min0");
}

// y = x^p elementwise for x >= 0, p >= 1.
template <typename T>
int pow_const(Graph<T>& g, int x, T p) {
  detail::check(p >= T(1), "pow_const: exponent must be >= 1");
  Tensor<T> out = g.val(x);
  for (T& v : out.data) v = std::pow(v, p);
  const bool rg = g.needs_grad(x);
  const int id = static_cast<int>(g.size());
  auto bwd = [x, p, id](Graph<T>& gr) {
    const Tensor<T>& go = gr.grad(id);
    const Tensor<T>& vx = gr.val(x);
    Tensor<T>& gx = gr.grad(x);
    for (int64_t i = 0; i < go.numel(); ++i)
      gx.data[i] += go.data[i] * p * std::pow(vx.data[i], p - T(1));
  };
  return g.add(std::move(out), rg, std::move(bwd), "pow_const");
}

// Normalize non-negative channel activations to sum to one per pixel.
// Degenerate pixels (sum < eps) pass through unchanged.
template <typename T>
int channel_normalize(Graph<T>& g, int x, T eps) {
  const Tensor<T>& vx = g.val(x);
  detail::check(vx.ndim() == 4, "channel_normalize: expect 4d");
  const int B = vx.dim(0), K = vx.dim(1);
  const int64_t HW = static_cast<int64_t>(vx.dim(2)) * vx.dim(3);
  Tensor<T> out(vx.shape);
  for (int i = 0; i < B; ++i)
    for (int64_t p = 0; p < HW; ++p) {
      const size_t base = static_cast<size_t>(i) * K * HW + p;
      T sum = T(0);
      for (int k = 0; k < K; ++k) sum += vx.data[base + k * HW];
      if (sum < eps) {
        for (int k = 0; k < K; ++k) out.data[base + k * HW] = T(1) / T(K);
      } else {
        for (int k = 0; k < K; ++k) out.data[base + k * HW] = vx.data[base + k * HW] / sum;
      }
    }
  const bool rg = g.needs_grad(x);
  const int id = static_cast<int>(g.size());
  auto bwd = [x, B, K, HW, eps, id](Graph<T>& gr) {
    const Tensor<T>& go = gr.grad(id);
    const Tensor<T>& vx = gr.val(x);
    const Tensor<T>& y = gr.val(id);
    Tensor<T>& gx = gr.grad(x);
    for (int i = 0; i < B; ++i)
      for (int64_t p = 0; p < HW; ++p) {
        const size_t base = static_cast<size_t>(i) * K * HW + p;
        T sum = T(0);
        for (int k = 0; k < K; ++k) sum += vx.data[base + k * HW];
        if (sum < eps) {
          continue;  // uniform fallback output does not depend on x
        } else {
          T dot = T(0);
          for (int k = 0; k < K; ++k) dot += go.data[base + k * HW] * y.data[base + k * HW];
          for (int k = 0; k < K; ++k)
            gx.data[base + k * HW] += (go.data[base + k * HW] - dot) / sum;
        }
      }
  };
  return g.add(std::move(out), rg, std::move(bwd), "channel_normalize");
}

// ---- SE(3) layers ----

/// Blends K rigid transforms per point: out[:,p] = sum_k m[k,p] (R_k x[:,p] + t_k).
// pts [B,3,H,W], masks [B,K,H,W], delta [B,K,6] with rows [aa(3), t(3)].
template <typename T>
int se3_transform(Graph<T>& g, int pts, int masks, int delta) {
  const Tensor<T>&vp = g.val(pts), &vm = g.val(masks), &vd = g.val(delta);
  detail::check(vp.ndim() == 4 && vp.dim(1) == 3, "se3_transform: pts must be [B,3,H,W]");
  detail::check(vm.ndim() == 4 && vm.dim(0) == vp.dim(0) && vm.dim(2) == vp.dim(2) &&
                    vm.dim(3) == vp.dim(3),
                "se3_transform: mask/pts mismatch");
  detail::check(vd.ndim() == 3 && vd.dim(0) == vp.dim(0) && vd.dim(1) == vm.dim(1) &&
                    vd.dim(2) == 6,
                "se3_transform: delta must be [B,K,6]");
  const int B = vp.dim(0), K = vm.dim(1);
  const int64_t HW = static_cast<int64_t>(vp.dim(2)) * vp.dim(3);
  Tensor<T> out(vp.shape);
  for (int i = 0; i < B; ++i) {
    const T* x = vp.ptr() + static_cast<size_t>(i) * 3 * HW;
    T* o = out.ptr() + static_cast<size_t>(i) * 3 * HW;
    for (int k = 0; k < K; ++k) {
      const T* dk = vd.ptr() + (static_cast<size_t>(i) * K + k) * 6;
      const se3::Mat3<T> r = se3::exp_so3<T>(se3::Vec3<T>(dk[0], dk[1], dk[2]));
      const se3::Vec3<T> t(dk[3], dk[4], dk[5]);
      const T* m = vm.ptr() + (static_cast<size_t>(i) * K + k) * HW;
      for (int64_t p = 0; p < HW; ++p) {
        const se3::Vec3<T> xp(x[p], x[p + HW], x[p + 2 * HW]);
        const se3::Vec3<T> yp = r * xp + t;
        o[p] += m[p] * yp.x();
        o[p + HW] += m[p] * yp.y();
        o[p + 2 * HW] += m[p] * yp.z();
      }
    }
  }
  const bool rg = g.needs_grad(pts) || g.needs_grad(masks) || g.needs_grad(delta);
  const int id = static_cast<int>(g.size());
  auto bwd = [pts, masks, delta, B, K, HW, id](Graph<T>& gr) {
    const Tensor<T>& go = gr.grad(id);
    const Tensor<T>& vp = gr.val(pts);
    const Tensor<T>& vm = gr.val(masks);
    const Tensor<T>& vd = gr.val(delta);
    const bool np = gr.needs_grad(pts), nm = gr.needs_grad(masks), nd = gr.needs_grad(delta);
    Tensor<T>* gp = np ? &gr.grad(pts) : nullptr;
    Tensor<T>* gm = nm ? &gr.grad(masks) : nullptr;
    Tensor<T>* gd = nd ? &gr.grad(delta) : nullptr;
    for (int i = 0; i < B; ++i) {
      const T* x = vp.ptr() + static_cast<size_t>(i) * 3 * HW;
      const T* gout = go.ptr() + static_cast<size_t>(i) * 3 * HW;
      for (int k = 0; k < K; ++k) {
        const T* dk = vd.ptr() + (static_cast<size_t>(i) * K + k) * 6;
        const se3::Vec3<T> aa(dk[0], dk[1], dk[2]);
        const se3::Mat3<T> r = se3::exp_so3<T>(aa);
        const se3::Vec3<T> t(dk[3], dk[4], dk[5]);
        const T* m = vm.ptr() + (static_cast<size_t>(i) * K + k) * HW;
        se3::Vec3<T> acc_t = se3::Vec3<T>::Zero();
        se3::Vec3<T> acc_w = se3::Vec3<T>::Zero();
        for (int64_t p = 0; p < HW; ++p) {
          const se3::Vec3<T> xp(x[p], x[p + HW], x[p + 2 * HW]);
          const se3::Vec3<T> gv(gout[p], gout[p + HW], gout[p + 2 * HW]);
          const se3::Vec3<T> rx = r * xp;
          if (nm) {
            const se3::Vec3<T> yp = rx + t;
            gm->data[(static_cast<size_t>(i) * K + k) * HW + p] += gv.dot(yp);
          }
          if (np) {
            const se3::Vec3<T> gxp = m[p] * (r.transpose() * gv);
            T* gpp = gp->ptr() + static_cast<size_t>(i) * 3 * HW;
            gpp[p] += gxp.x();
            gpp[p + HW] += gxp.y();
            gpp[p + 2 * HW] += gxp.z();
          }
          if (nd) {
            acc_t += m[p] * gv;
            acc_w += m[p] * rx.cross(gv);
          }
        }
        if (nd) {
          const se3::Mat3<T> jl = se3::left_jacobian<T>(aa);
          const se3::Vec3<T> gaa = jl.transpose() * acc_w;
          T* gdk = gd->ptr() + (static_cast<size_t>(i) * K + k) * 6;
          for (int j = 0; j < 3; ++j) {
            gdk[j] += gaa[j];
            gdk[3 + j] += acc_t[j];
          }
        }
      }
    }
  };
  return g.add(std::move(out), rg, std::move(bwd), "se3_transform");
}

// Applies per-part deltas to poses: pose rows [y(3), aa_p(3)], delta rows
// [aa_d(3), t(3)]; out rows [R_d y + t, log(R_d R_p)].
template <typename T>
int se3_compose(Graph<T>& g, int pose, int delta) {
  const Tensor<T>&vp = g.val(pose), &vd = g.val(delta);
  detail::check(vp.ndim() == 3 && vp.dim(2) == 6 && vp.same_shape(vd),
                "se3_compose: expect matching [B,K,6]");
  const int B = vp.dim(0), K = vp.dim(1);
  Tensor<T> out(vp.shape);
  for (int i = 0; i < B; ++i)
    for (int k = 0; k < K; ++k) {
      const size_t o = (static_cast<size_t>(i) * K + k) * 6;
      const se3::Vec3<T> y(vp.data[o], vp.data[o + 1], vp.data[o + 2]);
      const se3::Vec3<T> ap(vp.data[o + 3], vp.data[o + 4], vp.data[o + 5]);
      const se3::Vec3<T> ad(vd.data[o], vd.data[o + 1], vd.data[o + 2]);
      const se3::Vec3<T> t(vd.data[o + 3], vd.data[o + 4], vd.data[o + 5]);
      const se3::Mat3<T> rd = se3::exp_so3<T>(ad);
      const se3::Vec3<T> yy = rd * y + t;
      const se3::Vec3<T> aa = se3::log_so3<T>(se3::Mat3<T>(rd * se3::exp_so3<T>(ap)));
      for (int j = 0; j < 3; ++j) {
        out.data[o + j] = yy[j];
        out.data[o + 3 + j] = aa[j];
      }
    }
  const bool rg = g.needs_grad(pose) || g.needs_grad(delta);
  const int id = static_cast<int>(g.size());
  auto bwd = [pose, delta, B, K, id](Graph<T>& gr) {
    const Tensor<T>& go = gr.grad(id);
    const Tensor<T>& vo = gr.val(id);
    const Tensor<T>& vp = gr.val(pose);
    const Tensor<T>& vd = gr.val(delta);
    const bool np = gr.needs_grad(pose), nd = gr.needs_grad(delta);
    Tensor<T>* gp = np ? &gr.grad(pose) : nullptr;
    Tensor<T>* gd = nd ? &gr.grad(delta) : nullptr;
    for (int i = 0; i < B; ++i)
      for (int k = 0; k < K; ++k) {
        const size_t o = (static_cast<size_t>(i) * K + k) * 6;
        const se3::Vec3<T> y(vp.data[o], vp.data[o + 1], vp.data[o + 2]);
        const se3::Vec3<T> ap(vp.data[o + 3], vp.data[o + 4], vp.data[o + 5]);
        const se3::Vec3<T> ad(vd.data[o], vd.data[o + 1], vd.data[o + 2]);
        const se3::Vec3<T> ahat(vo.data[o + 3], vo.data[o + 4], vo.data[o + 5]);
        const se3::Vec3<T> gy(go.data[o], go.data[o + 1], go.data[o + 2]);
        const se3::Vec3<T> ga(go.data[o + 3], go.data[o + 4], go.data[o + 5]);
        const se3::Mat3<T> rd = se3::exp_so3<T>(ad);
        if (np) {
          const se3::Vec3<T> dy = rd.transpose() * gy;
          // d(ahat)/d(ap) = Jr^-1(ahat) Jr(ap), Jr(v) = Jl(-v).
          const se3::Mat3<T> m =
              se3::left_jacobian_inv<T>(se3::Vec3<T>(-ahat)) * se3::left_jacobian<T>(se3::Vec3<T>(-ap));
          const se3::Vec3<T> da = m.transpose() * ga;
          for (int j = 0; j < 3; ++j) {
            gp->data[o + j] += dy[j];
            gp->data[o + 3 + j] += da[j];
          }
        }
        if (nd) {
          const se3::Vec3<T> rdy = rd * y;
          const se3::Mat3<T> jld = se3::left_jacobian<T>(ad);
          se3::Vec3<T> dad = jld.transpose() * rdy.cross(gy);
          // d(ahat)/d(ad) = Jl^-1(ahat) Jl(ad).
          const se3::Mat3<T> m = se3::left_jacobian_inv<T>(ahat) * jld;
          dad += m.transpose() * ga;
          for (int j = 0; j < 3; ++j) {
            gd->data[o + j] += dad[j];
            gd->data[o + 3 + j] += gy[j];
          }
        }
      }
  };
  return g.add(std::move(out), rg, std::move(bwd), "se3_compose");
}

// ---- reductions ----

// mean((a-b)^2) over every element; both sides differentiable.
template <typename T>
int mse_mean(Graph<T>& g, int a, int b) {
  detail::check(g.val(a).same_shape(g.val(b)), "mse_mean: shape mismatch");
  const Tensor<T>&va = g.val(a), &vb = g.val(b);
  const int64_t n = va.numel();
  T acc = T(0);
  for (int64_t i = 0; i < n; ++i) {
    const T d = va.data[i] - vb.data[i];
    acc += d * d;
  }
  Tensor<T> out = Tensor<T>::scalar(acc / static_cast<T>(n));
  const bool rg = g.needs_grad(a) || g.needs_grad(b);
  const int id = static_cast<int>(g.size());
  auto bwd = [a, b, n, id](Graph<T>& gr) {
    const T g0 = gr.grad(id).data[0];
    const Tensor<T>&va = gr.val(a), &vb = gr.val(b);
    const T c = T(2) * g0 / static_cast<T>(n);
    if (gr.needs_grad(a)) {
      Tensor<T>& ga = gr.grad(a);
      for (int64_t i = 0; i < n; ++i) ga.data[i] += c * (va.data[i] - vb.data[i]);
    }
    if (gr.needs_grad(b)) {
      Tensor<T>& gb = gr.grad(b);
      for (int64_t i = 0; i < n; ++i) gb.data[i] -= c * (va.data[i] - vb.data[i]);
    }
  };
  return g.add(std::move(out), rg, std::move(bwd), "mse_mean");
}

// sum(sel * x) -> scalar; used to pick out single outputs for Jacobians.
template <typename T>
int sum_sel(Graph<T>& g, int x, std::shared_ptr<const Tensor<T>> sel) {
  detail::check(g.val(x).same_shape(*sel), "sum_sel: shape mismatch");
  const Tensor<T>& vx = g.val(x);
  T acc = T(0);
  for (int64_t i = 0; i < vx.numel(); ++i) acc += vx.data[i] * sel->data[i];
  Tensor<T> out = Tensor<T>::scalar(acc);
  const bool rg = g.needs_grad(x);
  const int id = static_cast<int>(g.size());
  auto bwd = [x, sel, id](Graph<T>& gr) {
    const T g0 = gr.grad(id).data[0];
    Tensor<T>& gx = gr.grad(x);
    for (int64_t i = 0; i < gx.numel(); ++i) gx.data[i] += g0 * sel->data[i];
  };
  return g.add(std::move(out), rg, std::move(bwd), "sum_sel");
}

// sum(weight * (x - target)^2) -> scalar; weight and target are constants.
template <typename T>
int weighted_sq_loss(Graph<T>& g, int x, std::shared_ptr<const Tensor<T>> target,
                     std::shared_ptr<const Tensor<T>> weight) {
  detail::check(g.val(x).same_shape(*target) && g.val(x).same_shape(*weight),
                "weighted_sq_loss: shape mismatch");
  const Tensor<T>& vx = g.val(x);
  T acc = T(0);
  for (int64_t i = 0; i < vx.numel(); ++i) {
    const T d = vx.data[i] - target->data[i];
    acc += weight->data[i] * d * d;
  }
  Tensor<T> out = Tensor<T>::scalar(acc);
  const bool rg = g.needs_grad(x);
  const int id = static_cast<int>(g.size());
  auto bwd = [x, target, weight, id](Graph<T>& gr) {
    const T g0 = gr.grad(id).data[0];
    const Tensor<T>& vx = gr.val(x);
    Tensor<T>& gx = gr.grad(x);
    for (int64_t i = 0; i < vx.numel(); ++i)
      gx.data[i] += g0 * T(2) * weight->data[i] * (vx.data[i] - target->data[i]);
  };
  return g.add(std::move(out), rg, std::move(bwd), "weighted_sq_loss");
}

// Normalized reconstruction loss: per sample, sum over all points and dims of
// (pred - target)^2 / (alpha*|flow| + beta), divided by the number of points
// whose ground-truth flow norm exceeds motion_thresh; samples with no moving
// points contribute zero. Mean over the batch.
template <typename T>
int flow_loss(Graph<T>& g, int pred, const Tensor<T>& target, const Tensor<T>& flow, T alpha,
              T beta, T motion_thresh) {
  const Tensor<T>& vp = g.val(pred);
  detail::check(vp.ndim() == 4 && vp.dim(1) == 3, "flow_loss: pred must be [B,3,H,W]");
  detail::check(vp.same_shape(target) && vp.same_shape(flow), "flow_loss: shape mismatch");
  const int B = vp.dim(0);
  const int64_t HW = static_cast<int64_t>(vp.dim(2)) * vp.dim(3);
  auto weight = std::make_shared<Tensor<T>>(vp.shape);
  auto tgt = std::make_shared<Tensor<T>>(target);
  T total = T(0);
  for (int i = 0; i < B; ++i) {
    const size_t base = static_cast<size_t>(i) * 3 * HW;
    int64_t moving = 0;
    for (int64_t p = 0; p < HW; ++p) {
      const T fx = flow.data[base + p], fy = flow.data[base + HW + p],
              fz = flow.data[base + 2 * HW + p];
      if (std::sqrt(fx * fx + fy * fy + fz * fz) > motion_thresh) ++moving;
    }
    if (moving == 0) continue;  // weights stay zero -> sample contributes nothing
    const T inv = T(1) / (static_cast<T>(B) * static_cast<T>(moving));
    for (int64_t j = 0; j < 3 * HW; ++j) {
      const T w = inv / (alpha * std::abs(flow.data[base + j]) + beta);
      weight->data[base + j] = w;
      const T d = vp.data[base + j] - target.data[base + j];
      total += w * d * d;
    }
  }
  Tensor<T> out = Tensor<T>::scalar(total);
  const bool rg = g.needs_grad(pred);
  const int id = static_cast<int>(g.size());
  auto bwd = [pred, weight, tgt, id](Graph<T>& gr) {
    const T g0 = gr.grad(id).data[0];
    const Tensor<T>& vp = gr.val(pred);
    Tensor<T>& gp = gr.grad(pred);
    for (int64_t i = 0; i < vp.numel(); ++i)
      gp.data[i] += g0 * T(2) * weight->data[i] * (vp.data[i] - tgt->data[i]);
  };
  return g.add(std::move(out), rg, std::move(bwd), "flow_loss");
}

}  // namespace se3ctrl::ad

#pragma once

// Structured ops on top of the tensor core: convolution, bilinear sampling,
// nearest upsampling, and small composites (linear, layer_norm, clamp).

#include <algorithm>
#include <cmath>
#include <vector>

#include "bevnet/tensor.hpp"

namespace bevnet {

enum class PadMode { zeros, border };

namespace detail {

// C[m,n] += A[m,k] * B[k,n]
template <typename S>
inline void gemm_nn(int m, int n, int k, const S* A, const S* B, S* C) {
  for (int i = 0; i < m; ++i) {
    const S* arow = A + static_cast<size_t>(i) * k;
    S* crow = C + static_cast<size_t>(i) * n;
    for (int kk = 0; kk < k; ++kk) {
      S av = arow[kk];
      if (av == S(0)) continue;
      const S* brow = B + static_cast<size_t>(kk) * n;
      for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// C[m,n] += A[m,k] * B[n,k]^T
template <typename S>
inline void gemm_nt(int m, int n, int k, const S* A, const S* B, S* C) {
  for (int i = 0; i < m; ++i) {
    const S* arow = A + static_cast<size_t>(i) * k;
    S* crow = C + static_cast<size_t>(i) * n;
    for (int j = 0; j < n; ++j) {
      const S* brow = B + static_cast<size_t>(j) * k;
      S acc = S(0);
      for (int kk = 0; kk < k; ++kk) acc += arow[kk] * brow[kk];
      crow[j] += acc;
    }
  }
}

// C[m,n] += A[k,m]^T * B[k,n]
template <typename S>
inline void gemm_tn(int m, int n, int k, const S* A, const S* B, S* C) {
  for (int kk = 0; kk < k; ++kk) {
    const S* arow = A + static_cast<size_t>(kk) * m;
    const S* brow = B + static_cast<size_t>(kk) * n;
    for (int i = 0; i < m; ++i) {
      S av = arow[i];
      if (av == S(0)) continue;
      S* crow = C + static_cast<size_t>(i) * n;
      for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// Patch matrix layout: cols[(ci*kh + kr)*kw + kc][oh*OW + ow].
template <typename S>
inline void im2col(const S* x, int cin, int h, int w, int kh, int kw,
                   int stride, int pad, int oh, int ow, S* cols) {
  for (int ci = 0; ci < cin; ++ci) {
    const S* xc = x + static_cast<size_t>(ci) * h * w;
    for (int kr = 0; kr < kh; ++kr) {
      for (int kc = 0; kc < kw; ++kc) {
        S* row =
            cols + (static_cast<size_t>(ci) * kh * kw + kr * kw + kc) * oh * ow;
        for (int r = 0; r < oh; ++r) {
          int ir = r * stride - pad + kr;
          S* dst = row + static_cast<size_t>(r) * ow;
          if (ir < 0 || ir >= h) {
            std::fill(dst, dst + ow, S(0));
            continue;
          }
          const S* src = xc + static_cast<size_t>(ir) * w;
          for (int c = 0; c < ow; ++c) {
            int ic = c * stride - pad + kc;
            dst[c] = (ic >= 0 && ic < w) ? src[ic] : S(0);
          }
        }
      }
    }
  }
}

template <typename S>
inline void col2im_add(const S* cols, int cin, int h, int w, int kh, int kw,
                       int stride, int pad, int oh, int ow, S* dx) {
  for (int ci = 0; ci < cin; ++ci) {
    S* xc = dx + static_cast<size_t>(ci) * h * w;
    for (int kr = 0; kr < kh; ++kr) {
      for (int kc = 0; kc < kw; ++kc) {
        const S* row =
            cols + (static_cast<size_t>(ci) * kh * kw + kr * kw + kc) * oh * ow;
        for (int r = 0; r < oh; ++r) {
          int ir = r * stride - pad + kr;
          if (ir < 0 || ir >= h) continue;
          const S* src = row + static_cast<size_t>(r) * ow;
          S* dst = xc + static_cast<size_t>(ir) * w;
          for (int c = 0; c < ow; ++c) {
            int ic = c * stride - pad + kc;
            if (ic >= 0 && ic < w) dst[ic] += src[c];
          }
        }
      }
    }
  }
}

}  // namespace detail

// x: [N,Cin,H,W] or [Cin,H,W]; weight: [Cout,Cin,kh,kw]; bias: [Cout] or null.
template <typename S>
Tensor<S> conv2d(const Tensor<S>& x, const Tensor<S>& weight,
                 const Tensor<S>* bias, int stride, int pad) {
  bool batched = x.rank() == 4;
  if (!batched && x.rank() != 3)
    throw std::invalid_argument("conv2d: input rank must be 3 or 4, got " +
                                shape_str(x.shape()));
  if (weight.rank() != 4)
    throw std::invalid_argument("conv2d: weight must be [Cout,Cin,kh,kw], got " +
                                shape_str(weight.shape()));
  int n = batched ? x.dim(0) : 1;
  int cin = x.dim(batched ? 1 : 0);
  int h = x.dim(-2), w = x.dim(-1);
  int cout = weight.dim(0), kh = weight.dim(2), kw = weight.dim(3);
  if (weight.dim(1) != cin)
    shape_error("conv2d: channel mismatch", x.shape(), weight.shape());
  int oh = (h + 2 * pad - kh) / stride + 1;
  int ow = (w + 2 * pad - kw) / stride + 1;
  if (oh < 1 || ow < 1)
    throw std::invalid_argument("conv2d: kernel larger than padded input, " +
                                shape_str(x.shape()) + " vs " +
                                shape_str(weight.shape()));
  int ckk = cin * kh * kw;
  size_t x_step = static_cast<size_t>(cin) * h * w;
  size_t o_step = static_cast<size_t>(cout) * oh * ow;

  Shape os = batched ? Shape{n, cout, oh, ow} : Shape{cout, oh, ow};
  Tensor<S> out = Tensor<S>::zeros(os);
  {
    std::vector<S> cols(static_cast<size_t>(ckk) * oh * ow);
    for (int ni = 0; ni < n; ++ni) {
      detail::im2col(x.data() + ni * x_step, cin, h, w, kh, kw, stride, pad,
                     oh, ow, cols.data());
      detail::gemm_nn(cout, oh * ow, ckk, weight.data(), cols.data(),
                      out.data() + ni * o_step);
    }
    if (bias) {
      S* po = out.data();
      const S* pb = bias->data();
      for (int ni = 0; ni < n; ++ni)
        for (int c = 0; c < cout; ++c) {
          S bv = pb[c];
          S* dst = po + ni * o_step + static_cast<size_t>(c) * oh * ow;
          for (int i = 0; i < oh * ow; ++i) dst[i] += bv;
        }
    }
  }

  bool rg = x.requires_grad() || weight.requires_grad() ||
            (bias && bias->requires_grad());
  if (rg && active_tape<S>() != nullptr) {
    out.set_requires_grad(true);
    auto xs = x.storage();
    auto ws = weight.storage();
    auto bs = bias ? bias->storage() : nullptr;
    auto ost = out.storage();
    active_tape<S>()->record([xs, ws, bs, ost, n, cin, h, w, cout, kh, kw,
                              stride, pad, oh, ow, ckk, x_step, o_step]() {
      if (ost->grad.empty()) return;
      const S* go = ost->grad.data();
      // Patches are recomputed rather than cached; the tape would otherwise
      // hold every conv's column matrix until backward.
      std::vector<S> cols(static_cast<size_t>(ckk) * oh * ow);
      std::vector<S> dcols;
      if (xs->requires_grad) {
        xs->ensure_grad();
        dcols.resize(cols.size());
      }
      if (ws->requires_grad) ws->ensure_grad();
      for (int ni = 0; ni < n; ++ni) {
        const S* g = go + ni * o_step;
        if (ws->requires_grad || xs->requires_grad)
          detail::im2col(xs->data.data() + ni * x_step, cin, h, w, kh, kw,
                         stride, pad, oh, ow, cols.data());
        if (ws->requires_grad)
          detail::gemm_nt(cout, ckk, oh * ow, g, cols.data(),
                          ws->grad.data());
        if (xs->requires_grad) {
          std::fill(dcols.begin(), dcols.end(), S(0));
          detail::gemm_tn(ckk, oh * ow, cout, ws->data.data(), g,
                          dcols.data());
          detail::col2im_add(dcols.data(), cin, h, w, kh, kw, stride, pad, oh,
                             ow, xs->grad.data() + ni * x_step);
        }
      }
      if (bs && bs->requires_grad) {
        bs->ensure_grad();
        for (int ni = 0; ni < n; ++ni)
          for (int c = 0; c < cout; ++c) {
            const S* g = go + ni * o_step + static_cast<size_t>(c) * oh * ow;
            S acc = S(0);
            for (int i = 0; i < oh * ow; ++i) acc += g[i];
            bs->grad[c] += acc;
          }
      }
    });
  }
  return out;
}

template <typename S>
Tensor<S> conv2d(const Tensor<S>& x, const Tensor<S>& weight, int stride,
                 int pad) {
  return conv2d(x, weight, static_cast<const Tensor<S>*>(nullptr), stride,
                pad);
}

// feature: [C,H,W]; points: [P,2] rows of (row, col) in continuous pixel
// coordinates, so an integer point (i,j) returns feature[:,i,j]. Output
// [C,P]. Gradients reach both the feature map and the point coordinates.
template <typename S>
Tensor<S> bilinear_sample(const Tensor<S>& feature, const Tensor<S>& points,
                          PadMode mode) {
  if (feature.rank() != 3)
    throw std::invalid_argument("bilinear_sample: feature must be [C,H,W], got " +
                                shape_str(feature.shape()));
  if (points.rank() != 2 || points.dim(1) != 2)
    throw std::invalid_argument("bilinear_sample: points must be [P,2], got " +
                                shape_str(points.shape()));
  int C = feature.dim(0), H = feature.dim(1), W = feature.dim(2);
  int P = points.dim(0);
  Tensor<S> out = Tensor<S>::zeros({C, P});

  auto run = [C, H, W, P, mode](const S* f, const S* pts, S* o,
                                const S* go, S* df, S* dpts) {
    for (int p = 0; p < P; ++p) {
      S r = pts[2 * p], c = pts[2 * p + 1];
      bool clamped_r = false, clamped_c = false;
      if (mode == PadMode::border) {
        if (r < S(0)) { r = S(0); clamped_r = true; }
        if (r > S(H - 1)) { r = S(H - 1); clamped_r = true; }
        if (c < S(0)) { c = S(0); clamped_c = true; }
        if (c > S(W - 1)) { c = S(W - 1); clamped_c = true; }
      }
      S fr = std::floor(r), fc = std::floor(c);
      int r0 = static_cast<int>(fr), c0 = static_cast<int>(fc);
      int r1 = r0 + 1, c1 = c0 + 1;
      S wr = r - fr, wc = c - fc;
      bool in_r0 = r0 >= 0 && r0 < H, in_r1 = r1 >= 0 && r1 < H;
      bool in_c0 = c0 >= 0 && c0 < W, in_c1 = c1 >= 0 && c1 < W;
      S w00 = (S(1) - wr) * (S(1) - wc), w01 = (S(1) - wr) * wc;
      S w10 = wr * (S(1) - wc), w11 = wr * wc;
      for (int ch = 0; ch < C; ++ch) {
        const S* fch = f + static_cast<size_t>(ch) * H * W;
        S v00 = in_r0 && in_c0 ? fch[r0 * W + c0] : S(0);
        S v01 = in_r0 && in_c1 ? fch[r0 * W + c1] : S(0);
        S v10 = in_r1 && in_c0 ? fch[r1 * W + c0] : S(0);
        S v11 = in_r1 && in_c1 ? fch[r1 * W + c1] : S(0);
        if (o) o[static_cast<size_t>(ch) * P + p] =
            w00 * v00 + w01 * v01 + w10 * v10 + w11 * v11;
        if (go) {
          S g = go[static_cast<size_t>(ch) * P + p];
          if (g == S(0)) continue;
          if (df) {
            S* dfc = df + static_cast<size_t>(ch) * H * W;
            if (in_r0 && in_c0) dfc[r0 * W + c0] += g * w00;
            if (in_r0 && in_c1) dfc[r0 * W + c1] += g * w01;
            if (in_r1 && in_c0) dfc[r1 * W + c0] += g * w10;
            if (in_r1 && in_c1) dfc[r1 * W + c1] += g * w11;
          }
          if (dpts) {
            S dr = (S(1) - wc) * (v10 - v00) + wc * (v11 - v01);
            S dc = (S(1) - wr) * (v01 - v00) + wr * (v11 - v10);
            if (!clamped_r) dpts[2 * p] += g * dr;
            if (!clamped_c) dpts[2 * p + 1] += g * dc;
          }
        }
      }
    }
  };

  run(feature.data(), points.data(), out.data(), nullptr, nullptr, nullptr);

  if ((feature.requires_grad() || points.requires_grad()) &&
      active_tape<S>() != nullptr) {
    out.set_requires_grad(true);
    auto fs = feature.storage();
    auto ps = points.storage();
    auto ost = out.storage();
    active_tape<S>()->record([fs, ps, ost, run]() {
      if (ost->grad.empty()) return;
      S* df = nullptr;
      S* dp = nullptr;
      if (fs->requires_grad) {
        fs->ensure_grad();
        df = fs->grad.data();
      }
      if (ps->requires_grad) {
        ps->ensure_grad();
        dp = ps->grad.data();
      }
      run(fs->data.data(), ps->data.data(), nullptr, ost->grad.data(), df, dp);
    });
  }
  return out;
}

// Nearest-neighbor 2x upsampling over the trailing two dims ([C,H,W] or
// [N,C,H,W]).
template <typename S>
Tensor<S> upsample2x(const Tensor<S>& x) {
  if (x.rank() != 3 && x.rank() != 4)
    throw std::invalid_argument("upsample2x: rank must be 3 or 4, got " +
                                shape_str(x.shape()));
  int h = x.dim(-2), w = x.dim(-1);
  size_t planes = x.numel() / (static_cast<size_t>(h) * w);
  Shape os = x.shape();
  os[os.size() - 2] = 2 * h;
  os[os.size() - 1] = 2 * w;
  Tensor<S> out = Tensor<S>::zeros(os);
  const S* px = x.data();
  S* po = out.data();
  for (size_t pl = 0; pl < planes; ++pl) {
    const S* src = px + pl * h * w;
    S* dst = po + pl * 4 * h * w;
    for (int r = 0; r < h; ++r)
      for (int c = 0; c < w; ++c) {
        S v = src[r * w + c];
        size_t base = static_cast<size_t>(2 * r) * 2 * w + 2 * c;
        dst[base] = v;
        dst[base + 1] = v;
        dst[base + 2 * w] = v;
        dst[base + 2 * w + 1] = v;
      }
  }
  if (grad_enabled(x)) {
    out.set_requires_grad(true);
    auto xs = x.storage();
    auto ost = out.storage();
    active_tape<S>()->record([xs, ost, planes, h, w]() {
      if (ost->grad.empty()) return;
      xs->ensure_grad();
      const S* g = ost->grad.data();
      for (size_t pl = 0; pl < planes; ++pl) {
        const S* src = g + pl * 4 * h * w;
        S* dst = xs->grad.data() + pl * h * w;
        for (int r = 0; r < h; ++r)
          for (int c = 0; c < w; ++c) {
            size_t base = static_cast<size_t>(2 * r) * 2 * w + 2 * c;
            dst[r * w + c] +=
                src[base] + src[base + 1] + src[base + 2 * w] +
                src[base + 2 * w + 1];
          }
      }
    });
  }
  return out;
}

// x [.., in] * w [in, out] + b [out]
template <typename S>
Tensor<S> linear(const Tensor<S>& x, const Tensor<S>& w, const Tensor<S>& b) {
  return add(matmul(x, w), b);
}

// Normalization over the last axis.
template <typename S>
Tensor<S> layer_norm(const Tensor<S>& x, const Tensor<S>& gamma,
                     const Tensor<S>& beta, S eps = S(1e-5)) {
  int ax = x.rank() - 1;
  Tensor<S> mu = reduce_mean(x, ax, true);
  Tensor<S> xc = sub(x, mu);
  Tensor<S> var = reduce_mean(mul(xc, xc), ax, true);
  Tensor<S> xhat = div(xc, sqrt(add(var, eps)));
  return add(mul(xhat, gamma), beta);
}

// max(a,b) and min(a,b) as relu compositions; ties take the a-branch
// subgradient.
template <typename S>
Tensor<S> maximum(const Tensor<S>& a, const Tensor<S>& b) {
  return add(a, relu(sub(b, a)));
}
template <typename S>
Tensor<S> minimum(const Tensor<S>& a, const Tensor<S>& b) {
  return sub(a, relu(sub(a, b)));
}

template <typename S>
Tensor<S> clamp(const Tensor<S>& a, S lo, S hi) {
  return minimum(maximum(a, Tensor<S>::scalar(lo)), Tensor<S>::scalar(hi));
}

// Per-channel normalization over the spatial extent of [N,C,H,W] (or
// [C,H,W]); deterministic per image, no running statistics.
template <typename S>
Tensor<S> instance_norm(const Tensor<S>& x, const Tensor<S>& gamma,
                        const Tensor<S>& beta, S eps = S(1e-5)) {
  bool batched = x.rank() == 4;
  int c = x.dim(batched ? 1 : 0);
  int h = x.dim(-2), w = x.dim(-1);
  Shape flat = batched ? Shape{x.dim(0), c, h * w} : Shape{c, h * w};
  Tensor<S> xf = reshape(x, flat);
  Tensor<S> mu = reduce_mean(xf, -1, true);
  Tensor<S> xc = sub(xf, mu);
  Tensor<S> var = reduce_mean(mul(xc, xc), -1, true);
  Tensor<S> xhat = div(xc, sqrt(add(var, eps)));
  // gamma/beta are [C]; align as [C,1] against [..,C,HW].
  Tensor<S> g2 = reshape(gamma, {c, 1});
  Tensor<S> b2 = reshape(beta, {c, 1});
  return reshape(add(mul(xhat, g2), b2), x.shape());
}

}  // namespace bevnet

#pragma once

// Structured ops on top of the tensor core: convolution, pooling,
// upsampling, layer norm, fused multi-head attention, and the mask
// conditioning ops (normalize_mask / pool_masked_feature / cosine_rows).
//
// Image tensors are [C,H,W]; token tensors are [n,d] row-major.

#include <cmath>
#include <vector>

#include "cvcorr/tensor.hpp"

namespace cvcorr {

// ---------------------------------------------------------------------------
// conv2d: x[Cin,H,W] * w[Cout,Cin,kh,kw] + b[Cout] -> [Cout,H',W'].
// Implemented as im2col + gemm. Output extents must divide evenly:
// H' = (H + 2p - kh)/s + 1 with zero remainder, likewise W'.
// ---------------------------------------------------------------------------

namespace detail {

inline int conv_extent(const char* op, int in, int pad, int k, int stride) {
  const int span = in + 2 * pad - k;
  if (span < 0 || span % stride != 0)
    throw ShapeError(std::string(op) + ": extent " + std::to_string(in) + " with pad " +
                     std::to_string(pad) + ", kernel " + std::to_string(k) + ", stride " +
                     std::to_string(stride) + " does not tile evenly");
  return span / stride + 1;
}

// Scatter/gather between an image and its im2col matrix [kh*kw*Cin, H'*W'].
// Column-major over output pixels; row index runs (c, ki, kj).
template <typename S>
void im2col(const S* x, int C, int H, int W, int kh, int kw, int stride, int pad, int Ho, int Wo,
            S* col) {
  const int64_t ncols = static_cast<int64_t>(Ho) * Wo;
  int64_t r = 0;
  for (int c = 0; c < C; ++c)
    for (int ki = 0; ki < kh; ++ki)
      for (int kj = 0; kj < kw; ++kj, ++r) {
        S* dst = col + r * ncols;
        int64_t idx = 0;
        for (int oi = 0; oi < Ho; ++oi) {
          const int ii = oi * stride - pad + ki;
          for (int oj = 0; oj < Wo; ++oj, ++idx) {
            const int jj = oj * stride - pad + kj;
            dst[idx] = (ii >= 0 && ii < H && jj >= 0 && jj < W)
                           ? x[(static_cast<int64_t>(c) * H + ii) * W + jj]
                           : S(0);
          }
        }
      }
}

template <typename S>
void col2im_add(const S* col, int C, int H, int W, int kh, int kw, int stride, int pad, int Ho,
                int Wo, S* x) {
  const int64_t ncols = static_cast<int64_t>(Ho) * Wo;
  int64_t r = 0;
  for (int c = 0; c < C; ++c)
    for (int ki = 0; ki < kh; ++ki)
      for (int kj = 0; kj < kw; ++kj, ++r) {
        const S* src = col + r * ncols;
        int64_t idx = 0;
        for (int oi = 0; oi < Ho; ++oi) {
          const int ii = oi * stride - pad + ki;
          for (int oj = 0; oj < Wo; ++oj, ++idx) {
            const int jj = oj * stride - pad + kj;
            if (ii >= 0 && ii < H && jj >= 0 && jj < W)
              x[(static_cast<int64_t>(c) * H + ii) * W + jj] += src[idx];
          }
        }
      }
}

}  // namespace detail

template <typename S>
Tensor<S> conv2d(const Tensor<S>& x, const Tensor<S>& w, const Tensor<S>& b, int stride,
                 int pad) {
  if (x.ndim() != 3 || w.ndim() != 4)
    throw ShapeError("conv2d: expected x[C,H,W], w[Cout,Cin,kh,kw]");
  const int C = x.dim(0), H = x.dim(1), W = x.dim(2);
  const int Cout = w.dim(0), Cin = w.dim(1), kh = w.dim(2), kw = w.dim(3);
  if (Cin != C)
    throw ShapeError("conv2d: input channels " + std::to_string(C) + " vs weight " +
                     std::to_string(Cin));
  if (b.size() != Cout) throw ShapeError("conv2d: bias size mismatch");
  const int Ho = detail::conv_extent("conv2d", H, pad, kh, stride);
  const int Wo = detail::conv_extent("conv2d", W, pad, kw, stride);

  const int64_t krows = static_cast<int64_t>(C) * kh * kw;
  const int64_t ncols = static_cast<int64_t>(Ho) * Wo;
  std::vector<S> col(static_cast<size_t>(krows * ncols));
  detail::im2col(x.ptr(), C, H, W, kh, kw, stride, pad, Ho, Wo, col.data());

  Tensor<S> out({Cout, Ho, Wo});
  {
    CMapM<S> Wm(w.ptr(), Cout, krows);
    CMapM<S> Cm(col.data(), krows, ncols);
    MapM<S> Om(out.ptr(), Cout, ncols);
    Om.noalias() = Wm * Cm;
    for (int co = 0; co < Cout; ++co) Om.row(co).array() += b.ptr()[co];
  }
  detail::check_finite("conv2d", out);

  if (detail::tracking<S>({&x, &w, &b})) {
    out.set_requires_grad(true);
    auto xn = x.node(), wn = w.node(), bn = b.node(), on = out.node();
    // The forward column matrix is cheap to rebuild from x; keep it instead
    // of recomputing only if weight grads are needed (they always are in
    // training, so store it).
    auto col_keep = std::make_shared<std::vector<S>>(std::move(col));
    Tape<S>::active()->record(
        "conv2d", on, [xn, wn, bn, on, col_keep, C, H, W, kh, kw, stride, pad, Ho, Wo, Cout,
                       krows, ncols] {
          CMapM<S> G(on->grad.data(), Cout, ncols);
          if (bn->requires_grad) {
            bn->ensure_grad();
            // plain index-order sum: Eigen's redux picks its vector start from
            // the buffer address, which would make the rounding depend on heap
            // layout and break bit-reproducible training
            for (int co = 0; co < Cout; ++co) {
              const S* g = on->grad.data() + static_cast<int64_t>(co) * ncols;
              S acc = S(0);
              for (int64_t j = 0; j < ncols; ++j) acc += g[j];
              bn->grad[co] += acc;
            }
          }
          if (wn->requires_grad) {
            wn->ensure_grad();
            MapM<S> GW(wn->grad.data(), Cout, krows);
            CMapM<S> Cm(col_keep->data(), krows, ncols);
            GW.noalias() += G * Cm.transpose();
          }
          if (xn->requires_grad) {
            xn->ensure_grad();
            std::vector<S> gcol(static_cast<size_t>(krows * ncols));
            MapM<S> GC(gcol.data(), krows, ncols);
            CMapM<S> Wm(wn->value.data(), Cout, krows);
            GC.noalias() = Wm.transpose() * G;
            detail::col2im_add(gcol.data(), C, H, W, kh, kw, stride, pad, Ho, Wo,
                               xn->grad.data());
          }
        });
  }
  return out;
}

// ---------------------------------------------------------------------------
// avg_pool2d with square window k and stride k; extents must divide evenly.
// ---------------------------------------------------------------------------

template <typename S>
Tensor<S> avg_pool2d(const Tensor<S>& x, int k) {
  if (x.ndim() != 3) throw ShapeError("avg_pool2d: expected [C,H,W]");
  const int C = x.dim(0), H = x.dim(1), W = x.dim(2);
  if (k <= 0 || H % k != 0 || W % k != 0)
    throw ShapeError("avg_pool2d: " + std::to_string(H) + "x" + std::to_string(W) +
                     " not divisible by window " + std::to_string(k));
  const int Ho = H / k, Wo = W / k;
  Tensor<S> out({C, Ho, Wo});
  const S inv = S(1) / static_cast<S>(k * k);
  for (int c = 0; c < C; ++c)
    for (int oi = 0; oi < Ho; ++oi)
      for (int oj = 0; oj < Wo; ++oj) {
        S acc = S(0);
        for (int di = 0; di < k; ++di)
          for (int dj = 0; dj < k; ++dj) acc += x(c, oi * k + di, oj * k + dj);
        out(c, oi, oj) = acc * inv;
      }
  detail::check_finite("avg_pool2d", out);
  if (detail::tracking<S>({&x})) {
    out.set_requires_grad(true);
    auto xn = x.node(), on = out.node();
    Tape<S>::active()->record("avg_pool2d", on, [xn, on, C, H, W, Ho, Wo, k, inv] {
      xn->ensure_grad();
      for (int c = 0; c < C; ++c)
        for (int oi = 0; oi < Ho; ++oi)
          for (int oj = 0; oj < Wo; ++oj) {
            const S g = on->grad[(static_cast<size_t>(c) * Ho + oi) * Wo + oj] * inv;
            for (int di = 0; di < k; ++di)
              for (int dj = 0; dj < k; ++dj)
                xn->grad[(static_cast<size_t>(c) * H + oi * k + di) * W + oj * k + dj] += g;
          }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// bilinear_upsample to (Ho, Wo) with half-pixel centers: source coordinate
// sx = (ox + 0.5) * W / Wo - 0.5, clamped to the valid range.
// ---------------------------------------------------------------------------

template <typename S>
Tensor<S> bilinear_upsample(const Tensor<S>& x, int Ho, int Wo) {
  if (x.ndim() != 3) throw ShapeError("bilinear_upsample: expected [C,H,W]");
  const int C = x.dim(0), H = x.dim(1), W = x.dim(2);
  if (Ho <= 0 || Wo <= 0) throw ShapeError("bilinear_upsample: bad target size");
  Tensor<S> out({C, Ho, Wo});

  // Precompute per-axis neighbor indices and weights once.
  std::vector<int> i0(Ho), i1(Ho), j0(Wo), j1(Wo);
  std::vector<S> wi(Ho), wj(Wo);  // weight of the upper neighbor (i1/j1)
  auto axis = [](int n_in, int n_out, std::vector<int>& a0, std::vector<int>& a1,
                 std::vector<S>& w) {
    for (int o = 0; o < n_out; ++o) {
      double src = (o + 0.5) * static_cast<double>(n_in) / n_out - 0.5;
      if (src < 0) src = 0;
      if (src > n_in - 1) src = n_in - 1;
      const int lo = static_cast<int>(std::floor(src));
      a0[o] = lo;
      a1[o] = lo + 1 < n_in ? lo + 1 : lo;
      w[o] = static_cast<S>(src - lo);
    }
  };
  axis(H, Ho, i0, i1, wi);
  axis(W, Wo, j0, j1, wj);

  for (int c = 0; c < C; ++c)
    for (int oi = 0; oi < Ho; ++oi)
      for (int oj = 0; oj < Wo; ++oj) {
        const S a = x(c, i0[oi], j0[oj]), b = x(c, i0[oi], j1[oj]);
        const S d = x(c, i1[oi], j0[oj]), e = x(c, i1[oi], j1[oj]);
        const S top = a + (b - a) * wj[oj];
        const S bot = d + (e - d) * wj[oj];
        out(c, oi, oj) = top + (bot - top) * wi[oi];
      }
  detail::check_finite("bilinear_upsample", out);

  if (detail::tracking<S>({&x})) {
    out.set_requires_grad(true);
    auto xn = x.node(), on = out.node();
    Tape<S>::active()->record("bilinear_upsample", on,
                              [xn, on, C, H, W, Ho, Wo, i0, i1, j0, j1, wi, wj] {
                                xn->ensure_grad();
                                auto gx = [&](int c, int i, int j) -> S& {
                                  return xn->grad[(static_cast<size_t>(c) * H + i) * W + j];
                                };
                                for (int c = 0; c < C; ++c)
                                  for (int oi = 0; oi < Ho; ++oi)
                                    for (int oj = 0; oj < Wo; ++oj) {
                                      const S g =
                                          on->grad[(static_cast<size_t>(c) * Ho + oi) * Wo + oj];
                                      const S u = wi[oi], v = wj[oj];
                                      gx(c, i0[oi], j0[oj]) += g * (S(1) - u) * (S(1) - v);
                                      gx(c, i0[oi], j1[oj]) += g * (S(1) - u) * v;
                                      gx(c, i1[oi], j0[oj]) += g * u * (S(1) - v);
                                      gx(c, i1[oi], j1[oj]) += g * u * v;
                                    }
                              });
  }
  return out;
}

// ---------------------------------------------------------------------------
// layer_norm over the last axis of [n,d] with population variance:
//   y = (x - mu) / sqrt(var + eps) * gamma + beta.
// ---------------------------------------------------------------------------

template <typename S>
Tensor<S> layer_norm(const Tensor<S>& x, const Tensor<S>& gamma, const Tensor<S>& beta,
                     S eps = S(1e-5)) {
  if (x.ndim() != 2 || gamma.size() != x.dim(1) || beta.size() != x.dim(1))
    throw ShapeError("layer_norm: expected x[n,d], gamma[d], beta[d]");
  const int n = x.dim(0), d = x.dim(1);
  Tensor<S> out(x.shape());
  // Save per-row inverse stddev and the normalized values for backward.
  auto inv_std = std::make_shared<std::vector<S>>(n);
  auto xhat = std::make_shared<std::vector<S>>(static_cast<size_t>(n) * d);
  for (int i = 0; i < n; ++i) {
    S mu = S(0);
    for (int j = 0; j < d; ++j) mu += x(i, j);
    mu /= static_cast<S>(d);
    S var = S(0);
    for (int j = 0; j < d; ++j) {
      const S c = x(i, j) - mu;
      var += c * c;
    }
    var /= static_cast<S>(d);
    const S is = S(1) / std::sqrt(var + eps);
    (*inv_std)[i] = is;
    for (int j = 0; j < d; ++j) {
      const S xh = (x(i, j) - mu) * is;
      (*xhat)[static_cast<size_t>(i) * d + j] = xh;
      out(i, j) = xh * gamma.ptr()[j] + beta.ptr()[j];
    }
  }
  detail::check_finite("layer_norm", out);

  if (detail::tracking<S>({&x, &gamma, &beta})) {
    out.set_requires_grad(true);
    auto xn = x.node(), gn = gamma.node(), bn = beta.node(), on = out.node();
    Tape<S>::active()->record("layer_norm", on, [xn, gn, bn, on, inv_std, xhat, n, d] {
      for (int i = 0; i < n; ++i) {
        const S* g = on->grad.data() + static_cast<size_t>(i) * d;
        const S* xh = xhat->data() + static_cast<size_t>(i) * d;
        if (gn->requires_grad) {
          gn->ensure_grad();
          for (int j = 0; j < d; ++j) gn->grad[j] += g[j] * xh[j];
        }
        if (bn->requires_grad) {
          bn->ensure_grad();
          for (int j = 0; j < d; ++j) bn->grad[j] += g[j];
        }
        if (xn->requires_grad) {
          xn->ensure_grad();
          // dL/dxhat_j = g_j * gamma_j; then the standard layer-norm pullback
          // dx = inv_std/d * (d*dxh - sum(dxh) - xhat * sum(dxh*xhat)).
          S sum_dxh = S(0), sum_dxh_xh = S(0);
          for (int j = 0; j < d; ++j) {
            const S dxh = g[j] * gn->value[j];
            sum_dxh += dxh;
            sum_dxh_xh += dxh * xh[j];
          }
          S* gx = xn->grad.data() + static_cast<size_t>(i) * d;
          const S scale = (*inv_std)[i] / static_cast<S>(d);
          for (int j = 0; j < d; ++j) {
            const S dxh = g[j] * gn->value[j];
            gx[j] += scale * (static_cast<S>(d) * dxh - sum_dxh - xh[j] * sum_dxh_xh);
          }
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Fused multi-head self-attention core. Inputs are the already-projected
// Q, K, V of shape [n, d_model] carved into `heads` slices of width dh.
// Per head: A = softmax(Q K^T / sqrt(dh)), O = A V; heads re-concatenated.
//
// Backward per head with dO:
//   dV = A^T dO
//   dA = dO V^T
//   dS = A o (dA - rowsum(dA o A))        (softmax Jacobian, S = scores)
//   dQ = dS K / sqrt(dh), dK = dS^T Q / sqrt(dh).
// ---------------------------------------------------------------------------

template <typename S>
Tensor<S> softmax_attention(const Tensor<S>& q, const Tensor<S>& k, const Tensor<S>& v,
                            int heads) {
  if (q.ndim() != 2 || k.shape() != q.shape() || v.shape() != q.shape())
    throw ShapeError("softmax_attention: Q, K, V must share shape [n,d]");
  const int n = q.dim(0), d = q.dim(1);
  if (heads <= 0 || d % heads != 0)
    throw ShapeError("softmax_attention: d=" + std::to_string(d) + " not divisible by heads=" +
                     std::to_string(heads));
  const int dh = d / heads;
  const S inv_sqrt_dh = S(1) / std::sqrt(static_cast<S>(dh));

  Tensor<S> out({n, d});
  // Keep all attention matrices for backward: heads x [n,n].
  auto attn = std::make_shared<std::vector<S>>(static_cast<size_t>(heads) * n * n);

  using StrideT = Eigen::Stride<Eigen::Dynamic, 1>;
  auto head_block = [&](const S* base, int h) {
    return Eigen::Map<const MatRM<S>, 0, StrideT>(base + static_cast<size_t>(h) * dh, n, dh,
                                                  StrideT(d, 1));
  };

  for (int h = 0; h < heads; ++h) {
    auto Q = head_block(q.ptr(), h);
    auto K = head_block(k.ptr(), h);
    auto V = head_block(v.ptr(), h);
    MapM<S> A(attn->data() + static_cast<size_t>(h) * n * n, n, n);
    A.noalias() = Q * K.transpose();
    A *= inv_sqrt_dh;
    // Row-wise stable softmax.
    for (int i = 0; i < n; ++i) {
      S mx = A(i, 0);
      for (int j = 1; j < n; ++j) mx = std::max(mx, A(i, j));
      S denom = S(0);
      for (int j = 0; j < n; ++j) {
        const S e = std::exp(A(i, j) - mx);
        A(i, j) = e;
        denom += e;
      }
      const S inv = S(1) / denom;
      for (int j = 0; j < n; ++j) A(i, j) *= inv;
    }
    Eigen::Map<MatRM<S>, 0, StrideT> O(out.ptr() + static_cast<size_t>(h) * dh, n, dh,
                                       StrideT(d, 1));
    O.noalias() = A * V;
  }
  detail::check_finite("softmax_attention", out);

  if (detail::tracking<S>({&q, &k, &v})) {
    out.set_requires_grad(true);
    auto qn = q.node(), kn = k.node(), vn = v.node(), on = out.node();
    Tape<S>::active()->record(
        "softmax_attention", on, [qn, kn, vn, on, attn, heads, n, d, dh, inv_sqrt_dh] {
          qn->ensure_grad();
          kn->ensure_grad();
          vn->ensure_grad();
          using StrideT2 = Eigen::Stride<Eigen::Dynamic, 1>;
          auto cblock = [&](const S* base, int h) {
            return Eigen::Map<const MatRM<S>, 0, StrideT2>(base + static_cast<size_t>(h) * dh, n,
                                                           dh, StrideT2(d, 1));
          };
          auto block = [&](S* base, int h) {
            return Eigen::Map<MatRM<S>, 0, StrideT2>(base + static_cast<size_t>(h) * dh, n, dh,
                                                     StrideT2(d, 1));
          };
          for (int h = 0; h < heads; ++h) {
            CMapM<S> A(attn->data() + static_cast<size_t>(h) * n * n, n, n);
            auto Q = cblock(qn->value.data(), h);
            auto K = cblock(kn->value.data(), h);
            auto V = cblock(vn->value.data(), h);
            auto dO = cblock(on->grad.data(), h);

            if (vn->requires_grad) block(vn->grad.data(), h).noalias() += A.transpose() * dO;

            MatRM<S> dA(n, n);
            dA.noalias() = dO * V.transpose();
            MatRM<S> dS(n, n);
            for (int i = 0; i < n; ++i) {
              S dot = S(0);
              for (int j = 0; j < n; ++j) dot += dA(i, j) * A(i, j);
              for (int j = 0; j < n; ++j) dS(i, j) = A(i, j) * (dA(i, j) - dot);
            }
            dS *= inv_sqrt_dh;
            if (qn->requires_grad) block(qn->grad.data(), h).noalias() += dS * K;
            if (kn->requires_grad) block(kn->grad.data(), h).noalias() += dS.transpose() * Q;
          }
        });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Mask conditioning ops.
// ---------------------------------------------------------------------------

// Area-average a [H,W] mask down to [H/p, W/p], then normalize so the
// result sums to ~1: M~ = pooled / (sum(pooled) + tau). Differentiable;
// soft inputs are expected on the cycle pass.
template <typename S>
Tensor<S> normalize_mask(const Tensor<S>& m, int p, S tau = S(1e-6)) {
  if (m.ndim() != 2) throw ShapeError("normalize_mask: expected [H,W]");
  const int H = m.dim(0), W = m.dim(1);
  if (p <= 0 || H % p != 0 || W % p != 0)
    throw ShapeError("normalize_mask: mask " + shape_str(m.shape()) + " not divisible by patch " +
                     std::to_string(p));
  Tensor<S> img = reshape(m, {1, H, W});
  Tensor<S> pooled = avg_pool2d(img, p);                       // [1, H/p, W/p]
  Tensor<S> flat = reshape(pooled, {H / p, W / p});
  Tensor<S> denom = add_scalar(sum_all(flat), tau);
  return div(flat, denom);
}

// z = sum_ij M~[i,j] * F[:,i,j] for F[C,h,w], M~[h,w]; returns [C].
// Plain loops so the forward matches a brute-force oracle bit for bit.
template <typename S>
Tensor<S> pool_masked_feature(const Tensor<S>& f, const Tensor<S>& m) {
  if (f.ndim() != 3 || m.ndim() != 2 || f.dim(1) != m.dim(0) || f.dim(2) != m.dim(1))
    throw ShapeError("pool_masked_feature: F" + shape_str(f.shape()) + " vs M" +
                     shape_str(m.shape()));
  const int C = f.dim(0), h = f.dim(1), w = f.dim(2);
  Tensor<S> out({C});
  for (int c = 0; c < C; ++c) {
    S acc = S(0);
    for (int i = 0; i < h; ++i)
      for (int j = 0; j < w; ++j) acc += m(i, j) * f(c, i, j);
    out(c) = acc;
  }
  detail::check_finite("pool_masked_feature", out);
  if (detail::tracking<S>({&f, &m})) {
    out.set_requires_grad(true);
    auto fn = f.node(), mn = m.node(), on = out.node();
    Tape<S>::active()->record("pool_masked_feature", on, [fn, mn, on, C, h, w] {
      for (int c = 0; c < C; ++c) {
        const S g = on->grad[c];
        if (fn->requires_grad) {
          fn->ensure_grad();
          for (int i = 0; i < h; ++i)
            for (int j = 0; j < w; ++j)
              fn->grad[(static_cast<size_t>(c) * h + i) * w + j] +=
                  g * mn->value[static_cast<size_t>(i) * w + j];
        }
        if (mn->requires_grad) {
          mn->ensure_grad();
          for (int i = 0; i < h; ++i)
            for (int j = 0; j < w; ++j)
              mn->grad[static_cast<size_t>(i) * w + j] +=
                  g * fn->value[(static_cast<size_t>(c) * h + i) * w + j];
        }
      }
    });
  }
  return out;
}

// Cosine similarity between a single query vector q[d] and each row of
// x[n,d], returning [n]. Rows (or a query) with norm below `guard` get
// cosine 0 and pass no gradient.
template <typename S>
Tensor<S> cosine_rows(const Tensor<S>& q, const Tensor<S>& x, S guard = S(1e-12)) {
  if (x.ndim() != 2 || q.size() != x.dim(1))
    throw ShapeError("cosine_rows: q" + shape_str(q.shape()) + " vs x" + shape_str(x.shape()));
  const int n = x.dim(0), d = x.dim(1);
  Tensor<S> out({n});
  S qn2 = S(0);
  for (int j = 0; j < d; ++j) qn2 += q.ptr()[j] * q.ptr()[j];
  const S qn = std::sqrt(qn2);
  auto row_norms = std::make_shared<std::vector<S>>(n);
  for (int i = 0; i < n; ++i) {
    S rn2 = S(0), dot = S(0);
    for (int j = 0; j < d; ++j) {
      rn2 += x(i, j) * x(i, j);
      dot += q.ptr()[j] * x(i, j);
    }
    const S rn = std::sqrt(rn2);
    (*row_norms)[i] = rn;
    out(i) = (qn < guard || rn < guard) ? S(0) : dot / (qn * rn);
  }
  detail::check_finite("cosine_rows", out);
  if (detail::tracking<S>({&q, &x})) {
    out.set_requires_grad(true);
    auto qnode = q.node(), xnode = x.node(), on = out.node();
    Tape<S>::active()->record("cosine_rows", on, [qnode, xnode, on, row_norms, qn, guard, n, d] {
      if (qn < guard) return;
      const S* qv = qnode->value.data();
      for (int i = 0; i < n; ++i) {
        const S rn = (*row_norms)[i];
        if (rn < guard) continue;
        const S g = on->grad[i];
        if (g == S(0)) continue;
        const S* xv = xnode->value.data() + static_cast<size_t>(i) * d;
        const S cos_i = on->value[i];
        // d cos / dq = x/(|q||x|) - cos * q/|q|^2 ; symmetric for x.
        if (qnode->requires_grad) {
          qnode->ensure_grad();
          for (int j = 0; j < d; ++j)
            qnode->grad[j] += g * (xv[j] / (qn * rn) - cos_i * qv[j] / (qn * qn));
        }
        if (xnode->requires_grad) {
          xnode->ensure_grad();
          S* gx = xnode->grad.data() + static_cast<size_t>(i) * d;
          for (int j = 0; j < d; ++j)
            gx[j] += g * (qv[j] / (qn * rn) - cos_i * xv[j] / (rn * rn));
        }
      }
    });
  }
  return out;
}

}  // namespace cvcorr

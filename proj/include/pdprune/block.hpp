#pragma once

#include <cmath>
#include <vector>

#include "pdprune/errors.hpp"
#include "pdprune/linalg.hpp"
#include "pdprune/model.hpp"

namespace pdprune {

struct BlockShape {
  int d = 0;
  int n_heads = 0;
  int head_dim = 0;
  int d_ff = 0;

  static BlockShape of(const ModelConfig& c) {
    return {c.d_model, c.n_heads, c.head_dim, c.d_ff()};
  }
};

constexpr double kRmsEps = 1e-6;

// Rotary embedding indexed by the absolute position; pairs (2j, 2j+1) within
// each head are rotated, an odd trailing dimension is left alone.
inline void apply_rotary(double* x, int head_dim, int pos) {
  for (int j = 0; 2 * j + 1 < head_dim; ++j) {
    double theta = pos * std::pow(10000.0, -2.0 * j / head_dim);
    double c = std::cos(theta), s = std::sin(theta);
    double a = x[2 * j], b = x[2 * j + 1];
    x[2 * j] = a * c - b * s;
    x[2 * j + 1] = a * s + b * c;
  }
}

inline void apply_rotary_inverse(double* x, int head_dim, int pos) {
  for (int j = 0; 2 * j + 1 < head_dim; ++j) {
    double theta = pos * std::pow(10000.0, -2.0 * j / head_dim);
    double c = std::cos(theta), s = std::sin(theta);
    double a = x[2 * j], b = x[2 * j + 1];
    x[2 * j] = a * c + b * s;
    x[2 * j + 1] = -a * s + b * c;
  }
}

// y = g ∘ x / rms(x); returns the rms so the backward pass can reuse it.
inline void rmsnorm_row(const double* x, const Vec& g, double* y, int d, double* rms_out) {
  double ms = 0.0;
  for (int i = 0; i < d; ++i) ms += x[i] * x[i];
  double r = std::sqrt(ms / d + kRmsEps);
  for (int i = 0; i < d; ++i) y[i] = g[i] * x[i] / r;
  if (rms_out) *rms_out = r;
}

// Accumulates dx and dg for one row of rmsnorm.
inline void rmsnorm_backward_row(const double* x, const Vec& g, double r, const double* dy,
                                 double* dx_acc, double* dg_acc, int d) {
  double s = 0.0;  // Σ (g∘dy)·x
  for (int i = 0; i < d; ++i) s += g[i] * dy[i] * x[i];
  double c = s / (d * r * r * r);
  for (int i = 0; i < d; ++i) {
    dx_acc[i] += g[i] * dy[i] / r - x[i] * c;
    dg_acc[i] += dy[i] * x[i] / r;
  }
}

inline double silu(double u) { return u / (1.0 + std::exp(-u)); }
inline double silu_grad(double u) {
  double sg = 1.0 / (1.0 + std::exp(-u));
  return sg * (1.0 + u * (1.0 - sg));
}

// Forward intermediates kept for the backward pass.
struct BlockWorkspace {
  Mat x, xn1;
  Vec rms1;
  Mat q, k, v;               // q,k post-rotary
  std::vector<Mat> probs;    // per head, N×N, causal rows
  Mat attn_concat, h1, xn2;
  Vec rms2;
  Mat u, su, out;
};

// One block applied to a whole (sub)sequence with causal attention. Positions
// are the absolute token indices used for rotary. Optionally records the
// key/value rows produced (kv_k/kv_v, rotated keys) and the attention
// distribution averaged over query rows (attn_avg, n_heads × N).
inline Mat block_forward(const BlockParams& p, const BlockShape& sh, const Mat& x,
                         const std::vector<int>& positions, BlockWorkspace* ws = nullptr,
                         Mat* kv_k = nullptr, Mat* kv_v = nullptr, Mat* attn_avg = nullptr) {
  const int n = x.rows;
  const int d = sh.d;
  const int hd = sh.head_dim;

  Mat xn1(n, d);
  Vec rms1(n);
  for (int t = 0; t < n; ++t) rmsnorm_row(x.row(t), p.g1, xn1.row(t), d, &rms1[t]);

  Mat q = matmul(xn1, p.wq);
  Mat k = matmul(xn1, p.wk);
  Mat v = matmul(xn1, p.wv);
  for (int t = 0; t < n; ++t) {
    for (int h = 0; h < sh.n_heads; ++h) {
      apply_rotary(q.row(t) + h * hd, hd, positions[t]);
      apply_rotary(k.row(t) + h * hd, hd, positions[t]);
    }
  }

  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(hd));
  Mat attn_concat(n, d);
  std::vector<Mat> probs;
  if (ws) probs.assign(sh.n_heads, Mat(n, n));
  if (attn_avg) *attn_avg = Mat(sh.n_heads, n);
  Vec row(n);
  for (int h = 0; h < sh.n_heads; ++h) {
    for (int t = 0; t < n; ++t) {
      const double* qt = q.row(t) + h * hd;
      for (int u = 0; u <= t; ++u) row[u] = dot(qt, k.row(u) + h * hd, hd) * inv_sqrt;
      softmax_inplace(row.data(), t + 1);
      double* ot = attn_concat.row(t) + h * hd;
      for (int u = 0; u <= t; ++u) {
        const double* vu = v.row(u) + h * hd;
        for (int i = 0; i < hd; ++i) ot[i] += row[u] * vu[i];
      }
      if (ws)
        for (int u = 0; u <= t; ++u) probs[h](t, u) = row[u];
      if (attn_avg)
        for (int u = 0; u <= t; ++u) (*attn_avg)(h, u) += row[u] / n;
    }
  }

  Mat attn_out = matmul(attn_concat, p.wo);
  Mat h1(n, d);
  for (std::size_t i = 0; i < h1.a.size(); ++i) h1.a[i] = x.a[i] + attn_out.a[i];

  Mat xn2(n, d);
  Vec rms2(n);
  for (int t = 0; t < n; ++t) rmsnorm_row(h1.row(t), p.g2, xn2.row(t), d, &rms2[t]);
  Mat u = matmul(xn2, p.w1);
  Mat su(n, sh.d_ff);
  for (std::size_t i = 0; i < u.a.size(); ++i) su.a[i] = silu(u.a[i]);
  Mat mlp = matmul(su, p.w2);
  Mat out(n, d);
  for (std::size_t i = 0; i < out.a.size(); ++i) out.a[i] = h1.a[i] + mlp.a[i];

  if (kv_k) *kv_k = k;
  if (kv_v) *kv_v = v;
  if (ws) {
    ws->x = x;
    ws->xn1 = std::move(xn1);
    ws->rms1 = std::move(rms1);
    ws->q = std::move(q);
    ws->k = std::move(k);
    ws->v = std::move(v);
    ws->probs = std::move(probs);
    ws->attn_concat = std::move(attn_concat);
    ws->h1 = std::move(h1);
    ws->xn2 = std::move(xn2);
    ws->rms2 = std::move(rms2);
    ws->u = std::move(u);
    ws->su = std::move(su);
    ws->out = out;
  }
  return out;
}

// Gradients have the same layout as the parameters.
using BlockGrads = BlockParams;

inline void accumulate_matmul_grads(const Mat& lhs, const Mat& dout, const Mat& w,
                                    Mat& dw_acc, Mat& dlhs_acc) {
  // dw += lhsᵀ·dout ; dlhs += dout·wᵀ
  for (int r = 0; r < lhs.rows; ++r) {
    const double* lr = lhs.row(r);
    const double* dr = dout.row(r);
    double* dlr = dlhs_acc.row(r);
    for (int k = 0; k < lhs.cols; ++k) {
      double* dwk = dw_acc.row(k);
      const double* wk = w.row(k);
      double acc = 0.0;
      for (int c = 0; c < dout.cols; ++c) {
        dwk[c] += lr[k] * dr[c];
        acc += dr[c] * wk[c];
      }
      dlr[k] += acc;
    }
  }
}

// Backward through one block; returns dL/dx and accumulates into `g`.
inline Mat block_backward(const BlockParams& p, const BlockShape& sh,
                          const BlockWorkspace& ws, const std::vector<int>& positions,
                          const Mat& dout, BlockGrads& g) {
  const int n = ws.x.rows;
  const int d = sh.d;
  const int hd = sh.head_dim;

  // MLP branch: out = h1 + silu(xn2·w1)·w2
  Mat dh1 = dout;  // residual path
  Mat dsu(n, sh.d_ff);
  accumulate_matmul_grads(ws.su, dout, p.w2, g.w2, dsu);
  Mat du(n, sh.d_ff);
  for (std::size_t i = 0; i < du.a.size(); ++i) du.a[i] = dsu.a[i] * silu_grad(ws.u.a[i]);
  Mat dxn2(n, d);
  accumulate_matmul_grads(ws.xn2, du, p.w1, g.w1, dxn2);
  for (int t = 0; t < n; ++t)
    rmsnorm_backward_row(ws.h1.row(t), p.g2, ws.rms2[t], dxn2.row(t), dh1.row(t),
                         g.g2.data(), d);

  // Attention branch: h1 = x + (attn_concat·wo)
  Mat dx = dh1;  // residual path
  Mat dconcat(n, d);
  accumulate_matmul_grads(ws.attn_concat, dh1, p.wo, g.wo, dconcat);

  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(hd));
  Mat dq(n, d), dk(n, d), dv(n, d);
  Vec dp(n), ds(n);
  for (int h = 0; h < sh.n_heads; ++h) {
    const Mat& pr = ws.probs[h];
    for (int t = 0; t < n; ++t) {
      const double* dot_ = dconcat.row(t) + h * hd;
      double inner = 0.0;
      for (int u = 0; u <= t; ++u) {
        dp[u] = dot(dot_, ws.v.row(u) + h * hd, hd);
        inner += pr(t, u) * dp[u];
      }
      for (int u = 0; u <= t; ++u) ds[u] = pr(t, u) * (dp[u] - inner);
      double* dqt = dq.row(t) + h * hd;
      const double* qt = ws.q.row(t) + h * hd;
      for (int u = 0; u <= t; ++u) {
        const double* ku = ws.k.row(u) + h * hd;
        double* dku = dk.row(u) + h * hd;
        double* dvu = dv.row(u) + h * hd;
        double w = ds[u] * inv_sqrt;
        double pw = pr(t, u);
        for (int i = 0; i < hd; ++i) {
          dqt[i] += w * ku[i];
          dku[i] += w * qt[i];
          dvu[i] += pw * dot_[i];
        }
      }
    }
  }
  for (int t = 0; t < n; ++t) {
    for (int h = 0; h < sh.n_heads; ++h) {
      apply_rotary_inverse(dq.row(t) + h * hd, hd, positions[t]);
      apply_rotary_inverse(dk.row(t) + h * hd, hd, positions[t]);
    }
  }

  Mat dxn1(n, d);
  accumulate_matmul_grads(ws.xn1, dq, p.wq, g.wq, dxn1);
  accumulate_matmul_grads(ws.xn1, dk, p.wk, g.wk, dxn1);
  accumulate_matmul_grads(ws.xn1, dv, p.wv, g.wv, dxn1);
  for (int t = 0; t < n; ++t)
    rmsnorm_backward_row(ws.x.row(t), p.g1, ws.rms1[t], dxn1.row(t), dx.row(t),
                         g.g1.data(), d);
  return dx;
}

struct BlockSample {
  Mat inputs;                // N × d
  std::vector<int> positions;
  Mat targets;               // N × d
};

// MSE between the block's output on the inputs and the targets, plus
// gradients w.r.t. every block parameter.
inline std::pair<double, BlockGrads> block_loss_and_grad(
    const BlockParams& params, const BlockShape& sh, const std::vector<BlockSample>& samples) {
  if (samples.empty()) throw ArgumentError("block_loss_and_grad: no samples");
  BlockGrads grads = params;
  grads.for_each_tensor([](Mat& m) { std::fill(m.a.begin(), m.a.end(), 0.0); });
  grads.for_each_vec([](Vec& v) { std::fill(v.begin(), v.end(), 0.0); });

  std::size_t total = 0;
  for (const auto& s : samples) {
    if (s.inputs.rows != s.targets.rows || s.inputs.cols != s.targets.cols ||
        s.inputs.cols != sh.d || static_cast<int>(s.positions.size()) != s.inputs.rows)
      throw ArgumentError("block_loss_and_grad: inconsistent sample shapes");
    total += s.inputs.a.size();
  }

  double loss = 0.0;
  for (const auto& s : samples) {
    BlockWorkspace ws;
    Mat out = block_forward(params, sh, s.inputs, s.positions, &ws);
    Mat dout(out.rows, out.cols);
    for (std::size_t i = 0; i < out.a.size(); ++i) {
      double r = out.a[i] - s.targets.a[i];
      loss += r * r;
      dout.a[i] = 2.0 * r / static_cast<double>(total);
    }
    block_backward(params, sh, ws, s.positions, dout, grads);
  }
  loss /= static_cast<double>(total);
  if (!std::isfinite(loss)) throw NumericError("block_loss_and_grad: non-finite loss");
  return {loss, std::move(grads)};
}

}  // namespace pdprune

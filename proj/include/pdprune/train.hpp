#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "pdprune/block.hpp"
#include "pdprune/transformer.hpp"

namespace pdprune {

struct ModelGrads {
  Mat embed;
  Vec g_final;
  Mat w_out;
  std::vector<BlockGrads> blocks;
};

inline ModelGrads make_zero_grads(const TransformerModel& m) {
  ModelGrads g;
  g.embed = Mat(m.embed.rows, m.embed.cols);
  g.g_final.assign(m.g_final.size(), 0.0);
  g.w_out = Mat(m.w_out.rows, m.w_out.cols);
  for (const auto& b : m.blocks) {
    BlockGrads bg = b;
    bg.for_each_tensor([](Mat& t) { std::fill(t.a.begin(), t.a.end(), 0.0); });
    bg.for_each_vec([](Vec& v) { std::fill(v.begin(), v.end(), 0.0); });
    g.blocks.push_back(std::move(bg));
  }
  return g;
}

template <typename F>
inline void for_each_chunk(TransformerModel& m, ModelGrads& g, F&& f) {
  f(m.embed.a.data(), g.embed.a.data(), m.embed.a.size());
  f(m.g_final.data(), g.g_final.data(), m.g_final.size());
  f(m.w_out.a.data(), g.w_out.a.data(), m.w_out.a.size());
  for (std::size_t i = 0; i < m.blocks.size(); ++i) {
    BlockParams& b = m.blocks[i];
    BlockGrads& bg = g.blocks[i];
    Mat* bt[] = {&b.wq, &b.wk, &b.wv, &b.wo, &b.w1, &b.w2};
    Mat* gt[] = {&bg.wq, &bg.wk, &bg.wv, &bg.wo, &bg.w1, &bg.w2};
    for (int j = 0; j < 6; ++j) f(bt[j]->a.data(), gt[j]->a.data(), bt[j]->a.size());
    f(b.g1.data(), bg.g1.data(), b.g1.size());
    f(b.g2.data(), bg.g2.data(), b.g2.size());
  }
}

struct AdamState {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::vector<double> m, v;
  std::int64_t t = 0;

  void step(TransformerModel& model, ModelGrads& grads) {
    std::size_t total = 0;
    for_each_chunk(model, grads, [&](double*, double*, std::size_t n) { total += n; });
    if (m.empty()) {
      m.assign(total, 0.0);
      v.assign(total, 0.0);
    }
    ++t;
    double c1 = 1.0 - std::pow(beta1, static_cast<double>(t));
    double c2 = 1.0 - std::pow(beta2, static_cast<double>(t));
    std::size_t off = 0;
    for_each_chunk(model, grads, [&](double* p, double* g, std::size_t n) {
      for (std::size_t i = 0; i < n; ++i) {
        double gi = g[i];
        m[off + i] = beta1 * m[off + i] + (1.0 - beta1) * gi;
        v[off + i] = beta2 * v[off + i] + (1.0 - beta2) * gi * gi;
        double mh = m[off + i] / c1;
        double vh = v[off + i] / c2;
        p[i] -= lr * mh / (std::sqrt(vh) + eps);
      }
      off += n;
    });
  }
};

// Mean next-token cross-entropy of the view on the calibration set.
inline double cross_entropy(const ModelView& view, const std::vector<TokenSeq>& calibration) {
  if (calibration.empty()) throw ArgumentError("empty calibration set");
  PrefillOptions opt;
  opt.collect_kv = false;
  double total = 0.0;
  std::size_t count = 0;
  for (const auto& seq : calibration) {
    Mat logits = forward_prefill(view, seq, opt).logits;
    const int n = static_cast<int>(seq.size());
    for (int t = 0; t + 1 < n; ++t) {
      Vec row(logits.row(t), logits.row(t) + logits.cols);
      softmax_inplace(row.data(), logits.cols);
      total -= std::log(std::max(row[static_cast<std::size_t>(seq[t + 1])], 1e-300));
      ++count;
    }
  }
  return total / static_cast<double>(count);
}

// Full-batch gradient of the next-token cross-entropy on the base model.
inline double model_loss_and_grad(const TransformerModel& m,
                                  const std::vector<TokenSeq>& calibration, ModelGrads& grads) {
  const ModelConfig& c = m.config;
  const BlockShape sh = BlockShape::of(c);
  std::size_t total_positions = 0;
  for (const auto& seq : calibration) total_positions += seq.size() - 1;
  if (total_positions == 0) throw ArgumentError("calibration has no predictable positions");

  double loss = 0.0;
  for (const auto& seq : calibration) {
    check_tokens(c, seq);
    const int n = static_cast<int>(seq.size());
    std::vector<int> positions(n);
    for (int t = 0; t < n; ++t) positions[t] = t;

    Mat h(n, c.d_model);
    for (int t = 0; t < n; ++t) {
      const double* e = m.embed.row(seq[static_cast<std::size_t>(t)]);
      std::copy(e, e + c.d_model, h.row(t));
    }
    std::vector<BlockWorkspace> ws(m.blocks.size());
    for (std::size_t b = 0; b < m.blocks.size(); ++b)
      h = block_forward(m.blocks[b], sh, h, positions, &ws[b]);

    Mat hn(n, c.d_model);
    Vec rms(n);
    for (int t = 0; t < n; ++t) rmsnorm_row(h.row(t), m.g_final, hn.row(t), c.d_model, &rms[t]);
    Mat logits = matmul(hn, m.w_out);

    Mat dlogits(n, c.vocab);
    for (int t = 0; t + 1 < n; ++t) {
      Vec p(logits.row(t), logits.row(t) + c.vocab);
      softmax_inplace(p.data(), c.vocab);
      loss -= std::log(std::max(p[static_cast<std::size_t>(seq[t + 1])], 1e-300));
      for (int j = 0; j < c.vocab; ++j)
        dlogits(t, j) = p[static_cast<std::size_t>(j)] / static_cast<double>(total_positions);
      dlogits(t, seq[t + 1]) -= 1.0 / static_cast<double>(total_positions);
    }

    Mat dhn(n, c.d_model);
    accumulate_matmul_grads(hn, dlogits, m.w_out, grads.w_out, dhn);
    Mat dh(n, c.d_model);
    for (int t = 0; t < n; ++t)
      rmsnorm_backward_row(h.row(t), m.g_final, rms[t], dhn.row(t), dh.row(t),
                           grads.g_final.data(), c.d_model);
    for (int b = static_cast<int>(m.blocks.size()) - 1; b >= 0; --b)
      dh = block_backward(m.blocks[static_cast<std::size_t>(b)], sh,
                          ws[static_cast<std::size_t>(b)], positions, dh,
                          grads.blocks[static_cast<std::size_t>(b)]);
    for (int t = 0; t < n; ++t) {
      double* ge = grads.embed.row(seq[static_cast<std::size_t>(t)]);
      const double* dht = dh.row(t);
      for (int i = 0; i < c.d_model; ++i) ge[i] += dht[i];
    }
  }
  loss /= static_cast<double>(total_positions);
  if (!std::isfinite(loss)) throw DivergenceError("training loss is non-finite");
  return loss;
}

// Full-batch Adam on next-token cross-entropy. Returns the best checkpoint
// seen, so the returned loss never exceeds the initial one.
inline TransformerModel train_model(const TransformerModel& model,
                                    const std::vector<TokenSeq>& calibration, int epochs,
                                    double lr, std::uint64_t seed) {
  (void)seed;  // no stochastic ops; kept for the call contract
  if (calibration.empty()) throw ArgumentError("empty calibration set");
  if (epochs <= 0) return model;

  TransformerModel cur = model;
  TransformerModel best = model;
  double best_loss = cross_entropy(full_view(cur), calibration);
  AdamState adam;
  adam.lr = lr;
  for (int e = 0; e < epochs; ++e) {
    ModelGrads grads = make_zero_grads(cur);
    model_loss_and_grad(cur, calibration, grads);
    adam.step(cur, grads);
    double loss = cross_entropy(full_view(cur), calibration);
    if (!std::isfinite(loss)) throw DivergenceError("training loss is non-finite");
    if (loss < best_loss) {
      best_loss = loss;
      best = cur;
    }
  }
  return best;
}

}  // namespace pdprune

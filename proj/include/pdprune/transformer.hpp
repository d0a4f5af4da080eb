#pragma once

#include <algorithm>
#include <set>
#include <vector>

#include "pdprune/block.hpp"
#include "pdprune/calibration.hpp"
#include "pdprune/errors.hpp"
#include "pdprune/model.hpp"

namespace pdprune {

// A view is the base model with some block slots removed and/or substituted.
// Slots keep the base model's block indices, so KV cache layers produced by
// one view can be matched to another view of the same model.
struct ModelView {
  const TransformerModel* base = nullptr;
  struct Slot {
    int id;
    const BlockParams* params;
  };
  std::vector<Slot> slots;

  const ModelConfig& config() const { return base->config; }
};

inline ModelView full_view(const TransformerModel& m) {
  ModelView v;
  v.base = &m;
  for (int i = 0; i < m.config.n_blocks; ++i)
    v.slots.push_back({i, &m.blocks[static_cast<std::size_t>(i)]});
  return v;
}

inline ModelView pruned_view(const TransformerModel& m, const std::set<int>& removed_blocks) {
  for (int b : removed_blocks)
    if (b < 0 || b >= m.config.n_blocks)
      throw ArgumentError("removed block index out of range");
  if (static_cast<int>(removed_blocks.size()) >= m.config.n_blocks)
    throw EmptyModelError("all blocks removed");
  ModelView v;
  v.base = &m;
  for (int i = 0; i < m.config.n_blocks; ++i)
    if (!removed_blocks.count(i)) v.slots.push_back({i, &m.blocks[static_cast<std::size_t>(i)]});
  return v;
}

// Per-layer key/value store. Keys are stored post-rotary; `positions` are the
// original absolute indices and stay strictly increasing.
struct KVLayer {
  int slot = 0;
  int n_heads = 0;
  int head_dim = 0;
  std::vector<int> positions;
  std::vector<double> k;  // entry-major: [entries][n_heads*head_dim]
  std::vector<double> v;

  int count() const { return static_cast<int>(positions.size()); }
  int width() const { return n_heads * head_dim; }
  friend bool operator==(const KVLayer&, const KVLayer&) = default;
};

struct KVCache {
  int next_pos = 0;  // absolute position assigned to the next appended token
  std::vector<KVLayer> layers;

  KVLayer* find(int slot) {
    for (auto& l : layers)
      if (l.slot == slot) return &l;
    return nullptr;
  }
  const KVLayer* find(int slot) const {
    for (const auto& l : layers)
      if (l.slot == slot) return &l;
    return nullptr;
  }
  friend bool operator==(const KVCache&, const KVCache&) = default;
};

// Attention-score distributions averaged over query positions (one pass) or
// additionally over calibration samples (see collect_attention_stats).
struct AttentionStats {
  int n_tokens = 0;
  std::vector<int> slots;
  std::vector<Mat> head_dist;  // parallel to slots; n_heads × n_tokens

  const Mat* find(int slot) const {
    for (std::size_t i = 0; i < slots.size(); ++i)
      if (slots[i] == slot) return &head_dist[i];
    return nullptr;
  }
};

struct HiddenTrace {
  std::vector<Mat> h;  // length = retained blocks + 1; h[0] is the embedding
};

struct PrefillOptions {
  bool collect_trace = false;
  bool collect_kv = true;
  bool collect_stats = false;
};

struct PrefillResult {
  Mat logits;  // N × vocab
  HiddenTrace trace;
  KVCache kv;
  AttentionStats stats;
};

inline void check_tokens(const ModelConfig& c, const TokenSeq& tokens) {
  if (tokens.empty()) throw ArgumentError("empty token sequence");
  if (static_cast<int>(tokens.size()) > c.max_seq)
    throw ArgumentError("sequence longer than max_seq");
  for (int t : tokens)
    if (t < 0 || t >= c.vocab) throw ArgumentError("token out of vocab");
}

inline Mat output_logits(const TransformerModel& m, const Mat& h) {
  Mat hn(h.rows, h.cols);
  for (int t = 0; t < h.rows; ++t) rmsnorm_row(h.row(t), m.g_final, hn.row(t), h.cols, nullptr);
  return matmul(hn, m.w_out);
}

inline PrefillResult forward_prefill(const ModelView& view, const TokenSeq& tokens,
                                     const PrefillOptions& opt = {}) {
  const ModelConfig& c = view.config();
  check_tokens(c, tokens);
  if (view.slots.empty()) throw EmptyModelError("all blocks removed");
  const int n = static_cast<int>(tokens.size());
  const BlockShape sh = BlockShape::of(c);

  std::vector<int> positions(n);
  for (int t = 0; t < n; ++t) positions[t] = t;

  Mat h(n, c.d_model);
  for (int t = 0; t < n; ++t) {
    const double* e = view.base->embed.row(tokens[static_cast<std::size_t>(t)]);
    std::copy(e, e + c.d_model, h.row(t));
  }

  PrefillResult res;
  res.kv.next_pos = n;
  if (opt.collect_trace) res.trace.h.push_back(h);
  if (opt.collect_stats) res.stats.n_tokens = n;

  for (const auto& slot : view.slots) {
    Mat kv_k, kv_v, attn_avg;
    Mat out = block_forward(*slot.params, sh, h, positions, nullptr,
                            opt.collect_kv ? &kv_k : nullptr,
                            opt.collect_kv ? &kv_v : nullptr,
                            opt.collect_stats ? &attn_avg : nullptr);
    if (opt.collect_kv) {
      KVLayer layer;
      layer.slot = slot.id;
      layer.n_heads = c.n_heads;
      layer.head_dim = c.head_dim;
      layer.positions = positions;
      layer.k = std::move(kv_k.a);
      layer.v = std::move(kv_v.a);
      res.kv.layers.push_back(std::move(layer));
    }
    if (opt.collect_stats) {
      res.stats.slots.push_back(slot.id);
      res.stats.head_dist.push_back(std::move(attn_avg));
    }
    h = std::move(out);
    if (opt.collect_trace) res.trace.h.push_back(h);
  }
  res.logits = output_logits(*view.base, h);
  return res;
}

// Convenience overload: removal applied by skipping the given blocks.
inline PrefillResult forward_prefill(const TransformerModel& m, const TokenSeq& tokens,
                                     const std::set<int>& removed_blocks,
                                     const PrefillOptions& opt = {}) {
  return forward_prefill(pruned_view(m, removed_blocks), tokens, opt);
}

// One greedy-decode step: appends the token's K/V in every view layer (at the
// cache's next absolute position) and attends over whatever entries the cache
// holds, which is how pruned prefill caches take effect.
inline Vec decode_step(const ModelView& view, int token, KVCache& kv) {
  const ModelConfig& c = view.config();
  if (token < 0 || token >= c.vocab) throw ArgumentError("token out of vocab");
  if (view.slots.empty()) throw EmptyModelError("all blocks removed");
  if (kv.next_pos >= c.max_seq) throw ArgumentError("sequence longer than max_seq");
  const BlockShape sh = BlockShape::of(c);
  const int d = c.d_model;
  const int hd = c.head_dim;
  const int pos = kv.next_pos;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(hd));

  Vec h(view.base->embed.row(token), view.base->embed.row(token) + d);
  Vec xn(d), q(d), kk(d), vv(d), attn(d), tmp(d);
  for (const auto& slot : view.slots) {
    const BlockParams& p = *slot.params;
    KVLayer* layer = kv.find(slot.id);
    if (!layer) {
      kv.layers.push_back(KVLayer{slot.id, c.n_heads, hd, {}, {}, {}});
      layer = &kv.layers.back();
    }
    if (layer->n_heads != c.n_heads || layer->head_dim != hd)
      throw ConsistencyError("cache layer shape does not match model");

    rmsnorm_row(h.data(), p.g1, xn.data(), d, nullptr);
    auto project = [&](const Mat& w, Vec& out) {
      for (int cix = 0; cix < d; ++cix) out[cix] = 0.0;
      for (int r = 0; r < d; ++r) {
        double x = xn[r];
        if (x == 0.0) continue;
        const double* wr = w.row(r);
        for (int cix = 0; cix < d; ++cix) out[cix] += x * wr[cix];
      }
    };
    project(p.wq, q);
    project(p.wk, kk);
    project(p.wv, vv);
    for (int hix = 0; hix < c.n_heads; ++hix) {
      apply_rotary(q.data() + hix * hd, hd, pos);
      apply_rotary(kk.data() + hix * hd, hd, pos);
    }
    layer->positions.push_back(pos);
    layer->k.insert(layer->k.end(), kk.begin(), kk.end());
    layer->v.insert(layer->v.end(), vv.begin(), vv.end());

    const int m = layer->count();
    std::fill(attn.begin(), attn.end(), 0.0);
    Vec scores(m);
    for (int hix = 0; hix < c.n_heads; ++hix) {
      const double* qh = q.data() + hix * hd;
      for (int u = 0; u < m; ++u)
        scores[u] = dot(qh, layer->k.data() + static_cast<std::size_t>(u) * d + hix * hd, hd) *
                    inv_sqrt;
      softmax_inplace(scores.data(), m);
      double* ah = attn.data() + hix * hd;
      for (int u = 0; u < m; ++u) {
        const double* vu = layer->v.data() + static_cast<std::size_t>(u) * d + hix * hd;
        for (int i = 0; i < hd; ++i) ah[i] += scores[u] * vu[i];
      }
    }
    // output projection + residual
    for (int cix = 0; cix < d; ++cix) tmp[cix] = 0.0;
    for (int r = 0; r < d; ++r) {
      double x = attn[r];
      if (x == 0.0) continue;
      const double* wr = p.wo.row(r);
      for (int cix = 0; cix < d; ++cix) tmp[cix] += x * wr[cix];
    }
    for (int i = 0; i < d; ++i) h[i] += tmp[i];

    rmsnorm_row(h.data(), p.g2, xn.data(), d, nullptr);
    Vec u(sh.d_ff, 0.0);
    for (int r = 0; r < d; ++r) {
      double x = xn[r];
      if (x == 0.0) continue;
      const double* wr = p.w1.row(r);
      for (int cix = 0; cix < sh.d_ff; ++cix) u[cix] += x * wr[cix];
    }
    for (int cix = 0; cix < sh.d_ff; ++cix) u[cix] = silu(u[cix]);
    for (int i = 0; i < d; ++i) tmp[i] = 0.0;
    for (int r = 0; r < sh.d_ff; ++r) {
      double x = u[r];
      if (x == 0.0) continue;
      const double* wr = p.w2.row(r);
      for (int cix = 0; cix < d; ++cix) tmp[cix] += x * wr[cix];
    }
    for (int i = 0; i < d; ++i) h[i] += tmp[i];
  }
  kv.next_pos = pos + 1;

  rmsnorm_row(h.data(), view.base->g_final, xn.data(), d, nullptr);
  Vec logits(c.vocab, 0.0);
  for (int r = 0; r < d; ++r) {
    double x = xn[r];
    if (x == 0.0) continue;
    const double* wr = view.base->w_out.row(r);
    for (int cix = 0; cix < c.vocab; ++cix) logits[cix] += x * wr[cix];
  }
  return logits;
}

inline int argmax(const Vec& x) {
  return static_cast<int>(std::max_element(x.begin(), x.end()) - x.begin());
}
inline int argmax_row(const Mat& m, int r) {
  const double* p = m.row(r);
  return static_cast<int>(std::max_element(p, p + m.cols) - p);
}

// Attention distributions averaged over all query positions and samples.
inline AttentionStats collect_attention_stats(const ModelView& view,
                                              const std::vector<TokenSeq>& calibration) {
  if (calibration.empty()) throw ArgumentError("empty calibration set");
  PrefillOptions opt;
  opt.collect_kv = false;
  opt.collect_stats = true;
  AttentionStats acc;
  bool first = true;
  for (const auto& seq : calibration) {
    PrefillResult r = forward_prefill(view, seq, opt);
    if (first) {
      acc = std::move(r.stats);
      first = false;
    } else {
      if (r.stats.n_tokens != acc.n_tokens)
        throw ArgumentError("calibration sequences must share a length");
      for (std::size_t i = 0; i < acc.head_dist.size(); ++i)
        for (std::size_t j = 0; j < acc.head_dist[i].a.size(); ++j)
          acc.head_dist[i].a[j] += r.stats.head_dist[i].a[j];
    }
  }
  const double inv = 1.0 / static_cast<double>(calibration.size());
  for (auto& m : acc.head_dist)
    for (double& x : m.a) x *= inv;
  return acc;
}

// Per-sample hidden traces on the full model; the substrate for redundancy
// analysis.
inline std::vector<HiddenTrace> collect_traces(const ModelView& view,
                                               const std::vector<TokenSeq>& calibration) {
  PrefillOptions opt;
  opt.collect_kv = false;
  opt.collect_trace = true;
  std::vector<HiddenTrace> traces;
  traces.reserve(calibration.size());
  for (const auto& seq : calibration)
    traces.push_back(std::move(forward_prefill(view, seq, opt).trace));
  return traces;
}

}  // namespace pdprune

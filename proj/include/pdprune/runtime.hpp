#pragma once

#include <arpa/inet.h>
#include <netinet/in.h>
#include <sys/socket.h>
#include <unistd.h>

#include <cmath>
#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "pdprune/distill.hpp"
#include "pdprune/kv_pruning.hpp"
#include "pdprune/linalg.hpp"
#include "pdprune/manifest.hpp"
#include "pdprune/removal.hpp"
#include "pdprune/transformer.hpp"

namespace pdprune {

// ---------------------------------------------------------------------------
// Two-node execution. All coupling between the nodes is the manifest bytes.
// ---------------------------------------------------------------------------

struct PrefillNodeResult {
  std::vector<std::uint8_t> manifest;
  int prompt_length = 0;
  int first_token = 0;  // argmax of the last prompt position's logits
  std::uint64_t model_hash = 0;
};

// Runs the prefill view over the prompt with the full cache retained, then
// prunes only at serialization time.
inline PrefillNodeResult run_prefill_node(const ModelView& prefill_view, const TokenSeq& prompt,
                                          const KVSelectionPlan& kv_plan,
                                          const StagePlan& stage_plan) {
  PrefillOptions opt;
  opt.collect_kv = true;
  PrefillResult pre = forward_prefill(prefill_view, prompt, opt);
  PrefillNodeResult out;
  out.prompt_length = static_cast<int>(prompt.size());
  out.first_token = argmax_row(pre.logits, pre.logits.rows - 1);
  out.model_hash = model_hash(*prefill_view.base);
  out.manifest = serialize_manifest(pre.kv, kv_plan, stage_plan, out.model_hash);
  return out;
}

// Greedy decode over the shipped cache. `first_token` is the prompt metadata
// the prefill node produced; decode-generated KV is appended un-pruned.
inline TokenSeq run_decode_node(const ModelView& decode_view,
                                const std::vector<std::uint8_t>& manifest_bytes,
                                int first_token, int steps) {
  if (steps < 0) throw ArgumentError("steps must be >= 0");
  ManifestMetadata meta;
  KVCache kv = deserialize_manifest(manifest_bytes, &meta);
  if (meta.model_hash != model_hash(*decode_view.base))
    throw ConsistencyError("manifest model hash does not match the decode model");
  std::set<int> retained;
  for (const auto& s : decode_view.slots) retained.insert(s.id);
  for (int id : meta.layer_ids)
    if (!retained.count(id))
      throw ConsistencyError("manifest layer " + std::to_string(id) +
                             " is not retained by the decode view");
  TokenSeq transcript;
  int token = first_token;
  for (int s = 0; s < steps; ++s) {
    transcript.push_back(token);
    if (s + 1 == steps) break;
    Vec logits = decode_step(decode_view, token, kv);
    token = argmax(logits);
  }
  return transcript;
}

// Single-process oracle with the same semantics as the two-node path: prefill
// view over the prompt, in-memory cache pruning, decode view for generation.
inline TokenSeq reference_unified_run(const TransformerModel& m, const StagePlan& stage_plan,
                                      const KVSelectionPlan& kv_plan, const TokenSeq& prompt,
                                      int steps, const std::map<int, BlockParams>& merged = {}) {
  if (steps < 0) throw ArgumentError("steps must be >= 0");
  stage_plan.validate();
  ModelViews views = apply_distillation(m, stage_plan, merged);

  PrefillOptions opt;
  opt.collect_kv = true;
  PrefillResult pre = forward_prefill(views.prefill, prompt, opt);
  KVCache kv = prune_cache(pre.kv, kv_plan, removed_slots(stage_plan.decode_removals));

  TokenSeq transcript;
  int token = argmax_row(pre.logits, pre.logits.rows - 1);
  for (int s = 0; s < steps; ++s) {
    transcript.push_back(token);
    if (s + 1 == steps) break;
    Vec logits = decode_step(views.decode, token, kv);
    token = argmax(logits);
  }
  return transcript;
}

// Plain greedy generation on a single view, no pruning anywhere.
inline TokenSeq generate(const ModelView& view, const TokenSeq& prompt, int steps) {
  PrefillOptions opt;
  opt.collect_kv = true;
  PrefillResult pre = forward_prefill(view, prompt, opt);
  TokenSeq transcript;
  int token = argmax_row(pre.logits, pre.logits.rows - 1);
  KVCache kv = std::move(pre.kv);
  for (int s = 0; s < steps; ++s) {
    transcript.push_back(token);
    if (s + 1 == steps) break;
    Vec logits = decode_step(view, token, kv);
    token = argmax(logits);
  }
  return transcript;
}

// ---------------------------------------------------------------------------
// Attention perturbation error bound.
// ---------------------------------------------------------------------------

struct PerturbationCase {
  Vec q, dq;      // length d
  Mat K, dK;      // N × d
  Mat V, dV;      // N × d_v
  double l_softmax = 1.0;

  void validate() const {
    const int d = static_cast<int>(q.size());
    if (d == 0) throw ArgumentError("d must be positive");
    if (static_cast<int>(dq.size()) != d) throw ArgumentError("dq length mismatch");
    if (K.cols != d || dK.rows != K.rows || dK.cols != K.cols)
      throw ArgumentError("K/dK shape mismatch");
    if (V.rows != K.rows || dV.rows != V.rows || dV.cols != V.cols)
      throw ArgumentError("V/dV shape mismatch");
    if (!(l_softmax > 0.0)) throw ArgumentError("l_softmax must be positive");
  }
};

struct ErrorBoundResult {
  double empirical = 0.0;
  double bound = 0.0;
};

namespace detail {
inline Vec attention_output(const Vec& q, const Mat& K, const Mat& V) {
  const int n = K.rows;
  const int d = K.cols;
  Vec scores(static_cast<std::size_t>(n));
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(d));
  for (int i = 0; i < n; ++i) scores[static_cast<std::size_t>(i)] = dot(q.data(), K.row(i), d) * inv_sqrt;
  softmax_inplace(scores.data(), n);
  Vec out(static_cast<std::size_t>(V.cols), 0.0);
  for (int i = 0; i < n; ++i) {
    const double* vr = V.row(i);
    for (int j = 0; j < V.cols; ++j) out[static_cast<std::size_t>(j)] += scores[static_cast<std::size_t>(i)] * vr[j];
  }
  return out;
}
}  // namespace detail

// Empirical attention-output error against its analytic upper bound:
//   ‖E‖_F ≤ (L/√d)(‖Δq‖‖K‖_F + ‖q‖‖ΔK‖_F)‖V‖_F + ‖ΔV‖_F.
inline ErrorBoundResult error_bound(const PerturbationCase& c) {
  c.validate();
  const int d = static_cast<int>(c.q.size());

  Vec q2(c.q);
  for (std::size_t i = 0; i < q2.size(); ++i) q2[i] += c.dq[i];
  Mat K2 = c.K, V2 = c.V;
  for (std::size_t i = 0; i < K2.a.size(); ++i) K2.a[i] += c.dK.a[i];
  for (std::size_t i = 0; i < V2.a.size(); ++i) V2.a[i] += c.dV.a[i];

  Vec base = detail::attention_output(c.q, c.K, c.V);
  Vec pert = detail::attention_output(q2, K2, V2);
  double err = 0.0;
  for (std::size_t i = 0; i < base.size(); ++i) {
    double e = pert[i] - base[i];
    err += e * e;
  }

  ErrorBoundResult res;
  res.empirical = std::sqrt(err);
  res.bound = (c.l_softmax / std::sqrt(static_cast<double>(d))) *
                  (norm2(c.dq.data(), d) * frob_norm(c.K) +
                   norm2(c.q.data(), d) * frob_norm(c.dK)) *
                  frob_norm(c.V) +
              frob_norm(c.dV);
  return res;
}

// ---------------------------------------------------------------------------
// Link model.
// ---------------------------------------------------------------------------

struct LinkModel {
  double bytes_per_second = 0.0;
  double latency_seconds = 0.0;
};

struct TransferMetrics {
  std::uint64_t volume_bytes = 0;
  double seconds = 0.0;
};

inline TransferMetrics transfer_metrics(const std::vector<std::uint8_t>& manifest_bytes,
                                        const LinkModel& link) {
  if (!(link.bytes_per_second > 0.0) || link.latency_seconds < 0.0)
    throw ArgumentError("link parameters must be positive");
  TransferMetrics out;
  out.volume_bytes = manifest_bytes.size();
  out.seconds = link.latency_seconds +
                static_cast<double>(out.volume_bytes) / link.bytes_per_second;
  return out;
}

// ---------------------------------------------------------------------------
// Loopback stream-socket transport. The manifest bytes go over the wire as-is;
// end-of-stream delimits the frame.
// ---------------------------------------------------------------------------

class LoopbackListener {
 public:
  LoopbackListener() {
    fd_ = ::socket(AF_INET, SOCK_STREAM, 0);
    if (fd_ < 0) throw IoError("socket() failed");
    int one = 1;
    ::setsockopt(fd_, SOL_SOCKET, SO_REUSEADDR, &one, sizeof(one));
    sockaddr_in addr{};
    addr.sin_family = AF_INET;
    addr.sin_addr.s_addr = htonl(INADDR_LOOPBACK);
    addr.sin_port = 0;
    if (::bind(fd_, reinterpret_cast<sockaddr*>(&addr), sizeof(addr)) != 0) {
      ::close(fd_);
      throw IoError("bind() failed");
    }
    if (::listen(fd_, 1) != 0) {
      ::close(fd_);
      throw IoError("listen() failed");
    }
    socklen_t len = sizeof(addr);
    if (::getsockname(fd_, reinterpret_cast<sockaddr*>(&addr), &len) != 0) {
      ::close(fd_);
      throw IoError("getsockname() failed");
    }
    port_ = ntohs(addr.sin_port);
  }
  ~LoopbackListener() {
    if (fd_ >= 0) ::close(fd_);
  }
  LoopbackListener(const LoopbackListener&) = delete;
  LoopbackListener& operator=(const LoopbackListener&) = delete;

  int port() const { return port_; }

  std::vector<std::uint8_t> accept_and_receive() {
    int conn = ::accept(fd_, nullptr, nullptr);
    if (conn < 0) throw IoError("accept() failed");
    std::vector<std::uint8_t> bytes;
    std::uint8_t buf[4096];
    for (;;) {
      ssize_t n = ::read(conn, buf, sizeof(buf));
      if (n < 0) {
        ::close(conn);
        throw IoError("read() failed");
      }
      if (n == 0) break;
      bytes.insert(bytes.end(), buf, buf + n);
    }
    ::close(conn);
    return bytes;
  }

 private:
  int fd_ = -1;
  int port_ = 0;
};

inline void loopback_send(int port, const std::vector<std::uint8_t>& bytes) {
  int fd = ::socket(AF_INET, SOCK_STREAM, 0);
  if (fd < 0) throw IoError("socket() failed");
  sockaddr_in addr{};
  addr.sin_family = AF_INET;
  addr.sin_addr.s_addr = htonl(INADDR_LOOPBACK);
  addr.sin_port = htons(static_cast<std::uint16_t>(port));
  if (::connect(fd, reinterpret_cast<sockaddr*>(&addr), sizeof(addr)) != 0) {
    ::close(fd);
    throw IoError("connect() failed");
  }
  std::size_t off = 0;
  while (off < bytes.size()) {
    ssize_t n = ::write(fd, bytes.data() + off, bytes.size() - off);
    if (n <= 0) {
      ::close(fd);
      throw IoError("write() failed");
    }
    off += static_cast<std::size_t>(n);
  }
  ::shutdown(fd, SHUT_WR);
  ::close(fd);
}

}  // namespace pdprune

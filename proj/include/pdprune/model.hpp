#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "pdprune/crc32.hpp"
#include "pdprune/errors.hpp"
#include "pdprune/linalg.hpp"
#include "pdprune/rng.hpp"

namespace pdprune {

enum class Dtype : std::uint8_t { F32 = 0, F64 = 1, F16 = 2 };

inline std::size_t dtype_size(Dtype d) {
  switch (d) {
    case Dtype::F32: return 4;
    case Dtype::F64: return 8;
    case Dtype::F16: return 2;
  }
  throw ArgumentError("unknown dtype");
}

struct ModelConfig {
  int n_blocks = 0;
  int d_model = 0;
  int n_heads = 0;
  int head_dim = 0;
  int vocab = 0;
  int max_seq = 0;
  Dtype dtype = Dtype::F64;

  int d_ff() const { return 2 * d_model; }

  void validate() const {
    if (n_blocks < 1) throw ConfigError("n_blocks must be >= 1");
    if (n_heads < 1 || d_model < 1) throw ConfigError("d_model and n_heads must be positive");
    if (d_model != n_heads * head_dim)
      throw ConfigError("d_model must equal n_heads * head_dim");
    if (vocab < 2) throw ConfigError("vocab must be >= 2");
    if (max_seq < 2) throw ConfigError("max_seq must be >= 2");
    if (dtype == Dtype::F16) throw ConfigError("f16 is storage-only, not a compute dtype");
  }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

inline ModelConfig make_config(int n_blocks, int d_model, int n_heads, int vocab,
                               int max_seq, Dtype dtype = Dtype::F64) {
  ModelConfig c;
  c.n_blocks = n_blocks;
  c.d_model = d_model;
  c.n_heads = n_heads;
  c.head_dim = (n_heads > 0) ? d_model / n_heads : 0;
  c.vocab = vocab;
  c.max_seq = max_seq;
  c.dtype = dtype;
  c.validate();
  return c;
}

// One transformer block: pre-norm attention + pre-norm MLP, both residual.
struct BlockParams {
  Mat wq, wk, wv, wo;  // d × d
  Mat w1;              // d × d_ff
  Mat w2;              // d_ff × d
  Vec g1, g2;          // RMSNorm gains, length d

  friend bool operator==(const BlockParams&, const BlockParams&) = default;

  template <typename F>
  void for_each_tensor(F&& f) {
    f(wq);
    f(wk);
    f(wv);
    f(wo);
    f(w1);
    f(w2);
  }
  template <typename F>
  void for_each_vec(F&& f) {
    f(g1);
    f(g2);
  }
  std::size_t param_count() const {
    return wq.a.size() + wk.a.size() + wv.a.size() + wo.a.size() + w1.a.size() +
           w2.a.size() + g1.size() + g2.size();
  }
};

struct TransformerModel {
  ModelConfig config;
  Mat embed;    // vocab × d
  Vec g_final;  // final RMSNorm gain
  Mat w_out;    // d × vocab
  std::vector<BlockParams> blocks;
};

inline BlockParams make_zero_block(const ModelConfig& c) {
  BlockParams b;
  b.wq = Mat(c.d_model, c.d_model);
  b.wk = Mat(c.d_model, c.d_model);
  b.wv = Mat(c.d_model, c.d_model);
  b.wo = Mat(c.d_model, c.d_model);
  b.w1 = Mat(c.d_model, c.d_ff());
  b.w2 = Mat(c.d_ff(), c.d_model);
  b.g1.assign(c.d_model, 1.0);
  b.g2.assign(c.d_model, 1.0);
  return b;
}

// Deterministic initialization: two calls with equal (config, seed) yield
// bit-identical parameters.
inline TransformerModel build_model(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  TransformerModel m;
  m.config = config;
  Rng rng = Rng(seed).split("model-init");
  const double ws = 0.5 / std::sqrt(static_cast<double>(config.d_model));
  auto fill = [&](Mat& t, double scale) {
    for (double& v : t.a) v = scale * rng.next_normal();
  };
  m.embed = Mat(config.vocab, config.d_model);
  fill(m.embed, 1.0);
  m.w_out = Mat(config.d_model, config.vocab);
  fill(m.w_out, ws);
  m.g_final.assign(config.d_model, 1.0);
  m.blocks.reserve(config.n_blocks);
  for (int i = 0; i < config.n_blocks; ++i) {
    BlockParams b = make_zero_block(config);
    b.for_each_tensor([&](Mat& t) { fill(t, ws); });
    m.blocks.push_back(std::move(b));
  }
  return m;
}

// ---------------------------------------------------------------------------
// Checkpoint format: "PDTK" | version u16 LE | config | param payload |
// merged-block records | CRC32 trailer. All multi-byte values little-endian.
// ---------------------------------------------------------------------------

inline constexpr std::uint16_t kCheckpointVersion = 1;

struct MergedBlockRecord {
  int pair_low = 0;  // merged (pair_low, pair_low + 1)
  std::uint32_t steps = 0;
  double initial_mse = 0.0;
  double final_mse = 0.0;
  BlockParams params;
};

namespace detail {

struct ByteWriter {
  std::vector<std::uint8_t> buf;
  void raw(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    buf.insert(buf.end(), b, b + n);
  }
  void u8(std::uint8_t v) { buf.push_back(v); }
  void u16(std::uint16_t v) {
    for (int i = 0; i < 2; ++i) buf.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) buf.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) buf.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void f64(double v) {
    std::uint64_t bits;
    std::memcpy(&bits, &v, 8);
    u64(bits);
  }
};

struct ByteReader {
  const std::uint8_t* p;
  std::size_t n;
  std::size_t pos = 0;

  void need(std::size_t k) const {
    if (pos + k > n) throw WireError(WireFault::Truncated, "truncated stream");
  }
  void raw(void* out, std::size_t k) {
    need(k);
    std::memcpy(out, p + pos, k);
    pos += k;
  }
  std::uint8_t u8() {
    need(1);
    return p[pos++];
  }
  std::uint16_t u16() {
    need(2);
    std::uint16_t v = 0;
    for (int i = 0; i < 2; ++i) v |= static_cast<std::uint16_t>(p[pos + i]) << (8 * i);
    pos += 2;
    return v;
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(p[pos + i]) << (8 * i);
    pos += 4;
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(p[pos + i]) << (8 * i);
    pos += 8;
    return v;
  }
  double f64() {
    std::uint64_t bits = u64();
    double v;
    std::memcpy(&v, &bits, 8);
    return v;
  }
};

// IEEE binary16 conversion (storage-only; round to nearest even).
inline std::uint16_t f16_encode(float f) {
  std::uint32_t x;
  std::memcpy(&x, &f, 4);
  std::uint32_t sign = (x >> 16) & 0x8000u;
  std::uint32_t mant = x & 0x7fffffu;
  int exp = static_cast<int>((x >> 23) & 0xffu) - 127 + 15;
  if (exp >= 31) return static_cast<std::uint16_t>(sign | 0x7c00u | (mant ? 0x200u : 0));
  if (exp <= 0) {
    if (exp < -10) return static_cast<std::uint16_t>(sign);
    mant |= 0x800000u;
    int shift = 14 - exp;
    std::uint32_t half = mant >> shift;
    std::uint32_t rem = mant & ((1u << shift) - 1);
    std::uint32_t halfway = 1u << (shift - 1);
    if (rem > halfway || (rem == halfway && (half & 1))) ++half;
    return static_cast<std::uint16_t>(sign | half);
  }
  std::uint32_t half = (static_cast<std::uint32_t>(exp) << 10) | (mant >> 13);
  std::uint32_t rem = mant & 0x1fffu;
  if (rem > 0x1000u || (rem == 0x1000u && (half & 1))) ++half;
  return static_cast<std::uint16_t>(sign | half);
}

inline float f16_decode(std::uint16_t h) {
  std::uint32_t sign = static_cast<std::uint32_t>(h & 0x8000u) << 16;
  std::uint32_t exp = (h >> 10) & 0x1fu;
  std::uint32_t mant = h & 0x3ffu;
  std::uint32_t x;
  if (exp == 0) {
    if (mant == 0) {
      x = sign;
    } else {
      int e = -1;
      do {
        mant <<= 1;
        ++e;
      } while (!(mant & 0x400u));
      x = sign | (static_cast<std::uint32_t>(113 - e) << 23) | ((mant & 0x3ffu) << 13);
    }
  } else if (exp == 31) {
    x = sign | 0x7f800000u | (mant << 13);
  } else {
    x = sign | ((exp + 112) << 23) | (mant << 13);
  }
  float f;
  std::memcpy(&f, &x, 4);
  return f;
}

inline void write_scalar(ByteWriter& w, double v, Dtype dt) {
  switch (dt) {
    case Dtype::F64: w.f64(v); return;
    case Dtype::F32: {
      float f = static_cast<float>(v);
      std::uint32_t bits;
      std::memcpy(&bits, &f, 4);
      w.u32(bits);
      return;
    }
    case Dtype::F16: w.u16(f16_encode(static_cast<float>(v))); return;
  }
  throw ArgumentError("unknown dtype");
}

inline double read_scalar(ByteReader& r, Dtype dt) {
  switch (dt) {
    case Dtype::F64: return r.f64();
    case Dtype::F32: {
      std::uint32_t bits = r.u32();
      float f;
      std::memcpy(&f, &bits, 4);
      return static_cast<double>(f);
    }
    case Dtype::F16: return static_cast<double>(f16_decode(r.u16()));
  }
  throw ArgumentError("unknown dtype");
}

inline void write_block(ByteWriter& w, const BlockParams& b, Dtype dt) {
  auto tensors = {&b.wq, &b.wk, &b.wv, &b.wo, &b.w1, &b.w2};
  for (const Mat* t : tensors)
    for (double v : t->a) write_scalar(w, v, dt);
  for (double v : b.g1) write_scalar(w, v, dt);
  for (double v : b.g2) write_scalar(w, v, dt);
}

inline BlockParams read_block(ByteReader& r, const ModelConfig& c, Dtype dt) {
  BlockParams b = make_zero_block(c);
  auto tensors = {&b.wq, &b.wk, &b.wv, &b.wo, &b.w1, &b.w2};
  for (Mat* t : tensors)
    for (double& v : t->a) v = read_scalar(r, dt);
  for (double& v : b.g1) v = read_scalar(r, dt);
  for (double& v : b.g2) v = read_scalar(r, dt);
  return b;
}

}  // namespace detail

inline std::vector<std::uint8_t> serialize_checkpoint(
    const TransformerModel& m, const std::vector<MergedBlockRecord>& merged = {}) {
  detail::ByteWriter w;
  w.raw("PDTK", 4);
  w.u16(kCheckpointVersion);
  const ModelConfig& c = m.config;
  w.u32(static_cast<std::uint32_t>(c.n_blocks));
  w.u32(static_cast<std::uint32_t>(c.d_model));
  w.u32(static_cast<std::uint32_t>(c.n_heads));
  w.u32(static_cast<std::uint32_t>(c.head_dim));
  w.u32(static_cast<std::uint32_t>(c.vocab));
  w.u32(static_cast<std::uint32_t>(c.max_seq));
  w.u8(static_cast<std::uint8_t>(c.dtype));
  Dtype dt = c.dtype;
  for (double v : m.embed.a) detail::write_scalar(w, v, dt);
  for (double v : m.g_final) detail::write_scalar(w, v, dt);
  for (double v : m.w_out.a) detail::write_scalar(w, v, dt);
  for (const BlockParams& b : m.blocks) detail::write_block(w, b, dt);
  w.u16(static_cast<std::uint16_t>(merged.size()));
  for (const MergedBlockRecord& rec : merged) {
    w.u16(static_cast<std::uint16_t>(rec.pair_low));
    w.u32(rec.steps);
    w.f64(rec.initial_mse);
    w.f64(rec.final_mse);
    detail::write_block(w, rec.params, dt);
  }
  w.u32(crc32(w.buf.data(), w.buf.size()));
  return std::move(w.buf);
}

inline TransformerModel deserialize_checkpoint(const std::vector<std::uint8_t>& bytes,
                                               std::vector<MergedBlockRecord>* merged_out = nullptr) {
  if (bytes.size() < 8) throw WireError(WireFault::Truncated, "checkpoint too short");
  std::uint32_t want = crc32(bytes.data(), bytes.size() - 4);
  detail::ByteReader tail{bytes.data() + bytes.size() - 4, 4};
  if (tail.u32() != want) throw WireError(WireFault::CrcMismatch, "checkpoint CRC mismatch");
  detail::ByteReader r{bytes.data(), bytes.size() - 4};
  char magic[4];
  r.raw(magic, 4);
  if (std::memcmp(magic, "PDTK", 4) != 0)
    throw WireError(WireFault::BadMagic, "not a PDTK checkpoint");
  std::uint16_t version = r.u16();
  if (version != kCheckpointVersion)
    throw WireError(WireFault::UnsupportedVersion, "unsupported checkpoint version");
  ModelConfig c;
  c.n_blocks = static_cast<int>(r.u32());
  c.d_model = static_cast<int>(r.u32());
  c.n_heads = static_cast<int>(r.u32());
  c.head_dim = static_cast<int>(r.u32());
  c.vocab = static_cast<int>(r.u32());
  c.max_seq = static_cast<int>(r.u32());
  c.dtype = static_cast<Dtype>(r.u8());
  c.validate();
  TransformerModel m;
  m.config = c;
  Dtype dt = c.dtype;
  m.embed = Mat(c.vocab, c.d_model);
  for (double& v : m.embed.a) v = detail::read_scalar(r, dt);
  m.g_final.assign(c.d_model, 0.0);
  for (double& v : m.g_final) v = detail::read_scalar(r, dt);
  m.w_out = Mat(c.d_model, c.vocab);
  for (double& v : m.w_out.a) v = detail::read_scalar(r, dt);
  for (int i = 0; i < c.n_blocks; ++i) m.blocks.push_back(detail::read_block(r, c, dt));
  std::uint16_t n_merged = r.u16();
  for (int i = 0; i < n_merged; ++i) {
    MergedBlockRecord rec;
    rec.pair_low = r.u16();
    rec.steps = r.u32();
    rec.initial_mse = r.f64();
    rec.final_mse = r.f64();
    rec.params = detail::read_block(r, c, dt);
    if (merged_out) merged_out->push_back(std::move(rec));
  }
  if (r.pos != r.n) throw WireError(WireFault::ShapeMismatch, "trailing bytes in checkpoint");
  return m;
}

inline void save_checkpoint(const std::string& path, const TransformerModel& m,
                            const std::vector<MergedBlockRecord>& merged = {}) {
  auto bytes = serialize_checkpoint(m, merged);
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open for writing: " + path);
  f.write(reinterpret_cast<const char*>(bytes.data()),
          static_cast<std::streamsize>(bytes.size()));
  if (!f) throw IoError("write failed: " + path);
}

inline TransformerModel load_checkpoint(const std::string& path,
                                        std::vector<MergedBlockRecord>* merged_out = nullptr) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open: " + path);
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)),
                                  std::istreambuf_iterator<char>());
  return deserialize_checkpoint(bytes, merged_out);
}

// Order-independent-free content hash of the full parameter set; used to pair
// manifests with the model that produced them.
inline std::uint64_t model_hash(const TransformerModel& m) {
  std::uint64_t h = 0x9ae16a3b2f90404full;
  auto feed = [&h](double v) {
    std::uint64_t bits;
    std::memcpy(&bits, &v, 8);
    h = mix64(h ^ bits);
  };
  feed(static_cast<double>(m.config.n_blocks));
  feed(static_cast<double>(m.config.d_model));
  feed(static_cast<double>(m.config.vocab));
  for (double v : m.embed.a) feed(v);
  for (double v : m.g_final) feed(v);
  for (double v : m.w_out.a) feed(v);
  for (const BlockParams& b : m.blocks) {
    for (const Mat* t : {&b.wq, &b.wk, &b.wv, &b.wo, &b.w1, &b.w2})
      for (double v : t->a) feed(v);
    for (double v : b.g1) feed(v);
    for (double v : b.g2) feed(v);
  }
  return h;
}

}  // namespace pdprune

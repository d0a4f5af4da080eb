#pragma once

#include <cstdint>
#include <cstring>
#include <set>
#include <string>
#include <vector>

#include "pdprune/crc32.hpp"
#include "pdprune/errors.hpp"
#include "pdprune/kv_pruning.hpp"
#include "pdprune/model.hpp"
#include "pdprune/transformer.hpp"

namespace pdprune {

inline constexpr std::uint16_t kManifestVersion = 1;

enum class RetentionMode : std::uint8_t { Full = 0, FirstLast = 1 };

// The serialized, checksummed KV cache shipped prefill -> decode.
//
// Frame layout (little-endian):
//   "PDKV"(4) | version u16 | flags u16 | model-hash u64 | N u32 | dtype u8 |
//   layer-count u16 | layer records | CRC32 over everything before it
// Layer record:
//   layer id u16 | retention mode u8 | head count u16 | head dim u16 |
//   entry count u32 | positions (u32 each) | K payload | V payload
struct ManifestMetadata {
  std::uint16_t version = kManifestVersion;
  std::uint16_t flags = 0;
  std::uint64_t model_hash = 0;
  std::uint32_t n_tokens = 0;
  Dtype dtype = Dtype::F64;
  std::vector<int> layer_ids;
  std::vector<RetentionMode> layer_modes;
};

// Header bytes before the layer records: 4+2+2+8+4+1+2.
inline constexpr std::size_t kManifestHeaderSize = 23;

inline std::vector<std::uint8_t> serialize_manifest(const KVCache& kv,
                                                    const KVSelectionPlan& kv_plan,
                                                    const StagePlan& stage_plan,
                                                    std::uint64_t model_hash,
                                                    Dtype dtype = Dtype::F64) {
  stage_plan.validate();
  std::set<int> decode_removed = removed_slots(stage_plan.decode_removals);
  KVCache pruned = prune_cache(kv, kv_plan, decode_removed);

  detail::ByteWriter w;
  w.raw("PDKV", 4);
  w.u16(kManifestVersion);
  w.u16(0);  // flags, reserved
  w.u64(model_hash);
  w.u32(static_cast<std::uint32_t>(kv.next_pos));
  w.u8(static_cast<std::uint8_t>(dtype));
  if (pruned.layers.size() > 0xffff) throw TooLargeError("too many layers for the frame");
  w.u16(static_cast<std::uint16_t>(pruned.layers.size()));

  for (const KVLayer& layer : pruned.layers) {
    const std::size_t expect = static_cast<std::size_t>(layer.count()) * layer.width();
    if (layer.k.size() != expect || layer.v.size() != expect)
      throw ConsistencyError("cache layer payload does not match its shape");
    for (std::size_t i = 1; i < layer.positions.size(); ++i)
      if (layer.positions[i] <= layer.positions[i - 1])
        throw ConsistencyError("cache positions must be strictly increasing");
    w.u16(static_cast<std::uint16_t>(layer.slot));
    RetentionMode mode =
        kv_plan.is_selected(layer.slot) ? RetentionMode::FirstLast : RetentionMode::Full;
    w.u8(static_cast<std::uint8_t>(mode));
    w.u16(static_cast<std::uint16_t>(layer.n_heads));
    w.u16(static_cast<std::uint16_t>(layer.head_dim));
    w.u32(static_cast<std::uint32_t>(layer.count()));
    for (int pos : layer.positions) w.u32(static_cast<std::uint32_t>(pos));
    for (double x : layer.k) detail::write_scalar(w, x, dtype);
    for (double x : layer.v) detail::write_scalar(w, x, dtype);
  }
  w.u32(crc32(w.buf.data(), w.buf.size()));
  return std::move(w.buf);
}

inline KVCache deserialize_manifest(const std::vector<std::uint8_t>& bytes,
                                    ManifestMetadata* meta_out = nullptr) {
  if (bytes.size() < kManifestHeaderSize + 4)
    throw WireError(WireFault::Truncated, "manifest shorter than header + trailer");
  std::uint32_t want = crc32(bytes.data(), bytes.size() - 4);
  detail::ByteReader tail{bytes.data() + bytes.size() - 4, 4};
  if (tail.u32() != want) throw WireError(WireFault::CrcMismatch, "manifest CRC mismatch");

  detail::ByteReader r{bytes.data(), bytes.size() - 4};
  char magic[4];
  r.raw(magic, 4);
  if (std::memcmp(magic, "PDKV", 4) != 0)
    throw WireError(WireFault::BadMagic, "not a PDKV manifest");
  ManifestMetadata meta;
  meta.version = r.u16();
  if (meta.version != kManifestVersion)
    throw WireError(WireFault::UnsupportedVersion, "unsupported manifest version");
  meta.flags = r.u16();
  meta.model_hash = r.u64();
  meta.n_tokens = r.u32();
  std::uint8_t dt = r.u8();
  if (dt > 2) throw WireError(WireFault::ShapeMismatch, "unknown dtype code");
  meta.dtype = static_cast<Dtype>(dt);
  std::uint16_t n_layers = r.u16();

  KVCache kv;
  kv.next_pos = static_cast<int>(meta.n_tokens);
  for (int l = 0; l < n_layers; ++l) {
    KVLayer layer;
    layer.slot = r.u16();
    std::uint8_t mode = r.u8();
    if (mode > 1) throw WireError(WireFault::ShapeMismatch, "unknown retention mode");
    layer.n_heads = r.u16();
    layer.head_dim = r.u16();
    if (layer.n_heads < 1 || layer.head_dim < 1)
      throw WireError(WireFault::ShapeMismatch, "degenerate layer shape");
    std::uint32_t entries = r.u32();
    layer.positions.resize(entries);
    for (std::uint32_t i = 0; i < entries; ++i) {
      layer.positions[i] = static_cast<int>(r.u32());
      if (i > 0 && layer.positions[i] <= layer.positions[i - 1])
        throw WireError(WireFault::ShapeMismatch, "positions not strictly increasing");
    }
    const std::size_t w = static_cast<std::size_t>(layer.n_heads) * layer.head_dim;
    layer.k.resize(entries * w);
    layer.v.resize(entries * w);
    for (double& x : layer.k) x = detail::read_scalar(r, meta.dtype);
    for (double& x : layer.v) x = detail::read_scalar(r, meta.dtype);
    meta.layer_ids.push_back(layer.slot);
    meta.layer_modes.push_back(static_cast<RetentionMode>(mode));
    kv.layers.push_back(std::move(layer));
  }
  if (r.pos != r.n) throw WireError(WireFault::ShapeMismatch, "trailing bytes in manifest");
  if (meta_out) *meta_out = std::move(meta);
  return kv;
}

}  // namespace pdprune

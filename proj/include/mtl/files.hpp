#pragma once

// Binary files for instance masks ("MTLM") and gradient traces ("MTLT"),
// in the same little-endian block layout as datasets and checkpoints.

#include <filesystem>
#include <string>
#include <vector>

#include "mtl/binary_io.hpp"
#include "mtl/diagnostics.hpp"
#include "mtl/metrics.hpp"

namespace mtl {

inline constexpr std::uint16_t kMaskVersion = 1;
inline constexpr std::uint16_t kTraceVersion = 1;

// Id map [H,W] followed by a class table [n,2] of (instance id, class).
inline std::vector<std::uint8_t> encode_mask(const InstanceMask& m) {
  m.validate();
  io::Writer w;
  w.magic("MTLM");
  w.u16(kMaskVersion);
  w.block(io::IntTensor{{m.height, m.width}, m.ids});
  io::IntTensor table{{m.classes.size(), 2}, {}};
  for (auto [id, cls] : m.classes) {
    table.data.push_back(id);
    table.data.push_back(cls);
  }
  if (m.classes.empty()) {
    w.u8(0);  // no table block
  } else {
    w.u8(1);
    w.block(table);
  }
  w.finish_with_crc();
  return w.bytes();
}

inline InstanceMask decode_mask(std::span<const std::uint8_t> bytes) {
  io::Reader r(bytes);
  r.expect_magic("MTLM");
  const auto version = r.u16();
  if (version != kMaskVersion) throw VersionError("mask format version " + std::to_string(version));
  auto ids = r.i32_block("mask ids");
  if (ids.shape.size() != 2) throw DataError("mask id map must be 2-D");
  InstanceMask m(ids.shape[0], ids.shape[1]);
  m.ids = std::move(ids.data);
  if (r.u8() != 0) {
    auto table = r.i32_block("class table");
    if (table.shape.size() != 2 || table.shape[1] != 2) throw DataError("class table must be [n,2]");
    for (std::size_t i = 0; i < table.shape[0]; ++i) m.classes[table.data[2 * i]] = table.data[2 * i + 1];
  }
  r.verify_crc();
  try {
    m.validate();
  } catch (const ValueError& e) {
    throw DataError(std::string("mask: ") + e.what());
  }
  return m;
}

inline void save_mask(const std::filesystem::path& path, const InstanceMask& m) { io::write_file(path, encode_mask(m)); }

inline InstanceMask load_mask(const std::filesystem::path& path) {
  const auto bytes = io::read_file(path);
  return decode_mask(bytes);
}

inline std::vector<std::uint8_t> encode_trace(const GradTrace& tr) {
  io::Writer w;
  w.magic("MTLT");
  w.u16(kTraceVersion);
  w.u8(static_cast<std::uint8_t>(tr.mode()));
  w.u64(tr.sketch_seed());
  w.u64(tr.source_dim());
  w.u64(tr.size());
  for (const auto& e : tr.entries()) {
    w.u64(e.t);
    w.u32(e.task);
    w.block(Tensor({e.grad.size()}, e.grad));
  }
  w.finish_with_crc();
  return w.bytes();
}

inline GradTrace decode_trace(std::span<const std::uint8_t> bytes) {
  io::Reader r(bytes);
  r.expect_magic("MTLT");
  const auto version = r.u16();
  if (version != kTraceVersion) throw VersionError("trace format version " + std::to_string(version));
  const auto mode = r.u8();
  if (mode > 1) throw DataError("trace: unknown mode " + std::to_string(mode));
  const auto seed = r.u64();
  const auto dim = r.u64();
  const auto n = r.u64();
  GradTrace tr(static_cast<TraceMode>(mode), seed);
  for (std::uint64_t i = 0; i < n; ++i) {
    TraceEntry e;
    e.t = r.u64();
    e.task = r.u32();
    const auto g = r.f64_block("trace vector");
    e.grad.assign(g.data().begin(), g.data().end());
    try {
      tr.append_recorded(std::move(e), dim);
    } catch (const Error& err) {
      throw DataError(std::string("trace: ") + err.what());
    }
  }
  r.verify_crc();
  return tr;
}

inline void save_trace(const std::filesystem::path& path, const GradTrace& tr) { io::write_file(path, encode_trace(tr)); }

inline GradTrace load_trace(const std::filesystem::path& path) {
  const auto bytes = io::read_file(path);
  return decode_trace(bytes);
}

}  // namespace mtl

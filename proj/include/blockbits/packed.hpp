#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "blockbits/binary_io.hpp"
#include "blockbits/quantizer.hpp"

namespace blockbits {

// Packed mixed-precision tensor:
//
//   u32 rows, cols, block_rows, block_cols, group_size
//   u8  bits[grid_rows * grid_cols]            row-major over the block grid
//   payload, per block in row-major order, per group (rows of the block, then
//   column groups): u16 half scale, then the zero code and group_size codes
//   as one LSB-first bitstream of b bits each, padded to a byte.
//
// Blocks with b = 0 store no payload.
struct PackedLayout {
  std::uint32_t rows = 0;
  std::uint32_t cols = 0;
  std::uint32_t block_rows = 0;
  std::uint32_t block_cols = 0;
  std::uint32_t group_size = 0;

  std::size_t grid_rows() const noexcept { return (rows + block_rows - 1) / block_rows; }
  std::size_t grid_cols() const noexcept { return cols / block_cols; }
  std::size_t blocks() const noexcept { return grid_rows() * grid_cols(); }
  std::size_t rows_of(std::size_t block) const noexcept {
    const std::size_t r0 = (block / grid_cols()) * block_rows;
    return std::min<std::size_t>(block_rows, rows - r0);
  }
  std::size_t groups_of(std::size_t block) const noexcept { return rows_of(block) * (block_cols / group_size); }

  void validate(std::size_t at = 0) const {
    if (!rows || !cols || !block_rows || !block_cols || !group_size)
      throw FormatError("packed tensor header has a zero dimension", at);
    if (block_cols % group_size || cols % block_cols)
      throw FormatError("packed tensor header has inconsistent block and group sizes", at);
  }
  friend bool operator==(const PackedLayout&, const PackedLayout&) = default;
};

struct PackedTensor {
  PackedLayout layout;
  std::vector<std::uint8_t> bits;     // one per block
  std::vector<std::uint8_t> payload;  // concatenated group records
};

inline std::size_t group_record_bytes(int bits, std::size_t group_size) {
  if (bits == 0) return 0;
  return 2 + (static_cast<std::size_t>(bits) * (group_size + 1) + 7) / 8;
}

// Payload length from the header and bitwidth table alone.
inline std::size_t packed_payload_size(const PackedLayout& l, const std::vector<std::uint8_t>& bits) {
  std::size_t n = 0;
  for (std::size_t b = 0; b < bits.size(); ++b) n += l.groups_of(b) * group_record_bytes(bits[b], l.group_size);
  return n;
}

inline std::size_t packed_tensor_size(const PackedLayout& l, const std::vector<std::uint8_t>& bits) {
  return 5 * 4 + bits.size() + packed_payload_size(l, bits);
}

namespace detail {

class BitWriter {
 public:
  explicit BitWriter(std::vector<std::uint8_t>& out) : out_(out) {}
  void put(unsigned value, int bits) {
    for (int i = 0; i < bits; ++i) {
      if (used_ == 0) out_.push_back(0);
      if ((value >> i) & 1u) out_.back() |= static_cast<std::uint8_t>(1u << used_);
      used_ = (used_ + 1) & 7;
    }
  }
  void flush() { used_ = 0; }

 private:
  std::vector<std::uint8_t>& out_;
  int used_ = 0;
};

class BitReader {
 public:
  explicit BitReader(std::span<const std::uint8_t> in) : in_(in) {}
  unsigned get(int bits) {
    unsigned v = 0;
    for (int i = 0; i < bits; ++i, ++pos_) v |= static_cast<unsigned>((in_[pos_ >> 3] >> (pos_ & 7)) & 1u) << i;
    return v;
  }

 private:
  std::span<const std::uint8_t> in_;
  std::size_t pos_ = 0;
};

}  // namespace detail

// `blocks[i]` holds the groups of block i in payload order.
inline PackedTensor pack_tensor(const PackedLayout& layout, const std::vector<std::vector<GroupQuant>>& blocks) {
  layout.validate();
  if (blocks.size() != layout.blocks())
    throw ContractError("pack_tensor got " + std::to_string(blocks.size()) + " blocks for a grid of " +
                        std::to_string(layout.blocks()));
  PackedTensor p;
  p.layout = layout;
  p.bits.reserve(blocks.size());
  for (std::size_t b = 0; b < blocks.size(); ++b) {
    const auto& groups = blocks[b];
    if (groups.size() != layout.groups_of(b))
      throw ContractError("block " + std::to_string(b) + " has " + std::to_string(groups.size()) + " groups, expected " +
                          std::to_string(layout.groups_of(b)));
    const int bits = groups.empty() ? 0 : groups.front().bits;
    p.bits.push_back(static_cast<std::uint8_t>(bits));
    if (bits == 0) continue;
    for (const GroupQuant& g : groups) {
      if (g.bits != bits) throw ContractError("groups of one block must share a bitwidth");
      if (g.codes.size() != layout.group_size) throw ContractError("group length differs from the layout group size");
      p.payload.push_back(static_cast<std::uint8_t>(g.scale_half & 0xff));
      p.payload.push_back(static_cast<std::uint8_t>(g.scale_half >> 8));
      detail::BitWriter w(p.payload);
      w.put(static_cast<unsigned>(g.zero), bits);
      for (std::uint8_t c : g.codes) w.put(c, bits);
    }
  }
  return p;
}

inline std::vector<std::vector<GroupQuant>> unpack_tensor(const PackedTensor& p) {
  const PackedLayout& l = p.layout;
  l.validate();
  if (p.bits.size() != l.blocks()) throw FormatError("bitwidth table length does not match the block grid", 0);
  ByteReader r(p.payload);
  std::vector<std::vector<GroupQuant>> blocks(l.blocks());
  for (std::size_t b = 0; b < blocks.size(); ++b) {
    const int bits = p.bits[b];
    if (bits > 8) throw FormatError("block bitwidth " + std::to_string(bits) + " exceeds 8", b);
    auto& groups = blocks[b];
    groups.resize(l.groups_of(b));
    for (auto& g : groups) {
      g.bits = bits;
      g.codes.assign(l.group_size, 0);
      if (bits == 0) continue;
      const std::uint16_t lo = r.u8(), hi = r.u8();
      g.scale_half = static_cast<std::uint16_t>(lo | (hi << 8));
      detail::BitReader br(r.bytes(group_record_bytes(bits, l.group_size) - 2, "group codes"));
      g.zero = static_cast<int>(br.get(bits));
      for (auto& c : g.codes) c = static_cast<std::uint8_t>(br.get(bits));
    }
  }
  if (!r.done()) throw FormatError("trailing payload bytes", r.offset());
  return blocks;
}

// Dense dequantized matrix of a packed tensor.
inline Tensor dequantize_packed(const PackedTensor& p) {
  const PackedLayout& l = p.layout;
  const auto blocks = unpack_tensor(p);
  Tensor out = Tensor::zeros({l.rows, l.cols});
  for (std::size_t b = 0; b < blocks.size(); ++b) {
    BlockInfo info;
    info.row0 = (b / l.grid_cols()) * l.block_rows;
    info.rows = l.rows_of(b);
    info.col0 = (b % l.grid_cols()) * l.block_cols;
    info.cols = l.block_cols;
    write_block(out, info, blocks[b], l.group_size);
  }
  return out;
}

inline void write_packed_tensor(ByteWriter& w, const PackedTensor& p) {
  const PackedLayout& l = p.layout;
  for (std::uint32_t v : {l.rows, l.cols, l.block_rows, l.block_cols, l.group_size}) w.u32(v);
  w.bytes(p.bits);
  w.bytes(p.payload);
}

inline PackedTensor read_packed_tensor(ByteReader& r) {
  PackedTensor p;
  const std::size_t at = r.offset();
  PackedLayout& l = p.layout;
  l.rows = r.u32();
  l.cols = r.u32();
  l.block_rows = r.u32();
  l.block_cols = r.u32();
  l.group_size = r.u32();
  l.validate(at);
  const auto table = r.bytes(l.blocks(), "bitwidth table");
  p.bits.assign(table.begin(), table.end());
  for (std::size_t b = 0; b < p.bits.size(); ++b)
    if (p.bits[b] > 8) throw FormatError("block bitwidth exceeds 8", r.offset() - p.bits.size() + b);
  const auto payload = r.bytes(packed_payload_size(l, p.bits), "packed payload");
  p.payload.assign(payload.begin(), payload.end());
  return p;
}

// ---------------------------------------------------------------------------
// Packed weight file: "SBIT" | u16 version | u32 tensor count | tensors

inline constexpr std::uint16_t kPackedVersion = 1;

inline std::size_t packed_file_size(const std::vector<PackedTensor>& tensors) {
  std::size_t n = 4 + 2 + 4;
  for (const auto& t : tensors) n += packed_tensor_size(t.layout, t.bits);
  return n;
}

inline std::vector<std::uint8_t> encode_packed_file(const std::vector<PackedTensor>& tensors) {
  ByteWriter w;
  w.str("SBIT");
  w.u16(kPackedVersion);
  w.u32(static_cast<std::uint32_t>(tensors.size()));
  for (const auto& t : tensors) write_packed_tensor(w, t);
  return std::move(w).take();
}

inline std::vector<PackedTensor> decode_packed_file(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes);
  if (r.str(4) != "SBIT") throw FormatError("bad packed file magic", 0);
  const std::size_t at = r.offset();
  if (const auto v = r.u16(); v != kPackedVersion)
    throw FormatError("unsupported packed file version " + std::to_string(v), at);
  const std::size_t count = r.u32();
  std::vector<PackedTensor> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) out.push_back(read_packed_tensor(r));
  if (!r.done()) throw FormatError("trailing bytes after packed tensors", r.offset());
  return out;
}

// One packed tensor per quantizable site, in site order.
inline std::vector<PackedTensor> pack_model(const ModelBundle& m, const BlockPartition& p, const Assignment& b,
                                            const QuantConfig& cfg) {
  validate_assignment(p, b, cfg);
  std::vector<PackedTensor> out;
  for (const SiteGrid& g : p.grids()) {
    const Tensor& w = m.params()[m.sites()[g.site].param];
    PackedLayout l{static_cast<std::uint32_t>(g.rows), static_cast<std::uint32_t>(g.cols),
                   static_cast<std::uint32_t>(p.block_rows()), static_cast<std::uint32_t>(p.block_cols()),
                   static_cast<std::uint32_t>(p.group_size())};
    std::vector<std::vector<GroupQuant>> blocks;
    for (std::size_t i = g.first; i < g.first + g.count(); ++i) blocks.push_back(quantize_block(w, p.block(i), b[i], cfg));
    out.push_back(pack_tensor(l, blocks));
  }
  return out;
}

// Dequantized site weights and the per-block assignment recovered from a
// packed file.
inline QuantizedWeights unpack_model(const std::vector<PackedTensor>& tensors, const ModelBundle& m) {
  if (tensors.size() != m.sites().size())
    throw FormatError("packed file holds " + std::to_string(tensors.size()) + " tensors for " +
                          std::to_string(m.sites().size()) + " sites",
                      0);
  QuantizedWeights q;
  for (std::size_t s = 0; s < tensors.size(); ++s) {
    const auto& l = tensors[s].layout;
    if (l.rows != m.sites()[s].rows || l.cols != m.sites()[s].cols)
      throw FormatError("packed tensor " + std::to_string(s) + " shape differs from " + m.sites()[s].name, 0);
    q.sites.push_back(dequantize_packed(tensors[s]));
    for (std::uint8_t b : tensors[s].bits) q.bits.push_back(b);
  }
  return q;
}

}  // namespace blockbits

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <vector>

#include "blockbits/partition.hpp"

namespace blockbits {

// ---------------------------------------------------------------------------
// 16-bit binary float scales

inline double half_to_double(std::uint16_t h) {
  const int exp = (h >> 10) & 0x1f;
  const int frac = h & 0x3ff;
  const double sign = (h & 0x8000) ? -1.0 : 1.0;
  if (exp == 0) return sign * std::ldexp(static_cast<double>(frac), -24);
  if (exp == 31) return frac ? std::numeric_limits<double>::quiet_NaN() : sign * HUGE_VAL;
  return sign * std::ldexp(static_cast<double>(1024 + frac), exp - 25);
}

// Smallest positive half >= x. Every step is exact in double precision.
inline std::uint16_t half_round_up(double x) {
  if (!(x > 0.0)) throw NumericError("half_round_up needs a positive finite value");
  if (x > 65504.0) throw NumericError("scale " + std::to_string(x) + " exceeds the 16-bit float range");
  int e2 = 0;
  std::frexp(x, &e2);
  const int e = e2 - 1;  // x in [2^e, 2^(e+1))
  if (e < -14) return static_cast<std::uint16_t>(std::ceil(std::ldexp(x, 24)));
  const double frac = std::ceil(std::ldexp(x, -e) * 1024.0 - 1024.0);
  // frac == 1024 carries into the exponent field, which is the next binade.
  return static_cast<std::uint16_t>(((e + 15) << 10) + static_cast<int>(frac));
}

// ---------------------------------------------------------------------------
// Group quantizer

struct QuantConfig {
  std::size_t group_size = 128;
  int bit_min = 1;
  int bit_max = 8;
  bool symmetric = false;
  static constexpr int scale_bits = 16;

  void validate() const {
    if (group_size == 0) throw ConfigError("group_size", "group size must be positive");
    if (bit_min < 0 || bit_min > bit_max || bit_max > 8)
      throw ConfigError("bit_min", "bit range [" + std::to_string(bit_min) + ", " + std::to_string(bit_max) +
                                       "] must satisfy 0 <= bit_min <= bit_max <= 8");
  }
};

struct GroupQuant {
  int bits = 0;
  std::uint16_t scale_half = 0;
  int zero = 0;
  std::vector<std::uint8_t> codes;

  double scale() const { return half_to_double(scale_half); }
  double value(std::size_t i) const {
    if (bits == 0) return 0.0;
    return scale() * static_cast<double>(static_cast<int>(codes[i]) - zero);
  }
  friend bool operator==(const GroupQuant&, const GroupQuant&) = default;
};

namespace detail {

inline double round_away(double x) { return std::round(x); }

inline long code_span(double lo, double hi, double s) {
  return static_cast<long>(round_away(hi / s)) - static_cast<long>(round_away(lo / s));
}

inline bool exact_on_grid(std::span<const double> v, double s) {
  for (double x : v)
    if (s * round_away(x / s) != x) return false;
  return true;
}

inline GroupQuant encode_with(std::span<const double> v, int bits, std::uint16_t scale_half, int zero) {
  GroupQuant g;
  g.bits = bits;
  g.scale_half = scale_half;
  g.zero = zero;
  const double s = half_to_double(scale_half);
  const long top = (1L << bits) - 1;
  g.codes.resize(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) {
    const long c = static_cast<long>(round_away(v[i] / s)) + zero;
    g.codes[i] = static_cast<std::uint8_t>(std::clamp(c, 0L, top));
  }
  return g;
}

// Asymmetric grid over [min(v, 0), max(v, 0)]. Values that already sit on a
// grid of k <= 2^b - 1 steps are kept exactly; otherwise the scale is the half
// nearest above span / (2^b - 1) that makes the grid span all 2^b - 1 steps,
// and re-quantizing the result reproduces it. No code is ever clamped.
inline GroupQuant rtn_asymmetric(std::span<const double> v, int bits) {
  const auto [mn_it, mx_it] = std::minmax_element(v.begin(), v.end());
  const double lo = std::min(*mn_it, 0.0), hi = std::max(*mx_it, 0.0);
  const long top = (1L << bits) - 1;
  if (lo == hi) return encode_with(v, bits, 0x3c00, 0);
  const double span = hi - lo;
  auto zero_for = [&](std::uint16_t h) { return static_cast<int>(round_away(-lo / half_to_double(h))); };
  for (long steps = top; steps >= 1; --steps) {
    const std::uint16_t h = half_round_up(span / static_cast<double>(steps));
    const double s = half_to_double(h);
    if (code_span(lo, hi, s) <= top && exact_on_grid(v, s)) return encode_with(v, bits, h, zero_for(h));
  }

  std::uint16_t h = half_round_up(span / static_cast<double>(top));
  long k = code_span(lo, hi, half_to_double(h));
  while (k > top) {  // both ends on a rounding tie
    ++h;
    k = code_span(lo, hi, half_to_double(h));
  }
  const std::uint16_t fallback = h;
  while (k < top && h > 1) {
    const long k2 = code_span(lo, hi, half_to_double(static_cast<std::uint16_t>(h - 1)));
    if (k2 > top) break;
    --h;
    k = k2;
  }
  if (k != top) h = fallback;
  return encode_with(v, bits, h, zero_for(h));
}

inline GroupQuant rtn_symmetric(std::span<const double> v, int bits) {
  const long half_range = (1L << (bits - 1)) - 1;
  const int zero = 1 << (bits - 1);
  double amax = 0.0;
  for (double x : v) amax = std::max(amax, std::fabs(x));
  if (amax == 0.0) return encode_with(v, bits, 0x3c00, zero);
  return encode_with(v, bits, half_round_up(amax / static_cast<double>(half_range)), zero);
}

}  // namespace detail

// Round-to-nearest (half away from zero) onto a per-group grid
// scale * (code - zero). bits == 0 prunes the group.
inline GroupQuant rtn_quantize_group(std::span<const double> values, int bits, bool symmetric = false) {
  if (bits < 0 || bits > 8) throw ContractError("bitwidth " + std::to_string(bits) + " outside [0, 8]");
  for (double x : values)
    if (!std::isfinite(x)) throw NumericError("non-finite weight in quantization group");
  if (values.empty()) throw ContractError("empty quantization group");
  if (bits == 0) {
    GroupQuant g;
    g.codes.assign(values.size(), 0);
    return g;
  }
  if (symmetric && bits >= 2) return detail::rtn_symmetric(values, bits);
  return detail::rtn_asymmetric(values, bits);
}

inline void dequantize_group(const GroupQuant& g, std::span<double> out) {
  if (out.size() != g.codes.size()) throw DimensionError("dequantize_group output size mismatch");
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = g.value(i);
}

// ---------------------------------------------------------------------------
// Model-level quantization map

using Assignment = std::vector<int>;

inline void validate_assignment(const BlockPartition& p, const Assignment& b, const QuantConfig& cfg) {
  if (b.size() != p.size())
    throw ContractError("assignment has " + std::to_string(b.size()) + " entries for " + std::to_string(p.size()) +
                        " blocks");
  for (std::size_t i = 0; i < b.size(); ++i)
    if (b[i] != 0 && (b[i] < cfg.bit_min || b[i] > cfg.bit_max))
      throw ContractError("block " + std::to_string(i) + " bitwidth " + std::to_string(b[i]) + " outside [" +
                          std::to_string(cfg.bit_min) + ", " + std::to_string(cfg.bit_max) + "] and not 0");
}

// Groups of block `info` of weight `w`, row by row, column group by column
// group.
inline std::vector<GroupQuant> quantize_block(const Tensor& w, const BlockInfo& info, int bits,
                                              const QuantConfig& cfg) {
  const std::size_t gs = cfg.group_size;
  std::vector<GroupQuant> out;
  out.reserve(info.rows * (info.cols / gs));
  const std::size_t ld = w.cols();
  const auto data = w.data();
  for (std::size_t r = info.row0; r < info.row0 + info.rows; ++r)
    for (std::size_t c = info.col0; c < info.col0 + info.cols; c += gs)
      out.push_back(rtn_quantize_group(data.subspan(r * ld + c, gs), bits, cfg.symmetric));
  return out;
}

inline void write_block(Tensor& dst, const BlockInfo& info, const std::vector<GroupQuant>& groups,
                        std::size_t group_size) {
  const std::size_t ld = dst.cols();
  auto data = dst.data();
  std::size_t g = 0;
  for (std::size_t r = info.row0; r < info.row0 + info.rows; ++r)
    for (std::size_t c = info.col0; c < info.col0 + info.cols; c += group_size)
      dequantize_group(groups.at(g++), data.subspan(r * ld + c, group_size));
}

// Dequantized site weights w^Q under an assignment.
struct QuantizedWeights {
  std::vector<Tensor> sites;
  Assignment bits;
};

inline void requantize_block(const ModelBundle& m, const BlockPartition& p, QuantizedWeights& q, std::size_t block,
                             int bits, const QuantConfig& cfg) {
  const BlockInfo& info = p.block(block);
  const Tensor& w = m.params()[m.sites()[info.site].param];
  write_block(q.sites[info.site], info, quantize_block(w, info, bits, cfg), cfg.group_size);
  q.bits[block] = bits;
}

inline QuantizedWeights quantize_model(const ModelBundle& m, const BlockPartition& p, const Assignment& b,
                                       const QuantConfig& cfg) {
  validate_assignment(p, b, cfg);
  if (p.group_size() != cfg.group_size) throw ContractError("partition group size differs from the quantizer's");
  QuantizedWeights q;
  q.bits = b;
  q.sites.reserve(m.sites().size());
  for (const auto& s : m.sites()) q.sites.push_back(Tensor::zeros({s.rows, s.cols}));
  for (std::size_t i = 0; i < p.size(); ++i) requantize_block(m, p, q, i, b[i], cfg);
  return q;
}

// Same quantization applied to weights given directly per site.
inline std::vector<Tensor> quantize_sites(const std::vector<Tensor>& sites, const BlockPartition& p,
                                          const Assignment& b, const QuantConfig& cfg) {
  validate_assignment(p, b, cfg);
  std::vector<Tensor> out = sites;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const BlockInfo& info = p.block(i);
    write_block(out[info.site], info, quantize_block(sites[info.site], info, b[i], cfg), cfg.group_size);
  }
  return out;
}

inline Assignment uniform_assignment(const BlockPartition& p, int bits) { return Assignment(p.size(), bits); }

// ---------------------------------------------------------------------------
// Bit accounting

struct EffectiveBits {
  double weight = 0.0;  // constrained quantity: sum b_i M_i / sum M_i
  double total = 0.0;   // adds per-group scale and zero code plus the per-block bitwidth byte
};

inline double average_bits(const Assignment& b, const BlockPartition& p) {
  if (b.size() != p.size()) throw ContractError("assignment length does not match the partition");
  double num = 0.0;
  for (std::size_t i = 0; i < b.size(); ++i) num += static_cast<double>(b[i]) * static_cast<double>(p.elements(i));
  return num / static_cast<double>(p.total_elements());
}

// Integer numerator of the weight-bit average, for exact budget checks.
inline std::uint64_t weight_bits(const Assignment& b, const BlockPartition& p) {
  std::uint64_t n = 0;
  for (std::size_t i = 0; i < b.size(); ++i) n += static_cast<std::uint64_t>(b[i]) * p.elements(i);
  return n;
}

// Largest weight-bit numerator allowed by budget B.
inline std::uint64_t budget_bits(double budget, const BlockPartition& p) {
  return static_cast<std::uint64_t>(std::floor(budget * static_cast<double>(p.total_elements()) + 1e-9));
}

inline EffectiveBits effective_bits(const Assignment& b, const BlockPartition& p, const QuantConfig& cfg) {
  validate_assignment(p, b, cfg);
  double total = 0.0;
  for (std::size_t i = 0; i < b.size(); ++i) {
    total += static_cast<double>(b[i]) * static_cast<double>(p.elements(i)) + 8.0;
    if (b[i] > 0) total += static_cast<double>(p.groups(i)) * (QuantConfig::scale_bits + b[i]);
  }
  return {average_bits(b, p), total / static_cast<double>(p.total_elements())};
}

}  // namespace blockbits

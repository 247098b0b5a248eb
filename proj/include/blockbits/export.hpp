#pragma once

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <iomanip>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "blockbits/sensitivity.hpp"

namespace blockbits {

// Shortest round-tripping decimal for doubles in CSV/JSON text.
inline std::string fmt_double(double v) {
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  if (std::isnan(v)) return "nan";
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

struct GrayImage {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<std::uint8_t> pixels;  // row-major

  std::uint8_t at(std::size_t r, std::size_t c) const { return pixels.at(r * width + c); }
};

// Binary PGM (P5, maxval 255).
inline std::vector<std::uint8_t> encode_pgm(const GrayImage& img) {
  const std::string header = "P5\n" + std::to_string(img.width) + " " + std::to_string(img.height) + "\n255\n";
  std::vector<std::uint8_t> out(header.begin(), header.end());
  out.insert(out.end(), img.pixels.begin(), img.pixels.end());
  return out;
}

inline GrayImage decode_pgm(std::span<const std::uint8_t> bytes) {
  std::size_t pos = 0;
  auto token = [&] {
    while (pos < bytes.size() && std::isspace(bytes[pos])) ++pos;
    std::string t;
    while (pos < bytes.size() && !std::isspace(bytes[pos])) t += static_cast<char>(bytes[pos++]);
    if (t.empty()) throw FormatError("truncated PGM header", pos);
    return t;
  };
  if (token() != "P5") throw FormatError("not a binary PGM", 0);
  GrayImage img;
  img.width = std::stoul(token());
  img.height = std::stoul(token());
  if (token() != "255") throw FormatError("PGM maxval must be 255", pos);
  ++pos;
  if (bytes.size() - std::min(pos, bytes.size()) != img.width * img.height) throw FormatError("PGM payload size", pos);
  img.pixels.assign(bytes.begin() + static_cast<std::ptrdiff_t>(pos), bytes.end());
  return img;
}

inline std::uint8_t to_gray(double unit) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(unit, 0.0, 1.0) * 255.0));
}

// Each row scaled by its own max |value|; all-zero rows stay black.
inline GrayImage heatmap_row_normalized(const Tensor& s) {
  require_matrix(s, "heatmap_row_normalized");
  GrayImage img{s.cols(), s.rows(), std::vector<std::uint8_t>(s.size(), 0)};
  for (std::size_t r = 0; r < s.rows(); ++r) {
    double mx = 0.0;
    for (std::size_t c = 0; c < s.cols(); ++c) mx = std::max(mx, std::fabs(s(r, c)));
    if (mx == 0.0) continue;
    for (std::size_t c = 0; c < s.cols(); ++c) img.pixels[r * s.cols() + c] = to_gray(std::fabs(s(r, c)) / mx);
  }
  return img;
}

// Bits mapped linearly from [bit_min, bit_max] to [0, 255], one pixel per
// weight so block tiles keep their true extent.
inline GrayImage heatmap_bits(const BlockPartition& p, std::size_t site, const Assignment& b, int bit_min,
                              int bit_max) {
  const SiteGrid& g = p.grid(site);
  GrayImage img{g.cols, g.rows, std::vector<std::uint8_t>(g.rows * g.cols, 0)};
  const double span = bit_max > bit_min ? static_cast<double>(bit_max - bit_min) : 1.0;
  for (std::size_t i = g.first; i < g.first + g.count(); ++i) {
    const BlockInfo& info = p.block(i);
    const std::uint8_t v = to_gray(static_cast<double>(b.at(i) - bit_min) / span);
    for (std::size_t r = info.row0; r < info.row0 + info.rows; ++r)
      for (std::size_t c = info.col0; c < info.col0 + info.cols; ++c) img.pixels[r * g.cols + c] = v;
  }
  return img;
}

inline std::string matrix_csv(const Tensor& s) {
  require_matrix(s, "matrix_csv");
  std::string out;
  for (std::size_t r = 0; r < s.rows(); ++r) {
    for (std::size_t c = 0; c < s.cols(); ++c) {
      if (c) out += ',';
      out += fmt_double(s(r, c));
    }
    out += '\n';
  }
  return out;
}

inline Tensor bits_matrix(const BlockPartition& p, std::size_t site, const Assignment& b) {
  const SiteGrid& g = p.grid(site);
  Tensor t = Tensor::zeros({g.rows, g.cols});
  for (std::size_t i = g.first; i < g.first + g.count(); ++i) {
    const BlockInfo& info = p.block(i);
    for (std::size_t r = info.row0; r < info.row0 + info.rows; ++r)
      for (std::size_t c = info.col0; c < info.col0 + info.cols; ++c) t(r, c) = b.at(i);
  }
  return t;
}

// Mean pixel of each quadrant: top-left, top-right, bottom-left, bottom-right.
inline std::array<double, 4> quadrant_means(const GrayImage& img) {
  std::array<double, 4> sum{}, cnt{};
  const std::size_t hr = img.height / 2, hc = img.width / 2;
  for (std::size_t r = 0; r < img.height; ++r)
    for (std::size_t c = 0; c < img.width; ++c) {
      const std::size_t q = (r < hr ? 0 : 2) + (c < hc ? 0 : 1);
      sum[q] += img.at(r, c);
      cnt[q] += 1;
    }
  for (std::size_t q = 0; q < 4; ++q) sum[q] = cnt[q] ? sum[q] / cnt[q] : 0.0;
  return sum;
}

// Share of total |S| inside the top-left quadrant (half the rows, half the
// columns).
inline double top_left_mass(const Tensor& s) {
  double tl = 0.0, total = 0.0;
  for (std::size_t r = 0; r < s.rows(); ++r)
    for (std::size_t c = 0; c < s.cols(); ++c) {
      const double v = std::fabs(s(r, c));
      total += v;
      if (r < s.rows() / 2 && c < s.cols() / 2) tl += v;
    }
  return total > 0.0 ? tl / total : 0.0;
}

// Snapshot CSV: block id, bits, s_up, s_down.
inline std::string snapshot_csv(const Assignment& b, const BlockScores& s) {
  std::string out = "block,bits,s_up,s_down\n";
  for (std::size_t i = 0; i < b.size(); ++i)
    out += std::to_string(i) + "," + std::to_string(b[i]) + "," + fmt_double(s.up.at(i)) + "," +
           fmt_double(s.down.at(i)) + "\n";
  return out;
}

}  // namespace blockbits

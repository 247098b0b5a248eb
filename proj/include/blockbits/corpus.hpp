#pragma once

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "blockbits/binary_io.hpp"
#include "blockbits/model.hpp"

namespace blockbits {

struct CalibrationSet {
  std::vector<Sequence> sequences;
  std::uint64_t seed = 0;

  std::size_t size() const noexcept { return sequences.size(); }
  Batch all() const { return sequences; }
  Batch subset(const std::vector<std::size_t>& idx) const {
    Batch b;
    b.reserve(idx.size());
    for (std::size_t i : idx) b.push_back(sequences.at(i));
    return b;
  }
  Batch first(std::size_t n) const {
    return Batch(sequences.begin(), sequences.begin() + static_cast<std::ptrdiff_t>(std::min(n, sequences.size())));
  }
};

// Order-2 Markov token stream. The next token mixes three sources: a sparse
// favourite-successor table keyed on the previous token, a second table keyed
// on the token two back, and a uniform floor. Tables are drawn from `seed`.
inline std::vector<int> make_corpus(std::size_t vocab, std::size_t length, std::uint64_t seed) {
  if (vocab == 0) throw SizeError("vocabulary must be non-empty");
  std::mt19937_64 rng(seed);
  constexpr std::size_t kNear = 4, kFar = 2;
  std::uniform_int_distribution<int> tok(0, static_cast<int>(vocab) - 1);
  std::vector<std::array<int, kNear>> near(vocab);
  std::vector<std::array<int, kFar>> far(vocab);
  for (std::size_t v = 0; v < vocab; ++v) {
    for (auto& t : near[v]) t = tok(rng);
    for (auto& t : far[v]) t = tok(rng);
  }
  constexpr std::array<double, kNear> near_w = {0.5, 0.25, 0.15, 0.10};
  constexpr std::array<double, kFar> far_w = {0.7, 0.3};
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  auto pick = [&](auto const& weights) {
    double u = unit(rng);
    for (std::size_t i = 0; i < weights.size(); ++i) {
      if (u < weights[i]) return i;
      u -= weights[i];
    }
    return weights.size() - 1;
  };

  std::vector<int> out;
  out.reserve(length);
  int p2 = tok(rng), p1 = tok(rng);
  for (std::size_t i = 0; i < length; ++i) {
    const double u = unit(rng);
    int next;
    if (u < 0.6)
      next = near[static_cast<std::size_t>(p1)][pick(near_w)];
    else if (u < 0.85)
      next = far[static_cast<std::size_t>(p2)][pick(far_w)];
    else
      next = tok(rng);
    out.push_back(next);
    p2 = p1;
    p1 = next;
  }
  return out;
}

// Raw bytes of a text file as a vocab-256 token stream.
inline std::vector<int> load_byte_corpus(const std::string& path) {
  auto bytes = read_file(path);
  return {bytes.begin(), bytes.end()};
}

// `n_seqs` disjoint contiguous slices of length `seq_len`, chosen by a seeded
// shuffle of the aligned slots of the stream.
inline CalibrationSet make_calibration(const std::vector<int>& corpus, std::size_t n_seqs, std::size_t seq_len,
                                       std::uint64_t seed) {
  if (seq_len == 0) throw SizeError("calibration sequence length must be positive");
  if (corpus.size() < n_seqs * seq_len)
    throw SizeError("corpus of " + std::to_string(corpus.size()) + " tokens cannot supply " + std::to_string(n_seqs) +
                    " sequences of " + std::to_string(seq_len));
  const std::size_t slots = corpus.size() / seq_len;
  std::vector<std::size_t> order(slots);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::mt19937_64 rng(seed);
  // Fisher-Yates with an explicit draw so the order does not depend on the
  // standard library's shuffle implementation.
  for (std::size_t i = slots; i > 1; --i) {
    std::uniform_int_distribution<std::size_t> d(0, i - 1);
    std::swap(order[i - 1], order[d(rng)]);
  }
  CalibrationSet set;
  set.seed = seed;
  for (std::size_t k = 0; k < n_seqs; ++k) {
    const auto start = corpus.begin() + static_cast<std::ptrdiff_t>(order[k] * seq_len);
    set.sequences.emplace_back(start, start + static_cast<std::ptrdiff_t>(seq_len));
  }
  return set;
}

}  // namespace blockbits

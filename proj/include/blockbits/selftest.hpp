#pragma once

#include <chrono>
#include <cmath>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "blockbits/instances.hpp"
#include "blockbits/packed.hpp"
#include "blockbits/reorder.hpp"

namespace blockbits {

// Small architecture for quick oracle checks.
inline ModelSpec tiny_spec(std::uint64_t seed = 5) { return {32, 16, 2, 2, 32, 8, seed}; }

// Random sequences of length spec.seq_len.
inline Batch random_batch(const ModelSpec& spec, std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> tok(0, static_cast<int>(spec.vocab) - 1);
  Batch b(n, Sequence(spec.seq_len));
  for (auto& s : b)
    for (auto& t : s) t = tok(rng);
  return b;
}

// Random layout, bitwidths in [0, 8] and codes within range.
inline std::pair<PackedLayout, std::vector<std::vector<GroupQuant>>> random_packed_blocks(std::mt19937_64& rng) {
  auto pick = [&](std::size_t lo, std::size_t hi) { return std::uniform_int_distribution<std::size_t>(lo, hi)(rng); };
  const std::uint32_t gs = static_cast<std::uint32_t>(pick(1, 4) * 4);
  const std::uint32_t bc = gs * static_cast<std::uint32_t>(pick(1, 3));
  const std::uint32_t cols = bc * static_cast<std::uint32_t>(pick(1, 3));
  const std::uint32_t br = static_cast<std::uint32_t>(pick(1, 6));
  const std::uint32_t rows = static_cast<std::uint32_t>(pick(1, 13));
  PackedLayout l{rows, cols, br, bc, gs};
  std::vector<std::vector<GroupQuant>> blocks(l.blocks());
  for (std::size_t b = 0; b < blocks.size(); ++b) {
    const int bits = static_cast<int>(pick(0, 8));
    blocks[b].resize(l.groups_of(b));
    for (auto& g : blocks[b]) {
      g.bits = bits;
      g.codes.assign(gs, 0);
      if (bits == 0) continue;
      g.scale_half = static_cast<std::uint16_t>(pick(0x0400, 0x7bff));
      g.zero = static_cast<int>(pick(0, (1u << bits) - 1));
      for (auto& c : g.codes) c = static_cast<std::uint8_t>(pick(0, (1u << bits) - 1));
    }
  }
  return {l, std::move(blocks)};
}

struct SuiteResult {
  std::string name;
  bool passed = false;
  std::string detail;
  double seconds = 0.0;
};

namespace suites {

inline SuiteResult gradient() {
  const ModelBundle m = build_model(tiny_spec());
  const Batch batch = random_batch(m.spec(), 2, 1);
  TapedForward f = forward_tape(WeightView(m), batch);
  const auto grads = f.gradients();
  const auto coords = sample_coordinates(m.params(), 32, 9);
  const double err = finite_diff_check(
      [&](const std::vector<Tensor>& params) {
        ModelBundle probe = m;
        probe.params() = params;
        return forward_loss(probe, batch);
      },
      m.params(), grads, 1e-4, coords);
  return {"gradient", err <= 1e-4, "max relative error " + std::to_string(err)};
}

inline SuiteResult greedy_bound() {
  const double ratio = 1.0 - 1.0 / std::exp(1.0);
  std::size_t failures = 0;
  double worst = 1.0;
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    const RandomInstance inst = random_dr_instance(seed);
    const BlockBudget budget = BlockBudget::uniform(inst.n, inst.budget);
    std::vector<int> levels;
    for (int b = 0; b <= inst.bit_max; ++b) levels.push_back(b);
    const OracleResult opt = exhaustive_oracle(inst.value, inst.n, levels, budget);
    const GreedyResult g = classic_greedy(inst.value, budget, inst.bit_max);
    const double base = inst.value(Assignment(inst.n, 0));
    const double got = g.values.back() - base, best = opt.value - base;
    if (best > 0) worst = std::min(worst, got / best);
    if (got < ratio * best - 1e-12) ++failures;
  }
  return {"greedy-bound", failures == 0,
          std::to_string(failures) + " failures, worst ratio " + std::to_string(worst)};
}

inline SuiteResult pack_roundtrip(std::size_t count = 1000) {
  std::mt19937_64 rng(2024);
  std::size_t bad = 0;
  for (std::size_t k = 0; k < count; ++k) {
    auto [layout, blocks] = random_packed_blocks(rng);
    const PackedTensor p = pack_tensor(layout, blocks);
    const auto file = encode_packed_file({p});
    const auto back = decode_packed_file(file);
    if (file.size() != packed_file_size({p}) || back.size() != 1 || unpack_tensor(back[0]) != blocks) ++bad;
  }
  return {"pack-roundtrip", bad == 0, std::to_string(bad) + " of " + std::to_string(count) + " mismatched"};
}

inline SuiteResult quantizer() {
  std::mt19937_64 rng(77);
  std::normal_distribution<double> nd(0.0, 1.0);
  std::size_t bound = 0, idem = 0;
  for (std::size_t k = 0; k < 4000; ++k) {
    std::vector<double> v(32);
    for (auto& x : v) x = nd(rng) * 0.05;
    const int bits = static_cast<int>(1 + k % 8);
    const GroupQuant g = rtn_quantize_group(v, bits);
    std::vector<double> d(v.size());
    dequantize_group(g, d);
    for (std::size_t i = 0; i < v.size(); ++i)
      if (std::fabs(d[i] - v[i]) > g.scale() / 2) ++bound;
    std::vector<double> d2(v.size());
    dequantize_group(rtn_quantize_group(d, bits), d2);
    if (d2 != d) ++idem;
  }
  return {"quantizer", bound == 0 && idem == 0,
          std::to_string(bound) + " bound violations, " + std::to_string(idem) + " non-idempotent groups"};
}

inline SuiteResult reorder_equivalence() {
  const ModelBundle m = build_model(tiny_spec());
  const auto groups = coupling_graph(m);
  std::mt19937_64 rng(3);
  PermutationSet perms = identity_permutations(groups);
  for (auto& p : perms)
    for (std::size_t i = p.size(); i > 1; --i) std::swap(p[i - 1], p[std::uniform_int_distribution<std::size_t>(0, i - 1)(rng)]);
  const ModelBundle r = apply_permutations(m, groups, perms);
  double worst = 0.0;
  for (std::uint64_t s = 0; s < 4; ++s) {
    const Batch b = random_batch(m.spec(), 2, 100 + s);
    const double a = forward_loss(m, b), c = forward_loss(r, b);
    worst = std::max(worst, std::fabs(a - c) / a);
  }
  const bool restored = apply_permutations(r, groups, inverse_permutations(perms)) == m;
  return {"reorder-equivalence", worst <= 1e-6 && restored,
          "max relative loss change " + std::to_string(worst) + (restored ? "" : ", inverse did not restore")};
}

inline SuiteResult factorization() {
  std::mt19937_64 rng(11);
  std::normal_distribution<double> nd(0.0, 1.0);
  auto fill = [&](Tensor t) {
    for (auto& x : t.data()) x = nd(rng);
    return t;
  };
  const Tensor w = fill(Tensor::zeros({4, 4})), wq = fill(Tensor::zeros({4, 4}));
  const Tensor x = fill(Tensor::zeros({6, 4})), gy = fill(Tensor::zeros({6, 4}));
  const Tensor direct = element_sensitivity(matmul(transpose(gy), x), w, wq);
  const Tensor fact = element_sensitivity_factored(gy, x, w, wq);
  double worst = 0.0;
  for (std::size_t i = 0; i < direct.size(); ++i)
    worst = std::max(worst, std::fabs(direct.data()[i] - fact.data()[i]) / std::max(std::fabs(direct.data()[i]), 1e-300));
  return {"factorization", worst <= 1e-10, "max relative difference " + std::to_string(worst)};
}

}  // namespace suites

inline std::vector<SuiteResult> run_selftest() {
  const std::vector<std::function<SuiteResult()>> all = {
      suites::gradient, suites::greedy_bound, [] { return suites::pack_roundtrip(); },
      suites::quantizer, suites::reorder_equivalence, suites::factorization};
  std::vector<SuiteResult> out;
  for (const auto& s : all) {
    const auto t0 = std::chrono::steady_clock::now();
    SuiteResult r = s();
    r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    out.push_back(std::move(r));
  }
  return out;
}

}  // namespace blockbits

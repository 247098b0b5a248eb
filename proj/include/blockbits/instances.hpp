#pragma once

#include <cmath>
#include <random>
#include <vector>

#include "blockbits/allocator.hpp"

namespace blockbits {

// v(b) = sum_i a_i (1 - 2^-b_i): separable, monotone, DR-submodular.
inline ValueFn separable_concave(std::vector<double> a) {
  return [a = std::move(a)](const Assignment& b) {
    double v = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) v += a[i] * (1.0 - std::ldexp(1.0, -b[i]));
    return v;
  };
}

// Probabilistic coverage: item j (weight w_j) is missed by coordinate i with
// probability q_ij per unit of b_i, so v(b) = sum_j w_j (1 - prod_i q_ij^b_i).
// Marginals shrink in every coordinate, so v is monotone DR-submodular.
struct CoverageInstance {
  std::vector<double> weight;             // per item
  std::vector<std::vector<double>> miss;  // miss[i][j]

  double operator()(const Assignment& b) const {
    double v = 0.0;
    for (std::size_t j = 0; j < weight.size(); ++j) {
      double missed = 1.0;
      for (std::size_t i = 0; i < miss.size(); ++i) missed *= std::pow(miss[i][j], b[i]);
      v += weight[j] * (1.0 - missed);
    }
    return v;
  }
};

struct RandomInstance {
  std::size_t n = 0;
  int bit_max = 3;
  double budget = 0.0;
  ValueFn value;
};

// Coverage plus a separable concave term, with N in [2, max_n], bit_max in
// [1, max_bits] and a budget in [0.5, bit_max].
inline RandomInstance random_dr_instance(std::uint64_t seed, std::size_t max_n = 5, int max_bits = 3) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  RandomInstance inst;
  inst.n = std::uniform_int_distribution<std::size_t>(2, max_n)(rng);
  inst.bit_max = std::uniform_int_distribution<int>(1, max_bits)(rng);
  inst.budget = 0.5 + unit(rng) * (inst.bit_max - 0.5);
  const std::size_t items = std::uniform_int_distribution<std::size_t>(2, 6)(rng);
  CoverageInstance cov;
  for (std::size_t j = 0; j < items; ++j) cov.weight.push_back(0.1 + unit(rng));
  cov.miss.assign(inst.n, std::vector<double>(items, 1.0));
  for (auto& row : cov.miss)
    for (auto& q : row)
      if (unit(rng) < 0.6) q = 0.2 + 0.75 * unit(rng);
  std::vector<double> a(inst.n);
  for (auto& x : a) x = unit(rng) * 0.5;
  auto sep = separable_concave(std::move(a));
  inst.value = [cov = std::move(cov), sep = std::move(sep)](const Assignment& b) { return cov(b) + sep(b); };
  return inst;
}

}  // namespace blockbits

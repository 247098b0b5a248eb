#pragma once

#include <functional>
#include <string>
#include <vector>

#include "support.hpp"

namespace bbtest {

// Scalar probe: sum(R * y) for a fixed random R of y's shape.
inline Var weighted_sum(Tape& t, Var y, std::uint64_t seed) {
  const std::size_t rows = t.value(y).rows(), cols = t.value(y).cols();
  Var r = t.leaf(random_matrix(rows, cols, seed));
  Var prod = t.mul(y, r);
  Var left = t.leaf(Tensor::filled({1, rows}, 1.0));
  Var right = t.leaf(Tensor::filled({cols, 1}, 1.0));
  return t.matmul(t.matmul(left, prod), right);
}

using Builder = std::function<Var(Tape&, const std::vector<Var>&)>;

// Max relative error between tape gradients and central differences over
// every coordinate of `params`.
inline double op_gradient_error(const Builder& build, const std::vector<Tensor>& params) {
  auto eval = [&](const std::vector<Tensor>& p) {
    Tape t;
    std::vector<Var> leaves;
    for (std::size_t i = 0; i < p.size(); ++i) leaves.push_back(t.leaf(p[i], "p" + std::to_string(i)));
    return t.value(build(t, leaves)).item();
  };
  Tape t;
  std::vector<Var> leaves;
  for (std::size_t i = 0; i < params.size(); ++i) leaves.push_back(t.leaf(params[i], "p" + std::to_string(i)));
  Var loss = build(t, leaves);
  t.backward(loss);
  std::vector<Tensor> grads;
  std::vector<FdCoordinate> coords;
  for (std::size_t i = 0; i < params.size(); ++i) {
    grads.push_back(t.adjoint(leaves[i]));
    for (std::size_t k = 0; k < params[i].size(); ++k) coords.push_back({i, k});
  }
  return finite_diff_check(eval, params, grads, 1e-4, coords);
}

struct OpCase {
  const char* name;
  Builder build;
  std::vector<Tensor> params;
};

// One small graph per tape op.
inline std::vector<OpCase> op_cases() {
  return {
      {"matmul", [](Tape& t, const std::vector<Var>& p) { return weighted_sum(t, t.matmul(p[0], p[1]), 1); },
       {random_matrix(3, 4, 1), random_matrix(4, 2, 2)}},
      {"add", [](Tape& t, const std::vector<Var>& p) { return weighted_sum(t, t.add(p[0], p[1]), 2); },
       {random_matrix(3, 4, 3), random_matrix(3, 4, 4)}},
      {"mul", [](Tape& t, const std::vector<Var>& p) { return weighted_sum(t, t.mul(p[0], p[1]), 3); },
       {random_matrix(3, 4, 5), random_matrix(3, 4, 6)}},
      {"scale", [](Tape& t, const std::vector<Var>& p) { return weighted_sum(t, t.scale(p[0], -1.7), 4); },
       {random_matrix(2, 3, 7)}},
      {"transpose", [](Tape& t, const std::vector<Var>& p) { return weighted_sum(t, t.transpose(p[0]), 5); },
       {random_matrix(2, 5, 8)}},
      {"softmax_rows", [](Tape& t, const std::vector<Var>& p) { return weighted_sum(t, t.softmax_rows(p[0]), 6); },
       {random_matrix(3, 5, 9)}},
      {"rms_norm",
       [](Tape& t, const std::vector<Var>& p) { return weighted_sum(t, t.rms_norm(p[0], p[1]), 7); },
       {random_matrix(3, 6, 10), Tensor::vector({0.5, -1.0, 1.5, 2.0, -0.3, 0.8})}},
      {"silu", [](Tape& t, const std::vector<Var>& p) { return weighted_sum(t, t.silu(p[0]), 8); },
       {random_matrix(3, 4, 12)}},
      {"gelu", [](Tape& t, const std::vector<Var>& p) { return weighted_sum(t, t.gelu(p[0]), 9); },
       {random_matrix(3, 4, 13)}},
      {"gather", [](Tape& t, const std::vector<Var>& p) { return weighted_sum(t, t.gather(p[0], {2, 0, 2, 1}), 10); },
       {random_matrix(3, 4, 14)}},
      {"causal_mask",
       [](Tape& t, const std::vector<Var>& p) { return weighted_sum(t, t.softmax_rows(t.causal_mask(p[0])), 11); },
       {random_matrix(4, 4, 15)}},
      {"mean_cross_entropy",
       [](Tape& t, const std::vector<Var>& p) { return t.mean_cross_entropy(p[0], {1, 0, 4}); },
       {random_matrix(3, 5, 16)}},
      {"slice", [](Tape& t, const std::vector<Var>& p) { return weighted_sum(t, t.slice(p[0], 1, 3, 1, 4), 12); },
       {random_matrix(4, 5, 17)}},
      {"concat_rows",
       [](Tape& t, const std::vector<Var>& p) {
         const std::vector<Var> parts = {p[0], p[1]};
         return weighted_sum(t, t.concat_rows(parts), 13);
       },
       {random_matrix(2, 3, 18), random_matrix(1, 3, 19)}},
      {"concat_cols",
       [](Tape& t, const std::vector<Var>& p) {
         const std::vector<Var> parts = {p[0], p[1]};
         return weighted_sum(t, t.concat_cols(parts), 14);
       },
       {random_matrix(2, 3, 20), random_matrix(2, 2, 21)}},
  };
}

}  // namespace bbtest

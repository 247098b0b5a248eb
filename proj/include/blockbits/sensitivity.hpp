#pragma once

#include <cmath>
#include <limits>
#include <optional>
#include <vector>

#include "blockbits/quantizer.hpp"

namespace blockbits {

// Loss gradient with respect to every quantizable site, taken at whatever
// weights the view resolves to (w^Q for the quantized-reference estimates).
struct SiteGradients {
  double loss = 0.0;
  std::vector<Tensor> grad;      // dL/dW per site
  std::vector<Tensor> factored;  // sum_t g_y[t]^T x[t] per site, when requested
};

inline SiteGradients site_gradients(const WeightView& w, const Batch& batch, bool with_factors = false) {
  TapedForward f = forward_tape(w, batch);
  SiteGradients out;
  out.loss = f.loss_value();
  f.tape.backward(f.loss);
  const ModelBundle& m = w.model();
  out.grad.reserve(m.sites().size());
  for (const auto& s : m.sites()) out.grad.push_back(f.tape.adjoint(f.params[s.param]));
  if (with_factors) {
    for (const auto& s : m.sites()) {
      const Tensor& x = f.tape.value(f.sites[s.id].input);
      const Tensor gy = f.tape.adjoint(f.sites[s.id].output);
      Tensor g = Tensor::zeros({s.rows, s.cols});
      kernels::gemm_tn_acc(gy.data().data(), x.data().data(), g.data().data(), x.rows(), s.rows, s.cols);
      out.factored.push_back(std::move(g));
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Component-level estimates

// |sum_j g_j dw_j|
inline double first_order_sensitivity(std::span<const double> g, std::span<const double> dw) {
  if (g.size() != dw.size()) throw DimensionError("gradient and update lengths differ");
  double s = 0.0;
  for (std::size_t i = 0; i < g.size(); ++i) s += g[i] * dw[i];
  return std::fabs(s);
}

// sum_j |g_j| |dw_j|
inline double fp_baseline_metric(std::span<const double> g, std::span<const double> dw) {
  if (g.size() != dw.size()) throw DimensionError("gradient and update lengths differ");
  double s = 0.0;
  for (std::size_t i = 0; i < g.size(); ++i) s += std::fabs(g[i]) * std::fabs(dw[i]);
  return s;
}

inline Tensor difference(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) throw DimensionError("difference of mismatched shapes");
  Tensor out = a;
  auto o = out.data();
  const auto bd = b.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] -= bd[i];
  return out;
}

enum class ComponentMetric { FirstOrder, FullPrecisionBaseline };

// Per decoder layer: the metric applied to the layer's gradients and
// dw = w - w^Q, summed over the layer's sites (inner sums pooled first for
// the signed first-order estimate).
inline std::vector<double> layer_sensitivity(const ModelBundle& m, const std::vector<Tensor>& grads,
                                             const std::vector<Tensor>& wq, ComponentMetric metric) {
  std::vector<double> signed_sum(m.spec().n_layers, 0.0), out(m.spec().n_layers, 0.0);
  for (const auto& s : m.sites()) {
    const Tensor dw = difference(m.params()[s.param], wq[s.id]);
    const auto g = grads[s.id].data();
    const auto d = dw.data();
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (metric == ComponentMetric::FirstOrder)
        signed_sum[s.layer] += g[i] * d[i];
      else
        out[s.layer] += std::fabs(g[i]) * std::fabs(d[i]);
    }
  }
  if (metric == ComponentMetric::FirstOrder)
    for (std::size_t l = 0; l < out.size(); ++l) out[l] = std::fabs(signed_sum[l]);
  return out;
}

// Ground truth: |L(w^Q with the blocks restored) - L(w^Q)|. `restore_bits`
// empty restores full precision.
inline double true_component_sensitivity(const ModelBundle& m, const BlockPartition& p, const QuantizedWeights& q,
                                         const std::vector<std::size_t>& component, std::optional<int> restore_bits,
                                         const Batch& batch, const QuantConfig& cfg) {
  QuantizedWeights r = q;
  for (std::size_t b : component) {
    if (restore_bits) {
      requantize_block(m, p, r, b, *restore_bits, cfg);
    } else {
      const BlockInfo& info = p.block(b);
      const Tensor& w = m.params()[m.sites()[info.site].param];
      Tensor& dst = r.sites[info.site];
      for (std::size_t i = info.row0; i < info.row0 + info.rows; ++i)
        for (std::size_t j = info.col0; j < info.col0 + info.cols; ++j) dst(i, j) = w(i, j);
    }
  }
  const double base = forward_loss(WeightView(m, q.sites), batch);
  const double restored = forward_loss(WeightView(m, r.sites), batch);
  return std::fabs(restored - base);
}

inline std::vector<std::vector<std::size_t>> layer_block_sets(const BlockPartition& p, std::size_t n_layers) {
  std::vector<std::vector<std::size_t>> sets(n_layers);
  for (std::size_t i = 0; i < p.size(); ++i) sets[p.block(i).layer].push_back(i);
  return sets;
}

// ---------------------------------------------------------------------------
// Element-wise sensitivity |g_ij| |dW_ij|

inline Tensor element_sensitivity(const Tensor& grad, const Tensor& w, const Tensor& wq) {
  if (grad.shape() != w.shape() || w.shape() != wq.shape()) throw DimensionError("element sensitivity shape mismatch");
  Tensor s = Tensor::zeros(w.shape());
  auto o = s.data();
  const auto g = grad.data(), a = w.data(), b = wq.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = std::fabs(g[i]) * std::fabs(a[i] - b[i]);
  return s;
}

// Factorized path: the row factor g_y and column factor x accumulated over
// token positions, S_ij = |sum_t g_y[t, i] x[t, j]| |dW_ij|.
inline Tensor element_sensitivity_factored(const Tensor& gy, const Tensor& x, const Tensor& w, const Tensor& wq) {
  require_matrix(gy, "element_sensitivity_factored");
  require_matrix(x, "element_sensitivity_factored");
  if (gy.rows() != x.rows() || gy.cols() != w.rows() || x.cols() != w.cols())
    throw DimensionError("factor shapes do not match the weight");
  Tensor g = Tensor::zeros(w.shape());
  kernels::gemm_tn_acc(gy.data().data(), x.data().data(), g.data().data(), x.rows(), w.rows(), w.cols());
  return element_sensitivity(g, w, wq);
}

inline std::vector<Tensor> element_sensitivities(const ModelBundle& m, const std::vector<Tensor>& grads,
                                                 const std::vector<Tensor>& wq) {
  std::vector<Tensor> out;
  out.reserve(m.sites().size());
  for (const auto& s : m.sites()) out.push_back(element_sensitivity(grads[s.id], m.params()[s.param], wq[s.id]));
  return out;
}

// ---------------------------------------------------------------------------
// Block surrogates for one-bit moves

enum class UpAggregation { Signed, L1 };

struct BlockScores {
  std::vector<double> up;    // predicted loss decrease from one more bit
  std::vector<double> down;  // predicted loss increase from one fewer bit
};

// up_i   = g^T (w^Q - w) over the block (l1: sum |g (w - w^Q)|)
// down_i = 2^-b_i ||g * w^Q||_1
// Blocks at bit_max get up = -inf; blocks at bit_min get down = +inf.
inline BlockScores block_updown(const BlockPartition& p, const std::vector<Tensor>& grads,
                                const std::vector<Tensor>& w, const std::vector<Tensor>& wq, const Assignment& b,
                                const QuantConfig& cfg, UpAggregation agg = UpAggregation::Signed) {
  if (b.size() != p.size()) throw ContractError("assignment length does not match the partition");
  BlockScores s{std::vector<double>(p.size(), 0.0), std::vector<double>(p.size(), 0.0)};
  for (std::size_t i = 0; i < p.size(); ++i) {
    const BlockInfo& info = p.block(i);
    const Tensor &g = grads[info.site], &full = w[info.site], &q = wq[info.site];
    double up = 0.0, down = 0.0;
    for (std::size_t r = info.row0; r < info.row0 + info.rows; ++r) {
      for (std::size_t c = info.col0; c < info.col0 + info.cols; ++c) {
        const double gv = g(r, c), qv = q(r, c);
        up += agg == UpAggregation::Signed ? gv * (qv - full(r, c)) : std::fabs(gv * (full(r, c) - qv));
        down += std::fabs(gv * qv);
      }
    }
    s.up[i] = b[i] >= cfg.bit_max ? -std::numeric_limits<double>::infinity() : up;
    s.down[i] = b[i] <= cfg.bit_min ? std::numeric_limits<double>::infinity() : std::ldexp(down, -b[i]);
  }
  return s;
}

inline std::vector<Tensor> site_weights(const ModelBundle& m) {
  std::vector<Tensor> out;
  out.reserve(m.sites().size());
  for (const auto& s : m.sites()) out.push_back(m.params()[s.param]);
  return out;
}

// ---------------------------------------------------------------------------
// Element protection (restore selected weights to full precision)

struct ElementRef {
  std::size_t site = 0;
  std::size_t index = 0;  // flat row-major index
};

// The `count` elements with the largest sensitivity; ties by (site, index).
inline std::vector<ElementRef> top_elements(const std::vector<Tensor>& sens, std::size_t count) {
  std::vector<std::pair<double, ElementRef>> all;
  for (std::size_t s = 0; s < sens.size(); ++s)
    for (std::size_t i = 0; i < sens[s].size(); ++i) all.push_back({sens[s].data()[i], {s, i}});
  count = std::min(count, all.size());
  std::partial_sort(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(count), all.end(),
                    [](const auto& a, const auto& b) {
                      if (a.first != b.first) return a.first > b.first;
                      if (a.second.site != b.second.site) return a.second.site < b.second.site;
                      return a.second.index < b.second.index;
                    });
  std::vector<ElementRef> out;
  for (std::size_t i = 0; i < count; ++i) out.push_back(all[i].second);
  return out;
}

inline std::vector<Tensor> restore_elements(const std::vector<Tensor>& wq, const std::vector<Tensor>& w,
                                            const std::vector<ElementRef>& which) {
  std::vector<Tensor> out = wq;
  for (const auto& e : which) out.at(e.site).data()[e.index] = w.at(e.site).data()[e.index];
  return out;
}

}  // namespace blockbits

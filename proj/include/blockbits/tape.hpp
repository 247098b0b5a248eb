#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <map>
#include <numbers>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "blockbits/tensor.hpp"

namespace blockbits {

// The closed set of primitives the tape can record. Backward rules exist for
// exactly these; there is no extension point.
enum class OpKind : std::uint8_t {
  Leaf,
  MatMul,
  Add,
  Mul,
  Scale,
  Transpose,
  SoftmaxRows,
  RmsNorm,
  Silu,
  Gelu,
  Gather,
  CausalMask,
  MeanCrossEntropy,
  Slice,
  ConcatRows,
  ConcatCols,
};

inline const char* op_name(OpKind op) {
  switch (op) {
    case OpKind::Leaf: return "leaf";
    case OpKind::MatMul: return "matmul";
    case OpKind::Add: return "add";
    case OpKind::Mul: return "mul";
    case OpKind::Scale: return "scale";
    case OpKind::Transpose: return "transpose";
    case OpKind::SoftmaxRows: return "softmax_rows";
    case OpKind::RmsNorm: return "rms_norm";
    case OpKind::Silu: return "silu";
    case OpKind::Gelu: return "gelu";
    case OpKind::Gather: return "gather";
    case OpKind::CausalMask: return "causal_mask";
    case OpKind::MeanCrossEntropy: return "mean_cross_entropy";
    case OpKind::Slice: return "slice";
    case OpKind::ConcatRows: return "concat_rows";
    case OpKind::ConcatCols: return "concat_cols";
  }
  return "?";
}

// Handle to a node on a Tape. Only meaningful for the tape that produced it.
struct Var {
  std::size_t id = std::numeric_limits<std::size_t>::max();
  bool valid() const noexcept { return id != std::numeric_limits<std::size_t>::max(); }
};

using GradMap = std::map<std::string, Tensor>;

namespace detail {

inline constexpr double kInvSqrt2 = 0.70710678118654752440;

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

inline double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x * kInvSqrt2)); }

inline double gelu_grad(double x) {
  const double pdf = std::exp(-0.5 * x * x) * (std::numbers::inv_sqrtpi * kInvSqrt2);
  return 0.5 * (1.0 + std::erf(x * kInvSqrt2)) + x * pdf;
}

}  // namespace detail

// Records a computation graph in evaluation order and runs reverse-mode
// differentiation over it. Nodes are appended only, so recording order is a
// topological order. A tape is single-use and not thread-safe.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;
  Tape(Tape&&) = default;
  Tape& operator=(Tape&&) = default;

  // Named leaves are parameters and can be looked up by grad(); unnamed
  // leaves are constants.
  Var leaf(Tensor value, std::string name = {}) {
    Node n;
    n.op = OpKind::Leaf;
    n.value = std::move(value);
    n.name = std::move(name);
    const Var v = push(std::move(n));
    if (!nodes_[v.id].name.empty()) named_[nodes_[v.id].name] = v.id;
    return v;
  }

  Var matmul(Var a, Var b) {
    const Tensor& x = value(a);
    const Tensor& y = value(b);
    return push(make(OpKind::MatMul, {a, b}, blockbits::matmul(x, y)));
  }

  Var add(Var a, Var b) {
    const Tensor& x = value(a);
    const Tensor& y = value(b);
    same_shape(x, y, "add");
    Tensor out = x;
    auto o = out.data();
    auto yd = y.data();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] += yd[i];
    return push(make(OpKind::Add, {a, b}, std::move(out)));
  }

  Var mul(Var a, Var b) {
    const Tensor& x = value(a);
    const Tensor& y = value(b);
    same_shape(x, y, "mul");
    Tensor out = x;
    auto o = out.data();
    auto yd = y.data();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] *= yd[i];
    return push(make(OpKind::Mul, {a, b}, std::move(out)));
  }

  Var scale(Var a, double s) {
    Tensor out = value(a);
    for (double& v : out.data()) v *= s;
    Node n = make(OpKind::Scale, {a}, std::move(out));
    n.scalar = s;
    return push(std::move(n));
  }

  Var transpose(Var a) { return push(make(OpKind::Transpose, {a}, blockbits::transpose(value(a)))); }

  Var softmax_rows(Var a) {
    const Tensor& x = value(a);
    require_matrix(x, "softmax_rows");
    Tensor out = Tensor::zeros(x.shape());
    const std::size_t r = x.rows(), c = x.cols();
    for (std::size_t i = 0; i < r; ++i) {
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < c; ++j) mx = std::max(mx, x(i, j));
      double sum = 0.0;
      for (std::size_t j = 0; j < c; ++j) {
        const double e = std::exp(x(i, j) - mx);
        out(i, j) = e;
        sum += e;
      }
      const double inv = 1.0 / sum;
      for (std::size_t j = 0; j < c; ++j) out(i, j) *= inv;
    }
    return push(make(OpKind::SoftmaxRows, {a}, std::move(out)));
  }

  // y[i][j] = x[i][j] / sqrt(mean_j x[i][j]^2 + eps) * gain[j]
  Var rms_norm(Var x, Var gain, double eps = 1e-6) {
    const Tensor& xv = value(x);
    const Tensor& gv = value(gain);
    require_matrix(xv, "rms_norm");
    if (gv.size() != xv.cols()) {
      throw DimensionError("rms_norm gain of length " + std::to_string(gv.size()) + " for rows of width " +
                           std::to_string(xv.cols()));
    }
    const std::size_t r = xv.rows(), c = xv.cols();
    Tensor out = Tensor::zeros(xv.shape());
    std::vector<double> inv_rms(r);
    for (std::size_t i = 0; i < r; ++i) {
      double ss = 0.0;
      for (std::size_t j = 0; j < c; ++j) ss += xv(i, j) * xv(i, j);
      inv_rms[i] = 1.0 / std::sqrt(ss / static_cast<double>(c) + eps);
      for (std::size_t j = 0; j < c; ++j) out(i, j) = xv(i, j) * inv_rms[i] * gv[j];
    }
    Node n = make(OpKind::RmsNorm, {x, gain}, std::move(out));
    n.saved = Tensor::vector(std::move(inv_rms));
    return push(std::move(n));
  }

  Var silu(Var a) {
    Tensor out = value(a);
    for (double& v : out.data()) v = v * detail::sigmoid(v);
    return push(make(OpKind::Silu, {a}, std::move(out)));
  }

  Var gelu(Var a) {
    Tensor out = value(a);
    for (double& v : out.data()) v = detail::gelu(v);
    return push(make(OpKind::Gelu, {a}, std::move(out)));
  }

  // Rows of `table` selected by `ids`.
  Var gather(Var table, std::vector<int> ids) {
    const Tensor& t = value(table);
    require_matrix(t, "gather");
    const std::size_t c = t.cols();
    Tensor out = Tensor::zeros({ids.size(), c});
    for (std::size_t i = 0; i < ids.size(); ++i) {
      if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= t.rows()) {
        throw InputError("token id " + std::to_string(ids[i]) + " outside table of " + std::to_string(t.rows()) +
                         " rows");
      }
      std::copy_n(t.data().begin() + static_cast<std::ptrdiff_t>(ids[i] * c), c,
                  out.data().begin() + static_cast<std::ptrdiff_t>(i * c));
    }
    Node n = make(OpKind::Gather, {table}, std::move(out));
    n.ids = std::move(ids);
    return push(std::move(n));
  }

  // Entries strictly above the diagonal become -inf.
  Var causal_mask(Var scores) {
    Tensor out = value(scores);
    require_matrix(out, "causal_mask");
    for (std::size_t i = 0; i < out.rows(); ++i)
      for (std::size_t j = i + 1; j < out.cols(); ++j) out(i, j) = -std::numeric_limits<double>::infinity();
    return push(make(OpKind::CausalMask, {scores}, std::move(out)));
  }

  // Mean over rows of -log softmax(logits)[row][target].
  Var mean_cross_entropy(Var logits, std::vector<int> targets) {
    const Tensor& x = value(logits);
    require_matrix(x, "mean_cross_entropy");
    if (targets.size() != x.rows()) throw DimensionError("cross entropy target count does not match logit rows");
    const std::size_t r = x.rows(), c = x.cols();
    double total = 0.0;
    for (std::size_t i = 0; i < r; ++i) {
      if (targets[i] < 0 || static_cast<std::size_t>(targets[i]) >= c) {
        throw InputError("target id " + std::to_string(targets[i]) + " outside vocabulary of " + std::to_string(c));
      }
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < c; ++j) mx = std::max(mx, x(i, j));
      double sum = 0.0;
      for (std::size_t j = 0; j < c; ++j) sum += std::exp(x(i, j) - mx);
      total += (mx + std::log(sum)) - x(i, static_cast<std::size_t>(targets[i]));
    }
    Node n = make(OpKind::MeanCrossEntropy, {logits}, Tensor::scalar(total / static_cast<double>(r)));
    n.ids = std::move(targets);
    return push(std::move(n));
  }

  Var slice(Var a, std::size_t r0, std::size_t r1, std::size_t c0, std::size_t c1) {
    const Tensor& x = value(a);
    require_matrix(x, "slice");
    if (r0 > r1 || r1 > x.rows() || c0 > c1 || c1 > x.cols()) throw DimensionError("slice out of range");
    Tensor out = Tensor::zeros({r1 - r0, c1 - c0});
    for (std::size_t i = r0; i < r1; ++i)
      for (std::size_t j = c0; j < c1; ++j) out(i - r0, j - c0) = x(i, j);
    Node n = make(OpKind::Slice, {a}, std::move(out));
    n.bounds = {r0, r1, c0, c1};
    return push(std::move(n));
  }

  Var concat_rows(std::span<const Var> parts) { return concat(parts, OpKind::ConcatRows); }
  Var concat_cols(std::span<const Var> parts) { return concat(parts, OpKind::ConcatCols); }

  const Tensor& value(Var v) const { return node(v).value; }
  OpKind op(Var v) const { return node(v).op; }
  std::size_t size() const noexcept { return nodes_.size(); }

  std::optional<Var> find_leaf(const std::string& name) const {
    auto it = named_.find(name);
    if (it == named_.end()) return std::nullopt;
    return Var{it->second};
  }

  // Reverse sweep from `loss`. Adjoints from a previous sweep are discarded,
  // so repeated calls produce identical results.
  void backward(Var loss) {
    const Node& ln = node(loss);
    if (ln.value.size() != 1) {
      throw ContractError("backward requires a scalar loss, got shape " + shape_str(ln.value.shape()));
    }
    adjoints_.assign(nodes_.size(), Tensor());
    adjoint_ref(loss.id) = Tensor::filled(ln.value.shape(), 1.0);
    for (std::size_t id = loss.id + 1; id-- > 0;) {
      if (adjoints_[id].empty()) continue;
      backprop(id);
    }
    swept_ = true;
  }

  bool has_adjoints() const noexcept { return swept_; }

  // Adjoint of a node from the last backward(); zeros if the node does not
  // influence the loss.
  Tensor adjoint(Var v) const {
    if (!swept_) throw ContractError("adjoint requested before backward");
    const Node& n = node(v);
    if (v.id >= adjoints_.size() || adjoints_[v.id].empty()) return Tensor::zeros(n.value.shape());
    return adjoints_[v.id];
  }

 private:
  struct Node {
    OpKind op = OpKind::Leaf;
    std::vector<std::size_t> in;
    Tensor value;
    Tensor saved;
    double scalar = 0.0;
    std::vector<int> ids;
    std::array<std::size_t, 4> bounds{};
    std::string name;
  };

  const Node& node(Var v) const {
    if (!v.valid() || v.id >= nodes_.size()) throw LookupError("variable not recorded on this tape");
    return nodes_[v.id];
  }

  Node make(OpKind op, std::initializer_list<Var> in, Tensor value) {
    Node n;
    n.op = op;
    for (Var v : in) n.in.push_back(v.id);
    n.value = std::move(value);
    return n;
  }

  Var push(Node n) {
    nodes_.push_back(std::move(n));
    return Var{nodes_.size() - 1};
  }

  static void same_shape(const Tensor& a, const Tensor& b, const char* what) {
    if (a.shape() != b.shape()) {
      throw DimensionError(std::string(what) + " shape mismatch " + shape_str(a.shape()) + " vs " +
                           shape_str(b.shape()));
    }
  }

  Var concat(std::span<const Var> parts, OpKind kind) {
    if (parts.empty()) throw DimensionError("concat of zero tensors");
    std::size_t rows = 0, cols = 0;
    for (Var p : parts) {
      const Tensor& t = value(p);
      require_matrix(t, "concat");
      if (kind == OpKind::ConcatRows) {
        if (cols && t.cols() != cols) throw DimensionError("concat_rows width mismatch");
        cols = t.cols();
        rows += t.rows();
      } else {
        if (rows && t.rows() != rows) throw DimensionError("concat_cols height mismatch");
        rows = t.rows();
        cols += t.cols();
      }
    }
    Tensor out = Tensor::zeros({rows, cols});
    std::size_t offset = 0;
    for (Var p : parts) {
      const Tensor& t = value(p);
      for (std::size_t i = 0; i < t.rows(); ++i)
        for (std::size_t j = 0; j < t.cols(); ++j) {
          if (kind == OpKind::ConcatRows)
            out(offset + i, j) = t(i, j);
          else
            out(i, offset + j) = t(i, j);
        }
      offset += kind == OpKind::ConcatRows ? t.rows() : t.cols();
    }
    Node n;
    n.op = kind;
    for (Var p : parts) n.in.push_back(p.id);
    n.value = std::move(out);
    return push(std::move(n));
  }

  Tensor& adjoint_ref(std::size_t id) {
    if (adjoints_[id].empty()) adjoints_[id] = Tensor::zeros(nodes_[id].value.shape());
    return adjoints_[id];
  }

  void backprop(std::size_t id) {
    const Node& n = nodes_[id];
    const Tensor& dy = adjoints_[id];
    switch (n.op) {
      case OpKind::Leaf:
        break;
      case OpKind::MatMul: {
        const Tensor& a = nodes_[n.in[0]].value;
        const Tensor& b = nodes_[n.in[1]].value;
        Tensor& da = adjoint_ref(n.in[0]);
        kernels::gemm_nt_acc(dy.data().data(), b.data().data(), da.data().data(), a.rows(), b.cols(), a.cols());
        Tensor& db = adjoint_ref(n.in[1]);
        kernels::gemm_tn_acc(a.data().data(), dy.data().data(), db.data().data(), a.rows(), a.cols(), b.cols());
        break;
      }
      case OpKind::Add: {
        for (std::size_t k = 0; k < 2; ++k) {
          auto d = adjoint_ref(n.in[k]).data();
          for (std::size_t i = 0; i < d.size(); ++i) d[i] += dy[i];
        }
        break;
      }
      case OpKind::Mul: {
        const Tensor& a = nodes_[n.in[0]].value;
        const Tensor& b = nodes_[n.in[1]].value;
        {
          auto d = adjoint_ref(n.in[0]).data();
          for (std::size_t i = 0; i < d.size(); ++i) d[i] += dy[i] * b[i];
        }
        {
          auto d = adjoint_ref(n.in[1]).data();
          for (std::size_t i = 0; i < d.size(); ++i) d[i] += dy[i] * a[i];
        }
        break;
      }
      case OpKind::Scale: {
        auto d = adjoint_ref(n.in[0]).data();
        for (std::size_t i = 0; i < d.size(); ++i) d[i] += dy[i] * n.scalar;
        break;
      }
      case OpKind::Transpose: {
        Tensor& d = adjoint_ref(n.in[0]);
        for (std::size_t i = 0; i < d.rows(); ++i)
          for (std::size_t j = 0; j < d.cols(); ++j) d(i, j) += dy(j, i);
        break;
      }
      case OpKind::SoftmaxRows: {
        const Tensor& y = n.value;
        Tensor& d = adjoint_ref(n.in[0]);
        for (std::size_t i = 0; i < y.rows(); ++i) {
          double dot = 0.0;
          for (std::size_t j = 0; j < y.cols(); ++j) dot += dy(i, j) * y(i, j);
          for (std::size_t j = 0; j < y.cols(); ++j) d(i, j) += y(i, j) * (dy(i, j) - dot);
        }
        break;
      }
      case OpKind::RmsNorm: {
        const Tensor& x = nodes_[n.in[0]].value;
        const Tensor& g = nodes_[n.in[1]].value;
        const Tensor& inv = n.saved;
        const std::size_t r = x.rows(), c = x.cols();
        Tensor& dx = adjoint_ref(n.in[0]);
        Tensor& dg = adjoint_ref(n.in[1]);
        for (std::size_t i = 0; i < r; ++i) {
          double dot = 0.0;
          for (std::size_t j = 0; j < c; ++j) dot += dy(i, j) * g[j] * x(i, j);
          const double s = inv[i];
          const double coef = s * s * s * dot / static_cast<double>(c);
          for (std::size_t j = 0; j < c; ++j) {
            dx(i, j) += dy(i, j) * g[j] * s - x(i, j) * coef;
            dg[j] += dy(i, j) * x(i, j) * s;
          }
        }
        break;
      }
      case OpKind::Silu: {
        const Tensor& x = nodes_[n.in[0]].value;
        auto d = adjoint_ref(n.in[0]).data();
        for (std::size_t i = 0; i < d.size(); ++i) {
          const double s = detail::sigmoid(x[i]);
          d[i] += dy[i] * s * (1.0 + x[i] * (1.0 - s));
        }
        break;
      }
      case OpKind::Gelu: {
        const Tensor& x = nodes_[n.in[0]].value;
        auto d = adjoint_ref(n.in[0]).data();
        for (std::size_t i = 0; i < d.size(); ++i) d[i] += dy[i] * detail::gelu_grad(x[i]);
        break;
      }
      case OpKind::Gather: {
        Tensor& d = adjoint_ref(n.in[0]);
        const std::size_t c = d.cols();
        for (std::size_t i = 0; i < n.ids.size(); ++i) {
          const std::size_t row = static_cast<std::size_t>(n.ids[i]);
          for (std::size_t j = 0; j < c; ++j) d(row, j) += dy(i, j);
        }
        break;
      }
      case OpKind::CausalMask: {
        Tensor& d = adjoint_ref(n.in[0]);
        for (std::size_t i = 0; i < d.rows(); ++i)
          for (std::size_t j = 0; j <= i && j < d.cols(); ++j) d(i, j) += dy(i, j);
        break;
      }
      case OpKind::MeanCrossEntropy: {
        const Tensor& x = nodes_[n.in[0]].value;
        Tensor& d = adjoint_ref(n.in[0]);
        const std::size_t r = x.rows(), c = x.cols();
        const double scale = dy[0] / static_cast<double>(r);
        for (std::size_t i = 0; i < r; ++i) {
          double mx = -std::numeric_limits<double>::infinity();
          for (std::size_t j = 0; j < c; ++j) mx = std::max(mx, x(i, j));
          double sum = 0.0;
          for (std::size_t j = 0; j < c; ++j) sum += std::exp(x(i, j) - mx);
          const double inv = 1.0 / sum;
          for (std::size_t j = 0; j < c; ++j) d(i, j) += scale * std::exp(x(i, j) - mx) * inv;
          d(i, static_cast<std::size_t>(n.ids[i])) -= scale;
        }
        break;
      }
      case OpKind::Slice: {
        Tensor& d = adjoint_ref(n.in[0]);
        const auto [r0, r1, c0, c1] = n.bounds;
        for (std::size_t i = r0; i < r1; ++i)
          for (std::size_t j = c0; j < c1; ++j) d(i, j) += dy(i - r0, j - c0);
        break;
      }
      case OpKind::ConcatRows:
      case OpKind::ConcatCols: {
        std::size_t offset = 0;
        for (std::size_t in : n.in) {
          Tensor& d = adjoint_ref(in);
          for (std::size_t i = 0; i < d.rows(); ++i)
            for (std::size_t j = 0; j < d.cols(); ++j)
              d(i, j) += n.op == OpKind::ConcatRows ? dy(offset + i, j) : dy(i, offset + j);
          offset += n.op == OpKind::ConcatRows ? d.rows() : d.cols();
        }
        break;
      }
    }
  }

  std::vector<Node> nodes_;
  std::unordered_map<std::string, std::size_t> named_;
  std::vector<Tensor> adjoints_;
  bool swept_ = false;
};

// Gradients of a scalar loss with respect to named parameter leaves.
inline GradMap grad(Tape& tape, Var loss, const std::vector<std::string>& params) {
  if (tape.value(loss).size() != 1) throw ContractError("grad requires a scalar loss");
  std::vector<Var> leaves;
  leaves.reserve(params.size());
  for (const auto& name : params) {
    auto v = tape.find_leaf(name);
    if (!v) throw LookupError("parameter '" + name + "' is not a leaf on the tape");
    leaves.push_back(*v);
  }
  tape.backward(loss);
  GradMap out;
  for (std::size_t i = 0; i < params.size(); ++i) out.emplace(params[i], tape.adjoint(leaves[i]));
  return out;
}

struct FdCoordinate {
  std::size_t param = 0;
  std::size_t index = 0;
};

// Central-difference check of analytic gradients: returns the maximum over
// `coords` of |fd - g| / (|g| + 1e-8).
inline double finite_diff_check(const std::function<double(const std::vector<Tensor>&)>& f,
                                std::vector<Tensor> params, const std::vector<Tensor>& grads, double eps,
                                std::span<const FdCoordinate> coords) {
  if (!(eps > 0.0) || !std::isfinite(eps)) throw ContractError("finite difference step must be positive");
  if (grads.size() != params.size()) throw ContractError("gradient list does not match parameter list");
  double worst = 0.0;
  for (const auto& c : coords) {
    if (c.param >= params.size() || c.index >= params[c.param].size())
      throw LookupError("finite difference coordinate out of range");
    double& w = params[c.param][c.index];
    const double saved = w;
    w = saved + eps;
    const double up = f(params);
    w = saved - eps;
    const double down = f(params);
    w = saved;
    if (!std::isfinite(up) || !std::isfinite(down)) throw NumericError("objective is not finite near coordinate");
    const double fd = (up - down) / (2.0 * eps);
    const double g = grads[c.param][c.index];
    worst = std::max(worst, std::abs(fd - g) / (std::abs(g) + 1e-8));
  }
  return worst;
}

// Draws `count` coordinates uniformly (parameter weighted by size).
inline std::vector<FdCoordinate> sample_coordinates(const std::vector<Tensor>& params, std::size_t count,
                                                   std::uint64_t seed) {
  std::size_t total = 0;
  for (const auto& p : params) total += p.size();
  if (total == 0) throw ContractError("no coordinates to sample");
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> pick(0, total - 1);
  std::vector<FdCoordinate> out;
  for (std::size_t k = 0; k < count; ++k) {
    std::size_t flat = pick(rng);
    std::size_t p = 0;
    while (flat >= params[p].size()) flat -= params[p++].size();
    out.push_back({p, flat});
  }
  return out;
}

}  // namespace blockbits

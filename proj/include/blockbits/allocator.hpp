#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <functional>
#include <limits>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "blockbits/corpus.hpp"
#include "blockbits/sensitivity.hpp"

namespace blockbits {

// ---------------------------------------------------------------------------
// Value oracles (higher is better)

using ValueFn = std::function<double(const Assignment&)>;

// Evaluates f(b) and f(b + e_i). Implementations may exploit that only one
// coordinate moves; the default re-evaluates from scratch.
class ValueOracle {
 public:
  virtual ~ValueOracle() = default;
  virtual double value(const Assignment& b) = 0;
  virtual double value_raised(const Assignment& b, std::size_t i) {
    Assignment next = b;
    ++next[i];
    return value(next);
  }
  // Called after the caller commits b as its new current state.
  virtual void commit(const Assignment& /*b*/, std::size_t /*changed*/) {}
};

class FunctionOracle final : public ValueOracle {
 public:
  explicit FunctionOracle(ValueFn f) : f_(std::move(f)) {}
  double value(const Assignment& b) override { return f_(b); }

 private:
  ValueFn f_;
};

// Negated mean loss of the quantized toy model on a fixed batch. Raising one
// block only re-runs the layers from that block's layer onward.
class ModelLossOracle final : public ValueOracle {
 public:
  ModelLossOracle(const ModelBundle& m, const BlockPartition& p, const QuantConfig& cfg, Batch batch)
      : m_(m), p_(p), cfg_(cfg), batch_(std::move(batch)) {}

  double value(const Assignment& b) override {
    ensure(b);
    return -cache_->loss_from(WeightView(m_, q_.sites), 0);
  }

  double value_raised(const Assignment& b, std::size_t i) override {
    ensure(b);
    const BlockInfo& info = p_.block(i);
    Tensor saved = q_.sites[info.site];
    requantize_block(m_, p_, q_, i, b[i] + 1, cfg_);
    const double v = -cache_->loss_from(WeightView(m_, q_.sites), info.layer);
    q_.sites[info.site] = std::move(saved);
    q_.bits[i] = b[i];
    return v;
  }

  void commit(const Assignment& b, std::size_t changed) override {
    if (!cache_ || b.size() != q_.bits.size()) return;
    const BlockInfo& info = p_.block(changed);
    for (std::size_t i = 0; i < b.size(); ++i) {
      if (b[i] == q_.bits[i]) continue;
      if (i != changed) {
        cache_.reset();
        return;
      }
      requantize_block(m_, p_, q_, i, b[i], cfg_);
    }
    cache_->rebuild(WeightView(m_, q_.sites), info.layer);
  }

  std::size_t evaluations() const noexcept { return evals_; }

 private:
  void ensure(const Assignment& b) {
    ++evals_;
    if (cache_ && b == q_.bits) return;
    q_ = quantize_model(m_, p_, b, cfg_);
    cache_.emplace(WeightView(m_, q_.sites), batch_);
  }

  const ModelBundle& m_;
  const BlockPartition& p_;
  QuantConfig cfg_;
  Batch batch_;
  QuantizedWeights q_;
  std::optional<LayerCache> cache_;
  std::size_t evals_ = 0;
};

// ---------------------------------------------------------------------------
// Classic greedy

struct GreedyResult {
  Assignment bits;
  std::vector<double> values;  // f after each accepted raise, starting with f(start)
  bool saturated = false;
};

// Budget on the element-weighted bit sum: sum b_i M_i <= floor(B * sum M_i).
struct BlockBudget {
  std::vector<std::size_t> sizes;
  std::uint64_t limit = 0;

  static BlockBudget weighted(std::vector<std::size_t> sizes, double budget) {
    const double total = static_cast<double>(std::accumulate(sizes.begin(), sizes.end(), std::size_t{0}));
    return {std::move(sizes), static_cast<std::uint64_t>(std::floor(budget * total + 1e-9))};
  }
  static BlockBudget uniform(std::size_t n, double budget) { return weighted(std::vector<std::size_t>(n, 1), budget); }
  static BlockBudget of(const BlockPartition& p, double budget) {
    std::vector<std::size_t> s(p.size());
    for (std::size_t i = 0; i < p.size(); ++i) s[i] = p.elements(i);
    return weighted(std::move(s), budget);
  }

  std::uint64_t used(const Assignment& b) const {
    std::uint64_t n = 0;
    for (std::size_t i = 0; i < b.size(); ++i) n += static_cast<std::uint64_t>(b[i]) * sizes[i];
    return n;
  }
};

// Repeatedly adds one bit to the block with the largest gain among those that
// still fit the budget (ties to the lowest index), until none fits.
inline GreedyResult classic_greedy(ValueOracle& f, const BlockBudget& budget, int bit_max, int start_level = 0) {
  const std::size_t n = budget.sizes.size();
  GreedyResult r;
  r.bits.assign(n, start_level);
  std::uint64_t used = budget.used(r.bits);
  if (used > budget.limit) throw ContractError("greedy start level already exceeds the budget");
  double current = f.value(r.bits);
  r.values.push_back(current);
  for (;;) {
    std::size_t best = n;
    double best_value = -std::numeric_limits<double>::infinity();
    bool any_below_max = false;
    for (std::size_t i = 0; i < n; ++i) {
      if (r.bits[i] >= bit_max) continue;
      any_below_max = true;
      if (used + budget.sizes[i] > budget.limit) continue;
      const double v = f.value_raised(r.bits, i);
      if (best == n || v > best_value) {
        best = i;
        best_value = v;
      }
    }
    if (best == n) {
      r.saturated = !any_below_max;
      break;
    }
    ++r.bits[best];
    used += budget.sizes[best];
    current = best_value;
    r.values.push_back(current);
    f.commit(r.bits, best);
  }
  return r;
}

inline GreedyResult classic_greedy(const ValueFn& f, const BlockBudget& budget, int bit_max, int start_level = 0) {
  FunctionOracle o(f);
  return classic_greedy(o, budget, bit_max, start_level);
}

// ---------------------------------------------------------------------------
// Exhaustive oracle

struct OracleResult {
  Assignment bits;
  double value = -std::numeric_limits<double>::infinity();
  std::size_t enumerated = 0;
  std::size_t feasible = 0;
};

// Every assignment over `levels`^N in lexicographic order; the first best is
// kept, so ties go to the lexicographically smallest.
inline OracleResult exhaustive_oracle(const ValueFn& f, std::size_t n, std::vector<int> levels,
                                      const BlockBudget& budget) {
  if (levels.empty()) throw ContractError("exhaustive oracle needs at least one level");
  std::sort(levels.begin(), levels.end());
  double count = std::pow(static_cast<double>(levels.size()), static_cast<double>(n));
  if (count > 1e6) throw ContractError("exhaustive oracle limited to 10^6 assignments");
  if (budget.sizes.size() != n) throw ContractError("budget sizes do not match N");
  OracleResult r;
  std::vector<std::size_t> digit(n, 0);
  Assignment b(n, levels.front());
  for (;;) {
    ++r.enumerated;
    if (budget.used(b) <= budget.limit) {
      ++r.feasible;
      const double v = f(b);
      if (v > r.value || r.bits.empty()) {
        r.value = v;
        r.bits = b;
      }
    }
    std::size_t pos = n;
    while (pos > 0) {
      --pos;
      if (++digit[pos] < levels.size()) {
        b[pos] = levels[digit[pos]];
        break;
      }
      digit[pos] = 0;
      b[pos] = levels.front();
      if (pos == 0) return r;
    }
    if (n == 0) return r;
  }
}

// ---------------------------------------------------------------------------
// Lattice probes

struct LatticeReport {
  std::size_t monotone_checks = 0;
  std::size_t monotone_violations = 0;
  std::size_t dr_checks = 0;
  std::size_t dr_violations = 0;
  std::vector<std::vector<double>> chain_values;
  std::vector<std::vector<double>> chain_marginals;
  std::vector<std::size_t> probes;

  double monotone_fraction() const {
    return monotone_checks ? static_cast<double>(monotone_violations) / static_cast<double>(monotone_checks) : 0.0;
  }
  double dr_fraction() const {
    return dr_checks ? static_cast<double>(dr_violations) / static_cast<double>(dr_checks) : 0.0;
  }
};

struct LatticeOptions {
  std::size_t chains = 5;
  std::size_t length = 9;  // points per chain
  int start = 2;           // all coordinates start here
  std::size_t step = 1;    // unit raises per link
  int bit_max = 8;
  std::uint64_t seed = 0;
};

// Random chains b^1 < b^2 < ... < b^K (`step` unit raises on random
// coordinates per link) and a probe coordinate i kept below bit_max. Counts
// links where f decreases, and links where the marginal f(b + e_i) - f(b)
// grows.
inline LatticeReport lattice_probe(const ValueFn& f, std::size_t n, const LatticeOptions& opt) {
  LatticeReport rep;
  if (n == 0) return rep;
  std::mt19937_64 rng(opt.seed);
  for (std::size_t c = 0; c < opt.chains; ++c) {
    std::uniform_int_distribution<std::size_t> coord(0, n - 1);
    const std::size_t probe = coord(rng);
    Assignment b(n, opt.start);
    std::vector<double> values, marginals;
    for (std::size_t k = 0; k < opt.length; ++k) {
      bool moved = k == 0;
      for (std::size_t s = 0; k > 0 && s < opt.step; ++s) {
        std::vector<std::size_t> open;
        for (std::size_t j = 0; j < n; ++j)
          if (b[j] + (j == probe ? 1 : 0) < opt.bit_max) open.push_back(j);
        if (open.empty()) break;
        std::uniform_int_distribution<std::size_t> pick(0, open.size() - 1);
        ++b[open[pick(rng)]];
        moved = true;
      }
      if (!moved) break;
      const double v = f(b);
      Assignment up = b;
      ++up[probe];
      values.push_back(v);
      marginals.push_back(f(up) - v);
    }
    for (std::size_t k = 1; k < values.size(); ++k) {
      ++rep.monotone_checks;
      if (values[k] < values[k - 1]) ++rep.monotone_violations;
      ++rep.dr_checks;
      if (marginals[k] > marginals[k - 1]) ++rep.dr_violations;
    }
    rep.chain_values.push_back(std::move(values));
    rep.chain_marginals.push_back(std::move(marginals));
    rep.probes.push_back(probe);
  }
  return rep;
}

// ---------------------------------------------------------------------------
// Relaxed per-iteration step

enum class Phase { Expand, Balanced };

inline const char* phase_name(Phase p) { return p == Phase::Expand ? "expand" : "balanced"; }

struct StepProposal {
  Phase phase = Phase::Expand;
  Assignment bits;
  std::vector<std::size_t> raised;
  std::vector<std::size_t> lowered;
  bool saturated = false;  // no block can be raised at all
};

namespace detail {

// Indices ordered by score descending (ascending=false) or ascending, ties to
// the lower index, skipping entries equal to `skip`.
inline std::vector<std::size_t> ranked(const std::vector<double>& score, bool ascending, double skip) {
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < score.size(); ++i)
    if (score[i] != skip) idx.push_back(i);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
    return ascending ? score[a] < score[b] : score[a] > score[b];
  });
  return idx;
}

}  // namespace detail

// Under budget: raise up to k blocks by s_up that fit the remaining headroom.
// Otherwise: raise floor(k/2) by s_up and lower as many by s_down, the two sets
// disjoint and trimmed so the weight-bit total does not grow.
inline StepProposal relaxed_step(const Assignment& b, const BlockScores& s, std::size_t k, const BlockBudget& budget) {
  constexpr double inf = std::numeric_limits<double>::infinity();
  StepProposal out;
  out.bits = b;
  const std::uint64_t used = budget.used(b);
  const std::uint64_t headroom = used < budget.limit ? budget.limit - used : 0;
  const auto up_order = detail::ranked(s.up, false, -inf);
  if (up_order.empty()) {
    out.saturated = true;
    return out;
  }
  bool fits = false;
  for (std::size_t i : up_order) fits = fits || budget.sizes[i] <= headroom;
  if (fits) {
    out.phase = Phase::Expand;
    std::uint64_t room = headroom;
    for (std::size_t i : up_order) {
      if (out.raised.size() == k) break;
      if (budget.sizes[i] > room) continue;
      room -= budget.sizes[i];
      out.raised.push_back(i);
    }
  } else {
    out.phase = Phase::Balanced;
    const std::size_t h = k / 2;
    for (std::size_t i = 0; i < up_order.size() && out.raised.size() < h; ++i) out.raised.push_back(up_order[i]);
    std::vector<char> taken(b.size(), 0);
    for (std::size_t i : out.raised) taken[i] = 1;
    for (std::size_t i : detail::ranked(s.down, true, inf)) {
      if (out.lowered.size() == h) break;
      if (!taken[i]) out.lowered.push_back(i);
    }
    const std::size_t m = std::min(out.raised.size(), out.lowered.size());
    out.raised.resize(m);
    out.lowered.resize(m);
    auto net = [&] {
      long long d = 0;
      for (std::size_t i : out.raised) d += static_cast<long long>(budget.sizes[i]);
      for (std::size_t i : out.lowered) d -= static_cast<long long>(budget.sizes[i]);
      return d;
    };
    while (!out.raised.empty() && net() > 0) out.raised.pop_back();
  }
  for (std::size_t i : out.raised) ++out.bits[i];
  for (std::size_t i : out.lowered) --out.bits[i];
  return out;
}

// ---------------------------------------------------------------------------
// Scalable greedy search

struct SearchOptions {
  double budget = 3.0;
  double gamma0 = 0.05;
  double gammaT = 0.02;
  std::size_t batch_seqs = 8;
  std::size_t max_iters = 200;
  bool adaptive_gradients = true;
  UpAggregation up_aggregation = UpAggregation::Signed;
  std::uint64_t seed = 0;
};

struct TraceRecord {
  std::size_t t = 0;
  std::size_t k = 0;
  std::vector<std::size_t> batch;  // calibration sequence indices
  Phase phase = Phase::Expand;
  double avg_bits = 0.0;  // of the state after this iteration
  double loss_before = 0.0;
  double loss_after = 0.0;
  std::size_t raised = 0;
  std::size_t lowered = 0;
  bool accepted = false;
};

struct SearchTrace {
  std::vector<TraceRecord> records;
  Assignment warm_start;
  Assignment final_bits;
  bool saturated = false;
  std::string stop_reason;
  double wall_seconds = 0.0;  // kept out of serialized output
};

inline int warm_start_level(double budget, const QuantConfig& cfg) {
  return std::clamp(static_cast<int>(std::floor(budget + 1e-12)), cfg.bit_min, cfg.bit_max);
}

inline std::vector<std::size_t> sample_batch(std::mt19937_64& rng, std::size_t pool, std::size_t count) {
  count = std::min(count, pool);
  std::vector<std::size_t> idx(pool);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  for (std::size_t i = 0; i < count; ++i) {
    std::uniform_int_distribution<std::size_t> d(i, pool - 1);
    std::swap(idx[i], idx[d(rng)]);
  }
  idx.resize(count);
  return idx;
}

inline std::size_t gamma_count(double gamma, std::size_t n) {
  return std::max<std::size_t>(1, static_cast<std::size_t>(std::floor(gamma * static_cast<double>(n) + 1e-9)));
}

// Warm start at floor(B), then per iteration: sample a batch, score blocks from
// gradients at the current quantized model, and apply the relaxed step. In the
// balanced phase an update that raises the batch loss is rejected and k halves.
inline std::pair<Assignment, SearchTrace> scalable_greedy(const ModelBundle& m, const BlockPartition& p,
                                                          const QuantConfig& cfg, const CalibrationSet& cal,
                                                          const SearchOptions& opt) {
  const auto started = std::chrono::steady_clock::now();
  if (opt.gammaT > opt.gamma0) throw ConfigError("gammaT", "gammaT must not exceed gamma0");
  if (opt.budget < cfg.bit_min) throw ConfigError("budget", "budget below bit_min");
  if (cal.size() == 0) throw SizeError("empty calibration set");
  const std::size_t n = p.size();
  const BlockBudget budget = BlockBudget::of(p, opt.budget);
  const std::vector<Tensor> w = site_weights(m);

  SearchTrace trace;
  Assignment b = uniform_assignment(p, warm_start_level(opt.budget, cfg));
  trace.warm_start = b;
  QuantizedWeights q = quantize_model(m, p, b, cfg);
  std::size_t k = gamma_count(opt.gamma0, n);
  const std::size_t k_min = gamma_count(opt.gammaT, n);
  std::mt19937_64 rng(opt.seed);
  std::vector<Tensor> frozen;

  for (std::size_t t = 0;; ++t) {
    if (t >= opt.max_iters) {
      trace.stop_reason = "iteration cap";
      break;
    }
    if (k < k_min) {
      trace.stop_reason = "k below gammaT * N";
      break;
    }
    TraceRecord rec;
    rec.t = t;
    rec.k = k;
    rec.batch = sample_batch(rng, cal.size(), opt.batch_seqs);
    const Batch batch = cal.subset(rec.batch);

    std::vector<Tensor> grads;
    if (opt.adaptive_gradients || frozen.empty()) {
      SiteGradients g = site_gradients(WeightView(m, q.sites), batch);
      rec.loss_before = g.loss;
      grads = std::move(g.grad);
      if (!opt.adaptive_gradients) frozen = grads;
    } else {
      rec.loss_before = forward_loss(WeightView(m, q.sites), batch);
      grads = frozen;
    }
    if (!std::isfinite(rec.loss_before)) {
      trace.stop_reason = "non-finite batch loss";
      trace.records.push_back(rec);
      break;
    }
    const BlockScores scores = block_updown(p, grads, w, q.sites, b, cfg, opt.up_aggregation);
    StepProposal prop = relaxed_step(b, scores, k, budget);
    rec.phase = prop.phase;
    if (prop.saturated) {
      trace.saturated = budget.used(b) < budget.limit;
      trace.stop_reason = "every block at bit_max";
      break;
    }
    if (prop.raised.empty() && prop.lowered.empty()) {
      trace.stop_reason = prop.phase == Phase::Balanced ? "empty balanced update" : "no block fits the budget";
      break;
    }
    QuantizedWeights next = q;
    for (std::size_t i : prop.raised) requantize_block(m, p, next, i, prop.bits[i], cfg);
    for (std::size_t i : prop.lowered) requantize_block(m, p, next, i, prop.bits[i], cfg);
    rec.loss_after = forward_loss(WeightView(m, next.sites), batch);
    rec.raised = prop.raised.size();
    rec.lowered = prop.lowered.size();
    rec.accepted = prop.phase == Phase::Expand || rec.loss_after <= rec.loss_before;
    if (rec.accepted) {
      b = prop.bits;
      q = std::move(next);
    } else {
      k /= 2;
    }
    rec.avg_bits = average_bits(b, p);
    trace.records.push_back(std::move(rec));
  }
  trace.final_bits = b;
  trace.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  return {b, std::move(trace)};
}

// ---------------------------------------------------------------------------
// Serialization

inline std::string trace_to_jsonl(const SearchTrace& trace) {
  std::string out;
  for (const auto& r : trace.records) {
    nlohmann::ordered_json j;
    j["t"] = r.t;
    j["k"] = r.k;
    j["batch"] = r.batch;
    j["phase"] = phase_name(r.phase);
    j["avg_bits"] = r.avg_bits;
    j["loss_before"] = r.loss_before;
    j["loss_after"] = r.loss_after;
    j["raised"] = r.raised;
    j["lowered"] = r.lowered;
    j["accepted"] = r.accepted;
    out += j.dump() + "\n";
  }
  return out;
}

inline std::vector<TraceRecord> trace_from_jsonl(const std::string& text) {
  std::vector<TraceRecord> out;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto j = nlohmann::json::parse(line);
    TraceRecord r;
    r.t = j.at("t");
    r.k = j.at("k");
    r.batch = j.at("batch").get<std::vector<std::size_t>>();
    r.phase = j.at("phase") == "expand" ? Phase::Expand : Phase::Balanced;
    r.avg_bits = j.at("avg_bits");
    r.loss_before = j.at("loss_before");
    r.loss_after = j.at("loss_after");
    r.raised = j.at("raised");
    r.lowered = j.at("lowered");
    r.accepted = j.at("accepted");
    out.push_back(std::move(r));
  }
  return out;
}

// CSV rows: block id, site, row block, col block, bits.
inline std::string assignment_to_csv(const ModelBundle& m, const BlockPartition& p, const Assignment& b) {
  std::string out = "block,site,row_block,col_block,bits\n";
  for (std::size_t i = 0; i < p.size(); ++i) {
    const BlockInfo& info = p.block(i);
    out += std::to_string(i) + "," + m.sites()[info.site].name + "," + std::to_string(info.block_row) + "," +
           std::to_string(info.block_col) + "," + std::to_string(b.at(i)) + "\n";
  }
  return out;
}

inline Assignment assignment_from_csv(const std::string& text, const BlockPartition& p) {
  Assignment b(p.size(), -1);
  std::istringstream in(text);
  std::string line;
  std::getline(in, line);
  if (line != "block,site,row_block,col_block,bits") throw FormatError("unexpected assignment CSV header", 0);
  std::size_t rows = 0;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto first = line.find(',');
    const auto last = line.rfind(',');
    if (first == std::string::npos) throw FormatError("malformed assignment CSV row: " + line, 0);
    const std::size_t id = std::stoul(line.substr(0, first));
    if (id >= b.size()) throw FormatError("block id " + std::to_string(id) + " outside the partition", 0);
    b[id] = std::stoi(line.substr(last + 1));
    ++rows;
  }
  if (rows != p.size() || std::count(b.begin(), b.end(), -1))
    throw FormatError("assignment CSV does not cover every block exactly once", 0);
  return b;
}

}  // namespace blockbits

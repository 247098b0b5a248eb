#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "blockbits/instances.hpp"
#include "support.hpp"

using namespace blockbits;

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

struct TinySetup {
  ModelBundle model = build_model(tiny_spec());
  QuantConfig cfg;
  BlockPartition partition;
  CalibrationSet cal;

  TinySetup() {
    cfg.group_size = 16;
    partition = partition_weights(model, 8, 16, 16);
    const auto corpus = make_corpus(model.spec().vocab, 4096, 2);
    cal = make_calibration(corpus, 24, model.spec().seq_len, 1);
  }
};

SearchOptions tiny_options(double budget) {
  SearchOptions o;
  o.budget = budget;
  o.gamma0 = 0.25;
  o.gammaT = 0.05;
  o.batch_seqs = 4;
  o.max_iters = 40;
  return o;
}

}  // namespace

TEST(ClassicGreedy, ZeroBudgetStaysAtZero) {
  const GreedyResult r = classic_greedy(separable_concave({4, 1, 2}), BlockBudget::uniform(3, 0.0), 8);
  EXPECT_EQ(r.bits, (Assignment{0, 0, 0}));
  EXPECT_EQ(r.values.size(), 1u);
}

TEST(ClassicGreedy, SeparableExampleRaisesFirstBlockTwice) {
  const GreedyResult r = classic_greedy(separable_concave({4, 1}), BlockBudget::uniform(2, 1.0), 8);
  EXPECT_EQ(r.bits, (Assignment{2, 0}));
  ASSERT_EQ(r.values.size(), 3u);
  EXPECT_DOUBLE_EQ(r.values[1], 2.0);
  EXPECT_DOUBLE_EQ(r.values[2], 3.0);
  EXPECT_FALSE(r.saturated);
}

TEST(ClassicGreedy, TiesGoToLowestIndex) {
  const GreedyResult r = classic_greedy(separable_concave({1, 1, 1}), BlockBudget::uniform(3, 1.0 / 3.0), 8);
  EXPECT_EQ(r.bits, (Assignment{1, 0, 0}));
}

TEST(ClassicGreedy, SaturatesWhenEveryBlockAtMax) {
  const GreedyResult r = classic_greedy(separable_concave({1, 2}), BlockBudget::uniform(2, 5.0), 3);
  EXPECT_EQ(r.bits, (Assignment{3, 3}));
  EXPECT_TRUE(r.saturated);
}

TEST(ClassicGreedy, WeightedBudgetRespectsBlockSizes) {
  const BlockBudget budget = BlockBudget::weighted({4, 1}, 1.0);  // 5 weight bits
  const GreedyResult r = classic_greedy(separable_concave({1, 1}), budget, 8);
  EXPECT_LE(budget.used(r.bits), budget.limit);
  EXPECT_EQ(r.bits, (Assignment{1, 1}));
}

TEST(ClassicGreedy, StartLevelAboveBudgetRejected) {
  EXPECT_THROW(classic_greedy(separable_concave({1}), BlockBudget::uniform(1, 1.0), 8, 2), ContractError);
}

TEST(ClassicGreedy, MeetsApproximationBoundOnRandomInstances) {
  const double bound = 1.0 - 1.0 / std::exp(1.0);
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    const RandomInstance inst = random_dr_instance(seed);
    const BlockBudget budget = BlockBudget::uniform(inst.n, inst.budget);
    std::vector<int> levels;
    for (int v = 0; v <= inst.bit_max; ++v) levels.push_back(v);
    const OracleResult opt = exhaustive_oracle(inst.value, inst.n, levels, budget);
    const GreedyResult g = classic_greedy(inst.value, budget, inst.bit_max);
    const double base = inst.value(Assignment(inst.n, 0));
    EXPECT_GE(g.values.back() - base, bound * (opt.value - base) - 1e-12) << "seed " << seed;
  }
}

TEST(Exhaustive, CountsEveryAssignment) {
  const OracleResult r = exhaustive_oracle(separable_concave({1, 1}), 2, {0, 1, 2}, BlockBudget::uniform(2, 2.0));
  EXPECT_EQ(r.enumerated, 9u);
  EXPECT_EQ(r.feasible, 9u);
  EXPECT_EQ(r.bits, (Assignment{2, 2}));
}

TEST(Exhaustive, ZeroBudgetOnlyAllZeros) {
  const OracleResult r = exhaustive_oracle(separable_concave({1, 1}), 2, {0, 1, 2}, BlockBudget::uniform(2, 0.0));
  EXPECT_EQ(r.feasible, 1u);
  EXPECT_EQ(r.bits, (Assignment{0, 0}));
}

TEST(Exhaustive, TiesGoLexicographicallySmallest) {
  const OracleResult r = exhaustive_oracle(separable_concave({1, 1}), 2, {0, 1, 2}, BlockBudget::uniform(2, 0.5));
  EXPECT_EQ(r.bits, (Assignment{0, 1}));
}

TEST(Exhaustive, TooLargeRejected) {
  EXPECT_THROW(exhaustive_oracle(separable_concave(std::vector<double>(8, 1)), 8, {0, 1, 2, 3, 4, 5, 6},
                                 BlockBudget::uniform(8, 2)),
               ContractError);
}

TEST(Exhaustive, MatchesGreedyOnSeparableConcave) {
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> u(0.1, 5.0);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<double> a(4);
    for (double& x : a) x = u(rng);
    const double budget = 0.25 * (1 + trial % 12);
    const auto f = separable_concave(a);
    const BlockBudget bb = BlockBudget::uniform(4, budget);
    const OracleResult opt = exhaustive_oracle(f, 4, {0, 1, 2, 3}, bb);
    const GreedyResult g = classic_greedy(f, bb, 3);
    EXPECT_NEAR(g.values.back(), opt.value, 1e-12) << "trial " << trial;
  }
}

TEST(LatticeProbe, SeparableConcaveHasNoViolations) {
  LatticeOptions o;
  o.length = 6;
  const LatticeReport r = lattice_probe(separable_concave({4, 3, 2, 1}), 4, o);
  EXPECT_EQ(r.chain_values.size(), 5u);
  EXPECT_GT(r.monotone_checks, 0u);
  EXPECT_EQ(r.monotone_violations, 0u);
  EXPECT_EQ(r.dr_violations, 0u);
}

TEST(LatticeProbe, SinglePointChainsAreVacuous) {
  LatticeOptions o;
  o.length = 1;
  const LatticeReport r = lattice_probe([](const Assignment&) { return 0.0; }, 3, o);
  EXPECT_EQ(r.monotone_checks, 0u);
  EXPECT_EQ(r.monotone_fraction(), 0.0);
  EXPECT_EQ(r.dr_fraction(), 0.0);
}

TEST(LatticeProbe, DetectsSupermodularObjective) {
  // v(b) = (sum b)^2 has growing marginals everywhere.
  const auto f = [](const Assignment& b) {
    double s = 0.0;
    for (int x : b) s += x;
    return s * s;
  };
  LatticeOptions o;
  o.length = 4;
  o.start = 0;
  const LatticeReport r = lattice_probe(f, 3, o);
  EXPECT_EQ(r.monotone_violations, 0u);
  EXPECT_EQ(r.dr_violations, r.dr_checks);
}

TEST(LatticeProbe, StepControlsChainSpacing) {
  LatticeOptions o;
  o.chains = 1;
  o.length = 3;
  o.step = 4;
  o.start = 1;
  std::vector<int> sums;
  lattice_probe(
      [&](const Assignment& b) {
        sums.push_back(std::accumulate(b.begin(), b.end(), 0));
        return 0.0;
      },
      4, o);
  // Each point evaluates b and b + e_probe.
  ASSERT_EQ(sums.size(), 6u);
  EXPECT_EQ(sums[0], 4);
  EXPECT_EQ(sums[2], 8);
  EXPECT_EQ(sums[4], 12);
}

TEST(RelaxedStep, UnderBudgetRaisesTopK) {
  const BlockScores s{{3, 1, 2, 0}, {1, 1, 1, 1}};
  const StepProposal p = relaxed_step({2, 2, 2, 2}, s, 2, BlockBudget::uniform(4, 4.0));
  EXPECT_EQ(p.phase, Phase::Expand);
  EXPECT_EQ(p.raised, (std::vector<std::size_t>{0, 2}));
  EXPECT_EQ(p.bits, (Assignment{3, 2, 3, 2}));
}

TEST(RelaxedStep, HeadroomCapsExpansion) {
  const BlockScores s{{5, 4, 3, 2, 1}, {1, 1, 1, 1, 1}};
  const StepProposal p = relaxed_step({2, 2, 2, 2, 2}, s, 5, BlockBudget::uniform(5, 2.2));
  EXPECT_EQ(p.phase, Phase::Expand);
  EXPECT_EQ(p.raised, (std::vector<std::size_t>{0}));
}

TEST(RelaxedStep, BalancedSetsAreDisjoint) {
  const BlockScores s{{0, 0, 0, 0, 9, 0}, {5, 4, 3, 6, 1, 7}};
  const StepProposal p = relaxed_step({3, 3, 3, 3, 3, 3}, s, 2, BlockBudget::uniform(6, 3.0));
  EXPECT_EQ(p.phase, Phase::Balanced);
  EXPECT_EQ(p.raised, (std::vector<std::size_t>{4}));
  EXPECT_EQ(p.lowered, (std::vector<std::size_t>{2}));
  EXPECT_EQ(p.bits, (Assignment{3, 3, 2, 3, 4, 3}));
}

TEST(RelaxedStep, BalancedOddKUsesFloorHalf) {
  const BlockScores s{{4, 3, 2, 1}, {1, 2, 3, 4}};
  const StepProposal p = relaxed_step({3, 3, 3, 3}, s, 5, BlockBudget::uniform(4, 3.0));
  EXPECT_EQ(p.raised.size(), 2u);
  EXPECT_EQ(p.lowered.size(), 2u);
  EXPECT_EQ(p.raised, (std::vector<std::size_t>{0, 1}));
  EXPECT_EQ(p.lowered, (std::vector<std::size_t>{2, 3}));
}

TEST(RelaxedStep, BalancedNeverGrowsWeightBits) {
  const BlockBudget budget = BlockBudget::weighted({8, 2, 2, 2}, 3.0);
  const BlockScores s{{9, 1, 1, 1}, {kInf, 1, 2, 3}};
  const Assignment b = {3, 3, 3, 3};
  const StepProposal p = relaxed_step(b, s, 2, budget);
  EXPECT_EQ(p.phase, Phase::Balanced);
  EXPECT_LE(budget.used(p.bits), budget.used(b));
}

TEST(RelaxedStep, SentinelsExcludeBlocks) {
  const BlockScores s{{-kInf, 2, 1}, {1, kInf, 2}};
  const StepProposal p = relaxed_step({8, 3, 3}, s, 2, BlockBudget::uniform(3, 14.0 / 3.0));
  EXPECT_EQ(p.phase, Phase::Balanced);
  EXPECT_EQ(p.raised, (std::vector<std::size_t>{1}));
  EXPECT_EQ(p.lowered, (std::vector<std::size_t>{0}));
}

TEST(RelaxedStep, EveryBlockAtMaxIsSaturated) {
  const BlockScores s{{-kInf, -kInf}, {1, 1}};
  EXPECT_TRUE(relaxed_step({8, 8}, s, 2, BlockBudget::uniform(2, 8.0)).saturated);
}

TEST(GammaCount, FloorWithFloorOfOne) {
  EXPECT_EQ(gamma_count(0.05, 160), 8u);
  EXPECT_EQ(gamma_count(0.02, 160), 3u);
  EXPECT_EQ(gamma_count(0.02, 10), 1u);
}

TEST(WarmStart, FloorOfBudgetClampedToRange) {
  QuantConfig q;
  EXPECT_EQ(warm_start_level(2.5, q), 2);
  EXPECT_EQ(warm_start_level(3.0, q), 3);
  EXPECT_EQ(warm_start_level(0.5, q), 1);
}

TEST(ScalableGreedy, BudgetAtBitMaxSaturatesWithoutBalancedPhase) {
  TinySetup s;
  const auto [b, trace] = scalable_greedy(s.model, s.partition, s.cfg, s.cal, tiny_options(8.0));
  EXPECT_EQ(b, uniform_assignment(s.partition, 8));
  EXPECT_EQ(trace.stop_reason, "every block at bit_max");
  for (const auto& r : trace.records) EXPECT_NE(r.phase, Phase::Balanced);
}

TEST(ScalableGreedy, BudgetAboveReachableRangeIsFlagged) {
  TinySetup s;
  s.cfg.bit_max = 3;
  const auto [b, trace] = scalable_greedy(s.model, s.partition, s.cfg, s.cal, tiny_options(3.5));
  EXPECT_EQ(b, uniform_assignment(s.partition, 3));
  EXPECT_TRUE(trace.saturated);
}

TEST(ScalableGreedy, IntegerBudgetRunsOnlyBalancedRefinement) {
  TinySetup s;
  SearchOptions o = tiny_options(3.0);
  o.gamma0 = 1.0;
  const auto [b, trace] = scalable_greedy(s.model, s.partition, s.cfg, s.cal, o);
  ASSERT_FALSE(trace.records.empty());
  EXPECT_EQ(trace.records.front().k, s.partition.size());
  for (const auto& r : trace.records) EXPECT_EQ(r.phase, Phase::Balanced);
  EXPECT_LE(weight_bits(b, s.partition), budget_bits(3.0, s.partition));
}

TEST(ScalableGreedy, TraceInvariantsHold) {
  TinySetup s;
  const auto [b, trace] = scalable_greedy(s.model, s.partition, s.cfg, s.cal, tiny_options(2.5));
  ASSERT_FALSE(trace.records.empty());
  EXPECT_EQ(trace.warm_start, uniform_assignment(s.partition, 2));
  EXPECT_EQ(trace.final_bits, b);
  Assignment state = trace.warm_start;
  std::size_t prev_k = trace.records.front().k;
  const std::uint64_t limit = budget_bits(2.5, s.partition);
  for (const auto& r : trace.records) {
    EXPECT_LE(r.k, prev_k);
    prev_k = r.k;
    EXPECT_LE(r.avg_bits, 2.5 + 1e-12);
    if (r.phase == Phase::Balanced && r.accepted) EXPECT_LE(r.loss_after, r.loss_before);
    if (r.phase == Phase::Expand) EXPECT_TRUE(r.accepted);
  }
  EXPECT_LE(weight_bits(b, s.partition), limit);
  EXPECT_GT(average_bits(b, s.partition), 2.0);
}

TEST(ScalableGreedy, DeterministicTraceBytes) {
  TinySetup s;
  const auto a = scalable_greedy(s.model, s.partition, s.cfg, s.cal, tiny_options(2.5));
  const auto c = scalable_greedy(s.model, s.partition, s.cfg, s.cal, tiny_options(2.5));
  EXPECT_EQ(trace_to_jsonl(a.second), trace_to_jsonl(c.second));
  EXPECT_EQ(a.first, c.first);
}

TEST(ScalableGreedy, FrozenGradientsStillFeasible) {
  TinySetup s;
  SearchOptions o = tiny_options(2.5);
  o.adaptive_gradients = false;
  const auto [b, trace] = scalable_greedy(s.model, s.partition, s.cfg, s.cal, o);
  EXPECT_LE(weight_bits(b, s.partition), budget_bits(2.5, s.partition));
}

TEST(ScalableGreedy, InvalidGammaRejected) {
  TinySetup s;
  SearchOptions o = tiny_options(2.5);
  o.gammaT = 0.5;
  EXPECT_THROW(scalable_greedy(s.model, s.partition, s.cfg, s.cal, o), ConfigError);
}

TEST(ModelLossOracleTest, IncrementalValueMatchesFullEvaluation) {
  TinySetup s;
  const Batch batch = s.cal.first(4);
  ModelLossOracle o(s.model, s.partition, s.cfg, batch);
  Assignment b = uniform_assignment(s.partition, 2);
  EXPECT_NEAR(o.value(b), -forward_loss(WeightView(s.model, quantize_model(s.model, s.partition, b, s.cfg).sites), batch),
              1e-12);
  b[5] = 3;
  b[s.partition.size() - 1] = 4;
  EXPECT_NEAR(o.value(b), -forward_loss(WeightView(s.model, quantize_model(s.model, s.partition, b, s.cfg).sites), batch),
              1e-12);
}

TEST(Serialization, TraceJsonlRoundtrip) {
  TinySetup s;
  const auto [b, trace] = scalable_greedy(s.model, s.partition, s.cfg, s.cal, tiny_options(2.5));
  const std::string text = trace_to_jsonl(trace);
  const auto back = trace_from_jsonl(text);
  ASSERT_EQ(back.size(), trace.records.size());
  SearchTrace again;
  again.records = back;
  EXPECT_EQ(trace_to_jsonl(again), text);
  EXPECT_EQ(std::count(text.begin(), text.end(), '\n'), static_cast<long>(back.size()));
}

TEST(Serialization, AssignmentCsvRoundtrip) {
  TinySetup s;
  Assignment b(s.partition.size());
  for (std::size_t i = 0; i < b.size(); ++i) b[i] = static_cast<int>(i % 9);
  const std::string csv = assignment_to_csv(s.model, s.partition, b);
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "block,site,row_block,col_block,bits");
  EXPECT_EQ(assignment_from_csv(csv, s.partition), b);
  EXPECT_THROW(assignment_from_csv("block,bits\n", s.partition), FormatError);
  EXPECT_THROW(assignment_from_csv(csv.substr(0, csv.rfind('\n', csv.size() - 2) + 1), s.partition), FormatError);
}

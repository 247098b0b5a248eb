#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <set>
#include <tuple>

#include "support.hpp"

using namespace blockbits;

TEST(BuildModel, DefaultSpecHas56Sites) {
  const ModelBundle m = build_model(ModelSpec{});
  EXPECT_EQ(m.sites().size(), 56u);
  for (std::size_t i = 0; i < m.sites().size(); ++i) {
    const LinearSite& s = m.sites()[i];
    EXPECT_EQ(s.id, i);
    EXPECT_EQ(m.params()[s.param].rows(), s.rows);
    EXPECT_EQ(m.params()[s.param].cols(), s.cols);
    EXPECT_EQ(m.names()[s.param], s.name);
  }
  EXPECT_EQ(m.sites()[6].name, "layer0.down");
  EXPECT_EQ(m.sites()[6].rows, 64u);
  EXPECT_EQ(m.sites()[6].cols, 128u);
}

TEST(BuildModel, QuantizableSitesExcludeEmbeddingHeadAndNorms) {
  const ModelBundle m = build_model(ModelSpec{});
  for (const auto& s : m.sites()) {
    EXPECT_EQ(s.name.find("norm"), std::string::npos);
    EXPECT_NE(s.name, "embed");
    EXPECT_NE(s.name, "head");
  }
}

TEST(BuildModel, IndivisibleWidthRejected) {
  ModelSpec s;
  s.d_model = 65;
  EXPECT_THROW(build_model(s), SpecError);
}

TEST(BuildModel, ZeroSizeRejected) {
  ModelSpec s;
  s.n_layers = 0;
  EXPECT_THROW(build_model(s), SpecError);
}

TEST(BuildModel, SameSpecSameChecksum) {
  EXPECT_EQ(build_model(ModelSpec{}).checksum(), build_model(ModelSpec{}).checksum());
  ModelSpec other;
  other.seed = 8;
  EXPECT_NE(build_model(ModelSpec{}).checksum(), build_model(other).checksum());
}

TEST(Corpus, Deterministic) {
  EXPECT_EQ(make_corpus(4, 12, 0), make_corpus(4, 12, 0));
  EXPECT_EQ(make_corpus(4, 12, 0).size(), 12u);
}

TEST(Corpus, CalibrationDefaultCountsAndRange) {
  const auto corpus = make_corpus(256, 1 << 18, 11);
  const CalibrationSet cal = make_calibration(corpus, 128, 64, 3);
  ASSERT_EQ(cal.size(), 128u);
  for (const auto& s : cal.sequences) {
    EXPECT_EQ(s.size(), 64u);
    for (int t : s) {
      EXPECT_GE(t, 0);
      EXPECT_LT(t, 256);
    }
  }
}

TEST(Corpus, CalibrationSlicesAreDisjoint) {
  const auto corpus = make_corpus(256, 4096, 1);
  const CalibrationSet cal = make_calibration(corpus, 64, 64, 9);
  // All 64 slots of the stream are used exactly once, so concatenating the
  // sequences is a reordering of the corpus.
  std::multiset<int> a(corpus.begin(), corpus.end()), b;
  for (const auto& s : cal.sequences) b.insert(s.begin(), s.end());
  EXPECT_EQ(a, b);
}

TEST(Corpus, InsufficientLengthRejected) {
  EXPECT_THROW(make_calibration(make_corpus(16, 100, 0), 2, 64, 0), SizeError);
}

TEST(Corpus, ByteCorpusReadsRawBytes) {
  const std::string dir = bbtest::temp_dir("bytes");
  write_text(dir + "/c.txt", "AB\n");
  EXPECT_EQ(load_byte_corpus(dir + "/c.txt"), (std::vector<int>{65, 66, 10}));
}

TEST(Pretrain, ZeroStepsLeavesParametersUnchanged) {
  const ModelBundle m = build_model(tiny_spec());
  PretrainOptions o;
  o.steps = 0;
  EXPECT_EQ(pretrain(m, make_corpus(32, 4096, 1), o).model, m);
}

TEST(Pretrain, ShortRunLowersLoss) {
  const ModelBundle m = build_model(tiny_spec());
  PretrainOptions o;
  o.steps = 60;
  const PretrainResult r = pretrain(m, make_corpus(32, 4096, 1), o);
  EXPECT_LT(r.final_loss, r.initial_loss);
}

TEST(Pretrain, DefaultScheduleLowersCalibrationLoss) {
  const ModelBundle& trained = bbtest::pretrained();
  const Batch all = bbtest::calibration().all();
  EXPECT_LT(forward_loss(trained, all), forward_loss(build_model(ModelSpec{}), all));
}

TEST(ForwardLoss, UntrainedModelNearUniformEntropy) {
  const double loss = forward_loss(build_model(ModelSpec{}), bbtest::calibration().first(16));
  EXPECT_NEAR(loss, std::log(256.0), 0.05 * std::log(256.0));
}

TEST(ForwardLoss, IdenticalInputsIdenticalBits) {
  const ModelBundle m = build_model(ModelSpec{});
  const Batch b = bbtest::calibration().first(4);
  const double a = forward_loss(m, b);
  const double c = forward_loss(m, b);
  EXPECT_EQ(std::memcmp(&a, &c, sizeof a), 0);
}

TEST(ForwardLoss, TokenOutsideVocabularyIsInputError) {
  const ModelBundle m = build_model(tiny_spec());
  Batch b = {{1, 2, 3}};
  b[0][1] = static_cast<int>(m.spec().vocab);
  EXPECT_THROW(forward_loss(m, b), InputError);
}

TEST(ForwardLoss, TooLongSequenceIsInputError) {
  const ModelBundle m = build_model(tiny_spec());
  EXPECT_THROW(forward_loss(m, Batch{Sequence(m.spec().seq_len + 1, 0)}), InputError);
}

TEST(ForwardLoss, TapedAndUntapedPathsAgree) {
  const ModelBundle m = build_model(tiny_spec());
  const Batch b = random_batch(m.spec(), 3, 2);
  TapedForward f = forward_tape(WeightView(m), b);
  EXPECT_NEAR(f.loss_value(), forward_loss(m, b), 1e-12);
}

TEST(ForwardLoss, EightBitQuantizationChangesLossByAtMost1e3) {
  const ModelBundle& m = bbtest::pretrained();
  const BlockPartition p = partition_weights(m, 16, 32, 32);
  QuantConfig q;
  q.group_size = 32;
  const Batch all = bbtest::calibration().all();
  const QuantizedWeights w = quantize_model(m, p, uniform_assignment(p, 8), q);
  EXPECT_LE(std::abs(forward_loss(WeightView(m, w.sites), all) - forward_loss(m, all)), 1e-3);
}

TEST(LayerCache, SuffixRecomputationMatchesFullForward) {
  const ModelBundle m = build_model(tiny_spec());
  const Batch b = random_batch(m.spec(), 3, 4);
  WeightView w(m);
  LayerCache cache(w, b);
  Tensor changed = m.params()[m.sites()[9].param];
  for (double& v : changed.data()) v *= 0.5;
  w.set_site(9, changed);
  const std::size_t layer = m.sites()[9].layer;
  EXPECT_NEAR(cache.loss_from(w, layer), forward_loss(w, b), 1e-12);
}

TEST(Coupling, DefaultSpecHas41Groups) {
  const auto groups = coupling_graph(build_model(ModelSpec{}));
  ASSERT_EQ(groups.size(), 41u);
  std::size_t residual = 0, mlp = 0, head = 0;
  for (const auto& g : groups) {
    for (const auto& mem : g.members) EXPECT_EQ(mem.width(), g.width()) << g.id;
    if (g.kind == GroupKind::Residual) {
      ++residual;
      EXPECT_EQ(g.width(), 64u);
    } else if (g.kind == GroupKind::MlpLocal) {
      ++mlp;
      EXPECT_EQ(g.width(), 128u);
    } else {
      ++head;
      EXPECT_EQ(g.width(), 16u);
    }
  }
  EXPECT_EQ(residual, 1u);
  EXPECT_EQ(mlp, 8u);
  EXPECT_EQ(head, 32u);
}

TEST(Coupling, GroupsAreDisjointAndCoverValueAndOutputChannels) {
  const ModelBundle m = build_model(ModelSpec{});
  std::set<std::tuple<std::size_t, Axis, std::size_t>> seen;
  for (const auto& g : coupling_graph(m))
    for (const auto& mem : g.members)
      for (std::size_t i = mem.begin; i < mem.end; ++i)
        EXPECT_TRUE(seen.insert({mem.param, mem.axis, i}).second) << g.id << " reuses " << m.names()[mem.param];
  for (std::size_t l = 0; l < 8; ++l) {
    const std::string p = "layer" + std::to_string(l) + ".";
    for (std::size_t i = 0; i < 64; ++i) {
      EXPECT_TRUE(seen.count({m.index(p + "v"), Axis::Rows, i}));
      EXPECT_TRUE(seen.count({m.index(p + "o"), Axis::Cols, i}));
      EXPECT_FALSE(seen.count({m.index(p + "q"), Axis::Rows, i}));
      EXPECT_FALSE(seen.count({m.index(p + "k"), Axis::Rows, i}));
    }
  }
}

TEST(Checkpoint, RoundtripIsBitwise) {
  const ModelBundle m = build_model(tiny_spec());
  const std::string dir = bbtest::temp_dir("ckpt");
  save_checkpoint(m, dir + "/m.bbck");
  EXPECT_EQ(load_checkpoint(dir + "/m.bbck"), m);
}

TEST(Checkpoint, TruncatedFileIsFormatError) {
  auto bytes = encode_checkpoint(build_model(tiny_spec()));
  bytes.resize(bytes.size() - 3);
  EXPECT_THROW(decode_checkpoint(bytes), FormatError);
}

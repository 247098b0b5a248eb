#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cmath>
#include <cstdlib>
#include <filesystem>

#include "blockbits/export.hpp"
#include "support.hpp"

using namespace blockbits;
namespace fs = std::filesystem;

namespace {

RunConfig tiny_config(const std::string& dir) {
  RunConfig c;
  c.vocab = 32;
  c.d_model = 16;
  c.n_layers = 2;
  c.n_heads = 2;
  c.d_ff = 32;
  c.seq_len = 8;
  c.corpus_length = 4096;
  c.pretrain_steps = 20;
  c.group_size = 16;
  c.block_rows = 8;
  c.block_cols = 16;
  c.bit_max = 4;
  c.budget = 2.5;
  c.budgets = {2.0, 3.0};
  c.calib_seqs = 16;
  c.batch_seqs = 4;
  c.reorder_seqs = 8;
  c.max_iters = 20;
  c.out_dir = dir;
  return c;
}

std::string slurp(const std::string& path) { return read_text(path); }

int run_cli(const std::string& args) {
  const std::string cmd = std::string(BLOCKBITS_CLI) + " " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

}  // namespace

TEST(Config, DefaultsValidate) {
  const RunConfig c = config_from_text("");
  EXPECT_EQ(c.budget, 3.0);
  EXPECT_EQ(c.block_rows, 16u);
  EXPECT_EQ(c.block_cols, 32u);
  EXPECT_NO_THROW(c.validate());
}

TEST(Config, PublishedSearchDefaults) {
  const RunConfig c;
  EXPECT_EQ(c.gamma0, 0.05);
  EXPECT_EQ(c.gammaT, 0.02);
  EXPECT_EQ(c.bit_min, 1);
  EXPECT_EQ(c.bit_max, 8);
  EXPECT_EQ(c.calib_seqs, 128u);
}

TEST(Config, FlagOverridesFile) {
  const std::string dir = bbtest::temp_dir("cfg");
  write_text(dir + "/c.json", "{\"budget\": 3.0, \"gamma0\": 0.1}");
  const RunConfig c = load_config(dir + "/c.json", {{"budget", "2.5"}});
  EXPECT_EQ(c.budget, 2.5);
  EXPECT_EQ(c.gamma0, 0.1);
}

TEST(Config, UnknownKeyNamed) {
  try {
    config_from_text("{\"gama0\": 0.1}");
    FAIL() << "unknown key accepted";
  } catch (const ConfigError& e) {
    EXPECT_EQ(e.key(), "gama0");
  }
}

TEST(Config, WrongTypeAndOutOfRange) {
  EXPECT_THROW(config_from_text("{\"budget\": \"high\"}"), ConfigError);
  EXPECT_THROW(config_from_text("[1, 2]"), ConfigError);
  try {
    load_config("", {{"budget", "9"}});
    FAIL() << "budget above bit_max accepted";
  } catch (const ConfigError& e) {
    EXPECT_EQ(e.key(), "budget");
  }
}

TEST(Config, JsonRoundtrip) {
  RunConfig c = tiny_config("somewhere");
  c.up_aggregation = "l1";
  const RunConfig back = config_from_text(config_to_json(c).dump());
  EXPECT_EQ(config_to_json(back).dump(), config_to_json(c).dump());
}

TEST(Pipeline, BudgetAtBitMaxEqualsUniform) {
  const std::string dir = bbtest::temp_dir("bmax");
  RunConfig c = tiny_config(dir);
  c.budget = c.bit_max;
  const SearchRun r = run_pipeline(c);
  for (int b : r.bits) EXPECT_EQ(b, c.bit_max);
  EXPECT_NEAR(r.report.loss, r.report.uniform_loss, 1e-9);
  // A uniform allocation reports B bits in every layer.
  for (double v : r.report.json["bits_by_layer"]) EXPECT_EQ(v, c.budget);
}

TEST(Pipeline, SameConfigSameBytes) {
  const std::string dir = bbtest::temp_dir("twice");
  const RunConfig c = tiny_config(dir);
  run_pipeline(c);
  std::map<std::string, std::string> first;
  for (const auto& e : fs::recursive_directory_iterator(dir))
    if (e.is_regular_file()) first[e.path().string()] = slurp(e.path().string());
  run_pipeline(c);
  std::size_t compared = 0;
  for (const auto& e : fs::recursive_directory_iterator(dir)) {
    if (!e.is_regular_file()) continue;
    ASSERT_TRUE(first.count(e.path().string())) << e.path();
    EXPECT_EQ(slurp(e.path().string()), first[e.path().string()]) << e.path();
    ++compared;
  }
  EXPECT_EQ(compared, first.size());
  EXPECT_TRUE(first.count((fs::path(dir) / artifact::kReport).string()));
}

TEST(Pipeline, ReportRegeneratesFromArtifacts) {
  const std::string dir = bbtest::temp_dir("regen");
  run_pipeline(tiny_config(dir));
  std::map<std::string, std::string> before;
  for (const char* name : {artifact::kReport, artifact::kLayerBits, artifact::kProjBits, artifact::kLayerSens}) {
    before[name] = slurp(path_in(dir, name));
    fs::remove(path_in(dir, name));
  }
  emit_report(dir);
  for (const auto& [name, text] : before) EXPECT_EQ(slurp(path_in(dir, name)), text) << name;
}

TEST(Pipeline, ReportedLossMatchesUnpackedWeights) {
  const std::string dir = bbtest::temp_dir("unpack");
  const SearchRun r = run_pipeline(tiny_config(dir));
  const RunConfig c = load_config(path_in(dir, artifact::kConfig), {});
  const ModelBundle base = load_checkpoint(c.checkpoint);
  const auto groups = coupling_graph(base);
  const ModelBundle m =
      apply_permutations(base, groups, permutations_from_json(slurp(path_in(dir, artifact::kPermutations)), groups));
  const QuantizedWeights w = unpack_model(decode_packed_file(read_file(path_in(dir, artifact::kPacked))), m);
  const double loss = forward_loss(WeightView(m, w.sites), load_calibration(c, load_corpus(c)).all());
  EXPECT_NEAR(r.report.loss, loss, 1e-9);
  EXPECT_NEAR(r.report.json["loss"]["mixed"].get<double>(), loss, 1e-9);
}

TEST(Pipeline, MissingArtifactIsReportStageError) {
  const std::string dir = bbtest::temp_dir("missing");
  run_pipeline(tiny_config(dir));
  fs::remove(path_in(dir, artifact::kPacked));
  try {
    emit_report(dir);
    FAIL() << "report built without packed weights";
  } catch (const StageError& e) {
    EXPECT_EQ(e.stage(), "report");
    EXPECT_NE(std::string(e.what()).find("missing artifact"), std::string::npos);
  }
}

TEST(Pipeline, SweepHasOneRowPerBudget) {
  const std::string dir = bbtest::temp_dir("sweep");
  const RunConfig c = tiny_config(dir);
  const auto pts = run_sweep(c);
  ASSERT_EQ(pts.size(), c.budgets.size());
  const std::string csv = slurp(path_in(dir, artifact::kSweep));
  EXPECT_EQ(static_cast<std::size_t>(std::count(csv.begin(), csv.end(), '\n')), c.budgets.size() + 1);
  regenerate_sweep(dir, c.budgets);
  EXPECT_EQ(slurp(path_in(dir, artifact::kSweep)), csv);
}

TEST(Heatmap, AllZeroSensitivityIsBlack) {
  const GrayImage img = heatmap_row_normalized(Tensor::zeros({4, 6}));
  EXPECT_EQ(img.width, 6u);
  EXPECT_EQ(img.height, 4u);
  for (auto v : img.pixels) EXPECT_EQ(v, 0);
}

TEST(Heatmap, SingleEightBitBlockIsSingleBrightTile) {
  const ModelBundle m = build_model(tiny_spec());
  const BlockPartition p = partition_weights(m, 8, 16, 16);
  Assignment b = uniform_assignment(p, 1);
  const std::size_t hot = p.id(0, 1, 0);
  b[hot] = 8;
  const GrayImage img = heatmap_bits(p, 0, b, 1, 8);
  const BlockInfo& info = p.block(hot);
  for (std::size_t r = 0; r < img.height; ++r)
    for (std::size_t c = 0; c < img.width; ++c) {
      const bool inside = r >= info.row0 && r < info.row0 + info.rows && c >= info.col0 && c < info.col0 + info.cols;
      EXPECT_EQ(img.at(r, c), inside ? 255 : 0) << r << "," << c;
    }
}

TEST(Heatmap, RowMaxNormalization) {
  const GrayImage img = heatmap_row_normalized(Tensor::matrix({{1, -2}, {0, 0.5}}));
  EXPECT_EQ(img.pixels, (std::vector<std::uint8_t>{128, 255, 0, 255}));
}

TEST(Heatmap, PgmRoundtrip) {
  GrayImage img{3, 2, {0, 1, 2, 253, 254, 255}};
  const auto bytes = encode_pgm(img);
  const std::string head(bytes.begin(), bytes.begin() + 11);
  EXPECT_EQ(head, "P5\n3 2\n255\n");
  const GrayImage back = decode_pgm(bytes);
  EXPECT_EQ(back.width, 3u);
  EXPECT_EQ(back.height, 2u);
  EXPECT_EQ(back.pixels, img.pixels);
}

// Averaged over every site of the reordered pretrained model.
TEST(Heatmap, ReorderedTopLeftQuadrantIsBrightest) {
  const ModelBundle& m = bbtest::pretrained();
  const RunConfig c;
  const BlockPartition p = partition_weights(m, c.block_rows, c.block_cols, c.group_size);
  const auto sens = warm_start_sensitivity(m, p, 2, c.quant_config(), bbtest::calibration().first(c.reorder_seqs));
  const auto groups = coupling_graph(m);
  const auto moved = permute_site_tensors(m, groups, compute_permutations(m, groups, sens), sens);
  std::array<double, 4> mean{};
  for (const auto& s : m.sites()) {
    const auto q = quadrant_means(heatmap_row_normalized(moved[s.id]));
    for (std::size_t i = 0; i < 4; ++i) mean[i] += q[i] / static_cast<double>(m.sites().size());
  }
  EXPECT_GE(mean[0], mean[1]);
  EXPECT_GE(mean[0], mean[2]);
  EXPECT_GE(mean[0], mean[3]);
}

TEST(Cli, SelftestExitsZero) { EXPECT_EQ(run_cli("selftest"), 0); }

TEST(Cli, UnknownConfigKeyExitsTwo) {
  const std::string dir = bbtest::temp_dir("clibad");
  write_text(dir + "/c.json", "{\"gama0\": 0.1}");
  EXPECT_EQ(run_cli("search --config " + dir + "/c.json"), 2);
}

TEST(Cli, UnknownFlagRejected) { EXPECT_NE(run_cli("search --gama0 0.1"), 0); }

TEST(Cli, SearchWritesArtifactsThenReport) {
  const std::string dir = bbtest::temp_dir("clirun");
  write_text(dir + "/c.json", config_to_json(tiny_config(dir + "/run")).dump());
  ASSERT_EQ(run_cli("search --config " + dir + "/c.json --budget 3"), 0);
  const std::string report = slurp(dir + "/run/" + artifact::kReport);
  EXPECT_EQ(nlohmann::json::parse(report)["config"]["budget"].get<double>(), 3.0);
  ASSERT_EQ(run_cli("report " + dir + "/run"), 0);
  EXPECT_EQ(slurp(dir + "/run/" + artifact::kReport), report);
}

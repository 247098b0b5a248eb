#include <filesystem>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "blockbits/pipeline.hpp"
#include "blockbits/selftest.hpp"

namespace fs = std::filesystem;
using namespace blockbits;

namespace {

// --config plus one --<key> per RunConfig key on a subcommand.
struct ConfigFlags {
  std::string file;
  std::map<std::string, std::string> values;

  void attach(CLI::App* app) {
    app->add_option("--config", file, "JSON config file")->check(CLI::ExistingFile);
    for (const auto& k : detail::config_keys()) app->add_option(std::string("--") + k.name, values[k.name], k.help);
  }

  RunConfig load(const CLI::App* app) const {
    std::vector<std::pair<std::string, std::string>> flags;
    for (const auto& k : detail::config_keys())
      if (app->count(std::string("--") + k.name)) flags.emplace_back(k.name, values.at(k.name));
    return load_config(file, flags);
  }
};

ModelBundle require_checkpoint(const RunConfig& c) {
  if (c.checkpoint.empty()) throw ConfigError("checkpoint", "this command needs --checkpoint");
  ModelBundle m = load_checkpoint(c.checkpoint);
  if (m.spec() != c.model_spec()) throw SpecError("checkpoint spec differs from the configured model");
  return m;
}

void print(const nlohmann::ordered_json& j) { std::cout << j.dump(2) << "\n"; }

int cmd_pretrain(const RunConfig& c, std::string output) {
  fs::create_directories(c.out_dir);
  if (output.empty()) output = path_in(c.out_dir, artifact::kCheckpoint);
  const auto corpus = load_corpus(c);
  const PretrainResult r = stage("pretrain", [&] { return pretrain_model(c, corpus); });
  save_checkpoint(r.model, output);
  const CalibrationSet cal = load_calibration(c, corpus);
  print({{"checkpoint", output},
         {"initial_loss", r.initial_loss},
         {"final_loss", r.final_loss},
         {"calibration_loss", forward_loss(r.model, cal.all())}});
  return 0;
}

int cmd_quantize(const RunConfig& c, std::optional<int> bits, const std::string& assignment, const std::string& perms,
                 std::string output) {
  ModelBundle m = require_checkpoint(c);
  if (!perms.empty()) {
    const auto groups = coupling_graph(m);
    m = apply_permutations(m, groups, permutations_from_json(read_text(perms), groups));
  }
  const QuantConfig q = c.quant_config();
  const BlockPartition p = partition_weights(m, c.block_rows, c.block_cols, c.group_size);
  Assignment b;
  if (!assignment.empty())
    b = assignment_from_csv(read_text(assignment), p);
  else
    b = uniform_assignment(p, bits.value_or(warm_start_level(c.budget, q)));
  fs::create_directories(c.out_dir);
  if (output.empty()) output = path_in(c.out_dir, artifact::kPacked);
  const auto bytes = encode_packed_file(pack_model(m, p, b, q));
  write_file(output, bytes);
  const Batch all = load_calibration(c, load_corpus(c)).all();
  const QuantizedWeights w = unpack_model(decode_packed_file(bytes), m);
  const EffectiveBits e = effective_bits(b, p, q);
  print({{"packed", output},
         {"bytes", bytes.size()},
         {"blocks", p.size()},
         {"weight_bits", e.weight},
         {"total_bits", e.total},
         {"full_precision_loss", forward_loss(m, all)},
         {"loss", forward_loss(WeightView(m, w.sites), all)}});
  return 0;
}

int cmd_report(const std::string& dir) {
  if (fs::exists(path_in(dir, artifact::kConfig))) {
    const RunReport r = emit_report(dir);
    print(r.json);
    return 0;
  }
  std::vector<std::pair<double, std::string>> runs;
  if (fs::is_directory(dir))
    for (const auto& e : fs::directory_iterator(dir))
      if (e.is_directory() && e.path().filename().string().rfind("budget_", 0) == 0 &&
          fs::exists(e.path() / artifact::kConfig))
        runs.emplace_back(load_config((e.path() / artifact::kConfig).string(), {}).budget, e.path().string());
  if (runs.empty()) throw ReportError("no run artifacts under " + dir);
  std::sort(runs.begin(), runs.end());
  std::vector<double> budgets;
  for (const auto& r : runs) budgets.push_back(r.first);
  std::cout << sweep_csv(regenerate_sweep(dir, budgets));
  return 0;
}

struct ProbeArgs {
  std::size_t chains = 5;
  std::size_t length = 5;
  std::size_t step = 4;
  int start = 2;
  std::uint64_t seed = 0;
  bool synthetic = false;
};

int cmd_probe(const RunConfig& c, const ProbeArgs& a) {
  LatticeOptions o;
  o.chains = a.chains;
  o.length = a.length;
  o.step = a.step;
  o.start = a.start;
  o.bit_max = c.bit_max;
  o.seed = a.seed;
  LatticeReport rep;
  std::size_t n = 0;
  if (a.synthetic) {
    n = 8;
    rep = lattice_probe(separable_concave({4, 3, 2, 1, 1, 2, 3, 4}), n, o);
  } else {
    const Workspace ws = prepare_workspace(c);
    const QuantConfig q = ws.config.quant_config();
    const BlockPartition p = partition_weights(ws.model, c.block_rows, c.block_cols, c.group_size);
    const Batch all = ws.calibration.all();
    n = ws.model.spec().n_layers;
    rep = lattice_probe(
        [&](const Assignment& layer_bits) {
          Assignment b(p.size());
          for (std::size_t i = 0; i < p.size(); ++i) b[i] = layer_bits[p.block(i).layer];
          return -forward_loss(WeightView(ws.model, quantize_model(ws.model, p, b, q).sites), all);
        },
        n, o);
  }
  nlohmann::ordered_json j;
  j["components"] = n;
  j["chains"] = rep.chain_values.size();
  j["monotone_violations"] = rep.monotone_violations;
  j["monotone_checks"] = rep.monotone_checks;
  j["monotone_fraction"] = rep.monotone_fraction();
  j["dr_violations"] = rep.dr_violations;
  j["dr_checks"] = rep.dr_checks;
  j["dr_fraction"] = rep.dr_fraction();
  j["chain_values"] = rep.chain_values;
  fs::create_directories(c.out_dir);
  write_text(path_in(c.out_dir, "probe.json"), j.dump(2) + "\n");
  print(j);
  return 0;
}

int cmd_selftest() {
  bool ok = true;
  for (const auto& r : run_selftest()) {
    std::cout << (r.passed ? "PASS " : "FAIL ") << r.name << ": " << r.detail << "\n";
    ok = ok && r.passed;
  }
  return ok ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Block-wise mixed-precision quantization laboratory"};
  app.require_subcommand(1);

  ConfigFlags pretrain_flags, quantize_flags, search_flags, sweep_flags, probe_flags;

  auto* pretrain = app.add_subcommand("pretrain", "train the toy model and write a checkpoint");
  pretrain_flags.attach(pretrain);
  std::string pretrain_out;
  pretrain->add_option("--output", pretrain_out, "checkpoint path (default <out_dir>/model.bbck)");

  auto* quantize = app.add_subcommand("quantize", "quantize a checkpoint into a packed weight file");
  quantize_flags.attach(quantize);
  std::optional<int> quant_bits;
  std::string quant_assignment, quant_perms, quant_out;
  quantize->add_option("--bits", quant_bits, "uniform bitwidth (default floor(budget))");
  quantize->add_option("--assignment", quant_assignment, "per-block assignment CSV")->check(CLI::ExistingFile);
  quantize->add_option("--permutations", quant_perms, "permutation sidecar to apply first")->check(CLI::ExistingFile);
  quantize->add_option("--output", quant_out, "packed file path (default <out_dir>/weights.sbit)");

  auto* search = app.add_subcommand("search", "full pipeline at one budget");
  search_flags.attach(search);

  auto* sweep = app.add_subcommand("sweep", "full pipeline at every budget in 'budgets'");
  sweep_flags.attach(sweep);

  auto* report = app.add_subcommand("report", "regenerate report and CSVs from stored artifacts");
  std::string report_dir;
  report->add_option("dir", report_dir, "run or sweep directory")->required();

  auto* probe = app.add_subcommand("probe", "lattice monotonicity / diminishing-returns probe");
  probe_flags.attach(probe);
  ProbeArgs probe_args;
  probe->add_option("--chains", probe_args.chains, "number of chains");
  probe->add_option("--length", probe_args.length, "points per chain");
  probe->add_option("--step", probe_args.step, "unit raises per link");
  probe->add_option("--start", probe_args.start, "starting bitwidth of every layer");
  probe->add_option("--probe-seed", probe_args.seed, "chain sampling seed");
  probe->add_flag("--synthetic", probe_args.synthetic, "probe an analytic separable concave objective");

  auto* selftest = app.add_subcommand("selftest", "run the oracle suites");

  CLI11_PARSE(app, argc, argv);

  try {
    if (pretrain->parsed()) return cmd_pretrain(pretrain_flags.load(pretrain), pretrain_out);
    if (quantize->parsed())
      return cmd_quantize(quantize_flags.load(quantize), quant_bits, quant_assignment, quant_perms, quant_out);
    if (search->parsed()) {
      const SearchRun r = run_pipeline(search_flags.load(search));
      print(r.report.json);
      return 0;
    }
    if (sweep->parsed()) {
      const RunConfig c = sweep_flags.load(sweep);
      std::cout << sweep_csv(run_sweep(c));
      return 0;
    }
    if (report->parsed()) return cmd_report(report_dir);
    if (probe->parsed()) return cmd_probe(probe_flags.load(probe), probe_args);
    if (selftest->parsed()) return cmd_selftest();
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}

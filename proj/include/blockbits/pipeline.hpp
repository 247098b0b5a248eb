#pragma once

#include <cstdio>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "json.hpp"

#include "blockbits/allocator.hpp"
#include "blockbits/config.hpp"
#include "blockbits/export.hpp"
#include "blockbits/packed.hpp"
#include "blockbits/pretrain.hpp"
#include "blockbits/reorder.hpp"

namespace blockbits {

namespace fs = std::filesystem;

// Runs `fn`, rethrowing any failure as a StageError naming `stage`.
template <class F>
auto stage(const std::string& name, F&& fn) -> decltype(fn()) {
  try {
    return fn();
  } catch (const StageError&) {
    throw;
  } catch (const std::exception& e) {
    throw StageError(name, e.what());
  }
}

// Artifact file names inside a run directory.
namespace artifact {
inline constexpr const char* kConfig = "config.json";
inline constexpr const char* kCheckpoint = "model.bbck";
inline constexpr const char* kPermutations = "permutations.json";
inline constexpr const char* kTrace = "trace.jsonl";
inline constexpr const char* kAssignment = "assignment.csv";
inline constexpr const char* kPacked = "weights.sbit";
inline constexpr const char* kReport = "report.json";
inline constexpr const char* kLayerBits = "bits_by_layer.csv";
inline constexpr const char* kProjBits = "bits_by_proj.csv";
inline constexpr const char* kLayerSens = "layer_sensitivity.csv";
inline constexpr const char* kSnapshot = "snapshot.csv";
inline constexpr const char* kSweep = "sweep.csv";
}  // namespace artifact

inline std::string path_in(const std::string& dir, const std::string& name) { return (fs::path(dir) / name).string(); }

inline std::vector<int> load_corpus(const RunConfig& c) {
  return c.corpus_path.empty() ? make_corpus(c.vocab, c.corpus_length, c.corpus_seed) : load_byte_corpus(c.corpus_path);
}

inline CalibrationSet load_calibration(const RunConfig& c, const std::vector<int>& corpus) {
  return make_calibration(corpus, c.calib_seqs, c.seq_len, c.calib_seed);
}

inline PretrainResult pretrain_model(const RunConfig& c, const std::vector<int>& corpus) {
  PretrainOptions o;
  o.steps = c.pretrain_steps;
  o.lr = c.lr;
  o.batch_seqs = c.pretrain_batch;
  return pretrain(build_model(c.model_spec()), corpus, o);
}

// Model and calibration data shared by every search in a run or sweep.
struct Workspace {
  RunConfig config;  // `checkpoint` always names the model file in use
  ModelBundle model;
  CalibrationSet calibration;
};

inline Workspace prepare_workspace(RunConfig c) {
  fs::create_directories(c.out_dir);
  const auto corpus = stage("corpus", [&] { return load_corpus(c); });
  ModelBundle m = stage("model", [&] {
    if (!c.checkpoint.empty()) {
      ModelBundle loaded = load_checkpoint(c.checkpoint);
      if (loaded.spec() != c.model_spec()) throw SpecError("checkpoint spec differs from the configured model");
      return loaded;
    }
    ModelBundle trained = pretrain_model(c, corpus).model;
    c.checkpoint = path_in(c.out_dir, artifact::kCheckpoint);
    save_checkpoint(trained, c.checkpoint);
    return trained;
  });
  c.checkpoint = fs::weakly_canonical(c.checkpoint).string();
  CalibrationSet cal = stage("calibration", [&] { return load_calibration(c, corpus); });
  return {c, std::move(m), std::move(cal)};
}

// Element sensitivities at the uniform warm start of `m`.
inline std::vector<Tensor> warm_start_sensitivity(const ModelBundle& m, const BlockPartition& p, int level,
                                                  const QuantConfig& q, const Batch& batch) {
  const QuantizedWeights w = quantize_model(m, p, uniform_assignment(p, level), q);
  const SiteGradients g = site_gradients(WeightView(m, w.sites), batch);
  return element_sensitivities(m, g.grad, w.sites);
}

// Site tensors carried through the same permutations as the weights.
inline std::vector<Tensor> permute_site_tensors(const ModelBundle& m, const std::vector<CouplingGroup>& groups,
                                                const PermutationSet& perms, const std::vector<Tensor>& site) {
  ModelBundle carrier = m;
  for (const auto& s : m.sites()) carrier.params()[s.param] = site.at(s.id);
  carrier = apply_permutations(std::move(carrier), groups, perms);
  std::vector<Tensor> out;
  for (const auto& s : m.sites()) out.push_back(carrier.params()[s.param]);
  return out;
}

// ---------------------------------------------------------------------------
// Report

struct ReportInputs {
  RunConfig config;
  ModelBundle model;  // as pretrained, before reordering
  PermutationSet permutations;
  std::vector<PackedTensor> packed;
  Assignment bits;
  std::vector<TraceRecord> trace;
};

inline ReportInputs load_report_inputs(const std::string& dir) {
  ReportInputs in;
  const auto need = [&](const char* name) {
    const std::string p = path_in(dir, name);
    if (!fs::exists(p)) throw ReportError("missing artifact " + p);
    return p;
  };
  in.config = load_config(need(artifact::kConfig), {});
  if (in.config.checkpoint.empty() || !fs::exists(in.config.checkpoint))
    throw ReportError("missing artifact " + in.config.checkpoint);
  in.model = load_checkpoint(in.config.checkpoint);
  const auto groups = coupling_graph(in.model);
  in.permutations = permutations_from_json(read_text(need(artifact::kPermutations)), groups);
  in.packed = decode_packed_file(read_file(need(artifact::kPacked)));
  const ModelBundle reordered = apply_permutations(in.model, groups, in.permutations);
  const BlockPartition p = partition_weights(reordered, in.config.block_rows, in.config.block_cols, in.config.group_size);
  in.bits = assignment_from_csv(read_text(need(artifact::kAssignment)), p);
  in.trace = trace_from_jsonl(read_text(need(artifact::kTrace)));
  return in;
}

struct BitBreakdown {
  std::vector<double> by_layer;
  std::vector<double> by_proj;  // indexed by Proj
};

inline BitBreakdown bit_breakdown(const ModelBundle& m, const BlockPartition& p, const Assignment& b) {
  const std::size_t layers = m.spec().n_layers;
  std::vector<double> ln(layers, 0.0), ld(layers, 0.0), pn(kProjections.size(), 0.0), pd(kProjections.size(), 0.0);
  for (std::size_t i = 0; i < p.size(); ++i) {
    const BlockInfo& info = p.block(i);
    const double e = static_cast<double>(info.elements());
    ln[info.layer] += b[i] * e;
    ld[info.layer] += e;
    pn[static_cast<std::size_t>(info.proj)] += b[i] * e;
    pd[static_cast<std::size_t>(info.proj)] += e;
  }
  BitBreakdown out;
  for (std::size_t l = 0; l < layers; ++l) out.by_layer.push_back(ld[l] > 0 ? ln[l] / ld[l] : 0.0);
  for (std::size_t k = 0; k < pn.size(); ++k) out.by_proj.push_back(pd[k] > 0 ? pn[k] / pd[k] : 0.0);
  return out;
}

struct RunReport {
  nlohmann::ordered_json json;
  double fp_loss = 0.0;
  double uniform_loss = 0.0;
  double loss = 0.0;
  EffectiveBits bits;
};

// Recomputes every reported number from the stored artifacts and writes
// report.json plus the CSV twins.
inline RunReport emit_report(const std::string& dir) {
  const ReportInputs in = stage("report", [&] { return load_report_inputs(dir); });
  return stage("report", [&] {
    const RunConfig& c = in.config;
    const QuantConfig qc = c.quant_config();
    const auto groups = coupling_graph(in.model);
    const ModelBundle m = apply_permutations(in.model, groups, in.permutations);
    const BlockPartition p = partition_weights(m, c.block_rows, c.block_cols, c.group_size);
    const QuantizedWeights packed = unpack_model(in.packed, m);
    if (packed.bits != in.bits) throw ReportError("assignment CSV disagrees with the packed bitwidth tables");
    const CalibrationSet cal = load_calibration(c, load_corpus(c));
    const Batch all = cal.all();
    const int level = warm_start_level(c.budget, qc);
    const QuantizedWeights warm = quantize_model(m, p, uniform_assignment(p, level), qc);

    RunReport r;
    r.fp_loss = forward_loss(m, all);
    r.uniform_loss = forward_loss(WeightView(m, warm.sites), all);
    r.loss = forward_loss(WeightView(m, packed.sites), all);
    r.bits = effective_bits(in.bits, p, qc);
    const BitBreakdown bb = bit_breakdown(m, p, in.bits);
    const auto g_before = site_gradients(WeightView(m, warm.sites), all);
    const auto g_after = site_gradients(WeightView(m, packed.sites), all);
    const auto sens_before = layer_sensitivity(m, g_before.grad, warm.sites, ComponentMetric::FirstOrder);
    const auto sens_after = layer_sensitivity(m, g_after.grad, packed.sites, ComponentMetric::FirstOrder);

    std::size_t accepted = 0, expand = 0;
    for (const auto& t : in.trace) {
      accepted += t.accepted;
      expand += t.phase == Phase::Expand;
    }
    bool saturated = true;
    for (int b : in.bits) saturated = saturated && b >= c.bit_max;
    saturated = saturated && weight_bits(in.bits, p) < budget_bits(c.budget, p);

    auto& j = r.json;
    j["config"] = config_to_json(c);
    j["blocks"] = p.size();
    j["effective_bits"] = {{"weight", r.bits.weight}, {"total", r.bits.total}};
    j["loss"] = {{"full_precision", r.fp_loss}, {"uniform_warm_start", r.uniform_loss}, {"mixed", r.loss}};
    j["warm_start_bits"] = level;
    j["bits_by_layer"] = bb.by_layer;
    nlohmann::ordered_json proj;
    for (Proj k : kProjections) proj[proj_name(k)] = bb.by_proj[static_cast<std::size_t>(k)];
    j["bits_by_proj"] = proj;
    j["layer_sensitivity"] = {{"uniform", sens_before}, {"mixed", sens_after}};
    j["trace"] = {{"iterations", in.trace.size()},
                  {"accepted", accepted},
                  {"expand_iterations", expand},
                  {"balanced_iterations", in.trace.size() - expand},
                  {"final_k", in.trace.empty() ? 0 : in.trace.back().k},
                  {"saturated", saturated}};

    write_text(path_in(dir, artifact::kReport), j.dump(2) + "\n");
    std::string lb = "layer,avg_bits\n";
    for (std::size_t l = 0; l < bb.by_layer.size(); ++l) lb += std::to_string(l) + "," + fmt_double(bb.by_layer[l]) + "\n";
    write_text(path_in(dir, artifact::kLayerBits), lb);
    std::string pb = "proj,avg_bits\n";
    for (Proj k : kProjections)
      pb += std::string(proj_name(k)) + "," + fmt_double(bb.by_proj[static_cast<std::size_t>(k)]) + "\n";
    write_text(path_in(dir, artifact::kProjBits), pb);
    std::string ls = "layer,uniform,mixed\n";
    for (std::size_t l = 0; l < sens_before.size(); ++l)
      ls += std::to_string(l) + "," + fmt_double(sens_before[l]) + "," + fmt_double(sens_after[l]) + "\n";
    write_text(path_in(dir, artifact::kLayerSens), ls);
    return r;
  });
}

// ---------------------------------------------------------------------------
// Heatmaps

inline void write_heatmap(const std::string& stem, const GrayImage& img, const Tensor& raw) {
  write_file(stem + ".pgm", encode_pgm(img));
  write_text(stem + ".csv", matrix_csv(raw));
}

// Per site: reordered warm-start sensitivity (row-max normalized) and the
// final bit allocation.
inline void emit_heatmaps(const std::string& dir, const ModelBundle& m, const BlockPartition& p,
                          const std::vector<Tensor>& sens, const Assignment& b, const QuantConfig& q) {
  const fs::path hd = fs::path(dir) / "heatmaps";
  fs::create_directories(hd);
  for (const auto& s : m.sites()) {
    write_heatmap((hd / ("sens_" + s.name)).string(), heatmap_row_normalized(sens[s.id]), sens[s.id]);
    write_heatmap((hd / ("bits_" + s.name)).string(), heatmap_bits(p, s.id, b, q.bit_min, q.bit_max),
                  bits_matrix(p, s.id, b));
  }
}

// ---------------------------------------------------------------------------
// One search at one budget

struct SearchRun {
  RunReport report;
  Assignment bits;
  SearchTrace trace;
  PermutationSet permutations;
};

// Warm-start quantize, score, reorder, partition, search, pack, report.
inline SearchRun run_search(const Workspace& ws, double budget, const std::string& dir) {
  RunConfig c = ws.config;
  c.budget = budget;
  c.out_dir = dir;
  c.validate();
  fs::create_directories(dir);
  write_text(path_in(dir, artifact::kConfig), config_to_json(c).dump(2) + "\n");
  const QuantConfig qc = c.quant_config();
  const int level = warm_start_level(budget, qc);
  const auto groups = coupling_graph(ws.model);

  SearchRun run;
  const auto sens = stage("sensitivity", [&] {
    const BlockPartition p0 = partition_weights(ws.model, c.block_rows, c.block_cols, c.group_size);
    return warm_start_sensitivity(ws.model, p0, level, qc, ws.calibration.first(c.reorder_seqs));
  });
  run.permutations = stage("reorder", [&] {
    PermutationSet perms = c.reorder ? compute_permutations(ws.model, groups, sens) : identity_permutations(groups);
    write_text(path_in(dir, artifact::kPermutations), permutations_to_json(groups, perms));
    return perms;
  });
  const ModelBundle m = apply_permutations(ws.model, groups, run.permutations);
  const BlockPartition p =
      stage("partition", [&] { return partition_weights(m, c.block_rows, c.block_cols, c.group_size); });
  stage("search", [&] {
    auto [b, trace] = scalable_greedy(m, p, qc, ws.calibration, c.search_options(budget));
    write_text(path_in(dir, artifact::kTrace), trace_to_jsonl(trace));
    write_text(path_in(dir, artifact::kAssignment), assignment_to_csv(m, p, b));
    run.bits = std::move(b);
    run.trace = std::move(trace);
    return 0;
  });
  stage("pack", [&] {
    write_file(path_in(dir, artifact::kPacked), encode_packed_file(pack_model(m, p, run.bits, qc)));
    return 0;
  });
  stage("snapshot", [&] {
    const QuantizedWeights q = quantize_model(m, p, run.bits, qc);
    const Batch batch = ws.calibration.first(c.batch_seqs);
    const SiteGradients g = site_gradients(WeightView(m, q.sites), batch);
    write_text(path_in(dir, artifact::kSnapshot),
               snapshot_csv(run.bits, block_updown(p, g.grad, site_weights(m), q.sites, run.bits, qc,
                                                   c.search_options(budget).up_aggregation)));
    if (c.heatmaps) emit_heatmaps(dir, m, p, permute_site_tensors(ws.model, groups, run.permutations, sens), run.bits, qc);
    return 0;
  });
  run.report = emit_report(dir);
  return run;
}

inline SearchRun run_pipeline(const RunConfig& c) {
  const Workspace ws = prepare_workspace(c);
  return run_search(ws, c.budget, c.out_dir);
}

// ---------------------------------------------------------------------------
// Budget sweep

struct SweepPoint {
  double budget = 0.0;
  RunReport report;
};

inline std::string budget_dir_name(double b) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "budget_%.3f", b);
  return buf;
}

inline std::string sweep_csv(const std::vector<SweepPoint>& pts) {
  std::string out = "budget,weight_bits,total_bits,uniform_loss,loss\n";
  for (const auto& s : pts)
    out += fmt_double(s.budget) + "," + fmt_double(s.report.bits.weight) + "," + fmt_double(s.report.bits.total) + "," +
           fmt_double(s.report.uniform_loss) + "," + fmt_double(s.report.loss) + "\n";
  return out;
}

inline std::vector<SweepPoint> run_sweep(const RunConfig& c) {
  if (c.budgets.empty()) throw ConfigError("budgets", "sweep needs at least one budget");
  const Workspace ws = prepare_workspace(c);
  std::vector<SweepPoint> pts;
  for (double b : c.budgets) pts.push_back({b, run_search(ws, b, path_in(c.out_dir, budget_dir_name(b))).report});
  write_text(path_in(c.out_dir, artifact::kSweep), sweep_csv(pts));
  return pts;
}

// Rebuilds sweep.csv from the per-budget run directories.
inline std::vector<SweepPoint> regenerate_sweep(const std::string& dir, const std::vector<double>& budgets) {
  std::vector<SweepPoint> pts;
  for (double b : budgets) pts.push_back({b, emit_report(path_in(dir, budget_dir_name(b)))});
  write_text(path_in(dir, artifact::kSweep), sweep_csv(pts));
  return pts;
}

}  // namespace blockbits

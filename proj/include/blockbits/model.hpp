#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <unordered_map>
#include <vector>

#include "blockbits/binary_io.hpp"
#include "blockbits/tape.hpp"

namespace blockbits {

struct ModelSpec {
  std::size_t vocab = 256;
  std::size_t d_model = 64;
  std::size_t n_layers = 8;
  std::size_t n_heads = 4;
  std::size_t d_ff = 128;
  std::size_t seq_len = 64;
  std::uint64_t seed = 7;

  std::size_t d_head() const noexcept { return n_heads ? d_model / n_heads : 0; }

  // group_size == 0 skips the quantization divisibility checks.
  void validate(std::size_t group_size = 0) const {
    auto positive = [](std::size_t v, const char* what) {
      if (v == 0) throw SpecError(std::string(what) + " must be at least 1");
    };
    positive(vocab, "vocab");
    positive(d_model, "d_model");
    positive(n_layers, "n_layers");
    positive(n_heads, "n_heads");
    positive(d_ff, "d_ff");
    positive(seq_len, "seq_len");
    if (seq_len < 2) throw SpecError("seq_len must be at least 2 for next-token prediction");
    if (d_model % n_heads != 0) {
      throw SpecError("d_model " + std::to_string(d_model) + " is not divisible by n_heads " +
                      std::to_string(n_heads));
    }
    if (group_size) {
      if (d_model % group_size != 0 || d_ff % group_size != 0)
        throw SpecError("d_model and d_ff must be multiples of the quantization group size " +
                        std::to_string(group_size));
    }
  }

  friend bool operator==(const ModelSpec&, const ModelSpec&) = default;
};

enum class Proj : std::uint8_t { Q, K, V, O, Up, Gate, Down };

inline constexpr std::array<Proj, 7> kProjections = {Proj::Q, Proj::K, Proj::V, Proj::O,
                                                     Proj::Up, Proj::Gate, Proj::Down};

inline const char* proj_name(Proj p) {
  switch (p) {
    case Proj::Q: return "q";
    case Proj::K: return "k";
    case Proj::V: return "v";
    case Proj::O: return "o";
    case Proj::Up: return "up";
    case Proj::Gate: return "gate";
    case Proj::Down: return "down";
  }
  return "?";
}

// A quantizable linear weight W (rows = d_out, cols = d_in).
struct LinearSite {
  std::size_t id = 0;
  std::string name;
  std::size_t layer = 0;
  Proj proj = Proj::Q;
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::size_t param = 0;  // index into ModelBundle::params
};

// Parameter layout: embed, then per layer {attn_norm, q, k, v, o, mlp_norm,
// up, gate, down}, then final_norm and head.
class ModelBundle {
 public:
  static constexpr std::size_t kPerLayer = 9;

  ModelBundle() = default;
  explicit ModelBundle(ModelSpec spec) : spec_(spec) {
    spec_.validate();
    const std::size_t d = spec_.d_model, f = spec_.d_ff;
    add("embed", {spec_.vocab, d});
    for (std::size_t l = 0; l < spec_.n_layers; ++l) {
      const std::string p = "layer" + std::to_string(l) + ".";
      add(p + "attn_norm", {d});
      add(p + "q", {d, d});
      add(p + "k", {d, d});
      add(p + "v", {d, d});
      add(p + "o", {d, d});
      add(p + "mlp_norm", {d});
      add(p + "up", {f, d});
      add(p + "gate", {f, d});
      add(p + "down", {d, f});
      for (Proj pr : kProjections) {
        const std::size_t idx = index(p + proj_name(pr));
        sites_.push_back({sites_.size(), names_[idx], l, pr, params_[idx].rows(), params_[idx].cols(), idx});
      }
    }
    add("final_norm", {d});
    add("head", {spec_.vocab, d});
  }

  const ModelSpec& spec() const noexcept { return spec_; }
  const std::vector<std::string>& names() const noexcept { return names_; }
  const std::vector<Tensor>& params() const noexcept { return params_; }
  std::vector<Tensor>& params() noexcept { return params_; }
  const std::vector<LinearSite>& sites() const noexcept { return sites_; }

  std::size_t index(const std::string& name) const {
    auto it = lookup_.find(name);
    if (it == lookup_.end()) throw LookupError("no parameter named '" + name + "'");
    return it->second;
  }
  bool has(const std::string& name) const { return lookup_.count(name) != 0; }
  const Tensor& param(const std::string& name) const { return params_[index(name)]; }
  Tensor& param(const std::string& name) { return params_[index(name)]; }

  static std::size_t embed_index() { return 0; }
  std::size_t layer_index(std::size_t layer, std::size_t slot) const { return 1 + layer * kPerLayer + slot; }
  std::size_t final_norm_index() const { return 1 + spec_.n_layers * kPerLayer; }
  std::size_t head_index() const { return final_norm_index() + 1; }

  std::uint64_t checksum() const {
    std::uint64_t h = 1469598103934665603ull;
    for (const auto& p : params_) h = blockbits::checksum(p.data(), h);
    return h;
  }

  std::size_t quantizable_count() const {
    std::size_t n = 0;
    for (const auto& s : sites_) n += s.rows * s.cols;
    return n;
  }

  friend bool operator==(const ModelBundle& a, const ModelBundle& b) {
    return a.spec_ == b.spec_ && a.names_ == b.names_ && a.params_ == b.params_;
  }

 private:
  void add(std::string name, Shape shape) {
    lookup_[name] = params_.size();
    names_.push_back(std::move(name));
    params_.push_back(Tensor::zeros(std::move(shape)));
  }

  ModelSpec spec_;
  std::vector<std::string> names_;
  std::vector<Tensor> params_;
  std::unordered_map<std::string, std::size_t> lookup_;
  std::vector<LinearSite> sites_;
};

// Seeded scaled-normal initialization. Norm gains start at one, the head
// starts small so the untrained model predicts a near-uniform distribution.
inline ModelBundle build_model(const ModelSpec& spec) {
  ModelBundle m(spec);
  std::mt19937_64 rng(spec.seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  const double residual_scale = 1.0 / std::sqrt(2.0 * static_cast<double>(spec.n_layers));
  for (std::size_t i = 0; i < m.params().size(); ++i) {
    Tensor& p = m.params()[i];
    const std::string& name = m.names()[i];
    const bool is_norm = name.ends_with("norm");
    double std = 0.0;
    if (is_norm) {
      for (double& v : p.data()) v = 1.0;
      continue;
    }
    if (name == "embed") {
      std = 1.0;
    } else if (name == "head") {
      std = 0.02;
    } else {
      std = 1.0 / std::sqrt(static_cast<double>(p.cols()));
      if (name.ends_with(".o") || name.ends_with(".down")) std *= residual_scale;
    }
    for (double& v : p.data()) v = std * normal(rng);
  }
  return m;
}

// ---------------------------------------------------------------------------
// Forward pass

using Sequence = std::vector<int>;
using Batch = std::vector<Sequence>;

// Resolves each parameter slot either to the bundle's tensor or to an
// override; quantized models are views with every linear site overridden.
class WeightView {
 public:
  explicit WeightView(const ModelBundle& m) : model_(&m), refs_(m.params().size()) {
    for (std::size_t i = 0; i < refs_.size(); ++i) refs_[i] = &m.params()[i];
  }
  WeightView(const ModelBundle& m, const std::vector<Tensor>& site_weights) : WeightView(m) {
    if (site_weights.size() != m.sites().size()) throw ContractError("site weight count does not match model");
    for (const auto& s : m.sites()) set_site(s.id, site_weights[s.id]);
  }

  void set_site(std::size_t site, const Tensor& w) {
    const LinearSite& s = model_->sites().at(site);
    if (w.shape() != model_->params()[s.param].shape()) throw DimensionError("override shape mismatch for " + s.name);
    refs_[s.param] = &w;
  }

  const ModelBundle& model() const noexcept { return *model_; }
  const ModelSpec& spec() const noexcept { return model_->spec(); }
  const Tensor& operator[](std::size_t index) const { return *refs_[index]; }
  const Tensor& site(std::size_t site) const { return *refs_[model_->sites().at(site).param]; }

 private:
  const ModelBundle* model_;
  std::vector<const Tensor*> refs_;
};

// Per linear site: the recorded input activation and output of y = x W^T.
struct SiteIo {
  Var input;
  Var output;
};

struct TapedForward {
  Tape tape;
  Var loss;
  std::vector<Var> params;  // leaf per parameter slot
  std::vector<SiteIo> sites;
  double loss_value() const { return tape.value(loss).item(); }

  // Gradient per parameter slot, in ModelBundle order.
  std::vector<Tensor> gradients() {
    tape.backward(loss);
    std::vector<Tensor> out;
    out.reserve(params.size());
    for (Var p : params) out.push_back(tape.adjoint(p));
    return out;
  }
};

namespace detail {

inline void check_batch(const ModelSpec& spec, const Batch& batch) {
  if (batch.empty()) throw InputError("empty batch");
  const std::size_t len = batch.front().size();
  if (len < 2) throw InputError("sequences need at least two tokens");
  if (len > spec.seq_len)
    throw InputError("sequence length " + std::to_string(len) + " exceeds model seq_len " +
                     std::to_string(spec.seq_len));
  for (const auto& s : batch) {
    if (s.size() != len) throw InputError("sequences in a batch must share one length");
    for (int t : s)
      if (t < 0 || static_cast<std::size_t>(t) >= spec.vocab)
        throw InputError("token id " + std::to_string(t) + " is outside the vocabulary of " +
                         std::to_string(spec.vocab));
  }
}

inline std::vector<int> inputs_of(const Batch& batch) {
  std::vector<int> ids;
  for (const auto& s : batch) ids.insert(ids.end(), s.begin(), s.end() - 1);
  return ids;
}

inline std::vector<int> targets_of(const Batch& batch) {
  std::vector<int> ids;
  for (const auto& s : batch) ids.insert(ids.end(), s.begin() + 1, s.end());
  return ids;
}

// One pre-norm decoder layer: causal multi-head attention then a SiLU-gated
// MLP, both added back into the residual stream `x` (rows = tokens).
inline Var decoder_layer(Tape& t, const WeightView& w, const std::vector<Var>& leaf, std::size_t layer, Var x,
                         std::size_t n_seqs, std::size_t positions, std::vector<SiteIo>* io) {
  const ModelBundle& m = w.model();
  const ModelSpec& spec = m.spec();
  const std::size_t base = m.layer_index(layer, 0);
  auto W = [&](std::size_t slot) { return leaf[base + slot]; };
  auto linear = [&](Var in, std::size_t slot, Proj p) {
    Var out = t.matmul(in, t.transpose(W(slot)));
    if (io) (*io)[layer * kProjections.size() + static_cast<std::size_t>(p)] = {in, out};
    return out;
  };

  Var h = t.rms_norm(x, W(0));
  Var q = linear(h, 1, Proj::Q);
  Var k = linear(h, 2, Proj::K);
  Var v = linear(h, 3, Proj::V);
  const std::size_t dh = spec.d_head();
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  std::vector<Var> seq_out;
  seq_out.reserve(n_seqs);
  std::vector<Var> heads(spec.n_heads);
  for (std::size_t s = 0; s < n_seqs; ++s) {
    const std::size_t r0 = s * positions, r1 = r0 + positions;
    for (std::size_t hd = 0; hd < spec.n_heads; ++hd) {
      const std::size_t c0 = hd * dh, c1 = c0 + dh;
      Var qs = t.slice(q, r0, r1, c0, c1);
      Var ks = t.slice(k, r0, r1, c0, c1);
      Var vs = t.slice(v, r0, r1, c0, c1);
      Var scores = t.scale(t.matmul(qs, t.transpose(ks)), inv_sqrt);
      Var probs = t.softmax_rows(t.causal_mask(scores));
      heads[hd] = t.matmul(probs, vs);
    }
    seq_out.push_back(spec.n_heads == 1 ? heads[0] : t.concat_cols(heads));
  }
  Var attn = n_seqs == 1 ? seq_out[0] : t.concat_rows(seq_out);
  x = t.add(x, linear(attn, 4, Proj::O));

  Var h2 = t.rms_norm(x, W(5));
  Var up = linear(h2, 6, Proj::Up);
  Var gate = linear(h2, 7, Proj::Gate);
  Var act = t.mul(t.silu(gate), up);
  return t.add(x, linear(act, 8, Proj::Down));
}

inline Var head_loss(Tape& t, const WeightView& w, const std::vector<Var>& leaf, Var x, std::vector<int> targets) {
  const ModelBundle& m = w.model();
  Var h = t.rms_norm(x, leaf[m.final_norm_index()]);
  Var logits = t.matmul(h, t.transpose(leaf[m.head_index()]));
  return t.mean_cross_entropy(logits, std::move(targets));
}

inline std::vector<Var> record_params(Tape& t, const WeightView& w) {
  const ModelBundle& m = w.model();
  std::vector<Var> leaf;
  leaf.reserve(m.params().size());
  for (std::size_t i = 0; i < m.params().size(); ++i) leaf.push_back(t.leaf(w[i], m.names()[i]));
  return leaf;
}

}  // namespace detail

// Mean next-token cross-entropy with the full graph kept for gradients.
inline TapedForward forward_tape(const WeightView& w, const Batch& batch) {
  const ModelSpec& spec = w.spec();
  detail::check_batch(spec, batch);
  TapedForward f;
  Tape& t = f.tape;
  f.params = detail::record_params(t, w);
  f.sites.resize(w.model().sites().size());
  const std::size_t positions = batch.front().size() - 1;
  Var x = t.gather(f.params[ModelBundle::embed_index()], detail::inputs_of(batch));
  for (std::size_t l = 0; l < spec.n_layers; ++l)
    x = detail::decoder_layer(t, w, f.params, l, x, batch.size(), positions, &f.sites);
  f.loss = detail::head_loss(t, w, f.params, x, detail::targets_of(batch));
  return f;
}

// Sequences per evaluation chunk in the gradient-free path; bounds memory.
inline constexpr std::size_t kEvalChunk = 8;

// Gradient-free loss. Evaluated in chunks of kEvalChunk sequences; the result
// is the token-weighted mean over the whole batch.
inline double forward_loss(const WeightView& w, const Batch& batch) {
  detail::check_batch(w.spec(), batch);
  double total = 0.0;
  std::size_t count = 0;
  for (std::size_t start = 0; start < batch.size(); start += kEvalChunk) {
    const std::size_t end = std::min(batch.size(), start + kEvalChunk);
    Batch chunk(batch.begin() + static_cast<std::ptrdiff_t>(start), batch.begin() + static_cast<std::ptrdiff_t>(end));
    Tape t;
    auto leaf = detail::record_params(t, w);
    const std::size_t positions = chunk.front().size() - 1;
    Var x = t.gather(leaf[ModelBundle::embed_index()], detail::inputs_of(chunk));
    for (std::size_t l = 0; l < w.spec().n_layers; ++l)
      x = detail::decoder_layer(t, w, leaf, l, x, chunk.size(), positions, nullptr);
    const double chunk_loss = t.value(detail::head_loss(t, w, leaf, x, detail::targets_of(chunk))).item();
    const std::size_t tokens = chunk.size() * positions;
    total += chunk_loss * static_cast<double>(tokens);
    count += tokens;
  }
  return total / static_cast<double>(count);
}

inline double forward_loss(const ModelBundle& m, const Batch& batch) { return forward_loss(WeightView(m), batch); }

// Residual-stream inputs to every layer for a fixed batch and weight view.
// Re-evaluating after a change confined to layers >= L only needs the layers
// from L onward.
class LayerCache {
 public:
  LayerCache(const WeightView& w, const Batch& batch) : batch_(batch) {
    detail::check_batch(w.spec(), batch);
    rebuild(w, 0);
  }

  // Recomputes cached inputs for layers > first_changed.
  void rebuild(const WeightView& w, std::size_t first_changed) {
    const ModelSpec& spec = w.spec();
    const std::size_t layers = spec.n_layers;
    if (chunks_.empty()) {
      for (std::size_t start = 0; start < batch_.size(); start += kEvalChunk) {
        const std::size_t end = std::min(batch_.size(), start + kEvalChunk);
        Chunk c;
        c.seqs = end - start;
        Batch sub(batch_.begin() + static_cast<std::ptrdiff_t>(start), batch_.begin() + static_cast<std::ptrdiff_t>(end));
        c.inputs = detail::inputs_of(sub);
        c.targets = detail::targets_of(sub);
        c.residual.resize(layers + 1);
        chunks_.push_back(std::move(c));
      }
      first_changed = 0;
    }
    positions_ = batch_.front().size() - 1;
    for (auto& c : chunks_) {
      Tape t;
      auto leaf = detail::record_params(t, w);
      Var x;
      if (first_changed == 0) {
        x = t.gather(leaf[ModelBundle::embed_index()], c.inputs);
        c.residual[0] = t.value(x);
      } else {
        x = t.leaf(c.residual[first_changed]);
      }
      for (std::size_t l = first_changed; l < layers; ++l) {
        x = detail::decoder_layer(t, w, leaf, l, x, c.seqs, positions_, nullptr);
        c.residual[l + 1] = t.value(x);
      }
    }
  }

  // Loss of `w`, assuming `w` agrees with the cached view on all layers
  // before `first_changed`.
  double loss_from(const WeightView& w, std::size_t first_changed) const {
    double total = 0.0;
    std::size_t count = 0;
    for (const auto& c : chunks_) {
      Tape t;
      auto leaf = detail::record_params(t, w);
      Var x = t.leaf(c.residual[first_changed]);
      for (std::size_t l = first_changed; l < w.spec().n_layers; ++l)
        x = detail::decoder_layer(t, w, leaf, l, x, c.seqs, positions_, nullptr);
      const double loss = t.value(detail::head_loss(t, w, leaf, x, c.targets)).item();
      const std::size_t tokens = c.seqs * positions_;
      total += loss * static_cast<double>(tokens);
      count += tokens;
    }
    return total / static_cast<double>(count);
  }

 private:
  struct Chunk {
    std::size_t seqs = 0;
    std::vector<int> inputs;
    std::vector<int> targets;
    std::vector<Tensor> residual;
  };
  Batch batch_;
  std::size_t positions_ = 0;
  std::vector<Chunk> chunks_;
};

// ---------------------------------------------------------------------------
// Checkpoint container
//
//   "BBCK" | u16 version | spec: u32 vocab, d_model, n_layers, n_heads, d_ff,
//   seq_len, u64 seed | u32 tensor count | per tensor: u32 name length, name,
//   u32 rank, u64 dims[rank], f64 values[numel]
//
// All integers and doubles little-endian.

inline constexpr std::uint16_t kCheckpointVersion = 1;

inline std::vector<std::uint8_t> encode_checkpoint(const ModelBundle& m) {
  ByteWriter w;
  w.str("BBCK");
  w.u16(kCheckpointVersion);
  const ModelSpec& s = m.spec();
  for (std::size_t v : {s.vocab, s.d_model, s.n_layers, s.n_heads, s.d_ff, s.seq_len})
    w.u32(static_cast<std::uint32_t>(v));
  w.u64(s.seed);
  w.u32(static_cast<std::uint32_t>(m.params().size()));
  for (std::size_t i = 0; i < m.params().size(); ++i) {
    const auto& name = m.names()[i];
    const Tensor& t = m.params()[i];
    w.u32(static_cast<std::uint32_t>(name.size()));
    w.str(name);
    w.u32(static_cast<std::uint32_t>(t.rank()));
    for (std::size_t d : t.shape()) w.u64(d);
    for (double v : t.data()) w.f64(v);
  }
  return std::move(w).take();
}

inline ModelBundle decode_checkpoint(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes);
  if (r.str(4) != "BBCK") throw FormatError("bad checkpoint magic", 0);
  const std::size_t at = r.offset();
  if (const auto v = r.u16(); v != kCheckpointVersion)
    throw FormatError("unsupported checkpoint version " + std::to_string(v), at);
  ModelSpec s;
  s.vocab = r.u32();
  s.d_model = r.u32();
  s.n_layers = r.u32();
  s.n_heads = r.u32();
  s.d_ff = r.u32();
  s.seq_len = r.u32();
  s.seed = r.u64();
  ModelBundle m(s);
  const std::size_t count = r.u32();
  if (count != m.params().size())
    throw FormatError("checkpoint holds " + std::to_string(count) + " tensors, expected " +
                          std::to_string(m.params().size()),
                      r.offset());
  for (std::size_t i = 0; i < count; ++i) {
    const std::size_t name_at = r.offset();
    const std::string name = r.str(r.u32());
    if (!m.has(name)) throw FormatError("unknown tensor '" + name + "'", name_at);
    Tensor& t = m.param(name);
    const std::size_t rank = r.u32();
    Shape shape(rank);
    for (auto& d : shape) d = r.u64();
    if (shape != t.shape()) throw FormatError("shape mismatch for tensor '" + name + "'", name_at);
    for (double& v : t.data()) v = r.f64();
  }
  if (!r.done()) throw FormatError("trailing bytes after checkpoint", r.offset());
  return m;
}

inline void save_checkpoint(const ModelBundle& m, const std::string& path) { write_file(path, encode_checkpoint(m)); }
inline ModelBundle load_checkpoint(const std::string& path) { return decode_checkpoint(read_file(path)); }

}  // namespace blockbits

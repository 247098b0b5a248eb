#pragma once

#include <algorithm>
#include <numeric>
#include <string>
#include <vector>

#include "json.hpp"

#include "blockbits/coupling.hpp"

namespace blockbits {

using Permutation = std::vector<std::size_t>;  // new index -> old index
using PermutationSet = std::vector<Permutation>;

// l1 norm of |S| along `axis` for each index of [begin, end).
inline std::vector<double> member_scores(const Tensor& s, Axis axis, std::size_t begin, std::size_t end) {
  require_matrix(s, "member_scores");
  const std::size_t rows = s.rows(), cols = s.cols();
  const std::size_t extent = axis == Axis::Rows ? rows : cols;
  if (begin > end || end > extent) throw ContractError("score slice outside the matrix axis");
  std::vector<double> out(end - begin, 0.0);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) {
      const std::size_t idx = axis == Axis::Rows ? r : c;
      if (idx >= begin && idx < end) out[idx - begin] += std::fabs(s(r, c));
    }
  }
  return out;
}

// Channel scores of one coupling group. `sens` maps a parameter index to its
// element sensitivity; members without one (embedding, head, norm gains)
// contribute nothing.
inline std::vector<double> channel_scores(const std::vector<const Tensor*>& sens, const CouplingGroup& g) {
  std::vector<double> score(g.width(), 0.0);
  for (const CouplingMember& mem : g.members) {
    if (mem.width() != score.size()) throw ContractError("coupling group " + g.id + " has members of unequal width");
    if (mem.param >= sens.size() || !sens[mem.param]) continue;
    const auto part = member_scores(*sens[mem.param], mem.axis, mem.begin, mem.end);
    for (std::size_t i = 0; i < score.size(); ++i) score[i] += part[i];
  }
  return score;
}

// Descending by score; ties keep ascending original index.
inline Permutation sort_permutation(const std::vector<double>& score) {
  Permutation p(score.size());
  std::iota(p.begin(), p.end(), std::size_t{0});
  std::stable_sort(p.begin(), p.end(), [&](std::size_t a, std::size_t b) { return score[a] > score[b]; });
  return p;
}

// Per-site element sensitivities keyed by parameter index.
inline std::vector<const Tensor*> sensitivity_by_param(const ModelBundle& m, const std::vector<Tensor>& site_sens) {
  if (site_sens.size() != m.sites().size()) throw ContractError("one sensitivity matrix per site expected");
  std::vector<const Tensor*> out(m.params().size(), nullptr);
  for (const auto& s : m.sites()) out[s.param] = &site_sens[s.id];
  return out;
}

inline PermutationSet compute_permutations(const ModelBundle& m, const std::vector<CouplingGroup>& groups,
                                           const std::vector<Tensor>& site_sens) {
  const auto sens = sensitivity_by_param(m, site_sens);
  PermutationSet out;
  out.reserve(groups.size());
  for (const auto& g : groups) out.push_back(sort_permutation(channel_scores(sens, g)));
  return out;
}

inline void check_permutation(const Permutation& p, std::size_t width, const std::string& id) {
  if (p.size() != width)
    throw PermutationError("permutation for " + id + " has length " + std::to_string(p.size()) + ", expected " +
                           std::to_string(width));
  std::vector<char> seen(width, 0);
  for (std::size_t v : p) {
    if (v >= width || seen[v]) throw PermutationError("permutation for " + id + " is not a bijection");
    seen[v] = 1;
  }
}

inline Permutation inverse_permutation(const Permutation& p) {
  Permutation inv(p.size());
  for (std::size_t i = 0; i < p.size(); ++i) inv.at(p[i]) = i;
  return inv;
}

inline PermutationSet inverse_permutations(const PermutationSet& ps) {
  PermutationSet out;
  for (const auto& p : ps) out.push_back(inverse_permutation(p));
  return out;
}

inline void permute_member(Tensor& t, const CouplingMember& mem, const Permutation& p) {
  const std::size_t rows = t.rows(), cols = t.cols();
  const Tensor src = t;
  auto dst = t.data();
  const auto in = src.data();
  if (mem.axis == Axis::Rows) {
    for (std::size_t i = 0; i < p.size(); ++i)
      std::copy_n(in.begin() + static_cast<std::ptrdiff_t>((mem.begin + p[i]) * cols), cols,
                  dst.begin() + static_cast<std::ptrdiff_t>((mem.begin + i) * cols));
  } else {
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t i = 0; i < p.size(); ++i) dst[r * cols + mem.begin + i] = in[r * cols + mem.begin + p[i]];
  }
}

inline ModelBundle apply_permutations(ModelBundle m, const std::vector<CouplingGroup>& groups,
                                      const PermutationSet& perms) {
  if (perms.size() != groups.size())
    throw PermutationError("got " + std::to_string(perms.size()) + " permutations for " +
                           std::to_string(groups.size()) + " coupling groups");
  for (std::size_t g = 0; g < groups.size(); ++g) {
    check_permutation(perms[g], groups[g].width(), groups[g].id);
    for (const auto& mem : groups[g].members) permute_member(m.params()[mem.param], mem, perms[g]);
  }
  return m;
}

inline PermutationSet identity_permutations(const std::vector<CouplingGroup>& groups) {
  PermutationSet out;
  for (const auto& g : groups) {
    Permutation p(g.width());
    std::iota(p.begin(), p.end(), std::size_t{0});
    out.push_back(std::move(p));
  }
  return out;
}

// JSON sidecar: {"groups": {"<group id>": [old index for each new index]}}
inline std::string permutations_to_json(const std::vector<CouplingGroup>& groups, const PermutationSet& perms) {
  nlohmann::ordered_json j;
  j["groups"] = nlohmann::ordered_json::object();
  for (std::size_t g = 0; g < groups.size(); ++g) j["groups"][groups[g].id] = perms.at(g);
  return j.dump(1) + "\n";
}

inline PermutationSet permutations_from_json(const std::string& text, const std::vector<CouplingGroup>& groups) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw PermutationError(std::string("malformed permutation sidecar: ") + e.what());
  }
  if (!j.contains("groups") || !j["groups"].is_object()) throw PermutationError("sidecar lacks a groups object");
  const auto& obj = j["groups"];
  if (obj.size() != groups.size()) throw PermutationError("sidecar group count differs from the model");
  PermutationSet out;
  for (const auto& g : groups) {
    if (!obj.contains(g.id)) throw PermutationError("sidecar lacks group " + g.id);
    Permutation p = obj[g.id].get<Permutation>();
    check_permutation(p, g.width(), g.id);
    out.push_back(std::move(p));
  }
  return out;
}

}  // namespace blockbits

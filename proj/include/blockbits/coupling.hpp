#pragma once

#include <string>
#include <vector>

#include "blockbits/model.hpp"

namespace blockbits {

enum class Axis : std::uint8_t { Rows, Cols };

inline const char* axis_name(Axis a) { return a == Axis::Rows ? "rows" : "cols"; }

enum class GroupKind : std::uint8_t { Residual, MlpLocal, HeadLocal };

// A (parameter, axis, [begin, end)) slice that is permuted with its group.
// Rank-1 parameters (norm gains) are indexed along Cols.
struct CouplingMember {
  std::size_t param = 0;
  Axis axis = Axis::Cols;
  std::size_t begin = 0;
  std::size_t end = 0;

  std::size_t width() const noexcept { return end - begin; }
};

struct CouplingGroup {
  GroupKind kind = GroupKind::Residual;
  std::size_t layer = 0;
  std::size_t head = 0;
  std::string id;
  std::vector<CouplingMember> members;

  std::size_t width() const { return members.empty() ? 0 : members.front().width(); }
};

// Channel axes that must share one permutation for the network function to be
// unchanged: the residual stream, each MLP hidden layer, and each attention
// head's value/output channels. Q and K output channels stay fixed.
inline std::vector<CouplingGroup> coupling_graph(const ModelBundle& m) {
  const ModelSpec& s = m.spec();
  const std::size_t d = s.d_model, f = s.d_ff, dh = s.d_head();
  std::vector<CouplingGroup> groups;

  CouplingGroup res{GroupKind::Residual, 0, 0, "residual", {}};
  res.members.push_back({ModelBundle::embed_index(), Axis::Cols, 0, d});
  for (std::size_t l = 0; l < s.n_layers; ++l) {
    auto at = [&](std::size_t slot) { return m.layer_index(l, slot); };
    res.members.push_back({at(0), Axis::Cols, 0, d});  // attn_norm
    for (std::size_t slot : {1, 2, 3}) res.members.push_back({at(slot), Axis::Cols, 0, d});
    res.members.push_back({at(4), Axis::Rows, 0, d});  // o
    res.members.push_back({at(5), Axis::Cols, 0, d});  // mlp_norm
    for (std::size_t slot : {6, 7}) res.members.push_back({at(slot), Axis::Cols, 0, d});
    res.members.push_back({at(8), Axis::Rows, 0, d});  // down
  }
  res.members.push_back({m.final_norm_index(), Axis::Cols, 0, d});
  res.members.push_back({m.head_index(), Axis::Cols, 0, d});
  groups.push_back(std::move(res));

  for (std::size_t l = 0; l < s.n_layers; ++l) {
    const std::string p = "layer" + std::to_string(l);
    groups.push_back({GroupKind::MlpLocal,
                      l,
                      0,
                      p + ".mlp",
                      {{m.layer_index(l, 6), Axis::Rows, 0, f},
                       {m.layer_index(l, 7), Axis::Rows, 0, f},
                       {m.layer_index(l, 8), Axis::Cols, 0, f}}});
    for (std::size_t h = 0; h < s.n_heads; ++h) {
      groups.push_back({GroupKind::HeadLocal,
                        l,
                        h,
                        p + ".head" + std::to_string(h),
                        {{m.layer_index(l, 3), Axis::Rows, h * dh, (h + 1) * dh},
                         {m.layer_index(l, 4), Axis::Cols, h * dh, (h + 1) * dh}}});
    }
  }
  return groups;
}

}  // namespace blockbits

#pragma once

#include <string>
#include <vector>

#include "blockbits/model.hpp"

namespace blockbits {

// One m x n block of a linear site. Row tails may be short; columns never are.
struct BlockInfo {
  std::size_t site = 0;
  std::size_t layer = 0;
  Proj proj = Proj::Q;
  std::size_t block_row = 0;
  std::size_t block_col = 0;
  std::size_t row0 = 0;
  std::size_t rows = 0;
  std::size_t col0 = 0;
  std::size_t cols = 0;

  std::size_t elements() const noexcept { return rows * cols; }
};

struct SiteGrid {
  std::size_t site = 0;
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::size_t grid_rows = 0;
  std::size_t grid_cols = 0;
  std::size_t first = 0;  // flat id of block (0, 0)

  std::size_t count() const noexcept { return grid_rows * grid_cols; }
};

// Flat block index space over all quantizable sites: site order, then
// row-major over each site's block grid.
class BlockPartition {
 public:
  BlockPartition() = default;
  BlockPartition(std::size_t block_rows, std::size_t block_cols, std::size_t group_size,
                 std::vector<SiteGrid> grids, std::vector<BlockInfo> blocks)
      : block_rows_(block_rows),
        block_cols_(block_cols),
        group_size_(group_size),
        grids_(std::move(grids)),
        blocks_(std::move(blocks)) {
    for (const auto& b : blocks_) total_ += b.elements();
  }

  std::size_t block_rows() const noexcept { return block_rows_; }
  std::size_t block_cols() const noexcept { return block_cols_; }
  std::size_t group_size() const noexcept { return group_size_; }
  std::size_t size() const noexcept { return blocks_.size(); }
  const std::vector<BlockInfo>& blocks() const noexcept { return blocks_; }
  const BlockInfo& block(std::size_t i) const { return blocks_.at(i); }
  const std::vector<SiteGrid>& grids() const noexcept { return grids_; }
  const SiteGrid& grid(std::size_t site) const { return grids_.at(site); }
  std::size_t elements(std::size_t i) const { return blocks_.at(i).elements(); }
  std::size_t total_elements() const noexcept { return total_; }

  std::size_t id(std::size_t site, std::size_t block_row, std::size_t block_col) const {
    const SiteGrid& g = grids_.at(site);
    if (block_row >= g.grid_rows || block_col >= g.grid_cols)
      throw LookupError("block (" + std::to_string(block_row) + ", " + std::to_string(block_col) +
                        ") outside the grid of site " + std::to_string(site));
    return g.first + block_row * g.grid_cols + block_col;
  }

  // Groups stored for block i: one per row and column group.
  std::size_t groups(std::size_t i) const { return blocks_.at(i).rows * (blocks_.at(i).cols / group_size_); }

 private:
  std::size_t block_rows_ = 0;
  std::size_t block_cols_ = 0;
  std::size_t group_size_ = 0;
  std::vector<SiteGrid> grids_;
  std::vector<BlockInfo> blocks_;
  std::size_t total_ = 0;
};

inline BlockPartition partition_weights(const ModelBundle& m, std::size_t block_rows = 64,
                                        std::size_t block_cols = 128, std::size_t group_size = 128) {
  if (group_size == 0) throw ConfigError("group_size", "group size must be positive");
  if (block_rows == 0) throw ConfigError("block_rows", "block rows must be positive");
  if (block_cols == 0 || block_cols % group_size != 0)
    throw ConfigError("block_cols", "block columns " + std::to_string(block_cols) +
                                        " must be a positive multiple of the group size " +
                                        std::to_string(group_size));
  std::vector<SiteGrid> grids;
  std::vector<BlockInfo> blocks;
  for (const LinearSite& s : m.sites()) {
    if (s.cols % block_cols != 0)
      throw ConfigError("block_cols", "block columns " + std::to_string(block_cols) + " do not divide the " +
                                          std::to_string(s.cols) + " columns of " + s.name);
    SiteGrid g{s.id, s.rows, s.cols, (s.rows + block_rows - 1) / block_rows, s.cols / block_cols, blocks.size()};
    for (std::size_t br = 0; br < g.grid_rows; ++br) {
      for (std::size_t bc = 0; bc < g.grid_cols; ++bc) {
        const std::size_t r0 = br * block_rows;
        blocks.push_back({s.id, s.layer, s.proj, br, bc, r0, std::min(block_rows, s.rows - r0), bc * block_cols,
                          block_cols});
      }
    }
    grids.push_back(g);
  }
  return {block_rows, block_cols, group_size, std::move(grids), std::move(blocks)};
}

// Component id per block when every block of a decoder layer shares one
// bitwidth.
inline std::vector<std::size_t> layer_components(const BlockPartition& p) {
  std::vector<std::size_t> comp(p.size());
  for (std::size_t i = 0; i < p.size(); ++i) comp[i] = p.block(i).layer;
  return comp;
}

}  // namespace blockbits

#pragma once

#include <algorithm>
#include <cstdint>
#include <cstdlib>
#include <vector>

#include "trajdiff/error.hpp"

namespace trajdiff {

/// Raster coordinate, row-major convention used by grids and masks.
struct Pixel {
  int row = 0;
  int col = 0;

  friend bool operator==(const Pixel&, const Pixel&) = default;
  friend auto operator<=>(const Pixel&, const Pixel&) = default;
};

inline int chebyshev(Pixel a, Pixel b) { return std::max(std::abs(a.row - b.row), std::abs(a.col - b.col)); }

/// Ordered pixel sequence; consecutive points are 8-adjacent.
using PixelPath = std::vector<Pixel>;

/// True when consecutive points are 8-adjacent and the path never steps straight back.
inline bool is_valid_path(const PixelPath& path) {
  for (std::size_t i = 1; i < path.size(); ++i) {
    if (chebyshev(path[i - 1], path[i]) != 1) return false;
    if (i >= 2 && path[i] == path[i - 2]) return false;
  }
  return true;
}

/// Binary top-down world raster; true marks a blocked cell.
struct OccupancyGrid {
  int rows = 0;
  int cols = 0;
  double cell_size = 0.2;
  std::uint64_t seed = 0;
  std::vector<std::uint8_t> cells;

  OccupancyGrid() = default;
  OccupancyGrid(int r, int c, double size = 0.2, std::uint64_t s = 0)
      : rows(r), cols(c), cell_size(size), seed(s), cells(static_cast<std::size_t>(r) * c, 0) {}

  bool in_bounds(Pixel p) const { return p.row >= 0 && p.row < rows && p.col >= 0 && p.col < cols; }
  std::size_t index(Pixel p) const { return static_cast<std::size_t>(p.row) * cols + p.col; }
  bool blocked(Pixel p) const { return cells[index(p)] != 0; }
  void set_blocked(Pixel p, bool b) { cells[index(p)] = b ? 1 : 0; }

  std::size_t free_count() const {
    std::size_t n = 0;
    for (auto c : cells) n += (c == 0);
    return n;
  }
};

inline constexpr int kNeighbourRow[8] = {-1, -1, -1, 0, 0, 1, 1, 1};
inline constexpr int kNeighbourCol[8] = {-1, 0, 1, -1, 1, -1, 0, 1};

/// 8-connected labelling of free cells. Labels are -1 for blocked cells and
/// components are numbered in row-major order of their first cell.
struct FreeComponents {
  std::vector<int> label;
  std::vector<std::size_t> sizes;

  int largest() const {
    int best = -1;
    for (std::size_t i = 0; i < sizes.size(); ++i) {
      if (best < 0 || sizes[i] > sizes[static_cast<std::size_t>(best)]) best = static_cast<int>(i);
    }
    return best;
  }
};

inline FreeComponents label_free_components(const OccupancyGrid& grid) {
  FreeComponents fc;
  fc.label.assign(grid.cells.size(), -1);
  std::vector<int> stack;
  for (int r = 0; r < grid.rows; ++r) {
    for (int c = 0; c < grid.cols; ++c) {
      std::size_t idx = grid.index({r, c});
      if (grid.cells[idx] || fc.label[idx] >= 0) continue;
      int id = static_cast<int>(fc.sizes.size());
      fc.sizes.push_back(0);
      fc.label[idx] = id;
      stack.push_back(static_cast<int>(idx));
      while (!stack.empty()) {
        int cur = stack.back();
        stack.pop_back();
        ++fc.sizes.back();
        Pixel p{cur / grid.cols, cur % grid.cols};
        for (int k = 0; k < 8; ++k) {
          Pixel q{p.row + kNeighbourRow[k], p.col + kNeighbourCol[k]};
          if (!grid.in_bounds(q)) continue;
          std::size_t qi = grid.index(q);
          if (grid.cells[qi] || fc.label[qi] >= 0) continue;
          fc.label[qi] = id;
          stack.push_back(static_cast<int>(qi));
        }
      }
    }
  }
  return fc;
}

}  // namespace trajdiff

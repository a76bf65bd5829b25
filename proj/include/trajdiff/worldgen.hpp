#pragma once

// Procedural top-down occupancy worlds and their RGB renderings.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <random>

#include <nlohmann/json.hpp>

#include "trajdiff/error.hpp"
#include "trajdiff/grid.hpp"
#include "trajdiff/tensor.hpp"

namespace trajdiff {

struct WorldConfig {
  int rows = 64;
  int cols = 64;
  double cell_size = 0.2;      // metres per cell
  double density = 0.1;        // target blocked fraction, in [0, 0.4]
  double room_weight = 1.0;    // relative frequency of hollow rooms with doorways
  double wall_weight = 1.0;    // straight wall segments
  double blob_weight = 1.0;    // filled rectangles and discs
  int border_margin = 0;       // cells left free along the outer edge

  void validate() const {
    detail::require(rows >= 4 && cols >= 4, "world must be at least 4x4");
    detail::require(cell_size > 0.0, "cell_size must be positive");
    detail::require(density >= 0.0 && density <= 0.4, "density must lie in [0, 0.4]");
    detail::require(room_weight >= 0 && wall_weight >= 0 && blob_weight >= 0, "primitive weights must be >= 0");
    detail::require(density == 0.0 || room_weight + wall_weight + blob_weight > 0, "no obstacle primitives enabled");
  }
};

inline void to_json(nlohmann::json& j, const WorldConfig& c) {
  j = {{"rows", c.rows},           {"cols", c.cols},
       {"cell_size", c.cell_size}, {"density", c.density},
       {"room_weight", c.room_weight}, {"wall_weight", c.wall_weight},
       {"blob_weight", c.blob_weight}, {"border_margin", c.border_margin}};
}

inline void from_json(const nlohmann::json& j, WorldConfig& c) {
  WorldConfig d;
  c.rows = j.value("rows", d.rows);
  c.cols = j.value("cols", d.cols);
  c.cell_size = j.value("cell_size", d.cell_size);
  c.density = j.value("density", d.density);
  c.room_weight = j.value("room_weight", d.room_weight);
  c.wall_weight = j.value("wall_weight", d.wall_weight);
  c.blob_weight = j.value("blob_weight", d.blob_weight);
  c.border_margin = j.value("border_margin", d.border_margin);
}

inline constexpr double kMinFreeFraction = 0.3;
inline constexpr double kMinLargestComponentFraction = 0.8;

/// SplitMix64 step; used to derive independent child seeds.
inline std::uint64_t mix_seed(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline bool satisfies_connectivity(const OccupancyGrid& grid) {
  std::size_t free = grid.free_count();
  if (free < kMinFreeFraction * grid.cells.size()) return false;
  auto comps = label_free_components(grid);
  int big = comps.largest();
  return big >= 0 && comps.sizes[static_cast<std::size_t>(big)] >= kMinLargestComponentFraction * free;
}

namespace detail {

inline void fill_rect(OccupancyGrid& g, int r0, int c0, int r1, int c1, int margin) {
  for (int r = std::max(r0, margin); r <= std::min(r1, g.rows - 1 - margin); ++r) {
    for (int c = std::max(c0, margin); c <= std::min(c1, g.cols - 1 - margin); ++c) g.set_blocked({r, c}, true);
  }
}

inline void clear_cell(OccupancyGrid& g, int r, int c) {
  if (g.in_bounds({r, c})) g.set_blocked({r, c}, false);
}

// Joins every minor free component to the largest one with a 1-cell corridor
// until the connectivity invariant holds.
inline void carve_corridors(OccupancyGrid& grid) {
  while (!satisfies_connectivity(grid)) {
    auto comps = label_free_components(grid);
    int big = comps.largest();
    if (big < 0) {
      grid.set_blocked({grid.rows / 2, grid.cols / 2}, false);
      continue;
    }
    if (grid.free_count() < kMinFreeFraction * grid.cells.size()) {
      // Too little free space: unblock cells in row-major order.
      for (std::size_t i = 0; i < grid.cells.size(); ++i) {
        if (grid.cells[i]) {
          grid.cells[i] = 0;
          break;
        }
      }
      continue;
    }
    // Second-largest component, first cell in row-major order.
    int second = -1;
    for (std::size_t i = 0; i < comps.sizes.size(); ++i) {
      if (static_cast<int>(i) == big) continue;
      if (second < 0 || comps.sizes[i] > comps.sizes[static_cast<std::size_t>(second)]) second = static_cast<int>(i);
    }
    Pixel from{}, to{};
    bool found = false;
    for (std::size_t i = 0; i < comps.label.size() && !found; ++i) {
      if (comps.label[i] == second) {
        from = {static_cast<int>(i) / grid.cols, static_cast<int>(i) % grid.cols};
        found = true;
      }
    }
    int best = -1;
    for (std::size_t i = 0; i < comps.label.size(); ++i) {
      if (comps.label[i] != big) continue;
      Pixel p{static_cast<int>(i) / grid.cols, static_cast<int>(i) % grid.cols};
      int d = std::abs(p.row - from.row) + std::abs(p.col - from.col);
      if (best < 0 || d < best) {
        best = d;
        to = p;
      }
    }
    // L-shaped corridor: along the row first, then the column.
    int step = to.col > from.col ? 1 : -1;
    for (int c = from.col; c != to.col; c += step) clear_cell(grid, from.row, c);
    step = to.row > from.row ? 1 : -1;
    for (int r = from.row; r != to.row; r += step) clear_cell(grid, r, to.col);
    clear_cell(grid, to.row, to.col);
  }
}

}  // namespace detail

/// Deterministic per (seed, config). Places rooms, walls and blobs until the
/// target density is met, then carves corridors to restore connectivity.
inline OccupancyGrid generate_world(std::uint64_t seed, const WorldConfig& cfg) {
  cfg.validate();
  OccupancyGrid grid(cfg.rows, cfg.cols, cfg.cell_size, seed);
  if (cfg.density == 0.0) return grid;

  std::mt19937_64 rng(mix_seed(seed));
  auto uni = [&](int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng); };
  std::discrete_distribution<int> kind({cfg.room_weight, cfg.wall_weight, cfg.blob_weight});
  const std::size_t target = static_cast<std::size_t>(cfg.density * grid.cells.size());
  const int m = cfg.border_margin;
  const int span = std::min(cfg.rows, cfg.cols);

  auto blocked = [&] { return grid.cells.size() - grid.free_count(); };
  for (int guard = 0; blocked() < target && guard < 10000; ++guard) {
    switch (kind(rng)) {
      case 0: {  // hollow room with one or two doorways
        int h = uni(span / 5, span / 2), w = uni(span / 5, span / 2);
        int r0 = uni(0, cfg.rows - h), c0 = uni(0, cfg.cols - w);
        int r1 = r0 + h - 1, c1 = c0 + w - 1;
        detail::fill_rect(grid, r0, c0, r0, c1, m);
        detail::fill_rect(grid, r1, c0, r1, c1, m);
        detail::fill_rect(grid, r0, c0, r1, c0, m);
        detail::fill_rect(grid, r0, c1, r1, c1, m);
        int doors = uni(1, 2);
        for (int d = 0; d < doors; ++d) {
          int side = uni(0, 3);
          int width = 4;
          if (side < 2) {
            int c = uni(c0 + 1, std::max(c0 + 1, c1 - width));
            int r = side == 0 ? r0 : r1;
            for (int k = 0; k < width; ++k) detail::clear_cell(grid, r, c + k);
          } else {
            int r = uni(r0 + 1, std::max(r0 + 1, r1 - width));
            int c = side == 2 ? c0 : c1;
            for (int k = 0; k < width; ++k) detail::clear_cell(grid, r + k, c);
          }
        }
        break;
      }
      case 1: {  // wall segment, 1-2 cells thick
        int len = uni(span / 6, span / 2), thick = uni(1, 2);
        if (uni(0, 1) == 0) {
          int r = uni(0, cfg.rows - thick), c = uni(0, cfg.cols - len);
          detail::fill_rect(grid, r, c, r + thick - 1, c + len - 1, m);
        } else {
          int r = uni(0, cfg.rows - len), c = uni(0, cfg.cols - thick);
          detail::fill_rect(grid, r, c, r + len - 1, c + thick - 1, m);
        }
        break;
      }
      default: {  // filled blob: rectangle or disc
        if (uni(0, 1) == 0) {
          int h = uni(2, span / 6), w = uni(2, span / 6);
          int r = uni(0, cfg.rows - h), c = uni(0, cfg.cols - w);
          detail::fill_rect(grid, r, c, r + h - 1, c + w - 1, m);
        } else {
          int rad = uni(1, std::max(1, span / 12));
          int cr = uni(0, cfg.rows - 1), cc = uni(0, cfg.cols - 1);
          for (int r = cr - rad; r <= cr + rad; ++r) {
            for (int c = cc - rad; c <= cc + rad; ++c) {
              if ((r - cr) * (r - cr) + (c - cc) * (c - cc) <= rad * rad) detail::fill_rect(grid, r, c, r, c, m);
            }
          }
        }
        break;
      }
    }
  }
  detail::carve_corridors(grid);
  return grid;
}

/// Top-down RGB rendering with per-scene palette and texture jitter.
/// Floors are always light and obstacles dark so geometry, not hue, carries the signal.
inline Image render_scene(const OccupancyGrid& grid, std::uint64_t style_seed) {
  std::mt19937_64 rng(mix_seed(style_seed ^ mix_seed(grid.seed)));
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  auto palette = [&](double lum_lo, double lum_hi) {
    double lum = lum_lo + (lum_hi - lum_lo) * u01(rng);
    std::array<double, 3> rgb{};
    for (auto& ch : rgb) ch = std::clamp(lum + 0.12 * (u01(rng) - 0.5), 0.0, 1.0);
    return rgb;
  };
  const auto floor = palette(0.62, 0.85);
  const auto wall = palette(0.12, 0.32);
  const double texture = 0.03 + 0.04 * u01(rng);

  Image img(3, grid.rows, grid.cols);
  for (int r = 0; r < grid.rows; ++r) {
    for (int c = 0; c < grid.cols; ++c) {
      const auto& base = grid.blocked({r, c}) ? wall : floor;
      double jitter = texture * (2.0 * u01(rng) - 1.0);
      for (int ch = 0; ch < 3; ++ch) img(ch, r, c) = static_cast<float>(std::clamp(base[ch] + jitter, 0.0, 1.0));
    }
  }
  return img;
}

inline double luminance(const Image& img, int r, int c) {
  return 0.299 * img(0, r, c) + 0.587 * img(1, r, c) + 0.114 * img(2, r, c);
}

}  // namespace trajdiff

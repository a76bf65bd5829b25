#pragma once

// A* over 8-connected per-cell cost fields. Entering cell c costs
// step_len * (1 + cost[c]) with step_len 1 (axial) or sqrt(2) (diagonal).

#include <cmath>
#include <deque>
#include <limits>
#include <numbers>
#include <queue>
#include <tuple>
#include <vector>

#include "trajdiff/error.hpp"
#include "trajdiff/grid.hpp"

namespace trajdiff {

inline constexpr double kInf = std::numeric_limits<double>::infinity();

struct CostField {
  int rows = 0;
  int cols = 0;
  std::vector<double> costs;  // >= 0, or +inf for blocked

  CostField() = default;
  CostField(int r, int c, double fill = 0.0) : rows(r), cols(c), costs(static_cast<std::size_t>(r) * c, fill) {}

  bool in_bounds(Pixel p) const { return p.row >= 0 && p.row < rows && p.col >= 0 && p.col < cols; }
  std::size_t index(Pixel p) const { return static_cast<std::size_t>(p.row) * cols + p.col; }
  double& at(Pixel p) { return costs[index(p)]; }
  double at(Pixel p) const { return costs[index(p)]; }
  bool passable(Pixel p) const { return std::isfinite(at(p)); }
};

struct PlanResult {
  PixelPath path;
  double cost = 0.0;
  std::size_t expanded = 0;
};

inline double step_length(int drow, int dcol) { return (drow != 0 && dcol != 0) ? std::numbers::sqrt2 : 1.0; }

inline double octile_distance(Pixel a, Pixel b) {
  double dr = std::abs(a.row - b.row);
  double dc = std::abs(a.col - b.col);
  return std::max(dr, dc) + (std::numbers::sqrt2 - 1.0) * std::min(dr, dc);
}

/// Cost of walking `path` on `field`, accumulated from the start in path order.
inline double path_cost(const CostField& field, const PixelPath& path) {
  double g = 0.0;
  for (std::size_t i = 1; i < path.size(); ++i) {
    g += step_length(path[i].row - path[i - 1].row, path[i].col - path[i - 1].col) * (1.0 + field.at(path[i]));
  }
  return g;
}

/// Minimal-cost path. Open-list ties resolve by smaller heuristic, then by
/// smaller row-major index, so output is a pure function of the inputs.
inline PlanResult astar(const CostField& field, Pixel start, Pixel goal) {
  if (!field.in_bounds(start) || !field.in_bounds(goal)) throw InvalidArgument("astar: endpoint out of bounds");
  if (!field.passable(start) || !field.passable(goal)) throw UnreachableGoal("astar: endpoint on a blocked cell");

  const std::size_t n = field.costs.size();
  std::vector<double> g(n, kInf);
  std::vector<int> parent(n, -1);
  std::vector<std::uint8_t> closed(n, 0);

  using Entry = std::tuple<double, double, int>;  // f, h, index
  std::priority_queue<Entry, std::vector<Entry>, std::greater<>> open;

  const int start_idx = static_cast<int>(field.index(start));
  const int goal_idx = static_cast<int>(field.index(goal));
  g[start_idx] = 0.0;
  double h0 = octile_distance(start, goal);
  open.emplace(h0, h0, start_idx);

  PlanResult result;
  while (!open.empty()) {
    auto [f, h, idx] = open.top();
    open.pop();
    if (closed[idx]) continue;
    if (f > g[idx] + h) continue;  // stale entry
    closed[idx] = 1;
    ++result.expanded;
    if (idx == goal_idx) break;
    Pixel p{idx / field.cols, idx % field.cols};
    for (int k = 0; k < 8; ++k) {
      Pixel q{p.row + kNeighbourRow[k], p.col + kNeighbourCol[k]};
      if (!field.in_bounds(q) || !field.passable(q)) continue;
      int qi = static_cast<int>(field.index(q));
      double cand = g[idx] + step_length(kNeighbourRow[k], kNeighbourCol[k]) * (1.0 + field.costs[qi]);
      if (cand < g[qi]) {
        g[qi] = cand;
        parent[qi] = idx;
        closed[qi] = 0;
        double hq = octile_distance(q, goal);
        open.emplace(cand + hq, hq, qi);
      }
    }
  }

  if (!closed[goal_idx]) throw UnreachableGoal("astar: goal unreachable");
  for (int cur = goal_idx; cur >= 0; cur = parent[cur]) {
    result.path.push_back({cur / field.cols, cur % field.cols});
    if (cur == start_idx) break;
  }
  std::reverse(result.path.begin(), result.path.end());
  result.cost = g[goal_idx];
  return result;
}

/// Blocked cells become +inf; free cells within Chebyshev distance d <= inflation_px
/// of an obstacle get penalty * (1 - d / (inflation_px + 1)).
inline CostField grid_to_costfield(const OccupancyGrid& grid, int inflation_px, double inflation_penalty) {
  if (inflation_px < 0) throw InvalidArgument("inflation_px must be >= 0");
  CostField field(grid.rows, grid.cols, 0.0);
  std::vector<int> dist(grid.cells.size(), -1);
  std::deque<int> queue;
  for (std::size_t i = 0; i < grid.cells.size(); ++i) {
    if (grid.cells[i]) {
      field.costs[i] = kInf;
      dist[i] = 0;
      queue.push_back(static_cast<int>(i));
    }
  }
  if (inflation_px == 0) return field;
  // Multi-source BFS over 8 neighbours yields exact Chebyshev distance.
  while (!queue.empty()) {
    int cur = queue.front();
    queue.pop_front();
    if (dist[cur] >= inflation_px) continue;
    Pixel p{cur / grid.cols, cur % grid.cols};
    for (int k = 0; k < 8; ++k) {
      Pixel q{p.row + kNeighbourRow[k], p.col + kNeighbourCol[k]};
      if (!grid.in_bounds(q)) continue;
      std::size_t qi = grid.index(q);
      if (dist[qi] >= 0) continue;
      dist[qi] = dist[cur] + 1;
      queue.push_back(static_cast<int>(qi));
    }
  }
  for (std::size_t i = 0; i < dist.size(); ++i) {
    if (dist[i] > 0) field.costs[i] = inflation_penalty * (1.0 - double(dist[i]) / (inflation_px + 1));
  }
  return field;
}

}  // namespace trajdiff

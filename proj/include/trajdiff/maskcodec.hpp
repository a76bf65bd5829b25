#pragma once

// Three-channel trajectory masks: channel 0 start blob, channel 1 goal blob,
// channel 2 rasterized path. Values live in [0, 1].

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <vector>

#include "trajdiff/error.hpp"
#include "trajdiff/grid.hpp"
#include "trajdiff/oracle.hpp"
#include "trajdiff/tensor.hpp"

namespace trajdiff {

inline constexpr int kStartChannel = 0;
inline constexpr int kGoalChannel = 1;
inline constexpr int kPathChannel = 2;

inline constexpr double kEndpointSigma = 1.5;
inline constexpr double kPathSigma = 0.5;
inline constexpr double kDecodeEpsilon = 1e-3;
inline constexpr double kDecodeOffMaskWeight = 10.0;

struct Resolution {
  int rows = 0;
  int cols = 0;
};

namespace detail {

inline void stamp_blob(std::span<float> plane, int rows, int cols, Pixel centre, double sigma) {
  const int radius = static_cast<int>(std::ceil(4.0 * sigma));
  const double inv = 1.0 / (2.0 * sigma * sigma);
  for (int r = std::max(0, centre.row - radius); r <= std::min(rows - 1, centre.row + radius); ++r) {
    for (int c = std::max(0, centre.col - radius); c <= std::min(cols - 1, centre.col + radius); ++c) {
      double dr = r - centre.row, dc = c - centre.col;
      plane[static_cast<std::size_t>(r) * cols + c] = static_cast<float>(std::exp(-(dr * dr + dc * dc) * inv));
    }
  }
}

/// Bresenham segment, inclusive of both ends.
inline void append_line(PixelPath& out, Pixel a, Pixel b) {
  int dr = std::abs(b.row - a.row), dc = std::abs(b.col - a.col);
  int sr = a.row < b.row ? 1 : -1, sc = a.col < b.col ? 1 : -1;
  int err = dc - dr;
  Pixel p = a;
  while (true) {
    if (out.empty() || out.back() != p) out.push_back(p);
    if (p == b) break;
    int e2 = 2 * err;
    if (e2 > -dr) {
      err -= dr;
      p.col += sc;
    }
    if (e2 < dc) {
      err += dc;
      p.row += sr;
    }
  }
}

inline std::vector<double> gaussian_kernel(double sigma) {
  const int radius = static_cast<int>(std::ceil(4.0 * sigma));
  std::vector<double> k(2 * radius + 1);
  double sum = 0.0;
  for (int i = -radius; i <= radius; ++i) sum += k[i + radius] = std::exp(-(i * i) / (2.0 * sigma * sigma));
  for (auto& v : k) v /= sum;
  return k;
}

inline std::vector<double> separable_blur(const std::vector<double>& in, int rows, int cols, double sigma) {
  const auto k = gaussian_kernel(sigma);
  const int radius = static_cast<int>(k.size() / 2);
  std::vector<double> tmp(in.size(), 0.0), out(in.size(), 0.0);
  for (int r = 0; r < rows; ++r) {
    for (int c = 0; c < cols; ++c) {
      double v = in[static_cast<std::size_t>(r) * cols + c];
      if (v == 0.0) continue;
      for (int d = -radius; d <= radius; ++d) {
        int cc = c + d;
        if (cc >= 0 && cc < cols) tmp[static_cast<std::size_t>(r) * cols + cc] += v * k[d + radius];
      }
    }
  }
  for (int r = 0; r < rows; ++r) {
    for (int c = 0; c < cols; ++c) {
      double v = tmp[static_cast<std::size_t>(r) * cols + c];
      if (v == 0.0) continue;
      for (int d = -radius; d <= radius; ++d) {
        int rr = r + d;
        if (rr >= 0 && rr < rows) out[static_cast<std::size_t>(rr) * cols + c] += v * k[d + radius];
      }
    }
  }
  return out;
}

inline Pixel argmax_pixel(std::span<const float> plane, int cols, float* peak = nullptr) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < plane.size(); ++i) {
    if (plane[i] > plane[best]) best = i;
  }
  if (peak) *peak = plane.empty() ? 0.0f : plane[best];
  return {static_cast<int>(best / cols), static_cast<int>(best % cols)};
}

}  // namespace detail

/// Scales a coarse path by an integer factor (each point maps to the centre of
/// its factor x factor block) and joins the points with Bresenham segments.
inline PixelPath upscale_path(const PixelPath& path, int factor) {
  detail::require(factor >= 1, "upscale_path: factor must be >= 1");
  PixelPath out;
  auto scale = [&](Pixel p) { return Pixel{p.row * factor + factor / 2, p.col * factor + factor / 2}; };
  for (std::size_t i = 0; i < path.size(); ++i) {
    if (i == 0) {
      out.push_back(scale(path[0]));
    } else {
      detail::append_line(out, scale(path[i - 1]), scale(path[i]));
    }
  }
  return out;
}

/// Gaussian endpoint blobs plus blurred polyline, each channel peaking at 1.
inline Mask encode_mask(const PixelPath& path, Resolution res) {
  if (path.empty()) throw InvalidArgument("encode_mask: empty path");
  for (const auto& p : path) {
    if (p.row < 0 || p.row >= res.rows || p.col < 0 || p.col >= res.cols) {
      throw InvalidArgument("encode_mask: path point out of bounds");
    }
  }
  Mask mask(3, res.rows, res.cols);
  detail::stamp_blob(mask.channel(kStartChannel), res.rows, res.cols, path.front(), kEndpointSigma);
  detail::stamp_blob(mask.channel(kGoalChannel), res.rows, res.cols, path.back(), kEndpointSigma);

  PixelPath dense;
  dense.push_back(path.front());
  for (std::size_t i = 1; i < path.size(); ++i) detail::append_line(dense, path[i - 1], path[i]);
  std::vector<double> line(mask.plane(), 0.0);
  for (const auto& p : dense) line[static_cast<std::size_t>(p.row) * res.cols + p.col] = 1.0;
  auto blurred = detail::separable_blur(line, res.rows, res.cols, kPathSigma);
  double peak = *std::max_element(blurred.begin(), blurred.end());
  auto out = mask.channel(kPathChannel);
  for (std::size_t i = 0; i < blurred.size(); ++i) {
    out[i] = static_cast<float>(std::clamp(blurred[i] / peak, 0.0, 1.0));
  }
  return mask;
}

/// Area-average reduction by integer factors, then per-channel peak renormalisation.
inline Mask downsample_mask(const Mask& mask, Resolution target) {
  if (target.rows <= 0 || target.cols <= 0 || target.rows > mask.height || target.cols > mask.width ||
      mask.height % target.rows != 0 || mask.width % target.cols != 0) {
    throw InvalidArgument("downsample_mask: target must divide the source resolution");
  }
  const int fr = mask.height / target.rows;
  const int fc = mask.width / target.cols;
  Mask out(mask.channels, target.rows, target.cols);
  const double norm = 1.0 / (fr * fc);
  for (int ch = 0; ch < mask.channels; ++ch) {
    std::vector<double> acc(out.plane(), 0.0);
    for (int r = 0; r < mask.height; ++r) {
      for (int c = 0; c < mask.width; ++c) {
        acc[static_cast<std::size_t>(r / fr) * target.cols + c / fc] += mask(ch, r, c);
      }
    }
    double peak = 0.0;
    for (auto& v : acc) peak = std::max(peak, v *= norm);
    auto dst = out.channel(ch);
    for (std::size_t i = 0; i < acc.size(); ++i) dst[i] = peak > 0.0 ? static_cast<float>(acc[i] / peak) : 0.0f;
  }
  return out;
}

/// Endpoints are the channel argmaxes (first in row-major order on ties).
inline std::pair<Pixel, Pixel> mask_endpoints(const Mask& mask) {
  if (mask.channels != 3) throw InvalidArgument("mask must have 3 channels");
  float ps = 0, pg = 0;
  Pixel s = detail::argmax_pixel(mask.channel(kStartChannel), mask.width, &ps);
  Pixel g = detail::argmax_pixel(mask.channel(kGoalChannel), mask.width, &pg);
  if (!(ps > 0.0f)) throw NoEndpoint("decode_path: start channel has no positive maximum");
  if (!(pg > 0.0f)) throw NoEndpoint("decode_path: goal channel has no positive maximum");
  return {s, g};
}

/// Ordered path from a (possibly noisy) mask: A* from start to goal over the
/// field w * (1 - clamp(trajectory, 0, 1)) + eps; blocked grid cells are
/// impassable. With w = 1 a detour longer than twice its chord is cheaper to
/// cut than to follow.
inline PixelPath decode_path(const Mask& mask, const OccupancyGrid* grid = nullptr) {
  auto [start, goal] = mask_endpoints(mask);
  CostField field(mask.height, mask.width);
  auto traj = mask.channel(kPathChannel);
  for (std::size_t i = 0; i < traj.size(); ++i) {
    field.costs[i] = kDecodeOffMaskWeight * (1.0 - std::clamp(static_cast<double>(traj[i]), 0.0, 1.0)) + kDecodeEpsilon;
  }
  if (grid) {
    if (grid->rows != mask.height || grid->cols != mask.width) {
      throw InvalidArgument("decode_path: grid and mask resolutions differ");
    }
    for (std::size_t i = 0; i < grid->cells.size(); ++i) {
      if (grid->cells[i]) field.costs[i] = kInf;
    }
  }
  return astar(field, start, goal).path;
}

/// Symmetric mean nearest-point distance between two paths, in pixels.
inline double mean_path_deviation(const PixelPath& a, const PixelPath& b) {
  if (a.empty() || b.empty()) return std::numeric_limits<double>::infinity();
  auto one_way = [](const PixelPath& from, const PixelPath& to) {
    double total = 0.0;
    for (const auto& p : from) {
      double best = std::numeric_limits<double>::infinity();
      for (const auto& q : to) best = std::min(best, std::hypot(p.row - q.row, p.col - q.col));
      total += best;
    }
    return total / from.size();
  };
  return 0.5 * (one_way(a, b) + one_way(b, a));
}

}  // namespace trajdiff

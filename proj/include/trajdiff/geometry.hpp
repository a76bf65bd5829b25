#pragma once

// Pinhole geometry, goal inference from detections, pixel path to world
// waypoints and the safety stop.
//
// Image coordinates are (u, v) = (column, row) with the origin at the top-left
// pixel centre. Everything that speaks Pixel{row, col} converts here.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Geometry>
#include <nlohmann/json.hpp>

#include "trajdiff/dataset.hpp"
#include "trajdiff/error.hpp"
#include "trajdiff/grid.hpp"

namespace trajdiff {

using Vec3 = Eigen::Vector3d;
using Pose = Eigen::Isometry3d;  // camera-to-world

struct CameraIntrinsics {
  double fx = 50.0;
  double fy = 50.0;
  double cx = 31.5;
  double cy = 31.5;
  int width = 64;
  int height = 64;

  void validate() const {
    detail::require(fx > 0 && fy > 0, "focal lengths must be positive");
    detail::require(width > 0 && height > 0, "image size must be positive");
    detail::require(cx >= 0 && cx <= width - 1 && cy >= 0 && cy <= height - 1,
                    "principal point must lie inside the image");
  }
};

inline void to_json(nlohmann::json& j, const CameraIntrinsics& k) {
  j = {{"fx", k.fx}, {"fy", k.fy}, {"cx", k.cx}, {"cy", k.cy}, {"width", k.width}, {"height", k.height}};
}

inline void from_json(const nlohmann::json& j, CameraIntrinsics& k) {
  j.at("fx").get_to(k.fx);
  j.at("fy").get_to(k.fy);
  j.at("cx").get_to(k.cx);
  j.at("cy").get_to(k.cy);
  j.at("width").get_to(k.width);
  j.at("height").get_to(k.height);
}

inline CameraIntrinsics load_intrinsics(const std::filesystem::path& path) {
  CameraIntrinsics k;
  try {
    k = nlohmann::json::parse(read_file(path)).get<CameraIntrinsics>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("bad intrinsics file " + path.string() + ": " + e.what());
  }
  k.validate();
  return k;
}

struct ImagePoint {
  double u = 0.0;  // column
  double v = 0.0;  // row
};

inline Pixel to_pixel(ImagePoint p) {
  return {static_cast<int>(std::lround(p.v)), static_cast<int>(std::lround(p.u))};
}

inline ImagePoint to_image_point(Pixel p) { return {double(p.col), double(p.row)}; }

struct Detection {
  double x1 = 0, y1 = 0, x2 = 0, y2 = 0;  // bbox corners in (u, v)
  double confidence = 0.0;
  std::string label = "person";

  void validate(const CameraIntrinsics* k = nullptr) const {
    detail::require(x1 < x2 && y1 < y2, "detection box must have x1 < x2 and y1 < y2");
    detail::require(confidence >= 0.0 && confidence <= 1.0, "detection confidence must lie in [0, 1]");
    if (k) {
      detail::require(x1 >= -0.5 && y1 >= -0.5 && x2 <= k->width - 0.5 && y2 <= k->height - 0.5,
                      "detection box must lie inside the image");
    }
  }

  ImagePoint centre() const { return {(x1 + x2) / 2.0, (y1 + y2) / 2.0}; }
};

enum class GoalPolicy { HighestConfidence, LargestBox };

/// Goal (u, v) = centre of the selected box, rounded to the nearest pixel.
/// Ties keep the earliest detection.
inline ImagePoint infer_goal(const std::vector<Detection>& dets, GoalPolicy policy = GoalPolicy::HighestConfidence) {
  if (dets.empty()) throw NoHuman("no detections to infer a goal from");
  std::size_t best = 0;
  auto score = [policy](const Detection& d) {
    return policy == GoalPolicy::HighestConfidence ? d.confidence : (d.x2 - d.x1) * (d.y2 - d.y1);
  };
  for (std::size_t i = 0; i < dets.size(); ++i) {
    dets[i].validate();
    if (score(dets[i]) > score(dets[best])) best = i;
  }
  ImagePoint c = dets[best].centre();
  return {std::round(c.u), std::round(c.v)};
}

/// Pinhole back-projection into the camera frame.
inline Vec3 unproject(ImagePoint px, double depth, const CameraIntrinsics& k) {
  if (!(depth > 0.0) || !std::isfinite(depth)) throw InvalidArgument("unproject: depth must be positive");
  return {(px.u - k.cx) / k.fx * depth, (px.v - k.cy) / k.fy * depth, depth};
}

inline ImagePoint project(const Vec3& cam, const CameraIntrinsics& k) {
  if (!(cam.z() > 0.0)) throw InvalidArgument("project: point must lie in front of the camera");
  return {k.fx * cam.x() / cam.z() + k.cx, k.fy * cam.y() / cam.z() + k.cy};
}

struct DepthMap {
  int width = 0;
  int height = 0;
  std::vector<float> data;  // row-major; non-positive or non-finite means missing

  DepthMap() = default;
  DepthMap(int w, int h, float fill) : width(w), height(h), data(static_cast<std::size_t>(w) * h, fill) {}

  float at(int row, int col) const { return data[static_cast<std::size_t>(row) * width + col]; }
  float& at(int row, int col) { return data[static_cast<std::size_t>(row) * width + col]; }
  bool valid(int row, int col) const {
    float d = at(row, col);
    return std::isfinite(d) && d > 0.0f;
  }
};

/// Depth at a pixel, or the nearest valid sample within `radius` (Euclidean,
/// first in row-major order on ties).
inline std::optional<double> sample_depth(const DepthMap& depth, Pixel p, int radius) {
  if (p.row < 0 || p.col < 0 || p.row >= depth.height || p.col >= depth.width) return std::nullopt;
  if (depth.valid(p.row, p.col)) return depth.at(p.row, p.col);
  int best_d2 = std::numeric_limits<int>::max();
  std::optional<double> out;
  for (int r = p.row - radius; r <= p.row + radius; ++r) {
    for (int c = p.col - radius; c <= p.col + radius; ++c) {
      if (r < 0 || c < 0 || r >= depth.height || c >= depth.width || !depth.valid(r, c)) continue;
      int d2 = (r - p.row) * (r - p.row) + (c - p.col) * (c - p.col);
      if (d2 <= radius * radius && d2 < best_d2) {
        best_d2 = d2;
        out = depth.at(r, c);
      }
    }
  }
  return out;
}

struct Waypoint3D {
  Vec3 position = Vec3::Zero();  // world frame, metres
  Pixel source_px;
  double depth = 0.0;
};

struct WaypointOptions {
  double min_spacing = 0.2;
  int hole_radius = 3;
};

/// Unprojects every path pixel, moves it to the world frame and keeps points
/// at least `min_spacing` apart. First and last surviving points are kept.
inline std::vector<Waypoint3D> path_to_waypoints(const PixelPath& path, const DepthMap& depth,
                                                 const CameraIntrinsics& k, const Pose& pose,
                                                 const WaypointOptions& opt = {}) {
  std::vector<Waypoint3D> dense;
  dense.reserve(path.size());
  for (Pixel p : path) {
    auto d = sample_depth(depth, p, opt.hole_radius);
    if (!d) continue;
    Waypoint3D w;
    w.depth = *d;
    w.source_px = p;
    w.position = pose * unproject(to_image_point(p), *d, k);
    dense.push_back(w);
  }
  if (dense.empty()) throw EmptyPath("no valid depth along the path");

  std::vector<Waypoint3D> out{dense.front()};
  for (std::size_t i = 1; i + 1 < dense.size(); ++i) {
    if ((dense[i].position - out.back().position).norm() >= opt.min_spacing - 1e-9) out.push_back(dense[i]);
  }
  if (dense.size() > 1) out.push_back(dense.back());
  return out;
}

/// Longest prefix whose waypoints all keep `margin` from the human. If the
/// first waypoint already violates it, a single hold waypoint is returned.
inline std::vector<Waypoint3D> apply_safety_stop(const std::vector<Waypoint3D>& wps, const Vec3& human,
                                                 double margin = 1.0) {
  detail::require(margin > 0.0, "safety margin must be positive");
  if (wps.empty()) return {};
  std::size_t keep = 0;
  while (keep < wps.size() && (wps[keep].position - human).norm() >= margin) ++keep;
  if (keep == 0) return {wps.front()};
  return {wps.begin(), wps.begin() + static_cast<std::ptrdiff_t>(keep)};
}

/// Overhead camera looking straight down from `height` above the arena
/// centre; image rows grow toward -y and columns toward +x.
struct OverheadCamera {
  CameraIntrinsics intrinsics;
  double height = 10.0;
  Pose pose = Pose::Identity();

  static OverheadCamera for_grid(const OccupancyGrid& grid, double height = 10.0) {
    OverheadCamera cam;
    cam.height = height;
    cam.intrinsics.width = grid.cols;
    cam.intrinsics.height = grid.rows;
    cam.intrinsics.cx = (grid.cols - 1) / 2.0;
    cam.intrinsics.cy = (grid.rows - 1) / 2.0;
    cam.intrinsics.fx = height / grid.cell_size;
    cam.intrinsics.fy = height / grid.cell_size;
    Eigen::Matrix3d r = Eigen::Vector3d(1.0, -1.0, -1.0).asDiagonal();
    cam.pose.linear() = r;
    cam.pose.translation() = Vec3(grid.cols * grid.cell_size / 2.0, -grid.rows * grid.cell_size / 2.0, height);
    return cam;
  }

  ImagePoint world_to_image(const Vec3& world) const { return project(pose.inverse() * world, intrinsics); }
  Vec3 image_to_world(ImagePoint px, double depth) const { return pose * unproject(px, depth, intrinsics); }
};

/// World position of a cell centre on the floor (z = 0).
inline Vec3 cell_centre(const OccupancyGrid& grid, Pixel p) {
  return {(p.col + 0.5) * grid.cell_size, -(p.row + 0.5) * grid.cell_size, 0.0};
}

inline Pixel world_to_cell(const OccupancyGrid& grid, const Vec3& w) {
  return {static_cast<int>(std::floor(-w.y() / grid.cell_size)), static_cast<int>(std::floor(w.x() / grid.cell_size))};
}

}  // namespace trajdiff

#pragma once

#include <algorithm>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "trajdiff/error.hpp"

namespace trajdiff {

/// Dense channel-major (C, H, W) raster. All image-like data in the library uses it.
template <typename T>
struct Tensor3 {
  int channels = 0;
  int height = 0;
  int width = 0;
  std::vector<T> data;

  Tensor3() = default;
  Tensor3(int c, int h, int w, T fill = T(0))
      : channels(c), height(h), width(w), data(static_cast<std::size_t>(c) * h * w, fill) {}

  std::size_t plane() const { return static_cast<std::size_t>(height) * width; }
  std::size_t size() const { return data.size(); }

  T& operator()(int c, int r, int col) { return data[c * plane() + static_cast<std::size_t>(r) * width + col]; }
  const T& operator()(int c, int r, int col) const {
    return data[c * plane() + static_cast<std::size_t>(r) * width + col];
  }

  std::span<T> channel(int c) { return {data.data() + c * plane(), plane()}; }
  std::span<const T> channel(int c) const { return {data.data() + c * plane(), plane()}; }

  bool same_shape(const Tensor3& o) const {
    return channels == o.channels && height == o.height && width == o.width;
  }

  template <typename U>
  Tensor3<U> cast() const {
    Tensor3<U> out(channels, height, width);
    std::transform(data.begin(), data.end(), out.data.begin(), [](T v) { return static_cast<U>(v); });
    return out;
  }

  friend bool operator==(const Tensor3& a, const Tensor3& b) {
    return a.same_shape(b) && a.data == b.data;
  }
};

template <typename T>
void require_same_shape(const Tensor3<T>& a, const Tensor3<T>& b, const char* what) {
  if (!a.same_shape(b)) {
    throw InvalidArgument(std::string(what) + ": shape mismatch (" + std::to_string(a.channels) + "," +
                          std::to_string(a.height) + "," + std::to_string(a.width) + ") vs (" +
                          std::to_string(b.channels) + "," + std::to_string(b.height) + "," +
                          std::to_string(b.width) + ")");
  }
}

using Mask = Tensor3<float>;
using Image = Tensor3<float>;

}  // namespace trajdiff

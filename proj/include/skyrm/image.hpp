#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "skyrm/error.hpp"

namespace skyrm {

/// Row-major 2-D array.
template <typename T>
struct Grid {
  int h = 0;
  int w = 0;
  std::vector<T> data;

  Grid() = default;
  Grid(int rows, int cols, T fill = T{}) : h(rows), w(cols), data(static_cast<std::size_t>(rows) * cols, fill) {
    if (rows < 1 || cols < 1)
      throw ShapeError("grid dims must be >= 1, got " + std::to_string(rows) + "x" + std::to_string(cols));
  }

  std::size_t size() const noexcept { return data.size(); }
  bool empty() const noexcept { return data.empty(); }
  T& at(int y, int x) noexcept { return data[static_cast<std::size_t>(y) * w + x]; }
  const T& at(int y, int x) const noexcept { return data[static_cast<std::size_t>(y) * w + x]; }
  template <typename U>
  bool same_dims(const Grid<U>& o) const noexcept {
    return h == o.h && w == o.w;
  }

  friend bool operator==(const Grid&, const Grid&) = default;
};

/// Greyscale intensities in [0, 1].
using Image = Grid<float>;

/// Per-pixel class indices.
using ClassMask = Grid<std::uint8_t>;

// Global class order, shared by one-hot encoding, MCC and mask files.
inline constexpr std::uint8_t kBackground = 0;
inline constexpr std::uint8_t kSkyrmion = 1;
inline constexpr std::uint8_t kDefect = 2;

inline std::string dims_str(int h, int w) { return std::to_string(h) + "x" + std::to_string(w); }

}  // namespace skyrm

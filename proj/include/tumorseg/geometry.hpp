#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <string>
#include <type_traits>
#include <vector>

#include "tumorseg/errors.hpp"

namespace tumorseg {

/// Axis-aligned box in (row, col) order, half-open: [r0, r1) x [c0, c1).
template <typename T>
struct BasicBox {
  static_assert(std::is_arithmetic_v<T>);
  T r0{}, c0{}, r1{}, c1{};

  constexpr T height() const noexcept { return r1 - r0; }
  constexpr T width() const noexcept { return c1 - c0; }
  constexpr T area() const noexcept { return is_empty() ? T{} : height() * width(); }
  constexpr bool is_empty() const noexcept { return !(r0 < r1 && c0 < c1); }

  template <typename U>
  constexpr BasicBox<U> cast() const noexcept {
    return {static_cast<U>(r0), static_cast<U>(c0), static_cast<U>(r1), static_cast<U>(c1)};
  }

  friend constexpr bool operator==(const BasicBox&, const BasicBox&) = default;
};

using Box = BasicBox<int>;
using BoxF = BasicBox<float>;

template <typename T>
constexpr BasicBox<T> intersection(const BasicBox<T>& a, const BasicBox<T>& b) noexcept {
  return {std::max(a.r0, b.r0), std::max(a.c0, b.c0), std::min(a.r1, b.r1), std::min(a.c1, b.c1)};
}

template <typename T>
std::string to_string(const BasicBox<T>& b) {
  return "(" + std::to_string(b.r0) + "," + std::to_string(b.c0) + "," + std::to_string(b.r1) +
         "," + std::to_string(b.c1) + ")";
}

/// Intersection area over union area. Throws ValidationError on a zero-area box.
template <typename T>
double box_iou(const BasicBox<T>& a, const BasicBox<T>& b) {
  if (a.is_empty() || b.is_empty())
    throw ValidationError("box_iou: degenerate box " + to_string(a.is_empty() ? a : b));
  const double inter = static_cast<double>(intersection(a, b).area());
  const double uni = static_cast<double>(a.area()) + static_cast<double>(b.area()) - inter;
  return inter / uni;
}

/// Row-major binary grid; any non-zero byte is foreground.
struct BinaryMask {
  int rows = 0;
  int cols = 0;
  std::vector<std::uint8_t> data;

  BinaryMask() = default;
  BinaryMask(int r, int c) : rows(r), cols(c), data(static_cast<std::size_t>(r) * c, 0) {}

  std::uint8_t& at(int r, int c) { return data[static_cast<std::size_t>(r) * cols + c]; }
  std::uint8_t at(int r, int c) const { return data[static_cast<std::size_t>(r) * cols + c]; }
  bool same_shape(const BinaryMask& o) const noexcept { return rows == o.rows && cols == o.cols; }

  std::size_t count() const noexcept {
    return static_cast<std::size_t>(std::count_if(data.begin(), data.end(), [](auto v) { return v != 0; }));
  }
  bool empty() const noexcept { return count() == 0; }

  friend bool operator==(const BinaryMask& a, const BinaryMask& b) {
    if (!a.same_shape(b)) return false;
    for (std::size_t i = 0; i < a.data.size(); ++i)
      if ((a.data[i] != 0) != (b.data[i] != 0)) return false;
    return true;
  }
};

/// Tight half-open bounding box of the foreground pixels.
inline Box derive_box_from_mask(const BinaryMask& mask) {
  int r0 = mask.rows, c0 = mask.cols, r1 = -1, c1 = -1;
  for (int r = 0; r < mask.rows; ++r) {
    const auto* row = mask.data.data() + static_cast<std::size_t>(r) * mask.cols;
    for (int c = 0; c < mask.cols; ++c) {
      if (!row[c]) continue;
      r0 = std::min(r0, r);
      r1 = std::max(r1, r);
      c0 = std::min(c0, c);
      c1 = std::max(c1, c);
    }
  }
  if (r1 < 0) throw ValidationError("derive_box_from_mask: mask has no foreground pixels");
  return {r0, c0, r1 + 1, c1 + 1};
}

/// Paints the (clipped) box into a rows x cols grid.
inline BinaryMask rasterize_box(const Box& box, int rows, int cols) {
  BinaryMask m(rows, cols);
  const Box clip = intersection(box, Box{0, 0, rows, cols});
  for (int r = clip.r0; r < clip.r1; ++r)
    for (int c = clip.c0; c < clip.c1; ++c) m.at(r, c) = 1;
  return m;
}

}  // namespace tumorseg

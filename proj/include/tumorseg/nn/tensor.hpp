#pragma once

#include <cstddef>
#include <functional>
#include <numeric>
#include <string>
#include <vector>

#include "tumorseg/errors.hpp"

namespace tumorseg::nn {

/// Dense row-major tensor. Images and feature maps are [C, H, W].
template <typename T>
struct Tensor {
  std::vector<int> shape;
  std::vector<T> data;

  Tensor() = default;
  explicit Tensor(std::vector<int> s, T fill = T{}) : shape(std::move(s)), data(numel_of(shape), fill) {}

  static std::size_t numel_of(const std::vector<int>& s) {
    return std::accumulate(s.begin(), s.end(), std::size_t{1},
                           [](std::size_t a, int d) { return a * static_cast<std::size_t>(d); });
  }

  std::size_t numel() const noexcept { return data.size(); }
  int dim(std::size_t i) const { return shape.at(i); }
  T* ptr() noexcept { return data.data(); }
  const T* ptr() const noexcept { return data.data(); }
  T& operator[](std::size_t i) { return data[i]; }
  const T& operator[](std::size_t i) const { return data[i]; }

  /// Element (c, y, x) of a rank-3 tensor.
  T& at(int c, int y, int x) { return data[(static_cast<std::size_t>(c) * shape[1] + y) * shape[2] + x]; }
  const T& at(int c, int y, int x) const {
    return data[(static_cast<std::size_t>(c) * shape[1] + y) * shape[2] + x];
  }

  void fill(T v) { std::fill(data.begin(), data.end(), v); }
  Tensor zeros_like() const { return Tensor(shape); }

  friend bool operator==(const Tensor&, const Tensor&) = default;
};

inline std::string shape_string(const std::vector<int>& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) out += (i ? "," : "") + std::to_string(s[i]);
  return out + "]";
}

}  // namespace tumorseg::nn

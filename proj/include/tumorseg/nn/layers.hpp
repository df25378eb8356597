#pragma once

// Forward and backward kernels used by the segmentation network. Templated on
// the scalar type so gradient checks can run in double precision. Backward
// functions accumulate into the gradient buffers they are given.

#include <algorithm>
#include <cmath>
#include <span>
#include <vector>

#include "tumorseg/nn/tensor.hpp"

namespace tumorseg::nn {

/// Stride-1 convolution with zero padding. in [C,H,W], weight [O,C,k,k], bias [O].
template <typename T>
Tensor<T> conv2d(const Tensor<T>& in, const Tensor<T>& weight, const Tensor<T>& bias, int pad) {
  const int C = in.dim(0), H = in.dim(1), W = in.dim(2);
  const int O = weight.dim(0), k = weight.dim(2);
  if (weight.dim(1) != C || weight.dim(3) != k || bias.dim(0) != O)
    throw ValidationError("conv2d: weight " + shape_string(weight.shape) + " incompatible with input " +
                          shape_string(in.shape));
  const int Ho = H + 2 * pad - k + 1, Wo = W + 2 * pad - k + 1;
  Tensor<T> out({O, Ho, Wo});
  for (int o = 0; o < O; ++o) {
    T* op = out.ptr() + static_cast<std::size_t>(o) * Ho * Wo;
    std::fill(op, op + static_cast<std::size_t>(Ho) * Wo, bias[o]);
    for (int c = 0; c < C; ++c) {
      const T* ip = in.ptr() + static_cast<std::size_t>(c) * H * W;
      const T* wp = weight.ptr() + (static_cast<std::size_t>(o) * C + c) * k * k;
      for (int ky = 0; ky < k; ++ky) {
        const int y0 = std::max(0, pad - ky), y1 = std::min(Ho, H + pad - ky);
        for (int kx = 0; kx < k; ++kx) {
          const T wv = wp[ky * k + kx];
          const int x0 = std::max(0, pad - kx), x1 = std::min(Wo, W + pad - kx);
          for (int y = y0; y < y1; ++y) {
            T* orow = op + static_cast<std::size_t>(y) * Wo;
            const T* irow = ip + static_cast<std::size_t>(y + ky - pad) * W + (kx - pad);
            for (int x = x0; x < x1; ++x) orow[x] += wv * irow[x];
          }
        }
      }
    }
  }
  return out;
}

/// grad_in may be null when the input gradient is not needed.
template <typename T>
void conv2d_backward(const Tensor<T>& in, const Tensor<T>& weight, const Tensor<T>& grad_out, int pad,
                     Tensor<T>* grad_in, Tensor<T>& grad_weight, Tensor<T>& grad_bias) {
  const int C = in.dim(0), H = in.dim(1), W = in.dim(2);
  const int O = weight.dim(0), k = weight.dim(2);
  const int Ho = grad_out.dim(1), Wo = grad_out.dim(2);
  for (int o = 0; o < O; ++o) {
    const T* gp = grad_out.ptr() + static_cast<std::size_t>(o) * Ho * Wo;
    T gsum{};
    for (std::size_t i = 0; i < static_cast<std::size_t>(Ho) * Wo; ++i) gsum += gp[i];
    grad_bias[o] += gsum;
    for (int c = 0; c < C; ++c) {
      const T* ip = in.ptr() + static_cast<std::size_t>(c) * H * W;
      T* gip = grad_in ? grad_in->ptr() + static_cast<std::size_t>(c) * H * W : nullptr;
      const std::size_t wbase = (static_cast<std::size_t>(o) * C + c) * k * k;
      for (int ky = 0; ky < k; ++ky) {
        const int y0 = std::max(0, pad - ky), y1 = std::min(Ho, H + pad - ky);
        for (int kx = 0; kx < k; ++kx) {
          const int x0 = std::max(0, pad - kx), x1 = std::min(Wo, W + pad - kx);
          const T wv = weight[wbase + ky * k + kx];
          T acc{};
          for (int y = y0; y < y1; ++y) {
            const T* grow = gp + static_cast<std::size_t>(y) * Wo;
            const T* irow = ip + static_cast<std::size_t>(y + ky - pad) * W + (kx - pad);
            for (int x = x0; x < x1; ++x) acc += grow[x] * irow[x];
            if (gip) {
              T* girow = gip + static_cast<std::size_t>(y + ky - pad) * W + (kx - pad);
              for (int x = x0; x < x1; ++x) girow[x] += wv * grow[x];
            }
          }
          grad_weight[wbase + ky * k + kx] += acc;
        }
      }
    }
  }
}

template <typename T>
void relu_inplace(Tensor<T>& t) {
  for (auto& v : t.data) v = v > T{} ? v : T{};
}

/// Zeroes gradient entries where the ReLU output was not positive.
template <typename T>
void relu_backward(const Tensor<T>& out, Tensor<T>& grad) {
  for (std::size_t i = 0; i < grad.numel(); ++i)
    if (!(out[i] > T{})) grad[i] = T{};
}

/// 2x2 max pooling, stride 2. `argmax` receives flat input indices.
template <typename T>
Tensor<T> maxpool2(const Tensor<T>& in, std::vector<std::size_t>& argmax) {
  const int C = in.dim(0), H = in.dim(1), W = in.dim(2);
  const int Ho = H / 2, Wo = W / 2;
  Tensor<T> out({C, Ho, Wo});
  argmax.assign(out.numel(), 0);
  std::size_t oi = 0;
  for (int c = 0; c < C; ++c)
    for (int y = 0; y < Ho; ++y)
      for (int x = 0; x < Wo; ++x, ++oi) {
        std::size_t best = (static_cast<std::size_t>(c) * H + 2 * y) * W + 2 * x;
        for (int dy = 0; dy < 2; ++dy)
          for (int dx = 0; dx < 2; ++dx) {
            const std::size_t idx = (static_cast<std::size_t>(c) * H + 2 * y + dy) * W + 2 * x + dx;
            if (in[idx] > in[best]) best = idx;
          }
        argmax[oi] = best;
        out[oi] = in[best];
      }
  return out;
}

template <typename T>
void maxpool2_backward(const std::vector<std::size_t>& argmax, const Tensor<T>& grad_out, Tensor<T>& grad_in) {
  for (std::size_t i = 0; i < grad_out.numel(); ++i) grad_in[argmax[i]] += grad_out[i];
}

/// y = W x + b with x flattened. weight [M, N], bias [M].
template <typename T>
std::vector<T> linear(std::span<const T> x, const Tensor<T>& weight, const Tensor<T>& bias) {
  const int M = weight.dim(0), N = weight.dim(1);
  if (static_cast<int>(x.size()) != N)
    throw ValidationError("linear: input length " + std::to_string(x.size()) + " vs weight " +
                          shape_string(weight.shape));
  std::vector<T> y(static_cast<std::size_t>(M));
  for (int m = 0; m < M; ++m) {
    const T* wr = weight.ptr() + static_cast<std::size_t>(m) * N;
    T acc = bias[m];
    for (int n = 0; n < N; ++n) acc += wr[n] * x[n];
    y[m] = acc;
  }
  return y;
}

template <typename T>
void linear_backward(std::span<const T> x, const Tensor<T>& weight, std::span<const T> grad_y, std::span<T> grad_x,
                     Tensor<T>& grad_weight, Tensor<T>& grad_bias) {
  const int M = weight.dim(0), N = weight.dim(1);
  for (int m = 0; m < M; ++m) {
    const T g = grad_y[m];
    grad_bias[m] += g;
    if (g == T{}) continue;
    const T* wr = weight.ptr() + static_cast<std::size_t>(m) * N;
    T* gwr = grad_weight.ptr() + static_cast<std::size_t>(m) * N;
    for (int n = 0; n < N; ++n) gwr[n] += g * x[n];
    if (!grad_x.empty())
      for (int n = 0; n < N; ++n) grad_x[n] += g * wr[n];
  }
}

/// Bilinear sampling taps of one point, following the RoIAlign conventions:
/// points more than one cell outside the map contribute nothing, the rest are
/// clamped to the border.
struct BilinearTaps {
  int idx[4] = {0, 0, 0, 0};  // y * W + x
  double w[4] = {0, 0, 0, 0};
  bool valid = false;
};

inline BilinearTaps bilinear_taps(double y, double x, int H, int W) {
  BilinearTaps t;
  if (y < -1.0 || y > H || x < -1.0 || x > W) return t;
  y = std::max(y, 0.0);
  x = std::max(x, 0.0);
  int y_lo = static_cast<int>(y), x_lo = static_cast<int>(x), y_hi, x_hi;
  if (y_lo >= H - 1) {
    y_lo = y_hi = H - 1;
    y = y_lo;
  } else {
    y_hi = y_lo + 1;
  }
  if (x_lo >= W - 1) {
    x_lo = x_hi = W - 1;
    x = x_lo;
  } else {
    x_hi = x_lo + 1;
  }
  const double ly = y - y_lo, lx = x - x_lo, hy = 1.0 - ly, hx = 1.0 - lx;
  t.idx[0] = y_lo * W + x_lo;
  t.idx[1] = y_lo * W + x_hi;
  t.idx[2] = y_hi * W + x_lo;
  t.idx[3] = y_hi * W + x_hi;
  t.w[0] = hy * hx;
  t.w[1] = hy * lx;
  t.w[2] = ly * hx;
  t.w[3] = ly * lx;
  t.valid = true;
  return t;
}

/// Region box in continuous feature-map coordinates (cell edges at integers).
struct RoiBox {
  double y1, x1, y2, x2;
};

/// Sampling plan of one RoI: `samples` taps per output bin, shared by every channel.
struct RoiAlignPlan {
  int out_size = 0;
  int samples = 0;
  std::vector<BilinearTaps> taps;  // out_size * out_size * samples
};

inline RoiAlignPlan roi_align_plan(const RoiBox& box, int H, int W, int out_size, int sampling = 2) {
  RoiAlignPlan plan;
  plan.out_size = out_size;
  plan.samples = sampling * sampling;
  plan.taps.reserve(static_cast<std::size_t>(out_size) * out_size * plan.samples);
  const double bin_h = std::max(box.y2 - box.y1, 1e-3) / out_size;
  const double bin_w = std::max(box.x2 - box.x1, 1e-3) / out_size;
  for (int i = 0; i < out_size; ++i)
    for (int j = 0; j < out_size; ++j)
      for (int sy = 0; sy < sampling; ++sy)
        for (int sx = 0; sx < sampling; ++sx) {
          // Half-pixel shift maps cell edges to sample centres.
          const double y = box.y1 + (i + (sy + 0.5) / sampling) * bin_h - 0.5;
          const double x = box.x1 + (j + (sx + 0.5) / sampling) * bin_w - 0.5;
          plan.taps.push_back(bilinear_taps(y, x, H, W));
        }
  return plan;
}

/// feature [C,H,W] -> [C,S,S], each bin the mean of its sampling points.
template <typename T>
Tensor<T> roi_align(const Tensor<T>& feature, const RoiAlignPlan& plan) {
  const int C = feature.dim(0), H = feature.dim(1), W = feature.dim(2), S = plan.out_size;
  Tensor<T> out({C, S, S});
  const double norm = 1.0 / plan.samples;
  for (int c = 0; c < C; ++c) {
    const T* fp = feature.ptr() + static_cast<std::size_t>(c) * H * W;
    T* op = out.ptr() + static_cast<std::size_t>(c) * S * S;
    for (int b = 0; b < S * S; ++b) {
      double acc = 0;
      for (int s = 0; s < plan.samples; ++s) {
        const auto& t = plan.taps[static_cast<std::size_t>(b) * plan.samples + s];
        if (!t.valid) continue;
        acc += t.w[0] * fp[t.idx[0]] + t.w[1] * fp[t.idx[1]] + t.w[2] * fp[t.idx[2]] + t.w[3] * fp[t.idx[3]];
      }
      op[b] = static_cast<T>(acc * norm);
    }
  }
  return out;
}

template <typename T>
void roi_align_backward(const RoiAlignPlan& plan, const Tensor<T>& grad_out, Tensor<T>& grad_feature) {
  const int C = grad_feature.dim(0), H = grad_feature.dim(1), W = grad_feature.dim(2), S = plan.out_size;
  const double norm = 1.0 / plan.samples;
  for (int c = 0; c < C; ++c) {
    T* gp = grad_feature.ptr() + static_cast<std::size_t>(c) * H * W;
    const T* go = grad_out.ptr() + static_cast<std::size_t>(c) * S * S;
    for (int b = 0; b < S * S; ++b) {
      const double g = go[b] * norm;
      if (g == 0.0) continue;
      for (int s = 0; s < plan.samples; ++s) {
        const auto& t = plan.taps[static_cast<std::size_t>(b) * plan.samples + s];
        if (!t.valid) continue;
        for (int q = 0; q < 4; ++q) gp[t.idx[q]] += static_cast<T>(g * t.w[q]);
      }
    }
  }
}

// Losses return the value and write d(loss)/d(input) into `grad`.

template <typename T>
T sigmoid(T z) {
  return z >= T{} ? T{1} / (T{1} + std::exp(-z)) : std::exp(z) / (T{1} + std::exp(z));
}

template <typename T>
T bce_with_logits(T logit, T target, T& grad) {
  grad = sigmoid(logit) - target;
  return std::max(logit, T{}) - logit * target + std::log1p(std::exp(-std::abs(logit)));
}

template <typename T>
std::vector<T> softmax(std::span<const T> logits) {
  const T mx = *std::max_element(logits.begin(), logits.end());
  std::vector<T> p(logits.size());
  T sum{};
  for (std::size_t i = 0; i < logits.size(); ++i) sum += p[i] = std::exp(logits[i] - mx);
  for (auto& v : p) v /= sum;
  return p;
}

template <typename T>
T softmax_cross_entropy(std::span<const T> logits, int target, std::span<T> grad) {
  const auto p = softmax(logits);
  for (std::size_t i = 0; i < p.size(); ++i) grad[i] = p[i] - (static_cast<int>(i) == target ? T{1} : T{});
  return -std::log(std::max(p[static_cast<std::size_t>(target)], T(1e-12)));
}

template <typename T>
T smooth_l1(T diff, T& grad) {
  const T a = std::abs(diff);
  if (a < T{1}) {
    grad = diff;
    return T(0.5) * diff * diff;
  }
  grad = diff > T{} ? T{1} : T{-1};
  return a - T(0.5);
}

}  // namespace tumorseg::nn

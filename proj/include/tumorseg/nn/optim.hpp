#pragma once

#include <cmath>
#include <map>
#include <string>

#include "tumorseg/nn/tensor.hpp"

namespace tumorseg::nn {

/// Named parameters, iterated in name order so every pass is deterministic.
template <typename T>
using ParamSet = std::map<std::string, Tensor<T>>;

template <typename T>
ParamSet<T> zeros_like(const ParamSet<T>& params) {
  ParamSet<T> out;
  for (const auto& [name, t] : params) out.emplace(name, t.zeros_like());
  return out;
}

template <typename T>
double global_norm(const ParamSet<T>& grads) {
  double sq = 0;
  for (const auto& [name, g] : grads)
    for (T v : g.data) sq += static_cast<double>(v) * v;
  return std::sqrt(sq);
}

/// Adam with optional global-norm clipping applied before the update.
template <typename T>
class Adam {
 public:
  struct Options {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double clip_norm = 5.0;  // <= 0 disables clipping
  };

  Adam() : Adam(Options{}) {}
  explicit Adam(Options opts) : opts_(opts) {}

  void step(ParamSet<T>& params, const ParamSet<T>& grads, double lr) {
    ++t_;
    double scale = 1.0;
    if (opts_.clip_norm > 0) {
      const double n = global_norm(grads);
      if (n > opts_.clip_norm) scale = opts_.clip_norm / n;
    }
    const double bc1 = 1.0 - std::pow(opts_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(opts_.beta2, static_cast<double>(t_));
    for (auto& [name, p] : params) {
      const auto& g = grads.at(name);
      auto& m = first_.try_emplace(name, p.zeros_like()).first->second;
      auto& v = second_.try_emplace(name, p.zeros_like()).first->second;
      for (std::size_t i = 0; i < p.numel(); ++i) {
        const double gi = g[i] * scale;
        m[i] = static_cast<T>(opts_.beta1 * m[i] + (1 - opts_.beta1) * gi);
        v[i] = static_cast<T>(opts_.beta2 * v[i] + (1 - opts_.beta2) * gi * gi);
        const double mh = m[i] / bc1, vh = v[i] / bc2;
        p[i] = static_cast<T>(p[i] - lr * mh / (std::sqrt(vh) + opts_.eps));
      }
    }
  }

  long steps() const noexcept { return t_; }

 private:
  Options opts_;
  long t_ = 0;
  ParamSet<T> first_, second_;
};

}  // namespace tumorseg::nn

#pragma once

#include <cmath>
#include <map>
#include <string>

#include "emotune/numerics/tensor.hpp"

namespace emotune {

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double clip_norm = 1.0;  // global gradient norm; 0 disables
};

class Adam {
 public:
  explicit Adam(AdamConfig cfg = {}) : cfg_(cfg) {}

  /// One update of every parameter that has a gradient. Returns the global
  /// gradient norm before clipping.
  double step(std::map<std::string, Tensor>& params, const std::map<std::string, Tensor>& grads, double lr) {
    double sq = 0.0;
    for (const auto& [name, g] : grads)
      for (double v : g.data()) sq += v * v;
    const double norm = std::sqrt(sq);
    const double scale = cfg_.clip_norm > 0.0 && norm > cfg_.clip_norm ? cfg_.clip_norm / norm : 1.0;

    ++t_;
    const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (const auto& [name, g] : grads) {
      Tensor& p = params.at(name);
      auto [mit, fresh] = m_.try_emplace(name, Tensor::zeros_like(p));
      Tensor& m = mit->second;
      Tensor& v = v_.try_emplace(name, Tensor::zeros_like(p)).first->second;
      for (std::size_t i = 0; i < p.size(); ++i) {
        const double gi = g[i] * scale;
        m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * gi;
        v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * gi * gi;
        p[i] -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + cfg_.epsilon);
      }
    }
    return norm;
  }

  std::size_t steps() const noexcept { return t_; }

 private:
  AdamConfig cfg_;
  std::size_t t_ = 0;
  std::map<std::string, Tensor> m_, v_;
};

}  // namespace emotune

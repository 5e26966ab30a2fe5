#pragma once

#include <cmath>
#include <vector>

#include "ccenet/layers.hpp"

namespace ccenet {

/// lr0 * (1 - iter/total)^power; zero once iter reaches total.
inline double poly_lr(double lr0, std::size_t iter, std::size_t total, double power) {
  if (total == 0 || iter >= total) return 0.0;
  const double frac = 1.0 - static_cast<double>(iter) / static_cast<double>(total);
  return lr0 * std::pow(frac, power);
}

/// SGD with classical momentum: v <- m v + g; p <- p - lr v.
class Sgd {
 public:
  Sgd(TensorList params, double momentum) : params_(std::move(params)), momentum_(momentum) {
    velocity_.reserve(params_.size());
    for (const auto& p : params_) velocity_.emplace_back(p.tensor.numel(), 0.0);
  }

  const TensorList& params() const { return params_; }

  void step(double lr) {
    for (std::size_t i = 0; i < params_.size(); ++i) {
      Tensor& p = params_[i].tensor;
      if (!p.has_grad()) continue;
      const auto g = p.grad();
      auto v = std::span<double>(velocity_[i]);
      auto w = p.mutable_data();
      for (std::size_t j = 0; j < w.size(); ++j) {
        v[j] = momentum_ * v[j] + g[j];
        w[j] -= lr * v[j];
      }
    }
  }

 private:
  TensorList params_;
  double momentum_;
  std::vector<std::vector<double>> velocity_;
};

}  // namespace ccenet

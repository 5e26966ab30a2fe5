#pragma once

#include <algorithm>
#include <cmath>

#include "ccenet/ops.hpp"

namespace ccenet {

inline constexpr double kProbabilityClamp = 1e-7;
inline constexpr double kAlphaMin = 0.05;
inline constexpr double kAlphaMax = 0.95;

namespace detail {

inline void check_loss_inputs(const char* op, const Tensor& prob, const Tensor& mask) {
  if (prob.shape() != mask.shape() || prob.shape().c != 1) {
    throw ShapeError(std::string(op) + ": probability map " + prob.shape().str() +
                     " and mask " + mask.shape().str() + " must be equal single-channel shapes");
  }
}

}  // namespace detail

/// Class-balance weight |Y-| / N of one mask plane, clamped to
/// [kAlphaMin, kAlphaMax] so single-class masks keep both terms alive.
inline double positive_class_weight(const double* mask, std::size_t count) {
  std::size_t negatives = 0;
  for (std::size_t j = 0; j < count; ++j) negatives += mask[j] < 0.5 ? 1 : 0;
  const double alpha = static_cast<double>(negatives) / static_cast<double>(count);
  return std::clamp(alpha, kAlphaMin, kAlphaMax);
}

/// Weighted binary cross-entropy, averaged over the batch.
///
///   L = -(1/N) [ a sum_{Y=1} log P + (1-a) sum_{Y=0} log(1-P) ]
///
/// P is clamped to [1e-7, 1-1e-7]; the gradient is evaluated at the clamped
/// value and passed through the clamp.
inline Tensor wbce_loss(const Tensor& prob, const Tensor& mask) {
  detail::check_loss_inputs("wbce_loss", prob, mask);
  const Shape s = prob.shape();
  const std::size_t npix = s.plane();
  const double batch = static_cast<double>(s.n);
  std::vector<double> alpha(s.n);
  double total = 0.0;
  for (std::size_t n = 0; n < s.n; ++n) {
    const double* y = mask.data().data() + n * npix;
    const double* p = prob.data().data() + n * npix;
    alpha[n] = positive_class_weight(y, npix);
    double pos = 0.0;
    double neg = 0.0;
    for (std::size_t j = 0; j < npix; ++j) {
      const double pc = std::clamp(p[j], kProbabilityClamp, 1.0 - kProbabilityClamp);
      if (y[j] >= 0.5) {
        pos += std::log(pc);
      } else {
        neg += std::log(1.0 - pc);
      }
    }
    total += -(alpha[n] * pos + (1.0 - alpha[n]) * neg) / static_cast<double>(npix);
  }
  Tensor out = Tensor::scalar(total / batch);
  if (Tape* tape = detail::recording_tape({&prob})) {
    tape->record("wbce_loss", out, {&prob}, [prob, mask, out, alpha, npix, batch]() mutable {
      const double g = out.grad()[0];
      auto gp = prob.mutable_grad();
      const Shape s = prob.shape();
      for (std::size_t n = 0; n < s.n; ++n) {
        const double k = g / (static_cast<double>(npix) * batch);
        for (std::size_t j = 0; j < npix; ++j) {
          const std::size_t i = n * npix + j;
          const double pc = std::clamp(prob[i], kProbabilityClamp, 1.0 - kProbabilityClamp);
          if (mask[i] >= 0.5) {
            gp[i] += -k * alpha[n] / pc;
          } else {
            gp[i] += k * (1.0 - alpha[n]) / (1.0 - pc);
          }
        }
      }
    });
  }
  return out;
}

/// Soft dice loss 1 - (2 sum Y P + eps) / (sum Y^2 + sum P^2 + eps),
/// averaged over the batch.
inline Tensor dice_loss(const Tensor& prob, const Tensor& mask, double epsilon) {
  detail::check_loss_inputs("dice_loss", prob, mask);
  const Shape s = prob.shape();
  const std::size_t npix = s.plane();
  const double batch = static_cast<double>(s.n);
  std::vector<double> num(s.n);
  std::vector<double> den(s.n);
  double total = 0.0;
  for (std::size_t n = 0; n < s.n; ++n) {
    double yp = 0.0;
    double yy = 0.0;
    double pp = 0.0;
    for (std::size_t j = 0; j < npix; ++j) {
      const double y = mask[n * npix + j];
      const double p = prob[n * npix + j];
      yp += y * p;
      yy += y * y;
      pp += p * p;
    }
    num[n] = 2.0 * yp + epsilon;
    den[n] = yy + pp + epsilon;
    total += 1.0 - num[n] / den[n];
  }
  Tensor out = Tensor::scalar(total / batch);
  if (Tape* tape = detail::recording_tape({&prob})) {
    tape->record("dice_loss", out, {&prob}, [prob, mask, out, num, den, npix, batch]() mutable {
      const double g = out.grad()[0] / batch;
      auto gp = prob.mutable_grad();
      const Shape s = prob.shape();
      for (std::size_t n = 0; n < s.n; ++n) {
        const double d2 = den[n] * den[n];
        for (std::size_t j = 0; j < npix; ++j) {
          const std::size_t i = n * npix + j;
          gp[i] += -g * (2.0 * mask[i] * den[n] - 2.0 * prob[i] * num[n]) / d2;
        }
      }
    });
  }
  return out;
}

struct LossTerms {
  Tensor total;
  double wbce_main = 0.0;
  double dice_main = 0.0;
  double wbce_aux = 0.0;
  double dice_aux = 0.0;
  double lambda = 1.0;

  /// Main-branch objective alone.
  double main_branch() const { return wbce_main + lambda * dice_main; }
};

/// Sum over active branches of wbce + lambda * dice. `aux` may be undefined.
inline LossTerms joint_loss(const Tensor& main, const Tensor& aux, const Tensor& mask,
                            double lambda, double epsilon) {
  LossTerms t;
  const Tensor wm = wbce_loss(main, mask);
  const Tensor dm = dice_loss(main, mask, epsilon);
  t.wbce_main = wm.item();
  t.dice_main = dm.item();
  t.lambda = lambda;
  t.total = add(wm, scale(dm, lambda));
  if (aux.defined()) {
    const Tensor wa = wbce_loss(aux, mask);
    const Tensor da = dice_loss(aux, mask, epsilon);
    t.wbce_aux = wa.item();
    t.dice_aux = da.item();
    t.total = add(t.total, add(wa, scale(da, lambda)));
  }
  return t;
}

}  // namespace ccenet

#pragma once

#include <string>

#include "ccenet/layers.hpp"
#include "ccenet/ops.hpp"

namespace ccenet {

/// Row-stochastic position affinity of a feature map, (n,1,N,N) with
/// N = h*w. Row p is the softmax over q of <f^p, f^q>.
inline Tensor position_affinity(const Tensor& features) {
  return softmax_rows(position_scores(features, features));
}

/// Affinity-weighted sum over positions plus the residual map.
inline Tensor affinity_update(const Tensor& features, const Tensor& affinity,
                              const Tensor& residual) {
  return add(position_mix(features, affinity), residual);
}

struct CglOutput {
  Tensor fused;     // f_A + gate * f_C, or f_A when no context is given
  Tensor gate;      // undefined without context
  Tensor affinity;  // (n,1,N,N)
  Tensor output;    // refined map fed to the decoder
};

/// Context-guided local affinity.
class Cgl {
 public:
  Cgl() = default;

  Cgl(std::size_t channels, bool with_context, bool qk_projection, Rng& rng)
      : with_context_(with_context), qk_projection_(qk_projection) {
    if (with_context_) gate = ConvLayer(ConvSpec::same(2 * channels, channels, 1), rng);
    if (qk_projection_) {
      query = ConvLayer(ConvSpec::same(channels, channels, 1), rng);
      key = ConvLayer(ConvSpec::same(channels, channels, 1), rng);
    }
  }

  bool with_context() const { return with_context_; }

  /// f_L = f_A + sigmoid(W_L * [f_A, f_C]) * f_C
  Tensor fuse(const Tensor& aspp, const Tensor& context, Tensor* gate_out = nullptr) {
    if (aspp.shape() != context.shape()) {
      throw ShapeError("cgl fuse: ASPP map " + aspp.shape().str() + " vs context " +
                       context.shape().str());
    }
    Tensor g = sigmoid(gate.forward(concat_channels({aspp, context}), false));
    if (gate_out != nullptr) *gate_out = g;
    return add(aspp, mul(g, context));
  }

  Tensor affinity(const Tensor& fused) {
    if (!qk_projection_) return position_affinity(fused);
    return softmax_rows(position_scores(query.forward(fused, false), key.forward(fused, false)));
  }

  /// `context` may be undefined, in which case the fusion step is skipped.
  CglOutput forward(const Tensor& aspp, const Tensor& context) {
    CglOutput out;
    if (with_context_) {
      if (!context.defined()) throw ConfigError("cgl built with context guidance but none given");
      out.fused = fuse(aspp, context, &out.gate);
    } else {
      out.fused = aspp;
    }
    out.affinity = affinity(out.fused);
    out.output = affinity_update(out.fused, out.affinity, aspp);
    return out;
  }

  void parameters(const std::string& prefix, TensorList& out) const {
    if (with_context_) gate.parameters(prefix + ".gate", out);
    if (qk_projection_) {
      query.parameters(prefix + ".query", out);
      key.parameters(prefix + ".key", out);
    }
  }

  ConvLayer gate;
  ConvLayer query;
  ConvLayer key;

 private:
  bool with_context_ = true;
  bool qk_projection_ = false;
};

}  // namespace ccenet

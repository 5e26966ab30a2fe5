#pragma once

#include <array>
#include <optional>
#include <string>

#include "ccenet/layers.hpp"
#include "ccenet/ops.hpp"

namespace ccenet {

/// reduced + gate_img * img + gate_ctx * prev
inline Tensor gated_sum(const Tensor& reduced, const Tensor& gate_img, const Tensor& img,
                        const Tensor& gate_ctx, const Tensor& prev) {
  return add(add(reduced, mul(gate_img, img)), mul(gate_ctx, prev));
}

struct GateUnitOutput {
  Tensor context;   // f_{i,C}
  Tensor image;     // f_{i,I}
  Tensor gate_img;  // filter mask on the image features
  Tensor gate_ctx;  // filter mask on the previous context
};

/// Gate-based integration unit of one cascade stage.
///
/// Stage 1 only owns the 1x1 reduction; later stages also own the raw-image
/// 3x3 conv and the two 1x1 gate convs over [reduced, previous context].
class GateUnit {
 public:
  GateUnit() = default;

  GateUnit(std::size_t stage, std::size_t in_channels, std::size_t ctx_channels, bool gate_bias,
           Rng& rng)
      : stage_(stage), ctx_channels_(ctx_channels), gate_bias_(gate_bias) {
    reduce = ConvLayer(ConvSpec::same(in_channels, ctx_channels, 1), rng);
    if (stage_ > 1) {
      image_conv = ConvLayer(ConvSpec::same(3, ctx_channels, 3), rng);
      gate_img = ConvLayer(ConvSpec::same(2 * ctx_channels, ctx_channels, 1), rng);
      gate_ctx = ConvLayer(ConvSpec::same(2 * ctx_channels, ctx_channels, 1), rng);
    }
  }

  std::size_t stage() const { return stage_; }

  Tensor reduced(const Tensor& stage_features) { return reduce.forward(stage_features, false); }

  /// Fuses the reduced stage features with the previous context and the raw
  /// image. Both are resized to the reduced map first when needed.
  GateUnitOutput forward(const Tensor& reduced, const Tensor& prev, const Tensor& image) {
    if (stage_ < 2) throw ConfigError("gate unit forward is defined for stages 2..4");
    const Shape rs = reduced.shape();
    if (prev.shape().c != rs.c || rs.c != ctx_channels_) {
      throw ConfigError("gate unit " + std::to_string(stage_) + ": channel mismatch between " +
                        rs.str() + " and previous context " + prev.shape().str());
    }
    Tensor prev_r = prev;
    if (prev.shape().h != rs.h || prev.shape().w != rs.w) prev_r = bilinear_resize(prev, rs.h, rs.w);
    Tensor img_r = bilinear_resize(image, rs.h, rs.w);
    GateUnitOutput out;
    out.image = image_conv.forward(img_r, false);
    const Tensor joint = concat_channels({reduced, prev_r});
    out.gate_img = sigmoid(gate_img.forward(joint, false));
    out.gate_ctx = sigmoid(gate_ctx.forward(joint, false));
    out.context = gated_sum(reduced, out.gate_img, out.image, out.gate_ctx, prev_r);
    return out;
  }

  void parameters(const std::string& prefix, TensorList& out) const {
    reduce.parameters(prefix + ".reduce", out);
    if (stage_ > 1) {
      image_conv.parameters(prefix + ".image", out);
      gate_params(gate_img, prefix + ".gate_img", out);
      gate_params(gate_ctx, prefix + ".gate_ctx", out);
    }
  }

  ConvLayer reduce;
  ConvLayer image_conv;
  ConvLayer gate_img;
  ConvLayer gate_ctx;

 private:
  void gate_params(const ConvLayer& gate, const std::string& name, TensorList& out) const {
    out.push_back({name + ".weight", gate.weight});
    if (gate_bias_) out.push_back({name + ".bias", gate.bias});
  }

  std::size_t stage_ = 1;
  std::size_t ctx_channels_ = 0;
  bool gate_bias_ = true;
};

struct CcaOutput {
  Tensor context;                     // f_C
  std::array<Tensor, 4> cascade;      // f_{1,C} .. f_{4,C}
  std::array<Tensor, 4> gate_img;     // undefined at stage 1
  std::array<Tensor, 4> gate_ctx;
};

/// Cascaded context aggregation over the four encoder stages.
class Cca {
 public:
  Cca() = default;

  Cca(const std::array<std::size_t, 4>& stage_channels, std::size_t ctx_channels, bool gate_bias,
      Rng& rng) {
    for (std::size_t i = 0; i < 4; ++i) {
      units_[i] = GateUnit(i + 1, stage_channels[i], ctx_channels, gate_bias, rng);
      if (!gate_bias && i > 0) {
        // bias-free gates: keep the tensors at zero and out of the parameter set
        units_[i].gate_img.bias.set_requires_grad(false);
        units_[i].gate_ctx.bias.set_requires_grad(false);
      }
    }
  }

  GateUnit& unit(std::size_t stage) { return units_.at(stage - 1); }

  CcaOutput forward(const Tensor& image, const std::array<Tensor, 4>& stages) {
    CcaOutput out;
    Tensor context = units_[0].reduced(stages[0]);
    out.cascade[0] = context;
    for (std::size_t i = 1; i < 4; ++i) {
      GateUnitOutput u = units_[i].forward(units_[i].reduced(stages[i]), context, image);
      context = u.context;
      out.cascade[i] = context;
      out.gate_img[i] = u.gate_img;
      out.gate_ctx[i] = u.gate_ctx;
    }
    out.context = context;
    return out;
  }

  void parameters(const std::string& prefix, TensorList& out) const {
    for (std::size_t i = 0; i < 4; ++i) units_[i].parameters(prefix + ".unit" + std::to_string(i + 1), out);
  }

 private:
  std::array<GateUnit, 4> units_;
};

}  // namespace ccenet

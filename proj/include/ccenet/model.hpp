#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "ccenet/cca.hpp"
#include "ccenet/cgl.hpp"
#include "ccenet/config.hpp"
#include "ccenet/layers.hpp"
#include "ccenet/losses.hpp"

namespace ccenet {

inline constexpr double kMaskThreshold = 0.5;

struct ForwardResult {
  EncoderFeatures encoder;
  Tensor aspp;        // f_A
  CcaOutput cca;      // undefined members when CCA is disabled
  CglOutput cgl;      // undefined members when CGL is disabled
  Tensor decoder_in;  // concatenation fed to the decoder
  Tensor decoded;     // f_D
  Tensor logits;      // input resolution, one channel
  Tensor prob;
  Tensor aux_logits;  // undefined without the auxiliary head
  Tensor aux_prob;
};

/// Inference output at input resolution.
struct Prediction {
  Tensor main;
  Tensor aux;
  Tensor mask;  // {0,1}
};

inline Tensor threshold_mask(const Tensor& prob, double threshold = kMaskThreshold) {
  Tensor m(prob.shape());
  auto o = m.mutable_data();
  const auto p = prob.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = p[i] >= threshold ? 1.0 : 0.0;
  return m;
}

/// Encoder -> ASPP -> CCA -> CGL -> decoder, with an auxiliary head on the
/// CCA context. Modules switched off in the config are not constructed and
/// own no parameters.
class Network {
 public:
  explicit Network(const ModelConfig& config) : config_(config) {
    Rng rng(config.seed);
    const std::size_t ctx = config.ctx_channels;
    encoder_ = Encoder(config.encoder_channels, config.norm, rng);
    aspp_ = Aspp(config.encoder_channels[3], ctx, config.aspp_rate_divisor,
                 config.aspp_branch_norm, config.norm, rng);
    if (config.use_cca) cca_.emplace(config.encoder_channels, ctx, config.gate_bias, rng);
    if (config.use_cgl) cgl_.emplace(ctx, config.use_cca, config.cgl_qk_proj, rng);
    decoder_fuse_ = ConvLayer(ConvSpec::same(decoder_in_channels(), ctx, 1).with_norm(config.norm).with_relu(), rng);
    classifier_ = ConvLayer(ConvSpec::same(ctx, 1, 1), rng);
    if (config.aux_active()) aux_classifier_ = ConvLayer(ConvSpec::same(ctx, 1, 1), rng);
  }

  const ModelConfig& config() const { return config_; }

  std::size_t decoder_in_channels() const {
    std::size_t parts = 1;
    if (config_.use_cca) ++parts;
    if (config_.use_cgl) ++parts;
    return parts * config_.ctx_channels;
  }

  ForwardResult forward(const Tensor& image, bool training) {
    ForwardResult r;
    const Shape s = image.shape();
    r.encoder = encoder_.forward(image, training);
    r.aspp = aspp_.forward(r.encoder.stages[3], training);
    std::vector<Tensor> parts;
    if (cca_) {
      r.cca = cca_->forward(image, r.encoder.stages);
      parts.push_back(r.cca.context);
    }
    parts.push_back(r.aspp);
    if (cgl_) {
      r.cgl = cgl_->forward(r.aspp, cca_ ? r.cca.context : Tensor());
      parts.push_back(r.cgl.output);
    }
    r.decoder_in = parts.size() == 1 ? parts.front() : concat_channels(parts);
    r.decoded = decoder_fuse_.forward(r.decoder_in, training);
    r.logits = bilinear_resize(classifier_.forward(r.decoded, training), s.h, s.w);
    r.prob = sigmoid(r.logits);
    if (config_.aux_active()) {
      r.aux_logits = aux_logits(r.cca.context, s.h, s.w);
      r.aux_prob = sigmoid(r.aux_logits);
    }
    return r;
  }

  /// Auxiliary probability map from the CCA context.
  Tensor aux_forward(const Tensor& context, std::size_t out_h, std::size_t out_w) {
    return sigmoid(aux_logits(context, out_h, out_w));
  }

  Prediction predict(const Tensor& image) {
    ForwardResult r = forward(image, false);
    return Prediction{r.prob, r.aux_prob, threshold_mask(r.prob)};
  }

  LossTerms loss(const ForwardResult& r, const Tensor& mask) const {
    return joint_loss(r.prob, r.aux_prob, mask, config_.lambda, config_.epsilon);
  }

  TensorList parameters() const {
    TensorList out;
    encoder_.parameters("encoder", out);
    aspp_.parameters("aspp", out);
    if (cca_) cca_->parameters("cca", out);
    if (cgl_) cgl_->parameters("cgl", out);
    decoder_fuse_.parameters("decoder.fuse", out);
    classifier_.parameters("decoder.classifier", out);
    if (config_.aux_active()) aux_classifier_.parameters("aux.classifier", out);
    return out;
  }

  TensorList buffers() const {
    TensorList out;
    encoder_.buffers("encoder", out);
    aspp_.buffers("aspp", out);
    decoder_fuse_.buffers("decoder.fuse", out);
    return out;
  }

  /// Parameters followed by buffers; the checkpoint payload.
  TensorList state() const {
    TensorList out = parameters();
    for (auto& b : buffers()) out.push_back(std::move(b));
    return out;
  }

  /// Copies values into the live tensors. Every name must match exactly.
  void load_state(const std::map<std::string, Tensor>& values) {
    TensorList live = state();
    if (live.size() != values.size()) {
      throw ConfigError("checkpoint holds " + std::to_string(values.size()) +
                        " tensors, model expects " + std::to_string(live.size()));
    }
    for (auto& [name, tensor] : live) {
      auto it = values.find(name);
      if (it == values.end()) throw ConfigError("checkpoint lacks tensor '" + name + "'");
      if (it->second.shape() != tensor.shape()) {
        throw ShapeError("checkpoint tensor '" + name + "' has shape " + it->second.shape().str() +
                         ", model expects " + tensor.shape().str());
      }
      std::copy(it->second.data().begin(), it->second.data().end(), tensor.mutable_data().begin());
    }
  }

  Encoder& encoder() { return encoder_; }
  Aspp& aspp() { return aspp_; }
  Cca& cca() { return cca_.value(); }
  Cgl& cgl() { return cgl_.value(); }
  ConvLayer& classifier() { return classifier_; }
  ConvLayer& aux_classifier() { return aux_classifier_; }

 private:
  Tensor aux_logits(const Tensor& context, std::size_t out_h, std::size_t out_w) {
    if (!config_.aux_active()) {
      throw ConfigError("auxiliary head requires use_cca and use_aux");
    }
    return bilinear_resize(aux_classifier_.forward(context, false), out_h, out_w);
  }

  ModelConfig config_;
  Encoder encoder_;
  Aspp aspp_;
  std::optional<Cca> cca_;
  std::optional<Cgl> cgl_;
  ConvLayer decoder_fuse_;
  ConvLayer classifier_;
  ConvLayer aux_classifier_;
};

}  // namespace ccenet

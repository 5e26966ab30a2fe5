#pragma once

#include <array>
#include <cmath>
#include <random>
#include <string>
#include <vector>

#include "ccenet/ops.hpp"
#include "ccenet/tensor.hpp"

namespace ccenet {

using Rng = std::mt19937_64;

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

/// Ordered name -> tensor list. Trainable parameters and persistent buffers
/// (running statistics) are collected separately.
using TensorList = std::vector<NamedTensor>;

/// Uniform(-sqrt(1/fan_in), sqrt(1/fan_in)) weights.
inline Tensor fan_in_uniform(Shape shape, Rng& rng) {
  const double fan_in = static_cast<double>(shape.c * shape.h * shape.w);
  const double bound = std::sqrt(1.0 / fan_in);
  std::uniform_real_distribution<double> dist(-bound, bound);
  Tensor t(shape);
  for (double& v : t.mutable_data()) v = dist(rng);
  t.set_requires_grad(true);
  return t;
}

inline Tensor make_param(Shape shape, double fill) {
  Tensor t(shape, fill);
  t.set_requires_grad(true);
  return t;
}

struct ConvSpec {
  std::size_t in = 1;
  std::size_t out = 1;
  std::size_t kernel = 1;
  std::size_t stride = 1;
  std::size_t dilation = 1;
  std::size_t padding = 0;
  bool norm = false;
  bool relu = false;

  /// kxk "same"-style padding for the given dilation.
  static ConvSpec same(std::size_t in, std::size_t out, std::size_t kernel,
                       std::size_t dilation = 1, std::size_t stride = 1) {
    ConvSpec s;
    s.in = in;
    s.out = out;
    s.kernel = kernel;
    s.stride = stride;
    s.dilation = dilation;
    s.padding = dilation * (kernel - 1) / 2;
    return s;
  }
  ConvSpec& with_norm(bool on = true) {
    norm = on;
    return *this;
  }
  ConvSpec& with_relu(bool on = true) {
    relu = on;
    return *this;
  }
};

/// Convolution, optional batch normalization, optional rectifier.
class ConvLayer {
 public:
  static constexpr double kNormMomentum = 0.1;
  static constexpr double kNormEpsilon = 1e-5;

  ConvLayer() = default;

  ConvLayer(const ConvSpec& spec, Rng& rng) : spec_(spec) {
    weight = fan_in_uniform(Shape{spec.out, spec.in, spec.kernel, spec.kernel}, rng);
    bias = make_param(Shape{1, spec.out, 1, 1}, 0.0);
    if (spec.norm) {
      gamma = make_param(Shape{1, spec.out, 1, 1}, 1.0);
      beta = make_param(Shape{1, spec.out, 1, 1}, 0.0);
      running_mean = Tensor(Shape{1, spec.out, 1, 1}, 0.0);
      running_var = Tensor(Shape{1, spec.out, 1, 1}, 1.0);
    }
  }

  const ConvSpec& spec() const { return spec_; }

  Tensor forward(const Tensor& x, bool training) {
    Tensor y = conv2d(x, weight, bias, ConvGeometry{spec_.stride, spec_.dilation, spec_.padding});
    if (spec_.norm) {
      y = batch_norm(y, gamma, beta, running_mean, running_var,
                     BatchNormOptions{training, kNormMomentum, kNormEpsilon});
    }
    if (spec_.relu) y = relu(y);
    return y;
  }

  void parameters(const std::string& prefix, TensorList& out) const {
    out.push_back({prefix + ".weight", weight});
    out.push_back({prefix + ".bias", bias});
    if (spec_.norm) {
      out.push_back({prefix + ".norm.gamma", gamma});
      out.push_back({prefix + ".norm.beta", beta});
    }
  }

  void buffers(const std::string& prefix, TensorList& out) const {
    if (spec_.norm) {
      out.push_back({prefix + ".norm.running_mean", running_mean});
      out.push_back({prefix + ".norm.running_var", running_var});
    }
  }

  Tensor weight;
  Tensor bias;
  Tensor gamma;
  Tensor beta;
  Tensor running_mean;
  Tensor running_var;

 private:
  ConvSpec spec_;
};

/// conv3x3-norm-relu, conv3x3-norm, skip (1x1 projection when the shape
/// changes), relu after the sum.
class ResidualBlock {
 public:
  ResidualBlock() = default;

  ResidualBlock(std::size_t in, std::size_t out, std::size_t stride, std::size_t dilation,
                bool norm, Rng& rng)
      : conv1_(ConvSpec::same(in, out, 3, dilation, stride).with_norm(norm).with_relu(), rng),
        conv2_(ConvSpec::same(out, out, 3, dilation).with_norm(norm), rng),
        has_projection_(in != out || stride != 1) {
    if (has_projection_) {
      projection_ = ConvLayer(ConvSpec::same(in, out, 1, 1, stride).with_norm(norm), rng);
    }
  }

  Tensor forward(const Tensor& x, bool training) {
    Tensor y = conv2_.forward(conv1_.forward(x, training), training);
    Tensor skip = has_projection_ ? projection_.forward(x, training) : x;
    return relu(add(y, skip));
  }

  void parameters(const std::string& prefix, TensorList& out) const {
    conv1_.parameters(prefix + ".conv1", out);
    conv2_.parameters(prefix + ".conv2", out);
    if (has_projection_) projection_.parameters(prefix + ".proj", out);
  }
  void buffers(const std::string& prefix, TensorList& out) const {
    conv1_.buffers(prefix + ".conv1", out);
    conv2_.buffers(prefix + ".conv2", out);
    if (has_projection_) projection_.buffers(prefix + ".proj", out);
  }

 private:
  ConvLayer conv1_;
  ConvLayer conv2_;
  ConvLayer projection_;
  bool has_projection_ = false;
};

/// Two residual blocks; the first carries the stage stride.
class EncoderStage {
 public:
  EncoderStage() = default;
  EncoderStage(std::size_t in, std::size_t out, std::size_t stride, std::size_t dilation,
               bool norm, Rng& rng)
      : first_(in, out, stride, dilation, norm, rng),
        second_(out, out, 1, dilation, norm, rng),
        stride_(stride),
        dilation_(dilation),
        channels_(out) {}

  Tensor forward(const Tensor& x, bool training) {
    return second_.forward(first_.forward(x, training), training);
  }

  std::size_t stride() const { return stride_; }
  std::size_t dilation() const { return dilation_; }
  std::size_t channels() const { return channels_; }

  void parameters(const std::string& prefix, TensorList& out) const {
    first_.parameters(prefix + ".block0", out);
    second_.parameters(prefix + ".block1", out);
  }
  void buffers(const std::string& prefix, TensorList& out) const {
    first_.buffers(prefix + ".block0", out);
    second_.buffers(prefix + ".block1", out);
  }

 private:
  ResidualBlock first_;
  ResidualBlock second_;
  std::size_t stride_ = 1;
  std::size_t dilation_ = 1;
  std::size_t channels_ = 0;
};

struct EncoderFeatures {
  std::array<Tensor, 4> stages;
};

/// Small dilated residual encoder. Output strides 4, 8, 8, 8; the last two
/// stages keep resolution and use dilation 2.
class Encoder {
 public:
  Encoder() = default;

  Encoder(std::array<std::size_t, 4> channels, bool norm, Rng& rng)
      : stem_(ConvSpec::same(3, channels[0], 3, 1, 2).with_norm(norm).with_relu(), rng) {
    const std::array<std::size_t, 4> strides{2, 2, 1, 1};
    const std::array<std::size_t, 4> dilations{1, 1, 2, 2};
    std::size_t in = channels[0];
    for (std::size_t i = 0; i < 4; ++i) {
      stages_[i] = EncoderStage(in, channels[i], strides[i], dilations[i], norm, rng);
      in = channels[i];
    }
  }

  EncoderFeatures forward(const Tensor& image, bool training) {
    const Shape s = image.shape();
    if (s.h % 8 != 0 || s.w % 8 != 0) {
      throw ConfigError("encoder input " + std::to_string(s.h) + "x" + std::to_string(s.w) +
                        " is not divisible by 8");
    }
    if (s.c != 3) throw ShapeError("encoder expects a 3-channel image, got " + s.str());
    EncoderFeatures f;
    Tensor x = stem_.forward(image, training);
    for (std::size_t i = 0; i < 4; ++i) {
      x = stages_[i].forward(x, training);
      f.stages[i] = x;
    }
    return f;
  }

  const EncoderStage& stage(std::size_t i) const { return stages_.at(i); }

  void parameters(const std::string& prefix, TensorList& out) const {
    stem_.parameters(prefix + ".stem", out);
    for (std::size_t i = 0; i < 4; ++i) stages_[i].parameters(prefix + ".stage" + std::to_string(i + 1), out);
  }
  void buffers(const std::string& prefix, TensorList& out) const {
    stem_.buffers(prefix + ".stem", out);
    for (std::size_t i = 0; i < 4; ++i) stages_[i].buffers(prefix + ".stage" + std::to_string(i + 1), out);
  }

 private:
  ConvLayer stem_;
  std::array<EncoderStage, 4> stages_;
};

/// Atrous spatial pyramid pooling: 1x1 branch, three dilated 3x3 branches,
/// image-pooling branch, 1x1 projection of the concatenation.
class Aspp {
 public:
  static constexpr std::array<std::size_t, 3> kBaseRates{6, 12, 18};

  Aspp() = default;

  Aspp(std::size_t in, std::size_t out, double rate_divisor, bool branch_norm, bool norm, Rng& rng) {
    if (!(rate_divisor > 0.0)) throw ConfigError("aspp_rate_divisor must be positive");
    const bool bn = branch_norm && norm;
    branch_1x1_ = ConvLayer(ConvSpec::same(in, out, 1).with_norm(bn).with_relu(branch_norm), rng);
    for (std::size_t i = 0; i < 3; ++i) {
      rates_[i] = scaled_rate(kBaseRates[i], rate_divisor);
      atrous_[i] = ConvLayer(
          ConvSpec::same(in, out, 3, rates_[i]).with_norm(bn).with_relu(branch_norm), rng);
    }
    // a 1x1 pooled map has no spatial statistics to normalize over
    pool_conv_ = ConvLayer(ConvSpec::same(in, out, 1).with_relu(branch_norm), rng);
    project_ = ConvLayer(ConvSpec::same(5 * out, out, 1).with_norm(norm).with_relu(), rng);
  }

  static std::size_t scaled_rate(std::size_t base, double divisor) {
    const double r = std::round(static_cast<double>(base) / divisor);
    return r < 1.0 ? 1 : static_cast<std::size_t>(r);
  }

  const std::array<std::size_t, 3>& rates() const { return rates_; }

  Tensor branch(std::size_t i, const Tensor& x, bool training) {
    return atrous_.at(i).forward(x, training);
  }

  Tensor pool_branch(const Tensor& x, bool training) {
    const Shape s = x.shape();
    return bilinear_resize(pool_conv_.forward(global_avg_pool(x), training), s.h, s.w);
  }

  Tensor forward(const Tensor& x, bool training) {
    std::vector<Tensor> parts;
    parts.reserve(5);
    parts.push_back(branch_1x1_.forward(x, training));
    for (std::size_t i = 0; i < 3; ++i) parts.push_back(atrous_[i].forward(x, training));
    parts.push_back(pool_branch(x, training));
    return project_.forward(concat_channels(parts), training);
  }

  ConvLayer& pool_conv() { return pool_conv_; }

  void parameters(const std::string& prefix, TensorList& out) const {
    branch_1x1_.parameters(prefix + ".b1x1", out);
    for (std::size_t i = 0; i < 3; ++i) atrous_[i].parameters(prefix + ".atrous" + std::to_string(i), out);
    pool_conv_.parameters(prefix + ".pool", out);
    project_.parameters(prefix + ".project", out);
  }
  void buffers(const std::string& prefix, TensorList& out) const {
    branch_1x1_.buffers(prefix + ".b1x1", out);
    for (std::size_t i = 0; i < 3; ++i) atrous_[i].buffers(prefix + ".atrous" + std::to_string(i), out);
    pool_conv_.buffers(prefix + ".pool", out);
    project_.buffers(prefix + ".project", out);
  }

 private:
  ConvLayer branch_1x1_;
  std::array<ConvLayer, 3> atrous_;
  ConvLayer pool_conv_;
  ConvLayer project_;
  std::array<std::size_t, 3> rates_{};
};

}  // namespace ccenet

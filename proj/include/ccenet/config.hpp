#pragma once

#include <array>
#include <cstdint>
#include <iomanip>
#include <limits>
#include <map>
#include <sstream>
#include <string>

#include "ccenet/tensor.hpp"

namespace ccenet {

struct AugmentSpec {
  bool hflip = true;
  bool vflip = true;
  bool crop = true;
  bool rotate = true;
  double flip_probability = 0.5;
  double crop_min = 0.5;
  double crop_max = 1.0;
  double rotate_max_deg = 20.0;

  static AugmentSpec none() {
    AugmentSpec a;
    a.hflip = a.vflip = a.crop = a.rotate = false;
    return a;
  }
  bool any() const { return hflip || vflip || crop || rotate; }
};

/// Architecture, loss and optimizer settings plus ablation switches.
struct ModelConfig {
  std::size_t input_size = 64;
  std::array<std::size_t, 4> encoder_channels{16, 32, 32, 32};
  std::size_t ctx_channels = 32;
  double aspp_rate_divisor = 3.0;
  bool aspp_branch_norm = true;
  bool norm = true;

  bool use_cca = true;
  bool use_cgl = true;
  bool use_aux = true;
  bool gate_bias = true;
  bool cgl_qk_proj = false;

  double lambda = 1.0;
  double epsilon = 1.0;
  double lr0 = 1e-2;
  double momentum = 0.9;
  double poly_power = 0.9;
  std::size_t total_iters = 500;
  std::size_t batch_size = 8;
  std::uint64_t seed = 1;
  AugmentSpec augment;

  /// Settings used in the original full-size setup (256x256 inputs,
  /// 256-channel context, undivided ASPP rates, batch 8, lr 1e-4).
  static ModelConfig full_size() {
    ModelConfig c;
    c.input_size = 256;
    c.encoder_channels = {256, 512, 1024, 2048};
    c.ctx_channels = 256;
    c.aspp_rate_divisor = 1.0;
    c.lr0 = 1e-4;
    c.batch_size = 8;
    return c;
  }

  bool aux_active() const { return use_cca && use_aux; }

  void validate() const {
    auto fail = [](const std::string& m) { throw ConfigError(m); };
    if (input_size == 0 || input_size % 8 != 0) {
      fail("input_size " + std::to_string(input_size) + " must be a positive multiple of 8");
    }
    for (std::size_t c : encoder_channels) {
      if (c == 0) fail("encoder_channels must be positive");
    }
    if (ctx_channels == 0) fail("ctx_channels must be positive");
    if (!(aspp_rate_divisor > 0.0)) fail("aspp_rate_divisor must be positive");
    if (!(lambda >= 0.0)) fail("lambda must be >= 0");
    if (!(epsilon > 0.0 && epsilon <= 1.0)) fail("epsilon must lie in (0,1]");
    if (!(poly_power > 0.0)) fail("poly_power must be > 0");
    if (!(lr0 >= 0.0)) fail("lr0 must be >= 0");
    if (!(momentum >= 0.0 && momentum < 1.0)) fail("momentum must lie in [0,1)");
    if (batch_size == 0) fail("batch_size must be positive");
    if (norm && batch_size < 2) fail("batch_size must be >= 2 when normalization is on");
    if (!(augment.crop_min > 0.0 && augment.crop_min <= augment.crop_max && augment.crop_max <= 1.0)) {
      fail("crop scale range must satisfy 0 < crop_min <= crop_max <= 1");
    }
    if (!(augment.flip_probability >= 0.0 && augment.flip_probability <= 1.0)) {
      fail("flip_probability must lie in [0,1]");
    }
  }

  /// `key = value` lines, one per field, in a fixed order.
  std::string to_text() const {
    std::ostringstream os;
    os << std::setprecision(std::numeric_limits<double>::max_digits10);
    os << "input_size = " << input_size << "\n";
    os << "encoder_channels = " << encoder_channels[0] << "," << encoder_channels[1] << ","
       << encoder_channels[2] << "," << encoder_channels[3] << "\n";
    os << "ctx_channels = " << ctx_channels << "\n";
    os << "aspp_rate_divisor = " << aspp_rate_divisor << "\n";
    os << "aspp_branch_norm = " << flag(aspp_branch_norm) << "\n";
    os << "norm = " << flag(norm) << "\n";
    os << "use_cca = " << flag(use_cca) << "\n";
    os << "use_cgl = " << flag(use_cgl) << "\n";
    os << "use_aux = " << flag(use_aux) << "\n";
    os << "gate_bias = " << flag(gate_bias) << "\n";
    os << "cgl_qk_proj = " << flag(cgl_qk_proj) << "\n";
    os << "lambda = " << lambda << "\n";
    os << "epsilon = " << epsilon << "\n";
    os << "lr0 = " << lr0 << "\n";
    os << "momentum = " << momentum << "\n";
    os << "poly_power = " << poly_power << "\n";
    os << "total_iters = " << total_iters << "\n";
    os << "batch_size = " << batch_size << "\n";
    os << "seed = " << seed << "\n";
    os << "augment_hflip = " << flag(augment.hflip) << "\n";
    os << "augment_vflip = " << flag(augment.vflip) << "\n";
    os << "augment_crop = " << flag(augment.crop) << "\n";
    os << "augment_rotate = " << flag(augment.rotate) << "\n";
    os << "flip_probability = " << augment.flip_probability << "\n";
    os << "crop_min = " << augment.crop_min << "\n";
    os << "crop_max = " << augment.crop_max << "\n";
    os << "rotate_max_deg = " << augment.rotate_max_deg << "\n";
    return os.str();
  }

  /// Applies one `key = value` setting. Returns false for unknown keys.
  bool set(const std::string& key, const std::string& value) {
    if (key == "input_size") input_size = to_size(key, value);
    else if (key == "encoder_channels") encoder_channels = to_channels(value);
    else if (key == "ctx_channels") ctx_channels = to_size(key, value);
    else if (key == "aspp_rate_divisor") aspp_rate_divisor = to_double(key, value);
    else if (key == "aspp_branch_norm") aspp_branch_norm = to_bool(key, value);
    else if (key == "norm") norm = to_bool(key, value);
    else if (key == "use_cca") use_cca = to_bool(key, value);
    else if (key == "use_cgl") use_cgl = to_bool(key, value);
    else if (key == "use_aux") use_aux = to_bool(key, value);
    else if (key == "gate_bias") gate_bias = to_bool(key, value);
    else if (key == "cgl_qk_proj") cgl_qk_proj = to_bool(key, value);
    else if (key == "lambda") lambda = to_double(key, value);
    else if (key == "epsilon") epsilon = to_double(key, value);
    else if (key == "lr0") lr0 = to_double(key, value);
    else if (key == "momentum") momentum = to_double(key, value);
    else if (key == "poly_power") poly_power = to_double(key, value);
    else if (key == "total_iters") total_iters = to_size(key, value);
    else if (key == "batch_size") batch_size = to_size(key, value);
    else if (key == "seed") seed = to_size(key, value);
    else if (key == "augment_hflip") augment.hflip = to_bool(key, value);
    else if (key == "augment_vflip") augment.vflip = to_bool(key, value);
    else if (key == "augment_crop") augment.crop = to_bool(key, value);
    else if (key == "augment_rotate") augment.rotate = to_bool(key, value);
    else if (key == "flip_probability") augment.flip_probability = to_double(key, value);
    else if (key == "crop_min") augment.crop_min = to_double(key, value);
    else if (key == "crop_max") augment.crop_max = to_double(key, value);
    else if (key == "rotate_max_deg") augment.rotate_max_deg = to_double(key, value);
    else return false;
    return true;
  }

  /// Parses `key = value` text; '#' starts a comment. Unknown keys are errors.
  static ModelConfig from_text(const std::string& text) {
    ModelConfig c;
    for (const auto& [key, value] : parse_key_values(text)) {
      if (!c.set(key, value)) throw ConfigError("unknown config key '" + key + "'");
    }
    return c;
  }

  static std::map<std::string, std::string> parse_key_values(const std::string& text) {
    std::map<std::string, std::string> out;
    std::istringstream is(text);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(is, line)) {
      ++lineno;
      if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
      const std::string t = trim(line);
      if (t.empty() || t.front() == '[') continue;
      const auto eq = t.find('=');
      if (eq == std::string::npos) {
        throw ConfigError("config line " + std::to_string(lineno) + ": expected 'key = value'");
      }
      out[trim(t.substr(0, eq))] = trim(t.substr(eq + 1));
    }
    return out;
  }

  friend bool operator==(const ModelConfig& a, const ModelConfig& b) {
    return a.to_text() == b.to_text();
  }

 private:
  static const char* flag(bool b) { return b ? "true" : "false"; }

  static std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r\n\"");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r\n\"");
    return s.substr(b, e - b + 1);
  }

  static bool to_bool(const std::string& key, const std::string& v) {
    if (v == "true" || v == "1" || v == "on" || v == "yes") return true;
    if (v == "false" || v == "0" || v == "off" || v == "no") return false;
    throw ConfigError("config key '" + key + "': expected a boolean, got '" + v + "'");
  }

  static double to_double(const std::string& key, const std::string& v) {
    try {
      std::size_t used = 0;
      const double d = std::stod(v, &used);
      if (used == v.size()) return d;
    } catch (const std::exception&) {
    }
    throw ConfigError("config key '" + key + "': expected a number, got '" + v + "'");
  }

  static std::size_t to_size(const std::string& key, const std::string& v) {
    try {
      std::size_t used = 0;
      const unsigned long long u = std::stoull(v, &used);
      if (used == v.size() && v.find('-') == std::string::npos) return static_cast<std::size_t>(u);
    } catch (const std::exception&) {
    }
    throw ConfigError("config key '" + key + "': expected a non-negative integer, got '" + v + "'");
  }

  static std::array<std::size_t, 4> to_channels(const std::string& v) {
    std::array<std::size_t, 4> out{};
    std::istringstream is(v);
    std::string part;
    std::size_t i = 0;
    while (std::getline(is, part, ',')) {
      if (i == 4) break;
      out[i++] = to_size("encoder_channels", trim(part));
    }
    if (i != 4 || is.rdbuf()->in_avail() > 0) {
      throw ConfigError("encoder_channels needs four comma-separated values, got '" + v + "'");
    }
    return out;
  }
};

}  // namespace ccenet

#pragma once

#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "ccenet/config.hpp"
#include "ccenet/image_io.hpp"
#include "ccenet/layers.hpp"
#include "ccenet/tensor.hpp"

namespace ccenet {

enum class Category { melanoma_like, non_melanoma_like };

inline const char* category_name(Category c) {
  return c == Category::melanoma_like ? "melanoma-like" : "non-melanoma-like";
}

inline bool parse_category(const std::string& s, Category& out) {
  if (s == "melanoma-like" || s == "melanoma") {
    out = Category::melanoma_like;
    return true;
  }
  if (s == "non-melanoma-like" || s == "non-melanoma") {
    out = Category::non_melanoma_like;
    return true;
  }
  return false;
}

/// One annotated image: (1,3,h,w) image in [0,1], (1,1,h,w) binary mask.
struct SegSample {
  std::string id;
  Tensor image;
  Tensor mask;
  Category category = Category::non_melanoma_like;
};

class IngestError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ParseError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline double lesion_fraction(const Tensor& mask) {
  double on = 0.0;
  for (double v : mask.data()) on += v;
  return on / static_cast<double>(mask.numel());
}

// ---------------------------------------------------------------------------
// Synthetic dermoscopy-style generator

struct SyntheticOptions {
  double low_contrast_probability = 0.5;
  double hair_probability = 0.35;
  double ruler_probability = 0.2;
  double min_lesion_fraction = 0.05;
  double max_lesion_fraction = 0.60;
};

namespace detail {

inline double uniform(Rng& rng, double lo, double hi) {
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}

inline bool bernoulli(Rng& rng, double p) { return uniform(rng, 0.0, 1.0) < p; }

inline double logistic(double x) { return 1.0 / (1.0 + std::exp(-x)); }

/// Star-convex outline: ellipse radius modulated by low-order harmonics.
struct Blob {
  double cx = 0, cy = 0, rx = 1, ry = 1, rotation = 0;
  std::array<double, 4> amp{};
  std::array<double, 4> phase{};

  double radius(double theta) const {
    const double t = theta - rotation;
    const double c = std::cos(t) / rx;
    const double s = std::sin(t) / ry;
    double r = 1.0 / std::sqrt(c * c + s * s);
    double mod = 1.0;
    for (std::size_t k = 0; k < amp.size(); ++k) {
      mod += amp[k] * std::cos(static_cast<double>(k + 2) * theta + phase[k]);
    }
    return r * mod;
  }

  /// Positive inside, in pixels along the ray from the centre.
  double depth(double x, double y) const {
    const double dx = x - cx;
    const double dy = y - cy;
    return radius(std::atan2(dy, dx)) - std::hypot(dx, dy);
  }
};

inline Blob draw_blob(Rng& rng, double size) {
  Blob b;
  const double area = uniform(rng, 0.10, 0.38) * size * size;
  const double aspect = uniform(rng, 0.65, 1.0);
  b.rx = std::sqrt(area / (std::numbers::pi * aspect));
  b.ry = b.rx * aspect;
  b.rotation = uniform(rng, 0.0, std::numbers::pi);
  b.cx = size * (0.5 + uniform(rng, -0.12, 0.12));
  b.cy = size * (0.5 + uniform(rng, -0.12, 0.12));
  for (std::size_t k = 0; k < b.amp.size(); ++k) {
    b.amp[k] = uniform(rng, 0.0, 0.07);
    b.phase[k] = uniform(rng, 0.0, 2.0 * std::numbers::pi);
  }
  return b;
}

inline void darken_disc(std::vector<double>& rgb, std::size_t size, double x, double y,
                        double radius, const std::array<double, 3>& color, double strength) {
  const auto lo_y = static_cast<long>(std::floor(y - radius - 1));
  const auto hi_y = static_cast<long>(std::ceil(y + radius + 1));
  const auto lo_x = static_cast<long>(std::floor(x - radius - 1));
  const auto hi_x = static_cast<long>(std::ceil(x + radius + 1));
  const std::size_t plane = size * size;
  for (long py = std::max(0L, lo_y); py <= std::min<long>(static_cast<long>(size) - 1, hi_y); ++py) {
    for (long px = std::max(0L, lo_x); px <= std::min<long>(static_cast<long>(size) - 1, hi_x); ++px) {
      const double d = std::hypot(px + 0.5 - x, py + 0.5 - y);
      const double a = strength * std::clamp(radius + 0.5 - d, 0.0, 1.0);
      if (a <= 0.0) continue;
      const std::size_t i = static_cast<std::size_t>(py) * size + static_cast<std::size_t>(px);
      for (std::size_t c = 0; c < 3; ++c) {
        rgb[c * plane + i] = std::min(rgb[c * plane + i], (1.0 - a) * rgb[c * plane + i] + a * color[c]);
      }
    }
  }
}

}  // namespace detail

/// Deterministic synthetic lesion images. Sample i draws from its own stream
/// seeded by (seed, i); "melanoma-like" marks the low-contrast samples.
inline std::vector<SegSample> gen_synthetic(std::size_t n, std::size_t size, std::uint64_t seed,
                                            const SyntheticOptions& opt = {}) {
  if (n == 0) throw ConfigError("gen_synthetic: n must be >= 1");
  if (size == 0 || size % 8 != 0) {
    throw ConfigError("gen_synthetic: size " + std::to_string(size) + " must be divisible by 8");
  }
  const double S = static_cast<double>(size);
  const std::size_t plane = size * size;
  std::vector<SegSample> out;
  out.reserve(n);
  for (std::size_t idx = 0; idx < n; ++idx) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(idx), 0x5eedu};
    Rng rng(seq);
    const bool low_contrast = detail::bernoulli(rng, opt.low_contrast_probability);

    // lesion outline; redraw until the area lies within bounds
    detail::Blob blob;
    std::vector<double> mask(plane);
    for (int attempt = 0;; ++attempt) {
      blob = detail::draw_blob(rng, S);
      std::size_t on = 0;
      for (std::size_t y = 0; y < size; ++y) {
        for (std::size_t x = 0; x < size; ++x) {
          const bool inside = blob.depth(x + 0.5, y + 0.5) >= 0.0;
          mask[y * size + x] = inside ? 1.0 : 0.0;
          on += inside ? 1 : 0;
        }
      }
      const double frac = static_cast<double>(on) / static_cast<double>(plane);
      if (frac >= opt.min_lesion_fraction && frac <= opt.max_lesion_fraction) break;
      if (attempt > 100) throw std::logic_error("gen_synthetic: lesion area bounds unreachable");
    }

    // skin background with smooth low-frequency shading
    const double skin_r = detail::uniform(rng, 0.78, 0.92);
    const std::array<double, 3> skin{skin_r, skin_r - detail::uniform(rng, 0.12, 0.20),
                                     skin_r - detail::uniform(rng, 0.22, 0.34)};
    struct Wave {
      double amp, fx, fy, phase;
    };
    std::array<Wave, 4> waves{};
    for (auto& w : waves) {
      w = {detail::uniform(rng, 0.01, 0.035), detail::uniform(rng, -2.5, 2.5),
           detail::uniform(rng, -2.5, 2.5), detail::uniform(rng, 0.0, 2.0 * std::numbers::pi)};
    }
    std::array<double, 3> lesion{detail::uniform(rng, 0.32, 0.48), detail::uniform(rng, 0.18, 0.28),
                                 detail::uniform(rng, 0.10, 0.20)};
    const double contrast = low_contrast ? detail::uniform(rng, 0.35, 0.5) : 1.0;
    for (std::size_t c = 0; c < 3; ++c) lesion[c] = skin[c] + contrast * (lesion[c] - skin[c]);
    const double blur = low_contrast ? detail::uniform(rng, 1.2, 2.5) : detail::uniform(rng, 0.6, 1.5);
    const double core_dark = detail::uniform(rng, 0.0, 0.12) * contrast;
    const double mean_r = 0.5 * (blob.rx + blob.ry);

    std::normal_distribution<double> grain(0.0, 0.012);
    std::vector<double> rgb(3 * plane);
    for (std::size_t y = 0; y < size; ++y) {
      for (std::size_t x = 0; x < size; ++x) {
        const double px = x + 0.5;
        const double py = y + 0.5;
        double shade = 0.0;
        for (const auto& w : waves) {
          shade += w.amp * std::sin(2.0 * std::numbers::pi * (w.fx * px + w.fy * py) / S + w.phase);
        }
        const double depth = blob.depth(px, py);
        const double alpha = detail::logistic(depth / blur);
        const double core = core_dark * std::clamp(depth / mean_r, 0.0, 1.0);
        const std::size_t i = y * size + x;
        for (std::size_t c = 0; c < 3; ++c) {
          const double bg = skin[c] + shade;
          const double fg = lesion[c] + 0.5 * shade - core;
          rgb[c * plane + i] = (1.0 - alpha) * bg + alpha * fg + grain(rng);
        }
      }
    }

    if (detail::bernoulli(rng, opt.hair_probability)) {
      const int hairs = std::uniform_int_distribution<int>(1, 4)(rng);
      for (int h = 0; h < hairs; ++h) {
        const double x0 = detail::uniform(rng, 0, S), y0 = detail::uniform(rng, 0, S);
        const double x2 = detail::uniform(rng, 0, S), y2 = detail::uniform(rng, 0, S);
        const double x1 = detail::uniform(rng, 0, S), y1 = detail::uniform(rng, 0, S);
        const double thick = detail::uniform(rng, 0.4, 0.9);
        const double tone = detail::uniform(rng, 0.08, 0.22);
        const std::array<double, 3> color{tone, tone * 0.8, tone * 0.7};
        const int steps = static_cast<int>(4 * S);
        for (int s = 0; s <= steps; ++s) {
          const double t = static_cast<double>(s) / steps;
          const double bx = (1 - t) * (1 - t) * x0 + 2 * (1 - t) * t * x1 + t * t * x2;
          const double by = (1 - t) * (1 - t) * y0 + 2 * (1 - t) * t * y1 + t * t * y2;
          detail::darken_disc(rgb, size, bx, by, thick, color, 0.85);
        }
      }
    }

    if (detail::bernoulli(rng, opt.ruler_probability)) {
      const bool top = detail::bernoulli(rng, 0.5);
      const double spacing = detail::uniform(rng, 4.0, 6.0);
      const double base = top ? 1.5 : S - 1.5;
      const std::array<double, 3> color{0.2, 0.2, 0.2};
      std::size_t k = 0;
      for (double x = detail::uniform(rng, 1.0, spacing); x < S - 1; x += spacing, ++k) {
        const double len = (k % 5 == 0) ? 6.0 : 3.0;
        for (double d = 0.0; d <= len; d += 0.5) {
          detail::darken_disc(rgb, size, x, top ? base + d : base - d, 0.4, color, 0.9);
        }
      }
    }

    SegSample sample;
    char id[32];
    std::snprintf(id, sizeof id, "synth_%04zu", idx);
    sample.id = id;
    sample.category = low_contrast ? Category::melanoma_like : Category::non_melanoma_like;
    for (double& v : rgb) v = std::clamp(v, 0.0, 1.0);
    sample.image = Tensor(Shape{1, 3, size, size}, std::move(rgb));
    sample.mask = Tensor(Shape{1, 1, size, size}, std::move(mask));
    out.push_back(std::move(sample));
  }
  return out;
}

// ---------------------------------------------------------------------------
// On-disk datasets: images/<id>.<ext>, masks/<id>.<ext>, manifest.csv

inline void write_dataset(const std::filesystem::path& dir, const std::vector<SegSample>& samples) {
  namespace fs = std::filesystem;
  fs::create_directories(dir / "images");
  fs::create_directories(dir / "masks");
  std::ofstream manifest(dir / "manifest.csv", std::ios::binary);
  if (!manifest) throw IngestError("cannot write " + (dir / "manifest.csv").string());
  manifest << "id,image_path,mask_path,category\n";
  const std::string ext = image_extension();
  for (const auto& s : samples) {
    const std::string image_rel = "images/" + s.id + "." + ext;
    const std::string mask_rel = "masks/" + s.id + "." + ext;
    write_image((dir / image_rel).string(), to_image8(s.image));
    write_image((dir / mask_rel).string(), to_image8(s.mask));
    manifest << s.id << "," << image_rel << "," << mask_rel << "," << category_name(s.category) << "\n";
  }
}

namespace detail {

inline std::string trim_field(std::string s) {
  while (!s.empty() && (s.back() == '\r' || s.back() == ' ' || s.back() == '\t')) s.pop_back();
  std::size_t b = 0;
  while (b < s.size() && (s[b] == ' ' || s[b] == '\t')) ++b;
  return s.substr(b);
}

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> fields;
  std::string cur;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char ch = line[i];
    if (quoted) {
      if (ch == '"' && i + 1 < line.size() && line[i + 1] == '"') {
        cur.push_back('"');
        ++i;
      } else if (ch == '"') {
        quoted = false;
      } else {
        cur.push_back(ch);
      }
    } else if (ch == '"') {
      quoted = true;
    } else if (ch == ',') {
      fields.push_back(trim_field(cur));
      cur.clear();
    } else {
      cur.push_back(ch);
    }
  }
  if (quoted) throw ParseError("unterminated quote");
  fields.push_back(trim_field(cur));
  return fields;
}

}  // namespace detail

/// Reads `<dir>/manifest.csv` (header: id,image_path,mask_path,category, any
/// order) and decodes every referenced image. Mask pixels > 127 become 1.
inline std::vector<SegSample> load_manifest(const std::filesystem::path& dir) {
  const auto path = dir / "manifest.csv";
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IngestError("cannot open " + path.string());
  std::vector<SegSample> out;
  std::string line;
  std::size_t lineno = 0;
  std::array<std::size_t, 4> col{};
  bool have_header = false;
  while (std::getline(is, line)) {
    ++lineno;
    if (lineno == 1 && line.size() >= 3 && line.compare(0, 3, "\xEF\xBB\xBF") == 0) line.erase(0, 3);
    if (detail::trim_field(line).empty()) continue;
    std::vector<std::string> f;
    try {
      f = detail::split_csv_line(line);
    } catch (const ParseError& e) {
      throw ParseError(path.string() + " line " + std::to_string(lineno) + ": " + e.what());
    }
    if (!have_header) {
      const std::array<const char*, 4> names{"id", "image_path", "mask_path", "category"};
      for (std::size_t k = 0; k < 4; ++k) {
        auto it = std::find(f.begin(), f.end(), names[k]);
        if (it == f.end()) {
          throw ParseError(path.string() + " line " + std::to_string(lineno) +
                           ": header lacks column '" + names[k] + "'");
        }
        col[k] = static_cast<std::size_t>(it - f.begin());
      }
      have_header = true;
      continue;
    }
    const std::size_t width = *std::max_element(col.begin(), col.end()) + 1;
    if (f.size() < width) {
      throw ParseError(path.string() + " line " + std::to_string(lineno) + ": expected " +
                       std::to_string(width) + " fields, found " + std::to_string(f.size()));
    }
    const std::size_t row = out.size() + 1;
    const std::string where = "manifest row " + std::to_string(row) + " (id '" + f[col[0]] + "')";
    SegSample s;
    s.id = f[col[0]];
    if (s.id.empty()) throw IngestError(where + ": empty id");
    if (!parse_category(f[col[3]], s.category)) {
      throw IngestError(where + ": unknown category '" + f[col[3]] + "'");
    }
    Image8 img;
    Image8 msk;
    try {
      img = read_image((dir / f[col[1]]).string());
      msk = read_image((dir / f[col[2]]).string());
    } catch (const ImageError& e) {
      throw IngestError(where + ": " + e.what());
    }
    if (img.width != msk.width || img.height != msk.height) {
      throw IngestError(where + ": image is " + std::to_string(img.width) + "x" +
                        std::to_string(img.height) + " but mask is " + std::to_string(msk.width) +
                        "x" + std::to_string(msk.height));
    }
    if (img.channels == 1) {
      Image8 rgb{img.width, img.height, 3, {}};
      rgb.pixels.reserve(img.pixels.size() * 3);
      for (auto p : img.pixels) rgb.pixels.insert(rgb.pixels.end(), {p, p, p});
      img = std::move(rgb);
    }
    s.image = to_tensor(img);
    Tensor m(Shape{1, 1, msk.height, msk.width});
    auto md = m.mutable_data();
    for (std::size_t i = 0; i < md.size(); ++i) md[i] = msk.pixels[i * msk.channels] > 127 ? 1.0 : 0.0;
    s.mask = m;
    out.push_back(std::move(s));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Augmentation

/// Flips, centre crop, rotation and output size for one draw.
struct AugmentDraw {
  bool hflip = false;
  bool vflip = false;
  double crop_scale = 1.0;
  double angle_deg = 0.0;
};

inline AugmentDraw draw_augment(const AugmentSpec& spec, Rng& rng) {
  // every field is drawn regardless of the toggles so the stream position
  // does not depend on which augmentations are on
  AugmentDraw d;
  const double u_h = detail::uniform(rng, 0.0, 1.0);
  const double u_v = detail::uniform(rng, 0.0, 1.0);
  const double u_c = detail::uniform(rng, spec.crop_min, spec.crop_max);
  const double u_r = detail::uniform(rng, 0.0, spec.rotate_max_deg);
  d.hflip = spec.hflip && u_h < spec.flip_probability;
  d.vflip = spec.vflip && u_v < spec.flip_probability;
  if (spec.crop) d.crop_scale = u_c;
  if (spec.rotate) d.angle_deg = u_r;
  return d;
}

/// Mirrors a (n,c,h,w) tensor along width (horizontal) or height.
inline Tensor flip(const Tensor& x, bool horizontal) {
  const Shape s = x.shape();
  Tensor out(s);
  auto o = out.mutable_data();
  for (std::size_t nc = 0; nc < s.n * s.c; ++nc) {
    for (std::size_t i = 0; i < s.h; ++i) {
      for (std::size_t j = 0; j < s.w; ++j) {
        const std::size_t si = horizontal ? i : s.h - 1 - i;
        const std::size_t sj = horizontal ? s.w - 1 - j : j;
        o[(nc * s.h + i) * s.w + j] = x[(nc * s.h + si) * s.w + sj];
      }
    }
  }
  return out;
}

/// Centre crop by `scale`, rotation about the centre, bilinear resample to
/// out x out. Points mapping outside the source read as 0.
inline Tensor crop_rotate_resize(const Tensor& x, double scale, double angle_deg, std::size_t out_h,
                                 std::size_t out_w) {
  const Shape s = x.shape();
  const double H = static_cast<double>(s.h);
  const double W = static_cast<double>(s.w);
  const double rad = angle_deg * std::numbers::pi / 180.0;
  const double cs = std::cos(rad);
  const double sn = std::sin(rad);
  Tensor out(Shape{s.n, s.c, out_h, out_w});
  auto o = out.mutable_data();
  for (std::size_t i = 0; i < out_h; ++i) {
    const double v = ((static_cast<double>(i) + 0.5) / static_cast<double>(out_h) - 0.5) * scale * H;
    for (std::size_t j = 0; j < out_w; ++j) {
      const double u = ((static_cast<double>(j) + 0.5) / static_cast<double>(out_w) - 0.5) * scale * W;
      const double sx = W / 2 + cs * u - sn * v - 0.5;
      const double sy = H / 2 + sn * u + cs * v - 0.5;
      if (sx < -0.5 || sx > W - 0.5 || sy < -0.5 || sy > H - 0.5) continue;
      const double cx = std::clamp(sx, 0.0, W - 1);
      const double cy = std::clamp(sy, 0.0, H - 1);
      const auto x0 = static_cast<std::size_t>(std::floor(cx));
      const auto y0 = static_cast<std::size_t>(std::floor(cy));
      const std::size_t x1 = std::min(x0 + 1, s.w - 1);
      const std::size_t y1 = std::min(y0 + 1, s.h - 1);
      const double fx = cx - static_cast<double>(x0);
      const double fy = cy - static_cast<double>(y0);
      for (std::size_t nc = 0; nc < s.n * s.c; ++nc) {
        const double* p = x.data().data() + nc * s.plane();
        double val = (1 - fy) * ((1 - fx) * p[y0 * s.w + x0] + fx * p[y0 * s.w + x1]);
        if (fy != 0.0) val += fy * ((1 - fx) * p[y1 * s.w + x0] + fx * p[y1 * s.w + x1]);
        o[(nc * out_h + i) * out_w + j] = val;
      }
    }
  }
  return out;
}

inline Tensor binarize(const Tensor& x, double threshold = 0.5) {
  Tensor out(x.shape());
  auto o = out.mutable_data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = x[i] >= threshold ? 1.0 : 0.0;
  return out;
}

/// Applies one geometric draw to image and mask alike; the mask is
/// resampled with the same bilinear map and re-binarized at 0.5.
inline SegSample apply_augment(const SegSample& sample, const AugmentDraw& d, std::size_t out_size) {
  SegSample r = sample;
  Tensor img = sample.image;
  Tensor msk = sample.mask;
  if (d.hflip) {
    img = flip(img, true);
    msk = flip(msk, true);
  }
  if (d.vflip) {
    img = flip(img, false);
    msk = flip(msk, false);
  }
  r.image = crop_rotate_resize(img, d.crop_scale, d.angle_deg, out_size, out_size);
  r.mask = binarize(crop_rotate_resize(msk, d.crop_scale, d.angle_deg, out_size, out_size));
  return r;
}

inline SegSample augment(const SegSample& sample, const AugmentSpec& spec, std::size_t out_size,
                         Rng& rng) {
  return apply_augment(sample, draw_augment(spec, rng), out_size);
}

/// Resize only (evaluation path).
inline SegSample resize_sample(const SegSample& sample, std::size_t out_size) {
  const Shape s = sample.image.shape();
  if (s.h == out_size && s.w == out_size) return sample;
  return apply_augment(sample, AugmentDraw{}, out_size);
}

/// Stacks samples into (B,3,h,w) images and (B,1,h,w) masks.
inline std::pair<Tensor, Tensor> stack_batch(const std::vector<SegSample>& samples) {
  if (samples.empty()) throw ShapeError("stack_batch: empty batch");
  const Shape is = samples.front().image.shape();
  const Shape ms = samples.front().mask.shape();
  Tensor images(Shape{samples.size(), is.c, is.h, is.w});
  Tensor masks(Shape{samples.size(), 1, ms.h, ms.w});
  auto id = images.mutable_data();
  auto md = masks.mutable_data();
  for (std::size_t b = 0; b < samples.size(); ++b) {
    if (samples[b].image.shape() != is || samples[b].mask.shape() != ms) {
      throw ShapeError("stack_batch: sample '" + samples[b].id + "' has a different size");
    }
    std::copy(samples[b].image.data().begin(), samples[b].image.data().end(),
              id.begin() + static_cast<std::ptrdiff_t>(b * is.numel()));
    std::copy(samples[b].mask.data().begin(), samples[b].mask.data().end(),
              md.begin() + static_cast<std::ptrdiff_t>(b * ms.numel()));
  }
  return {images, masks};
}

}  // namespace ccenet

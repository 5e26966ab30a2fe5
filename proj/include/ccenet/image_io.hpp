#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cctype>
#include <cstdio>
#include <fstream>
#include <iterator>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#ifdef CCENET_WITH_PNG
#include <png.h>
#endif

#include "ccenet/tensor.hpp"

namespace ccenet {

class ImageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// 8-bit interleaved raster, 1 (gray) or 3 (RGB) channels.
struct Image8 {
  std::size_t width = 0;
  std::size_t height = 0;
  std::size_t channels = 0;
  std::vector<std::uint8_t> pixels;

  friend bool operator==(const Image8&, const Image8&) = default;
};

inline std::uint8_t quantize_unit(double v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

/// Planar (1,c,h,w) tensor in [0,1] -> interleaved 8-bit raster.
inline Image8 to_image8(const Tensor& t, std::size_t batch_index = 0) {
  const Shape s = t.shape();
  Image8 img{s.w, s.h, s.c, {}};
  img.pixels.resize(s.c * s.h * s.w);
  for (std::size_t c = 0; c < s.c; ++c) {
    for (std::size_t i = 0; i < s.plane(); ++i) {
      img.pixels[i * s.c + c] = quantize_unit(t[(batch_index * s.c + c) * s.plane() + i]);
    }
  }
  return img;
}

/// Interleaved 8-bit raster -> planar (1,c,h,w) tensor scaled to [0,1].
inline Tensor to_tensor(const Image8& img) {
  Tensor t(Shape{1, img.channels, img.height, img.width});
  auto d = t.mutable_data();
  const std::size_t plane = img.width * img.height;
  for (std::size_t c = 0; c < img.channels; ++c) {
    for (std::size_t i = 0; i < plane; ++i) {
      d[c * plane + i] = img.pixels[i * img.channels + c] / 255.0;
    }
  }
  return t;
}

// ---------------------------------------------------------------------------
// Binary PGM (P5) / PPM (P6)

inline void write_pnm(const std::string& path, const Image8& img) {
  if (img.channels != 1 && img.channels != 3) throw ImageError("pnm supports 1 or 3 channels");
  std::ofstream os(path, std::ios::binary);
  if (!os) throw ImageError("cannot open '" + path + "' for writing");
  os << (img.channels == 1 ? "P5" : "P6") << "\n" << img.width << " " << img.height << "\n255\n";
  os.write(reinterpret_cast<const char*>(img.pixels.data()),
           static_cast<std::streamsize>(img.pixels.size()));
  if (!os) throw ImageError("write to '" + path + "' failed");
}

inline Image8 decode_pnm(const std::vector<std::uint8_t>& bytes, const std::string& what) {
  std::size_t pos = 0;
  auto token = [&]() {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(bytes[pos])) {
        ++pos;
      } else {
        break;
      }
    }
    std::string t;
    while (pos < bytes.size() && !std::isspace(bytes[pos]) && bytes[pos] != '#') {
      t.push_back(static_cast<char>(bytes[pos++]));
    }
    return t;
  };
  const std::string magic = token();
  if (magic != "P5" && magic != "P6") throw ImageError(what + ": not a binary PGM/PPM");
  Image8 img;
  img.channels = magic == "P5" ? 1 : 3;
  try {
    img.width = std::stoul(token());
    img.height = std::stoul(token());
    if (std::stoul(token()) != 255) throw ImageError(what + ": only maxval 255 is supported");
  } catch (const std::logic_error&) {
    throw ImageError(what + ": malformed header");
  }
  ++pos;  // single whitespace before the raster
  const std::size_t need = img.width * img.height * img.channels;
  if (img.width == 0 || img.height == 0 || bytes.size() < pos + need) {
    throw ImageError(what + ": truncated raster");
  }
  img.pixels.assign(bytes.begin() + static_cast<std::ptrdiff_t>(pos),
                    bytes.begin() + static_cast<std::ptrdiff_t>(pos + need));
  return img;
}

// ---------------------------------------------------------------------------
// PNG

#ifdef CCENET_WITH_PNG

inline void write_png(const std::string& path, const Image8& img) {
  if (img.channels != 1 && img.channels != 3) throw ImageError("png writer supports 1 or 3 channels");
  png_image pi{};
  pi.version = PNG_IMAGE_VERSION;
  pi.width = static_cast<png_uint_32>(img.width);
  pi.height = static_cast<png_uint_32>(img.height);
  pi.format = img.channels == 1 ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
  if (!png_image_write_to_file(&pi, path.c_str(), 0, img.pixels.data(), 0, nullptr)) {
    throw ImageError("png write '" + path + "': " + pi.message);
  }
}

inline Image8 decode_png(const std::vector<std::uint8_t>& bytes, const std::string& what) {
  png_image pi{};
  pi.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_memory(&pi, bytes.data(), bytes.size())) {
    throw ImageError(what + ": " + pi.message);
  }
  const bool gray = (pi.format & PNG_FORMAT_FLAG_COLOR) == 0;
  pi.format = gray ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
  Image8 img;
  img.width = pi.width;
  img.height = pi.height;
  img.channels = gray ? 1 : 3;
  img.pixels.resize(PNG_IMAGE_SIZE(pi));
  if (!png_image_finish_read(&pi, nullptr, img.pixels.data(), 0, nullptr)) {
    png_image_free(&pi);
    throw ImageError(what + ": " + pi.message);
  }
  return img;
}

#endif

inline bool png_supported() {
#ifdef CCENET_WITH_PNG
  return true;
#else
  return false;
#endif
}

inline std::vector<std::uint8_t> read_file_bytes(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ImageError("cannot open '" + path + "'");
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(is), {});
}

/// Decodes PNG or binary PNM, chosen by the file signature.
inline Image8 read_image(const std::string& path) {
  const auto bytes = read_file_bytes(path);
  if (bytes.size() >= 8 && bytes[0] == 0x89 && bytes[1] == 'P' && bytes[2] == 'N' && bytes[3] == 'G') {
#ifdef CCENET_WITH_PNG
    return decode_png(bytes, path);
#else
    throw ImageError(path + ": PNG support not compiled in");
#endif
  }
  if (bytes.size() >= 2 && bytes[0] == 'P') return decode_pnm(bytes, path);
  throw ImageError(path + ": unrecognized image format");
}

/// Encodes by extension: .png, .pgm/.ppm/.pnm.
inline void write_image(const std::string& path, const Image8& img) {
  const auto dot = path.rfind('.');
  const std::string ext = dot == std::string::npos ? "" : path.substr(dot + 1);
  if (ext == "png") {
#ifdef CCENET_WITH_PNG
    write_png(path, img);
    return;
#else
    throw ImageError(path + ": PNG support not compiled in");
#endif
  }
  if (ext == "pgm" || ext == "ppm" || ext == "pnm") {
    write_pnm(path, img);
    return;
  }
  throw ImageError(path + ": unsupported image extension");
}

/// Preferred extension for emitted images.
inline const char* image_extension() { return png_supported() ? "png" : "pnm"; }

}  // namespace ccenet

#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>

#include "ccenet/config.hpp"
#include "ccenet/layers.hpp"

// Checkpoint container, all integers little-endian:
//
//   magic    8 bytes  "CCENETCK"
//   version  u32      (1)
//   cfg_len  u64      then cfg_len bytes of `key = value` config text
//   count    u32      number of tensors
//   count x { name_len u32, name bytes, n c h w as u32, n*c*h*w f64 }

namespace ccenet {

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr char kCheckpointMagic[8] = {'C', 'C', 'E', 'N', 'E', 'T', 'C', 'K'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  std::string config_text;
  std::map<std::string, Tensor> tensors;

  ModelConfig config() const { return ModelConfig::from_text(config_text); }
};

namespace detail {

inline void put_u32(std::ostream& os, std::uint32_t v) {
  char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xffu);
  os.write(b, 4);
}

inline void put_u64(std::ostream& os, std::uint64_t v) {
  char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xffu);
  os.write(b, 8);
}

inline std::uint64_t get_le(std::istream& is, int bytes) {
  unsigned char b[8] = {};
  is.read(reinterpret_cast<char*>(b), bytes);
  if (!is) throw CheckpointError("checkpoint truncated");
  std::uint64_t v = 0;
  for (int i = bytes - 1; i >= 0; --i) v = (v << 8) | b[i];
  return v;
}

}  // namespace detail

inline void save_checkpoint(const std::string& path, const ModelConfig& config,
                            const TensorList& state) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw CheckpointError("cannot open '" + path + "' for writing");
  os.write(kCheckpointMagic, 8);
  detail::put_u32(os, kCheckpointVersion);
  const std::string text = config.to_text();
  detail::put_u64(os, text.size());
  os.write(text.data(), static_cast<std::streamsize>(text.size()));
  detail::put_u32(os, static_cast<std::uint32_t>(state.size()));
  for (const auto& [name, t] : state) {
    detail::put_u32(os, static_cast<std::uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    const Shape s = t.shape();
    for (std::size_t d : {s.n, s.c, s.h, s.w}) detail::put_u32(os, static_cast<std::uint32_t>(d));
    for (double v : t.data()) detail::put_u64(os, std::bit_cast<std::uint64_t>(v));
  }
  if (!os) throw CheckpointError("write to '" + path + "' failed");
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw CheckpointError("cannot open checkpoint '" + path + "'");
  char magic[8];
  is.read(magic, 8);
  if (!is || std::memcmp(magic, kCheckpointMagic, 8) != 0) {
    throw CheckpointError("'" + path + "' is not a checkpoint");
  }
  const auto version = detail::get_le(is, 4);
  if (version != kCheckpointVersion) {
    throw CheckpointError("unsupported checkpoint version " + std::to_string(version));
  }
  Checkpoint ck;
  const auto cfg_len = detail::get_le(is, 8);
  if (cfg_len > (1u << 20)) throw CheckpointError("checkpoint config block too large");
  ck.config_text.resize(cfg_len);
  is.read(ck.config_text.data(), static_cast<std::streamsize>(cfg_len));
  const auto count = detail::get_le(is, 4);
  for (std::uint64_t i = 0; i < count; ++i) {
    const auto name_len = detail::get_le(is, 4);
    if (name_len > 4096) throw CheckpointError("checkpoint tensor name too long");
    std::string name(name_len, '\0');
    is.read(name.data(), static_cast<std::streamsize>(name_len));
    Shape s;
    s.n = detail::get_le(is, 4);
    s.c = detail::get_le(is, 4);
    s.h = detail::get_le(is, 4);
    s.w = detail::get_le(is, 4);
    if (s.numel() > (std::size_t{1} << 32)) throw CheckpointError("tensor '" + name + "' too large");
    Tensor t(s);
    for (double& v : t.mutable_data()) v = std::bit_cast<double>(detail::get_le(is, 8));
    if (!ck.tensors.emplace(name, t).second) {
      throw CheckpointError("duplicate tensor '" + name + "' in checkpoint");
    }
  }
  return ck;
}

}  // namespace ccenet

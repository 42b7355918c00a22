// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <zlib.h>

#include "wnet/config.hpp"

namespace wnet {

inline constexpr char kCheckpointMagic[4] = {'W', 'N', 'E', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Ordered (name, tensor) list of one section.
using TensorSection = std::vector<std::pair<std::string, Tensor<float>>>;

/// Complete trainer state: parameters, optimizer moments, counters, RNG
/// streams and the configuration that produced them.
struct Checkpoint {
  TrainConfig config;
  Index epoch = 0;
  Index iteration = 0;
  Index generator_steps = 0;
  Index critic_steps = 0;
  std::string sample_rng;
  std::string noise_rng;
  /// Tensor sections: generator, critic, phi, adam_g.m, adam_g.v, adam_d.m, adam_d.v.
  std::map<std::string, TensorSection> tensors;

  const TensorSection& section(const std::string& name) const {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw CheckpointError("checkpoint has no section '" + name + "'");
    return it->second;
  }
};

template <class T>
TensorSection snapshot_parameters(const ParameterSet<T>& params) {
  TensorSection out;
  for (const auto& p : params) {
    Tensor<float> t(p.value.shape());
    for (Index i = 0; i < t.size(); ++i) t[i] = static_cast<float>(p.value[i]);
    out.emplace_back(p.name, std::move(t));
  }
  return out;
}

/// Verifies names and shapes of every entry before assigning any of them.
template <class T>
void restore_parameters(const TensorSection& section, ParameterSet<T>& params, const std::string& label) {
  if (section.size() != params.size()) {
    throw CheckpointError(label + ": checkpoint holds " + std::to_string(section.size()) + " tensors, model has " +
                          std::to_string(params.size()));
  }
  for (const auto& [name, t] : section) {
    if (!params.contains(name)) throw CheckpointError(label + ": unknown tensor '" + name + "'");
    const auto& want = params.at(name).value.shape();
    if (t.shape() != want) {
      throw CheckpointError(label + ": shape mismatch for '" + name + "': checkpoint " + to_string(t.shape()) +
                            ", model " + to_string(want));
    }
  }
  for (const auto& [name, t] : section) {
    auto& dst = params.at(name).value;
    for (Index i = 0; i < t.size(); ++i) dst[i] = static_cast<T>(t[i]);
  }
}

namespace detail {

class ByteWriter {
 public:
  void u8(std::uint8_t v) { bytes_.push_back(static_cast<char>(v)); }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) u8(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) u8(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
  void raw(const std::string& s) { bytes_.append(s); }
  void str(const std::string& s) {
    u32(static_cast<std::uint32_t>(s.size()));
    raw(s);
  }
  const std::string& bytes() const noexcept { return bytes_; }

 private:
  std::string bytes_;
};

class ByteReader {
 public:
  ByteReader(const char* data, std::size_t size, std::string what) : p_(data), end_(data + size), what_(std::move(what)) {}

  std::uint8_t u8() {
    need(1);
    return static_cast<std::uint8_t>(*p_++);
  }
  std::uint32_t u32() {
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(u8()) << (8 * i);
    return v;
  }
  std::uint64_t u64() {
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(u8()) << (8 * i);
    return v;
  }
  float f32() { return std::bit_cast<float>(u32()); }
  std::string raw(std::size_t n) {
    need(n);
    std::string s(p_, n);
    p_ += n;
    return s;
  }
  std::string str() { return raw(u32()); }
  std::size_t remaining() const noexcept { return static_cast<std::size_t>(end_ - p_); }
  bool done() const noexcept { return p_ == end_; }

 private:
  void need(std::size_t n) const {
    if (remaining() < n) throw CheckpointError("truncated checkpoint: " + what_);
  }
  const char* p_;
  const char* end_;
  std::string what_;
};

inline std::uint32_t crc32_of(const std::string& bytes) {
  return static_cast<std::uint32_t>(
      ::crc32(0L, reinterpret_cast<const Bytef*>(bytes.data()), static_cast<uInt>(bytes.size())));
}

inline std::string encode_tensors(const TensorSection& section) {
  ByteWriter w;
  w.u32(static_cast<std::uint32_t>(section.size()));
  for (const auto& [name, t] : section) {
    w.str(name);
    w.u32(static_cast<std::uint32_t>(t.shape().size()));
    for (Index d : t.shape()) w.u64(static_cast<std::uint64_t>(d));
    for (Index i = 0; i < t.size(); ++i) w.f32(t[i]);
  }
  return w.bytes();
}

inline TensorSection decode_tensors(const std::string& payload, const std::string& label) {
  ByteReader r(payload.data(), payload.size(), "section '" + label + "'");
  TensorSection out;
  const std::uint32_t count = r.u32();
  for (std::uint32_t k = 0; k < count; ++k) {
    std::string name = r.str();
    const std::uint32_t rank = r.u32();
    if (rank > 8) throw CheckpointError("section '" + label + "': implausible rank for '" + name + "'");
    Shape shape;
    std::uint64_t n = 1;
    for (std::uint32_t d = 0; d < rank; ++d) {
      const std::uint64_t e = r.u64();
      if (e > (std::uint64_t{1} << 40)) throw CheckpointError("section '" + label + "': implausible extent");
      shape.push_back(static_cast<Index>(e));
      n *= e;
    }
    if (n * 4 > r.remaining()) throw CheckpointError("truncated checkpoint: tensor '" + name + "'");
    Tensor<float> t(shape);
    for (Index i = 0; i < t.size(); ++i) t[i] = r.f32();
    out.emplace_back(std::move(name), std::move(t));
  }
  if (!r.done()) throw CheckpointError("section '" + label + "' has trailing bytes");
  return out;
}

}  // namespace detail

/// Serializes a checkpoint: "WNET", version, section count, then per section
/// its name, payload length, CRC-32 and payload. Integers and floats are
/// little-endian.
inline std::string encode_checkpoint(const Checkpoint& ck) {
  std::vector<std::pair<std::string, std::string>> sections;
  sections.emplace_back("config", to_json_text(ck.config));
  const nlohmann::json state{{"epoch", ck.epoch},
                             {"iteration", ck.iteration},
                             {"generator_steps", ck.generator_steps},
                             {"critic_steps", ck.critic_steps},
                             {"sample_rng", ck.sample_rng},
                             {"noise_rng", ck.noise_rng}};
  sections.emplace_back("state", state.dump());
  for (const auto& [name, t] : ck.tensors) sections.emplace_back("tensors:" + name, detail::encode_tensors(t));

  detail::ByteWriter w;
  w.raw(std::string(kCheckpointMagic, 4));
  w.u32(kCheckpointVersion);
  w.u32(static_cast<std::uint32_t>(sections.size()));
  for (const auto& [name, payload] : sections) {
    w.str(name);
    w.u64(payload.size());
    w.u32(detail::crc32_of(payload));
    w.raw(payload);
  }
  return w.bytes();
}

inline Checkpoint decode_checkpoint(const std::string& bytes) {
  detail::ByteReader r(bytes.data(), bytes.size(), "header");
  if (r.raw(4) != std::string(kCheckpointMagic, 4)) throw CheckpointError("not a checkpoint (bad magic)");
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion) {
    throw CheckpointError("unsupported checkpoint version " + std::to_string(version) + " (expected " +
                          std::to_string(kCheckpointVersion) + ")");
  }
  const std::uint32_t count = r.u32();
  std::map<std::string, std::string> payloads;
  for (std::uint32_t s = 0; s < count; ++s) {
    const std::string name = r.str();
    const std::uint64_t len = r.u64();
    const std::uint32_t crc = r.u32();
    if (len > r.remaining()) throw CheckpointError("truncated checkpoint: section '" + name + "'");
    std::string payload = r.raw(static_cast<std::size_t>(len));
    if (detail::crc32_of(payload) != crc) throw CheckpointError("checksum mismatch in section '" + name + "'");
    if (!payloads.emplace(name, std::move(payload)).second) throw CheckpointError("duplicate section '" + name + "'");
  }
  if (!r.done()) throw CheckpointError("trailing bytes after last section");

  Checkpoint ck;
  auto take = [&](const std::string& name) -> const std::string& {
    auto it = payloads.find(name);
    if (it == payloads.end()) throw CheckpointError("checkpoint has no section '" + name + "'");
    return it->second;
  };
  try {
    ck.config = train_config_from_json(take("config"));
    const auto state = nlohmann::json::parse(take("state"));
    ck.epoch = state.at("epoch").get<Index>();
    ck.iteration = state.at("iteration").get<Index>();
    ck.generator_steps = state.at("generator_steps").get<Index>();
    ck.critic_steps = state.at("critic_steps").get<Index>();
    ck.sample_rng = state.at("sample_rng").get<std::string>();
    ck.noise_rng = state.at("noise_rng").get<std::string>();
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("malformed state section: ") + e.what());
  } catch (const ConfigError& e) {
    throw CheckpointError(e.what());
  }
  for (const auto& [name, payload] : payloads) {
    if (name.rfind("tensors:", 0) == 0) {
      const std::string label = name.substr(8);
      ck.tensors.emplace(label, detail::decode_tensors(payload, label));
    }
  }
  return ck;
}

/// Writes through a temporary file renamed into place.
inline void save_checkpoint(const Checkpoint& ck, const std::filesystem::path& path) {
  const std::string bytes = encode_checkpoint(ck);
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw CheckpointError("cannot write " + tmp.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw CheckpointError("write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint " + path.string());
  const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_checkpoint(bytes);
}

/// Epoch counter of a checkpoint file, read without decoding its tensors.
inline Index read_checkpoint_epoch(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint " + path.string());
  auto read = [&](std::size_t n) {
    std::string s(n, '\0');
    if (!in.read(s.data(), static_cast<std::streamsize>(n))) throw CheckpointError("truncated checkpoint " + path.string());
    return s;
  };
  auto u32 = [&] { return detail::ByteReader(read(4).data(), 4, "header").u32(); };
  auto u64 = [&] {
    const std::string b = read(8);
    return detail::ByteReader(b.data(), 8, "header").u64();
  };
  if (read(4) != std::string(kCheckpointMagic, 4)) throw CheckpointError("not a checkpoint (bad magic)");
  if (const auto v = u32(); v != kCheckpointVersion) throw CheckpointError("unsupported checkpoint version " + std::to_string(v));
  const std::uint32_t count = u32();
  for (std::uint32_t s = 0; s < count; ++s) {
    const std::string name = read(u32());
    const std::uint64_t len = u64();
    const std::uint32_t crc = u32();
    if (name != "state") {
      in.seekg(static_cast<std::streamoff>(len), std::ios::cur);
      continue;
    }
    const std::string payload = read(static_cast<std::size_t>(len));
    if (detail::crc32_of(payload) != crc) throw CheckpointError("checksum mismatch in section 'state'");
    try {
      return nlohmann::json::parse(payload).at("epoch").get<Index>();
    } catch (const nlohmann::json::exception& e) {
      throw CheckpointError(std::string("malformed state section: ") + e.what());
    }
  }
  throw CheckpointError("checkpoint has no section 'state'");
}

}  // namespace wnet

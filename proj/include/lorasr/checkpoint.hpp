// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "lorasr/network.hpp"
#include "lorasr/tensor.hpp"

namespace lorasr {

enum class TensorRole : std::uint8_t {
  FrozenBase = 0,
  Lora = 1,
  Ema = 2,
};

std::string role_name(TensorRole role);

struct CheckpointEntry {
  std::string name;
  TensorRole role = TensorRole::FrozenBase;
  TensorF tensor;
};

/// Named-tensor container.
///
/// Binary layout, all integers little-endian:
///
///     magic       8 bytes  "LORASRCK"
///     version     u32      1
///     header_len  u32      followed by header_len bytes of "key=value\n" lines
///     count       u32      number of table records
///     record      count times:
///                   name_len u32, name bytes, role u8, dtype u8 (0 = f32),
///                   ndim u16, dims u64[ndim], offset u64, nbytes u64
///     payload_len u64      followed by the payload
///
/// Offsets are relative to the payload start; records are laid out in table
/// order without gaps, so loading and re-saving reproduces the file exactly.
struct Checkpoint {
  static constexpr std::uint32_t kVersion = 1;

  std::vector<std::pair<std::string, std::string>> header;
  std::vector<CheckpointEntry> tensors;

  std::optional<std::string> header_value(const std::string& key) const;
  void set_header(const std::string& key, const std::string& value);
  const CheckpointEntry* find(const std::string& name) const;
  void add(std::string name, TensorRole role, TensorF tensor);
  Index parameter_count(std::optional<TensorRole> role = std::nullopt) const;

  std::vector<std::uint8_t> serialize() const;
  static Checkpoint deserialize(std::span<const std::uint8_t> bytes);
  void save(const std::filesystem::path& path) const;
  static Checkpoint load(const std::filesystem::path& path);
};

/// Writes every base tensor (role frozen-base), LoRA factor (role lora) and,
/// if given, EMA shadows (role ema, named "<name>.ema") plus the model config
/// and per-layer "lora.<layer>" = "rank,alpha" header entries.
Checkpoint model_to_checkpoint(const SpanModel<float>& model, const NamedTensors<float>* ema = nullptr);

ModelConfig config_from_checkpoint(const Checkpoint& ckpt);

/// Rebuilds a model (with its adapters) from a checkpoint.
SpanModel<float> model_from_checkpoint(const Checkpoint& ckpt);

/// Copies base kernels/biases from `ckpt` into `model`; adapters are left alone.
void load_pretrained(SpanModel<float>& model, const Checkpoint& ckpt);

NamedTensors<float> ema_from_checkpoint(const Checkpoint& ckpt);

/// SHA-256 over the names, shapes and bytes of every frozen tensor of a model.
std::string frozen_digest(const SpanModel<float>& model);

std::string sha256_hex(std::span<const std::uint8_t> bytes);

}  // namespace lorasr

// SPDX-License-Identifier: Apache-2.0
#include "lorasr/checkpoint.hpp"

#include <openssl/evp.h>

#include <bit>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <iterator>
#include <set>
#include <sstream>

#include "lorasr/error.hpp"

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace lorasr {

namespace {

constexpr char kMagic[8] = {'L', 'O', 'R', 'A', 'S', 'R', 'C', 'K'};

class Writer {
 public:
  template <typename T>
  void put(T value) {
    const auto* p = reinterpret_cast<const std::uint8_t*>(&value);
    bytes.insert(bytes.end(), p, p + sizeof(T));
  }
  void put_bytes(const void* data, std::size_t n) {
    const auto* p = static_cast<const std::uint8_t*>(data);
    bytes.insert(bytes.end(), p, p + n);
  }
  std::vector<std::uint8_t> bytes;
};

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> b) : bytes_(b) {}
  template <typename T>
  T get() {
    T value;
    std::memcpy(&value, take(sizeof(T)), sizeof(T));
    return value;
  }
  const std::uint8_t* take(std::size_t n) {
    if (n > bytes_.size() - pos_) throw IoError("checkpoint truncated at byte " + std::to_string(pos_));
    const std::uint8_t* p = bytes_.data() + pos_;
    pos_ += n;
    return p;
  }
  std::size_t remaining() const { return bytes_.size() - pos_; }

 private:
  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

const char* sigma_name(SymmetricActivation a) {
  return a == SymmetricActivation::ShiftedSigmoid ? "shifted_sigmoid" : "tanh";
}

}  // namespace

std::string role_name(TensorRole role) {
  switch (role) {
    case TensorRole::FrozenBase:
      return "frozen-base";
    case TensorRole::Lora:
      return "lora";
    case TensorRole::Ema:
      return "ema";
  }
  return "unknown";
}

std::optional<std::string> Checkpoint::header_value(const std::string& key) const {
  for (const auto& [k, v] : header)
    if (k == key) return v;
  return std::nullopt;
}

void Checkpoint::set_header(const std::string& key, const std::string& value) {
  if (key.find_first_of("=\n") != std::string::npos || value.find('\n') != std::string::npos)
    throw ConfigError("invalid checkpoint header entry '" + key + "'");
  for (auto& [k, v] : header)
    if (k == key) {
      v = value;
      return;
    }
  header.emplace_back(key, value);
}

const CheckpointEntry* Checkpoint::find(const std::string& name) const {
  for (const auto& e : tensors)
    if (e.name == name) return &e;
  return nullptr;
}

void Checkpoint::add(std::string name, TensorRole role, TensorF tensor) {
  if (find(name)) throw ConfigError("duplicate checkpoint tensor '" + name + "'");
  tensors.push_back({std::move(name), role, std::move(tensor)});
}

Index Checkpoint::parameter_count(std::optional<TensorRole> role) const {
  Index n = 0;
  for (const auto& e : tensors)
    if (!role || e.role == *role) n += e.tensor.numel();
  return n;
}

std::vector<std::uint8_t> Checkpoint::serialize() const {
  Writer w;
  w.put_bytes(kMagic, sizeof kMagic);
  w.put<std::uint32_t>(kVersion);
  std::string text;
  for (const auto& [k, v] : header) text += k + "=" + v + "\n";
  w.put<std::uint32_t>(static_cast<std::uint32_t>(text.size()));
  w.put_bytes(text.data(), text.size());
  w.put<std::uint32_t>(static_cast<std::uint32_t>(tensors.size()));
  std::uint64_t offset = 0;
  for (const auto& e : tensors) {
    w.put<std::uint32_t>(static_cast<std::uint32_t>(e.name.size()));
    w.put_bytes(e.name.data(), e.name.size());
    w.put<std::uint8_t>(static_cast<std::uint8_t>(e.role));
    w.put<std::uint8_t>(0);
    w.put<std::uint16_t>(static_cast<std::uint16_t>(e.tensor.rank()));
    for (Index d : e.tensor.shape()) w.put<std::uint64_t>(static_cast<std::uint64_t>(d));
    const std::uint64_t nbytes = static_cast<std::uint64_t>(e.tensor.numel()) * sizeof(float);
    w.put<std::uint64_t>(offset);
    w.put<std::uint64_t>(nbytes);
    offset += nbytes;
  }
  w.put<std::uint64_t>(offset);
  for (const auto& e : tensors) w.put_bytes(e.tensor.data(), static_cast<std::size_t>(e.tensor.numel()) * sizeof(float));
  return std::move(w.bytes);
}

Checkpoint Checkpoint::deserialize(std::span<const std::uint8_t> bytes) {
  Reader r(bytes);
  if (std::memcmp(r.take(sizeof kMagic), kMagic, sizeof kMagic) != 0) throw IoError("not a checkpoint (bad magic)");
  const auto version = r.get<std::uint32_t>();
  if (version != kVersion) throw IoError("unsupported checkpoint version " + std::to_string(version));

  Checkpoint ckpt;
  const auto header_len = r.get<std::uint32_t>();
  const std::string text(reinterpret_cast<const char*>(r.take(header_len)), header_len);
  std::istringstream lines(text);
  for (std::string line; std::getline(lines, line);) {
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw IoError("malformed checkpoint header line '" + line + "'");
    ckpt.header.emplace_back(line.substr(0, eq), line.substr(eq + 1));
  }

  struct Record {
    CheckpointEntry entry;
    std::uint64_t offset, nbytes;
  };
  std::vector<Record> records;
  const auto count = r.get<std::uint32_t>();
  for (std::uint32_t i = 0; i < count; ++i) {
    Record rec;
    const auto name_len = r.get<std::uint32_t>();
    rec.entry.name.assign(reinterpret_cast<const char*>(r.take(name_len)), name_len);
    const auto role = r.get<std::uint8_t>();
    if (role > 2) throw IoError("tensor '" + rec.entry.name + "' has unknown role " + std::to_string(role));
    rec.entry.role = static_cast<TensorRole>(role);
    if (r.get<std::uint8_t>() != 0) throw IoError("tensor '" + rec.entry.name + "' has unsupported dtype");
    const auto ndim = r.get<std::uint16_t>();
    Shape shape;
    for (std::uint16_t d = 0; d < ndim; ++d) shape.push_back(static_cast<Index>(r.get<std::uint64_t>()));
    rec.offset = r.get<std::uint64_t>();
    rec.nbytes = r.get<std::uint64_t>();
    try {
      rec.entry.tensor = TensorF(shape);
    } catch (const ShapeError& e) {
      throw IoError("tensor '" + rec.entry.name + "': " + e.what());
    }
    if (rec.nbytes != static_cast<std::uint64_t>(rec.entry.tensor.numel()) * sizeof(float))
      throw IoError("tensor '" + rec.entry.name + "' byte count inconsistent with its shape");
    records.push_back(std::move(rec));
  }
  const auto payload_len = r.get<std::uint64_t>();
  if (payload_len != r.remaining()) throw IoError("checkpoint payload length mismatch");
  const std::uint8_t* payload = r.take(payload_len);
  std::uint64_t expected = 0;
  for (auto& rec : records) {
    if (rec.offset != expected || rec.offset + rec.nbytes > payload_len)
      throw IoError("tensor '" + rec.entry.name + "' has overlapping or out-of-range offset");
    std::memcpy(rec.entry.tensor.data(), payload + rec.offset, rec.nbytes);
    expected += rec.nbytes;
    if (ckpt.find(rec.entry.name)) throw IoError("duplicate tensor '" + rec.entry.name + "' in checkpoint");
    ckpt.tensors.push_back(std::move(rec.entry));
  }
  return ckpt;
}

void Checkpoint::save(const std::filesystem::path& path) const {
  const auto bytes = serialize();
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("failed writing '" + path.string() + "'");
}

Checkpoint Checkpoint::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint '" + path.string() + "'");
  const std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  try {
    return deserialize(bytes);
  } catch (const IoError& e) {
    throw IoError(path.string() + ": " + e.what());
  }
}

Checkpoint model_to_checkpoint(const SpanModel<float>& model, const NamedTensors<float>* ema) {
  Checkpoint ckpt;
  const ModelConfig& cfg = model.config;
  ckpt.set_header("model.channels", std::to_string(cfg.channels));
  ckpt.set_header("model.scale", std::to_string(cfg.scale));
  ckpt.set_header("model.blocks", std::to_string(cfg.num_blocks));
  ckpt.set_header("model.sigma_a", sigma_name(cfg.sigma_a));
  ckpt.set_header("model.block_bias", cfg.block_bias ? "1" : "0");
  for (const auto* l : model.layers())
    if (l->adapter)
      ckpt.set_header("lora." + l->name,
                      std::to_string(l->adapter->rank) + "," + format_double(l->adapter->alpha));
  for_each_named_tensor(model, [&](const std::string& name, const TensorF& t, bool is_lora) {
    ckpt.add(name, is_lora ? TensorRole::Lora : TensorRole::FrozenBase, t);
  });
  if (ema)
    for (const auto& [name, t] : *ema) ckpt.add(name + ".ema", TensorRole::Ema, t);
  return ckpt;
}

ModelConfig config_from_checkpoint(const Checkpoint& ckpt) {
  auto required = [&](const std::string& key) {
    auto v = ckpt.header_value(key);
    if (!v) throw IoError("checkpoint header lacks '" + key + "'");
    return *v;
  };
  ModelConfig cfg;
  try {
    cfg.channels = std::stol(required("model.channels"));
    cfg.scale = std::stol(required("model.scale"));
    cfg.num_blocks = std::stoi(required("model.blocks"));
  } catch (const std::logic_error&) {
    throw IoError("checkpoint header has a non-numeric model field");
  }
  const auto sigma = ckpt.header_value("model.sigma_a").value_or("shifted_sigmoid");
  if (sigma == "shifted_sigmoid")
    cfg.sigma_a = SymmetricActivation::ShiftedSigmoid;
  else if (sigma == "tanh")
    cfg.sigma_a = SymmetricActivation::Tanh;
  else
    throw IoError("unknown model.sigma_a '" + sigma + "' in checkpoint");
  cfg.block_bias = ckpt.header_value("model.block_bias").value_or("0") == "1";
  LoraPlan plan;
  for (const auto& [k, v] : ckpt.header) {
    if (k.rfind("lora.", 0) != 0) continue;
    const auto comma = v.find(',');
    if (comma == std::string::npos) throw IoError("malformed LoRA header '" + k + "=" + v + "'");
    plan[k.substr(5)] = LoraSpec{std::stoi(v.substr(0, comma)), std::stod(v.substr(comma + 1))};
  }
  if (!plan.empty()) cfg.lora_plan = plan;
  cfg.validate();
  return cfg;
}

void load_pretrained(SpanModel<float>& model, const Checkpoint& ckpt) {
  auto fetch = [&](const std::string& name, TensorF& target) {
    const CheckpointEntry* e = ckpt.find(name);
    if (!e) throw ConfigError("checkpoint is missing tensor '" + name + "'");
    if (e->tensor.shape() != target.shape())
      throw ShapeError("tensor '" + name + "' has shape " + shape_string(e->tensor.shape()) + " in checkpoint but " +
                       shape_string(target.shape()) + " in model");
    target = e->tensor;
  };
  for (auto* l : model.layers()) {
    fetch(l->name + ".kernel", l->base().kernel);
    if (l->base().bias) fetch(l->name + ".bias", *l->base().bias);
  }
}

SpanModel<float> model_from_checkpoint(const Checkpoint& ckpt) {
  const ModelConfig cfg = config_from_checkpoint(ckpt);
  ModelConfig base_cfg = cfg;
  base_cfg.lora_plan.reset();
  SpanModel<float> model = build_model<float>(base_cfg, 0);
  load_pretrained(model, ckpt);
  if (cfg.lora_plan) {
    install_adapters(model, *cfg.lora_plan, 0);
    NamedTensors<float> factors;
    for (const auto& [name, t] : trainable_tensors(model)) {
      const CheckpointEntry* e = ckpt.find(name);
      if (!e) throw ConfigError("checkpoint is missing tensor '" + name + "'");
      factors.emplace(name, e->tensor);
    }
    assign_trainable(model, factors);
  }
  return model;
}

NamedTensors<float> ema_from_checkpoint(const Checkpoint& ckpt) {
  NamedTensors<float> out;
  for (const auto& e : ckpt.tensors)
    if (e.role == TensorRole::Ema) {
      const std::string suffix = ".ema";
      std::string name = e.name;
      if (name.size() > suffix.size() && name.compare(name.size() - suffix.size(), suffix.size(), suffix) == 0)
        name.resize(name.size() - suffix.size());
      out.emplace(name, e.tensor);
    }
  return out;
}

std::string sha256_hex(std::span<const std::uint8_t> bytes) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (!EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr))
    throw Error("SHA-256 computation failed");
  static const char* hex = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < len; ++i) {
    out += hex[digest[i] >> 4];
    out += hex[digest[i] & 0xF];
  }
  return out;
}

std::string frozen_digest(const SpanModel<float>& model) {
  Checkpoint frozen;
  for_each_named_tensor(model, [&](const std::string& name, const TensorF& t, bool is_lora) {
    if (!is_lora) frozen.add(name, TensorRole::FrozenBase, t);
  });
  return sha256_hex(frozen.serialize());
}

}  // namespace lorasr

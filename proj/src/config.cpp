// SPDX-License-Identifier: Apache-2.0
#include "lorasr/config.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <map>

#include "lorasr/error.hpp"

namespace lorasr {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

template <typename T>
T parse_number(const std::string& key, const std::string& value) {
  T out{};
  const char* first = value.data();
  const char* last = first + value.size();
  const auto r = std::from_chars(first, last, out);
  if (r.ec != std::errc() || r.ptr != last)
    throw ConfigError("config key '" + key + "': cannot parse '" + value + "' as a number");
  return out;
}

LoraSpec parse_spec(const std::string& key, const std::string& value) {
  const auto comma = value.find(',');
  if (comma == std::string::npos) throw ConfigError("config key '" + key + "': expected 'rank,alpha'");
  return {parse_number<int>(key, trim(value.substr(0, comma))), parse_number<double>(key, trim(value.substr(comma + 1)))};
}

}  // namespace

FeatureLoss parse_feature_loss(const std::string& s) {
  if (s == "affinity") return FeatureLoss::Affinity;
  if (s == "l1_aligned") return FeatureLoss::L1Aligned;
  if (s == "none") return FeatureLoss::None;
  throw ConfigError("unknown feature loss '" + s + "' (expected affinity, l1_aligned or none)");
}

void TrainConfig::validate(Index scale) const {
  for (std::size_t i = 0; i < stages.size(); ++i) {
    const StageConfig& s = stages[i];
    const std::string tag = "train.stage" + std::to_string(i + 1);
    if (s.patch_hr < 1 || s.patch_hr % scale != 0)
      throw ConfigError(tag + ".patch = " + std::to_string(s.patch_hr) + " must be a positive multiple of the scale " +
                        std::to_string(scale));
    if (s.patch_hr / scale < 3) throw ConfigError(tag + ".patch too small for 3x3 convolutions at this scale");
    if (s.batch < 1) throw ConfigError(tag + ".batch must be >= 1");
    if (s.iters < 0) throw ConfigError(tag + ".iters must be >= 0");
    if (!(s.lr > 0.0)) throw ConfigError(tag + ".lr must be positive");
  }
  if (ema_decay < 0.0 || ema_decay > 1.0) throw ConfigError("ema.decay must lie in [0, 1]");
  if (blend_beta < 0.0 || blend_beta > 1.0) throw ConfigError("finalize.beta must lie in [0, 1]");
  if (!(adam.beta1 >= 0.0 && adam.beta1 < 1.0) || !(adam.beta2 >= 0.0 && adam.beta2 < 1.0))
    throw ConfigError("adam betas must lie in [0, 1)");
  if (!(adam.eps > 0.0)) throw ConfigError("adam.eps must be positive");
}

RunConfig parse_config(std::istream& in, const std::filesystem::path& base_dir) {
  RunConfig cfg;
  std::string plan_name = "default";
  LoraPlan overrides;
  std::optional<int> stage_count;

  auto path = [&](const std::string& v) {
    std::filesystem::path p(v);
    return p.is_relative() && !base_dir.empty() ? base_dir / p : p;
  };
  auto stage = [&](int i) -> StageConfig& {
    if (static_cast<int>(cfg.train.stages.size()) < i) cfg.train.stages.resize(static_cast<std::size_t>(i));
    return cfg.train.stages[static_cast<std::size_t>(i - 1)];
  };

  using Setter = std::function<void(const std::string&, const std::string&)>;
  std::map<std::string, Setter> setters{
      {"model.channels", [&](auto& k, auto& v) { cfg.model.channels = parse_number<long>(k, v); }},
      {"model.scale", [&](auto& k, auto& v) { cfg.model.scale = parse_number<long>(k, v); }},
      {"model.blocks", [&](auto& k, auto& v) { cfg.model.num_blocks = parse_number<int>(k, v); }},
      {"model.sigma_a",
       [&](auto& k, auto& v) {
         if (v == "shifted_sigmoid")
           cfg.model.sigma_a = SymmetricActivation::ShiftedSigmoid;
         else if (v == "tanh")
           cfg.model.sigma_a = SymmetricActivation::Tanh;
         else
           throw ConfigError("config key '" + k + "': expected shifted_sigmoid or tanh");
       }},
      {"lora.plan",
       [&](auto& k, auto& v) {
         if (v != "default" && v != "none") throw ConfigError("config key '" + k + "': expected default or none");
         plan_name = v;
       }},
      {"train.stages", [&](auto& k, auto& v) { stage_count = parse_number<int>(k, v); }},
      {"adam.beta1", [&](auto& k, auto& v) { cfg.train.adam.beta1 = parse_number<double>(k, v); }},
      {"adam.beta2", [&](auto& k, auto& v) { cfg.train.adam.beta2 = parse_number<double>(k, v); }},
      {"adam.eps", [&](auto& k, auto& v) { cfg.train.adam.eps = parse_number<double>(k, v); }},
      {"distill.lambda1", [&](auto& k, auto& v) { cfg.train.weights.lambda1 = parse_number<double>(k, v); }},
      {"distill.lambda2", [&](auto& k, auto& v) { cfg.train.weights.lambda2 = parse_number<double>(k, v); }},
      {"distill.lambda3", [&](auto& k, auto& v) { cfg.train.weights.lambda3 = parse_number<double>(k, v); }},
      {"distill.feature_loss", [&](auto&, auto& v) { cfg.train.feature_loss = parse_feature_loss(v); }},
      {"ema.decay", [&](auto& k, auto& v) { cfg.train.ema_decay = parse_number<double>(k, v); }},
      {"finalize.beta", [&](auto& k, auto& v) { cfg.train.blend_beta = parse_number<double>(k, v); }},
      {"seed", [&](auto& k, auto& v) { cfg.train.seed = parse_number<std::uint64_t>(k, v); }},
      {"dataset.dir", [&](auto&, auto& v) { cfg.dataset_dir = path(v); }},
      {"teacher.checkpoint", [&](auto&, auto& v) { cfg.teacher_checkpoint = path(v); }},
      {"student.checkpoint", [&](auto&, auto& v) { cfg.student_checkpoint = path(v); }},
  };
  for (int i = 1; i <= 2; ++i) {
    const std::string p = "train.stage" + std::to_string(i);
    setters[p + ".patch"] = [&, i](auto& k, auto& v) { stage(i).patch_hr = parse_number<int>(k, v); };
    setters[p + ".batch"] = [&, i](auto& k, auto& v) { stage(i).batch = parse_number<int>(k, v); };
    setters[p + ".iters"] = [&, i](auto& k, auto& v) { stage(i).iters = parse_number<long>(k, v); };
    setters[p + ".lr"] = [&, i](auto& k, auto& v) { stage(i).lr = parse_number<double>(k, v); };
  }

  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError("config line " + std::to_string(line_no) + ": expected 'key = value'");
    const std::string key = trim(line.substr(0, eq)), value = trim(line.substr(eq + 1));
    if (key.rfind("lora.plan.", 0) == 0) {
      overrides[key.substr(10)] = parse_spec(key, value);
      continue;
    }
    auto it = setters.find(key);
    if (it == setters.end()) throw ConfigError("unknown config key '" + key + "'");
    it->second(key, value);
  }

  if (stage_count) {
    if (*stage_count < 0 || *stage_count > 2) throw ConfigError("train.stages must be 0, 1 or 2");
    cfg.train.stages.resize(static_cast<std::size_t>(*stage_count));
  }
  LoraPlan plan = plan_name == "default" ? default_plan() : LoraPlan{};
  for (const auto& [name, spec] : overrides) plan[name] = spec;
  cfg.model.lora_plan = plan;
  cfg.model.validate();
  resolve_plan(cfg.model, plan);
  cfg.train.validate(cfg.model.scale);
  return cfg;
}

RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config '" + path.string() + "'");
  return parse_config(in, path.parent_path());
}

}  // namespace lorasr

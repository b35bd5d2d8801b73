// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <istream>
#include <optional>
#include <vector>

#include "lorasr/distillation.hpp"
#include "lorasr/network.hpp"
#include "lorasr/optim.hpp"

namespace lorasr {

struct StageConfig {
  int patch_hr = 192;
  int batch = 8;
  long iters = 30000;
  double lr = 1e-4;
};

struct TrainConfig {
  std::vector<StageConfig> stages{{192, 8, 30000, 1e-4}, {256, 8, 30000, 1e-4}};
  AdamConfig adam;
  double ema_decay = 0.999;
  std::uint64_t seed = 0;
  double blend_beta = 0.5;
  LossWeights weights;
  FeatureLoss feature_loss = FeatureLoss::Affinity;

  void validate(Index scale) const;
};

/// Everything a `train` run reads from its config file.
struct RunConfig {
  ModelConfig model;  // student; lora_plan is always set after parsing
  TrainConfig train;
  std::filesystem::path dataset_dir;
  std::optional<std::filesystem::path> teacher_checkpoint;
  std::optional<std::filesystem::path> student_checkpoint;
};

/// Parses "key = value" lines. '#' starts a comment. Relative paths are
/// resolved against `base_dir`. Recognised keys:
///
///     model.channels model.scale model.blocks model.sigma_a (shifted_sigmoid|tanh)
///     lora.plan (default|none)   lora.plan.<layer> = rank,alpha
///     train.stage1.{patch,batch,iters,lr}   train.stage2.{...}   train.stages
///     adam.beta1 adam.beta2 adam.eps
///     distill.lambda1 distill.lambda2 distill.lambda3
///     distill.feature_loss (affinity|l1_aligned|none)
///     ema.decay finalize.beta seed
///     dataset.dir teacher.checkpoint student.checkpoint
RunConfig parse_config(std::istream& in, const std::filesystem::path& base_dir = {});
RunConfig load_config(const std::filesystem::path& path);

FeatureLoss parse_feature_loss(const std::string& s);

}  // namespace lorasr

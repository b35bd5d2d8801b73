// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <utility>
#include <vector>

#include "lorasr/checkpoint.hpp"
#include "lorasr/config.hpp"
#include "lorasr/distillation.hpp"
#include "lorasr/image.hpp"
#include "lorasr/network.hpp"

namespace lorasr {

/// HR training images held in memory.
struct Dataset {
  std::vector<ImageF> images;
  std::vector<std::string> names;

  /// Loads every PNG in `dir` (or `dir/HR` if present), sorted by name.
  static Dataset load(const std::filesystem::path& dir);
  std::size_t size() const { return images.size(); }
};

struct AugmentDraw {
  bool flip = false;
  int quarter_turns = 0;
};

/// Horizontal flip with probability 0.5, then k quarter turns, k uniform in 0..3.
AugmentDraw draw_augment(std::uint64_t seed);

/// Applies one drawn transform to both patches.
std::pair<ImageF, ImageF> augment(const ImageF& hr, const ImageF& lr, std::uint64_t seed);
std::pair<ImageF, ImageF> augment(const ImageF& hr, const ImageF& lr, const AugmentDraw& draw);

struct Batch {
  TensorF lr;
  TensorF hr;
};

/// Random HR crops with bicubic LR partners and shared augmentation. Depends
/// only on (seed, stage, step).
Batch sample_batch(const Dataset& data, const StageConfig& stage, int scale, std::uint64_t seed, int stage_index,
                   long step);

struct StepLog {
  int stage = 0;
  long step = 0;
  double total = 0.0;
  double reconstruction = 0.0;
  double pixel = 0.0;
  double feature = 0.0;
};

/// Mutable state carried across stages.
struct TrainState {
  NamedTensors<float> ema;
  std::optional<ChannelAligners<float>> aligners;
  std::vector<StepLog> log;
};

struct TrainCallbacks {
  std::function<void(const StepLog&)> on_step;
};

/// EMA shadow initialised to the current trainable tensors (plus aligners).
TrainState init_train_state(const SpanModel<float>& student, const SpanModel<float>& teacher, const TrainConfig& cfg);

/// One distillation stage. Only the LoRA factors (and aligners in the L1
/// arm) are updated; Adam moments start fresh.
void train_stage(SpanModel<float>& student, const SpanModel<float>& teacher, const Dataset& data,
                 const StageConfig& stage, const TrainConfig& cfg, int stage_index, TrainState& state,
                 const TrainCallbacks& callbacks = {});

/// Swaps in the EMA factors if asked, merges every adapter and blends each
/// tensor with the pretrained checkpoint. The result holds no LoRA tensors.
Checkpoint finalize(const SpanModel<float>& student, const Checkpoint& pretrained, double beta,
                    const NamedTensors<float>* ema);

/// Full-parameter reconstruction training of an adapter-free model, used to
/// produce toy teachers and bases.
std::vector<double> pretrain(SpanModel<float>& model, const Dataset& data, const StageConfig& stage,
                             const AdamConfig& adam, std::uint64_t seed);

/// Writes one "stage,step,total,reconstruction,pixel,feature" row per step.
void write_loss_log(const std::vector<StepLog>& log, const std::filesystem::path& path);

}  // namespace lorasr

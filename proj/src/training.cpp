// SPDX-License-Identifier: Apache-2.0
#include "lorasr/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <random>

#include "lorasr/error.hpp"
#include "lorasr/optim.hpp"

namespace lorasr {

namespace {

std::mt19937_64 step_rng(std::uint64_t seed, int stage, long step, std::uint32_t stream) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(stage), static_cast<std::uint32_t>(step),
                    static_cast<std::uint32_t>(static_cast<std::uint64_t>(step) >> 32), stream};
  return std::mt19937_64(seq);
}

AugmentDraw draw_from(std::mt19937_64& rng) {
  AugmentDraw d;
  d.flip = std::bernoulli_distribution(0.5)(rng);
  d.quarter_turns = std::uniform_int_distribution<int>(0, 3)(rng);
  return d;
}

void add_aligners(NamedTensors<float>& out, const ChannelAligners<float>& a) {
  for (std::size_t l = 0; l < a.convs.size(); ++l) {
    const std::string n = ChannelAligners<float>::name(l);
    out.emplace(n + ".kernel", a.convs[l].kernel);
    if (a.convs[l].bias) out.emplace(n + ".bias", *a.convs[l].bias);
  }
}

void take_aligners(ChannelAligners<float>& a, const NamedTensors<float>& values) {
  for (std::size_t l = 0; l < a.convs.size(); ++l) {
    const std::string n = ChannelAligners<float>::name(l);
    a.convs[l].kernel = values.at(n + ".kernel");
    if (a.convs[l].bias) a.convs[l].bias = values.at(n + ".bias");
  }
}

NamedTensors<float> base_tensors(const SpanModel<float>& model) {
  NamedTensors<float> out;
  for_each_named_tensor(model, [&](const std::string& name, const TensorF& t, bool is_lora) {
    if (!is_lora) out.emplace(name, t);
  });
  return out;
}

void assign_base(SpanModel<float>& model, const NamedTensors<float>& values) {
  for (auto* l : model.layers()) {
    l->base().kernel = values.at(l->name + ".kernel");
    if (l->base().bias) l->base().bias = values.at(l->name + ".bias");
  }
}

void check_finite_loss(double value, int stage, long step) {
  if (!std::isfinite(value))
    throw TrainingError("non-finite loss at stage " + std::to_string(stage + 1) + " step " + std::to_string(step),
                        step);
}

}  // namespace

Dataset Dataset::load(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) throw IoError("dataset directory '" + dir.string() + "' does not exist");
  const std::filesystem::path root = std::filesystem::is_directory(dir / "HR") ? dir / "HR" : dir;
  std::vector<std::filesystem::path> files;
  for (const auto& e : std::filesystem::directory_iterator(root)) {
    std::string ext = e.path().extension().string();
    std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
    if (e.is_regular_file() && ext == ".png") files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  Dataset data;
  for (const auto& f : files) {
    data.images.push_back(to_float(load_image(f)));
    data.names.push_back(f.filename().string());
  }
  if (data.images.empty()) throw IoError("dataset directory '" + root.string() + "' contains no PNG images");
  return data;
}

AugmentDraw draw_augment(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return draw_from(rng);
}

std::pair<ImageF, ImageF> augment(const ImageF& hr, const ImageF& lr, const AugmentDraw& draw) {
  return {flip_rotate(hr, draw.flip, draw.quarter_turns), flip_rotate(lr, draw.flip, draw.quarter_turns)};
}

std::pair<ImageF, ImageF> augment(const ImageF& hr, const ImageF& lr, std::uint64_t seed) {
  return augment(hr, lr, draw_augment(seed));
}

Batch sample_batch(const Dataset& data, const StageConfig& stage, int scale, std::uint64_t seed, int stage_index,
                   long step) {
  if (data.size() == 0) throw ConfigError("training dataset is empty");
  std::mt19937_64 rng = step_rng(seed, stage_index, step, 0);
  std::vector<ImageF> hrs, lrs;
  for (int b = 0; b < stage.batch; ++b) {
    const std::size_t idx = std::uniform_int_distribution<std::size_t>(0, data.size() - 1)(rng);
    const ImageF& img = data.images[idx];
    if (img.width() < stage.patch_hr || img.height() < stage.patch_hr)
      throw ShapeError("training image '" + data.names[idx] + "' (" + std::to_string(img.width()) + "x" +
                       std::to_string(img.height()) + ") is smaller than the HR patch " +
                       std::to_string(stage.patch_hr));
    const Index x = std::uniform_int_distribution<Index>(0, img.width() - stage.patch_hr)(rng);
    const Index y = std::uniform_int_distribution<Index>(0, img.height() - stage.patch_hr)(rng);
    const ImageF hr = crop(img, x, y, stage.patch_hr, stage.patch_hr);
    auto [hr_aug, lr_aug] = augment(hr, bicubic_downsample(hr, scale), draw_from(rng));
    hrs.push_back(std::move(hr_aug));
    lrs.push_back(std::move(lr_aug));
  }
  return {to_tensor(lrs), to_tensor(hrs)};
}

TrainState init_train_state(const SpanModel<float>& student, const SpanModel<float>& teacher, const TrainConfig& cfg) {
  if (teacher.config.scale != student.config.scale)
    throw ConfigError("teacher scale " + std::to_string(teacher.config.scale) + " differs from student scale " +
                      std::to_string(student.config.scale));
  if (cfg.feature_loss != FeatureLoss::None && teacher.config.num_blocks != student.config.num_blocks)
    throw ConfigError("feature distillation needs equal block counts (teacher " +
                      std::to_string(teacher.config.num_blocks) + ", student " +
                      std::to_string(student.config.num_blocks) + ")");
  if (!student.has_adapters()) throw ConfigError("student has no LoRA adapters to train");
  TrainState state;
  if (cfg.feature_loss == FeatureLoss::L1Aligned)
    state.aligners = ChannelAligners<float>::make(static_cast<std::size_t>(student.config.num_blocks),
                                                  student.config.channels, teacher.config.channels,
                                                  cfg.seed ^ 0xA11A11A11ULL);
  state.ema = trainable_tensors(student);
  if (state.aligners) add_aligners(state.ema, *state.aligners);
  return state;
}

void train_stage(SpanModel<float>& student, const SpanModel<float>& teacher, const Dataset& data,
                 const StageConfig& stage, const TrainConfig& cfg, int stage_index, TrainState& state,
                 const TrainCallbacks& callbacks) {
  if (data.size() == 0) throw ConfigError("training dataset is empty");
  if (cfg.feature_loss == FeatureLoss::L1Aligned && !state.aligners)
    throw ConfigError("l1_aligned feature loss requires aligners in the training state");
  AdamConfig adam = cfg.adam;
  adam.lr = stage.lr;
  AdamState<float> opt;
  const int scale = static_cast<int>(student.config.scale);

  for (long step = 0; step < stage.iters; ++step) {
    const Batch batch = sample_batch(data, stage, scale, cfg.seed, stage_index, step);
    const Inference<float> teacher_out = infer(teacher, batch.lr);

    Tape<float> tape;
    tape.set_check_finite(false);
    const ForwardResult<float> fwd = span_forward(tape, student, tape.constant(batch.lr), BindOptions{false, true});
    const DistillTerms<float> terms = distillation_objective(fwd, teacher_out, batch.hr, cfg.weights, cfg.feature_loss,
                                                             state.aligners ? &*state.aligners : nullptr);
    StepLog entry{stage_index, step, terms.total.value().item(), terms.reconstruction.value().item(),
                  terms.pixel.value().item(), terms.feature.value().item()};
    check_finite_loss(entry.total, stage_index, step);

    const GradientMap<float> grads = tape.backward(terms.total);
    NamedTensors<float> params = trainable_tensors(student);
    if (state.aligners) add_aligners(params, *state.aligners);
    adam_step(params, grads, opt, adam);
    assign_trainable(student, params);
    if (state.aligners) take_aligners(*state.aligners, params);
    ema_update(state.ema, params, cfg.ema_decay);

    state.log.push_back(entry);
    if (callbacks.on_step) callbacks.on_step(entry);
  }
}

Checkpoint finalize(const SpanModel<float>& student, const Checkpoint& pretrained, double beta,
                    const NamedTensors<float>* ema) {
  SpanModel<float> source = student;
  if (ema) assign_trainable(source, *ema);
  SpanModel<float> merged = source.merged();
  for (auto* l : merged.layers()) {
    ConvParams<float> original;
    const CheckpointEntry* k = pretrained.find(l->name + ".kernel");
    if (!k) throw ConfigError("pretrained checkpoint is missing tensor '" + l->name + ".kernel'");
    original.kernel = k->tensor;
    if (l->plain.bias) {
      const CheckpointEntry* b = pretrained.find(l->name + ".bias");
      if (!b) throw ConfigError("pretrained checkpoint is missing tensor '" + l->name + ".bias'");
      original.bias = b->tensor;
    }
    l->plain = blend_with_pretrained(l->plain, original, beta, l->name);
  }
  return model_to_checkpoint(merged);
}

std::vector<double> pretrain(SpanModel<float>& model, const Dataset& data, const StageConfig& stage,
                             const AdamConfig& adam_cfg, std::uint64_t seed) {
  if (model.has_adapters()) throw ConfigError("pretrain expects a model without adapters");
  AdamConfig adam = adam_cfg;
  adam.lr = stage.lr;
  AdamState<float> opt;
  std::vector<double> losses;
  for (long step = 0; step < stage.iters; ++step) {
    const Batch batch = sample_batch(data, stage, static_cast<int>(model.config.scale), seed, -1, step);
    Tape<float> tape;
    tape.set_check_finite(false);
    const ForwardResult<float> fwd = span_forward(tape, model, tape.constant(batch.lr), BindOptions{true, false});
    const Var<float> loss = reconstruction_loss(batch.hr, fwd.output);
    const double value = loss.value().item();
    check_finite_loss(value, 0, step);
    const GradientMap<float> grads = tape.backward(loss);
    NamedTensors<float> params = base_tensors(model);
    adam_step(params, grads, opt, adam);
    assign_base(model, params);
    losses.push_back(value);
  }
  return losses;
}

void write_loss_log(const std::vector<StepLog>& log, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write loss log '" + path.string() + "'");
  out << "stage,step,total,reconstruction,pixel,feature\n";
  char buf[256];
  for (const auto& e : log) {
    std::snprintf(buf, sizeof buf, "%d,%ld,%.17g,%.17g,%.17g,%.17g\n", e.stage + 1, e.step, e.total, e.reconstruction,
                  e.pixel, e.feature);
    out << buf;
  }
}

}  // namespace lorasr

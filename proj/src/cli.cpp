// SPDX-License-Identifier: Apache-2.0
#include "lorasr/cli.hpp"

#include <Eigen/Core>

#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <numeric>

#include "CLI11.hpp"
#include "lorasr/checkpoint.hpp"
#include "lorasr/config.hpp"
#include "lorasr/error.hpp"
#include "lorasr/metrics.hpp"
#include "lorasr/training.hpp"

namespace lorasr {

namespace {

void apply_thread_env() {
  const char* env = std::getenv("LORA_SR_THREADS");
  if (!env || !*env) return;
  char* end = nullptr;
  const long n = std::strtol(env, &end, 10);
  if (*end != '\0' || n < 0) throw ConfigError("LORA_SR_THREADS must be a non-negative integer, got '" +
                                               std::string(env) + "'");
  Eigen::setNbThreads(static_cast<int>(n));
}

double window_mean(const std::vector<StepLog>& log, std::size_t begin, std::size_t end) {
  if (begin >= end) return 0.0;
  double s = 0.0;
  for (std::size_t i = begin; i < end; ++i) s += log[i].total;
  return s / static_cast<double>(end - begin);
}

SpanModel<float> load_teacher(const std::filesystem::path& path) {
  SpanModel<float> t = model_from_checkpoint(Checkpoint::load(path));
  return t.has_adapters() ? t.merged() : t;
}

SpanModel<float> build_student(const RunConfig& cfg) {
  ModelConfig base_cfg = cfg.model;
  base_cfg.lora_plan.reset();
  SpanModel<float> student = build_model<float>(base_cfg, cfg.train.seed);
  if (cfg.student_checkpoint) load_pretrained(student, Checkpoint::load(*cfg.student_checkpoint));
  install_adapters(student, *cfg.model.lora_plan, cfg.train.seed);
  return student;
}

int cmd_train(const std::string& config_path, const std::string& out_path, const std::string& resume,
              std::ostream& out) {
  const RunConfig cfg = load_config(config_path);
  if (!cfg.teacher_checkpoint) throw ConfigError("config key 'teacher.checkpoint' is required");
  if (cfg.dataset_dir.empty()) throw ConfigError("config key 'dataset.dir' is required");

  const SpanModel<float> teacher = load_teacher(*cfg.teacher_checkpoint);
  SpanModel<float> student;
  std::optional<NamedTensors<float>> resumed_ema;
  if (!resume.empty()) {
    const Checkpoint ckpt = Checkpoint::load(resume);
    student = model_from_checkpoint(ckpt);
    if (auto ema = ema_from_checkpoint(ckpt); !ema.empty()) resumed_ema = std::move(ema);
  } else {
    student = build_student(cfg);
  }
  const Dataset data = Dataset::load(cfg.dataset_dir);

  TrainState state = init_train_state(student, teacher, cfg.train);
  if (resumed_ema)
    for (auto& [name, t] : state.ema)
      if (auto it = resumed_ema->find(name); it != resumed_ema->end()) t = it->second;

  out << "trainable parameters: " << student.trainable_count() << "\n";
  out << "frozen sha256: " << frozen_digest(student) << "\n";
  for (std::size_t s = 0; s < cfg.train.stages.size(); ++s) {
    const std::size_t first = state.log.size();
    train_stage(student, teacher, data, cfg.train.stages[s], cfg.train, static_cast<int>(s), state);
    const std::size_t last = state.log.size();
    const std::size_t w = std::min<std::size_t>(20, last - first);
    char buf[200];
    std::snprintf(buf, sizeof buf, "stage %zu: %zu steps, loss first-%zu mean %.6g, last-%zu mean %.6g\n", s + 1,
                  last - first, w, window_mean(state.log, first, first + w), w,
                  window_mean(state.log, last - w, last));
    out << buf;
  }
  model_to_checkpoint(student, &state.ema).save(out_path);
  write_loss_log(state.log, out_path + ".log.csv");
  out << "wrote " << out_path << "\n";
  return kExitOk;
}

int cmd_finalize(const std::string& student_path, const std::string& pretrained_path, double beta, bool use_ema,
                 const std::string& out_path, std::ostream& out) {
  const Checkpoint student_ckpt = Checkpoint::load(student_path);
  const Checkpoint pretrained = Checkpoint::load(pretrained_path);
  const SpanModel<float> student = model_from_checkpoint(student_ckpt);
  std::optional<NamedTensors<float>> ema;
  if (use_ema) {
    ema = ema_from_checkpoint(student_ckpt);
    if (ema->empty()) throw ConfigError("--ema given but '" + student_path + "' holds no EMA tensors");
  }
  const Checkpoint result = finalize(student, pretrained, beta, ema ? &*ema : nullptr);
  const Index count = result.parameter_count();
  const Index expected = pretrained.parameter_count(TensorRole::FrozenBase);
  out << "parameters: " << count << "\n";
  if (count != expected)
    throw ShapeError("finalized parameter count " + std::to_string(count) + " differs from pretrained count " +
                     std::to_string(expected));
  result.save(out_path);
  out << "wrote " << out_path << "\n";
  return kExitOk;
}

int cmd_eval(const std::string& model_path, const std::string& dataset, const std::string& channel, int crop, bool quantize,
             const std::string& json_path, std::ostream& out) {
  EvalProtocol proto;
  if (channel == "y")
    proto.channel_mode = ChannelMode::Y;
  else if (channel == "rgb")
    proto.channel_mode = ChannelMode::RGB;
  else
    throw ConfigError("--channel must be y or rgb, got '" + channel + "'");
  if (crop < 0) throw ConfigError("--crop must be >= 0");
  proto.border_crop = crop;
  proto.quantize = quantize;
  const SpanModel<float> model = model_from_checkpoint(Checkpoint::load(model_path));
  proto.scale = static_cast<int>(model.config.scale);
  const EvalReport report = evaluate_dataset(&model, dataset, proto);
  out << report.to_table();
  if (!json_path.empty()) {
    std::ofstream js(json_path);
    if (!js) throw IoError("cannot write '" + json_path + "'");
    js << report.to_json();
  }
  return kExitOk;
}

int cmd_sr(const std::string& model_path, const std::string& input, const std::string& output, std::ostream& out) {
  const SpanModel<float> model = model_from_checkpoint(Checkpoint::load(model_path));
  const ImageF lr = to_float(load_image(input));
  const ImageF sr = from_tensor(infer(model, to_tensor({lr})).output);
  save_image(to_u8(sr), output);
  out << "wrote " << output << " (" << sr.width() << "x" << sr.height() << ")\n";
  return kExitOk;
}

struct InitOptions {
  std::string out;
  long channels = 26;
  int blocks = 6;
  long scale = 4;
  std::uint64_t seed = 0;
  std::string dataset;
  long iters = 0;
  int patch = 64;
  int batch = 4;
  double lr = 1e-3;
};

int cmd_init(const InitOptions& o, std::ostream& out) {
  ModelConfig cfg;
  cfg.channels = o.channels;
  cfg.num_blocks = o.blocks;
  cfg.scale = o.scale;
  SpanModel<float> model = build_model<float>(cfg, o.seed);
  if (o.iters > 0) {
    if (o.dataset.empty()) throw ConfigError("--iters needs --dataset");
    const StageConfig stage{o.patch, o.batch, o.iters, o.lr};
    TrainConfig check;
    check.stages = {stage};
    check.validate(cfg.scale);
    const auto losses = pretrain(model, Dataset::load(o.dataset), stage, AdamConfig{}, o.seed);
    const std::size_t w = std::min<std::size_t>(20, losses.size());
    const double head = std::accumulate(losses.begin(), losses.begin() + static_cast<long>(w), 0.0) / w;
    const double tail = std::accumulate(losses.end() - static_cast<long>(w), losses.end(), 0.0) / w;
    out << "pretrain loss: first-" << w << " mean " << head << ", last-" << w << " mean " << tail << "\n";
  }
  model_to_checkpoint(model).save(o.out);
  out << "parameters: " << model.base_parameter_count() << "\nwrote " << o.out << "\n";
  return kExitOk;
}

int cmd_synth(const std::string& dir, int count, int size, std::uint64_t seed, std::ostream& out) {
  if (count < 1 || size < 1) throw ConfigError("--count and --size must be positive");
  std::filesystem::create_directories(dir);
  for (int i = 0; i < count; ++i) {
    char name[32];
    std::snprintf(name, sizeof name, "img_%04d.png", i);
    save_image(synthetic_image(size, size, seed * 1000003ULL + static_cast<std::uint64_t>(i)),
               std::filesystem::path(dir) / name);
  }
  out << "wrote " << count << " images to " << dir << "\n";
  return kExitOk;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Distillation-supervised ConvLoRA for super-resolution", "lorasr"};
  app.require_subcommand(1);

  std::string config_path, out_path, resume;
  auto* train = app.add_subcommand("train", "Distil LoRA adapters into a student");
  train->add_option("--config", config_path, "Training config file")->required();
  train->add_option("--out", out_path, "Output student checkpoint")->required();
  train->add_option("--resume", resume, "Continue from a student checkpoint");

  std::string student_path, pretrained_path, fin_out;
  double beta = 0.5;
  bool use_ema = false;
  auto* fin = app.add_subcommand("finalize", "Merge adapters and blend with the pretrained weights");
  fin->add_option("--student", student_path, "Trained student checkpoint")->required();
  fin->add_option("--pretrained", pretrained_path, "Original pretrained checkpoint")->required();
  fin->add_option("--beta", beta, "Weight of the merged model in the blend")->check(CLI::Range(0.0, 1.0));
  fin->add_flag("--ema", use_ema, "Use the EMA shadow of the LoRA factors");
  fin->add_option("--out", fin_out, "Output checkpoint")->required();

  std::string model_path, dataset, channel = "y", json_path;
  int crop = 4;
  bool no_quantize = false;
  auto* eval = app.add_subcommand("eval", "PSNR/SSIM over a dataset directory");
  eval->add_option("--model", model_path, "Model checkpoint")->required();
  eval->add_option("--dataset", dataset, "Directory of PNG images (or HR/ and LR/)")->required();
  eval->add_option("--channel", channel, "y or rgb");
  eval->add_option("--crop", crop, "Border crop in pixels");
  eval->add_option("--json", json_path, "Also write the report as JSON");
  eval->add_flag("--no-quantize", no_quantize, "Score the float output without rounding to 8 bits");

  std::string sr_model, sr_in, sr_out;
  auto* sr = app.add_subcommand("sr", "Super-resolve one PNG");
  sr->add_option("--model", sr_model, "Model checkpoint")->required();
  sr->add_option("--input", sr_in, "Input PNG")->required();
  sr->add_option("--output", sr_out, "Output PNG")->required();

  InitOptions init_opts;
  auto* init = app.add_subcommand("init", "Create a base/teacher checkpoint, optionally pretrained");
  init->add_option("--out", init_opts.out, "Output checkpoint")->required();
  init->add_option("--channels", init_opts.channels, "Feature channels");
  init->add_option("--blocks", init_opts.blocks, "Number of blocks");
  init->add_option("--scale", init_opts.scale, "Upscaling factor");
  init->add_option("--seed", init_opts.seed, "Initialisation seed");
  init->add_option("--dataset", init_opts.dataset, "PNG directory for reconstruction pretraining");
  init->add_option("--iters", init_opts.iters, "Pretraining iterations");
  init->add_option("--patch", init_opts.patch, "HR patch size");
  init->add_option("--batch", init_opts.batch, "Batch size");
  init->add_option("--lr", init_opts.lr, "Adam learning rate");

  std::string synth_dir;
  int synth_count = 16, synth_size = 96;
  std::uint64_t synth_seed = 0;
  auto* synth = app.add_subcommand("synth", "Write a synthetic PNG dataset");
  synth->add_option("--out", synth_dir, "Output directory")->required();
  synth->add_option("--count", synth_count, "Number of images");
  synth->add_option("--size", synth_size, "Image side in pixels");
  synth->add_option("--seed", synth_seed, "Seed");

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    apply_thread_env();
    if (*train) return cmd_train(config_path, out_path, resume, out);
    if (*fin) return cmd_finalize(student_path, pretrained_path, beta, use_ema, fin_out, out);
    if (*eval) return cmd_eval(model_path, dataset, channel, crop, !no_quantize, json_path, out);
    if (*sr) return cmd_sr(sr_model, sr_in, sr_out, out);
    if (*init) return cmd_init(init_opts, out);
    if (*synth) return cmd_synth(synth_dir, synth_count, synth_size, synth_seed, out);
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const TrainingError& e) {
    err << "error: " << e.what() << " (step " << e.step() << ")\n";
    return kExitRuntime;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return kExitUsage;
}

}  // namespace lorasr

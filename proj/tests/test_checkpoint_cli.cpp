#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

#include "doctest.h"
#include "lorasr/checkpoint.hpp"
#include "lorasr/cli.hpp"
#include "lorasr/config.hpp"
#include "lorasr/metrics.hpp"

using namespace lorasr;
namespace fs = std::filesystem;

namespace {

std::mt19937_64 rng(5150);

fs::path tmp_dir(const std::string& name) {
  const fs::path p = fs::path(LORASR_TEST_TMP) / name;
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

struct Run {
  int code;
  std::string out, err;
};

Run cli(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = run_cli(args, out, err);
  return {code, out.str(), err.str()};
}

std::vector<std::uint8_t> file_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

SpanModel<float> adapted_model(std::uint64_t seed, bool perturb) {
  ModelConfig cfg;
  cfg.channels = 4;
  cfg.num_blocks = 2;
  cfg.lora_plan = LoraPlan{{"SConvLB_2", {2, 4}}, {"Upsampler", {3, 6}}};
  SpanModel<float> m = build_model<float>(cfg, seed);
  if (perturb)
    for (auto* l : m.layers())
      if (l->adapter) l->adapter->lora_y = TensorF::normal(l->adapter->lora_y.shape(), rng, 0.0f, 0.05f);
  return m;
}

void write_text(const fs::path& p, const std::string& s) {
  std::ofstream out(p);
  out << s;
}

}  // namespace

TEST_CASE("checkpoint round trip is byte-identical") {
  const SpanModel<float> m = adapted_model(1, true);
  NamedTensors<float> ema = trainable_tensors(m);
  const Checkpoint ck = model_to_checkpoint(m, &ema);
  const auto bytes = ck.serialize();
  const Checkpoint back = Checkpoint::deserialize(bytes);
  CHECK(back.serialize() == bytes);

  const fs::path dir = tmp_dir("ckpt");
  ck.save(dir / "a.ckpt");
  Checkpoint::load(dir / "a.ckpt").save(dir / "b.ckpt");
  CHECK(file_bytes(dir / "a.ckpt") == file_bytes(dir / "b.ckpt"));

  const SpanModel<float> re = model_from_checkpoint(back);
  const TensorF x = TensorF::uniform({1, 3, 5, 5}, rng);
  CHECK(infer(re, x).output == infer(m, x).output);
  CHECK(re.trainable_count() == m.trainable_count());
  CHECK(ema_from_checkpoint(back) == ema);
  CHECK(back.find("Upsampler.lora_x")->role == TensorRole::Lora);
  CHECK(back.find("Conv_2.kernel")->role == TensorRole::FrozenBase);
  CHECK(back.find("Upsampler.lora_y.ema")->role == TensorRole::Ema);
  CHECK(back.header_value("lora.Upsampler") == "3,6");
  CHECK(back.header_value("lora.SConvLB_2.w1") == "2,4");
}

TEST_CASE("corrupt checkpoints are rejected") {
  const auto bytes = model_to_checkpoint(adapted_model(1, false)).serialize();
  auto truncated = bytes;
  truncated.resize(bytes.size() - 5);
  CHECK_THROWS_AS(Checkpoint::deserialize(truncated), IoError);
  auto bad_magic = bytes;
  bad_magic[0] = 'X';
  CHECK_THROWS_AS(Checkpoint::deserialize(bad_magic), IoError);
  auto extra = bytes;
  extra.push_back(0);
  CHECK_THROWS_AS(Checkpoint::deserialize(extra), IoError);
}

TEST_CASE("load_pretrained errors name the tensor") {
  SpanModel<float> m = adapted_model(2, false);
  Checkpoint ck = model_to_checkpoint(m.merged());
  Checkpoint missing = ck;
  std::erase_if(missing.tensors, [](const CheckpointEntry& e) { return e.name == "Conv_2.kernel"; });
  try {
    load_pretrained(m, missing);
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("'Conv_2.kernel'") != std::string::npos);
  }

  ModelConfig teacher_cfg;
  teacher_cfg.channels = 28;
  ModelConfig student_cfg;
  student_cfg.channels = 26;
  const Checkpoint teacher = model_to_checkpoint(build_model<float>(teacher_cfg, 0));
  SpanModel<float> student = build_model<float>(student_cfg, 0);
  try {
    load_pretrained(student, teacher);
    FAIL("expected ShapeError");
  } catch (const ShapeError& e) {
    CHECK(std::string(e.what()).find("conv_head.kernel") != std::string::npos);
  }
}

TEST_CASE("frozen digest ignores LoRA factors") {
  const SpanModel<float> a = adapted_model(3, false), b = adapted_model(3, true);
  CHECK(frozen_digest(a) == frozen_digest(b));
  CHECK(frozen_digest(a) != frozen_digest(adapted_model(4, false)));
  const std::string empty = sha256_hex({});
  CHECK(empty == "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
}

TEST_CASE("config parsing") {
  std::istringstream ok(R"(
# smoke
model.channels = 8
model.blocks = 2
lora.plan = none
lora.plan.SConvLB_1 = 4,8
lora.plan.Upsampler = 8, 16
train.stages = 1
train.stage1.patch = 64
train.stage1.iters = 0
seed = 9
dataset.dir = data
teacher.checkpoint = /abs/t.ckpt
)");
  const RunConfig cfg = parse_config(ok, "/base");
  CHECK(cfg.model.channels == 8);
  CHECK(cfg.model.lora_plan->size() == 2);
  CHECK(cfg.model.lora_plan->at("Upsampler") == LoraSpec{8, 16});
  CHECK(cfg.train.stages.size() == 1);
  CHECK(cfg.train.stages[0].patch_hr == 64);
  CHECK(cfg.train.stages[0].batch == 8);
  CHECK(cfg.dataset_dir == fs::path("/base/data"));
  CHECK(*cfg.teacher_checkpoint == fs::path("/abs/t.ckpt"));
  CHECK(cfg.train.seed == 9);

  std::istringstream defaults("");
  const RunConfig d = parse_config(defaults);
  CHECK(d.train.stages.size() == 2);
  CHECK(d.train.stages[0].patch_hr == 192);
  CHECK(d.train.stages[1].patch_hr == 256);
  CHECK(d.train.stages[1].iters == 30000);
  CHECK(d.train.stages[1].lr == 1e-4);
  CHECK(d.train.ema_decay == 0.999);
  CHECK(d.train.blend_beta == 0.5);
  CHECK(*d.model.lora_plan == default_plan());

  std::istringstream unknown("model.chanels = 8\n");
  try {
    parse_config(unknown);
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("model.chanels") != std::string::npos);
  }
  std::istringstream bad_patch("model.channels = 8\nlora.plan = none\ntrain.stage1.patch = 30\n");
  CHECK_THROWS_AS(parse_config(bad_patch), ConfigError);
  std::istringstream bad_plan("model.blocks = 2\n");  // the default plan names SConvLB_3..6
  CHECK_THROWS_AS(parse_config(bad_plan), ConfigError);
}

TEST_CASE("cli end to end") {
  const fs::path dir = tmp_dir("cli");
  const std::string d = dir.string();

  CHECK(cli({}).code == kExitUsage);
  CHECK(cli({"bogus"}).code == kExitUsage);
  CHECK(cli({"--help"}).code == kExitOk);

  REQUIRE(cli({"synth", "--out", d + "/data", "--count", "3", "--size", "32", "--seed", "1"}).code == 0);
  REQUIRE(cli({"synth", "--out", d + "/held", "--count", "2", "--size", "32", "--seed", "2"}).code == 0);
  REQUIRE(cli({"init", "--out", d + "/teacher.ckpt", "--channels", "5", "--blocks", "2", "--seed", "3"}).code == 0);
  REQUIRE(cli({"init", "--out", d + "/base.ckpt", "--channels", "4", "--blocks", "2", "--seed", "4"}).code == 0);

  const std::string common =
      "model.channels = 4\nmodel.blocks = 2\nlora.plan = none\nlora.plan.SConvLB_1 = 2,4\nlora.plan.Conv_2 = 2,4\n"
      "train.stages = 1\ntrain.stage1.patch = 16\ntrain.stage1.batch = 2\ntrain.stage1.lr = 1e-3\n"
      "dataset.dir = data\nstudent.checkpoint = base.ckpt\n";
  write_text(dir / "no_teacher.cfg", common + "train.stage1.iters = 2\n");
  const Run nt = cli({"train", "--config", d + "/no_teacher.cfg", "--out", d + "/x.ckpt"});
  CHECK(nt.code == kExitUsage);
  CHECK(nt.err.find("teacher.checkpoint") != std::string::npos);

  write_text(dir / "typo.cfg", common + "train.stage1.iter = 2\n");
  const Run typo = cli({"train", "--config", d + "/typo.cfg", "--out", d + "/x.ckpt"});
  CHECK(typo.code == kExitUsage);
  CHECK(typo.err.find("train.stage1.iter") != std::string::npos);

  write_text(dir / "zero.cfg", common + "teacher.checkpoint = teacher.ckpt\ntrain.stage1.iters = 0\n");
  REQUIRE(cli({"train", "--config", d + "/zero.cfg", "--out", d + "/zero.ckpt"}).code == 0);
  const Checkpoint zero = Checkpoint::load(dir / "zero.ckpt");
  CHECK(zero.find("SConvLB_1.w1.lora_y")->tensor == TensorF::zeros({2, 36}));

  write_text(dir / "train.cfg", common + "teacher.checkpoint = teacher.ckpt\ntrain.stage1.iters = 4\n");
  const Run tr = cli({"train", "--config", d + "/train.cfg", "--out", d + "/student.ckpt"});
  REQUIRE(tr.code == 0);
  CHECK(tr.out.find("trainable parameters: ") != std::string::npos);
  CHECK(fs::exists(dir / "student.ckpt.log.csv"));

  // finalize: untrained student equals pretrained; parameter count reported
  const Run f0 = cli({"finalize", "--student", d + "/zero.ckpt", "--pretrained", d + "/base.ckpt", "--beta", "0.3",
                      "--out", d + "/f0.ckpt"});
  REQUIRE(f0.code == 0);
  CHECK(file_bytes(dir / "f0.ckpt") == file_bytes(dir / "base.ckpt"));
  CHECK(f0.out.find("parameters: " + std::to_string(Checkpoint::load(dir / "base.ckpt").parameter_count())) !=
        std::string::npos);

  REQUIRE(cli({"finalize", "--student", d + "/student.ckpt", "--pretrained", d + "/base.ckpt", "--beta", "1", "--out",
               d + "/f1.ckpt"})
              .code == 0);
  const Checkpoint f1 = Checkpoint::load(dir / "f1.ckpt");
  for (const auto& e : f1.tensors) CHECK(e.name.find(".lora_") == std::string::npos);
  const Checkpoint plain = model_to_checkpoint(model_from_checkpoint(Checkpoint::load(dir / "student.ckpt")).merged());
  CHECK(f1.serialize() == plain.serialize());
  CHECK(cli({"finalize", "--student", d + "/student.ckpt", "--pretrained", d + "/base.ckpt", "--ema", "--out",
             d + "/fe.ckpt"})
            .code == 0);

  const Run mismatch = cli({"finalize", "--student", d + "/student.ckpt", "--pretrained", d + "/teacher.ckpt",
                            "--out", d + "/bad.ckpt"});
  CHECK(mismatch.code == kExitRuntime);
  CHECK(mismatch.err.find("conv_head.kernel") != std::string::npos);

  // sr: shape, determinism, merged vs adapter checkpoint
  ImageU8 small(8, 8);
  for (auto& p : small.pixels) p = static_cast<std::uint8_t>(rng() % 256);
  save_image(small, dir / "in.png");
  REQUIRE(cli({"sr", "--model", d + "/student.ckpt", "--input", d + "/in.png", "--output", d + "/o1.png"}).code == 0);
  REQUIRE(cli({"sr", "--model", d + "/student.ckpt", "--input", d + "/in.png", "--output", d + "/o2.png"}).code == 0);
  REQUIRE(cli({"sr", "--model", d + "/f1.ckpt", "--input", d + "/in.png", "--output", d + "/o3.png"}).code == 0);
  const ImageU8 o1 = load_image(dir / "o1.png"), o3 = load_image(dir / "o3.png");
  CHECK(o1.width == 32);
  CHECK(o1.height == 32);
  CHECK(file_bytes(dir / "o1.png") == file_bytes(dir / "o2.png"));
  int worst = 0;
  for (std::size_t i = 0; i < o1.pixels.size(); ++i) worst = std::max(worst, std::abs(o1.pixels[i] - o3.pixels[i]));
  CHECK(worst <= 1);
  const Run missing_in = cli({"sr", "--model", d + "/f1.ckpt", "--input", d + "/nope.png", "--output", d + "/o.png"});
  CHECK(missing_in.code == kExitRuntime);
  CHECK(missing_in.err.find("nope.png") != std::string::npos);

  // eval
  const Run e4 = cli({"eval", "--model", d + "/f1.ckpt", "--dataset", d + "/held", "--json", d + "/r.json"});
  const Run e4b = cli({"eval", "--model", d + "/f1.ckpt", "--dataset", d + "/held"});
  const Run e0 = cli({"eval", "--model", d + "/f1.ckpt", "--dataset", d + "/held", "--crop", "0"});
  const Run rgb = cli({"eval", "--model", d + "/f1.ckpt", "--dataset", d + "/held", "--channel", "rgb"});
  REQUIRE(e4.code == 0);
  CHECK(e4.out == e4b.out);
  CHECK(e4.out != e0.out);
  CHECK(e4.out != rgb.out);
  const Run raw = cli({"eval", "--model", d + "/f1.ckpt", "--dataset", d + "/held", "--no-quantize"});
  CHECK(raw.code == 0);
  CHECK(raw.out != e4.out);
  CHECK(fs::exists(dir / "r.json"));
  fs::create_directories(dir / "empty");
  CHECK(cli({"eval", "--model", d + "/f1.ckpt", "--dataset", d + "/empty"}).code == kExitRuntime);
  CHECK(cli({"eval", "--model", d + "/f1.ckpt", "--dataset", d + "/held", "--channel", "lab"}).code == kExitUsage);
}

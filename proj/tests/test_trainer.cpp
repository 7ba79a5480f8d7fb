// SPDX-License-Identifier: Apache-2.0

#include <catch_amalgamated.hpp>

#include <cmath>
#include <filesystem>
#include <limits>

#include "rtda/trainer.hpp"

using namespace rtda;

namespace {

TrainConfig small_config(std::string out_dir = "") {
  TrainConfig cfg;
  cfg.seed = 11;
  cfg.max_iter = 6;
  cfg.batch = 2;
  cfg.image_size = 32;
  cfg.width = 0.25;
  cfg.train_samples = 5;
  cfg.eval_samples = 4;
  cfg.out_dir = std::move(out_dir);
  return cfg;
}

std::filesystem::path scratch_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("rtda_trainer_" + name);
  std::filesystem::remove_all(dir);
  return dir;
}

std::vector<Tensor<float>> param_values(ModelGraph& g) {
  std::vector<Tensor<float>> out;
  for (const auto& p : g.registry().params()) out.push_back(p.var.value());
  return out;
}

std::vector<Tensor<float>> param_grads(ModelGraph& g) {
  std::vector<Tensor<float>> out;
  for (const auto& p : g.registry().params()) out.push_back(p.var.grad());
  return out;
}

std::string slurp(const std::filesystem::path& p) {
  const auto bytes = read_file(p);
  return std::string(bytes.begin(), bytes.end());
}

}  // namespace

TEST_CASE("config parse, defaults and round trip") {
  const auto def = TrainConfig::parse("");
  CHECK(def.lambda_adv == 0.01);
  CHECK(def.lr_seg == 2.5e-4);
  CHECK(def.lr_disc == 1e-5);
  CHECK(def.poly_power == 0.9);
  CHECK(def.batch == 4);
  CHECK(def.disc_variant == DiscriminatorVariant::FCDLightThin);

  const auto cfg = TrainConfig::parse(
      "# comment\n"
      "seed = 7\n"
      "max_iter = 30   # trailing comment\n"
      "disc_variant = FCD\n"
      "lambda_adv = 0\n"
      "width = 0.5\n"
      "loss_reduction = sum\n");
  CHECK(cfg.seed == 7);
  CHECK(cfg.max_iter == 30);
  CHECK(cfg.disc_variant == DiscriminatorVariant::FCD);
  CHECK(cfg.lambda_adv == 0.0);
  CHECK(cfg.width == 0.5);
  CHECK(cfg.loss_reduction == Reduction::Sum);

  const auto back = TrainConfig::parse(cfg.to_text());
  CHECK(back.to_text() == cfg.to_text());
}

TEST_CASE("config errors") {
  CHECK_THROWS_AS(TrainConfig::parse("learning_rate = 1\n"), ConfigError);
  CHECK_THROWS_AS(TrainConfig::parse("max_iter = ten\n"), ConfigError);
  CHECK_THROWS_AS(TrainConfig::parse("max_iter\n"), ConfigError);
  CHECK_THROWS_AS(TrainConfig::parse("lambda_adv = -1\n"), ConfigError);
  CHECK_THROWS_AS(TrainConfig::parse("image_size = 48\n"), ConfigError);
  CHECK_THROWS_AS(TrainConfig::parse("disc_variant = patch\n"), ConfigError);
  CHECK_THROWS_AS(TrainConfig::from_file("/nonexistent/cfg.txt"), Error);
}

TEST_CASE("loss log formatting") {
  CHECK(loss_log_header() == "iter,l_seg,l_adv,l_d,lr_seg,lr_disc\n");
  LossRecord r{3, 0.5, 0.25, 1.5, 2.5e-4, 1e-5};
  CHECK(loss_log_row(r) == "3,0.5,0.25,1.5,0.00025,1e-05\n");
}

TEST_CASE("checkpoint encode/decode is lossless and byte-stable") {
  Trainer trainer(small_config());
  const auto ckpt = trainer.checkpoint();
  const auto bytes = ckpt.encode();
  const auto back = Checkpoint::decode(bytes);
  CHECK(back.iteration == ckpt.iteration);
  REQUIRE(back.tensors.size() == ckpt.tensors.size());
  for (std::size_t i = 0; i < back.tensors.size(); ++i) {
    CHECK(back.tensors[i].name == ckpt.tensors[i].name);
    CHECK(back.tensors[i].tensor == ckpt.tensors[i].tensor);
  }
  CHECK(back.encode() == bytes);

  const auto dir = scratch_dir("ckpt");
  std::filesystem::create_directories(dir);
  ckpt.save(dir / "a.rtda");
  Checkpoint::load(dir / "a.rtda").save(dir / "b.rtda");
  CHECK(read_file(dir / "a.rtda") == read_file(dir / "b.rtda"));
  std::filesystem::remove_all(dir);

  const auto meta = read_meta(ckpt);
  CHECK(meta.num_classes == 5);
  CHECK(meta.width == 0.25);
  CHECK(meta.seed == 11);
  CHECK(meta.max_iter == 6);
  CHECK(meta.disc_variant == DiscriminatorVariant::FCDLightThin);
}

TEST_CASE("checkpoint corruption is detected") {
  const auto bytes = Trainer(small_config()).checkpoint().encode();
  auto flipped = bytes;
  flipped[bytes.size() / 2] ^= 0x01;
  CHECK_THROWS_AS(Checkpoint::decode(flipped), FormatError);
  auto magic = bytes;
  magic[0] = 'X';
  CHECK_THROWS_WITH(Checkpoint::decode(magic), Catch::Matchers::ContainsSubstring("magic"));
  auto version = bytes;
  version[4] = 9;
  CHECK_THROWS_AS(Checkpoint::decode(version), FormatError);
  auto cut = bytes;
  cut.resize(cut.size() - 20);
  CHECK_THROWS_AS(Checkpoint::decode(cut), FormatError);
  auto extra = bytes;
  extra.push_back(0);
  CHECK_THROWS_AS(Checkpoint::decode(extra), FormatError);
}

TEST_CASE("zero-initialized discriminator: l_d = 2 ln 2 and l_adv = ln 2 at the first iteration") {
  const auto cfg = small_config();
  Trainer trainer(cfg);
  const auto split = training_split(cfg);
  const auto rec = trainer.train_iteration(trainer.batch_for_iteration(split));
  CHECK(rec.l_d == Catch::Approx(2 * std::log(2.0)).margin(1e-6));
  CHECK(rec.l_adv == Catch::Approx(std::log(2.0)).margin(1e-6));
  CHECK(rec.iter == 0);
  CHECK(trainer.iteration() == 1);
}

TEST_CASE("the segmentation step leaves the discriminator untouched") {
  auto cfg = small_config();
  cfg.lr_disc = 0;
  cfg.disc_final_zero_init = false;
  Trainer trainer(cfg);
  const auto split = training_split(cfg);
  const auto before = param_values(trainer.disc());
  for (int i = 0; i < 2; ++i) trainer.train_iteration(trainer.batch_for_iteration(split));
  CHECK(param_values(trainer.disc()) == before);
}

TEST_CASE("the discriminator step leaves segmentation parameters and gradients untouched") {
  auto a_cfg = small_config();
  a_cfg.lr_disc = 0;
  a_cfg.disc_final_zero_init = false;
  auto b_cfg = a_cfg;
  b_cfg.lr_disc = 1e-2;
  Trainer a(a_cfg), b(b_cfg);
  const auto split = training_split(a_cfg);
  a.train_iteration(a.batch_for_iteration(split));
  b.train_iteration(b.batch_for_iteration(split));
  CHECK(param_values(a.seg()) == param_values(b.seg()));
  CHECK(param_grads(a.seg()) == param_grads(b.seg()));
  CHECK_FALSE(param_values(a.disc()) == param_values(b.disc()));
}

TEST_CASE("detached probability maps carry no gradient into the segmentation network") {
  auto cfg = small_config();
  cfg.disc_final_zero_init = false;
  Trainer trainer(cfg);
  const auto batch = trainer.batch_for_iteration(training_split(cfg));
  trainer.seg().zero_grad();
  Tape<float> tape;
  auto p_src = detach(softmax_channels(tape, trainer.seg().forward(tape, Var<float>(batch.source_images), Mode::Train)));
  auto p_tgt = detach(softmax_channels(tape, trainer.seg().forward(tape, Var<float>(batch.target_images), Mode::Train)));
  auto l_d = disc_loss(tape, trainer.disc().forward(tape, p_src, Mode::Train),
                       trainer.disc().forward(tape, p_tgt, Mode::Train));
  tape.backward(l_d.var);
  for (const auto& g : param_grads(trainer.seg()))
    for (float v : g.values()) CHECK(v == 0.0f);
  double disc_norm = 0;
  for (const auto& g : param_grads(trainer.disc()))
    for (float v : g.values()) disc_norm += std::abs(v);
  CHECK(disc_norm > 0);
}

TEST_CASE("lambda = 0 reduces to source-only supervised training") {
  auto cfg = small_config();
  cfg.lambda_adv = 0;
  cfg.disc_final_zero_init = false;
  Trainer adv(cfg), sup(cfg);
  const auto split = training_split(cfg);
  for (int i = 0; i < 3; ++i) {
    const auto batch = adv.batch_for_iteration(split);
    const auto ra = adv.train_iteration(batch);
    const auto rs = sup.supervised_iteration(batch);
    CHECK(ra.l_seg == rs.l_seg);
  }
  CHECK(param_values(adv.seg()) == param_values(sup.seg()));
}

TEST_CASE("run_training logs one row per iteration with the poly schedule") {
  const auto cfg = small_config();
  const auto result = run_training(cfg, training_split(cfg));
  REQUIRE(result.log.size() == static_cast<std::size_t>(cfg.max_iter));
  for (std::size_t i = 0; i < result.log.size(); ++i) {
    const auto& r = result.log[i];
    CHECK(r.iter == static_cast<std::int64_t>(i));
    CHECK(r.lr_seg == poly_lr(cfg.lr_seg, r.iter, cfg.max_iter, cfg.poly_power));
    CHECK(r.lr_disc == poly_lr(cfg.lr_disc, r.iter, cfg.max_iter, cfg.poly_power));
    CHECK(std::isfinite(r.l_seg));
    CHECK(std::isfinite(r.l_adv));
    CHECK(std::isfinite(r.l_d));
  }
  CHECK(result.final_checkpoint.iteration == static_cast<std::uint64_t>(cfg.max_iter));
}

TEST_CASE("training is bitwise deterministic") {
  const auto d1 = scratch_dir("det1"), d2 = scratch_dir("det2");
  auto c1 = small_config(d1.string()), c2 = small_config(d2.string());
  const auto r1 = run_training(c1, training_split(c1));
  const auto r2 = run_training(c2, training_split(c2));
  CHECK(r1.final_checkpoint.encode() == r2.final_checkpoint.encode());
  CHECK(read_file(d1 / "final.rtda") == read_file(d2 / "final.rtda"));
  CHECK(slurp(d1 / "log.csv") == slurp(d2 / "log.csv"));
  auto c3 = small_config();
  c3.seed = 12;
  CHECK_FALSE(run_training(c3, training_split(c3)).final_checkpoint.encode() == r1.final_checkpoint.encode());
  std::filesystem::remove_all(d1);
  std::filesystem::remove_all(d2);
}

TEST_CASE("resuming from a checkpoint is bitwise equal to an uninterrupted run") {
  const auto whole = scratch_dir("whole"), parts = scratch_dir("parts");
  auto cw = small_config(whole.string());
  auto cp = small_config(parts.string());
  cp.checkpoint_every = 3;
  const auto split = training_split(cw);
  run_training(cw, split);
  run_training(cp, split);
  REQUIRE(std::filesystem::exists(parts / "ckpt_000003.rtda"));
  const auto mid = Checkpoint::load(parts / "ckpt_000003.rtda");
  CHECK(mid.iteration == 3);
  std::filesystem::remove(parts / "final.rtda");
  const auto resumed = run_training(cp, split, mid);
  CHECK(resumed.log.size() == 3);
  CHECK(read_file(parts / "final.rtda") == read_file(whole / "final.rtda"));
  CHECK(slurp(parts / "log.csv") == slurp(whole / "log.csv"));
  std::filesystem::remove_all(whole);
  std::filesystem::remove_all(parts);
}

TEST_CASE("max_iter = 0 returns the initialization") {
  auto cfg = small_config();
  cfg.max_iter = 0;
  const auto result = run_training(cfg, training_split(cfg));
  CHECK(result.log.empty());
  CHECK(result.final_checkpoint.encode() == Trainer(cfg).checkpoint().encode());
}

TEST_CASE("restore rejects a different architecture") {
  const auto ckpt = Trainer(small_config()).checkpoint();
  auto other = small_config();
  other.width = 0.5;
  Trainer t(other);
  CHECK_THROWS_AS(t.restore(ckpt), ConfigError);
  auto variant = small_config();
  variant.disc_variant = DiscriminatorVariant::FCD;
  Trainer v(variant);
  CHECK_THROWS_AS(v.restore(ckpt), ConfigError);
}

TEST_CASE("evaluation checks the class count") {
  auto cfg = small_config();
  const auto ckpt = Trainer(cfg).checkpoint();
  cfg.num_classes = 4;
  CHECK_THROWS_AS(evaluate(ckpt, evaluation_split(cfg), Domain::Target), ConfigError);
}

TEST_CASE("an untrained network scores below 0.35 target mIoU") {
  auto cfg = small_config();
  cfg.image_size = 64;
  cfg.width = 0.5;
  cfg.eval_samples = 20;
  const auto split = evaluation_split(cfg);
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    cfg.seed = seed;
    const auto report = evaluate(Trainer(cfg).checkpoint(), split, Domain::Target);
    INFO("seed " << seed);
    CHECK(report.mean < 0.35);
  }
}

TEST_CASE("a tiny source set can be overfit") {
  auto cfg = small_config();
  cfg.train_samples = 2;
  cfg.batch = 2;
  cfg.image_size = 128;
  cfg.max_iter = 300;
  cfg.lr_seg = 5e-2;
  cfg.weight_decay = 0;
  Trainer trainer(cfg);
  const auto split = training_split(cfg);
  for (std::int64_t i = 0; i < cfg.max_iter; ++i) trainer.supervised_iteration(trainer.batch_for_iteration(split));
  CHECK(evaluate(trainer.seg(), split, Domain::Source).mean > 0.9);
}

TEST_CASE("a non-finite input reports the iteration and the loss") {
  const auto cfg = small_config();
  Trainer trainer(cfg);
  auto batch = trainer.batch_for_iteration(training_split(cfg));
  batch.source_images[0] = std::numeric_limits<float>::quiet_NaN();
  try {
    trainer.train_iteration(batch);
    FAIL("expected NumericError");
  } catch (const NumericError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("iteration 0") != std::string::npos);
    CHECK(msg.find("l_seg") != std::string::npos);
  }
}

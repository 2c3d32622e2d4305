#include <doctest.h>

#include <cmath>
#include <cstring>

#include "diffris/errors.hpp"
#include "diffris/gradcheck.hpp"
#include "diffris/training.hpp"
#include "support.hpp"

using namespace diffris;
using namespace diffris::training;

namespace {

synthdata::Config tiny_data() {
  synthdata::Config d;
  d.height = 32;
  d.width = 32;
  d.max_objects = 1;
  d.max_tokens = 9;
  return d;
}

// The gradient-check model with room for the longest generated expression.
ModelConfig tiny_model() {
  ModelConfig c = gradcheck::tiny_config();
  c.backbones.max_tokens = 9;
  return c;
}

std::vector<synthdata::Sample> tiny_samples(int n, std::uint64_t seed = 3) {
  return synthdata::generate_samples(n, seed, tiny_data());
}

Config tiny_train(int epochs) {
  Config c;
  c.lr = 1e-3;
  c.batch_size = 2;
  c.epochs = epochs;
  c.eval_train = true;
  return c;
}

double sample_loss(Model& model, const synthdata::Sample& s) {
  ad::Tape tape;
  pcmrd::RunOptions run;
  run.train = true;
  auto pass = model.forward(tape, s.triplet.image, s.triplet.expression, run);
  return segmentation_loss(pass.logits.value(), s.triplet.mask, {}).loss;
}

}  // namespace

TEST_CASE("loss limits: confident correct logits and the uniform prediction") {
  Rng rng(1);
  BinaryMask gt(8, 8);
  for (auto& v : gt.values) v = rng.uniform() < 0.4 ? 1 : 0;
  Matrix sure(64, 1);
  for (int i = 0; i < 64; ++i) sure(i, 0) = gt.values[i] ? 60.0 : -60.0;
  CHECK(segmentation_loss(sure, gt, {}).loss < 1e-12);

  const auto flat = segmentation_loss(Matrix::Zero(64, 1), gt, {});
  CHECK(flat.bce == doctest::Approx(std::log(2.0)).epsilon(1e-15));
  CHECK_THROWS_AS(segmentation_loss(Matrix::Zero(63, 1), gt, {}), ShapeError);
}

TEST_CASE("loss is stable for extreme logits") {
  BinaryMask gt(1, 2);
  gt.set(0, 0, true);
  Matrix x(2, 1);
  x << -800.0, 800.0;
  const auto r = segmentation_loss(x, gt, {});
  CHECK(std::isfinite(r.loss));
  CHECK(r.bce == doctest::Approx(800.0).epsilon(1e-12));
  CHECK(r.grad.allFinite());
}

TEST_CASE("loss gradient matches finite differences") {
  Rng rng(2);
  for (int trial = 0; trial < 5; ++trial) {
    BinaryMask gt(4, 5);
    for (auto& v : gt.values) v = rng.uniform() < 0.5 ? 1 : 0;
    const Matrix x = rng.normal_matrix(20, 1, 2.0);
    const LossWeights w{0.3 + rng.uniform(), 0.3 + rng.uniform()};
    const double err = test::gradient_error(x, [&](ad::Tape&, ad::Var v) { return segmentation_loss(v, gt, w); });
    CHECK(err < 1e-4);
  }
  gradcheck::Options opts;
  CHECK(gradcheck::check_loss(opts).pass);
}

TEST_CASE("zero learning rate leaves parameters bit-identical") {
  Model model(tiny_model());
  const ParamStore before = model.params();
  Config cfg;
  cfg.lr = 0.0;
  AdamW opt(cfg);
  Rng rng(3);
  for (int step = 0; step < 20; ++step) {
    for (auto& [name, p] : model.params().tensors()) p.grad = rng.normal_matrix(p.value.rows(), p.value.cols(), 1.0);
    opt.step(model.params());
  }
  for (const auto& [name, p] : model.params().tensors()) CHECK(p.value == before.at(name).value);
}

TEST_CASE("decoupled weight decay shrinks a parameter with no gradient") {
  ParamStore params;
  params.add("probe", Matrix::Constant(2, 3, 0.75));
  Config cfg;
  cfg.lr = 0.01;
  cfg.weight_decay = 0.1;
  AdamW opt(cfg);
  double expected = 0.75;
  for (int step = 0; step < 10; ++step) {
    params.zero_grad();
    opt.step(params);
    expected *= 1.0 - cfg.lr * cfg.weight_decay;
    CHECK(params.at("probe").value(1, 2) == doctest::Approx(expected).epsilon(1e-6));
  }
}

TEST_CASE("one small step lowers the loss on its sample") {
  Model model(tiny_model());
  const auto samples = tiny_samples(1);
  const double before = sample_loss(model, samples[0]);
  model.params().zero_grad();
  {
    ad::Tape tape;
    pcmrd::RunOptions run;
    run.train = true;
    auto pass = model.forward(tape, samples[0].triplet.image, samples[0].triplet.expression, run);
    tape.backward(segmentation_loss(pass.logits, samples[0].triplet.mask, {}));
  }
  Config cfg;
  cfg.lr = 1e-4;
  AdamW opt(cfg);
  opt.step(model.params());
  CHECK(sample_loss(model, samples[0]) < before);
}

TEST_CASE("frozen check passes untouched runs and names a changed tensor") {
  Model model(tiny_model());
  AdamW opt(Config{});
  const Checkpoint a = make_checkpoint(model, opt, 0);
  CHECK_NOTHROW(assert_frozen(a, make_checkpoint(model, opt, 0)));
  model.params().at("backbones/text/embedding").value(0, 0) += 1.0;
  try {
    assert_frozen(a, make_checkpoint(model, opt, 0));
    FAIL("expected a contract violation");
  } catch (const ContractViolation& e) {
    CHECK(std::string(e.what()).find("backbones/text/embedding") != std::string::npos);
  }
}

TEST_CASE("training keeps backbones bit-identical and moves adapter and decoder") {
  Model model(tiny_model());
  const auto samples = tiny_samples(4);
  const ParamStore before = model.params();
  const auto result = train(model, tiny_train(3), samples, {});
  CHECK(result.last.step == 6);
  bool adapter_moved = false;
  bool decoder_moved = false;
  for (const auto& [name, p] : model.params().tensors()) {
    const Matrix& old = before.at(name).value;
    const bool same = std::memcmp(p.value.data(), old.data(), sizeof(double) * old.size()) == 0;
    if (name.starts_with("backbones/")) CHECK(same);
    if (name.starts_with("cp_adapter/") && !same) adapter_moved = true;
    if (name.starts_with("pcmrd/") && !same) decoder_moved = true;
  }
  CHECK(adapter_moved);
  CHECK(decoder_moved);
}

TEST_CASE("an injected freeze violation aborts training") {
  Model model(tiny_model());
  const auto samples = tiny_samples(2);
  TrainOptions opts;
  opts.inject_freeze_violation = true;
  CHECK_THROWS_AS(train(model, tiny_train(1), samples, {}, opts), ContractViolation);
}

TEST_CASE("a non-finite loss aborts with a dump naming the batch") {
  Model model(tiny_model());
  model.params().at("pcmrd/head/b").value(0, 0) = std::nan("");
  const auto samples = tiny_samples(2);
  test::TempDir dir("nan");
  TrainOptions opts;
  opts.out_dir = dir.path();
  CHECK_THROWS_AS(train(model, tiny_train(1), samples, {}, opts), NumericError);
  CHECK(std::filesystem::exists(dir.path() / "nan_dump.json"));
}

TEST_CASE("checkpoints round-trip and resuming continues the same run") {
  const auto samples = tiny_samples(4);
  test::TempDir straight("straight");
  test::TempDir split("split");
  {
    Model model(tiny_model());
    TrainOptions opts;
    opts.out_dir = straight.path();
    train(model, tiny_train(3), samples, samples, opts);
  }
  {
    Model model(tiny_model());
    TrainOptions opts;
    opts.out_dir = split.path();
    train(model, tiny_train(2), samples, samples, opts);
  }
  const Checkpoint saved = load_checkpoint(split.path() / "last.dris");
  CHECK(saved.epoch == 2);
  CHECK(saved.step == 4);
  {
    Model model(tiny_model());
    TrainOptions opts;
    opts.out_dir = split.path();
    opts.resume = saved;
    const auto r = train(model, tiny_train(3), samples, samples, opts);
    REQUIRE(r.epochs.size() == 1);
    CHECK(r.epochs[0].epoch == 3);
  }
  CHECK(test::read_file(split.path() / "metrics.jsonl") == test::read_file(straight.path() / "metrics.jsonl"));
  CHECK(test::read_file(split.path() / "last.dris") == test::read_file(straight.path() / "last.dris"));
}

TEST_CASE("restoring into a mismatched model is rejected") {
  Model small(tiny_model());
  const Checkpoint c = make_checkpoint(small, AdamW(Config{}), 0);
  Model other{ModelConfig{}};
  CHECK_THROWS(restore_params(other, c));
}

TEST_CASE("evaluation summaries respect metric bounds") {
  Model model(tiny_model());
  const auto samples = tiny_samples(6);
  std::vector<metrics::EvalRecord> records;
  const auto s = evaluate(model, samples, metrics::kDefaultThresholds, 0.0, &records);
  CHECK(records.size() == 6);
  CHECK(s.count == 6);
  CHECK_NOTHROW(metrics::check_summary(s));
}

TEST_CASE("invalid training settings are rejected") {
  Config c;
  c.batch_size = 0;
  CHECK_THROWS_AS(validate(c), ParameterError);
  c = Config{};
  c.lr = -1.0;
  CHECK_THROWS_AS(validate(c), ParameterError);
  c = Config{};
  c.lr_schedule = "step";
  CHECK_THROWS_AS(validate(c), ParameterError);
}

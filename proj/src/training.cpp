#include "diffris/training.hpp"

#include <cmath>
#include <fstream>
#include <numbers>
#include <numeric>

#include <spdlog/spdlog.h>

#include "diffris/errors.hpp"

namespace diffris::training {

namespace {

constexpr std::uint64_t kShuffleSalt = 0x5368756666ULL;
constexpr std::uint64_t kNoiseSalt = 0x4e6f697365ULL;
const std::string kBackbonePrefix = "backbones/";

Matrix scalar(double v) {
  Matrix m(1, 1);
  m(0, 0) = v;
  return m;
}

double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

// Digest stored as four 16-bit chunks so each survives float32 storage.
Matrix encode_digest(std::uint64_t d) {
  Matrix m(1, 4);
  for (int i = 0; i < 4; ++i) m(0, i) = static_cast<double>((d >> (16 * i)) & 0xffffU);
  return m;
}

std::uint64_t decode_digest(const Matrix& m) {
  if (m.rows() != 1 || m.cols() != 4) throw IoError("checkpoint: malformed backbone digest");
  std::uint64_t d = 0;
  for (int i = 0; i < 4; ++i) d |= static_cast<std::uint64_t>(m(0, i)) << (16 * i);
  return d;
}

std::uint64_t digest_of(const TensorMap& params) {
  ParamStore store;
  for (const auto& [name, value] : params) {
    if (name.starts_with(kBackbonePrefix)) store.tensors()[name].value = value;
  }
  return store.digest(kBackbonePrefix);
}

TensorMap with_prefix(const TensorMap& params, std::string_view prefix) {
  TensorMap out;
  for (const auto& [name, value] : params) {
    if (name.starts_with(prefix)) out.emplace(name, value);
  }
  return out;
}

double scheduled_lr(const Config& cfg, std::int64_t step, std::int64_t total_steps) {
  if (cfg.lr_schedule == "cosine" && total_steps > 0) {
    const double progress = std::min(1.0, static_cast<double>(step) / static_cast<double>(total_steps));
    return 0.5 * cfg.lr * (1.0 + std::cos(std::numbers::pi * progress));
  }
  return cfg.lr;
}

void clip_gradients(ParamStore& params, double max_norm) {
  double total = 0.0;
  for (auto& [name, p] : params.tensors()) {
    if (p.trainable) total += p.grad.squaredNorm();
  }
  const double norm = std::sqrt(total);
  if (norm <= max_norm) return;
  const double k = max_norm / norm;
  for (auto& [name, p] : params.tensors()) {
    if (p.trainable) p.grad *= k;
  }
}

void write_nan_dump(const std::filesystem::path& dir, int epoch, int batch, const std::vector<std::string>& ids,
                    const std::vector<double>& losses) {
  if (dir.empty()) return;
  nlohmann::json j;
  j["epoch"] = epoch;
  j["batch"] = batch;
  j["sample_ids"] = ids;
  nlohmann::json l = nlohmann::json::array();
  for (double v : losses) l.push_back(std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(std::to_string(v)));
  j["losses"] = l;
  std::ofstream(dir / "nan_dump.json") << j.dump(2) << '\n';
}

nlohmann::json summary_fields(const metrics::EvalSummary& s) {
  nlohmann::json j = metrics::summary_json(s, {});
  j.erase("intersections");
  j.erase("unions");
  return j;
}

}  // namespace

void validate(const Config& cfg) {
  if (!(cfg.lr >= 0.0)) throw ParameterError("training: lr must be non-negative");
  if (cfg.weight_decay < 0.0) throw ParameterError("training: weight_decay must be non-negative");
  if (!(cfg.beta1 >= 0.0 && cfg.beta1 < 1.0 && cfg.beta2 >= 0.0 && cfg.beta2 < 1.0)) {
    throw ParameterError("training: betas must lie in [0, 1)");
  }
  if (!(cfg.eps > 0.0)) throw ParameterError("training: eps must be positive");
  if (cfg.batch_size < 1) throw ParameterError("training: batch_size must be at least 1");
  if (cfg.epochs < 0) throw ParameterError("training: epochs must be non-negative");
  if (cfg.grad_clip < 0.0) throw ParameterError("training: grad_clip must be non-negative");
  if (cfg.lr_schedule != "constant" && cfg.lr_schedule != "cosine") {
    throw ParameterError("training: lr_schedule must be 'constant' or 'cosine'");
  }
  if (cfg.loss_weights.bce < 0.0 || cfg.loss_weights.dice < 0.0) {
    throw ParameterError("training: loss weights must be non-negative");
  }
}

LossResult segmentation_loss(const Matrix& logits, const BinaryMask& gt, const LossWeights& weights) {
  const auto n = static_cast<Eigen::Index>(gt.values.size());
  if (logits.rows() != n || logits.cols() != 1) throw ShapeError("segmentation_loss: logits do not match mask");
  constexpr double kSmooth = 1.0;
  LossResult r;
  r.grad.resize(n, 1);
  Matrix p(n, 1);
  double bce = 0.0;
  double inter = 0.0;
  double psum = 0.0;
  double ysum = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    const double x = logits(i, 0);
    const double y = gt.values[i] ? 1.0 : 0.0;
    bce += std::max(x, 0.0) - x * y + std::log1p(std::exp(-std::abs(x)));
    p(i, 0) = sigmoid(x);
    inter += p(i, 0) * y;
    psum += p(i, 0);
    ysum += y;
  }
  const double s = psum + ysum + kSmooth;
  const double num = 2.0 * inter + kSmooth;
  r.bce = bce / static_cast<double>(n);
  r.dice = 1.0 - num / s;
  r.loss = weights.bce * r.bce + weights.dice * r.dice;
  for (Eigen::Index i = 0; i < n; ++i) {
    const double y = gt.values[i] ? 1.0 : 0.0;
    const double dp = -(2.0 * y * s - num) / (s * s);
    r.grad(i, 0) = weights.bce * (p(i, 0) - y) / static_cast<double>(n) +
                   weights.dice * dp * p(i, 0) * (1.0 - p(i, 0));
  }
  return r;
}

ad::Var segmentation_loss(ad::Var logits, const BinaryMask& gt, const LossWeights& weights) {
  LossResult r = segmentation_loss(logits.value(), gt, weights);
  const int ids[] = {logits.id()};
  return logits.tape()->record(scalar(r.loss), ids, [il = logits.id(), g = std::move(r.grad)](ad::Tape& t, int self) {
    t.accumulate(il, g * t.grad(self)(0, 0));
  });
}

// ---- AdamW -------------------------------------------------------------------

void AdamW::step(ParamStore& params, double lr) {
  ++steps_;
  const double t = static_cast<double>(steps_);
  const double c1 = 1.0 - std::pow(cfg_.beta1, t);
  const double c2 = 1.0 - std::pow(cfg_.beta2, t);
  for (auto& [name, p] : params.tensors()) {
    if (!p.trainable) continue;
    auto [mit, m_new] = m_.try_emplace(name, Matrix::Zero(p.value.rows(), p.value.cols()));
    auto [vit, v_new] = v_.try_emplace(name, Matrix::Zero(p.value.rows(), p.value.cols()));
    Matrix& m = mit->second;
    Matrix& v = vit->second;
    const Matrix g = p.grad.size() == 0 ? Matrix::Zero(p.value.rows(), p.value.cols()) : p.grad;
    p.value *= 1.0 - lr * cfg_.weight_decay;
    m = cfg_.beta1 * m + (1.0 - cfg_.beta1) * g;
    v = cfg_.beta2 * v + (1.0 - cfg_.beta2) * g.cwiseAbs2();
    p.value.array() -= lr * (m.array() / c1) / ((v.array() / c2).sqrt() + cfg_.eps);
    round_to_float32(p.value);
    round_to_float32(m);
    round_to_float32(v);
  }
}

TensorMap AdamW::state() const {
  TensorMap out;
  for (const auto& [name, m] : m_) out.emplace("m/" + name, m);
  for (const auto& [name, v] : v_) out.emplace("v/" + name, v);
  return out;
}

void AdamW::load_state(const TensorMap& state, std::int64_t steps) {
  m_.clear();
  v_.clear();
  for (const auto& [name, value] : state) {
    if (name.starts_with("m/")) {
      m_.emplace(name.substr(2), value);
    } else if (name.starts_with("v/")) {
      v_.emplace(name.substr(2), value);
    } else {
      throw IoError("optimizer state: unexpected entry '" + name + "'");
    }
  }
  steps_ = steps;
}

// ---- checkpoints -------------------------------------------------------------

TensorMap Checkpoint::adapter_params() const { return with_prefix(params, "cp_adapter/"); }
TensorMap Checkpoint::decoder_params() const { return with_prefix(params, "pcmrd/"); }

Checkpoint make_checkpoint(const Model& model, const AdamW& optimizer, int epoch) {
  Checkpoint c;
  c.step = optimizer.steps();
  c.epoch = epoch;
  for (const auto& [name, p] : model.params().tensors()) c.params.emplace(name, p.value);
  c.optimizer = optimizer.state();
  c.backbone_digest = model.params().digest(kBackbonePrefix);
  return c;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  TensorMap all;
  for (const auto& [name, value] : ckpt.params) all.emplace("params/" + name, value);
  for (const auto& [name, value] : ckpt.optimizer) all.emplace("optim/" + name, value);
  if (ckpt.step >= (std::int64_t{1} << 24)) throw IoError("checkpoint: step count exceeds float32 range");
  all.emplace("meta/step", scalar(static_cast<double>(ckpt.step)));
  all.emplace("meta/epoch", scalar(ckpt.epoch));
  all.emplace("meta/best_epoch", scalar(ckpt.best_epoch));
  all.emplace("meta/best_miou", scalar(ckpt.best_miou));
  all.emplace("meta/backbone_digest", encode_digest(ckpt.backbone_digest));
  write_container(path, all);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  const TensorMap all = read_container(path);
  Checkpoint c;
  auto meta = [&](const std::string& key) -> const Matrix& {
    const auto it = all.find("meta/" + key);
    if (it == all.end()) throw IoError("checkpoint " + path.string() + " lacks meta/" + key);
    return it->second;
  };
  for (const auto& [name, value] : all) {
    if (name.starts_with("params/")) {
      c.params.emplace(name.substr(7), value);
    } else if (name.starts_with("optim/")) {
      c.optimizer.emplace(name.substr(6), value);
    }
  }
  c.step = static_cast<std::int64_t>(meta("step")(0, 0));
  c.epoch = static_cast<int>(meta("epoch")(0, 0));
  c.best_epoch = static_cast<int>(meta("best_epoch")(0, 0));
  c.best_miou = meta("best_miou")(0, 0);
  c.backbone_digest = decode_digest(meta("backbone_digest"));
  if (digest_of(c.params) != c.backbone_digest) {
    throw IoError("checkpoint " + path.string() + ": backbone digest does not match stored tensors");
  }
  return c;
}

void restore_params(Model& model, const Checkpoint& ckpt) {
  for (auto& [name, p] : model.params().tensors()) {
    const auto it = ckpt.params.find(name);
    if (it == ckpt.params.end()) throw IoError("checkpoint lacks tensor '" + name + "'");
    if (it->second.rows() != p.value.rows() || it->second.cols() != p.value.cols()) {
      throw ShapeError("checkpoint tensor '" + name + "' has a different shape than the model");
    }
    p.value = it->second;
  }
  for (const auto& [name, value] : ckpt.params) {
    if (!model.params().contains(name)) throw IoError("checkpoint tensor '" + name + "' is not part of the model");
  }
}

void assert_frozen(const Checkpoint& before, const Checkpoint& after) {
  if (before.backbone_digest == after.backbone_digest) return;
  for (const auto& [name, value] : before.params) {
    if (!name.starts_with(kBackbonePrefix)) continue;
    const auto it = after.params.find(name);
    if (it == after.params.end() || it->second.rows() != value.rows() || it->second.cols() != value.cols() ||
        std::memcmp(it->second.data(), value.data(), sizeof(double) * value.size()) != 0) {
      throw ContractViolation("frozen backbone tensor '" + name + "' changed");
    }
  }
  for (const auto& [name, value] : after.params) {
    if (name.starts_with(kBackbonePrefix) && !before.params.contains(name)) {
      throw ContractViolation("frozen backbone tensor '" + name + "' appeared");
    }
  }
  throw ContractViolation("backbone digest changed");
}

// ---- evaluation ----------------------------------------------------------------

metrics::EvalSummary evaluate(Model& model, std::span<const synthdata::Sample> samples,
                              std::span<const double> thresholds, double binarize_threshold,
                              std::vector<metrics::EvalRecord>* records) {
  std::vector<metrics::EvalRecord> local;
  for (const auto& s : samples) {
    const BinaryMask pred = model.predict(s.triplet.image, s.triplet.expression, binarize_threshold);
    local.push_back(metrics::mask_iou(pred, s.triplet.mask));
  }
  metrics::EvalSummary summary = metrics::summarize(local, thresholds);
  metrics::check_summary(summary);
  if (records) *records = std::move(local);
  return summary;
}

nlohmann::json epoch_json(const EpochRecord& rec) {
  nlohmann::json j;
  j["epoch"] = rec.epoch;
  j["step"] = rec.step;
  j["loss"] = rec.loss;
  if (rec.val) {
    const auto v = summary_fields(*rec.val);
    j["oiou"] = v["oiou"];
    j["miou"] = v["miou"];
    j["pr_at"] = v["pr_at"];
  }
  if (rec.train) j["train"] = summary_fields(*rec.train);
  return j;
}

// ---- training loop ---------------------------------------------------------------

TrainResult train(Model& model, const Config& cfg, std::span<const synthdata::Sample> train_set,
                  std::span<const synthdata::Sample> val_set, const TrainOptions& options) {
  validate(cfg);
  if (train_set.empty()) throw UsageError("train: training split is empty");
  ParamStore& params = model.params();
  params.set_trainable(kBackbonePrefix, !cfg.freeze_backbones);

  AdamW optimizer(cfg);
  TrainResult result;
  int first_epoch = 1;
  if (options.resume) {
    restore_params(model, *options.resume);
    optimizer.load_state(options.resume->optimizer, options.resume->step);
    first_epoch = options.resume->epoch + 1;
    result.best_epoch = options.resume->best_epoch;
    result.best_miou = options.resume->best_miou;
  }

  const Checkpoint initial = make_checkpoint(model, optimizer, first_epoch - 1);
  std::ofstream log;
  if (!options.out_dir.empty()) {
    std::error_code ec;
    std::filesystem::create_directories(options.out_dir, ec);
    if (ec) throw IoError("cannot create run directory " + options.out_dir.string());
    log.open(options.out_dir / "metrics.jsonl", options.resume ? std::ios::app : std::ios::trunc);
    if (!log) throw IoError("cannot write metric log in " + options.out_dir.string());
  }

  const auto n = static_cast<int>(train_set.size());
  const int batches_per_epoch = (n + cfg.batch_size - 1) / cfg.batch_size;
  const std::int64_t total_steps = static_cast<std::int64_t>(batches_per_epoch) * cfg.epochs;
  bool violation_injected = false;

  for (int epoch = first_epoch; epoch <= cfg.epochs; ++epoch) {
    std::vector<int> order(n);
    std::iota(order.begin(), order.end(), 0);
    Rng shuffle = Rng::derive(cfg.seed ^ kShuffleSalt, static_cast<std::uint64_t>(epoch));
    for (int i = n - 1; i > 0; --i) std::swap(order[i], order[shuffle.below(i + 1)]);

    double loss_total = 0.0;
    for (int b = 0; b < batches_per_epoch; ++b) {
      const int begin = b * cfg.batch_size;
      const int end = std::min(n, begin + cfg.batch_size);
      params.zero_grad();
      std::vector<double> losses;
      std::vector<std::string> ids;
      for (int k = begin; k < end; ++k) {
        const auto& sample = train_set[order[k]];
        ids.push_back(sample.id);
        Rng noise = Rng::derive(cfg.seed ^ kNoiseSalt,
                                static_cast<std::uint64_t>(optimizer.steps()) * cfg.batch_size + (k - begin));
        ad::Tape tape;
        pcmrd::RunOptions run;
        run.train = true;
        run.noise = &noise;
        Model::Pass pass = model.forward(tape, sample.triplet.image, sample.triplet.expression, run);
        ad::Var loss = segmentation_loss(pass.logits, sample.triplet.mask, cfg.loss_weights);
        const double value = loss.value()(0, 0);
        losses.push_back(value);
        if (!std::isfinite(value)) {
          write_nan_dump(options.out_dir, epoch, b, ids, losses);
          throw NumericError("non-finite loss in epoch " + std::to_string(epoch) + ", batch " + std::to_string(b) +
                             " (sample " + sample.id + ")");
        }
        tape.backward(loss);
        loss_total += value;
      }
      const double inv = 1.0 / static_cast<double>(end - begin);
      for (auto& [name, p] : params.tensors()) {
        if (p.trainable && p.grad.size() > 0) p.grad *= inv;
      }
      if (cfg.grad_clip > 0.0) clip_gradients(params, cfg.grad_clip);
      optimizer.step(params, scheduled_lr(cfg, optimizer.steps(), total_steps));
      if (options.inject_freeze_violation && !violation_injected) {
        Param& victim = params.tensors().lower_bound(kBackbonePrefix)->second;
        victim.value(0, 0) += 1.0;
        violation_injected = true;
      }
    }

    EpochRecord rec;
    rec.epoch = epoch;
    rec.step = optimizer.steps();
    rec.loss = loss_total / static_cast<double>(n);
    if (!val_set.empty()) {
      rec.val = evaluate(model, val_set, options.thresholds, options.binarize_threshold);
    }
    if (cfg.eval_train) {
      rec.train = evaluate(model, train_set, options.thresholds, options.binarize_threshold);
    }

    Checkpoint ckpt = make_checkpoint(model, optimizer, epoch);
    if (cfg.freeze_backbones) assert_frozen(initial, ckpt);

    const std::optional<metrics::EvalSummary>& scored = rec.val ? rec.val : rec.train;
    const bool improved = !scored || scored->miou > result.best_miou;
    if (improved) {
      result.best_epoch = epoch;
      result.best_miou = scored ? scored->miou : result.best_miou;
    }
    ckpt.best_epoch = result.best_epoch;
    ckpt.best_miou = result.best_miou;

    if (log.is_open()) {
      log << epoch_json(rec).dump() << '\n';
      log.flush();
      save_checkpoint(options.out_dir / "last.dris", ckpt);
      if (improved) save_checkpoint(options.out_dir / "best.dris", ckpt);
    }
    spdlog::info("epoch {} loss {:.6f}{}", epoch, rec.loss,
                 scored ? fmt::format(" mIoU {:.4f}", scored->miou) : std::string());
    result.last = std::move(ckpt);
    result.epochs.push_back(rec);
    if (options.on_epoch && options.on_epoch(rec)) break;
  }
  if (result.epochs.empty()) result.last = make_checkpoint(model, optimizer, first_epoch - 1);
  return result;
}

}  // namespace diffris::training

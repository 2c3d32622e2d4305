#pragma once

// Segmentation loss, AdamW, checkpoints and the training loop.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "diffris/autodiff.hpp"
#include "diffris/metrics.hpp"
#include "diffris/model.hpp"
#include "diffris/params.hpp"
#include "diffris/synthdata.hpp"

namespace diffris::training {

struct LossWeights {
  double bce = 1.0;
  double dice = 1.0;
};

struct Config {
  double lr = 3e-5;
  double weight_decay = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  int batch_size = 32;
  int epochs = 40;
  std::uint64_t seed = 0;
  LossWeights loss_weights;
  bool freeze_backbones = true;
  double grad_clip = 0.0;            // global L2 norm; 0 disables
  std::string lr_schedule = "constant";  // or "cosine"
  bool eval_train = false;           // also score the training split each epoch
};

void validate(const Config& cfg);

struct LossResult {
  double loss = 0.0;
  double bce = 0.0;
  double dice = 0.0;
  Matrix grad;  // d loss / d logits
};

// Mean BCE from logits plus soft Dice with smoothing 1.
LossResult segmentation_loss(const Matrix& logits, const BinaryMask& gt, const LossWeights& weights);
ad::Var segmentation_loss(ad::Var logits, const BinaryMask& gt, const LossWeights& weights);

// Adam moments with decoupled weight decay. Parameters and moments are
// rounded to float32 after every step, so a checkpoint holds the exact
// training state.
class AdamW {
 public:
  explicit AdamW(const Config& cfg) : cfg_(cfg) {}

  // Updates every trainable parameter from its accumulated gradient.
  void step(ParamStore& params, double lr);
  void step(ParamStore& params) { step(params, cfg_.lr); }

  [[nodiscard]] std::int64_t steps() const { return steps_; }
  [[nodiscard]] TensorMap state() const;
  void load_state(const TensorMap& state, std::int64_t steps);

 private:
  Config cfg_;
  std::int64_t steps_ = 0;
  TensorMap m_;
  TensorMap v_;
};

struct Checkpoint {
  std::int64_t step = 0;
  int epoch = 0;  // completed epochs
  TensorMap params;
  TensorMap optimizer;  // "m/<param>", "v/<param>"
  std::uint64_t backbone_digest = 0;
  double best_miou = -1.0;
  int best_epoch = 0;

  [[nodiscard]] TensorMap adapter_params() const;
  [[nodiscard]] TensorMap decoder_params() const;
};

Checkpoint make_checkpoint(const Model& model, const AdamW& optimizer, int epoch);
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);
// Copies checkpoint parameters into the model; every model tensor must be
// present with a matching shape.
void restore_params(Model& model, const Checkpoint& ckpt);

// Throws ContractViolation naming the first backbone tensor that differs.
void assert_frozen(const Checkpoint& before, const Checkpoint& after);

metrics::EvalSummary evaluate(Model& model, std::span<const synthdata::Sample> samples,
                              std::span<const double> thresholds, double binarize_threshold = 0.0,
                              std::vector<metrics::EvalRecord>* records = nullptr);

struct EpochRecord {
  int epoch = 0;
  std::int64_t step = 0;
  double loss = 0.0;
  std::optional<metrics::EvalSummary> val;
  std::optional<metrics::EvalSummary> train;
};

nlohmann::json epoch_json(const EpochRecord& rec);

struct TrainOptions {
  // Run directory for metrics.jsonl, last.dris and best.dris; empty keeps
  // everything in memory.
  std::filesystem::path out_dir;
  std::vector<double> thresholds = metrics::kDefaultThresholds;
  double binarize_threshold = 0.0;
  std::optional<Checkpoint> resume;
  // Returning true stops training after that epoch.
  std::function<bool(const EpochRecord&)> on_epoch;
  // Negative control: perturbs a backbone tensor after the first step.
  bool inject_freeze_violation = false;
};

struct TrainResult {
  std::vector<EpochRecord> epochs;
  int best_epoch = 0;
  double best_miou = -1.0;
  Checkpoint last;
};

TrainResult train(Model& model, const Config& cfg, std::span<const synthdata::Sample> train_set,
                  std::span<const synthdata::Sample> val_set, const TrainOptions& options = {});

}  // namespace diffris::training

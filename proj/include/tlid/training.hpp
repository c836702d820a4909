#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <ostream>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "tlid/audio.hpp"
#include "tlid/checkpoint.hpp"
#include "tlid/features.hpp"
#include "tlid/model.hpp"

namespace tlid {

/// Inverse-frequency loss weights w_i = (sum_n c_n) / c_i, normalized so
/// they sum to one.
struct ClassWeights {
  std::vector<double> weights;
  std::vector<std::string> class_order;
};

/// Throws DegenerateInputError for a zero count.
ClassWeights class_weights(std::span<const std::uint64_t> counts, std::vector<std::string> class_order = {});

struct AugmentFlags {
  bool speed_perturb = true;
  bool spec_augment = true;
};

struct TrainConfig {
  int epochs = 40;
  std::size_t batch_size = 128;
  double lr_max = 1e-3;
  double lr_min = 1e-4;
  double warmup_ratio = 0.10;
  double fine_tune_lr_peak = 5e-5;
  double fine_tune_dropout = 0.1;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  double weight_decay = 0.0;
  std::uint64_t seed = 0;
  AugmentFlags augment{};
  std::vector<double> speed_factors{0.95, 1.0, 1.05};
  SpecAugmentConfig spec_augment{};
  FeatureConfig features{};
  int threads = 1;  // feature extraction / augmentation workers
  /// Batches are drawn from length-sorted windows of this many batches;
  /// 0 disables bucketing.
  std::size_t bucket_window = 8;

  /// 10 epochs, speed perturbation only.
  static TrainConfig finetune_defaults();
  void validate() const;
};

/// Linear warmup from 0 to lr_max over warmup_ratio * total_steps, then
/// cosine decay to lr_min at total_steps.
double lr_at(std::size_t step, std::size_t total_steps, double lr_max, double lr_min, double warmup_ratio);
double lr_at(std::size_t step, std::size_t total_steps, const TrainConfig& cfg);

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;  // classic L2 added to the gradient
};

/// Adam with bias correction. Parameters without a gradient are treated as
/// having a zero gradient; frozen names are skipped entirely.
class Adam {
 public:
  explicit Adam(AdamConfig cfg = {}) : cfg_(cfg) {}

  /// Throws DivergenceError naming the first parameter with a non-finite
  /// gradient; no parameter is modified in that case.
  void step(std::vector<NamedParameter>& params, const std::set<std::string>& frozen, double lr);
  void step(Model& model, double lr) { step(model.parameters(), model.frozen_names(), lr); }

  std::size_t steps() const { return t_; }
  const std::vector<double>& first_moment(const std::string& name) const { return state_.at(name).m; }
  const std::vector<double>& second_moment(const std::string& name) const { return state_.at(name).v; }

 private:
  struct Moments {
    std::vector<double> m, v;
  };
  AdamConfig cfg_;
  std::size_t t_ = 0;
  std::map<std::string, Moments> state_;
};

struct LabeledExample {
  AudioSegment audio;
  std::size_t label = 0;
};

/// Labeled waveforms indexed into an ordered label list.
struct LabeledSet {
  std::vector<std::string> labels;
  std::vector<LabeledExample> examples;

  std::vector<std::uint64_t> counts() const;
};

enum class FitMode { Pretrain, Finetune };

struct HistoryRecord {
  int epoch = 0;
  std::size_t step = 0;
  double lr = 0.0;
  double train_loss = 0.0;
  double val_macro_acc = 0.0;
};

/// One JSON object per line: {epoch, step, lr, train_loss, val_macro_acc}.
void write_history(std::ostream& out, const std::vector<HistoryRecord>& history);

struct FitResult {
  Checkpoint best;
  int best_epoch = -1;
  std::vector<HistoryRecord> history;
  std::vector<double> step_losses;
};

/// Weighted-CE training with Adam and the warmup-cosine schedule. After each
/// epoch the validation macro accuracy is recorded and the best checkpoint
/// (earliest epoch on ties) is retained. Finetune mode freezes the encoder,
/// sets dropout to fine_tune_dropout and peaks the schedule at
/// fine_tune_lr_peak. The model is left in its final-epoch state.
FitResult fit(Model& model, const LabeledSet& train, const LabeledSet& val, const TrainConfig& cfg, FitMode mode,
              const std::function<void(const HistoryRecord&)>& on_epoch = {});

/// Feature extraction with optional augmentation for one example.
FeatureMatrix training_features(const AudioSegment& audio, const TrainConfig& cfg, std::uint64_t seed);

/// Eval-mode predictions (argmax, lowest index on ties) for precomputed features.
std::vector<std::size_t> predict_batch(const Model& model, const std::vector<FeatureMatrix>& features,
                                       std::size_t batch_size = 32);

}  // namespace tlid

#include "tlid/training.hpp"

#include <cmath>
#include <numbers>
#include <algorithm>
#include <numeric>

#include <spdlog/spdlog.h>

#include "json.hpp"
#include "tlid/error.hpp"
#include "tlid/evaluation.hpp"
#include "tlid/parallel.hpp"
#include "tlid/random.hpp"

namespace tlid {

namespace {

constexpr std::uint64_t kShuffleStream = 0x10000;
constexpr std::uint64_t kAugmentStream = 0x20000;
constexpr std::uint64_t kDropoutStream = 0x30000;

}  // namespace

ClassWeights class_weights(std::span<const std::uint64_t> counts, std::vector<std::string> class_order) {
  if (!class_order.empty() && class_order.size() != counts.size()) {
    throw DimensionError("class_weights: class_order size does not match counts");
  }
  double total = 0.0;
  for (std::size_t i = 0; i < counts.size(); ++i) {
    if (counts[i] == 0) throw DegenerateInputError("class_weights: class " + std::to_string(i) + " has no samples");
    total += static_cast<double>(counts[i]);
  }
  ClassWeights w;
  w.class_order = std::move(class_order);
  w.weights.reserve(counts.size());
  double norm = 0.0;
  for (auto c : counts) {
    w.weights.push_back(total / static_cast<double>(c));
    norm += w.weights.back();
  }
  for (auto& v : w.weights) v /= norm;
  return w;
}

TrainConfig TrainConfig::finetune_defaults() {
  TrainConfig cfg;
  cfg.epochs = 10;
  cfg.augment = {.speed_perturb = true, .spec_augment = false};
  return cfg;
}

void TrainConfig::validate() const {
  if (epochs <= 0) throw ConfigError("train config: epochs must be positive");
  if (batch_size == 0) throw ConfigError("train config: batch_size must be positive");
  if (!(warmup_ratio > 0.0 && warmup_ratio < 1.0)) throw ConfigError("train config: warmup_ratio must be in (0, 1)");
  if (!(lr_min <= lr_max) || lr_min < 0.0) throw ConfigError("train config: need 0 <= lr_min <= lr_max");
  if (fine_tune_lr_peak <= 0.0) throw ConfigError("train config: fine_tune_lr_peak must be positive");
  if (augment.speed_perturb && speed_factors.empty()) throw ConfigError("train config: speed_factors is empty");
  features.validate();
}

double lr_at(std::size_t step, std::size_t total_steps, double lr_max, double lr_min, double warmup_ratio) {
  if (total_steps == 0) return lr_max;
  const double s = static_cast<double>(std::min(step, total_steps));
  const double total = static_cast<double>(total_steps);
  const double warmup = warmup_ratio * total;
  if (s < warmup) return lr_max * s / warmup;
  const double progress = total > warmup ? (s - warmup) / (total - warmup) : 1.0;
  return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + std::cos(std::numbers::pi * progress));
}

double lr_at(std::size_t step, std::size_t total_steps, const TrainConfig& cfg) {
  return lr_at(step, total_steps, cfg.lr_max, cfg.lr_min, cfg.warmup_ratio);
}

void Adam::step(std::vector<NamedParameter>& params, const std::set<std::string>& frozen, double lr) {
  for (const auto& p : params) {
    if (frozen.count(p.name) || !p.tensor.has_grad()) continue;
    for (double g : p.tensor.grad()) {
      if (!std::isfinite(g)) throw DivergenceError(p.name);
    }
  }
  ++t_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (auto& p : params) {
    if (frozen.count(p.name)) continue;
    auto& st = state_[p.name];
    const std::size_t n = p.tensor.size();
    if (st.m.size() != n) {
      st.m.assign(n, 0.0);
      st.v.assign(n, 0.0);
    }
    auto w = p.tensor.mutable_data();
    const bool has = p.tensor.has_grad();
    auto g = p.tensor.grad();
    for (std::size_t i = 0; i < n; ++i) {
      const double gi = (has ? g[i] : 0.0) + cfg_.weight_decay * w[i];
      st.m[i] = cfg_.beta1 * st.m[i] + (1.0 - cfg_.beta1) * gi;
      st.v[i] = cfg_.beta2 * st.v[i] + (1.0 - cfg_.beta2) * gi * gi;
      const double mhat = st.m[i] / bc1;
      const double vhat = st.v[i] / bc2;
      w[i] -= lr * mhat / (std::sqrt(vhat) + cfg_.eps);
    }
  }
}

std::vector<std::uint64_t> LabeledSet::counts() const {
  std::vector<std::uint64_t> c(labels.size(), 0);
  for (const auto& e : examples) {
    if (e.label >= labels.size()) throw LabelError("labeled set: label index out of range");
    ++c[e.label];
  }
  return c;
}

void write_history(std::ostream& out, const std::vector<HistoryRecord>& history) {
  for (const auto& h : history) {
    nlohmann::ordered_json j{{"epoch", h.epoch},
                             {"step", h.step},
                             {"lr", h.lr},
                             {"train_loss", h.train_loss},
                             {"val_macro_acc", h.val_macro_acc}};
    out << j.dump() << '\n';
  }
}

FeatureMatrix training_features(const AudioSegment& audio, const TrainConfig& cfg, std::uint64_t seed) {
  Rng rng(seed);
  FeatureMatrix f;
  if (cfg.augment.speed_perturb) {
    const double factor = cfg.speed_factors[rng.below(cfg.speed_factors.size())];
    f = log_mel(speed_perturb(audio, factor), cfg.features);
  } else {
    f = log_mel(audio, cfg.features);
  }
  if (cfg.augment.spec_augment) f = spec_augment(f, cfg.spec_augment, rng.next());
  return f;
}

std::vector<std::size_t> predict_batch(const Model& model, const std::vector<FeatureMatrix>& features,
                                       std::size_t batch_size) {
  // Length-sorted batches keep padding small; results go back to input order.
  std::vector<std::size_t> order(features.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return features[a].num_frames < features[b].num_frames; });
  std::vector<std::size_t> out(features.size());
  for (std::size_t start = 0; start < order.size(); start += batch_size) {
    const std::size_t end = std::min(order.size(), start + batch_size);
    std::vector<const FeatureMatrix*> items;
    for (std::size_t i = start; i < end; ++i) items.push_back(&features[order[i]]);
    auto batch = make_batch(std::span<const FeatureMatrix* const>(items));
    Tensor logits = model.infer(batch.features, batch.mask);
    const std::size_t K = logits.dim(1);
    for (std::size_t n = 0; n < items.size(); ++n) out[order[start + n]] = argmax(logits.data().subspan(n * K, K));
  }
  return out;
}

namespace {

// Shuffled order, sorted by length inside windows of `window` batches, with
// the batch sequence itself shuffled afterwards.
std::vector<std::size_t> bucketed_order(const LabeledSet& set, std::size_t batch_size, std::size_t window, Rng& rng) {
  const std::size_t n = set.examples.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  rng.shuffle(std::span<std::size_t>(order));
  if (window == 0) return order;
  const std::size_t span = batch_size * window;
  for (std::size_t s = 0; s < n; s += span) {
    std::stable_sort(order.begin() + s, order.begin() + std::min(n, s + span), [&](std::size_t a, std::size_t b) {
      return set.examples[a].audio.samples.size() < set.examples[b].audio.samples.size();
    });
  }
  const std::size_t batches = (n + batch_size - 1) / batch_size;
  std::vector<std::size_t> perm(batches);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  rng.shuffle(std::span<std::size_t>(perm));
  std::vector<std::size_t> out;
  out.reserve(n);
  for (std::size_t b : perm) {
    out.insert(out.end(), order.begin() + b * batch_size, order.begin() + std::min(n, (b + 1) * batch_size));
  }
  return out;
}

}  // namespace

FitResult fit(Model& model, const LabeledSet& train, const LabeledSet& val, const TrainConfig& cfg, FitMode mode,
              const std::function<void(const HistoryRecord&)>& on_epoch) {
  cfg.validate();
  if (train.examples.empty()) throw ConfigError("fit: empty training set");
  if (val.examples.empty()) throw ConfigError("fit: empty validation set");
  if (val.labels != train.labels) throw ConfigError("fit: validation label set differs from training label set");
  if (static_cast<std::size_t>(model.config().num_classes) != train.labels.size()) {
    throw ConfigError("fit: model has " + std::to_string(model.config().num_classes) + " classes but the label set has " +
                      std::to_string(train.labels.size()));
  }

  double peak = cfg.lr_max, floor_lr = cfg.lr_min;
  if (mode == FitMode::Finetune) {
    model.freeze_encoder();
    model.set_dropout(cfg.fine_tune_dropout, cfg.fine_tune_dropout);
    peak = cfg.fine_tune_lr_peak;
    floor_lr = cfg.lr_min * peak / cfg.lr_max;
  }

  const auto weights = class_weights(train.counts(), train.labels);
  Adam adam({cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps, cfg.weight_decay});

  std::vector<FeatureMatrix> val_features(val.examples.size());
  std::vector<std::size_t> val_truth(val.examples.size());
  parallel_for(val.examples.size(), cfg.threads, [&](std::size_t i) {
    val_features[i] = log_mel(val.examples[i].audio, cfg.features);
  });
  for (std::size_t i = 0; i < val.examples.size(); ++i) val_truth[i] = val.examples[i].label;

  std::vector<FeatureMatrix> cached;
  if (!cfg.augment.speed_perturb) {
    cached.resize(train.examples.size());
    parallel_for(train.examples.size(), cfg.threads, [&](std::size_t i) {
      cached[i] = log_mel(train.examples[i].audio, cfg.features);
    });
  }

  const std::size_t n = train.examples.size();
  const std::size_t steps_per_epoch = (n + cfg.batch_size - 1) / cfg.batch_size;
  const std::size_t total_steps = steps_per_epoch * static_cast<std::size_t>(cfg.epochs);
  FitResult result;
  double best_acc = -1.0;
  std::size_t global_step = 0;
  double lr = 0.0;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    Rng shuffle_rng(derive_seed(cfg.seed, kShuffleStream + epoch));
    const std::vector<std::size_t> order = bucketed_order(train, cfg.batch_size, cfg.bucket_window, shuffle_rng);
    const std::uint64_t aug_seed = derive_seed(cfg.seed, kAugmentStream + epoch);

    double loss_sum = 0.0;
    for (std::size_t start = 0; start < n; start += cfg.batch_size) {
      const std::size_t end = std::min(n, start + cfg.batch_size);
      std::vector<FeatureMatrix> feats(end - start);
      std::vector<std::size_t> targets(end - start);
      parallel_for(end - start, cfg.threads, [&](std::size_t j) {
        const std::size_t idx = order[start + j];
        const std::uint64_t item_seed = derive_seed(aug_seed, idx);
        if (cached.empty()) {
          feats[j] = training_features(train.examples[idx].audio, cfg, item_seed);
        } else if (cfg.augment.spec_augment) {
          feats[j] = spec_augment(cached[idx], cfg.spec_augment, item_seed);
        } else {
          feats[j] = cached[idx];
        }
      });
      for (std::size_t j = 0; j < targets.size(); ++j) targets[j] = train.examples[order[start + j]].label;

      auto batch = make_batch(feats);
      Tensor logits = model.forward(batch.features, batch.mask, Mode::Train,
                                    derive_seed(cfg.seed, kDropoutStream + global_step));
      Tensor loss = weighted_cross_entropy(logits, targets, weights.weights);
      loss.backward();
      ++global_step;
      lr = lr_at(global_step, total_steps, peak, floor_lr, cfg.warmup_ratio);
      adam.step(model, lr);
      for (auto& p : model.parameters()) p.tensor.zero_grad();

      const double l = loss.item();
      if (!std::isfinite(l)) throw DivergenceError("loss");
      result.step_losses.push_back(l);
      loss_sum += l;
    }

    const auto predicted = predict_batch(model, val_features);
    const double acc = macro_accuracy(val_truth, predicted);
    HistoryRecord rec{epoch, global_step, lr, loss_sum / static_cast<double>(steps_per_epoch), acc};
    result.history.push_back(rec);
    spdlog::info("epoch {}/{} step {} lr {:.3g} train_loss {:.4f} val_macro_acc {:.4f}", epoch + 1, cfg.epochs,
                 global_step, lr, rec.train_loss, acc);
    if (on_epoch) on_epoch(rec);
    if (acc > best_acc) {
      best_acc = acc;
      result.best_epoch = epoch;
      result.best = make_checkpoint(model, train.labels, {epoch, acc});
    }
  }
  return result;
}

}  // namespace tlid

#pragma once

#include <cstddef>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "tlid/audio.hpp"
#include "tlid/features.hpp"
#include "tlid/model.hpp"

namespace tlid {

/// Mean over classes present in `truth` of per-class accuracy.
double macro_accuracy(std::span<const std::size_t> truth, std::span<const std::size_t> predicted);

/// Index of the largest value; the lowest index wins ties.
std::size_t argmax(std::span<const double> values);

struct Prediction {
  std::size_t label = 0;
  std::vector<double> posteriors;
};

Prediction predict_features(const Model& model, const FeatureMatrix& features);
/// Single forward pass over the whole utterance (resampled to the feature
/// rate first when needed).
Prediction predict_utterance(const Model& model, const AudioSegment& audio, const FeatureConfig& cfg = {});

struct EvalSample {
  std::string truth;
  std::string predicted;
  double duration = 0.0;
};

struct ClassTally {
  std::size_t n = 0;
  std::size_t correct = 0;
  bool operator==(const ClassTally&) const = default;
};

struct BucketStats {
  std::size_t n = 0;
  std::size_t errors = 0;
  double error_rate() const { return n ? static_cast<double>(errors) / static_cast<double>(n) : 0.0; }
  bool operator==(const BucketStats&) const = default;
};

struct Confusion {
  std::string truth;
  std::string predicted;
  std::size_t count = 0;
  bool operator==(const Confusion&) const = default;
};

inline constexpr const char* kShortBucket = "0...5s";
inline constexpr const char* kLongBucket = "5...20s";

/// "0...5s" for durations below 5 s, "5...20s" otherwise.
std::string duration_bucket(double seconds);

struct EvalReport {
  std::size_t num_samples = 0;
  double error_rate = 0.0;  // pooled over all samples
  double macro_accuracy = 0.0;
  std::map<std::string, BucketStats> buckets;
  std::vector<Confusion> confusions;  // count desc, then (truth, predicted)
  std::map<std::string, ClassTally> per_class;

  /// JSON document with a fixed field order.
  std::string to_text() const;
  static EvalReport from_text(const std::string& text);
  bool operator==(const EvalReport&) const = default;
};

EvalReport build_report(std::span<const EvalSample> samples);

/// First k confusions of the report (already ranked).
std::vector<Confusion> top_confusions(const EvalReport& report, std::size_t k);

struct EvalOptions {
  FeatureConfig features{};
  int threads = 1;
};

/// Classifies each labeled utterance with predict_utterance. Throws
/// LabelError when an utterance's label is missing or unknown to the model.
EvalReport evaluate(const Model& model, const std::vector<std::string>& labels,
                    const std::vector<AudioSegment>& dataset, const EvalOptions& opts = {});

struct SweepRow {
  double length_seconds = 0.0;
  std::size_t windows = 0;
  std::size_t errors = 0;
  double error_rate() const { return windows ? static_cast<double>(errors) / static_cast<double>(windows) : 0.0; }
};

/// Error rate per window length over all segment_sweep windows. Lengths with
/// no window in the corpus are absent from the result.
std::map<double, SweepRow> length_sweep(const Model& model, const std::vector<std::string>& labels,
                                        const std::vector<AudioSegment>& dataset,
                                        const std::vector<double>& lengths_seconds, double stride_seconds = 2.0,
                                        const EvalOptions& opts = {});

/// "length_s,windows,errors,error_rate" rows.
std::string sweep_csv(const std::map<double, SweepRow>& rows);

}  // namespace tlid

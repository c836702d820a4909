#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "tlid/audio.hpp"
#include "tlid/training.hpp"

namespace tlid {

struct ManifestEntry {
  std::filesystem::path audio_filepath;
  double duration = 0.0;  // seconds
  std::string label;

  bool operator==(const ManifestEntry&) const = default;
};

struct Dataset {
  std::vector<ManifestEntry> entries;
  std::vector<std::string> label_set;  // sorted, unique
  std::map<std::string, std::uint64_t> counts;

  static Dataset from_entries(std::vector<ManifestEntry> entries);
  /// Counts ordered like label_set.
  std::vector<std::uint64_t> count_vector() const;
  std::size_t size() const { return entries.size(); }
  bool empty() const { return entries.empty(); }
};

/// One JSON object per non-blank line with audio_filepath, duration and
/// label. Relative paths resolve against `base_dir`. Throws ManifestError
/// with the 1-based line number.
Dataset parse_manifest(const std::string& text, const std::filesystem::path& base_dir = {}, bool check_files = false);
Dataset load_manifest(const std::filesystem::path& path, bool check_files = true);
/// Paths are written relative to the manifest's directory when possible.
void write_manifest(const std::filesystem::path& path, const Dataset& ds);

Dataset dataset_union(const Dataset& a, const Dataset& b);

/// Stratified per-class split; each class with c >= 2 items sends
/// round-half-up(val_fraction * c) items (at least 1, at most c - 1) to
/// validation. Entry order is preserved within each output.
std::pair<Dataset, Dataset> split_train_val(const Dataset& ds, double val_fraction = 0.10, std::uint64_t seed = 0);

struct ToyLanguage {
  std::string name;
  std::vector<double> carriers_hz;  // 3 bands
  std::vector<double> am_rates_hz;
};

/// Languages drawn from a log-spaced carrier grid over 250-5000 Hz; carrier
/// sets are disjoint while 3 * num_langs fits in the grid.
std::vector<ToyLanguage> toy_languages(int num_langs, std::uint64_t seed, const std::string& label_prefix = "lang");

AudioSegment synth_utterance(const ToyLanguage& lang, double duration_s, int sample_rate, std::uint64_t seed);

struct SynthOptions {
  int num_langs = 5;
  int items_per_lang = 200;
  double duration_s = 4.0;
  int sample_rate = kCanonicalSampleRate;
  std::uint64_t seed = 0;
  std::string label_prefix = "lang";
  int threads = 1;
};

/// Writes <out_dir>/wavs/<label>_<index>.wav and <out_dir>/corpus.manifest.
Dataset synth_corpus(const SynthOptions& opts, const std::filesystem::path& out_dir);

/// Reads and labels every entry, resampled to `sample_rate`.
std::vector<AudioSegment> load_audio(const Dataset& ds, int sample_rate = kCanonicalSampleRate, int threads = 1);

/// Labeled examples: full seg_seconds windows of each utterance, remainders
/// dropped. An utterance shorter than one window is kept whole, as is every
/// utterance when seg_seconds <= 0.
LabeledSet make_labeled_set(const std::vector<AudioSegment>& utterances, const std::vector<std::string>& labels,
                            double seg_seconds = 3.0);

}  // namespace tlid

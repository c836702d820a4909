#include "tlid/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <numeric>
#include <set>
#include <sstream>

#include <spdlog/spdlog.h>

#include "json.hpp"
#include "tlid/error.hpp"
#include "tlid/parallel.hpp"
#include "tlid/random.hpp"
#include "tlid/segment.hpp"

namespace fs = std::filesystem;

namespace tlid {

namespace {

constexpr std::uint64_t kLanguageStream = 1;
constexpr std::uint64_t kItemStream = 2;
constexpr std::uint64_t kSplitStream = 3;
constexpr int kGridPoints = 24;
constexpr double kGridLo = 250.0;
constexpr double kGridHi = 5000.0;

}  // namespace

Dataset Dataset::from_entries(std::vector<ManifestEntry> entries) {
  Dataset ds;
  ds.entries = std::move(entries);
  for (const auto& e : ds.entries) ++ds.counts[e.label];
  for (const auto& [label, _] : ds.counts) ds.label_set.push_back(label);
  return ds;
}

std::vector<std::uint64_t> Dataset::count_vector() const {
  std::vector<std::uint64_t> out;
  out.reserve(label_set.size());
  for (const auto& l : label_set) out.push_back(counts.at(l));
  return out;
}

Dataset parse_manifest(const std::string& text, const fs::path& base_dir, bool check_files) {
  std::vector<ManifestEntry> entries;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw ManifestError(std::string("malformed record: ") + e.what(), lineno);
    }
    if (!j.is_object()) throw ManifestError("record is not an object", lineno);
    for (const auto& [key, _] : j.items()) {
      if (key != "audio_filepath" && key != "duration" && key != "label") {
        spdlog::warn("manifest line {}: ignoring unknown field '{}'", lineno, key);
      }
    }
    ManifestEntry e;
    if (!j.contains("audio_filepath") || !j["audio_filepath"].is_string()) {
      throw ManifestError("missing or non-string audio_filepath", lineno);
    }
    if (!j.contains("duration") || !j["duration"].is_number()) {
      throw ManifestError("missing or non-numeric duration", lineno);
    }
    if (!j.contains("label") || !j["label"].is_string()) throw ManifestError("missing or non-string label", lineno);
    e.audio_filepath = j["audio_filepath"].get<std::string>();
    e.duration = j["duration"].get<double>();
    e.label = j["label"].get<std::string>();
    if (!(e.duration > 0.0) || !std::isfinite(e.duration)) {
      throw ManifestError("duration must be positive, got " + std::to_string(e.duration), lineno);
    }
    if (e.label.empty()) throw ManifestError("empty label", lineno);
    if (e.audio_filepath.is_relative() && !base_dir.empty()) e.audio_filepath = base_dir / e.audio_filepath;
    if (check_files && !fs::exists(e.audio_filepath)) {
      throw ManifestError("audio file not found: " + e.audio_filepath.string(), lineno);
    }
    entries.push_back(std::move(e));
  }
  return Dataset::from_entries(std::move(entries));
}

Dataset load_manifest(const fs::path& path, bool check_files) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open manifest: " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  return parse_manifest(buf.str(), path.parent_path(), check_files);
}

void write_manifest(const fs::path& path, const Dataset& ds) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write manifest: " + path.string());
  const fs::path base = path.parent_path().empty() ? fs::path(".") : path.parent_path();
  for (const auto& e : ds.entries) {
    fs::path p = e.audio_filepath;
    if (p.is_absolute() || !path.parent_path().empty()) {
      std::error_code ec;
      auto rel = fs::proximate(p, base, ec);
      if (!ec) p = rel;
    }
    nlohmann::ordered_json j{{"audio_filepath", p.generic_string()}, {"duration", e.duration}, {"label", e.label}};
    out << j.dump() << '\n';
  }
  if (!out) throw Error("failed writing manifest: " + path.string());
}

Dataset dataset_union(const Dataset& a, const Dataset& b) {
  auto entries = a.entries;
  entries.insert(entries.end(), b.entries.begin(), b.entries.end());
  return Dataset::from_entries(std::move(entries));
}

std::pair<Dataset, Dataset> split_train_val(const Dataset& ds, double val_fraction, std::uint64_t seed) {
  if (!(val_fraction > 0.0 && val_fraction < 1.0)) throw ConfigError("split_train_val: val_fraction must be in (0, 1)");
  std::vector<char> to_val(ds.entries.size(), 0);
  for (std::size_t li = 0; li < ds.label_set.size(); ++li) {
    const auto& label = ds.label_set[li];
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < ds.entries.size(); ++i) {
      if (ds.entries[i].label == label) idx.push_back(i);
    }
    const std::size_t c = idx.size();
    if (c < 2) {
      spdlog::warn("split_train_val: class '{}' has a single item; it stays in train", label);
      continue;
    }
    auto n_val = static_cast<std::size_t>(std::floor(val_fraction * static_cast<double>(c) + 0.5));
    n_val = std::clamp<std::size_t>(n_val, 1, c - 1);
    Rng(derive_seed(derive_seed(seed, kSplitStream), li)).shuffle(std::span<std::size_t>(idx));
    for (std::size_t k = 0; k < n_val; ++k) to_val[idx[k]] = 1;
  }
  std::vector<ManifestEntry> train, val;
  for (std::size_t i = 0; i < ds.entries.size(); ++i) (to_val[i] ? val : train).push_back(ds.entries[i]);
  return {Dataset::from_entries(std::move(train)), Dataset::from_entries(std::move(val))};
}

std::vector<ToyLanguage> toy_languages(int num_langs, std::uint64_t seed, const std::string& label_prefix) {
  if (num_langs < 2) throw ConfigError("toy_languages: need at least 2 languages");
  std::vector<double> grid(kGridPoints);
  for (int i = 0; i < kGridPoints; ++i) {
    grid[i] = kGridLo * std::pow(kGridHi / kGridLo, static_cast<double>(i) / (kGridPoints - 1));
  }
  Rng rng(derive_seed(seed, kLanguageStream));
  std::vector<std::size_t> order(kGridPoints);
  std::vector<ToyLanguage> langs;
  std::size_t cursor = kGridPoints;
  const int width = num_langs > 1 ? static_cast<int>(std::to_string(num_langs - 1).size()) : 1;
  for (int l = 0; l < num_langs; ++l) {
    ToyLanguage lang;
    std::string index = std::to_string(l);
    lang.name = label_prefix + std::string(static_cast<std::size_t>(std::max(0, width - static_cast<int>(index.size()))), '0') + index;
    for (int b = 0; b < 3; ++b) {
      if (cursor == kGridPoints) {
        std::iota(order.begin(), order.end(), std::size_t{0});
        rng.shuffle(std::span<std::size_t>(order));
        cursor = 0;
      }
      lang.carriers_hz.push_back(grid[order[cursor++]]);
      lang.am_rates_hz.push_back(rng.uniform(2.0, 10.0));
    }
    std::vector<std::size_t> perm{0, 1, 2};
    std::sort(perm.begin(), perm.end(), [&](auto a, auto b) { return lang.carriers_hz[a] < lang.carriers_hz[b]; });
    ToyLanguage sorted{lang.name, {}, {}};
    for (auto p : perm) {
      sorted.carriers_hz.push_back(lang.carriers_hz[p]);
      sorted.am_rates_hz.push_back(lang.am_rates_hz[p]);
    }
    langs.push_back(std::move(sorted));
  }
  return langs;
}

AudioSegment synth_utterance(const ToyLanguage& lang, double duration_s, int sample_rate, std::uint64_t seed) {
  if (!(duration_s > 0.0) || sample_rate <= 0) throw ConfigError("synth_utterance: bad duration or sample rate");
  Rng rng(seed);
  const auto n = static_cast<std::size_t>(std::llround(duration_s * sample_rate));
  std::vector<double> x(n, 0.0);
  const double two_pi = 2.0 * std::numbers::pi;
  const double nyquist = 0.5 * sample_rate;
  for (std::size_t b = 0; b < lang.carriers_hz.size(); ++b) {
    const double f = lang.carriers_hz[b] * (1.0 + rng.uniform(-0.015, 0.015));
    const double phase = rng.uniform(0.0, two_pi);
    const double amp = rng.uniform(0.5, 1.0);
    const double depth = rng.uniform(0.3, 0.9);
    const double am_phase = rng.uniform(0.0, two_pi);
    const double rate = lang.am_rates_hz[b];
    if (f >= nyquist) continue;
    for (std::size_t i = 0; i < n; ++i) {
      const double t = static_cast<double>(i) / sample_rate;
      const double env = (1.0 + depth * std::sin(two_pi * rate * t + am_phase)) / (1.0 + depth);
      x[i] += amp * env * std::sin(two_pi * f * t + phase);
    }
  }
  double power = 0.0;
  for (double v : x) power += v * v;
  power /= static_cast<double>(std::max<std::size_t>(n, 1));
  const double snr_db = rng.uniform(5.0, 20.0);
  const double sigma = std::sqrt(power / std::pow(10.0, snr_db / 10.0));
  for (auto& v : x) v += sigma * rng.normal();
  double peak = 0.0;
  for (double v : x) peak = std::max(peak, std::abs(v));
  const double gain = rng.uniform(0.3, 1.0);
  if (peak > 0.0) {
    for (auto& v : x) v *= 0.9 * gain / peak;
  }
  AudioSegment a;
  a.samples = std::move(x);
  a.sample_rate = sample_rate;
  a.label = lang.name;
  return a;
}

Dataset synth_corpus(const SynthOptions& opts, const fs::path& out_dir) {
  if (opts.num_langs < 2) throw ConfigError("synth_corpus: num_langs must be at least 2");
  if (opts.items_per_lang < 1) throw ConfigError("synth_corpus: items_per_lang must be positive");
  if (!(opts.duration_s > 0.0)) throw ConfigError("synth_corpus: duration must be positive");
  const auto langs = toy_languages(opts.num_langs, opts.seed, opts.label_prefix);
  const fs::path wav_dir = out_dir / "wavs";
  std::error_code ec;
  fs::create_directories(wav_dir, ec);
  if (ec) throw Error("cannot create " + wav_dir.string() + ": " + ec.message());

  const std::size_t per = static_cast<std::size_t>(opts.items_per_lang);
  const std::size_t total = langs.size() * per;
  std::vector<ManifestEntry> entries(total);
  const std::uint64_t item_seed = derive_seed(opts.seed, kItemStream);
  parallel_for(total, opts.threads, [&](std::size_t i) {
    const auto& lang = langs[i / per];
    auto audio = synth_utterance(lang, opts.duration_s, opts.sample_rate, derive_seed(item_seed, i));
    char name[64];
    std::snprintf(name, sizeof name, "_%05zu.wav", i % per);
    const fs::path file = wav_dir / (lang.name + name);
    write_wav(file, audio);
    entries[i] = {file, audio.duration(), lang.name};
  });
  auto ds = Dataset::from_entries(std::move(entries));
  write_manifest(out_dir / "corpus.manifest", ds);
  return ds;
}

std::vector<AudioSegment> load_audio(const Dataset& ds, int sample_rate, int threads) {
  std::vector<AudioSegment> out(ds.entries.size());
  parallel_for(ds.entries.size(), threads, [&](std::size_t i) {
    const auto& e = ds.entries[i];
    auto a = read_wav(e.audio_filepath);
    if (a.sample_rate != sample_rate) a = resample(a, sample_rate);
    a.label = e.label;
    a.source_id = e.audio_filepath.string();
    out[i] = std::move(a);
  });
  return out;
}

LabeledSet make_labeled_set(const std::vector<AudioSegment>& utterances, const std::vector<std::string>& labels,
                            double seg_seconds) {
  LabeledSet set;
  set.labels = labels;
  for (const auto& u : utterances) {
    if (!u.label) throw LabelError("utterance '" + u.source_id + "' has no label");
    auto it = std::find(labels.begin(), labels.end(), *u.label);
    if (it == labels.end()) throw LabelError("label '" + *u.label + "' is not in the label set");
    const auto idx = static_cast<std::size_t>(it - labels.begin());
    if (seg_seconds <= 0.0) {
      set.examples.push_back({u, idx});
      continue;
    }
    auto segs = segment_fixed(u, seg_seconds, seg_seconds);
    if (segs.empty()) {
      set.examples.push_back({u, idx});
      continue;
    }
    for (auto& s : segs) set.examples.push_back({std::move(s), idx});
  }
  return set;
}

}  // namespace tlid

#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "tlid/corpus.hpp"
#include "tlid/error.hpp"

using namespace tlid;
namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const std::string& name) {
  auto dir = fs::temp_directory_path() / "tlid_corpus_test" / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

Dataset labels_dataset(int first, int last, int per_label) {
  std::vector<ManifestEntry> e;
  for (int l = first; l < last; ++l) {
    for (int i = 0; i < per_label; ++i) {
      e.push_back({"l" + std::to_string(l) + "_" + std::to_string(i) + ".wav", 1.0, "l" + std::to_string(l)});
    }
  }
  return Dataset::from_entries(std::move(e));
}

}  // namespace

TEST(Manifest, ParsesLines) {
  const std::string text =
      R"({"audio_filepath": "a.wav", "duration": 3.2, "label": "en"})"
      "\n"
      R"({"audio_filepath": "/abs/b.wav", "duration": 1.0, "label": "de"})"
      "\n\n"
      R"({"audio_filepath": "c.wav", "duration": 7.5, "label": "en"})"
      "\n";
  const auto ds = parse_manifest(text, "/data");
  ASSERT_EQ(ds.size(), 3u);
  EXPECT_EQ(ds.entries[0].audio_filepath, fs::path("/data/a.wav"));
  EXPECT_EQ(ds.entries[1].audio_filepath, fs::path("/abs/b.wav"));
  EXPECT_EQ(ds.label_set, (std::vector<std::string>{"de", "en"}));
  EXPECT_EQ(ds.counts.at("en"), 2u);
  EXPECT_EQ(ds.count_vector(), (std::vector<std::uint64_t>{1, 2}));
}

TEST(Manifest, EmptyText) {
  const auto ds = parse_manifest("");
  EXPECT_TRUE(ds.empty());
  EXPECT_TRUE(ds.label_set.empty());
}

TEST(Manifest, ErrorsCarryLineNumber) {
  const std::string good = R"({"audio_filepath": "a.wav", "duration": 1.0, "label": "en"})";
  auto line_of = [](const std::string& text) -> std::size_t {
    try {
      parse_manifest(text);
    } catch (const ManifestError& e) {
      return e.line();
    }
    return 0;
  };
  EXPECT_EQ(line_of(good + "\n" + R"({"audio_filepath": "b.wav", "duration": -1, "label": "en"})"), 2u);
  EXPECT_EQ(line_of(good + "\n" + good + "\n{oops"), 3u);
  EXPECT_EQ(line_of(R"({"audio_filepath": "b.wav", "label": "en"})"), 1u);
  EXPECT_EQ(line_of(R"({"audio_filepath": "b.wav", "duration": 1, "label": ""})"), 1u);
  EXPECT_EQ(line_of(good + "\n" + good), 0u);
}

TEST(Manifest, MissingFileChecked) {
  const std::string text = R"({"audio_filepath": "nope.wav", "duration": 1.0, "label": "en"})";
  EXPECT_NO_THROW(parse_manifest(text, fresh_dir("missing"), false));
  EXPECT_THROW(parse_manifest(text, fresh_dir("missing"), true), ManifestError);
  EXPECT_THROW(load_manifest(fresh_dir("missing") / "absent.manifest"), Error);
}

TEST(Union, LabelSetSize) {
  const auto a = labels_dataset(0, 107, 1);
  const auto b = labels_dataset(107 - 82, 107 - 82 + 102, 1);
  const auto u = dataset_union(a, b);
  EXPECT_EQ(u.label_set.size(), 127u);
  EXPECT_EQ(u.size(), 209u);
  EXPECT_TRUE(std::is_sorted(u.label_set.begin(), u.label_set.end()));
}

TEST(Union, WithEmptyAndCounts) {
  const auto a = labels_dataset(0, 4, 5);
  const auto u = dataset_union(a, Dataset{});
  EXPECT_EQ(u.label_set, a.label_set);
  EXPECT_EQ(u.counts, a.counts);
  const auto both = dataset_union(a, labels_dataset(0, 1, 7));
  EXPECT_EQ(both.counts.at("l0"), 12u);
}

TEST(Union, WeightsFromSummedCounts) {
  const auto a = labels_dataset(0, 3, 4), b = labels_dataset(1, 5, 6);
  const auto u = dataset_union(a, b);
  std::map<std::string, std::uint64_t> summed = a.counts;
  for (const auto& [k, v] : b.counts) summed[k] += v;
  std::vector<std::uint64_t> expected;
  for (const auto& [k, v] : summed) expected.push_back(v);
  const auto uv = u.count_vector();
  EXPECT_EQ(uv, expected);
  EXPECT_EQ(class_weights(uv).weights, class_weights(expected).weights);
}

TEST(Split, PartitionsStratified) {
  const auto ds = labels_dataset(0, 3, 10);
  const auto [train, val] = split_train_val(ds, 0.1, 4);
  EXPECT_EQ(val.size(), 3u);
  EXPECT_EQ(train.size(), 27u);
  for (const auto& l : ds.label_set) EXPECT_EQ(val.counts.at(l), 1u);
  std::multiset<std::string> all, parts;
  for (const auto& e : ds.entries) all.insert(e.audio_filepath.string());
  for (const auto& e : train.entries) parts.insert(e.audio_filepath.string());
  for (const auto& e : val.entries) parts.insert(e.audio_filepath.string());
  EXPECT_EQ(all, parts);
}

TEST(Split, DeterministicAndSeeded) {
  const auto ds = labels_dataset(0, 2, 20);
  const auto a = split_train_val(ds, 0.25, 9), b = split_train_val(ds, 0.25, 9), c = split_train_val(ds, 0.25, 10);
  EXPECT_EQ(a.second.entries, b.second.entries);
  EXPECT_NE(a.second.entries, c.second.entries);
  EXPECT_THROW(split_train_val(ds, 0.0), ConfigError);
  EXPECT_EQ(split_train_val(labels_dataset(0, 1, 1), 0.5).second.size(), 0u);
}

TEST(Synth, LanguagesDisjointAndPrefixed) {
  const auto langs = toy_languages(5, 1, "zz");
  std::set<double> carriers;
  for (const auto& l : langs) {
    EXPECT_EQ(l.name.rfind("zz", 0), 0u);
    for (double c : l.carriers_hz) EXPECT_TRUE(carriers.insert(c).second);
  }
}

TEST(Synth, CorpusDeterministic) {
  SynthOptions o;
  o.num_langs = 3;
  o.items_per_lang = 4;
  o.duration_s = 0.5;
  o.seed = 11;
  const auto d1 = fresh_dir("s1"), d2 = fresh_dir("s2");
  const auto a = synth_corpus(o, d1);
  const auto b = synth_corpus(o, d2);
  ASSERT_EQ(a.size(), 12u);
  EXPECT_EQ(a.counts, b.counts);
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(read_file(a.entries[i].audio_filepath), read_file(b.entries[i].audio_filepath));
  }
  const auto text = read_file(d1 / "corpus.manifest");
  EXPECT_EQ(std::count(text.begin(), text.end(), '\n'), 12);
  EXPECT_EQ(load_manifest(d1 / "corpus.manifest").entries, a.entries);
}

TEST(Synth, ThousandLineManifest) {
  SynthOptions o;
  o.items_per_lang = 200;
  o.duration_s = 0.1;
  const auto d = fresh_dir("big");
  const auto ds = synth_corpus(o, d);
  EXPECT_EQ(ds.size(), 1000u);
  const auto text = read_file(d / "corpus.manifest");
  EXPECT_EQ(std::count(text.begin(), text.end(), '\n'), 1000);
}

TEST(Manifest, WriteLoadRoundTrip) {
  const auto dir = fresh_dir("rt");
  auto ds = labels_dataset(0, 3, 2);
  for (auto& e : ds.entries) e.audio_filepath = dir / "wavs" / e.audio_filepath;
  ds = Dataset::from_entries(ds.entries);
  write_manifest(dir / "m.manifest", ds);
  const auto back = load_manifest(dir / "m.manifest", false);
  EXPECT_EQ(back.entries, ds.entries);
  EXPECT_EQ(back.counts, ds.counts);
  EXPECT_NE(read_file(dir / "m.manifest").find("\"wavs/"), std::string::npos);
}

TEST(LabeledSet, SegmentsFullWindows) {
  const auto lang = toy_languages(2, 3)[0];
  std::vector<AudioSegment> utts{synth_utterance(lang, 7.5, kCanonicalSampleRate, 1),
                                 synth_utterance(lang, 2.0, kCanonicalSampleRate, 2)};
  utts[0].label = utts[1].label = lang.name;
  const auto set = make_labeled_set(utts, {lang.name, "other"}, 3.0);
  ASSERT_EQ(set.examples.size(), 3u);
  EXPECT_EQ(set.examples[0].audio.samples.size(), 48000u);
  EXPECT_EQ(set.examples[2].audio.samples.size(), 32000u);
  EXPECT_EQ(make_labeled_set(utts, {lang.name}, 0.0).examples.size(), 2u);
  utts[1].label = "unknown";
  EXPECT_THROW(make_labeled_set(utts, {lang.name}), LabelError);
}

#include <spdlog/spdlog.h>

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <numeric>
#include <optional>
#include <set>
#include <sstream>
#include <thread>

#include "CLI11.hpp"
#include "energy_oracle.hpp"
#include "eval_reference.hpp"
#include "grad_cases.hpp"
#include "helpers.hpp"
#include "param_count.hpp"
#include "tlid/alloc.hpp"
#include "tlid/checkpoint.hpp"
#include "tlid/corpus.hpp"
#include "tlid/error.hpp"
#include "tlid/evaluation.hpp"
#include "tlid/training.hpp"

using namespace tlid;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

struct Outcome {
  bool pass = true;
  std::ostringstream detail;

  void check(bool ok, const std::string& what) {
    if (!ok) {
      pass = false;
      detail << "[failed: " << what << "] ";
    }
  }
};

std::string fmt(double v, int digits = 4) {
  std::ostringstream s;
  s << std::setprecision(digits) << v;
  return s.str();
}

// ---- 1: gradients ----

void gradients(Outcome& o) {
  const auto t0 = Clock::now();
  double worst = 0.0;
  std::string worst_name;
  std::size_t checks = 0;
  for (const auto& gc : oracle::grad_cases()) {
    for (int seed = 0; seed < 20; ++seed) {
      auto [f, leaves] = gc.make(static_cast<std::uint64_t>(seed) * 7919 + 1);
      const double err = grad_check_leaves(f, leaves);
      ++checks;
      if (!(err <= worst)) {
        worst = err;
        worst_name = gc.name;
      }
    }
  }
  const auto tiny = oracle::tiny_model_grad_errors(20);
  double tiny_worst = 0.0;
  for (const auto& [seed, err] : tiny) tiny_worst = std::max(tiny_worst, err);
  const double secs = seconds_since(t0);
  o.check(worst < 1e-4, "op gradient error");
  o.check(tiny.size() == 20 && tiny_worst < 1e-4, "tiny model gradient error");
  o.check(secs < 60.0, "runtime");
  o.detail << checks << " op checks, max rel err " << fmt(worst) << " (" << worst_name << "); tiny model "
           << tiny.size() << " seeds, max " << fmt(tiny_worst) << "; " << fmt(secs, 3) << " s";
}

// ---- 2: parameter scaling ----

void param_scaling(Outcome& o) {
  const auto t0 = Clock::now();
  std::uint64_t prev = 0;
  bool mono = true;
  for (int r : {3, 5, 7}) {
    const auto n = param_count_formula(ModelConfig::titanet(3, r, 256, 107));
    mono = mono && n > prev;
    prev = n;
  }
  prev = 0;
  for (int c : {256, 512, 1024, 2048}) {
    const auto n = param_count_formula(ModelConfig::titanet(3, 5, c, 107));
    mono = mono && n > prev;
    prev = n;
  }
  o.check(mono, "monotonicity");

  bool exact = true;
  std::uint64_t n512 = 0, n1024 = 0;
  for (int c : {512, 1024}) {
    const auto cfg = ModelConfig::titanet(3, 5, c, 107);
    const auto runtime = Model::build(cfg, 0).count_params();
    exact = exact && runtime == param_count_formula(cfg) && runtime == oracle::param_count(cfg);
    (c == 512 ? n512 : n1024) = runtime;
  }
  Rng rng(2);
  for (int i = 0; i < 10; ++i) {
    auto cfg = ModelConfig::titanet(static_cast<int>(rng.integer(1, 4)), static_cast<int>(rng.integer(1, 5)),
                                    static_cast<int>(rng.integer(8, 128)), static_cast<int>(rng.integer(2, 120)));
    cfg.epilogue_channels = static_cast<int>(rng.integer(16, 512));
    const auto runtime = Model::build(cfg, i).count_params();
    exact = exact && runtime == param_count_formula(cfg) && runtime == oracle::param_count(cfg);
  }
  o.check(exact, "formula == runtime");
  const double r512 = static_cast<double>(n512) / 12.3e6, r1024 = static_cast<double>(n1024) / 28.9e6;
  o.check(std::abs(r512 - 1.0) <= 0.25, "3x5x512 within 25%");
  o.check(std::abs(r1024 - 1.0) <= 0.25, "3x5x1024 within 25%");
  const double secs = seconds_since(t0);
  o.check(secs < 10.0, "runtime");
  o.detail << "3x5x512 " << fmt(n512 / 1e6) << "M (x" << fmt(r512, 3) << "), 3x5x1024 " << fmt(n1024 / 1e6) << "M (x"
           << fmt(r1024, 3) << "); " << fmt(secs, 3) << " s";
}

// ---- 3: class weights ----

void class_weighting(Outcome& o) {
  Rng rng(3);
  double worst_const = 0.0, worst_sum = 0.0, worst_exact = 0.0;
  for (int trial = 0; trial < 200; ++trial) {
    const auto k = static_cast<std::size_t>(rng.integer(2, 12));
    std::vector<std::uint64_t> counts(k);
    for (auto& c : counts) c = static_cast<std::uint64_t>(rng.integer(1, 40));
    std::uint64_t L = 1;
    for (auto c : counts) L = std::lcm(L, c);
    std::uint64_t den = 0;
    for (auto c : counts) den += L / c;
    const auto w = class_weights(counts).weights;
    double total = 0.0;
    // w_i * c_i = L / den for every i, as a ratio of integers.
    const double target = static_cast<double>(L) / static_cast<double>(den);
    for (std::size_t i = 0; i < k; ++i) {
      const double exact = static_cast<double>(L / counts[i]) / static_cast<double>(den);
      worst_exact = std::max(worst_exact, std::abs(w[i] - exact) / exact);
      worst_const = std::max(worst_const, std::abs(w[i] * static_cast<double>(counts[i]) - target) / target);
      total += w[i];
    }
    worst_sum = std::max(worst_sum, std::abs(total - 1.0));
  }
  const std::vector<std::uint64_t> ex{30, 10};
  const auto w = class_weights(ex).weights;
  const bool example = std::abs(w[0] - 0.25) < 1e-15 && std::abs(w[1] - 0.75) < 1e-15;
  // Relative deviations of a few ulp are the rounding of the division itself.
  o.check(worst_exact < 1e-15 && worst_const < 1e-14, "w_i c_i constant");
  o.check(worst_sum < 1e-12, "sum to one");
  o.check(example, "[30,10] example");
  o.detail << "200 random vectors: max rel dev from rational " << fmt(worst_exact) << ", of w_i c_i "
           << fmt(worst_const) << ", |sum-1| " << fmt(worst_sum) << "; [30,10] -> [" << w[0] << ", " << w[1] << "]";
}

// ---- 4: schedule ----

void schedule(Outcome& o) {
  TrainConfig cfg;
  const double at_warm = lr_at(100, 1000, cfg), at_end = lr_at(1000, 1000, cfg), mid = lr_at(550, 1000, cfg);
  // Junction continuity: neighbouring steps around the warmup end converge on
  // lr_max as the step count grows.
  const std::size_t total = 1'000'000'000'000ull, w = total / 10;
  const double left = lr_at(w - 1, total, cfg), right = lr_at(w + 1, total, cfg), junction = lr_at(w, total, cfg);
  const double gap = std::max(std::abs(junction - left), std::abs(right - junction));
  o.check(std::abs(at_warm - 1e-3) < 1e-15, "lr at warmup end");
  o.check(std::abs(at_end - 1e-4) < 1e-15, "lr at final step");
  o.check(gap < 1e-12, "continuity");
  o.check(std::abs(mid - 5.5e-4) < 1e-12, "mid-cosine");
  o.detail << "warmup end " << at_warm << ", final " << at_end << ", mid " << mid << ", junction gap " << fmt(gap);
}

// ---- 5: padding invariance ----

void padding_invariance(Outcome& o) {
  auto cfg = ModelConfig::titanet(3, 2, 64, 5);
  auto model = Model::build(cfg, 5);
  // Move the running statistics off their defaults first.
  for (int i = 0; i < 3; ++i) {
    model.forward(test::random_tensor({4, 80, 60}, 900 + i, 1.0, false), SequenceMask::full(4, 60), Mode::Train, i);
  }
  Rng rng(55);
  double worst = 0.0;
  for (int u = 0; u < 50; ++u) {
    const auto len = static_cast<std::size_t>(rng.integer(20, 300));
    FeatureMatrix alone{test::random_tensor({80, len}, 1000 + u, 1.0, false), len, ""};
    const auto ref = model.infer(make_batch(std::vector<FeatureMatrix>{alone}).features, SequenceMask::full(1, len));

    const auto n = static_cast<std::size_t>(rng.integer(2, 4));
    const auto pos = static_cast<std::size_t>(rng.integer(0, static_cast<std::int64_t>(n) - 1));
    std::vector<FeatureMatrix> items;
    for (std::size_t i = 0; i < n; ++i) {
      if (i == pos) {
        items.push_back(alone);
        continue;
      }
      const auto l = static_cast<std::size_t>(rng.integer(static_cast<std::int64_t>(len) + 1, 400));
      items.push_back({test::random_tensor({80, l}, 2000 + u * 8 + i, 1.0, false), l, ""});
    }
    auto batch = make_batch(items);
    const std::size_t t = batch.features.dim(2);
    auto d = batch.features.mutable_data();
    const double scale = std::pow(10.0, rng.uniform(-2.0, 3.0));
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t c = 0; c < 80; ++c) {
        for (std::size_t f = batch.mask.lengths[i]; f < t; ++f) d[(i * 80 + c) * t + f] = scale * rng.normal();
      }
    }
    const auto out = model.infer(batch.features, batch.mask);
    for (std::size_t k = 0; k < 5; ++k) worst = std::max(worst, std::abs(out[pos * 5 + k] - ref[k]));
  }
  o.check(worst < 1e-6, "logit difference");
  o.detail << "50 utterances, max |delta logit| " << fmt(worst);
}

// ---- 6-8: desk-scale learning ----

struct Corpus {
  Dataset train, val, test;
  std::vector<AudioSegment> train_audio, val_audio, test_audio;
};

Corpus make_corpus(const fs::path& dir, int langs, int per_lang, std::uint64_t seed, const std::string& prefix) {
  SynthOptions opts;
  opts.num_langs = langs;
  opts.items_per_lang = per_lang;
  opts.duration_s = 4.0;
  opts.seed = seed;
  opts.label_prefix = prefix;
  fs::remove_all(dir);
  const auto all = synth_corpus(opts, dir);
  Corpus c;
  Dataset rest;
  std::tie(rest, c.test) = split_train_val(all, 0.2, derive_seed(seed, 101));
  std::tie(c.train, c.val) = split_train_val(rest, 0.1, derive_seed(seed, 102));
  c.train_audio = load_audio(c.train);
  c.val_audio = load_audio(c.val);
  c.test_audio = load_audio(c.test);
  return c;
}

struct Trained {
  std::optional<Model> model;
  std::vector<std::string> labels;
  Corpus corpus;
};

void desk_scale(Outcome& o, const fs::path& work, Trained& out) {
  const auto t0 = Clock::now();
  out.corpus = make_corpus(work / "c6", 5, 200, 6, "lang");
  const auto& c = out.corpus;
  const double oracle_acc = oracle::nearest_centroid_accuracy(c.train_audio, c.test_audio);
  o.check(oracle_acc >= 0.99, "corpus separability");
  o.detail << "energy oracle " << fmt(oracle_acc) << "; ";
  if (oracle_acc < 0.99) return;

  out.labels = c.train.label_set;
  TrainConfig cfg;
  cfg.epochs = 15;
  cfg.batch_size = 32;
  cfg.seed = 6;
  auto mcfg = ModelConfig::titanet(3, 2, 64, static_cast<int>(out.labels.size()));
  Model model = Model::build(mcfg, 6);
  const auto train = make_labeled_set(c.train_audio, out.labels, 3.0);
  const auto val = make_labeled_set(c.val_audio, out.labels, 0.0);
  const auto result = fit(model, train, val, cfg, FitMode::Pretrain, [](const HistoryRecord& h) {
    std::cerr << "  c6 epoch " << h.epoch + 1 << " loss " << h.train_loss << " val " << h.val_macro_acc << "\n";
  });
  out.model = model_from_checkpoint(result.best);
  const auto report = evaluate(*out.model, out.labels, c.test_audio);
  const double secs = seconds_since(t0);
  o.check(report.macro_accuracy >= 0.95, "held-out macro accuracy");
  o.check(secs < 900.0, "runtime");
  o.detail << "test macro acc " << fmt(report.macro_accuracy) << " on " << report.num_samples << " items (best epoch "
           << result.best_epoch + 1 << "); " << fmt(secs, 4) << " s on " << std::thread::hardware_concurrency()
           << " core(s)";
}

void finetune(Outcome& o, const fs::path& work, const Trained& base) {
  if (!base.model) {
    o.check(false, "no criterion-6 model");
    return;
  }
  const auto t0 = Clock::now();
  const auto c = make_corpus(work / "c7", 3, 200, 7, "ft");
  std::set<std::string> overlap;
  for (const auto& l : c.train.label_set) {
    if (std::find(base.labels.begin(), base.labels.end(), l) != base.labels.end()) overlap.insert(l);
  }
  o.check(overlap.empty(), "disjoint label sets");

  Model model = *base.model;
  model.replace_head(static_cast<int>(c.train.label_set.size()), 77);
  std::vector<std::pair<std::string, std::vector<double>>> encoder;
  for (const auto& p : model.parameters()) {
    if (!Model::is_decoder_parameter(p.name)) encoder.emplace_back(p.name, std::vector<double>(p.tensor.data().begin(), p.tensor.data().end()));
  }
  const auto buffers = model.buffers();

  auto cfg = TrainConfig::finetune_defaults();
  cfg.seed = 7;
  const auto train = make_labeled_set(c.train_audio, c.train.label_set, 3.0);
  const auto val = make_labeled_set(c.val_audio, c.train.label_set, 0.0);
  const auto result = fit(model, train, val, cfg, FitMode::Finetune, [](const HistoryRecord& h) {
    std::cerr << "  c7 epoch " << h.epoch + 1 << " loss " << h.train_loss << " val " << h.val_macro_acc << "\n";
  });

  std::size_t changed = 0;
  for (const auto& [name, before] : encoder) {
    const auto now = model.parameter(name).data();
    if (!std::equal(now.begin(), now.end(), before.begin(), before.end())) ++changed;
  }
  for (std::size_t i = 0; i < buffers.size(); ++i) changed += model.buffers()[i].values != buffers[i].values;
  const auto best = model_from_checkpoint(result.best);
  const auto report = evaluate(best, c.train.label_set, c.test_audio);
  const double secs = seconds_since(t0);
  o.check(changed == 0, "encoder bit-identical");
  o.check(report.macro_accuracy >= 0.90, "held-out macro accuracy");
  o.check(secs < 600.0, "runtime");
  o.detail << "test macro acc " << fmt(report.macro_accuracy) << " after " << cfg.epochs << " epochs; "
           << encoder.size() << " encoder tensors + " << buffers.size() << " buffers, " << changed << " changed; "
           << fmt(secs, 4) << " s";
}

void length_trend(Outcome& o, const Trained& base) {
  if (!base.model) {
    o.check(false, "no criterion-6 model");
    return;
  }
  const auto rows = length_sweep(*base.model, base.labels, base.corpus.test_audio, {1.0, 2.0, 3.0, 4.0}, 2.0);
  for (double len : {1.0, 2.0, 3.0, 4.0}) {
    if (!rows.count(len)) {
      o.check(false, "missing sweep length");
      return;
    }
    const auto& r = rows.at(len);
    o.detail << len << "s " << r.errors << "/" << r.windows << "  ";
  }
  o.check(rows.at(4.0).error_rate() <= rows.at(1.0).error_rate(), "error(4s) <= error(1s)");
}

// ---- 9: metrics ----

void metrics(Outcome& o) {
  std::size_t mismatches = 0, bucket_mismatch = 0;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    const auto samples = oracle::random_samples(seed);
    const auto ref = oracle::reference_report(samples);
    const auto rep = build_report(samples);

    // Indices follow sorted label order, as a Dataset's label_set does.
    std::set<std::string> names;
    for (const auto& s : samples) names.insert({s.truth, s.predicted});
    std::map<std::string, std::size_t> index;
    for (const auto& n : names) index.emplace(n, index.size());
    std::vector<std::size_t> truth, pred;
    for (const auto& s : samples) {
      truth.push_back(index.at(s.truth));
      pred.push_back(index.at(s.predicted));
    }
    const auto short_b = rep.buckets.count(kShortBucket) ? rep.buckets.at(kShortBucket) : BucketStats{};
    const auto long_b = rep.buckets.count(kLongBucket) ? rep.buckets.at(kLongBucket) : BucketStats{};
    const std::size_t k = seed % 5 + 1;
    const std::vector<Confusion> ref_top(ref.confusions.begin(),
                                         ref.confusions.begin() + static_cast<std::ptrdiff_t>(std::min(k, ref.confusions.size())));
    const bool same = rep.num_samples == ref.n &&
                      rep.error_rate == static_cast<double>(ref.errors) / static_cast<double>(ref.n) &&
                      rep.macro_accuracy == ref.macro && macro_accuracy(truth, pred) == ref.macro &&
                      short_b == BucketStats{ref.short_n, ref.short_errors} &&
                      long_b == BucketStats{ref.long_n, ref.long_errors} && rep.confusions == ref.confusions &&
                      top_confusions(rep, k) == ref_top;
    mismatches += !same;
    std::size_t total = 0;
    for (const auto& [_, b] : rep.buckets) total += b.n;
    bucket_mismatch += total != rep.num_samples;
  }
  o.check(mismatches == 0, "reference mismatch");
  o.check(bucket_mismatch == 0, "bucket totals");
  o.detail << "100 random sets: " << mismatches << " mismatches, " << bucket_mismatch << " bucket-total mismatches";
}

// ---- 10: serialization ----

void serialization(Outcome& o, const fs::path& work) {
  auto cfg = ModelConfig::titanet(3, 2, 64, 5);
  auto m = Model::build(cfg, 10);
  for (int i = 0; i < 3; ++i) {
    m.forward(test::random_tensor({4, 80, 50}, 700 + i, 1.0, false), SequenceMask::full(4, 50), Mode::Train, i);
  }
  Tensor x = test::random_tensor({3, 80, 120}, 11, 1.0, false);
  const auto mask = SequenceMask::from_lengths({120, 77, 30});
  const auto before = m.infer(x, mask);
  const auto path = work / "c10.ckpt";
  const std::vector<std::string> labels{"a", "b", "c", "d", "e"};
  save_checkpoint(make_checkpoint(m, labels), path);
  const auto after = model_from_checkpoint(load_checkpoint(path)).infer(x, mask);
  double worst = 0.0;
  for (std::size_t i = 0; i < before.size(); ++i) worst = std::max(worst, std::abs(before[i] - after[i]));
  o.check(worst < 1e-5, "round-trip logits");

  const auto bytes = serialize_checkpoint(make_checkpoint(m, labels));
  std::size_t rejected = 0, tried = 0;
  Rng rng(10);
  for (int i = 0; i < 40; ++i) {
    auto bad = bytes;
    if (i % 2 == 0) {
      bad[rng.below(bad.size())] ^= static_cast<std::uint8_t>(1u << rng.below(8));
    } else {
      bad.resize(rng.below(bad.size()));
    }
    ++tried;
    try {
      deserialize_checkpoint(bad);
    } catch (const FormatError&) {
      ++rejected;
    }
  }
  o.check(rejected == tried, "corruption rejected");

  const auto corpus_dir = work / "c10_corpus";
  fs::remove_all(corpus_dir);
  SynthOptions so;
  so.num_langs = 4;
  so.items_per_lang = 7;
  so.duration_s = 0.2;
  const auto ds = synth_corpus(so, corpus_dir);
  const auto [a, b] = split_train_val(ds, 0.3, 1);
  write_manifest(corpus_dir / "a.manifest", a);
  const auto back = load_manifest(corpus_dir / "a.manifest");
  const bool counts_ok = back.counts == a.counts && back.entries == a.entries &&
                         load_manifest(corpus_dir / "corpus.manifest").counts == ds.counts;
  o.check(counts_ok, "manifest counts");
  o.detail << "max |delta logit| " << fmt(worst) << "; " << rejected << "/" << tried
           << " corrupted containers rejected; manifest counts " << (counts_ok ? "exact" : "differ");
}

}  // namespace

int main(int argc, char** argv) {
  tune_allocator();
  CLI::App app{"Acceptance checks, one PASS/FAIL line per criterion"};
  std::string work_dir = (fs::temp_directory_path() / "tlid_acceptance").string();
  std::vector<int> only;
  app.add_option("--work-dir", work_dir, "Scratch directory for corpora and checkpoints");
  app.add_option("--only", only, "Criteria to run (default: all)")->delimiter(',')->check(CLI::Range(1, 10));
  CLI11_PARSE(app, argc, argv);
  spdlog::set_level(spdlog::level::warn);
  const fs::path work(work_dir);
  fs::create_directories(work);

  Trained c6;
  const std::vector<std::pair<int, std::function<void(Outcome&)>>> criteria{
      {1, gradients},
      {2, param_scaling},
      {3, class_weighting},
      {4, schedule},
      {5, padding_invariance},
      {6, [&](Outcome& o) { desk_scale(o, work, c6); }},
      {7, [&](Outcome& o) { finetune(o, work, c6); }},
      {8, [&](Outcome& o) { length_trend(o, c6); }},
      {9, metrics},
      {10, [&](Outcome& o) { serialization(o, work); }},
  };
  const std::set<int> selected(only.begin(), only.end());
  int failures = 0;
  for (const auto& [id, run] : criteria) {
    // 7 and 8 need the model from 6.
    const bool wanted = selected.empty() || selected.count(id) || (id == 6 && (selected.count(7) || selected.count(8)));
    if (!wanted) continue;
    Outcome o;
    try {
      run(o);
    } catch (const std::exception& e) {
      o.check(false, std::string("exception: ") + e.what());
    }
    if (!selected.empty() && !selected.count(id)) continue;
    failures += !o.pass;
    std::cout << "criterion " << std::setw(2) << id << ": " << (o.pass ? "PASS" : "FAIL") << "  " << o.detail.str()
              << std::endl;
  }
  return failures == 0 ? 0 : 1;
}

#include "cli.hpp"

#include <cmath>
#include <fstream>
#include <functional>
#include <numeric>
#include <iomanip>
#include <optional>
#include <sstream>

#include <spdlog/spdlog.h>

#include "CLI11.hpp"
#include "tlid/checkpoint.hpp"
#include "tlid/corpus.hpp"
#include "tlid/error.hpp"
#include "tlid/evaluation.hpp"
#include "tlid/model.hpp"
#include "tlid/random.hpp"
#include "tlid/training.hpp"

namespace tlid::cli {

namespace {

// Keys outside any [section] apply to the subcommand being run.
class SubcommandConfig : public CLI::ConfigBase {
 public:
  explicit SubcommandConfig(const CLI::App* app) : app_(app) {}
  std::vector<CLI::ConfigItem> from_config(std::istream& input) const override {
    auto items = CLI::ConfigBase::from_config(input);
    const auto subs = app_->get_subcommands();
    if (subs.empty()) return items;
    for (auto& item : items) {
      if (item.parents.empty()) item.parents.push_back(subs.front()->get_name());
    }
    return items;
  }

 private:
  const CLI::App* app_;
};

struct Common {
  std::uint64_t seed = 0;
  int threads = 1;
  std::string verbosity = "info";
};

void add_common(CLI::App* sub, Common& c) {
  sub->add_option("--seed", c.seed, "Random seed")->capture_default_str();
  sub->add_option("--threads", c.threads, "Data loading / evaluation workers")
      ->check(CLI::PositiveNumber)
      ->capture_default_str();
  sub->add_option("--verbosity", c.verbosity, "Log level")
      ->check(CLI::IsMember({"trace", "debug", "info", "warn", "error", "off"}))
      ->capture_default_str();
}

void log_resolved(const CLI::App* sub) {
  spdlog::info("resolved configuration for '{}':", sub->get_name());
  std::istringstream lines(sub->config_to_str(true, false));
  std::string line;
  while (std::getline(lines, line)) {
    if (!line.empty()) spdlog::info("  {}", line);
  }
}

std::string millions(std::uint64_t n) {
  std::ostringstream s;
  s << std::fixed << std::setprecision(1) << static_cast<double>(n) / 1e6 << "M";
  return s.str();
}

void require_labels_subset(const Dataset& ds, const std::vector<std::string>& labels, const std::string& what) {
  for (const auto& l : ds.label_set) {
    if (std::find(labels.begin(), labels.end(), l) == labels.end()) {
      throw LabelError(what + ": label '" + l + "' is not in the training label set");
    }
  }
}

std::vector<std::string> encoder_snapshot_names(const Model& m) {
  std::vector<std::string> out;
  for (const auto& p : m.parameters()) {
    if (!Model::is_decoder_parameter(p.name)) out.push_back(p.name);
  }
  return out;
}

// ---- synth ----

struct SynthArgs {
  SynthOptions synth;
  std::string out_dir;
  double test_fraction = 0.2;
  double val_fraction = 0.1;
};

int run_synth(const SynthArgs& a, const Common& c, std::ostream& out) {
  SynthOptions opts = a.synth;
  opts.seed = c.seed;
  opts.threads = c.threads;
  const auto all = synth_corpus(opts, a.out_dir);
  auto [rest, test] = split_train_val(all, a.test_fraction, derive_seed(c.seed, 101));
  auto [train, val] = split_train_val(rest, a.val_fraction, derive_seed(c.seed, 102));
  const std::filesystem::path dir(a.out_dir);
  write_manifest(dir / "train.manifest", train);
  write_manifest(dir / "val.manifest", val);
  write_manifest(dir / "test.manifest", test);
  out << "wrote " << all.size() << " WAVs for " << all.label_set.size() << " languages to " << a.out_dir << "\n";
  out << "train " << train.size() << "  val " << val.size() << "  test " << test.size() << "\n";
  return kOk;
}

// ---- train ----

struct TrainArgs {
  std::string train, val, out, history;
  int B = 3, R = 5, C = 1024;
  int epilogue = 3072;
  double dropout = 0.0;
  double segment = 3.0;
  bool no_speed = false, no_specaug = false;
  TrainConfig cfg;
};

int run_train(TrainArgs a, const Common& c, std::ostream& out) {
  auto& cfg = a.cfg;
  cfg.seed = c.seed;
  cfg.threads = c.threads;
  cfg.augment.speed_perturb = !a.no_speed;
  cfg.augment.spec_augment = !a.no_specaug;
  out << "lr_max " << cfg.lr_max << ", lr_min " << cfg.lr_min << ", warmup " << cfg.warmup_ratio * 100.0 << "%\n";
  cfg.validate();

  const auto train_ds = load_manifest(a.train);
  const auto val_ds = load_manifest(a.val);
  if (train_ds.empty()) throw ConfigError("train manifest is empty");
  if (val_ds.empty()) throw ConfigError("val manifest is empty");
  require_labels_subset(val_ds, train_ds.label_set, "val manifest");
  const auto& labels = train_ds.label_set;

  auto mcfg = ModelConfig::titanet(a.B, a.R, a.C, static_cast<int>(labels.size()));
  mcfg.epilogue_channels = a.epilogue;
  mcfg.dropout_p = a.dropout;
  mcfg.n_mels = cfg.features.n_mels;
  mcfg.validate();
  auto class_w = class_weights(train_ds.count_vector(), labels);
  for (std::size_t i = 0; i < labels.size(); ++i) spdlog::info("class weight {} = {:.6f}", labels[i], class_w.weights[i]);

  const auto train_set =
      make_labeled_set(load_audio(train_ds, cfg.features.sample_rate, c.threads), labels, a.segment);
  const auto val_set = make_labeled_set(load_audio(val_ds, cfg.features.sample_rate, c.threads), labels, 0.0);

  auto model = Model::build(mcfg, c.seed);
  spdlog::info("model {} with {} parameters", mcfg.name(), model.count_params());
  const auto result = fit(model, train_set, val_set, cfg, FitMode::Pretrain);
  save_checkpoint(result.best, a.out);
  const std::string history = a.history.empty() ? a.out + ".history.jsonl" : a.history;
  std::ofstream h(history);
  if (!h) throw Error("cannot write " + history);
  write_history(h, result.history);
  out << "best epoch " << result.best_epoch + 1 << " val_macro_acc " << result.best.metrics.val_macro_acc << "\n";
  out << "checkpoint " << a.out << "\nhistory " << history << "\n";
  return kOk;
}

// ---- finetune ----

struct FinetuneArgs {
  std::string ckpt, train, extra_train, val, out, history;
  std::optional<int> classes;
  double segment = 3.0;
  bool verify_frozen = false;
  TrainConfig cfg = TrainConfig::finetune_defaults();
};

int run_finetune(FinetuneArgs a, const Common& c, std::ostream& out) {
  auto& cfg = a.cfg;
  cfg.seed = c.seed;
  cfg.threads = c.threads;
  cfg.validate();

  Dataset pool = load_manifest(a.train);
  if (!a.extra_train.empty()) pool = dataset_union(pool, load_manifest(a.extra_train));
  if (pool.empty()) throw ConfigError("fine-tuning manifests are empty");
  Dataset train_ds, val_ds;
  if (a.val.empty()) {
    std::tie(train_ds, val_ds) = split_train_val(pool, 0.10, derive_seed(c.seed, 103));
  } else {
    train_ds = pool;
    val_ds = load_manifest(a.val);
    require_labels_subset(val_ds, train_ds.label_set, "val manifest");
  }
  const auto labels = pool.label_set;
  const int K = static_cast<int>(labels.size());
  if (a.classes && *a.classes != K) {
    throw ConfigError("--classes " + std::to_string(*a.classes) + (*a.classes < K ? " is smaller than" : " differs from") +
                      " the " + std::to_string(K) + " labels present in the manifests");
  }

  const auto ckpt = load_checkpoint(a.ckpt);
  auto model = model_from_checkpoint(ckpt);
  if (model.config().n_mels != cfg.features.n_mels) throw ConfigError("checkpoint n_mels differs from feature n_mels");
  model.replace_head(K, derive_seed(c.seed, 104));
  std::vector<std::vector<double>> before;
  const auto enc_names = encoder_snapshot_names(model);
  for (const auto& n : enc_names) {
    const auto d = model.parameter(n).data();
    before.emplace_back(d.begin(), d.end());
  }
  const auto buffers_before = model.buffers();

  const auto train_set = make_labeled_set(load_audio(train_ds, cfg.features.sample_rate, c.threads), labels, a.segment);
  const auto val_set = make_labeled_set(load_audio(val_ds, cfg.features.sample_rate, c.threads), labels, 0.0);
  const auto result = fit(model, train_set, val_set, cfg, FitMode::Finetune);
  save_checkpoint(result.best, a.out);
  const std::string history = a.history.empty() ? a.out + ".history.jsonl" : a.history;
  std::ofstream h(history);
  if (!h) throw Error("cannot write " + history);
  write_history(h, result.history);
  out << "labels " << K << "; best epoch " << result.best_epoch + 1 << " val_macro_acc "
      << result.best.metrics.val_macro_acc << "\ncheckpoint " << a.out << "\n";

  if (a.verify_frozen) {
    std::size_t changed = 0;
    for (std::size_t i = 0; i < enc_names.size(); ++i) {
      const auto d = model.parameter(enc_names[i]).data();
      if (!std::equal(d.begin(), d.end(), before[i].begin(), before[i].end())) {
        ++changed;
        spdlog::error("encoder tensor changed: {}", enc_names[i]);
      }
    }
    for (std::size_t i = 0; i < buffers_before.size(); ++i) {
      if (model.buffers()[i].values != buffers_before[i].values) {
        ++changed;
        spdlog::error("encoder buffer changed: {}", buffers_before[i].name);
      }
    }
    if (changed) {
      out << "verify-frozen: FAILED (" << changed << " tensors changed)\n";
      return kRuntimeFailure;
    }
    out << "verify-frozen: " << enc_names.size() << " encoder tensors and " << buffers_before.size()
        << " buffers bit-identical\n";
  }
  return kOk;
}

// ---- eval ----

struct EvalArgs {
  std::string ckpt, test, out, sweep_out;
  std::vector<double> lengths;
  double stride = 2.0;
  std::size_t top = 0;
};

int run_eval(const EvalArgs& a, const Common& c, std::ostream& out) {
  const auto ckpt = load_checkpoint(a.ckpt);
  const auto model = model_from_checkpoint(ckpt);
  EvalOptions opts;
  opts.threads = c.threads;
  opts.features.n_mels = model.config().n_mels;
  const auto ds = load_manifest(a.test);
  require_labels_subset(ds, ckpt.label_set, "test manifest");
  const auto audio = load_audio(ds, opts.features.sample_rate, c.threads);
  const auto report = evaluate(model, ckpt.label_set, audio, opts);

  out << std::fixed << std::setprecision(4);
  out << "samples " << report.num_samples << "\nerror_rate " << report.error_rate << "\nmacro_accuracy "
      << report.macro_accuracy << "\n";
  for (const auto& [name, b] : report.buckets) {
    out << "bucket " << name << "  n " << b.n << "  errors " << b.errors << "  error_rate " << b.error_rate() << "\n";
  }
  if (a.top > 0) {
    out << "top confusions (truth -> predicted: count)\n";
    for (const auto& cf : top_confusions(report, a.top)) {
      out << "  " << cf.truth << " -> " << cf.predicted << ": " << cf.count << "\n";
    }
  }
  if (!a.lengths.empty()) {
    const auto rows = length_sweep(model, ckpt.label_set, audio, a.lengths, a.stride, opts);
    out << "length_s  windows  errors  error_rate\n";
    for (double len : a.lengths) {
      auto it = rows.find(len);
      if (it == rows.end()) {
        out << std::setw(8) << len << "  (no windows)\n";
        continue;
      }
      out << std::setw(8) << len << "  " << std::setw(7) << it->second.windows << "  " << std::setw(6)
          << it->second.errors << "  " << it->second.error_rate() << "\n";
    }
    if (!a.sweep_out.empty()) {
      std::ofstream f(a.sweep_out);
      if (!f) throw Error("cannot write " + a.sweep_out);
      f << sweep_csv(rows);
    }
  }
  if (!a.out.empty()) {
    std::ofstream f(a.out);
    if (!f) throw Error("cannot write " + a.out);
    f << report.to_text();
  }
  return kOk;
}

// ---- params ----

struct ParamsArgs {
  int B = 3, R = 5, C = 1024, classes = 107, epilogue = 3072;
  bool formula_only = false;
};

int run_params(const ParamsArgs& a, const Common& c, std::ostream& out) {
  auto cfg = ModelConfig::titanet(a.B, a.R, a.C, a.classes);
  cfg.epilogue_channels = a.epilogue;
  cfg.validate();
  const auto formula = param_count_formula(cfg);
  out << cfg.name() << " (" << a.classes << " classes, epilogue " << a.epilogue << ")\n";
  out << "formula  " << formula << "  (" << millions(formula) << ")\n";
  if (a.formula_only) return kOk;
  const auto runtime = Model::build(cfg, c.seed).count_params();
  out << "runtime  " << runtime << "  (" << millions(runtime) << ")\n";
  if (runtime != formula) {
    out << "MISMATCH between formula and runtime counts\n";
    return kRuntimeFailure;
  }
  out << "formula and runtime counts agree\n";
  return kOk;
}

// ---- infer ----

struct InferArgs {
  std::string ckpt, wav;
  std::size_t top = 5;
};

int run_infer(const InferArgs& a, const Common&, std::ostream& out) {
  const auto ckpt = load_checkpoint(a.ckpt);
  const auto model = model_from_checkpoint(ckpt);
  FeatureConfig fc;
  fc.n_mels = model.config().n_mels;
  const auto audio = read_wav(a.wav);
  const auto p = predict_utterance(model, audio, fc);
  std::vector<std::size_t> order(p.posteriors.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t x, std::size_t y) { return p.posteriors[x] > p.posteriors[y]; });
  out << "predicted " << ckpt.label_set[p.label] << "\n";
  out << std::fixed << std::setprecision(3);
  for (std::size_t i = 0; i < std::min(a.top, order.size()); ++i) {
    out << "  " << ckpt.label_set[order[i]] << "  " << p.posteriors[order[i]] << "\n";
  }
  return kOk;
}

int guarded(const std::function<int()>& fn, std::ostream& err) {
  try {
    return fn();
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const LabelError& e) {
    err << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const DecodeError& e) {
    err << "decode error at byte offset " << e.offset() << ": " << e.what() << "\n";
    return kRuntimeFailure;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kRuntimeFailure;
  }
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"TitaNet-LID spoken language identification", "tlid"};
  app.require_subcommand(1);
  app.fallthrough();
  app.set_config("--config", "", "key=value file overriding defaults (flags override it)");
  app.config_formatter(std::make_shared<SubcommandConfig>(&app));
  app.allow_config_extras(CLI::config_extras_mode::error);
  Common common;

  SynthArgs synth;
  auto* s = app.add_subcommand("synth", "Generate a synthetic toy-language corpus");
  s->add_option("--langs", synth.synth.num_langs, "Number of toy languages")->required()->check(CLI::Range(2, 1 << 20));
  s->add_option("--per-lang", synth.synth.items_per_lang, "Utterances per language")
      ->check(CLI::Range(1, 1 << 24))
      ->capture_default_str();
  s->add_option("--duration", synth.synth.duration_s, "Seconds per utterance")
      ->check(CLI::PositiveNumber)
      ->capture_default_str();
  s->add_option("--sample-rate", synth.synth.sample_rate)->check(CLI::Range(1000, 192000))->capture_default_str();
  s->add_option("--label-prefix", synth.synth.label_prefix)->capture_default_str();
  s->add_option("--test-fraction", synth.test_fraction)->check(CLI::Range(0.0, 1.0))->capture_default_str();
  s->add_option("--val-fraction", synth.val_fraction)->check(CLI::Range(0.0, 1.0))->capture_default_str();
  s->add_option("--out", synth.out_dir, "Output directory")->required();
  add_common(s, common);

  TrainArgs train;
  auto* t = app.add_subcommand("train", "Train a model from manifests");
  t->add_option("--train", train.train, "Training manifest")->required()->check(CLI::ExistingFile);
  t->add_option("--val", train.val, "Validation manifest")->required()->check(CLI::ExistingFile);
  t->add_option("--B", train.B, "Mega-blocks")->check(CLI::PositiveNumber)->capture_default_str();
  t->add_option("--R", train.R, "Repeats per mega-block")->check(CLI::PositiveNumber)->capture_default_str();
  t->add_option("--C", train.C, "Channels")->check(CLI::PositiveNumber)->capture_default_str();
  t->add_option("--epilogue", train.epilogue, "Epilogue channels")->check(CLI::PositiveNumber)->capture_default_str();
  t->add_option("--dropout", train.dropout, "Block dropout")->check(CLI::Range(0.0, 0.99))->capture_default_str();
  t->add_option("--epochs", train.cfg.epochs)->check(CLI::PositiveNumber)->capture_default_str();
  t->add_option("--batch-size", train.cfg.batch_size)->check(CLI::PositiveNumber)->capture_default_str();
  t->add_option("--lr-max", train.cfg.lr_max)->capture_default_str();
  t->add_option("--lr-min", train.cfg.lr_min)->capture_default_str();
  t->add_option("--warmup", train.cfg.warmup_ratio, "Warmup fraction of all steps")->capture_default_str();
  t->add_option("--segment", train.segment, "Training segment seconds (<= 0: whole utterances)")->capture_default_str();
  t->add_flag("--no-speed-perturb", train.no_speed);
  t->add_flag("--no-spec-augment", train.no_specaug);
  t->add_option("--out", train.out, "Checkpoint path")->required();
  t->add_option("--history", train.history, "History log (default <out>.history.jsonl)");
  add_common(t, common);

  FinetuneArgs ft;
  auto* f = app.add_subcommand("finetune", "Replace the head and fine-tune with a frozen encoder");
  f->add_option("--ckpt", ft.ckpt)->required()->check(CLI::ExistingFile);
  f->add_option("--train", ft.train)->required()->check(CLI::ExistingFile);
  f->add_option("--extra-train", ft.extra_train, "Second training manifest pooled with --train")
      ->check(CLI::ExistingFile);
  f->add_option("--val", ft.val, "Validation manifest (default: 10% split of the training pool)")
      ->check(CLI::ExistingFile);
  f->add_option("--classes", ft.classes, "Number of output classes (must match the manifest labels)");
  f->add_option("--epochs", ft.cfg.epochs)->check(CLI::PositiveNumber)->capture_default_str();
  f->add_option("--batch-size", ft.cfg.batch_size)->check(CLI::PositiveNumber)->capture_default_str();
  f->add_option("--lr-peak", ft.cfg.fine_tune_lr_peak)->check(CLI::PositiveNumber)->capture_default_str();
  f->add_option("--dropout", ft.cfg.fine_tune_dropout)->check(CLI::Range(0.0, 0.99))->capture_default_str();
  f->add_option("--segment", ft.segment)->capture_default_str();
  f->add_flag("--verify-frozen", ft.verify_frozen, "Check encoder tensors are bit-identical afterwards");
  f->add_option("--out", ft.out, "Checkpoint path")->required();
  f->add_option("--history", ft.history);
  add_common(f, common);

  EvalArgs ev;
  auto* e = app.add_subcommand("eval", "Evaluate a checkpoint on a test manifest");
  e->add_option("--ckpt", ev.ckpt)->required()->check(CLI::ExistingFile);
  e->add_option("--test", ev.test)->required()->check(CLI::ExistingFile);
  e->add_option("--length-sweep", ev.lengths, "Window lengths in seconds, e.g. 1,2,3,4")
      ->delimiter(',')
      ->check(CLI::PositiveNumber);
  e->add_option("--stride", ev.stride)->check(CLI::PositiveNumber)->capture_default_str();
  e->add_option("--top-confusions", ev.top, "Print the k most frequent confusions");
  e->add_option("--out", ev.out, "JSON report path");
  e->add_option("--sweep-out", ev.sweep_out, "CSV sweep path");
  add_common(e, common);

  ParamsArgs pa;
  auto* p = app.add_subcommand("params", "Print parameter counts");
  p->add_option("--B", pa.B)->check(CLI::PositiveNumber)->capture_default_str();
  p->add_option("--R", pa.R)->check(CLI::PositiveNumber)->capture_default_str();
  p->add_option("--C", pa.C)->check(CLI::PositiveNumber)->capture_default_str();
  p->add_option("--classes", pa.classes)->check(CLI::PositiveNumber)->capture_default_str();
  p->add_option("--epilogue", pa.epilogue)->check(CLI::PositiveNumber)->capture_default_str();
  p->add_flag("--formula-only", pa.formula_only, "Skip building the weights");
  add_common(p, common);

  InferArgs in;
  auto* i = app.add_subcommand("infer", "Classify one WAV file");
  i->add_option("--ckpt", in.ckpt)->required()->check(CLI::ExistingFile);
  i->add_option("--wav", in.wav)->required();
  i->add_option("--top", in.top)->check(CLI::PositiveNumber)->capture_default_str();
  add_common(i, common);

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::ParseError& ex) {
    const int code = app.exit(ex, out, err);
    return code == 0 ? kOk : kUsage;
  }

  spdlog::set_level(spdlog::level::from_str(common.verbosity));
  for (auto* sub : app.get_subcommands()) log_resolved(sub);

  if (s->parsed()) return guarded([&] { return run_synth(synth, common, out); }, err);
  if (t->parsed()) return guarded([&] { return run_train(train, common, out); }, err);
  if (f->parsed()) return guarded([&] { return run_finetune(ft, common, out); }, err);
  if (e->parsed()) return guarded([&] { return run_eval(ev, common, out); }, err);
  if (p->parsed()) return guarded([&] { return run_params(pa, common, out); }, err);
  if (i->parsed()) return guarded([&] { return run_infer(in, common, out); }, err);
  return kUsage;
}

}  // namespace tlid::cli

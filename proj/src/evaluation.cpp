#include "tlid/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <sstream>

#include "json.hpp"
#include "tlid/error.hpp"
#include "tlid/parallel.hpp"
#include "tlid/segment.hpp"

namespace tlid {

using nlohmann::ordered_json;

double macro_accuracy(std::span<const std::size_t> truth, std::span<const std::size_t> predicted) {
  if (truth.size() != predicted.size()) throw DimensionError("macro_accuracy: size mismatch");
  if (truth.empty()) throw DegenerateInputError("macro_accuracy: no samples");
  std::map<std::size_t, std::pair<std::size_t, std::size_t>> tally;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    auto& t = tally[truth[i]];
    ++t.first;
    if (truth[i] == predicted[i]) ++t.second;
  }
  double acc = 0.0;
  for (const auto& [_, t] : tally) acc += static_cast<double>(t.second) / static_cast<double>(t.first);
  return acc / static_cast<double>(tally.size());
}

std::size_t argmax(std::span<const double> values) {
  if (values.empty()) throw DegenerateInputError("argmax: empty input");
  std::size_t best = 0;
  for (std::size_t i = 1; i < values.size(); ++i) {
    if (values[i] > values[best]) best = i;
  }
  return best;
}

Prediction predict_features(const Model& model, const FeatureMatrix& features) {
  const FeatureMatrix* items[] = {&features};
  auto batch = make_batch(std::span<const FeatureMatrix* const>(items));
  Tensor logits = model.infer(batch.features, batch.mask);
  Prediction p;
  {
    NoGradGuard guard;
    Tensor probs = softmax(logits);
    p.posteriors.assign(probs.data().begin(), probs.data().end());
  }
  p.label = argmax(logits.data());
  return p;
}

Prediction predict_utterance(const Model& model, const AudioSegment& audio, const FeatureConfig& cfg) {
  if (audio.sample_rate != cfg.sample_rate) return predict_features(model, log_mel(resample(audio, cfg.sample_rate), cfg));
  return predict_features(model, log_mel(audio, cfg));
}

std::string duration_bucket(double seconds) { return seconds < 5.0 ? kShortBucket : kLongBucket; }

EvalReport build_report(std::span<const EvalSample> samples) {
  if (samples.empty()) throw DegenerateInputError("build_report: no samples");
  EvalReport r;
  r.num_samples = samples.size();
  std::map<std::pair<std::string, std::string>, std::size_t> confusions;
  std::size_t errors = 0;
  for (const auto& s : samples) {
    const bool ok = s.truth == s.predicted;
    auto& c = r.per_class[s.truth];
    ++c.n;
    if (ok) ++c.correct;
    auto& b = r.buckets[duration_bucket(s.duration)];
    ++b.n;
    if (!ok) {
      ++b.errors;
      ++errors;
      ++confusions[{s.truth, s.predicted}];
    }
  }
  r.error_rate = static_cast<double>(errors) / static_cast<double>(samples.size());
  double acc = 0.0;
  for (const auto& [_, c] : r.per_class) acc += static_cast<double>(c.correct) / static_cast<double>(c.n);
  r.macro_accuracy = acc / static_cast<double>(r.per_class.size());
  for (const auto& [key, n] : confusions) r.confusions.push_back({key.first, key.second, n});
  std::stable_sort(r.confusions.begin(), r.confusions.end(),
                   [](const Confusion& a, const Confusion& b) { return a.count > b.count; });
  return r;
}

std::vector<Confusion> top_confusions(const EvalReport& report, std::size_t k) {
  const auto n = std::min(k, report.confusions.size());
  return {report.confusions.begin(), report.confusions.begin() + static_cast<std::ptrdiff_t>(n)};
}

std::string EvalReport::to_text() const {
  ordered_json j;
  j["num_samples"] = num_samples;
  j["error_rate"] = error_rate;
  j["macro_accuracy"] = macro_accuracy;
  ordered_json b = ordered_json::object();
  for (const auto& [name, s] : buckets) b[name] = {{"n", s.n}, {"errors", s.errors}, {"error_rate", s.error_rate()}};
  j["buckets"] = b;
  ordered_json conf = ordered_json::array();
  for (const auto& c : confusions) conf.push_back({{"truth", c.truth}, {"predicted", c.predicted}, {"count", c.count}});
  j["confusions"] = conf;
  ordered_json pc = ordered_json::object();
  for (const auto& [name, c] : per_class) pc[name] = {{"n", c.n}, {"correct", c.correct}};
  j["per_class"] = pc;
  return j.dump(2) + "\n";
}

EvalReport EvalReport::from_text(const std::string& text) {
  ordered_json j;
  try {
    j = ordered_json::parse(text);
  } catch (const std::exception& e) {
    throw FormatError(std::string("eval report: ") + e.what());
  }
  try {
    EvalReport r;
    r.num_samples = j.at("num_samples").get<std::size_t>();
    r.error_rate = j.at("error_rate").get<double>();
    r.macro_accuracy = j.at("macro_accuracy").get<double>();
    for (const auto& [name, v] : j.at("buckets").items()) {
      r.buckets[name] = {v.at("n").get<std::size_t>(), v.at("errors").get<std::size_t>()};
    }
    for (const auto& v : j.at("confusions")) {
      r.confusions.push_back(
          {v.at("truth").get<std::string>(), v.at("predicted").get<std::string>(), v.at("count").get<std::size_t>()});
    }
    for (const auto& [name, v] : j.at("per_class").items()) {
      r.per_class[name] = {v.at("n").get<std::size_t>(), v.at("correct").get<std::size_t>()};
    }
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("eval report: ") + e.what());
  }
}

namespace {

std::size_t label_index(const std::vector<std::string>& labels, const AudioSegment& a) {
  if (!a.label) throw LabelError("utterance '" + a.source_id + "' has no label");
  auto it = std::find(labels.begin(), labels.end(), *a.label);
  if (it == labels.end()) throw LabelError("label '" + *a.label + "' is not known to the model");
  return static_cast<std::size_t>(it - labels.begin());
}

void check_labels(const Model& model, const std::vector<std::string>& labels) {
  if (labels.size() != static_cast<std::size_t>(model.config().num_classes)) {
    throw ConfigError("label list size does not match model classes");
  }
}

}  // namespace

EvalReport evaluate(const Model& model, const std::vector<std::string>& labels,
                    const std::vector<AudioSegment>& dataset, const EvalOptions& opts) {
  check_labels(model, labels);
  for (const auto& a : dataset) label_index(labels, a);
  std::vector<EvalSample> samples(dataset.size());
  parallel_for(dataset.size(), opts.threads, [&](std::size_t i) {
    const auto& a = dataset[i];
    const auto p = predict_utterance(model, a, opts.features);
    samples[i] = {*a.label, labels[p.label], a.duration()};
  });
  return build_report(samples);
}

std::map<double, SweepRow> length_sweep(const Model& model, const std::vector<std::string>& labels,
                                        const std::vector<AudioSegment>& dataset,
                                        const std::vector<double>& lengths_seconds, double stride_seconds,
                                        const EvalOptions& opts) {
  check_labels(model, labels);
  struct Window {
    double length;
    std::size_t truth;
    AudioSegment audio;
  };
  std::vector<Window> windows;
  for (const auto& utt : dataset) {
    const auto truth = label_index(labels, utt);
    const auto& a = utt.sample_rate == opts.features.sample_rate ? utt : resample(utt, opts.features.sample_rate);
    for (auto& [len, segs] : segment_sweep(a, lengths_seconds, stride_seconds)) {
      for (auto& s : segs) windows.push_back({len, truth, std::move(s)});
    }
  }
  std::vector<char> wrong(windows.size(), 0);
  parallel_for(windows.size(), opts.threads, [&](std::size_t i) {
    const auto p = predict_features(model, log_mel(windows[i].audio, opts.features));
    wrong[i] = p.label != windows[i].truth;
  });
  std::map<double, SweepRow> rows;
  for (std::size_t i = 0; i < windows.size(); ++i) {
    auto& r = rows[windows[i].length];
    r.length_seconds = windows[i].length;
    ++r.windows;
    r.errors += wrong[i] ? 1 : 0;
  }
  return rows;
}

std::string sweep_csv(const std::map<double, SweepRow>& rows) {
  std::ostringstream out;
  out << "length_s,windows,errors,error_rate\n";
  for (const auto& [len, r] : rows) {
    out << len << ',' << r.windows << ',' << r.errors << ',' << std::setprecision(6) << r.error_rate() << '\n';
  }
  return out.str();
}

}  // namespace tlid

#pragma once

#include <algorithm>
#include <map>
#include <set>
#include <string>
#include <tuple>
#include <vector>

#include "tlid/evaluation.hpp"
#include "tlid/random.hpp"

namespace tlid::oracle {

// Straight-line recomputation of every report field from the raw samples.
struct ReferenceReport {
  std::size_t n = 0, errors = 0;
  double macro = 0.0;
  std::size_t short_n = 0, short_errors = 0, long_n = 0, long_errors = 0;
  std::vector<Confusion> confusions;
};

inline ReferenceReport reference_report(const std::vector<EvalSample>& samples) {
  ReferenceReport r;
  r.n = samples.size();
  std::set<std::string> classes;
  for (const auto& s : samples) classes.insert(s.truth);
  double acc_sum = 0.0;
  for (const auto& c : classes) {
    std::size_t total = 0, right = 0;
    for (const auto& s : samples) {
      if (s.truth != c) continue;
      ++total;
      right += s.predicted == s.truth;
    }
    acc_sum += static_cast<double>(right) / static_cast<double>(total);
  }
  r.macro = classes.empty() ? 0.0 : acc_sum / static_cast<double>(classes.size());

  std::vector<std::pair<std::string, std::string>> wrong;
  for (const auto& s : samples) {
    const bool err = s.predicted != s.truth;
    r.errors += err;
    if (s.duration < 5.0) {
      ++r.short_n;
      r.short_errors += err;
    } else {
      ++r.long_n;
      r.long_errors += err;
    }
    if (err) wrong.emplace_back(s.truth, s.predicted);
  }
  std::sort(wrong.begin(), wrong.end());
  for (std::size_t i = 0; i < wrong.size();) {
    std::size_t j = i;
    while (j < wrong.size() && wrong[j] == wrong[i]) ++j;
    r.confusions.push_back({wrong[i].first, wrong[i].second, j - i});
    i = j;
  }
  // Bubble sort keeps equal counts in their (truth, predicted) order.
  for (std::size_t a = 0; a < r.confusions.size(); ++a) {
    for (std::size_t b = 0; b + 1 < r.confusions.size() - a; ++b) {
      if (r.confusions[b].count < r.confusions[b + 1].count) std::swap(r.confusions[b], r.confusions[b + 1]);
    }
  }
  return r;
}

inline std::vector<EvalSample> random_samples(std::uint64_t seed) {
  Rng rng(seed);
  const auto classes = static_cast<int>(rng.integer(2, 6));
  const auto n = static_cast<int>(rng.integer(1, 60));
  const double accuracy = rng.uniform();
  std::vector<EvalSample> out;
  for (int i = 0; i < n; ++i) {
    const std::string truth = "c" + std::to_string(rng.integer(0, classes - 1));
    std::string pred = rng.uniform() < accuracy ? truth : "c" + std::to_string(rng.integer(0, classes - 1));
    // Durations cluster around the bucket boundary.
    const double dur = rng.uniform() < 0.2 ? (rng.uniform() < 0.5 ? 5.0 : 4.999) : rng.uniform(0.5, 20.0);
    out.push_back({truth, pred, dur});
  }
  return out;
}

}  // namespace tlid::oracle

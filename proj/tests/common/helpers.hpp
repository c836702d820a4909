#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <span>
#include <vector>

#include "tlid/audio.hpp"
#include "tlid/random.hpp"
#include "tlid/tensor.hpp"

namespace tlid::test {

inline Tensor random_tensor(Shape shape, std::uint64_t seed, double scale = 1.0, bool requires_grad = true) {
  Rng rng(seed);
  std::vector<double> v(numel(shape));
  for (auto& x : v) x = scale * rng.normal();
  return Tensor(std::move(shape), std::move(v), requires_grad);
}

// Magnitudes in [lo, 1] with random sign, so ReLU inputs stay off the kink.
inline Tensor off_kink_tensor(Shape shape, std::uint64_t seed, double lo = 0.1) {
  Rng rng(seed);
  std::vector<double> v(numel(shape));
  for (auto& x : v) x = (rng.uniform() < 0.5 ? -1.0 : 1.0) * rng.uniform(lo, 1.0);
  return Tensor(std::move(shape), std::move(v), true);
}

inline std::vector<double> values(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

inline double max_abs_diff(std::span<const double> a, std::span<const double> b) {
  double m = a.size() == b.size() ? 0.0 : INFINITY;
  for (std::size_t i = 0; i < std::min(a.size(), b.size()); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

inline AudioSegment sine(double hz, double seconds, int sample_rate = kCanonicalSampleRate, double amp = 0.5) {
  AudioSegment a;
  a.sample_rate = sample_rate;
  a.samples.resize(static_cast<std::size_t>(std::llround(seconds * sample_rate)));
  for (std::size_t i = 0; i < a.samples.size(); ++i) {
    a.samples[i] = amp * std::sin(2.0 * std::numbers::pi * hz * static_cast<double>(i) / sample_rate);
  }
  return a;
}

inline AudioSegment noise(double seconds, std::uint64_t seed, int sample_rate = kCanonicalSampleRate) {
  AudioSegment a;
  a.sample_rate = sample_rate;
  Rng rng(seed);
  a.samples.resize(static_cast<std::size_t>(std::llround(seconds * sample_rate)));
  for (auto& s : a.samples) s = 0.3 * rng.uniform(-1.0, 1.0);
  return a;
}

}  // namespace tlid::test

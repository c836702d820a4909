#include "tlid/segment.hpp"

#include <cmath>
#include <cstdio>

#include "tlid/error.hpp"

namespace tlid {

namespace {

AudioSegment slice(const AudioSegment& audio, std::size_t begin, std::size_t end) {
  AudioSegment s;
  s.sample_rate = audio.sample_rate;
  s.label = audio.label;
  s.samples.assign(audio.samples.begin() + static_cast<std::ptrdiff_t>(begin),
                   audio.samples.begin() + static_cast<std::ptrdiff_t>(end));
  char buf[64];
  std::snprintf(buf, sizeof buf, "@[%.3f,%.3f)", static_cast<double>(begin) / audio.sample_rate,
                static_cast<double>(end) / audio.sample_rate);
  s.source_id = audio.source_id + buf;
  return s;
}

std::size_t to_samples(double seconds, int rate) {
  return static_cast<std::size_t>(std::llround(seconds * rate));
}

}  // namespace

std::vector<AudioSegment> segment_fixed(const AudioSegment& audio, double seg_seconds, double min_tail_seconds) {
  if (seg_seconds <= 0.0) throw ContractError("segment_fixed: segment length must be positive");
  const std::size_t seg = to_samples(seg_seconds, audio.sample_rate);
  const std::size_t min_tail = to_samples(min_tail_seconds, audio.sample_rate);
  const std::size_t n = audio.samples.size();
  std::vector<AudioSegment> out;
  std::size_t start = 0;
  for (; start + seg <= n; start += seg) out.push_back(slice(audio, start, start + seg));
  const std::size_t tail = n - start;
  if (tail > 0 && tail >= min_tail) out.push_back(slice(audio, start, n));
  return out;
}

std::map<double, std::vector<AudioSegment>> segment_sweep(const AudioSegment& audio,
                                                          const std::vector<double>& lengths_seconds,
                                                          double stride_seconds) {
  if (stride_seconds <= 0.0) throw ContractError("segment_sweep: stride must be positive");
  const std::size_t stride = to_samples(stride_seconds, audio.sample_rate);
  const std::size_t n = audio.samples.size();
  std::map<double, std::vector<AudioSegment>> out;
  for (double L : lengths_seconds) {
    if (L <= 0.0) throw ContractError("segment_sweep: lengths must be positive");
    const std::size_t len = to_samples(L, audio.sample_rate);
    auto& windows = out[L];
    for (std::size_t start = 0; start + len <= n; start += stride) windows.push_back(slice(audio, start, start + len));
  }
  return out;
}

}  // namespace tlid

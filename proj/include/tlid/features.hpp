#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "tlid/audio.hpp"
#include "tlid/tensor.hpp"

namespace tlid {

enum class FeatureNormalization { None, PerFeature };

/// Log-mel front end settings. Defaults give 80 bins from 25 ms Hann
/// windows every 10 ms at 16 kHz.
struct FeatureConfig {
  int sample_rate = kCanonicalSampleRate;
  int n_mels = 80;
  double win_ms = 25.0;
  double hop_ms = 10.0;
  int fft_size = 512;
  double fmin = 0.0;
  double fmax = 0.0;  // 0 selects Nyquist
  double log_floor = 1e-10;
  FeatureNormalization normalize = FeatureNormalization::PerFeature;

  std::size_t win_samples() const;
  std::size_t hop_samples() const;
  double effective_fmax() const;
  void validate() const;
  /// Stable 16-hex-digit identifier of every field.
  std::string hash() const;
};

struct FeatureMatrix {
  Tensor mels;  // [n_mels, num_frames]
  std::size_t num_frames = 0;
  std::string config_hash;

  std::size_t n_mels() const { return mels.dim(0); }
};

/// 1 + floor((num_samples - win) / hop), or 0 when shorter than a window.
std::size_t frame_count(std::size_t num_samples, const FeatureConfig& cfg);

// Slaney mel scale: linear below 1 kHz, logarithmic above.
double hz_to_mel(double hz);
double mel_to_hz(double mel);

/// Row-major [n_mels, fft_size/2 + 1] area-normalized triangular filters.
std::vector<double> mel_filterbank(const FeatureConfig& cfg);
/// Center frequency in Hz of each mel filter.
std::vector<double> mel_center_frequencies(const FeatureConfig& cfg);

FeatureMatrix log_mel(const AudioSegment& audio, const FeatureConfig& cfg = {});

struct SpecAugmentConfig {
  int n_freq_masks = 2;
  int freq_width_max = 15;
  int n_time_masks = 2;
  double time_width_max_fraction = 0.05;
};

/// Zeroes random contiguous mel bands and frame ranges; widths uniform in
/// [0, max]. Deterministic for a given seed.
FeatureMatrix spec_augment(const FeatureMatrix& features, const SpecAugmentConfig& cfg, std::uint64_t seed);

}  // namespace tlid

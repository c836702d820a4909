#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace tlid {

inline constexpr int kCanonicalSampleRate = 16000;

/// Mono waveform with samples nominally in [-1, 1].
struct AudioSegment {
  std::vector<double> samples;
  int sample_rate = kCanonicalSampleRate;
  std::optional<std::string> label;
  std::string source_id;

  double duration() const { return static_cast<double>(samples.size()) / sample_rate; }
};

/// Parses a RIFF/WAVE byte stream: PCM16 or IEEE float32 (plain or
/// WAVE_FORMAT_EXTENSIBLE), any channel count averaged to mono.
/// Throws DecodeError carrying the offending byte offset.
AudioSegment decode_wav(std::span<const std::uint8_t> bytes);

/// PCM16 mono encoding; samples are clipped to the representable range.
std::vector<std::uint8_t> encode_wav_pcm16(const AudioSegment& audio);

AudioSegment read_wav(const std::filesystem::path& path);
void write_wav(const std::filesystem::path& path, const AudioSegment& audio);

/// Band-limited (Kaiser-windowed sinc) resampling where output sample m is
/// read at input position m * step. Output length is `out_len`.
std::vector<double> resample_positions(std::span<const double> input, double step, std::size_t out_len);

/// Converts to `target_rate`; returns the input unchanged when rates match.
AudioSegment resample(const AudioSegment& audio, int target_rate);

/// Speed (not tempo) perturbation: plays `factor` times faster, output length
/// round(N / factor), pitch shifts accordingly.
AudioSegment speed_perturb(const AudioSegment& audio, double factor);

}  // namespace tlid

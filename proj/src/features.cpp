#include "tlid/features.hpp"

#include <Eigen/Dense>
#include <fftw3.h>

#include <cmath>
#include <cstdio>
#include <memory>
#include <mutex>
#include <numbers>
#include <sstream>
#include <unordered_map>

#include "tlid/error.hpp"
#include "tlid/random.hpp"

namespace tlid {

namespace {

constexpr double kNormEps = 1e-5;

struct FftwFree {
  void operator()(void* p) const { fftw_free(p); }
};

// FFTW planning is not thread-safe; executing a shared plan on private,
// fftw_malloc-aligned buffers is.
class R2CPlanCache {
 public:
  fftw_plan get(int n) {
    std::lock_guard lock(mu_);
    auto it = plans_.find(n);
    if (it != plans_.end()) return it->second;
    std::unique_ptr<double, FftwFree> in(fftw_alloc_real(n));
    std::unique_ptr<fftw_complex, FftwFree> out(fftw_alloc_complex(n / 2 + 1));
    fftw_plan p = fftw_plan_dft_r2c_1d(n, in.get(), out.get(), FFTW_ESTIMATE);
    plans_.emplace(n, p);
    return p;
  }

 private:
  std::mutex mu_;
  std::unordered_map<int, fftw_plan> plans_;
};

R2CPlanCache& plan_cache() {
  static R2CPlanCache cache;
  return cache;
}

std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace

std::size_t FeatureConfig::win_samples() const {
  return static_cast<std::size_t>(std::llround(win_ms * sample_rate / 1000.0));
}
std::size_t FeatureConfig::hop_samples() const {
  return static_cast<std::size_t>(std::llround(hop_ms * sample_rate / 1000.0));
}
double FeatureConfig::effective_fmax() const { return fmax > 0.0 ? fmax : sample_rate / 2.0; }

void FeatureConfig::validate() const {
  if (sample_rate <= 0 || n_mels <= 0 || fft_size <= 0) throw ConfigError("feature config: non-positive size");
  if (win_ms < hop_ms || hop_ms <= 0.0) throw ConfigError("feature config: need win_ms >= hop_ms > 0");
  if (static_cast<std::size_t>(fft_size) < win_samples()) throw ConfigError("feature config: fft_size < window");
  if (fmin < 0.0 || effective_fmax() <= fmin || effective_fmax() > sample_rate / 2.0) {
    throw ConfigError("feature config: invalid frequency range");
  }
  if (log_floor <= 0.0) throw ConfigError("feature config: log_floor must be positive");
}

std::string FeatureConfig::hash() const {
  std::ostringstream os;
  os.precision(17);
  os << sample_rate << '|' << n_mels << '|' << win_ms << '|' << hop_ms << '|' << fft_size << '|' << fmin << '|'
     << effective_fmax() << '|' << log_floor << '|' << static_cast<int>(normalize) << "|hann-sym|slaney";
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a(os.str())));
  return buf;
}

std::size_t frame_count(std::size_t num_samples, const FeatureConfig& cfg) {
  const std::size_t win = cfg.win_samples();
  if (num_samples < win) return 0;
  return 1 + (num_samples - win) / cfg.hop_samples();
}

double hz_to_mel(double hz) {
  constexpr double f_sp = 200.0 / 3.0;
  constexpr double min_log_hz = 1000.0;
  const double min_log_mel = min_log_hz / f_sp;
  const double logstep = std::log(6.4) / 27.0;
  return hz < min_log_hz ? hz / f_sp : min_log_mel + std::log(hz / min_log_hz) / logstep;
}

double mel_to_hz(double mel) {
  constexpr double f_sp = 200.0 / 3.0;
  constexpr double min_log_hz = 1000.0;
  const double min_log_mel = min_log_hz / f_sp;
  const double logstep = std::log(6.4) / 27.0;
  return mel < min_log_mel ? mel * f_sp : min_log_hz * std::exp(logstep * (mel - min_log_mel));
}

namespace {

std::vector<double> mel_edges(const FeatureConfig& cfg) {
  const double lo = hz_to_mel(cfg.fmin), hi = hz_to_mel(cfg.effective_fmax());
  std::vector<double> edges(cfg.n_mels + 2);
  for (int i = 0; i < cfg.n_mels + 2; ++i) edges[i] = mel_to_hz(lo + (hi - lo) * i / (cfg.n_mels + 1));
  return edges;
}

}  // namespace

std::vector<double> mel_center_frequencies(const FeatureConfig& cfg) {
  auto edges = mel_edges(cfg);
  return {edges.begin() + 1, edges.end() - 1};
}

std::vector<double> mel_filterbank(const FeatureConfig& cfg) {
  cfg.validate();
  const auto edges = mel_edges(cfg);
  const int bins = cfg.fft_size / 2 + 1;
  std::vector<double> fb(static_cast<std::size_t>(cfg.n_mels) * bins, 0.0);
  for (int m = 0; m < cfg.n_mels; ++m) {
    const double left = edges[m], center = edges[m + 1], right = edges[m + 2];
    const double norm = 2.0 / (right - left);
    for (int k = 0; k < bins; ++k) {
      const double f = static_cast<double>(k) * cfg.sample_rate / cfg.fft_size;
      const double up = (f - left) / (center - left);
      const double down = (right - f) / (right - center);
      const double w = std::max(0.0, std::min(up, down));
      fb[static_cast<std::size_t>(m) * bins + k] = w * norm;
    }
  }
  return fb;
}

FeatureMatrix log_mel(const AudioSegment& audio, const FeatureConfig& cfg) {
  cfg.validate();
  if (audio.sample_rate != cfg.sample_rate) {
    throw ConfigError("log_mel: audio sample rate " + std::to_string(audio.sample_rate) +
                      " Hz does not match feature config " + std::to_string(cfg.sample_rate) +
                      " Hz; resample first");
  }
  const std::size_t win = cfg.win_samples(), hop = cfg.hop_samples();
  const std::size_t frames = frame_count(audio.samples.size(), cfg);
  if (frames == 0) {
    throw TooShortError("log_mel: " + std::to_string(audio.samples.size()) +
                        " samples is shorter than one window of " + std::to_string(win));
  }
  const int nfft = cfg.fft_size;
  const int bins = nfft / 2 + 1;
  const std::size_t M = static_cast<std::size_t>(cfg.n_mels);

  std::vector<double> window(win);
  for (std::size_t i = 0; i < win; ++i) {
    window[i] = win == 1 ? 1.0 : 0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * i / (win - 1));
  }
  const auto fb = mel_filterbank(cfg);

  fftw_plan plan = plan_cache().get(nfft);
  std::unique_ptr<double, FftwFree> in(fftw_alloc_real(nfft));
  std::unique_ptr<fftw_complex, FftwFree> spec(fftw_alloc_complex(bins));
  using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  RowMat power(frames, bins);
  for (std::size_t f = 0; f < frames; ++f) {
    const double* src = audio.samples.data() + f * hop;
    for (std::size_t i = 0; i < win; ++i) in.get()[i] = src[i] * window[i];
    for (int i = static_cast<int>(win); i < nfft; ++i) in.get()[i] = 0.0;
    fftw_execute_dft_r2c(plan, in.get(), spec.get());
    for (int k = 0; k < bins; ++k) {
      power(static_cast<Eigen::Index>(f), k) = spec.get()[k][0] * spec.get()[k][0] + spec.get()[k][1] * spec.get()[k][1];
    }
  }
  std::vector<double> out(M * frames);
  Eigen::Map<RowMat> energy(out.data(), static_cast<Eigen::Index>(M), static_cast<Eigen::Index>(frames));
  energy.noalias() = Eigen::Map<const RowMat>(fb.data(), static_cast<Eigen::Index>(M), bins) * power.transpose();
  for (auto& e : out) e = std::log(e + cfg.log_floor);

  if (cfg.normalize == FeatureNormalization::PerFeature) {
    for (std::size_t m = 0; m < M; ++m) {
      double* row = out.data() + m * frames;
      double mean = 0.0;
      for (std::size_t f = 0; f < frames; ++f) mean += row[f];
      mean /= static_cast<double>(frames);
      double var = 0.0;
      for (std::size_t f = 0; f < frames; ++f) var += (row[f] - mean) * (row[f] - mean);
      const double denom = std::sqrt(var / static_cast<double>(frames)) + kNormEps;
      for (std::size_t f = 0; f < frames; ++f) row[f] = (row[f] - mean) / denom;
    }
  }

  return FeatureMatrix{Tensor({M, frames}, std::move(out)), frames, cfg.hash()};
}

FeatureMatrix spec_augment(const FeatureMatrix& features, const SpecAugmentConfig& cfg, std::uint64_t seed) {
  const std::size_t M = features.mels.dim(0), T = features.mels.dim(1);
  std::vector<double> data(features.mels.data().begin(), features.mels.data().end());
  Rng rng(seed);
  const auto fmax = static_cast<std::int64_t>(std::min<std::size_t>(std::max(cfg.freq_width_max, 0), M));
  for (int i = 0; i < cfg.n_freq_masks; ++i) {
    const auto width = rng.integer(0, fmax);
    const auto start = rng.integer(0, static_cast<std::int64_t>(M) - width);
    for (auto m = start; m < start + width; ++m) {
      std::fill_n(data.begin() + static_cast<std::ptrdiff_t>(m * T), T, 0.0);
    }
  }
  const auto tmax = static_cast<std::int64_t>(std::floor(cfg.time_width_max_fraction * static_cast<double>(T)));
  for (int i = 0; i < cfg.n_time_masks; ++i) {
    const auto width = rng.integer(0, std::max<std::int64_t>(0, tmax));
    const auto start = rng.integer(0, static_cast<std::int64_t>(T) - width);
    for (std::size_t m = 0; m < M; ++m) {
      std::fill_n(data.begin() + static_cast<std::ptrdiff_t>(m * T + start), width, 0.0);
    }
  }
  return FeatureMatrix{Tensor({M, T}, std::move(data)), features.num_frames, features.config_hash};
}

}  // namespace tlid

#include "tlid/audio.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <numbers>

#include "tlid/error.hpp"

namespace tlid {

namespace {

constexpr std::uint16_t kFormatPcm = 1;
constexpr std::uint16_t kFormatFloat = 3;
constexpr std::uint16_t kFormatExtensible = 0xFFFE;

class ByteReader {
 public:
  explicit ByteReader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

  void need(std::size_t offset, std::size_t n, const char* what) const {
    if (offset + n > bytes_.size()) throw DecodeError(std::string("truncated ") + what, offset);
  }
  std::uint16_t u16(std::size_t off) const {
    need(off, 2, "field");
    return static_cast<std::uint16_t>(bytes_[off] | (bytes_[off + 1] << 8));
  }
  std::uint32_t u32(std::size_t off) const {
    need(off, 4, "field");
    return static_cast<std::uint32_t>(bytes_[off]) | (static_cast<std::uint32_t>(bytes_[off + 1]) << 8) |
           (static_cast<std::uint32_t>(bytes_[off + 2]) << 16) |
           (static_cast<std::uint32_t>(bytes_[off + 3]) << 24);
  }
  bool tag(std::size_t off, const char* t) const {
    need(off, 4, "chunk id");
    return std::memcmp(bytes_.data() + off, t, 4) == 0;
  }
  std::size_t size() const { return bytes_.size(); }
  const std::uint8_t* at(std::size_t off) const { return bytes_.data() + off; }

 private:
  std::span<const std::uint8_t> bytes_;
};

void put_u16(std::vector<std::uint8_t>& out, std::uint16_t v) {
  out.push_back(static_cast<std::uint8_t>(v & 0xFF));
  out.push_back(static_cast<std::uint8_t>(v >> 8));
}
void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>((v >> (8 * i)) & 0xFF));
}
void put_tag(std::vector<std::uint8_t>& out, const char* t) { out.insert(out.end(), t, t + 4); }

}  // namespace

AudioSegment decode_wav(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes);
  if (bytes.size() < 12) throw DecodeError("file too small for a RIFF header", bytes.size());
  if (!r.tag(0, "RIFF")) throw DecodeError("missing RIFF magic", 0);
  if (!r.tag(8, "WAVE")) throw DecodeError("missing WAVE form type", 8);

  std::optional<std::size_t> fmt_off;
  std::uint16_t format = 0, channels = 0, bits = 0, block_align = 0;
  std::uint32_t rate = 0;
  std::size_t data_off = 0, data_len = 0;
  bool have_data = false;

  std::size_t off = 12;
  while (off + 8 <= r.size() && !have_data) {
    const std::uint32_t len = r.u32(off + 4);
    const std::size_t body = off + 8;
    if (r.tag(off, "fmt ")) {
      if (len < 16) throw DecodeError("fmt chunk shorter than 16 bytes", off + 4);
      r.need(body, len, "fmt chunk");
      fmt_off = body;
      format = r.u16(body);
      channels = r.u16(body + 2);
      rate = r.u32(body + 4);
      block_align = r.u16(body + 12);
      bits = r.u16(body + 14);
      if (format == kFormatExtensible) {
        if (len < 40) throw DecodeError("extensible fmt chunk shorter than 40 bytes", off + 4);
        format = r.u16(body + 24);  // first two bytes of the subformat GUID
      }
    } else if (r.tag(off, "data")) {
      if (!fmt_off) throw DecodeError("data chunk before fmt chunk", off);
      r.need(body, len, "data chunk");
      data_off = body;
      data_len = len;
      have_data = true;
    }
    off = body + len + (len & 1u);
  }
  if (!fmt_off) throw DecodeError("no fmt chunk", off);
  if (!have_data) throw DecodeError("no data chunk", off);

  const bool pcm16 = format == kFormatPcm && bits == 16;
  const bool f32 = format == kFormatFloat && bits == 32;
  if (!pcm16 && !f32) {
    throw DecodeError("unsupported codec (format " + std::to_string(format) + ", " +
                      std::to_string(bits) + " bits)", *fmt_off);
  }
  if (channels == 0) throw DecodeError("zero channels", *fmt_off + 2);
  if (rate == 0) throw DecodeError("zero sample rate", *fmt_off + 4);
  const std::size_t bytes_per_sample = bits / 8;
  if (block_align != channels * bytes_per_sample) throw DecodeError("inconsistent block align", *fmt_off + 12);

  const std::size_t frames = data_len / block_align;
  AudioSegment audio;
  audio.sample_rate = static_cast<int>(rate);
  audio.samples.resize(frames);
  const std::uint8_t* p = r.at(data_off);
  for (std::size_t i = 0; i < frames; ++i) {
    double acc = 0.0;
    for (std::size_t c = 0; c < channels; ++c) {
      const std::uint8_t* s = p + (i * channels + c) * bytes_per_sample;
      if (pcm16) {
        const auto v = static_cast<std::int16_t>(static_cast<std::uint16_t>(s[0] | (s[1] << 8)));
        acc += v / 32768.0;
      } else {
        float v;
        std::memcpy(&v, s, 4);
        acc += v;
      }
    }
    audio.samples[i] = acc / channels;
  }
  return audio;
}

std::vector<std::uint8_t> encode_wav_pcm16(const AudioSegment& audio) {
  const auto data_len = static_cast<std::uint32_t>(audio.samples.size() * 2);
  std::vector<std::uint8_t> out;
  out.reserve(44 + data_len);
  put_tag(out, "RIFF");
  put_u32(out, 36 + data_len);
  put_tag(out, "WAVE");
  put_tag(out, "fmt ");
  put_u32(out, 16);
  put_u16(out, kFormatPcm);
  put_u16(out, 1);
  put_u32(out, static_cast<std::uint32_t>(audio.sample_rate));
  put_u32(out, static_cast<std::uint32_t>(audio.sample_rate) * 2);
  put_u16(out, 2);
  put_u16(out, 16);
  put_tag(out, "data");
  put_u32(out, data_len);
  for (double s : audio.samples) {
    const double q = std::clamp(std::round(s * 32768.0), -32768.0, 32767.0);
    put_u16(out, static_cast<std::uint16_t>(static_cast<std::int16_t>(q)));
  }
  return out;
}

AudioSegment read_wav(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  try {
    AudioSegment a = decode_wav(bytes);
    a.source_id = path.string();
    return a;
  } catch (const DecodeError& e) {
    throw DecodeError(path.string() + ": " + e.what(), e.offset());
  }
}

void write_wav(const std::filesystem::path& path, const AudioSegment& audio) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  const auto bytes = encode_wav_pcm16(audio);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error("write failed for " + path.string());
}

namespace {

constexpr int kZeroCrossings = 16;
constexpr int kTableResolution = 512;
constexpr double kKaiserBeta = 8.6;
constexpr double kRolloff = 0.96;

// sinc(u) * kaiser(u / Z) sampled on u in [0, Z].
const std::vector<double>& windowed_sinc_table() {
  static const std::vector<double> table = [] {
    std::vector<double> t(kZeroCrossings * kTableResolution + 2, 0.0);
    const double denom = std::cyl_bessel_i(0.0, kKaiserBeta);
    for (std::size_t i = 0; i + 1 < t.size(); ++i) {
      const double u = static_cast<double>(i) / kTableResolution;
      const double r = u / kZeroCrossings;
      const double win = r >= 1.0 ? 0.0 : std::cyl_bessel_i(0.0, kKaiserBeta * std::sqrt(1.0 - r * r)) / denom;
      const double sinc = u == 0.0 ? 1.0 : std::sin(std::numbers::pi * u) / (std::numbers::pi * u);
      t[i] = sinc * win;
    }
    return t;
  }();
  return table;
}

}  // namespace

namespace {

double sinc_weight(double distance, double cutoff) {
  const auto& table = windowed_sinc_table();
  const double u = std::abs(distance) * cutoff * kTableResolution;
  const auto i = static_cast<std::size_t>(u);
  if (i + 1 >= table.size()) return 0.0;
  const double frac = u - static_cast<double>(i);
  return table[i] + frac * (table[i + 1] - table[i]);
}

// Smallest P <= 4096 with step * P integral, or 0.
std::size_t phase_period(double step) {
  for (std::size_t p = 1; p <= 4096; ++p) {
    const double v = step * static_cast<double>(p);
    if (std::abs(v - std::round(v)) < 1e-9 * v) return p;
  }
  return 0;
}

}  // namespace

std::vector<double> resample_positions(std::span<const double> input, double step, std::size_t out_len) {
  if (step <= 0.0) throw ContractError("resample: step must be positive");
  const double cutoff = kRolloff * std::min(1.0, 1.0 / step);
  const double reach = kZeroCrossings / cutoff;
  const auto n = static_cast<std::ptrdiff_t>(input.size());
  std::vector<double> out(out_len, 0.0);

  const std::size_t period = phase_period(step);
  if (period > 0 && period < out_len) {
    // Rational step: the kernel only depends on m mod period.
    const auto stride = static_cast<std::ptrdiff_t>(std::llround(step * static_cast<double>(period)));
    const auto jlo = -static_cast<std::ptrdiff_t>(std::ceil(reach));
    const auto taps = static_cast<std::size_t>(2 * std::ceil(reach) + 2);
    std::vector<double> kernels(period * taps);
    std::vector<std::ptrdiff_t> bases(period);
    for (std::size_t r = 0; r < period; ++r) {
      const double pos = static_cast<double>(r) * step;
      bases[r] = static_cast<std::ptrdiff_t>(std::floor(pos));
      for (std::size_t j = 0; j < taps; ++j) {
        const double d = pos - static_cast<double>(bases[r] + jlo + static_cast<std::ptrdiff_t>(j));
        kernels[r * taps + j] = std::abs(d) <= reach ? sinc_weight(d, cutoff) * cutoff : 0.0;
      }
    }
    for (std::size_t m = 0; m < out_len; ++m) {
      const std::size_t r = m % period;
      const std::ptrdiff_t k0 = static_cast<std::ptrdiff_t>(m / period) * stride + bases[r] + jlo;
      const double* w = kernels.data() + r * taps;
      const std::ptrdiff_t lo = std::max<std::ptrdiff_t>(0, k0), hi = std::min<std::ptrdiff_t>(n, k0 + taps);
      double acc = 0.0;
      for (auto k = lo; k < hi; ++k) acc += input[static_cast<std::size_t>(k)] * w[k - k0];
      out[m] = acc;
    }
    return out;
  }

  for (std::size_t m = 0; m < out_len; ++m) {
    const double pos = static_cast<double>(m) * step;
    const auto lo = std::max<std::ptrdiff_t>(0, static_cast<std::ptrdiff_t>(std::ceil(pos - reach)));
    const auto hi = std::min<std::ptrdiff_t>(n - 1, static_cast<std::ptrdiff_t>(std::floor(pos + reach)));
    double acc = 0.0;
    for (auto k = lo; k <= hi; ++k) acc += input[static_cast<std::size_t>(k)] * sinc_weight(pos - static_cast<double>(k), cutoff);
    out[m] = acc * cutoff;
  }
  return out;
}

AudioSegment resample(const AudioSegment& audio, int target_rate) {
  if (target_rate <= 0) throw ContractError("resample: target rate must be positive");
  if (audio.sample_rate == target_rate) return audio;
  AudioSegment out = audio;
  const double step = static_cast<double>(audio.sample_rate) / target_rate;
  const auto len = static_cast<std::size_t>(
      std::llround(static_cast<double>(audio.samples.size()) * target_rate / audio.sample_rate));
  out.samples = resample_positions(audio.samples, step, len);
  out.sample_rate = target_rate;
  return out;
}

AudioSegment speed_perturb(const AudioSegment& audio, double factor) {
  if (factor <= 0.0) throw ContractError("speed_perturb: factor must be positive");
  if (factor == 1.0) return audio;
  AudioSegment out = audio;
  const auto len = static_cast<std::size_t>(std::llround(static_cast<double>(audio.samples.size()) / factor));
  out.samples = resample_positions(audio.samples, factor, len);
  return out;
}

}  // namespace tlid

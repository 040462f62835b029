#include "tstrm/frontend.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace tstrm {

namespace {

constexpr double kPi = 3.14159265358979323846;

double hz_to_mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }
double mel_to_hz(double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); }

long next_pow2(long n) {
  long p = 1;
  while (p < n) p <<= 1;
  return p;
}

}  // namespace

void fft_radix2(std::vector<double>& re, std::vector<double>& im) {
  size_t n = re.size();
  if (n == 0 || (n & (n - 1)) != 0 || im.size() != n)
    throw std::invalid_argument("fft_radix2: size must be a power of two");
  // Bit-reversal permutation.
  for (size_t i = 1, j = 0; i < n; ++i) {
    size_t bit = n >> 1;
    for (; j & bit; bit >>= 1) j ^= bit;
    j ^= bit;
    if (i < j) {
      std::swap(re[i], re[j]);
      std::swap(im[i], im[j]);
    }
  }
  for (size_t len = 2; len <= n; len <<= 1) {
    double ang = -2.0 * kPi / static_cast<double>(len);
    double wr = std::cos(ang), wi = std::sin(ang);
    for (size_t i = 0; i < n; i += len) {
      double cr = 1.0, ci = 0.0;
      for (size_t k = 0; k < len / 2; ++k) {
        size_t a = i + k, b = i + k + len / 2;
        double tr = re[b] * cr - im[b] * ci;
        double ti = re[b] * ci + im[b] * cr;
        re[b] = re[a] - tr;
        im[b] = im[a] - ti;
        re[a] += tr;
        im[a] += ti;
        double ncr = cr * wr - ci * wi;
        ci = cr * wi + ci * wr;
        cr = ncr;
      }
    }
  }
}

Waveform read_wav(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("read_wav: cannot open " + path);
  auto read_u32 = [&]() {
    std::uint8_t b[4];
    f.read(reinterpret_cast<char*>(b), 4);
    return static_cast<std::uint32_t>(b[0]) | (b[1] << 8) | (b[2] << 16) |
           (static_cast<std::uint32_t>(b[3]) << 24);
  };
  auto read_u16 = [&]() {
    std::uint8_t b[2];
    f.read(reinterpret_cast<char*>(b), 2);
    return static_cast<std::uint16_t>(b[0] | (b[1] << 8));
  };
  char tag[5] = {0};
  f.read(tag, 4);
  if (std::strncmp(tag, "RIFF", 4) != 0) throw std::runtime_error("read_wav: not a RIFF file");
  read_u32();  // chunk size
  f.read(tag, 4);
  if (std::strncmp(tag, "WAVE", 4) != 0) throw std::runtime_error("read_wav: not a WAVE file");

  Waveform w;
  int channels = 0, bits = 0;
  bool got_fmt = false;
  while (f.read(tag, 4)) {
    std::uint32_t sz = read_u32();
    if (std::strncmp(tag, "fmt ", 4) == 0) {
      std::uint16_t fmt = read_u16();
      channels = read_u16();
      w.sample_rate_hz = static_cast<int>(read_u32());
      read_u32();  // byte rate
      read_u16();  // block align
      bits = read_u16();
      if (fmt != 1 || channels != 1 || bits != 16)
        throw std::runtime_error("read_wav: expected mono 16-bit PCM");
      if (sz > 16) f.seekg(sz - 16, std::ios::cur);
      got_fmt = true;
    } else if (std::strncmp(tag, "data", 4) == 0) {
      if (!got_fmt) throw std::runtime_error("read_wav: data before fmt chunk");
      size_t nsamp = sz / 2;
      w.samples.resize(nsamp);
      for (size_t i = 0; i < nsamp; ++i) {
        std::uint8_t b[2];
        f.read(reinterpret_cast<char*>(b), 2);
        auto v = static_cast<std::int16_t>(b[0] | (b[1] << 8));
        w.samples[i] = static_cast<double>(v) / 32768.0;
      }
      return w;
    } else {
      f.seekg(sz + (sz & 1), std::ios::cur);
    }
  }
  throw std::runtime_error("read_wav: no data chunk in " + path);
}

std::vector<double> compute_deltas(const std::vector<double>& x, long frames, long dims,
                                   int width) {
  std::vector<double> d(x.size(), 0.0);
  double denom = 0.0;
  for (int n = 1; n <= width; ++n) denom += 2.0 * n * n;
  auto clampf = [frames](long t) { return std::clamp(t, 0L, frames - 1); };
  for (long t = 0; t < frames; ++t)
    for (long j = 0; j < dims; ++j) {
      double acc = 0.0;
      for (int n = 1; n <= width; ++n)
        acc += n * (x[static_cast<size_t>(clampf(t + n) * dims + j)] -
                    x[static_cast<size_t>(clampf(t - n) * dims + j)]);
      d[static_cast<size_t>(t * dims + j)] = acc / denom;
    }
  return d;
}

Spectrogram stft_logmel(const Waveform& w, const FrontendConfig& cfg) {
  long win = static_cast<long>(std::lround(cfg.window_ms * w.sample_rate_hz / 1000.0));
  long shift = static_cast<long>(std::lround(cfg.shift_ms * w.sample_rate_hz / 1000.0));
  long n_samples = static_cast<long>(w.samples.size());
  if (n_samples < win)
    throw std::invalid_argument("stft_logmel: waveform of " + std::to_string(n_samples) +
                                " samples is shorter than one " + std::to_string(win) +
                                "-sample window");
  long frames = 1 + (n_samples - win) / shift;
  long nfft = next_pow2(win);
  long nbins = nfft / 2 + 1;

  // Symmetric Hann window.
  std::vector<double> hann(static_cast<size_t>(win));
  for (long i = 0; i < win; ++i)
    hann[static_cast<size_t>(i)] = 0.5 - 0.5 * std::cos(2.0 * kPi * i / (win - 1));

  // Triangular mel filterbank over [0, sr/2].
  long n_mels = cfg.n_mels;
  std::vector<double> centers(static_cast<size_t>(n_mels) + 2);
  double mel_max = hz_to_mel(w.sample_rate_hz / 2.0);
  for (long m = 0; m < n_mels + 2; ++m)
    centers[static_cast<size_t>(m)] = mel_to_hz(mel_max * m / (n_mels + 1));
  auto bin_hz = [&](long k) { return static_cast<double>(k) * w.sample_rate_hz / nfft; };

  long static_dims = n_mels + cfg.n_pitch;
  std::vector<double> feat(static_cast<size_t>(frames * static_dims));
  std::vector<double> re(static_cast<size_t>(nfft)), im(static_cast<size_t>(nfft));
  for (long t = 0; t < frames; ++t) {
    std::fill(re.begin(), re.end(), 0.0);
    std::fill(im.begin(), im.end(), 0.0);
    double energy = 0.0;
    for (long i = 0; i < win; ++i) {
      double s = w.samples[static_cast<size_t>(t * shift + i)];
      re[static_cast<size_t>(i)] = s * hann[static_cast<size_t>(i)];
      energy += s * s;
    }
    fft_radix2(re, im);
    for (long m = 0; m < n_mels; ++m) {
      double lo = centers[static_cast<size_t>(m)];
      double mid = centers[static_cast<size_t>(m) + 1];
      double hi = centers[static_cast<size_t>(m) + 2];
      double acc = 0.0;
      for (long k = 0; k < nbins; ++k) {
        double hz = bin_hz(k);
        double wgt = 0.0;
        if (hz > lo && hz < mid) wgt = (hz - lo) / (mid - lo);
        else if (hz >= mid && hz < hi) wgt = (hi - hz) / (hi - mid);
        if (wgt > 0.0) {
          double p = re[static_cast<size_t>(k)] * re[static_cast<size_t>(k)] +
                     im[static_cast<size_t>(k)] * im[static_cast<size_t>(k)];
          acc += wgt * p;
        }
      }
      feat[static_cast<size_t>(t * static_dims + m)] = std::log(std::max(acc, kMelFloor));
    }
    // Pitch placeholder: [log-energy, 0, 0]. Real pitch tracking is out of
    // scope; the column layout of the recipe is preserved.
    if (cfg.n_pitch > 0)
      feat[static_cast<size_t>(t * static_dims + n_mels)] = std::log(std::max(energy, kMelFloor));
    for (int p = 1; p < cfg.n_pitch; ++p)
      feat[static_cast<size_t>(t * static_dims + n_mels + p)] = 0.0;
  }

  Spectrogram out;
  out.frames = frames;
  out.frame_shift_ms = cfg.shift_ms;
  out.resolution = ResolutionTag::high;
  if (cfg.use_deltas) {
    std::vector<double> d1 = compute_deltas(feat, frames, static_dims);
    std::vector<double> d2 = compute_deltas(d1, frames, static_dims);
    out.dims = 3 * static_dims;
    out.values.resize(static_cast<size_t>(frames * out.dims));
    for (long t = 0; t < frames; ++t) {
      std::copy_n(feat.begin() + t * static_dims, static_dims,
                  out.values.begin() + t * out.dims);
      std::copy_n(d1.begin() + t * static_dims, static_dims,
                  out.values.begin() + t * out.dims + static_dims);
      std::copy_n(d2.begin() + t * static_dims, static_dims,
                  out.values.begin() + t * out.dims + 2 * static_dims);
    }
  } else {
    out.dims = static_dims;
    out.values = std::move(feat);
  }
  return out;
}

Spectrogram downsample_time(const Spectrogram& s, int ratio) {
  if (ratio < 1) throw std::invalid_argument("downsample_time: ratio must be >= 1");
  Spectrogram out;
  out.dims = s.dims;
  out.frames = (s.frames + ratio - 1) / ratio;
  out.frame_shift_ms = s.frame_shift_ms * ratio;
  out.resolution = ResolutionTag::low;
  out.values.assign(static_cast<size_t>(out.frames * out.dims), 0.0);
  for (long tp = 0; tp < out.frames; ++tp) {
    long begin = tp * ratio;
    long end = std::min(begin + ratio, s.frames);
    double inv = 1.0 / static_cast<double>(end - begin);
    for (long t = begin; t < end; ++t)
      for (long j = 0; j < s.dims; ++j) out.at(tp, j) += s.at(t, j) * inv;
  }
  return out;
}

}  // namespace tstrm

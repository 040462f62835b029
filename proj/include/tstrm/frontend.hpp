#pragma once

#include <string>
#include <vector>

namespace tstrm {

struct Waveform {
  std::vector<double> samples;  // in [-1,1]
  int sample_rate_hz = 16000;
};

enum class ResolutionTag { high, low };

// Plain time x feature matrix; enters the autodiff world only when a stream
// consumes it.
struct Spectrogram {
  long frames = 0;
  long dims = 0;
  std::vector<double> values;  // row-major frames x dims
  double frame_shift_ms = 10.0;
  ResolutionTag resolution = ResolutionTag::high;

  double& at(long t, long d) { return values[static_cast<size_t>(t * dims + d)]; }
  double at(long t, long d) const { return values[static_cast<size_t>(t * dims + d)]; }
};

struct FrontendConfig {
  int n_mels = 40;
  double window_ms = 25.0;
  double shift_ms = 10.0;
  int n_pitch = 3;
  bool use_deltas = true;
  int resolution_ratio = 4;
};

// Log-mel energy floor applied before the natural log.
inline constexpr double kMelFloor = 1e-10;

// In-place radix-2 FFT; size must be a power of two.
void fft_radix2(std::vector<double>& re, std::vector<double>& im);

// Reads a mono 16-bit PCM WAV file.
Waveform read_wav(const std::string& path);

// High-resolution spectrogram: Hann-windowed log-mel energies plus the pitch
// placeholder columns, deltas appended when enabled.
// D = n_mels + n_pitch, tripled when use_deltas.
Spectrogram stft_logmel(const Waveform& w, const FrontendConfig& cfg);

// Regression deltas with replicated edge frames.
std::vector<double> compute_deltas(const std::vector<double>& x, long frames, long dims,
                                   int width = 2);

// Non-overlapping mean pooling along time; the final partial window averages
// over its actual length. frames' = ceil(frames / ratio).
Spectrogram downsample_time(const Spectrogram& s, int ratio);

}  // namespace tstrm

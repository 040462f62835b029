#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "tstrm/data.hpp"
#include "tstrm/frontend.hpp"
#include "tstrm/rng.hpp"

namespace tstrm {

struct SynthSpec {
  long n_speakers = 8;
  long n_tokens = 16;
  long utterances_per_speaker = 40;
  long min_transcript_len = 2;
  long max_transcript_len = 8;
  long min_frames_per_token = 8;
  long max_frames_per_token = 16;
  double speaker_tilt_scale = 1.0;
  double noise_sigma = 0.1;
  int n_mels = 40;
  int n_pitch = 3;
  bool use_deltas = true;
  std::uint64_t seed = 7;

  static SynthSpec from_config(const Config& cfg);
  void validate() const;  // throws DataError
};

struct SynthResult {
  std::string manifest_all;    // every utterance
  std::string manifest_train;  // 4-of-5 split per speaker
  std::string manifest_dev;    // remaining 1-of-5
  long n_utterances = 0;
};

// Each token k renders as a Gaussian spectral bump centered at mel bin
// floor(k * n_mels / n_tokens). Speaker identity is a broadband rhythm
// signature (a +/- energy lane whose cyclic short/long-interval pattern is
// fixed per speaker, phase randomized per utterance); each utterance also
// gets a random channel tilt and gain, and Gaussian noise on top. All voice
// and channel effects scale with speaker_tilt_scale (0 = identical
// renditions). Deterministic given spec.seed. Refuses to overwrite an
// existing corpus unless force is set.
SynthResult synth_corpus(const SynthSpec& spec, const std::string& out_dir, bool force);

// Pitch placeholder + delta expansion shared with the WAV frontend layout:
// (frames, n_mels) log-mel -> (frames, 3*(n_mels+n_pitch)) when use_deltas.
Spectrogram finalize_features(const std::vector<double>& mel, long frames, int n_mels, int n_pitch,
                              bool use_deltas);

}  // namespace tstrm

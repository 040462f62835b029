#include "tstrm/synth.hpp"

#include <cmath>
#include <filesystem>

namespace tstrm {
namespace {

constexpr double kBumpAmplitude = 4.0;
constexpr double kBumpWidthBins = 1.5;
// Per-utterance broadband gain (recording-channel effect, not speaker
// identity), scaled by speaker_tilt_scale.
constexpr double kEnergyOffsetScale = 0.2;

// Speaker identity is a rhythm signature: a broadband +/- energy lane that
// alternates level after each interval, where the cyclic order of short and
// long intervals is fixed per speaker. Every necklace below has the same
// composition (4 short + 4 long per cycle), so the value distribution, the
// switch rate, and the interval-duration marginals are identical across
// speakers; only the long-range arrangement differs. A 3-layer stream with a
// ~15-frame receptive field cannot span two intervals and is blind to it,
// while the deep stream's receptive field covers full cycles.
constexpr const char* kRhythmNecklaces[8] = {"SSSSLLLL", "SLSLSLSL", "SSLLSSLL", "SSSLLSLL",
                                             "SSSLSLLL", "SSLSLLSL", "SSSLLLSL", "SSLSSLLL"};
constexpr long kShortInterval = 20;
constexpr long kLongInterval = 40;
constexpr double kRhythmAmplitude = 1.5;  // per unit of speaker_tilt_scale
// Per-utterance spectral tilt (channel response), per unit of tilt scale.
constexpr double kChannelTiltScale = 0.25;

// +/-1 rhythm lane for one utterance: cyclic necklace pattern with a random
// rotation and phase offset, long enough to cover `frames`.
std::vector<double> rhythm_lane(const std::string& necklace, long frames, Rng& rng) {
  long cycle = 0;
  for (char c : necklace) cycle += (c == 'S') ? kShortInterval : kLongInterval;
  long rot = static_cast<long>(rng.next_below(static_cast<std::uint64_t>(necklace.size())));
  long phase = static_cast<long>(rng.next_below(static_cast<std::uint64_t>(cycle)));
  std::vector<double> lane;
  lane.reserve(static_cast<size_t>(frames + phase + cycle));
  double level = 1.0;
  while (static_cast<long>(lane.size()) < frames + phase) {
    for (size_t i = 0; i < necklace.size(); ++i) {
      char c = necklace[(i + static_cast<size_t>(rot)) % necklace.size()];
      long len = (c == 'S') ? kShortInterval : kLongInterval;
      for (long j = 0; j < len; ++j) lane.push_back(level);
      level = -level;
    }
  }
  lane.erase(lane.begin(), lane.begin() + phase);
  lane.resize(static_cast<size_t>(frames));
  return lane;
}

}  // namespace

SynthSpec SynthSpec::from_config(const Config& cfg) {
  SynthSpec s;
  s.n_speakers = cfg.get_long("synth.n_speakers", s.n_speakers);
  s.n_tokens = cfg.get_long("synth.n_tokens", s.n_tokens);
  s.utterances_per_speaker = cfg.get_long("synth.utterances_per_speaker", s.utterances_per_speaker);
  s.min_transcript_len = cfg.get_long("synth.min_transcript_len", s.min_transcript_len);
  s.max_transcript_len = cfg.get_long("synth.max_transcript_len", s.max_transcript_len);
  s.min_frames_per_token = cfg.get_long("synth.min_frames_per_token", s.min_frames_per_token);
  s.max_frames_per_token = cfg.get_long("synth.max_frames_per_token", s.max_frames_per_token);
  s.speaker_tilt_scale = cfg.get_double("synth.speaker_tilt_scale", s.speaker_tilt_scale);
  s.noise_sigma = cfg.get_double("synth.noise_sigma", s.noise_sigma);
  s.n_mels = static_cast<int>(cfg.get_long("frontend.n_mels", s.n_mels));
  s.n_pitch = static_cast<int>(cfg.get_long("frontend.n_pitch", s.n_pitch));
  s.use_deltas = cfg.get_bool("frontend.use_deltas", s.use_deltas);
  s.seed = static_cast<std::uint64_t>(cfg.get_long("synth.seed", static_cast<long>(s.seed)));
  return s;
}

void SynthSpec::validate() const {
  if (n_speakers < 1 || n_tokens < 1 || utterances_per_speaker < 1)
    throw DataError("synth spec: counts must be positive");
  if (min_transcript_len < 1 || min_transcript_len > max_transcript_len)
    throw DataError("synth spec: need 1 <= min_transcript_len <= max_transcript_len");
  if (min_frames_per_token < 1 || min_frames_per_token > max_frames_per_token)
    throw DataError("synth spec: need 1 <= min_frames_per_token <= max_frames_per_token");
  if (speaker_tilt_scale < 0 || noise_sigma < 0)
    throw DataError("synth spec: tilt scale and noise sigma must be non-negative");
  if (n_mels < 1) throw DataError("synth spec: n_mels must be positive");
}

Spectrogram finalize_features(const std::vector<double>& mel, long frames, int n_mels, int n_pitch,
                              bool use_deltas) {
  long static_dims = n_mels + n_pitch;
  std::vector<double> feat(static_cast<size_t>(frames * static_dims), 0.0);
  for (long t = 0; t < frames; ++t) {
    double energy = 0.0;
    for (int b = 0; b < n_mels; ++b) {
      double v = mel[static_cast<size_t>(t * n_mels + b)];
      feat[static_cast<size_t>(t * static_dims + b)] = v;
      energy += std::exp(v);
    }
    // Pitch placeholder [log-energy, 0, 0], matching the WAV frontend layout.
    if (n_pitch > 0)
      feat[static_cast<size_t>(t * static_dims + n_mels)] = std::log(std::max(energy, kMelFloor));
  }
  Spectrogram s;
  s.frames = frames;
  s.resolution = ResolutionTag::high;
  if (use_deltas) {
    std::vector<double> d1 = compute_deltas(feat, frames, static_dims);
    std::vector<double> d2 = compute_deltas(d1, frames, static_dims);
    s.dims = 3 * static_dims;
    s.values.resize(static_cast<size_t>(frames * s.dims));
    for (long t = 0; t < frames; ++t)
      for (long c = 0; c < static_dims; ++c) {
        s.values[static_cast<size_t>(t * s.dims + c)] = feat[static_cast<size_t>(t * static_dims + c)];
        s.values[static_cast<size_t>(t * s.dims + static_dims + c)] =
            d1[static_cast<size_t>(t * static_dims + c)];
        s.values[static_cast<size_t>(t * s.dims + 2 * static_dims + c)] =
            d2[static_cast<size_t>(t * static_dims + c)];
      }
  } else {
    s.dims = static_dims;
    s.values = feat;
  }
  return s;
}

SynthResult synth_corpus(const SynthSpec& spec, const std::string& out_dir, bool force) {
  spec.validate();
  namespace fs = std::filesystem;
  fs::path root(out_dir);
  fs::path manifest_all = root / "manifest.tsv";
  if (fs::exists(manifest_all) && !force)
    throw DataError("synth_corpus: " + manifest_all.string() +
                    " already exists; pass --force to overwrite");
  fs::create_directories(root / "features");

  Rng rng(spec.seed);

  std::vector<Utterance> all, train, dev;
  for (long s = 0; s < spec.n_speakers; ++s) {
    for (long u = 0; u < spec.utterances_per_speaker; ++u) {
      Utterance utt;
      utt.id = "spk" + std::to_string(s) + "_utt" + std::to_string(u);
      utt.path = "features/" + utt.id + ".tstf";
      utt.speaker_id = s;
      utt.gender = s % 2;

      long len = spec.min_transcript_len +
                 static_cast<long>(rng.next_below(
                     static_cast<std::uint64_t>(spec.max_transcript_len - spec.min_transcript_len + 1)));
      std::vector<long> durations;
      long frames = 0;
      for (long i = 0; i < len; ++i) {
        utt.transcript.push_back(static_cast<long>(rng.next_below(static_cast<std::uint64_t>(spec.n_tokens))));
        long d = spec.min_frames_per_token +
                 static_cast<long>(rng.next_below(static_cast<std::uint64_t>(
                     spec.max_frames_per_token - spec.min_frames_per_token + 1)));
        durations.push_back(d);
        frames += d;
      }

      std::vector<double> mel(static_cast<size_t>(frames * spec.n_mels), 0.0);
      long t0 = 0;
      for (long i = 0; i < len; ++i) {
        long bin = utt.transcript[static_cast<size_t>(i)] * spec.n_mels / spec.n_tokens;
        for (long t = t0; t < t0 + durations[static_cast<size_t>(i)]; ++t)
          for (int b = 0; b < spec.n_mels; ++b) {
            double d = (b - bin) / kBumpWidthBins;
            mel[static_cast<size_t>(t * spec.n_mels + b)] += kBumpAmplitude * std::exp(-0.5 * d * d);
          }
        t0 += durations[static_cast<size_t>(i)];
      }
      // Speaker rhythm signature, phase randomized per utterance.
      std::vector<double> lane =
          rhythm_lane(kRhythmNecklaces[s % 8], frames, rng);
      double rhythm_amp = kRhythmAmplitude * spec.speaker_tilt_scale;
      // Per-utterance channel effects (not speaker identity): a zero-mean
      // per-bin tilt and a broadband gain, both scaled by the tilt scale so
      // tilt_scale = 0 makes all renditions of a transcript identical.
      std::vector<double> ch_tilt(static_cast<size_t>(spec.n_mels), 0.0);
      double tmean = 0.0;
      for (auto& v : ch_tilt) {
        v = kChannelTiltScale * spec.speaker_tilt_scale * rng.normal();
        tmean += v;
      }
      tmean /= static_cast<double>(spec.n_mels);
      for (auto& v : ch_tilt) v -= tmean;
      double gain = kEnergyOffsetScale * spec.speaker_tilt_scale * rng.normal();
      for (long t = 0; t < frames; ++t)
        for (int b = 0; b < spec.n_mels; ++b) {
          double& v = mel[static_cast<size_t>(t * spec.n_mels + b)];
          v += rhythm_amp * lane[static_cast<size_t>(t)] + ch_tilt[static_cast<size_t>(b)] + gain;
          if (spec.noise_sigma > 0) v += spec.noise_sigma * rng.normal();
        }

      Spectrogram sp = finalize_features(mel, frames, spec.n_mels, spec.n_pitch, spec.use_deltas);
      write_tstf((root / utt.path).string(), {sp.frames, sp.dims}, sp.values);

      all.push_back(utt);
      // Every 5th utterance per speaker goes to dev; speakers with fewer
      // than 5 utterances still contribute their last one.
      bool to_dev = (u % 5 == 4) ||
                    (spec.utterances_per_speaker < 5 && u == spec.utterances_per_speaker - 1 &&
                     spec.utterances_per_speaker > 1);
      if (to_dev) dev.push_back(utt);
      else train.push_back(utt);
    }
  }

  SynthResult res;
  res.manifest_all = manifest_all.string();
  res.manifest_train = (root / "train.tsv").string();
  res.manifest_dev = (root / "dev.tsv").string();
  res.n_utterances = static_cast<long>(all.size());
  write_manifest(res.manifest_all, all);
  write_manifest(res.manifest_train, train);
  write_manifest(res.manifest_dev, dev);
  return res;
}

}  // namespace tstrm

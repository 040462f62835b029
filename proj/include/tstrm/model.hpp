#pragma once

#include <string>
#include <vector>

#include "tstrm/backbone.hpp"
#include "tstrm/data.hpp"
#include "tstrm/decode.hpp"
#include "tstrm/frontend.hpp"
#include "tstrm/fusion.hpp"
#include "tstrm/loss.hpp"
#include "tstrm/transformer.hpp"

namespace tstrm {

enum class StreamMode { both, shallow_only, deep_only };

StreamMode parse_stream_mode(const std::string& s);
FusionKind parse_fusion_kind(const std::string& s);
std::string to_string(StreamMode m);
std::string to_string(FusionKind k);

struct ModelConfig {
  StreamConfig stream;
  FusionKind fusion = FusionKind::fcf;
  StreamMode mode = StreamMode::both;
  TransformerConfig transformer;
  long n_tokens = 16;   // transcript vocabulary V
  double lambda = 0.3;  // CTC weight in the joint loss
  double label_smoothing = 0.1;
  int resolution_ratio = 4;
  long feature_dims = 129;  // D of the high-resolution features

  static ModelConfig from_config(const Config& cfg);
  Vocabulary vocab() const { return Vocabulary{n_tokens}; }
};

// Output grid (c,t,f) of a stream applied to a [1,t,f] input.
void stream_out_extents(const Stream& s, long t_in, long f_in, long& t_out, long& f_out);

struct EncodedUtterance {
  Tensor memory;        // [t, d_m]
  Tensor ctc_logprobs;  // [t, V+1]
  Tensor shallow_fm;    // stream output [c,ts,fs] (pre-fusion, for embeddings)
  Tensor deep_fm;       // stream output [c,td,fd]
};

struct Model {
  ModelConfig cfg;
  Stream deep, shallow;
  FusionParams fusion;
  Linear in_proj;  // (fused channels * freq) -> d_m
  Encoder encoder;
  Decoder decoder;
  Linear ctc_head;  // d_m -> V+1
  long enc_in_dim = 0;

  static Model make(const ModelConfig& cfg, Rng& rng);

  // Streams + fusion + projection + PE + encoder + CTC head for a batch of
  // high-resolution spectrograms. Train mode uses BatchNorm batch statistics
  // (batch size >= 2) and dropout; eval mode is deterministic.
  std::vector<EncodedUtterance> encode(const std::vector<Spectrogram>& batch, bool train,
                                       Rng& rng);

  // Mean joint loss over the batch. Call backward() on the returned tensor.
  Tensor batch_loss(const std::vector<Spectrogram>& batch,
                    const std::vector<std::vector<long>>& transcripts, bool train, Rng& rng,
                    LossBreakdown& breakdown);

  void collect(ParamMap& params, BufferMap& buffers);
  long param_count();
};

// Reads one utterance's TSTF features as a high-resolution spectrogram.
Spectrogram load_features(const std::string& manifest_path, const Utterance& utt);

}  // namespace tstrm

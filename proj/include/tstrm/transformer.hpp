#pragma once

#include <optional>
#include <string>
#include <vector>

#include "tstrm/backbone.hpp"
#include "tstrm/tensor.hpp"

namespace tstrm {

struct TransformerConfig {
  long n_enc_layers = 4;
  long n_dec_layers = 2;
  long n_heads = 4;
  long d_m = 256;
  long d_ff = 1024;
  double dropout_rate = 0.1;
  bool deterministic = false;  // disables dropout everywhere
};

// Learned linear map y = x W + b with x as [n, in].
struct Linear {
  Tensor weight;  // [in, out]
  Tensor bias;    // [out]

  static Linear make(long in, long out, Rng& rng);
  Tensor forward(const Tensor& x) const;
  void collect(const std::string& prefix, ParamMap& params);
};

struct LayerNorm {
  Tensor gamma, beta;  // [d]
  double eps = 1e-6;

  static LayerNorm make(long d);
  Tensor forward(const Tensor& x) const;  // normalizes the last axis
  void collect(const std::string& prefix, ParamMap& params);
};

// Sinusoidal positional encoding, PE[pos,2i]=sin(pos/10000^{2i/d}),
// PE[pos,2i+1]=cos(same argument).
Tensor positional_encoding(long t, long d_m);

// Scaled dot-product attention. mask, when present, is [tq,tk] with 1 =
// attend, 0 = blocked; a fully masked query row is a contract error.
Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v,
                 const std::optional<Tensor>& mask);

// Row-normalized attention weights (exposed for normalization tests).
Tensor attention_weights(const Tensor& q, const Tensor& k,
                         const std::optional<Tensor>& mask);

struct MultiHeadAttention {
  long n_heads = 4;
  Linear wq, wk, wv, wo;

  static MultiHeadAttention make(long d_m, long n_heads, Rng& rng);
  // q_in: [tq,d_m], kv_in: [tk,d_m]
  Tensor forward(const Tensor& q_in, const Tensor& kv_in,
                 const std::optional<Tensor>& mask) const;
  void collect(const std::string& prefix, ParamMap& params);
};

struct FeedForward {
  Linear in, out;

  static FeedForward make(long d_m, long d_ff, Rng& rng);
  Tensor forward(const Tensor& x) const;
  void collect(const std::string& prefix, ParamMap& params);
};

// Pre-norm encoder layer: x += MHA(LN(x)); x += FFN(LN(x)).
struct EncoderLayer {
  MultiHeadAttention attn;
  FeedForward ffn;
  LayerNorm ln1, ln2;

  static EncoderLayer make(const TransformerConfig& cfg, Rng& rng);
  Tensor forward(const Tensor& x, const TransformerConfig& cfg, Rng& rng) const;
  void collect(const std::string& prefix, ParamMap& params);
};

// Pre-norm decoder layer: causal self-attn, cross-attn over memory, FFN.
struct DecoderLayer {
  MultiHeadAttention self_attn, cross_attn;
  FeedForward ffn;
  LayerNorm ln1, ln2, ln3;

  static DecoderLayer make(const TransformerConfig& cfg, Rng& rng);
  Tensor forward(const Tensor& x, const Tensor& memory, const Tensor& causal_mask,
                 const TransformerConfig& cfg, Rng& rng) const;
  void collect(const std::string& prefix, ParamMap& params);
};

struct Encoder {
  std::vector<EncoderLayer> layers;
  LayerNorm final_ln;  // pre-norm stacks need a final norm before the heads

  static Encoder make(const TransformerConfig& cfg, Rng& rng);
  // x: [t,d_m] with positional encoding already added by the caller.
  Tensor forward(const Tensor& x, const TransformerConfig& cfg, Rng& rng) const;
  void collect(const std::string& prefix, ParamMap& params);
};

struct Decoder {
  Tensor token_embedding;  // [vocab_dec, d_m]
  std::vector<DecoderLayer> layers;
  LayerNorm final_ln;  // pre-norm stacks need a final norm before out_proj
  Linear out_proj;  // d_m -> vocab_dec

  static Decoder make(long vocab_dec, const TransformerConfig& cfg, Rng& rng);
  // tokens must begin with sos; returns [L, vocab_dec] logits.
  Tensor forward(const std::vector<long>& tokens, const Tensor& memory,
                 const TransformerConfig& cfg, Rng& rng) const;
  void collect(const std::string& prefix, ParamMap& params);
};

Tensor causal_mask(long t);

// Flattens a fused feature map [2c,t,f] to a [t, 2c*f] sequence and projects
// each frame to d_m.
Tensor input_projection(const Tensor& fused, const Linear& proj);

}  // namespace tstrm

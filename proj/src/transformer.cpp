#include "tstrm/transformer.hpp"

#include <cmath>

namespace tstrm {

namespace {
// Large negative logit standing in for -inf; exp underflows to exactly 0.
constexpr double kMaskValue = -1e30;

Tensor maybe_dropout(const Tensor& x, const TransformerConfig& cfg, Rng& rng) {
  return dropout(x, cfg.dropout_rate, rng, !cfg.deterministic && cfg.dropout_rate > 0.0);
}
}  // namespace

Linear Linear::make(long in, long out, Rng& rng) {
  Linear l;
  double bound = std::sqrt(6.0 / static_cast<double>(in));
  l.weight = Tensor::zeros({in, out});
  for (long i = 0; i < l.weight.size(); ++i) l.weight.data()[i] = rng.uniform(-bound, bound);
  l.weight.set_requires_grad(true);
  l.bias = Tensor::zeros({out}).set_requires_grad(true);
  return l;
}

Tensor Linear::forward(const Tensor& x) const { return add(matmul(x, weight), bias); }

void Linear::collect(const std::string& prefix, ParamMap& params) {
  params.emplace_back(prefix + ".weight", &weight);
  params.emplace_back(prefix + ".bias", &bias);
}

LayerNorm LayerNorm::make(long d) {
  LayerNorm ln;
  ln.gamma = Tensor::full({d}, 1.0).set_requires_grad(true);
  ln.beta = Tensor::zeros({d}).set_requires_grad(true);
  return ln;
}

Tensor LayerNorm::forward(const Tensor& x) const {
  long last = x.ndim() - 1;
  Tensor mu = mean(x, last, true);
  Tensor centered = sub(x, mu);
  Tensor var = mean(mul(centered, centered), last, true);
  return add(mul(div(centered, sqrt(add_scalar(var, eps))), gamma), beta);
}

void LayerNorm::collect(const std::string& prefix, ParamMap& params) {
  params.emplace_back(prefix + ".gamma", &gamma);
  params.emplace_back(prefix + ".beta", &beta);
}

Tensor positional_encoding(long t, long d_m) {
  Tensor pe = Tensor::zeros({t, d_m});
  for (long pos = 0; pos < t; ++pos)
    for (long i = 0; i < d_m; i += 2) {
      double angle = pos / std::pow(10000.0, static_cast<double>(i) / static_cast<double>(d_m));
      pe.data()[pos * d_m + i] = std::sin(angle);
      if (i + 1 < d_m) pe.data()[pos * d_m + i + 1] = std::cos(angle);
    }
  return pe;
}

Tensor attention_weights(const Tensor& q, const Tensor& k, const std::optional<Tensor>& mask) {
  if (q.dim(1) != k.dim(1))
    throw DimensionError("attention: query/key width mismatch: " + shape_str(q.shape()) +
                         " vs " + shape_str(k.shape()));
  double scale = 1.0 / std::sqrt(static_cast<double>(q.dim(1)));
  Tensor logits = mul_scalar(matmul(q, transpose(k)), scale);
  if (mask) {
    const Tensor& m = *mask;
    if (m.dim(0) != q.dim(0) || m.dim(1) != k.dim(0))
      throw DimensionError("attention: mask " + shape_str(m.shape()) + " does not cover " +
                           std::to_string(q.dim(0)) + "x" + std::to_string(k.dim(0)));
    for (long r = 0; r < m.dim(0); ++r) {
      bool any = false;
      for (long c = 0; c < m.dim(1); ++c) any = any || m.at({r, c}) != 0.0;
      if (!any)
        throw std::invalid_argument("attention: query row " + std::to_string(r) +
                                    " has no unmasked key");
    }
    // 0 -> -inf-like logit, 1 -> unchanged.
    Tensor penalty = mul_scalar(add_scalar(neg(m), 1.0), kMaskValue);
    logits = add(logits, penalty);
  }
  return softmax(logits, 1);
}

Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v,
                 const std::optional<Tensor>& mask) {
  if (k.dim(0) != v.dim(0))
    throw DimensionError("attention: key/value count mismatch");
  return matmul(attention_weights(q, k, mask), v);
}

MultiHeadAttention MultiHeadAttention::make(long d_m, long n_heads, Rng& rng) {
  if (d_m % n_heads != 0)
    throw std::invalid_argument("multi-head attention: n_heads must divide d_m");
  MultiHeadAttention mha;
  mha.n_heads = n_heads;
  mha.wq = Linear::make(d_m, d_m, rng);
  mha.wk = Linear::make(d_m, d_m, rng);
  mha.wv = Linear::make(d_m, d_m, rng);
  mha.wo = Linear::make(d_m, d_m, rng);
  return mha;
}

Tensor MultiHeadAttention::forward(const Tensor& q_in, const Tensor& kv_in,
                                   const std::optional<Tensor>& mask) const {
  long d_m = q_in.dim(1);
  long dk = d_m / n_heads;
  Tensor q = wq.forward(q_in);
  Tensor k = wk.forward(kv_in);
  Tensor v = wv.forward(kv_in);
  std::vector<Tensor> heads;
  heads.reserve(static_cast<size_t>(n_heads));
  for (long h = 0; h < n_heads; ++h)
    heads.push_back(attention(slice(q, 1, h * dk, dk), slice(k, 1, h * dk, dk),
                              slice(v, 1, h * dk, dk), mask));
  return wo.forward(concat(heads, 1));
}

void MultiHeadAttention::collect(const std::string& prefix, ParamMap& params) {
  wq.collect(prefix + ".wq", params);
  wk.collect(prefix + ".wk", params);
  wv.collect(prefix + ".wv", params);
  wo.collect(prefix + ".wo", params);
}

FeedForward FeedForward::make(long d_m, long d_ff, Rng& rng) {
  FeedForward f;
  f.in = Linear::make(d_m, d_ff, rng);
  f.out = Linear::make(d_ff, d_m, rng);
  return f;
}

Tensor FeedForward::forward(const Tensor& x) const { return out.forward(relu(in.forward(x))); }

void FeedForward::collect(const std::string& prefix, ParamMap& params) {
  in.collect(prefix + ".in", params);
  out.collect(prefix + ".out", params);
}

EncoderLayer EncoderLayer::make(const TransformerConfig& cfg, Rng& rng) {
  EncoderLayer l;
  l.attn = MultiHeadAttention::make(cfg.d_m, cfg.n_heads, rng);
  l.ffn = FeedForward::make(cfg.d_m, cfg.d_ff, rng);
  l.ln1 = LayerNorm::make(cfg.d_m);
  l.ln2 = LayerNorm::make(cfg.d_m);
  return l;
}

Tensor EncoderLayer::forward(const Tensor& x, const TransformerConfig& cfg, Rng& rng) const {
  Tensor n1 = ln1.forward(x);
  Tensor h = add(x, maybe_dropout(attn.forward(n1, n1, std::nullopt), cfg, rng));
  Tensor n2 = ln2.forward(h);
  return add(h, maybe_dropout(ffn.forward(n2), cfg, rng));
}

void EncoderLayer::collect(const std::string& prefix, ParamMap& params) {
  attn.collect(prefix + ".attn", params);
  ffn.collect(prefix + ".ffn", params);
  ln1.collect(prefix + ".ln1", params);
  ln2.collect(prefix + ".ln2", params);
}

DecoderLayer DecoderLayer::make(const TransformerConfig& cfg, Rng& rng) {
  DecoderLayer l;
  l.self_attn = MultiHeadAttention::make(cfg.d_m, cfg.n_heads, rng);
  l.cross_attn = MultiHeadAttention::make(cfg.d_m, cfg.n_heads, rng);
  l.ffn = FeedForward::make(cfg.d_m, cfg.d_ff, rng);
  l.ln1 = LayerNorm::make(cfg.d_m);
  l.ln2 = LayerNorm::make(cfg.d_m);
  l.ln3 = LayerNorm::make(cfg.d_m);
  return l;
}

Tensor DecoderLayer::forward(const Tensor& x, const Tensor& memory, const Tensor& mask,
                             const TransformerConfig& cfg, Rng& rng) const {
  Tensor n1 = ln1.forward(x);
  Tensor h = add(x, maybe_dropout(self_attn.forward(n1, n1, mask), cfg, rng));
  Tensor n2 = ln2.forward(h);
  h = add(h, maybe_dropout(cross_attn.forward(n2, memory, std::nullopt), cfg, rng));
  Tensor n3 = ln3.forward(h);
  return add(h, maybe_dropout(ffn.forward(n3), cfg, rng));
}

void DecoderLayer::collect(const std::string& prefix, ParamMap& params) {
  self_attn.collect(prefix + ".self_attn", params);
  cross_attn.collect(prefix + ".cross_attn", params);
  ffn.collect(prefix + ".ffn", params);
  ln1.collect(prefix + ".ln1", params);
  ln2.collect(prefix + ".ln2", params);
  ln3.collect(prefix + ".ln3", params);
}

Encoder Encoder::make(const TransformerConfig& cfg, Rng& rng) {
  Encoder e;
  for (long i = 0; i < cfg.n_enc_layers; ++i) e.layers.push_back(EncoderLayer::make(cfg, rng));
  e.final_ln = LayerNorm::make(cfg.d_m);
  return e;
}

Tensor Encoder::forward(const Tensor& x, const TransformerConfig& cfg, Rng& rng) const {
  Tensor h = x;
  for (const auto& layer : layers) h = layer.forward(h, cfg, rng);
  return final_ln.forward(h);
}

void Encoder::collect(const std::string& prefix, ParamMap& params) {
  for (size_t i = 0; i < layers.size(); ++i)
    layers[i].collect(prefix + "." + std::to_string(i), params);
  final_ln.collect(prefix + ".final_ln", params);
}

Tensor causal_mask(long t) {
  Tensor m = Tensor::zeros({t, t});
  for (long i = 0; i < t; ++i)
    for (long j = 0; j <= i; ++j) m.data()[i * t + j] = 1.0;
  return m;
}

Decoder Decoder::make(long vocab_dec, const TransformerConfig& cfg, Rng& rng) {
  Decoder d;
  d.token_embedding = Tensor::randn({vocab_dec, cfg.d_m}, rng,
                                    1.0 / std::sqrt(static_cast<double>(cfg.d_m)));
  d.token_embedding.set_requires_grad(true);
  for (long i = 0; i < cfg.n_dec_layers; ++i) d.layers.push_back(DecoderLayer::make(cfg, rng));
  d.final_ln = LayerNorm::make(cfg.d_m);
  d.out_proj = Linear::make(cfg.d_m, vocab_dec, rng);
  return d;
}

Tensor Decoder::forward(const std::vector<long>& tokens, const Tensor& memory,
                        const TransformerConfig& cfg, Rng& rng) const {
  if (tokens.empty()) throw std::invalid_argument("decoder: empty token sequence");
  long L = static_cast<long>(tokens.size());
  Tensor emb = mul_scalar(embedding(token_embedding, tokens),
                          std::sqrt(static_cast<double>(cfg.d_m)));
  Tensor h = add(emb, positional_encoding(L, cfg.d_m));
  h = maybe_dropout(h, cfg, rng);
  Tensor mask = causal_mask(L);
  for (const auto& layer : layers) h = layer.forward(h, memory, mask, cfg, rng);
  return out_proj.forward(final_ln.forward(h));
}

void Decoder::collect(const std::string& prefix, ParamMap& params) {
  params.emplace_back(prefix + ".token_embedding", &token_embedding);
  for (size_t i = 0; i < layers.size(); ++i)
    layers[i].collect(prefix + "." + std::to_string(i), params);
  final_ln.collect(prefix + ".final_ln", params);
  out_proj.collect(prefix + ".out_proj", params);
}

Tensor input_projection(const Tensor& fused, const Linear& proj) {
  if (fused.ndim() != 3)
    throw DimensionError("input_projection: expected [c,t,f], got " + shape_str(fused.shape()));
  long c = fused.dim(0), t = fused.dim(1), f = fused.dim(2);
  // [c,t,f] -> [t,c,f] -> [t, c*f] -> [t, d_m]
  Tensor frames = reshape(permute(fused, {1, 0, 2}), {t, c * f});
  return proj.forward(frames);
}

}  // namespace tstrm

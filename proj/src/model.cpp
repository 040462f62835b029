#include "tstrm/model.hpp"

#include <stdexcept>

namespace tstrm {

StreamMode parse_stream_mode(const std::string& s) {
  if (s == "both") return StreamMode::both;
  if (s == "shallow_only") return StreamMode::shallow_only;
  if (s == "deep_only") return StreamMode::deep_only;
  throw DataError("unknown stream mode '" + s + "' (both|shallow_only|deep_only)");
}

FusionKind parse_fusion_kind(const std::string& s) {
  if (s == "fcf") return FusionKind::fcf;
  if (s == "concat") return FusionKind::concat;
  if (s == "addition") return FusionKind::addition;
  throw DataError("unknown fusion kind '" + s + "' (fcf|concat|addition)");
}

std::string to_string(StreamMode m) {
  switch (m) {
    case StreamMode::both: return "both";
    case StreamMode::shallow_only: return "shallow_only";
    default: return "deep_only";
  }
}

std::string to_string(FusionKind k) {
  switch (k) {
    case FusionKind::fcf: return "fcf";
    case FusionKind::concat: return "concat";
    default: return "addition";
  }
}

ModelConfig ModelConfig::from_config(const Config& cfg) {
  ModelConfig m;
  m.stream = StreamConfig::defaults();
  m.stream.width_mult = cfg.get_double("model.width_mult", 1.0);
  m.stream.n_deep_groups = cfg.get_long("model.n_deep_groups", 6);
  if (m.stream.n_deep_groups < 4 || m.stream.n_deep_groups > 6)
    throw DataError("model.n_deep_groups must be 4, 5, or 6");
  m.fusion = parse_fusion_kind(cfg.get_string("model.fusion", "fcf"));
  m.mode = parse_stream_mode(cfg.get_string("model.stream_mode", "both"));
  m.transformer.n_enc_layers = cfg.get_long("model.n_enc_layers", 4);
  m.transformer.n_dec_layers = cfg.get_long("model.n_dec_layers", 2);
  m.transformer.n_heads = cfg.get_long("model.n_heads", 4);
  m.transformer.d_m = cfg.get_long("model.d_m", 256);
  m.transformer.d_ff = cfg.get_long("model.d_ff", 1024);
  m.transformer.dropout_rate = cfg.get_double("model.dropout", 0.1);
  m.n_tokens = cfg.get_long("model.n_tokens", 16);
  m.lambda = cfg.get_double("model.lambda", 0.3);
  if (m.lambda < 0.0 || m.lambda > 1.0) throw DataError("model.lambda must lie in [0,1]");
  m.label_smoothing = cfg.get_double("model.label_smoothing", 0.1);
  m.resolution_ratio = static_cast<int>(cfg.get_long("frontend.resolution_ratio", 4));
  long n_mels = cfg.get_long("frontend.n_mels", 40);
  long n_pitch = cfg.get_long("frontend.n_pitch", 3);
  bool deltas = cfg.get_bool("frontend.use_deltas", true);
  m.feature_dims = deltas ? 3 * (n_mels + n_pitch) : n_mels + n_pitch;
  return m;
}

void stream_out_extents(const Stream& s, long t_in, long f_in, long& t_out, long& f_out) {
  long t = t_in, f = f_in;
  auto apply = [&](const Conv2dParams& c) {
    long kh = c.weight.dim(2), kw = c.weight.dim(3);
    t = conv_out_extent(t, kh, c.pad, c.stride);
    f = conv_out_extent(f, kw, c.pad, c.stride);
  };
  for (int o : s.order) {
    if (o >= 0) {
      apply(s.convs[static_cast<size_t>(o)].conv);
    } else {
      const Bottleneck& b = s.blocks[static_cast<size_t>(-(o + 1))];
      // 1x1 expand/project preserve extents; only the depthwise 3x3 moves them.
      apply(b.depthwise.conv);
    }
  }
  t_out = t;
  f_out = f;
}

Model Model::make(const ModelConfig& cfg, Rng& rng) {
  Model m;
  m.cfg = cfg;
  m.deep = make_deep_stream(cfg.stream, rng);
  m.shallow = make_shallow_stream(cfg.stream, rng);
  long c_s = m.shallow.out_channels();
  long c_d = m.deep.out_channels();
  if (cfg.mode == StreamMode::both && c_s != c_d)
    throw DataError("fusion requires equal stream channel counts");
  m.fusion = FusionParams::make(c_s, rng);

  long ts, fs, td, fd;
  stream_out_extents(m.shallow, 64, cfg.feature_dims, ts, fs);
  stream_out_extents(m.deep, 64, cfg.feature_dims, td, fd);
  long ch = c_s, f = fs;
  if (cfg.mode == StreamMode::both) {
    ch = (cfg.fusion == FusionKind::addition) ? c_s : 2 * c_s;
  } else if (cfg.mode == StreamMode::deep_only) {
    ch = c_d;
    f = fd;
  }
  m.enc_in_dim = ch * f;
  m.in_proj = Linear::make(m.enc_in_dim, cfg.transformer.d_m, rng);
  m.encoder = Encoder::make(cfg.transformer, rng);
  m.decoder = Decoder::make(cfg.vocab().dec_classes(), cfg.transformer, rng);
  m.ctc_head = Linear::make(cfg.transformer.d_m, cfg.vocab().ctc_classes(), rng);
  return m;
}

std::vector<EncodedUtterance> Model::encode(const std::vector<Spectrogram>& batch, bool train,
                                            Rng& rng) {
  TransformerConfig tcfg = cfg.transformer;
  tcfg.deterministic = tcfg.deterministic || !train;

  bool need_shallow = cfg.mode != StreamMode::deep_only;
  bool need_deep = cfg.mode != StreamMode::shallow_only;

  std::vector<Tensor> shallow_in, deep_in;
  for (const auto& sp : batch) {
    if (sp.dims != cfg.feature_dims)
      throw DataError("feature dims " + std::to_string(sp.dims) + " do not match model config " +
                      std::to_string(cfg.feature_dims));
    if (need_shallow) shallow_in.push_back(spectrogram_to_fm(sp));
    if (need_deep) deep_in.push_back(spectrogram_to_fm(downsample_time(sp, cfg.resolution_ratio)));
  }
  std::vector<Tensor> xs, xd;
  if (need_shallow) xs = shallow.forward(shallow_in, train);
  if (need_deep) xd = deep.forward(deep_in, train);

  std::vector<EncodedUtterance> out;
  for (size_t i = 0; i < batch.size(); ++i) {
    EncodedUtterance e;
    Tensor fused;
    if (cfg.mode == StreamMode::both) {
      e.shallow_fm = xs[i];
      e.deep_fm = xd[i];
      Tensor xd_r = bilinear_resize(xd[i], fm_time(xs[i]), fm_freq(xs[i]));
      switch (cfg.fusion) {
        case FusionKind::fcf: fused = fcf(xs[i], xd_r, fusion); break;
        case FusionKind::concat: fused = fuse_concat(xs[i], xd_r); break;
        case FusionKind::addition: fused = fuse_add(xs[i], xd_r); break;
      }
    } else if (cfg.mode == StreamMode::shallow_only) {
      e.shallow_fm = xs[i];
      fused = xs[i];
    } else {
      e.deep_fm = xd[i];
      fused = xd[i];
    }
    Tensor seq = input_projection(fused, in_proj);
    seq = seq + positional_encoding(seq.dim(0), cfg.transformer.d_m);
    e.memory = encoder.forward(seq, tcfg, rng);
    e.ctc_logprobs = log_softmax(ctc_head.forward(e.memory), 1);
    out.push_back(std::move(e));
  }
  return out;
}

Tensor Model::batch_loss(const std::vector<Spectrogram>& batch,
                         const std::vector<std::vector<long>>& transcripts, bool train, Rng& rng,
                         LossBreakdown& breakdown) {
  if (batch.size() != transcripts.size())
    throw std::invalid_argument("batch_loss: batch/transcript count mismatch");
  if (batch.empty()) throw std::invalid_argument("batch_loss: empty batch");
  TransformerConfig tcfg = cfg.transformer;
  tcfg.deterministic = tcfg.deterministic || !train;
  Vocabulary vocab = cfg.vocab();

  std::vector<EncodedUtterance> enc = encode(batch, train, rng);
  Tensor total = Tensor::scalar(0.0);
  double ctc_sum = 0.0, att_sum = 0.0;
  for (size_t i = 0; i < batch.size(); ++i) {
    const auto& tr = transcripts[i];
    if (enc[i].memory.dim(0) < ctc_min_frames(tr))
      throw DataError("utterance too short for its transcript (CTC needs " +
                      std::to_string(ctc_min_frames(tr)) + " frames, has " +
                      std::to_string(enc[i].memory.dim(0)) + ")");
    Tensor ctc = ctc_loss(enc[i].ctc_logprobs, tr, vocab);

    std::vector<long> dec_in = {vocab.sos()};
    for (long tok : tr) dec_in.push_back(tok);
    std::vector<long> dec_out = tr;
    dec_out.push_back(vocab.eos());
    Tensor logits = decoder.forward(dec_in, enc[i].memory, tcfg, rng);
    Tensor att = attention_ce(logits, dec_out, cfg.label_smoothing);

    ctc_sum += ctc.item();
    att_sum += att.item();
    total = total + joint_loss_tensor(ctc, att, cfg.lambda);
  }
  total = total * Tensor::scalar(1.0 / static_cast<double>(batch.size()));
  breakdown = joint_loss(ctc_sum / static_cast<double>(batch.size()),
                         att_sum / static_cast<double>(batch.size()), cfg.lambda);
  return total;
}

void Model::collect(ParamMap& params, BufferMap& buffers) {
  bool need_shallow = cfg.mode != StreamMode::deep_only;
  bool need_deep = cfg.mode != StreamMode::shallow_only;
  if (need_deep) deep.collect("deep", params, buffers);
  if (need_shallow) shallow.collect("shallow", params, buffers);
  if (cfg.mode == StreamMode::both && cfg.fusion == FusionKind::fcf)
    fusion.collect("fusion", params);
  in_proj.collect("in_proj", params);
  encoder.collect("enc", params);
  decoder.collect("dec", params);
  ctc_head.collect("ctc", params);
}

long Model::param_count() {
  ParamMap params;
  BufferMap buffers;
  collect(params, buffers);
  long n = 0;
  for (auto& [name, t] : params) n += t->size();
  return n;
}

Spectrogram load_features(const std::string& manifest_path, const Utterance& utt) {
  std::vector<long> shape;
  std::vector<double> values;
  read_tstf(resolve_path(manifest_path, utt.path), shape, values);
  if (shape.size() != 2) throw DataError("features for " + utt.id + " are not rank 2");
  Spectrogram s;
  s.frames = shape[0];
  s.dims = shape[1];
  s.values = std::move(values);
  s.resolution = ResolutionTag::high;
  return s;
}

}  // namespace tstrm

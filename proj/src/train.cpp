#include "tstrm/train.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <thread>

namespace tstrm {
namespace {

namespace fs = std::filesystem;

struct Corpus {
  std::vector<Utterance> utts;
  std::vector<Spectrogram> feats;
};

Corpus load_corpus(const std::string& manifest_path, long n_tokens) {
  Corpus c;
  c.utts = read_manifest(manifest_path);
  if (c.utts.empty()) throw DataError("empty manifest: " + manifest_path);
  for (const auto& u : c.utts) {
    for (long t : u.transcript)
      if (t < 0 || t >= n_tokens)
        throw DataError("token " + std::to_string(t) + " in " + u.id +
                        " is outside the configured vocabulary of " + std::to_string(n_tokens));
    c.feats.push_back(load_features(manifest_path, u));
  }
  return c;
}

// Fresh model with src's parameter/buffer values (Tensor copies share
// storage, so thread-local replicas need explicit reconstruction).
Model clone_model(Model& src) {
  Rng scratch(0);
  Model dst = Model::make(src.cfg, scratch);
  ParamMap ps, pd;
  BufferMap bs, bd;
  src.collect(ps, bs);
  dst.collect(pd, bd);
  for (size_t i = 0; i < ps.size(); ++i) pd[i].second->values() = ps[i].second->values();
  for (size_t i = 0; i < bs.size(); ++i) *bd[i].second = *bs[i].second;
  return dst;
}

std::uint64_t step_seed(std::uint64_t seed, long step, long shard) {
  std::uint64_t state = seed + 0x9e3779b97f4a7c15ull * static_cast<std::uint64_t>(step) +
                        0xbf58476d1ce4e5b9ull * static_cast<std::uint64_t>(shard + 1);
  return splitmix64(state);
}

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  size_t start = 0;
  while (true) {
    size_t c = line.find(',', start);
    out.push_back(line.substr(start, c == std::string::npos ? c : c - start));
    if (c == std::string::npos) break;
    start = c + 1;
  }
  return out;
}

}  // namespace

TrainConfig TrainConfig::from_config(const Config& cfg) {
  TrainConfig t;
  t.train_manifest = cfg.get_string("data.train_manifest");
  t.dev_manifest = cfg.get_string("data.dev_manifest");
  t.epochs = cfg.get_long("train.epochs", t.epochs);
  t.batch_size = cfg.get_long("train.batch_size", t.batch_size);
  t.warmup_steps = cfg.get_long("train.warmup_steps", t.warmup_steps);
  t.lr_scale = cfg.get_double("train.lr_scale", t.lr_scale);
  t.seed = static_cast<std::uint64_t>(cfg.get_long("train.seed", 1));
  t.decode_max_len = cfg.get_long("decode.max_len", t.decode_max_len);
  t.decode_beam = cfg.get_long("decode.beam", t.decode_beam);
  if (t.epochs < 1 || t.batch_size < 2 || t.warmup_steps < 1 || t.decode_beam < 1)
    throw DataError("train config: epochs/warmup/beam must be >= 1, batch_size >= 2");
  return t;
}

void Adam::init(const ParamMap& params) {
  m.assign(params.size(), {});
  v.assign(params.size(), {});
  for (size_t i = 0; i < params.size(); ++i) {
    m[i].assign(params[i].second->values().size(), 0.0);
    v[i].assign(params[i].second->values().size(), 0.0);
  }
  step_count = 0;
}

double Adam::learning_rate(long step) const {
  double s = static_cast<double>(step);
  double w = static_cast<double>(warmup_steps);
  return lr_scale / std::sqrt(static_cast<double>(d_m)) *
         std::min(1.0 / std::sqrt(s), s / (w * std::sqrt(w)));
}

void Adam::step(const ParamMap& params) {
  if (m.size() != params.size()) throw std::logic_error("Adam::step before init");
  ++step_count;
  double lr = learning_rate(step_count);
  double bc1 = 1.0 - std::pow(beta1, static_cast<double>(step_count));
  double bc2 = 1.0 - std::pow(beta2, static_cast<double>(step_count));
  for (size_t i = 0; i < params.size(); ++i) {
    Tensor* p = params[i].second;
    if (!p->requires_grad() || !p->has_grad()) continue;
    const std::vector<double>& g = p->grad();
    std::vector<double>& val = p->values();
    for (size_t j = 0; j < val.size(); ++j) {
      m[i][j] = beta1 * m[i][j] + (1.0 - beta1) * g[j];
      v[i][j] = beta2 * v[i][j] + (1.0 - beta2) * g[j] * g[j];
      double mh = m[i][j] / bc1;
      double vh = v[i][j] / bc2;
      val[j] -= lr * mh / (std::sqrt(vh) + eps);
    }
  }
}

void save_model_checkpoint(const std::string& path, Model& model, Adam* adam,
                           const std::string& config_snapshot, std::uint64_t step) {
  ParamMap params;
  BufferMap buffers;
  model.collect(params, buffers);
  Checkpoint ckpt;
  ckpt.step = step;
  ckpt.config_snapshot = config_snapshot;
  for (size_t i = 0; i < params.size(); ++i) {
    CheckpointEntry e;
    e.name = params[i].first;
    e.shape = params[i].second->shape();
    e.values = params[i].second->values();
    if (adam) {
      e.adam_m = adam->m[i];
      e.adam_v = adam->v[i];
    }
    ckpt.entries.push_back(std::move(e));
  }
  for (auto& [name, buf] : buffers) {
    CheckpointEntry e;
    e.name = name;
    e.shape = {static_cast<long>(buf->size())};
    e.values = *buf;
    ckpt.entries.push_back(std::move(e));
  }
  save_checkpoint(path, ckpt);
}

Model model_from_checkpoint(const std::string& path, Config* cfg_out) {
  Checkpoint ckpt = load_checkpoint(path);
  Config cfg = Config::from_string(ckpt.config_snapshot);
  if (cfg_out) *cfg_out = cfg;
  Rng scratch(0);
  Model model = Model::make(ModelConfig::from_config(cfg), scratch);
  ParamMap params;
  BufferMap buffers;
  model.collect(params, buffers);
  std::map<std::string, const CheckpointEntry*> by_name;
  for (const auto& e : ckpt.entries) by_name[e.name] = &e;
  for (auto& [name, t] : params) {
    auto it = by_name.find(name);
    if (it == by_name.end()) throw DataError("checkpoint missing parameter " + name);
    if (it->second->values.size() != t->values().size())
      throw DataError("checkpoint size mismatch for " + name);
    t->values() = it->second->values;
  }
  for (auto& [name, buf] : buffers) {
    auto it = by_name.find(name);
    if (it == by_name.end()) throw DataError("checkpoint missing buffer " + name);
    if (it->second->values.size() != buf->size())
      throw DataError("checkpoint size mismatch for " + name);
    *buf = it->second->values;
  }
  return model;
}

EvalResult evaluate_model(Model& model, const std::string& manifest_path,
                          const TrainConfig& tcfg) {
  Corpus corpus = load_corpus(manifest_path, model.cfg.n_tokens);
  Vocabulary vocab = model.cfg.vocab();
  TransformerConfig dcfg = model.cfg.transformer;
  dcfg.deterministic = true;

  EvalResult res;
  long total_edits = 0, total_ref = 0;
  NoGradGuard ng;
  Rng scratch(0);
  const size_t chunk = 8;
  for (size_t base = 0; base < corpus.utts.size(); base += chunk) {
    size_t hi = std::min(base + chunk, corpus.utts.size());
    std::vector<Spectrogram> batch(corpus.feats.begin() + static_cast<long>(base),
                                   corpus.feats.begin() + static_cast<long>(hi));
    auto enc = model.encode(batch, /*train=*/false, scratch);
    for (size_t i = 0; i < batch.size(); ++i) {
      const Utterance& u = corpus.utts[base + i];
      Hypothesis hyp;
      if (tcfg.decode_beam <= 1) {
        hyp = greedy_decode(enc[i].memory, model.decoder, vocab, dcfg, tcfg.decode_max_len);
      } else {
        auto beams = beam_decode(enc[i].memory, model.decoder, vocab, dcfg, tcfg.decode_beam,
                                 tcfg.decode_max_len);
        hyp = beams.front();
      }
      ErrorRateReport r = edit_distance_rate(hyp.tokens, u.transcript);
      long edits = r.substitutions + r.insertions + r.deletions;
      total_edits += edits;
      total_ref += r.reference_length;
      res.per_utterance_csv.push_back(u.id + "," + std::to_string(edits) + "," +
                                      std::to_string(r.reference_length) + "," +
                                      format_double(r.rate));
    }
  }
  res.aggregate.reference_length = total_ref;
  res.aggregate.substitutions = total_edits;  // aggregate carries total edits here
  res.aggregate.rate = static_cast<double>(total_edits) / static_cast<double>(total_ref);
  return res;
}

TrainResult train_model(const Config& cfg, const std::string& out_dir, int threads) {
  ModelConfig mc = ModelConfig::from_config(cfg);
  TrainConfig tc = TrainConfig::from_config(cfg);
  fs::create_directories(out_dir);

  Corpus corpus = load_corpus(tc.train_manifest, mc.n_tokens);

  Rng rng(tc.seed);
  Model model = Model::make(mc, rng);
  ParamMap params;
  BufferMap buffers;
  model.collect(params, buffers);

  Adam adam;
  adam.d_m = mc.transformer.d_m;
  adam.warmup_steps = tc.warmup_steps;
  adam.lr_scale = tc.lr_scale;
  adam.init(params);

  TrainResult result;
  result.metrics_path = (fs::path(out_dir) / "metrics.csv").string();
  fs::remove(result.metrics_path);
  std::string best_path = (fs::path(out_dir) / "best.ckpt").string();
  std::string snapshot = cfg.to_string();

  // Thread-local replicas for sharded steps; values refreshed every step.
  std::vector<Model> clones;
  std::vector<ParamMap> clone_params;
  std::vector<BufferMap> clone_buffers;
  if (threads > 1) {
    // collect() stores Tensor* into the in-vector models, so the vector must
    // never reallocate after the first collect.
    clones.reserve(static_cast<size_t>(threads));
    for (int i = 0; i < threads; ++i) {
      clones.push_back(clone_model(model));
      clone_params.emplace_back();
      clone_buffers.emplace_back();
      clones.back().collect(clone_params.back(), clone_buffers.back());
    }
  }

  std::vector<size_t> order(corpus.utts.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;

  long step = 0;
  for (long epoch = 1; epoch <= tc.epochs; ++epoch) {
    for (size_t i = order.size(); i > 1; --i)
      std::swap(order[i - 1], order[static_cast<size_t>(rng.next_below(i))]);

    std::vector<std::vector<size_t>> batches;
    for (size_t base = 0; base < order.size(); base += static_cast<size_t>(tc.batch_size))
      batches.emplace_back(order.begin() + static_cast<long>(base),
                           order.begin() +
                               static_cast<long>(std::min(base + static_cast<size_t>(tc.batch_size),
                                                          order.size())));
    // BatchNorm needs >= 2 utterances in train mode: fold a trailing single.
    if (batches.size() > 1 && batches.back().size() < 2) {
      batches[batches.size() - 2].push_back(batches.back()[0]);
      batches.pop_back();
    }

    double ctc_sum = 0, att_sum = 0, joint_sum = 0;
    long n_seen = 0;
    for (size_t bi = 0; bi < batches.size(); ++bi) {
      const auto& idx = batches[bi];
      std::vector<Spectrogram> bfeats;
      std::vector<std::vector<long>> btrs;
      for (size_t k : idx) {
        bfeats.push_back(corpus.feats[k]);
        btrs.push_back(corpus.utts[k].transcript);
      }
      ++step;
      long bsize = static_cast<long>(idx.size());
      int n_shards = threads > 1 ? static_cast<int>(std::min<long>(threads, bsize / 2)) : 1;

      LossBreakdown bd;
      if (n_shards <= 1) {
        for (auto& [name, t] : params) t->zero_grad();
        Rng srng(step_seed(tc.seed, step, 0));
        Tensor loss = model.batch_loss(bfeats, btrs, /*train=*/true, srng, bd);
        if (!std::isfinite(bd.joint))
          throw NumericError("non-finite loss at epoch " + std::to_string(epoch) + " batch " +
                             std::to_string(bi));
        loss.backward();
      } else {
        std::vector<long> lo(static_cast<size_t>(n_shards)), hi(static_cast<size_t>(n_shards));
        long base_sz = bsize / n_shards, rem = bsize % n_shards, cursor = 0;
        for (int s = 0; s < n_shards; ++s) {
          lo[static_cast<size_t>(s)] = cursor;
          cursor += base_sz + (s < rem ? 1 : 0);
          hi[static_cast<size_t>(s)] = cursor;
        }
        std::vector<LossBreakdown> sbd(static_cast<size_t>(n_shards));
        std::vector<std::thread> pool;
        for (int s = 0; s < n_shards; ++s) {
          pool.emplace_back([&, s]() {
            auto& cp = clone_params[static_cast<size_t>(s)];
            auto& cb = clone_buffers[static_cast<size_t>(s)];
            for (size_t p = 0; p < params.size(); ++p) {
              cp[p].second->values() = params[p].second->values();
              cp[p].second->zero_grad();
            }
            for (size_t b = 0; b < buffers.size(); ++b) *cb[b].second = *buffers[b].second;
            std::vector<Spectrogram> sf(bfeats.begin() + lo[static_cast<size_t>(s)],
                                        bfeats.begin() + hi[static_cast<size_t>(s)]);
            std::vector<std::vector<long>> st(btrs.begin() + lo[static_cast<size_t>(s)],
                                              btrs.begin() + hi[static_cast<size_t>(s)]);
            Rng srng(step_seed(tc.seed, step, s));
            Tensor loss = clones[static_cast<size_t>(s)].batch_loss(
                sf, st, /*train=*/true, srng, sbd[static_cast<size_t>(s)]);
            loss.backward();
          });
        }
        for (auto& t : pool) t.join();
        // Reduce in shard-index order so results are bitwise deterministic
        // for a fixed shard count.
        for (size_t p = 0; p < params.size(); ++p) {
          auto& g = params[p].second->node()->grad;
          g.assign(params[p].second->values().size(), 0.0);
          for (int s = 0; s < n_shards; ++s) {
            double w = static_cast<double>(hi[static_cast<size_t>(s)] - lo[static_cast<size_t>(s)]) /
                       static_cast<double>(bsize);
            Tensor* cpt = clone_params[static_cast<size_t>(s)][p].second;
            if (!cpt->has_grad()) continue;
            const auto& cg = cpt->grad();
            for (size_t j = 0; j < g.size(); ++j) g[j] += w * cg[j];
          }
        }
        for (size_t b = 0; b < buffers.size(); ++b) {
          auto& dst = *buffers[b].second;
          std::fill(dst.begin(), dst.end(), 0.0);
          for (int s = 0; s < n_shards; ++s) {
            double w = static_cast<double>(hi[static_cast<size_t>(s)] - lo[static_cast<size_t>(s)]) /
                       static_cast<double>(bsize);
            const auto& src = *clone_buffers[static_cast<size_t>(s)][b].second;
            for (size_t j = 0; j < dst.size(); ++j) dst[j] += w * src[j];
          }
        }
        for (int s = 0; s < n_shards; ++s) {
          double w = static_cast<double>(hi[static_cast<size_t>(s)] - lo[static_cast<size_t>(s)]) /
                     static_cast<double>(bsize);
          bd.ctc += w * sbd[static_cast<size_t>(s)].ctc;
          bd.att += w * sbd[static_cast<size_t>(s)].att;
        }
        bd = joint_loss(bd.ctc, bd.att, mc.lambda);
        if (!std::isfinite(bd.joint))
          throw NumericError("non-finite loss at epoch " + std::to_string(epoch) + " batch " +
                             std::to_string(bi));
      }
      adam.step(params);
      ctc_sum += bd.ctc * static_cast<double>(bsize);
      att_sum += bd.att * static_cast<double>(bsize);
      joint_sum += bd.joint * static_cast<double>(bsize);
      n_seen += bsize;
    }

    EvalResult dev = evaluate_model(model, tc.dev_manifest, tc);
    append_metrics_row(result.metrics_path, epoch, step, ctc_sum / static_cast<double>(n_seen),
                       att_sum / static_cast<double>(n_seen),
                       joint_sum / static_cast<double>(n_seen), dev.aggregate.rate);
    if (dev.aggregate.rate < result.best_dev_cer) {
      result.best_dev_cer = dev.aggregate.rate;
      result.best_epoch = epoch;
      save_model_checkpoint(best_path, model, &adam, snapshot, static_cast<std::uint64_t>(step));
      result.best_checkpoint = best_path;
    }
  }
  save_model_checkpoint((fs::path(out_dir) / "last.ckpt").string(), model, &adam, snapshot,
                        static_cast<std::uint64_t>(step));
  result.steps = step;
  return result;
}

std::string run_ablation(const std::string& kind, const Config& base, const std::string& out_dir,
                         int threads) {
  std::vector<std::pair<std::string, std::string>> variants;  // (name, key=value)
  if (kind == "streams") {
    variants = {{"shallow_only", "model.stream_mode"},
                {"deep_only", "model.stream_mode"},
                {"both", "model.stream_mode"}};
  } else if (kind == "fusion") {
    variants = {{"concat", "model.fusion"}, {"addition", "model.fusion"}, {"fcf", "model.fusion"}};
  } else if (kind == "blocks") {
    variants = {{"4", "model.n_deep_groups"}, {"5", "model.n_deep_groups"},
                {"6", "model.n_deep_groups"}};
  } else {
    throw DataError("unknown ablation kind '" + kind + "' (streams|fusion|blocks)");
  }

  fs::create_directories(out_dir);
  std::string csv_path = (fs::path(out_dir) / ("ablation_" + kind + ".csv")).string();
  std::ofstream os(csv_path, std::ios::binary);
  if (!os) throw DataError("run_ablation: cannot open " + csv_path);
  os << "variant,params,dev_cer\n";
  for (const auto& [value, key] : variants) {
    Config cfg = base;
    cfg.set(key, value);
    Rng scratch(0);
    Model probe = Model::make(ModelConfig::from_config(cfg), scratch);
    long n_params = probe.param_count();
    TrainResult r =
        train_model(cfg, (fs::path(out_dir) / (kind + "_" + value)).string(), threads);
    os << value << ',' << n_params << ',' << format_double(r.best_dev_cer) << '\n';
  }
  if (!os) throw DataError("run_ablation: write failed for " + csv_path);
  return csv_path;
}

void dump_embeddings(Model& model, const std::string& manifest_path, const std::string& which,
                     const std::string& csv_path) {
  bool want_deep = which == "deep";
  if (!want_deep && which != "shallow")
    throw DataError("dump_embeddings: which must be 'shallow' or 'deep'");
  if (want_deep && model.cfg.mode == StreamMode::shallow_only)
    throw DataError("dump_embeddings: model has no deep stream");
  if (!want_deep && model.cfg.mode == StreamMode::deep_only)
    throw DataError("dump_embeddings: model has no shallow stream");

  Corpus corpus = load_corpus(manifest_path, model.cfg.n_tokens);
  std::ofstream os(csv_path, std::ios::binary);
  if (!os) throw DataError("dump_embeddings: cannot open " + csv_path);

  NoGradGuard ng;
  Rng scratch(0);
  bool header_done = false;
  const size_t chunk = 8;
  for (size_t base = 0; base < corpus.utts.size(); base += chunk) {
    size_t hi = std::min(base + chunk, corpus.utts.size());
    std::vector<Spectrogram> batch(corpus.feats.begin() + static_cast<long>(base),
                                   corpus.feats.begin() + static_cast<long>(hi));
    auto enc = model.encode(batch, /*train=*/false, scratch);
    for (size_t i = 0; i < batch.size(); ++i) {
      const Tensor& fm = want_deep ? enc[i].deep_fm : enc[i].shallow_fm;
      long c = fm_channels(fm), t = fm_time(fm), f = fm_freq(fm);
      if (!header_done) {
        os << "utt_id,speaker_id";
        for (long k = 1; k <= c; ++k) os << ",v" << k;
        os << '\n';
        header_done = true;
      }
      os << corpus.utts[base + i].id << ',' << corpus.utts[base + i].speaker_id;
      const double* d = fm.data();
      for (long ch = 0; ch < c; ++ch) {
        double acc = 0;
        for (long j = 0; j < t * f; ++j) acc += d[ch * t * f + j];
        os << ',' << format_double(acc / static_cast<double>(t * f));
      }
      os << '\n';
    }
  }
  if (!os) throw DataError("dump_embeddings: write failed for " + csv_path);
}

double speaker_probe(const std::string& csv_path) {
  std::ifstream is(csv_path);
  if (!is) throw DataError("speaker_probe: cannot open " + csv_path);
  std::string line;
  if (!std::getline(is, line)) throw DataError("speaker_probe: empty CSV");
  std::vector<std::vector<double>> X;
  std::vector<long> y;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    auto f = split_csv(line);
    if (f.size() < 3) throw DataError("speaker_probe: malformed row");
    y.push_back(std::stol(f[1]));
    std::vector<double> row;
    for (size_t i = 2; i < f.size(); ++i) row.push_back(std::stod(f[i]));
    X.push_back(std::move(row));
  }
  if (X.empty()) throw DataError("speaker_probe: no rows");
  size_t d = X[0].size();

  std::map<long, std::vector<size_t>> by_speaker;
  for (size_t i = 0; i < y.size(); ++i) by_speaker[y[i]].push_back(i);
  if (by_speaker.size() < 2) throw DataError("speaker_probe: need at least 2 speakers");
  std::map<long, long> cls;
  for (const auto& [spk, rows] : by_speaker) {
    if (rows.size() < 4) throw DataError("speaker_probe: need >= 4 utterances per speaker");
    long c = static_cast<long>(cls.size());
    cls[spk] = c;
  }
  long K = static_cast<long>(cls.size());

  // 50/50 stratified split in CSV order: even positions train, odd test.
  std::vector<size_t> train, test;
  for (const auto& [spk, rows] : by_speaker)
    for (size_t i = 0; i < rows.size(); ++i) (i % 2 == 0 ? train : test).push_back(rows[i]);

  // Standardize with train statistics.
  std::vector<double> mu(d, 0.0), sd(d, 0.0);
  for (size_t i : train)
    for (size_t j = 0; j < d; ++j) mu[j] += X[i][j];
  for (size_t j = 0; j < d; ++j) mu[j] /= static_cast<double>(train.size());
  for (size_t i : train)
    for (size_t j = 0; j < d; ++j) sd[j] += (X[i][j] - mu[j]) * (X[i][j] - mu[j]);
  for (size_t j = 0; j < d; ++j)
    sd[j] = std::max(std::sqrt(sd[j] / static_cast<double>(train.size())), 1e-8);
  auto feat = [&](size_t i, size_t j) { return (X[i][j] - mu[j]) / sd[j]; };

  // Multinomial logistic regression, zero init, 500 full-batch GD steps.
  std::vector<double> W(d * static_cast<size_t>(K), 0.0), b(static_cast<size_t>(K), 0.0);
  const double lr = 0.5;
  std::vector<double> logits(static_cast<size_t>(K));
  for (int it = 0; it < 500; ++it) {
    std::vector<double> gW(W.size(), 0.0), gb(b.size(), 0.0);
    for (size_t i : train) {
      double mx = -1e300;
      for (long k = 0; k < K; ++k) {
        double s = b[static_cast<size_t>(k)];
        for (size_t j = 0; j < d; ++j) s += feat(i, j) * W[j * static_cast<size_t>(K) + static_cast<size_t>(k)];
        logits[static_cast<size_t>(k)] = s;
        mx = std::max(mx, s);
      }
      double z = 0;
      for (long k = 0; k < K; ++k) z += std::exp(logits[static_cast<size_t>(k)] - mx);
      for (long k = 0; k < K; ++k) {
        double p = std::exp(logits[static_cast<size_t>(k)] - mx) / z;
        double err = p - (cls[y[i]] == k ? 1.0 : 0.0);
        gb[static_cast<size_t>(k)] += err;
        for (size_t j = 0; j < d; ++j)
          gW[j * static_cast<size_t>(K) + static_cast<size_t>(k)] += err * feat(i, j);
      }
    }
    double inv_n = 1.0 / static_cast<double>(train.size());
    for (size_t j = 0; j < W.size(); ++j) W[j] -= lr * inv_n * gW[j];
    for (size_t k = 0; k < b.size(); ++k) b[k] -= lr * inv_n * gb[k];
  }

  long correct = 0;
  for (size_t i : test) {
    long best = 0;
    double best_s = -1e300;
    for (long k = 0; k < K; ++k) {
      double s = b[static_cast<size_t>(k)];
      for (size_t j = 0; j < d; ++j) s += feat(i, j) * W[j * static_cast<size_t>(K) + static_cast<size_t>(k)];
      if (s > best_s) {
        best_s = s;
        best = k;
      }
    }
    if (best == cls[y[i]]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(test.size());
}

GradCheckReport run_grad_check(std::uint64_t seed) {
  Config cfg = Config::from_string(
      "model.width_mult = 0.0625\n"
      "model.d_m = 16\n"
      "model.n_enc_layers = 1\n"
      "model.n_dec_layers = 1\n"
      "model.n_heads = 2\n"
      "model.d_ff = 32\n"
      "model.dropout = 0.0\n"
      "model.n_tokens = 4\n"
      "frontend.n_mels = 8\n"
      "frontend.n_pitch = 3\n");
  ModelConfig mc = ModelConfig::from_config(cfg);
  mc.transformer.deterministic = true;
  Rng rng(seed);
  Model model = Model::make(mc, rng);

  std::vector<Spectrogram> batch(2);
  for (auto& sp : batch) {
    sp.frames = 16;
    sp.dims = mc.feature_dims;
    sp.values.resize(static_cast<size_t>(sp.frames * sp.dims));
    for (auto& v : sp.values) v = 0.5 * rng.normal();
  }
  std::vector<std::vector<long>> trs = {{0, 1}, {2}};

  ParamMap params;
  BufferMap buffers;
  model.collect(params, buffers);

  auto loss_value = [&]() {
    // Fresh buffer copies each call: train-mode BN writes running stats,
    // which must not drift between finite-difference evaluations.
    std::vector<std::vector<double>> saved;
    for (auto& [n, b] : buffers) saved.push_back(*b);
    Rng scratch(0);
    LossBreakdown bd;
    Tensor loss = model.batch_loss(batch, trs, /*train=*/true, scratch, bd);
    for (size_t i = 0; i < buffers.size(); ++i) *buffers[i].second = saved[i];
    return loss;
  };

  for (auto& [name, t] : params) t->zero_grad();
  Tensor loss0 = loss_value();
  loss0.backward();

  GradCheckReport report;
  report.op_name = "joint loss end-to-end";
  // A central difference that straddles a ReLU kink gives an O(1) error that
  // does not shrink with eps, while the kink-crossing probability does; so a
  // coordinate passes if any of the step sizes agrees with the analytic
  // gradient. A genuine gradient bug disagrees at every eps.
  const double eps_ladder[] = {1e-5, 1e-6, 3e-7};
  const double tol = 1e-3, floor = 1e-7;
  Rng pick(seed ^ 0x5DEECE66Dull);
  NoGradGuard ng;
  for (auto& [name, t] : params) {
    long n = t->size();
    long n_probe = std::min<long>(n, 3);
    std::vector<double> analytic =
        t->has_grad() ? t->grad() : std::vector<double>(static_cast<size_t>(n), 0.0);
    for (long p = 0; p < n_probe; ++p) {
      long i = static_cast<long>(pick.next_below(static_cast<std::uint64_t>(n)));
      double a = analytic[static_cast<size_t>(i)];
      double best_rel = 1e300, best_abs = 1e300, last_numeric = 0.0;
      for (double eps : eps_ladder) {
        double saved = t->data()[i];
        t->data()[i] = saved + eps;
        double fp = loss_value().item();
        t->data()[i] = saved - eps;
        double fm = loss_value().item();
        t->data()[i] = saved;
        double numeric = (fp - fm) / (2.0 * eps);
        last_numeric = numeric;
        double abs_err = std::abs(a - numeric);
        best_abs = std::min(best_abs, abs_err);
        best_rel = std::min(best_rel, abs_err / std::max(std::abs(a) + std::abs(numeric), 1e-12));
        if (abs_err <= floor || best_rel <= tol) break;
      }
      report.max_abs_error = std::max(report.max_abs_error, best_abs);
      if (best_abs > floor) {
        if (best_rel > report.max_rel_error) {
          report.max_rel_error = best_rel;
          if (best_rel > tol)
            report.diagnostic = name + "[" + std::to_string(i) + "]: analytic " +
                                std::to_string(a) + " vs numeric " +
                                std::to_string(last_numeric);
        }
      }
    }
  }
  report.passed = report.max_rel_error <= tol;
  if (!report.passed)
    throw NumericError("grad check failed: " + report.diagnostic + " (max rel error " +
                       std::to_string(report.max_rel_error) + ")");
  return report;
}

}  // namespace tstrm

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>

#include "CLI11.hpp"
#include "tstrm/data.hpp"
#include "tstrm/decode.hpp"
#include "tstrm/frontend.hpp"
#include "tstrm/model.hpp"
#include "tstrm/synth.hpp"
#include "tstrm/train.hpp"

namespace {

namespace fs = std::filesystem;
using namespace tstrm;

Config load_config_or_empty(const std::string& path) {
  return path.empty() ? Config() : Config::from_file(path);
}

int cmd_synth_data(const std::string& config_path, long seed, const std::string& out_dir,
                   bool force) {
  Config cfg = load_config_or_empty(config_path);
  SynthSpec spec = SynthSpec::from_config(cfg);
  if (seed >= 0) spec.seed = static_cast<std::uint64_t>(seed);
  SynthResult r = synth_corpus(spec, out_dir, force);
  std::printf("wrote %ld utterances\n%s\n%s\n%s\n", r.n_utterances, r.manifest_all.c_str(),
              r.manifest_train.c_str(), r.manifest_dev.c_str());
  return 0;
}

int cmd_featurize(const std::string& wav_path, const std::string& out_path,
                  const std::string& config_path) {
  Config cfg = load_config_or_empty(config_path);
  FrontendConfig fc;
  fc.n_mels = static_cast<int>(cfg.get_long("frontend.n_mels", fc.n_mels));
  fc.n_pitch = static_cast<int>(cfg.get_long("frontend.n_pitch", fc.n_pitch));
  fc.use_deltas = cfg.get_bool("frontend.use_deltas", fc.use_deltas);
  fc.window_ms = cfg.get_double("frontend.window_ms", fc.window_ms);
  fc.shift_ms = cfg.get_double("frontend.shift_ms", fc.shift_ms);
  Spectrogram s = stft_logmel(read_wav(wav_path), fc);
  write_tstf(out_path, {s.frames, s.dims}, s.values);
  std::printf("%s: %ld frames x %ld dims\n", out_path.c_str(), s.frames, s.dims);
  return 0;
}

int cmd_train(const std::string& config_path, const std::string& out_dir, long seed,
              bool deterministic, int threads) {
  Config cfg = Config::from_file(config_path);
  if (seed >= 0) cfg.set("train.seed", std::to_string(seed));
  if (deterministic) cfg.set("model.dropout", "0");
  TrainResult r = train_model(cfg, out_dir, threads);
  std::printf("best dev CER %.4f at epoch %ld (%ld steps)\nmetrics: %s\ncheckpoint: %s\n",
              r.best_dev_cer, r.best_epoch, r.steps, r.metrics_path.c_str(),
              r.best_checkpoint.c_str());
  return 0;
}

int cmd_evaluate(const std::string& ckpt_path, const std::string& manifest,
                 const std::string& out_csv, long beam, long max_len) {
  Config cfg;
  Model model = model_from_checkpoint(ckpt_path, &cfg);
  TrainConfig tc;
  tc.decode_beam = beam > 0 ? beam : cfg.get_long("decode.beam", 1);
  tc.decode_max_len = max_len > 0 ? max_len : cfg.get_long("decode.max_len", 32);
  EvalResult r = evaluate_model(model, manifest, tc);
  if (!out_csv.empty()) {
    std::ofstream os(out_csv, std::ios::binary);
    if (!os) throw DataError("cannot open " + out_csv);
    os << "utt_id,edits,ref_len,cer\n";
    for (const auto& row : r.per_utterance_csv) os << row << '\n';
  }
  std::printf("CER %.4f (%ld edits / %ld reference tokens)\n", r.aggregate.rate,
              r.aggregate.substitutions, r.aggregate.reference_length);
  return 0;
}

int cmd_decode(const std::string& ckpt_path, const std::string& manifest,
               const std::string& out_path, long beam, long max_len) {
  Config cfg;
  Model model = model_from_checkpoint(ckpt_path, &cfg);
  if (beam <= 0) beam = cfg.get_long("decode.beam", 1);
  if (max_len <= 0) max_len = cfg.get_long("decode.max_len", 32);
  Vocabulary vocab = model.cfg.vocab();
  TransformerConfig dcfg = model.cfg.transformer;
  dcfg.deterministic = true;

  std::vector<Utterance> utts = read_manifest(manifest);
  std::ofstream os(out_path, std::ios::binary);
  if (!os) throw DataError("cannot open " + out_path);
  NoGradGuard ng;
  Rng scratch(0);
  for (const auto& u : utts) {
    std::vector<Spectrogram> batch = {load_features(manifest, u)};
    auto enc = model.encode(batch, /*train=*/false, scratch);
    Hypothesis hyp;
    if (beam <= 1) {
      hyp = greedy_decode(enc[0].memory, model.decoder, vocab, dcfg, max_len);
    } else {
      hyp = beam_decode(enc[0].memory, model.decoder, vocab, dcfg, beam, max_len).front();
    }
    os << format_hypothesis(u.id, hyp) << '\n';
  }
  std::printf("wrote %zu hypotheses to %s\n", utts.size(), out_path.c_str());
  return 0;
}

int cmd_ablate(const std::string& kind, const std::string& config_path, const std::string& out_dir,
               long seed, int threads) {
  Config cfg = Config::from_file(config_path);
  if (seed >= 0) cfg.set("train.seed", std::to_string(seed));
  std::string csv = run_ablation(kind, cfg, out_dir, threads);
  std::ifstream is(csv);
  std::cout << is.rdbuf();
  std::printf("-> %s\n", csv.c_str());
  return 0;
}

int cmd_dump_embeddings(const std::string& ckpt_path, const std::string& manifest,
                        const std::string& which, const std::string& out_csv) {
  Model model = model_from_checkpoint(ckpt_path);
  dump_embeddings(model, manifest, which, out_csv);
  std::printf("wrote embeddings to %s\n", out_csv.c_str());
  return 0;
}

int cmd_probe(const std::string& embeddings_csv) {
  double acc = speaker_probe(embeddings_csv);
  std::printf("probe accuracy %.4f\n", acc);
  return 0;
}

int cmd_grad_check(long seed) {
  GradCheckReport r = run_grad_check(seed >= 0 ? static_cast<std::uint64_t>(seed) : 11);
  std::printf("grad check passed: max rel error %.3e, max abs error %.3e\n", r.max_rel_error,
              r.max_abs_error);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"two-stream two-resolution speech recognizer"};
  app.require_subcommand(1);

  std::string config_path, out, manifest, ckpt, wav, which = "shallow", kind, embeddings;
  long seed = -1, beam = -1, max_len = -1;
  int threads = 1;
  bool force = false, deterministic = false;

  auto* synth = app.add_subcommand("synth-data", "generate a synthetic corpus");
  synth->add_option("--config", config_path, "config file");
  synth->add_option("--seed", seed, "override synth.seed");
  synth->add_option("--out", out, "output directory")->required();
  synth->add_flag("--force", force, "overwrite an existing corpus");

  auto* feat = app.add_subcommand("featurize", "WAV -> TSTF features");
  feat->add_option("wav", wav, "input WAV file")->required();
  feat->add_option("--out", out, "output TSTF path")->required();
  feat->add_option("--config", config_path, "config file");

  auto* train = app.add_subcommand("train", "train a model");
  train->add_option("--config", config_path, "config file")->required();
  train->add_option("--out", out, "output directory")->required();
  train->add_option("--seed", seed, "override train.seed");
  train->add_option("--threads", threads, "data-parallel shards");
  train->add_flag("--deterministic", deterministic, "disable dropout");

  auto* eval = app.add_subcommand("evaluate", "score a manifest");
  eval->add_option("--ckpt", ckpt, "checkpoint")->required();
  eval->add_option("--manifest", manifest, "manifest to score")->required();
  eval->add_option("--out", out, "per-utterance CSV path");
  eval->add_option("--beam", beam, "beam width");
  eval->add_option("--max-len", max_len, "decode length cap");

  auto* dec = app.add_subcommand("decode", "write hypothesis lines");
  dec->add_option("--ckpt", ckpt, "checkpoint")->required();
  dec->add_option("--manifest", manifest, "manifest to decode")->required();
  dec->add_option("--out", out, "hypotheses output path")->required();
  dec->add_option("--beam", beam, "beam width");
  dec->add_option("--max-len", max_len, "decode length cap");

  auto* abl = app.add_subcommand("ablate", "train 3 variants and compare");
  abl->add_option("--kind", kind, "streams|fusion|blocks")->required();
  abl->add_option("--config", config_path, "config file")->required();
  abl->add_option("--out", out, "output directory")->required();
  abl->add_option("--seed", seed, "override train.seed");
  abl->add_option("--threads", threads, "data-parallel shards");

  auto* emb = app.add_subcommand("dump-embeddings", "mean-pooled stream features per utterance");
  emb->add_option("--ckpt", ckpt, "checkpoint")->required();
  emb->add_option("--manifest", manifest, "manifest")->required();
  emb->add_option("--which", which, "shallow|deep");
  emb->add_option("--out", out, "output CSV")->required();

  auto* prb = app.add_subcommand("probe", "speaker probe on an embeddings CSV");
  prb->add_option("--embeddings", embeddings, "embeddings CSV")->required();

  auto* gc = app.add_subcommand("grad-check", "end-to-end finite-difference check");
  gc->add_option("--seed", seed, "prng seed");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    app.exit(e);
    return 0;
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;  // usage error
  }

  try {
    if (synth->parsed()) return cmd_synth_data(config_path, seed, out, force);
    if (feat->parsed()) return cmd_featurize(wav, out, config_path);
    if (train->parsed()) return cmd_train(config_path, out, seed, deterministic, threads);
    if (eval->parsed()) return cmd_evaluate(ckpt, manifest, out, beam, max_len);
    if (dec->parsed()) return cmd_decode(ckpt, manifest, out, beam, max_len);
    if (abl->parsed()) return cmd_ablate(kind, config_path, out, seed, threads);
    if (emb->parsed()) return cmd_dump_embeddings(ckpt, manifest, which, out);
    if (prb->parsed()) return cmd_probe(embeddings);
    if (gc->parsed()) return cmd_grad_check(seed);
  } catch (const NumericError& e) {
    std::fprintf(stderr, "numeric failure: %s\n", e.what());
    return 3;
  } catch (const DataError& e) {
    std::fprintf(stderr, "data error: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  }
  return 1;
}

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <vector>

#include "tstrm/data.hpp"
#include "tstrm/rng.hpp"
#include "tstrm/synth.hpp"
#include "tstrm/train.hpp"

using namespace tstrm;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& tag) {
  fs::path p = fs::temp_directory_path() / ("tstrm_test_" + tag);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string file_bytes(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  REQUIRE(is.good());
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

}  // namespace

TEST_CASE("TSTF round trip preserves shape and f32-quantized values") {
  fs::path dir = temp_dir("tstf");
  Rng rng(5);
  std::vector<long> shape = {7, 13};
  std::vector<double> values(7 * 13);
  for (auto& v : values) v = rng.normal();
  std::string path = (dir / "a.tstf").string();
  write_tstf(path, shape, values);

  std::vector<long> shape2;
  std::vector<double> values2;
  read_tstf(path, shape2, values2);
  CHECK(shape2 == shape);
  REQUIRE(values2.size() == values.size());
  for (size_t i = 0; i < values.size(); ++i)
    CHECK(values2[i] == static_cast<double>(static_cast<float>(values[i])));
}

TEST_CASE("TSTF rejects bad input") {
  fs::path dir = temp_dir("tstf_bad");
  std::vector<long> shape;
  std::vector<double> values;
  CHECK_THROWS_AS(read_tstf((dir / "missing.tstf").string(), shape, values), DataError);

  std::ofstream(dir / "junk.tstf", std::ios::binary) << "NOPExxxxxxxxxxxx";
  CHECK_THROWS_AS(read_tstf((dir / "junk.tstf").string(), shape, values), DataError);

  write_tstf((dir / "ok.tstf").string(), {2, 3}, std::vector<double>(6, 1.0));
  std::string bytes = file_bytes(dir / "ok.tstf");
  std::ofstream(dir / "trunc.tstf", std::ios::binary) << bytes.substr(0, bytes.size() - 5);
  CHECK_THROWS_AS(read_tstf((dir / "trunc.tstf").string(), shape, values), DataError);

  CHECK_THROWS_AS(write_tstf((dir / "bad.tstf").string(), {2, 3}, std::vector<double>(5, 0.0)),
                  DataError);
}

TEST_CASE("manifest round trip and validation") {
  fs::path dir = temp_dir("manifest");
  std::vector<Utterance> utts(2);
  utts[0] = {"u0", "features/u0.tstf", {1, 2, 3}, 0, 0};
  utts[1] = {"u1", "features/u1.tstf", {4}, 3, 1};
  std::string path = (dir / "m.tsv").string();
  write_manifest(path, utts);

  auto back = read_manifest(path);
  REQUIRE(back.size() == 2);
  CHECK(back[0].id == "u0");
  CHECK(back[0].transcript == std::vector<long>({1, 2, 3}));
  CHECK(back[1].speaker_id == 3);
  CHECK(back[1].gender == 1);

  std::ofstream(dir / "dup.tsv", std::ios::binary)
      << "a\tf.tstf\t1\t0\t0\na\tg.tstf\t2\t0\t0\n";
  CHECK_THROWS_AS(read_manifest((dir / "dup.tsv").string()), DataError);

  std::ofstream(dir / "short.tsv", std::ios::binary) << "a\tf.tstf\t1\t0\n";
  CHECK_THROWS_AS(read_manifest((dir / "short.tsv").string()), DataError);

  std::ofstream(dir / "gender.tsv", std::ios::binary) << "a\tf.tstf\t1\t0\t7\n";
  CHECK_THROWS_AS(read_manifest((dir / "gender.tsv").string()), DataError);

  CHECK(resolve_path("/data/corpus/m.tsv", "features/u0.tstf") == "/data/corpus/features/u0.tstf");
  CHECK(resolve_path("/data/corpus/m.tsv", "/abs/u0.tstf") == "/abs/u0.tstf");
  CHECK(resolve_path("m.tsv", "features/u0.tstf") == "features/u0.tstf");
}

TEST_CASE("config parsing: dotted keys, comments, types") {
  Config cfg = Config::from_string(
      "# a comment\n"
      "model.d_m = 128   # trailing comment\n"
      "  train.lr_scale=0.5\n"
      "name = hello world\n"
      "flag = true\n"
      "\n");
  CHECK(cfg.get_long("model.d_m", 0) == 128);
  CHECK(cfg.get_double("train.lr_scale", 0) == doctest::Approx(0.5));
  CHECK(cfg.get_string("name") == "hello world");
  CHECK(cfg.get_bool("flag", false));
  CHECK(cfg.get_long("missing.key", 42) == 42);
  CHECK_THROWS_AS(cfg.get_string("missing.key"), DataError);
  CHECK_THROWS_AS(Config::from_string("no equals sign\n"), DataError);
  CHECK_THROWS_AS(Config::from_string("k = v\n").get_long("k", 0), DataError);

  // to_string -> from_string round trip
  Config back = Config::from_string(cfg.to_string());
  CHECK(back.entries() == cfg.entries());
}

TEST_CASE("checkpoint save/load/save is bitwise identical") {
  fs::path dir = temp_dir("ckpt");
  Rng rng(9);
  Checkpoint ckpt;
  ckpt.step = 1234;
  ckpt.config_snapshot = "model.d_m = 16\n";
  for (int i = 0; i < 3; ++i) {
    CheckpointEntry e;
    e.name = "param" + std::to_string(i);
    e.shape = {4, 5};
    e.values.resize(20);
    for (auto& v : e.values) v = rng.normal();
    if (i < 2) {
      e.adam_m.resize(20);
      e.adam_v.resize(20);
      for (auto& v : e.adam_m) v = rng.normal();
      for (auto& v : e.adam_v) v = rng.uniform(0, 1);
    }
    ckpt.entries.push_back(std::move(e));
  }
  std::string p1 = (dir / "a.ckpt").string();
  std::string p2 = (dir / "b.ckpt").string();
  save_checkpoint(p1, ckpt);
  Checkpoint back = load_checkpoint(p1);
  CHECK(back.step == ckpt.step);
  CHECK(back.config_snapshot == ckpt.config_snapshot);
  REQUIRE(back.entries.size() == 3);
  CHECK(back.entries[0].values == ckpt.entries[0].values);
  CHECK(back.entries[1].adam_v == ckpt.entries[1].adam_v);
  save_checkpoint(p2, back);
  CHECK(file_bytes(p1) == file_bytes(p2));
}

TEST_CASE("metrics CSV: single header, strict format") {
  fs::path dir = temp_dir("metrics");
  std::string path = (dir / "metrics.csv").string();
  append_metrics_row(path, 1, 10, 3.5, 2.25, 2.625, 0.75);
  append_metrics_row(path, 2, 20, 3.0, 2.0, 2.3, 0.5);

  std::ifstream is(path);
  std::string line;
  REQUIRE(std::getline(is, line));
  CHECK(line == "epoch,step,ctc,att,joint,dev_cer");
  long rows = 0;
  while (std::getline(is, line)) {
    ++rows;
    // strict reader: 6 comma fields, each parseable with '.' decimals
    std::istringstream ss(line);
    std::string field;
    int n = 0;
    while (std::getline(ss, field, ',')) {
      CHECK(field.find_first_not_of("0123456789.eE+-") == std::string::npos);
      ++n;
    }
    CHECK(n == 6);
  }
  CHECK(rows == 2);
}

TEST_CASE("synth corpus: determinism, overwrite refusal, manifest counts") {
  SynthSpec spec;
  spec.n_speakers = 2;
  spec.n_tokens = 4;
  spec.utterances_per_speaker = 5;
  spec.n_mels = 16;
  spec.seed = 123;
  fs::path d1 = temp_dir("synth1");
  fs::path d2 = temp_dir("synth2");
  SynthResult r1 = synth_corpus(spec, d1.string(), false);
  SynthResult r2 = synth_corpus(spec, d2.string(), false);
  CHECK(r1.n_utterances == 10);
  CHECK(read_manifest(r1.manifest_train).size() + read_manifest(r1.manifest_dev).size() == 10);

  // same seed -> bitwise identical features and manifests
  CHECK(file_bytes(d1 / "features/spk1_utt3.tstf") == file_bytes(d2 / "features/spk1_utt3.tstf"));
  CHECK(file_bytes(d1 / "manifest.tsv") == file_bytes(d2 / "manifest.tsv"));

  CHECK_THROWS_AS(synth_corpus(spec, d1.string(), false), DataError);
  CHECK_NOTHROW(synth_corpus(spec, d1.string(), true));

  SynthSpec bad = spec;
  bad.min_transcript_len = 9;
  bad.max_transcript_len = 3;
  CHECK_THROWS_AS(synth_corpus(bad, temp_dir("synth_bad").string(), true), DataError);
}

TEST_CASE("synth corpus: degenerate spec makes speakers indistinguishable") {
  SynthSpec spec;
  spec.n_speakers = 2;
  spec.n_tokens = 1;  // every transcript is the same token sequence
  spec.utterances_per_speaker = 1;
  spec.min_transcript_len = spec.max_transcript_len = 3;
  spec.min_frames_per_token = spec.max_frames_per_token = 6;
  spec.speaker_tilt_scale = 0.0;
  spec.noise_sigma = 0.0;
  spec.n_mels = 12;
  fs::path dir = temp_dir("synth_degenerate");
  synth_corpus(spec, dir.string(), false);
  CHECK(file_bytes(dir / "features/spk0_utt0.tstf") ==
        file_bytes(dir / "features/spk1_utt0.tstf"));
}

TEST_CASE("synth corpus: clean tokens place their energy at the assigned mel bin") {
  SynthSpec spec;
  spec.n_speakers = 1;
  spec.n_tokens = 4;
  spec.utterances_per_speaker = 2;
  spec.min_frames_per_token = spec.max_frames_per_token = 5;
  spec.speaker_tilt_scale = 0.0;
  spec.noise_sigma = 0.0;
  spec.n_mels = 16;
  spec.seed = 77;
  fs::path dir = temp_dir("synth_argmax");
  SynthResult r = synth_corpus(spec, dir.string(), false);
  for (const auto& u : read_manifest(r.manifest_all)) {
    std::vector<long> shape;
    std::vector<double> values;
    read_tstf(resolve_path(r.manifest_all, u.path), shape, values);
    REQUIRE(shape.size() == 2);
    long dims = shape[1];
    for (size_t i = 0; i < u.transcript.size(); ++i) {
      long want = u.transcript[i] * spec.n_mels / spec.n_tokens;
      for (long t = static_cast<long>(i) * 5; t < static_cast<long>(i + 1) * 5; ++t) {
        long argmax = 0;
        for (long b = 1; b < spec.n_mels; ++b)
          if (values[static_cast<size_t>(t * dims + b)] >
              values[static_cast<size_t>(t * dims + argmax)])
            argmax = b;
        CHECK(argmax == want);
      }
    }
  }
}

TEST_CASE("speaker probe: one-hot embeddings are perfectly separable") {
  fs::path dir = temp_dir("probe_onehot");
  std::string path = (dir / "emb.csv").string();
  std::ofstream os(path, std::ios::binary);
  os << "utt_id,speaker_id,v1,v2,v3,v4,v5,v6,v7,v8\n";
  for (int s = 0; s < 8; ++s)
    for (int u = 0; u < 6; ++u) {
      os << "spk" << s << "_u" << u << ',' << s;
      for (int k = 0; k < 8; ++k) os << ',' << (k == s ? 1 : 0);
      os << '\n';
    }
  os.close();
  CHECK(speaker_probe(path) == doctest::Approx(1.0));
}

TEST_CASE("speaker probe: pure-noise embeddings score near chance") {
  fs::path dir = temp_dir("probe_noise");
  std::string path = (dir / "emb.csv").string();
  std::ofstream os(path, std::ios::binary);
  os << "utt_id,speaker_id,v1,v2,v3,v4,v5,v6,v7,v8\n";
  Rng rng(4242);
  for (int s = 0; s < 8; ++s)
    for (int u = 0; u < 40; ++u) {
      os << "spk" << s << "_u" << u << ',' << s;
      for (int k = 0; k < 8; ++k) os << ',' << format_double(rng.normal());
      os << '\n';
    }
  os.close();
  double acc = speaker_probe(path);
  CHECK(acc == doctest::Approx(0.125).epsilon(0.8));  // 1/8 +- 0.1 absolute
  CHECK(acc >= 0.025);
  CHECK(acc <= 0.225);
}

TEST_CASE("speaker probe: degenerate inputs are rejected") {
  fs::path dir = temp_dir("probe_bad");
  std::string one_speaker = (dir / "one.csv").string();
  std::ofstream os(one_speaker, std::ios::binary);
  os << "utt_id,speaker_id,v1\n";
  for (int u = 0; u < 6; ++u) os << "u" << u << ",0," << u << "\n";
  os.close();
  CHECK_THROWS_AS(speaker_probe(one_speaker), DataError);

  std::string sparse = (dir / "sparse.csv").string();
  std::ofstream os2(sparse, std::ios::binary);
  os2 << "utt_id,speaker_id,v1\n";
  os2 << "a,0,1\nb,0,2\nc,1,3\nd,1,4\n";  // only 2 utterances per speaker
  os2.close();
  CHECK_THROWS_AS(speaker_probe(sparse), DataError);
}

TEST_CASE("Noam schedule: warmup ramp then inverse-sqrt decay") {
  Adam adam;
  adam.d_m = 256;
  adam.warmup_steps = 100;
  adam.lr_scale = 1.0;
  CHECK(adam.learning_rate(50) < adam.learning_rate(100));
  // peak at warmup: c * w^{-1/2}
  CHECK(adam.learning_rate(100) ==
        doctest::Approx(1.0 / std::sqrt(256.0) / std::sqrt(100.0)));
  // pure s^{-1/2} decay after warmup: lr(4w) == lr(w)/2 exactly
  CHECK(adam.learning_rate(400) == doctest::Approx(adam.learning_rate(100) / 2.0));
}

TEST_CASE("Adam minimizes a quadratic") {
  Tensor x = Tensor::from({1}, {10.0});
  x.set_requires_grad(true);
  ParamMap params = {{"x", &x}};
  Adam adam;
  adam.d_m = 1;
  adam.warmup_steps = 10;
  adam.init(params);
  for (int i = 0; i < 400; ++i) {
    x.zero_grad();
    Tensor loss = mul(add_scalar(x, -3.0), add_scalar(x, -3.0));
    sum(loss).backward();
    adam.step(params);
  }
  CHECK(x.item() == doctest::Approx(3.0).epsilon(0.01));
}

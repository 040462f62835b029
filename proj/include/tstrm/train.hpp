#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "tstrm/data.hpp"
#include "tstrm/model.hpp"

namespace tstrm {

struct TrainConfig {
  std::string train_manifest;
  std::string dev_manifest;
  long epochs = 10;
  long batch_size = 8;
  long warmup_steps = 1000;
  double lr_scale = 1.0;
  std::uint64_t seed = 1;
  long decode_max_len = 32;
  long decode_beam = 1;

  static TrainConfig from_config(const Config& cfg);
};

// Adam with the Noam inverse-sqrt warmup schedule. State lives alongside the
// parameters it belongs to (same canonical names), so checkpoints carry it.
struct Adam {
  double beta1 = 0.9;
  double beta2 = 0.98;
  double eps = 1e-9;
  double lr_scale = 1.0;
  long warmup_steps = 1000;
  long d_m = 256;
  long step_count = 0;
  std::vector<std::vector<double>> m, v;  // parallel to the ParamMap order

  void init(const ParamMap& params);
  double learning_rate(long step) const;  // Noam schedule, 1-based step
  void step(const ParamMap& params);      // applies grads, advances step_count
};

struct TrainResult {
  double best_dev_cer = 1e9;
  long best_epoch = -1;
  std::string best_checkpoint;
  std::string metrics_path;
  long steps = 0;
};

struct EvalResult {
  ErrorRateReport aggregate;  // micro-average over the manifest
  std::vector<std::string> per_utterance_csv;  // `utt_id,edits,ref_len,cer` rows
};

// Full training driver: reads manifests from cfg, trains, appends one
// metrics.csv row per epoch, keeps the best-dev checkpoint in out_dir.
TrainResult train_model(const Config& cfg, const std::string& out_dir, int threads);

// Dev/test scoring with greedy (beam=1) or beam decoding per the config.
EvalResult evaluate_model(Model& model, const std::string& manifest_path,
                          const TrainConfig& tcfg);

// Loads the model (and config snapshot) stored by save_model_checkpoint.
Model model_from_checkpoint(const std::string& path, Config* cfg_out = nullptr);
void save_model_checkpoint(const std::string& path, Model& model, Adam* adam,
                           const std::string& config_snapshot, std::uint64_t step);

// kind in {streams, fusion, blocks}; trains 3 variants on identical data and
// writes `variant,params,dev_cer` rows to out_dir/ablation_<kind>.csv.
std::string run_ablation(const std::string& kind, const Config& cfg, const std::string& out_dir,
                         int threads);

// Mean-pooled stream outputs, one `utt_id,speaker_id,v1..vc` row per
// utterance, written to csv_path. which is "shallow" or "deep".
void dump_embeddings(Model& model, const std::string& manifest_path, const std::string& which,
                     const std::string& csv_path);

// Multinomial logistic regression on an embeddings CSV: 50/50 stratified
// split, 500 full-batch gradient steps, returns held-out accuracy.
double speaker_probe(const std::string& csv_path);

// End-to-end finite-difference check of the joint loss on a tiny model.
// Throws NumericError when any sampled coordinate fails.
GradCheckReport run_grad_check(std::uint64_t seed);

}  // namespace tstrm

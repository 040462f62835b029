#pragma once

#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "tstrm/backbone.hpp"
#include "tstrm/tensor.hpp"

namespace tstrm {

// Maps to process exit code 2 (bad files, malformed manifests/configs).
struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Maps to process exit code 3 (NaN loss, failed grad check).
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// TSTF feature files: magic "TSTF", version u32=1, ndim u32, extents u64 LE,
// payload f32 LE row-major. Values are widened to f64 in memory.
// ---------------------------------------------------------------------------

void write_tstf(const std::string& path, const std::vector<long>& shape,
                const std::vector<double>& values);
void read_tstf(const std::string& path, std::vector<long>& shape, std::vector<double>& values);

// ---------------------------------------------------------------------------
// Manifest: UTF-8, LF, TAB-separated `id path transcript speaker gender`,
// transcript as space-separated token ids.
// ---------------------------------------------------------------------------

struct Utterance {
  std::string id;
  std::string path;  // feature file, relative to the manifest's directory
  std::vector<long> transcript;
  long speaker_id = 0;
  long gender = 0;  // synthetic attribute in {0,1}
};

std::vector<Utterance> read_manifest(const std::string& path);
void write_manifest(const std::string& path, const std::vector<Utterance>& utts);

// Resolves an utterance's feature path against the manifest location.
std::string resolve_path(const std::string& manifest_path, const std::string& rel);

// ---------------------------------------------------------------------------
// Config: line-oriented `key = value` with dotted keys, '#' comments.
// ---------------------------------------------------------------------------

class Config {
 public:
  Config() = default;
  static Config from_file(const std::string& path);
  static Config from_string(const std::string& text);

  bool has(const std::string& key) const { return kv_.count(key) > 0; }
  void set(const std::string& key, const std::string& value) { kv_[key] = value; }

  std::string get_string(const std::string& key) const;
  std::string get_string(const std::string& key, const std::string& fallback) const;
  long get_long(const std::string& key, long fallback) const;
  double get_double(const std::string& key, double fallback) const;
  bool get_bool(const std::string& key, bool fallback) const;

  // Serialized `key = value` lines, sorted by key (used for checkpoint snapshots).
  std::string to_string() const;

  const std::map<std::string, std::string>& entries() const { return kv_; }

 private:
  std::map<std::string, std::string> kv_;
};

// ---------------------------------------------------------------------------
// Checkpoints: params + Adam state keyed by canonical names, step counter,
// config snapshot. f64 payloads so save->load->save is bitwise identical.
// ---------------------------------------------------------------------------

struct CheckpointEntry {
  std::string name;
  std::vector<long> shape;
  std::vector<double> values;
  std::vector<double> adam_m;  // empty if no optimizer state
  std::vector<double> adam_v;
};

struct Checkpoint {
  std::uint64_t step = 0;
  std::string config_snapshot;
  std::vector<CheckpointEntry> entries;  // sorted by name on save
};

void save_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::string& path);

// ---------------------------------------------------------------------------
// Metrics CSV: header `epoch,step,ctc,att,joint,dev_cer`, '.' decimals, LF.
// ---------------------------------------------------------------------------

void append_metrics_row(const std::string& path, long epoch, long step, double ctc, double att,
                        double joint, double dev_cer);
std::string format_double(double v);

}  // namespace tstrm

#include "tstrm/data.hpp"

#include <algorithm>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>

namespace tstrm {
namespace {

void put_u32(std::ostream& os, std::uint32_t v) {
  unsigned char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
  os.write(reinterpret_cast<const char*>(b), 4);
}

void put_u64(std::ostream& os, std::uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
  os.write(reinterpret_cast<const char*>(b), 8);
}

std::uint32_t get_u32(std::istream& is, const std::string& what) {
  unsigned char b[4];
  if (!is.read(reinterpret_cast<char*>(b), 4)) throw DataError("truncated read: " + what);
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
  return v;
}

std::uint64_t get_u64(std::istream& is, const std::string& what) {
  unsigned char b[8];
  if (!is.read(reinterpret_cast<char*>(b), 8)) throw DataError("truncated read: " + what);
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return v;
}

void put_f32(std::ostream& os, float v) {
  std::uint32_t bits;
  std::memcpy(&bits, &v, 4);
  put_u32(os, bits);
}

float get_f32(std::istream& is, const std::string& what) {
  std::uint32_t bits = get_u32(is, what);
  float v;
  std::memcpy(&v, &bits, 4);
  return v;
}

void put_f64(std::ostream& os, double v) {
  std::uint64_t bits;
  std::memcpy(&bits, &v, 8);
  put_u64(os, bits);
}

double get_f64(std::istream& is, const std::string& what) {
  std::uint64_t bits = get_u64(is, what);
  double v;
  std::memcpy(&v, &bits, 8);
  return v;
}

void put_str(std::ostream& os, const std::string& s) {
  put_u64(os, s.size());
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::string get_str(std::istream& is, const std::string& what) {
  std::uint64_t n = get_u64(is, what);
  std::string s(n, '\0');
  if (n > 0 && !is.read(s.data(), static_cast<std::streamsize>(n)))
    throw DataError("truncated read: " + what);
  return s;
}

std::string trim(const std::string& s) {
  size_t a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  size_t b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

long parse_long(const std::string& s, const std::string& what) {
  try {
    size_t pos = 0;
    long v = std::stol(s, &pos);
    if (pos != s.size()) throw DataError("trailing characters in " + what + ": '" + s + "'");
    return v;
  } catch (const DataError&) {
    throw;
  } catch (const std::exception&) {
    throw DataError("not an integer in " + what + ": '" + s + "'");
  }
}

}  // namespace

void write_tstf(const std::string& path, const std::vector<long>& shape,
                const std::vector<double>& values) {
  std::uint64_t n = 1;
  for (long e : shape) {
    if (e <= 0) throw DataError("write_tstf: non-positive extent");
    n *= static_cast<std::uint64_t>(e);
  }
  if (n != values.size()) throw DataError("write_tstf: extent/value count mismatch");
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("write_tstf: cannot open " + path);
  os.write("TSTF", 4);
  put_u32(os, 1);
  put_u32(os, static_cast<std::uint32_t>(shape.size()));
  for (long e : shape) put_u64(os, static_cast<std::uint64_t>(e));
  for (double v : values) put_f32(os, static_cast<float>(v));
  if (!os) throw DataError("write_tstf: write failed for " + path);
}

void read_tstf(const std::string& path, std::vector<long>& shape, std::vector<double>& values) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("read_tstf: cannot open " + path);
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, "TSTF", 4) != 0)
    throw DataError("read_tstf: bad magic in " + path);
  std::uint32_t version = get_u32(is, path + " version");
  if (version != 1) throw DataError("read_tstf: unsupported version in " + path);
  std::uint32_t ndim = get_u32(is, path + " ndim");
  if (ndim == 0 || ndim > 8) throw DataError("read_tstf: bad ndim in " + path);
  shape.clear();
  std::uint64_t n = 1;
  for (std::uint32_t i = 0; i < ndim; ++i) {
    std::uint64_t e = get_u64(is, path + " extent");
    if (e == 0 || e > (1ull << 32)) throw DataError("read_tstf: bad extent in " + path);
    shape.push_back(static_cast<long>(e));
    n *= e;
  }
  values.resize(n);
  for (std::uint64_t i = 0; i < n; ++i)
    values[i] = static_cast<double>(get_f32(is, path + " payload"));
}

std::vector<Utterance> read_manifest(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw DataError("read_manifest: cannot open " + path);
  std::vector<Utterance> utts;
  std::map<std::string, bool> seen;
  std::string line;
  long lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::vector<std::string> fields;
    size_t start = 0;
    while (true) {
      size_t tab = line.find('\t', start);
      fields.push_back(line.substr(start, tab == std::string::npos ? tab : tab - start));
      if (tab == std::string::npos) break;
      start = tab + 1;
    }
    if (fields.size() != 5)
      throw DataError("read_manifest: " + path + ":" + std::to_string(lineno) +
                      ": expected 5 TAB-separated fields, got " + std::to_string(fields.size()));
    Utterance u;
    u.id = fields[0];
    u.path = fields[1];
    std::istringstream ts(fields[2]);
    std::string tok;
    while (ts >> tok) u.transcript.push_back(parse_long(tok, "transcript of " + u.id));
    u.speaker_id = parse_long(fields[3], "speaker of " + u.id);
    u.gender = parse_long(fields[4], "gender of " + u.id);
    if (u.gender != 0 && u.gender != 1)
      throw DataError("read_manifest: gender must be 0 or 1 for " + u.id);
    if (seen.count(u.id)) throw DataError("read_manifest: duplicate id " + u.id);
    seen[u.id] = true;
    utts.push_back(std::move(u));
  }
  return utts;
}

void write_manifest(const std::string& path, const std::vector<Utterance>& utts) {
  std::ofstream os(path, std::ios::binary);  // binary: force LF on every platform
  if (!os) throw DataError("write_manifest: cannot open " + path);
  for (const auto& u : utts) {
    os << u.id << '\t' << u.path << '\t';
    for (size_t i = 0; i < u.transcript.size(); ++i) {
      if (i) os << ' ';
      os << u.transcript[i];
    }
    os << '\t' << u.speaker_id << '\t' << u.gender << '\n';
  }
  if (!os) throw DataError("write_manifest: write failed for " + path);
}

std::string resolve_path(const std::string& manifest_path, const std::string& rel) {
  if (!rel.empty() && rel.front() == '/') return rel;
  size_t slash = manifest_path.find_last_of('/');
  if (slash == std::string::npos) return rel;
  return manifest_path.substr(0, slash + 1) + rel;
}

Config Config::from_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw DataError("config: cannot open " + path);
  std::ostringstream ss;
  ss << is.rdbuf();
  return from_string(ss.str());
}

Config Config::from_string(const std::string& text) {
  Config cfg;
  std::istringstream is(text);
  std::string line;
  long lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    size_t hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    size_t eq = line.find('=');
    if (eq == std::string::npos)
      throw DataError("config line " + std::to_string(lineno) + ": expected 'key = value'");
    std::string key = trim(line.substr(0, eq));
    std::string value = trim(line.substr(eq + 1));
    if (key.empty()) throw DataError("config line " + std::to_string(lineno) + ": empty key");
    cfg.kv_[key] = value;
  }
  return cfg;
}

std::string Config::get_string(const std::string& key) const {
  auto it = kv_.find(key);
  if (it == kv_.end()) throw DataError("config: missing required key '" + key + "'");
  return it->second;
}

std::string Config::get_string(const std::string& key, const std::string& fallback) const {
  auto it = kv_.find(key);
  return it == kv_.end() ? fallback : it->second;
}

long Config::get_long(const std::string& key, long fallback) const {
  auto it = kv_.find(key);
  if (it == kv_.end()) return fallback;
  return parse_long(it->second, "config key '" + key + "'");
}

double Config::get_double(const std::string& key, double fallback) const {
  auto it = kv_.find(key);
  if (it == kv_.end()) return fallback;
  try {
    size_t pos = 0;
    double v = std::stod(it->second, &pos);
    if (pos != it->second.size()) throw DataError("");
    return v;
  } catch (const std::exception&) {
    throw DataError("config: key '" + key + "' is not a number: '" + it->second + "'");
  }
}

bool Config::get_bool(const std::string& key, bool fallback) const {
  auto it = kv_.find(key);
  if (it == kv_.end()) return fallback;
  if (it->second == "true" || it->second == "1") return true;
  if (it->second == "false" || it->second == "0") return false;
  throw DataError("config: key '" + key + "' is not a bool: '" + it->second + "'");
}

std::string Config::to_string() const {
  std::ostringstream os;
  for (const auto& [k, v] : kv_) os << k << " = " << v << "\n";
  return os.str();
}

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  std::vector<const CheckpointEntry*> sorted;
  for (const auto& e : ckpt.entries) sorted.push_back(&e);
  std::sort(sorted.begin(), sorted.end(),
            [](const CheckpointEntry* a, const CheckpointEntry* b) { return a->name < b->name; });
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("save_checkpoint: cannot open " + path);
  os.write("TSCK", 4);
  put_u32(os, 1);
  put_u64(os, ckpt.step);
  put_str(os, ckpt.config_snapshot);
  put_u64(os, sorted.size());
  for (const auto* e : sorted) {
    put_str(os, e->name);
    put_u32(os, static_cast<std::uint32_t>(e->shape.size()));
    std::uint64_t n = 1;
    for (long d : e->shape) {
      put_u64(os, static_cast<std::uint64_t>(d));
      n *= static_cast<std::uint64_t>(d);
    }
    if (n != e->values.size())
      throw DataError("save_checkpoint: shape/value mismatch for " + e->name);
    if (!e->adam_m.empty() && (e->adam_m.size() != n || e->adam_v.size() != n))
      throw DataError("save_checkpoint: optimizer state size mismatch for " + e->name);
    put_u32(os, e->adam_m.empty() ? 0u : 1u);
    for (double v : e->values) put_f64(os, v);
    for (double v : e->adam_m) put_f64(os, v);
    for (double v : e->adam_v) put_f64(os, v);
  }
  if (!os) throw DataError("save_checkpoint: write failed for " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("load_checkpoint: cannot open " + path);
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, "TSCK", 4) != 0)
    throw DataError("load_checkpoint: bad magic in " + path);
  if (get_u32(is, "version") != 1) throw DataError("load_checkpoint: unsupported version");
  Checkpoint ckpt;
  ckpt.step = get_u64(is, "step");
  ckpt.config_snapshot = get_str(is, "config snapshot");
  std::uint64_t n_entries = get_u64(is, "entry count");
  for (std::uint64_t i = 0; i < n_entries; ++i) {
    CheckpointEntry e;
    e.name = get_str(is, "entry name");
    std::uint32_t ndim = get_u32(is, e.name + " ndim");
    std::uint64_t n = 1;
    for (std::uint32_t d = 0; d < ndim; ++d) {
      std::uint64_t ext = get_u64(is, e.name + " extent");
      e.shape.push_back(static_cast<long>(ext));
      n *= ext;
    }
    bool has_opt = get_u32(is, e.name + " opt flag") != 0;
    e.values.resize(n);
    for (auto& v : e.values) v = get_f64(is, e.name + " values");
    if (has_opt) {
      e.adam_m.resize(n);
      e.adam_v.resize(n);
      for (auto& v : e.adam_m) v = get_f64(is, e.name + " adam m");
      for (auto& v : e.adam_v) v = get_f64(is, e.name + " adam v");
    }
    ckpt.entries.push_back(std::move(e));
  }
  return ckpt;
}

std::string format_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.9g", v);
  return buf;
}

void append_metrics_row(const std::string& path, long epoch, long step, double ctc, double att,
                        double joint, double dev_cer) {
  bool fresh = !std::ifstream(path).good();
  std::ofstream os(path, std::ios::binary | std::ios::app);
  if (!os) throw DataError("append_metrics_row: cannot open " + path);
  if (fresh) os << "epoch,step,ctc,att,joint,dev_cer\n";
  os << epoch << ',' << step << ',' << format_double(ctc) << ',' << format_double(att) << ','
     << format_double(joint) << ',' << format_double(dev_cer) << '\n';
  if (!os) throw DataError("append_metrics_row: write failed for " + path);
}

}  // namespace tstrm

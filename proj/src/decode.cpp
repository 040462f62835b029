#include "tstrm/decode.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace tstrm {

namespace {
// Log-probabilities for the next token given the prefix (sos-framed).
std::vector<double> next_token_logprobs(const std::vector<long>& prefix, const Tensor& memory,
                                        const Decoder& dec, const TransformerConfig& cfg) {
  NoGradGuard ng;
  TransformerConfig eval_cfg = cfg;
  eval_cfg.deterministic = true;
  Rng rng(0);
  Tensor logits = dec.forward(prefix, memory, eval_cfg, rng);
  long L = logits.dim(0), K = logits.dim(1);
  Tensor lp = log_softmax(slice(logits, 0, L - 1, 1), 1);
  std::vector<double> out(static_cast<size_t>(K));
  for (long k = 0; k < K; ++k) out[static_cast<size_t>(k)] = lp.data()[k];
  return out;
}

double rank_score(const Hypothesis& h, bool length_normalize) {
  if (!length_normalize) return h.score;
  // +1 counts the eos step so an empty transcript still has a length.
  return h.score / static_cast<double>(h.tokens.size() + 1);
}
}  // namespace

Hypothesis greedy_decode(const Tensor& memory, const Decoder& dec, const Vocabulary& vocab,
                         const TransformerConfig& cfg, long max_len) {
  if (max_len < 1) throw std::invalid_argument("greedy_decode: max_len must be >= 1");
  Hypothesis h;
  std::vector<long> prefix = {vocab.sos()};
  for (long step = 0; step < max_len; ++step) {
    std::vector<double> lp = next_token_logprobs(prefix, memory, dec, cfg);
    long best = -1;
    for (long k = 0; k < static_cast<long>(lp.size()); ++k) {
      if (k == vocab.sos()) continue;  // never re-emit sos
      if (best < 0 || lp[static_cast<size_t>(k)] > lp[static_cast<size_t>(best)]) best = k;
    }
    h.score += lp[static_cast<size_t>(best)];
    if (best == vocab.eos()) {
      h.terminated = true;
      break;
    }
    h.tokens.push_back(best);
    prefix.push_back(best);
  }
  return h;
}

std::vector<Hypothesis> beam_decode(const Tensor& memory, const Decoder& dec,
                                    const Vocabulary& vocab, const TransformerConfig& cfg,
                                    long beam, long max_len, bool length_normalize) {
  if (beam < 1) throw std::invalid_argument("beam_decode: beam must be >= 1");
  std::vector<Hypothesis> active = {Hypothesis{}};
  std::vector<Hypothesis> done;
  for (long step = 0; step < max_len && !active.empty(); ++step) {
    std::vector<Hypothesis> candidates;
    for (const auto& h : active) {
      std::vector<long> prefix = {vocab.sos()};
      prefix.insert(prefix.end(), h.tokens.begin(), h.tokens.end());
      std::vector<double> lp = next_token_logprobs(prefix, memory, dec, cfg);
      for (long k = 0; k < static_cast<long>(lp.size()); ++k) {
        if (k == vocab.sos()) continue;  // never re-emit sos
        Hypothesis next = h;
        next.score += lp[static_cast<size_t>(k)];
        if (k == vocab.eos()) next.terminated = true;
        else next.tokens.push_back(k);
        candidates.push_back(std::move(next));
      }
    }
    // Prune within a step by raw cumulative score (so beam=1 is exactly
    // greedy); length normalization applies to the final ranking only.
    std::stable_sort(candidates.begin(), candidates.end(),
                     [](const Hypothesis& a, const Hypothesis& b) { return a.score > b.score; });
    active.clear();
    for (const auto& c : candidates) {
      if (static_cast<long>(active.size()) >= beam) break;
      if (c.terminated) {
        done.push_back(c);
        if (static_cast<long>(done.size()) >= beam) {
          active.clear();
          break;
        }
      } else {
        active.push_back(c);
      }
    }
  }
  // Unterminated survivors still count at max_len.
  done.insert(done.end(), active.begin(), active.end());
  std::stable_sort(done.begin(), done.end(), [&](const Hypothesis& a, const Hypothesis& b) {
    return rank_score(a, length_normalize) > rank_score(b, length_normalize);
  });
  if (static_cast<long>(done.size()) > beam) done.resize(static_cast<size_t>(beam));
  return done;
}

ErrorRateReport edit_distance_rate(const std::vector<long>& hyp, const std::vector<long>& ref) {
  if (ref.empty()) throw std::invalid_argument("edit_distance_rate: empty reference");
  long n = static_cast<long>(hyp.size()), m = static_cast<long>(ref.size());
  std::vector<long> d(static_cast<size_t>((n + 1) * (m + 1)), 0);
  auto at = [m](long i, long j) { return static_cast<size_t>(i * (m + 1) + j); };
  for (long i = 0; i <= n; ++i) d[at(i, 0)] = i;
  for (long j = 0; j <= m; ++j) d[at(0, j)] = j;
  for (long i = 1; i <= n; ++i)
    for (long j = 1; j <= m; ++j) {
      long sub = d[at(i - 1, j - 1)] + (hyp[static_cast<size_t>(i - 1)] != ref[static_cast<size_t>(j - 1)] ? 1 : 0);
      long ins = d[at(i - 1, j)] + 1;  // extra token in the hypothesis
      long del = d[at(i, j - 1)] + 1;  // token missing from the hypothesis
      d[at(i, j)] = std::min({sub, ins, del});
    }

  ErrorRateReport r;
  r.reference_length = m;
  long i = n, j = m;
  while (i > 0 || j > 0) {
    if (i > 0 && j > 0 &&
        d[at(i, j)] == d[at(i - 1, j - 1)] +
                           (hyp[static_cast<size_t>(i - 1)] != ref[static_cast<size_t>(j - 1)] ? 1 : 0)) {
      if (hyp[static_cast<size_t>(i - 1)] != ref[static_cast<size_t>(j - 1)]) ++r.substitutions;
      --i;
      --j;
    } else if (i > 0 && d[at(i, j)] == d[at(i - 1, j)] + 1) {
      ++r.insertions;
      --i;
    } else {
      ++r.deletions;
      --j;
    }
  }
  r.rate = static_cast<double>(r.substitutions + r.insertions + r.deletions) /
           static_cast<double>(r.reference_length);
  return r;
}

std::string format_hypothesis(const std::string& utt_id, const Hypothesis& h) {
  std::ostringstream os;
  os << utt_id << '\t' << h.score << '\t';
  for (size_t i = 0; i < h.tokens.size(); ++i) os << (i ? " " : "") << h.tokens[i];
  return os.str();
}

}  // namespace tstrm

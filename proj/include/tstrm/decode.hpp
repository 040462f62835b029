#pragma once

#include <string>
#include <vector>

#include "tstrm/loss.hpp"
#include "tstrm/transformer.hpp"

namespace tstrm {

struct Hypothesis {
  std::vector<long> tokens;  // transcript ids, no sos/eos
  double score = 0.0;        // sum of log-probs (length-normalized in beam ranking)
  bool terminated = false;   // ended with eos
};

struct ErrorRateReport {
  long substitutions = 0;
  long insertions = 0;
  long deletions = 0;
  long reference_length = 0;
  double rate = 0.0;
};

// Feeds back the argmax token until eos or max_len.
Hypothesis greedy_decode(const Tensor& memory, const Decoder& dec, const Vocabulary& vocab,
                         const TransformerConfig& cfg, long max_len);

// Fixed-width beam search over decoder log-probs. Hypotheses are ranked by
// score / length when length_normalize is set; beam=1 reproduces greedy
// token for token.
std::vector<Hypothesis> beam_decode(const Tensor& memory, const Decoder& dec,
                                    const Vocabulary& vocab, const TransformerConfig& cfg,
                                    long beam, long max_len, bool length_normalize = true);

// Levenshtein distance with unit costs; counts recovered by backtrace.
ErrorRateReport edit_distance_rate(const std::vector<long>& hyp, const std::vector<long>& ref);

// `utt_id<TAB>score<TAB>token ids space-separated`
std::string format_hypothesis(const std::string& utt_id, const Hypothesis& h);

}  // namespace tstrm

#pragma once

#include <vector>

#include "tstrm/tensor.hpp"

namespace tstrm {

// Token id conventions: transcripts use ids in [0, vocab). CTC adds a blank
// as class 0 (token k occupies class k+1, head width vocab+1). The decoder
// appends sos = vocab and eos = vocab+1 (head width vocab+2).
struct Vocabulary {
  long size = 0;
  long blank_class() const { return 0; }
  long ctc_classes() const { return size + 1; }
  long sos() const { return size; }
  long eos() const { return size + 1; }
  long dec_classes() const { return size + 2; }
};

struct LossBreakdown {
  double ctc = 0.0;
  double att = 0.0;
  double joint = 0.0;
  double lambda = 0.3;
};

// Negative log marginal likelihood over all CTC alignments, computed by the
// forward recursion over the blank-interleaved label sequence in log space.
// logprobs: [T, vocab+1] rows assumed log-softmax normalized. Gradient flows
// into logprobs via the backward recursion.
Tensor ctc_loss(const Tensor& logprobs, const std::vector<long>& target, const Vocabulary& vocab);

// Minimum frame count that can carry the target (repeats need a separating
// blank).
long ctc_min_frames(const std::vector<long>& target);

// Label-smoothed cross-entropy, mean over positions. logits: [L, vocab+2];
// off-target mass is epsilon/(K-1).
Tensor attention_ce(const Tensor& logits, const std::vector<long>& target_out,
                    double smoothing = 0.1);

LossBreakdown joint_loss(double ctc, double att, double lambda = 0.3);

// lambda-interpolated scalar loss on the graph.
Tensor joint_loss_tensor(const Tensor& ctc, const Tensor& att, double lambda);

}  // namespace tstrm

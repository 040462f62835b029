#include "tstrm/loss.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>

namespace tstrm {

namespace {

constexpr double kLogZero = -std::numeric_limits<double>::infinity();

double log_add(double a, double b) {
  if (a == kLogZero) return b;
  if (b == kLogZero) return a;
  double m = std::max(a, b);
  return m + std::log1p(std::exp(std::min(a, b) - m));
}

}  // namespace

long ctc_min_frames(const std::vector<long>& target) {
  long t = static_cast<long>(target.size());
  for (size_t i = 1; i < target.size(); ++i)
    if (target[i] == target[i - 1]) ++t;  // a blank must separate the repeat
  return t;
}

Tensor ctc_loss(const Tensor& logprobs, const std::vector<long>& target,
                const Vocabulary& vocab) {
  if (logprobs.ndim() != 2 || logprobs.dim(1) != vocab.ctc_classes())
    throw DimensionError("ctc_loss: expected [T," + std::to_string(vocab.ctc_classes()) +
                         "] logprobs, got " + shape_str(logprobs.shape()));
  for (long tok : target)
    if (tok < 0 || tok >= vocab.size)
      throw std::invalid_argument("ctc_loss: target token " + std::to_string(tok) +
                                  " outside vocabulary of " + std::to_string(vocab.size));
  long T = logprobs.dim(0);
  long C = logprobs.dim(1);
  if (T < ctc_min_frames(target))
    throw std::invalid_argument("ctc_loss: target needs at least " +
                                std::to_string(ctc_min_frames(target)) + " frames, got " +
                                std::to_string(T));

  // Extended sequence: blank, l1, blank, l2, ..., blank. lab(s) in CTC class
  // space (token k -> class k+1).
  long L = static_cast<long>(target.size());
  long S = 2 * L + 1;
  std::vector<long> lab(static_cast<size_t>(S), vocab.blank_class());
  for (long i = 0; i < L; ++i) lab[static_cast<size_t>(2 * i + 1)] = target[static_cast<size_t>(i)] + 1;

  const double* lp = logprobs.data();
  auto p = [&](long t, long s) { return lp[t * C + lab[static_cast<size_t>(s)]]; };

  // Forward variables include the emission at t.
  std::vector<double> alpha(static_cast<size_t>(T * S), kLogZero);
  alpha[0] = p(0, 0);
  if (S > 1) alpha[1] = p(0, 1);
  for (long t = 1; t < T; ++t)
    for (long s = 0; s < S; ++s) {
      double a = alpha[static_cast<size_t>((t - 1) * S + s)];
      if (s >= 1) a = log_add(a, alpha[static_cast<size_t>((t - 1) * S + s - 1)]);
      // Skip over a blank is allowed unless the two labels are equal.
      if (s >= 2 && lab[static_cast<size_t>(s)] != vocab.blank_class() &&
          lab[static_cast<size_t>(s)] != lab[static_cast<size_t>(s - 2)])
        a = log_add(a, alpha[static_cast<size_t>((t - 1) * S + s - 2)]);
      alpha[static_cast<size_t>(t * S + s)] = (a == kLogZero) ? kLogZero : a + p(t, s);
    }

  double log_p = alpha[static_cast<size_t>((T - 1) * S + S - 1)];
  if (S > 1) log_p = log_add(log_p, alpha[static_cast<size_t>((T - 1) * S + S - 2)]);
  if (log_p == kLogZero)
    throw std::invalid_argument("ctc_loss: no feasible alignment for the target");

  // Backward variables exclude the emission at t (suffix from t+1 on).
  std::vector<double> beta(static_cast<size_t>(T * S), kLogZero);
  beta[static_cast<size_t>((T - 1) * S + S - 1)] = 0.0;
  if (S > 1) beta[static_cast<size_t>((T - 1) * S + S - 2)] = 0.0;
  for (long t = T - 2; t >= 0; --t)
    for (long s = 0; s < S; ++s) {
      double b = beta[static_cast<size_t>((t + 1) * S + s)] + p(t + 1, s);
      if (s + 1 < S) {
        double nb = beta[static_cast<size_t>((t + 1) * S + s + 1)] + p(t + 1, s + 1);
        b = log_add(b, nb);
      }
      if (s + 2 < S && lab[static_cast<size_t>(s + 2)] != vocab.blank_class() &&
          lab[static_cast<size_t>(s + 2)] != lab[static_cast<size_t>(s)]) {
        double nb = beta[static_cast<size_t>((t + 1) * S + s + 2)] + p(t + 1, s + 2);
        b = log_add(b, nb);
      }
      beta[static_cast<size_t>(t * S + s)] = b;
    }

  // d(-logP)/d lp[t,k] = -sum_{s: lab(s)=k} exp(alpha[t,s] + beta[t,s] - logP).
  std::vector<double> grad_lp(static_cast<size_t>(T * C), 0.0);
  for (long t = 0; t < T; ++t)
    for (long s = 0; s < S; ++s) {
      double a = alpha[static_cast<size_t>(t * S + s)];
      if (a == kLogZero) continue;
      double occ = std::exp(a + beta[static_cast<size_t>(t * S + s)] - log_p);
      grad_lp[static_cast<size_t>(t * C + lab[static_cast<size_t>(s)])] -= occ;
    }

  return detail::make_op({}, {-log_p}, {logprobs},
                         [grad_lp = std::move(grad_lp)](detail::Node& n) {
                           auto& pn = *n.parents[0];
                           pn.ensure_grad();
                           double g = n.grad[0];
                           for (size_t i = 0; i < grad_lp.size(); ++i)
                             pn.grad[i] += g * grad_lp[i];
                         });
}

Tensor attention_ce(const Tensor& logits, const std::vector<long>& target_out,
                    double smoothing) {
  if (logits.ndim() != 2)
    throw DimensionError("attention_ce: expected [L,K] logits, got " + shape_str(logits.shape()));
  long L = logits.dim(0);
  long K = logits.dim(1);
  if (L != static_cast<long>(target_out.size()))
    throw std::invalid_argument("attention_ce: " + std::to_string(L) + " logit rows vs " +
                                std::to_string(target_out.size()) + " targets");
  // Smoothed target distribution: 1-eps on the true class, eps/(K-1) elsewhere.
  Tensor q = Tensor::zeros({L, K});
  double off = smoothing / static_cast<double>(K - 1);
  for (long i = 0; i < L; ++i) {
    long tok = target_out[static_cast<size_t>(i)];
    if (tok < 0 || tok >= K)
      throw std::invalid_argument("attention_ce: target id " + std::to_string(tok) +
                                  " outside K=" + std::to_string(K));
    for (long k = 0; k < K; ++k)
      q.data()[i * K + k] = (k == tok) ? 1.0 - smoothing : off;
  }
  Tensor logp = log_softmax(logits, 1);
  return mul_scalar(sum(mul(q, logp)), -1.0 / static_cast<double>(L));
}

LossBreakdown joint_loss(double ctc, double att, double lambda) {
  if (lambda < 0.0 || lambda > 1.0)
    throw std::invalid_argument("joint_loss: lambda must lie in [0,1], got " +
                                std::to_string(lambda));
  LossBreakdown b;
  b.ctc = ctc;
  b.att = att;
  b.lambda = lambda;
  b.joint = lambda * ctc + (1.0 - lambda) * att;
  return b;
}

Tensor joint_loss_tensor(const Tensor& ctc, const Tensor& att, double lambda) {
  if (lambda < 0.0 || lambda > 1.0)
    throw std::invalid_argument("joint_loss: lambda must lie in [0,1]");
  return add(mul_scalar(ctc, lambda), mul_scalar(att, 1.0 - lambda));
}

}  // namespace tstrm

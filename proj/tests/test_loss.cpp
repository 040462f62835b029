#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <vector>

#include "tstrm/loss.hpp"

using namespace tstrm;

namespace {

// Brute-force CTC: enumerate every frame-level path, collapse (remove
// repeats, then blanks), and sum the probabilities of paths matching the
// target. Exponential; only for tiny instances.
double ctc_brute_force(const Tensor& logprobs, const std::vector<long>& target,
                       const Vocabulary& vocab) {
  long T = logprobs.dim(0);
  long C = logprobs.dim(1);
  double total = 0.0;
  std::vector<long> path(static_cast<size_t>(T), 0);
  while (true) {
    // Collapse.
    std::vector<long> collapsed;
    long prev = -1;
    for (long t = 0; t < T; ++t) {
      long c = path[static_cast<size_t>(t)];
      if (c != prev && c != vocab.blank_class()) collapsed.push_back(c - 1);
      prev = c;
    }
    if (collapsed == target) {
      double lp = 0;
      for (long t = 0; t < T; ++t) lp += logprobs.at({t, path[static_cast<size_t>(t)]});
      total += std::exp(lp);
    }
    // Next path in lexicographic order.
    long i = T - 1;
    while (i >= 0 && path[static_cast<size_t>(i)] == C - 1) path[static_cast<size_t>(i--)] = 0;
    if (i < 0) break;
    ++path[static_cast<size_t>(i)];
  }
  return -std::log(total);
}

Tensor random_logprobs(long T, long C, Rng& rng) {
  Tensor x = Tensor::zeros({T, C});
  for (long i = 0; i < x.size(); ++i) x.data()[i] = rng.uniform(-2, 2);
  return log_softmax(x, 1).detach();
}

}  // namespace

TEST_CASE("ctc: T=1 single alignment") {
  Vocabulary vocab{3};
  Rng rng(1);
  Tensor lp = random_logprobs(1, 4, rng);
  Tensor loss = ctc_loss(lp, {1}, vocab);
  CHECK(loss.item() == doctest::Approx(-lp.at({0, 2})).epsilon(1e-12));
}

TEST_CASE("ctc: T=2, single label sums three alignments") {
  Vocabulary vocab{2};
  Rng rng(2);
  Tensor lp = random_logprobs(2, 3, rng);
  long a = 0;  // token 0 -> class 1
  double p1a = std::exp(lp.at({0, a + 1})), p2a = std::exp(lp.at({1, a + 1}));
  double p1b = std::exp(lp.at({0, 0})), p2b = std::exp(lp.at({1, 0}));
  double want = -std::log(p1a * p2a + p1a * p2b + p1b * p2a);
  CHECK(ctc_loss(lp, {a}, vocab).item() == doctest::Approx(want).epsilon(1e-12));
}

TEST_CASE("ctc DP equals brute force on 100 random tiny instances") {
  for (int seed = 0; seed < 100; ++seed) {
    Rng rng(4000 + seed);
    long V = 1 + static_cast<long>(rng.next_below(4));
    long L = 1 + static_cast<long>(rng.next_below(3));
    Vocabulary vocab{V};
    std::vector<long> target;
    for (long i = 0; i < L; ++i) target.push_back(static_cast<long>(rng.next_below(static_cast<std::uint64_t>(V))));
    long tmin = ctc_min_frames(target);
    long T = tmin + static_cast<long>(rng.next_below(static_cast<std::uint64_t>(7 - tmin)));
    Tensor lp = random_logprobs(T, V + 1, rng);
    double dp = ctc_loss(lp, target, vocab).item();
    double bf = ctc_brute_force(lp, target, vocab);
    CHECK(dp == doctest::Approx(bf).epsilon(1e-9));
    CHECK(dp >= 0.0);
    CHECK(std::isfinite(dp));
  }
}

TEST_CASE("ctc: infeasible target is an explicit error, not +inf") {
  Vocabulary vocab{3};
  Rng rng(5);
  Tensor lp = random_logprobs(2, 4, rng);
  CHECK_THROWS(ctc_loss(lp, {0, 1, 2}, vocab));
  // Repeated label needs a separating blank: [a,a] needs 3 frames.
  CHECK(ctc_min_frames({1, 1}) == 3);
  CHECK_THROWS(ctc_loss(lp, {1, 1}, vocab));
}

TEST_CASE("ctc gradient vs finite differences on T=4, L=2") {
  Vocabulary vocab{3};
  for (int seed = 0; seed < 5; ++seed) {
    Rng rng(600 + seed);
    Tensor x = Tensor::randn({4, 4}, rng);
    std::vector<long> target = {static_cast<long>(rng.next_below(3)),
                                static_cast<long>(rng.next_below(3))};
    auto rep = grad_check(
        "ctc_loss",
        [&](const Tensor& v) { return ctc_loss(log_softmax(v, 1), target, vocab); }, x);
    INFO(rep.diagnostic);
    CHECK(rep.passed);
  }
}

TEST_CASE("ctc gradient through the 3-frame/2-label instance") {
  Vocabulary vocab{2};
  Rng rng(61);
  Tensor x = Tensor::randn({3, 3}, rng);
  auto rep = grad_check(
      "ctc_3x2",
      [&](const Tensor& v) { return ctc_loss(log_softmax(v, 1), {0, 1}, vocab); }, x);
  CHECK(rep.passed);
}

TEST_CASE("attention_ce: saturated logits drive loss to 0 without smoothing") {
  std::vector<long> target = {1, 3, 0};
  Tensor logits = Tensor::zeros({3, 4});
  for (long i = 0; i < 3; ++i) logits.data()[i * 4 + target[static_cast<size_t>(i)]] = 50.0;
  CHECK(attention_ce(logits, target, 0.0).item() == doctest::Approx(0.0).epsilon(1e-6));
}

TEST_CASE("attention_ce: uniform logits give log K regardless of target") {
  Tensor logits = Tensor::full({2, 5}, 0.7);
  CHECK(attention_ce(logits, {0, 3}, 0.0).item() == doctest::Approx(std::log(5.0)).epsilon(1e-12));
  CHECK(attention_ce(logits, {4, 4}, 0.0).item() == doctest::Approx(std::log(5.0)).epsilon(1e-12));
}

TEST_CASE("attention_ce: smoothed value on a known small instance") {
  // K=4, L=1, target 2, smoothing 0.1: loss = -(0.9 log p2 + (0.1/3) sum_{k!=2} log pk).
  Tensor logits = Tensor::from({1, 4}, {0.2, -0.3, 1.1, 0.0});
  double mx = 1.1;
  double z = 0;
  double raw[4] = {0.2, -0.3, 1.1, 0.0};
  for (double v : raw) z += std::exp(v - mx);
  double lse = mx + std::log(z);
  double want = 0.0;
  for (int k = 0; k < 4; ++k) {
    double q = (k == 2) ? 0.9 : 0.1 / 3.0;
    want -= q * (raw[k] - lse);
  }
  CHECK(attention_ce(logits, {2}, 0.1).item() == doctest::Approx(want).epsilon(1e-12));
}

TEST_CASE("attention_ce: length mismatch is an input error") {
  CHECK_THROWS(attention_ce(Tensor::zeros({2, 4}), {1}));
}

TEST_CASE("attention_ce gradient") {
  Rng rng(71);
  Tensor x = Tensor::randn({3, 5}, rng);
  auto rep = grad_check(
      "attention_ce", [&](const Tensor& v) { return attention_ce(v, {0, 2, 4}, 0.1); }, x);
  CHECK(rep.passed);
}

TEST_CASE("joint loss: endpoints, arithmetic, linearity, range check") {
  CHECK(joint_loss(2.0, 1.0, 0.0).joint == doctest::Approx(1.0));
  CHECK(joint_loss(2.0, 1.0, 1.0).joint == doctest::Approx(2.0));
  CHECK(joint_loss(2.0, 1.0, 0.3).joint == doctest::Approx(1.3));
  CHECK_THROWS(joint_loss(1.0, 1.0, 1.5));
  CHECK_THROWS(joint_loss(1.0, 1.0, -0.1));
  // Linear in lambda: differences are constant.
  double d1 = joint_loss(3.0, 1.0, 0.4).joint - joint_loss(3.0, 1.0, 0.2).joint;
  double d2 = joint_loss(3.0, 1.0, 0.8).joint - joint_loss(3.0, 1.0, 0.6).joint;
  CHECK(d1 == doctest::Approx(d2).epsilon(1e-12));
}

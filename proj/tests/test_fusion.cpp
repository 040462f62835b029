#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <vector>

#include "tstrm/fusion.hpp"

using namespace tstrm;

namespace {

// Straight-line evaluation of the fusion equations with plain loops, kept
// independent of the Tensor path it checks.
std::vector<double> fcf_oracle(const std::vector<double>& xs, const std::vector<double>& xd,
                               const std::vector<double>& f1, const std::vector<double>& f2,
                               const std::vector<double>& f3, long c, long dm) {
  auto mm = [](const std::vector<double>& a, long ra, long ca, const std::vector<double>& b,
               long cb) {
    std::vector<double> r(static_cast<size_t>(ra * cb), 0.0);
    for (long i = 0; i < ra; ++i)
      for (long k = 0; k < ca; ++k)
        for (long j = 0; j < cb; ++j)
          r[static_cast<size_t>(i * cb + j)] +=
              a[static_cast<size_t>(i * ca + k)] * b[static_cast<size_t>(k * cb + j)];
    return r;
  };
  std::vector<double> f1s = mm(f1, c, c, xs, dm);
  std::vector<double> f2d = mm(f2, c, c, xd, dm);
  std::vector<double> f3s = mm(f3, c, c, xs, dm);
  // logits[i][j] = <f1s_i, f2d_j> / sqrt(dm); softmax per row.
  std::vector<double> w(static_cast<size_t>(c * c));
  for (long i = 0; i < c; ++i) {
    for (long j = 0; j < c; ++j) {
      double dot = 0;
      for (long k = 0; k < dm; ++k)
        dot += f1s[static_cast<size_t>(i * dm + k)] * f2d[static_cast<size_t>(j * dm + k)];
      w[static_cast<size_t>(i * c + j)] = dot / std::sqrt(static_cast<double>(dm));
    }
    double mx = w[static_cast<size_t>(i * c)];
    for (long j = 1; j < c; ++j) mx = std::max(mx, w[static_cast<size_t>(i * c + j)]);
    double z = 0;
    for (long j = 0; j < c; ++j) {
      w[static_cast<size_t>(i * c + j)] = std::exp(w[static_cast<size_t>(i * c + j)] - mx);
      z += w[static_cast<size_t>(i * c + j)];
    }
    for (long j = 0; j < c; ++j) w[static_cast<size_t>(i * c + j)] /= z;
  }
  std::vector<double> xw = mm(w, c, c, f3s, dm);
  for (size_t i = 0; i < xw.size(); ++i) xw[i] += f2d[i];
  std::vector<double> out;
  out.reserve(static_cast<size_t>(2 * c * dm));
  out.insert(out.end(), xw.begin(), xw.end());
  out.insert(out.end(), xs.begin(), xs.end());
  return out;
}

}  // namespace

TEST_CASE("bilinear_resize: identity and constants") {
  Rng rng(61);
  Tensor x = Tensor::randn({3, 4, 5}, rng);
  Tensor same = bilinear_resize(x, 4, 5);
  for (long i = 0; i < x.size(); ++i) CHECK(same.data()[i] == x.data()[i]);

  Tensor con = Tensor::full({2, 3, 3}, 4.25);
  for (auto [t, f] : std::vector<std::pair<long, long>>{{1, 1}, {2, 7}, {9, 2}, {6, 6}}) {
    Tensor y = bilinear_resize(con, t, f);
    CHECK(y.shape() == Shape{2, t, f});
    for (long i = 0; i < y.size(); ++i) CHECK(y.data()[i] == doctest::Approx(4.25));
  }
}

TEST_CASE("bilinear_resize 2x2 -> 4x4 matches the hand-derived table") {
  Tensor x = Tensor::from({1, 2, 2}, {0, 1, 2, 3});
  Tensor y = bilinear_resize(x, 4, 4);
  // align-corners=false sample positions clamp to [0, 0.25, 0.75, 1].
  double rowv[4] = {0, 0.5, 1.5, 2.0};
  double colv[4] = {0, 0.25, 0.75, 1.0};
  for (long a = 0; a < 4; ++a)
    for (long b = 0; b < 4; ++b)
      CHECK(y.at({0, a, b}) == doctest::Approx(rowv[a] + colv[b]).epsilon(1e-12));
}

TEST_CASE("bilinear_resize gradient vs finite differences") {
  Rng rng(67);
  Tensor x = Tensor::randn({2, 3, 4}, rng);
  auto rep = grad_check(
      "bilinear_resize",
      [](const Tensor& v) {
        Tensor y = bilinear_resize(v, 5, 7);
        return sum(mul(y, y));
      },
      x);
  INFO(rep.diagnostic);
  CHECK(rep.passed);
}

TEST_CASE("fcf degenerate c=1: W=[[1]], X_w = f3(Xs)+f2(Xd)") {
  Rng rng(71);
  Tensor xs = Tensor::randn({1, 2, 3}, rng);
  Tensor xd = Tensor::randn({1, 2, 3}, rng);
  FusionParams p = FusionParams::make(1, rng);
  Tensor w = fcf_weights(xs, xd, p);
  CHECK(w.item() == doctest::Approx(1.0));
  Tensor out = fcf(xs, xd, p);
  double a3 = p.f3.item(), a2 = p.f2.item();
  for (long i = 0; i < 6; ++i)
    CHECK(out.data()[i] == doctest::Approx(a3 * xs.data()[i] + a2 * xd.data()[i]).epsilon(1e-12));
}

TEST_CASE("fcf with identity maps and zero shallow input yields concat(Xd, 0)") {
  Rng rng(73);
  Tensor xs = Tensor::zeros({3, 2, 2});
  Tensor xd = Tensor::randn({3, 2, 2}, rng);
  FusionParams p = FusionParams::identity(3);
  Tensor out = fcf(xs, xd, p);
  CHECK(out.shape() == Shape{6, 2, 2});
  for (long i = 0; i < 12; ++i) CHECK(out.data()[i] == doctest::Approx(xd.data()[i]).epsilon(1e-12));
  for (long i = 12; i < 24; ++i) CHECK(out.data()[i] == 0.0);
}

TEST_CASE("fcf equals the straight-line oracle on 50 random instances") {
  Rng rng(79);
  for (int trial = 0; trial < 50; ++trial) {
    long c = 1 + static_cast<long>(rng.next_below(4));
    long t = 1 + static_cast<long>(rng.next_below(3));
    long f = 1 + static_cast<long>(rng.next_below(3));
    Tensor xs = Tensor::randn({c, t, f}, rng);
    Tensor xd = Tensor::randn({c, t, f}, rng);
    FusionParams p = FusionParams::make(c, rng);
    Tensor got = fcf(xs, xd, p);
    auto want = fcf_oracle(xs.values(), xd.values(), p.f1.values(), p.f2.values(),
                           p.f3.values(), c, t * f);
    REQUIRE(got.size() == static_cast<long>(want.size()));
    for (long i = 0; i < got.size(); ++i)
      CHECK(std::abs(got.data()[i] - want[static_cast<size_t>(i)]) < 1e-10);
  }
}

TEST_CASE("every W row sums to 1 and is invariant to constant logit shifts") {
  Rng rng(83);
  Tensor xs = Tensor::randn({4, 2, 3}, rng);
  Tensor xd = Tensor::randn({4, 2, 3}, rng);
  FusionParams p = FusionParams::make(4, rng);
  Tensor w = fcf_weights(xs, xd, p);
  for (long i = 0; i < 4; ++i) {
    double s = 0;
    for (long j = 0; j < 4; ++j) s += w.at({i, j});
    CHECK(std::abs(s - 1.0) <= 1e-12);
  }

  // Adding a constant row to f1's output shifts each logit row uniformly;
  // W is unchanged (softmax shift invariance). Emulate by shifting Xd's
  // projected feature with an all-ones direction through f2... simplest
  // equivalent: shift all logits by adding a constant vector to f1(Xs) rows
  // is not expressible through f1 alone, so verify at the W level directly:
  long dm = 6;
  Tensor s2 = reshape(xs, {4, dm});
  Tensor d2 = reshape(xd, {4, dm});
  Tensor logits = mul_scalar(matmul(matmul(p.f1, s2), transpose(matmul(p.f2, d2))),
                             1.0 / std::sqrt(6.0));
  Tensor shifted = add_scalar(logits, 3.75);
  Tensor w2 = softmax(shifted, 1);
  Tensor w1 = softmax(logits, 1);
  for (long i = 0; i < w1.size(); ++i)
    CHECK(w1.data()[i] == doctest::Approx(w2.data()[i]).epsilon(1e-12));
}

TEST_CASE("fuse_concat: order, channel count, gradient split") {
  Rng rng(89);
  Tensor a = Tensor::randn({2, 2, 2}, rng);
  Tensor b = Tensor::randn({2, 2, 2}, rng);
  Tensor y = fuse_concat(a, b);
  CHECK(y.shape() == Shape{4, 2, 2});
  for (long i = 0; i < 8; ++i) CHECK(y.data()[i] == a.data()[i]);
  for (long i = 0; i < 8; ++i) CHECK(y.data()[8 + i] == b.data()[i]);

  Tensor av = a.detach().set_requires_grad(true);
  Tensor up = Tensor::randn({4, 2, 2}, rng);
  sum(mul(fuse_concat(av, b), up)).backward();
  for (long i = 0; i < 8; ++i) CHECK(av.grad()[static_cast<size_t>(i)] == up.data()[i]);

  CHECK_THROWS_AS(fuse_concat(a, Tensor::zeros({2, 3, 2})), DimensionError);
}

TEST_CASE("fuse_add: identity with zero, commutative, pass-through gradient") {
  Rng rng(97);
  Tensor a = Tensor::randn({3, 2, 2}, rng);
  Tensor z = Tensor::zeros({3, 2, 2});
  Tensor y = fuse_add(a, z);
  for (long i = 0; i < a.size(); ++i) CHECK(y.data()[i] == a.data()[i]);

  Tensor b = Tensor::randn({3, 2, 2}, rng);
  Tensor ab = fuse_add(a, b);
  Tensor ba = fuse_add(b, a);
  for (long i = 0; i < ab.size(); ++i) CHECK(ab.data()[i] == ba.data()[i]);

  Tensor av = a.detach().set_requires_grad(true);
  sum(fuse_add(av, b)).backward();
  for (long i = 0; i < a.size(); ++i) CHECK(av.grad()[static_cast<size_t>(i)] == 1.0);
}

TEST_CASE("fcf reduces to add-then-concat when c=1 with identity maps") {
  Rng rng(101);
  Tensor xs = Tensor::randn({1, 3, 2}, rng);
  Tensor xd = Tensor::randn({1, 3, 2}, rng);
  FusionParams p = FusionParams::identity(1);
  Tensor got = fcf(xs, xd, p);
  Tensor want = fuse_concat(fuse_add(xs, xd), xs);
  // fcf concatenates (X_w, Xs) with X_w = Xs + Xd here.
  for (long i = 0; i < got.size(); ++i)
    CHECK(got.data()[i] == doctest::Approx(want.data()[i]).epsilon(1e-12));
}

TEST_CASE("grad_check through fcf at tol 1e-4") {
  Rng rng(103);
  FusionParams p = FusionParams::make(3, rng);
  Tensor xd = Tensor::randn({3, 2, 2}, rng);
  Tensor xs = Tensor::randn({3, 2, 2}, rng);
  auto rep = grad_check(
      "fcf", [&](const Tensor& v) { return mean(mul(fcf(v, xd, p), fcf(v, xd, p))); }, xs);
  INFO(rep.diagnostic);
  CHECK(rep.passed);
  auto repd = grad_check(
      "fcf_xd", [&](const Tensor& v) { return mean(fcf(xs, v, p)); }, xd);
  CHECK(repd.passed);
}

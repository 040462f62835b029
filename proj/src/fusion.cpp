#include "tstrm/fusion.hpp"

#include <cmath>

namespace tstrm {

FusionParams FusionParams::make(long channels, Rng& rng) {
  FusionParams p;
  double bound = std::sqrt(6.0 / static_cast<double>(channels));
  for (Tensor* t : {&p.f1, &p.f2, &p.f3}) {
    *t = Tensor::zeros({channels, channels});
    for (long i = 0; i < t->size(); ++i) t->data()[i] = rng.uniform(-bound, bound);
    t->set_requires_grad(true);
  }
  return p;
}

FusionParams FusionParams::identity(long channels) {
  FusionParams p;
  for (Tensor* t : {&p.f1, &p.f2, &p.f3}) {
    *t = Tensor::zeros({channels, channels});
    for (long i = 0; i < channels; ++i) t->data()[i * channels + i] = 1.0;
  }
  return p;
}

void FusionParams::collect(const std::string& prefix, ParamMap& params) {
  params.emplace_back(prefix + ".f1", &f1);
  params.emplace_back(prefix + ".f2", &f2);
  params.emplace_back(prefix + ".f3", &f3);
}

Tensor bilinear_resize(const Tensor& x, long t2, long f2) {
  if (x.ndim() != 3)
    throw DimensionError("bilinear_resize: expected [c,t,f], got " + shape_str(x.shape()));
  if (t2 < 1 || f2 < 1) throw DimensionError("bilinear_resize: target extents must be >= 1");
  long c = x.dim(0), t1 = x.dim(1), f1 = x.dim(2);
  if (t1 == t2 && f1 == f2) return reshape(x, x.shape());  // identity pass-through

  // align-corners=false: sample centers map as src = (dst + 0.5)*scale - 0.5,
  // clamped to the valid range.
  auto coords = [](long n_out, long n_in) {
    std::vector<std::pair<long, double>> c(static_cast<size_t>(n_out));
    double scale = static_cast<double>(n_in) / static_cast<double>(n_out);
    for (long i = 0; i < n_out; ++i) {
      double src = (static_cast<double>(i) + 0.5) * scale - 0.5;
      src = std::min(std::max(src, 0.0), static_cast<double>(n_in - 1));
      long lo = static_cast<long>(std::floor(src));
      if (lo > n_in - 2) lo = std::max<long>(n_in - 2, 0);
      c[static_cast<size_t>(i)] = {lo, src - static_cast<double>(lo)};
    }
    return c;
  };
  auto tc = coords(t2, t1);
  auto fc = coords(f2, f1);

  std::vector<double> out(static_cast<size_t>(c * t2 * f2));
  const double* src = x.data();
  auto idx = [t1, f1](long ch, long tt, long ff) { return (ch * t1 + tt) * f1 + ff; };
  for (long ch = 0; ch < c; ++ch)
    for (long a = 0; a < t2; ++a) {
      auto [t_lo, wt] = tc[static_cast<size_t>(a)];
      long t_hi = std::min(t_lo + 1, t1 - 1);
      for (long b = 0; b < f2; ++b) {
        auto [f_lo, wf] = fc[static_cast<size_t>(b)];
        long f_hi = std::min(f_lo + 1, f1 - 1);
        out[static_cast<size_t>((ch * t2 + a) * f2 + b)] =
            (1 - wt) * (1 - wf) * src[idx(ch, t_lo, f_lo)] +
            (1 - wt) * wf * src[idx(ch, t_lo, f_hi)] +
            wt * (1 - wf) * src[idx(ch, t_hi, f_lo)] +
            wt * wf * src[idx(ch, t_hi, f_hi)];
      }
    }
  return detail::make_op({c, t2, f2}, std::move(out), {x},
                         [c, t1, f1, t2, f2, tc, fc](detail::Node& n) {
                           auto& xn = *n.parents[0];
                           xn.ensure_grad();
                           auto idx = [t1, f1](long ch, long tt, long ff) {
                             return (ch * t1 + tt) * f1 + ff;
                           };
                           for (long ch = 0; ch < c; ++ch)
                             for (long a = 0; a < t2; ++a) {
                               auto [t_lo, wt] = tc[static_cast<size_t>(a)];
                               long t_hi = std::min(t_lo + 1, t1 - 1);
                               for (long b = 0; b < f2; ++b) {
                                 auto [f_lo, wf] = fc[static_cast<size_t>(b)];
                                 long f_hi = std::min(f_lo + 1, f1 - 1);
                                 double g = n.grad[static_cast<size_t>((ch * t2 + a) * f2 + b)];
                                 xn.grad[idx(ch, t_lo, f_lo)] += (1 - wt) * (1 - wf) * g;
                                 xn.grad[idx(ch, t_lo, f_hi)] += (1 - wt) * wf * g;
                                 xn.grad[idx(ch, t_hi, f_lo)] += wt * (1 - wf) * g;
                                 xn.grad[idx(ch, t_hi, f_hi)] += wt * wf * g;
                               }
                             }
                         });
}

namespace {
void check_same_shape(const Tensor& xs, const Tensor& xd, const char* op) {
  if (xs.shape() != xd.shape())
    throw DimensionError(std::string(op) + ": shapes differ: " + shape_str(xs.shape()) +
                         " vs " + shape_str(xd.shape()));
}
}  // namespace

Tensor fcf_weights(const Tensor& xs, const Tensor& xd_resized, const FusionParams& p) {
  check_same_shape(xs, xd_resized, "fcf");
  long c = xs.dim(0);
  long dm = xs.dim(1) * xs.dim(2);
  Tensor s2 = reshape(xs, {c, dm});
  Tensor d2 = reshape(xd_resized, {c, dm});
  Tensor logits = mul_scalar(matmul(matmul(p.f1, s2), transpose(matmul(p.f2, d2))),
                             1.0 / std::sqrt(static_cast<double>(dm)));
  return softmax(logits, 1);
}

Tensor fcf(const Tensor& xs, const Tensor& xd_resized, const FusionParams& p) {
  check_same_shape(xs, xd_resized, "fcf");
  long c = xs.dim(0), t = xs.dim(1), f = xs.dim(2);
  long dm = t * f;
  Tensor s2 = reshape(xs, {c, dm});
  Tensor d2 = reshape(xd_resized, {c, dm});
  Tensor w = fcf_weights(xs, xd_resized, p);
  Tensor xw = add(matmul(w, matmul(p.f3, s2)), matmul(p.f2, d2));
  return concat({reshape(xw, {c, t, f}), xs}, 0);
}

Tensor fuse_concat(const Tensor& xs, const Tensor& xd_resized) {
  check_same_shape(xs, xd_resized, "fuse_concat");
  return concat({xs, xd_resized}, 0);
}

Tensor fuse_add(const Tensor& xs, const Tensor& xd_resized) {
  check_same_shape(xs, xd_resized, "fuse_add");
  return add(xs, xd_resized);
}

}  // namespace tstrm

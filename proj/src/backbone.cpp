#include "tstrm/backbone.hpp"

#include <Eigen/Core>

#include <cmath>

namespace tstrm {

namespace {
using MatMap = Eigen::Map<Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
using ConstMatMap = Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

struct ConvPlan {
  long in_ch, t, f, out_ch, kh, kw, stride, pad, groups;
  long ot, of, icg, ocg, krows;

  // Gathers one group's im2col matrix [icg*kh*kw, ot*of] from x.
  void im2col(const double* x, long g, double* col) const {
    for (long c = 0; c < icg; ++c) {
      const double* xc = x + (g * icg + c) * t * f;
      for (long i = 0; i < kh; ++i)
        for (long j = 0; j < kw; ++j) {
          double* row = col + ((c * kh + i) * kw + j) * ot * of;
          for (long a = 0; a < ot; ++a) {
            long ti = a * stride - pad + i;
            for (long b = 0; b < of; ++b) {
              long fj = b * stride - pad + j;
              row[a * of + b] = (ti >= 0 && ti < t && fj >= 0 && fj < f) ? xc[ti * f + fj] : 0.0;
            }
          }
        }
    }
  }

  // Scatter-adds one group's column gradient back into dx.
  void col2im(const double* col, long g, double* dx) const {
    for (long c = 0; c < icg; ++c) {
      double* xc = dx + (g * icg + c) * t * f;
      for (long i = 0; i < kh; ++i)
        for (long j = 0; j < kw; ++j) {
          const double* row = col + ((c * kh + i) * kw + j) * ot * of;
          for (long a = 0; a < ot; ++a) {
            long ti = a * stride - pad + i;
            if (ti < 0 || ti >= t) continue;
            for (long b = 0; b < of; ++b) {
              long fj = b * stride - pad + j;
              if (fj >= 0 && fj < f) xc[ti * f + fj] += row[a * of + b];
            }
          }
        }
    }
  }
};

ConvPlan make_plan(const Tensor& x, const Conv2dParams& p) {
  ConvPlan pl{};
  pl.in_ch = x.dim(0);
  pl.t = x.dim(1);
  pl.f = x.dim(2);
  pl.out_ch = p.weight.dim(0);
  pl.kh = p.weight.dim(2);
  pl.kw = p.weight.dim(3);
  pl.stride = p.stride;
  pl.pad = p.pad;
  pl.groups = p.groups;
  pl.ot = conv_out_extent(pl.t, pl.kh, pl.pad, pl.stride);
  pl.of = conv_out_extent(pl.f, pl.kw, pl.pad, pl.stride);
  pl.icg = pl.in_ch / pl.groups;
  pl.ocg = pl.out_ch / pl.groups;
  pl.krows = pl.icg * pl.kh * pl.kw;
  return pl;
}

}  // namespace

Conv2dParams Conv2dParams::make(long in_ch, long out_ch, long kernel, long stride, long pad,
                                long groups, Rng& rng) {
  Conv2dParams p;
  p.stride = stride;
  p.pad = pad;
  p.groups = groups;
  long icg = in_ch / groups;
  long fan_in = icg * kernel * kernel;
  double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
  p.weight = Tensor::zeros({out_ch, icg, kernel, kernel});
  for (long i = 0; i < p.weight.size(); ++i) p.weight.data()[i] = rng.uniform(-bound, bound);
  p.weight.set_requires_grad(true);
  p.bias = Tensor::zeros({out_ch}).set_requires_grad(true);
  return p;
}

void Conv2dParams::collect(const std::string& prefix, ParamMap& params) {
  params.emplace_back(prefix + ".weight", &weight);
  params.emplace_back(prefix + ".bias", &bias);
}

Tensor conv2d(const Tensor& x, const Conv2dParams& p) {
  if (x.ndim() != 3)
    throw DimensionError("conv2d: expected [c,t,f] input, got " + shape_str(x.shape()));
  if (x.dim(0) != p.weight.dim(1) * p.groups)
    throw DimensionError("conv2d: input has " + std::to_string(x.dim(0)) +
                         " channels but kernel expects " +
                         std::to_string(p.weight.dim(1) * p.groups));
  ConvPlan pl = make_plan(x, p);
  long cols = pl.ot * pl.of;
  std::vector<double> col(static_cast<size_t>(pl.krows * cols));
  std::vector<double> out(static_cast<size_t>(pl.out_ch * cols));
  for (long g = 0; g < pl.groups; ++g) {
    pl.im2col(x.data(), g, col.data());
    ConstMatMap W(p.weight.data() + g * pl.ocg * pl.krows, pl.ocg, pl.krows);
    ConstMatMap C(col.data(), pl.krows, cols);
    MatMap Y(out.data() + g * pl.ocg * cols, pl.ocg, cols);
    Y.noalias() = W * C;
  }
  for (long oc = 0; oc < pl.out_ch; ++oc) {
    double b = p.bias.data()[oc];
    for (long i = 0; i < cols; ++i) out[static_cast<size_t>(oc * cols + i)] += b;
  }
  return detail::make_op(
      {pl.out_ch, pl.ot, pl.of}, std::move(out), {x, p.weight, p.bias},
      [pl](detail::Node& n) {
        auto& xn = *n.parents[0];
        auto& wn = *n.parents[1];
        auto& bn = *n.parents[2];
        long cols = pl.ot * pl.of;
        std::vector<double> col(static_cast<size_t>(pl.krows * cols));
        std::vector<double> dcol(static_cast<size_t>(pl.krows * cols));
        if (xn.requires_grad) xn.ensure_grad();
        if (wn.requires_grad) wn.ensure_grad();
        for (long g = 0; g < pl.groups; ++g) {
          ConstMatMap G(n.grad.data() + g * pl.ocg * cols, pl.ocg, cols);
          if (wn.requires_grad) {
            pl.im2col(xn.data.data(), g, col.data());
            ConstMatMap C(col.data(), pl.krows, cols);
            MatMap GW(wn.grad.data() + g * pl.ocg * pl.krows, pl.ocg, pl.krows);
            GW.noalias() += G * C.transpose();
          }
          if (xn.requires_grad) {
            ConstMatMap W(wn.data.data() + g * pl.ocg * pl.krows, pl.ocg, pl.krows);
            MatMap DC(dcol.data(), pl.krows, cols);
            DC.noalias() = W.transpose() * G;
            pl.col2im(dcol.data(), g, xn.grad.data());
          }
        }
        if (bn.requires_grad) {
          bn.ensure_grad();
          for (long oc = 0; oc < pl.out_ch; ++oc)
            for (long i = 0; i < cols; ++i)
              bn.grad[static_cast<size_t>(oc)] += n.grad[static_cast<size_t>(oc * cols + i)];
        }
      });
}

BatchNormParams BatchNormParams::make(long channels) {
  BatchNormParams p;
  p.gamma = Tensor::full({channels}, 1.0).set_requires_grad(true);
  p.beta = Tensor::zeros({channels}).set_requires_grad(true);
  p.running_mean.assign(static_cast<size_t>(channels), 0.0);
  p.running_var.assign(static_cast<size_t>(channels), 1.0);
  return p;
}

void BatchNormParams::collect(const std::string& prefix, ParamMap& params, BufferMap& buffers) {
  params.emplace_back(prefix + ".gamma", &gamma);
  params.emplace_back(prefix + ".beta", &beta);
  buffers.emplace_back(prefix + ".running_mean", &running_mean);
  buffers.emplace_back(prefix + ".running_var", &running_var);
}

std::vector<Tensor> batchnorm2d(const std::vector<Tensor>& xs, BatchNormParams& p, bool train) {
  if (xs.empty()) throw DimensionError("batchnorm2d: empty batch");
  long c = xs[0].dim(0);
  long freq = xs[0].dim(2);
  for (const auto& x : xs)
    if (x.dim(0) != c || x.dim(2) != freq)
      throw DimensionError("batchnorm2d: inconsistent channel/freq extents in batch");
  if (train && xs.size() < 2)
    throw std::invalid_argument("batchnorm2d: train mode requires a batch of at least 2");

  Tensor gamma3 = reshape(p.gamma, {c, 1, 1});
  Tensor beta3 = reshape(p.beta, {c, 1, 1});

  if (!train) {
    Tensor rm = Tensor::from({c, 1, 1}, p.running_mean);
    Tensor rv = Tensor::from({c, 1, 1}, p.running_var);
    Tensor scale = div(gamma3, sqrt(add_scalar(rv, p.eps)));
    std::vector<Tensor> out;
    out.reserve(xs.size());
    for (const auto& x : xs) out.push_back(add(mul(sub(x, rm), scale), beta3));
    return out;
  }

  // Batch statistics over (batch, time, freq): concatenating along time makes
  // the per-channel reduction over the whole batch a single-tensor reduction.
  Tensor all = xs.size() == 1 ? xs[0] : concat(xs, 1);
  Tensor mu = mean(mean(all, 2, true), 1, true);                  // [c,1,1]
  Tensor centered = sub(all, mu);
  Tensor var = mean(mean(mul(centered, centered), 2, true), 1, true);
  Tensor norm = div(centered, sqrt(add_scalar(var, p.eps)));
  Tensor y = add(mul(norm, gamma3), beta3);

  for (long ch = 0; ch < c; ++ch) {
    p.running_mean[static_cast<size_t>(ch)] =
        (1.0 - p.momentum) * p.running_mean[static_cast<size_t>(ch)] + p.momentum * mu.data()[ch];
    p.running_var[static_cast<size_t>(ch)] =
        (1.0 - p.momentum) * p.running_var[static_cast<size_t>(ch)] + p.momentum * var.data()[ch];
  }

  std::vector<Tensor> out;
  out.reserve(xs.size());
  long off = 0;
  for (const auto& x : xs) {
    out.push_back(slice(y, 1, off, x.dim(1)));
    off += x.dim(1);
  }
  return out;
}

ConvBlock ConvBlock::make(long in_ch, long out_ch, long kernel, long stride, long pad,
                          long groups, Rng& rng) {
  ConvBlock b;
  b.conv = Conv2dParams::make(in_ch, out_ch, kernel, stride, pad, groups, rng);
  b.bn = BatchNormParams::make(out_ch);
  return b;
}

std::vector<Tensor> ConvBlock::forward(const std::vector<Tensor>& xs, bool train) {
  std::vector<Tensor> ys;
  ys.reserve(xs.size());
  for (const auto& x : xs) ys.push_back(conv2d(x, conv));
  ys = batchnorm2d(ys, bn, train);
  for (auto& y : ys) y = relu(y);
  return ys;
}

void ConvBlock::collect(const std::string& prefix, ParamMap& params, BufferMap& buffers) {
  conv.collect(prefix + ".conv", params);
  bn.collect(prefix + ".bn", params, buffers);
}

Bottleneck Bottleneck::make(const BottleneckSpec& spec, Rng& rng) {
  Bottleneck b;
  b.spec = spec;
  long hidden = spec.in_ch * spec.expansion;
  b.expand = ConvBlock::make(spec.in_ch, hidden, 1, 1, 0, 1, rng);
  b.depthwise = ConvBlock::make(hidden, hidden, 3, spec.stride, 1, hidden, rng);
  b.project = Conv2dParams::make(hidden, spec.out_ch, 1, 1, 0, 1, rng);
  b.project_bn = BatchNormParams::make(spec.out_ch);
  return b;
}

std::vector<Tensor> Bottleneck::forward(const std::vector<Tensor>& xs, bool train) {
  for (const auto& x : xs)
    if (x.dim(0) != spec.in_ch)
      throw DimensionError("bottleneck: input has " + std::to_string(x.dim(0)) +
                           " channels, spec expects " + std::to_string(spec.in_ch));
  std::vector<Tensor> ys = expand.forward(xs, train);
  ys = depthwise.forward(ys, train);
  for (auto& y : ys) y = conv2d(y, project);
  ys = batchnorm2d(ys, project_bn, train);
  if (spec.stride == 1 && spec.in_ch == spec.out_ch)
    for (size_t i = 0; i < ys.size(); ++i) ys[i] = add(ys[i], xs[i]);
  return ys;
}

void Bottleneck::collect(const std::string& prefix, ParamMap& params, BufferMap& buffers) {
  expand.collect(prefix + ".expand", params, buffers);
  depthwise.collect(prefix + ".depthwise", params, buffers);
  project.collect(prefix + ".project", params);
  project_bn.collect(prefix + ".project_bn", params, buffers);
}

StreamConfig StreamConfig::defaults() {
  StreamConfig cfg;
  cfg.deep_rows = {
      {RowOp::conv2d, 32, 1, 2},     {RowOp::bottleneck, 32, 1, 1},
      {RowOp::bottleneck, 32, 1, 1}, {RowOp::bottleneck, 48, 3, 2},
      {RowOp::bottleneck, 64, 3, 2}, {RowOp::bottleneck, 128, 2, 1},
      {RowOp::bottleneck, 256, 2, 1},
  };
  cfg.shallow_rows = {
      {RowOp::conv2d, 128, 1, 2},
      {RowOp::conv2d, 256, 1, 2},
      {RowOp::conv2d, 256, 1, 1},
  };
  return cfg;
}

long StreamConfig::scaled(long channels) const {
  long c = static_cast<long>(std::lround(channels * width_mult));
  return std::max<long>(c, 1);
}

Stream Stream::make(const std::vector<StreamRow>& rows, long n_groups, long expansion,
                    const StreamConfig& cfg, Rng& rng) {
  Stream s;
  long in_ch = 1;
  long groups_used = 0;
  for (const auto& row : rows) {
    long out_ch = cfg.scaled(row.channels);
    if (row.op == RowOp::conv2d) {
      s.convs.push_back(ConvBlock::make(in_ch, out_ch, 3, row.stride, 1, 1, rng));
      s.order.push_back(static_cast<int>(s.convs.size()) - 1);
      in_ch = out_ch;
    } else {
      if (groups_used >= n_groups) continue;  // trailing groups truncated (block-count ablation)
      ++groups_used;
      for (long r = 0; r < row.repeats; ++r) {
        BottleneckSpec spec;
        spec.in_ch = in_ch;
        spec.out_ch = out_ch;
        spec.expansion = expansion;
        spec.stride = (r == 0) ? row.stride : 1;
        s.blocks.push_back(Bottleneck::make(spec, rng));
        s.order.push_back(-static_cast<int>(s.blocks.size()));
        in_ch = out_ch;
      }
    }
  }
  return s;
}

std::vector<Tensor> Stream::forward(const std::vector<Tensor>& xs, bool train) {
  for (const auto& x : xs)
    if (x.dim(1) < 1 || x.dim(2) < 1)
      throw std::invalid_argument("stream: input must have at least 1 frame and 1 bin");
  std::vector<Tensor> ys = xs;
  for (int idx : order)
    ys = idx >= 0 ? convs[static_cast<size_t>(idx)].forward(ys, train)
                  : blocks[static_cast<size_t>(-idx - 1)].forward(ys, train);
  return ys;
}

long Stream::out_channels() const {
  int last = order.back();
  if (last >= 0) return convs[static_cast<size_t>(last)].conv.weight.dim(0);
  return blocks[static_cast<size_t>(-last - 1)].spec.out_ch;
}

long Stream::param_count() const {
  ParamMap params;
  BufferMap buffers;
  const_cast<Stream*>(this)->collect("s", params, buffers);
  long n = 0;
  for (auto& [name, t] : params) n += t->size();
  return n;
}

void Stream::collect(const std::string& prefix, ParamMap& params, BufferMap& buffers) {
  size_t ci = 0, bi = 0;
  for (size_t i = 0; i < order.size(); ++i) {
    std::string name = prefix + "." + std::to_string(i);
    if (order[i] >= 0) convs[ci++].collect(name, params, buffers);
    else blocks[bi++].collect(name, params, buffers);
  }
}

Stream make_deep_stream(const StreamConfig& cfg, Rng& rng) {
  return Stream::make(cfg.deep_rows, cfg.n_deep_groups, cfg.expansion, cfg, rng);
}

Stream make_shallow_stream(const StreamConfig& cfg, Rng& rng) {
  return Stream::make(cfg.shallow_rows, /*n_groups=*/1000, cfg.expansion, cfg, rng);
}

Tensor spectrogram_to_fm(const Spectrogram& s) {
  return Tensor::from({1, s.frames, s.dims}, s.values);
}

}  // namespace tstrm

#pragma once

#include "tstrm/backbone.hpp"
#include "tstrm/tensor.hpp"

namespace tstrm {

enum class FusionKind { fcf, concat, addition };

// Channel-wise linear maps (1x1 convolutions) c -> c used by FCF.
struct FusionParams {
  Tensor f1, f2, f3;  // each [c, c]

  static FusionParams make(long channels, Rng& rng);
  static FusionParams identity(long channels);
  void collect(const std::string& prefix, ParamMap& params);
};

// Per-channel bilinear interpolation to a new (t,f) grid, align-corners=false.
// Exact identity when the target equals the source size.
Tensor bilinear_resize(const Tensor& x, long t2, long f2);

// Feature Correlation Fusion. Both inputs are [c,t,f] on the shallow grid.
// With d_m = t*f and X viewed as [c, d_m]:
//   W   = softmax_rows(f1(Xs) f2(Xd)^T / sqrt(d_m))   (c x c)
//   X_w = W f3(Xs) + f2(Xd)
//   out = concat_channels(X_w, Xs)                     -> [2c,t,f]
Tensor fcf(const Tensor& xs, const Tensor& xd_resized, const FusionParams& p);

// Interaction weight matrix of FCF (exposed for normalization tests).
Tensor fcf_weights(const Tensor& xs, const Tensor& xd_resized, const FusionParams& p);

// Table-3 baselines.
Tensor fuse_concat(const Tensor& xs, const Tensor& xd_resized);  // -> [2c,t,f]
Tensor fuse_add(const Tensor& xs, const Tensor& xd_resized);     // -> [c,t,f]

}  // namespace tstrm

#pragma once

#include <string>
#include <utility>
#include <vector>

#include "tstrm/frontend.hpp"
#include "tstrm/tensor.hpp"

namespace tstrm {

// Named views of every learnable tensor / persistent buffer in a module,
// used by the optimizer and the checkpoint writer.
using ParamMap = std::vector<std::pair<std::string, Tensor*>>;
using BufferMap = std::vector<std::pair<std::string, std::vector<double>*>>;

// A FeatureMap is a rank-3 tensor [channels, time, freq].
inline long fm_channels(const Tensor& x) { return x.dim(0); }
inline long fm_time(const Tensor& x) { return x.dim(1); }
inline long fm_freq(const Tensor& x) { return x.dim(2); }

// Spatial extent after a padded strided convolution.
inline long conv_out_extent(long n, long kernel, long pad, long stride) {
  return (n + 2 * pad - kernel) / stride + 1;
}

struct Conv2dParams {
  Tensor weight;  // [out_ch, in_ch/groups, kh, kw]
  Tensor bias;    // [out_ch]
  long stride = 1;
  long pad = 1;
  long groups = 1;

  static Conv2dParams make(long in_ch, long out_ch, long kernel, long stride, long pad,
                           long groups, Rng& rng);
  void collect(const std::string& prefix, ParamMap& params);
};

// Raw convolution (no BN/ReLU); x is [c,t,f].
Tensor conv2d(const Tensor& x, const Conv2dParams& p);

struct BatchNormParams {
  Tensor gamma, beta;  // [c]
  std::vector<double> running_mean, running_var;
  double momentum = 0.1;
  double eps = 1e-5;

  static BatchNormParams make(long channels);
  void collect(const std::string& prefix, ParamMap& params, BufferMap& buffers);
};

// Normalizes per channel over (batch, time, freq). Train mode uses batch
// statistics and updates the running averages; eval mode uses the stored
// running statistics. Train mode requires at least two batch elements.
std::vector<Tensor> batchnorm2d(const std::vector<Tensor>& xs, BatchNormParams& p, bool train);

// Conv2d -> BN -> ReLU, applied to a batch.
struct ConvBlock {
  Conv2dParams conv;
  BatchNormParams bn;

  static ConvBlock make(long in_ch, long out_ch, long kernel, long stride, long pad,
                        long groups, Rng& rng);
  std::vector<Tensor> forward(const std::vector<Tensor>& xs, bool train);
  void collect(const std::string& prefix, ParamMap& params, BufferMap& buffers);
};

struct BottleneckSpec {
  long in_ch = 0;
  long out_ch = 0;
  long expansion = 6;
  long stride = 1;
};

// MobileNetV2-style inverted residual: 1x1 expand (BN+ReLU) -> 3x3 depthwise
// (BN+ReLU, carries the stride) -> 1x1 project (BN, linear). Residual added
// iff stride == 1 and in_ch == out_ch.
struct Bottleneck {
  BottleneckSpec spec;
  ConvBlock expand, depthwise;
  Conv2dParams project;
  BatchNormParams project_bn;

  static Bottleneck make(const BottleneckSpec& spec, Rng& rng);
  std::vector<Tensor> forward(const std::vector<Tensor>& xs, bool train);
  void collect(const std::string& prefix, ParamMap& params, BufferMap& buffers);
};

enum class RowOp { conv2d, bottleneck };

struct StreamRow {
  RowOp op = RowOp::conv2d;
  long channels = 0;
  long repeats = 1;
  long stride = 1;
};

struct StreamConfig {
  std::vector<StreamRow> deep_rows;     // Table-1 deep stream by default
  std::vector<StreamRow> shallow_rows;  // Table-1 shallow stream by default
  long n_deep_groups = 6;               // bottleneck groups kept (4..6)
  long expansion = 6;
  double width_mult = 1.0;  // scales every channel count (tiny configs)

  static StreamConfig defaults();
  long scaled(long channels) const;
};

// A whole stream: the stacked rows of one Table-1 column. The first block of
// each repeats-group carries the group stride; later repeats use stride 1
// with in_ch == out_ch.
struct Stream {
  std::vector<ConvBlock> convs;
  std::vector<Bottleneck> blocks;
  std::vector<int> order;  // >=0: conv index ~ -(i+1): block index i

  static Stream make(const std::vector<StreamRow>& rows, long n_groups, long expansion,
                     const StreamConfig& cfg, Rng& rng);
  std::vector<Tensor> forward(const std::vector<Tensor>& xs, bool train);
  long out_channels() const;
  long param_count() const;
  void collect(const std::string& prefix, ParamMap& params, BufferMap& buffers);
};

Stream make_deep_stream(const StreamConfig& cfg, Rng& rng);
Stream make_shallow_stream(const StreamConfig& cfg, Rng& rng);

// Views a spectrogram as a single-channel feature map [1, T, D].
Tensor spectrogram_to_fm(const Spectrogram& s);

}  // namespace tstrm

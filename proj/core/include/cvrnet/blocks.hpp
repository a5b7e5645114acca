#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "cvrnet/ops.hpp"
#include "cvrnet/param_store.hpp"
#include "cvrnet/rng.hpp"

namespace cvrnet {

/// Rational channel-width scale; 1/1 is full scale, 1/8 a desk-scale model.
struct WidthMultiplier {
  int num = 1;
  int den = 1;

  void validate() const {
    if (num < 1 || den < 1) throw ValueError("width multiplier must be a positive rational");
  }
  std::int64_t scale(std::int64_t channels) const {
    const std::int64_t scaled = (channels * num + den / 2) / den;
    return scaled < 1 ? 1 : scaled;
  }
  double value() const { return static_cast<double>(num) / static_cast<double>(den); }
  std::string str() const { return std::to_string(num) + "/" + std::to_string(den); }

  static WidthMultiplier parse(const std::string& text);
};

/// Channel plan for both encoders. Widths are at full scale and get scaled by
/// the multiplier when blocks are instantiated.
struct BlockConfig {
  std::vector<int> stage_widths = {256, 512, 1024, 2048};
  std::vector<int> stage_mid_widths = {64, 128, 256, 512};
  std::vector<int> stage_repeats = {3, 4, 6, 3};
  int stem_width = 64;

  int stem2_widths[2] = {32, 64};
  std::vector<int> entry_widths = {128, 512, 1024};
  int middle_repeats = 8;
  int exit_width = 2048;

  WidthMultiplier width;

  void validate() const {
    width.validate();
    if (stage_widths.size() != stage_repeats.size() || stage_widths.size() != stage_mid_widths.size())
      throw ValueError("stage width/repeat lists must have equal length");
    for (const int r : stage_repeats)
      if (r < 1) throw ValueError("stage repetitions must be >= 1");
    if (middle_repeats < 1) throw ValueError("middle-flow repetitions must be >= 1");
  }
};

namespace init {

template <typename T>
void he_normal(TensorT<T>& w, std::int64_t fan_in, Rng& rng) {
  const double stddev = std::sqrt(2.0 / static_cast<double>(fan_in));
  for (std::int64_t i = 0; i < w.numel(); ++i) w[i] = static_cast<T>(rng.normal() * stddev);
}

}  // namespace init

// ---------------------------------------------------------------------------
// Layers: thin wrappers binding operators to named ParamStore slots
// ---------------------------------------------------------------------------

template <typename T>
struct Conv2dLayer {
  std::string name;
  ConvSpec spec;
  std::int64_t in_ch = 0, out_ch = 0;
  bool has_bias = false;

  void init(ParamStoreT<T>& ps, Rng& rng) const {
    auto& w = ps.create(name + ".weights", {spec.kernel_h, spec.kernel_w, in_ch, out_ch});
    init::he_normal(w, static_cast<std::int64_t>(spec.kernel_h) * spec.kernel_w * in_ch, rng);
    if (has_bias) ps.create(name + ".bias", {out_ch});
  }

  TensorT<T> forward(const ParamStoreT<T>& ps, const TensorT<T>& x) const {
    static const TensorT<T> no_bias;
    return conv2d_forward(x, ps.value(name + ".weights"),
                          has_bias ? ps.value(name + ".bias") : no_bias, spec);
  }

  TensorT<T> backward(ParamStoreT<T>& ps, const TensorT<T>& x, const TensorT<T>& dy) const {
    Conv2dGrads<T> g = conv2d_backward(x, ps.value(name + ".weights"), spec, dy);
    ps.accumulate_grad(name + ".weights", g.weights);
    if (has_bias) ps.accumulate_grad(name + ".bias", g.bias);
    return std::move(g.input);
  }

  Shape out_shape(const Shape& in) const {
    return {in[0], conv_out_extent(in[1], spec.kernel_h, spec.stride, spec.padding),
            conv_out_extent(in[2], spec.kernel_w, spec.stride, spec.padding), out_ch};
  }
};

template <typename T>
struct DwscLayer {
  std::string name;
  ConvSpec spec;  // depthwise stage geometry; pointwise is fixed 1×1/1
  std::int64_t in_ch = 0, out_ch = 0;

  void init(ParamStoreT<T>& ps, Rng& rng) const {
    auto& dw = ps.create(name + ".dw.weights", {spec.kernel_h, spec.kernel_w, in_ch, 1});
    init::he_normal(dw, static_cast<std::int64_t>(spec.kernel_h) * spec.kernel_w, rng);
    auto& pw = ps.create(name + ".pw.weights", {1, 1, in_ch, out_ch});
    init::he_normal(pw, in_ch, rng);
  }

  TensorT<T> forward(const ParamStoreT<T>& ps, const TensorT<T>& x, DwscCache<T>* cache) const {
    static const TensorT<T> no_bias;
    return depthwise_separable_forward(x, ps.value(name + ".dw.weights"), no_bias,
                                       ps.value(name + ".pw.weights"), no_bias, spec, cache);
  }

  TensorT<T> backward(ParamStoreT<T>& ps, const TensorT<T>& x, const DwscCache<T>& cache,
                      const TensorT<T>& dy) const {
    DwscGrads<T> g = depthwise_separable_backward(x, ps.value(name + ".dw.weights"),
                                                  ps.value(name + ".pw.weights"), spec, cache, dy);
    ps.accumulate_grad(name + ".dw.weights", g.dw_weights);
    ps.accumulate_grad(name + ".pw.weights", g.pw_weights);
    return std::move(g.input);
  }

  Shape out_shape(const Shape& in) const {
    return {in[0], conv_out_extent(in[1], spec.kernel_h, spec.stride, spec.padding),
            conv_out_extent(in[2], spec.kernel_w, spec.stride, spec.padding), out_ch};
  }
};

template <typename T>
struct BatchNormLayer {
  std::string name;
  std::int64_t channels = 0;
  T momentum = T(0.99);
  T epsilon = T(1e-3);

  void init(ParamStoreT<T>& ps, Rng&) const {
    ps.create(name + ".gamma", {channels}).fill(T(1));
    ps.create(name + ".beta", {channels});
    ps.create(name + ".running_mean", {channels}, /*trainable=*/false);
    ps.create(name + ".running_var", {channels}, /*trainable=*/false).fill(T(1));
  }

  /// `commit` writes updated running statistics back into the store; the
  /// gradient-check paths evaluate train mode with commit = false.
  TensorT<T> forward(ParamStoreT<T>& ps, const TensorT<T>& x, BnMode mode, bool commit,
                     BatchNormCache<T>* cache) const {
    auto& rm = ps.value(name + ".running_mean");
    auto& rv = ps.value(name + ".running_var");
    BatchNormResult<T> r = batch_norm_forward(x, ps.value(name + ".gamma"),
                                              ps.value(name + ".beta"), rm, rv, mode, momentum,
                                              epsilon, cache);
    if (mode == BnMode::train && commit) {
      std::copy(r.new_running_mean.begin(), r.new_running_mean.end(), rm.data());
      std::copy(r.new_running_var.begin(), r.new_running_var.end(), rv.data());
    }
    return std::move(r.output);
  }

  TensorT<T> backward(ParamStoreT<T>& ps, const BatchNormCache<T>& cache,
                      const TensorT<T>& dy) const {
    BatchNormGrads<T> g = batch_norm_backward(cache, ps.value(name + ".gamma"), dy);
    ps.accumulate_grad(name + ".gamma", g.gamma);
    ps.accumulate_grad(name + ".beta", g.beta);
    return std::move(g.input);
  }
};

template <typename T>
struct DenseLayer {
  std::string name;
  std::int64_t in_ch = 0, out_ch = 0;
  double init_scale = 1.0;

  void init(ParamStoreT<T>& ps, Rng& rng) const {
    auto& w = ps.create(name + ".weights", {in_ch, out_ch});
    init::he_normal(w, in_ch, rng);
    if (init_scale != 1.0) {
      for (std::int64_t i = 0; i < w.numel(); ++i) w[i] *= static_cast<T>(init_scale);
    }
    ps.create(name + ".bias", {out_ch});
  }

  TensorT<T> forward(const ParamStoreT<T>& ps, const TensorT<T>& x) const {
    return dense_forward(x, ps.value(name + ".weights"), ps.value(name + ".bias"));
  }

  TensorT<T> backward(ParamStoreT<T>& ps, const TensorT<T>& x, const TensorT<T>& dy) const {
    DenseGrads<T> g = dense_backward(x, ps.value(name + ".weights"), dy);
    ps.accumulate_grad(name + ".weights", g.weights);
    ps.accumulate_grad(name + ".bias", g.bias);
    return std::move(g.input);
  }
};

// ---------------------------------------------------------------------------
// Encoder-1 stem: 7×7 stride-2 conv + BN + ReLU, then 3×3 stride-2 maxpool
// ---------------------------------------------------------------------------

template <typename T>
struct Stem1 {
  Conv2dLayer<T> conv;
  BatchNormLayer<T> bn;

  struct Cache {
    TensorT<T> x;
    BatchNormCache<T> bn;
    TensorT<T> act;  // relu output, input of the pool
    MaxPool2dCache pool;
  };

  static Stem1 make(const std::string& prefix, std::int64_t out_ch) {
    Stem1 s;
    s.conv = {prefix + ".conv", ConvSpec{7, 7, 2, Padding::same, 1}, 3, out_ch, false};
    s.bn = {prefix + ".bn", out_ch};
    return s;
  }

  void init(ParamStoreT<T>& ps, Rng& rng) const {
    conv.init(ps, rng);
    bn.init(ps, rng);
  }

  TensorT<T> forward(ParamStoreT<T>& ps, const TensorT<T>& x, BnMode mode, bool commit,
                     Cache* cache) const {
    TensorT<T> t = conv.forward(ps, x);
    t = bn.forward(ps, t, mode, commit, cache ? &cache->bn : nullptr);
    t = relu_forward(t);
    if (cache) {
      cache->x = x;
      cache->act = t;
    }
    return maxpool2d_forward(t, 3, 3, 2, cache ? &cache->pool : nullptr);
  }

  TensorT<T> backward(ParamStoreT<T>& ps, const Cache& cache, const TensorT<T>& dy) const {
    TensorT<T> d = maxpool2d_backward<T>(cache.pool, dy);
    d = relu_backward(cache.act, d);
    d = bn.backward(ps, cache.bn, d);
    return conv.backward(ps, cache.x, d);
  }

  Shape out_shape(const Shape& in) const {
    Shape s = conv.out_shape(in);
    s[1] = conv_out_extent(s[1], 3, 2, Padding::same);
    s[2] = conv_out_extent(s[2], 3, 2, Padding::same);
    return s;
  }
};

// ---------------------------------------------------------------------------
// Residual bottleneck block (encoder-1). Identity form preserves shape; the
// convolutional form strides its first 1×1 conv and projects the skip path.
// ---------------------------------------------------------------------------

template <typename T>
struct BottleneckBlock {
  Conv2dLayer<T> conv1, conv2, conv3, proj;
  BatchNormLayer<T> bn1, bn2, bn3, proj_bn;
  bool has_projection = false;
  int stride = 1;

  struct Cache {
    TensorT<T> x;
    BatchNormCache<T> b1, b2, b3, bp;
    TensorT<T> a1, a2;  // relu outputs feeding conv2/conv3
    TensorT<T> out;     // post-sum relu output
  };

  static BottleneckBlock make(const std::string& prefix, std::int64_t in_ch, std::int64_t mid_ch,
                              std::int64_t out_ch, int stride, bool projection) {
    BottleneckBlock b;
    b.stride = stride;
    b.has_projection = projection;
    b.conv1 = {prefix + ".conv1", ConvSpec{1, 1, stride, Padding::same, 1}, in_ch, mid_ch, false};
    b.conv2 = {prefix + ".conv2", ConvSpec{3, 3, 1, Padding::same, 1}, mid_ch, mid_ch, false};
    b.conv3 = {prefix + ".conv3", ConvSpec{1, 1, 1, Padding::same, 1}, mid_ch, out_ch, false};
    b.bn1 = {prefix + ".bn1", mid_ch};
    b.bn2 = {prefix + ".bn2", mid_ch};
    b.bn3 = {prefix + ".bn3", out_ch};
    if (projection) {
      b.proj = {prefix + ".proj", ConvSpec{1, 1, stride, Padding::same, 1}, in_ch, out_ch, false};
      b.proj_bn = {prefix + ".proj_bn", out_ch};
    }
    return b;
  }

  void init(ParamStoreT<T>& ps, Rng& rng) const {
    conv1.init(ps, rng);
    bn1.init(ps, rng);
    conv2.init(ps, rng);
    bn2.init(ps, rng);
    conv3.init(ps, rng);
    bn3.init(ps, rng);
    if (has_projection) {
      proj.init(ps, rng);
      proj_bn.init(ps, rng);
    }
  }

  TensorT<T> forward(ParamStoreT<T>& ps, const TensorT<T>& x, BnMode mode, bool commit,
                     Cache* cache) const {
    if (!has_projection && x.dim(3) != conv3.out_ch) {
      throw ShapeError("identity block channel mismatch: input " + shape_str(x.shape()) +
                       " vs block width " + std::to_string(conv3.out_ch));
    }
    if (stride > 1 && (x.dim(1) % stride != 0 || x.dim(2) % stride != 0)) {
      throw ShapeError("downsampling block requires even spatial extents, got " +
                       shape_str(x.shape()));
    }
    TensorT<T> t = conv1.forward(ps, x);
    t = bn1.forward(ps, t, mode, commit, cache ? &cache->b1 : nullptr);
    t = relu_forward(t);
    if (cache) cache->a1 = t;
    t = conv2.forward(ps, t);
    t = bn2.forward(ps, t, mode, commit, cache ? &cache->b2 : nullptr);
    t = relu_forward(t);
    if (cache) cache->a2 = t;
    t = conv3.forward(ps, t);
    t = bn3.forward(ps, t, mode, commit, cache ? &cache->b3 : nullptr);

    TensorT<T> skip;
    if (has_projection) {
      skip = proj.forward(ps, x);
      skip = proj_bn.forward(ps, skip, mode, commit, cache ? &cache->bp : nullptr);
    } else {
      skip = x;
    }
    t.add_(skip);
    t = relu_forward(t);
    if (cache) {
      cache->x = x;
      cache->out = t;
    }
    return t;
  }

  TensorT<T> backward(ParamStoreT<T>& ps, const Cache& cache, const TensorT<T>& dy) const {
    TensorT<T> d_sum = relu_backward(cache.out, dy);

    TensorT<T> d = bn3.backward(ps, cache.b3, d_sum);
    d = conv3.backward(ps, cache.a2, d);
    d = relu_backward(cache.a2, d);
    d = bn2.backward(ps, cache.b2, d);
    d = conv2.backward(ps, cache.a1, d);
    d = relu_backward(cache.a1, d);
    d = bn1.backward(ps, cache.b1, d);
    TensorT<T> dx = conv1.backward(ps, cache.x, d);

    if (has_projection) {
      TensorT<T> ds = proj_bn.backward(ps, cache.bp, d_sum);
      dx.add_(proj.backward(ps, cache.x, ds));
    } else {
      dx.add_(d_sum);
    }
    return dx;
  }

  Shape out_shape(const Shape& in) const {
    return {in[0], conv_out_extent(in[1], 1, stride, Padding::same),
            conv_out_extent(in[2], 1, stride, Padding::same), conv3.out_ch};
  }
};

// ---------------------------------------------------------------------------
// Encoder-2 stem: two 3×3 convs (first strided) with BN + ReLU
// ---------------------------------------------------------------------------

template <typename T>
struct Stem2 {
  Conv2dLayer<T> conv1, conv2;
  BatchNormLayer<T> bn1, bn2;

  struct Cache {
    TensorT<T> x;
    BatchNormCache<T> b1, b2;
    TensorT<T> a1;   // relu output feeding conv2
    TensorT<T> out;  // final relu output
  };

  static Stem2 make(const std::string& prefix, std::int64_t w1, std::int64_t w2) {
    Stem2 s;
    s.conv1 = {prefix + ".conv1", ConvSpec{3, 3, 2, Padding::same, 1}, 3, w1, false};
    s.conv2 = {prefix + ".conv2", ConvSpec{3, 3, 1, Padding::same, 1}, w1, w2, false};
    s.bn1 = {prefix + ".bn1", w1};
    s.bn2 = {prefix + ".bn2", w2};
    return s;
  }

  void init(ParamStoreT<T>& ps, Rng& rng) const {
    conv1.init(ps, rng);
    bn1.init(ps, rng);
    conv2.init(ps, rng);
    bn2.init(ps, rng);
  }

  TensorT<T> forward(ParamStoreT<T>& ps, const TensorT<T>& x, BnMode mode, bool commit,
                     Cache* cache) const {
    TensorT<T> t = conv1.forward(ps, x);
    t = bn1.forward(ps, t, mode, commit, cache ? &cache->b1 : nullptr);
    t = relu_forward(t);
    if (cache) cache->a1 = t;
    t = conv2.forward(ps, t);
    t = bn2.forward(ps, t, mode, commit, cache ? &cache->b2 : nullptr);
    t = relu_forward(t);
    if (cache) {
      cache->x = x;
      cache->out = t;
    }
    return t;
  }

  TensorT<T> backward(ParamStoreT<T>& ps, const Cache& cache, const TensorT<T>& dy) const {
    TensorT<T> d = relu_backward(cache.out, dy);
    d = bn2.backward(ps, cache.b2, d);
    d = conv2.backward(ps, cache.a1, d);
    d = relu_backward(cache.a1, d);
    d = bn1.backward(ps, cache.b1, d);
    return conv1.backward(ps, cache.x, d);
  }

  Shape out_shape(const Shape& in) const { return conv2.out_shape(conv1.out_shape(in)); }
};

// ---------------------------------------------------------------------------
// Encoder-2 units: entry (downsampling, projected skip), middle (summed skip)
// ---------------------------------------------------------------------------

template <typename T>
struct EntryFlowUnit {
  DwscLayer<T> dwsc1, dwsc2;
  BatchNormLayer<T> bn1, bn2;
  Conv2dLayer<T> proj;
  BatchNormLayer<T> proj_bn;

  struct Cache {
    TensorT<T> x;
    DwscCache<T> d1, d2;
    BatchNormCache<T> b1, b2, bp;
    TensorT<T> a1;  // relu output feeding dwsc2
    MaxPool2dCache pool;
    TensorT<T> out;
  };

  static EntryFlowUnit make(const std::string& prefix, std::int64_t in_ch, std::int64_t out_ch) {
    EntryFlowUnit u;
    const ConvSpec dw{3, 3, 1, Padding::same, 1};
    u.dwsc1 = {prefix + ".dwsc1", dw, in_ch, out_ch};
    u.dwsc2 = {prefix + ".dwsc2", dw, out_ch, out_ch};
    u.bn1 = {prefix + ".bn1", out_ch};
    u.bn2 = {prefix + ".bn2", out_ch};
    u.proj = {prefix + ".proj", ConvSpec{1, 1, 2, Padding::same, 1}, in_ch, out_ch, false};
    u.proj_bn = {prefix + ".proj_bn", out_ch};
    return u;
  }

  void init(ParamStoreT<T>& ps, Rng& rng) const {
    dwsc1.init(ps, rng);
    bn1.init(ps, rng);
    dwsc2.init(ps, rng);
    bn2.init(ps, rng);
    proj.init(ps, rng);
    proj_bn.init(ps, rng);
  }

  TensorT<T> forward(ParamStoreT<T>& ps, const TensorT<T>& x, BnMode mode, bool commit,
                     Cache* cache) const {
    TensorT<T> t = dwsc1.forward(ps, x, cache ? &cache->d1 : nullptr);
    t = bn1.forward(ps, t, mode, commit, cache ? &cache->b1 : nullptr);
    t = relu_forward(t);
    if (cache) cache->a1 = t;
    t = dwsc2.forward(ps, t, cache ? &cache->d2 : nullptr);
    t = bn2.forward(ps, t, mode, commit, cache ? &cache->b2 : nullptr);
    t = maxpool2d_forward(t, 3, 3, 2, cache ? &cache->pool : nullptr);

    TensorT<T> skip = proj.forward(ps, x);
    skip = proj_bn.forward(ps, skip, mode, commit, cache ? &cache->bp : nullptr);
    t.add_(skip);
    t = relu_forward(t);
    if (cache) {
      cache->x = x;
      cache->out = t;
    }
    return t;
  }

  TensorT<T> backward(ParamStoreT<T>& ps, const Cache& cache, const TensorT<T>& dy) const {
    TensorT<T> d_sum = relu_backward(cache.out, dy);

    TensorT<T> d = maxpool2d_backward<T>(cache.pool, d_sum);
    d = bn2.backward(ps, cache.b2, d);
    d = dwsc2.backward(ps, cache.a1, cache.d2, d);
    d = relu_backward(cache.a1, d);
    d = bn1.backward(ps, cache.b1, d);
    TensorT<T> dx = dwsc1.backward(ps, cache.x, cache.d1, d);

    TensorT<T> ds = proj_bn.backward(ps, cache.bp, d_sum);
    dx.add_(proj.backward(ps, cache.x, ds));
    return dx;
  }

  Shape out_shape(const Shape& in) const {
    return {in[0], conv_out_extent(in[1], 3, 2, Padding::same),
            conv_out_extent(in[2], 3, 2, Padding::same), dwsc2.out_ch};
  }
};

template <typename T>
struct MiddleFlowUnit {
  DwscLayer<T> dwsc1, dwsc2, dwsc3;
  BatchNormLayer<T> bn1, bn2, bn3;

  struct Cache {
    TensorT<T> x;
    DwscCache<T> d1, d2, d3;
    BatchNormCache<T> b1, b2, b3;
    TensorT<T> a1, a2;
    TensorT<T> out;
  };

  static MiddleFlowUnit make(const std::string& prefix, std::int64_t ch) {
    MiddleFlowUnit u;
    const ConvSpec dw{3, 3, 1, Padding::same, 1};
    u.dwsc1 = {prefix + ".dwsc1", dw, ch, ch};
    u.dwsc2 = {prefix + ".dwsc2", dw, ch, ch};
    u.dwsc3 = {prefix + ".dwsc3", dw, ch, ch};
    u.bn1 = {prefix + ".bn1", ch};
    u.bn2 = {prefix + ".bn2", ch};
    u.bn3 = {prefix + ".bn3", ch};
    return u;
  }

  void init(ParamStoreT<T>& ps, Rng& rng) const {
    dwsc1.init(ps, rng);
    bn1.init(ps, rng);
    dwsc2.init(ps, rng);
    bn2.init(ps, rng);
    dwsc3.init(ps, rng);
    bn3.init(ps, rng);
  }

  TensorT<T> forward(ParamStoreT<T>& ps, const TensorT<T>& x, BnMode mode, bool commit,
                     Cache* cache) const {
    TensorT<T> t = dwsc1.forward(ps, x, cache ? &cache->d1 : nullptr);
    t = bn1.forward(ps, t, mode, commit, cache ? &cache->b1 : nullptr);
    t = relu_forward(t);
    if (cache) cache->a1 = t;
    t = dwsc2.forward(ps, t, cache ? &cache->d2 : nullptr);
    t = bn2.forward(ps, t, mode, commit, cache ? &cache->b2 : nullptr);
    t = relu_forward(t);
    if (cache) cache->a2 = t;
    t = dwsc3.forward(ps, t, cache ? &cache->d3 : nullptr);
    t = bn3.forward(ps, t, mode, commit, cache ? &cache->b3 : nullptr);
    t.add_(x);
    t = relu_forward(t);
    if (cache) {
      cache->x = x;
      cache->out = t;
    }
    return t;
  }

  TensorT<T> backward(ParamStoreT<T>& ps, const Cache& cache, const TensorT<T>& dy) const {
    TensorT<T> d_sum = relu_backward(cache.out, dy);

    TensorT<T> d = bn3.backward(ps, cache.b3, d_sum);
    d = dwsc3.backward(ps, cache.a2, cache.d3, d);
    d = relu_backward(cache.a2, d);
    d = bn2.backward(ps, cache.b2, d);
    d = dwsc2.backward(ps, cache.a1, cache.d2, d);
    d = relu_backward(cache.a1, d);
    d = bn1.backward(ps, cache.b1, d);
    TensorT<T> dx = dwsc1.backward(ps, cache.x, cache.d1, d);
    dx.add_(d_sum);
    return dx;
  }

  Shape out_shape(const Shape& in) const { return in; }
};

/// Exit flow: one downsampling unit followed by a widening DwSC layer.
template <typename T>
struct ExitFlow {
  EntryFlowUnit<T> unit;
  DwscLayer<T> widen;
  BatchNormLayer<T> widen_bn;

  struct Cache {
    typename EntryFlowUnit<T>::Cache u;
    TensorT<T> unit_out;
    DwscCache<T> dw;
    BatchNormCache<T> bw;
    TensorT<T> out;
  };

  static ExitFlow make(const std::string& prefix, std::int64_t in_ch, std::int64_t out_ch) {
    ExitFlow e;
    e.unit = EntryFlowUnit<T>::make(prefix + ".unit", in_ch, in_ch);
    e.widen = {prefix + ".widen", ConvSpec{3, 3, 1, Padding::same, 1}, in_ch, out_ch};
    e.widen_bn = {prefix + ".widen_bn", out_ch};
    return e;
  }

  void init(ParamStoreT<T>& ps, Rng& rng) const {
    unit.init(ps, rng);
    widen.init(ps, rng);
    widen_bn.init(ps, rng);
  }

  TensorT<T> forward(ParamStoreT<T>& ps, const TensorT<T>& x, BnMode mode, bool commit,
                     Cache* cache) const {
    TensorT<T> t = unit.forward(ps, x, mode, commit, cache ? &cache->u : nullptr);
    if (cache) cache->unit_out = t;
    TensorT<T> u = std::move(t);
    t = widen.forward(ps, u, cache ? &cache->dw : nullptr);
    t = widen_bn.forward(ps, t, mode, commit, cache ? &cache->bw : nullptr);
    t = relu_forward(t);
    if (cache) cache->out = t;
    return t;
  }

  TensorT<T> backward(ParamStoreT<T>& ps, const Cache& cache, const TensorT<T>& dy) const {
    TensorT<T> d = relu_backward(cache.out, dy);
    d = widen_bn.backward(ps, cache.bw, d);
    d = widen.backward(ps, cache.unit_out, cache.dw, d);
    return unit.backward(ps, cache.u, d);
  }

  Shape out_shape(const Shape& in) const {
    Shape s = unit.out_shape(in);
    s[3] = widen.out_ch;
    return s;
  }
};

// ---------------------------------------------------------------------------
// Prediction head: GAP then four fully connected layers, raw logits out
// ---------------------------------------------------------------------------

template <typename T>
struct FclHead {
  DenseLayer<T> fc1, fc2, fc3, fc4;

  struct Cache {
    Shape feature_shape;
    TensorT<T> pooled;
    TensorT<T> a1, a2, a3;  // relu outputs
  };

  static FclHead make(const std::string& prefix, std::int64_t feature_ch, std::int64_t classes) {
    if (classes < 2) throw ValueError("prediction head requires K >= 2 classes");
    FclHead h;
    h.fc1 = {prefix + ".fc1", feature_ch, 256};
    h.fc2 = {prefix + ".fc2", 256, 128};
    h.fc3 = {prefix + ".fc3", 128, 64};
    // small final-layer init keeps a fresh model's predictions near uniform
    h.fc4 = {prefix + ".fc4", 64, classes, 0.01};
    return h;
  }

  void init(ParamStoreT<T>& ps, Rng& rng) const {
    fc1.init(ps, rng);
    fc2.init(ps, rng);
    fc3.init(ps, rng);
    fc4.init(ps, rng);
  }

  TensorT<T> forward(const ParamStoreT<T>& ps, const TensorT<T>& features, Cache* cache) const {
    TensorT<T> pooled = global_avg_pool_forward(features);
    TensorT<T> a1 = relu_forward(fc1.forward(ps, pooled));
    TensorT<T> a2 = relu_forward(fc2.forward(ps, a1));
    TensorT<T> a3 = relu_forward(fc3.forward(ps, a2));
    TensorT<T> logits = fc4.forward(ps, a3);
    if (cache) {
      cache->feature_shape = features.shape();
      cache->pooled = std::move(pooled);
      cache->a1 = std::move(a1);
      cache->a2 = std::move(a2);
      cache->a3 = std::move(a3);
    }
    return logits;
  }

  TensorT<T> backward(ParamStoreT<T>& ps, const Cache& cache, const TensorT<T>& d_logits) const {
    TensorT<T> d = fc4.backward(ps, cache.a3, d_logits);
    d = relu_backward(cache.a3, d);
    d = fc3.backward(ps, cache.a2, d);
    d = relu_backward(cache.a2, d);
    d = fc2.backward(ps, cache.a1, d);
    d = relu_backward(cache.a1, d);
    d = fc1.backward(ps, cache.pooled, d);
    return global_avg_pool_backward(cache.feature_shape, d);
  }

  std::int64_t param_count() const {
    std::int64_t n = 0;
    for (const DenseLayer<T>* l : {&fc1, &fc2, &fc3, &fc4}) n += l->in_ch * l->out_ch + l->out_ch;
    return n;
  }
};

}  // namespace cvrnet

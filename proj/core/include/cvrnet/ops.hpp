#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "cvrnet/parallel.hpp"
#include "cvrnet/tensor.hpp"

namespace cvrnet {

enum class Padding { same, valid };

/// 2-D convolution geometry. `same` yields out = ceil(in / stride) with zero
/// padding split symmetrically, extra pixel on the bottom/right.
struct ConvSpec {
  int kernel_h = 1;
  int kernel_w = 1;
  int stride = 1;
  Padding padding = Padding::same;
  int groups = 1;

  void validate() const {
    if (kernel_h < 1 || kernel_w < 1) throw ValueError("conv kernel extents must be >= 1");
    if (stride < 1) throw ValueError("conv stride must be >= 1");
    if (groups < 1) throw ValueError("conv groups must be >= 1");
  }
};

inline std::int64_t conv_out_extent(std::int64_t in, int kernel, int stride, Padding padding) {
  if (padding == Padding::same) return (in + stride - 1) / stride;
  const std::int64_t out = (in - kernel) / stride + 1;
  if (in < kernel || out < 1) {
    throw ShapeError("valid-padding output would be empty: extent " + std::to_string(in) +
                     ", kernel " + std::to_string(kernel));
  }
  return out;
}

inline std::int64_t pad_before(std::int64_t in, std::int64_t out, int kernel, int stride,
                               Padding padding) {
  if (padding == Padding::valid) return 0;
  const std::int64_t total = std::max<std::int64_t>(0, (out - 1) * stride + kernel - in);
  return total / 2;  // extra padding goes after (bottom/right)
}

namespace detail {

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw ShapeError(msg);
}

template <typename T>
void require_rank(const TensorT<T>& t, std::size_t rank, const char* what) {
  if (t.rank() != rank) {
    throw ShapeError(std::string(what) + ": expected rank " + std::to_string(rank) + ", got " +
                     shape_str(t.shape()));
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// conv2d: input B×H×W×Cin, weights kh×kw×Cin×Cout, bias Cout (optional/empty)
// ---------------------------------------------------------------------------

template <typename T>
TensorT<T> conv2d_forward(const TensorT<T>& input, const TensorT<T>& weights,
                          const TensorT<T>& bias, const ConvSpec& spec) {
  spec.validate();
  detail::require(spec.groups == 1, "conv2d requires groups == 1 (use the depthwise op)");
  detail::require_rank(input, 4, "conv2d input");
  detail::require_rank(weights, 4, "conv2d weights");
  const std::int64_t B = input.dim(0), H = input.dim(1), W = input.dim(2), Cin = input.dim(3);
  detail::require(weights.dim(0) == spec.kernel_h && weights.dim(1) == spec.kernel_w,
                  "conv2d weights " + shape_str(weights.shape()) + " do not match kernel " +
                      std::to_string(spec.kernel_h) + "x" + std::to_string(spec.kernel_w));
  detail::require(weights.dim(2) == Cin, "conv2d input channels " + std::to_string(Cin) +
                                             " vs weight channels " + std::to_string(weights.dim(2)));
  const std::int64_t Cout = weights.dim(3);
  if (!bias.empty()) {
    detail::require(bias.rank() == 1 && bias.dim(0) == Cout,
                    "conv2d bias must be [Cout], got " + shape_str(bias.shape()));
  }
  const std::int64_t OH = conv_out_extent(H, spec.kernel_h, spec.stride, spec.padding);
  const std::int64_t OW = conv_out_extent(W, spec.kernel_w, spec.stride, spec.padding);
  const std::int64_t pt = pad_before(H, OH, spec.kernel_h, spec.stride, spec.padding);
  const std::int64_t pl = pad_before(W, OW, spec.kernel_w, spec.stride, spec.padding);

  TensorT<T> out({B, OH, OW, Cout});
  const T* wptr = weights.data();
  parallel_for(B, [&](std::int64_t b0, std::int64_t b1) {
    std::vector<T> acc(static_cast<std::size_t>(Cout));
    for (std::int64_t b = b0; b < b1; ++b) {
      for (std::int64_t oh = 0; oh < OH; ++oh) {
        for (std::int64_t ow = 0; ow < OW; ++ow) {
          if (!bias.empty()) {
            std::copy(bias.data(), bias.data() + Cout, acc.begin());
          } else {
            std::fill(acc.begin(), acc.end(), T(0));
          }
          for (int u = 0; u < spec.kernel_h; ++u) {
            const std::int64_t ih = oh * spec.stride - pt + u;
            if (ih < 0 || ih >= H) continue;
            for (int v = 0; v < spec.kernel_w; ++v) {
              const std::int64_t iw = ow * spec.stride - pl + v;
              if (iw < 0 || iw >= W) continue;
              const T* xp = &input(b, ih, iw, 0);
              const T* wp = wptr + ((static_cast<std::int64_t>(u) * spec.kernel_w + v) * Cin) * Cout;
              for (std::int64_t ci = 0; ci < Cin; ++ci) {
                const T xv = xp[ci];
                const T* wrow = wp + ci * Cout;
                for (std::int64_t co = 0; co < Cout; ++co) acc[static_cast<std::size_t>(co)] += xv * wrow[co];
              }
            }
          }
          std::copy(acc.begin(), acc.end(), &out(b, oh, ow, 0));
        }
      }
    }
  });
  check_finite(out, "conv2d");
  return out;
}

template <typename T>
struct Conv2dGrads {
  TensorT<T> input;
  TensorT<T> weights;
  TensorT<T> bias;
};

template <typename T>
Conv2dGrads<T> conv2d_backward(const TensorT<T>& input, const TensorT<T>& weights,
                               const ConvSpec& spec, const TensorT<T>& grad_out) {
  const std::int64_t B = input.dim(0), H = input.dim(1), W = input.dim(2), Cin = input.dim(3);
  const std::int64_t Cout = weights.dim(3);
  const std::int64_t OH = grad_out.dim(1), OW = grad_out.dim(2);
  detail::require(grad_out.dim(0) == B && grad_out.dim(3) == Cout,
                  "conv2d backward cotangent shape " + shape_str(grad_out.shape()));
  const std::int64_t pt = pad_before(H, OH, spec.kernel_h, spec.stride, spec.padding);
  const std::int64_t pl = pad_before(W, OW, spec.kernel_w, spec.stride, spec.padding);

  Conv2dGrads<T> g{TensorT<T>(input.shape()), TensorT<T>(weights.shape()), TensorT<T>({Cout})};
  for (std::int64_t b = 0; b < B; ++b) {
    for (std::int64_t oh = 0; oh < OH; ++oh) {
      for (std::int64_t ow = 0; ow < OW; ++ow) {
        const T* dyp = &grad_out(b, oh, ow, 0);
        for (std::int64_t co = 0; co < Cout; ++co) g.bias[co] += dyp[co];
        for (int u = 0; u < spec.kernel_h; ++u) {
          const std::int64_t ih = oh * spec.stride - pt + u;
          if (ih < 0 || ih >= H) continue;
          for (int v = 0; v < spec.kernel_w; ++v) {
            const std::int64_t iw = ow * spec.stride - pl + v;
            if (iw < 0 || iw >= W) continue;
            const T* xp = &input(b, ih, iw, 0);
            T* dxp = &g.input(b, ih, iw, 0);
            const std::int64_t wbase = ((static_cast<std::int64_t>(u) * spec.kernel_w + v) * Cin) * Cout;
            const T* wp = weights.data() + wbase;
            T* dwp = g.weights.data() + wbase;
            for (std::int64_t ci = 0; ci < Cin; ++ci) {
              const T xv = xp[ci];
              const T* wrow = wp + ci * Cout;
              T* dwrow = dwp + ci * Cout;
              T acc = 0;
              for (std::int64_t co = 0; co < Cout; ++co) {
                const T d = dyp[co];
                acc += d * wrow[co];
                dwrow[co] += xv * d;
              }
              dxp[ci] += acc;
            }
          }
        }
      }
    }
  }
  return g;
}

// ---------------------------------------------------------------------------
// depthwise conv: weights kh×kw×C×1, one spatial filter per channel
// ---------------------------------------------------------------------------

template <typename T>
TensorT<T> depthwise_conv2d_forward(const TensorT<T>& input, const TensorT<T>& weights,
                                    const TensorT<T>& bias, const ConvSpec& spec) {
  spec.validate();
  detail::require_rank(input, 4, "depthwise input");
  detail::require_rank(weights, 4, "depthwise weights");
  const std::int64_t B = input.dim(0), H = input.dim(1), W = input.dim(2), C = input.dim(3);
  detail::require(weights.dim(0) == spec.kernel_h && weights.dim(1) == spec.kernel_w &&
                      weights.dim(2) == C && weights.dim(3) == 1,
                  "depthwise weights must be kh×kw×C×1, got " + shape_str(weights.shape()));
  if (!bias.empty()) {
    detail::require(bias.rank() == 1 && bias.dim(0) == C,
                    "depthwise bias must be [C], got " + shape_str(bias.shape()));
  }
  const std::int64_t OH = conv_out_extent(H, spec.kernel_h, spec.stride, spec.padding);
  const std::int64_t OW = conv_out_extent(W, spec.kernel_w, spec.stride, spec.padding);
  const std::int64_t pt = pad_before(H, OH, spec.kernel_h, spec.stride, spec.padding);
  const std::int64_t pl = pad_before(W, OW, spec.kernel_w, spec.stride, spec.padding);

  TensorT<T> out({B, OH, OW, C});
  parallel_for(B, [&](std::int64_t b0, std::int64_t b1) {
    std::vector<T> acc(static_cast<std::size_t>(C));
    for (std::int64_t b = b0; b < b1; ++b) {
      for (std::int64_t oh = 0; oh < OH; ++oh) {
        for (std::int64_t ow = 0; ow < OW; ++ow) {
          if (!bias.empty()) {
            std::copy(bias.data(), bias.data() + C, acc.begin());
          } else {
            std::fill(acc.begin(), acc.end(), T(0));
          }
          for (int u = 0; u < spec.kernel_h; ++u) {
            const std::int64_t ih = oh * spec.stride - pt + u;
            if (ih < 0 || ih >= H) continue;
            for (int v = 0; v < spec.kernel_w; ++v) {
              const std::int64_t iw = ow * spec.stride - pl + v;
              if (iw < 0 || iw >= W) continue;
              const T* xp = &input(b, ih, iw, 0);
              const T* wp = &weights(u, v, 0, 0);
              for (std::int64_t c = 0; c < C; ++c) acc[static_cast<std::size_t>(c)] += xp[c] * wp[c];
            }
          }
          std::copy(acc.begin(), acc.end(), &out(b, oh, ow, 0));
        }
      }
    }
  });
  check_finite(out, "depthwise_conv2d");
  return out;
}

template <typename T>
Conv2dGrads<T> depthwise_conv2d_backward(const TensorT<T>& input, const TensorT<T>& weights,
                                         const ConvSpec& spec, const TensorT<T>& grad_out) {
  const std::int64_t B = input.dim(0), H = input.dim(1), W = input.dim(2), C = input.dim(3);
  const std::int64_t OH = grad_out.dim(1), OW = grad_out.dim(2);
  const std::int64_t pt = pad_before(H, OH, spec.kernel_h, spec.stride, spec.padding);
  const std::int64_t pl = pad_before(W, OW, spec.kernel_w, spec.stride, spec.padding);

  Conv2dGrads<T> g{TensorT<T>(input.shape()), TensorT<T>(weights.shape()), TensorT<T>({C})};
  for (std::int64_t b = 0; b < B; ++b) {
    for (std::int64_t oh = 0; oh < OH; ++oh) {
      for (std::int64_t ow = 0; ow < OW; ++ow) {
        const T* dyp = &grad_out(b, oh, ow, 0);
        for (std::int64_t c = 0; c < C; ++c) g.bias[c] += dyp[c];
        for (int u = 0; u < spec.kernel_h; ++u) {
          const std::int64_t ih = oh * spec.stride - pt + u;
          if (ih < 0 || ih >= H) continue;
          for (int v = 0; v < spec.kernel_w; ++v) {
            const std::int64_t iw = ow * spec.stride - pl + v;
            if (iw < 0 || iw >= W) continue;
            const T* xp = &input(b, ih, iw, 0);
            T* dxp = &g.input(b, ih, iw, 0);
            const T* wp = &weights(u, v, 0, 0);
            T* dwp = &g.weights(u, v, 0, 0);
            for (std::int64_t c = 0; c < C; ++c) {
              dxp[c] += dyp[c] * wp[c];
              dwp[c] += dyp[c] * xp[c];
            }
          }
        }
      }
    }
  }
  return g;
}

// ---------------------------------------------------------------------------
// depthwise-separable conv: depthwise stage followed by a 1×1 pointwise conv
// ---------------------------------------------------------------------------

template <typename T>
struct DwscCache {
  TensorT<T> dw_out;
};

inline ConvSpec pointwise_spec() { return ConvSpec{1, 1, 1, Padding::same, 1}; }

template <typename T>
TensorT<T> depthwise_separable_forward(const TensorT<T>& input, const TensorT<T>& dw_weights,
                                       const TensorT<T>& dw_bias, const TensorT<T>& pw_weights,
                                       const TensorT<T>& pw_bias, const ConvSpec& spec,
                                       DwscCache<T>* cache = nullptr) {
  TensorT<T> mid = depthwise_conv2d_forward(input, dw_weights, dw_bias, spec);
  TensorT<T> out = conv2d_forward(mid, pw_weights, pw_bias, pointwise_spec());
  if (cache) cache->dw_out = std::move(mid);
  return out;
}

template <typename T>
struct DwscGrads {
  TensorT<T> input;
  TensorT<T> dw_weights;
  TensorT<T> dw_bias;
  TensorT<T> pw_weights;
  TensorT<T> pw_bias;
};

template <typename T>
DwscGrads<T> depthwise_separable_backward(const TensorT<T>& input, const TensorT<T>& dw_weights,
                                          const TensorT<T>& pw_weights, const ConvSpec& spec,
                                          const DwscCache<T>& cache, const TensorT<T>& grad_out) {
  Conv2dGrads<T> pw = conv2d_backward(cache.dw_out, pw_weights, pointwise_spec(), grad_out);
  Conv2dGrads<T> dw = depthwise_conv2d_backward(input, dw_weights, spec, pw.input);
  return DwscGrads<T>{std::move(dw.input), std::move(dw.weights), std::move(dw.bias),
                      std::move(pw.weights), std::move(pw.bias)};
}

// ---------------------------------------------------------------------------
// maxpool2d with `same` zero padding; backward routes to the argmax, first
// occurrence in row-major window order. A padded zero that wins the window
// absorbs the cotangent (index -1).
// ---------------------------------------------------------------------------

struct MaxPool2dCache {
  Shape in_shape;
  std::vector<std::int64_t> argmax;
};

template <typename T>
TensorT<T> maxpool2d_forward(const TensorT<T>& input, int pool_h, int pool_w, int stride,
                             MaxPool2dCache* cache = nullptr) {
  detail::require_rank(input, 4, "maxpool2d input");
  if (pool_h < 1 || pool_w < 1 || stride < 1) throw ValueError("maxpool window/stride must be >= 1");
  const std::int64_t B = input.dim(0), H = input.dim(1), W = input.dim(2), C = input.dim(3);
  // `same` padding sizes the pad so every window fits the padded extent
  const std::int64_t OH = conv_out_extent(H, pool_h, stride, Padding::same);
  const std::int64_t OW = conv_out_extent(W, pool_w, stride, Padding::same);
  const std::int64_t pt = pad_before(H, OH, pool_h, stride, Padding::same);
  const std::int64_t pl = pad_before(W, OW, pool_w, stride, Padding::same);

  TensorT<T> out({B, OH, OW, C});
  if (cache) {
    cache->in_shape = input.shape();
    cache->argmax.assign(static_cast<std::size_t>(out.numel()), -1);
  }
  for (std::int64_t b = 0; b < B; ++b) {
    for (std::int64_t oh = 0; oh < OH; ++oh) {
      for (std::int64_t ow = 0; ow < OW; ++ow) {
        for (std::int64_t c = 0; c < C; ++c) {
          T best = -std::numeric_limits<T>::infinity();
          std::int64_t best_idx = -1;
          for (int u = 0; u < pool_h; ++u) {
            const std::int64_t ih = oh * stride - pt + u;
            for (int v = 0; v < pool_w; ++v) {
              const std::int64_t iw = ow * stride - pl + v;
              const bool inside = ih >= 0 && ih < H && iw >= 0 && iw < W;
              const T value = inside ? input(b, ih, iw, c) : T(0);
              if (value > best) {
                best = value;
                best_idx = inside ? ((b * H + ih) * W + iw) * C + c : -1;
              }
            }
          }
          out(b, oh, ow, c) = best;
          if (cache) {
            cache->argmax[static_cast<std::size_t>(((b * OH + oh) * OW + ow) * C + c)] = best_idx;
          }
        }
      }
    }
  }
  check_finite(out, "maxpool2d");
  return out;
}

template <typename T>
TensorT<T> maxpool2d_backward(const MaxPool2dCache& cache, const TensorT<T>& grad_out) {
  detail::require(static_cast<std::size_t>(grad_out.numel()) == cache.argmax.size(),
                  "maxpool backward cotangent does not match the cached forward");
  TensorT<T> dx(cache.in_shape);
  for (std::int64_t i = 0; i < grad_out.numel(); ++i) {
    const std::int64_t idx = cache.argmax[static_cast<std::size_t>(i)];
    if (idx >= 0) dx[idx] += grad_out[i];
  }
  return dx;
}

// ---------------------------------------------------------------------------
// global average pooling: B×H×W×C -> B×C
// ---------------------------------------------------------------------------

template <typename T>
TensorT<T> global_avg_pool_forward(const TensorT<T>& input) {
  detail::require_rank(input, 4, "global_avg_pool input");
  const std::int64_t B = input.dim(0), H = input.dim(1), W = input.dim(2), C = input.dim(3);
  TensorT<T> out({B, C});
  const T inv = T(1) / static_cast<T>(H * W);
  for (std::int64_t b = 0; b < B; ++b) {
    T* op = &out(b, 0);
    for (std::int64_t h = 0; h < H; ++h) {
      for (std::int64_t w = 0; w < W; ++w) {
        const T* xp = &input(b, h, w, 0);
        for (std::int64_t c = 0; c < C; ++c) op[c] += xp[c];
      }
    }
    for (std::int64_t c = 0; c < C; ++c) op[c] *= inv;
  }
  check_finite(out, "global_avg_pool");
  return out;
}

template <typename T>
TensorT<T> global_avg_pool_backward(const Shape& in_shape, const TensorT<T>& grad_out) {
  TensorT<T> dx(in_shape);
  const std::int64_t B = in_shape[0], H = in_shape[1], W = in_shape[2], C = in_shape[3];
  detail::require(grad_out.rank() == 2 && grad_out.dim(0) == B && grad_out.dim(1) == C,
                  "global_avg_pool backward cotangent shape " + shape_str(grad_out.shape()));
  const T inv = T(1) / static_cast<T>(H * W);
  for (std::int64_t b = 0; b < B; ++b) {
    const T* gp = &grad_out(b, 0);
    for (std::int64_t h = 0; h < H; ++h) {
      for (std::int64_t w = 0; w < W; ++w) {
        T* dp = &dx(b, h, w, 0);
        for (std::int64_t c = 0; c < C; ++c) dp[c] = gp[c] * inv;
      }
    }
  }
  return dx;
}

// ---------------------------------------------------------------------------
// batch normalization over B×H×W per channel
// ---------------------------------------------------------------------------

enum class BnMode { train, infer };

template <typename T>
struct BatchNormCache {
  TensorT<T> x_hat;
  std::vector<T> inv_std;
};

template <typename T>
struct BatchNormResult {
  TensorT<T> output;
  // batch statistics folded into the running estimates (train mode only)
  std::vector<T> new_running_mean;
  std::vector<T> new_running_var;
};

template <typename T>
BatchNormResult<T> batch_norm_forward(const TensorT<T>& input, const TensorT<T>& gamma,
                                      const TensorT<T>& beta, const TensorT<T>& running_mean,
                                      const TensorT<T>& running_var, BnMode mode, T momentum,
                                      T epsilon, BatchNormCache<T>* cache = nullptr) {
  detail::require_rank(input, 4, "batch_norm input");
  const std::int64_t B = input.dim(0), H = input.dim(1), W = input.dim(2), C = input.dim(3);
  if (epsilon <= T(0)) throw ValueError("batch_norm epsilon must be > 0");
  for (const auto* p : {&gamma, &beta, &running_mean, &running_var}) {
    detail::require(p->rank() == 1 && p->dim(0) == C,
                    "batch_norm per-channel parameter must be [C], got " + shape_str(p->shape()));
  }

  const std::int64_t m = B * H * W;
  std::vector<T> mean(static_cast<std::size_t>(C)), var(static_cast<std::size_t>(C));
  if (mode == BnMode::train) {
    for (std::int64_t b = 0; b < B; ++b)
      for (std::int64_t h = 0; h < H; ++h)
        for (std::int64_t w = 0; w < W; ++w) {
          const T* xp = &input(b, h, w, 0);
          for (std::int64_t c = 0; c < C; ++c) mean[static_cast<std::size_t>(c)] += xp[c];
        }
    for (auto& v : mean) v /= static_cast<T>(m);
    for (std::int64_t b = 0; b < B; ++b)
      for (std::int64_t h = 0; h < H; ++h)
        for (std::int64_t w = 0; w < W; ++w) {
          const T* xp = &input(b, h, w, 0);
          for (std::int64_t c = 0; c < C; ++c) {
            const T d = xp[c] - mean[static_cast<std::size_t>(c)];
            var[static_cast<std::size_t>(c)] += d * d;
          }
        }
    for (auto& v : var) v /= static_cast<T>(m);
  } else {
    for (std::int64_t c = 0; c < C; ++c) {
      mean[static_cast<std::size_t>(c)] = running_mean[c];
      var[static_cast<std::size_t>(c)] = running_var[c];
    }
  }

  std::vector<T> inv_std(static_cast<std::size_t>(C));
  for (std::int64_t c = 0; c < C; ++c) {
    inv_std[static_cast<std::size_t>(c)] = T(1) / std::sqrt(var[static_cast<std::size_t>(c)] + epsilon);
  }

  BatchNormResult<T> result;
  result.output = TensorT<T>(input.shape());
  TensorT<T> x_hat;
  const bool want_cache = cache != nullptr;
  if (want_cache) x_hat = TensorT<T>(input.shape());
  for (std::int64_t b = 0; b < B; ++b)
    for (std::int64_t h = 0; h < H; ++h)
      for (std::int64_t w = 0; w < W; ++w) {
        const T* xp = &input(b, h, w, 0);
        T* yp = &result.output(b, h, w, 0);
        T* hp = want_cache ? &x_hat(b, h, w, 0) : nullptr;
        for (std::int64_t c = 0; c < C; ++c) {
          const std::size_t cc = static_cast<std::size_t>(c);
          const T xn = (xp[c] - mean[cc]) * inv_std[cc];
          if (hp) hp[c] = xn;
          yp[c] = gamma[c] * xn + beta[c];
        }
      }

  if (mode == BnMode::train) {
    result.new_running_mean.resize(static_cast<std::size_t>(C));
    result.new_running_var.resize(static_cast<std::size_t>(C));
    for (std::int64_t c = 0; c < C; ++c) {
      const std::size_t cc = static_cast<std::size_t>(c);
      result.new_running_mean[cc] = momentum * running_mean[c] + (T(1) - momentum) * mean[cc];
      result.new_running_var[cc] = momentum * running_var[c] + (T(1) - momentum) * var[cc];
    }
  }
  if (cache) {
    cache->x_hat = std::move(x_hat);
    cache->inv_std = std::move(inv_std);
  }
  check_finite(result.output, "batch_norm");
  return result;
}

template <typename T>
struct BatchNormGrads {
  TensorT<T> input;
  TensorT<T> gamma;
  TensorT<T> beta;
};

/// Train-mode backward: the batch statistics are functions of the input, so
/// dx = gamma*inv_std*(dy - mean(dy) - x_hat*mean(dy*x_hat)) per channel.
template <typename T>
BatchNormGrads<T> batch_norm_backward(const BatchNormCache<T>& cache, const TensorT<T>& gamma,
                                      const TensorT<T>& grad_out) {
  const TensorT<T>& x_hat = cache.x_hat;
  detail::require(grad_out.shape() == x_hat.shape(),
                  "batch_norm backward cotangent shape " + shape_str(grad_out.shape()));
  const std::int64_t B = x_hat.dim(0), H = x_hat.dim(1), W = x_hat.dim(2), C = x_hat.dim(3);
  const std::int64_t m = B * H * W;

  BatchNormGrads<T> g{TensorT<T>(x_hat.shape()), TensorT<T>({C}), TensorT<T>({C})};
  for (std::int64_t b = 0; b < B; ++b)
    for (std::int64_t h = 0; h < H; ++h)
      for (std::int64_t w = 0; w < W; ++w) {
        const T* dyp = &grad_out(b, h, w, 0);
        const T* hp = &x_hat(b, h, w, 0);
        for (std::int64_t c = 0; c < C; ++c) {
          g.beta[c] += dyp[c];
          g.gamma[c] += dyp[c] * hp[c];
        }
      }
  for (std::int64_t b = 0; b < B; ++b)
    for (std::int64_t h = 0; h < H; ++h)
      for (std::int64_t w = 0; w < W; ++w) {
        const T* dyp = &grad_out(b, h, w, 0);
        const T* hp = &x_hat(b, h, w, 0);
        T* dxp = &g.input(b, h, w, 0);
        for (std::int64_t c = 0; c < C; ++c) {
          const std::size_t cc = static_cast<std::size_t>(c);
          dxp[c] = gamma[c] * cache.inv_std[cc] *
                   (dyp[c] - g.beta[c] / static_cast<T>(m) - hp[c] * g.gamma[c] / static_cast<T>(m));
        }
      }
  return g;
}

// ---------------------------------------------------------------------------
// dense: B×Cin × (Cin×Cout) + Cout
// ---------------------------------------------------------------------------

template <typename T>
TensorT<T> dense_forward(const TensorT<T>& input, const TensorT<T>& weights,
                         const TensorT<T>& bias) {
  detail::require_rank(input, 2, "dense input");
  detail::require_rank(weights, 2, "dense weights");
  const std::int64_t B = input.dim(0), Cin = input.dim(1), Cout = weights.dim(1);
  detail::require(weights.dim(0) == Cin, "dense inner dimension: input " + shape_str(input.shape()) +
                                             " vs weights " + shape_str(weights.shape()));
  if (!bias.empty()) {
    detail::require(bias.rank() == 1 && bias.dim(0) == Cout,
                    "dense bias must be [Cout], got " + shape_str(bias.shape()));
  }
  TensorT<T> out({B, Cout});
  for (std::int64_t b = 0; b < B; ++b) {
    T* op = &out(b, 0);
    if (!bias.empty()) std::copy(bias.data(), bias.data() + Cout, op);
    const T* xp = &input(b, 0);
    for (std::int64_t ci = 0; ci < Cin; ++ci) {
      const T xv = xp[ci];
      const T* wp = &weights(ci, 0);
      for (std::int64_t co = 0; co < Cout; ++co) op[co] += xv * wp[co];
    }
  }
  check_finite(out, "dense");
  return out;
}

template <typename T>
struct DenseGrads {
  TensorT<T> input;
  TensorT<T> weights;
  TensorT<T> bias;
};

template <typename T>
DenseGrads<T> dense_backward(const TensorT<T>& input, const TensorT<T>& weights,
                             const TensorT<T>& grad_out) {
  const std::int64_t B = input.dim(0), Cin = input.dim(1), Cout = weights.dim(1);
  detail::require(grad_out.rank() == 2 && grad_out.dim(0) == B && grad_out.dim(1) == Cout,
                  "dense backward cotangent shape " + shape_str(grad_out.shape()));
  DenseGrads<T> g{TensorT<T>(input.shape()), TensorT<T>(weights.shape()), TensorT<T>({Cout})};
  for (std::int64_t b = 0; b < B; ++b) {
    const T* dyp = &grad_out(b, 0);
    const T* xp = &input(b, 0);
    T* dxp = &g.input(b, 0);
    for (std::int64_t co = 0; co < Cout; ++co) g.bias[co] += dyp[co];
    for (std::int64_t ci = 0; ci < Cin; ++ci) {
      const T* wp = &weights(ci, 0);
      T* dwp = &g.weights(ci, 0);
      T acc = 0;
      const T xv = xp[ci];
      for (std::int64_t co = 0; co < Cout; ++co) {
        acc += dyp[co] * wp[co];
        dwp[co] += xv * dyp[co];
      }
      dxp[ci] = acc;
    }
  }
  return g;
}

// ---------------------------------------------------------------------------
// ReLU
// ---------------------------------------------------------------------------

template <typename T>
TensorT<T> relu_forward(const TensorT<T>& input) {
  TensorT<T> out(input.shape());
  for (std::int64_t i = 0; i < input.numel(); ++i) out[i] = input[i] > T(0) ? input[i] : T(0);
  return out;
}

/// Gradient gate uses the forward *output* (>0), so the derivative at 0 is 0.
template <typename T>
TensorT<T> relu_backward(const TensorT<T>& output, const TensorT<T>& grad_out) {
  detail::require(grad_out.shape() == output.shape(),
                  "relu backward cotangent shape " + shape_str(grad_out.shape()));
  TensorT<T> dx(output.shape());
  for (std::int64_t i = 0; i < output.numel(); ++i) dx[i] = output[i] > T(0) ? grad_out[i] : T(0);
  return dx;
}

// ---------------------------------------------------------------------------
// softmax and class-weighted cross-entropy
// ---------------------------------------------------------------------------

template <typename T>
TensorT<T> softmax_rows(const TensorT<T>& logits) {
  detail::require_rank(logits, 2, "softmax logits");
  const std::int64_t B = logits.dim(0), K = logits.dim(1);
  TensorT<T> probs(logits.shape());
  for (std::int64_t b = 0; b < B; ++b) {
    const T* lp = &logits(b, 0);
    T* pp = &probs(b, 0);
    T mx = lp[0];
    for (std::int64_t k = 1; k < K; ++k) mx = std::max(mx, lp[k]);
    T sum = 0;
    for (std::int64_t k = 0; k < K; ++k) {
      pp[k] = std::exp(lp[k] - mx);
      sum += pp[k];
    }
    for (std::int64_t k = 0; k < K; ++k) pp[k] /= sum;
  }
  check_finite(probs, "softmax");
  return probs;
}

/// Index of the true class per row; throws unless each row is exactly one-hot.
template <typename T>
std::vector<std::int64_t> onehot_argmax(const TensorT<T>& labels) {
  const std::int64_t B = labels.dim(0), K = labels.dim(1);
  std::vector<std::int64_t> idx(static_cast<std::size_t>(B), -1);
  for (std::int64_t b = 0; b < B; ++b) {
    for (std::int64_t k = 0; k < K; ++k) {
      const T v = labels(b, k);
      if (v == T(1)) {
        if (idx[static_cast<std::size_t>(b)] >= 0) throw ValueError("label row has multiple ones");
        idx[static_cast<std::size_t>(b)] = k;
      } else if (v != T(0)) {
        throw ValueError("label row is not one-hot (entry neither 0 nor 1)");
      }
    }
    if (idx[static_cast<std::size_t>(b)] < 0) throw ValueError("label row has no one");
  }
  return idx;
}

template <typename T>
struct SoftmaxXentResult {
  T loss = 0;
  TensorT<T> probs;
};

/// loss = mean over the batch of w_{y_i} * (-log p[i, y_i]).
template <typename T>
SoftmaxXentResult<T> softmax_cross_entropy(const TensorT<T>& logits, const TensorT<T>& labels,
                                           const TensorT<T>& class_weights) {
  detail::require_rank(logits, 2, "cross_entropy logits");
  detail::require(logits.shape() == labels.shape(),
                  "cross_entropy labels " + shape_str(labels.shape()) + " vs logits " +
                      shape_str(logits.shape()));
  const std::int64_t B = logits.dim(0), K = logits.dim(1);
  if (K < 2) throw ValueError("cross_entropy requires K >= 2 classes");
  detail::require(class_weights.rank() == 1 && class_weights.dim(0) == K,
                  "class weight vector must have length K");
  for (std::int64_t k = 0; k < K; ++k) {
    if (!(class_weights[k] > T(0))) throw ValueError("class weights must be > 0");
  }

  SoftmaxXentResult<T> result;
  result.probs = softmax_rows(logits);
  const auto truth = onehot_argmax(labels);
  T total = 0;
  for (std::int64_t b = 0; b < B; ++b) {
    const std::int64_t y = truth[static_cast<std::size_t>(b)];
    // recompute log-prob from the stable shifted logits to avoid log(0)
    const T* lp = &logits(b, 0);
    T mx = lp[0];
    for (std::int64_t k = 1; k < K; ++k) mx = std::max(mx, lp[k]);
    T logsum = 0;
    for (std::int64_t k = 0; k < K; ++k) logsum += std::exp(lp[k] - mx);
    logsum = std::log(logsum);
    const T log_py = lp[y] - mx - logsum;
    total += class_weights[y] * (-log_py);
  }
  result.loss = total / static_cast<T>(B);
  return result;
}

/// d loss / d logits = upstream * w_{y_i} * (probs - labels) / B.
template <typename T>
TensorT<T> softmax_cross_entropy_backward(const TensorT<T>& probs, const TensorT<T>& labels,
                                          const TensorT<T>& class_weights, T upstream = T(1)) {
  const std::int64_t B = probs.dim(0), K = probs.dim(1);
  const auto truth = onehot_argmax(labels);
  TensorT<T> dlogits(probs.shape());
  for (std::int64_t b = 0; b < B; ++b) {
    const T w = class_weights[truth[static_cast<std::size_t>(b)]] * upstream / static_cast<T>(B);
    for (std::int64_t k = 0; k < K; ++k) {
      dlogits(b, k) = w * (probs(b, k) - labels(b, k));
    }
  }
  return dlogits;
}

// ---------------------------------------------------------------------------
// channel concatenation
// ---------------------------------------------------------------------------

template <typename T>
TensorT<T> concat_channels(const TensorT<T>& a, const TensorT<T>& b) {
  detail::require_rank(a, 4, "concat lhs");
  detail::require_rank(b, 4, "concat rhs");
  detail::require(a.dim(0) == b.dim(0) && a.dim(1) == b.dim(1) && a.dim(2) == b.dim(2),
                  "concat batch/spatial mismatch: " + shape_str(a.shape()) + " vs " +
                      shape_str(b.shape()));
  const std::int64_t B = a.dim(0), H = a.dim(1), W = a.dim(2), Ca = a.dim(3), Cb = b.dim(3);
  TensorT<T> out({B, H, W, Ca + Cb});
  for (std::int64_t i = 0; i < B * H * W; ++i) {
    const T* ap = a.data() + i * Ca;
    const T* bp = b.data() + i * Cb;
    T* op = out.data() + i * (Ca + Cb);
    std::copy(ap, ap + Ca, op);
    std::copy(bp, bp + Cb, op + Ca);
  }
  return out;
}

template <typename T>
std::pair<TensorT<T>, TensorT<T>> split_channels(const TensorT<T>& x, std::int64_t ca) {
  detail::require_rank(x, 4, "split input");
  const std::int64_t B = x.dim(0), H = x.dim(1), W = x.dim(2), C = x.dim(3);
  detail::require(ca >= 1 && ca < C, "split point out of range");
  TensorT<T> a({B, H, W, ca}), b({B, H, W, C - ca});
  for (std::int64_t i = 0; i < B * H * W; ++i) {
    const T* xp = x.data() + i * C;
    std::copy(xp, xp + ca, a.data() + i * ca);
    std::copy(xp + ca, xp + C, b.data() + i * (C - ca));
  }
  return {std::move(a), std::move(b)};
}

}  // namespace cvrnet

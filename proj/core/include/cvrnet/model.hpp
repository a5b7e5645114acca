#pragma once

#include <array>
#include <cstdint>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "cvrnet/blocks.hpp"

namespace cvrnet {

struct ModelConfig {
  int input_h = 224;
  int input_w = 224;
  int num_classes = 2;
  WidthMultiplier width;

  void validate() const {
    width.validate();
    if (num_classes < 2) throw ValueError("model requires num_classes >= 2");
    if (input_h < 32 || input_w < 32 || input_h % 32 != 0 || input_w % 32 != 0) {
      throw ValueError("input resolution must be a positive multiple of 32, got " +
                       std::to_string(input_h) + "x" + std::to_string(input_w) +
                       " (five exact halvings are required)");
    }
  }
};

/// Residual encoder: stem then four bottleneck stages. Taps e3/e4/e5 are the
/// outputs of the last three stages (1/8, 1/16 and 1/32 of the input).
template <typename T>
struct Encoder1 {
  Stem1<T> stem;
  std::vector<BottleneckBlock<T>> blocks;
  std::array<std::size_t, 4> stage_ends{};  // block index one past each stage

  struct Cache {
    typename Stem1<T>::Cache stem;
    std::vector<typename BottleneckBlock<T>::Cache> blocks;
  };

  struct Taps {
    TensorT<T> e3, e4, e5;
  };

  static Encoder1 make(const std::string& prefix, const BlockConfig& cfg) {
    Encoder1 enc;
    const WidthMultiplier& w = cfg.width;
    enc.stem = Stem1<T>::make(prefix + ".stem", w.scale(cfg.stem_width));
    std::int64_t in_ch = w.scale(cfg.stem_width);
    for (std::size_t s = 0; s < cfg.stage_widths.size(); ++s) {
      const std::int64_t out_ch = w.scale(cfg.stage_widths[s]);
      const std::int64_t mid_ch = w.scale(cfg.stage_mid_widths[s]);
      const int first_stride = s == 0 ? 1 : 2;
      for (int r = 0; r < cfg.stage_repeats[s]; ++r) {
        const std::string name =
            prefix + ".stage" + std::to_string(s + 1) + ".block" + std::to_string(r);
        if (r == 0) {
          enc.blocks.push_back(
              BottleneckBlock<T>::make(name, in_ch, mid_ch, out_ch, first_stride, true));
        } else {
          enc.blocks.push_back(BottleneckBlock<T>::make(name, out_ch, mid_ch, out_ch, 1, false));
        }
      }
      in_ch = out_ch;
      enc.stage_ends[s] = enc.blocks.size();
    }
    return enc;
  }

  void init(ParamStoreT<T>& ps, Rng& rng) const {
    stem.init(ps, rng);
    for (const auto& b : blocks) b.init(ps, rng);
  }

  Taps forward(ParamStoreT<T>& ps, const TensorT<T>& x, BnMode mode, bool commit,
               Cache* cache) const {
    if (cache) cache->blocks.resize(blocks.size());
    TensorT<T> t = stem.forward(ps, x, mode, commit, cache ? &cache->stem : nullptr);
    Taps taps;
    for (std::size_t i = 0; i < blocks.size(); ++i) {
      t = blocks[i].forward(ps, t, mode, commit, cache ? &cache->blocks[i] : nullptr);
      if (i + 1 == stage_ends[1]) taps.e3 = t;
      if (i + 1 == stage_ends[2]) taps.e4 = t;
    }
    taps.e5 = std::move(t);
    return taps;
  }

  /// Chains the tap cotangents back through the stages; d_e4/d_e3 join the
  /// stream at their stage boundaries.
  TensorT<T> backward(ParamStoreT<T>& ps, const Cache& cache, const TensorT<T>& d_e3,
                      const TensorT<T>& d_e4, const TensorT<T>& d_e5) const {
    TensorT<T> d = d_e5;
    for (std::size_t i = blocks.size(); i-- > 0;) {
      if (i + 1 == stage_ends[2]) d.add_(d_e4);
      if (i + 1 == stage_ends[1]) d.add_(d_e3);
      d = blocks[i].backward(ps, cache.blocks[i], d);
    }
    return stem.backward(ps, cache.stem, d);
  }

  void tap_shapes_only(const Shape& in, Shape* e3, Shape* e4, Shape* e5) const {
    Shape s = stem.out_shape(in);
    for (std::size_t i = 0; i < blocks.size(); ++i) {
      s = blocks[i].out_shape(s);
      if (i + 1 == stage_ends[1] && e3) *e3 = s;
      if (i + 1 == stage_ends[2] && e4) *e4 = s;
    }
    if (e5) *e5 = s;
  }
};

/// Separable-convolution encoder: stem, three entry units, repeated middle
/// units, exit flow. Taps mirror Encoder1's scales.
template <typename T>
struct Encoder2 {
  Stem2<T> stem;
  std::array<EntryFlowUnit<T>, 3> entries;
  std::vector<MiddleFlowUnit<T>> middles;
  ExitFlow<T> exit_flow;

  struct Cache {
    typename Stem2<T>::Cache stem;
    std::array<typename EntryFlowUnit<T>::Cache, 3> entries;
    std::vector<typename MiddleFlowUnit<T>::Cache> middles;
    typename ExitFlow<T>::Cache exit;
  };

  struct Taps {
    TensorT<T> e3, e4, e5;
  };

  static Encoder2 make(const std::string& prefix, const BlockConfig& cfg) {
    Encoder2 enc;
    const WidthMultiplier& w = cfg.width;
    enc.stem = Stem2<T>::make(prefix + ".stem", w.scale(cfg.stem2_widths[0]),
                              w.scale(cfg.stem2_widths[1]));
    std::int64_t in_ch = w.scale(cfg.stem2_widths[1]);
    for (int i = 0; i < 3; ++i) {
      const std::int64_t out_ch = w.scale(cfg.entry_widths[static_cast<std::size_t>(i)]);
      enc.entries[static_cast<std::size_t>(i)] =
          EntryFlowUnit<T>::make(prefix + ".entry" + std::to_string(i + 1), in_ch, out_ch);
      in_ch = out_ch;
    }
    for (int i = 0; i < cfg.middle_repeats; ++i) {
      enc.middles.push_back(MiddleFlowUnit<T>::make(prefix + ".middle" + std::to_string(i), in_ch));
    }
    enc.exit_flow = ExitFlow<T>::make(prefix + ".exit", in_ch, w.scale(cfg.exit_width));
    return enc;
  }

  void init(ParamStoreT<T>& ps, Rng& rng) const {
    stem.init(ps, rng);
    for (const auto& e : entries) e.init(ps, rng);
    for (const auto& m : middles) m.init(ps, rng);
    exit_flow.init(ps, rng);
  }

  Taps forward(ParamStoreT<T>& ps, const TensorT<T>& x, BnMode mode, bool commit,
               Cache* cache) const {
    if (cache) cache->middles.resize(middles.size());
    TensorT<T> t = stem.forward(ps, x, mode, commit, cache ? &cache->stem : nullptr);
    t = entries[0].forward(ps, t, mode, commit, cache ? &cache->entries[0] : nullptr);
    t = entries[1].forward(ps, t, mode, commit, cache ? &cache->entries[1] : nullptr);
    Taps taps;
    taps.e3 = t;
    t = entries[2].forward(ps, t, mode, commit, cache ? &cache->entries[2] : nullptr);
    for (std::size_t i = 0; i < middles.size(); ++i) {
      t = middles[i].forward(ps, t, mode, commit, cache ? &cache->middles[i] : nullptr);
    }
    taps.e4 = t;
    taps.e5 = exit_flow.forward(ps, t, mode, commit, cache ? &cache->exit : nullptr);
    return taps;
  }

  TensorT<T> backward(ParamStoreT<T>& ps, const Cache& cache, const TensorT<T>& d_e3,
                      const TensorT<T>& d_e4, const TensorT<T>& d_e5) const {
    TensorT<T> d = exit_flow.backward(ps, cache.exit, d_e5);
    d.add_(d_e4);
    for (std::size_t i = middles.size(); i-- > 0;) {
      d = middles[i].backward(ps, cache.middles[i], d);
    }
    d = entries[2].backward(ps, cache.entries[2], d);
    d.add_(d_e3);
    d = entries[1].backward(ps, cache.entries[1], d);
    d = entries[0].backward(ps, cache.entries[0], d);
    return stem.backward(ps, cache.stem, d);
  }

  void tap_shapes_only(const Shape& in, Shape* e3, Shape* e4, Shape* e5) const {
    Shape s = stem.out_shape(in);
    s = entries[0].out_shape(s);
    s = entries[1].out_shape(s);
    if (e3) *e3 = s;
    s = entries[2].out_shape(s);
    for (const auto& m : middles) s = m.out_shape(s);
    if (e4) *e4 = s;
    if (e5) *e5 = exit_flow.out_shape(s);
  }
};

/// The five head probabilities and their ensemble mean.
template <typename T>
struct HeadOutputsT {
  std::array<TensorT<T>, 5> logits;
  std::array<TensorT<T>, 5> probs;
  TensorT<T> ensemble;  // elementwise mean of probs[0..4]
};

using HeadOutputs = HeadOutputsT<float>;

struct TapShapes {
  Shape e13, e14, e15, e23, e24, e25, concat;
};

/// Two-encoder ensemble classifier. Heads read: P1 <- E13, P2 <- E14,
/// P3 <- concat(E15, E25), P4 <- E23, P5 <- E24; the prediction is the mean
/// of the five per-head softmax distributions.
template <typename T>
class CvrNetT {
 public:
  CvrNetT(const ModelConfig& config, std::uint64_t init_seed) : cfg_(config) {
    cfg_.validate();
    block_cfg_.width = cfg_.width;
    block_cfg_.validate();
    enc1_ = Encoder1<T>::make("enc1", block_cfg_);
    enc2_ = Encoder2<T>::make("enc2", block_cfg_);

    const TapShapes ts = tap_shapes();
    heads_[0] = FclHead<T>::make("head1", ts.e13.back(), cfg_.num_classes);
    heads_[1] = FclHead<T>::make("head2", ts.e14.back(), cfg_.num_classes);
    heads_[2] = FclHead<T>::make("head3", ts.concat.back(), cfg_.num_classes);
    heads_[3] = FclHead<T>::make("head4", ts.e23.back(), cfg_.num_classes);
    heads_[4] = FclHead<T>::make("head5", ts.e24.back(), cfg_.num_classes);

    Rng rng(init_seed);
    enc1_.init(store_, rng);
    enc2_.init(store_, rng);
    for (const auto& h : heads_) h.init(store_, rng);
  }

  const ModelConfig& config() const { return cfg_; }
  ParamStoreT<T>& params() { return store_; }
  const ParamStoreT<T>& params() const { return store_; }

  /// Pure shape propagation; no tensor math.
  TapShapes tap_shapes() const {
    const Shape in{1, cfg_.input_h, cfg_.input_w, 3};
    TapShapes ts;
    enc1_.tap_shapes_only(in, &ts.e13, &ts.e14, &ts.e15);
    enc2_.tap_shapes_only(in, &ts.e23, &ts.e24, &ts.e25);
    ts.concat = ts.e15;
    ts.concat.back() += ts.e25.back();
    return ts;
  }

  struct ForwardCache {
    typename Encoder1<T>::Cache enc1;
    typename Encoder2<T>::Cache enc2;
    std::array<typename FclHead<T>::Cache, 5> heads;
    std::int64_t concat_split = 0;
  };

  HeadOutputsT<T> forward(const TensorT<T>& batch, BnMode mode) {
    return forward_impl(batch, mode, mode == BnMode::train, nullptr);
  }

  /// Loss over already-computed head outputs: the mean of the five per-head
  /// class-weighted cross-entropies. No term is placed on the ensemble mean.
  T loss(const HeadOutputsT<T>& outputs, const TensorT<T>& labels,
         const TensorT<T>& class_weights) const {
    T total = 0;
    for (const auto& logits : outputs.logits) {
      total += softmax_cross_entropy(logits, labels, class_weights).loss;
    }
    return total / T(5);
  }

  /// Train-mode forward, loss, and full backward accumulation into the
  /// parameter gradients. Running BN statistics are committed unless
  /// `commit_bn` is false (used by finite-difference evaluation).
  T loss_backward(const TensorT<T>& batch, const TensorT<T>& labels,
                  const TensorT<T>& class_weights, HeadOutputsT<T>* outputs_out = nullptr,
                  bool commit_bn = true) {
    ForwardCache cache;
    HeadOutputsT<T> outputs = forward_impl(batch, BnMode::train, commit_bn, &cache);

    T total = 0;
    std::array<TensorT<T>, 5> d_feats;
    for (std::size_t i = 0; i < 5; ++i) {
      auto [l, probs] = softmax_cross_entropy(outputs.logits[i], labels, class_weights);
      total += l;
      TensorT<T> d_logits =
          softmax_cross_entropy_backward(probs, labels, class_weights, T(1) / T(5));
      d_feats[i] = heads_[i].backward(store_, cache.heads[i], d_logits);
    }
    auto [d_e15, d_e25] = split_channels(d_feats[2], cache.concat_split);
    enc1_.backward(store_, cache.enc1, d_feats[0], d_feats[1], d_e15);
    enc2_.backward(store_, cache.enc2, d_feats[3], d_feats[4], d_e25);

    if (outputs_out) *outputs_out = std::move(outputs);
    return total / T(5);
  }

  /// Train-mode loss without gradients or BN commitment; the scalar the
  /// finite-difference oracle probes.
  T loss_eval(const TensorT<T>& batch, const TensorT<T>& labels, const TensorT<T>& class_weights) {
    HeadOutputsT<T> outputs = forward_impl(batch, BnMode::train, false, nullptr);
    return loss(outputs, labels, class_weights);
  }

  struct Prediction {
    TensorT<T> probs;              // ensemble P, B×K
    std::vector<int> labels;       // argmax with lowest-index tie-break
  };

  Prediction predict(const TensorT<T>& batch) {
    HeadOutputsT<T> outputs = forward(batch, BnMode::infer);
    Prediction pred;
    pred.probs = std::move(outputs.ensemble);
    const std::int64_t B = pred.probs.dim(0), K = pred.probs.dim(1);
    pred.labels.resize(static_cast<std::size_t>(B));
    for (std::int64_t b = 0; b < B; ++b) {
      int best = 0;
      for (std::int64_t k = 1; k < K; ++k) {
        if (pred.probs(b, k) > pred.probs(b, best)) best = static_cast<int>(k);
      }
      pred.labels[static_cast<std::size_t>(b)] = best;
    }
    return pred;
  }

 private:
  HeadOutputsT<T> forward_impl(const TensorT<T>& batch, BnMode mode, bool commit,
                               ForwardCache* cache) {
    if (batch.rank() != 4 || batch.dim(1) != cfg_.input_h || batch.dim(2) != cfg_.input_w ||
        batch.dim(3) != 3) {
      throw ShapeError("model input must be Bx" + std::to_string(cfg_.input_h) + "x" +
                       std::to_string(cfg_.input_w) + "x3, got " + shape_str(batch.shape()));
    }
    auto t1 = enc1_.forward(store_, batch, mode, commit, cache ? &cache->enc1 : nullptr);
    auto t2 = enc2_.forward(store_, batch, mode, commit, cache ? &cache->enc2 : nullptr);
    TensorT<T> fused = concat_channels(t1.e5, t2.e5);
    if (cache) cache->concat_split = t1.e5.dim(3);

    HeadOutputsT<T> out;
    out.logits[0] = heads_[0].forward(store_, t1.e3, cache ? &cache->heads[0] : nullptr);
    out.logits[1] = heads_[1].forward(store_, t1.e4, cache ? &cache->heads[1] : nullptr);
    out.logits[2] = heads_[2].forward(store_, fused, cache ? &cache->heads[2] : nullptr);
    out.logits[3] = heads_[3].forward(store_, t2.e3, cache ? &cache->heads[3] : nullptr);
    out.logits[4] = heads_[4].forward(store_, t2.e4, cache ? &cache->heads[4] : nullptr);

    for (std::size_t i = 0; i < 5; ++i) out.probs[i] = softmax_rows(out.logits[i]);
    out.ensemble = TensorT<T>(out.probs[0].shape());
    for (std::size_t i = 0; i < 5; ++i) out.ensemble.add_(out.probs[i]);
    out.ensemble.scale_(T(1) / T(5));
    return out;
  }

  ModelConfig cfg_;
  BlockConfig block_cfg_;
  ParamStoreT<T> store_;
  Encoder1<T> enc1_;
  Encoder2<T> enc2_;
  std::array<FclHead<T>, 5> heads_;
};

using CvrNet = CvrNetT<float>;

}  // namespace cvrnet

#include "cvrnet/verify.hpp"

#include <cmath>
#include <cstdio>
#include <sstream>

#include "cvrnet/blocks.hpp"
#include "cvrnet/model.hpp"
#include "cvrnet/ops.hpp"

namespace cvrnet {

double rel_error(double analytic, double numeric, double floor) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), floor});
  return std::abs(analytic - numeric) / denom;
}

namespace {

double central_difference(const std::function<double()>& scalar_fn, TensorT<double>& x,
                          std::int64_t i, double eps) {
  const double orig = x[i];
  x[i] = orig + eps;
  const double fp = scalar_fn();
  x[i] = orig - eps;
  const double fm = scalar_fn();
  x[i] = orig;
  return (fp - fm) / (2.0 * eps);
}

}  // namespace

double max_rel_error_fd(const std::function<double()>& scalar_fn, TensorT<double>& x,
                        const TensorT<double>& analytic_grad, double eps) {
  if (!x.same_shape(analytic_grad)) {
    throw ShapeError("analytic gradient shape does not match the probed tensor");
  }
  double worst = 0;
  for (std::int64_t i = 0; i < x.numel(); ++i) {
    double numeric = central_difference(scalar_fn, x, i, eps);
    double err = rel_error(analytic_grad[i], numeric);
    // A large first-probe error usually means the interval straddled a ReLU
    // kink or a pooling-argmax switch, where the difference quotient does not
    // estimate the one-sided derivative. Shrinking the step resolves those;
    // a genuine gradient bug stays wrong at every step size.
    if (err > 1e-6) {
      for (const double shrunk : {eps / 16.0, eps / 64.0, eps / 1024.0}) {
        numeric = central_difference(scalar_fn, x, i, shrunk);
        err = std::min(err, rel_error(analytic_grad[i], numeric));
        if (err < 1e-6) break;
      }
    }
    worst = std::max(worst, err);
  }
  return worst;
}

bool all_passed(const std::vector<CheckResult>& results) {
  for (const auto& r : results) {
    if (!r.passed) return false;
  }
  return true;
}

std::string format_check_table(const std::vector<CheckResult>& results) {
  std::ostringstream out;
  char buf[512];
  for (const auto& r : results) {
    std::snprintf(buf, sizeof(buf), "%-44s %s  %s\n", r.name.c_str(),
                  r.passed ? "PASS" : "FAIL", r.detail.c_str());
    out << buf;
  }
  return out.str();
}

// ---------------------------------------------------------------------------
// shape conformance
// ---------------------------------------------------------------------------

namespace {

std::string taps_str(const TapShapes& ts) {
  return "E13=" + shape_str(ts.e13) + " E14=" + shape_str(ts.e14) + " E15=" + shape_str(ts.e15) +
         " E23=" + shape_str(ts.e23) + " E24=" + shape_str(ts.e24) + " E25=" + shape_str(ts.e25) +
         " concat=" + shape_str(ts.concat);
}

CheckResult check_taps(const std::string& name, const ModelConfig& cfg,
                       const TapShapes& expected) {
  // shape propagation only: instantiate the block plan without parameters
  BlockConfig bc;
  bc.width = cfg.width;
  auto enc1 = Encoder1<float>::make("enc1", bc);
  auto enc2 = Encoder2<float>::make("enc2", bc);
  const Shape in{1, cfg.input_h, cfg.input_w, 3};
  TapShapes got;
  enc1.tap_shapes_only(in, &got.e13, &got.e14, &got.e15);
  enc2.tap_shapes_only(in, &got.e23, &got.e24, &got.e25);
  got.concat = got.e15;
  got.concat.back() += got.e25.back();

  CheckResult r;
  r.name = name;
  r.passed = got.e13 == expected.e13 && got.e14 == expected.e14 && got.e15 == expected.e15 &&
             got.e23 == expected.e23 && got.e24 == expected.e24 && got.e25 == expected.e25 &&
             got.concat == expected.concat;
  r.detail = r.passed ? taps_str(got) : "got " + taps_str(got) + ", want " + taps_str(expected);
  return r;
}

}  // namespace

std::vector<CheckResult> verify_shapes() {
  std::vector<CheckResult> results;

  {
    ModelConfig cfg;
    cfg.input_h = cfg.input_w = 224;
    cfg.num_classes = 3;
    TapShapes want;
    want.e13 = {1, 28, 28, 512};
    want.e14 = {1, 14, 14, 1024};
    want.e15 = {1, 7, 7, 2048};
    want.e23 = {1, 28, 28, 512};
    want.e24 = {1, 14, 14, 1024};
    want.e25 = {1, 7, 7, 2048};
    want.concat = {1, 7, 7, 4096};
    results.push_back(check_taps("taps 224x224 w=1", cfg, want));
  }
  {
    ModelConfig cfg;
    cfg.input_h = cfg.input_w = 32;
    cfg.num_classes = 2;
    cfg.width = WidthMultiplier{1, 8};
    TapShapes want;
    want.e13 = {1, 4, 4, 64};
    want.e14 = {1, 2, 2, 128};
    want.e15 = {1, 1, 1, 256};
    want.e23 = {1, 4, 4, 64};
    want.e24 = {1, 2, 2, 128};
    want.e25 = {1, 1, 1, 256};
    want.concat = {1, 1, 1, 512};
    results.push_back(check_taps("taps 32x32 w=1/8", cfg, want));
  }
  {
    // a built toy model agrees with its own propagated shapes end to end
    ModelConfig cfg;
    cfg.input_h = cfg.input_w = 32;
    cfg.num_classes = 2;
    cfg.width = WidthMultiplier{1, 16};
    CvrNetT<float> model(cfg, 7);
    const TapShapes ts = model.tap_shapes();
    Tensor x({1, 32, 32, 3});
    Rng rng(11);
    for (std::int64_t i = 0; i < x.numel(); ++i) x[i] = static_cast<float>(rng.uniform());
    HeadOutputs out = model.forward(x, BnMode::infer);
    CheckResult r;
    r.name = "forward agrees with propagated shapes";
    r.passed = out.ensemble.dim(0) == 1 && out.ensemble.dim(1) == cfg.num_classes &&
               ts.concat.back() == ts.e15.back() + ts.e25.back();
    r.detail = taps_str(ts);
    results.push_back(std::move(r));
  }
  return results;
}

// ---------------------------------------------------------------------------
// finite-difference gradient certification (float64)
// ---------------------------------------------------------------------------

namespace {

constexpr double kTolLinear = 1e-5;
constexpr double kTolNonlinear = 1e-4;

TensorT<double> random_tensor(Shape shape, Rng& rng, double scale = 1.0) {
  TensorT<double> t(std::move(shape));
  for (std::int64_t i = 0; i < t.numel(); ++i) t[i] = rng.normal() * scale;
  return t;
}

/// Weighted-output reduction: probing d<u, f(x)>/dx against the analytic
/// vector-Jacobian product u^T J covers the whole Jacobian with one scalar.
double dot_all(const TensorT<double>& u, const TensorT<double>& y) {
  double s = 0;
  for (std::int64_t i = 0; i < y.numel(); ++i) s += u[i] * y[i];
  return s;
}

struct SuiteStats {
  double worst = 0;
  void fold(double err) { worst = std::max(worst, err); }
  CheckResult result(const std::string& name, double tol) const {
    CheckResult r;
    r.name = name;
    r.passed = worst < tol;
    char buf[96];
    std::snprintf(buf, sizeof(buf), "max rel err %.3e (tol %.0e)", worst, tol);
    r.detail = buf;
    return r;
  }
};

CheckResult gradcheck_conv2d(int seeds) {
  SuiteStats stats;
  for (int s = 0; s < seeds; ++s) {
    Rng rng(1000 + static_cast<std::uint64_t>(s));
    const ConvSpec spec{3, 3, (s % 2) + 1, s % 3 ? Padding::same : Padding::valid, 1};
    TensorT<double> x = random_tensor({2, 5, 5, 3}, rng);
    TensorT<double> w = random_tensor({3, 3, 3, 4}, rng, 0.5);
    TensorT<double> b = random_tensor({4}, rng, 0.1);
    const TensorT<double> u = random_tensor(conv2d_forward(x, w, b, spec).shape(), rng);

    const auto fn = [&] { return dot_all(u, conv2d_forward(x, w, b, spec)); };
    Conv2dGrads<double> g = conv2d_backward(x, w, spec, u);
    stats.fold(max_rel_error_fd(fn, x, g.input));
    stats.fold(max_rel_error_fd(fn, w, g.weights));
    stats.fold(max_rel_error_fd(fn, b, g.bias));
  }
  return stats.result("gradcheck conv2d", kTolLinear);
}

CheckResult gradcheck_dwsc(int seeds) {
  SuiteStats stats;
  for (int s = 0; s < seeds; ++s) {
    Rng rng(2000 + static_cast<std::uint64_t>(s));
    const ConvSpec spec{3, 3, (s % 2) + 1, Padding::same, 1};
    TensorT<double> x = random_tensor({2, 5, 5, 3}, rng);
    TensorT<double> dw = random_tensor({3, 3, 3, 1}, rng, 0.5);
    TensorT<double> pw = random_tensor({1, 1, 3, 4}, rng, 0.5);
    TensorT<double> db = random_tensor({3}, rng, 0.1);
    TensorT<double> pb = random_tensor({4}, rng, 0.1);
    DwscCache<double> cache;
    const TensorT<double> u =
        random_tensor(depthwise_separable_forward(x, dw, db, pw, pb, spec, &cache).shape(), rng);

    const auto fn = [&] {
      return dot_all(u, depthwise_separable_forward(x, dw, db, pw, pb, spec));
    };
    DwscGrads<double> g = depthwise_separable_backward(x, dw, pw, spec, cache, u);
    stats.fold(max_rel_error_fd(fn, x, g.input));
    stats.fold(max_rel_error_fd(fn, dw, g.dw_weights));
    stats.fold(max_rel_error_fd(fn, pw, g.pw_weights));
    stats.fold(max_rel_error_fd(fn, db, g.dw_bias));
    stats.fold(max_rel_error_fd(fn, pb, g.pw_bias));
  }
  return stats.result("gradcheck depthwise-separable", kTolLinear);
}

CheckResult gradcheck_maxpool(int seeds) {
  SuiteStats stats;
  for (int s = 0; s < seeds; ++s) {
    Rng rng(3000 + static_cast<std::uint64_t>(s));
    TensorT<double> x = random_tensor({2, 6, 6, 3}, rng);
    MaxPool2dCache cache;
    const TensorT<double> u = random_tensor(maxpool2d_forward(x, 3, 3, 2, &cache).shape(), rng);

    const auto fn = [&] { return dot_all(u, maxpool2d_forward(x, 3, 3, 2)); };
    const TensorT<double> dx = maxpool2d_backward<double>(cache, u);
    stats.fold(max_rel_error_fd(fn, x, dx));
  }
  return stats.result("gradcheck maxpool2d", kTolNonlinear);
}

CheckResult gradcheck_gap(int seeds) {
  SuiteStats stats;
  for (int s = 0; s < seeds; ++s) {
    Rng rng(4000 + static_cast<std::uint64_t>(s));
    TensorT<double> x = random_tensor({2, 4, 5, 3}, rng);
    const TensorT<double> u = random_tensor({2, 3}, rng);
    const auto fn = [&] { return dot_all(u, global_avg_pool_forward(x)); };
    stats.fold(max_rel_error_fd(fn, x, global_avg_pool_backward(x.shape(), u)));
  }
  return stats.result("gradcheck global_avg_pool", kTolLinear);
}

CheckResult gradcheck_batch_norm(int seeds) {
  SuiteStats stats;
  for (int s = 0; s < seeds; ++s) {
    Rng rng(5000 + static_cast<std::uint64_t>(s));
    TensorT<double> x = random_tensor({4, 3, 3, 2}, rng);
    TensorT<double> gamma = random_tensor({2}, rng, 0.5);
    for (std::int64_t i = 0; i < gamma.numel(); ++i) gamma[i] += 1.0;
    TensorT<double> beta = random_tensor({2}, rng, 0.5);
    const TensorT<double> rm({2}), rv = TensorT<double>::full({2}, 1.0);
    const double eps = 1e-3;
    BatchNormCache<double> cache;
    batch_norm_forward(x, gamma, beta, rm, rv, BnMode::train, 0.99, eps, &cache);
    const TensorT<double> u = random_tensor(x.shape(), rng);

    const auto fn = [&] {
      return dot_all(u,
                     batch_norm_forward(x, gamma, beta, rm, rv, BnMode::train, 0.99, eps).output);
    };
    BatchNormGrads<double> g = batch_norm_backward(cache, gamma, u);
    stats.fold(max_rel_error_fd(fn, x, g.input));
    stats.fold(max_rel_error_fd(fn, gamma, g.gamma));
    stats.fold(max_rel_error_fd(fn, beta, g.beta));
  }
  return stats.result("gradcheck batch_norm (train mode)", kTolNonlinear);
}

CheckResult gradcheck_dense(int seeds) {
  SuiteStats stats;
  for (int s = 0; s < seeds; ++s) {
    Rng rng(6000 + static_cast<std::uint64_t>(s));
    TensorT<double> x = random_tensor({3, 5}, rng);
    TensorT<double> w = random_tensor({5, 4}, rng, 0.5);
    TensorT<double> b = random_tensor({4}, rng, 0.1);
    const TensorT<double> u = random_tensor({3, 4}, rng);

    const auto fn = [&] { return dot_all(u, dense_forward(x, w, b)); };
    DenseGrads<double> g = dense_backward(x, w, u);
    stats.fold(max_rel_error_fd(fn, x, g.input));
    stats.fold(max_rel_error_fd(fn, w, g.weights));
    stats.fold(max_rel_error_fd(fn, b, g.bias));
  }
  return stats.result("gradcheck dense", kTolLinear);
}

CheckResult gradcheck_softmax_xent(int seeds) {
  SuiteStats stats;
  for (int s = 0; s < seeds; ++s) {
    Rng rng(7000 + static_cast<std::uint64_t>(s));
    const std::int64_t B = 3, K = 4;
    TensorT<double> logits = random_tensor({B, K}, rng, 2.0);
    TensorT<double> labels({B, K});
    for (std::int64_t b = 0; b < B; ++b) labels(b, static_cast<std::int64_t>(rng.below(K))) = 1.0;
    TensorT<double> weights({K});
    for (std::int64_t k = 0; k < K; ++k) weights[k] = 0.5 + rng.uniform() * 2.0;

    const auto fn = [&] { return softmax_cross_entropy(logits, labels, weights).loss; };
    const auto res = softmax_cross_entropy(logits, labels, weights);
    const TensorT<double> dlogits =
        softmax_cross_entropy_backward(res.probs, labels, weights, 1.0);
    stats.fold(max_rel_error_fd(fn, logits, dlogits));
  }
  return stats.result("gradcheck softmax cross-entropy", kTolNonlinear);
}

CheckResult gradcheck_concat(int seeds) {
  SuiteStats stats;
  for (int s = 0; s < seeds; ++s) {
    Rng rng(8000 + static_cast<std::uint64_t>(s));
    TensorT<double> a = random_tensor({2, 3, 3, 2}, rng);
    TensorT<double> b = random_tensor({2, 3, 3, 3}, rng);
    const TensorT<double> u = random_tensor({2, 3, 3, 5}, rng);
    const auto fn = [&] { return dot_all(u, concat_channels(a, b)); };
    auto [da, db] = split_channels(u, 2);
    stats.fold(max_rel_error_fd(fn, a, da));
    stats.fold(max_rel_error_fd(fn, b, db));
  }
  return stats.result("gradcheck concat_channels", kTolLinear);
}

/// Block-level check: random parameters in a store, loss = <u, block(x)>,
/// analytic grads from the block's backward vs finite differences on every
/// parameter and the input.
template <typename MakeBlock, typename Forward, typename Backward>
CheckResult gradcheck_block(const std::string& name, int seeds, Shape in_shape,
                            MakeBlock&& make_block, Forward&& fwd, Backward&& bwd) {
  SuiteStats stats;
  for (int s = 0; s < seeds; ++s) {
    Rng rng(9000 + static_cast<std::uint64_t>(s) * 17);
    ParamStoreT<double> ps;
    auto block = make_block();
    block.init(ps, rng);
    TensorT<double> x = random_tensor(in_shape, rng);
    TensorT<double> y = fwd(block, ps, x, nullptr);
    const TensorT<double> u = random_tensor(y.shape(), rng);

    ps.zero_grads();
    TensorT<double> dx = bwd(block, ps, x, u);

    const auto fn = [&] { return dot_all(u, fwd(block, ps, x, nullptr)); };
    stats.fold(max_rel_error_fd(fn, x, dx));
    for (std::size_t i = 0; i < ps.size(); ++i) {
      auto& e = ps.entry_at(i);
      if (!e.trainable) continue;
      stats.fold(max_rel_error_fd(fn, e.value, e.grad));
    }
  }
  return stats.result(name, kTolNonlinear);
}

}  // namespace

std::vector<CheckResult> verify_gradcheck(int seeds) {
  std::vector<CheckResult> results;
  results.push_back(gradcheck_conv2d(seeds));
  results.push_back(gradcheck_dwsc(seeds));
  results.push_back(gradcheck_maxpool(seeds));
  results.push_back(gradcheck_gap(seeds));
  results.push_back(gradcheck_batch_norm(seeds));
  results.push_back(gradcheck_dense(seeds));
  results.push_back(gradcheck_softmax_xent(seeds));
  results.push_back(gradcheck_concat(seeds));

  using D = double;
  results.push_back(gradcheck_block(
      "gradcheck residual identity block", seeds, {1, 6, 6, 8},
      [] { return BottleneckBlock<D>::make("blk", 8, 2, 8, 1, false); },
      [](auto& b, auto& ps, auto& x, typename BottleneckBlock<D>::Cache* c) {
        typename BottleneckBlock<D>::Cache cache;
        return b.forward(ps, x, BnMode::train, false, c ? c : &cache);
      },
      [](auto& b, auto& ps, auto& x, const TensorT<D>& u) {
        typename BottleneckBlock<D>::Cache cache;
        b.forward(ps, x, BnMode::train, false, &cache);
        return b.backward(ps, cache, u);
      }));
  results.push_back(gradcheck_block(
      "gradcheck residual conv block", seeds, {1, 6, 6, 6},
      [] { return BottleneckBlock<D>::make("blk", 6, 2, 10, 2, true); },
      [](auto& b, auto& ps, auto& x, typename BottleneckBlock<D>::Cache* c) {
        typename BottleneckBlock<D>::Cache cache;
        return b.forward(ps, x, BnMode::train, false, c ? c : &cache);
      },
      [](auto& b, auto& ps, auto& x, const TensorT<D>& u) {
        typename BottleneckBlock<D>::Cache cache;
        b.forward(ps, x, BnMode::train, false, &cache);
        return b.backward(ps, cache, u);
      }));
  results.push_back(gradcheck_block(
      "gradcheck entry flow unit", seeds, {1, 6, 6, 4},
      [] { return EntryFlowUnit<D>::make("blk", 4, 6); },
      [](auto& b, auto& ps, auto& x, typename EntryFlowUnit<D>::Cache* c) {
        typename EntryFlowUnit<D>::Cache cache;
        return b.forward(ps, x, BnMode::train, false, c ? c : &cache);
      },
      [](auto& b, auto& ps, auto& x, const TensorT<D>& u) {
        typename EntryFlowUnit<D>::Cache cache;
        b.forward(ps, x, BnMode::train, false, &cache);
        return b.backward(ps, cache, u);
      }));
  results.push_back(gradcheck_block(
      "gradcheck middle flow unit", seeds, {1, 5, 5, 6},
      [] { return MiddleFlowUnit<D>::make("blk", 6); },
      [](auto& b, auto& ps, auto& x, typename MiddleFlowUnit<D>::Cache* c) {
        typename MiddleFlowUnit<D>::Cache cache;
        return b.forward(ps, x, BnMode::train, false, c ? c : &cache);
      },
      [](auto& b, auto& ps, auto& x, const TensorT<D>& u) {
        typename MiddleFlowUnit<D>::Cache cache;
        b.forward(ps, x, BnMode::train, false, &cache);
        return b.backward(ps, cache, u);
      }));
  results.push_back(gradcheck_block(
      "gradcheck exit flow", seeds, {1, 6, 6, 4},
      [] { return ExitFlow<D>::make("blk", 4, 8); },
      [](auto& b, auto& ps, auto& x, typename ExitFlow<D>::Cache* c) {
        typename ExitFlow<D>::Cache cache;
        return b.forward(ps, x, BnMode::train, false, c ? c : &cache);
      },
      [](auto& b, auto& ps, auto& x, const TensorT<D>& u) {
        typename ExitFlow<D>::Cache cache;
        b.forward(ps, x, BnMode::train, false, &cache);
        return b.backward(ps, cache, u);
      }));
  results.push_back(gradcheck_block(
      "gradcheck encoder-1 stem", seeds, {1, 8, 8, 3},
      [] { return Stem1<D>::make("blk", 4); },
      [](auto& b, auto& ps, auto& x, typename Stem1<D>::Cache* c) {
        typename Stem1<D>::Cache cache;
        return b.forward(ps, x, BnMode::train, false, c ? c : &cache);
      },
      [](auto& b, auto& ps, auto& x, const TensorT<D>& u) {
        typename Stem1<D>::Cache cache;
        b.forward(ps, x, BnMode::train, false, &cache);
        return b.backward(ps, cache, u);
      }));
  results.push_back(gradcheck_block(
      "gradcheck encoder-2 stem", seeds, {1, 8, 8, 3},
      [] { return Stem2<D>::make("blk", 3, 5); },
      [](auto& b, auto& ps, auto& x, typename Stem2<D>::Cache* c) {
        typename Stem2<D>::Cache cache;
        return b.forward(ps, x, BnMode::train, false, c ? c : &cache);
      },
      [](auto& b, auto& ps, auto& x, const TensorT<D>& u) {
        typename Stem2<D>::Cache cache;
        b.forward(ps, x, BnMode::train, false, &cache);
        return b.backward(ps, cache, u);
      }));
  results.push_back(gradcheck_block(
      "gradcheck prediction head", seeds, {2, 3, 3, 5},
      [] { return FclHead<D>::make("blk", 5, 3); },
      [](auto& b, auto& ps, auto& x, typename FclHead<D>::Cache* c) {
        typename FclHead<D>::Cache cache;
        return b.forward(ps, x, c ? c : &cache);
      },
      [](auto& b, auto& ps, auto& x, const TensorT<D>& u) {
        typename FclHead<D>::Cache cache;
        b.forward(ps, x, &cache);
        return b.backward(ps, cache, u);
      }));
  return results;
}

}  // namespace cvrnet

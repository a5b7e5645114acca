#include <cmath>
#include <filesystem>
#include <fstream>

#include "cvrnet/checkpoint.hpp"
#include "cvrnet/model.hpp"
#include "cvrnet/verify.hpp"
#include "doctest.h"
#include "test_helpers.hpp"

using namespace cvrnet;
using testutil::max_abs_diff;
using testutil::random_tensor;
using testutil::TempDir;

namespace {

ModelConfig toy_config(int size = 32, int den = 8, int classes = 2) {
  ModelConfig cfg;
  cfg.input_h = cfg.input_w = size;
  cfg.num_classes = classes;
  cfg.width = WidthMultiplier{1, den};
  return cfg;
}

}  // namespace

TEST_CASE("model config validation") {
  ModelConfig cfg = toy_config(100);
  CHECK_THROWS_AS(CvrNet(cfg, 1), ValueError);  // 100 is not a multiple of 32
  cfg = toy_config(32, 8, 1);
  CHECK_THROWS_AS(CvrNet(cfg, 1), ValueError);  // K < 2
}

TEST_CASE("full-scale tap shapes match the published feature table") {
  ModelConfig cfg;
  cfg.input_h = cfg.input_w = 224;
  cfg.num_classes = 3;
  BlockConfig bc;
  const auto enc1 = Encoder1<float>::make("enc1", bc);
  const auto enc2 = Encoder2<float>::make("enc2", bc);
  TapShapes ts;
  enc1.tap_shapes_only({1, 224, 224, 3}, &ts.e13, &ts.e14, &ts.e15);
  enc2.tap_shapes_only({1, 224, 224, 3}, &ts.e23, &ts.e24, &ts.e25);
  CHECK(ts.e13 == Shape{1, 28, 28, 512});
  CHECK(ts.e14 == Shape{1, 14, 14, 1024});
  CHECK(ts.e15 == Shape{1, 7, 7, 2048});
  CHECK(ts.e23 == Shape{1, 28, 28, 512});
  CHECK(ts.e24 == Shape{1, 14, 14, 1024});
  CHECK(ts.e25 == Shape{1, 7, 7, 2048});
}

TEST_CASE("toy build yields the scaled tap ladder") {
  CvrNet model(toy_config(32, 8), 42);
  const TapShapes ts = model.tap_shapes();
  CHECK(ts.e13 == Shape{1, 4, 4, 64});
  CHECK(ts.e14 == Shape{1, 2, 2, 128});
  CHECK(ts.e15 == Shape{1, 1, 1, 256});
  CHECK(ts.e23 == Shape{1, 4, 4, 64});
  CHECK(ts.e24 == Shape{1, 2, 2, 128});
  CHECK(ts.e25 == Shape{1, 1, 1, 256});
  CHECK(ts.concat == Shape{1, 1, 1, 512});
}

TEST_CASE("identical seeds build bit-identical parameters") {
  CvrNet a(toy_config(), 1234);
  CvrNet b(toy_config(), 1234);
  CvrNet c(toy_config(), 1235);
  REQUIRE(a.params().size() == b.params().size());
  double diff_ab = 0, diff_ac = 0;
  for (std::size_t i = 0; i < a.params().size(); ++i) {
    diff_ab += max_abs_diff(a.params().entry_at(i).value, b.params().entry_at(i).value);
    diff_ac += max_abs_diff(a.params().entry_at(i).value, c.params().entry_at(i).value);
  }
  CHECK(diff_ab == 0.0);
  CHECK(diff_ac > 0.0);
}

TEST_CASE("ensemble probability is the mean of the five heads") {
  CvrNet model(toy_config(), 7);
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    const auto x = random_tensor<float>({3, 32, 32, 3}, 100 + seed, 0.5);
    const HeadOutputs out = model.forward(x, BnMode::infer);
    for (std::int64_t b = 0; b < 3; ++b) {
      for (std::int64_t k = 0; k < 2; ++k) {
        double mean = 0;
        for (const auto& p : out.probs) mean += p(b, k);
        mean /= 5.0;
        CHECK(std::abs(out.ensemble(b, k) - mean) < 1e-6);
      }
      double row = 0;
      for (std::int64_t k = 0; k < 2; ++k) row += out.ensemble(b, k);
      CHECK(std::abs(row - 1.0) < 1e-5);
      for (const auto& p : out.probs) {
        double head_row = 0;
        for (std::int64_t k = 0; k < 2; ++k) head_row += p(b, k);
        CHECK(std::abs(head_row - 1.0) < 1e-5);
      }
    }
  }
}

TEST_CASE("averaging arithmetic: four certain heads against one dissenter") {
  // mean([1,0] x4, [0,1]) = [0.8, 0.2]; exercised through the same mean the
  // model applies to its head probabilities
  std::array<Tensor, 5> probs;
  for (int i = 0; i < 4; ++i) probs[static_cast<std::size_t>(i)] = Tensor({1, 2}, {1.0f, 0.0f});
  probs[4] = Tensor({1, 2}, {0.0f, 1.0f});
  Tensor mean({1, 2});
  for (const auto& p : probs) mean.add_(p);
  mean.scale_(1.0f / 5.0f);
  CHECK(mean(0, 0) == doctest::Approx(0.8));
  CHECK(mean(0, 1) == doctest::Approx(0.2));
}

TEST_CASE("fresh model stays near-symmetric on a random batch") {
  CvrNet model(toy_config(), 99);
  const auto x = random_tensor<float>({8, 32, 32, 3}, 55, 0.5);
  const auto pred = model.predict(x);
  double mean_dev = 0;
  for (std::int64_t b = 0; b < 8; ++b) mean_dev += std::abs(pred.probs(b, 0) - 0.5);
  mean_dev /= 8.0;
  CHECK(mean_dev < 0.2);
}

TEST_CASE("multi-head loss at uniform outputs equals ln K") {
  CvrNet model(toy_config(32, 8, 2), 3);
  // zero every head parameter -> all logits zero -> uniform probabilities
  for (std::size_t i = 0; i < model.params().size(); ++i) {
    auto& e = model.params().entry_at(i);
    if (e.trainable && e.name.rfind("head", 0) == 0) e.value.fill(0.0f);
  }
  const auto x = random_tensor<float>({4, 32, 32, 3}, 66, 0.5);
  const HeadOutputs out = model.forward(x, BnMode::infer);
  Tensor labels({4, 2});
  for (std::int64_t b = 0; b < 4; ++b) labels(b, b % 2) = 1.0f;
  const float loss = model.loss(out, labels, Tensor::full({2}, 1.0f));
  CHECK(loss == doctest::Approx(std::log(2.0)).epsilon(1e-5));
}

TEST_CASE("confident correct heads drive the loss to zero") {
  CvrNet model(toy_config(32, 8, 2), 3);
  for (std::size_t i = 0; i < model.params().size(); ++i) {
    auto& e = model.params().entry_at(i);
    if (e.trainable && e.name.rfind("head", 0) == 0) e.value.fill(0.0f);
  }
  // bias the final layer of every head hard toward class 0
  for (int h = 1; h <= 5; ++h) {
    auto& bias = model.params().value("head" + std::to_string(h) + ".fc4.bias");
    bias[0] = 25.0f;
    bias[1] = -25.0f;
  }
  const auto x = random_tensor<float>({2, 32, 32, 3}, 77, 0.5);
  const HeadOutputs out = model.forward(x, BnMode::infer);
  Tensor labels({2, 2});
  labels(0, 0) = labels(1, 0) = 1.0f;
  CHECK(model.loss(out, labels, Tensor::full({2}, 1.0f)) < 1e-6);
}

TEST_CASE("the loss stays positive while any head is imperfect") {
  CvrNet model(toy_config(32, 8, 2), 3);
  for (std::size_t i = 0; i < model.params().size(); ++i) {
    auto& e = model.params().entry_at(i);
    if (e.trainable && e.name.rfind("head", 0) == 0) e.value.fill(0.0f);
  }
  // four heads confidently correct, the fifth stuck at uniform
  for (int h = 1; h <= 4; ++h) {
    auto& bias = model.params().value("head" + std::to_string(h) + ".fc4.bias");
    bias[0] = 25.0f;
    bias[1] = -25.0f;
  }
  const auto x = random_tensor<float>({2, 32, 32, 3}, 31, 0.5);
  const HeadOutputs out = model.forward(x, BnMode::infer);
  Tensor labels({2, 2});
  labels(0, 0) = labels(1, 0) = 1.0f;
  const float loss = model.loss(out, labels, Tensor::full({2}, 1.0f));
  CHECK(loss > 0.0f);
  CHECK(loss == doctest::Approx(std::log(2.0) / 5.0).epsilon(1e-4));
}

TEST_CASE("zeroing one head leaves the other heads' outputs unchanged") {
  CvrNet a(toy_config(), 11);
  CvrNet b(toy_config(), 11);
  for (std::size_t i = 0; i < b.params().size(); ++i) {
    auto& e = b.params().entry_at(i);
    if (e.trainable && e.name.rfind("head3.", 0) == 0) e.value.fill(0.0f);
  }
  const auto x = random_tensor<float>({2, 32, 32, 3}, 88, 0.5);
  const HeadOutputs oa = a.forward(x, BnMode::infer);
  const HeadOutputs ob = b.forward(x, BnMode::infer);
  for (const std::size_t h : {0u, 1u, 3u, 4u}) {
    CHECK(max_abs_diff(oa.logits[h], ob.logits[h]) == 0.0);
  }
  CHECK(max_abs_diff(oa.logits[2], ob.logits[2]) > 0.0);
}

TEST_CASE("predict uses the lowest index on exact ties") {
  CvrNet model(toy_config(32, 8, 2), 3);
  for (std::size_t i = 0; i < model.params().size(); ++i) {
    auto& e = model.params().entry_at(i);
    if (e.trainable && e.name.rfind("head", 0) == 0) e.value.fill(0.0f);
  }
  const auto x = random_tensor<float>({3, 32, 32, 3}, 99, 0.5);
  const auto pred = model.predict(x);
  for (const int label : pred.labels) CHECK(label == 0);
  for (std::int64_t b = 0; b < 3; ++b) CHECK(pred.probs(b, 0) == doctest::Approx(0.5));
}

TEST_CASE("argmax row semantics") {
  CvrNet model(toy_config(), 1);
  const auto x = random_tensor<float>({2, 32, 32, 3}, 12, 0.5);
  const auto pred = model.predict(x);
  for (std::int64_t b = 0; b < 2; ++b) {
    const int argmax = pred.labels[static_cast<std::size_t>(b)];
    for (std::int64_t k = 0; k < 2; ++k) {
      CHECK(pred.probs(b, argmax) >= pred.probs(b, k));
    }
  }
}

TEST_CASE("loss rejects a weight vector of the wrong length") {
  CvrNet model(toy_config(), 5);
  const auto x = random_tensor<float>({1, 32, 32, 3}, 1, 0.5);
  const HeadOutputs out = model.forward(x, BnMode::infer);
  Tensor labels({1, 2});
  labels(0, 0) = 1.0f;
  CHECK_THROWS_AS(model.loss(out, labels, Tensor::full({3}, 1.0f)), ShapeError);
}

TEST_CASE("end-to-end parameter gradients match finite differences") {
  // float64 model at 32x32 / w=1/16, batch 2; every parameter tensor is
  // probed at sampled coordinates, plus whole-vector directional checks
  ModelConfig cfg;
  cfg.input_h = cfg.input_w = 32;
  cfg.num_classes = 2;
  cfg.width = WidthMultiplier{1, 16};
  CvrNetT<double> model(cfg, 2024);

  const auto x = random_tensor<double>({2, 32, 32, 3}, 7, 0.5);
  Tensor64 labels({2, 2});
  labels(0, 0) = 1.0;
  labels(1, 1) = 1.0;
  Tensor64 weights({2}, {0.8, 1.4});

  model.params().zero_grads();
  const double loss0 = model.loss_backward(x, labels, weights, nullptr, /*commit_bn=*/false);
  CHECK(std::isfinite(loss0));

  const auto loss_fn = [&] { return model.loss_eval(x, labels, weights); };

  // central differences with the same kink handling as the operator harness:
  // a large first-probe error is re-probed at smaller steps, so ReLU kink and
  // pool-argmax crossings do not masquerade as gradient bugs
  auto& ps = model.params();
  const auto probe_coordinate = [&](TensorT<double>& tensor, std::int64_t j, double analytic) {
    double err = 1e9;
    const double orig = tensor[j];
    for (const double eps : {1e-4, 1e-6, 1e-7, 1e-8}) {
      tensor[j] = orig + eps;
      const double fp = loss_fn();
      tensor[j] = orig - eps;
      const double fm = loss_fn();
      tensor[j] = orig;
      err = std::min(err, rel_error(analytic, (fp - fm) / (2 * eps)));
      if (err < 1e-6) break;
    }
    return err;
  };

  double worst = 0;
  Rng pick(31337);
  for (std::size_t i = 0; i < ps.size(); ++i) {
    auto& e = ps.entry_at(i);
    if (!e.trainable) continue;
    for (int probe = 0; probe < 2; ++probe) {
      const std::int64_t j =
          static_cast<std::int64_t>(pick.below(static_cast<std::uint64_t>(e.value.numel())));
      worst = std::max(worst, probe_coordinate(e.value, j, e.grad[j]));
    }
  }
  CHECK(worst < 1e-3);

  // directional derivative over the whole parameter vector
  for (std::uint64_t dir_seed = 0; dir_seed < 2; ++dir_seed) {
    Rng dir_rng(4000 + dir_seed);
    std::vector<std::vector<double>> direction(ps.size());
    double dot = 0;
    for (std::size_t i = 0; i < ps.size(); ++i) {
      auto& e = ps.entry_at(i);
      if (!e.trainable) continue;
      direction[i].resize(static_cast<std::size_t>(e.value.numel()));
      for (std::size_t j = 0; j < direction[i].size(); ++j) {
        direction[i][j] = dir_rng.normal();
        dot += direction[i][j] * e.grad[static_cast<std::int64_t>(j)];
      }
    }
    const auto nudge = [&](double scale) {
      for (std::size_t i = 0; i < ps.size(); ++i) {
        auto& e = ps.entry_at(i);
        if (!e.trainable) continue;
        for (std::size_t j = 0; j < direction[i].size(); ++j) {
          e.value[static_cast<std::int64_t>(j)] += scale * direction[i][j];
        }
      }
    };
    double dir_err = 1e9;
    for (const double eps : {1e-6, 1e-7, 1e-8, 1e-9}) {
      nudge(eps);
      const double fp = loss_fn();
      nudge(-2 * eps);
      const double fm = loss_fn();
      nudge(eps);
      dir_err = std::min(dir_err, rel_error(dot, (fp - fm) / (2 * eps)));
      if (dir_err < 1e-6) break;
    }
    CHECK(dir_err < 1e-3);
  }
}

TEST_CASE("checkpoint round trip is bit exact") {
  TempDir tmp("ckpt");
  CvrNet model(toy_config(), 77);
  // move the BN buffers off their defaults so they are covered too
  model.params().value("enc1.stem.bn.running_mean")[0] = 0.25f;

  AdamState opt;
  opt.init_like(model.params());
  opt.step = 3;
  opt.m[0][0] = 0.5f;

  const std::string path = tmp.str("model.ckpt");
  save_checkpoint(model, path, &opt, 4242);

  AdamState opt2;
  std::uint64_t seed = 0;
  CvrNet loaded = load_checkpoint(path, &opt2, &seed);
  CHECK(seed == 4242);
  CHECK(opt2.step == 3);
  CHECK(opt2.m[0][0] == 0.5f);
  REQUIRE(loaded.params().size() == model.params().size());
  for (std::size_t i = 0; i < model.params().size(); ++i) {
    CHECK(max_abs_diff(model.params().entry_at(i).value, loaded.params().entry_at(i).value) == 0.0);
  }
}

TEST_CASE("strict load reports the first mismatching config key") {
  TempDir tmp("ckpt_mismatch");
  CvrNet model(toy_config(32, 8, 2), 1);
  const std::string path = tmp.str("m.ckpt");
  save_checkpoint(model, path);

  CvrNet other(toy_config(32, 8, 3), 1);
  CHECK_THROWS_WITH_AS(load_checkpoint_into(other, path),
                       doctest::Contains("num_classes"), MismatchError);
}

TEST_CASE("partial import keeps encoders and rejects the final head layers") {
  TempDir tmp("ckpt_partial");
  CvrNet donor(toy_config(32, 8, 2), 5);
  const std::string path = tmp.str("donor.ckpt");
  save_checkpoint(donor, path);

  CvrNet target(toy_config(32, 8, 3), 6);  // different K
  const PartialLoadReport report = load_checkpoint_partial(target, path);

  CHECK(report.rejected_shape.size() == 10);  // fc4 weights+bias per head
  for (const auto& r : report.rejected_shape) CHECK(r.find(".fc4.") != std::string::npos);
  CHECK(report.missing_in_file.empty());
  CHECK(report.imported.size() == target.params().size() - 10);

  // encoder parameters now match the donor bit-exactly
  CHECK(max_abs_diff(target.params().value("enc1.stem.conv.weights"),
                     donor.params().value("enc1.stem.conv.weights")) == 0.0);
}

TEST_CASE("corrupted magic bytes fail without mutating the model") {
  TempDir tmp("ckpt_corrupt");
  CvrNet model(toy_config(), 9);
  const std::string path = tmp.str("m.ckpt");
  save_checkpoint(model, path);

  // corrupt the magic
  {
    std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(0);
    f.write("XXXX", 4);
  }
  CvrNet target(toy_config(), 10);
  const float before = target.params().value("enc1.stem.conv.weights")[0];
  CHECK_THROWS_AS(load_checkpoint_into(target, path), FormatError);
  CHECK(target.params().value("enc1.stem.conv.weights")[0] == before);
}

TEST_CASE("truncated checkpoints are rejected") {
  TempDir tmp("ckpt_trunc");
  CvrNet model(toy_config(), 13);
  const std::string path = tmp.str("m.ckpt");
  save_checkpoint(model, path);
  const auto size = std::filesystem::file_size(path);
  std::filesystem::resize_file(path, size / 2);
  CvrNet target(toy_config(), 14);
  CHECK_THROWS_AS(load_checkpoint_into(target, path), FormatError);
}

#include "cvrnet/train.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <sstream>

#include "cvrnet/checkpoint.hpp"

namespace cvrnet {

namespace {

/// Full-precision doubles so deterministic reruns serialize identically.
std::string num(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

Tensor weights_tensor(const std::vector<double>& w, int k) {
  Tensor t({k});
  if (w.empty()) {
    t.fill(1.0f);
    return t;
  }
  if (static_cast<int>(w.size()) != k) {
    throw ValueError("class weight vector has length " + std::to_string(w.size()) + ", need K=" +
                     std::to_string(k));
  }
  for (int i = 0; i < k; ++i) t[i] = static_cast<float>(w[static_cast<std::size_t>(i)]);
  return t;
}

std::string ids_str(const std::vector<std::int64_t>& ids) {
  std::ostringstream out;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (i) out << ",";
    out << ids[i];
  }
  return out.str();
}

}  // namespace

std::string epoch_record_to_json(const EpochRecord& rec) {
  std::ostringstream out;
  out << "{\"epoch\":" << rec.epoch << ",\"train_loss\":" << num(rec.train_loss)
      << ",\"val_loss\":" << num(rec.val_loss) << ",\"val_accuracy\":" << num(rec.val_accuracy)
      << ",\"lr\":" << num(rec.lr) << ",\"wall_time_s\":" << num(rec.wall_time_s) << "}";
  return out.str();
}

std::string train_summary_to_json(const TrainReport& report) {
  std::ostringstream out;
  out << "{\"best_epoch\":" << report.best_epoch
      << ",\"best_val_loss\":" << num(report.best_val_loss) << ",\"best_checkpoint\":\""
      << report.best_checkpoint << "\"}";
  return out.str();
}

void save_train_report(const TrainReport& report, const std::string& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write train report: " + path);
  for (const auto& rec : report.epochs) out << epoch_record_to_json(rec) << "\n";
  out << train_summary_to_json(report) << "\n";
  if (!out) throw IoError("failed writing train report: " + path);
}

TrainReport fit(CvrNet& model, const FoldData& data, const TrainConfig& config,
                const FitOptions& options) {
  config.validate();
  if (!data.index) throw ValueError("fit needs a dataset index");
  if (data.train_ids.empty() || data.val_ids.empty()) {
    throw ValueError("fit needs non-empty train and validation sets");
  }
  if (options.augment_enabled) options.augment.validate();

  const ModelConfig& mc = model.config();
  const Tensor class_w = weights_tensor(options.class_weights, mc.num_classes);

  AdamState opt;
  opt.init_like(model.params(), config.amsgrad);
  LrState lr_state;
  lr_state.current_lr = config.lr0;

  TrainReport report;
  report.best_val_loss = std::numeric_limits<double>::infinity();

  // all stream randomness fans out from the master seed; an explicit
  // augmentation seed in the config takes precedence
  const std::uint64_t augment_seed =
      options.augment.seed != 0 ? options.augment.seed : derive_seed(config.seed, "augment");
  const std::uint64_t shuffle_seed = derive_seed(config.seed, "shuffle");

  for (int epoch = 1; epoch <= config.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    const double lr = lr_state.current_lr;

    BatchStream train_stream(*data.index, data.train_ids, config.batch_size, mc.input_h,
                             mc.input_w, /*shuffle=*/true, shuffle_seed, epoch,
                             options.augment_enabled ? &options.augment : nullptr, augment_seed);
    double train_loss_sum = 0;
    std::int64_t train_samples = 0;
    while (auto batch = train_stream.next()) {
      model.params().zero_grads();
      const float loss = model.loss_backward(batch->images, batch->labels, class_w);
      if (!std::isfinite(loss)) {
        throw NumericError("non-finite training loss at epoch " + std::to_string(epoch) +
                           ", lr " + num(lr) + ", batch ids [" + ids_str(batch->sample_ids) + "]");
      }
      adam_step(model.params(), opt, static_cast<float>(lr), config, options.frozen_prefixes);
      const std::int64_t b = batch->images.dim(0);
      train_loss_sum += static_cast<double>(loss) * static_cast<double>(b);
      train_samples += b;
    }

    BatchStream val_stream(*data.index, data.val_ids, config.batch_size, mc.input_h, mc.input_w,
                           /*shuffle=*/false, 0, epoch, nullptr, 0);
    double val_loss_sum = 0;
    std::int64_t val_samples = 0, val_correct = 0;
    while (auto batch = val_stream.next()) {
      HeadOutputs outputs = model.forward(batch->images, BnMode::infer);
      const float loss = model.loss(outputs, batch->labels, class_w);
      const std::int64_t b = batch->images.dim(0);
      val_loss_sum += static_cast<double>(loss) * static_cast<double>(b);
      val_samples += b;
      for (std::int64_t i = 0; i < b; ++i) {
        int best = 0;
        for (int k = 1; k < mc.num_classes; ++k) {
          if (outputs.ensemble(i, k) > outputs.ensemble(i, best)) best = k;
        }
        if (batch->labels(i, best) == 1.0f) ++val_correct;
      }
    }
    const double val_loss = val_loss_sum / static_cast<double>(val_samples);
    if (!std::isfinite(val_loss)) {
      throw NumericError("non-finite validation loss at epoch " + std::to_string(epoch));
    }

    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = train_loss_sum / static_cast<double>(train_samples);
    rec.val_loss = val_loss;
    rec.val_accuracy = static_cast<double>(val_correct) / static_cast<double>(val_samples);
    rec.lr = lr;

    if (val_loss < report.best_val_loss) {
      report.best_val_loss = val_loss;
      report.best_epoch = epoch;
      if (!options.checkpoint_path.empty()) {
        save_checkpoint(model, options.checkpoint_path, &opt, config.seed);
        report.best_checkpoint = options.checkpoint_path;
      }
    }

    lr_on_plateau(lr_state, val_loss, config);

    rec.wall_time_s =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    report.epochs.push_back(rec);
    if (options.on_epoch) options.on_epoch(rec);
  }
  return report;
}

std::vector<double> overfit_single_batch(CvrNet& model, const Batch& batch, int steps,
                                         const TrainConfig& config) {
  config.validate();
  if (steps < 0) throw ValueError("overfit steps must be >= 0");
  if (batch.images.dim(0) > 8) throw ValueError("overfit diagnostic expects batch size <= 8");

  std::vector<double> trace;
  if (steps == 0) return trace;

  Tensor class_w({model.config().num_classes});
  class_w.fill(1.0f);

  AdamState opt;
  opt.init_like(model.params(), config.amsgrad);
  for (int s = 0; s < steps; ++s) {
    model.params().zero_grads();
    const float loss = model.loss_backward(batch.images, batch.labels, class_w);
    if (!std::isfinite(loss)) {
      throw NumericError("non-finite loss in single-batch overfit at step " + std::to_string(s));
    }
    adam_step(model.params(), opt, static_cast<float>(config.lr0), config);
    trace.push_back(static_cast<double>(loss));
  }
  return trace;
}

}  // namespace cvrnet

#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "cvrnet/dataset.hpp"
#include "cvrnet/model.hpp"
#include "cvrnet/optim.hpp"

namespace cvrnet {

struct EpochRecord {
  int epoch = 0;  // 1-based
  double train_loss = 0;
  double val_loss = 0;
  double val_accuracy = 0;
  double lr = 0;
  double wall_time_s = 0;
};

struct TrainReport {
  std::vector<EpochRecord> epochs;
  int best_epoch = 0;
  double best_val_loss = 0;
  std::string best_checkpoint;  // empty when no checkpoint path was given
};

/// JSON-lines serialization: one record per epoch, then a trailing summary
/// line with the best-checkpoint pointer. Losses keep full precision.
std::string epoch_record_to_json(const EpochRecord& rec);
std::string train_summary_to_json(const TrainReport& report);
void save_train_report(const TrainReport& report, const std::string& path);

struct FoldData {
  const DatasetIndex* index = nullptr;
  std::vector<std::int64_t> train_ids, val_ids, test_ids;
};

struct FitOptions {
  AugmentConfig augment;
  bool augment_enabled = false;
  std::vector<double> class_weights;     // defaults to all ones
  std::string checkpoint_path;           // best-by-validation-loss checkpoint
  std::vector<std::string> frozen_prefixes;
  std::function<void(const EpochRecord&)> on_epoch;
};

/// The full optimization loop: augmented train pass with the multi-head
/// weighted loss, augmentation-free validation pass with inference-mode BN,
/// plateau scheduling, best-checkpoint tracking. Fully seeded; identical
/// seeds reproduce the report bit-for-bit (wall time aside).
TrainReport fit(CvrNet& model, const FoldData& data, const TrainConfig& config,
                const FitOptions& options = {});

/// Repeated optimizer steps on one fixed batch; the memorization diagnostic.
/// Returns the per-step loss trace (empty for steps == 0, model untouched).
std::vector<double> overfit_single_batch(CvrNet& model, const Batch& batch, int steps,
                                         const TrainConfig& config);

}  // namespace cvrnet

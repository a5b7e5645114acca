#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "cvrnet/image.hpp"
#include "cvrnet/tensor.hpp"

namespace cvrnet {

/// Labeled sample catalog. Classes are the sorted subdirectory names; the
/// sample order is class-major with filenames sorted inside each class, so
/// sample ids are stable across rescans of an unchanged tree.
struct DatasetIndex {
  struct Sample {
    std::string path;
    int class_id = 0;
  };

  std::vector<Sample> samples;
  std::vector<std::string> class_names;
  std::vector<std::int64_t> class_counts;
  std::vector<std::string> skipped_files;  // unreadable/unrecognized, reported not fatal

  std::int64_t total() const { return static_cast<std::int64_t>(samples.size()); }
  int num_classes() const { return static_cast<int>(class_names.size()); }
};

/// Scans <root>/<class_name>/<file>.{pgm,ppm,cvt}. Throws on an empty class
/// directory or fewer than two classes.
DatasetIndex scan_dataset(const std::string& root);

/// Fixed-split layout: <root>/train/<class>/... and <root>/test/<class>/...
/// Class ids are shared across the two halves.
struct FixedSplit {
  DatasetIndex index;
  std::vector<std::int64_t> train_ids;
  std::vector<std::int64_t> test_ids;
};

FixedSplit scan_fixed_split(const std::string& root);

/// Deterministic stratified assignment of sample ids to train/validation/test
/// per fold. Test sets partition the dataset across folds.
struct FoldPlan {
  int k = 5;
  std::uint64_t seed = 0;
  double val_frac = 0.1;

  struct Fold {
    std::vector<std::int64_t> train, val, test;
  };
  std::vector<Fold> folds;
};

FoldPlan make_folds(const DatasetIndex& index, int k, std::uint64_t seed, double val_frac = 0.1);

/// Wraps a fixed split as a single-fold plan (validation carved from train).
FoldPlan fixed_split_plan(const FixedSplit& split, std::uint64_t seed, double val_frac = 0.1);

std::string fold_plan_to_json(const FoldPlan& plan);
FoldPlan fold_plan_from_json(const std::string& json_text);
void save_fold_plan(const FoldPlan& plan, const std::string& path);
FoldPlan load_fold_plan(const std::string& path);

/// Per-class loss weights. inverse_frequency (the default) uses
/// w_j = N / (K * N_j), which up-weights underrepresented classes and
/// satisfies sum_j N_j * w_j = N; proportional uses w_j = N_j / N.
enum class ClassWeightMode { inverse_frequency, proportional };

struct ClassWeights {
  ClassWeightMode mode = ClassWeightMode::inverse_frequency;
  std::vector<double> weights;
  // exact reduced fractions the doubles were derived from
  std::vector<std::pair<std::uint64_t, std::uint64_t>> rationals;
};

ClassWeights class_weights(const std::vector<std::int64_t>& counts, ClassWeightMode mode);

ClassWeightMode class_weight_mode_from_string(const std::string& name);
std::string to_string(ClassWeightMode mode);

/// One assembled mini-batch.
struct Batch {
  Tensor images;        // B×H×W×3
  Tensor labels;        // one-hot B×K
  std::vector<std::int64_t> sample_ids;
};

/// Streams one epoch over a role's sample ids: deterministic shuffle from
/// (seed, epoch) when enabled, every sample exactly once, final partial
/// batch emitted. Augmentation, when configured, draws a per-sample seed
/// from (augment seed, epoch, sample id).
class BatchStream {
 public:
  BatchStream(const DatasetIndex& index, std::vector<std::int64_t> ids, int batch_size,
              std::int64_t target_h, std::int64_t target_w, bool shuffle,
              std::uint64_t shuffle_seed, int epoch, const AugmentConfig* augment_cfg,
              std::uint64_t augment_seed);

  std::optional<Batch> next();
  std::int64_t num_samples() const { return static_cast<std::int64_t>(ids_.size()); }

 private:
  const DatasetIndex& index_;
  std::vector<std::int64_t> ids_;
  int batch_size_;
  std::int64_t target_h_, target_w_;
  std::optional<AugmentConfig> augment_;
  std::uint64_t augment_seed_ = 0;
  int epoch_ = 0;
  std::size_t cursor_ = 0;
};

}  // namespace cvrnet

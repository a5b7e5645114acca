#include "cvrnet/dataset.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>

#include "cvrnet/rng.hpp"
#include "json.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace cvrnet {

namespace {

bool known_extension(const fs::path& p) {
  const std::string ext = p.extension().string();
  return ext == ".pgm" || ext == ".ppm" || ext == ".cvt";
}

/// Quick readability probe used at scan time; decode errors surface later.
bool readable(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  char b[2];
  in.read(b, 2);
  return in.gcount() == 2;
}

std::vector<std::string> sorted_subdirs(const fs::path& root) {
  if (!fs::exists(root) || !fs::is_directory(root)) {
    throw IoError("dataset root is not a directory: " + root.string());
  }
  std::vector<std::string> dirs;
  for (const auto& entry : fs::directory_iterator(root)) {
    if (entry.is_directory()) dirs.push_back(entry.path().filename().string());
  }
  std::sort(dirs.begin(), dirs.end());
  return dirs;
}

std::vector<std::string> sorted_files(const fs::path& dir) {
  std::vector<std::string> files;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (entry.is_regular_file()) files.push_back(entry.path().filename().string());
  }
  std::sort(files.begin(), files.end());
  return files;
}

void scan_class_dir(const fs::path& class_dir, int class_id, DatasetIndex& index) {
  std::int64_t count = 0;
  for (const std::string& file : sorted_files(class_dir)) {
    const fs::path p = class_dir / file;
    if (!known_extension(p) || !readable(p)) {
      index.skipped_files.push_back(p.string());
      continue;
    }
    index.samples.push_back({p.string(), class_id});
    ++count;
  }
  if (count == 0) {
    throw ValueError("class directory has no usable images: " + class_dir.string());
  }
  index.class_counts.push_back(count);
}

std::uint64_t gcd_u64(std::uint64_t a, std::uint64_t b) {
  while (b) {
    const std::uint64_t t = a % b;
    a = b;
    b = t;
  }
  return a;
}

}  // namespace

DatasetIndex scan_dataset(const std::string& root) {
  DatasetIndex index;
  const auto dirs = sorted_subdirs(root);
  if (dirs.size() < 2) {
    throw ValueError("dataset needs at least 2 class directories, found " +
                     std::to_string(dirs.size()) + " under " + root);
  }
  index.class_names = dirs;
  for (std::size_t c = 0; c < dirs.size(); ++c) {
    scan_class_dir(fs::path(root) / dirs[c], static_cast<int>(c), index);
  }
  return index;
}

FixedSplit scan_fixed_split(const std::string& root) {
  const fs::path train_dir = fs::path(root) / "train";
  const fs::path test_dir = fs::path(root) / "test";
  if (!fs::is_directory(train_dir) || !fs::is_directory(test_dir)) {
    throw IoError("fixed-split root must contain train/ and test/: " + root);
  }
  auto train_classes = sorted_subdirs(train_dir);
  auto test_classes = sorted_subdirs(test_dir);
  if (train_classes != test_classes) {
    throw ValueError("train/ and test/ class directories differ under " + root);
  }
  if (train_classes.size() < 2) {
    throw ValueError("fixed split needs at least 2 classes under " + root);
  }

  FixedSplit split;
  split.index.class_names = train_classes;
  split.index.class_counts.assign(train_classes.size(), 0);
  for (std::size_t c = 0; c < train_classes.size(); ++c) {
    for (const fs::path& base : {train_dir, test_dir}) {
      const bool is_train = base == train_dir;
      for (const std::string& file : sorted_files(base / train_classes[c])) {
        const fs::path p = base / train_classes[c] / file;
        if (!known_extension(p) || !readable(p)) {
          split.index.skipped_files.push_back(p.string());
          continue;
        }
        const std::int64_t id = split.index.total();
        split.index.samples.push_back({p.string(), static_cast<int>(c)});
        split.index.class_counts[c] += 1;
        (is_train ? split.train_ids : split.test_ids).push_back(id);
      }
    }
    if (split.index.class_counts[c] == 0) {
      throw ValueError("class has no usable images in fixed split: " + train_classes[c]);
    }
  }
  return split;
}

FoldPlan make_folds(const DatasetIndex& index, int k, std::uint64_t seed, double val_frac) {
  if (k < 2) throw ValueError("fold count must be >= 2");
  if (val_frac < 0 || val_frac >= 1) throw ValueError("validation fraction must lie in [0, 1)");
  const int num_classes = index.num_classes();
  for (int c = 0; c < num_classes; ++c) {
    if (index.class_counts[static_cast<std::size_t>(c)] < k) {
      throw ValueError("class '" + index.class_names[static_cast<std::size_t>(c)] + "' has " +
                       std::to_string(index.class_counts[static_cast<std::size_t>(c)]) +
                       " samples, fewer than k=" + std::to_string(k));
    }
  }

  Rng rng(derive_seed(seed, "folds"));

  std::vector<std::vector<std::int64_t>> class_ids(static_cast<std::size_t>(num_classes));
  for (std::int64_t i = 0; i < index.total(); ++i) {
    class_ids[static_cast<std::size_t>(index.samples[static_cast<std::size_t>(i)].class_id)]
        .push_back(i);
  }

  FoldPlan plan;
  plan.k = k;
  plan.seed = seed;
  plan.val_frac = val_frac;
  plan.folds.resize(static_cast<std::size_t>(k));

  // Controlled rounding of the k x K allocation matrix. Fold sizes are fixed
  // up front; every cell starts at floor(size_f * N_c / N) and the leftover
  // units are placed one per cell, most-deficient fold first into its
  // most-deficient classes. Each count then sits within one sample of the
  // fold's proportional share of that class, which is the stratification
  // contract, and row/column sums come out exact.
  const std::int64_t n_total = index.total();
  const std::size_t ku = static_cast<std::size_t>(k);
  const std::size_t cu = static_cast<std::size_t>(num_classes);
  std::vector<std::int64_t> fold_size(ku, n_total / k);
  for (std::int64_t f = 0; f < n_total % k; ++f) fold_size[static_cast<std::size_t>(f)] += 1;

  std::vector<std::vector<std::int64_t>> counts(ku, std::vector<std::int64_t>(cu, 0));
  std::vector<std::vector<std::int64_t>> remainder(ku, std::vector<std::int64_t>(cu, 0));
  std::vector<std::int64_t> fold_deficit(ku, 0);
  std::vector<std::int64_t> class_deficit(cu, 0);
  for (std::size_t c = 0; c < cu; ++c) class_deficit[c] = index.class_counts[c];
  for (std::size_t f = 0; f < ku; ++f) {
    fold_deficit[f] = fold_size[f];
    for (std::size_t c = 0; c < cu; ++c) {
      const std::int64_t scaled = fold_size[f] * index.class_counts[c];
      counts[f][c] = scaled / n_total;
      remainder[f][c] = scaled % n_total;
      fold_deficit[f] -= counts[f][c];
      class_deficit[c] -= counts[f][c];
    }
  }
  for (;;) {
    std::size_t f = 0;
    for (std::size_t i = 1; i < ku; ++i) {
      if (fold_deficit[i] > fold_deficit[f]) f = i;
    }
    if (fold_deficit[f] == 0) break;
    // classes ordered by deficit, then fractional part, then index
    std::vector<std::size_t> order;
    for (std::size_t c = 0; c < cu; ++c) {
      if (class_deficit[c] > 0) order.push_back(c);
    }
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
      if (class_deficit[a] != class_deficit[b]) return class_deficit[a] > class_deficit[b];
      return remainder[f][a] > remainder[f][b];
    });
    if (static_cast<std::int64_t>(order.size()) < fold_deficit[f]) {
      throw Error("internal: fold allocation ran out of classes");
    }
    for (std::int64_t e = 0; e < fold_deficit[f]; ++e) {
      const std::size_t c = order[static_cast<std::size_t>(e)];
      counts[f][c] += 1;
      class_deficit[c] -= 1;
    }
    fold_deficit[f] = 0;
  }

  std::vector<std::vector<std::int64_t>> test_sets(ku);
  for (std::size_t c = 0; c < cu; ++c) {
    auto& ids = class_ids[c];
    rng.shuffle(ids);
    std::size_t cursor = 0;
    for (std::size_t f = 0; f < ku; ++f) {
      for (std::int64_t t = 0; t < counts[f][c]; ++t) test_sets[f].push_back(ids[cursor++]);
    }
  }

  for (int f = 0; f < k; ++f) {
    auto& fold = plan.folds[static_cast<std::size_t>(f)];
    fold.test = test_sets[static_cast<std::size_t>(f)];
    std::sort(fold.test.begin(), fold.test.end());

    std::vector<char> in_test(static_cast<std::size_t>(index.total()), 0);
    for (const std::int64_t id : fold.test) in_test[static_cast<std::size_t>(id)] = 1;

    // stratified validation slice of the remaining samples
    for (int c = 0; c < num_classes; ++c) {
      std::vector<std::int64_t> remaining;
      for (const std::int64_t id : class_ids[static_cast<std::size_t>(c)]) {
        if (!in_test[static_cast<std::size_t>(id)]) remaining.push_back(id);
      }
      rng.shuffle(remaining);
      const std::int64_t n_val = static_cast<std::int64_t>(
          std::llround(val_frac * static_cast<double>(remaining.size())));
      for (std::int64_t i = 0; i < static_cast<std::int64_t>(remaining.size()); ++i) {
        (i < n_val ? fold.val : fold.train).push_back(remaining[static_cast<std::size_t>(i)]);
      }
    }
    std::sort(fold.val.begin(), fold.val.end());
    std::sort(fold.train.begin(), fold.train.end());
  }
  return plan;
}

FoldPlan fixed_split_plan(const FixedSplit& split, std::uint64_t seed, double val_frac) {
  if (val_frac < 0 || val_frac >= 1) throw ValueError("validation fraction must lie in [0, 1)");
  FoldPlan plan;
  plan.k = 1;
  plan.seed = seed;
  plan.val_frac = val_frac;
  plan.folds.resize(1);
  auto& fold = plan.folds[0];
  fold.test = split.test_ids;
  std::sort(fold.test.begin(), fold.test.end());

  Rng rng(derive_seed(seed, "folds"));
  const int num_classes = split.index.num_classes();
  for (int c = 0; c < num_classes; ++c) {
    std::vector<std::int64_t> ids;
    for (const std::int64_t id : split.train_ids) {
      if (split.index.samples[static_cast<std::size_t>(id)].class_id == c) ids.push_back(id);
    }
    rng.shuffle(ids);
    const std::int64_t n_val =
        static_cast<std::int64_t>(std::llround(val_frac * static_cast<double>(ids.size())));
    for (std::int64_t i = 0; i < static_cast<std::int64_t>(ids.size()); ++i) {
      (i < n_val ? fold.val : fold.train).push_back(ids[static_cast<std::size_t>(i)]);
    }
  }
  std::sort(fold.val.begin(), fold.val.end());
  std::sort(fold.train.begin(), fold.train.end());
  return plan;
}

std::string fold_plan_to_json(const FoldPlan& plan) {
  json folds = json::array();
  for (const auto& f : plan.folds) {
    folds.push_back({{"train", f.train}, {"val", f.val}, {"test", f.test}});
  }
  json j{{"k", plan.k}, {"seed", plan.seed}, {"val_frac", plan.val_frac}, {"folds", folds}};
  return j.dump(2) + "\n";
}

FoldPlan fold_plan_from_json(const std::string& json_text) {
  json j;
  try {
    j = json::parse(json_text);
  } catch (const json::exception& e) {
    throw FormatError(std::string("fold plan is not valid JSON: ") + e.what());
  }
  try {
    FoldPlan plan;
    plan.k = j.at("k").get<int>();
    plan.seed = j.at("seed").get<std::uint64_t>();
    plan.val_frac = j.value("val_frac", 0.1);
    for (const auto& f : j.at("folds")) {
      FoldPlan::Fold fold;
      fold.train = f.at("train").get<std::vector<std::int64_t>>();
      fold.val = f.at("val").get<std::vector<std::int64_t>>();
      fold.test = f.at("test").get<std::vector<std::int64_t>>();
      plan.folds.push_back(std::move(fold));
    }
    if (static_cast<int>(plan.folds.size()) != plan.k) {
      throw FormatError("fold plan lists " + std::to_string(plan.folds.size()) + " folds but k=" +
                        std::to_string(plan.k));
    }
    return plan;
  } catch (const json::exception& e) {
    throw FormatError(std::string("fold plan JSON missing fields: ") + e.what());
  }
}

void save_fold_plan(const FoldPlan& plan, const std::string& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write fold plan: " + path);
  out << fold_plan_to_json(plan);
  if (!out) throw IoError("failed writing fold plan: " + path);
}

FoldPlan load_fold_plan(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open fold plan: " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  return fold_plan_from_json(buf.str());
}

ClassWeights class_weights(const std::vector<std::int64_t>& counts, ClassWeightMode mode) {
  const std::size_t k = counts.size();
  if (k < 2) throw ValueError("class weights need at least 2 classes");
  std::uint64_t total = 0;
  for (const std::int64_t c : counts) {
    if (c <= 0) throw ValueError("class counts must be > 0");
    total += static_cast<std::uint64_t>(c);
  }

  ClassWeights cw;
  cw.mode = mode;
  for (const std::int64_t c : counts) {
    std::uint64_t num, den;
    if (mode == ClassWeightMode::inverse_frequency) {
      num = total;
      den = k * static_cast<std::uint64_t>(c);
    } else {
      num = static_cast<std::uint64_t>(c);
      den = total;
    }
    const std::uint64_t g = gcd_u64(num, den);
    num /= g;
    den /= g;
    cw.rationals.emplace_back(num, den);
    cw.weights.push_back(static_cast<double>(num) / static_cast<double>(den));
  }
  return cw;
}

ClassWeightMode class_weight_mode_from_string(const std::string& name) {
  if (name == "inverse_frequency") return ClassWeightMode::inverse_frequency;
  if (name == "proportional") return ClassWeightMode::proportional;
  throw ValueError("unknown class weight mode: " + name +
                   " (expected inverse_frequency or proportional)");
}

std::string to_string(ClassWeightMode mode) {
  return mode == ClassWeightMode::inverse_frequency ? "inverse_frequency" : "proportional";
}

BatchStream::BatchStream(const DatasetIndex& index, std::vector<std::int64_t> ids, int batch_size,
                         std::int64_t target_h, std::int64_t target_w, bool shuffle,
                         std::uint64_t shuffle_seed, int epoch, const AugmentConfig* augment_cfg,
                         std::uint64_t augment_seed)
    : index_(index),
      ids_(std::move(ids)),
      batch_size_(batch_size),
      target_h_(target_h),
      target_w_(target_w),
      augment_seed_(augment_seed),
      epoch_(epoch) {
  if (ids_.empty()) throw ValueError("batch stream over an empty sample set");
  if (batch_size_ < 1) throw ValueError("batch size must be >= 1");
  if (augment_cfg) {
    augment_cfg->validate();
    augment_ = *augment_cfg;
  }
  if (shuffle) {
    Rng rng(derive_seed(shuffle_seed, "shuffle", static_cast<std::uint64_t>(epoch)));
    rng.shuffle(ids_);
  }
}

std::optional<Batch> BatchStream::next() {
  if (cursor_ >= ids_.size()) return std::nullopt;
  const std::size_t end = std::min(ids_.size(), cursor_ + static_cast<std::size_t>(batch_size_));
  const std::int64_t b = static_cast<std::int64_t>(end - cursor_);
  const int k = index_.num_classes();

  Batch batch;
  batch.images = Tensor({b, target_h_, target_w_, 3});
  batch.labels = Tensor({b, k});
  for (std::int64_t i = 0; i < b; ++i) {
    const std::int64_t id = ids_[cursor_ + static_cast<std::size_t>(i)];
    const auto& sample = index_.samples[static_cast<std::size_t>(id)];
    Tensor img = load_and_resize(sample.path, target_h_, target_w_);
    if (augment_) {
      img = augment(img, *augment_,
                    derive_seed(augment_seed_, "augment", static_cast<std::uint64_t>(epoch_),
                                static_cast<std::uint64_t>(id)));
    }
    std::copy(img.data(), img.data() + img.numel(),
              batch.images.data() + i * target_h_ * target_w_ * 3);
    batch.labels(i, sample.class_id) = 1.0f;
    batch.sample_ids.push_back(id);
  }
  cursor_ = end;
  return batch;
}

}  // namespace cvrnet

// Command-line front end: fold planning, training, evaluation, metric
// recomputation from confusion matrices, and the verification suites.
//
// Exit codes: 0 success, 1 verification failure, 2 usage/input error,
// 3 numerical abort, 4 artifact mismatch.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "cvrnet/checkpoint.hpp"
#include "cvrnet/config.hpp"
#include "cvrnet/dataset.hpp"
#include "cvrnet/metrics.hpp"
#include "cvrnet/model.hpp"
#include "cvrnet/train.hpp"
#include "cvrnet/verify.hpp"

namespace fs = std::filesystem;
using namespace cvrnet;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitVerifyFailed = 1;
constexpr int kExitUsage = 2;
constexpr int kExitNumeric = 3;
constexpr int kExitMismatch = 4;

struct Manifest {
  fs::path dir;
  std::vector<std::string> entries;

  void add(const fs::path& p) { entries.push_back(fs::relative(p, dir).string()); }
  void write() const {
    std::ofstream out(dir / "manifest.txt", std::ios::trunc);
    for (const auto& e : entries) out << e << "\n";
    out << "manifest.txt\n";
  }
};

fs::path ensure_out_dir(const std::string& out) {
  fs::path dir(out);
  fs::create_directories(dir);
  return dir;
}

// ---------------------------------------------------------------------------
// run configuration: defaults < config file < explicit flags
// ---------------------------------------------------------------------------

struct RunConfig {
  std::string data;
  std::string fixed_split;
  std::string plan;
  int fold = 0;
  std::string out = "out";
  std::string task;

  int input_h = 224, input_w = 224;
  std::string width_multiplier = "1/1";

  TrainConfig train;
  std::string class_weight_mode = "inverse_frequency";

  bool augment_enabled = true;
  AugmentConfig augment;

  std::string init_from;
  bool allow_partial_init = false;
  std::vector<std::string> freeze_prefixes;

  KeyValueConfig resolved() const {
    KeyValueConfig kv;
    kv.set("data", data);
    kv.set("fixed_split", fixed_split);
    kv.set("plan", plan);
    kv.set("fold", std::to_string(fold));
    kv.set("out", out);
    kv.set("task", task);
    kv.set("input_h", std::to_string(input_h));
    kv.set("input_w", std::to_string(input_w));
    kv.set("width_multiplier", width_multiplier);
    kv.set("epochs", std::to_string(train.epochs));
    kv.set("batch_size", std::to_string(train.batch_size));
    char buf[40];
    const auto fnum = [&buf](double v) {
      std::snprintf(buf, sizeof(buf), "%.17g", v);
      return std::string(buf);
    };
    kv.set("lr0", fnum(train.lr0));
    kv.set("beta1", fnum(train.beta1));
    kv.set("beta2", fnum(train.beta2));
    kv.set("epsilon", fnum(train.epsilon));
    kv.set("amsgrad", train.amsgrad ? "true" : "false");
    kv.set("plateau_patience", std::to_string(train.plateau_patience));
    kv.set("plateau_factor", fnum(train.plateau_factor));
    kv.set("min_lr", fnum(train.min_lr));
    kv.set("seed", std::to_string(train.seed));
    kv.set("workers", std::to_string(train.workers));
    kv.set("class_weight_mode", class_weight_mode);
    kv.set("augment", augment_enabled ? "true" : "false");
    kv.set("aug_rotation_deg", fnum(augment.rotation_deg_max));
    kv.set("aug_shift_frac", fnum(augment.shift_frac_max));
    kv.set("aug_hflip_prob", fnum(augment.hflip_prob));
    kv.set("aug_vflip_prob", fnum(augment.vflip_prob));
    kv.set("init_from", init_from);
    kv.set("allow_partial_init", allow_partial_init ? "true" : "false");
    return kv;
  }

  /// Applies config-file values to every setting whose flag was not given.
  void apply_file(const KeyValueConfig& kv, const std::function<bool(const char*)>& flag_given) {
    const auto s = [&](const char* key, std::string& dst) {
      if (!flag_given(key) && kv.has(key)) dst = kv.get(key);
    };
    const auto i = [&](const char* key, int& dst) {
      if (!flag_given(key) && kv.has(key)) dst = static_cast<int>(kv.get_int(key));
    };
    const auto d = [&](const char* key, double& dst) {
      if (!flag_given(key) && kv.has(key)) dst = kv.get_double(key);
    };
    const auto b = [&](const char* key, bool& dst) {
      if (!flag_given(key) && kv.has(key)) dst = kv.get_bool(key);
    };
    s("data", data);
    s("fixed_split", fixed_split);
    s("plan", plan);
    i("fold", fold);
    s("out", out);
    s("task", task);
    i("input_h", input_h);
    i("input_w", input_w);
    s("width_multiplier", width_multiplier);
    i("epochs", train.epochs);
    i("batch_size", train.batch_size);
    d("lr0", train.lr0);
    d("beta1", train.beta1);
    d("beta2", train.beta2);
    d("epsilon", train.epsilon);
    b("amsgrad", train.amsgrad);
    i("plateau_patience", train.plateau_patience);
    d("plateau_factor", train.plateau_factor);
    d("min_lr", train.min_lr);
    if (!flag_given("seed") && kv.has("seed"))
      train.seed = static_cast<std::uint64_t>(kv.get_int("seed"));
    i("workers", train.workers);
    s("class_weight_mode", class_weight_mode);
    b("augment", augment_enabled);
    d("aug_rotation_deg", augment.rotation_deg_max);
    d("aug_shift_frac", augment.shift_frac_max);
    d("aug_hflip_prob", augment.hflip_prob);
    d("aug_vflip_prob", augment.vflip_prob);
    s("init_from", init_from);
    b("allow_partial_init", allow_partial_init);
  }
};

void print_fold_counts(const DatasetIndex& index, const FoldPlan& plan) {
  for (std::size_t f = 0; f < plan.folds.size(); ++f) {
    const auto& fold = plan.folds[f];
    std::printf("fold %zu: train=%zu val=%zu test=%zu\n", f, fold.train.size(), fold.val.size(),
                fold.test.size());
    std::vector<std::int64_t> per_class(static_cast<std::size_t>(index.num_classes()), 0);
    for (const auto id : fold.test) {
      per_class[static_cast<std::size_t>(index.samples[static_cast<std::size_t>(id)].class_id)]++;
    }
    for (int c = 0; c < index.num_classes(); ++c) {
      std::printf("  test %-12s %lld\n", index.class_names[static_cast<std::size_t>(c)].c_str(),
                  static_cast<long long>(per_class[static_cast<std::size_t>(c)]));
    }
  }
}

struct SplitRoles {
  DatasetIndex index;
  FoldData data;
};

/// Resolves either --plan/--fold over --data, or --fixed-split.
SplitRoles resolve_roles(const RunConfig& rc, std::uint64_t seed) {
  SplitRoles roles;
  if (!rc.fixed_split.empty()) {
    FixedSplit split = scan_fixed_split(rc.fixed_split);
    const FoldPlan plan = fixed_split_plan(split, seed);
    roles.index = std::move(split.index);
    roles.data.train_ids = plan.folds[0].train;
    roles.data.val_ids = plan.folds[0].val;
    roles.data.test_ids = plan.folds[0].test;
    return roles;
  }
  if (rc.data.empty()) throw ValueError("either --data with --plan, or --fixed-split, is required");
  if (rc.plan.empty()) throw ValueError("--plan is required (create one with `cvrnet split`)");
  roles.index = scan_dataset(rc.data);
  const FoldPlan plan = load_fold_plan(rc.plan);
  if (rc.fold < 0 || rc.fold >= plan.k) {
    throw ValueError("--fold " + std::to_string(rc.fold) + " out of range for a k=" +
                     std::to_string(plan.k) + " plan");
  }
  const auto& fold = plan.folds[static_cast<std::size_t>(rc.fold)];
  for (const auto* ids : {&fold.train, &fold.val, &fold.test}) {
    for (const std::int64_t id : *ids) {
      if (id < 0 || id >= roles.index.total()) {
        throw ValueError("fold plan references sample id " + std::to_string(id) +
                         " outside the dataset (N=" + std::to_string(roles.index.total()) + ")");
      }
    }
  }
  roles.data.train_ids = fold.train;
  roles.data.val_ids = fold.val;
  roles.data.test_ids = fold.test;
  return roles;
}

std::vector<std::int64_t> role_class_counts(const DatasetIndex& index,
                                            const std::vector<std::int64_t>& ids) {
  std::vector<std::int64_t> counts(static_cast<std::size_t>(index.num_classes()), 0);
  for (const std::int64_t id : ids) {
    counts[static_cast<std::size_t>(index.samples[static_cast<std::size_t>(id)].class_id)]++;
  }
  return counts;
}

// ---------------------------------------------------------------------------
// subcommands
// ---------------------------------------------------------------------------

int cmd_split(const std::string& data, int k, std::uint64_t seed, double val_frac,
              const std::string& out) {
  const DatasetIndex index = scan_dataset(data);
  const FoldPlan plan = make_folds(index, k, seed, val_frac);
  save_fold_plan(plan, out);
  std::printf("wrote %s (N=%lld, K=%d)\n", out.c_str(), static_cast<long long>(index.total()),
              index.num_classes());
  print_fold_counts(index, plan);
  for (const auto& skipped : index.skipped_files) {
    std::printf("skipped unreadable file: %s\n", skipped.c_str());
  }
  return kExitOk;
}

int cmd_train(RunConfig rc) {
  rc.train.validate();
  set_intra_op_workers(rc.train.workers);
  SplitRoles roles = resolve_roles(rc, rc.train.seed);

  ModelConfig mc;
  mc.input_h = rc.input_h;
  mc.input_w = rc.input_w;
  mc.num_classes = roles.index.num_classes();
  mc.width = WidthMultiplier::parse(rc.width_multiplier);
  CvrNet model(mc, derive_seed(rc.train.seed, "init"));

  if (!rc.init_from.empty()) {
    if (rc.allow_partial_init) {
      const PartialLoadReport rep = load_checkpoint_partial(model, rc.init_from);
      std::printf("partial init from %s: %zu imported, %zu shape-rejected, %zu missing\n",
                  rc.init_from.c_str(), rep.imported.size(), rep.rejected_shape.size(),
                  rep.missing_in_file.size());
      for (const auto& r : rep.rejected_shape) std::printf("  rejected %s\n", r.c_str());
    } else {
      load_checkpoint_into(model, rc.init_from);
      std::printf("initialized all parameters from %s\n", rc.init_from.c_str());
    }
  }

  const fs::path out_dir = ensure_out_dir(rc.out);
  Manifest manifest{out_dir, {}};

  const auto train_counts = role_class_counts(roles.index, roles.data.train_ids);
  const ClassWeights cw =
      class_weights(train_counts, class_weight_mode_from_string(rc.class_weight_mode));

  FitOptions options;
  options.augment = rc.augment;
  options.augment.seed = derive_seed(rc.train.seed, "augment");
  options.augment_enabled = rc.augment_enabled && !rc.augment.is_identity();
  options.class_weights = cw.weights;
  options.checkpoint_path = (out_dir / "best.ckpt").string();
  options.frozen_prefixes = rc.freeze_prefixes;

  const fs::path report_path = out_dir / "train_report.jsonl";
  std::ofstream report_out(report_path, std::ios::trunc);
  if (!report_out) throw IoError("cannot write " + report_path.string());
  options.on_epoch = [&](const EpochRecord& rec) {
    report_out << epoch_record_to_json(rec) << "\n";
    report_out.flush();
    std::printf("epoch %3d  train %.6f  val %.6f  acc %.4f  lr %.2e  %.1fs\n", rec.epoch,
                rec.train_loss, rec.val_loss, rec.val_accuracy, rec.lr, rec.wall_time_s);
  };

  roles.data.index = &roles.index;
  const TrainReport report = fit(model, roles.data, rc.train, options);
  report_out << train_summary_to_json(report) << "\n";
  report_out.close();

  std::ofstream cfg_out(out_dir / "resolved_config.txt", std::ios::trunc);
  cfg_out << rc.resolved().str();
  cfg_out.close();

  manifest.add(report_path);
  if (!report.best_checkpoint.empty()) manifest.add(out_dir / "best.ckpt");
  manifest.add(out_dir / "resolved_config.txt");
  manifest.write();

  std::printf("best epoch %d (val loss %.6f); artifacts in %s\n", report.best_epoch,
              report.best_val_loss, out_dir.string().c_str());
  return kExitOk;
}

int cmd_evaluate(const RunConfig& rc, const std::string& model_path) {
  set_intra_op_workers(rc.train.workers);
  CvrNet model = load_checkpoint(model_path);
  const ModelConfig& mc = model.config();

  RunConfig data_rc = rc;
  data_rc.input_h = mc.input_h;
  data_rc.input_w = mc.input_w;
  SplitRoles roles = resolve_roles(data_rc, rc.train.seed);
  if (roles.index.num_classes() != mc.num_classes) {
    throw MismatchError("checkpoint expects K=" + std::to_string(mc.num_classes) +
                        " classes but the dataset has K=" +
                        std::to_string(roles.index.num_classes()));
  }
  if (roles.data.test_ids.empty()) throw ValueError("test role is empty");

  std::vector<int> predicted, actual;
  BatchStream stream(roles.index, roles.data.test_ids, rc.train.batch_size, mc.input_h,
                     mc.input_w, /*shuffle=*/false, 0, 0, nullptr, 0);
  while (auto batch = stream.next()) {
    const auto pred = model.predict(batch->images);
    for (std::size_t i = 0; i < pred.labels.size(); ++i) {
      predicted.push_back(pred.labels[i]);
      const std::int64_t id = batch->sample_ids[i];
      actual.push_back(roles.index.samples[static_cast<std::size_t>(id)].class_id);
    }
  }

  const ConfusionMatrix cm =
      confusion(predicted, actual, mc.num_classes, roles.index.class_names);
  const MetricsReport report = compute_metrics(cm);

  const fs::path out_dir = ensure_out_dir(rc.out);
  Manifest manifest{out_dir, {}};
  emit_report(report, ReportFormat::json, (out_dir / "report.json").string());
  emit_report(report, ReportFormat::text, (out_dir / "report.txt").string());
  emit_report(report, ReportFormat::csv, (out_dir / "confusion.csv").string());
  manifest.add(out_dir / "report.json");
  manifest.add(out_dir / "report.txt");
  manifest.add(out_dir / "confusion.csv");
  manifest.write();

  std::fputs(report_to_text(report).c_str(), stdout);
  return kExitOk;
}

int cmd_metrics(const std::string& cm_path, const std::string& out, const std::string& format) {
  const ConfusionMatrix cm = load_confusion_csv(cm_path);
  const MetricsReport report = compute_metrics(cm);
  if (!out.empty()) {
    emit_report(report, report_format_from_string(format), out);
  }
  std::fputs(report_to_text(report).c_str(), stdout);
  return kExitOk;
}

int cmd_foldavg(const std::vector<std::string>& report_paths, const std::string& out) {
  std::vector<MetricsReport> reports;
  for (const auto& p : report_paths) {
    std::ifstream in(p);
    if (!in) throw IoError("cannot open report: " + p);
    std::ostringstream buf;
    buf << in.rdbuf();
    reports.push_back(report_from_json(buf.str()));
  }
  const FoldAverage avg = fold_average(reports);
  if (!out.empty()) {
    std::ofstream o(out, std::ios::trunc);
    if (!o) throw IoError("cannot write " + out);
    o << fold_average_to_json(avg);
  }
  std::fputs(fold_average_to_text(avg).c_str(), stdout);
  return kExitOk;
}

int cmd_verify(const std::string& suite, int seeds) {
  std::vector<CheckResult> results;
  if (suite == "shapes" || suite == "all") {
    const auto r = verify_shapes();
    results.insert(results.end(), r.begin(), r.end());
  }
  if (suite == "gradcheck" || suite == "all") {
    const auto r = verify_gradcheck(seeds);
    results.insert(results.end(), r.begin(), r.end());
  }
  std::fputs(format_check_table(results).c_str(), stdout);
  if (!all_passed(results)) {
    for (const auto& r : results) {
      if (!r.passed) {
        std::printf("first failing check: %s (%s)\n", r.name.c_str(), r.detail.c_str());
        break;
      }
    }
    return kExitVerifyFailed;
  }
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"CVR-Net multi-scale multi-encoder ensemble classifier"};
  app.require_subcommand(1);

  // split
  auto* split = app.add_subcommand("split", "Create a stratified k-fold plan");
  std::string split_data, split_out = "plan.json";
  int split_k = 5;
  std::uint64_t split_seed = 42;
  double split_val_frac = 0.1;
  split->add_option("--data", split_data, "dataset root (one directory per class)")->required();
  split->add_option("--k", split_k, "fold count");
  split->add_option("--seed", split_seed, "plan seed");
  split->add_option("--val-frac", split_val_frac, "validation fraction of the non-test portion");
  split->add_option("--out", split_out, "plan JSON path");

  // shared train/evaluate options
  RunConfig rc;
  std::string config_file;
  const auto add_common = [&](CLI::App* cmd) {
    cmd->add_option("--config", config_file, "key=value config file (flags override)");
    cmd->add_option("--data", rc.data, "dataset root");
    cmd->add_option("--fixed-split", rc.fixed_split, "fixed-split root with train/ and test/");
    cmd->add_option("--plan", rc.plan, "fold plan JSON");
    cmd->add_option("--fold", rc.fold, "fold index");
    cmd->add_option("--out", rc.out, "output directory");
    cmd->add_option("--seed", rc.train.seed, "master seed");
    cmd->add_option("--batch-size", rc.train.batch_size, "mini-batch size");
    cmd->add_option("--workers", rc.train.workers, "intra-op worker threads");
  };

  auto* train = app.add_subcommand("train", "Train one fold");
  add_common(train);
  train->add_option("--task", rc.task, "run label echoed into the config");
  train->add_option("--input-h", rc.input_h, "input height (multiple of 32)");
  train->add_option("--input-w", rc.input_w, "input width (multiple of 32)");
  train->add_option("--width-multiplier", rc.width_multiplier, "channel width scale, e.g. 1/8");
  train->add_option("--epochs", rc.train.epochs, "training epochs");
  train->add_option("--lr0", rc.train.lr0, "initial learning rate");
  train->add_option("--plateau-patience", rc.train.plateau_patience, "plateau patience (epochs)");
  train->add_option("--plateau-factor", rc.train.plateau_factor, "plateau LR factor");
  train->add_option("--min-lr", rc.train.min_lr, "learning rate floor");
  train->add_option("--class-weight-mode", rc.class_weight_mode,
                    "inverse_frequency or proportional");
  train->add_flag("--no-augment", "disable train-time augmentation");
  train->add_option("--aug-rotation-deg", rc.augment.rotation_deg_max, "max rotation (degrees)");
  train->add_option("--aug-shift-frac", rc.augment.shift_frac_max, "max shift fraction");
  train->add_option("--aug-hflip-prob", rc.augment.hflip_prob, "horizontal flip probability");
  train->add_option("--aug-vflip-prob", rc.augment.vflip_prob, "vertical flip probability");
  train->add_option("--init-from", rc.init_from, "checkpoint to initialize from");
  train->add_flag("--allow-partial-init", rc.allow_partial_init,
                  "import only name/shape-matching entries");
  train->add_option("--freeze-prefix", rc.freeze_prefixes,
                    "parameter name prefix to exclude from updates (repeatable)");

  auto* evaluate = app.add_subcommand("evaluate", "Evaluate a checkpoint on the test role");
  std::string eval_model;
  add_common(evaluate);
  evaluate->add_option("--model", eval_model, "checkpoint path")->required();

  auto* metrics = app.add_subcommand("metrics", "Recompute metrics from a confusion CSV");
  std::string cm_path, metrics_out, metrics_format = "json";
  metrics->add_option("--cm", cm_path, "confusion matrix CSV (rows = predicted)")->required();
  metrics->add_option("--out", metrics_out, "write the report here");
  metrics->add_option("--format", metrics_format, "json, csv or text")
      ->check(CLI::IsMember({"json", "csv", "text"}));

  auto* foldavg = app.add_subcommand("foldavg", "Average metrics reports across folds");
  std::vector<std::string> foldavg_reports;
  std::string foldavg_out;
  foldavg->add_option("--reports", foldavg_reports, "report.json files")->required()->expected(-1);
  foldavg->add_option("--out", foldavg_out, "write the averaged JSON here");

  auto* verify = app.add_subcommand("verify", "Run the verification suites");
  std::string verify_suite;
  int verify_seeds = 20;
  verify->add_option("--suite", verify_suite, "shapes, gradcheck or all")
      ->required()
      ->check(CLI::IsMember({"shapes", "gradcheck", "all"}));
  verify->add_option("--seeds", verify_seeds, "random draws per gradient check");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitUsage;
  }

  try {
    if (split->parsed()) {
      return cmd_split(split_data, split_k, split_seed, split_val_frac, split_out);
    }
    if (train->parsed() || evaluate->parsed()) {
      CLI::App* cmd = train->parsed() ? static_cast<CLI::App*>(train) : evaluate;
      if (!config_file.empty()) {
        const KeyValueConfig kv = KeyValueConfig::load(config_file);
        rc.apply_file(kv, [&](const char* key) {
          std::string flag = "--";
          for (const char* p = key; *p; ++p) flag += *p == '_' ? '-' : *p;
          const CLI::Option* opt = cmd->get_option_no_throw(flag);
          return opt != nullptr && opt->count() > 0;
        });
      }
      if (train->parsed()) {
        if (train->get_option("--no-augment")->count() > 0) rc.augment_enabled = false;
        return cmd_train(rc);
      }
      return cmd_evaluate(rc, eval_model);
    }
    if (metrics->parsed()) return cmd_metrics(cm_path, metrics_out, metrics_format);
    if (foldavg->parsed()) return cmd_foldavg(foldavg_reports, foldavg_out);
    if (verify->parsed()) return cmd_verify(verify_suite, verify_seeds);
  } catch (const MismatchError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitMismatch;
  } catch (const NumericError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitNumeric;
  } catch (const Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitUsage;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitUsage;
  }
  return kExitUsage;
}

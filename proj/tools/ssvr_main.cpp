// ssvr: command-line driver for the semi-supervised severity model.
//
// Subcommands: synth (benchmark dataset generation), extract-labels (keyword
// labeling of report text), train (fit one of the three methods into a run
// directory), eval (score a checkpoint on a dataset split).
//
// Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "ssvr/config.hpp"
#include "ssvr/data.hpp"
#include "ssvr/eval.hpp"
#include "ssvr/image_io.hpp"
#include "ssvr/model.hpp"
#include "ssvr/optim.hpp"

namespace {

using namespace ssvr;

namespace fs = std::filesystem;

void write_file(const std::string& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write: " + path);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw DataError("short write: " + path);
}

RunConfig resolve_config(const std::string& config_path,
                         const std::vector<std::string>& overrides,
                         const std::string& out_dir,
                         const std::string& data_dir) {
  RunConfig cfg;
  if (!config_path.empty()) cfg = load_config(config_path);
  apply_overrides(cfg, overrides);
  if (!out_dir.empty()) cfg.out_dir = out_dir;
  if (!data_dir.empty()) cfg.data_dir = data_dir;
  cfg.validate();
  return cfg;
}

std::string require_out_dir(const RunConfig& cfg) {
  if (cfg.out_dir.empty())
    throw DataError("an output directory is required (--out or out.dir)");
  fs::create_directories(cfg.out_dir);
  return cfg.out_dir;
}

// ---- synth -------------------------------------------------------------------

int cmd_synth(const RunConfig& cfg) {
  const std::string out = require_out_dir(cfg);
  const SynthResult res = synth_generate(cfg.synth);

  std::string manifest = "image_id,patient_id,severity,report_text\n";
  std::string truth = "image_id,true_severity\n";
  for (const ImageRecord& rec : res.dataset.records) {
    const std::string file = rec.image_id + "." + cfg.synth_format;
    if (cfg.synth_format == "png")
      write_png(out + "/" + file, rec.pixels, cfg.synth_bit_depth);
    else
      write_pgm(out + "/" + file, rec.pixels, cfg.synth_bit_depth);
    manifest +=
        csv_line({rec.image_id, rec.patient_id,
                  rec.severity ? std::to_string(*rec.severity) : "", ""});
    truth += csv_line(
        {rec.image_id, format_g17(res.true_severity.at(rec.image_id))});
  }
  write_file(out + "/labels.csv", manifest);
  write_file(out + "/truth.csv", truth);
  res.split.write_csv(out + "/splits.csv");
  write_file(out + "/config.resolved", dump_config(cfg));

  std::cout << "wrote " << res.dataset.size() << " images to " << out << "\n";
  return 0;
}

// ---- extract-labels ------------------------------------------------------------

int cmd_extract_labels(const std::string& reports_path,
                       const std::string& rules_path,
                       const std::string& out_path) {
  const KeywordRuleset rules = rules_path.empty()
                                   ? KeywordRuleset::default_rules()
                                   : KeywordRuleset::parse_file(rules_path);
  if (rules.rules.empty())
    std::cerr << "warning: ruleset is empty; no report can match\n";

  const std::vector<CsvRow> rows = read_csv_file(reports_path);
  if (rows.empty()) throw DataError("empty reports file: " + reports_path);
  if (rows[0].fields != std::vector<std::string>{"image_id", "report_text"})
    throw DataError(reports_path +
                    ": expected header image_id,report_text");

  std::string out_csv = "image_id,severity\n";
  std::size_t matched = 0, total = 0;
  for (std::size_t i = 1; i < rows.size(); ++i) {
    if (rows[i].fields.size() != 2)
      throw DataError(reports_path + ":" + std::to_string(rows[i].line) +
                      ": expected 2 fields");
    const std::optional<int> sev = extract_label(rows[i].fields[1], rules);
    out_csv += csv_line(
        {rows[i].fields[0], sev ? std::to_string(*sev) : ""});
    ++total;
    if (sev) ++matched;
  }
  write_file(out_path, out_csv);

  char rate[32] = "";
  if (total > 0)
    std::snprintf(rate, sizeof rate, " (%.1f%%)",
                  100.0 * static_cast<double>(matched) /
                      static_cast<double>(total));
  std::cout << "matched " << matched << " of " << total << " reports" << rate
            << "\n";
  return 0;
}

// ---- train --------------------------------------------------------------------

std::string epoch_log_csv(const std::vector<EpochLog>& log) {
  auto opt = [](const std::optional<double>& v) {
    return v ? format_g17(*v) : std::string();
  };
  std::string csv =
      "epoch,labeled_total,labeled_kl,labeled_recon,labeled_reg,"
      "unlabeled_total,unlabeled_kl,unlabeled_recon,unlabeled_entropy,"
      "val_rms\n";
  for (const EpochLog& row : log) {
    std::vector<std::string> f(10);
    f[0] = std::to_string(row.epoch);
    if (row.labeled) {
      f[1] = format_g17(row.labeled->total);
      f[2] = format_g17(row.labeled->kl);
      f[3] = format_g17(row.labeled->reconstruction);
      f[4] = opt(row.labeled->regression);
    }
    if (row.unlabeled) {
      f[5] = format_g17(row.unlabeled->total);
      f[6] = format_g17(row.unlabeled->kl);
      f[7] = format_g17(row.unlabeled->reconstruction);
      f[8] = opt(row.unlabeled->entropy);
    }
    f[9] = opt(row.val_rms);
    csv += csv_line(f);
  }
  return csv;
}

int cmd_train(const RunConfig& cfg, bool resume) {
  const std::string out = require_out_dir(cfg);
  if (cfg.data_dir.empty())
    throw DataError("train: a dataset directory is required (--data or data.dir)");

  const Dataset dataset =
      load_manifest(cfg.data_dir, cfg.data_dir + "/labels.csv");
  SplitManifest split;
  if (fs::exists(cfg.data_dir + "/splits.csv")) {
    split = SplitManifest::read_csv(cfg.data_dir + "/splits.csv");
  } else {
    split = split_by_patient(dataset, cfg.fractions, cfg.split_seed);
    split.write_csv(out + "/splits.csv");  // the split this run trained on
  }
  const DatasetSlice labeled = train_labeled_slice(dataset, split);
  const DatasetSlice unlabeled = train_unlabeled_slice(dataset, split);
  const DatasetSlice validation = validation_slice(dataset, split);

  write_file(out + "/config.resolved", dump_config(cfg));

  Checkpoint resume_ckpt;
  const Checkpoint* resume_ptr = nullptr;
  if (resume) {
    resume_ckpt = load_checkpoint(out + "/last.ckpt");
    resume_ptr = &resume_ckpt;
    std::cout << "resuming from epoch " << resume_ckpt.epoch << "\n";
  }

  const ModelParams init = init_params(cfg.arch, cfg.train.seed);
  FitResult res;
  if (cfg.method == "supervised") {
    if (!unlabeled.empty())
      std::cout << "note: method=supervised ignores the " << unlabeled.size()
                << " unlabeled training images\n";
    res = train_supervised_baseline(init, labeled, validation, cfg.train,
                                    resume_ptr);
  } else if (cfg.method == "em") {
    res = train_em_baseline(init, labeled, unlabeled, validation, cfg.train,
                            cfg.entropy_weight, resume_ptr);
  } else {
    res = train_vae_r(init, labeled, unlabeled, validation, cfg.train,
                      resume_ptr);
  }

  write_file(out + "/train_log.csv", epoch_log_csv(res.log));
  save_checkpoint(res.best, out + "/best.ckpt");
  save_checkpoint(res.last, out + "/last.ckpt");

  std::cout << "trained method=" << cfg.method << " to epoch "
            << res.last.epoch << (res.early_stopped ? " (early stop)" : "")
            << "\n";
  std::cout << "best epoch " << res.best.epoch << " val_rms "
            << format_g17(res.best.val_rms) << "\n";
  return 0;
}

// ---- eval ---------------------------------------------------------------------

int cmd_eval(const std::string& ckpt_path, const std::string& data_dir,
             const std::string& splits_path, const std::string& split_name_arg,
             const std::string& method_label, const std::string& out_path,
             const std::string& per_class_path) {
  const Checkpoint ckpt = load_checkpoint(ckpt_path);
  const Dataset dataset = load_manifest(data_dir, data_dir + "/labels.csv");
  const std::string splits_file =
      splits_path.empty() ? data_dir + "/splits.csv" : splits_path;
  const SplitManifest split = SplitManifest::read_csv(splits_file);

  DatasetSlice slice;
  const SplitId which = split_from_name(split_name_arg);
  if (which == SplitId::Validation)
    slice = validation_slice(dataset, split);
  else if (which == SplitId::Test)
    slice = test_slice(dataset, split);
  else
    slice = train_labeled_slice(dataset, split);

  const Metrics m = evaluate(ckpt.params, slice);

  write_file(out_path, metrics_csv_header() +
                           metrics_csv_line(method_label, ckpt.rng_seed, m));
  const std::string pc_path =
      per_class_path.empty() ? out_path + ".per_class.csv" : per_class_path;
  write_per_class_csv(pc_path, m);

  std::cout << "rms " << format_g17(m.rms) << "\n";
  std::cout << "cc " << format_g17(m.pearson) << "\n";
  std::cout << "n " << m.n << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{
      "ssvr: semi-supervised ordinal severity regression on synthetic "
      "radiographs"};
  app.require_subcommand(1);

  std::string config_path, out_dir, data_dir;
  std::vector<std::string> overrides;
  auto add_config_opts = [&](CLI::App* sub, bool with_data) {
    sub->add_option("--config", config_path,
                    "flat key = value configuration file");
    sub->add_option("--set", overrides,
                    "override a single key (key=value; repeatable)");
    sub->add_option("--out", out_dir, "output directory");
    if (with_data)
      sub->add_option("--data", data_dir,
                      "dataset directory (labels.csv + images)");
  };

  CLI::App* synth =
      app.add_subcommand("synth", "generate a synthetic benchmark dataset");
  add_config_opts(synth, false);

  std::string reports_path, rules_path, labels_out;
  CLI::App* extract = app.add_subcommand(
      "extract-labels", "match report text against a keyword ruleset");
  extract->add_option("--reports", reports_path,
                      "CSV with header image_id,report_text")
      ->required();
  extract->add_option("--rules", rules_path,
                      "ruleset file (default: the built-in rules)");
  extract->add_option("--out", labels_out, "output labels CSV")->required();

  bool resume = false;
  CLI::App* train =
      app.add_subcommand("train", "train a model into a run directory");
  add_config_opts(train, true);
  train->add_flag("--resume", resume,
                  "continue from <out>/last.ckpt instead of starting fresh");

  std::string ckpt_path, splits_path, split_arg = "test", method_label = "model";
  std::string metrics_out, per_class_out;
  CLI::App* eval_cmd =
      app.add_subcommand("eval", "score a checkpoint on a dataset split");
  eval_cmd->add_option("--checkpoint", ckpt_path, "checkpoint file")->required();
  eval_cmd->add_option("--data", data_dir, "dataset directory")->required();
  eval_cmd->add_option("--splits", splits_path,
                       "split manifest (default: <data>/splits.csv)");
  eval_cmd->add_option("--split", split_arg, "which split to score")
      ->check(CLI::IsMember({"train", "validation", "test"}));
  eval_cmd->add_option("--method", method_label,
                       "method label written into the metrics CSV");
  eval_cmd->add_option("--out", metrics_out, "metrics CSV path")->required();
  eval_cmd->add_option("--per-class", per_class_out,
                       "per-class dump path (default: <out>.per_class.csv)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (*synth) return cmd_synth(resolve_config(config_path, overrides, out_dir, ""));
    if (*extract) return cmd_extract_labels(reports_path, rules_path, labels_out);
    if (*train)
      return cmd_train(resolve_config(config_path, overrides, out_dir, data_dir),
                       resume);
    return cmd_eval(ckpt_path, data_dir, splits_path, split_arg, method_label,
                    metrics_out, per_class_out);
  } catch (const NumericalError& e) {
    std::cerr << "numerical failure: " << e.what() << "\n";
    return 3;
  } catch (const DataError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const ShapeError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << "\n";
    return 3;
  }
}

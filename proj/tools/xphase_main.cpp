// Command-line front end: dataset generation, training, evaluation,
// attention inspection, and the gradient-check suite.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "xphase/config.hpp"
#include "xphase/errors.hpp"
#include "xphase/gradsuite.hpp"
#include "xphase/model.hpp"
#include "xphase/phantom.hpp"
#include "xphase/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace xphase;

namespace {

const char* kPhaseNames[4] = {"non-contrast", "arterial", "portal", "delayed"};

RunConfig load_config(const std::string& path) {
  if (path.empty()) return RunConfig::defaults();
  return RunConfig::from_file(path);
}

json config_echo(const RunConfig& cfg) {
  json echo;
  for (const auto& [k, v] : cfg.values()) echo[k] = v;
  return echo;
}

json metrics_json(const MetricsReport& m, std::int64_t n_classes) {
  json j;
  j["weighted_auc"] = m.weighted_auc;
  j["weighted_precision"] = m.weighted_precision;
  j["weighted_recall"] = m.weighted_recall;
  j["weighted_f1"] = m.weighted_f1;
  json per_class = json::array();
  for (const auto& c : m.per_class) {
    json e;
    e["support"] = c.support;
    if (c.has_auc) e["auc"] = c.auc;
    e["precision"] = c.precision;
    e["recall"] = c.recall;
    e["f1"] = c.f1;
    per_class.push_back(e);
  }
  j["per_class"] = per_class;
  j["confusion"] = m.confusion;
  j["missing_auc_classes"] = m.missing_auc_classes;
  j["n_classes"] = n_classes;
  return j;
}

void print_metrics(const MetricsReport& m) {
  std::printf("weighted AUC       %.4f\n", m.weighted_auc);
  std::printf("weighted precision %.4f\n", m.weighted_precision);
  std::printf("weighted recall    %.4f\n", m.weighted_recall);
  std::printf("weighted F1        %.4f\n", m.weighted_f1);
  std::printf("%-7s %-8s %-8s %-10s %-8s %-8s\n", "class", "support", "auc", "precision",
              "recall", "f1");
  for (std::size_t c = 0; c < m.per_class.size(); ++c) {
    const auto& e = m.per_class[c];
    if (e.has_auc) {
      std::printf("%-7zu %-8d %-8.4f %-10.4f %-8.4f %-8.4f\n", c, e.support, e.auc, e.precision,
                  e.recall, e.f1);
    } else {
      std::printf("%-7zu %-8d %-8s %-10.4f %-8.4f %-8.4f\n", c, e.support, "n/a", e.precision,
                  e.recall, e.f1);
    }
  }
  for (int c : m.missing_auc_classes) {
    std::printf("note: class %d has no positives or no negatives in this split; "
                "its AUC is excluded from the weighted average\n", c);
  }
}

int cmd_generate(const std::string& config_path, const std::string& out_dir,
                 std::int64_t seed_override) {
  RunConfig cfg = load_config(config_path);
  if (seed_override >= 0) cfg.set("data.seed", std::to_string(seed_override));
  GeneratorConfig gen = cfg.generator();
  const auto manifest = generate_dataset(gen, out_dir);

  std::map<std::string, std::map<int, int>> table;
  for (const auto& e : manifest.entries) table[e.split][e.label] += 1;
  std::printf("dataset written to %s (%zu cases, seed %llu)\n", out_dir.c_str(),
              manifest.entries.size(), static_cast<unsigned long long>(manifest.seed));
  for (const char* split : {"train", "val", "test"}) {
    int total = 0;
    std::string breakdown;
    for (const auto& [cls, count] : table[split]) {
      total += count;
      breakdown += " class" + std::to_string(cls) + "=" + std::to_string(count);
    }
    std::printf("  %-5s %3d |%s\n", split, total, breakdown.c_str());
  }
  return 0;
}

int cmd_train(const std::string& config_path, const std::string& dataset_dir,
              const std::string& out_dir, std::int64_t seed_override) {
  RunConfig cfg = load_config(config_path);
  if (seed_override >= 0) cfg.set("train.seed", std::to_string(seed_override));
  const ModelConfig model_cfg = cfg.model();
  const TrainConfig train_cfg = cfg.trainer();

  const auto manifest = load_manifest((fs::path(dataset_dir) / "manifest.json").string());
  const auto train_cases = load_split(dataset_dir, manifest, "train");
  const auto val_cases = load_split(dataset_dir, manifest, "val");
  if (train_cases.empty()) throw std::invalid_argument("train split is empty");

  auto result = train(train_cases, val_cases, model_cfg, train_cfg);

  fs::create_directories(out_dir);
  const std::string ckpt = (fs::path(out_dir) / "checkpoint.xpc").string();
  save_checkpoint(ckpt, result.params);

  json report;
  report["config"] = config_echo(cfg);
  report["dataset"] = {{"dir", dataset_dir},
                       {"seed", manifest.seed},
                       {"config_hash", manifest.config_hash},
                       {"train_cases", train_cases.size()},
                       {"val_cases", val_cases.size()}};
  report["epoch_loss"] = result.epoch_loss;
  report["lr_trace"] = result.lr_trace;
  report["selection"] = result.used_best_val ? "best_val" : "final";
  if (result.used_best_val) {
    report["best_val_epoch"] = result.best_val_epoch;
    report["best_val_auc"] = result.best_val_auc;
  }
  report["checkpoint"] = ckpt;

  report["train_metrics"] = metrics_json(evaluate(result.params, train_cases, model_cfg),
                                         model_cfg.n_classes);
  if (!val_cases.empty()) {
    report["val_metrics"] =
        metrics_json(evaluate(result.params, val_cases, model_cfg), model_cfg.n_classes);
  }

  const std::string report_path = (fs::path(out_dir) / "run_report.json").string();
  std::ofstream rf(report_path, std::ios::trunc);
  rf << report.dump(2) << "\n";
  if (!rf) throw IoError(IoError::Kind::io, "cannot write " + report_path);

  std::printf("checkpoint: %s\n", ckpt.c_str());
  std::printf("run report: %s\n", report_path.c_str());
  std::printf("final epoch loss: %.6f\n",
              result.epoch_loss.empty() ? 0.0 : result.epoch_loss.back());
  return 0;
}

int cmd_eval(const std::string& config_path, const std::string& checkpoint,
             const std::string& dataset_dir, const std::string& split,
             const std::string& out_dir) {
  RunConfig cfg = load_config(config_path);
  const ModelConfig model_cfg = cfg.model();

  const auto manifest = load_manifest((fs::path(dataset_dir) / "manifest.json").string());
  const auto cases = load_split(dataset_dir, manifest, split);
  if (cases.empty()) throw std::invalid_argument("split '" + split + "' is empty");

  ModelParams params = init_params(model_cfg, 0);
  load_checkpoint(checkpoint, params);

  const auto metrics = evaluate(params, cases, model_cfg);
  print_metrics(metrics);

  fs::create_directories(out_dir);
  const std::string path = (fs::path(out_dir) / ("metrics_" + split + ".json")).string();
  std::ofstream f(path, std::ios::trunc);
  f << metrics_json(metrics, model_cfg.n_classes).dump(2) << "\n";
  if (!f) throw IoError(IoError::Kind::io, "cannot write " + path);
  std::printf("metrics written to %s\n", path.c_str());
  return 0;
}

std::string phase_label(std::int64_t i, std::int64_t n) {
  if (n == 4) return kPhaseNames[i];
  return "phase_" + std::to_string(i);
}

int cmd_inspect_attention(const std::string& config_path, const std::string& checkpoint,
                          const std::string& dataset_dir, const std::string& case_id,
                          const std::string& out_dir) {
  RunConfig cfg = load_config(config_path);
  const ModelConfig model_cfg = cfg.model();

  const auto manifest = load_manifest((fs::path(dataset_dir) / "manifest.json").string());
  const ManifestEntry* entry = nullptr;
  for (const auto& e : manifest.entries) {
    if (e.id == case_id) {
      entry = &e;
      break;
    }
  }
  if (!entry) throw std::invalid_argument("unknown case id '" + case_id + "'");

  ModelParams params = init_params(model_cfg, 0);
  load_checkpoint(checkpoint, params);

  const PhantomCase pc = load_case(dataset_dir, *entry);
  const auto fr = forward(pc.data, params, model_cfg);
  const std::int64_t n = fr.attention.n;

  fs::create_directories(out_dir);
  const std::string csv_path = (fs::path(out_dir) / ("attention_" + case_id + ".csv")).string();
  std::ofstream csv(csv_path, std::ios::trunc);
  csv << "scale,query";
  for (std::int64_t j = 0; j < n; ++j) csv << "," << phase_label(j, n);
  csv << ",row_sum\n";
  auto emit = [&](const char* scale, const std::vector<double>& a) {
    for (std::int64_t i = 0; i < n; ++i) {
      csv << scale << "," << phase_label(i, n);
      double row_sum = 0.0;
      char buf[32];
      for (std::int64_t j = 0; j < n; ++j) {
        row_sum += a[i * n + j];
        std::snprintf(buf, sizeof(buf), "%.6g", a[i * n + j]);
        csv << "," << buf;
      }
      std::snprintf(buf, sizeof(buf), "%.6g", row_sum);
      csv << "," << buf << "\n";
    }
  };
  emit("low", fr.attention.a_low);
  if (!fr.attention.a_high.empty()) emit("high", fr.attention.a_high);
  if (!csv) throw IoError(IoError::Kind::io, "cannot write " + csv_path);
  csv.close();

  auto matrix_json = [&](const std::vector<double>& a) {
    json rows = json::array();
    for (std::int64_t i = 0; i < n; ++i) {
      json row = json::array();
      for (std::int64_t j = 0; j < n; ++j) row.push_back(a[i * n + j]);
      rows.push_back(row);
    }
    return rows;
  };
  json j;
  j["case"] = case_id;
  j["label"] = entry->label;
  j["predicted"] = fr.prediction.predicted;
  json phases = json::array();
  for (std::int64_t i = 0; i < n; ++i) phases.push_back(phase_label(i, n));
  j["phases"] = phases;
  j["a_low"] = matrix_json(fr.attention.a_low);
  if (!fr.attention.a_high.empty()) j["a_high"] = matrix_json(fr.attention.a_high);
  const std::string json_path = (fs::path(out_dir) / ("attention_" + case_id + ".json")).string();
  std::ofstream jf(json_path, std::ios::trunc);
  jf << j.dump(2) << "\n";
  if (!jf) throw IoError(IoError::Kind::io, "cannot write " + json_path);

  std::ifstream echo(csv_path);
  std::string line;
  while (std::getline(echo, line)) std::printf("%s\n", line.c_str());
  std::printf("attention matrices written to %s and %s\n", csv_path.c_str(), json_path.c_str());
  return 0;
}

int cmd_gradcheck() {
  const auto rows = run_gradient_suite();
  bool all_passed = true;
  std::printf("%-36s %-12s %-12s %s\n", "op", "max_abs_err", "max_rel_err", "status");
  for (const auto& r : rows) {
    std::printf("%-36s %-12.3e %-12.3e %s\n", r.op_name.c_str(), r.max_abs_err, r.max_rel_err,
                r.passed ? "pass" : "FAIL");
    all_passed = all_passed && r.passed;
  }
  if (!all_passed) {
    std::printf("gradient check FAILED\n");
    return 1;
  }
  std::printf("all gradient checks passed\n");
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"cross-phase attention classifier for multi-phase volumes"};
  app.require_subcommand(1);

  std::string config_path, out_dir = ".", dataset_dir, checkpoint, split = "test", case_id;
  std::int64_t seed_override = -1;

  auto* gen = app.add_subcommand("generate", "generate a synthetic dataset");
  gen->add_option("--config", config_path, "key=value config file");
  gen->add_option("--out", out_dir, "output dataset directory")->required();
  gen->add_option("--seed", seed_override, "override data.seed");

  auto* tr = app.add_subcommand("train", "train on a generated dataset");
  tr->add_option("--config", config_path, "key=value config file");
  tr->add_option("--dataset", dataset_dir, "dataset directory")->required();
  tr->add_option("--out", out_dir, "run output directory")->required();
  tr->add_option("--seed", seed_override, "override train.seed");

  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint on a split");
  ev->add_option("--config", config_path, "key=value config file");
  ev->add_option("--checkpoint", checkpoint, "checkpoint file")->required();
  ev->add_option("--dataset", dataset_dir, "dataset directory")->required();
  ev->add_option("--split", split, "train | val | test");
  ev->add_option("--out", out_dir, "metrics output directory");

  auto* ia = app.add_subcommand("inspect-attention", "export attention matrices for one case");
  ia->add_option("--config", config_path, "key=value config file");
  ia->add_option("--checkpoint", checkpoint, "checkpoint file")->required();
  ia->add_option("--dataset", dataset_dir, "dataset directory")->required();
  ia->add_option("--case", case_id, "case id from the manifest")->required();
  ia->add_option("--out", out_dir, "export output directory");

  auto* gc = app.add_subcommand("gradcheck", "run the gradient-check suite");

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed()) return cmd_generate(config_path, out_dir, seed_override);
    if (tr->parsed()) return cmd_train(config_path, dataset_dir, out_dir, seed_override);
    if (ev->parsed()) return cmd_eval(config_path, checkpoint, dataset_dir, split, out_dir);
    if (ia->parsed())
      return cmd_inspect_attention(config_path, checkpoint, dataset_dir, case_id, out_dir);
    if (gc->parsed()) return cmd_gradcheck();
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}

#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "xphase/model.hpp"
#include "xphase/phantom.hpp"

namespace xphase {

struct TrainConfig {
  int epochs = 200;
  double lr = 1e-4;
  double lr_decay = 0.1;
  int lr_step = 50;
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  double flip_prob = 0.5;  // per axis
  std::uint64_t seed = 0;
  // Final-epoch parameters are kept by default; optionally snapshot the
  // epoch with the best val weighted AUC instead.
  bool select_best_val = false;

  void validate() const;
};

using NamedTensors = std::vector<std::pair<std::string, TensorPtr>>;

struct AdamState {
  std::vector<std::vector<double>> m, v;  // mirror the named-parameter order
  std::int64_t t = 0;

  static AdamState init(const NamedTensors& params);
};

// Bias-corrected Adam update over every trainable parameter. Parameters
// whose grad buffer is empty are treated as having zero gradient. A NaN
// gradient aborts with the offending parameter named.
void adam_step(const NamedTensors& params, AdamState& state, double lr,
               const TrainConfig& cfg);

double lr_at(int epoch, const TrainConfig& cfg);

// Flip along the chosen axes; the same flip applies to every phase and the
// mask so co-registration survives.
void apply_flip(VolumeCase& vc, bool flip_h, bool flip_w, bool flip_d);
void augment_flip(VolumeCase& vc, std::mt19937_64& rng, double flip_prob);

struct ClassMetrics {
  int support = 0;
  bool has_auc = false;
  double auc = 0.0;
  double precision = 0.0, recall = 0.0, f1 = 0.0;
};

struct MetricsReport {
  double weighted_auc = 0.0;
  double weighted_precision = 0.0, weighted_recall = 0.0, weighted_f1 = 0.0;
  std::vector<ClassMetrics> per_class;
  std::vector<std::int64_t> confusion;  // n_classes x n_classes, rows = truth
  std::vector<int> missing_auc_classes;
};

// Weighted one-vs-rest AUC by the midrank Mann-Whitney statistic on y_final
// class probabilities; precision/recall/F1 from the argmax confusion matrix.
// Classes absent from `cases` are excluded from the AUC average and listed
// in missing_auc_classes.
MetricsReport evaluate(const ModelParams& params, const std::vector<PhantomCase>& cases,
                       const ModelConfig& cfg);

// Metric battery over precomputed y_final rows; evaluate() feeds it from
// forward passes and the tests feed it synthetic score matrices.
MetricsReport compute_metrics(const std::vector<std::vector<double>>& y_final,
                              const std::vector<int>& labels, int n_classes);

// Midrank AUC of one score column; exposed for the metric tests.
double auc_midrank(const std::vector<double>& scores, const std::vector<int>& positive);

struct TrainResult {
  ModelParams params;
  std::vector<double> epoch_loss;  // mean per epoch
  std::vector<double> lr_trace;    // lr used at each epoch
  bool used_best_val = false;
  int best_val_epoch = -1;
  double best_val_auc = 0.0;
};

// Seeded epoch shuffling, per-axis flip augmentation, forward, composite
// loss, backward, Adam with the stepped schedule. Deterministic per seed.
TrainResult train(const std::vector<PhantomCase>& train_cases,
                  const std::vector<PhantomCase>& val_cases,
                  const ModelConfig& model_cfg, const TrainConfig& train_cfg);

}  // namespace xphase

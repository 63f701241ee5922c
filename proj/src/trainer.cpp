#include "xphase/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <numeric>
#include <stdexcept>

#ifdef _OPENMP
#include <omp.h>
#endif

#include "xphase/rng.hpp"

namespace xphase {

namespace {
// Seed-stream tags so shuffling, augmentation, and init never alias.
constexpr std::uint64_t kInitTag = 0x1217;
constexpr std::uint64_t kShuffleTag = 0x5423;
constexpr std::uint64_t kAugmentTag = 0xA406;
}  // namespace

void TrainConfig::validate() const {
  if (epochs < 0) throw std::invalid_argument("train: epochs must be >= 0");
  if (lr <= 0 || lr_decay <= 0 || lr_step <= 0) {
    throw std::invalid_argument("train: rates must be positive");
  }
  if (beta1 <= 0 || beta1 >= 1 || beta2 <= 0 || beta2 >= 1) {
    throw std::invalid_argument("train: beta1 and beta2 must be in (0,1)");
  }
  if (eps <= 0) throw std::invalid_argument("train: eps must be positive");
  if (flip_prob < 0 || flip_prob > 1) throw std::invalid_argument("train: flip_prob must be in [0,1]");
}

AdamState AdamState::init(const NamedTensors& params) {
  AdamState s;
  for (const auto& [name, t] : params) {
    s.m.emplace_back(t->data.size(), 0.0);
    s.v.emplace_back(t->data.size(), 0.0);
  }
  s.t = 0;
  return s;
}

void adam_step(const NamedTensors& named, AdamState& state, double lr,
               const TrainConfig& cfg) {
  if (named.size() != state.m.size()) {
    throw std::invalid_argument("adam_step: state does not match the parameter list");
  }
  state.t += 1;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.t));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.t));
  for (std::size_t pi = 0; pi < named.size(); ++pi) {
    const auto& [name, t] = named[pi];
    if (!t->requires_grad) continue;
    const bool has_grad = t->grad.size() == t->data.size();
    auto& m = state.m[pi];
    auto& v = state.v[pi];
    for (std::size_t i = 0; i < t->data.size(); ++i) {
      const double g = has_grad ? t->grad[i] : 0.0;
      if (std::isnan(g)) {
        throw std::runtime_error("adam_step: NaN gradient in parameter '" + name +
                                 "' at index " + std::to_string(i));
      }
      m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
      v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      t->data[i] -= lr * mhat / (std::sqrt(vhat) + cfg.eps);
    }
  }
}

double lr_at(int epoch, const TrainConfig& cfg) {
  if (epoch < 0) throw std::invalid_argument("lr_at: negative epoch");
  return cfg.lr * std::pow(cfg.lr_decay, static_cast<double>(epoch / cfg.lr_step));
}

namespace {

void flip_axis(std::vector<double>& buf, std::int64_t h, std::int64_t w, std::int64_t d,
               int axis) {
  auto idx = [&](std::int64_t i, std::int64_t j, std::int64_t k) { return (i * w + j) * d + k; };
  if (axis == 0) {
    for (std::int64_t i = 0; i < h / 2; ++i)
      for (std::int64_t j = 0; j < w; ++j)
        for (std::int64_t k = 0; k < d; ++k)
          std::swap(buf[idx(i, j, k)], buf[idx(h - 1 - i, j, k)]);
  } else if (axis == 1) {
    for (std::int64_t i = 0; i < h; ++i)
      for (std::int64_t j = 0; j < w / 2; ++j)
        for (std::int64_t k = 0; k < d; ++k)
          std::swap(buf[idx(i, j, k)], buf[idx(i, w - 1 - j, k)]);
  } else {
    for (std::int64_t i = 0; i < h; ++i)
      for (std::int64_t j = 0; j < w; ++j)
        for (std::int64_t k = 0; k < d / 2; ++k)
          std::swap(buf[idx(i, j, k)], buf[idx(i, j, d - 1 - k)]);
  }
}

}  // namespace

void apply_flip(VolumeCase& vc, bool flip_h, bool flip_w, bool flip_d) {
  const bool flips[3] = {flip_h, flip_w, flip_d};
  for (int axis = 0; axis < 3; ++axis) {
    if (!flips[axis]) continue;
    for (auto& vol : vc.volumes) flip_axis(vol, vc.h, vc.w, vc.d, axis);
    flip_axis(vc.mask, vc.h, vc.w, vc.d, axis);
  }
}

void augment_flip(VolumeCase& vc, std::mt19937_64& rng, double flip_prob) {
  std::uniform_real_distribution<double> uni(0.0, 1.0);
  const bool fh = uni(rng) < flip_prob;
  const bool fw = uni(rng) < flip_prob;
  const bool fd = uni(rng) < flip_prob;
  apply_flip(vc, fh, fw, fd);
}

double auc_midrank(const std::vector<double>& scores, const std::vector<int>& positive) {
  const std::size_t n = scores.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  std::vector<double> rank(n, 0.0);
  std::size_t i = 0;
  while (i < n) {
    std::size_t j = i;
    while (j + 1 < n && scores[order[j + 1]] == scores[order[i]]) ++j;
    const double mid = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
    for (std::size_t k = i; k <= j; ++k) rank[order[k]] = mid;
    i = j + 1;
  }
  double rank_sum = 0.0;
  std::int64_t n_pos = 0;
  for (std::size_t k = 0; k < n; ++k) {
    if (positive[k]) {
      rank_sum += rank[k];
      ++n_pos;
    }
  }
  const std::int64_t n_neg = static_cast<std::int64_t>(n) - n_pos;
  if (n_pos == 0 || n_neg == 0) {
    throw std::invalid_argument("auc_midrank: needs both positives and negatives");
  }
  const double np = static_cast<double>(n_pos);
  return (rank_sum - np * (np + 1.0) / 2.0) / (np * static_cast<double>(n_neg));
}

MetricsReport compute_metrics(const std::vector<std::vector<double>>& y_final,
                              const std::vector<int>& labels, int n_classes) {
  if (y_final.empty()) throw std::invalid_argument("compute_metrics: empty case list");
  if (y_final.size() != labels.size()) {
    throw std::invalid_argument("compute_metrics: scores and labels disagree");
  }
  const int k = n_classes;
  const std::int64_t n = static_cast<std::int64_t>(y_final.size());

  MetricsReport report;
  report.per_class.resize(k);
  report.confusion.assign(static_cast<std::size_t>(k) * k, 0);
  for (std::int64_t i = 0; i < n; ++i) {
    const int truth = labels[i];
    if (truth < 0 || truth >= k) throw std::invalid_argument("compute_metrics: label out of range");
    report.confusion[truth * k + predict_class(y_final[i])] += 1;
    report.per_class[truth].support += 1;
  }

  double auc_weight = 0.0, prf_weight = 0.0;
  for (int c = 0; c < k; ++c) {
    auto& cm = report.per_class[c];
    const std::int64_t tp = report.confusion[c * k + c];
    std::int64_t pred_c = 0, truth_c = 0;
    for (int r = 0; r < k; ++r) {
      pred_c += report.confusion[r * k + c];
      truth_c += report.confusion[c * k + r];
    }
    cm.precision = pred_c > 0 ? static_cast<double>(tp) / static_cast<double>(pred_c) : 0.0;
    cm.recall = truth_c > 0 ? static_cast<double>(tp) / static_cast<double>(truth_c) : 0.0;
    cm.f1 = (cm.precision + cm.recall) > 0.0
                ? 2.0 * cm.precision * cm.recall / (cm.precision + cm.recall)
                : 0.0;

    if (cm.support > 0 && cm.support < n) {
      std::vector<double> scores(static_cast<std::size_t>(n));
      std::vector<int> pos(static_cast<std::size_t>(n));
      for (std::int64_t i = 0; i < n; ++i) {
        scores[i] = y_final[i][c];
        pos[i] = labels[i] == c ? 1 : 0;
      }
      cm.has_auc = true;
      cm.auc = auc_midrank(scores, pos);
      report.weighted_auc += cm.auc * cm.support;
      auc_weight += cm.support;
    } else {
      report.missing_auc_classes.push_back(c);
    }
    report.weighted_precision += cm.precision * cm.support;
    report.weighted_recall += cm.recall * cm.support;
    report.weighted_f1 += cm.f1 * cm.support;
    prf_weight += cm.support;
  }
  if (auc_weight > 0) report.weighted_auc /= auc_weight;
  if (prf_weight > 0) {
    report.weighted_precision /= prf_weight;
    report.weighted_recall /= prf_weight;
    report.weighted_f1 /= prf_weight;
  }
  return report;
}

MetricsReport evaluate(const ModelParams& params, const std::vector<PhantomCase>& cases,
                       const ModelConfig& cfg) {
  if (cases.empty()) throw std::invalid_argument("evaluate: empty case list");
  const std::int64_t n = static_cast<std::int64_t>(cases.size());

  std::vector<std::vector<double>> y_final(static_cast<std::size_t>(n));
  std::vector<int> labels(static_cast<std::size_t>(n), 0);

  int threads = 1;
#ifdef _OPENMP
  threads = omp_get_max_threads();
  if (const char* cap = std::getenv("PHANTOM_THREADS")) {
    const int limit = std::atoi(cap);
    if (limit >= 1) threads = std::min(threads, limit);
  }
#endif
  // Parameters are read-shared; each case builds its own graph. Results land
  // in per-case slots so the reduction order never matters.
#pragma omp parallel for schedule(dynamic) num_threads(threads)
  for (std::int64_t i = 0; i < n; ++i) {
    auto fr = forward(cases[i].data, params, cfg);
    y_final[i] = fr.prediction.y_final;
  }
  for (std::int64_t i = 0; i < n; ++i) labels[i] = cases[i].label;
  return compute_metrics(y_final, labels, static_cast<int>(cfg.n_classes));
}

TrainResult train(const std::vector<PhantomCase>& train_cases,
                  const std::vector<PhantomCase>& val_cases,
                  const ModelConfig& model_cfg, const TrainConfig& train_cfg) {
  model_cfg.validate();
  train_cfg.validate();
  if (train_cases.empty()) throw std::invalid_argument("train: empty train split");

  TrainResult result;
  result.params = init_params(model_cfg, mix_seed(train_cfg.seed, kInitTag));
  const NamedTensors named = result.params.named();
  AdamState state = AdamState::init(named);

  std::vector<std::vector<double>> best_data;
  const bool track_val = train_cfg.select_best_val && !val_cases.empty();

  std::vector<std::size_t> order(train_cases.size());
  std::iota(order.begin(), order.end(), 0);

  for (int epoch = 0; epoch < train_cfg.epochs; ++epoch) {
    const double lr = lr_at(epoch, train_cfg);
    result.lr_trace.push_back(lr);

    std::mt19937_64 shuffle_rng(mix_seed(train_cfg.seed, kShuffleTag, epoch));
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    std::mt19937_64 aug_rng(mix_seed(train_cfg.seed, kAugmentTag, epoch));

    double loss_sum = 0.0;
    for (std::size_t oi : order) {
      VolumeCase vc = train_cases[oi].data;  // augmentation works on a copy
      augment_flip(vc, aug_rng, train_cfg.flip_prob);
      auto fr = forward(vc, result.params, model_cfg);
      auto loss = model_loss(fr, train_cases[oi].label, model_cfg);
      loss_sum += loss->data[0];
      backward(loss);
      adam_step(named, state, lr, train_cfg);
    }
    result.epoch_loss.push_back(loss_sum / static_cast<double>(train_cases.size()));

    if (track_val) {
      const auto metrics = evaluate(result.params, val_cases, model_cfg);
      if (result.best_val_epoch < 0 || metrics.weighted_auc > result.best_val_auc) {
        result.best_val_auc = metrics.weighted_auc;
        result.best_val_epoch = epoch;
        best_data.clear();
        for (const auto& [name, t] : result.params.named()) best_data.push_back(t->data);
      }
    }
  }

  if (track_val && result.best_val_epoch >= 0) {
    result.used_best_val = true;
    auto dst = result.params.named();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i].second->data = best_data[i];
  }
  return result;
}

}  // namespace xphase

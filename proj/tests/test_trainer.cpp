#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include <doctest.h>

#include "xphase/model.hpp"
#include "xphase/phantom.hpp"
#include "xphase/rng.hpp"
#include "xphase/tensor.hpp"
#include "xphase/trainer.hpp"

using namespace xphase;

namespace {

ModelConfig desk_config() {
  ModelConfig cfg;
  cfg.base_channels = 2;
  cfg.height = 8;
  cfg.width = 8;
  cfg.depth = 4;
  return cfg;
}

std::vector<PhantomCase> desk_cases(const ModelConfig& cfg, int per_class, std::uint64_t seed) {
  GeneratorConfig gen;
  gen.height = cfg.height;
  gen.width = cfg.width;
  gen.depth = cfg.depth;
  std::vector<PhantomCase> cases;
  for (int cls = 0; cls < kPhantomClasses; ++cls) {
    for (int i = 0; i < per_class; ++i) {
      cases.push_back(generate_case(cls, gen, mix_seed(seed, cls * 100 + i)));
    }
  }
  return cases;
}

}  // namespace

TEST_CASE("adam leaves parameters alone under zero gradients") {
  auto theta = tensor({3}, {1.0, -2.0, 0.5}, true);
  theta->grad.assign(3, 0.0);
  NamedTensors named = {{"theta", theta}};
  auto state = AdamState::init(named);
  TrainConfig cfg;
  adam_step(named, state, 0.1, cfg);
  CHECK(theta->data == std::vector<double>{1.0, -2.0, 0.5});
  CHECK(state.t == 1);

  // an empty grad buffer counts as zero too
  auto untouched = tensor({2}, {4.0, 5.0}, true);
  NamedTensors named2 = {{"u", untouched}};
  auto state2 = AdamState::init(named2);
  adam_step(named2, state2, 0.1, cfg);
  CHECK(untouched->data == std::vector<double>{4.0, 5.0});
}

TEST_CASE("first adam step moves by about lr") {
  auto theta = tensor({1}, {1.0}, true);
  theta->grad = {0.37};
  NamedTensors named = {{"theta", theta}};
  auto state = AdamState::init(named);
  TrainConfig cfg;
  adam_step(named, state, 0.1, cfg);
  CHECK(theta->data[0] == doctest::Approx(1.0 - 0.1).epsilon(1e-6));
}

TEST_CASE("adam on a quadratic matches a scripted oracle") {
  const double lr = 0.1;
  TrainConfig cfg;
  auto theta = tensor({1}, {1.0}, true);
  NamedTensors named = {{"theta", theta}};
  auto state = AdamState::init(named);

  // independently scripted update
  double ref = 1.0, m = 0.0, v = 0.0;
  for (int t = 1; t <= 100; ++t) {
    theta->grad = {2.0 * theta->data[0]};
    adam_step(named, state, lr, cfg);

    const double g = 2.0 * ref;
    m = cfg.beta1 * m + (1.0 - cfg.beta1) * g;
    v = cfg.beta2 * v + (1.0 - cfg.beta2) * g * g;
    const double mhat = m / (1.0 - std::pow(cfg.beta1, t));
    const double vhat = v / (1.0 - std::pow(cfg.beta2, t));
    ref -= lr * mhat / (std::sqrt(vhat) + cfg.eps);

    CHECK(std::abs(theta->data[0] - ref) <= 1e-12);
  }
  // momentum overshoots zero and oscillates, so |theta| is not monotone
  // step to step; the trajectory still converges toward 0
  CHECK(std::abs(theta->data[0] - ref) <= 1e-12);
  CHECK(std::abs(theta->data[0]) < 0.1);
}

TEST_CASE("adam aborts on NaN gradients naming the parameter") {
  auto theta = tensor({2}, {1.0, 2.0}, true);
  theta->grad = {0.0, std::nan("")};
  NamedTensors named = {{"ffn.weight", theta}};
  auto state = AdamState::init(named);
  TrainConfig cfg;
  try {
    adam_step(named, state, 0.1, cfg);
    FAIL("expected abort");
  } catch (const std::runtime_error& e) {
    CHECK(std::string(e.what()).find("ffn.weight") != std::string::npos);
  }
}

TEST_CASE("lr schedule steps by a factor of 10 every 50 epochs") {
  TrainConfig cfg;
  CHECK(lr_at(0, cfg) == doctest::Approx(1e-4));
  CHECK(lr_at(49, cfg) == doctest::Approx(1e-4));
  CHECK(lr_at(50, cfg) == doctest::Approx(1e-5));
  CHECK(lr_at(150, cfg) == doctest::Approx(1e-7));
  double prev = lr_at(0, cfg);
  for (int e = 1; e < 200; ++e) {
    const double cur = lr_at(e, cfg);
    CHECK(cur <= prev);
    if (e % 50 != 0) CHECK(cur == doctest::Approx(prev));
    prev = cur;
  }
}

TEST_CASE("flips preserve co-registration and are involutions") {
  GeneratorConfig gen;
  auto pc = generate_case(2, gen, 404);
  auto vc = pc.data;

  VolumeCase same = vc;
  apply_flip(same, false, false, false);
  CHECK(same.mask == vc.mask);
  CHECK(same.volumes[1] == vc.volumes[1]);

  VolumeCase twice = vc;
  apply_flip(twice, true, true, true);
  CHECK(twice.mask != vc.mask);
  apply_flip(twice, true, true, true);
  CHECK(twice.mask == vc.mask);
  for (int p = 0; p < 4; ++p) CHECK(twice.volumes[p] == vc.volumes[p]);

  // a flip permutes voxels, so the masked mean is unchanged
  VolumeCase flipped = vc;
  apply_flip(flipped, true, false, true);
  auto masked_mean = [](const VolumeCase& c, int p) {
    double s = 0.0, n = 0.0;
    for (std::size_t i = 0; i < c.mask.size(); ++i) {
      if (c.mask[i] != 0.0) {
        s += c.volumes[p][i];
        n += 1.0;
      }
    }
    return s / n;
  };
  auto count = [](const VolumeCase& c) {
    double n = 0.0;
    for (double v : c.mask) n += v;
    return n;
  };
  CHECK(count(flipped) == count(vc));
  for (int p = 0; p < 4; ++p) {
    CHECK(masked_mean(flipped, p) == doctest::Approx(masked_mean(vc, p)).epsilon(1e-12));
  }
}

TEST_CASE("metrics against brute-force oracles") {
  std::mt19937_64 rng(606);
  const int n = 30, k = 5;
  std::uniform_real_distribution<double> uni(0.0, 1.0);
  std::uniform_int_distribution<int> lab(0, k - 1);
  std::vector<std::vector<double>> scores(n, std::vector<double>(k));
  std::vector<int> labels(n);
  for (int i = 0; i < n; ++i) {
    labels[i] = lab(rng);
    double z = 0.0;
    for (int c = 0; c < k; ++c) {
      scores[i][c] = uni(rng);
      z += scores[i][c];
    }
    for (int c = 0; c < k; ++c) scores[i][c] /= z;
  }
  // force some ties in one class column
  scores[3][0] = scores[11][0];

  const auto report = compute_metrics(scores, labels, k);

  for (int c = 0; c < k; ++c) {
    // all-pairs Mann-Whitney oracle
    double wins = 0.0;
    std::int64_t n_pos = 0, n_neg = 0;
    for (int i = 0; i < n; ++i) {
      if (labels[i] != c) continue;
      ++n_pos;
      for (int j = 0; j < n; ++j) {
        if (labels[j] == c) continue;
        if (scores[i][c] > scores[j][c]) wins += 1.0;
        if (scores[i][c] == scores[j][c]) wins += 0.5;
      }
    }
    for (int j = 0; j < n; ++j) n_neg += labels[j] != c ? 1 : 0;
    if (n_pos == 0 || n_neg == 0) {
      CHECK_FALSE(report.per_class[c].has_auc);
      continue;
    }
    REQUIRE(report.per_class[c].has_auc);
    CHECK(report.per_class[c].auc == wins / (static_cast<double>(n_pos) * n_neg));  // exact

    // hand-counted confusion oracle
    std::int64_t tp = 0, fp = 0, fn = 0;
    for (int i = 0; i < n; ++i) {
      int argmax = 0;
      for (int j = 1; j < k; ++j)
        if (scores[i][j] > scores[i][argmax]) argmax = j;
      const bool truth = labels[i] == c, pred = argmax == c;
      tp += truth && pred;
      fp += !truth && pred;
      fn += truth && !pred;
    }
    const double prec = tp + fp > 0 ? static_cast<double>(tp) / (tp + fp) : 0.0;
    const double rec = tp + fn > 0 ? static_cast<double>(tp) / (tp + fn) : 0.0;
    CHECK(report.per_class[c].precision == prec);  // exact
    CHECK(report.per_class[c].recall == rec);
    const double f1 = prec + rec > 0 ? 2 * prec * rec / (prec + rec) : 0.0;
    CHECK(report.per_class[c].f1 == doctest::Approx(f1).epsilon(1e-15));
  }
}

TEST_CASE("metric endpoints and symmetry") {
  // perfectly separated scores
  std::vector<std::vector<double>> perfect;
  std::vector<int> labels;
  for (int c = 0; c < 3; ++c) {
    for (int i = 0; i < 4; ++i) {
      std::vector<double> row(3, 0.1);
      row[c] = 0.8;
      perfect.push_back(row);
      labels.push_back(c);
    }
  }
  auto report = compute_metrics(perfect, labels, 3);
  CHECK(report.weighted_auc == 1.0);
  CHECK(report.weighted_f1 == 1.0);

  // constant scores: every pair ties, midranks give 0.5
  std::vector<std::vector<double>> flat(12, std::vector<double>(3, 1.0 / 3));
  auto flat_report = compute_metrics(flat, labels, 3);
  for (const auto& c : flat_report.per_class) {
    REQUIRE(c.has_auc);
    CHECK(c.auc == 0.5);
  }

  // reversal symmetry without ties
  std::mt19937_64 rng(707);
  std::uniform_real_distribution<double> uni(0.0, 1.0);
  std::vector<double> s(20);
  std::vector<int> pos(20);
  for (int i = 0; i < 20; ++i) {
    s[i] = uni(rng);
    pos[i] = i % 3 == 0;
  }
  std::vector<double> neg_s(20);
  for (int i = 0; i < 20; ++i) neg_s[i] = -s[i];
  CHECK(auc_midrank(s, pos) == doctest::Approx(1.0 - auc_midrank(neg_s, pos)).epsilon(1e-12));

  // reordering invariance
  std::vector<std::vector<double>> shuffled = perfect;
  std::vector<int> shuffled_labels = labels;
  std::mt19937_64 perm_rng(808);
  std::vector<std::size_t> perm(perfect.size());
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), perm_rng);
  for (std::size_t i = 0; i < perm.size(); ++i) {
    shuffled[i] = perfect[perm[i]];
    shuffled_labels[i] = labels[perm[i]];
  }
  auto reordered = compute_metrics(shuffled, shuffled_labels, 3);
  CHECK(reordered.weighted_auc == report.weighted_auc);
  CHECK(reordered.weighted_f1 == report.weighted_f1);

  CHECK_THROWS_AS(compute_metrics({}, {}, 3), std::invalid_argument);
}

TEST_CASE("missing classes are excluded from the AUC average") {
  std::vector<std::vector<double>> scores(6, std::vector<double>(3, 1.0 / 3));
  std::vector<int> labels = {0, 0, 0, 1, 1, 1};  // class 2 absent
  auto report = compute_metrics(scores, labels, 3);
  REQUIRE(report.missing_auc_classes.size() == 1);
  CHECK(report.missing_auc_classes[0] == 2);
  CHECK_FALSE(report.per_class[2].has_auc);
}

TEST_CASE("training is reproducible and honors the schedule") {
  const auto cfg = desk_config();
  const auto cases = desk_cases(cfg, 1, 909);
  TrainConfig tc;
  tc.epochs = 2;
  tc.seed = 31337;

  auto a = train(cases, {}, cfg, tc);
  auto b = train(cases, {}, cfg, tc);
  auto an = a.params.named(), bn = b.params.named();
  for (std::size_t i = 0; i < an.size(); ++i) {
    CHECK(an[i].second->data == bn[i].second->data);  // bit-identical
  }
  REQUIRE(a.lr_trace.size() == 2);
  for (int e = 0; e < 2; ++e) CHECK(a.lr_trace[e] == lr_at(e, tc));
  CHECK(a.epoch_loss.size() == 2);
  CHECK(a.epoch_loss == b.epoch_loss);

  // training actually reduces the loss on this tiny set
  TrainConfig longer = tc;
  longer.epochs = 8;
  auto c = train(cases, {}, cfg, longer);
  CHECK(c.epoch_loss.back() < c.epoch_loss.front());
}

TEST_CASE("evaluate runs the model over a labeled set") {
  const auto cfg = desk_config();
  const auto cases = desk_cases(cfg, 2, 1010);
  auto params = init_params(cfg, 5);
  const auto report = evaluate(params, cases, cfg);
  CHECK(report.per_class.size() == 5);
  std::int64_t total = 0;
  for (auto v : report.confusion) total += v;
  CHECK(total == static_cast<std::int64_t>(cases.size()));
  CHECK(report.weighted_auc >= 0.0);
  CHECK(report.weighted_auc <= 1.0);
  CHECK_THROWS_AS(evaluate(params, {}, cfg), std::invalid_argument);
}

#include "xphase/gradsuite.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "xphase/model.hpp"
#include "xphase/phantom.hpp"
#include "xphase/rng.hpp"

namespace xphase {

namespace {

constexpr double kH = 1e-4;
constexpr double kRelTol = 1e-4;
constexpr double kAbsTol = 1e-6;
constexpr int kInstances = 5;

TensorPtr random_tensor(std::mt19937_64& rng, std::vector<std::int64_t> shape,
                        double scale = 1.0) {
  std::normal_distribution<double> unit(0.0, 1.0);
  std::vector<double> data(static_cast<std::size_t>(shape_numel(shape)));
  for (auto& v : data) v = unit(rng) * scale;
  return tensor(std::move(shape), std::move(data), false);
}

// Values bounded away from the leaky-ReLU kink so central differences stay
// on one side.
TensorPtr random_smooth_tensor(std::mt19937_64& rng, std::vector<std::int64_t> shape) {
  std::uniform_real_distribution<double> mag(0.2, 1.2);
  std::uniform_int_distribution<int> sign(0, 1);
  std::vector<double> data(static_cast<std::size_t>(shape_numel(shape)));
  for (auto& v : data) v = (sign(rng) ? 1.0 : -1.0) * mag(rng);
  return tensor(std::move(shape), std::move(data), false);
}

// Generic scalar readout: sum of op output weighted by fixed random
// coefficients, so no gradient component cancels structurally.
TensorPtr weighted_sum(const TensorPtr& out, const TensorPtr& weights) {
  return sum(mul(out, weights));
}

void merge(GradCheckReport& agg, const GradCheckReport& r) {
  agg.max_abs_err = std::max(agg.max_abs_err, r.max_abs_err);
  agg.max_rel_err = std::max(agg.max_rel_err, r.max_rel_err);
  agg.passed = agg.passed && r.passed;
}

GradCheckReport check_many(const std::string& name,
                           const std::function<GradCheckReport(std::mt19937_64&)>& one) {
  GradCheckReport agg;
  agg.op_name = name;
  agg.passed = true;
  for (int i = 0; i < kInstances; ++i) {
    std::mt19937_64 rng(mix_seed(0xD1CE, static_cast<std::uint64_t>(i)));
    merge(agg, one(rng));
  }
  return agg;
}

GradCheckReport conv3d_check(const std::string& name, int stride) {
  return check_many(name, [stride](std::mt19937_64& rng) {
    const std::int64_t cin = 2, cout = 3, h = 4, w = 4, d = 2;
    auto input = random_tensor(rng, {cin, h, w, d});
    auto kernel = random_tensor(rng, {cout, cin, 3, 3, 3}, 0.5);
    auto bias = random_tensor(rng, {cout}, 0.5);
    const std::int64_t oh = stride == 1 ? h : h / 2;
    auto wts = random_tensor(rng, {cout, oh, stride == 1 ? w : w / 2, stride == 1 ? d : d / 2});

    GradCheckReport agg;
    agg.passed = true;
    merge(agg, grad_check(
                   "conv3d/input",
                   [&](const TensorPtr& x) { return weighted_sum(conv3d(x, kernel, bias, stride), wts); },
                   input, kH, kRelTol, kAbsTol));
    merge(agg, grad_check(
                   "conv3d/kernel",
                   [&](const TensorPtr& x) { return weighted_sum(conv3d(input, x, bias, stride), wts); },
                   kernel, kH, kRelTol, kAbsTol));
    merge(agg, grad_check(
                   "conv3d/bias",
                   [&](const TensorPtr& x) { return weighted_sum(conv3d(input, kernel, x, stride), wts); },
                   bias, kH, kRelTol, kAbsTol));
    return agg;
  });
}

GradCheckReport elementwise_binary_check(const std::string& name,
                                         TensorPtr (*op)(const TensorPtr&, const TensorPtr&)) {
  return check_many(name, [op](std::mt19937_64& rng) {
    auto a = random_tensor(rng, {3, 4});
    auto b = random_tensor(rng, {3, 4});
    auto wts = random_tensor(rng, {3, 4});
    GradCheckReport agg;
    agg.passed = true;
    merge(agg, grad_check(
                   "a", [&](const TensorPtr& x) { return weighted_sum(op(x, b), wts); }, a, kH,
                   kRelTol, kAbsTol));
    merge(agg, grad_check(
                   "b", [&](const TensorPtr& x) { return weighted_sum(op(a, x), wts); }, b, kH,
                   kRelTol, kAbsTol));
    return agg;
  });
}

GradCheckReport end_to_end_rows(std::vector<GradCheckReport>& rows) {
  ModelConfig cfg;
  cfg.n_phases = 4;
  cfg.base_channels = 4;
  cfg.n_classes = 5;
  cfg.height = 8;
  cfg.width = 8;
  cfg.depth = 4;

  GeneratorConfig gen;
  gen.height = cfg.height;
  gen.width = cfg.width;
  gen.depth = cfg.depth;
  const PhantomCase pc = generate_case(2, gen, 515151);

  auto params = init_params(cfg, 99);
  auto fr = forward(pc.data, params, cfg);
  auto loss = model_loss(fr, pc.label, cfg);
  backward(loss);

  auto loss_value = [&]() {
    auto f = forward(pc.data, params, cfg);
    return model_loss(f, pc.label, cfg)->data[0];
  };

  GradCheckReport overall;
  overall.op_name = "model_loss";
  overall.passed = true;
  std::mt19937_64 pick(4242);
  for (const auto& [name, t] : params.named()) {
    if (!t->requires_grad) continue;
    GradCheckReport row;
    row.op_name = "model_loss/" + name;
    row.passed = true;
    std::vector<std::size_t> idx(t->data.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::shuffle(idx.begin(), idx.end(), pick);
    const std::size_t samples = std::min<std::size_t>(idx.size(), 8);
    for (std::size_t s = 0; s < samples; ++s) {
      const std::size_t i = idx[s];
      const double analytic = t->grad.size() == t->data.size() ? t->grad[i] : 0.0;
      auto central = [&](double h) {
        const double orig = t->data[i];
        t->data[i] = orig + h;
        const double fp = loss_value();
        t->data[i] = orig - h;
        const double fm = loss_value();
        t->data[i] = orig;
        const double numeric = (fp - fm) / (2.0 * h);
        const double abs_err = std::abs(analytic - numeric);
        const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-12});
        return std::pair<double, double>(abs_err, abs_err / denom);
      };
      auto [abs_err, rel_err] = central(kH);
      if (rel_err >= kRelTol && abs_err >= kAbsTol) {
        // a perturbation that crosses a leaky-ReLU kink inflates the
        // difference quotient; at h/16 that error collapses while a wrong
        // gradient keeps failing
        auto [abs2, rel2] = central(kH / 16.0);
        if (rel2 < rel_err) {
          abs_err = abs2;
          rel_err = rel2;
        }
      }
      row.max_abs_err = std::max(row.max_abs_err, abs_err);
      row.max_rel_err = std::max(row.max_rel_err, rel_err);
    }
    row.passed = (row.max_rel_err < kRelTol) || (row.max_abs_err < kAbsTol);
    merge(overall, row);
    rows.push_back(row);
  }
  return overall;
}

}  // namespace

std::vector<GradCheckReport> run_gradient_suite() {
  std::vector<GradCheckReport> rows;

  rows.push_back(conv3d_check("conv3d_stride1", 1));
  rows.push_back(conv3d_check("conv3d_stride2", 2));

  rows.push_back(check_many("instance_norm", [](std::mt19937_64& rng) {
    auto input = random_tensor(rng, {3, 3, 2, 2});
    auto gamma = random_smooth_tensor(rng, {3});
    auto beta = random_tensor(rng, {3});
    auto wts = random_tensor(rng, {3, 3, 2, 2});
    GradCheckReport agg;
    agg.passed = true;
    merge(agg, grad_check(
                   "input",
                   [&](const TensorPtr& x) { return weighted_sum(instance_norm(x, gamma, beta, 1e-5), wts); },
                   input, kH, kRelTol, kAbsTol));
    merge(agg, grad_check(
                   "gamma",
                   [&](const TensorPtr& x) { return weighted_sum(instance_norm(input, x, beta, 1e-5), wts); },
                   gamma, kH, kRelTol, kAbsTol));
    merge(agg, grad_check(
                   "beta",
                   [&](const TensorPtr& x) { return weighted_sum(instance_norm(input, gamma, x, 1e-5), wts); },
                   beta, kH, kRelTol, kAbsTol));
    return agg;
  }));

  rows.push_back(check_many("leaky_relu", [](std::mt19937_64& rng) {
    auto x = random_smooth_tensor(rng, {4, 5});
    auto wts = random_tensor(rng, {4, 5});
    return grad_check(
        "leaky_relu", [&](const TensorPtr& t) { return weighted_sum(leaky_relu(t, 0.01), wts); },
        x, kH, kRelTol, kAbsTol);
  }));

  rows.push_back(check_many("matmul", [](std::mt19937_64& rng) {
    auto a = random_tensor(rng, {3, 4});
    auto b = random_tensor(rng, {4, 2});
    auto wts = random_tensor(rng, {3, 2});
    GradCheckReport agg;
    agg.passed = true;
    merge(agg, grad_check(
                   "a", [&](const TensorPtr& x) { return weighted_sum(matmul(x, b), wts); }, a,
                   kH, kRelTol, kAbsTol));
    merge(agg, grad_check(
                   "b", [&](const TensorPtr& x) { return weighted_sum(matmul(a, x), wts); }, b,
                   kH, kRelTol, kAbsTol));
    return agg;
  }));

  rows.push_back(check_many("softmax_rows", [](std::mt19937_64& rng) {
    auto x = random_tensor(rng, {3, 4});
    auto wts = random_tensor(rng, {3, 4});
    return grad_check(
        "softmax_rows", [&](const TensorPtr& t) { return weighted_sum(softmax_rows(t), wts); },
        x, kH, kRelTol, kAbsTol);
  }));

  rows.push_back(check_many("cross_entropy", [](std::mt19937_64& rng) {
    auto logits = random_tensor(rng, {5});
    std::uniform_int_distribution<std::int64_t> lab(0, 4);
    const std::int64_t label = lab(rng);
    return grad_check(
        "cross_entropy", [&](const TensorPtr& t) { return cross_entropy(t, label); }, logits,
        kH, kRelTol, kAbsTol);
  }));

  rows.push_back(check_many("masked_average_pool", [](std::mt19937_64& rng) {
    auto feature = random_tensor(rng, {4, 4, 2, 3});
    std::uniform_real_distribution<double> uni(0.0, 1.0);
    std::vector<double> mask(4 * 4 * 2, 0.0);
    for (auto& v : mask) v = uni(rng) < 0.4 ? 1.0 : 0.0;
    mask[5] = 1.0;  // never empty
    auto mask_t = tensor({4, 4, 2}, mask, false);
    auto wts = random_tensor(rng, {3});
    return grad_check(
        "masked_average_pool",
        [&](const TensorPtr& t) { return weighted_sum(masked_average_pool(t, mask_t), wts); },
        feature, kH, kRelTol, kAbsTol);
  }));

  rows.push_back(check_many("cross_phase_attention", [](std::mt19937_64& rng) {
    auto q = random_tensor(rng, {4, 3});
    auto k = random_tensor(rng, {4, 3});
    auto v = random_tensor(rng, {4, 3});
    auto wts = random_tensor(rng, {4, 3});
    GradCheckReport agg;
    agg.passed = true;
    auto wrap = [&](const char* tag, const TensorPtr& point, auto make) {
      merge(agg, grad_check(tag, make, point, kH, kRelTol, kAbsTol));
    };
    wrap("q", q, [&](const TensorPtr& x) {
      return weighted_sum(cross_phase_attention(x, k, v, 0.1).f_out, wts);
    });
    wrap("k", k, [&](const TensorPtr& x) {
      return weighted_sum(cross_phase_attention(q, x, v, 0.1).f_out, wts);
    });
    wrap("v", v, [&](const TensorPtr& x) {
      return weighted_sum(cross_phase_attention(q, k, x, 0.1).f_out, wts);
    });
    return agg;
  }));

  rows.push_back(elementwise_binary_check("add", &add));
  rows.push_back(elementwise_binary_check("sub", &sub));
  rows.push_back(elementwise_binary_check("mul", &mul));

  rows.push_back(check_many("scalar_mul", [](std::mt19937_64& rng) {
    auto x = random_tensor(rng, {3, 4});
    auto wts = random_tensor(rng, {3, 4});
    return grad_check(
        "scalar_mul", [&](const TensorPtr& t) { return weighted_sum(scalar_mul(t, -1.7), wts); },
        x, kH, kRelTol, kAbsTol);
  }));

  rows.push_back(check_many("sum", [](std::mt19937_64& rng) {
    auto x = random_tensor(rng, {3, 4});
    return grad_check(
        "sum", [&](const TensorPtr& t) { return sum(t); }, x, kH, kRelTol, kAbsTol);
  }));

  rows.push_back(check_many("mean", [](std::mt19937_64& rng) {
    auto x = random_tensor(rng, {3, 4});
    return grad_check(
        "mean", [&](const TensorPtr& t) { return mean(t); }, x, kH, kRelTol, kAbsTol);
  }));

  rows.push_back(check_many("reshape", [](std::mt19937_64& rng) {
    auto x = random_tensor(rng, {3, 4});
    auto wts = random_tensor(rng, {12});
    return grad_check(
        "reshape", [&](const TensorPtr& t) { return weighted_sum(reshape(t, {12}), wts); }, x,
        kH, kRelTol, kAbsTol);
  }));

  rows.push_back(check_many("concat_rows", [](std::mt19937_64& rng) {
    auto a = random_tensor(rng, {2, 3});
    auto b = random_tensor(rng, {1, 3});
    auto wts = random_tensor(rng, {3, 3});
    GradCheckReport agg;
    agg.passed = true;
    merge(agg, grad_check(
                   "a",
                   [&](const TensorPtr& x) { return weighted_sum(concat_rows({x, b}), wts); }, a,
                   kH, kRelTol, kAbsTol));
    merge(agg, grad_check(
                   "b",
                   [&](const TensorPtr& x) { return weighted_sum(concat_rows({a, x}), wts); }, b,
                   kH, kRelTol, kAbsTol));
    return agg;
  }));

  rows.push_back(check_many("select_row", [](std::mt19937_64& rng) {
    auto m = random_tensor(rng, {4, 3});
    auto wts = random_tensor(rng, {3});
    return grad_check(
        "select_row", [&](const TensorPtr& t) { return weighted_sum(select_row(t, 2), wts); }, m,
        kH, kRelTol, kAbsTol);
  }));

  rows.push_back(check_many("transpose2d", [](std::mt19937_64& rng) {
    auto x = random_tensor(rng, {3, 4});
    auto wts = random_tensor(rng, {4, 3});
    return grad_check(
        "transpose2d", [&](const TensorPtr& t) { return weighted_sum(transpose2d(t), wts); }, x,
        kH, kRelTol, kAbsTol);
  }));

  rows.push_back(check_many("fully_connected", [](std::mt19937_64& rng) {
    auto x = random_tensor(rng, {4});
    auto w = random_tensor(rng, {3, 4});
    auto b = random_tensor(rng, {3});
    auto wts = random_tensor(rng, {3});
    GradCheckReport agg;
    agg.passed = true;
    merge(agg, grad_check(
                   "x",
                   [&](const TensorPtr& t) { return weighted_sum(fully_connected(t, w, b), wts); },
                   x, kH, kRelTol, kAbsTol));
    merge(agg, grad_check(
                   "w",
                   [&](const TensorPtr& t) { return weighted_sum(fully_connected(x, t, b), wts); },
                   w, kH, kRelTol, kAbsTol));
    merge(agg, grad_check(
                   "b",
                   [&](const TensorPtr& t) { return weighted_sum(fully_connected(x, w, t), wts); },
                   b, kH, kRelTol, kAbsTol));
    return agg;
  }));

  end_to_end_rows(rows);
  return rows;
}

}  // namespace xphase

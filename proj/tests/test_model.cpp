#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <random>

#include <doctest.h>

#include "xphase/errors.hpp"
#include "xphase/model.hpp"
#include "xphase/phantom.hpp"
#include "xphase/reference.hpp"
#include "xphase/tensor.hpp"

using namespace xphase;
namespace fs = std::filesystem;

namespace {

ModelConfig desk_config() {
  ModelConfig cfg;
  cfg.base_channels = 4;
  cfg.height = 8;
  cfg.width = 8;
  cfg.depth = 4;
  return cfg;
}

TensorPtr random_tensor(std::mt19937_64& rng, std::vector<std::int64_t> shape) {
  std::normal_distribution<double> unit(0.0, 1.0);
  std::vector<double> data(static_cast<std::size_t>(shape_numel(shape)));
  for (auto& v : data) v = unit(rng);
  return tensor(std::move(shape), std::move(data), false);
}

VolumeCase random_case(std::mt19937_64& rng, const ModelConfig& cfg) {
  GeneratorConfig gen;
  gen.height = cfg.height;
  gen.width = cfg.width;
  gen.depth = cfg.depth;
  std::uniform_int_distribution<int> lab(0, 4);
  return generate_case(lab(rng), gen, rng()).data;
}

double max_abs_diff(const std::vector<double>& a, const std::vector<double>& b) {
  REQUIRE(a.size() == b.size());
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

fs::path temp_dir(const char* tag) {
  auto dir = fs::temp_directory_path() / (std::string("xphase_model_") + tag);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

}  // namespace

TEST_CASE("masked_average_pool basics") {
  // all-ones mask is the plain per-channel spatial mean
  std::mt19937_64 rng(31);
  auto feature = random_tensor(rng, {2, 2, 2, 3});
  auto ones_mask = full({2, 2, 2}, 1.0);
  auto pooled = masked_average_pool(feature, ones_mask);
  for (int c = 0; c < 3; ++c) {
    double mean = 0.0;
    for (int x = 0; x < 8; ++x) mean += feature->data[x * 3 + c];
    mean /= 8.0;
    CHECK(pooled->data[c] == doctest::Approx(mean).epsilon(1e-12));
  }

  // single-voxel selection
  auto two = tensor({2, 1, 1, 1}, {3.0, 5.0});
  auto pick = tensor({2, 1, 1}, {1.0, 0.0});
  CHECK(masked_average_pool(two, pick)->data[0] == 3.0);

  CHECK_THROWS_AS(masked_average_pool(feature, zeros({2, 2, 2})), EmptyMaskError);
  CHECK_THROWS_AS(masked_average_pool(feature, full({2, 2, 1}, 1.0)), std::invalid_argument);
}

TEST_CASE("masked_average_pool matches the voxel-loop oracle") {
  std::mt19937_64 rng(32);
  auto feature = random_tensor(rng, {4, 4, 2, 3});
  std::uniform_real_distribution<double> uni(0.0, 1.0);
  std::vector<double> mask(32, 0.0);
  for (auto& v : mask) v = uni(rng) < 0.3 ? 1.0 : 0.0;
  mask[7] = 1.0;
  auto mask_t = tensor({4, 4, 2}, mask, false);

  auto pooled = masked_average_pool(feature, mask_t);
  auto ref = reference::masked_average_pool_serial(feature->data, mask, 32, 3);
  CHECK(max_abs_diff(pooled->data, ref) <= 1e-12);
}

TEST_CASE("masked sum equals the pool numerator") {
  std::mt19937_64 rng(33);
  auto feature = random_tensor(rng, {2, 2, 2, 1});
  std::vector<double> mask = {1, 0, 1, 1, 0, 0, 1, 0};
  auto mask_t = tensor({2, 2, 2}, mask, false);
  auto weighted = mul(reshape(feature, {8}), tensor({8}, mask));
  const double numerator = sum(weighted)->data[0];
  const double pooled = masked_average_pool(feature, mask_t)->data[0];
  CHECK(pooled == doctest::Approx(numerator / 4.0).epsilon(1e-12));
}

TEST_CASE("downsample_mask block max") {
  auto all = downsample_mask(full({4, 4, 2}, 1.0));
  CHECK(all->shape == std::vector<std::int64_t>{2, 2, 1});
  for (double v : all->data) CHECK(v == 1.0);

  auto single = zeros({4, 4, 2});
  single->data[(3 * 4 + 1) * 2 + 0] = 1.0;  // voxel (3,1,0) -> block (1,0,0)
  auto coarse = downsample_mask(single);
  double total = 0.0;
  for (double v : coarse->data) total += v;
  CHECK(total == 1.0);
  CHECK(coarse->data[(1 * 2 + 0) * 1 + 0] == 1.0);

  std::mt19937_64 rng(34);
  std::uniform_real_distribution<double> uni(0.0, 1.0);
  std::vector<double> mask(4 * 6 * 2);
  for (auto& v : mask) v = uni(rng) < 0.2 ? 1.0 : 0.0;
  auto got = downsample_mask(tensor({4, 6, 2}, mask));
  auto ref = reference::downsample_mask_serial(mask, 4, 6, 2);
  CHECK(got->data == ref);

  CHECK_THROWS_AS(downsample_mask(full({3, 4, 2}, 1.0)), std::invalid_argument);
}

TEST_CASE("cross_phase_attention residual limit and uniform rows") {
  std::mt19937_64 rng(35);
  auto q = random_tensor(rng, {4, 3});
  auto k = random_tensor(rng, {4, 3});
  auto v = random_tensor(rng, {4, 3});

  auto out = cross_phase_attention(q, k, v, 0.0);
  CHECK(out.f_out->data == v->data);  // bit-exact at lambda=0

  // identical key rows make every attention row uniform
  std::vector<double> same_rows;
  for (int i = 0; i < 4; ++i) same_rows.insert(same_rows.end(), {0.3, -1.0, 0.7});
  auto k_same = tensor({4, 3}, same_rows);
  auto uniform = cross_phase_attention(q, k_same, v, 0.1);
  for (double a : uniform.attn->data) CHECK(a == doctest::Approx(0.25).epsilon(1e-12));
}

TEST_CASE("cross_phase_attention worked two-phase example") {
  auto q = tensor({2, 1}, {1.0, 0.0});
  auto k = tensor({2, 1}, {1.0, 0.0});
  auto v = tensor({2, 1}, {2.0, 4.0});
  auto out = cross_phase_attention(q, k, v, 0.1);
  CHECK(out.attn->data[0] == doctest::Approx(0.7311).epsilon(1e-4));
  CHECK(out.attn->data[1] == doctest::Approx(0.2689).epsilon(1e-4));
  CHECK(out.attn->data[2] == doctest::Approx(0.5).epsilon(1e-4));
  CHECK(out.attn->data[3] == doctest::Approx(0.5).epsilon(1e-4));
  CHECK(out.f_out->data[0] == doctest::Approx(2.2538).epsilon(1e-4));
  CHECK(out.f_out->data[1] == doctest::Approx(4.3).epsilon(1e-4));
}

TEST_CASE("embed_lesion_features shares weights across phases") {
  const auto cfg = desk_config();
  auto params = init_params(cfg, 41);
  std::mt19937_64 rng(42);
  auto vc = random_case(rng, cfg);
  auto volume = tensor({cfg.height, cfg.width, cfg.depth}, vc.volumes[0]);
  auto mask = tensor({cfg.height, cfg.width, cfg.depth}, vc.mask);

  auto e0 = embed_lesion_features(volume, mask, 0, params, cfg);
  auto e1 = embed_lesion_features(volume, mask, 1, params, cfg);
  // identical inputs pool identically before phase embeddings...
  CHECK(e0.pooled_q_low->data == e1.pooled_q_low->data);
  CHECK(e0.pooled_v_high->data == e1.pooled_v_high->data);
  // ...and differ once the distinct embedding rows are added
  CHECK(max_abs_diff(e0.q_low->data, e1.q_low->data) > 1e-6);

  // perturbing the shared query path moves the pooled queries of every phase
  params.query_path.conv1.weight->data[0] += 0.25;
  auto p0 = embed_lesion_features(volume, mask, 0, params, cfg);
  auto p1 = embed_lesion_features(volume, mask, 1, params, cfg);
  CHECK(max_abs_diff(p0.pooled_q_low->data, e0.pooled_q_low->data) > 1e-9);
  CHECK(p0.pooled_q_low->data == p1.pooled_q_low->data);
}

TEST_CASE("zero volumes with zero biases pool to the phase embedding") {
  const auto cfg = desk_config();
  auto params = init_params(cfg, 43);
  auto volume = zeros({cfg.height, cfg.width, cfg.depth});
  auto mask = zeros({cfg.height, cfg.width, cfg.depth});
  for (int i = 0; i < 16; ++i) mask->data[i] = 1.0;

  auto e = embed_lesion_features(volume, mask, 2, params, cfg);
  for (double v : e.pooled_q_low->data) CHECK(v == doctest::Approx(0.0));
  const std::int64_t c = cfg.base_channels;
  for (std::int64_t j = 0; j < c; ++j) {
    CHECK(e.q_low->data[j] == doctest::Approx(params.phase_embed_low->data[2 * c + j]));
  }
}

TEST_CASE("embedded query matches an independently recomputed feature map") {
  const auto cfg = desk_config();
  auto params = init_params(cfg, 44);
  std::mt19937_64 rng(45);
  auto vc = random_case(rng, cfg);
  auto volume = tensor({cfg.height, cfg.width, cfg.depth}, vc.volumes[0]);
  auto mask = tensor({cfg.height, cfg.width, cfg.depth}, vc.mask);
  auto e = embed_lesion_features(volume, mask, 0, params, cfg);

  // recompute F^q with the serial reference kernels, then pool
  const std::int64_t h = cfg.height, w = cfg.width, d = cfg.depth, c = cfg.base_channels;
  auto lrelu = [&](std::vector<double> x) {
    for (auto& v : x) v = v > 0.0 ? v : cfg.leaky_slope * v;
    return x;
  };
  const auto& p = params.query_path;
  auto l1 = lrelu(reference::instance_norm_serial(
      reference::conv3d_serial(volume->data, p.conv1.weight->data, p.conv1.bias->data, 1, h, w, d,
                               c, 1),
      p.norm1.gamma->data, p.norm1.beta->data, cfg.norm_eps, c, h * w * d));
  auto l2 = lrelu(reference::instance_norm_serial(
      reference::conv3d_serial(l1, p.conv2.weight->data, p.conv2.bias->data, c, h, w, d, c, 1),
      p.norm2.gamma->data, p.norm2.beta->data, cfg.norm_eps, c, h * w * d));
  // channels-first -> channels-last for the pooling oracle
  std::vector<double> l2_cl(l2.size());
  for (std::int64_t ch = 0; ch < c; ++ch)
    for (std::int64_t x = 0; x < h * w * d; ++x) l2_cl[x * c + ch] = l2[ch * h * w * d + x];
  auto pooled = reference::masked_average_pool_serial(l2_cl, vc.mask, h * w * d, c);

  CHECK(max_abs_diff(e.pooled_q_low->data, pooled) <= 1e-9);
}

TEST_CASE("forward blends predictions per the convex rule") {
  auto cfg = desk_config();
  auto params = init_params(cfg, 46);
  std::mt19937_64 rng(47);
  auto vc = random_case(rng, cfg);

  auto fr = forward(vc, params, cfg);
  const auto& p = fr.prediction;
  REQUIRE(p.y_low.size() == 5);
  REQUIRE(p.y_high.size() == 5);
  double sum_final = 0.0;
  for (std::size_t i = 0; i < 5; ++i) {
    CHECK(p.y_final[i] == cfg.alpha * p.y_low[i] + (1.0 - cfg.alpha) * p.y_high[i]);
    const double lo = std::min(p.y_low[i], p.y_high[i]);
    const double hi = std::max(p.y_low[i], p.y_high[i]);
    CHECK(p.y_final[i] >= lo);
    CHECK(p.y_final[i] <= hi);
    sum_final += p.y_final[i];
  }
  CHECK(std::abs(sum_final - 1.0) <= 1e-9);

  cfg.alpha = 1.0;
  auto fr1 = forward(vc, params, cfg);
  CHECK(fr1.prediction.y_final == fr1.prediction.y_low);  // elementwise identical
}

TEST_CASE("attention rows are stochastic for random inputs") {
  const auto cfg = desk_config();
  auto params = init_params(cfg, 48);
  std::mt19937_64 rng(49);
  for (int rep = 0; rep < 3; ++rep) {
    auto vc = random_case(rng, cfg);
    auto fr = forward(vc, params, cfg);
    for (const auto* a : {&fr.attention.a_low, &fr.attention.a_high}) {
      REQUIRE(a->size() == 16);
      for (int r = 0; r < 4; ++r) {
        double s = 0.0;
        for (int c = 0; c < 4; ++c) {
          const double v = (*a)[r * 4 + c];
          // sqrt(C)-std phase embeddings can push logit gaps past 37, where
          // f64 softmax rounds to the boundary; the open interval holds
          // mathematically but not in floating point
          CHECK(v > 0.0);
          CHECK(v <= 1.0);
          s += v;
        }
        CHECK(std::abs(s - 1.0) <= 1e-9);
      }
    }
  }
}

TEST_CASE("phase permutation equivariance holds only with zero embeddings") {
  auto cfg = desk_config();
  cfg.use_phase_embedding = false;
  auto params = init_params(cfg, 50);
  std::mt19937_64 rng(51);
  auto vc = random_case(rng, cfg);

  // make the phases genuinely distinct
  std::mt19937_64 noise(52);
  std::normal_distribution<double> unit(0.0, 1.0);
  for (auto& vol : vc.volumes)
    for (auto& v : vol) v += 0.05 * unit(noise);

  const std::array<int, 4> perm = {2, 0, 3, 1};
  VolumeCase permuted = vc;
  for (int i = 0; i < 4; ++i) permuted.volumes[i] = vc.volumes[perm[i]];

  auto base = forward(vc, params, cfg);
  auto shuf = forward(permuted, params, cfg);

  // rows of F_out permute with the phases
  const std::int64_t c = cfg.base_channels;
  for (int i = 0; i < 4; ++i)
    for (std::int64_t j = 0; j < c; ++j)
      CHECK(shuf.f_out_low->data[i * c + j] ==
            doctest::Approx(base.f_out_low->data[perm[i] * c + j]).epsilon(1e-12));
  // and A is conjugated by the permutation
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < 4; ++j)
      CHECK(shuf.attention.a_low[i * 4 + j] ==
            doctest::Approx(base.attention.a_low[perm[i] * 4 + perm[j]]).epsilon(1e-12));

  // nonzero embeddings break the property
  auto cfg_p = desk_config();
  auto params_p = init_params(cfg_p, 53);
  auto base_p = forward(vc, params_p, cfg_p);
  auto shuf_p = forward(permuted, params_p, cfg_p);
  double worst = 0.0;
  for (int i = 0; i < 4; ++i)
    for (std::int64_t j = 0; j < c; ++j)
      worst = std::max(worst, std::abs(shuf_p.f_out_low->data[i * c + j] -
                                       base_p.f_out_low->data[perm[i] * c + j]));
  CHECK(worst > 1e-6);
}

TEST_CASE("duplicated phases with zero embeddings attend uniformly") {
  auto cfg = desk_config();
  cfg.use_phase_embedding = false;
  auto params = init_params(cfg, 54);
  std::mt19937_64 rng(55);
  auto vc = random_case(rng, cfg);
  for (int i = 1; i < 4; ++i) vc.volumes[i] = vc.volumes[0];

  auto fr = forward(vc, params, cfg);
  for (double a : fr.attention.a_low) CHECK(a == doctest::Approx(0.25).epsilon(1e-9));
  for (double a : fr.attention.a_high) CHECK(a == doctest::Approx(0.25).epsilon(1e-9));
}

TEST_CASE("model_loss composes the two scales") {
  auto cfg = desk_config();
  auto params = init_params(cfg, 56);
  std::mt19937_64 rng(57);
  auto vc = random_case(rng, cfg);

  // zero the readout layers: both heads become uniform
  for (auto* fc : {&params.ffn_low.fc3, &params.ffn_high.fc3}) {
    std::fill(fc->weight->data.begin(), fc->weight->data.end(), 0.0);
    std::fill(fc->bias->data.begin(), fc->bias->data.end(), 0.0);
  }
  auto fr = forward(vc, params, cfg);
  auto loss = model_loss(fr, 3, cfg);
  CHECK(loss->data[0] == doctest::Approx(1.1 * std::log(5.0)).epsilon(1e-9));

  // confident correct heads drive the loss to zero
  params.ffn_low.fc3.bias->data[3] = 200.0;
  params.ffn_high.fc3.bias->data[3] = 200.0;
  auto fr2 = forward(vc, params, cfg);
  CHECK(model_loss(fr2, 3, cfg)->data[0] == doctest::Approx(0.0));
}

TEST_CASE("init_params is seeded and matches the shared-weights count") {
  const auto cfg = desk_config();
  auto a = init_params(cfg, 99);
  auto b = init_params(cfg, 99);
  auto c = init_params(cfg, 100);
  auto an = a.named(), bn = b.named(), cn = c.named();
  bool identical = true, different = false;
  for (std::size_t i = 0; i < an.size(); ++i) {
    identical = identical && an[i].second->data == bn[i].second->data;
    different = different || an[i].second->data != cn[i].second->data;
  }
  CHECK(identical);
  CHECK(different);
  CHECK(a.total_count() == shared_weights_param_count(cfg));

  ModelConfig big;
  CHECK(init_params(big, 1).total_count() == shared_weights_param_count(big));
}

TEST_CASE("phase embedding std follows the sqrt-width rule") {
  ModelConfig cfg;  // C = 8
  double sum = 0.0, sum_sq = 0.0;
  std::int64_t n = 0;
  for (std::uint64_t seed = 0; seed < 300; ++seed) {
    auto params = init_params(cfg, seed);
    for (double v : params.phase_embed_low->data) {
      sum += v;
      sum_sq += v * v;
      ++n;
    }
  }
  const double mean = sum / n;
  const double std_dev = std::sqrt(sum_sq / n - mean * mean);
  CHECK(std_dev == doctest::Approx(std::sqrt(8.0)).epsilon(0.05));

  cfg.phase_embed_std_sqrt = false;
  auto params = init_params(cfg, 7);
  double m2 = 0.0;
  for (double v : params.phase_embed_low->data) m2 += v * v;
  m2 /= static_cast<double>(params.phase_embed_low->numel());
  CHECK(std::sqrt(m2) < 1.0);  // 1/sqrt(8) regime rather than sqrt(8)
}

TEST_CASE("checkpoint round-trips bit-exactly and rejects corruption") {
  const auto cfg = desk_config();
  auto params = init_params(cfg, 60);
  const auto dir = temp_dir("ckpt");
  const std::string path = (dir / "model.xpc").string();
  save_checkpoint(path, params);

  auto restored = init_params(cfg, 61);
  load_checkpoint(path, restored);
  auto pn = params.named(), rn = restored.named();
  for (std::size_t i = 0; i < pn.size(); ++i) CHECK(pn[i].second->data == rn[i].second->data);

  // corrupt the format marker
  {
    std::ifstream in(path, std::ios::binary);
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    bytes[bytes.find("XPC1")] = 'Y';
    std::ofstream out((dir / "bad_magic.xpc").string(), std::ios::binary);
    out << bytes;
  }
  auto scratch = init_params(cfg, 62);
  try {
    load_checkpoint((dir / "bad_magic.xpc").string(), scratch);
    FAIL("expected IoError");
  } catch (const IoError& e) {
    CHECK(e.kind == IoError::Kind::bad_magic);
  }

  // drop the tail of the payload
  {
    std::ifstream in(path, std::ios::binary);
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    std::ofstream out((dir / "short.xpc").string(), std::ios::binary);
    out << bytes.substr(0, bytes.size() - 16);
  }
  try {
    load_checkpoint((dir / "short.xpc").string(), scratch);
    FAIL("expected IoError");
  } catch (const IoError& e) {
    CHECK(e.kind == IoError::Kind::truncated);
  }

  // append trailing garbage
  {
    std::ofstream out(path, std::ios::binary | std::ios::app);
    out << "xx";
  }
  try {
    load_checkpoint(path, scratch);
    FAIL("expected IoError");
  } catch (const IoError& e) {
    CHECK(e.kind == IoError::Kind::length_mismatch);
  }
  fs::remove_all(dir);
}

TEST_CASE("predict_class breaks ties toward the lowest index") {
  CHECK(predict_class({0.7, 0.3, 0, 0, 0}) == 0);
  CHECK(predict_class({0.2, 0.2, 0.2, 0.2, 0.2}) == 0);
  CHECK(predict_class({0, 0, 0, 0, 1}) == 4);
}

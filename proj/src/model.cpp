#include "xphase/model.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <random>
#include <stdexcept>

#include <json.hpp>

#include "xphase/errors.hpp"

namespace xphase {

using nlohmann::json;

static_assert(std::endian::native == std::endian::little,
              "checkpoint and volume formats assume a little-endian host");

void ModelConfig::validate() const {
  if (n_phases < 2) throw std::invalid_argument("config: n_phases must be >= 2");
  if (base_channels < 1) throw std::invalid_argument("config: base_channels must be >= 1");
  if (n_classes < 2) throw std::invalid_argument("config: n_classes must be >= 2");
  if (alpha < 0.0 || alpha > 1.0) throw std::invalid_argument("config: alpha must be in [0,1]");
  if (lambda < 0.0) throw std::invalid_argument("config: lambda must be >= 0");
  if (beta < 0.0) throw std::invalid_argument("config: beta must be >= 0");
  if (height <= 0 || width <= 0 || depth <= 0 || height % 2 || width % 2 || depth % 2) {
    throw std::invalid_argument("config: volume extents must be positive and even");
  }
}

std::vector<std::pair<std::string, TensorPtr>> ModelParams::named() const {
  std::vector<std::pair<std::string, TensorPtr>> out;
  auto path = [&out](const std::string& prefix, const EncoderPath& p) {
    const ConvLayer* convs[] = {&p.conv1, &p.conv2, &p.conv3, &p.conv4};
    const NormLayer* norms[] = {&p.norm1, &p.norm2, &p.norm3, &p.norm4};
    for (int i = 0; i < 4; ++i) {
      const std::string li = std::to_string(i + 1);
      out.emplace_back(prefix + ".conv" + li + ".weight", convs[i]->weight);
      out.emplace_back(prefix + ".conv" + li + ".bias", convs[i]->bias);
      out.emplace_back(prefix + ".norm" + li + ".gamma", norms[i]->gamma);
      out.emplace_back(prefix + ".norm" + li + ".beta", norms[i]->beta);
    }
  };
  path("encoder_q", query_path);
  path("encoder_k", key_path);
  path("encoder_v", value_path);
  out.emplace_back("phase_embed.low", phase_embed_low);
  out.emplace_back("phase_embed.high", phase_embed_high);
  auto ffn = [&out](const std::string& prefix, const Ffn& f) {
    const FcLayer* fcs[] = {&f.fc1, &f.fc2, &f.fc3};
    for (int i = 0; i < 3; ++i) {
      const std::string li = std::to_string(i + 1);
      out.emplace_back(prefix + ".fc" + li + ".weight", fcs[i]->weight);
      out.emplace_back(prefix + ".fc" + li + ".bias", fcs[i]->bias);
    }
  };
  ffn("ffn_low", ffn_low);
  ffn("ffn_high", ffn_high);
  return out;
}

std::int64_t ModelParams::total_count() const {
  std::int64_t n = 0;
  for (const auto& [name, t] : named()) n += t->numel();
  return n;
}

std::int64_t shared_weights_param_count(const ModelConfig& cfg) {
  const std::int64_t c = cfg.base_channels;
  const std::int64_t n = cfg.n_phases;
  const std::int64_t k = cfg.n_classes;
  auto conv = [](std::int64_t cin, std::int64_t cout) { return cout * cin * 27 + cout; };
  auto norm = [](std::int64_t ch) { return 2 * ch; };
  const std::int64_t per_path = conv(1, c) + norm(c) + conv(c, c) + norm(c) +
                                conv(c, 2 * c) + norm(2 * c) + conv(2 * c, 2 * c) + norm(2 * c);
  auto ffn = [&](std::int64_t in) { return 2 * (in * in + in) + (k * in + k); };
  return 3 * per_path + n * c + n * 2 * c + ffn(n * c) + ffn(2 * n * c);
}

ModelParams init_params(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> unit(0.0, 1.0);

  auto gaussian = [&](std::vector<std::int64_t> shape, double std_dev, bool trainable = true) {
    std::vector<double> data(static_cast<std::size_t>(shape_numel(shape)));
    for (auto& v : data) v = unit(rng) * std_dev;
    return tensor(std::move(shape), std::move(data), trainable);
  };
  // He-style fan-in scaling for conv and fc weights, zero biases.
  auto conv = [&](std::int64_t cin, std::int64_t cout) {
    ConvLayer l;
    l.weight = gaussian({cout, cin, 3, 3, 3}, std::sqrt(2.0 / static_cast<double>(cin * 27)));
    l.bias = zeros({cout}, true);
    return l;
  };
  auto norm = [&](std::int64_t ch) {
    NormLayer l;
    l.gamma = full({ch}, 1.0, true);
    l.beta = zeros({ch}, true);
    return l;
  };
  auto fc = [&](std::int64_t in, std::int64_t out) {
    FcLayer l;
    l.weight = gaussian({out, in}, std::sqrt(2.0 / static_cast<double>(in)));
    l.bias = zeros({out}, true);
    return l;
  };
  auto path = [&]() {
    const std::int64_t c = cfg.base_channels;
    EncoderPath p;
    p.conv1 = conv(1, c);
    p.norm1 = norm(c);
    p.conv2 = conv(c, c);
    p.norm2 = norm(c);
    p.conv3 = conv(c, 2 * c);
    p.norm3 = norm(2 * c);
    p.conv4 = conv(2 * c, 2 * c);
    p.norm4 = norm(2 * c);
    return p;
  };

  ModelParams params;
  params.query_path = path();
  params.key_path = path();
  params.value_path = path();
  const std::int64_t c = cfg.base_channels;
  // Phase embeddings draw from their own stream so toggling them never
  // reshuffles the other weights.
  std::mt19937_64 embed_rng(seed ^ 0x70A5EBEDull);
  if (cfg.use_phase_embedding) {
    const double std_low =
        cfg.phase_embed_std_sqrt ? std::sqrt(static_cast<double>(c))
                                 : 1.0 / std::sqrt(static_cast<double>(c));
    const double std_high =
        cfg.phase_embed_std_sqrt ? std::sqrt(static_cast<double>(2 * c))
                                 : 1.0 / std::sqrt(static_cast<double>(2 * c));
    auto draw = [&](std::vector<std::int64_t> shape, double std_dev) {
      std::normal_distribution<double> unit(0.0, 1.0);
      std::vector<double> data(static_cast<std::size_t>(shape_numel(shape)));
      for (auto& v : data) v = unit(embed_rng) * std_dev;
      return tensor(std::move(shape), std::move(data), true);
    };
    params.phase_embed_low = draw({cfg.n_phases, c}, std_low);
    params.phase_embed_high = draw({cfg.n_phases, 2 * c}, std_high);
  } else {
    params.phase_embed_low = zeros({cfg.n_phases, c}, false);
    params.phase_embed_high = zeros({cfg.n_phases, 2 * c}, false);
  }
  // The readout layers start at zero so training begins from the uniform
  // prediction; the sqrt(C)-scale phase embeddings would otherwise blow the
  // initial logits up to confident noise.
  auto readout = [&](std::int64_t in) {
    FcLayer l;
    l.weight = zeros({cfg.n_classes, in}, true);
    l.bias = zeros({cfg.n_classes}, true);
    return l;
  };
  const std::int64_t nc = cfg.n_phases * c;
  params.ffn_low.fc1 = fc(nc, nc);
  params.ffn_low.fc2 = fc(nc, nc);
  params.ffn_low.fc3 = readout(nc);
  params.ffn_high.fc1 = fc(2 * nc, 2 * nc);
  params.ffn_high.fc2 = fc(2 * nc, 2 * nc);
  params.ffn_high.fc3 = readout(2 * nc);
  return params;
}

TensorPtr masked_average_pool(const TensorPtr& feature, const TensorPtr& mask) {
  if (feature->shape.size() != 4) {
    throw std::invalid_argument("masked_average_pool: feature must be [H,W,D,C]");
  }
  if (mask->shape.size() != 3 ||
      !std::equal(mask->shape.begin(), mask->shape.end(), feature->shape.begin())) {
    throw std::invalid_argument("masked_average_pool: mask shape " + shape_str(mask->shape) +
                                " does not match feature " + shape_str(feature->shape));
  }
  const std::int64_t spatial = mask->numel();
  const std::int64_t channels = feature->shape[3];
  double msum = 0.0;
  for (double v : mask->data) msum += v;
  if (msum == 0.0) {
    throw EmptyMaskError("masked_average_pool: mask has no lesion voxels");
  }
  auto flat = reshape(feature, {spatial, channels});
  auto mrow = reshape(mask, {1, spatial});
  auto pooled = scalar_mul(matmul(mrow, flat), 1.0 / msum);
  return reshape(pooled, {channels});
}

TensorPtr downsample_mask(const TensorPtr& mask) {
  if (mask->shape.size() != 3) throw std::invalid_argument("downsample_mask: mask must be [H,W,D]");
  const std::int64_t h = mask->shape[0], w = mask->shape[1], d = mask->shape[2];
  if (h % 2 || w % 2 || d % 2) {
    throw std::invalid_argument("downsample_mask: extents must be even, got " +
                                shape_str(mask->shape));
  }
  const std::int64_t oh = h / 2, ow = w / 2, od = d / 2;
  std::vector<double> out(static_cast<std::size_t>(oh * ow * od), 0.0);
  for (std::int64_t i = 0; i < h; ++i)
    for (std::int64_t j = 0; j < w; ++j)
      for (std::int64_t k = 0; k < d; ++k)
        if (mask->data[(i * w + j) * d + k] != 0.0)
          out[((i / 2) * ow + j / 2) * od + k / 2] = 1.0;
  return tensor({oh, ow, od}, std::move(out), false);
}

AttentionOutput cross_phase_attention(const TensorPtr& q, const TensorPtr& k,
                                      const TensorPtr& v, double lambda) {
  if (q->shape.size() != 2 || q->shape != k->shape || q->shape != v->shape) {
    throw std::invalid_argument("cross_phase_attention: Q, K, V must share an [N,C'] shape");
  }
  const double scale = 1.0 / std::sqrt(static_cast<double>(q->shape[1]));
  auto logits = scalar_mul(matmul(q, transpose2d(k)), scale);
  auto attn = softmax_rows(logits);
  auto f_out = add(scalar_mul(matmul(attn, v), lambda), v);
  return {f_out, attn};
}

namespace {

// [C,H,W,D] -> [H,W,D,C]
TensorPtr to_channels_last(const TensorPtr& x) {
  const auto& s = x->shape;
  auto flat = reshape(x, {s[0], s[1] * s[2] * s[3]});
  return reshape(transpose2d(flat), {s[1], s[2], s[3], s[0]});
}

struct PathFeatures {
  TensorPtr low;   // [C,H,W,D]
  TensorPtr high;  // [2C,H/2,W/2,D/2], null when the high scale is off
};

PathFeatures run_encoder(const TensorPtr& volume4d, const EncoderPath& p,
                         const ModelConfig& cfg) {
  const double slope = cfg.leaky_slope;
  const double eps = cfg.norm_eps;
  auto block = [&](const TensorPtr& x, const ConvLayer& c, const NormLayer& n, int stride) {
    return leaky_relu(instance_norm(conv3d(x, c.weight, c.bias, stride), n.gamma, n.beta, eps),
                      slope);
  };
  PathFeatures f;
  auto x1 = block(volume4d, p.conv1, p.norm1, 1);
  f.low = block(x1, p.conv2, p.norm2, 1);
  if (cfg.use_high_scale) {
    auto x3 = block(f.low, p.conv3, p.norm3, 2);
    f.high = block(x3, p.conv4, p.norm4, 1);
  }
  return f;
}

std::vector<double> softmax_vec(const TensorPtr& logits) {
  auto probs = softmax_rows(reshape(logits, {1, logits->numel()}));
  return probs->data;
}

TensorPtr run_ffn(const TensorPtr& x, const Ffn& f, double slope) {
  auto h1 = leaky_relu(fully_connected(x, f.fc1.weight, f.fc1.bias), slope);
  auto h2 = leaky_relu(fully_connected(h1, f.fc2.weight, f.fc2.bias), slope);
  return fully_connected(h2, f.fc3.weight, f.fc3.bias);
}

}  // namespace

LesionEmbedding embed_lesion_features(const TensorPtr& volume, const TensorPtr& mask,
                                      std::int64_t phase_index, const ModelParams& params,
                                      const ModelConfig& cfg) {
  if (volume->shape.size() != 3 || volume->shape != mask->shape) {
    throw std::invalid_argument("embed_lesion_features: volume and mask must share [H,W,D]");
  }
  auto vol4d = reshape(volume, {1, volume->shape[0], volume->shape[1], volume->shape[2]});
  auto fq = run_encoder(vol4d, params.query_path, cfg);
  auto fk = run_encoder(vol4d, params.key_path, cfg);
  auto fv = run_encoder(vol4d, params.value_path, cfg);

  LesionEmbedding e;
  e.pooled_q_low = masked_average_pool(to_channels_last(fq.low), mask);
  e.pooled_k_low = masked_average_pool(to_channels_last(fk.low), mask);
  e.pooled_v_low = masked_average_pool(to_channels_last(fv.low), mask);
  auto p_low = select_row(params.phase_embed_low, phase_index);
  e.q_low = add(e.pooled_q_low, p_low);
  e.k_low = add(e.pooled_k_low, p_low);
  e.v_low = add(e.pooled_v_low, p_low);

  if (cfg.use_high_scale) {
    auto mask_down = downsample_mask(mask);
    e.pooled_q_high = masked_average_pool(to_channels_last(fq.high), mask_down);
    e.pooled_k_high = masked_average_pool(to_channels_last(fk.high), mask_down);
    e.pooled_v_high = masked_average_pool(to_channels_last(fv.high), mask_down);
    auto p_high = select_row(params.phase_embed_high, phase_index);
    e.q_high = add(e.pooled_q_high, p_high);
    e.k_high = add(e.pooled_k_high, p_high);
    e.v_high = add(e.pooled_v_high, p_high);
  }
  return e;
}

ForwardResult forward(const VolumeCase& vc, const ModelParams& params,
                      const ModelConfig& cfg) {
  cfg.validate();
  if (static_cast<std::int64_t>(vc.volumes.size()) != cfg.n_phases) {
    throw std::invalid_argument("forward: case has " + std::to_string(vc.volumes.size()) +
                                " phases, config wants " + std::to_string(cfg.n_phases));
  }
  if (vc.h != cfg.height || vc.w != cfg.width || vc.d != cfg.depth) {
    throw std::invalid_argument("forward: case extents do not match config");
  }
  const std::int64_t n = cfg.n_phases;
  auto mask = tensor({vc.h, vc.w, vc.d}, vc.mask, false);

  std::vector<TensorPtr> q_low, k_low, v_low, q_high, k_high, v_high;
  for (std::int64_t i = 0; i < n; ++i) {
    auto vol = tensor({vc.h, vc.w, vc.d}, vc.volumes[i], false);
    auto e = embed_lesion_features(vol, mask, i, params, cfg);
    const std::int64_t c = e.q_low->numel();
    q_low.push_back(reshape(e.q_low, {1, c}));
    k_low.push_back(reshape(e.k_low, {1, c}));
    v_low.push_back(reshape(e.v_low, {1, c}));
    if (cfg.use_high_scale) {
      const std::int64_t c2 = e.q_high->numel();
      q_high.push_back(reshape(e.q_high, {1, c2}));
      k_high.push_back(reshape(e.k_high, {1, c2}));
      v_high.push_back(reshape(e.v_high, {1, c2}));
    }
  }

  ForwardResult fr;
  fr.attention.n = n;

  auto low = cross_phase_attention(concat_rows(q_low), concat_rows(k_low),
                                   concat_rows(v_low), cfg.lambda);
  fr.f_out_low = low.f_out;
  fr.attention.a_low = low.attn->data;
  auto f_low = reshape(low.f_out, {low.f_out->numel()});
  fr.logits_low = run_ffn(f_low, params.ffn_low, cfg.leaky_slope);
  fr.prediction.y_low = softmax_vec(fr.logits_low);

  if (cfg.use_high_scale) {
    auto high = cross_phase_attention(concat_rows(q_high), concat_rows(k_high),
                                      concat_rows(v_high), cfg.lambda);
    fr.f_out_high = high.f_out;
    fr.attention.a_high = high.attn->data;
    auto f_high = reshape(high.f_out, {high.f_out->numel()});
    fr.logits_high = run_ffn(f_high, params.ffn_high, cfg.leaky_slope);
    fr.prediction.y_high = softmax_vec(fr.logits_high);

    fr.prediction.y_final.resize(fr.prediction.y_low.size());
    for (std::size_t i = 0; i < fr.prediction.y_final.size(); ++i) {
      fr.prediction.y_final[i] =
          cfg.alpha * fr.prediction.y_low[i] + (1.0 - cfg.alpha) * fr.prediction.y_high[i];
    }
  } else {
    fr.prediction.y_final = fr.prediction.y_low;
  }
  fr.prediction.predicted = predict_class(fr.prediction.y_final);
  return fr;
}

TensorPtr model_loss(const ForwardResult& fr, std::int64_t label, const ModelConfig& cfg) {
  auto ce_low = cross_entropy(fr.logits_low, label);
  if (!cfg.use_high_scale) return ce_low;
  auto ce_high = cross_entropy(fr.logits_high, label);
  return add(ce_low, scalar_mul(ce_high, cfg.beta));
}

int predict_class(const std::vector<double>& y_final) {
  if (y_final.empty()) throw std::invalid_argument("predict_class: empty probability vector");
  int best = 0;
  for (int i = 1; i < static_cast<int>(y_final.size()); ++i) {
    if (y_final[i] > y_final[best]) best = i;  // ties keep the lowest index
  }
  return best;
}

void save_checkpoint(const std::string& path, const ModelParams& params) {
  json manifest;
  manifest["format"] = "XPC1";
  json tensors = json::array();
  std::int64_t offset = 0;
  const auto named = params.named();
  for (const auto& [name, t] : named) {
    json entry;
    entry["name"] = name;
    entry["shape"] = t->shape;
    entry["offset"] = offset;
    tensors.push_back(entry);
    offset += t->numel() * 8;
  }
  manifest["tensors"] = tensors;

  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError(IoError::Kind::io, "cannot open " + path + " for writing");
  f << manifest.dump() << "\n";
  for (const auto& [name, t] : named) {
    f.write(reinterpret_cast<const char*>(t->data.data()),
            static_cast<std::streamsize>(t->data.size() * 8));
  }
  if (!f) throw IoError(IoError::Kind::io, "write failed for " + path);
}

void load_checkpoint(const std::string& path, ModelParams& params) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError(IoError::Kind::io, "cannot open " + path);
  std::string header;
  if (!std::getline(f, header)) throw IoError(IoError::Kind::bad_header, "missing manifest line");
  json manifest;
  try {
    manifest = json::parse(header);
  } catch (const json::exception& e) {
    throw IoError(IoError::Kind::bad_header, std::string("manifest is not valid JSON: ") + e.what());
  }
  if (!manifest.contains("format") || manifest["format"] != "XPC1") {
    throw IoError(IoError::Kind::bad_magic, "not a checkpoint file (format marker missing)");
  }
  std::string payload((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());

  auto named = params.named();
  const auto& tensors = manifest["tensors"];
  if (!tensors.is_array() || tensors.size() != named.size()) {
    throw IoError(IoError::Kind::bad_header, "manifest tensor list does not match the model");
  }
  std::int64_t expected_bytes = 0;
  for (std::size_t i = 0; i < named.size(); ++i) {
    const auto& entry = tensors[i];
    const auto& [name, t] = named[i];
    if (entry["name"] != name) {
      throw IoError(IoError::Kind::bad_header,
                    "manifest names tensor '" + entry["name"].get<std::string>() +
                        "' where the model has '" + name + "'");
    }
    const auto shape = entry["shape"].get<std::vector<std::int64_t>>();
    if (shape != t->shape) {
      throw IoError(IoError::Kind::bad_header, "shape mismatch for " + name);
    }
    if (entry["offset"].get<std::int64_t>() != expected_bytes) {
      throw IoError(IoError::Kind::bad_header, "offset mismatch for " + name);
    }
    expected_bytes += t->numel() * 8;
  }
  if (static_cast<std::int64_t>(payload.size()) < expected_bytes) {
    throw IoError(IoError::Kind::truncated,
                  "payload holds " + std::to_string(payload.size()) + " bytes, manifest wants " +
                      std::to_string(expected_bytes));
  }
  if (static_cast<std::int64_t>(payload.size()) > expected_bytes) {
    throw IoError(IoError::Kind::length_mismatch,
                  "payload holds " + std::to_string(payload.size()) + " bytes, manifest wants " +
                      std::to_string(expected_bytes));
  }
  std::int64_t offset = 0;
  for (auto& [name, t] : named) {
    std::memcpy(t->data.data(), payload.data() + offset, t->data.size() * 8);
    offset += t->numel() * 8;
  }
}

}  // namespace xphase

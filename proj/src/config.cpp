#include "xphase/config.hpp"

#include <fstream>
#include <sstream>
#include <stdexcept>

namespace xphase {

namespace {

std::string trim(const std::string& s) {
  const auto a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  const auto b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

double to_double(const std::string& key, const std::string& v) {
  std::size_t used = 0;
  double out;
  try {
    out = std::stod(v, &used);
  } catch (const std::exception&) {
    throw std::invalid_argument("config: " + key + "=" + v + " is not a number");
  }
  if (used != v.size()) throw std::invalid_argument("config: " + key + "=" + v + " is not a number");
  return out;
}

std::int64_t to_int(const std::string& key, const std::string& v) {
  std::size_t used = 0;
  std::int64_t out;
  try {
    out = std::stoll(v, &used);
  } catch (const std::exception&) {
    throw std::invalid_argument("config: " + key + "=" + v + " is not an integer");
  }
  if (used != v.size()) throw std::invalid_argument("config: " + key + "=" + v + " is not an integer");
  return out;
}

std::uint64_t to_uint(const std::string& key, const std::string& v) {
  const std::int64_t out = to_int(key, v);
  if (out < 0) throw std::invalid_argument("config: " + key + " must be nonnegative");
  return static_cast<std::uint64_t>(out);
}

bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true") return true;
  if (v == "false") return false;
  throw std::invalid_argument("config: " + key + "=" + v + " must be true or false");
}

void parse_shape(const std::string& v, std::int64_t& h, std::int64_t& w, std::int64_t& d) {
  std::int64_t vals[3];
  std::size_t pos = 0;
  for (int i = 0; i < 3; ++i) {
    std::size_t used = 0;
    try {
      vals[i] = std::stoll(v.substr(pos), &used);
    } catch (const std::exception&) {
      throw std::invalid_argument("config: bad volume_shape '" + v + "', want HxWxD");
    }
    pos += used;
    if (i < 2) {
      if (pos >= v.size() || v[pos] != 'x') {
        throw std::invalid_argument("config: bad volume_shape '" + v + "', want HxWxD");
      }
      ++pos;
    }
  }
  if (pos != v.size()) throw std::invalid_argument("config: bad volume_shape '" + v + "', want HxWxD");
  h = vals[0];
  w = vals[1];
  d = vals[2];
}

}  // namespace

RunConfig RunConfig::defaults() {
  RunConfig c;
  auto& v = c.values_;
  v["model.n_phases"] = "4";
  v["model.base_channels"] = "8";
  v["model.n_classes"] = "5";
  v["model.lambda"] = "0.1";
  v["model.alpha"] = "0.7";
  v["model.beta"] = "0.1";
  v["model.volume_shape"] = "16x16x8";
  v["model.use_high_scale"] = "true";
  v["model.use_phase_embedding"] = "true";
  v["model.phase_embed_std"] = "sqrt_c";  // or inv_sqrt_c
  v["model.leaky_slope"] = "0.01";
  v["model.norm_eps"] = "1e-5";

  v["train.epochs"] = "200";
  v["train.lr"] = "1e-4";
  v["train.lr_decay"] = "0.1";
  v["train.lr_step"] = "50";
  v["train.beta1"] = "0.9";
  v["train.beta2"] = "0.999";
  v["train.eps"] = "1e-8";
  v["train.flip_prob"] = "0.5";
  v["train.seed"] = "7";
  v["train.select"] = "final";  // or best_val

  v["data.cases_per_class"] = "5";
  v["data.train_frac"] = "0.65";
  v["data.val_frac"] = "0.15";
  v["data.test_frac"] = "0.20";
  v["data.heterogeneity"] = "0.05";
  v["data.background_noise"] = "0.05";
  v["data.lesion_frac_min"] = "0.005";
  v["data.lesion_frac_max"] = "0.10";
  v["data.separability_margin"] = "0.1";
  v["data.intensity_jitter_gain"] = "0.0";
  v["data.intensity_jitter_offset"] = "0.0";
  v["data.phase_corrupt_prob"] = "0.0";
  v["data.phase_corrupt_blend"] = "0.7";
  v["data.seed"] = "2024";
  return c;
}

RunConfig RunConfig::from_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::invalid_argument("config: cannot open " + path);
  RunConfig c = defaults();
  std::string line;
  int lineno = 0;
  while (std::getline(f, line)) {
    ++lineno;
    const std::string t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos) {
      throw std::invalid_argument("config: " + path + ":" + std::to_string(lineno) +
                                  ": expected key=value");
    }
    c.set(trim(t.substr(0, eq)), trim(t.substr(eq + 1)));
  }
  return c;
}

void RunConfig::set(const std::string& key, const std::string& value) {
  auto it = values_.find(key);
  if (it == values_.end()) throw std::invalid_argument("config: unknown key '" + key + "'");
  it->second = value;
}

const std::string& RunConfig::get(const std::string& key) const {
  auto it = values_.find(key);
  if (it == values_.end()) throw std::invalid_argument("config: unknown key '" + key + "'");
  return it->second;
}

ModelConfig RunConfig::model() const {
  ModelConfig m;
  m.n_phases = to_int("model.n_phases", get("model.n_phases"));
  m.base_channels = to_int("model.base_channels", get("model.base_channels"));
  m.n_classes = to_int("model.n_classes", get("model.n_classes"));
  m.lambda = to_double("model.lambda", get("model.lambda"));
  m.alpha = to_double("model.alpha", get("model.alpha"));
  m.beta = to_double("model.beta", get("model.beta"));
  parse_shape(get("model.volume_shape"), m.height, m.width, m.depth);
  m.use_high_scale = to_bool("model.use_high_scale", get("model.use_high_scale"));
  m.use_phase_embedding = to_bool("model.use_phase_embedding", get("model.use_phase_embedding"));
  const std::string& std_mode = get("model.phase_embed_std");
  if (std_mode == "sqrt_c") {
    m.phase_embed_std_sqrt = true;
  } else if (std_mode == "inv_sqrt_c") {
    m.phase_embed_std_sqrt = false;
  } else {
    throw std::invalid_argument("config: model.phase_embed_std must be sqrt_c or inv_sqrt_c");
  }
  m.leaky_slope = to_double("model.leaky_slope", get("model.leaky_slope"));
  m.norm_eps = to_double("model.norm_eps", get("model.norm_eps"));
  m.validate();
  return m;
}

TrainConfig RunConfig::trainer() const {
  TrainConfig t;
  t.epochs = static_cast<int>(to_int("train.epochs", get("train.epochs")));
  t.lr = to_double("train.lr", get("train.lr"));
  t.lr_decay = to_double("train.lr_decay", get("train.lr_decay"));
  t.lr_step = static_cast<int>(to_int("train.lr_step", get("train.lr_step")));
  t.beta1 = to_double("train.beta1", get("train.beta1"));
  t.beta2 = to_double("train.beta2", get("train.beta2"));
  t.eps = to_double("train.eps", get("train.eps"));
  t.flip_prob = to_double("train.flip_prob", get("train.flip_prob"));
  t.seed = to_uint("train.seed", get("train.seed"));
  const std::string& sel = get("train.select");
  if (sel == "final") {
    t.select_best_val = false;
  } else if (sel == "best_val") {
    t.select_best_val = true;
  } else {
    throw std::invalid_argument("config: train.select must be final or best_val");
  }
  t.validate();
  return t;
}

GeneratorConfig RunConfig::generator() const {
  GeneratorConfig g;
  parse_shape(get("model.volume_shape"), g.height, g.width, g.depth);
  g.cases_per_class = static_cast<int>(to_int("data.cases_per_class", get("data.cases_per_class")));
  g.train_frac = to_double("data.train_frac", get("data.train_frac"));
  g.val_frac = to_double("data.val_frac", get("data.val_frac"));
  g.test_frac = to_double("data.test_frac", get("data.test_frac"));
  g.heterogeneity = to_double("data.heterogeneity", get("data.heterogeneity"));
  g.background_noise = to_double("data.background_noise", get("data.background_noise"));
  g.lesion_frac_min = to_double("data.lesion_frac_min", get("data.lesion_frac_min"));
  g.lesion_frac_max = to_double("data.lesion_frac_max", get("data.lesion_frac_max"));
  g.separability_margin = to_double("data.separability_margin", get("data.separability_margin"));
  g.intensity_jitter_gain = to_double("data.intensity_jitter_gain", get("data.intensity_jitter_gain"));
  g.intensity_jitter_offset =
      to_double("data.intensity_jitter_offset", get("data.intensity_jitter_offset"));
  g.phase_corrupt_prob = to_double("data.phase_corrupt_prob", get("data.phase_corrupt_prob"));
  g.phase_corrupt_blend = to_double("data.phase_corrupt_blend", get("data.phase_corrupt_blend"));
  g.seed = to_uint("data.seed", get("data.seed"));
  g.validate();
  return g;
}

}  // namespace xphase

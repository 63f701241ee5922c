#include "xphase/phantom.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

#include "xphase/errors.hpp"
#include "xphase/rng.hpp"

namespace xphase {

using nlohmann::json;
namespace fs = std::filesystem;

std::array<SubtypeProfile, kPhantomClasses> GeneratorConfig::profiles() const {
  // Normalized enhancement curves over (non-contrast, arterial, portal,
  // delayed); pairwise L2-separated by at least the configured margin.
  std::array<SubtypeProfile, kPhantomClasses> p{};
  const std::array<std::array<double, 4>, 5> curves = {{
      {0.2, 0.9, 0.5, 0.7},     // arterial + delayed peaks
      {0.2, 0.4, 0.8, 0.5},     // portal peak, weak arterial
      {0.2, 0.5, 0.75, 0.45},   // portal peak, moderate arterial
      {0.15, 0.35, 0.4, 0.35},  // flat, low enhancement
      {0.2, 0.85, 0.6, 0.5},    // arterial peak, fast washout
  }};
  for (int c = 0; c < kPhantomClasses; ++c) {
    p[c].cls = c;
    p[c].curve = curves[c];
    p[c].heterogeneity = heterogeneity;
  }
  return p;
}

void GeneratorConfig::validate() const {
  if (height <= 0 || width <= 0 || depth <= 0 || height % 2 || width % 2 || depth % 2) {
    throw std::invalid_argument("generator: volume extents must be positive and even");
  }
  if (cases_per_class < 1) throw std::invalid_argument("generator: cases_per_class must be >= 1");
  if (train_frac < 0 || val_frac < 0 || test_frac < 0 ||
      std::abs(train_frac + val_frac + test_frac - 1.0) > 1e-9) {
    throw std::invalid_argument("generator: split fractions must be nonnegative and sum to 1");
  }
  if (heterogeneity < 0 || background_noise < 0) {
    throw std::invalid_argument("generator: noise amplitudes must be nonnegative");
  }
  if (phase_corrupt_prob < 0 || phase_corrupt_prob > 1 || phase_corrupt_blend < 0 ||
      phase_corrupt_blend > 1) {
    throw std::invalid_argument("generator: phase corruption parameters must be in [0,1]");
  }
  if (lesion_frac_min <= 0 || lesion_frac_max <= lesion_frac_min || lesion_frac_max > 0.5) {
    throw std::invalid_argument("generator: bad lesion fraction bounds");
  }
  const auto p = profiles();
  for (int a = 0; a < kPhantomClasses; ++a) {
    for (int b = a + 1; b < kPhantomClasses; ++b) {
      double d2 = 0.0;
      for (int i = 0; i < kPhantomPhases; ++i) {
        const double d = p[a].curve[i] - p[b].curve[i];
        d2 += d * d;
      }
      if (std::sqrt(d2) <= separability_margin) {
        throw std::invalid_argument("generator: enhancement curves closer than the separability margin");
      }
    }
  }
}

std::string GeneratorConfig::canonical_text() const {
  std::ostringstream os;
  os.precision(17);
  os << "background_noise=" << background_noise << "\n";
  for (int i = 0; i < kPhantomPhases; ++i)
    os << "background_curve." << i << "=" << background_curve[i] << "\n";
  os << "cases_per_class=" << cases_per_class << "\n";
  os << "depth=" << depth << "\n";
  os << "height=" << height << "\n";
  os << "heterogeneity=" << heterogeneity << "\n";
  os << "intensity_jitter_gain=" << intensity_jitter_gain << "\n";
  os << "intensity_jitter_offset=" << intensity_jitter_offset << "\n";
  os << "lesion_frac_max=" << lesion_frac_max << "\n";
  os << "lesion_frac_min=" << lesion_frac_min << "\n";
  os << "phase_corrupt_blend=" << phase_corrupt_blend << "\n";
  os << "phase_corrupt_prob=" << phase_corrupt_prob << "\n";
  os << "seed=" << seed << "\n";
  os << "separability_margin=" << separability_margin << "\n";
  os << "test_frac=" << test_frac << "\n";
  os << "train_frac=" << train_frac << "\n";
  os << "val_frac=" << val_frac << "\n";
  os << "width=" << width << "\n";
  return os.str();
}

std::uint64_t fnv1a64(const std::string& text) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char ch : text) {
    h ^= ch;
    h *= 1099511628211ull;
  }
  return h;
}

std::vector<ManifestEntry> DatasetManifest::split(const std::string& tag) const {
  std::vector<ManifestEntry> out;
  for (const auto& e : entries)
    if (e.split == tag) out.push_back(e);
  return out;
}

PhantomCase generate_case(int label, const GeneratorConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  if (label < 0 || label >= kPhantomClasses) {
    throw std::invalid_argument("generate_case: label out of range");
  }
  const std::int64_t h = cfg.height, w = cfg.width, d = cfg.depth;
  const std::int64_t voxels = h * w * d;
  const double min_count = std::max(8.0, std::ceil(cfg.lesion_frac_min * static_cast<double>(voxels)));
  const double max_count = std::floor(cfg.lesion_frac_max * static_cast<double>(voxels));
  if (min_count > max_count) {
    throw std::invalid_argument("generate_case: extents too small to host a lesion within the fraction bounds");
  }

  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> uni(0.0, 1.0);
  std::normal_distribution<double> unit(0.0, 1.0);

  auto radius_range = [](std::int64_t extent) {
    const double lo = 1.4;
    const double hi = std::max(lo + 0.1, static_cast<double>(extent) / 2.0 - 1.0);
    return std::pair<double, double>(lo, std::min(hi, 4.5));
  };

  std::vector<double> mask(static_cast<std::size_t>(voxels), 0.0);
  std::int64_t count = 0;
  bool placed = false;
  for (int attempt = 0; attempt < 1000 && !placed; ++attempt) {
    const auto [rxl, rxh] = radius_range(h);
    const auto [ryl, ryh] = radius_range(w);
    const auto [rzl, rzh] = radius_range(d);
    const double rx = rxl + uni(rng) * (rxh - rxl);
    const double ry = ryl + uni(rng) * (ryh - ryl);
    const double rz = rzl + uni(rng) * (rzh - rzl);
    const double cx = rx + uni(rng) * (static_cast<double>(h - 1) - 2.0 * rx);
    const double cy = ry + uni(rng) * (static_cast<double>(w - 1) - 2.0 * ry);
    const double cz = rz + uni(rng) * (static_cast<double>(d - 1) - 2.0 * rz);
    std::fill(mask.begin(), mask.end(), 0.0);
    count = 0;
    for (std::int64_t i = 0; i < h; ++i)
      for (std::int64_t j = 0; j < w; ++j)
        for (std::int64_t k = 0; k < d; ++k) {
          const double u = (static_cast<double>(i) - cx) / rx;
          const double v = (static_cast<double>(j) - cy) / ry;
          const double t = (static_cast<double>(k) - cz) / rz;
          if (u * u + v * v + t * t <= 1.0) {
            mask[(i * w + j) * d + k] = 1.0;
            ++count;
          }
        }
    placed = count >= static_cast<std::int64_t>(min_count) &&
             count <= static_cast<std::int64_t>(max_count);
  }
  if (!placed) {
    throw std::invalid_argument("generate_case: no lesion placement satisfied the fraction bounds");
  }

  const double gain = 1.0 + unit(rng) * cfg.intensity_jitter_gain;
  const double offset = unit(rng) * cfg.intensity_jitter_offset;
  // Mistimed-acquisition nuisance: one random phase shows a different
  // class's enhancement level. The corrupted value is plausible on its own;
  // only cross-phase inconsistency reveals it.
  int corrupt_phase = -1;
  int confuser = label;
  if (cfg.phase_corrupt_prob > 0.0 && uni(rng) < cfg.phase_corrupt_prob) {
    corrupt_phase = static_cast<int>(uni(rng) * kPhantomPhases) % kPhantomPhases;
    confuser = static_cast<int>(uni(rng) * (kPhantomClasses - 1)) % (kPhantomClasses - 1);
    if (confuser >= label) ++confuser;
  }

  const auto profiles = cfg.profiles();
  const auto profile = profiles[label];
  PhantomCase pc;
  pc.label = label;
  pc.seed = seed;
  pc.data.h = h;
  pc.data.w = w;
  pc.data.d = d;
  pc.data.mask = mask;
  pc.data.volumes.resize(kPhantomPhases);
  for (int p = 0; p < kPhantomPhases; ++p) {
    auto& vol = pc.data.volumes[p];
    vol.resize(static_cast<std::size_t>(voxels));
    const double blend = p == corrupt_phase ? cfg.phase_corrupt_blend : 0.0;
    const double lesion_base =
        (1.0 - blend) * profile.curve[p] + blend * profiles[confuser].curve[p];
    for (std::int64_t x = 0; x < voxels; ++x) {
      const bool lesion = mask[x] != 0.0;
      const double base = lesion ? lesion_base : cfg.background_curve[p];
      const double noise = unit(rng) * (lesion ? profile.heterogeneity : cfg.background_noise);
      vol[x] = gain * (base + noise) + offset;
    }
  }
  return pc;
}

namespace {

// Largest-remainder apportionment of `total` cases over the three splits.
// Splits with a nonzero fraction but no cases yet take precedence so a
// feasible stratification is never missed.
std::array<int, 3> split_counts(int total, const GeneratorConfig& cfg) {
  const std::array<double, 3> fracs = {cfg.train_frac, cfg.val_frac, cfg.test_frac};
  std::array<int, 3> counts{};
  std::array<double, 3> rem{};
  int assigned = 0;
  for (int i = 0; i < 3; ++i) {
    const double quota = fracs[i] * total;
    counts[i] = static_cast<int>(std::floor(quota));
    rem[i] = quota - counts[i];
    assigned += counts[i];
  }
  while (assigned < total) {
    int best = -1;
    for (int i = 0; i < 3; ++i) {
      if (rem[i] < 0.0) continue;
      if (best < 0) {
        best = i;
        continue;
      }
      const bool i_starved = fracs[i] > 0.0 && counts[i] == 0;
      const bool best_starved = fracs[best] > 0.0 && counts[best] == 0;
      if (i_starved != best_starved ? i_starved : rem[i] > rem[best]) best = i;
    }
    ++counts[best];
    rem[best] = -1.0;
    ++assigned;
  }
  return counts;
}

}  // namespace

DatasetManifest generate_dataset(const GeneratorConfig& cfg, const std::string& out_dir) {
  cfg.validate();
  const auto counts = split_counts(cfg.cases_per_class, cfg);
  const std::array<double, 3> fracs = {cfg.train_frac, cfg.val_frac, cfg.test_frac};
  for (int i = 0; i < 3; ++i) {
    if (fracs[i] > 0.0 && counts[i] == 0) {
      throw std::invalid_argument("generate_dataset: per-class count too small to stratify every split");
    }
  }

  fs::create_directories(fs::path(out_dir) / "cases");

  DatasetManifest manifest;
  manifest.seed = cfg.seed;
  manifest.config_hash = [&] {
    std::ostringstream os;
    os << std::hex << fnv1a64(cfg.canonical_text());
    return os.str();
  }();

  const char* split_names[3] = {"train", "val", "test"};
  int index = 0;
  for (int cls = 0; cls < kPhantomClasses; ++cls) {
    int done = 0;
    for (int s = 0; s < 3; ++s) {
      for (int j = 0; j < counts[s]; ++j, ++done, ++index) {
        char idbuf[16];
        std::snprintf(idbuf, sizeof(idbuf), "case_%04d", index);
        PhantomCase pc = generate_case(cls, cfg, mix_seed(cfg.seed, static_cast<std::uint64_t>(index)));
        pc.id = idbuf;

        const std::string rel = std::string("cases/") + idbuf;
        const fs::path case_dir = fs::path(out_dir) / rel;
        fs::create_directories(case_dir);
        for (int p = 0; p < kPhantomPhases; ++p) {
          save_volume((case_dir / ("phase_" + std::to_string(p) + ".phv")).string(),
                      pc.data.volumes[p], cfg.height, cfg.width, cfg.depth);
        }
        save_volume((case_dir / "mask.phv").string(), pc.data.mask, cfg.height, cfg.width,
                    cfg.depth);

        manifest.entries.push_back({pc.id, cls, rel, split_names[s]});
      }
    }
  }
  save_manifest((fs::path(out_dir) / "manifest.json").string(), manifest);
  return manifest;
}

void save_volume(const std::string& path, const std::vector<double>& values,
                 std::int64_t h, std::int64_t w, std::int64_t d) {
  if (static_cast<std::int64_t>(values.size()) != h * w * d) {
    throw std::invalid_argument("save_volume: value count does not match shape");
  }
  json header;
  header["magic"] = "PHV1";
  header["shape"] = {h, w, d};
  header["dtype"] = "f32le";
  header["spacing_mm"] = {1.5, 1.5, 3.0};
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError(IoError::Kind::io, "cannot open " + path + " for writing");
  f << header.dump() << "\n";
  std::vector<float> payload(values.begin(), values.end());
  f.write(reinterpret_cast<const char*>(payload.data()),
          static_cast<std::streamsize>(payload.size() * sizeof(float)));
  if (!f) throw IoError(IoError::Kind::io, "write failed for " + path);
}

LoadedVolume load_volume(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError(IoError::Kind::io, "cannot open " + path);
  std::string line;
  if (!std::getline(f, line)) throw IoError(IoError::Kind::bad_header, path + ": missing header line");
  json header;
  try {
    header = json::parse(line);
  } catch (const json::exception& e) {
    throw IoError(IoError::Kind::bad_header, path + ": header is not valid JSON: " + e.what());
  }
  if (!header.contains("magic") || header["magic"] != "PHV1") {
    throw IoError(IoError::Kind::bad_magic, path + ": magic mismatch");
  }
  if (!header.contains("shape") || !header["shape"].is_array() || header["shape"].size() != 3 ||
      !header.contains("dtype") || header["dtype"] != "f32le") {
    throw IoError(IoError::Kind::bad_header, path + ": bad shape or dtype");
  }
  LoadedVolume vol;
  vol.h = header["shape"][0].get<std::int64_t>();
  vol.w = header["shape"][1].get<std::int64_t>();
  vol.d = header["shape"][2].get<std::int64_t>();
  if (vol.h <= 0 || vol.w <= 0 || vol.d <= 0) {
    throw IoError(IoError::Kind::bad_header, path + ": nonpositive extent");
  }
  std::string payload((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  const std::size_t expected = static_cast<std::size_t>(vol.h * vol.w * vol.d) * sizeof(float);
  if (payload.size() < expected) {
    throw IoError(IoError::Kind::truncated,
                  path + ": payload holds " + std::to_string(payload.size()) + " bytes, header wants " +
                      std::to_string(expected));
  }
  if (payload.size() > expected) {
    throw IoError(IoError::Kind::length_mismatch,
                  path + ": payload holds " + std::to_string(payload.size()) + " bytes, header wants " +
                      std::to_string(expected));
  }
  std::vector<float> raw(static_cast<std::size_t>(vol.h * vol.w * vol.d));
  std::memcpy(raw.data(), payload.data(), expected);
  vol.values.assign(raw.begin(), raw.end());
  return vol;
}

void save_manifest(const std::string& path, const DatasetManifest& manifest) {
  json j;
  j["seed"] = manifest.seed;
  j["config_hash"] = manifest.config_hash;
  json cases = json::array();
  for (const auto& e : manifest.entries) {
    cases.push_back({{"id", e.id}, {"label", e.label}, {"path", e.path}, {"split", e.split}});
  }
  j["cases"] = cases;
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw IoError(IoError::Kind::io, "cannot open " + path + " for writing");
  f << j.dump(2) << "\n";
}

DatasetManifest load_manifest(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw IoError(IoError::Kind::io, "cannot open " + path);
  json j;
  try {
    f >> j;
  } catch (const json::exception& e) {
    throw IoError(IoError::Kind::bad_header, path + ": manifest is not valid JSON: " + e.what());
  }
  DatasetManifest manifest;
  manifest.seed = j.at("seed").get<std::uint64_t>();
  manifest.config_hash = j.at("config_hash").get<std::string>();
  for (const auto& e : j.at("cases")) {
    manifest.entries.push_back({e.at("id").get<std::string>(), e.at("label").get<int>(),
                                e.at("path").get<std::string>(), e.at("split").get<std::string>()});
  }
  return manifest;
}

PhantomCase load_case(const std::string& dataset_dir, const ManifestEntry& entry) {
  PhantomCase pc;
  pc.id = entry.id;
  pc.label = entry.label;
  const fs::path dir = fs::path(dataset_dir) / entry.path;
  for (int p = 0; p < kPhantomPhases; ++p) {
    auto vol = load_volume((dir / ("phase_" + std::to_string(p) + ".phv")).string());
    if (p == 0) {
      pc.data.h = vol.h;
      pc.data.w = vol.w;
      pc.data.d = vol.d;
    } else if (vol.h != pc.data.h || vol.w != pc.data.w || vol.d != pc.data.d) {
      throw IoError(IoError::Kind::bad_header, entry.id + ": phases disagree on shape");
    }
    pc.data.volumes.push_back(std::move(vol.values));
  }
  auto mask = load_volume((dir / "mask.phv").string());
  if (mask.h != pc.data.h || mask.w != pc.data.w || mask.d != pc.data.d) {
    throw IoError(IoError::Kind::bad_header, entry.id + ": mask shape disagrees with phases");
  }
  pc.data.mask = std::move(mask.values);
  return pc;
}

std::vector<PhantomCase> load_split(const std::string& dataset_dir,
                                    const DatasetManifest& manifest,
                                    const std::string& split) {
  std::vector<PhantomCase> out;
  for (const auto& e : manifest.entries) {
    if (e.split == split) out.push_back(load_case(dataset_dir, e));
  }
  return out;
}

}  // namespace xphase

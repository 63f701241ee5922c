#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "xphase/model.hpp"

namespace xphase {

inline constexpr int kPhantomPhases = 4;
inline constexpr int kPhantomClasses = 5;

// Synthetic enhancement profile of one lesion class: mean lesion intensity
// per phase in normalized units. The five defaults are pairwise separated
// generator parameters shaped after the qualitative phase behaviour of the
// renal subtypes they stand in for; they carry no clinical meaning.
struct SubtypeProfile {
  int cls = 0;
  std::array<double, kPhantomPhases> curve{};
  double heterogeneity = 0.05;
};

struct GeneratorConfig {
  std::int64_t height = 16, width = 16, depth = 8;
  int cases_per_class = 5;
  double train_frac = 0.65, val_frac = 0.15, test_frac = 0.20;
  double heterogeneity = 0.05;       // lesion noise amplitude
  double background_noise = 0.05;
  std::array<double, kPhantomPhases> background_curve{0.3, 0.45, 0.5, 0.4};
  double lesion_frac_min = 0.005, lesion_frac_max = 0.10;
  double separability_margin = 0.1;  // min pairwise L2 distance of curves
  // Per-case global gain/offset nuisance applied to every phase. Zero by
  // default so the noiseless nearest-curve guarantee holds.
  double intensity_jitter_gain = 0.0;
  double intensity_jitter_offset = 0.0;
  // With this probability one randomly chosen phase per case is washed out
  // toward the background curve (acquisition-failure nuisance). The phase
  // carrying the failure varies per case, so classifiers must weight phases
  // by content rather than by position. Off by default.
  double phase_corrupt_prob = 0.0;
  double phase_corrupt_blend = 0.7;
  std::uint64_t seed = 2024;

  std::array<SubtypeProfile, kPhantomClasses> profiles() const;
  void validate() const;
  // Sorted key=value lines; hashed into the manifest.
  std::string canonical_text() const;
};

struct PhantomCase {
  std::string id;
  int label = 0;
  VolumeCase data;
  std::uint64_t seed = 0;
};

struct ManifestEntry {
  std::string id;
  int label = 0;
  std::string path;   // case directory, relative to the dataset root
  std::string split;  // train | val | test
  bool operator==(const ManifestEntry&) const = default;
};

struct DatasetManifest {
  std::uint64_t seed = 0;
  std::string config_hash;
  std::vector<ManifestEntry> entries;
  bool operator==(const DatasetManifest&) const = default;

  std::vector<ManifestEntry> split(const std::string& tag) const;
};

// One ellipsoidal lesion over a noisy background; deterministic per seed.
// Throws std::invalid_argument when the extents cannot host a lesion within
// the configured volume-fraction bounds.
PhantomCase generate_case(int label, const GeneratorConfig& cfg, std::uint64_t seed);

// Balanced classes, stratified split, volumes written under out_dir/cases/.
// Returns the manifest, which is also written to out_dir/manifest.json.
DatasetManifest generate_dataset(const GeneratorConfig& cfg, const std::string& out_dir);

// PHV1 volume file: one JSON header line (magic, shape, dtype f32le,
// voxel spacing), then shape-product little-endian 32-bit floats.
void save_volume(const std::string& path, const std::vector<double>& values,
                 std::int64_t h, std::int64_t w, std::int64_t d);

struct LoadedVolume {
  std::int64_t h = 0, w = 0, d = 0;
  std::vector<double> values;
};
LoadedVolume load_volume(const std::string& path);  // throws IoError

void save_manifest(const std::string& path, const DatasetManifest& manifest);
DatasetManifest load_manifest(const std::string& path);

PhantomCase load_case(const std::string& dataset_dir, const ManifestEntry& entry);
std::vector<PhantomCase> load_split(const std::string& dataset_dir,
                                    const DatasetManifest& manifest,
                                    const std::string& split);

std::uint64_t fnv1a64(const std::string& text);

}  // namespace xphase

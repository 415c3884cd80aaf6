#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "n2n/image.hpp"

namespace n2n::data {

enum LabelClass : std::uint8_t { kBackground = 0, kTissue1 = 1, kTissue2 = 2, kTumor = 3 };
inline constexpr int kNumClasses = 4;

struct Landmark {
  std::string name;
  double x = 0.0;
  double y = 0.0;
  double z = 0.0;
};

struct PhantomSubject {
  std::string subject_id;
  Volume vol_a;
  Volume vol_b;
  Volume labels;
  std::vector<Landmark> landmarks;
};

struct PhantomSize {
  int depth = 16;
  int height = 64;
  int width = 64;
};

inline constexpr PhantomSize kMinPhantomSize{16, 64, 64};
inline constexpr double kPhantomNoiseSigma = 5.0;

// Class -> mean intensity per modality. Index by LabelClass; the ventricle is
// labeled background but carries its own intensity.
struct ModalityProfile {
  double outside;
  double ventricle;
  double tissue1;
  double tissue2;
  double tumor;
};
inline constexpr ModalityProfile kModalityA{0.0, 0.0, 180.0, 110.0, 0.0};
inline constexpr ModalityProfile kModalityB{0.0, 190.0, 70.0, 140.0, 250.0};

// Nested ellipsoid head phantom. Deterministic in (seed, size, tumor_probability).
PhantomSubject generate_phantom_subject(std::uint64_t seed, const PhantomSize& size, double tumor_probability,
                                        const std::string& subject_id = "");

struct SubjectEntry {
  std::string id;
  std::map<std::string, std::string> modalities;  // modality -> path relative to the manifest
  std::string labels;
  std::string landmarks;
};

struct DatasetManifest {
  std::filesystem::path root;  // directory holding the manifest; not serialized
  std::vector<SubjectEntry> subjects;
  std::map<std::string, std::vector<std::string>> splits;  // train, test, partA, partB

  const SubjectEntry& subject(const std::string& id) const;
  const std::vector<std::string>& split(const std::string& name) const;
  std::filesystem::path resolve(const std::string& relative) const { return root / relative; }

  std::string to_json() const;
  static DatasetManifest from_json(const std::string& text, const std::filesystem::path& root);
  void save(const std::filesystem::path& manifest_path) const;
  static DatasetManifest load(const std::filesystem::path& manifest_path);

  // Throws ContractError when splits overlap or PartA/PartB do not tile train.
  void validate() const;
};

inline constexpr double kTrainFraction = 0.8;

// train = floor(0.8 n), test = rest; partA/partB halve train (partA gets the
// extra subject when odd).
std::map<std::string, std::vector<std::string>> assign_splits(const std::vector<std::string>& ids,
                                                              std::uint64_t seed);

// Writes {id}_A.nii, {id}_B.nii, {id}_labels.nii, {id}_landmarks.csv and
// manifest.json into out_dir.
DatasetManifest generate_corpus(std::uint64_t seed, int n_subjects, const PhantomSize& size,
                                const std::filesystem::path& out_dir, double tumor_probability = 1.0);

std::vector<Landmark> read_landmarks(const std::filesystem::path& path);
void write_landmarks(const std::vector<Landmark>& landmarks, const std::filesystem::path& path);

struct LoadedSubject {
  std::string id;
  Volume vol_a;
  Volume vol_b;
  Volume labels;
  std::vector<Landmark> landmarks;
};

LoadedSubject load_subject(const DatasetManifest& manifest, const std::string& id);

}  // namespace n2n::data

#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "n2n/image.hpp"
#include "n2n/phantom.hpp"

namespace n2n::reg {

// Per-pixel displacement (dy, dx). Pull-back: warped(p) = moving(p + d(p)).
class DeformationField {
 public:
  DeformationField() = default;
  DeformationField(int height, int width);  // zero field

  int height() const { return height_; }
  int width() const { return width_; }
  float& dy(int y, int x) { return data_[2 * index(y, x)]; }
  float& dx(int y, int x) { return data_[2 * index(y, x) + 1]; }
  float dy(int y, int x) const { return data_[2 * index(y, x)]; }
  float dx(int y, int x) const { return data_[2 * index(y, x) + 1]; }
  // interleaved (dy, dx) pairs, row-major
  std::vector<float>& raw() { return data_; }
  const std::vector<float>& raw() const { return data_; }

  // Bilinear displacement at a real-valued position (clamped to the grid).
  std::array<double, 2> sample(double y, double x) const;
  bool finite() const;
  double mean_magnitude() const;

  bool operator==(const DeformationField&) const = default;

 private:
  std::size_t index(int y, int x) const {
    return static_cast<std::size_t>(y) * static_cast<std::size_t>(width_) + static_cast<std::size_t>(x);
  }
  int height_ = 0;
  int width_ = 0;
  std::vector<float> data_;
};

inline constexpr char kFieldMagic[7] = {'N', '2', 'N', 'F', 'L', 'D', '1'};

// "N2NFLD1", u32 H, u32 W (little-endian), then H*W float32 (dy, dx) pairs.
void write_field(const DeformationField& field, const std::filesystem::path& path);
DeformationField read_field(const std::filesystem::path& path);

// T(p) = A (p - c) + c + t on (y, x) pixel coordinates, c = image centre.
struct AffineTransform {
  std::array<double, 4> a{1.0, 0.0, 0.0, 1.0};  // row-major 2x2 acting on (y, x)
  std::array<double, 2> t{0.0, 0.0};           // (ty, tx)

  double det() const { return a[0] * a[3] - a[1] * a[2]; }
  std::array<double, 2> apply(double y, double x, double cy, double cx) const;
  AffineTransform inverse() const;
};

// Parameterization searched by the builtin backend.
struct AffineParams {
  double theta = 0.0;  // radians
  double log_sy = 0.0;
  double log_sx = 0.0;
  double shear = 0.0;
  double ty = 0.0;
  double tx = 0.0;

  AffineTransform to_transform() const;
};

AffineTransform rotation(double radians);
AffineTransform translation(double ty, double tx);

// d(p) = T(p) - p.
DeformationField affine_to_field(const AffineTransform& t, int height, int width);

// w d1 + (1 - w) d2.
DeformationField fuse_fields(const DeformationField& d1, const DeformationField& d2, double w);

enum class Interp { Bilinear, Nearest };

// Out-of-bounds samples read 0.
Image warp(const Image& image, const DeformationField& field, Interp interp = Interp::Bilinear);
LabelMap warp(const LabelMap& labels, const DeformationField& field);

// Per-pixel vote over one-hot maps; ties go to the lowest class id.
LabelMap multi_atlas_combine(const std::vector<LabelMap>& warped_labels, int num_classes);

// Maps each moving landmark into fixed space through the field of slice
// round(z) (z unchanged) and returns the mean Euclidean distance to the
// same-named fixed landmark, in voxels.
double landmark_dist(const std::vector<DeformationField>& slice_fields, const std::vector<data::Landmark>& fixed,
                     const std::vector<data::Landmark>& moving);
double landmark_dist(const DeformationField& field, const std::vector<data::Landmark>& fixed,
                     const std::vector<data::Landmark>& moving);

// Inverse of the pull-back map at moving point (y, x): p with p + d(p) = m.
std::array<double, 2> map_moving_point(const DeformationField& field, double y, double x);

// Grid search w in {0, step, ..., 1} maximizing the mean of the per-fold
// validation scores; ties go to the larger w.
double select_fusion_weight(const std::vector<std::function<double(double)>>& folds, double grid_step = 0.01);
std::vector<double> weight_grid(double grid_step);

// ---------------------------------------------------------------- backends

enum class Cost { NCC, MI };

struct BuiltinOptions {
  int levels = 3;
  int max_iterations = 200;  // sweeps per level
  double tolerance = 1e-6;
  int mi_bins = 64;
};

struct RegistrationResult {
  DeformationField field;
  AffineParams params;  // builtin backend only
  bool converged = true;
  double cost = 0.0;
  int iterations = 0;
};

double ncc(const Image& a, const Image& b);
double mutual_information_soft(const Image& a, const Image& b, int bins);

// Multi-resolution coordinate descent with step halving over AffineParams.
RegistrationResult register_affine(const Image& fixed, const Image& moving, Cost cost,
                                   const BuiltinOptions& options = {});

// Subprocess contract: `command fixed.png moving.png out.fld`.
RegistrationResult register_external(const std::string& command, const Image& fixed, const Image& moving,
                                     const std::filesystem::path& work_dir);

struct Backend {
  std::string name = "builtin-affine";  // or "external"
  std::string command;                   // for external
  BuiltinOptions builtin;
  std::filesystem::path work_dir;        // scratch directory for external runs
};

Backend parse_backend(const std::string& spec);

RegistrationResult register_images(const Image& fixed, const Image& moving, const Backend& backend,
                                   bool cross_modality);

// ------------------------------------------------------------------ harness

// One subject in the 128^3 registration space.
struct HarnessSubject {
  std::string id;
  std::vector<Image> given;       // modality A slices
  std::vector<Image> target;      // real modality B slices
  std::vector<Image> translated;  // G(A) slices
  std::vector<LabelMap> labels;
  std::vector<data::Landmark> landmarks;
};

struct HarnessConfig {
  double angle_deg = 30.0;
  double grid_step = 0.01;
  int folds = 5;
  int slice_step = 1;  // register every n-th slice
  std::vector<int> structures = {1, 2};
  // Real B against synthesized B: intensities need not match one to one, so
  // MI is used unless this is false (then NCC).
  bool translated_pair_mi = true;
  Backend backend;
};

struct HarnessRow {
  std::string label;  // "w=0", "w*", "w=1"
  double weight = 0.0;
  std::map<std::string, double> dice;  // structure name -> mean Dice
  double dist = 0.0;
};

struct HarnessReport {
  double angle_deg = 0.0;
  std::map<std::string, double> w_star;  // per structure plus "mean"
  std::vector<HarnessRow> rows;
  double dist_unregistered = 0.0;
  double rotation_given_deg = 0.0;       // median recovered angle, given pair
  double rotation_translated_deg = 0.0;  // median recovered angle, translated pair
  int slices = 0;
  int unconverged = 0;
  std::string to_json() const;
};

// Rotates every fixed-space image by the angle, registers A to rotated A (d2)
// and B to rotated G(A) (d1), fuses, and scores Dice and landmark Dist for
// w in {0, w*, 1}. w* is chosen per structure by slice-fold validation.
HarnessReport known_transform_harness(const std::vector<HarnessSubject>& subjects, const HarnessConfig& config);

std::string structure_name(int class_id);

}  // namespace n2n::reg

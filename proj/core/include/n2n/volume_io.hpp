#pragma once

#include <array>
#include <filesystem>
#include <vector>

#include "n2n/image.hpp"
#include "n2n/tensor.hpp"

namespace n2n::io {

// Minimal NIfTI-1 support: single-file (.nii), uncompressed, little-endian,
// datatypes uint8 (2), int16 (4) and float32 (16). Anything else is rejected.
Volume read_nifti(const std::filesystem::path& path);
void write_nifti(const Volume& volume, const std::filesystem::path& path);

inline constexpr float kNiftiVoxOffset = 352.0f;

// 8-bit grayscale PNG. Images are rounded and clamped to [0,255] on write.
Image read_png(const std::filesystem::path& path);
void write_png(const Image& image, const std::filesystem::path& path);
LabelMap read_label_png(const std::filesystem::path& path);
void write_label_png(const LabelMap& labels, const std::filesystem::path& path);

// Slices along z: slice k is data[k,:,:].
std::vector<Image> slice_volume(const Volume& volume);
std::vector<LabelMap> slice_labels(const Volume& labels);
Volume stack_slices(const std::vector<Image>& slices, DType dtype);

// Bilinear resampling with corner-aligned sampling: output (0,0) and
// (out_h-1,out_w-1) land exactly on the input corners.
Image resize_bilinear(const Image& image, int out_h, int out_w);
LabelMap resize_nearest(const LabelMap& labels, int out_h, int out_w);

// p -> (p/255 - 0.5)/0.5. Input must lie in [0,255].
ImageTensor normalize(const Image& image_u8);
// Rounded inverse of normalize, clamped to [0,255]. Uses channel `channel`.
Image denormalize(const ImageTensor& tensor, int channel = 0);

// Generation pipeline: slice, resize to side x side, quantize to 8 bits.
std::vector<Image> generation_slices(const Volume& volume, int side = 256);
std::vector<LabelMap> generation_label_slices(const Volume& labels, int side = 256);

// Inclusive voxel bounding box [lo, hi] per axis (z, y, x).
struct CropBox {
  std::array<int, 3> lo{};
  std::array<int, 3> hi{};
};

// Tight box around voxels with intensity > threshold. Throws ContractError if
// there is no such voxel.
CropBox foreground_box(const Volume& volume, float threshold = 0.0f);

// Crops to `box` then resizes to side^3 (trilinear, corner aligned; nearest
// for label volumes).
Volume crop_resize(const Volume& volume, const CropBox& box, int side, bool nearest = false);

// Registration pipeline: crop to the foreground (> 0) and resize to 128^3.
Volume brain_cube_preprocess(const Volume& volume, int side = 128);

// Maps a voxel coordinate (z,y,x) of the source volume into crop_resize space.
std::array<double, 3> map_to_cube(const std::array<double, 3>& zyx, const CropBox& box, int side);

}  // namespace n2n::io

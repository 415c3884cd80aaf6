#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string_view>
#include <vector>

namespace n2n {

// Single-channel 2D image, row-major. Intensities are on the [0,255] scale
// unless stated otherwise.
class Image {
 public:
  Image() = default;
  Image(int height, int width, float fill = 0.0f);
  Image(int height, int width, std::vector<float> values);

  int height() const { return height_; }
  int width() const { return width_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  float& operator()(int y, int x) { return data_[index(y, x)]; }
  float operator()(int y, int x) const { return data_[index(y, x)]; }

  std::span<float> values() { return data_; }
  std::span<const float> values() const { return data_; }

  bool operator==(const Image&) const = default;

 private:
  std::size_t index(int y, int x) const {
    return static_cast<std::size_t>(y) * static_cast<std::size_t>(width_) + static_cast<std::size_t>(x);
  }

  int height_ = 0;
  int width_ = 0;
  std::vector<float> data_;
};

// Integer class map (0 = background).
class LabelMap {
 public:
  LabelMap() = default;
  LabelMap(int height, int width, std::uint8_t fill = 0);

  int height() const { return height_; }
  int width() const { return width_; }
  std::size_t size() const { return data_.size(); }

  std::uint8_t& operator()(int y, int x) { return data_[index(y, x)]; }
  std::uint8_t operator()(int y, int x) const { return data_[index(y, x)]; }

  std::span<std::uint8_t> values() { return data_; }
  std::span<const std::uint8_t> values() const { return data_; }

  bool operator==(const LabelMap&) const = default;

 private:
  std::size_t index(int y, int x) const {
    return static_cast<std::size_t>(y) * static_cast<std::size_t>(width_) + static_cast<std::size_t>(x);
  }

  int height_ = 0;
  int width_ = 0;
  std::vector<std::uint8_t> data_;
};

enum class DType : int { UInt8 = 2, Int16 = 4, Float32 = 16 };

std::string_view dtype_name(DType dtype);

// 3D scalar grid stored (depth, height, width) with z slowest. Values are held
// as float regardless of dtype; every supported dtype is exactly representable.
class Volume {
 public:
  Volume() = default;
  Volume(int depth, int height, int width, DType dtype, float fill = 0.0f);

  int depth() const { return depth_; }
  int height() const { return height_; }
  int width() const { return width_; }
  DType dtype() const { return dtype_; }
  void set_dtype(DType dtype) { dtype_ = dtype; }
  std::size_t size() const { return data_.size(); }

  float& operator()(int z, int y, int x) { return data_[index(z, y, x)]; }
  float operator()(int z, int y, int x) const { return data_[index(z, y, x)]; }

  std::span<float> values() { return data_; }
  std::span<const float> values() const { return data_; }

  bool operator==(const Volume&) const = default;

 private:
  std::size_t index(int z, int y, int x) const {
    return (static_cast<std::size_t>(z) * static_cast<std::size_t>(height_) + static_cast<std::size_t>(y)) *
               static_cast<std::size_t>(width_) +
           static_cast<std::size_t>(x);
  }

  int depth_ = 0;
  int height_ = 0;
  int width_ = 0;
  DType dtype_ = DType::UInt8;
  std::vector<float> data_;
};

// Rounds and clamps to [0,255] as 8-bit PNG storage would.
Image quantize_u8(const Image& image);

}  // namespace n2n

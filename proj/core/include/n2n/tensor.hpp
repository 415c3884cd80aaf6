#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdlib>
#include <new>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "n2n/error.hpp"

namespace n2n {

// 64-byte aligned storage. Vectorized kernels pick their peeling by address,
// so alignment must not vary between runs or results drift in the last bits.
inline constexpr std::size_t kBufferAlignment = 64;

template <typename T>
struct AlignedAllocator {
  using value_type = T;
  AlignedAllocator() = default;
  template <typename U>
  AlignedAllocator(const AlignedAllocator<U>&) {}
  T* allocate(std::size_t n) {
    const std::size_t bytes = (n * sizeof(T) + kBufferAlignment - 1) / kBufferAlignment * kBufferAlignment;
    void* p = std::aligned_alloc(kBufferAlignment, bytes == 0 ? kBufferAlignment : bytes);
    if (!p) throw std::bad_alloc();
    return static_cast<T*>(p);
  }
  void deallocate(T* p, std::size_t) { std::free(p); }
  template <typename U>
  bool operator==(const AlignedAllocator<U>&) const { return true; }
};

template <typename T>
using AlignedVector = std::vector<T, AlignedAllocator<T>>;

// Dense (channels, height, width) activation tensor for a single sample.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  Tensor(int channels, int height, int width, T fill = T(0))
      : channels_(channels), height_(height), width_(width) {
    if (channels < 1 || height < 1 || width < 1) {
      throw ShapeError("tensor dimensions must be positive");
    }
    data_.assign(static_cast<std::size_t>(channels) * static_cast<std::size_t>(height) *
                     static_cast<std::size_t>(width),
                 fill);
  }

  int channels() const { return channels_; }
  int height() const { return height_; }
  int width() const { return width_; }
  std::size_t plane() const { return static_cast<std::size_t>(height_) * static_cast<std::size_t>(width_); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  T* channel(int c) { return data_.data() + static_cast<std::size_t>(c) * plane(); }
  const T* channel(int c) const { return data_.data() + static_cast<std::size_t>(c) * plane(); }

  T& operator()(int c, int y, int x) { return data_[offset(c, y, x)]; }
  T operator()(int c, int y, int x) const { return data_[offset(c, y, x)]; }

  std::span<T> values() { return data_; }
  std::span<const T> values() const { return data_; }

  bool same_shape(const Tensor& other) const {
    return channels_ == other.channels_ && height_ == other.height_ && width_ == other.width_;
  }

  std::string shape_string() const {
    return std::to_string(channels_) + "x" + std::to_string(height_) + "x" + std::to_string(width_);
  }

  bool operator==(const Tensor&) const = default;

 private:
  std::size_t offset(int c, int y, int x) const {
    return static_cast<std::size_t>(c) * plane() + static_cast<std::size_t>(y) * static_cast<std::size_t>(width_) +
           static_cast<std::size_t>(x);
  }

  int channels_ = 0;
  int height_ = 0;
  int width_ = 0;
  AlignedVector<T> data_;
};

// Model I/O image: values in [-1,1], C in {1,3}.
using ImageTensor = Tensor<float>;

template <typename T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.height() != b.height() || a.width() != b.width()) {
    throw ShapeError("concat_channels: spatial mismatch " + a.shape_string() + " vs " + b.shape_string());
  }
  Tensor<T> out(a.channels() + b.channels(), a.height(), a.width());
  auto dst = out.values();
  std::copy(a.values().begin(), a.values().end(), dst.begin());
  std::copy(b.values().begin(), b.values().end(), dst.begin() + static_cast<std::ptrdiff_t>(a.size()));
  return out;
}

// Splits channels [0, first) and [first, C) of `t`.
template <typename T>
std::pair<Tensor<T>, Tensor<T>> split_channels(const Tensor<T>& t, int first) {
  if (first <= 0 || first >= t.channels()) {
    throw ShapeError("split_channels: split point out of range");
  }
  Tensor<T> a(first, t.height(), t.width());
  Tensor<T> b(t.channels() - first, t.height(), t.width());
  auto src = t.values();
  std::copy(src.begin(), src.begin() + static_cast<std::ptrdiff_t>(a.size()), a.values().begin());
  std::copy(src.begin() + static_cast<std::ptrdiff_t>(a.size()), src.end(), b.values().begin());
  return {std::move(a), std::move(b)};
}

template <typename To, typename From>
Tensor<To> tensor_cast(const Tensor<From>& t) {
  Tensor<To> out(t.channels(), t.height(), t.width());
  auto src = t.values();
  auto dst = out.values();
  for (std::size_t i = 0; i < src.size(); ++i) dst[i] = static_cast<To>(src[i]);
  return out;
}

}  // namespace n2n

#include "n2n/image.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "n2n/error.hpp"

namespace n2n {

namespace {

void require_positive(int value, const char* what) {
  if (value < 1) {
    throw ShapeError(std::string(what) + " must be >= 1, got " + std::to_string(value));
  }
}

}  // namespace

Image::Image(int height, int width, float fill) : height_(height), width_(width) {
  require_positive(height, "image height");
  require_positive(width, "image width");
  data_.assign(static_cast<std::size_t>(height) * static_cast<std::size_t>(width), fill);
}

Image::Image(int height, int width, std::vector<float> values)
    : height_(height), width_(width), data_(std::move(values)) {
  require_positive(height, "image height");
  require_positive(width, "image width");
  if (data_.size() != static_cast<std::size_t>(height) * static_cast<std::size_t>(width)) {
    throw ShapeError("image buffer size does not match " + std::to_string(height) + "x" + std::to_string(width));
  }
}

LabelMap::LabelMap(int height, int width, std::uint8_t fill) : height_(height), width_(width) {
  require_positive(height, "label map height");
  require_positive(width, "label map width");
  data_.assign(static_cast<std::size_t>(height) * static_cast<std::size_t>(width), fill);
}

std::string_view dtype_name(DType dtype) {
  switch (dtype) {
    case DType::UInt8:
      return "uint8";
    case DType::Int16:
      return "int16";
    case DType::Float32:
      return "float32";
  }
  return "unknown";
}

Volume::Volume(int depth, int height, int width, DType dtype, float fill)
    : depth_(depth), height_(height), width_(width), dtype_(dtype) {
  require_positive(depth, "volume depth");
  require_positive(height, "volume height");
  require_positive(width, "volume width");
  data_.assign(static_cast<std::size_t>(depth) * static_cast<std::size_t>(height) * static_cast<std::size_t>(width),
               fill);
}

Image quantize_u8(const Image& image) {
  Image out = image;
  for (float& v : out.values()) {
    v = std::clamp(std::round(v), 0.0f, 255.0f);
  }
  return out;
}

}  // namespace n2n

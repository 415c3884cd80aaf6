#include "n2n/volume_io.hpp"

#include <png.h>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <limits>
#include <string>

#include "n2n/error.hpp"

namespace n2n::io {

static_assert(std::endian::native == std::endian::little, "NIfTI I/O assumes a little-endian host");

namespace {

constexpr int kHeaderSize = 348;

template <typename V>
V load(const std::uint8_t* header, std::size_t offset) {
  V value;
  std::memcpy(&value, header + offset, sizeof(V));
  return value;
}

template <typename V>
void store(std::uint8_t* header, std::size_t offset, V value) {
  std::memcpy(header + offset, &value, sizeof(V));
}

int bytes_per_voxel(DType dtype) {
  switch (dtype) {
    case DType::UInt8:
      return 1;
    case DType::Int16:
      return 2;
    case DType::Float32:
      return 4;
  }
  return 0;
}

// Corner-aligned source coordinate for output index i.
double source_coord(int i, int in, int out) {
  if (out == 1) return 0.5 * (in - 1);
  return static_cast<double>(i) * static_cast<double>(in - 1) / static_cast<double>(out - 1);
}

struct Tap {
  int i0;
  int i1;
  double frac;
};

Tap make_tap(double s, int limit) {
  s = std::clamp(s, 0.0, static_cast<double>(limit - 1));
  const int i0 = static_cast<int>(std::floor(s));
  const int i1 = std::min(i0 + 1, limit - 1);
  return {i0, i1, s - i0};
}

// a + f*(b-a) keeps constants exact.
inline double lerp(double a, double b, double f) { return a + f * (b - a); }

}  // namespace

Volume read_nifti(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open NIfTI file: " + path.string());

  std::uint8_t header[kHeaderSize];
  in.read(reinterpret_cast<char*>(header), kHeaderSize);
  if (in.gcount() != kHeaderSize) throw IoError("truncated NIfTI header: " + path.string());

  const auto sizeof_hdr = load<std::int32_t>(header, 0);
  if (sizeof_hdr != kHeaderSize) {
    if (__builtin_bswap32(static_cast<std::uint32_t>(sizeof_hdr)) == static_cast<std::uint32_t>(kHeaderSize)) {
      throw UnsupportedError("big-endian NIfTI is not supported: " + path.string());
    }
    throw FormatError("bad NIfTI sizeof_hdr " + std::to_string(sizeof_hdr) + ": " + path.string());
  }
  if (std::memcmp(header + 344, "n+1\0", 4) != 0) {
    if (std::memcmp(header + 344, "ni1\0", 4) == 0) {
      throw FormatError("two-file NIfTI (ni1) is not supported, expected single-file n+1: " + path.string());
    }
    throw FormatError("missing NIfTI magic n+1: " + path.string());
  }

  const auto ndim = load<std::int16_t>(header, 40);
  if (ndim < 1 || ndim > 7) throw FormatError("invalid dim[0]=" + std::to_string(ndim));
  std::int64_t dims[8] = {1, 1, 1, 1, 1, 1, 1, 1};
  for (int i = 1; i <= ndim; ++i) {
    dims[i] = load<std::int16_t>(header, 40 + 2 * static_cast<std::size_t>(i));
    if (dims[i] < 1) throw FormatError("invalid dim[" + std::to_string(i) + "]=" + std::to_string(dims[i]));
  }
  for (int i = 4; i <= 7; ++i) {
    if (dims[i] != 1) throw UnsupportedError("only 3D NIfTI volumes are supported (dim[" + std::to_string(i) + "]>1)");
  }

  const auto code = load<std::int16_t>(header, 70);
  DType dtype;
  switch (code) {
    case 2:
      dtype = DType::UInt8;
      break;
    case 4:
      dtype = DType::Int16;
      break;
    case 16:
      dtype = DType::Float32;
      break;
    default:
      throw UnsupportedError("unsupported NIfTI datatype code " + std::to_string(code) +
                             " (supported: 2 uint8, 4 int16, 16 float32)");
  }

  const auto vox_offset = load<float>(header, 108);
  if (!(vox_offset >= static_cast<float>(kHeaderSize))) {
    throw FormatError("invalid vox_offset " + std::to_string(vox_offset));
  }
  const float slope = load<float>(header, 112);
  const float inter = load<float>(header, 116);

  Volume volume(static_cast<int>(dims[3]), static_cast<int>(dims[2]), static_cast<int>(dims[1]), dtype);
  const std::size_t count = volume.size();
  const std::size_t nbytes = count * static_cast<std::size_t>(bytes_per_voxel(dtype));
  std::vector<std::uint8_t> raw(nbytes);
  in.seekg(static_cast<std::streamoff>(vox_offset), std::ios::beg);
  in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(nbytes));
  if (static_cast<std::size_t>(in.gcount()) != nbytes) {
    throw IoError("truncated NIfTI data section: expected " + std::to_string(nbytes) + " bytes, got " +
                  std::to_string(in.gcount()) + " in " + path.string());
  }

  auto values = volume.values();
  for (std::size_t i = 0; i < count; ++i) {
    switch (dtype) {
      case DType::UInt8:
        values[i] = raw[i];
        break;
      case DType::Int16:
        values[i] = load<std::int16_t>(raw.data(), 2 * i);
        break;
      case DType::Float32:
        values[i] = load<float>(raw.data(), 4 * i);
        break;
    }
  }

  const bool scaled = slope != 0.0f && std::isfinite(slope) && !(slope == 1.0f && inter == 0.0f);
  if (scaled) {
    for (float& v : values) v = v * slope + inter;
    volume.set_dtype(DType::Float32);
  }
  return volume;
}

void write_nifti(const Volume& volume, const std::filesystem::path& path) {
  if (volume.size() == 0) throw ShapeError("refusing to write a zero-sized volume");
  if (volume.depth() > std::numeric_limits<std::int16_t>::max() ||
      volume.height() > std::numeric_limits<std::int16_t>::max() ||
      volume.width() > std::numeric_limits<std::int16_t>::max()) {
    throw ShapeError("volume too large for NIfTI-1 dims");
  }

  std::uint8_t header[kHeaderSize] = {};
  store<std::int32_t>(header, 0, kHeaderSize);
  header[38] = 'r';  // regular
  store<std::int16_t>(header, 40, 3);
  store<std::int16_t>(header, 42, static_cast<std::int16_t>(volume.width()));
  store<std::int16_t>(header, 44, static_cast<std::int16_t>(volume.height()));
  store<std::int16_t>(header, 46, static_cast<std::int16_t>(volume.depth()));
  for (int i = 4; i < 8; ++i) store<std::int16_t>(header, 40 + 2 * static_cast<std::size_t>(i), 1);
  store<std::int16_t>(header, 70, static_cast<std::int16_t>(volume.dtype()));
  store<std::int16_t>(header, 72, static_cast<std::int16_t>(8 * bytes_per_voxel(volume.dtype())));
  for (int i = 0; i < 8; ++i) store<float>(header, 76 + 4 * static_cast<std::size_t>(i), 1.0f);
  store<float>(header, 108, kNiftiVoxOffset);
  store<float>(header, 112, 1.0f);
  store<float>(header, 116, 0.0f);
  std::memcpy(header + 344, "n+1\0", 4);

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open for writing: " + path.string());
  out.write(reinterpret_cast<const char*>(header), kHeaderSize);
  const char extension[4] = {0, 0, 0, 0};
  out.write(extension, 4);

  const auto values = volume.values();
  std::vector<std::uint8_t> raw(values.size() * static_cast<std::size_t>(bytes_per_voxel(volume.dtype())));
  for (std::size_t i = 0; i < values.size(); ++i) {
    const float v = values[i];
    switch (volume.dtype()) {
      case DType::UInt8:
        raw[i] = static_cast<std::uint8_t>(std::clamp(std::round(v), 0.0f, 255.0f));
        break;
      case DType::Int16:
        store<std::int16_t>(raw.data(), 2 * i, static_cast<std::int16_t>(std::clamp(std::round(v), -32768.0f, 32767.0f)));
        break;
      case DType::Float32:
        store<float>(raw.data(), 4 * i, v);
        break;
    }
  }
  out.write(reinterpret_cast<const char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
  if (!out) throw IoError("write failed: " + path.string());
}

namespace {

std::vector<std::uint8_t> read_gray_png(const std::filesystem::path& path, int& height, int& width) {
  png_image image;
  std::memset(&image, 0, sizeof(image));
  image.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&image, path.c_str())) {
    throw IoError("cannot read PNG " + path.string() + ": " + image.message);
  }
  image.format = PNG_FORMAT_GRAY;
  std::vector<std::uint8_t> buffer(PNG_IMAGE_SIZE(image));
  if (!png_image_finish_read(&image, nullptr, buffer.data(), 0, nullptr)) {
    std::string message = image.message;
    png_image_free(&image);
    throw IoError("cannot decode PNG " + path.string() + ": " + message);
  }
  height = static_cast<int>(image.height);
  width = static_cast<int>(image.width);
  return buffer;
}

void write_gray_png(const std::uint8_t* pixels, int height, int width, const std::filesystem::path& path) {
  png_image image;
  std::memset(&image, 0, sizeof(image));
  image.version = PNG_IMAGE_VERSION;
  image.width = static_cast<png_uint_32>(width);
  image.height = static_cast<png_uint_32>(height);
  image.format = PNG_FORMAT_GRAY;
  if (!png_image_write_to_file(&image, path.c_str(), 0, pixels, 0, nullptr)) {
    throw IoError("cannot write PNG " + path.string() + ": " + image.message);
  }
}

}  // namespace

Image read_png(const std::filesystem::path& path) {
  int h = 0;
  int w = 0;
  const auto pixels = read_gray_png(path, h, w);
  std::vector<float> values(pixels.begin(), pixels.end());
  return Image(h, w, std::move(values));
}

void write_png(const Image& image, const std::filesystem::path& path) {
  std::vector<std::uint8_t> pixels(image.size());
  const auto values = image.values();
  for (std::size_t i = 0; i < pixels.size(); ++i) {
    pixels[i] = static_cast<std::uint8_t>(std::clamp(std::round(values[i]), 0.0f, 255.0f));
  }
  write_gray_png(pixels.data(), image.height(), image.width(), path);
}

LabelMap read_label_png(const std::filesystem::path& path) {
  int h = 0;
  int w = 0;
  const auto pixels = read_gray_png(path, h, w);
  LabelMap labels(h, w);
  std::copy(pixels.begin(), pixels.end(), labels.values().begin());
  return labels;
}

void write_label_png(const LabelMap& labels, const std::filesystem::path& path) {
  write_gray_png(labels.values().data(), labels.height(), labels.width(), path);
}

std::vector<Image> slice_volume(const Volume& volume) {
  std::vector<Image> slices;
  slices.reserve(static_cast<std::size_t>(volume.depth()));
  const std::size_t plane = static_cast<std::size_t>(volume.height()) * static_cast<std::size_t>(volume.width());
  const auto values = volume.values();
  for (int z = 0; z < volume.depth(); ++z) {
    auto first = values.begin() + static_cast<std::ptrdiff_t>(z * plane);
    slices.emplace_back(volume.height(), volume.width(),
                        std::vector<float>(first, first + static_cast<std::ptrdiff_t>(plane)));
  }
  return slices;
}

std::vector<LabelMap> slice_labels(const Volume& labels) {
  std::vector<LabelMap> slices;
  slices.reserve(static_cast<std::size_t>(labels.depth()));
  for (int z = 0; z < labels.depth(); ++z) {
    LabelMap map(labels.height(), labels.width());
    for (int y = 0; y < labels.height(); ++y) {
      for (int x = 0; x < labels.width(); ++x) {
        map(y, x) = static_cast<std::uint8_t>(std::clamp(std::lround(labels(z, y, x)), 0L, 255L));
      }
    }
    slices.push_back(std::move(map));
  }
  return slices;
}

Volume stack_slices(const std::vector<Image>& slices, DType dtype) {
  if (slices.empty()) throw ShapeError("stack_slices: no slices");
  const int h = slices.front().height();
  const int w = slices.front().width();
  Volume volume(static_cast<int>(slices.size()), h, w, dtype);
  auto dst = volume.values().begin();
  for (const Image& s : slices) {
    if (s.height() != h || s.width() != w) throw ShapeError("stack_slices: slice shape mismatch");
    dst = std::copy(s.values().begin(), s.values().end(), dst);
  }
  return volume;
}

Image resize_bilinear(const Image& image, int out_h, int out_w) {
  if (out_h < 1 || out_w < 1) throw ShapeError("resize_bilinear: output size must be >= 1");
  Image out(out_h, out_w);
  std::vector<Tap> xs(static_cast<std::size_t>(out_w));
  for (int x = 0; x < out_w; ++x) xs[static_cast<std::size_t>(x)] = make_tap(source_coord(x, image.width(), out_w), image.width());
  for (int y = 0; y < out_h; ++y) {
    const Tap ty = make_tap(source_coord(y, image.height(), out_h), image.height());
    for (int x = 0; x < out_w; ++x) {
      const Tap& tx = xs[static_cast<std::size_t>(x)];
      const double top = lerp(image(ty.i0, tx.i0), image(ty.i0, tx.i1), tx.frac);
      const double bottom = lerp(image(ty.i1, tx.i0), image(ty.i1, tx.i1), tx.frac);
      out(y, x) = static_cast<float>(lerp(top, bottom, ty.frac));
    }
  }
  return out;
}

LabelMap resize_nearest(const LabelMap& labels, int out_h, int out_w) {
  if (out_h < 1 || out_w < 1) throw ShapeError("resize_nearest: output size must be >= 1");
  LabelMap out(out_h, out_w);
  for (int y = 0; y < out_h; ++y) {
    const int sy = std::clamp(static_cast<int>(std::lround(source_coord(y, labels.height(), out_h))), 0, labels.height() - 1);
    for (int x = 0; x < out_w; ++x) {
      const int sx = std::clamp(static_cast<int>(std::lround(source_coord(x, labels.width(), out_w))), 0, labels.width() - 1);
      out(y, x) = labels(sy, sx);
    }
  }
  return out;
}

ImageTensor normalize(const Image& image_u8) {
  ImageTensor t(1, image_u8.height(), image_u8.width());
  auto dst = t.values();
  const auto src = image_u8.values();
  for (std::size_t i = 0; i < src.size(); ++i) {
    const float p = src[i];
    if (!(p >= 0.0f && p <= 255.0f)) {
      throw ContractError("normalize: intensity " + std::to_string(p) + " outside [0,255]");
    }
    dst[i] = static_cast<float>((static_cast<double>(p) / 255.0 - 0.5) / 0.5);
  }
  return t;
}

Image denormalize(const ImageTensor& tensor, int channel) {
  if (channel < 0 || channel >= tensor.channels()) throw ShapeError("denormalize: channel out of range");
  Image out(tensor.height(), tensor.width());
  const float* src = tensor.channel(channel);
  auto dst = out.values();
  for (std::size_t i = 0; i < dst.size(); ++i) {
    const double p = (static_cast<double>(src[i]) * 0.5 + 0.5) * 255.0;
    dst[i] = static_cast<float>(std::clamp(std::round(p), 0.0, 255.0));
  }
  return out;
}

std::vector<Image> generation_slices(const Volume& volume, int side) {
  std::vector<Image> out;
  for (const Image& s : slice_volume(volume)) out.push_back(quantize_u8(resize_bilinear(s, side, side)));
  return out;
}

std::vector<LabelMap> generation_label_slices(const Volume& labels, int side) {
  std::vector<LabelMap> out;
  for (const LabelMap& s : slice_labels(labels)) out.push_back(resize_nearest(s, side, side));
  return out;
}

CropBox foreground_box(const Volume& volume, float threshold) {
  CropBox box;
  box.lo = {volume.depth(), volume.height(), volume.width()};
  box.hi = {-1, -1, -1};
  for (int z = 0; z < volume.depth(); ++z) {
    for (int y = 0; y < volume.height(); ++y) {
      for (int x = 0; x < volume.width(); ++x) {
        if (volume(z, y, x) > threshold) {
          box.lo = {std::min(box.lo[0], z), std::min(box.lo[1], y), std::min(box.lo[2], x)};
          box.hi = {std::max(box.hi[0], z), std::max(box.hi[1], y), std::max(box.hi[2], x)};
        }
      }
    }
  }
  if (box.hi[0] < 0) throw ContractError("no foreground voxel above " + std::to_string(threshold));
  return box;
}

namespace {

double cube_coord(int i, int lo, int hi, int side) {
  if (side == 1 || hi == lo) return 0.5 * (lo + hi);
  return lo + static_cast<double>(i) * static_cast<double>(hi - lo) / static_cast<double>(side - 1);
}

}  // namespace

Volume crop_resize(const Volume& volume, const CropBox& box, int side, bool nearest) {
  if (side < 1) throw ShapeError("crop_resize: side must be >= 1");
  for (int a = 0; a < 3; ++a) {
    const int limit = a == 0 ? volume.depth() : (a == 1 ? volume.height() : volume.width());
    if (box.lo[a] < 0 || box.hi[a] >= limit || box.lo[a] > box.hi[a]) throw ShapeError("crop_resize: box outside volume");
  }
  Volume out(side, side, side, nearest ? volume.dtype() : DType::Float32);

  std::array<std::vector<Tap>, 3> taps;
  const std::array<int, 3> limits = {volume.depth(), volume.height(), volume.width()};
  for (int a = 0; a < 3; ++a) {
    taps[a].resize(static_cast<std::size_t>(side));
    for (int i = 0; i < side; ++i) {
      taps[a][static_cast<std::size_t>(i)] = make_tap(cube_coord(i, box.lo[a], box.hi[a], side), limits[a]);
    }
  }

  for (int z = 0; z < side; ++z) {
    const Tap& tz = taps[0][static_cast<std::size_t>(z)];
    for (int y = 0; y < side; ++y) {
      const Tap& ty = taps[1][static_cast<std::size_t>(y)];
      for (int x = 0; x < side; ++x) {
        const Tap& tx = taps[2][static_cast<std::size_t>(x)];
        if (nearest) {
          const int zz = tz.frac < 0.5 ? tz.i0 : tz.i1;
          const int yy = ty.frac < 0.5 ? ty.i0 : ty.i1;
          const int xx = tx.frac < 0.5 ? tx.i0 : tx.i1;
          out(z, y, x) = volume(zz, yy, xx);
          continue;
        }
        auto plane = [&](int zi) {
          const double top = lerp(volume(zi, ty.i0, tx.i0), volume(zi, ty.i0, tx.i1), tx.frac);
          const double bottom = lerp(volume(zi, ty.i1, tx.i0), volume(zi, ty.i1, tx.i1), tx.frac);
          return lerp(top, bottom, ty.frac);
        };
        out(z, y, x) = static_cast<float>(lerp(plane(tz.i0), plane(tz.i1), tz.frac));
      }
    }
  }
  return out;
}

Volume brain_cube_preprocess(const Volume& volume, int side) {
  return crop_resize(volume, foreground_box(volume, 0.0f), side, false);
}

std::array<double, 3> map_to_cube(const std::array<double, 3>& zyx, const CropBox& box, int side) {
  std::array<double, 3> out{};
  for (int a = 0; a < 3; ++a) {
    const double span = box.hi[a] - box.lo[a];
    out[a] = span == 0.0 ? 0.5 * (side - 1) : (zyx[a] - box.lo[a]) * (side - 1) / span;
  }
  return out;
}

}  // namespace n2n::io

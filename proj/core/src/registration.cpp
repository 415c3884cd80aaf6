#include "n2n/registration.hpp"

#include <algorithm>
#include <atomic>
#include <bit>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <numbers>
#include <set>
#include <sstream>

#include <json.hpp>

#include "n2n/error.hpp"
#include "n2n/metrics.hpp"
#include "n2n/parallel.hpp"
#include "n2n/volume_io.hpp"

namespace n2n::reg {

// ------------------------------------------------------------------- field

DeformationField::DeformationField(int height, int width) : height_(height), width_(width) {
  if (height < 1 || width < 1) throw ShapeError("deformation field dimensions must be positive");
  data_.assign(2 * static_cast<std::size_t>(height) * static_cast<std::size_t>(width), 0.0f);
}

std::array<double, 2> DeformationField::sample(double y, double x) const {
  // bilinear inside, linear extrapolation from the border cells outside
  auto cell = [](double v, int n, int& i0, double& f) {
    if (n == 1) {
      i0 = 0;
      f = 0.0;
      return;
    }
    i0 = std::clamp(static_cast<int>(std::floor(v)), 0, n - 2);
    f = v - i0;
  };
  int y0, x0;
  double fy, fx;
  cell(y, height_, y0, fy);
  cell(x, width_, x0, fx);
  const int y1 = std::min(y0 + 1, height_ - 1);
  const int x1 = std::min(x0 + 1, width_ - 1);
  std::array<double, 2> out{};
  for (int k = 0; k < 2; ++k) {
    auto at = [&](int yy, int xx) { return static_cast<double>(data_[2 * index(yy, xx) + static_cast<std::size_t>(k)]); };
    const double top = at(y0, x0) + fx * (at(y0, x1) - at(y0, x0));
    const double bot = at(y1, x0) + fx * (at(y1, x1) - at(y1, x0));
    out[static_cast<std::size_t>(k)] = top + fy * (bot - top);
  }
  return out;
}

bool DeformationField::finite() const {
  return std::all_of(data_.begin(), data_.end(), [](float v) { return std::isfinite(v); });
}

double DeformationField::mean_magnitude() const {
  if (data_.empty()) return 0.0;
  double acc = 0.0;
  for (std::size_t i = 0; i < data_.size(); i += 2) acc += std::hypot(data_[i], data_[i + 1]);
  return acc / static_cast<double>(data_.size() / 2);
}

void write_field(const DeformationField& field, const std::filesystem::path& path) {
  if (!field.finite()) throw NumericError("refusing to write a non-finite deformation field");
  std::string out(kFieldMagic, sizeof(kFieldMagic));
  auto u32 = [&](std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
  };
  u32(static_cast<std::uint32_t>(field.height()));
  u32(static_cast<std::uint32_t>(field.width()));
  for (float v : field.raw()) u32(std::bit_cast<std::uint32_t>(v));
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot write " + path.string());
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!f) throw IoError("write failed: " + path.string());
}

DeformationField read_field(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot read " + path.string());
  std::ostringstream os;
  os << f.rdbuf();
  const std::string bytes = os.str();
  if (bytes.size() < sizeof(kFieldMagic) + 8) throw IoError(path.string() + ": field file truncated");
  if (bytes.compare(0, sizeof(kFieldMagic), std::string(kFieldMagic, sizeof(kFieldMagic))) != 0) {
    throw FormatError(path.string() + ": not a field file (bad magic)");
  }
  auto u32 = [&](std::size_t off) {
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes[off + i])) << (8 * i);
    return v;
  };
  const std::size_t h = u32(7);
  const std::size_t w = u32(11);
  if (h == 0 || w == 0) throw FormatError(path.string() + ": field has zero extent");
  const std::size_t need = 15 + h * w * 8;
  if (bytes.size() < need) throw IoError(path.string() + ": field data truncated");
  if (bytes.size() > need) throw FormatError(path.string() + ": trailing bytes after field data");
  DeformationField d(static_cast<int>(h), static_cast<int>(w));
  for (std::size_t i = 0; i < 2 * h * w; ++i) d.raw()[i] = std::bit_cast<float>(u32(15 + 4 * i));
  if (!d.finite()) throw NumericError(path.string() + ": field contains non-finite values");
  return d;
}

// ------------------------------------------------------------------ affine

std::array<double, 2> AffineTransform::apply(double y, double x, double cy, double cx) const {
  const double py = y - cy;
  const double px = x - cx;
  return {a[0] * py + a[1] * px + cy + t[0], a[2] * py + a[3] * px + cx + t[1]};
}

AffineTransform AffineTransform::inverse() const {
  const double d = det();
  if (std::abs(d) <= 1e-8) throw NumericError("affine transform is not invertible");
  AffineTransform inv;
  inv.a = {a[3] / d, -a[1] / d, -a[2] / d, a[0] / d};
  inv.t = {-(inv.a[0] * t[0] + inv.a[1] * t[1]), -(inv.a[2] * t[0] + inv.a[3] * t[1])};
  return inv;
}

AffineTransform AffineParams::to_transform() const {
  const double c = std::cos(theta);
  const double s = std::sin(theta);
  const double sy = std::exp(log_sy);
  const double sx = std::exp(log_sx);
  // R * diag(sy, sx) * [[1, shear], [0, 1]]
  const double m00 = sy;
  const double m01 = sy * shear;
  const double m10 = 0.0;
  const double m11 = sx;
  AffineTransform t;
  t.a = {c * m00 - s * m10, c * m01 - s * m11, s * m00 + c * m10, s * m01 + c * m11};
  t.t = {ty, tx};
  return t;
}

AffineTransform rotation(double radians) {
  AffineParams p;
  p.theta = radians;
  return p.to_transform();
}

AffineTransform translation(double ty, double tx) {
  AffineTransform t;
  t.t = {ty, tx};
  return t;
}

namespace {

double rotation_angle(const AffineTransform& t) { return std::atan2(t.a[2] - t.a[1], t.a[0] + t.a[3]); }

}  // namespace

DeformationField affine_to_field(const AffineTransform& t, int height, int width) {
  if (std::abs(t.det()) <= 1e-8) throw NumericError("affine transform is not invertible");
  DeformationField d(height, width);
  const double cy = (height - 1) / 2.0;
  const double cx = (width - 1) / 2.0;
  for (int y = 0; y < height; ++y) {
    for (int x = 0; x < width; ++x) {
      const auto q = t.apply(y, x, cy, cx);
      d.dy(y, x) = static_cast<float>(q[0] - y);
      d.dx(y, x) = static_cast<float>(q[1] - x);
    }
  }
  return d;
}

DeformationField fuse_fields(const DeformationField& d1, const DeformationField& d2, double w) {
  if (d1.height() != d2.height() || d1.width() != d2.width()) throw ShapeError("fuse_fields: field sizes differ");
  if (!(w >= 0.0 && w <= 1.0)) throw ContractError("fusion weight must lie in [0,1]");
  DeformationField out(d1.height(), d1.width());
  if (w == 1.0) return d1;
  if (w == 0.0) return d2;
  const auto& a = d1.raw();
  const auto& b = d2.raw();
  auto& o = out.raw();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = static_cast<float>(w * a[i] + (1.0 - w) * b[i]);
  return out;
}

// -------------------------------------------------------------------- warp

namespace {

void require_field(int h, int w, const DeformationField& field) {
  if (field.height() != h || field.width() != w) {
    throw ShapeError("field " + std::to_string(field.height()) + "x" + std::to_string(field.width()) +
                     " does not match image " + std::to_string(h) + "x" + std::to_string(w));
  }
}

float bilinear_zero(const Image& img, double sy, double sx) {
  const int H = img.height();
  const int W = img.width();
  if (sy <= -1.0 || sx <= -1.0 || sy >= H || sx >= W) return 0.0f;
  const int y0 = static_cast<int>(std::floor(sy));
  const int x0 = static_cast<int>(std::floor(sx));
  const double fy = sy - y0;
  const double fx = sx - x0;
  auto px = [&](int y, int x) -> double { return (y < 0 || x < 0 || y >= H || x >= W) ? 0.0 : img(y, x); };
  double v = 0.0;
  const double w00 = (1 - fy) * (1 - fx), w01 = (1 - fy) * fx, w10 = fy * (1 - fx), w11 = fy * fx;
  if (w00 != 0.0) v += w00 * px(y0, x0);
  if (w01 != 0.0) v += w01 * px(y0, x0 + 1);
  if (w10 != 0.0) v += w10 * px(y0 + 1, x0);
  if (w11 != 0.0) v += w11 * px(y0 + 1, x0 + 1);
  return static_cast<float>(v);
}

}  // namespace

Image warp(const Image& image, const DeformationField& field, Interp interp) {
  require_field(image.height(), image.width(), field);
  Image out(image.height(), image.width());
  for (int y = 0; y < image.height(); ++y) {
    for (int x = 0; x < image.width(); ++x) {
      const double sy = y + static_cast<double>(field.dy(y, x));
      const double sx = x + static_cast<double>(field.dx(y, x));
      if (interp == Interp::Bilinear) {
        out(y, x) = bilinear_zero(image, sy, sx);
      } else {
        const int ny = static_cast<int>(std::floor(sy + 0.5));
        const int nx = static_cast<int>(std::floor(sx + 0.5));
        out(y, x) = (ny < 0 || nx < 0 || ny >= image.height() || nx >= image.width()) ? 0.0f : image(ny, nx);
      }
    }
  }
  return out;
}

LabelMap warp(const LabelMap& labels, const DeformationField& field) {
  require_field(labels.height(), labels.width(), field);
  LabelMap out(labels.height(), labels.width());
  for (int y = 0; y < labels.height(); ++y) {
    for (int x = 0; x < labels.width(); ++x) {
      const int ny = static_cast<int>(std::floor(y + static_cast<double>(field.dy(y, x)) + 0.5));
      const int nx = static_cast<int>(std::floor(x + static_cast<double>(field.dx(y, x)) + 0.5));
      out(y, x) = (ny < 0 || nx < 0 || ny >= labels.height() || nx >= labels.width()) ? 0 : labels(ny, nx);
    }
  }
  return out;
}

LabelMap multi_atlas_combine(const std::vector<LabelMap>& warped, int num_classes) {
  if (warped.empty()) throw ContractError("multi_atlas_combine: no atlases");
  const int H = warped[0].height();
  const int W = warped[0].width();
  for (const auto& l : warped) {
    if (l.height() != H || l.width() != W) throw ShapeError("multi_atlas_combine: label maps differ in size");
  }
  LabelMap out(H, W);
  std::vector<int> votes(static_cast<std::size_t>(num_classes));
  for (std::size_t i = 0; i < out.size(); ++i) {
    std::fill(votes.begin(), votes.end(), 0);
    for (const auto& l : warped) {
      const int c = l.values()[i];
      if (c >= num_classes) throw ContractError("label " + std::to_string(c) + " outside class range");
      ++votes[static_cast<std::size_t>(c)];
    }
    // max_element returns the first maximum, i.e. the lowest class id
    out.values()[i] = static_cast<std::uint8_t>(std::max_element(votes.begin(), votes.end()) - votes.begin());
  }
  return out;
}

// --------------------------------------------------------------- landmarks

std::array<double, 2> map_moving_point(const DeformationField& field, double y, double x) {
  double py = y, px = x;
  for (int it = 0; it < 100; ++it) {
    const auto d = field.sample(py, px);
    const double ny = y - d[0];
    const double nx = x - d[1];
    const double change = std::hypot(ny - py, nx - px);
    py = ny;
    px = nx;
    if (change < 1e-9) break;
  }
  return {py, px};
}

double landmark_dist(const std::vector<DeformationField>& slice_fields, const std::vector<data::Landmark>& fixed,
                     const std::vector<data::Landmark>& moving) {
  if (slice_fields.empty()) throw ContractError("landmark_dist: no slice fields");
  if (fixed.empty()) throw ContractError("landmark_dist: no landmarks");
  std::vector<std::string> missing;
  double acc = 0.0;
  for (const auto& f : fixed) {
    const auto it = std::find_if(moving.begin(), moving.end(), [&](const data::Landmark& m) { return m.name == f.name; });
    if (it == moving.end()) {
      missing.push_back(f.name);
      continue;
    }
    const int k = std::clamp(static_cast<int>(std::lround(it->z)), 0, static_cast<int>(slice_fields.size()) - 1);
    const auto p = map_moving_point(slice_fields[static_cast<std::size_t>(k)], it->y, it->x);
    acc += std::sqrt((p[0] - f.y) * (p[0] - f.y) + (p[1] - f.x) * (p[1] - f.x) + (it->z - f.z) * (it->z - f.z));
  }
  if (!missing.empty()) {
    std::string names;
    for (const auto& n : missing) names += (names.empty() ? "" : ", ") + n;
    std::string have;
    for (const auto& m : moving) have += (have.empty() ? "" : ", ") + m.name;
    throw ContractError("landmarks missing from the moving set: " + names + " (moving has: " + have + ")");
  }
  return acc / static_cast<double>(fixed.size());
}

double landmark_dist(const DeformationField& field, const std::vector<data::Landmark>& fixed,
                     const std::vector<data::Landmark>& moving) {
  return landmark_dist(std::vector<DeformationField>{field}, fixed, moving);
}

std::vector<double> weight_grid(double grid_step) {
  if (!(grid_step > 0.0 && grid_step <= 1.0)) throw ConfigError("grid_step must lie in (0,1]");
  const int n = static_cast<int>(std::lround(1.0 / grid_step));
  std::vector<double> w;
  for (int k = 0; k <= n; ++k) w.push_back(static_cast<double>(k) / n);
  return w;
}

double select_fusion_weight(const std::vector<std::function<double(double)>>& folds, double grid_step) {
  if (folds.empty()) throw ContractError("select_fusion_weight: no folds");
  double best_w = 0.0;
  double best = -std::numeric_limits<double>::infinity();
  for (double w : weight_grid(grid_step)) {
    double s = 0.0;
    for (const auto& f : folds) s += f(w);
    s /= static_cast<double>(folds.size());
    if (s >= best - 1e-12) {
      best = std::max(best, s);
      best_w = w;
    }
  }
  return best_w;
}

// ------------------------------------------------------------ cost terms

double ncc(const Image& a, const Image& b) {
  const auto x = a.values();
  const auto y = b.values();
  const double n = static_cast<double>(x.size());
  double mx = 0, my = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    mx += x[i];
    my += y[i];
  }
  mx /= n;
  my /= n;
  double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double dx = x[i] - mx, dy = y[i] - my;
    sxy += dx * dy;
    sxx += dx * dx;
    syy += dy * dy;
  }
  if (sxx <= 0.0 || syy <= 0.0) return 0.0;
  return sxy / std::sqrt(sxx * syy);
}

double mutual_information_soft(const Image& a, const Image& b, int bins) {
  const auto nb = static_cast<std::size_t>(bins);
  std::vector<double> joint(nb * nb, 0.0);
  const auto x = a.values();
  const auto y = b.values();
  for (std::size_t i = 0; i < x.size(); ++i) {
    const auto bx = static_cast<std::size_t>(std::clamp(static_cast<int>(x[i] * bins / 256.0), 0, bins - 1));
    // linear split of the moving sample between neighbouring bins
    const double pos = std::clamp(y[i] * bins / 256.0 - 0.5, 0.0, bins - 1.0);
    const auto b0 = static_cast<std::size_t>(std::floor(pos));
    const std::size_t b1 = std::min(b0 + 1, nb - 1);
    const double f = pos - static_cast<double>(b0);
    joint[bx * nb + b0] += 1.0 - f;
    joint[bx * nb + b1] += f;
  }
  const double n = static_cast<double>(x.size());
  std::vector<double> px(nb, 0), py(nb, 0);
  for (std::size_t i = 0; i < nb; ++i) {
    for (std::size_t j = 0; j < nb; ++j) {
      joint[i * nb + j] /= n;
      px[i] += joint[i * nb + j];
      py[j] += joint[i * nb + j];
    }
  }
  double mi = 0.0;
  for (std::size_t i = 0; i < nb; ++i) {
    for (std::size_t j = 0; j < nb; ++j) {
      const double p = joint[i * nb + j];
      if (p > 0.0) mi += p * std::log(p / (px[i] * py[j]));
    }
  }
  return mi;
}

// ----------------------------------------------------------- builtin affine

namespace {

Image downsample2(const Image& img) {
  const int H = std::max(1, img.height() / 2);
  const int W = std::max(1, img.width() / 2);
  Image out(H, W);
  for (int y = 0; y < H; ++y) {
    for (int x = 0; x < W; ++x) {
      double acc = 0.0;
      int n = 0;
      for (int dy = 0; dy < 2; ++dy) {
        for (int dx = 0; dx < 2; ++dx) {
          const int yy = 2 * y + dy, xx = 2 * x + dx;
          if (yy < img.height() && xx < img.width()) {
            acc += img(yy, xx);
            ++n;
          }
        }
      }
      out(y, x) = static_cast<float>(acc / n);
    }
  }
  return out;
}

Image warp_affine(const Image& moving, const AffineTransform& t, int H, int W, double scale) {
  // transform defined at full resolution; this level is `scale` times smaller
  AffineTransform lt = t;
  lt.t = {t.t[0] * scale, t.t[1] * scale};
  const double cy = (H - 1) / 2.0;
  const double cx = (W - 1) / 2.0;
  Image out(H, W);
  for (int y = 0; y < H; ++y) {
    for (int x = 0; x < W; ++x) {
      const auto q = lt.apply(y, x, cy, cx);
      out(y, x) = bilinear_zero(moving, q[0], q[1]);
    }
  }
  return out;
}

double evaluate_cost(const Image& fixed, const Image& moving, const AffineParams& p, Cost cost, int bins,
                     double scale) {
  const Image w = warp_affine(moving, p.to_transform(), fixed.height(), fixed.width(), scale);
  return cost == Cost::NCC ? -ncc(fixed, w) : -mutual_information_soft(fixed, w, bins);
}

double& param_ref(AffineParams& p, int i) {
  switch (i) {
    case 0:
      return p.theta;
    case 1:
      return p.log_sy;
    case 2:
      return p.log_sx;
    case 3:
      return p.shear;
    case 4:
      return p.ty;
    default:
      return p.tx;
  }
}

}  // namespace

RegistrationResult register_affine(const Image& fixed, const Image& moving, Cost cost, const BuiltinOptions& options) {
  if (fixed.height() != moving.height() || fixed.width() != moving.width()) {
    throw ShapeError("register: fixed and moving images differ in size");
  }
  if (options.levels < 1) throw ConfigError("registration needs at least one pyramid level");
  std::vector<Image> fp{fixed}, mp{moving};
  for (int l = 1; l < options.levels; ++l) {
    fp.push_back(downsample2(fp.back()));
    mp.push_back(downsample2(mp.back()));
  }

  // initial and final step sizes: theta, log_sy, log_sx, shear (unitless), ty, tx (level pixels)
  constexpr std::array<double, 6> kInitStep = {0.1, 0.05, 0.05, 0.05, 2.0, 2.0};
  constexpr std::array<double, 6> kMinStep = {1e-4, 1e-4, 1e-4, 1e-4, 0.01, 0.01};

  RegistrationResult result;
  AffineParams p;
  for (int l = options.levels - 1; l >= 0; --l) {
    const double scale = std::ldexp(1.0, -l);  // level px per full-res px
    const Image& f = fp[static_cast<std::size_t>(l)];
    const Image& m = mp[static_cast<std::size_t>(l)];
    std::array<double, 6> step{};
    const double shrink = std::ldexp(1.0, -(options.levels - 1 - l));
    for (int i = 0; i < 6; ++i) {
      // translations are searched in full-resolution pixels
      step[static_cast<std::size_t>(i)] = i >= 4 ? kInitStep[static_cast<std::size_t>(i)] / scale * shrink
                                                 : kInitStep[static_cast<std::size_t>(i)] * shrink;
    }
    double best = evaluate_cost(f, m, p, cost, options.mi_bins, scale);
    bool level_converged = false;
    int sweep = 0;
    for (; sweep < options.max_iterations; ++sweep) {
      const double start = best;
      for (int i = 0; i < 6; ++i) {
        const auto ui = static_cast<std::size_t>(i);
        AffineParams plus = p, minus = p;
        param_ref(plus, i) += step[ui];
        param_ref(minus, i) -= step[ui];
        const double cp = evaluate_cost(f, m, plus, cost, options.mi_bins, scale);
        const double cm = evaluate_cost(f, m, minus, cost, options.mi_bins, scale);
        if (cp < best && cp <= cm) {
          best = cp;
          p = plus;
        } else if (cm < best) {
          best = cm;
          p = minus;
        } else {
          step[ui] *= 0.5;
        }
      }
      bool small = true;
      for (int i = 0; i < 6; ++i) {
        const double floor_step = i >= 4 ? kMinStep[static_cast<std::size_t>(i)] / scale : kMinStep[static_cast<std::size_t>(i)];
        small = small && step[static_cast<std::size_t>(i)] < floor_step;
      }
      if (start - best < options.tolerance && small) {
        level_converged = true;
        ++sweep;
        break;
      }
    }
    result.iterations += sweep;
    result.converged = result.converged && level_converged;
    result.cost = best;
  }
  result.params = p;
  result.field = affine_to_field(p.to_transform(), fixed.height(), fixed.width());
  return result;
}

RegistrationResult register_external(const std::string& command, const Image& fixed, const Image& moving,
                                     const std::filesystem::path& work_dir) {
  static std::atomic<std::uint64_t> counter{0};
  const auto dir = work_dir / ("reg_" + std::to_string(counter++));
  std::filesystem::create_directories(dir);
  const auto fpath = dir / "fixed.png";
  const auto mpath = dir / "moving.png";
  const auto opath = dir / "out.fld";
  io::write_png(fixed, fpath);
  io::write_png(moving, mpath);
  auto quote = [](const std::filesystem::path& p) { return "'" + p.string() + "'"; };
  const std::string cmd = command + " " + quote(fpath) + " " + quote(mpath) + " " + quote(opath);
  const int rc = std::system(cmd.c_str());
  if (rc != 0) throw ContractError("registration backend failed (status " + std::to_string(rc) + "): " + cmd);
  if (!std::filesystem::exists(opath)) throw ContractError("registration backend produced no field: " + cmd);
  RegistrationResult r;
  r.field = read_field(opath);
  if (r.field.height() != fixed.height() || r.field.width() != fixed.width()) {
    throw ContractError("registration backend returned a field of the wrong size");
  }
  return r;
}

Backend parse_backend(const std::string& spec) {
  Backend b;
  if (spec == "builtin-affine" || spec == "builtin") return b;
  if (spec.rfind("cmd:", 0) == 0 && spec.size() > 4) {
    b.name = "external";
    b.command = spec.substr(4);
    return b;
  }
  throw ConfigError("unknown backend '" + spec + "' (expected builtin-affine or cmd:<command>)");
}

RegistrationResult register_images(const Image& fixed, const Image& moving, const Backend& backend,
                                   bool cross_modality) {
  if (backend.name == "builtin-affine") {
    return register_affine(fixed, moving, cross_modality ? Cost::MI : Cost::NCC, backend.builtin);
  }
  if (backend.name == "external") {
    const auto dir = backend.work_dir.empty() ? std::filesystem::temp_directory_path() / "n2n_reg" : backend.work_dir;
    return register_external(backend.command, fixed, moving, dir);
  }
  throw ConfigError("unknown backend '" + backend.name + "'");
}

// ------------------------------------------------------------------ harness

std::string structure_name(int class_id) {
  switch (class_id) {
    case data::kBackground:
      return "background";
    case data::kTissue1:
      return "tissue1";
    case data::kTissue2:
      return "tissue2";
    case data::kTumor:
      return "tumor";
    default:
      return "class" + std::to_string(class_id);
  }
}

namespace {

double median(std::vector<double> v) {
  if (v.empty()) return 0.0;
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

struct SliceResult {
  std::size_t subject = 0;
  int slice = 0;
  DeformationField d1, d2;
  double angle1 = 0.0, angle2 = 0.0;
  bool converged = true;
  std::vector<std::vector<double>> dice;  // [weight index][structure index]
  bool scored = false;
};

}  // namespace

HarnessReport known_transform_harness(const std::vector<HarnessSubject>& subjects, const HarnessConfig& config) {
  if (subjects.empty()) throw ContractError("harness: no subjects");
  if (config.slice_step < 1 || config.folds < 1) throw ConfigError("harness: slice_step and folds must be >= 1");
  const double angle = config.angle_deg * std::numbers::pi / 180.0;
  const AffineTransform truth = rotation(angle);
  const auto grid = weight_grid(config.grid_step);
  const std::size_t S = config.structures.size();

  // which slices take part: every slice_step-th slice with foreground, plus landmark slices
  std::vector<SliceResult> work;
  for (std::size_t si = 0; si < subjects.size(); ++si) {
    const auto& s = subjects[si];
    const std::size_t n = s.given.size();
    if (s.target.size() != n || s.translated.size() != n || s.labels.size() != n) {
      throw ContractError("harness: subject '" + s.id + "' has inconsistent slice counts");
    }
    std::set<int> landmark_slices;
    for (const auto& lm : s.landmarks) {
      landmark_slices.insert(std::clamp(static_cast<int>(std::lround(lm.z)), 0, static_cast<int>(n) - 1));
    }
    for (int k = 0; k < static_cast<int>(n); ++k) {
      const auto& lab = s.labels[static_cast<std::size_t>(k)];
      const auto fg = std::count_if(lab.values().begin(), lab.values().end(), [](std::uint8_t v) { return v != 0; });
      const bool scored = k % config.slice_step == 0 && fg >= 50;
      if (scored || landmark_slices.count(k)) {
        SliceResult r;
        r.subject = si;
        r.slice = k;
        r.scored = scored;
        work.push_back(std::move(r));
      }
    }
  }
  if (work.empty()) throw ContractError("harness: no slice with foreground");

  parallel_for(work.size(), [&](std::size_t i) {
    auto& r = work[i];
    const auto& s = subjects[r.subject];
    const auto k = static_cast<std::size_t>(r.slice);
    const int H = s.given[k].height();
    const int W = s.given[k].width();
    const auto t_field = affine_to_field(truth, H, W);
    const Image fixed_given = warp(s.given[k], t_field);
    const Image fixed_translated = warp(s.translated[k], t_field);
    const LabelMap fixed_labels = warp(s.labels[k], t_field);
    auto r2 = register_images(fixed_given, s.given[k], config.backend, false);
    auto r1 = register_images(fixed_translated, s.target[k], config.backend, config.translated_pair_mi);
    r.converged = r1.converged && r2.converged;
    r.angle1 = rotation_angle(r1.params.to_transform()) * 180.0 / std::numbers::pi;
    r.angle2 = rotation_angle(r2.params.to_transform()) * 180.0 / std::numbers::pi;
    r.d1 = std::move(r1.field);
    r.d2 = std::move(r2.field);
    if (r.scored) {
      for (double w : grid) {
        const LabelMap warped = warp(s.labels[k], fuse_fields(r.d1, r.d2, w));
        std::vector<double> row;
        for (int c : config.structures) row.push_back(metrics::dice(fixed_labels, warped, c));
        r.dice.push_back(std::move(row));
      }
    }
  });

  std::vector<const SliceResult*> scored;
  for (const auto& r : work) {
    if (r.scored) scored.push_back(&r);
  }
  if (scored.empty()) throw ContractError("harness: no scored slice");

  auto fold_functions = [&](std::optional<std::size_t> structure) {
    std::vector<std::function<double(double)>> folds;
    for (int f = 0; f < config.folds; ++f) {
      std::vector<const SliceResult*> members;
      for (std::size_t j = 0; j < scored.size(); ++j) {
        if (static_cast<int>(j % static_cast<std::size_t>(config.folds)) == f) members.push_back(scored[j]);
      }
      if (members.empty()) continue;
      folds.push_back([members, structure, &grid, S](double w) {
        const auto wi = static_cast<std::size_t>(
            std::lower_bound(grid.begin(), grid.end(), w - 1e-12) - grid.begin());
        double acc = 0.0;
        for (const auto* r : members) {
          if (structure) {
            acc += r->dice[wi][*structure];
          } else {
            double m = 0.0;
            for (std::size_t c = 0; c < S; ++c) m += r->dice[wi][c];
            acc += m / static_cast<double>(S);
          }
        }
        return acc / static_cast<double>(members.size());
      });
    }
    return folds;
  };

  HarnessReport rep;
  rep.angle_deg = config.angle_deg;
  rep.slices = static_cast<int>(scored.size());
  std::vector<double> wstar(S);
  for (std::size_t c = 0; c < S; ++c) {
    wstar[c] = select_fusion_weight(fold_functions(c), config.grid_step);
    rep.w_star[structure_name(config.structures[c])] = wstar[c];
  }
  const double wmean = select_fusion_weight(fold_functions(std::nullopt), config.grid_step);
  rep.w_star["mean"] = wmean;

  auto grid_index = [&](double w) {
    return static_cast<std::size_t>(std::lower_bound(grid.begin(), grid.end(), w - 1e-12) - grid.begin());
  };
  auto mean_dice = [&](std::size_t c, double w) {
    const auto wi = grid_index(w);
    double acc = 0.0;
    for (const auto* r : scored) acc += r->dice[wi][c];
    return acc / static_cast<double>(scored.size());
  };
  // Dist per subject at weight w, averaged over subjects with landmarks
  auto dist_at = [&](std::optional<double> w) {
    double acc = 0.0;
    int n = 0;
    for (std::size_t si = 0; si < subjects.size(); ++si) {
      const auto& s = subjects[si];
      if (s.landmarks.empty()) continue;
      const int H = s.given[0].height();
      const int W = s.given[0].width();
      const AffineTransform inv = truth.inverse();
      std::vector<data::Landmark> fixed;
      for (const auto& m : s.landmarks) {
        const auto p = inv.apply(m.y, m.x, (H - 1) / 2.0, (W - 1) / 2.0);
        fixed.push_back({m.name, p[1], p[0], m.z});
      }
      std::vector<DeformationField> fields(s.given.size(), DeformationField(H, W));
      for (const auto& r : work) {
        if (r.subject != si) continue;
        fields[static_cast<std::size_t>(r.slice)] = w ? fuse_fields(r.d1, r.d2, *w) : DeformationField(H, W);
      }
      acc += landmark_dist(fields, fixed, s.landmarks);
      ++n;
    }
    return n ? acc / n : 0.0;
  };

  rep.dist_unregistered = dist_at(std::nullopt);
  for (const auto& [label, w] : std::vector<std::pair<std::string, double>>{{"w=0", 0.0}, {"w*", wmean}, {"w=1", 1.0}}) {
    HarnessRow row;
    row.label = label;
    row.weight = w;
    for (std::size_t c = 0; c < S; ++c) {
      row.dice[structure_name(config.structures[c])] = mean_dice(c, label == "w*" ? wstar[c] : w);
    }
    double m = 0.0;
    for (std::size_t c = 0; c < S; ++c) m += mean_dice(c, w);
    row.dice["mean"] = m / static_cast<double>(S);
    row.dist = dist_at(w);
    rep.rows.push_back(std::move(row));
  }

  std::vector<double> a1, a2;
  for (const auto& r : work) {
    a1.push_back(r.angle1);
    a2.push_back(r.angle2);
    rep.unconverged += r.converged ? 0 : 1;
  }
  rep.rotation_translated_deg = median(a1);
  rep.rotation_given_deg = median(a2);
  return rep;
}

std::string HarnessReport::to_json() const {
  nlohmann::ordered_json j;
  j["angle_deg"] = angle_deg;
  j["slices"] = slices;
  j["unconverged_registrations"] = unconverged;
  j["rotation_recovered_deg"] = {{"given", rotation_given_deg}, {"translated", rotation_translated_deg}};
  nlohmann::ordered_json ws = nlohmann::ordered_json::object();
  for (const auto& [k, v] : w_star) ws[k] = v;
  j["w_star"] = ws;
  j["dist_unregistered"] = dist_unregistered;
  j["rows"] = nlohmann::ordered_json::array();
  for (const auto& r : rows) {
    nlohmann::ordered_json e;
    e["label"] = r.label;
    e["weight"] = r.weight;
    nlohmann::ordered_json d = nlohmann::ordered_json::object();
    for (const auto& [k, v] : r.dice) d[k] = v;
    e["dice"] = d;
    e["dist"] = r.dist;
    j["rows"].push_back(e);
  }
  return j.dump(2) + "\n";
}

}  // namespace n2n::reg

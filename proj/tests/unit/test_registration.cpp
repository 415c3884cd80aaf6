#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>

#include <doctest.h>

#include "n2n/error.hpp"
#include "n2n/phantom.hpp"
#include "n2n/registration.hpp"

using namespace n2n;
namespace fs = std::filesystem;

namespace {

constexpr double kPi = 3.14159265358979323846;

Image blobs(int side) {
  Image im(side, side);
  for (int y = 0; y < side; ++y) {
    for (int x = 0; x < side; ++x) {
      const double dy = (y - side * 0.45) / (side * 0.3), dx = (x - side * 0.55) / (side * 0.2);
      const double ey = (y - side * 0.6) / (side * 0.1), ex = (x - side * 0.35) / (side * 0.15);
      im(y, x) = static_cast<float>((dy * dy + dx * dx < 1 ? 150 : 0) + (ey * ey + ex * ex < 1 ? 90 : 0));
    }
  }
  return im;
}

reg::DeformationField constant_field(int h, int w, float dy, float dx) {
  reg::DeformationField f(h, w);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      f.dy(y, x) = dy;
      f.dx(y, x) = dx;
    }
  return f;
}

}  // namespace

TEST_CASE("field file layout and round trip") {
  const auto dir = fs::temp_directory_path() / "n2n_unit_fld";
  fs::create_directories(dir);
  reg::DeformationField f(3, 4);
  for (std::size_t i = 0; i < f.raw().size(); ++i) f.raw()[i] = 0.5f * static_cast<float>(i) - 2.0f;
  reg::write_field(f, dir / "f.fld");
  std::ifstream in(dir / "f.fld", std::ios::binary);
  const std::string bytes{std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
  REQUIRE(bytes.size() == 7 + 8 + 3 * 4 * 2 * 4);
  CHECK(bytes.substr(0, 7) == "N2NFLD1");
  std::uint32_t h = 0, w = 0;
  std::memcpy(&h, bytes.data() + 7, 4);
  std::memcpy(&w, bytes.data() + 11, 4);
  CHECK(h == 3);
  CHECK(w == 4);
  float first[2];
  std::memcpy(first, bytes.data() + 15, 8);
  CHECK(first[0] == f.dy(0, 0));
  CHECK(first[1] == f.dx(0, 0));
  CHECK(reg::read_field(dir / "f.fld") == f);

  std::ofstream(dir / "short.fld", std::ios::binary) << bytes.substr(0, bytes.size() - 4);
  CHECK_THROWS_AS(reg::read_field(dir / "short.fld"), IoError);
  std::ofstream(dir / "long.fld", std::ios::binary) << bytes << "xx";
  CHECK_THROWS_AS(reg::read_field(dir / "long.fld"), FormatError);
  std::string bad = bytes;
  bad[0] = 'X';
  std::ofstream(dir / "bad.fld", std::ios::binary) << bad;
  CHECK_THROWS_AS(reg::read_field(dir / "bad.fld"), FormatError);
}

TEST_CASE("affine transforms and their fields") {
  const auto r = reg::rotation(0.3);
  const auto ri = r.inverse();
  const auto p = r.apply(10, 20, 8, 8);
  const auto q = ri.apply(p[0], p[1], 8, 8);
  CHECK(q[0] == doctest::Approx(10));
  CHECK(q[1] == doctest::Approx(20));
  CHECK(r.det() == doctest::Approx(1.0));

  const auto f = reg::affine_to_field(reg::translation(1.5, -2.0), 6, 7);
  for (int y = 0; y < 6; ++y)
    for (int x = 0; x < 7; ++x) {
      CHECK(f.dy(y, x) == doctest::Approx(1.5));
      CHECK(f.dx(y, x) == doctest::Approx(-2.0));
    }
  CHECK(reg::affine_to_field(reg::AffineTransform{}, 5, 5).mean_magnitude() == 0.0);
  reg::AffineParams ap;
  ap.theta = 0.3;
  const auto t = ap.to_transform();
  for (int i = 0; i < 4; ++i) CHECK(t.a[static_cast<std::size_t>(i)] == doctest::Approx(r.a[static_cast<std::size_t>(i)]));
}

TEST_CASE("fusion is the convex combination of two fields") {
  const auto d1 = constant_field(4, 4, 2.0f, -1.0f);
  const auto d2 = constant_field(4, 4, 0.0f, 3.0f);
  CHECK(reg::fuse_fields(d1, d2, 1.0) == d1);
  CHECK(reg::fuse_fields(d1, d2, 0.0) == d2);
  const auto m = reg::fuse_fields(d1, d2, 0.25);
  CHECK(m.dy(1, 1) == doctest::Approx(0.5));
  CHECK(m.dx(1, 1) == doctest::Approx(2.0));
  CHECK_THROWS_AS(reg::fuse_fields(d1, d2, 1.5), ContractError);
  CHECK_THROWS_AS(reg::fuse_fields(d1, reg::DeformationField(3, 4), 0.5), ShapeError);
}

TEST_CASE("warp pulls back through the field") {
  const auto im = blobs(32);
  CHECK(reg::warp(im, reg::DeformationField(32, 32)) == im);
  const auto shifted = reg::warp(im, constant_field(32, 32, 0.0f, 1.0f));
  CHECK(shifted(10, 10) == im(10, 11));
  CHECK(shifted(10, 31) == 0.0f);  // outside reads zero
  LabelMap l(4, 4);
  l(2, 2) = 3;
  const auto lw = reg::warp(l, constant_field(4, 4, 1.0f, 1.0f));
  CHECK(lw(1, 1) == 3);
  CHECK(lw(2, 2) == 0);
}

TEST_CASE("multi atlas vote breaks ties toward the lower class") {
  LabelMap a(1, 2), b(1, 2), c(1, 2);
  a(0, 0) = 2;
  b(0, 0) = 1;
  c(0, 0) = 2;
  a(0, 1) = 3;
  b(0, 1) = 1;
  const auto two = reg::multi_atlas_combine({a, b}, 4);
  CHECK(two(0, 0) == 1);
  CHECK(two(0, 1) == 1);
  const auto three = reg::multi_atlas_combine({a, b, c}, 4);
  CHECK(three(0, 0) == 2);
}

TEST_CASE("landmark distance through a field") {
  const std::vector<data::Landmark> fixed = {{"p", 0, 0, 0}};
  const std::vector<data::Landmark> moving = {{"p", 3, 4, 0}};
  CHECK(reg::landmark_dist(reg::DeformationField(8, 8), fixed, moving) == doctest::Approx(5.0));
  // the field maps fixed (0,0) onto moving (y=4, x=3)
  const auto d = constant_field(8, 8, 4.0f, 3.0f);
  CHECK(reg::landmark_dist(d, fixed, moving) == doctest::Approx(0.0).epsilon(1e-6));
  const auto p = reg::map_moving_point(reg::affine_to_field(reg::rotation(0.2), 16, 16), 9.0, 5.0);
  const auto back = reg::rotation(0.2).apply(p[0], p[1], 7.5, 7.5);
  CHECK(back[0] == doctest::Approx(9.0).epsilon(1e-6));
  CHECK(back[1] == doctest::Approx(5.0).epsilon(1e-6));
  const std::vector<data::Landmark> other = {{"q", 0, 0, 0}};
  CHECK_THROWS_AS(reg::landmark_dist(reg::DeformationField(8, 8), fixed, other), ContractError);
}

TEST_CASE("fusion weight selection") {
  CHECK(reg::weight_grid(0.25) == std::vector<double>{0.0, 0.25, 0.5, 0.75, 1.0});
  CHECK(reg::weight_grid(0.01).size() == 101);
  const std::vector<std::function<double(double)>> peak = {[](double w) { return -(w - 0.3) * (w - 0.3); },
                                                           [](double w) { return -(w - 0.5) * (w - 0.5); }};
  CHECK(reg::select_fusion_weight(peak) == doctest::Approx(0.4));
  const std::vector<std::function<double(double)>> flat = {[](double) { return 1.0; }};
  CHECK(reg::select_fusion_weight(flat) == 1.0);
  CHECK_THROWS_AS(reg::select_fusion_weight(flat, 0.0), ConfigError);
}

TEST_CASE("similarity measures") {
  const auto a = blobs(32);
  CHECK(reg::ncc(a, a) == doctest::Approx(1.0));
  Image inv = a;
  for (auto& v : inv.values()) v = 255.0f - v;
  CHECK(reg::ncc(a, inv) == doctest::Approx(-1.0));
  CHECK(reg::mutual_information_soft(a, inv, 64) == doctest::Approx(reg::mutual_information_soft(a, a, 64)).epsilon(0.05));
  CHECK(reg::mutual_information_soft(a, Image(32, 32, 10.0f), 64) == doctest::Approx(0.0).epsilon(1e-6));
}

TEST_CASE("builtin affine recovers a rotation") {
  const auto fixed = blobs(64);
  const double theta = 12.0 * kPi / 180.0;
  const auto moving = reg::warp(fixed, reg::affine_to_field(reg::rotation(theta), 64, 64));
  for (auto cost : {reg::Cost::NCC, reg::Cost::MI}) {
    const auto r = reg::register_affine(fixed, moving, cost);
    CHECK(r.converged);
    CHECK(std::abs(r.params.theta) == doctest::Approx(theta).epsilon(0.1));
    CHECK(reg::ncc(fixed, reg::warp(moving, r.field)) > 0.95);
  }
  CHECK_THROWS_AS(reg::register_affine(fixed, blobs(32), reg::Cost::NCC), ShapeError);
}

TEST_CASE("backend parsing") {
  CHECK(reg::parse_backend("builtin-affine").name == "builtin-affine");
  const auto e = reg::parse_backend("cmd:/bin/true");
  CHECK(e.name == "external");
  CHECK(e.command == "/bin/true");
  CHECK_THROWS_AS(reg::parse_backend("elastix"), ConfigError);
}

TEST_CASE("external backend contract") {
  const auto dir = fs::temp_directory_path() / "n2n_unit_ext";
  fs::remove_all(dir);
  const auto fixed = blobs(16);
  CHECK_THROWS_AS(reg::register_external("false", fixed, fixed, dir), ContractError);
  CHECK_THROWS_AS(reg::register_external("true", fixed, fixed, dir), ContractError);  // no field written
  // a backend that writes a zero field by copying a prepared file
  const auto zero = dir / "zero.fld";
  reg::write_field(reg::DeformationField(16, 16), zero);
  const auto r = reg::register_external("sh -c 'cp " + zero.string() + " \"$3\"' _", fixed, fixed, dir);
  CHECK(r.field == reg::DeformationField(16, 16));
}

TEST_CASE("a quarter turn keeps the centre fixed") {
  const auto f = reg::affine_to_field(reg::rotation(kPi / 2), 9, 9);
  CHECK(f.dy(4, 4) == doctest::Approx(0.0).epsilon(1e-6));
  CHECK(f.dx(4, 4) == doctest::Approx(0.0).epsilon(1e-6));
  CHECK(std::hypot(f.dy(0, 0), f.dx(0, 0)) == doctest::Approx(8.0));
  const auto t = reg::affine_to_field(reg::translation(3, 0), 5, 5);
  CHECK(t.dy(2, 3) == doctest::Approx(3.0));
  CHECK(t.dx(2, 3) == doctest::Approx(0.0));
}

namespace {

// Mean distance between where two fields send a set of points.
double point_error(const reg::DeformationField& a, const reg::DeformationField& b, int step) {
  double s = 0;
  int n = 0;
  for (int y = step; y < a.height() - step; y += step)
    for (int x = step; x < a.width() - step; x += step) {
      s += std::hypot(a.dy(y, x) - b.dy(y, x), a.dx(y, x) - b.dx(y, x));
      ++n;
    }
  return s / n;
}

}  // namespace

TEST_CASE("self registration stays at identity and 30 degrees is recovered") {
  const auto fixed = blobs(64);
  const auto self = reg::register_affine(fixed, fixed, reg::Cost::NCC);
  CHECK(self.field.mean_magnitude() < 0.5);

  const double theta = 30.0 * kPi / 180.0;
  const auto moving = reg::warp(fixed, reg::affine_to_field(reg::rotation(theta), 64, 64));
  const auto r = reg::register_affine(fixed, moving, reg::Cost::NCC);
  CHECK(std::abs(std::abs(r.params.theta) - theta) * 180.0 / kPi < 1.0);
  CHECK(point_error(r.field, reg::affine_to_field(reg::rotation(theta).inverse(), 64, 64), 8) < 1.5);
}

TEST_CASE("mutual information aligns a cross-modality phantom pair") {
  const auto p = data::generate_phantom_subject(5, {16, 64, 64}, 1.0, "s");
  Image a(64, 64), b(64, 64);
  for (int y = 0; y < 64; ++y)
    for (int x = 0; x < 64; ++x) {
      a(y, x) = std::clamp(std::round(p.vol_a(8, y, x)), 0.0f, 255.0f);
      b(y, x) = std::clamp(std::round(p.vol_b(8, y, x)), 0.0f, 255.0f);
    }
  const auto planted = reg::rotation(15.0 * kPi / 180.0);
  const auto moving = reg::warp(b, reg::affine_to_field(planted, 64, 64));
  const auto truth = reg::affine_to_field(planted.inverse(), 64, 64);
  const auto r = reg::register_affine(a, moving, reg::Cost::MI);
  const double before = point_error(reg::DeformationField(64, 64), truth, 8);
  const double after = point_error(r.field, truth, 8);
  MESSAGE("point error " << before << " -> " << after);
  CHECK(after < before);
}

#include <cstring>
#include <filesystem>
#include <fstream>
#include <set>

#include <doctest.h>

#include "n2n/error.hpp"
#include "n2n/phantom.hpp"
#include "n2n/volume_io.hpp"

using namespace n2n;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const auto p = fs::temp_directory_path() / ("n2n_unit_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string read_bytes(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

}  // namespace

TEST_CASE("nifti round trip for every supported dtype") {
  const auto dir = scratch("nifti");
  for (DType dt : {DType::UInt8, DType::Int16, DType::Float32}) {
    Volume v(3, 4, 5, dt);
    int k = 0;
    for (auto& x : v.values()) {
      x = dt == DType::Float32 ? 0.25f * static_cast<float>(k) - 3.0f
                               : static_cast<float>(dt == DType::Int16 ? k * 37 - 900 : k % 256);
      ++k;
    }
    const auto p = dir / "v.nii";
    io::write_nifti(v, p);
    const auto bytes = read_bytes(p);
    REQUIRE(bytes.size() == 352 + v.size() * (dt == DType::UInt8 ? 1 : dt == DType::Int16 ? 2 : 4));
    CHECK(std::memcmp(bytes.data() + 344, "n+1\0", 4) == 0);
    float off = 0;
    std::memcpy(&off, bytes.data() + 108, 4);
    CHECK(off == 352.0f);
    CHECK(io::read_nifti(p) == v);
  }
}

TEST_CASE("malformed nifti files are rejected") {
  const auto dir = scratch("nifti_bad");
  io::write_nifti(Volume(2, 2, 2, DType::UInt8, 1.0f), dir / "ok.nii");
  auto bytes = read_bytes(dir / "ok.nii");

  auto bad_magic = bytes;
  bad_magic[345] = 'x';
  std::ofstream(dir / "magic.nii", std::ios::binary) << bad_magic;
  CHECK_THROWS_AS(io::read_nifti(dir / "magic.nii"), FormatError);

  std::ofstream(dir / "short.nii", std::ios::binary) << bytes.substr(0, bytes.size() - 3);
  CHECK_THROWS_AS(io::read_nifti(dir / "short.nii"), IoError);

  auto dtype64 = bytes;
  const std::int16_t code = 64;  // float64
  std::memcpy(dtype64.data() + 70, &code, 2);
  std::ofstream(dir / "f64.nii", std::ios::binary) << dtype64;
  CHECK_THROWS_AS(io::read_nifti(dir / "f64.nii"), UnsupportedError);

  CHECK_THROWS_AS(io::read_nifti(dir / "missing.nii"), IoError);
}

TEST_CASE("png round trip for images and labels") {
  const auto dir = scratch("png");
  Image im(5, 7);
  LabelMap lm(5, 7);
  for (int y = 0; y < 5; ++y)
    for (int x = 0; x < 7; ++x) {
      im(y, x) = static_cast<float>((y * 7 + x) * 7 % 256);
      lm(y, x) = static_cast<std::uint8_t>((x + y) % 4);
    }
  io::write_png(im, dir / "a.png");
  io::write_label_png(lm, dir / "l.png");
  CHECK(io::read_png(dir / "a.png") == im);
  CHECK(io::read_label_png(dir / "l.png") == lm);
  CHECK_THROWS_AS(io::read_png(dir / "none.png"), IoError);
}

TEST_CASE("bilinear resize is corner aligned") {
  Image im(2, 2);
  im(0, 0) = 0;
  im(0, 1) = 100;
  im(1, 0) = 50;
  im(1, 1) = 150;
  const auto r = io::resize_bilinear(im, 3, 5);
  CHECK(r(0, 0) == doctest::Approx(0));
  CHECK(r(0, 4) == doctest::Approx(100));
  CHECK(r(2, 0) == doctest::Approx(50));
  CHECK(r(2, 4) == doctest::Approx(150));
  CHECK(r(1, 2) == doctest::Approx(75));
}

TEST_CASE("normalize maps [0,255] onto [-1,1] and back") {
  Image im(1, 3);
  im(0, 0) = 0;
  im(0, 1) = 127.5f;
  im(0, 2) = 255;
  const auto t = io::normalize(im);
  CHECK(t.values()[0] == doctest::Approx(-1.0));
  CHECK(t.values()[1] == doctest::Approx(0.0));
  CHECK(t.values()[2] == doctest::Approx(1.0));
  Image ints(1, 3);
  ints(0, 1) = 128;
  ints(0, 2) = 255;
  CHECK(io::denormalize(io::normalize(ints)) == ints);
  im(0, 0) = 256;
  CHECK_THROWS_AS(io::normalize(im), ContractError);
}

TEST_CASE("landmark csv round trip") {
  const auto dir = scratch("lm");
  const std::vector<data::Landmark> lms = {{"a", 1.5, 2.25, 3}, {"b", -1, 0, 7.125}};
  data::write_landmarks(lms, dir / "l.csv");
  CHECK(read_bytes(dir / "l.csv").rfind("name,x,y,z\n", 0) == 0);
  const auto back = data::read_landmarks(dir / "l.csv");
  REQUIRE(back.size() == 2);
  CHECK(back[1].name == "b");
  CHECK(back[1].z == 7.125);
  CHECK(back[0].y == 2.25);
}

TEST_CASE("split assignment") {
  std::vector<std::string> ids;
  for (int i = 0; i < 11; ++i) ids.push_back("s" + std::to_string(i));
  const auto s = data::assign_splits(ids, 3);
  CHECK(s.at("train").size() == 8);
  CHECK(s.at("test").size() == 3);
  CHECK(s.at("partA").size() == 4);
  CHECK(s.at("partB").size() == 4);
  std::set<std::string> train(s.at("train").begin(), s.at("train").end());
  for (const auto& t : s.at("test")) CHECK(train.count(t) == 0);
  std::set<std::string> parts(s.at("partA").begin(), s.at("partA").end());
  parts.insert(s.at("partB").begin(), s.at("partB").end());
  CHECK(parts == train);
  CHECK(data::assign_splits(ids, 3) == s);

  std::vector<std::string> odd(ids.begin(), ids.begin() + 9);  // train 7
  const auto so = data::assign_splits(odd, 1);
  CHECK(so.at("partA").size() == 4);
  CHECK(so.at("partB").size() == 3);
}

TEST_CASE("phantom is deterministic and follows the modality contrast") {
  const data::PhantomSize size{16, 64, 64};
  const auto a = data::generate_phantom_subject(9, size, 1.0, "x");
  const auto b = data::generate_phantom_subject(9, size, 1.0, "x");
  const auto c = data::generate_phantom_subject(10, size, 1.0, "x");
  CHECK(a.vol_a == b.vol_a);
  CHECK(a.vol_b == b.vol_b);
  CHECK(a.labels == b.labels);
  CHECK(!(a.vol_a == c.vol_a));

  double sum_a[4] = {}, sum_b[4] = {};
  int count[4] = {};
  for (std::size_t i = 0; i < a.labels.size(); ++i) {
    const int l = static_cast<int>(a.labels.values()[i]);
    sum_a[l] += a.vol_a.values()[i];
    sum_b[l] += a.vol_b.values()[i];
    ++count[l];
  }
  REQUIRE(count[data::kTumor] > 0);
  const auto mean = [&](const double* s, int l) { return s[l] / count[l]; };
  // tissue ordering flips between modalities; the tumor is only bright in B
  CHECK(mean(sum_a, 1) > mean(sum_a, 2));
  CHECK(mean(sum_b, 1) < mean(sum_b, 2));
  CHECK(mean(sum_a, 3) < mean(sum_a, 2));
  CHECK(mean(sum_b, 3) > mean(sum_b, 2));
  CHECK(!a.landmarks.empty());

  const auto healthy = data::generate_phantom_subject(9, size, 0.0, "x");
  for (float v : healthy.labels.values()) CHECK(v != static_cast<float>(data::kTumor));

  CHECK_THROWS(data::generate_phantom_subject(1, {8, 64, 64}, 1.0));
}

TEST_CASE("corpus manifest round trip") {
  const auto dir = scratch("corpus");
  const auto m = data::generate_corpus(4, 5, {16, 64, 64}, dir);
  const auto back = data::DatasetManifest::load(dir / "manifest.json");
  CHECK(back.subjects.size() == 5);
  CHECK(back.splits == m.splits);
  CHECK_NOTHROW(back.validate());
  const auto s = data::load_subject(back, back.subjects[0].id);
  CHECK(s.vol_a.depth() == 16);
  CHECK(s.vol_b.height() == 64);
  CHECK(!s.landmarks.empty());
  CHECK_THROWS_AS(back.split("nope"), ContractError);
  CHECK_THROWS(data::load_subject(back, "nobody"));

  auto broken = m;
  broken.splits["test"].push_back(broken.splits["train"][0]);
  CHECK_THROWS_AS(broken.validate(), ContractError);
}

TEST_CASE("crop to the foreground and map points into the cube") {
  Volume v(10, 20, 30, DType::UInt8);
  for (int z = 2; z <= 7; ++z)
    for (int y = 5; y <= 14; ++y)
      for (int x = 10; x <= 19; ++x) v(z, y, x) = 100;
  const auto box = io::foreground_box(v);
  CHECK(box.lo == std::array<int, 3>{2, 5, 10});
  CHECK(box.hi == std::array<int, 3>{7, 14, 19});
  const auto c = io::crop_resize(v, box, 16);
  CHECK(c.depth() == 16);
  for (float x : c.values()) CHECK(x == doctest::Approx(100));
  const auto p = io::map_to_cube({7, 14, 19}, box, 16);
  CHECK(p[0] == doctest::Approx(15));
  CHECK(p[2] == doctest::Approx(15));
  CHECK_THROWS_AS(io::foreground_box(Volume(2, 2, 2, DType::UInt8)), ContractError);
}

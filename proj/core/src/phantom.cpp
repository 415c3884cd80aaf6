#include "n2n/phantom.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <numbers>
#include <optional>
#include <random>
#include <set>
#include <sstream>

#include <json.hpp>

#include "n2n/error.hpp"
#include "n2n/rng.hpp"
#include "n2n/volume_io.hpp"

namespace n2n::data {

namespace {

struct Ellipsoid {
  std::array<double, 3> center;  // z, y, x
  std::array<double, 3> radii;   // z, y(local), x(local)
  double angle = 0.0;            // in-plane rotation

  // local coordinates of world point
  std::array<double, 3> local(double z, double y, double x) const {
    const double dz = z - center[0];
    const double dy = y - center[1];
    const double dx = x - center[2];
    const double c = std::cos(angle);
    const double s = std::sin(angle);
    return {dz, c * dy + s * dx, -s * dy + c * dx};
  }

  double level(double z, double y, double x) const {
    const auto q = local(z, y, x);
    return (q[0] / radii[0]) * (q[0] / radii[0]) + (q[1] / radii[1]) * (q[1] / radii[1]) +
           (q[2] / radii[2]) * (q[2] / radii[2]);
  }

  bool contains(double z, double y, double x) const { return level(z, y, x) <= 1.0; }

  // world position of a local offset
  std::array<double, 3> world(double qz, double qy, double qx) const {
    const double c = std::cos(angle);
    const double s = std::sin(angle);
    return {center[0] + qz, center[1] + c * qy - s * qx, center[2] + s * qy + c * qx};
  }
};

enum class Region { Outside, Ventricle, Tissue1, Tissue2, Tumor };

double profile_value(const ModalityProfile& p, Region r) {
  switch (r) {
    case Region::Outside:
      return p.outside;
    case Region::Ventricle:
      return p.ventricle;
    case Region::Tissue1:
      return p.tissue1;
    case Region::Tissue2:
      return p.tissue2;
    case Region::Tumor:
      return p.tumor;
  }
  return 0.0;
}

std::string format_double(double v) {
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  if (ec != std::errc()) throw FormatError("cannot format number");
  return std::string(buf, end);
}

void write_text(const std::filesystem::path& p, const std::string& text) {
  std::ofstream f(p, std::ios::binary);
  if (!f) throw IoError("cannot write " + p.string());
  f << text;
  if (!f) throw IoError("write failed: " + p.string());
}

std::string read_text(const std::filesystem::path& p) {
  std::ifstream f(p, std::ios::binary);
  if (!f) throw IoError("cannot read " + p.string());
  std::ostringstream os;
  os << f.rdbuf();
  return os.str();
}

}  // namespace

PhantomSubject generate_phantom_subject(std::uint64_t seed, const PhantomSize& size, double tumor_probability,
                                        const std::string& subject_id) {
  if (size.depth < kMinPhantomSize.depth || size.height < kMinPhantomSize.height ||
      size.width < kMinPhantomSize.width) {
    throw ConfigError("phantom size " + std::to_string(size.depth) + "x" + std::to_string(size.height) + "x" +
                      std::to_string(size.width) + " is below the minimum 16x64x64");
  }
  if (!(tumor_probability >= 0.0 && tumor_probability <= 1.0)) {
    throw ConfigError("tumor_probability must lie in [0,1]");
  }
  std::mt19937_64 rng(derive_seed(seed, {0x5048414eULL}));
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  auto uniform = [&](double lo, double hi) { return lo + (hi - lo) * unit(rng); };

  const double D = size.depth;
  const double H = size.height;
  const double W = size.width;
  const double scale = uniform(0.9, 1.02);
  const double angle = uniform(-8.0, 8.0) * std::numbers::pi / 180.0;
  const std::array<double, 3> center = {(D - 1) / 2 + uniform(-0.5, 0.5), (H - 1) / 2 + uniform(-2.0, 2.0),
                                        (W - 1) / 2 + uniform(-2.0, 2.0)};

  Ellipsoid head{center, {0.47 * D * scale, 0.42 * H * scale, 0.33 * W * scale}, angle};
  Ellipsoid inner{center, {head.radii[0] * 0.72, head.radii[1] * 0.72, head.radii[2] * 0.70}, angle};
  Ellipsoid ventricle{center, {head.radii[0] * 0.40, head.radii[1] * 0.34, head.radii[2] * 0.12}, angle};

  std::optional<Ellipsoid> tumor;
  if (unit(rng) < tumor_probability) {
    for (int attempt = 0; attempt < 64 && !tumor; ++attempt) {
      // centre inside the inner tissue, off the ventricle
      const double qz = uniform(-0.3, 0.3) * inner.radii[0];
      const double qy = uniform(-0.6, 0.6) * inner.radii[1];
      const double qx = (unit(rng) < 0.5 ? -1.0 : 1.0) * uniform(0.45, 0.8) * inner.radii[2];
      Ellipsoid t{head.world(qz, qy, qx),
                  {uniform(0.35, 0.55) * head.radii[0], uniform(0.22, 0.32) * head.radii[1],
                   uniform(0.25, 0.38) * head.radii[2]},
                  uniform(0.0, std::numbers::pi)};
      // reject overlap with the ventricle (sampled on the voxel grid)
      bool overlap = false;
      for (int z = 0; z < size.depth && !overlap; ++z) {
        for (int y = 0; y < size.height && !overlap; ++y) {
          for (int x = 0; x < size.width && !overlap; ++x) {
            overlap = t.level(z, y, x) <= 1.3 && ventricle.contains(z, y, x);
          }
        }
      }
      if (!overlap) tumor = t;
    }
  }

  PhantomSubject s;
  s.subject_id = subject_id.empty() ? "phantom_" + std::to_string(seed) : subject_id;
  s.vol_a = Volume(size.depth, size.height, size.width, DType::UInt8);
  s.vol_b = Volume(size.depth, size.height, size.width, DType::UInt8);
  s.labels = Volume(size.depth, size.height, size.width, DType::UInt8);

  std::normal_distribution<double> noise(0.0, kPhantomNoiseSigma);
  auto sample = [&](double base) { return static_cast<float>(std::clamp(std::round(base + noise(rng)), 0.0, 255.0)); };

  for (int z = 0; z < size.depth; ++z) {
    for (int y = 0; y < size.height; ++y) {
      for (int x = 0; x < size.width; ++x) {
        Region r = Region::Outside;
        std::uint8_t label = kBackground;
        if (head.contains(z, y, x)) {
          r = Region::Tissue2;
          label = kTissue2;
          if (inner.contains(z, y, x)) {
            r = Region::Tissue1;
            label = kTissue1;
          }
          if (ventricle.contains(z, y, x)) {
            r = Region::Ventricle;
            label = kBackground;
          }
          if (tumor && tumor->contains(z, y, x)) {
            r = Region::Tumor;
            label = kTumor;
          }
        }
        s.labels(z, y, x) = label;
        if (r == Region::Outside) continue;  // exact zero, no noise
        s.vol_a(z, y, x) = sample(profile_value(kModalityA, r));
        s.vol_b(z, y, x) = sample(profile_value(kModalityB, r));
      }
    }
  }

  // ventricle axis extrema plus centroid
  const auto& v = ventricle;
  const std::array<std::array<double, 3>, 7> local = {{{-v.radii[0], 0, 0},
                                                       {v.radii[0], 0, 0},
                                                       {0, -v.radii[1], 0},
                                                       {0, v.radii[1], 0},
                                                       {0, 0, -v.radii[2]},
                                                       {0, 0, v.radii[2]},
                                                       {0, 0, 0}}};
  for (std::size_t i = 0; i < local.size(); ++i) {
    const auto w = v.world(local[i][0], local[i][1], local[i][2]);
    s.landmarks.push_back({"L" + std::to_string(i + 1), w[2], w[1], w[0]});
  }
  return s;
}

// ----------------------------------------------------------------- manifest

const SubjectEntry& DatasetManifest::subject(const std::string& id) const {
  for (const auto& s : subjects) {
    if (s.id == id) return s;
  }
  throw ContractError("subject '" + id + "' not in manifest");
}

const std::vector<std::string>& DatasetManifest::split(const std::string& name) const {
  const auto it = splits.find(name);
  if (it == splits.end()) throw ContractError("manifest has no split '" + name + "'");
  return it->second;
}

std::string DatasetManifest::to_json() const {
  nlohmann::ordered_json j;
  j["subjects"] = nlohmann::ordered_json::array();
  for (const auto& s : subjects) {
    nlohmann::ordered_json e;
    e["id"] = s.id;
    nlohmann::ordered_json mods = nlohmann::ordered_json::object();
    for (const auto& [k, v] : s.modalities) mods[k] = v;
    e["modalities"] = mods;
    e["labels"] = s.labels;
    e["landmarks"] = s.landmarks;
    j["subjects"].push_back(e);
  }
  nlohmann::ordered_json sp = nlohmann::ordered_json::object();
  for (const char* name : {"train", "test", "partA", "partB"}) {
    const auto it = splits.find(name);
    sp[name] = it == splits.end() ? std::vector<std::string>{} : it->second;
  }
  for (const auto& [k, v] : splits) {
    if (!sp.contains(k)) sp[k] = v;
  }
  j["splits"] = sp;
  return j.dump(2) + "\n";
}

DatasetManifest DatasetManifest::from_json(const std::string& text, const std::filesystem::path& root) {
  DatasetManifest m;
  m.root = root;
  try {
    const auto j = nlohmann::json::parse(text);
    for (const auto& e : j.at("subjects")) {
      SubjectEntry s;
      s.id = e.at("id").get<std::string>();
      for (const auto& [k, v] : e.at("modalities").items()) s.modalities[k] = v.get<std::string>();
      s.labels = e.value("labels", "");
      s.landmarks = e.value("landmarks", "");
      m.subjects.push_back(std::move(s));
    }
    for (const auto& [k, v] : j.at("splits").items()) m.splits[k] = v.get<std::vector<std::string>>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed manifest: ") + e.what());
  }
  m.validate();
  return m;
}

void DatasetManifest::save(const std::filesystem::path& manifest_path) const { write_text(manifest_path, to_json()); }

DatasetManifest DatasetManifest::load(const std::filesystem::path& manifest_path) {
  return from_json(read_text(manifest_path), manifest_path.parent_path());
}

void DatasetManifest::validate() const {
  std::set<std::string> ids;
  for (const auto& s : subjects) {
    if (!ids.insert(s.id).second) throw ContractError("duplicate subject id '" + s.id + "'");
  }
  auto get = [&](const char* name) {
    const auto it = splits.find(name);
    return it == splits.end() ? std::vector<std::string>{} : it->second;
  };
  for (const auto& [name, members] : splits) {
    for (const auto& id : members) {
      if (!ids.count(id)) throw ContractError("split '" + name + "' names unknown subject '" + id + "'");
    }
  }
  const auto train = get("train");
  const auto test = get("test");
  std::set<std::string> tr(train.begin(), train.end());
  for (const auto& id : test) {
    if (tr.count(id)) throw ContractError("subject '" + id + "' is in both train and test");
  }
  const auto a = get("partA");
  const auto b = get("partB");
  if (!a.empty() || !b.empty()) {
    std::set<std::string> ab(a.begin(), a.end());
    for (const auto& id : b) {
      if (!ab.insert(id).second) throw ContractError("subject '" + id + "' is in both partA and partB");
    }
    if (ab != tr) throw ContractError("partA and partB must together equal the training split");
    const auto diff = static_cast<long>(a.size()) - static_cast<long>(b.size());
    if (diff > 1 || diff < -1) throw ContractError("partA and partB sizes differ by more than 1");
  }
}

std::map<std::string, std::vector<std::string>> assign_splits(const std::vector<std::string>& ids,
                                                              std::uint64_t seed) {
  if (ids.size() < 3) throw ConfigError("at least 3 subjects are required");
  std::vector<std::string> order = ids;
  std::mt19937_64 rng(derive_seed(seed, {0x53504c54ULL}));
  std::shuffle(order.begin(), order.end(), rng);
  const auto n_train = static_cast<std::size_t>(std::floor(kTrainFraction * static_cast<double>(ids.size())));
  std::vector<std::string> train(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_train));
  std::vector<std::string> test(order.begin() + static_cast<std::ptrdiff_t>(n_train), order.end());
  const std::size_t n_a = (train.size() + 1) / 2;
  std::vector<std::string> part_a(train.begin(), train.begin() + static_cast<std::ptrdiff_t>(n_a));
  std::vector<std::string> part_b(train.begin() + static_cast<std::ptrdiff_t>(n_a), train.end());
  for (auto* v : {&train, &test, &part_a, &part_b}) std::sort(v->begin(), v->end());
  return {{"train", train}, {"test", test}, {"partA", part_a}, {"partB", part_b}};
}

DatasetManifest generate_corpus(std::uint64_t seed, int n_subjects, const PhantomSize& size,
                                const std::filesystem::path& out_dir, double tumor_probability) {
  if (n_subjects < 3) throw ConfigError("n_subjects must be >= 3");
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) throw IoError("cannot create " + out_dir.string() + ": " + ec.message());

  DatasetManifest m;
  m.root = out_dir;
  std::vector<std::string> ids;
  for (int i = 0; i < n_subjects; ++i) {
    char id[32];
    std::snprintf(id, sizeof(id), "sub%03d", i + 1);
    const auto subject =
        generate_phantom_subject(derive_seed(seed, {0x53554253ULL, static_cast<std::uint64_t>(i)}), size,
                                 tumor_probability, id);
    SubjectEntry e;
    e.id = id;
    e.modalities["A"] = std::string(id) + "_A.nii";
    e.modalities["B"] = std::string(id) + "_B.nii";
    e.labels = std::string(id) + "_labels.nii";
    e.landmarks = std::string(id) + "_landmarks.csv";
    io::write_nifti(subject.vol_a, out_dir / e.modalities["A"]);
    io::write_nifti(subject.vol_b, out_dir / e.modalities["B"]);
    io::write_nifti(subject.labels, out_dir / e.labels);
    write_landmarks(subject.landmarks, out_dir / e.landmarks);
    m.subjects.push_back(std::move(e));
    ids.push_back(id);
  }
  m.splits = assign_splits(ids, seed);
  m.validate();
  m.save(out_dir / "manifest.json");
  return m;
}

std::vector<Landmark> read_landmarks(const std::filesystem::path& path) {
  std::istringstream in(read_text(path));
  std::vector<Landmark> out;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::vector<std::string> fields;
    std::stringstream ls(line);
    std::string f;
    while (std::getline(ls, f, ',')) fields.push_back(f);
    if (fields.size() != 4) {
      throw FormatError(path.string() + ":" + std::to_string(line_no) + ": expected name,x,y,z");
    }
    if (line_no == 1 && fields[0] == "name") continue;
    Landmark lm;
    lm.name = fields[0];
    double* dst[3] = {&lm.x, &lm.y, &lm.z};
    for (int k = 0; k < 3; ++k) {
      const auto& t = fields[static_cast<std::size_t>(k + 1)];
      auto [p, e] = std::from_chars(t.data(), t.data() + t.size(), *dst[k]);
      if (e != std::errc() || p != t.data() + t.size()) {
        throw FormatError(path.string() + ":" + std::to_string(line_no) + ": bad coordinate '" + t + "'");
      }
    }
    out.push_back(std::move(lm));
  }
  return out;
}

void write_landmarks(const std::vector<Landmark>& landmarks, const std::filesystem::path& path) {
  std::string text = "name,x,y,z\n";
  for (const auto& lm : landmarks) {
    text += lm.name + "," + format_double(lm.x) + "," + format_double(lm.y) + "," + format_double(lm.z) + "\n";
  }
  write_text(path, text);
}

LoadedSubject load_subject(const DatasetManifest& manifest, const std::string& id) {
  const auto& e = manifest.subject(id);
  LoadedSubject s;
  s.id = id;
  const auto a = e.modalities.find("A");
  const auto b = e.modalities.find("B");
  if (a == e.modalities.end() || b == e.modalities.end()) {
    throw ContractError("subject '" + id + "' lacks modality A or B");
  }
  s.vol_a = io::read_nifti(manifest.resolve(a->second));
  s.vol_b = io::read_nifti(manifest.resolve(b->second));
  if (!e.labels.empty()) s.labels = io::read_nifti(manifest.resolve(e.labels));
  if (!e.landmarks.empty()) s.landmarks = read_landmarks(manifest.resolve(e.landmarks));
  return s;
}

}  // namespace n2n::data

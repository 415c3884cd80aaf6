#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "n2n/checkpoint.hpp"
#include "n2n/error.hpp"
#include "n2n/metrics.hpp"
#include "n2n/phantom.hpp"
#include "n2n/pipeline.hpp"
#include "n2n/registration.hpp"
#include "n2n/segmenter.hpp"
#include "n2n/trainer.hpp"
#include "n2n/volume_io.hpp"

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;
using namespace n2n;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitData = 2;

void write_text(const fs::path& p, const std::string& text) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream f(p, std::ios::binary);
  if (!f) throw IoError("cannot write " + p.string());
  f << text;
  if (!f) throw IoError("write failed: " + p.string());
}

std::string read_text(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  if (!f) throw IoError("cannot read " + p.string());
  std::ostringstream os;
  os << f.rdbuf();
  return os.str();
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream is(s);
  while (std::getline(is, cur, ',')) {
    if (!cur.empty()) out.push_back(cur);
  }
  return out;
}

std::string slice_name(const std::string& subject, const std::string& modality, int k) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "%04d", k);
  return subject + "_" + modality + "_" + buf + ".png";
}

// Reads {subject}_{modality}_{k:04d}.png for k in [0, count).
std::vector<Image> read_slices(const fs::path& dir, const std::string& subject, const std::string& modality,
                               int count) {
  std::vector<Image> out;
  for (int k = 0; k < count; ++k) {
    const auto p = dir / slice_name(subject, modality, k);
    if (!fs::exists(p)) throw ContractError("missing slice " + p.string());
    out.push_back(io::read_png(p));
  }
  return out;
}

std::vector<fs::path> png_files(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw IoError("not a directory: " + dir.string());
  std::vector<fs::path> out;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (e.is_regular_file() && e.path().extension() == ".png") out.push_back(e.path());
  }
  std::sort(out.begin(), out.end());
  return out;
}

// Shared option state; each subcommand reads what it registered.
struct Options {
  std::string config;
  std::uint64_t seed = 0;
  std::string out;
  std::string checkpoint;
  std::string loss = "cgan+l1";
  double lambda = 100.0;
  int epochs = 400;
  double width_mult = 1.0;
  double weight = 0.5;
  std::string backend = "builtin-affine";
  std::string metrics = "mae,psnr,mi,ssim";

  std::string manifest;
  std::string split;
  int subjects = 10;
  std::string size = "16x64x64";
  double tumor_prob = 1.0;
  int side = 256;
  std::string pipeline = "generation";
  std::string modalities = "A,B";
  std::string input;
  bool stochastic = false;
  bool saturating = false;
  std::string real;
  std::string fake;
  std::string channels = "g,g,t";
  std::string translated;
  std::string modality = "A";
  double lr = 0.0;
  std::string fixed;
  std::string moving;
  std::string cost = "ncc";
  std::string translated_cost = "mi";
  std::string field1;
  std::string field2;
  std::string labels;
  std::string image;
  double angle = 30.0;
  int slice_step = 1;
  double grid_step = 0.01;
  int folds = 5;
};

struct Command {
  CLI::App* app = nullptr;
  std::function<void(Options&)> run;
};

void add_common(CLI::App* sub, Options& o, bool out_required) {
  sub->add_option("--config", o.config, "JSON file of option values; command-line flags take precedence");
  sub->add_option("--seed", o.seed, "seed for every random choice of the run")->capture_default_str();
  auto* out = sub->add_option("--out", o.out, "output directory");
  if (out_required) out->required();
}

const CLI::Validator kMetricList(
    [](std::string& v) -> std::string {
      for (const auto& m : split_list(v)) {
        if (m != "mae" && m != "psnr" && m != "mi" && m != "ssim") return "unknown metric '" + m + "'";
      }
      return split_list(v).empty() ? "empty metric list" : "";
    },
    "LIST");

const CLI::Validator kBackendSpec(
    [](std::string& v) -> std::string {
      if (v == "builtin-affine" || v == "builtin" || (v.rfind("cmd:", 0) == 0 && v.size() > 4)) return "";
      return "expected builtin-affine or cmd:<command>, got '" + v + "'";
    },
    "BACKEND");

json typed(const std::string& v) {
  const json j = json::parse(v, nullptr, false);
  return j.is_number() ? j : json(v);
}

// Writes {out}/effective_config.json with every option value of the run.
void snapshot(const CLI::App* sub, const fs::path& out_dir) {
  json j;
  j["subcommand"] = sub->get_name();
  json opts = json::object();
  for (const CLI::Option* opt : sub->get_options()) {
    if (opt->get_name() == "--help" || opt->get_lnames().empty()) continue;
    const std::string key = opt->get_lnames().front();
    if (key == "config") continue;
    if (opt->get_type_size() == 0) {
      opts[key] = opt->count() > 0;
    } else {
      opts[key] = typed(opt->count() > 0 ? opt->results().back() : opt->get_default_str());
    }
  }
  j["options"] = opts;
  write_text(out_dir / "effective_config.json", j.dump(2) + "\n");
}

data::PhantomSize parse_size(const std::string& s) {
  int d = 0, h = 0, w = 0;
  char x1 = 0, x2 = 0;
  std::istringstream is(s);
  if (!(is >> d >> x1 >> h >> x2 >> w) || x1 != 'x' || x2 != 'x') throw UsageError("--size expects DxHxW, got " + s);
  return {d, h, w};
}

// ----------------------------------------------------------------- commands

void cmd_phantom(Options& o) {
  const auto m = data::generate_corpus(o.seed, o.subjects, parse_size(o.size), o.out, o.tumor_prob);
  std::printf("wrote %zu subjects to %s\n", m.subjects.size(), (fs::path(o.out) / "manifest.json").c_str());
}

void cmd_slice(Options& o) {
  const auto m = data::DatasetManifest::load(o.manifest);
  std::vector<std::string> ids;
  if (o.split.empty()) {
    for (const auto& s : m.subjects) ids.push_back(s.id);
  } else {
    ids = m.split(o.split);
  }
  const auto mods = split_list(o.modalities);
  std::size_t written = 0;
  for (const auto& id : ids) {
    const auto s = data::load_subject(m, id);
    io::CropBox box;
    if (o.pipeline == "cube") box = io::foreground_box(s.vol_a);
    for (const auto& mod : mods) {
      if (mod != "A" && mod != "B") throw ContractError("unknown modality '" + mod + "' (have A, B)");
      const Volume& v = mod == "A" ? s.vol_a : s.vol_b;
      std::vector<Image> slices;
      if (o.pipeline == "cube") {
        for (const auto& im : io::slice_volume(io::crop_resize(v, box, o.side))) slices.push_back(quantize_u8(im));
      } else if (o.side > 0) {
        slices = io::generation_slices(v, o.side);
      } else {
        for (const auto& im : io::slice_volume(v)) slices.push_back(quantize_u8(im));
      }
      for (std::size_t k = 0; k < slices.size(); ++k) {
        io::write_png(slices[k], fs::path(o.out) / slice_name(id, mod, static_cast<int>(k)));
        ++written;
      }
    }
    std::vector<LabelMap> labels;
    if (o.pipeline == "cube") {
      labels = io::slice_labels(io::crop_resize(s.labels, box, o.side, true));
    } else if (o.side > 0) {
      labels = io::generation_label_slices(s.labels, o.side);
    } else {
      labels = io::slice_labels(s.labels);
    }
    for (std::size_t k = 0; k < labels.size(); ++k) {
      io::write_label_png(labels[k], fs::path(o.out) / slice_name(id, "labels", static_cast<int>(k)));
      ++written;
    }
  }
  std::printf("wrote %zu PNG slices to %s\n", written, o.out.c_str());
}

void cmd_train(Options& o, const CLI::App* sub) {
  train::TrainConfig c;
  c.loss_mode = nn::parse_loss_mode(o.loss);
  c.lambda = o.lambda;
  c.epochs = o.epochs;
  c.seed = o.seed;
  c.width_multiplier = o.width_mult;
  c.manifest = o.manifest;
  c.checkpoint_dir = o.out;
  c.non_saturating = !o.saturating;
  if (!o.split.empty()) c.split = o.split;
  if (sub->get_option("--lr")->count() > 0) c.learning_rate = o.lr;
  c.validate();
  train::TrainOptions opt;
  if (!o.checkpoint.empty()) opt.resume_from = fs::path(o.checkpoint);
  json log = json::array();
  opt.on_step = [&](const train::StepLosses& l, int epoch) {
    log.push_back({{"step", l.step}, {"epoch", epoch}, {"d_loss", l.d_loss}, {"g_adv", l.g_adv}, {"g_l1", l.g_l1},
                   {"g_total", l.g_total}});
    return true;
  };
  const auto pairs = train::load_training_pairs(c);
  const auto r = train::train(c, pairs, opt);
  write_text(fs::path(o.out) / "train_config.json", c.to_json());
  write_text(fs::path(o.out) / "losses.json", log.dump(1) + "\n");
  std::printf("trained %zu steps on %zu pairs; final checkpoint %s\n", r.trace.size(), pairs.size(),
              (fs::path(o.out) / "final.ckpt").c_str());
}

void cmd_translate(Options& o) {
  auto ckpt = Checkpoint::load(o.checkpoint);
  auto g = train::load_generator(ckpt);
  const auto cfg = train::TrainConfig::from_json(ckpt.config_json);
  json prov;
  prov["checkpoint"] = o.checkpoint;
  prov["checkpoint_step"] = ckpt.step;
  prov["config_hash"] = ckpt.config_hash;
  prov["stochastic"] = o.stochastic;
  prov["seed"] = o.seed;
  json outputs = json::array();
  if (!o.input.empty()) {
    const auto files = png_files(o.input);
    std::vector<Image> images;
    for (const auto& f : files) images.push_back(io::read_png(f));
    const auto out = train::translate(g, images, o.stochastic, o.seed);
    for (std::size_t i = 0; i < files.size(); ++i) {
      // {subject}_{source}_{slice}.png -> {subject}_{target}_{slice}.png
      std::string name = files[i].filename().string();
      const std::string src = "_" + cfg.source_modality + "_";
      const auto pos = name.rfind(src);
      if (pos != std::string::npos) name.replace(pos, src.size(), "_" + cfg.target_modality + "_");
      io::write_png(out[i], fs::path(o.out) / name);
      outputs.push_back({{"input", files[i].filename().string()}, {"output", name}});
    }
  } else {
    if (o.manifest.empty()) throw UsageError("translate needs --input DIR or --manifest PATH");
    const auto m = data::DatasetManifest::load(o.manifest);
    const auto& ids = m.split(o.split.empty() ? "test" : o.split);
    for (const auto& id : ids) {
      const auto s = data::load_subject(m, id);
      const Volume& src = cfg.source_modality == "B" ? s.vol_b : s.vol_a;
      std::vector<Image> out;
      if (o.side > 0) {
        out = train::translate(g, io::generation_slices(src, o.side), o.stochastic, o.seed);
      } else {
        out = pipeline::translate_native(g, src, o.seed);
      }
      for (std::size_t k = 0; k < out.size(); ++k) {
        const auto name = slice_name(id, cfg.target_modality, static_cast<int>(k));
        io::write_png(out[k], fs::path(o.out) / name);
        outputs.push_back({{"subject", id}, {"slice", k}, {"output", name}});
      }
    }
  }
  prov["outputs"] = outputs;
  write_text(fs::path(o.out) / "provenance.json", prov.dump(2) + "\n");
  std::printf("translated %zu images into %s\n", outputs.size(), o.out.c_str());
}

void cmd_eval(Options& o) {
  const auto fakes = png_files(o.fake);
  if (fakes.empty()) throw ContractError("no PNG files in " + o.fake);
  std::vector<Image> real, fake;
  for (const auto& f : fakes) {
    const auto r = fs::path(o.real) / f.filename();
    if (!fs::exists(r)) throw ContractError("no real counterpart for " + f.filename().string() + " in " + o.real);
    real.push_back(io::read_png(r));
    fake.push_back(io::read_png(f));
  }
  const auto report = metrics::evaluate_pairs(real, fake, split_list(o.metrics));
  report.write(fs::path(o.out) / "report.json", fs::path(o.out) / "report.csv");
  std::printf("%s", report.to_csv().c_str());
}

std::map<std::string, std::vector<Image>> load_translated(const data::DatasetManifest& m,
                                                          const std::vector<std::string>& ids,
                                                          const seg::ChannelSpec& spec, const std::string& dir) {
  std::map<std::string, std::vector<Image>> out;
  const bool needed = std::find(spec.begin(), spec.end(), seg::Source::Translated) != spec.end();
  if (!needed) return out;
  if (dir.empty()) throw UsageError("channel spec uses translated images; pass --translated DIR");
  for (const auto& id : ids) {
    const auto s = data::load_subject(m, id);
    out[id] = read_slices(dir, id, "B", s.vol_a.depth());
  }
  return out;
}

std::vector<seg::SegSample> seg_samples(const data::DatasetManifest& m, const std::vector<std::string>& ids,
                                        const seg::ChannelSpec& spec, const std::string& given_modality,
                                        std::map<std::string, std::vector<Image>>& translated) {
  std::vector<seg::SegSample> out;
  for (const auto& id : ids) {
    auto s = data::load_subject(m, id);
    if (given_modality == "B") s.vol_a = s.vol_b;
    const auto it = translated.find(id);
    const auto samples = pipeline::tms_samples(s, it == translated.end() ? std::vector<Image>{} : it->second, spec);
    out.insert(out.end(), samples.begin(), samples.end());
  }
  return out;
}

void cmd_seg_train(Options& o, const CLI::App* sub) {
  const auto m = data::DatasetManifest::load(o.manifest);
  const auto& ids = m.split(o.split.empty() ? "partB" : o.split);
  if (ids.empty()) throw ConfigError("segmentation training split is empty");
  const auto spec = seg::parse_channel_spec(o.channels);
  auto translated = load_translated(m, ids, spec, o.translated);
  const auto samples = seg_samples(m, ids, spec, o.modality, translated);
  seg::SegTrainConfig c;
  c.seed = o.seed;
  c.epochs = o.epochs;
  if (sub->get_option("--width-mult")->count() > 0) c.width_multiplier = o.width_mult;
  if (sub->get_option("--lr")->count() > 0) c.learning_rate = o.lr;
  const auto r = seg::seg_train(c, samples);
  r.checkpoint.save(fs::path(o.out) / "segmenter.ckpt");
  json log = r.loss_trace;
  write_text(fs::path(o.out) / "losses.json", log.dump() + "\n");
  std::printf("trained segmenter on %zu slices (%s); checkpoint %s\n", samples.size(),
              seg::channel_spec_name(spec).c_str(), (fs::path(o.out) / "segmenter.ckpt").c_str());
}

json scores_json(const seg::SegScores& s) {
  auto nan_null = [](double v) { return std::isnan(v) ? json(nullptr) : json(v); };
  json j;
  j["accuracy_all"] = s.accuracy_all;
  j["accuracy_per_class"] = json::array();
  for (double v : s.accuracy_per_class) j["accuracy_per_class"].push_back(nan_null(v));
  j["dice_per_class"] = json::array();
  for (double v : s.dice_per_class) j["dice_per_class"].push_back(nan_null(v));
  return j;
}

void cmd_seg_eval(Options& o) {
  const auto m = data::DatasetManifest::load(o.manifest);
  const auto& ids = m.split(o.split.empty() ? "test" : o.split);
  const auto spec = seg::parse_channel_spec(o.channels);
  auto translated = load_translated(m, ids, spec, o.translated);
  const auto samples = seg_samples(m, ids, spec, o.modality, translated);
  auto model = seg::load_segmenter(Checkpoint::load(o.checkpoint));
  std::vector<LabelMap> truth, pred;
  for (const auto& s : samples) {
    truth.push_back(s.labels);
    pred.push_back(seg::predict(model, s.image));
  }
  const auto scores = seg::score_predictions(truth, pred, model.config().num_classes);
  json j;
  j[seg::channel_spec_name(spec)] = scores_json(scores);
  write_text(fs::path(o.out) / "seg_report.json", j.dump(2) + "\n");
  std::printf("%s", j.dump(2).c_str());
  std::printf("\n");
}

void cmd_fcn_score(Options& o) {
  const auto m = data::DatasetManifest::load(o.manifest);
  const auto& ids = m.split(o.split.empty() ? "test" : o.split);
  std::vector<Image> real, fake;
  std::vector<LabelMap> labels;
  for (const auto& id : ids) {
    const auto s = data::load_subject(m, id);
    for (const auto& im : io::slice_volume(s.vol_b)) real.push_back(quantize_u8(im));
    const auto f = read_slices(o.fake, id, "B", s.vol_b.depth());
    fake.insert(fake.end(), f.begin(), f.end());
    const auto l = io::slice_labels(s.labels);
    labels.insert(labels.end(), l.begin(), l.end());
  }
  auto model = seg::load_segmenter(Checkpoint::load(o.checkpoint));
  const auto report = seg::fcn_score(model, real, fake, labels);
  write_text(fs::path(o.out) / "fcn_score.json", report.to_json());
  std::printf("%s", report.to_json().c_str());
}

reg::Backend make_backend(const Options& o) {
  auto b = reg::parse_backend(o.backend);
  b.work_dir = fs::path(o.out) / "backend_work";
  return b;
}

void cmd_register(Options& o) {
  const Image fixed = io::read_png(o.fixed);
  const Image moving = io::read_png(o.moving);
  if (o.cost != "ncc" && o.cost != "mi") throw UsageError("--cost must be ncc or mi");
  const auto backend = make_backend(o);
  const auto r = reg::register_images(fixed, moving, backend, o.cost == "mi");
  reg::write_field(r.field, fs::path(o.out) / "field.fld");
  io::write_png(reg::warp(moving, r.field), fs::path(o.out) / "warped.png");
  json j;
  j["backend"] = backend.name;
  j["converged"] = r.converged;
  if (backend.name == "builtin-affine") {
    j["cost"] = r.cost;
    j["iterations"] = r.iterations;
    j["params"] = {{"theta_deg", r.params.theta * 180.0 / 3.14159265358979323846},
                   {"log_sy", r.params.log_sy},
                   {"log_sx", r.params.log_sx},
                   {"shear", r.params.shear},
                   {"ty", r.params.ty},
                   {"tx", r.params.tx}};
  }
  j["mean_displacement"] = r.field.mean_magnitude();
  write_text(fs::path(o.out) / "registration.json", j.dump(2) + "\n");
  if (!r.converged) std::fprintf(stderr, "warning: registration did not converge; best-so-far field written\n");
  std::printf("%s\n", j.dump(2).c_str());
}

void cmd_fuse(Options& o) {
  const auto d1 = reg::read_field(o.field1);
  const auto d2 = reg::read_field(o.field2);
  const auto fused = reg::fuse_fields(d1, d2, o.weight);
  reg::write_field(fused, fs::path(o.out) / "fused.fld");
  if (!o.labels.empty()) {
    io::write_label_png(reg::warp(io::read_label_png(o.labels), fused), fs::path(o.out) / "warped_labels.png");
  }
  if (!o.image.empty()) io::write_png(reg::warp(io::read_png(o.image), fused), fs::path(o.out) / "warped.png");
  std::printf("fused with w=%g into %s\n", o.weight, (fs::path(o.out) / "fused.fld").c_str());
}

void cmd_harness(Options& o) {
  const auto m = data::DatasetManifest::load(o.manifest);
  auto g = train::load_generator(Checkpoint::load(o.checkpoint));
  std::vector<reg::HarnessSubject> subjects;
  for (const auto& id : m.split(o.split.empty() ? "test" : o.split)) {
    subjects.push_back(pipeline::harness_subject(data::load_subject(m, id), g, o.seed));
  }
  reg::HarnessConfig hc;
  hc.angle_deg = o.angle;
  hc.grid_step = o.grid_step;
  hc.folds = o.folds;
  hc.slice_step = o.slice_step;
  hc.translated_pair_mi = o.translated_cost == "mi";
  hc.backend = make_backend(o);
  const auto rep = reg::known_transform_harness(subjects, hc);
  write_text(fs::path(o.out) / "harness.json", rep.to_json());
  std::printf("%s", rep.to_json().c_str());
}

// Expands --config JSON into flags placed before the real ones, so that
// explicit flags win (options keep the last value given).
std::vector<std::string> expand_config(const std::vector<std::string>& args) {
  std::string path;
  for (std::size_t i = 0; i < args.size(); ++i) {
    if (args[i] == "--config" && i + 1 < args.size()) path = args[i + 1];
    if (args[i].rfind("--config=", 0) == 0) path = args[i].substr(9);
  }
  if (path.empty() || args.size() < 2) return args;
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_text(path));
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config file " + path + " is not valid JSON: " + e.what());
  }
  if (!j.is_object()) throw ConfigError("config file " + path + " must hold a JSON object");
  std::vector<std::string> out = {args[0], args[1]};
  for (const auto& [k, v] : j.items()) {
    if (k == "config") continue;
    if (v.is_boolean()) {
      if (v.get<bool>()) out.push_back("--" + k);
    } else if (v.is_array()) {
      std::string joined;
      for (const auto& e : v) joined += (joined.empty() ? "" : ",") + (e.is_string() ? e.get<std::string>() : e.dump());
      out.push_back("--" + k);
      out.push_back(joined);
    } else {
      out.push_back("--" + k);
      out.push_back(v.is_string() ? v.get<std::string>() : v.dump());
    }
  }
  out.insert(out.end(), args.begin() + 2, args.end());
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"n2n: MR modality translation toolkit.\n"
               "Set N2N_THREADS to cap worker threads."};
  app.name("n2n");
  app.require_subcommand(1);
  app.option_defaults()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
  app.get_formatter()->column_width(34);
  Options o;
  std::map<std::string, Command> commands;

  {
    auto* s = app.add_subcommand("phantom", "generate a synthetic phantom corpus and manifest");
    add_common(s, o, true);
    s->add_option("--subjects", o.subjects, "number of subjects (>= 3)")->capture_default_str();
    s->add_option("--size", o.size, "volume size DxHxW (>= 16x64x64)")->capture_default_str();
    s->add_option("--tumor-prob", o.tumor_prob, "probability that a subject carries a tumor")
        ->capture_default_str()
        ->check(CLI::Range(0.0, 1.0));
    commands["phantom"] = {s, cmd_phantom};
  }
  {
    auto* s = app.add_subcommand("slice", "write 8-bit PNG slices {subject}_{modality}_{slice:04d}.png");
    add_common(s, o, true);
    s->add_option("--manifest", o.manifest, "dataset manifest")->required();
    s->add_option("--split", o.split, "only subjects of this split (default: all)");
    s->add_option("--modalities", o.modalities, "comma-separated modalities")->capture_default_str();
    s->add_option("--pipeline", o.pipeline, "generation (square resize) or cube (crop to 128^3)")
        ->capture_default_str()
        ->check(CLI::IsMember({"generation", "cube"}));
    s->add_option("--side", o.side, "output side length; 0 keeps native slices")->capture_default_str();
    commands["slice"] = {s, cmd_slice};
  }
  {
    auto* s = app.add_subcommand("train", "train the translator (generator + PatchGAN discriminator)");
    add_common(s, o, true);
    s->add_option("--manifest", o.manifest, "dataset manifest")->required();
    s->add_option("--split", o.split, "training split (default: train)");
    s->add_option("--loss", o.loss, "loss mode")->capture_default_str()->check(CLI::IsMember({"l1", "cgan", "cgan+l1"}));
    s->add_option("--lambda", o.lambda, "L1 weight")->capture_default_str();
    s->add_option("--epochs", o.epochs, "training epochs")->capture_default_str();
    s->add_option("--width-mult", o.width_mult, "filter count multiplier")->capture_default_str();
    s->add_option("--lr", o.lr, "Adam learning rate (default 0.0002)");
    s->add_flag("--saturating", o.saturating, "use the saturating log(1 - D) generator term");
    s->add_option("--checkpoint", o.checkpoint, "resume from this checkpoint");
    commands["train"] = {s, [s](Options& opt) { cmd_train(opt, s); }};
  }
  {
    auto* s = app.add_subcommand("translate", "run a trained generator over images");
    add_common(s, o, true);
    s->add_option("--checkpoint", o.checkpoint, "translator checkpoint")->required();
    s->add_option("--input", o.input, "directory of source-modality PNGs");
    s->add_option("--manifest", o.manifest, "translate the source volumes of a manifest split instead");
    s->add_option("--split", o.split, "manifest split (default: test)");
    s->add_option("--side", o.side, "manifest mode: slice side; 0 keeps native resolution")->capture_default_str();
    s->add_flag("--stochastic", o.stochastic, "keep dropout active (noise source)");
    commands["translate"] = {s, cmd_translate};
  }
  {
    auto* s = app.add_subcommand("eval", "compare translated PNGs with real ones (report.json, report.csv)");
    add_common(s, o, true);
    s->add_option("--real", o.real, "directory of real PNGs")->required();
    s->add_option("--fake", o.fake, "directory of synthesized PNGs, matched by file name")->required();
    s->add_option("--metrics", o.metrics, "comma-separated subset of mae,psnr,mi,ssim")
        ->capture_default_str()
        ->check(kMetricList);
    commands["eval"] = {s, cmd_eval};
  }
  {
    auto* s = app.add_subcommand("seg-train", "train the segmenter on three-channel compositions");
    add_common(s, o, true);
    s->add_option("--manifest", o.manifest, "dataset manifest")->required();
    s->add_option("--split", o.split, "training split (default: partB)");
    s->add_option("--channels", o.channels, "channel spec, g = given, t = translated")->capture_default_str();
    s->add_option("--translated", o.translated, "directory of translated slices {subject}_B_{slice:04d}.png");
    s->add_option("--modality", o.modality, "modality used as the given image")
        ->capture_default_str()
        ->check(CLI::IsMember({"A", "B"}));
    s->add_option("--epochs", o.epochs, "training epochs")->default_val(10);
    s->add_option("--width-mult", o.width_mult, "filter count multiplier (default 0.25)");
    s->add_option("--lr", o.lr, "SGD learning rate (default 0.0001)");
    commands["seg-train"] = {s, [s](Options& opt) { cmd_seg_train(opt, s); }};
  }
  {
    auto* s = app.add_subcommand("seg-eval", "score a segmenter on a split (seg_report.json)");
    add_common(s, o, true);
    s->add_option("--checkpoint", o.checkpoint, "segmenter checkpoint")->required();
    s->add_option("--manifest", o.manifest, "dataset manifest")->required();
    s->add_option("--split", o.split, "evaluation split (default: test)");
    s->add_option("--channels", o.channels, "channel spec used in training")->capture_default_str();
    s->add_option("--translated", o.translated, "directory of translated slices");
    s->add_option("--modality", o.modality, "modality used as the given image")
        ->capture_default_str()
        ->check(CLI::IsMember({"A", "B"}));
    commands["seg-eval"] = {s, cmd_seg_eval};
  }
  {
    auto* s = app.add_subcommand("fcn-score", "segment real and synthesized target images (fcn_score.json)");
    add_common(s, o, true);
    s->add_option("--checkpoint", o.checkpoint, "segmenter trained on real target-modality images")->required();
    s->add_option("--manifest", o.manifest, "dataset manifest (real images and labels)")->required();
    s->add_option("--split", o.split, "evaluation split (default: test)");
    s->add_option("--fake", o.fake, "directory of synthesized slices {subject}_B_{slice:04d}.png")->required();
    commands["fcn-score"] = {s, cmd_fcn_score};
  }
  {
    auto* s = app.add_subcommand("register", "register a moving PNG onto a fixed PNG (field.fld)");
    add_common(s, o, true);
    s->add_option("--fixed", o.fixed, "fixed image")->required();
    s->add_option("--moving", o.moving, "moving image")->required();
    s->add_option("--backend", o.backend, "builtin-affine or cmd:<command>")
        ->capture_default_str()
        ->check(kBackendSpec);
    s->add_option("--cost", o.cost, "builtin cost: ncc (same modality) or mi (cross modality)")
        ->capture_default_str();
    commands["register"] = {s, cmd_register};
  }
  {
    auto* s = app.add_subcommand("fuse", "fuse two fields as w*d1 + (1-w)*d2 (fused.fld)");
    add_common(s, o, true);
    s->add_option("--field1", o.field1, "field from the translated-modality registration")->required();
    s->add_option("--field2", o.field2, "field from the given-modality registration")->required();
    s->add_option("--weight", o.weight, "fusion weight w in [0,1]")->capture_default_str()->check(CLI::Range(0.0, 1.0));
    s->add_option("--labels", o.labels, "label PNG to warp with the fused field");
    s->add_option("--image", o.image, "image PNG to warp with the fused field");
    commands["fuse"] = {s, cmd_fuse};
  }
  {
    auto* s = app.add_subcommand("harness", "known-rotation registration fusion experiment (harness.json)");
    add_common(s, o, true);
    s->add_option("--manifest", o.manifest, "dataset manifest")->required();
    s->add_option("--checkpoint", o.checkpoint, "translator checkpoint")->required();
    s->add_option("--split", o.split, "subjects to use (default: test)");
    s->add_option("--angle", o.angle, "rotation in degrees")->capture_default_str();
    s->add_option("--backend", o.backend, "builtin-affine or cmd:<command>")
        ->capture_default_str()
        ->check(kBackendSpec);
    s->add_option("--translated-cost", o.translated_cost, "cost for real B against translated B")
        ->capture_default_str()
        ->check(CLI::IsMember({"mi", "ncc"}));
    s->add_option("--slice-step", o.slice_step, "register every n-th slice")->capture_default_str()->check(
        CLI::PositiveNumber);
    s->add_option("--grid-step", o.grid_step, "fusion weight grid step")->capture_default_str();
    s->add_option("--folds", o.folds, "cross-validation folds")->capture_default_str()->check(CLI::PositiveNumber);
    commands["harness"] = {s, cmd_harness};
  }

  std::vector<std::string> args(argv, argv + argc);
  try {
    args = expand_config(args);
  } catch (const Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitUsage;
  }
  std::vector<char*> cargv;
  for (auto& a : args) cargv.push_back(a.data());
  try {
    app.parse(static_cast<int>(cargv.size()), cargv.data());
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitUsage;
  }

  for (auto& [name, cmd] : commands) {
    if (!cmd.app->parsed()) continue;
    try {
      if (!o.out.empty()) {
        fs::create_directories(o.out);
        snapshot(cmd.app, o.out);
      }
      cmd.run(o);
      return kExitOk;
    } catch (const UsageError& e) {
      std::fprintf(stderr, "usage error: %s\n\n%s", e.what(), cmd.app->help().c_str());
      return kExitUsage;
    } catch (const std::exception& e) {
      std::fprintf(stderr, "error: %s\n", e.what());
      return kExitData;
    }
  }
  return kExitUsage;
}

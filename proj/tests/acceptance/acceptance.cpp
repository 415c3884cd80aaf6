// Acceptance suite: one PASS/FAIL line per criterion.
//   n2n_acceptance [--criterion N]... [--work DIR]
#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <numeric>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "n2n/checkpoint.hpp"
#include "n2n/losses.hpp"
#include "n2n/metrics.hpp"
#include "n2n/networks.hpp"
#include "n2n/phantom.hpp"
#include "n2n/pipeline.hpp"
#include "n2n/registration.hpp"
#include "n2n/rng.hpp"
#include "n2n/segmenter.hpp"
#include "n2n/trainer.hpp"
#include "n2n/volume_io.hpp"

namespace fs = std::filesystem;
using namespace n2n;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

fs::path g_work;

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::ostringstream os;
  os << f.rdbuf();
  return os.str();
}

Image random_u8(std::mt19937_64& rng, int h, int w) {
  std::uniform_int_distribution<int> d(0, 255);
  Image im(h, w);
  for (auto& v : im.values()) v = static_cast<float>(d(rng));
  return im;
}

// ------------------------------------------------------------ oracles

double oracle_mae(const Image& a, const Image& b) {
  double s = 0;
  for (int y = 0; y < a.height(); ++y)
    for (int x = 0; x < a.width(); ++x) s += std::fabs(double(a(y, x)) - double(b(y, x)));
  return s / (a.height() * a.width());
}

double oracle_psnr(const Image& a, const Image& b) {
  double s = 0;
  for (int y = 0; y < a.height(); ++y)
    for (int x = 0; x < a.width(); ++x) s += std::pow(double(a(y, x)) - double(b(y, x)), 2);
  const double mse = s / (a.height() * a.width());
  return mse == 0 ? INFINITY : 10.0 * std::log10(255.0 * 255.0 / mse);
}

double oracle_mi(const Image& a, const Image& b) {
  // sparse joint histogram keyed by integer intensity pairs
  std::map<std::pair<int, int>, double> joint;
  std::map<int, double> pa, pb;
  const double n = a.height() * a.width();
  for (int y = 0; y < a.height(); ++y) {
    for (int x = 0; x < a.width(); ++x) {
      const int u = int(a(y, x)), v = int(b(y, x));
      joint[{u, v}] += 1 / n;
      pa[u] += 1 / n;
      pb[v] += 1 / n;
    }
  }
  double mi = 0;
  for (const auto& [k, p] : joint) mi += p * std::log(p / (pa[k.first] * pb[k.second]));
  return mi;
}

double oracle_ssim(const Image& a, const Image& b) {
  const double n = a.height() * a.width();
  double ma = 0, mb = 0;
  for (int y = 0; y < a.height(); ++y)
    for (int x = 0; x < a.width(); ++x) ma += a(y, x) / n, mb += b(y, x) / n;
  double va = 0, vb = 0, cov = 0;
  for (int y = 0; y < a.height(); ++y) {
    for (int x = 0; x < a.width(); ++x) {
      va += (a(y, x) - ma) * (a(y, x) - ma) / n;
      vb += (b(y, x) - mb) * (b(y, x) - mb) / n;
      cov += (a(y, x) - ma) * (b(y, x) - mb) / n;
    }
  }
  const double c1 = std::pow(0.01 * 255, 2), c2 = std::pow(0.03 * 255, 2);
  return (2 * ma * mb + c1) * (2 * cov + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
}

double oracle_dice(const LabelMap& g, const LabelMap& h, int c) {
  int gi = 0, hi = 0, both = 0;
  for (int y = 0; y < g.height(); ++y) {
    for (int x = 0; x < g.width(); ++x) {
      gi += g(y, x) == c;
      hi += h(y, x) == c;
      both += g(y, x) == c && h(y, x) == c;
    }
  }
  return gi + hi == 0 ? 1.0 : 2.0 * both / (gi + hi);
}

Outcome criterion1() {
  std::mt19937_64 rng(20240101);
  std::uniform_int_distribution<int> cls(0, 3);
  double worst = 0, worst_mi = 0;
  for (int i = 0; i < 200; ++i) {
    const Image a = random_u8(rng, 8, 8);
    Image b = random_u8(rng, 8, 8);
    if (i % 4 == 0) {
      // correlated pair so MI and SSIM are not near zero
      for (std::size_t k = 0; k < b.size(); ++k) b.values()[k] = std::min(255.0f, a.values()[k] + float(k % 3));
    }
    worst = std::max(worst, std::fabs(metrics::mae(a, b) - oracle_mae(a, b)));
    worst = std::max(worst, std::fabs(metrics::psnr(a, b) - oracle_psnr(a, b)));
    worst = std::max(worst, std::fabs(metrics::ssim(a, b) - oracle_ssim(a, b)));
    worst_mi = std::max(worst_mi, std::fabs(metrics::mutual_information(a, b) - oracle_mi(a, b)));
    LabelMap g(8, 8), h(8, 8);
    for (auto& v : g.values()) v = std::uint8_t(cls(rng));
    for (auto& v : h.values()) v = std::uint8_t(cls(rng));
    for (int c = 0; c < 4; ++c) worst = std::max(worst, std::fabs(metrics::dice(g, h, c) - oracle_dice(g, h, c)));
  }
  return {worst <= 1e-9 && worst_mi <= 1e-6,
          "max |err| " + fmt("%.3g", worst) + ", MI " + fmt("%.3g", worst_mi) + " over 200 pairs"};
}

Outcome criterion2() {
  std::mt19937_64 rng(7);
  const Image x = random_u8(rng, 32, 32);
  Image shifted = x;
  Image base(32, 32, 100.0f), plus16(32, 32, 116.0f);
  LabelMap g(16, 16);
  std::uniform_int_distribution<int> cls(0, 3);
  for (auto& v : g.values()) v = std::uint8_t(cls(rng));
  const double mae0 = metrics::mae(x, x);
  const double s1 = metrics::ssim(x, x);
  const double d1 = metrics::dice(g, g, 1);
  const double mi0 = metrics::mutual_information(Image(32, 32, 42.0f), x);
  const double p16 = metrics::psnr(base, plus16);
  const bool ok = mae0 == 0.0 && std::fabs(s1 - 1) < 1e-12 && d1 == 1.0 && mi0 == 0.0 && std::fabs(p16 - 24.05) <= 0.01;
  return {ok, "MAE(x,x)=" + fmt("%g", mae0) + " SSIM(x,x)=" + fmt("%.12g", s1) + " Dice(G,G)=" + fmt("%g", d1) +
                  " MI(const,x)=" + fmt("%g", mi0) + " PSNR(diff16)=" + fmt("%.4f", p16)};
}

// walk an output unit back through the D layer stack (kernel 4, pad 1)
std::pair<int, int> d_receptive_range(int unit) {
  const int strides[] = {2, 2, 2, 1, 1};
  int lo = unit, hi = unit;
  for (int i = 4; i >= 0; --i) {
    lo = lo * strides[i] - 1;
    hi = hi * strides[i] - 1 + 3;
  }
  return {lo, hi};
}

Outcome criterion3() {
  std::string why;
  bool ok = true;
  std::mt19937_64 rng(3);
  nn::Generator<float> g;
  g.init(rng);
  Tensor<float> x(1, 256, 256);
  std::normal_distribution<float> nd(0, 0.5f);
  for (auto& v : x.values()) v = std::clamp(nd(rng), -1.0f, 1.0f);
  const auto y = g.forward(x, false, 0);
  const auto ext = g.encoder_extents();
  const bool g_shape = y.channels() == 1 && y.height() == 256 && y.width() == 256;
  const bool bottleneck = !ext.empty() && ext.back() == std::array<int, 2>{1, 1};
  const std::vector<int> want = {512, 1024, 1024, 1024, 1024, 512, 256, 128};
  const bool widths = g.decoder_input_widths() == want;
  ok = g_shape && bottleneck && widths;
  why += std::string("G 256->") + std::to_string(y.height()) + "x" + std::to_string(y.width()) +
         (bottleneck ? ", 1x1 bottleneck" : ", bottleneck WRONG") + (widths ? ", concat widths ok" : ", widths WRONG");

  nn::Discriminator<float> d;
  d.init(rng);
  Tensor<float> c(1, 256, 256), t(1, 256, 256);
  for (auto& v : c.values()) v = nd(rng);
  for (auto& v : t.values()) v = nd(rng);
  const auto p = d.forward(c, t);
  const bool d_shape = p.height() == 30 && p.width() == 30;
  // freeze normalization so the map is local, then probe dependency
  d.freeze_norm_statistics(true);
  const auto base = d.forward(c, t);
  const int u = 15;
  const auto [lo, hi] = d_receptive_range(u);
  // impulse at one pixel: exactly the units whose window covers it change
  const int py = 128, px = 131;
  Tensor<float> c2 = c;
  c2(0, py, px) += 1.0f;
  const auto moved = d.forward(c2, t);
  bool impulse_ok = true;
  for (int i = 0; i < 30; ++i) {
    for (int j = 0; j < 30; ++j) {
      const auto ri = d_receptive_range(i), rj = d_receptive_range(j);
      const bool covers = py >= ri.first && py <= ri.second && px >= rj.first && px <= rj.second;
      const bool changed = moved(0, i, j) != base(0, i, j);
      impulse_ok = impulse_ok && covers == changed;
    }
  }
  // dilated impulse: the 4 window corners change unit u; a ring just outside does not
  Tensor<float> inside = c, outside = c;
  for (int a : {lo, hi})
    for (int b : {lo, hi}) inside(0, a, b) += 1.0f;
  for (int k = lo - 1; k <= hi + 1; ++k) {
    for (int e : {lo - 1, hi + 1}) {
      outside(0, e, k) += 1.0f;
      outside(0, k, e) += 1.0f;
    }
  }
  const bool in_changes = d.forward(inside, t)(0, u, u) != base(0, u, u);
  const bool out_static = d.forward(outside, t)(0, u, u) == base(0, u, u);
  d.freeze_norm_statistics(false);
  const int rf = hi - lo + 1;
  const bool rf_ok = rf == 70 && impulse_ok && in_changes && out_static;
  ok = ok && d_shape && rf_ok;
  why += "; D 256->" + std::to_string(p.height()) + "x" + std::to_string(p.width()) + ", receptive field " +
         std::to_string(rf) + "x" + std::to_string(rf) + (impulse_ok ? " (impulse map exact" : " (impulse map WRONG") +
         (in_changes && out_static ? ", border probe ok)" : ", border probe FAILED)");
  return {ok, why};
}

double rel_err(const std::vector<double>& a, const std::vector<double>& b) {
  double num = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    num += (a[i] - b[i]) * (a[i] - b[i]);
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  return std::sqrt(num) / std::max({std::sqrt(na), std::sqrt(nb), 1e-30});
}

// Runs the generator (3 modes) and discriminator checks with step h.
Outcome gradient_check(double h) {
  const double width = 0.125;
  std::mt19937_64 rng(4);
  nn::GeneratorConfig gc;
  gc.width_multiplier = width;
  nn::Generator<double> g(gc);
  g.init(rng);
  nn::DiscriminatorConfig dc;
  dc.width_multiplier = width;
  nn::Discriminator<double> d(dc);
  d.init(rng);
  Tensor<double> x(1, 256, 256), y(1, 256, 256);
  std::normal_distribution<double> nd(0, 0.5);
  for (auto& v : x.values()) v = std::tanh(nd(rng));
  for (auto& v : y.values()) v = std::tanh(nd(rng));

  auto gparams = g.params();
  // a middle encoder conv weight, 64 consecutive entries
  nn::Param<double>* target = nullptr;
  for (auto* p : gparams) {
    if (p->name == "G.dec8.weight" && p->size() >= 64 && p->shape.size() == 4) {
      target = p;
      break;
    }
  }
  if (!target) return {false, "no suitable generator parameter"};
  const std::size_t off = target->size() / 3;

  std::string detail;
  bool ok = true;
  for (auto mode : {nn::LossMode::L1, nn::LossMode::CGAN, nn::LossMode::CGAN_L1}) {
    const nn::LossWeights w{mode, 100.0};
    auto loss = [&]() {
      const auto fake = g.forward(x, false, 0);
      const double adv = nn::uses_adversarial(mode) ? nn::generator_adversarial(d.forward(x, fake)) : 0.0;
      const double l1 = nn::uses_l1(mode) ? nn::loss_l1(y, fake) : 0.0;
      return nn::loss_combined(w, adv, l1);
    };
    g.zero_grad();
    d.zero_grad();
    const auto fake = g.forward(x, false, 0);
    Tensor<double> grad(1, 256, 256);
    if (nn::uses_adversarial(mode)) {
      const auto prob = d.forward(x, fake);
      grad = d.backward(nn::generator_adversarial_grad(prob));
    }
    if (nn::uses_l1(mode)) {
      const auto gl1 = nn::loss_l1_grad(y, fake);
      const double scale = mode == nn::LossMode::L1 ? 1.0 : 100.0;
      for (std::size_t i = 0; i < grad.size(); ++i) grad.values()[i] += scale * gl1.values()[i];
    }
    g.backward(grad);
    std::vector<double> analytic, numeric;
    for (std::size_t k = off; k < off + 64; ++k) {
      analytic.push_back(target->grad[k]);
      const double keep = target->value[k];
      target->value[k] = keep + h;
      const double lp = loss();
      target->value[k] = keep - h;
      const double lm = loss();
      target->value[k] = keep;
      numeric.push_back((lp - lm) / (2 * h));
    }
    const double e = rel_err(analytic, numeric);
    ok = ok && e < 1e-3;
    detail += std::string(nn::loss_mode_name(mode)) + " " + fmt("%.2e", e) + "  ";
  }

  // discriminator objective on a D slice
  auto dparams = d.params();
  nn::Param<double>* dt = nullptr;
  for (auto* p : dparams)
    if (p->shape.size() == 4 && p->size() >= 64 && p->name.find("stage2") != std::string::npos) dt = p;
  if (!dt) dt = dparams[2];
  const auto fake = g.forward(x, false, 0);
  auto dloss = [&]() { return -nn::loss_cgan(d.forward(x, y), d.forward(x, fake)); };
  d.zero_grad();
  {
    const auto pr = d.forward(x, y);
    const auto pf = d.forward(x, fake);
    Tensor<double> gr(pr.channels(), pr.height(), pr.width()), gf = gr;
    nn::loss_cgan_discriminator_grad(pr, pf, gr, gf);
    // backward needs the activations of the matching forward
    d.forward(x, y);
    d.backward(gr);
    d.forward(x, fake);
    d.backward(gf);
  }
  const double hd = h;
  std::vector<double> analytic, numeric;
  const std::size_t doff = dt->size() / 2;
  for (std::size_t k = doff; k < doff + std::min<std::size_t>(64, dt->size() - doff); ++k) {
    analytic.push_back(dt->grad[k]);
    const double keep = dt->value[k];
    dt->value[k] = keep + hd;
    const double lp = dloss();
    dt->value[k] = keep - hd;
    const double lm = dloss();
    dt->value[k] = keep;
    numeric.push_back((lp - lm) / (2 * hd));
  }
  const double ed = rel_err(analytic, numeric);
  ok = ok && ed < 1e-3;
  detail += "D objective " + fmt("%.2e", ed);
  return {ok, detail};
}

Outcome criterion4() {
  // Step 1e-6 in double: at 1e-4 the probe crosses L1 and leaky-ReLU kinks
  // often enough to dominate the error; the 1e-4 figures are shown for reference.
  const auto fine = gradient_check(1e-6);
  const auto coarse = gradient_check(1e-4);
  return {fine.pass, "relative error (h=1e-6): " + fine.detail + " | h=1e-4: " + coarse.detail};
}

fs::path corpus(const std::string& name, std::uint64_t seed, int n) {
  const fs::path dir = g_work / name;
  if (!fs::exists(dir / "manifest.json")) data::generate_corpus(seed, n, data::PhantomSize{}, dir);
  return dir / "manifest.json";
}

Outcome criterion5() {
  const auto manifest = data::DatasetManifest::load(corpus("overfit", 5, 3));
  const auto subj = data::load_subject(manifest, manifest.split("train").front());
  const auto pairs = pipeline::generation_pairs(subj);
  const std::size_t k = pairs.source.size() / 2;
  const auto x = io::normalize(pairs.source[k]);
  const auto y = io::normalize(pairs.target[k]);
  train::TrainConfig cfg;
  cfg.width_multiplier = 0.125;
  cfg.seed = 5;
  cfg.epochs = 1;
  train::Trainer t(cfg);
  std::vector<double> l1;
  for (int s = 0; s < 200; ++s) l1.push_back(t.train_step(x, y).g_l1);
  const double first = l1.front(), last = l1.back();
  return {first > 0.2 && last < 0.05, "L1 " + fmt("%.4f", first) + " -> " + fmt("%.4f", last) + " in 200 steps"};
}

struct TranslationEval {
  double mae = 0, mae_identity = 0, mi = 0;
};

TranslationEval eval_translator(nn::Generator<float>& g, const data::DatasetManifest& m) {
  std::vector<Image> real, fake, given;
  for (const auto& id : m.split("test")) {
    const auto pairs = pipeline::generation_pairs(data::load_subject(m, id));
    const auto out = train::translate(g, pairs.source, false, 0);
    real.insert(real.end(), pairs.target.begin(), pairs.target.end());
    fake.insert(fake.end(), out.begin(), out.end());
    given.insert(given.end(), pairs.source.begin(), pairs.source.end());
  }
  TranslationEval e;
  e.mae = metrics::evaluate_pairs(real, fake, {"mae"}).summary("mae").mean;
  e.mae_identity = metrics::evaluate_pairs(real, given, {"mae"}).summary("mae").mean;
  e.mi = metrics::evaluate_pairs(real, fake, {"mi"}).summary("mi").mean;
  return e;
}

Outcome criterion6() {
  const auto mpath = corpus("translation", 6, 10);
  const auto m = data::DatasetManifest::load(mpath);
  std::map<std::string, TranslationEval> res;
  for (auto mode : {nn::LossMode::CGAN_L1, nn::LossMode::L1, nn::LossMode::CGAN}) {
    train::TrainConfig cfg;
    cfg.loss_mode = mode;
    cfg.width_multiplier = 0.125;
    cfg.epochs = 20;
    cfg.seed = 6;
    cfg.manifest = mpath.string();
    train::TrainOptions opt;
    opt.write_checkpoints = false;
    auto r = train::train(cfg, train::load_training_pairs(cfg), opt);
    auto g = train::load_generator(r.final_checkpoint);
    res[std::string(nn::loss_mode_name(mode))] = eval_translator(g, m);
  }
  const auto& main = res["cgan+l1"];
  const double reduction = 1.0 - main.mae / main.mae_identity;
  const bool mae_ok = reduction >= 0.30;
  const bool mi_ok = res["cgan+l1"].mi > res["cgan"].mi && res["l1"].mi > res["cgan"].mi;
  std::string d = "MAE cgan+l1 " + fmt("%.2f", main.mae) + " vs identity " + fmt("%.2f", main.mae_identity) + " (" +
                  fmt("%.0f", 100 * reduction) + "% lower); MI";
  for (const auto& [k, v] : res) d += " " + k + "=" + fmt("%.3f", v.mi);
  return {mae_ok && mi_ok, d};
}

double tumor_dice_for(const data::DatasetManifest& m, const std::map<std::string, std::vector<Image>>& translated,
                      const seg::ChannelSpec& spec, std::uint64_t seed, int epochs) {
  std::vector<seg::SegSample> train_set;
  for (const auto& id : m.split("partB")) {
    auto s = pipeline::tms_samples(data::load_subject(m, id), translated.at(id), spec);
    train_set.insert(train_set.end(), s.begin(), s.end());
  }
  seg::SegTrainConfig sc;
  sc.seed = seed;
  sc.epochs = epochs;
  seg::Segmenter<float> model;
  seg::seg_train(sc, train_set, &model);
  std::vector<LabelMap> truth, pred;
  for (const auto& id : m.split("test")) {
    for (auto& s : pipeline::tms_samples(data::load_subject(m, id), translated.at(id), spec)) {
      pred.push_back(seg::predict(model, s.image));
      truth.push_back(s.labels);
    }
  }
  return seg::score_predictions(truth, pred, 4).dice_per_class[data::kTumor];
}

Outcome criterion7() {
  const auto mpath = corpus("tms", 7, 12);
  const auto m = data::DatasetManifest::load(mpath);
  double tms = 0, base = 0;
  std::string per;
  for (std::uint64_t seed : {1, 2, 3}) {
    train::TrainConfig cfg;
    cfg.width_multiplier = 0.125;
    cfg.epochs = 20;
    cfg.seed = seed;
    cfg.split = "partA";
    cfg.manifest = mpath.string();
    train::TrainOptions opt;
    opt.write_checkpoints = false;
    auto r = train::train(cfg, train::load_training_pairs(cfg), opt);
    auto g = train::load_generator(r.final_checkpoint);
    std::map<std::string, std::vector<Image>> translated;
    for (const auto& split : {"partB", "test"})
      for (const auto& id : m.split(split))
        translated[id] = pipeline::translate_native(g, data::load_subject(m, id).vol_a, seed);
    const double a = tumor_dice_for(m, translated, seg::kTmsSpec, seed, 300);
    const double b = tumor_dice_for(m, translated, seg::kBaselineSpec, seed, 300);
    tms += a / 3;
    base += b / 3;
    per += " seed" + std::to_string(seed) + " " + fmt("%.3f", a) + "/" + fmt("%.3f", b);
  }
  return {tms - base >= 0.03, "Dice(tumor) (A,A,B^) " + fmt("%.3f", tms) + " vs (A,A,A) " + fmt("%.3f", base) +
                                  " gap " + fmt("%+.3f", tms - base) + ";" + per};
}

Outcome criterion8() {
  const auto mpath = corpus("translation", 6, 10);
  const auto m = data::DatasetManifest::load(mpath);
  train::TrainConfig cfg;
  cfg.width_multiplier = 0.125;
  cfg.epochs = 10;
  cfg.seed = 8;
  cfg.manifest = mpath.string();
  train::TrainOptions opt;
  opt.write_checkpoints = false;
  auto r = train::train(cfg, train::load_training_pairs(cfg), opt);
  auto g = train::load_generator(r.final_checkpoint);
  std::vector<reg::HarnessSubject> subjects;
  for (const auto& id : m.split("test")) subjects.push_back(pipeline::harness_subject(data::load_subject(m, id), g, 8));
  reg::HarnessConfig hc;
  hc.slice_step = 4;
  const auto rep = reg::known_transform_harness(subjects, hc);
  const double rot_err =
      std::max(std::fabs(rep.rotation_given_deg - 30.0), std::fabs(rep.rotation_translated_deg - 30.0));
  const auto& w0 = rep.rows[0];
  const auto& ws = rep.rows[1];
  const auto& w1 = rep.rows[2];
  const bool a = rot_err <= 1.0;
  const bool b = ws.dist <= std::min(w0.dist, w1.dist) + 0.25;
  bool c = true;
  std::string dice_txt;
  for (const auto& [name, v] : ws.dice) {
    if (name == "mean") continue;
    const double best_single = std::max(w0.dice.at(name), w1.dice.at(name));
    c = c && v >= best_single - 0.01;
    dice_txt += " " + name + " " + fmt("%.3f", v) + " vs " + fmt("%.3f", best_single);
  }
  return {a && b && c, std::string("(a) rotation error ") + fmt("%.2f", rot_err) + " deg; (b) Dist w*=" +
                           fmt("%.3f", ws.dist) + " w0=" + fmt("%.3f", w0.dist) + " w1=" + fmt("%.3f", w1.dist) +
                           " unregistered=" + fmt("%.3f", rep.dist_unregistered) + "; (c) Dice" + dice_txt};
}

std::string run_pipeline(const fs::path& dir) {
  fs::remove_all(dir);
  data::generate_corpus(9, 4, data::PhantomSize{}, dir);
  train::TrainConfig cfg;
  cfg.width_multiplier = 0.0625;
  cfg.epochs = 1;
  cfg.seed = 9;
  cfg.manifest = (dir / "manifest.json").string();
  cfg.checkpoint_dir = (dir / "ckpt").string();
  auto r = train::train(cfg, train::load_training_pairs(cfg));
  auto g = train::load_generator(Checkpoint::load(dir / "ckpt" / "final.ckpt"));
  const auto m = data::DatasetManifest::load(dir / "manifest.json");
  std::vector<Image> real, fake;
  for (const auto& id : m.split("test")) {
    const auto p = pipeline::generation_pairs(data::load_subject(m, id));
    const auto out = train::translate(g, p.source, false, 9);
    real.insert(real.end(), p.target.begin(), p.target.end());
    fake.insert(fake.end(), out.begin(), out.end());
  }
  metrics::evaluate_pairs(real, fake, {"mae", "psnr", "mi", "ssim"}).write(dir / "report.json", dir / "report.csv");
  return slurp(dir / "report.json") + slurp(dir / "report.csv") + slurp(dir / "ckpt" / "final.ckpt") +
         slurp(dir / "manifest.json");
}

Outcome criterion9() {
  std::string why;
  bool ok = true;
  std::mt19937_64 rng(9);
  for (auto dt : {DType::UInt8, DType::Int16, DType::Float32}) {
    Volume v(5, 7, 9, dt);
    std::uniform_int_distribution<int> u8(0, 255), i16(-32768, 32767);
    std::normal_distribution<float> f(0, 100);
    for (auto& x : v.values())
      x = dt == DType::UInt8 ? float(u8(rng)) : dt == DType::Int16 ? float(i16(rng)) : f(rng);
    const auto p = g_work / "rt.nii";
    io::write_nifti(v, p);
    const bool same = io::read_nifti(p) == v;
    ok = ok && same;
    why += std::string(dtype_name(dt)) + (same ? " ok " : " MISMATCH ");
  }
  train::TrainConfig cfg;
  cfg.width_multiplier = 0.0625;
  train::Trainer t(cfg);
  Tensor<float> x(1, 256, 256, 0.1f), y(1, 256, 256, -0.2f);
  for (int s = 0; s < 3; ++s) t.train_step(x, y);
  const auto ck = t.to_checkpoint();
  ck.save(g_work / "rt.ckpt");
  const auto back = Checkpoint::load(g_work / "rt.ckpt");
  train::Trainer t2(cfg);
  t2.restore(back);
  const bool ck_ok = back == ck && back.serialize() == ck.serialize() && t2.to_checkpoint().serialize() == ck.serialize();
  ok = ok && ck_ok;
  why += ck_ok ? "| checkpoint bit-identical " : "| checkpoint MISMATCH ";
  // same directory both times: configs record their paths
  const auto a = run_pipeline(g_work / "pipe");
  fs::remove_all(g_work / "pipe_prev");
  fs::rename(g_work / "pipe", g_work / "pipe_prev");
  const auto b = run_pipeline(g_work / "pipe");
  ok = ok && a == b;
  why += a == b ? "| two pipeline runs byte-identical" : "| pipeline outputs DIFFER";
  return {ok, why};
}

Outcome criterion10() {
  std::mt19937_64 rng(10);
  seg::SegmenterConfig sc;
  sc.width_multiplier = 1.0 / 32;
  seg::Segmenter<double> model(sc);
  model.init(rng);
  Tensor<double> x(3, 16, 16);
  std::normal_distribution<double> nd(0, 0.5);
  for (auto& v : x.values()) v = nd(rng);
  LabelMap labels(16, 16);
  std::uniform_int_distribution<int> cls(0, 3);
  for (auto& v : labels.values()) v = std::uint8_t(cls(rng));
  const auto prob = model.forward(x);
  double worst = 0;
  for (int yy = 0; yy < 16; ++yy) {
    for (int xx = 0; xx < 16; ++xx) {
      double s = 0;
      for (int c = 0; c < prob.channels(); ++c) s += prob(c, yy, xx);
      worst = std::max(worst, std::fabs(s - 1));
    }
  }
  model.zero_grad();
  const auto logits = model.forward_logits(x);
  model.backward(seg::cross_entropy_grad(logits, labels));
  auto params = model.params();
  nn::Param<double>* target = nullptr;
  for (auto* p : params)
    if (p->shape.size() == 4 && p->size() >= 64 && p->name.find("conv") != std::string::npos) {
      target = p;
      break;
    }
  std::vector<double> analytic, numeric;
  for (std::size_t k = 0; k < 64; ++k) {
    analytic.push_back(target->grad[k]);
    const double keep = target->value[k];
    target->value[k] = keep + 1e-4;
    const double lp = seg::cross_entropy(model.forward_logits(x), labels);
    target->value[k] = keep - 1e-4;
    const double lm = seg::cross_entropy(model.forward_logits(x), labels);
    target->value[k] = keep;
    numeric.push_back((lp - lm) / 2e-4);
  }
  const double e = rel_err(analytic, numeric);
  // logits-level check as well
  std::vector<double> ga, gn;
  const auto gl = seg::cross_entropy_grad(logits, labels);
  Tensor<double> lcopy = logits;
  for (std::size_t k = 0; k < lcopy.size(); k += 7) {
    ga.push_back(gl.values()[k]);
    const double keep = lcopy.values()[k];
    lcopy.values()[k] = keep + 1e-5;
    const double lp = seg::cross_entropy(lcopy, labels);
    lcopy.values()[k] = keep - 1e-5;
    const double lm = seg::cross_entropy(lcopy, labels);
    lcopy.values()[k] = keep;
    gn.push_back((lp - lm) / 2e-5);
  }
  const double el = rel_err(ga, gn);
  return {worst <= 1e-6 && e < 1e-3 && el < 1e-3, "softmax sum error " + fmt("%.2e", worst) +
                                                       ", CE gradient rel. error params " + fmt("%.2e", e) +
                                                       " logits " + fmt("%.2e", el)};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"n2n acceptance suite"};
  std::vector<int> only;
  std::string work = (fs::temp_directory_path() / "n2n_acceptance").string();
  app.add_option("-c,--criterion", only, "criteria to run (default: all)")->check(CLI::Range(1, 10));
  app.add_option("--work", work, "scratch directory");
  CLI11_PARSE(app, argc, argv);
  g_work = work;
  fs::create_directories(g_work);

  const std::vector<std::pair<std::string, std::function<Outcome()>>> all = {
      {"metric oracles", criterion1},       {"analytic identities", criterion2},
      {"architecture contract", criterion3}, {"gradient check", criterion4},
      {"overfit convergence", criterion5},   {"translation utility", criterion6},
      {"TMS direction", criterion7},         {"registration fusion", criterion8},
      {"determinism and round-trips", criterion9}, {"softmax and cross-entropy", criterion10}};
  const double limits[] = {10, 1, 60, 120, 300, 2700, 3600, 1200, 300, 120};

  int failures = 0;
  for (std::size_t i = 0; i < all.size(); ++i) {
    const int id = static_cast<int>(i) + 1;
    if (!only.empty() && std::find(only.begin(), only.end(), id) == only.end()) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = all[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    const bool in_time = secs <= limits[i];
    const bool pass = o.pass && in_time;
    failures += pass ? 0 : 1;
    std::printf("criterion %d [%s]: %s - %s (%.1fs, limit %.0fs%s)\n", id, all[i].first.c_str(),
                pass ? "PASS" : "FAIL", o.detail.c_str(), secs, limits[i], in_time ? "" : ", OVER TIME");
    std::fflush(stdout);
  }
  return failures == 0 ? 0 : 1;
}

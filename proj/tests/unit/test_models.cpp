#include <filesystem>
#include <random>

#include <doctest.h>
#include <json.hpp>

#include "n2n/checkpoint.hpp"
#include "n2n/phantom.hpp"
#include "n2n/volume_io.hpp"
#include "n2n/error.hpp"
#include "n2n/rng.hpp"
#include "n2n/segmenter.hpp"
#include "n2n/trainer.hpp"

using namespace n2n;
namespace fs = std::filesystem;

namespace {

Tensor<float> noise(int c, int h, int w, std::uint64_t seed) {
  Tensor<float> t(c, h, w);
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> u(-1.0f, 1.0f);
  for (auto& v : t.values()) v = u(rng);
  return t;
}

train::TrainConfig small_config() {
  train::TrainConfig c;
  c.width_multiplier = 0.125;
  c.seed = 11;
  return c;
}

}  // namespace

TEST_CASE("checkpoint serialization") {
  Checkpoint c;
  c.kind = "translator";
  c.config_json = "{\"a\":1}";
  c.config_hash = fnv1a64(c.config_json);
  c.epoch = 3;
  c.step = 99;
  c.counters = {{"rng", 12345}};
  c.arrays = {{"w", {2, 3}, {1, 2, 3, 4, 5, 6}}, {"b", {1}, {-0.5f}}};
  const auto bytes = c.serialize();
  CHECK(bytes.substr(0, 8) == "N2NCKPT1");
  CHECK(bytes[8] == 1);  // version, little endian
  CHECK(Checkpoint::deserialize(bytes) == c);
  CHECK(c.counter("rng") == 12345);
  CHECK(c.array("b").data[0] == -0.5f);
  CHECK_THROWS_AS(c.array("zz"), ContractError);
  CHECK_THROWS_AS(Checkpoint::deserialize(bytes.substr(0, bytes.size() - 1)), IoError);
  CHECK_THROWS_AS(Checkpoint::deserialize(bytes + "x"), FormatError);
  auto bad = bytes;
  bad[0] = 'M';
  CHECK_THROWS_AS(Checkpoint::deserialize(bad), FormatError);
  auto v2 = bytes;
  v2[8] = 2;
  CHECK_THROWS_AS(Checkpoint::deserialize(v2), UnsupportedError);
  CHECK(fnv1a64("") == 0xcbf29ce484222325ULL);
}

TEST_CASE("seed derivation") {
  CHECK(derive_seed(1, {2}) == derive_seed(1, {2}));
  CHECK(derive_seed(1, {2}) != derive_seed(1, {3}));
  CHECK(derive_seed(1, {2}) != derive_seed(2, {2}));
}

TEST_CASE("train config json") {
  auto c = small_config();
  c.loss_mode = nn::LossMode::L1;
  const auto back = train::TrainConfig::from_json(c.to_json());
  CHECK(back.to_json() == c.to_json());
  CHECK(back.hash() == c.hash());
  CHECK_THROWS_AS(train::TrainConfig::from_json("{\"bogus\": 1}"), ConfigError);
  auto b = c;
  b.batch_size = 4;
  CHECK_THROWS_AS(b.validate(), ConfigError);
  auto e = c;
  e.epochs = 1000;
  CHECK(e.hash() == c.hash());
  e.lambda = 10;
  CHECK(e.hash() != c.hash());
  CHECK(nn::parse_loss_mode("cgan+l1") == nn::LossMode::CGAN_L1);
  CHECK_THROWS(nn::parse_loss_mode("hinge"));
}

TEST_CASE("epoch order is a seeded permutation") {
  const auto a = train::epoch_order(5, 0, 20);
  auto sorted = a;
  std::sort(sorted.begin(), sorted.end());
  for (std::size_t i = 0; i < sorted.size(); ++i) CHECK(sorted[i] == i);
  CHECK(train::epoch_order(5, 0, 20) == a);
  CHECK(train::epoch_order(5, 1, 20) != a);
}

TEST_CASE("training steps are deterministic and resumable") {
  const auto x = noise(1, 256, 256, 1);
  const auto y = noise(1, 256, 256, 2);
  train::Trainer a(small_config());
  train::Trainer b(small_config());
  const auto la = a.train_step(x, y);
  const auto lb = b.train_step(x, y);
  CHECK(la.g_total == lb.g_total);
  CHECK(la.d_loss == lb.d_loss);
  CHECK(a.to_checkpoint() == b.to_checkpoint());

  const auto mid = a.to_checkpoint();
  const auto next = a.train_step(x, y);
  train::Trainer c(small_config());
  c.restore(Checkpoint::deserialize(mid.serialize()));
  CHECK(c.global_step() == 1);
  const auto resumed = c.train_step(x, y);
  CHECK(resumed.g_total == next.g_total);
  CHECK(c.to_checkpoint() == a.to_checkpoint());

  auto other = small_config();
  other.lambda = 5;
  train::Trainer d(other);
  CHECK_THROWS_AS(d.restore(mid), ConfigError);
}

TEST_CASE("translation keeps image shape and is reproducible") {
  train::Trainer t(small_config());
  auto g = train::load_generator(t.to_checkpoint());
  Image im(64, 48, 100.0f);
  const auto out = train::translate(g, {im}, false, 0);
  REQUIRE(out.size() == 1);
  CHECK(out[0].height() == 64);
  CHECK(out[0].width() == 48);
  CHECK(train::translate(g, {im}, false, 0)[0] == out[0]);
  CHECK(train::translate(g, {im}, true, 3)[0] == train::translate(g, {im}, true, 3)[0]);
  for (float v : out[0].values()) {
    CHECK(v >= 0.0f);
    CHECK(v <= 255.0f);
  }
}

TEST_CASE("channel specs") {
  CHECK(seg::parse_channel_spec("g,g,t") == seg::kTmsSpec);
  CHECK(seg::parse_channel_spec("A,A,A") == seg::kBaselineSpec);
  CHECK(seg::channel_spec_name(seg::kTmsSpec) == "g,g,t");
  CHECK_THROWS(seg::parse_channel_spec("g,t"));
  CHECK_THROWS(seg::parse_channel_spec("g,g,x"));
  const auto g = noise(1, 4, 4, 1);
  const auto t = noise(1, 4, 4, 2);
  const auto c = seg::compose_tms(g, t, seg::kTmsSpec);
  CHECK(c.channels() == 3);
  CHECK(c(0, 1, 1) == g(0, 1, 1));
  CHECK(c(2, 1, 1) == t(0, 1, 1));
}

TEST_CASE("segmentation scores") {
  LabelMap truth(1, 4), pred(1, 4);
  truth(0, 0) = 0;
  truth(0, 1) = 1;
  truth(0, 2) = 1;
  truth(0, 3) = 2;
  pred(0, 0) = 0;
  pred(0, 1) = 1;
  pred(0, 2) = 2;
  pred(0, 3) = 2;
  const auto s = seg::score_predictions({truth}, {pred}, 4);
  CHECK(s.accuracy_all == doctest::Approx(0.75));
  CHECK(s.accuracy_per_class[1] == doctest::Approx(0.5));
  CHECK(s.accuracy_per_class[2] == doctest::Approx(1.0));
  CHECK(std::isnan(s.accuracy_per_class[3]));
  CHECK(s.dice_per_class[2] == doctest::Approx(2.0 / 3.0));
}

TEST_CASE("segmenter training is deterministic and round trips") {
  std::vector<seg::SegSample> samples;
  for (int i = 0; i < 3; ++i) {
    seg::SegSample s{noise(3, 32, 32, 10 + static_cast<std::uint64_t>(i)), LabelMap(32, 32)};
    for (int y = 8; y < 24; ++y)
      for (int x = 8; x < 24; ++x) s.labels(y, x) = static_cast<std::uint8_t>(1 + i % 3);
    samples.push_back(std::move(s));
  }
  seg::SegTrainConfig c;
  c.width_multiplier = 1.0 / 32;
  c.epochs = 2;
  c.seed = 4;
  const auto a = seg::seg_train(c, samples);
  const auto b = seg::seg_train(c, samples);
  CHECK(a.checkpoint == b.checkpoint);
  CHECK(a.loss_trace == b.loss_trace);
  for (double l : a.loss_trace) CHECK(std::isfinite(l));

  auto model = seg::load_segmenter(a.checkpoint);
  const auto pred = seg::predict(model, samples[0].image);
  CHECK(pred.height() == 32);
  CHECK(pred.width() == 32);
  Checkpoint wrong = a.checkpoint;
  wrong.kind = "translator";
  CHECK_THROWS_AS(seg::load_segmenter(wrong), ContractError);
}

TEST_CASE("segmenter overfits one phantom slice") {
  const auto p = data::generate_phantom_subject(21, {16, 64, 64}, 1.0, "s");
  const int z = 8;
  Image given(64, 64);
  LabelMap labels(64, 64);
  for (int y = 0; y < 64; ++y)
    for (int x = 0; x < 64; ++x) {
      given(y, x) = std::clamp(std::round(p.vol_a(z, y, x)), 0.0f, 255.0f);
      labels(y, x) = static_cast<std::uint8_t>(p.labels(z, y, x));
    }
  const auto t = io::normalize(given);
  seg::SegSample s{seg::compose_tms(t, t, seg::kBaselineSpec), labels};
  seg::SegTrainConfig c;
  c.width_multiplier = 0.125;
  c.epochs = 500;
  c.seed = 2;
  seg::Segmenter<float> model;
  seg::seg_train(c, {s}, &model);
  const auto pred = seg::predict(model, s.image);
  const auto scores = seg::score_predictions({labels}, {pred}, 4);
  MESSAGE("pixel accuracy " << scores.accuracy_all);
  CHECK(scores.accuracy_all > 0.99);
}

TEST_CASE("compose_tms only reindexes its inputs") {
  const auto g = noise(1, 8, 8, 5);
  const auto t = noise(1, 8, 8, 6);
  auto abs_sum = [](const Tensor<float>& x) {
    double s = 0;
    for (float v : x.values()) s += std::fabs(v);
    return s;
  };
  CHECK(abs_sum(seg::compose_tms(g, t, seg::kTmsSpec)) == abs_sum(g) * 2 + abs_sum(t));
  CHECK(abs_sum(seg::compose_tms(g, t, seg::kBaselineSpec)) == abs_sum(g) * 3);
  CHECK_THROWS(seg::compose_tms(g, noise(1, 8, 7, 6), seg::kTmsSpec));
}

TEST_CASE("segmenter is covariant to shifts of one coarse cell") {
  seg::SegmenterConfig c;
  c.width_multiplier = 1.0 / 32;
  c.padding = nn::Padding::Circular;
  seg::Segmenter<float> model(c);
  std::mt19937_64 rng(3);
  model.init(rng);
  const int side = 96;
  const auto x = noise(3, side, side, 8);
  Tensor<float> shifted(3, side, side);
  for (int ch = 0; ch < 3; ++ch)
    for (int y = 0; y < side; ++y)
      for (int xx = 0; xx < side; ++xx) shifted(ch, (y + 32) % side, xx) = x(ch, y, xx);
  const auto p = model.forward(x);
  for (int y = 0; y < side; ++y) {
    double s = 0;
    for (int k = 0; k < 4; ++k) s += p(k, y, 5);
    CHECK(s == doctest::Approx(1.0).epsilon(1e-6));
  }
  model.forward_logits(x);
  const auto a = model.coarse_scores();
  model.forward_logits(shifted);
  const auto b = model.coarse_scores();
  REQUIRE(a.height() == 3);
  for (int k = 0; k < a.channels(); ++k)
    for (int y = 0; y < 3; ++y)
      for (int xx = 0; xx < 3; ++xx) CHECK(b(k, (y + 1) % 3, xx) == doctest::Approx(a(k, y, xx)).epsilon(1e-4));
}

TEST_CASE("segmenter training rejects an empty set") {
  seg::SegTrainConfig c;
  CHECK_THROWS_AS(seg::seg_train(c, {}), ConfigError);
}

TEST_CASE("fcn score of real against itself has no gap") {
  std::vector<Image> real;
  std::vector<LabelMap> labels;
  for (int i = 0; i < 2; ++i) {
    Image im(32, 32);
    LabelMap l(32, 32);
    for (int y = 0; y < 32; ++y)
      for (int x = 0; x < 32; ++x) {
        im(y, x) = static_cast<float>((x * 7 + y * 3 + i * 11) % 256);
        l(y, x) = static_cast<std::uint8_t>(x / 8);
      }
    real.push_back(im);
    labels.push_back(l);
  }
  seg::Segmenter<float> model(seg::SegmenterConfig{3, 4, 1.0 / 32, nn::Padding::Zero});
  std::mt19937_64 rng(1);
  model.init(rng);
  const auto r = seg::fcn_score(model, real, real, labels);
  CHECK(r.real.accuracy_all == r.fake.accuracy_all);
  const auto j = nlohmann::json::parse(r.to_json());
  CHECK(j["gap"]["accuracy_all"].get<double>() == 0.0);
  CHECK(j["real"]["dice_per_class"].size() == 4);
}

#include "n2n/segmenter.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

#include <json.hpp>

#include "n2n/error.hpp"
#include "n2n/networks.hpp"
#include "n2n/optim.hpp"
#include "n2n/rng.hpp"
#include "n2n/volume_io.hpp"

namespace n2n::seg {

using nn::BatchNorm2d;
using nn::Conv2d;
using nn::LeakyRelu;

template <typename T>
Segmenter<T>::Segmenter(const SegmenterConfig& config) : config_(config) {
  if (config.in_channels < 1 || config.num_classes < 2) throw ConfigError("segmenter needs >= 1 input channel and >= 2 classes");
  int in = config.in_channels;
  std::array<int, 5> widths{};
  for (std::size_t b = 0; b < kSegmenterFilters.size(); ++b) {
    const int w = nn::scaled_width(kSegmenterFilters[b], config.width_multiplier);
    widths[b] = w;
    const std::string name = "S.block" + std::to_string(b + 1);
    conv_.emplace_back(name + ".down", in, w, 3, 2, 1, config.padding);
    norm_.emplace_back(name + ".down.bn", w);
    act_.emplace_back(T(0));
    conv_.emplace_back(name + ".conv", w, w, 3, 1, 1, config.padding);
    norm_.emplace_back(name + ".conv.bn", w);
    act_.emplace_back(T(0));
    in = w;
  }
  head3_ = Conv2d<T>("S.score3", widths[2], config.num_classes, 1, 1, 0);
  head4_ = Conv2d<T>("S.score4", widths[3], config.num_classes, 1, 1, 0);
  head5_ = Conv2d<T>("S.score5", widths[4], config.num_classes, 1, 1, 0);
}

template <typename T>
void Segmenter<T>::init(std::mt19937_64& rng) {
  for (std::size_t i = 0; i < conv_.size(); ++i) {
    // He-style scale for ReLU stacks
    const double fan_in = static_cast<double>(conv_[i].in_channels() * conv_[i].kernel() * conv_[i].kernel());
    nn::init_normal(conv_[i].weight(), rng, 0.0, std::sqrt(2.0 / fan_in));
    std::fill(conv_[i].bias().value.begin(), conv_[i].bias().value.end(), T(0));
    std::fill(norm_[i].gamma().value.begin(), norm_[i].gamma().value.end(), T(1));
    std::fill(norm_[i].beta().value.begin(), norm_[i].beta().value.end(), T(0));
  }
  for (auto* h : {&head3_, &head4_, &head5_}) {
    nn::init_normal(h->weight(), rng, 0.0, 0.02);
    std::fill(h->bias().value.begin(), h->bias().value.end(), T(0));
  }
}

template <typename T>
void Segmenter<T>::set_padding(nn::Padding padding) {
  config_.padding = padding;
  for (auto& c : conv_) c.set_padding(padding);
}

template <typename T>
Tensor<T> Segmenter<T>::forward_logits(const Tensor<T>& x) {
  if (x.channels() != config_.in_channels) {
    throw ShapeError("segmenter expects " + std::to_string(config_.in_channels) + " channels, got " + x.shape_string());
  }
  full_ = {x.height(), x.width()};
  Tensor<T> h = x;
  Tensor<T> p3, p4;
  for (std::size_t b = 0; b < 5; ++b) {
    for (std::size_t k = 2 * b; k < 2 * b + 2; ++k) {
      h = conv_[k].forward(h);
      h = norm_[k].forward(h);
      h = act_[k].forward(h);
    }
    if (b == 2) p3 = h;
    if (b == 3) p4 = h;
  }
  e3_ = {p3.height(), p3.width()};
  e4_ = {p4.height(), p4.width()};

  score5_ = head5_.forward(h);
  Tensor<T> u = up5_.forward(score5_);
  u5_ = {u.height(), u.width()};
  Tensor<T> f = nn::crop_top_left(u, e4_[0], e4_[1]);
  nn::add_inplace(f, head4_.forward(p4));

  u = up4_.forward(f);
  u4_ = {u.height(), u.width()};
  f = nn::crop_top_left(u, e3_[0], e3_[1]);
  nn::add_inplace(f, head3_.forward(p3));

  u = up3_.forward(f);
  u3_ = {u.height(), u.width()};
  return nn::crop_top_left(u, full_[0], full_[1]);
}

template <typename T>
Tensor<T> Segmenter<T>::forward(const Tensor<T>& x) {
  return softmax_channels(forward_logits(x));
}

template <typename T>
Tensor<T> Segmenter<T>::backward(const Tensor<T>& grad_logits) {
  Tensor<T> g = up3_.backward(nn::uncrop_top_left(grad_logits, u3_[0], u3_[1]));
  Tensor<T> g3 = head3_.backward(g, true);
  g = up4_.backward(nn::uncrop_top_left(g, u4_[0], u4_[1]));
  Tensor<T> g4 = head4_.backward(g, true);
  g = up5_.backward(nn::uncrop_top_left(g, u5_[0], u5_[1]));
  g = head5_.backward(g, true);

  for (std::size_t b = 5; b-- > 0;) {
    if (b == 3) nn::add_inplace(g, g4);
    if (b == 2) nn::add_inplace(g, g3);
    for (std::size_t k = 2 * b + 2; k-- > 2 * b;) {
      g = act_[k].backward(g);
      g = norm_[k].backward(g);
      g = conv_[k].backward(g, true);
    }
  }
  return g;
}

template <typename T>
std::vector<nn::Param<T>*> Segmenter<T>::params() {
  std::vector<nn::Param<T>*> out;
  for (std::size_t i = 0; i < conv_.size(); ++i) {
    for (auto* p : conv_[i].params()) out.push_back(p);
    for (auto* p : norm_[i].params()) out.push_back(p);
  }
  for (auto* h : {&head3_, &head4_, &head5_}) {
    for (auto* p : h->params()) out.push_back(p);
  }
  return out;
}

template <typename T>
void Segmenter<T>::zero_grad() {
  for (auto* p : params()) p->zero_grad();
}

template <typename T>
Tensor<T> softmax_channels(const Tensor<T>& logits) {
  Tensor<T> p(logits.channels(), logits.height(), logits.width());
  const std::size_t plane = logits.plane();
  const int K = logits.channels();
  for (std::size_t i = 0; i < plane; ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    for (int c = 0; c < K; ++c) mx = std::max(mx, static_cast<double>(logits.channel(c)[i]));
    double sum = 0.0;
    for (int c = 0; c < K; ++c) sum += std::exp(static_cast<double>(logits.channel(c)[i]) - mx);
    for (int c = 0; c < K; ++c) {
      p.channel(c)[i] = static_cast<T>(std::exp(static_cast<double>(logits.channel(c)[i]) - mx) / sum);
    }
  }
  return p;
}

namespace {

void require_labels(int K, int H, int W, const LabelMap& labels) {
  if (labels.height() != H || labels.width() != W) throw ShapeError("label map size does not match scores");
  for (auto v : labels.values()) {
    if (v >= K) throw ContractError("label " + std::to_string(v) + " outside [0," + std::to_string(K) + ")");
  }
}

}  // namespace

template <typename T>
double cross_entropy(const Tensor<T>& logits, const LabelMap& labels) {
  require_labels(logits.channels(), logits.height(), logits.width(), labels);
  const std::size_t plane = logits.plane();
  const int K = logits.channels();
  double acc = 0.0;
  for (std::size_t i = 0; i < plane; ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    for (int c = 0; c < K; ++c) mx = std::max(mx, static_cast<double>(logits.channel(c)[i]));
    double sum = 0.0;
    for (int c = 0; c < K; ++c) sum += std::exp(static_cast<double>(logits.channel(c)[i]) - mx);
    acc += std::log(sum) + mx - static_cast<double>(logits.channel(labels.values()[i])[i]);
  }
  return acc / static_cast<double>(plane);
}

template <typename T>
Tensor<T> cross_entropy_grad(const Tensor<T>& logits, const LabelMap& labels) {
  require_labels(logits.channels(), logits.height(), logits.width(), labels);
  Tensor<T> g = softmax_channels(logits);
  const T inv_n = T(1) / static_cast<T>(logits.plane());
  for (std::size_t i = 0; i < logits.plane(); ++i) g.channel(labels.values()[i])[i] -= T(1);
  for (T& v : g.values()) v *= inv_n;
  return g;
}

LabelMap argmax_labels(const Tensor<float>& scores) {
  LabelMap out(scores.height(), scores.width());
  for (std::size_t i = 0; i < scores.plane(); ++i) {
    int best = 0;
    for (int c = 1; c < scores.channels(); ++c) {
      if (scores.channel(c)[i] > scores.channel(best)[i]) best = c;
    }
    out.values()[i] = static_cast<std::uint8_t>(best);
  }
  return out;
}

// ------------------------------------------------------------------- TMS

ChannelSpec parse_channel_spec(const std::string& text) {
  std::vector<std::string> parts;
  std::stringstream ss(text);
  std::string p;
  while (std::getline(ss, p, ',')) parts.push_back(p);
  if (parts.size() != 3) throw ConfigError("channel spec '" + text + "' must have exactly 3 entries");
  ChannelSpec spec{};
  for (std::size_t i = 0; i < 3; ++i) {
    if (parts[i] == "g" || parts[i] == "given" || parts[i] == "A") {
      spec[i] = Source::Given;
    } else if (parts[i] == "t" || parts[i] == "translated" || parts[i] == "B") {
      spec[i] = Source::Translated;
    } else {
      throw ConfigError("channel spec entry '" + parts[i] + "' is not g or t");
    }
  }
  return spec;
}

std::string channel_spec_name(const ChannelSpec& spec) {
  std::string s;
  for (std::size_t i = 0; i < 3; ++i) {
    if (i) s += ',';
    s += spec[i] == Source::Given ? 'g' : 't';
  }
  return s;
}

Tensor<float> compose_tms(const Tensor<float>& given, const Tensor<float>& translated, const ChannelSpec& spec) {
  if (given.channels() != 1) throw ShapeError("compose_tms: given image must have one channel");
  const bool needs_t = std::find(spec.begin(), spec.end(), Source::Translated) != spec.end();
  if (needs_t) {
    if (translated.channels() != 1) throw ShapeError("compose_tms: translated image must have one channel");
    if (translated.height() != given.height() || translated.width() != given.width()) {
      throw ShapeError("compose_tms: given " + given.shape_string() + " and translated " + translated.shape_string() +
                       " differ in size");
    }
  }
  Tensor<float> out(3, given.height(), given.width());
  for (int c = 0; c < 3; ++c) {
    const Tensor<float>& src = spec[static_cast<std::size_t>(c)] == Source::Given ? given : translated;
    std::copy(src.data(), src.data() + src.plane(), out.channel(c));
  }
  return out;
}

// --------------------------------------------------------------- training

SegTrainConfig SegTrainConfig::from_json(const std::string& text) {
  SegTrainConfig c;
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
    if (!j.is_object()) throw ConfigError("segmenter config must be a JSON object");
    for (const auto& [key, v] : j.items()) {
      if (key == "seed") {
        c.seed = v.get<std::uint64_t>();
      } else if (key == "width_multiplier") {
        c.width_multiplier = v.get<double>();
      } else if (key == "num_classes") {
        c.num_classes = v.get<int>();
      } else if (key == "epochs") {
        c.epochs = v.get<int>();
      } else if (key == "learning_rate") {
        c.learning_rate = v.get<double>();
      } else if (key == "momentum") {
        c.momentum = v.get<double>();
      } else if (key == "weight_decay") {
        c.weight_decay = v.get<double>();
      } else if (key == "loss_reduction") {
        c.loss_reduction = v.get<std::string>();
      } else {
        throw ConfigError("unknown segmenter config key '" + key + "'");
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("bad segmenter config: ") + e.what());
  }
  c.validate();
  return c;
}

std::string SegTrainConfig::to_json() const {
  nlohmann::ordered_json j;
  j["seed"] = seed;
  j["width_multiplier"] = width_multiplier;
  j["num_classes"] = num_classes;
  j["epochs"] = epochs;
  j["learning_rate"] = learning_rate;
  j["momentum"] = momentum;
  j["weight_decay"] = weight_decay;
  j["loss_reduction"] = loss_reduction;
  return j.dump(2) + "\n";
}

void SegTrainConfig::validate() const {
  if (!(width_multiplier > 0.0)) throw ConfigError("width_multiplier must be positive");
  if (num_classes < 2) throw ConfigError("num_classes must be >= 2");
  if (epochs < 1) throw ConfigError("epochs must be >= 1");
  if (!(learning_rate > 0.0)) throw ConfigError("learning_rate must be positive");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("momentum must lie in [0,1)");
  if (!(weight_decay >= 0.0)) throw ConfigError("weight_decay must be >= 0");
  if (loss_reduction != "sum" && loss_reduction != "mean") throw ConfigError("loss_reduction must be sum or mean");
}

Checkpoint segmenter_checkpoint(const SegTrainConfig& config, Segmenter<float>& model, int epoch, std::uint64_t step) {
  Checkpoint c;
  c.kind = kSegmenterKind;
  c.config_json = config.to_json();
  c.config_hash = fnv1a64(c.config_json);
  c.epoch = static_cast<std::uint32_t>(epoch);
  c.step = step;
  for (const auto* p : model.params()) {
    NamedArray a;
    a.name = "S/" + p->name;
    for (int d : p->shape) a.shape.push_back(static_cast<std::uint32_t>(d));
    a.data.assign(p->value.begin(), p->value.end());
    c.arrays.push_back(std::move(a));
  }
  return c;
}

Segmenter<float> load_segmenter(const Checkpoint& c) {
  if (c.kind != kSegmenterKind) throw ContractError("checkpoint kind '" + c.kind + "' is not a segmenter");
  const auto cfg = SegTrainConfig::from_json(c.config_json);
  Segmenter<float> model(SegmenterConfig{3, cfg.num_classes, cfg.width_multiplier});
  for (auto* p : model.params()) {
    const auto& a = c.array("S/" + p->name);
    if (a.data.size() != p->value.size()) throw ContractError("segmenter checkpoint array '" + a.name + "' has wrong size");
    p->value.assign(a.data.begin(), a.data.end());
  }
  return model;
}

SegTrainResult seg_train(const SegTrainConfig& config, const std::vector<SegSample>& samples,
                         Segmenter<float>* model_out) {
  config.validate();
  if (samples.empty()) throw ConfigError("segmenter training set is empty");
  Segmenter<float> model(SegmenterConfig{3, config.num_classes, config.width_multiplier});
  std::mt19937_64 init_rng(derive_seed(config.seed, {0x5345474dULL}));
  model.init(init_rng);
  nn::SgdMomentum<float> opt(nn::SgdConfig{config.learning_rate, config.momentum, config.weight_decay});

  SegTrainResult result;
  std::uint64_t step = 0;
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    std::vector<std::size_t> order(samples.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::mt19937_64 rng(derive_seed(config.seed, {0x53534846ULL, static_cast<std::uint64_t>(epoch)}));
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t idx : order) {
      const auto& s = samples[idx];
      model.zero_grad();
      const auto logits = model.forward_logits(s.image);
      const double loss = cross_entropy(logits, s.labels);
      if (!std::isfinite(loss)) {
        throw NumericError("segmenter loss became non-finite at step " + std::to_string(step));
      }
      auto grad = cross_entropy_grad(logits, s.labels);
      if (config.loss_reduction == "sum") {
        const auto n = static_cast<float>(grad.plane());
        for (float& v : grad.values()) v *= n;
      }
      model.backward(grad);
      opt.step(model.params());
      result.loss_trace.push_back(loss);
      ++step;
    }
  }
  result.checkpoint = segmenter_checkpoint(config, model, config.epochs, step);
  if (model_out) *model_out = std::move(model);
  return result;
}

LabelMap predict(Segmenter<float>& model, const Tensor<float>& image) {
  return argmax_labels(model.forward_logits(image));
}

// ----------------------------------------------------------------- scoring

SegScores score_predictions(const std::vector<LabelMap>& truth, const std::vector<LabelMap>& predicted,
                            int num_classes) {
  if (truth.size() != predicted.size()) throw ContractError("score_predictions: count mismatch");
  if (truth.empty()) throw ContractError("score_predictions: no label maps");
  const auto K = static_cast<std::size_t>(num_classes);
  std::vector<double> in_truth(K, 0), in_pred(K, 0), hit(K, 0);
  double correct = 0, total = 0;
  for (std::size_t n = 0; n < truth.size(); ++n) {
    if (truth[n].height() != predicted[n].height() || truth[n].width() != predicted[n].width()) {
      throw ShapeError("score_predictions: label map sizes differ");
    }
    const auto g = truth[n].values();
    const auto h = predicted[n].values();
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (g[i] >= K || h[i] >= K) throw ContractError("label outside class range");
      in_truth[g[i]] += 1;
      in_pred[h[i]] += 1;
      if (g[i] == h[i]) {
        hit[g[i]] += 1;
        correct += 1;
      }
      total += 1;
    }
  }
  SegScores s;
  s.accuracy_all = correct / total;
  for (std::size_t c = 0; c < K; ++c) {
    s.accuracy_per_class.push_back(in_truth[c] > 0 ? hit[c] / in_truth[c] : std::numeric_limits<double>::quiet_NaN());
    s.dice_per_class.push_back(in_truth[c] + in_pred[c] > 0 ? 2 * hit[c] / (in_truth[c] + in_pred[c]) : 1.0);
  }
  return s;
}

namespace {

nlohmann::ordered_json nan_to_null(double v) { return std::isnan(v) ? nlohmann::ordered_json(nullptr) : nlohmann::ordered_json(v); }

nlohmann::ordered_json scores_json(const SegScores& s) {
  nlohmann::ordered_json j;
  j["accuracy_all"] = s.accuracy_all;
  j["accuracy_per_class"] = nlohmann::ordered_json::array();
  for (double v : s.accuracy_per_class) j["accuracy_per_class"].push_back(nan_to_null(v));
  j["dice_per_class"] = nlohmann::ordered_json::array();
  for (double v : s.dice_per_class) j["dice_per_class"].push_back(nan_to_null(v));
  return j;
}

}  // namespace

std::string FcnScoreReport::to_json() const {
  SegScores gap;
  gap.accuracy_all = real.accuracy_all - fake.accuracy_all;
  for (std::size_t c = 0; c < real.accuracy_per_class.size(); ++c) {
    gap.accuracy_per_class.push_back(real.accuracy_per_class[c] - fake.accuracy_per_class[c]);
    gap.dice_per_class.push_back(real.dice_per_class[c] - fake.dice_per_class[c]);
  }
  nlohmann::ordered_json j;
  j["real"] = scores_json(real);
  j["fake"] = scores_json(fake);
  j["gap"] = scores_json(gap);
  return j.dump(2) + "\n";
}

FcnScoreReport fcn_score(Segmenter<float>& model, const std::vector<Image>& real_images,
                         const std::vector<Image>& fake_images, const std::vector<LabelMap>& labels) {
  if (real_images.size() != labels.size() || fake_images.size() != labels.size()) {
    throw ContractError("fcn_score: real, fake and label counts must match");
  }
  const int K = model.config().num_classes;
  auto run = [&](const std::vector<Image>& imgs) {
    std::vector<LabelMap> pred;
    for (const auto& img : imgs) {
      const auto t = io::normalize(img);
      pred.push_back(predict(model, compose_tms(t, t, kBaselineSpec)));
    }
    return score_predictions(labels, pred, K);
  };
  return {run(real_images), run(fake_images)};
}

template class Segmenter<float>;
template class Segmenter<double>;
template Tensor<float> softmax_channels<float>(const Tensor<float>&);
template Tensor<double> softmax_channels<double>(const Tensor<double>&);
template double cross_entropy<float>(const Tensor<float>&, const LabelMap&);
template double cross_entropy<double>(const Tensor<double>&, const LabelMap&);
template Tensor<float> cross_entropy_grad<float>(const Tensor<float>&, const LabelMap&);
template Tensor<double> cross_entropy_grad<double>(const Tensor<double>&, const LabelMap&);

}  // namespace n2n::seg

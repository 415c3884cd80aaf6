#include "n2n/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <random>
#include <sstream>

#include <json.hpp>

#include "n2n/error.hpp"
#include "n2n/phantom.hpp"
#include "n2n/rng.hpp"
#include "n2n/volume_io.hpp"

namespace n2n::train {

namespace {

nlohmann::ordered_json config_to_ordered(const TrainConfig& c) {
  nlohmann::ordered_json j;
  j["loss_mode"] = std::string(nn::loss_mode_name(c.loss_mode));
  j["lambda"] = c.lambda;
  j["learning_rate"] = c.learning_rate;
  j["adam_beta1"] = c.adam_beta1;
  j["adam_beta2"] = c.adam_beta2;
  j["batch_size"] = c.batch_size;
  j["epochs"] = c.epochs;
  j["seed"] = c.seed;
  j["width_multiplier"] = c.width_multiplier;
  j["manifest"] = c.manifest;
  j["checkpoint_dir"] = c.checkpoint_dir;
  j["source_modality"] = c.source_modality;
  j["target_modality"] = c.target_modality;
  j["split"] = c.split;
  j["image_size"] = c.image_size;
  j["non_saturating"] = c.non_saturating;
  return j;
}

template <typename Vec>
NamedArray to_array(const std::string& name, const std::vector<int>& shape, const Vec& data) {
  NamedArray a;
  a.name = name;
  for (int d : shape) a.shape.push_back(static_cast<std::uint32_t>(d));
  a.data.assign(data.begin(), data.end());
  return a;
}

void append_params(Checkpoint& c, const std::string& prefix, const std::vector<nn::Param<float>*>& params) {
  for (const auto* p : params) c.arrays.push_back(to_array(prefix + p->name, p->shape, p->value));
}

void append_moments(Checkpoint& c, const std::string& prefix, const std::vector<nn::Param<float>*>& params,
                    const nn::Adam<float>& opt) {
  if (opt.first_moments().empty()) return;
  for (std::size_t i = 0; i < params.size(); ++i) {
    c.arrays.push_back(to_array(prefix + ".m/" + params[i]->name, params[i]->shape, opt.first_moments()[i]));
    c.arrays.push_back(to_array(prefix + ".v/" + params[i]->name, params[i]->shape, opt.second_moments()[i]));
  }
}

void load_params(const Checkpoint& c, const std::string& prefix, const std::vector<nn::Param<float>*>& params) {
  for (auto* p : params) {
    const auto& a = c.array(prefix + p->name);
    if (a.data.size() != p->value.size()) {
      throw ContractError("checkpoint array '" + a.name + "' has " + std::to_string(a.data.size()) +
                          " values, model expects " + std::to_string(p->value.size()));
    }
    std::copy(a.data.begin(), a.data.end(), p->value.begin());
  }
}

void load_moments(const Checkpoint& c, const std::string& prefix, const std::vector<nn::Param<float>*>& params,
                  nn::Adam<float>& opt) {
  opt.set_steps(c.counter(prefix + ".t"));
  opt.first_moments().clear();
  opt.second_moments().clear();
  if (opt.steps() == 0) return;
  for (auto* p : params) {
    const auto& m = c.array(prefix + ".m/" + p->name);
    const auto& v = c.array(prefix + ".v/" + p->name);
    opt.first_moments().emplace_back(m.data.begin(), m.data.end());
    opt.second_moments().emplace_back(v.data.begin(), v.data.end());
  }
}

bool finite(const StepLosses& l) {
  return std::isfinite(l.d_loss) && std::isfinite(l.g_adv) && std::isfinite(l.g_l1) && std::isfinite(l.g_total);
}

}  // namespace

// ------------------------------------------------------------ TrainConfig

TrainConfig TrainConfig::from_json(const std::string& text) {
  TrainConfig c;
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("train config is not valid JSON: ") + e.what());
  }
  if (!j.is_object()) throw ConfigError("train config must be a JSON object");
  try {
    for (const auto& [key, v] : j.items()) {
      if (key == "loss_mode") {
        c.loss_mode = nn::parse_loss_mode(v.get<std::string>());
      } else if (key == "lambda") {
        c.lambda = v.get<double>();
      } else if (key == "learning_rate") {
        c.learning_rate = v.get<double>();
      } else if (key == "adam_beta1") {
        c.adam_beta1 = v.get<double>();
      } else if (key == "adam_beta2") {
        c.adam_beta2 = v.get<double>();
      } else if (key == "batch_size") {
        c.batch_size = v.get<int>();
      } else if (key == "epochs") {
        c.epochs = v.get<int>();
      } else if (key == "seed") {
        c.seed = v.get<std::uint64_t>();
      } else if (key == "width_multiplier") {
        c.width_multiplier = v.get<double>();
      } else if (key == "manifest") {
        c.manifest = v.get<std::string>();
      } else if (key == "checkpoint_dir") {
        c.checkpoint_dir = v.get<std::string>();
      } else if (key == "source_modality") {
        c.source_modality = v.get<std::string>();
      } else if (key == "target_modality") {
        c.target_modality = v.get<std::string>();
      } else if (key == "split") {
        c.split = v.get<std::string>();
      } else if (key == "image_size") {
        c.image_size = v.get<int>();
      } else if (key == "non_saturating") {
        c.non_saturating = v.get<bool>();
      } else {
        throw ConfigError("unknown train config key '" + key + "'");
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("train config has a value of the wrong type: ") + e.what());
  }
  c.validate();
  return c;
}

std::string TrainConfig::to_json() const { return config_to_ordered(*this).dump(2) + "\n"; }

void TrainConfig::validate() const {
  if (!(lambda > 0.0)) throw ConfigError("lambda must be positive");
  if (!(learning_rate > 0.0)) throw ConfigError("learning_rate must be positive");
  if (!(adam_beta1 >= 0.0 && adam_beta1 < 1.0) || !(adam_beta2 >= 0.0 && adam_beta2 < 1.0)) {
    throw ConfigError("Adam betas must lie in [0,1)");
  }
  if (batch_size != 1) throw ConfigError("only batch_size = 1 is supported");
  if (epochs < 1) throw ConfigError("epochs must be >= 1");
  if (!(width_multiplier > 0.0)) throw ConfigError("width_multiplier must be positive");
  if (image_size < nn::kGeneratorGranularity || image_size % nn::kGeneratorGranularity != 0) {
    throw ConfigError("image_size must be a positive multiple of 256");
  }
}

std::uint64_t TrainConfig::hash() const {
  auto j = config_to_ordered(*this);
  j.erase("epochs");
  j.erase("checkpoint_dir");
  return fnv1a64(j.dump());
}

// ---------------------------------------------------------------- Trainer

std::uint64_t dropout_seed(std::uint64_t seed, std::uint64_t step) { return derive_seed(seed, {0x44524f50ULL, step}); }

std::vector<std::size_t> epoch_order(std::uint64_t seed, int epoch, std::size_t n) {
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  std::mt19937_64 rng(derive_seed(seed, {0x53485546ULL, static_cast<std::uint64_t>(epoch)}));
  std::shuffle(order.begin(), order.end(), rng);
  return order;
}

Trainer::Trainer(const TrainConfig& config)
    : config_(config),
      gen_(nn::GeneratorConfig{1, 1, config.width_multiplier}),
      disc_(nn::DiscriminatorConfig{1, 1, config.width_multiplier}),
      opt_g_(nn::AdamConfig{config.learning_rate, config.adam_beta1, config.adam_beta2, 1e-8}),
      opt_d_(nn::AdamConfig{config.learning_rate, config.adam_beta1, config.adam_beta2, 1e-8}) {
  config_.validate();
  std::mt19937_64 rng_g(derive_seed(config.seed, {0x47454eULL}));
  std::mt19937_64 rng_d(derive_seed(config.seed, {0x444953ULL}));
  gen_.init(rng_g);
  disc_.init(rng_d);
}

ImageTensor Trainer::generate_for_step(const ImageTensor& x) {
  return gen_.forward(x, true, dropout_seed(config_.seed, step_));
}

double Trainer::discriminator_phase(const ImageTensor& x, const ImageTensor& y, const ImageTensor& fake) {
  disc_.zero_grad();
  // D caches one forward at a time: backprop the real branch before the fake pass.
  const ImageTensor d_real = disc_.forward(x, y);
  ImageTensor grad_real, grad_fake;
  nn::loss_cgan_discriminator_grad(d_real, d_real, grad_real, grad_fake);
  disc_.backward(grad_real);
  const ImageTensor d_fake = disc_.forward(x, fake);
  nn::loss_cgan_discriminator_grad(d_real, d_fake, grad_real, grad_fake);
  disc_.backward(grad_fake);
  opt_d_.step(disc_.params());
  return -nn::loss_cgan(d_real, d_fake);
}

StepLosses Trainer::generator_phase(const ImageTensor& x, const ImageTensor& y, const ImageTensor& fake) {
  StepLosses l;
  l.step = step_;
  const nn::LossWeights weights{config_.loss_mode, config_.lambda};
  gen_.zero_grad();
  ImageTensor grad(fake.channels(), fake.height(), fake.width());
  if (nn::uses_adversarial(config_.loss_mode)) {
    const ImageTensor d_fake = disc_.forward(x, fake);
    l.g_adv = nn::generator_adversarial(d_fake, config_.non_saturating);
    grad = disc_.backward(nn::generator_adversarial_grad(d_fake, config_.non_saturating));
    disc_.zero_grad();  // D is fixed in this phase
  }
  l.g_l1 = nn::loss_l1(y, fake);
  if (nn::uses_l1(config_.loss_mode)) {
    const ImageTensor g1 = nn::loss_l1_grad(y, fake);
    const float scale = config_.loss_mode == nn::LossMode::CGAN_L1 ? static_cast<float>(config_.lambda) : 1.0f;
    auto gv = grad.values();
    const auto g1v = g1.values();
    for (std::size_t i = 0; i < gv.size(); ++i) gv[i] += scale * g1v[i];
  }
  l.g_total = nn::loss_combined(weights, l.g_adv, l.g_l1);
  gen_.backward(grad);
  opt_g_.step(gen_.params());
  return l;
}

StepLosses Trainer::train_step(const ImageTensor& x, const ImageTensor& y) {
  if (!x.same_shape(y)) throw ShapeError("training pair shapes differ: " + x.shape_string() + " vs " + y.shape_string());
  const ImageTensor fake = generate_for_step(x);
  double d_loss = 0.0;
  if (nn::uses_adversarial(config_.loss_mode)) d_loss = discriminator_phase(x, y, fake);
  StepLosses l = generator_phase(x, y, fake);
  l.d_loss = d_loss;
  ++step_;
  return l;
}

Checkpoint Trainer::to_checkpoint() const {
  auto& self = const_cast<Trainer&>(*this);  // params() hands out mutable pointers
  Checkpoint c;
  c.kind = kTranslatorKind;
  c.config_json = config_.to_json();
  c.config_hash = config_.hash();
  c.epoch = static_cast<std::uint32_t>(epoch_);
  c.step = step_;
  c.counters = {{"optG.t", opt_g_.steps()}, {"optD.t", opt_d_.steps()}};
  const auto gp = self.gen_.params();
  const auto dp = self.disc_.params();
  append_params(c, "G/", gp);
  append_params(c, "D/", dp);
  append_moments(c, "optG", gp, opt_g_);
  append_moments(c, "optD", dp, opt_d_);
  return c;
}

void Trainer::restore(const Checkpoint& c) {
  if (c.kind != kTranslatorKind) throw ContractError("checkpoint kind '" + c.kind + "' is not a translator");
  if (c.config_hash != config_.hash()) {
    throw ConfigError("checkpoint config hash mismatch: checkpoint was trained with a different configuration");
  }
  load_params(c, "G/", gen_.params());
  load_params(c, "D/", disc_.params());
  load_moments(c, "optG", gen_.params(), opt_g_);
  load_moments(c, "optD", disc_.params(), opt_d_);
  step_ = c.step;
  epoch_ = static_cast<int>(c.epoch);
}

nn::Generator<float> load_generator(const Checkpoint& c) {
  if (c.kind != kTranslatorKind) throw ContractError("checkpoint kind '" + c.kind + "' is not a translator");
  const TrainConfig cfg = TrainConfig::from_json(c.config_json);
  nn::Generator<float> g(nn::GeneratorConfig{1, 1, cfg.width_multiplier});
  load_params(c, "G/", g.params());
  return g;
}

// ------------------------------------------------------------------ loops

std::vector<TrainPair> load_training_pairs(const TrainConfig& config) {
  if (config.manifest.empty()) throw ConfigError("train config has no manifest");
  const auto manifest = data::DatasetManifest::load(config.manifest);
  const auto& ids = manifest.split(config.split);
  if (ids.empty()) throw ConfigError("split '" + config.split + "' is empty");
  std::vector<TrainPair> pairs;
  for (const auto& id : ids) {
    const auto& e = manifest.subject(id);
    const auto src = e.modalities.find(config.source_modality);
    const auto dst = e.modalities.find(config.target_modality);
    if (src == e.modalities.end() || dst == e.modalities.end()) {
      throw ContractError("subject '" + id + "' lacks modality " + config.source_modality + " or " +
                          config.target_modality);
    }
    const auto xs = io::generation_slices(io::read_nifti(manifest.resolve(src->second)), config.image_size);
    const auto ys = io::generation_slices(io::read_nifti(manifest.resolve(dst->second)), config.image_size);
    if (xs.size() != ys.size()) throw ContractError("subject '" + id + "' modalities differ in slice count");
    for (std::size_t k = 0; k < xs.size(); ++k) pairs.emplace_back(io::normalize(xs[k]), io::normalize(ys[k]));
  }
  return pairs;
}

TrainResult train(const TrainConfig& config, const std::vector<TrainPair>& pairs, const TrainOptions& options) {
  config.validate();
  if (pairs.empty()) throw ConfigError("training split contains no image pairs");
  Trainer trainer(config);
  if (options.resume_from) trainer.restore(Checkpoint::load(*options.resume_from));
  if (trainer.epoch() > config.epochs) {
    throw ConfigError("checkpoint is at epoch " + std::to_string(trainer.epoch()) + ", beyond epochs=" +
                      std::to_string(config.epochs));
  }

  TrainResult result;
  const int every = std::max(1, config.epochs / 10);
  const bool write = options.write_checkpoints && !config.checkpoint_dir.empty();
  if (write) std::filesystem::create_directories(config.checkpoint_dir);

  StepLosses last{};
  bool stop = false;
  for (int epoch = trainer.epoch(); epoch < config.epochs && !stop; ++epoch) {
    for (std::size_t idx : epoch_order(config.seed, epoch, pairs.size())) {
      const auto& [x, y] = pairs[idx];
      StepLosses l = trainer.train_step(x, y);
      if (!finite(l)) {
        std::ostringstream os;
        os << "non-finite loss at step " << l.step << " (epoch " << epoch << "): d=" << l.d_loss
           << " adv=" << l.g_adv << " l1=" << l.g_l1 << " total=" << l.g_total << "; previous step " << last.step
           << ": d=" << last.d_loss << " total=" << last.g_total;
        throw NumericError(os.str());
      }
      last = l;
      result.trace.push_back(l);
      if (options.on_step && !options.on_step(l, epoch)) {
        stop = true;
        break;
      }
    }
    if (stop) break;
    trainer.set_epoch(epoch + 1);
    if (write && ((epoch + 1) % every == 0 || epoch + 1 == config.epochs)) {
      char name[32];
      std::snprintf(name, sizeof(name), "epoch_%04d.ckpt", epoch + 1);
      const auto path = std::filesystem::path(config.checkpoint_dir) / name;
      trainer.to_checkpoint().save(path);
      result.written.push_back(path);
    }
  }
  result.final_checkpoint = trainer.to_checkpoint();
  if (write) {
    const auto path = std::filesystem::path(config.checkpoint_dir) / "final.ckpt";
    result.final_checkpoint.save(path);
    result.written.push_back(path);
  }
  return result;
}

std::vector<Image> translate(nn::Generator<float>& generator, const std::vector<Image>& images, bool stochastic,
                             std::uint64_t seed) {
  std::vector<Image> out;
  out.reserve(images.size());
  for (std::size_t i = 0; i < images.size(); ++i) {
    const Image& img = images[i];
    const bool fits =
        img.height() % nn::kGeneratorGranularity == 0 && img.width() % nn::kGeneratorGranularity == 0;
    const Image in = fits ? img : quantize_u8(io::resize_bilinear(img, 256, 256));
    const ImageTensor y = generator.forward(io::normalize(in), stochastic, derive_seed(seed, {0x5452ULL, i}));
    Image o = io::denormalize(y);
    if (!fits) o = quantize_u8(io::resize_bilinear(o, img.height(), img.width()));
    out.push_back(std::move(o));
  }
  return out;
}

}  // namespace n2n::train

#include "n2n/networks.hpp"

#include <cmath>
#include <string>

namespace n2n::nn {

int scaled_width(int nominal, double width_multiplier) {
  if (!(width_multiplier > 0.0)) throw ConfigError("width multiplier must be positive");
  return std::max(1, static_cast<int>(std::lround(nominal * width_multiplier)));
}

namespace {

template <typename T>
void append(std::vector<Param<T>*>& out, std::vector<Param<T>*> more) {
  out.insert(out.end(), more.begin(), more.end());
}

template <typename T>
void init_conv_params(Param<T>& weight, Param<T>& bias, std::mt19937_64& rng, double sigma) {
  init_normal(weight, rng, 0.0, sigma);
  std::fill(bias.value.begin(), bias.value.end(), T(0));
}

template <typename T>
void init_norm_params(BatchNorm2d<T>& norm, std::mt19937_64& rng, double sigma) {
  init_normal(norm.gamma(), rng, 1.0, sigma);
  std::fill(norm.beta().value.begin(), norm.beta().value.end(), T(0));
}

}  // namespace

// --------------------------------------------------------------- Generator

template <typename T>
Generator<T>::Generator(const GeneratorConfig& config) : config_(config) {
  if (config.in_channels < 1 || config.out_channels < 1) throw ConfigError("generator channel counts must be >= 1");
  for (int f : kEncoderFilters) enc_widths_.push_back(scaled_width(f, config.width_multiplier));

  const int stages = static_cast<int>(enc_widths_.size());
  int in = config.in_channels;
  for (int i = 0; i < stages; ++i) {
    const std::string name = "G.enc" + std::to_string(i + 1);
    enc_conv_.emplace_back(name, in, enc_widths_[static_cast<std::size_t>(i)], 4, 2, 1);
    // The innermost stage is 1x1 at the canonical size, where per-sample
    // normalization would erase the code, so it carries no norm layer.
    if (i + 1 < stages) {
      enc_norm_.emplace_back(BatchNorm2d<T>(name + ".bn", enc_widths_[static_cast<std::size_t>(i)]));
    } else {
      enc_norm_.emplace_back(std::nullopt);
    }
    enc_act_.emplace_back(T(0.2));
    in = enc_widths_[static_cast<std::size_t>(i)];
  }

  const auto dec_in = decoder_input_widths();
  for (int j = 0; j < stages; ++j) {
    const std::string name = "G.dec" + std::to_string(j + 1);
    const bool last = j + 1 == stages;
    const int out = last ? config.out_channels : enc_widths_[static_cast<std::size_t>(stages - 2 - j)];
    dec_conv_.emplace_back(name, dec_in[static_cast<std::size_t>(j)], out, 4, 2, 1);
    if (!last) {
      dec_norm_.emplace_back(BatchNorm2d<T>(name + ".bn", out));
    } else {
      dec_norm_.emplace_back(std::nullopt);
    }
    dec_drop_.emplace_back(static_cast<T>(j < config.dropout_stages ? config.dropout_rate : 0.0));
    dec_act_.emplace_back(T(0));
  }
}

template <typename T>
std::vector<int> Generator<T>::encoder_widths() const {
  return enc_widths_;
}

template <typename T>
std::vector<int> Generator<T>::decoder_input_widths() const {
  const int stages = static_cast<int>(enc_widths_.size());
  std::vector<int> widths;
  widths.push_back(enc_widths_.back());
  for (int j = 1; j < stages; ++j) {
    // previous decoder output mirrors encoder stage (stages-1-j); its skip
    // partner is the same encoder stage.
    const int mirrored = enc_widths_[static_cast<std::size_t>(stages - 1 - j)];
    widths.push_back(2 * mirrored);
  }
  return widths;
}

template <typename T>
void Generator<T>::init(std::mt19937_64& rng, double sigma) {
  for (std::size_t i = 0; i < enc_conv_.size(); ++i) {
    init_conv_params(enc_conv_[i].weight(), enc_conv_[i].bias(), rng, sigma);
    if (enc_norm_[i]) init_norm_params(*enc_norm_[i], rng, sigma);
  }
  for (std::size_t j = 0; j < dec_conv_.size(); ++j) {
    init_conv_params(dec_conv_[j].weight(), dec_conv_[j].bias(), rng, sigma);
    if (dec_norm_[j]) init_norm_params(*dec_norm_[j], rng, sigma);
  }
}

template <typename T>
Tensor<T> Generator<T>::forward(const Tensor<T>& x, bool dropout_active, std::uint64_t dropout_seed) {
  if (x.channels() != config_.in_channels) {
    throw ShapeError("generator expects " + std::to_string(config_.in_channels) + " input channels, got " +
                     x.shape_string());
  }
  if (x.height() % kGeneratorGranularity != 0 || x.width() % kGeneratorGranularity != 0) {
    throw ShapeError("generator input " + x.shape_string() + " must have spatial size divisible by " +
                     std::to_string(kGeneratorGranularity));
  }
  std::mt19937_64 rng(dropout_seed);
  const std::size_t stages = enc_conv_.size();
  std::vector<Tensor<T>> skips;
  skips.reserve(stages);
  encoder_extents_.clear();

  Tensor<T> h = x;
  for (std::size_t i = 0; i < stages; ++i) {
    h = enc_conv_[i].forward(h);
    if (enc_norm_[i]) h = enc_norm_[i]->forward(h);
    h = enc_act_[i].forward(h);
    encoder_extents_.push_back({h.height(), h.width()});
    skips.push_back(h);
  }

  for (std::size_t j = 0; j < stages; ++j) {
    Tensor<T> z = dec_conv_[j].forward(h);
    if (j + 1 == stages) return head_.forward(z);
    z = dec_norm_[j]->forward(z);
    z = dec_drop_[j].forward(z, dropout_active, rng);
    z = dec_act_[j].forward(z);
    h = concat_channels(z, skips[stages - 2 - j]);
  }
  return h;  // unreachable
}

template <typename T>
void Generator<T>::backward(const Tensor<T>& grad_out) {
  const std::size_t stages = enc_conv_.size();
  std::vector<Tensor<T>> skip_grads(stages);

  Tensor<T> g = head_.backward(grad_out);
  for (std::size_t jj = stages; jj-- > 0;) {
    if (jj + 1 < stages) {
      // g is the gradient w.r.t. concat(z_jj, skip); split it.
      auto [gz, gskip] = split_channels(g, dec_conv_[jj].out_channels());
      skip_grads[stages - 2 - jj] = std::move(gskip);
      g = dec_act_[jj].backward(gz);
      g = dec_drop_[jj].backward(g);
      g = dec_norm_[jj]->backward(g);
    }
    g = dec_conv_[jj].backward(g, true);
  }

  for (std::size_t ii = stages; ii-- > 0;) {
    if (!skip_grads[ii].empty()) add_inplace(g, skip_grads[ii]);
    g = enc_act_[ii].backward(g);
    if (enc_norm_[ii]) g = enc_norm_[ii]->backward(g);
    g = enc_conv_[ii].backward(g, ii > 0);
  }
}

template <typename T>
std::vector<Param<T>*> Generator<T>::params() {
  std::vector<Param<T>*> out;
  for (std::size_t i = 0; i < enc_conv_.size(); ++i) {
    append(out, enc_conv_[i].params());
    if (enc_norm_[i]) append(out, enc_norm_[i]->params());
  }
  for (std::size_t j = 0; j < dec_conv_.size(); ++j) {
    append(out, dec_conv_[j].params());
    if (dec_norm_[j]) append(out, dec_norm_[j]->params());
  }
  return out;
}

template <typename T>
void Generator<T>::zero_grad() {
  for (Param<T>* p : params()) p->zero_grad();
}

template <typename T>
std::vector<const BatchNorm2d<T>*> Generator<T>::norm_layers() const {
  std::vector<const BatchNorm2d<T>*> out;
  for (const auto& n : enc_norm_) {
    if (n) out.push_back(&*n);
  }
  for (const auto& n : dec_norm_) {
    if (n) out.push_back(&*n);
  }
  return out;
}

// ----------------------------------------------------------- Discriminator

template <typename T>
Discriminator<T>::Discriminator(const DiscriminatorConfig& config) : config_(config) {
  int in = config.condition_channels + config.target_channels;
  for (std::size_t i = 0; i < kDiscriminatorFilters.size(); ++i) {
    const std::string name = "D.stage" + std::to_string(i + 1);
    const int width = scaled_width(kDiscriminatorFilters[i], config.width_multiplier);
    conv_.emplace_back(name, in, width, 4, kDiscriminatorStrides[i], 1);
    norm_.emplace_back(name + ".bn", width);
    act_.emplace_back(T(0.2));
    in = width;
  }
  final_ = Conv2d<T>("D.head", in, 1, 4, 1, 1);
}

template <typename T>
void Discriminator<T>::init(std::mt19937_64& rng, double sigma) {
  for (std::size_t i = 0; i < conv_.size(); ++i) {
    init_conv_params(conv_[i].weight(), conv_[i].bias(), rng, sigma);
    init_norm_params(norm_[i], rng, sigma);
  }
  init_conv_params(final_.weight(), final_.bias(), rng, sigma);
}

template <typename T>
Tensor<T> Discriminator<T>::forward(const Tensor<T>& condition, const Tensor<T>& candidate) {
  if (condition.height() != candidate.height() || condition.width() != candidate.width()) {
    throw ShapeError("discriminator inputs differ in size: " + condition.shape_string() + " vs " +
                     candidate.shape_string());
  }
  if (condition.channels() != config_.condition_channels || candidate.channels() != config_.target_channels) {
    throw ShapeError("discriminator channel mismatch");
  }
  Tensor<T> h = concat_channels(condition, candidate);
  for (std::size_t i = 0; i < conv_.size(); ++i) {
    h = conv_[i].forward(h);
    h = norm_[i].forward(h);
    h = act_[i].forward(h);
  }
  return sigmoid_.forward(final_.forward(h));
}

template <typename T>
Tensor<T> Discriminator<T>::backward(const Tensor<T>& grad_prob) {
  Tensor<T> g = final_.backward(sigmoid_.backward(grad_prob), true);
  for (std::size_t i = conv_.size(); i-- > 0;) {
    g = act_[i].backward(g);
    g = norm_[i].backward(g);
    g = conv_[i].backward(g, true);
  }
  return split_channels(g, config_.condition_channels).second;
}

template <typename T>
std::vector<Param<T>*> Discriminator<T>::params() {
  std::vector<Param<T>*> out;
  for (std::size_t i = 0; i < conv_.size(); ++i) {
    append(out, conv_[i].params());
    append(out, norm_[i].params());
  }
  append(out, final_.params());
  return out;
}

template <typename T>
void Discriminator<T>::zero_grad() {
  for (Param<T>* p : params()) p->zero_grad();
}

template <typename T>
void Discriminator<T>::freeze_norm_statistics(bool frozen) {
  for (auto& n : norm_) n.freeze_statistics(frozen);
}

template <typename T>
int Discriminator<T>::receptive_field() {
  // Walk back from one output unit: r <- (r - 1) * stride + kernel.
  int r = 1;
  r = (r - 1) * 1 + 4;  // head
  for (std::size_t i = kDiscriminatorStrides.size(); i-- > 0;) r = (r - 1) * kDiscriminatorStrides[i] + 4;
  return r;
}

template class Generator<float>;
template class Generator<double>;
template class Discriminator<float>;
template class Discriminator<double>;

}  // namespace n2n::nn

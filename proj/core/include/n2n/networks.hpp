#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <random>
#include <vector>

#include "n2n/layers.hpp"

namespace n2n::nn {

inline constexpr std::array<int, 8> kEncoderFilters = {64, 128, 256, 512, 512, 512, 512, 512};
inline constexpr std::array<int, 4> kDiscriminatorFilters = {64, 128, 256, 512};
inline constexpr std::array<int, 4> kDiscriminatorStrides = {2, 2, 2, 1};
// Spatial extent the generator input must be a multiple of (2^8).
inline constexpr int kGeneratorGranularity = 256;

// Scales a nominal filter count, never below 1.
int scaled_width(int nominal, double width_multiplier);

struct GeneratorConfig {
  int in_channels = 1;
  int out_channels = 1;
  double width_multiplier = 1.0;
  double dropout_rate = 0.5;
  int dropout_stages = 3;
};

// U-Net generator: 8 stride-2 encoder stages, 8 stride-2 transposed decoder
// stages with mirrored skip concatenation, tanh head.
template <typename T>
class Generator {
 public:
  explicit Generator(const GeneratorConfig& config = {});

  const GeneratorConfig& config() const { return config_; }

  void init(std::mt19937_64& rng, double sigma = 0.02);

  // dropout_active: keep dropout on (training, or stochastic inference).
  Tensor<T> forward(const Tensor<T>& x, bool dropout_active, std::uint64_t dropout_seed);
  // Accumulates parameter gradients from dL/d(output).
  void backward(const Tensor<T>& grad_out);

  std::vector<Param<T>*> params();
  void zero_grad();

  std::vector<int> encoder_widths() const;
  // Input channel count of each decoder stage (after skip concatenation).
  std::vector<int> decoder_input_widths() const;
  // Spatial extent (h, w) of each encoder stage output from the last forward.
  const std::vector<std::array<int, 2>>& encoder_extents() const { return encoder_extents_; }

  std::vector<const BatchNorm2d<T>*> norm_layers() const;

 private:
  GeneratorConfig config_;
  std::vector<Conv2d<T>> enc_conv_;
  std::vector<std::optional<BatchNorm2d<T>>> enc_norm_;
  std::vector<LeakyRelu<T>> enc_act_;
  std::vector<ConvTranspose2d<T>> dec_conv_;
  std::vector<std::optional<BatchNorm2d<T>>> dec_norm_;
  std::vector<Dropout<T>> dec_drop_;
  std::vector<LeakyRelu<T>> dec_act_;
  TanhLayer<T> head_;
  std::vector<int> enc_widths_;
  std::vector<std::array<int, 2>> encoder_extents_;
};

struct DiscriminatorConfig {
  int condition_channels = 1;
  int target_channels = 1;
  double width_multiplier = 1.0;
};

// 70x70 PatchGAN on the channel concatenation (condition, candidate).
template <typename T>
class Discriminator {
 public:
  explicit Discriminator(const DiscriminatorConfig& config = {});

  const DiscriminatorConfig& config() const { return config_; }

  void init(std::mt19937_64& rng, double sigma = 0.02);

  // Returns a 1-channel map of probabilities in (0,1).
  Tensor<T> forward(const Tensor<T>& condition, const Tensor<T>& candidate);
  // Accumulates parameter gradients; returns dL/d(candidate).
  Tensor<T> backward(const Tensor<T>& grad_prob);

  std::vector<Param<T>*> params();
  void zero_grad();

  void freeze_norm_statistics(bool frozen);

  // Side length of one output unit's receptive field.
  static int receptive_field();

 private:
  DiscriminatorConfig config_;
  std::vector<Conv2d<T>> conv_;
  std::vector<BatchNorm2d<T>> norm_;
  std::vector<LeakyRelu<T>> act_;
  Conv2d<T> final_;
  SigmoidLayer<T> sigmoid_;
};

}  // namespace n2n::nn

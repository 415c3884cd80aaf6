#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "n2n/checkpoint.hpp"
#include "n2n/image.hpp"
#include "n2n/layers.hpp"

namespace n2n::seg {

inline constexpr std::array<int, 5> kSegmenterFilters = {64, 128, 256, 512, 512};

struct SegmenterConfig {
  int in_channels = 3;
  int num_classes = 4;
  double width_multiplier = 1.0;
  nn::Padding padding = nn::Padding::Zero;
};

// Five stride-2 blocks (3x3 stride-2 conv, norm, ReLU, 3x3 conv, norm, ReLU).
// Class scores from blocks 3, 4 and 5 (1/8, 1/16, 1/32) are fused coarse to
// fine with fixed bilinear x2 upsampling, then upsampled x8. Upsampled maps are
// cropped top-left to the finer extent, so any input size >= 1 works.
template <typename T>
class Segmenter {
 public:
  explicit Segmenter(const SegmenterConfig& config = {});

  const SegmenterConfig& config() const { return config_; }
  void init(std::mt19937_64& rng);

  // Raw class scores K x H x W.
  Tensor<T> forward_logits(const Tensor<T>& x);
  // Softmax over classes per pixel.
  Tensor<T> forward(const Tensor<T>& x);
  // Accumulates parameter gradients from dL/d(logits).
  Tensor<T> backward(const Tensor<T>& grad_logits);

  // 1/32-scale class scores from the last forward, before any upsampling.
  const Tensor<T>& coarse_scores() const { return score5_; }

  std::vector<nn::Param<T>*> params();
  void zero_grad();
  void set_padding(nn::Padding padding);

 private:
  SegmenterConfig config_;
  std::vector<nn::Conv2d<T>> conv_;
  std::vector<nn::BatchNorm2d<T>> norm_;
  std::vector<nn::LeakyRelu<T>> act_;
  nn::Conv2d<T> head3_, head4_, head5_;
  nn::BilinearUpsample<T> up5_{2}, up4_{2}, up3_{8};
  Tensor<T> score5_;
  std::array<int, 2> e3_{}, e4_{}, full_{};
  std::array<int, 2> u5_{}, u4_{}, u3_{};
};

template <typename T>
Tensor<T> softmax_channels(const Tensor<T>& logits);

// Mean per-pixel cross-entropy of softmax(logits) against labels.
template <typename T>
double cross_entropy(const Tensor<T>& logits, const LabelMap& labels);
template <typename T>
Tensor<T> cross_entropy_grad(const Tensor<T>& logits, const LabelMap& labels);

LabelMap argmax_labels(const Tensor<float>& scores);

enum class Source { Given, Translated };
using ChannelSpec = std::array<Source, 3>;

// "g,g,t" style; also accepts "A,A,B" with A = given.
ChannelSpec parse_channel_spec(const std::string& text);
std::string channel_spec_name(const ChannelSpec& spec);
inline constexpr ChannelSpec kTmsSpec = {Source::Given, Source::Given, Source::Translated};
inline constexpr ChannelSpec kBaselineSpec = {Source::Given, Source::Given, Source::Given};

// Stacks single-channel images in [-1,1] according to spec.
Tensor<float> compose_tms(const Tensor<float>& given, const Tensor<float>& translated, const ChannelSpec& spec);

struct SegSample {
  Tensor<float> image;  // 3 x H x W in [-1,1]
  LabelMap labels;
};

struct SegTrainConfig {
  std::uint64_t seed = 0;
  double width_multiplier = 0.25;
  int num_classes = 4;
  int epochs = 10;
  double learning_rate = 1e-4;
  double momentum = 0.99;
  double weight_decay = 5e-4;
  // "sum": per-image loss is summed over pixels (unnormalized, as usual with
  // momentum 0.99); "mean": averaged. The loss trace is always the mean.
  std::string loss_reduction = "mean";

  static SegTrainConfig from_json(const std::string& text);
  std::string to_json() const;
  void validate() const;
};

inline constexpr const char* kSegmenterKind = "segmenter";

struct SegTrainResult {
  std::vector<double> loss_trace;
  Checkpoint checkpoint;
};

// SGD with momentum and weight decay on per-pixel cross-entropy, seeded
// per-epoch shuffling.
SegTrainResult seg_train(const SegTrainConfig& config, const std::vector<SegSample>& samples,
                         Segmenter<float>* model_out = nullptr);

Checkpoint segmenter_checkpoint(const SegTrainConfig& config, Segmenter<float>& model, int epoch, std::uint64_t step);
Segmenter<float> load_segmenter(const Checkpoint& checkpoint);

LabelMap predict(Segmenter<float>& model, const Tensor<float>& image);

struct SegScores {
  double accuracy_all = 0.0;
  std::vector<double> accuracy_per_class;  // recall; classes absent from truth get NaN
  std::vector<double> dice_per_class;
};

SegScores score_predictions(const std::vector<LabelMap>& truth, const std::vector<LabelMap>& predicted,
                            int num_classes);

struct FcnScoreReport {
  SegScores real;
  SegScores fake;
  std::string to_json() const;  // {real:{...}, fake:{...}, gap:{...}} with gap = real - fake
};

// Runs a segmenter trained on real target-modality images over real and
// synthesized images (each replicated into three channels).
FcnScoreReport fcn_score(Segmenter<float>& model, const std::vector<Image>& real_images,
                         const std::vector<Image>& fake_images, const std::vector<LabelMap>& labels);

}  // namespace n2n::seg

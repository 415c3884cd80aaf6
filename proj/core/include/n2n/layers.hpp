#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "n2n/tensor.hpp"

namespace n2n::nn {

// A trainable parameter with its accumulated gradient.
template <typename T>
struct Param {
  std::string name;
  std::vector<int> shape;
  AlignedVector<T> value;
  AlignedVector<T> grad;

  Param() = default;
  Param(std::string n, std::vector<int> s);

  std::size_t size() const { return value.size(); }
  void zero_grad();
};

enum class Padding { Zero, Circular };

// Output extent of a strided convolution.
constexpr int conv_output_size(int in, int kernel, int stride, int pad) { return (in + 2 * pad - kernel) / stride + 1; }
constexpr int conv_transpose_output_size(int in, int kernel, int stride, int pad) {
  return (in - 1) * stride - 2 * pad + kernel;
}

template <typename T>
class Conv2d {
 public:
  Conv2d() = default;
  Conv2d(const std::string& name, int in_channels, int out_channels, int kernel, int stride, int pad,
         Padding padding = Padding::Zero);

  Tensor<T> forward(const Tensor<T>& x);
  // Accumulates parameter gradients; returns the input gradient unless
  // need_input_grad is false (then an empty tensor).
  Tensor<T> backward(const Tensor<T>& grad_out, bool need_input_grad = true);

  std::vector<Param<T>*> params() { return {&weight_, &bias_}; }
  Param<T>& weight() { return weight_; }
  Param<T>& bias() { return bias_; }

  int in_channels() const { return in_; }
  int out_channels() const { return out_; }
  int kernel() const { return k_; }
  int stride() const { return stride_; }
  int pad() const { return pad_; }
  void set_padding(Padding padding) { padding_ = padding; }

 private:
  int in_ = 0;
  int out_ = 0;
  int k_ = 0;
  int stride_ = 1;
  int pad_ = 0;
  Padding padding_ = Padding::Zero;
  Param<T> weight_;  // (out, in, k, k)
  Param<T> bias_;    // (out)
  AlignedVector<T> cols_;
  int in_h_ = 0;
  int in_w_ = 0;
  int out_h_ = 0;
  int out_w_ = 0;
};

template <typename T>
class ConvTranspose2d {
 public:
  ConvTranspose2d() = default;
  ConvTranspose2d(const std::string& name, int in_channels, int out_channels, int kernel, int stride, int pad);

  Tensor<T> forward(const Tensor<T>& x);
  Tensor<T> backward(const Tensor<T>& grad_out, bool need_input_grad = true);

  std::vector<Param<T>*> params() { return {&weight_, &bias_}; }
  Param<T>& weight() { return weight_; }
  Param<T>& bias() { return bias_; }

  int in_channels() const { return in_; }
  int out_channels() const { return out_; }

 private:
  int in_ = 0;
  int out_ = 0;
  int k_ = 0;
  int stride_ = 1;
  int pad_ = 0;
  Param<T> weight_;  // (in, out, k, k)
  Param<T> bias_;    // (out)
  Tensor<T> input_;
};

// Batch normalization for a batch of one: statistics are per channel over the
// spatial extent of the single sample (instance normalization).
template <typename T>
class BatchNorm2d {
 public:
  BatchNorm2d() = default;
  BatchNorm2d(const std::string& name, int channels, T eps = T(1e-5));

  Tensor<T> forward(const Tensor<T>& x);
  Tensor<T> backward(const Tensor<T>& grad_out);

  std::vector<Param<T>*> params() { return {&gamma_, &beta_}; }
  Param<T>& gamma() { return gamma_; }
  Param<T>& beta() { return beta_; }

  // When frozen, forward reuses the statistics of the last unfrozen forward,
  // turning the layer into a fixed per-channel affine map.
  void freeze_statistics(bool frozen) { frozen_ = frozen; }
  // Normalized (pre-affine) activations from the last forward.
  const Tensor<T>& normalized() const { return xhat_; }

 private:
  int channels_ = 0;
  T eps_ = T(1e-5);
  bool frozen_ = false;
  Param<T> gamma_;
  Param<T> beta_;
  std::vector<T> mean_;
  std::vector<T> inv_std_;
  Tensor<T> xhat_;
};

template <typename T>
class LeakyRelu {
 public:
  explicit LeakyRelu(T slope = T(0)) : slope_(slope) {}
  Tensor<T> forward(const Tensor<T>& x);
  Tensor<T> backward(const Tensor<T>& grad_out) const;

 private:
  T slope_;
  Tensor<T> input_;
};

template <typename T>
class TanhLayer {
 public:
  Tensor<T> forward(const Tensor<T>& x);
  Tensor<T> backward(const Tensor<T>& grad_out) const;

 private:
  Tensor<T> output_;
};

template <typename T>
class SigmoidLayer {
 public:
  Tensor<T> forward(const Tensor<T>& x);
  Tensor<T> backward(const Tensor<T>& grad_out) const;

 private:
  Tensor<T> output_;
};

// Inverted dropout: kept units are scaled by 1/(1-rate).
template <typename T>
class Dropout {
 public:
  explicit Dropout(T rate = T(0.5)) : rate_(rate) {}
  Tensor<T> forward(const Tensor<T>& x, bool active, std::mt19937_64& rng);
  Tensor<T> backward(const Tensor<T>& grad_out) const;

 private:
  T rate_;
  bool active_ = false;
  std::vector<T> mask_;
};

// Fixed (non-trainable) bilinear upsampling by an even integer factor,
// realized as a depthwise transposed convolution with kernel 2f, stride f,
// padding f/2. Output extent is exactly factor * input extent.
template <typename T>
class BilinearUpsample {
 public:
  explicit BilinearUpsample(int factor = 2);
  Tensor<T> forward(const Tensor<T>& x);
  Tensor<T> backward(const Tensor<T>& grad_out) const;
  int factor() const { return factor_; }

 private:
  int factor_;
  std::vector<T> kernel_;  // 2f x 2f
  int in_h_ = 0;
  int in_w_ = 0;
};

// Keeps the top-left (h, w) window; the backward pass zero-pads.
template <typename T>
Tensor<T> crop_top_left(const Tensor<T>& x, int h, int w);
template <typename T>
Tensor<T> uncrop_top_left(const Tensor<T>& grad, int full_h, int full_w);

template <typename T>
void add_inplace(Tensor<T>& acc, const Tensor<T>& x);

// Gaussian(0, sigma) weights, zero biases.
template <typename T>
void init_normal(Param<T>& p, std::mt19937_64& rng, double mean, double sigma);

}  // namespace n2n::nn

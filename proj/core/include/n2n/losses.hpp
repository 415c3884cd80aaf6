#pragma once

#include <string>
#include <string_view>

#include "n2n/tensor.hpp"

namespace n2n::nn {

// Probability clamp applied before every log.
inline constexpr double kProbEpsilon = 1e-7;

enum class LossMode { L1, CGAN, CGAN_L1 };

// Accepts "l1", "cgan", "cgan+l1".
LossMode parse_loss_mode(std::string_view text);
std::string_view loss_mode_name(LossMode mode);
inline bool uses_adversarial(LossMode mode) { return mode != LossMode::L1; }
inline bool uses_l1(LossMode mode) { return mode != LossMode::CGAN; }

struct LossWeights {
  LossMode mode = LossMode::CGAN_L1;
  double lambda = 100.0;
};

// Mean over patches of log D(x,y) + log(1 - D(x,G(x))): the value the
// discriminator maximizes.
template <typename T>
double loss_cgan(const Tensor<T>& d_real, const Tensor<T>& d_fake);

// Gradients of -loss_cgan (the discriminator's minimization target).
template <typename T>
void loss_cgan_discriminator_grad(const Tensor<T>& d_real, const Tensor<T>& d_fake, Tensor<T>& grad_real,
                                  Tensor<T>& grad_fake);

// Generator adversarial term: mean -log D(x,G(x)) (non-saturating), or
// mean log(1 - D(x,G(x))) when saturating.
template <typename T>
double generator_adversarial(const Tensor<T>& d_fake, bool non_saturating = true);
template <typename T>
Tensor<T> generator_adversarial_grad(const Tensor<T>& d_fake, bool non_saturating = true);

// Mean absolute difference.
template <typename T>
double loss_l1(const Tensor<T>& y, const Tensor<T>& y_hat);
// d/d(y_hat) of loss_l1.
template <typename T>
Tensor<T> loss_l1_grad(const Tensor<T>& y, const Tensor<T>& y_hat);

// CGAN_L1 = adversarial + lambda*l1, L1 = l1, CGAN = adversarial.
double loss_combined(const LossWeights& weights, double adversarial, double l1);

}  // namespace n2n::nn

#include "n2n/losses.hpp"

#include <algorithm>
#include <cmath>

namespace n2n::nn {

namespace {

template <typename T>
double clamp_prob(T p) {
  return std::clamp(static_cast<double>(p), kProbEpsilon, 1.0 - kProbEpsilon);
}

// Derivative of clamp_prob; zero where the clamp is active.
template <typename T>
bool clamp_active(T p) {
  const double v = static_cast<double>(p);
  return v < kProbEpsilon || v > 1.0 - kProbEpsilon;
}

template <typename T>
void require_same(const Tensor<T>& a, const Tensor<T>& b, const char* what) {
  if (!a.same_shape(b)) throw ShapeError(std::string(what) + ": shape mismatch " + a.shape_string() + " vs " + b.shape_string());
}

}  // namespace

LossMode parse_loss_mode(std::string_view text) {
  if (text == "l1") return LossMode::L1;
  if (text == "cgan") return LossMode::CGAN;
  if (text == "cgan+l1") return LossMode::CGAN_L1;
  throw ConfigError("unknown loss mode '" + std::string(text) + "' (expected l1, cgan or cgan+l1)");
}

std::string_view loss_mode_name(LossMode mode) {
  switch (mode) {
    case LossMode::L1:
      return "l1";
    case LossMode::CGAN:
      return "cgan";
    case LossMode::CGAN_L1:
      return "cgan+l1";
  }
  return "unknown";
}

template <typename T>
double loss_cgan(const Tensor<T>& d_real, const Tensor<T>& d_fake) {
  require_same(d_real, d_fake, "loss_cgan");
  double acc_real = 0.0;
  double acc_fake = 0.0;
  const auto r = d_real.values();
  const auto f = d_fake.values();
  for (std::size_t i = 0; i < r.size(); ++i) {
    acc_real += std::log(clamp_prob(r[i]));
    acc_fake += std::log(1.0 - clamp_prob(f[i]));
  }
  const double n = static_cast<double>(r.size());
  return acc_real / n + acc_fake / n;
}

template <typename T>
void loss_cgan_discriminator_grad(const Tensor<T>& d_real, const Tensor<T>& d_fake, Tensor<T>& grad_real,
                                  Tensor<T>& grad_fake) {
  require_same(d_real, d_fake, "loss_cgan_discriminator_grad");
  grad_real = Tensor<T>(d_real.channels(), d_real.height(), d_real.width());
  grad_fake = Tensor<T>(d_fake.channels(), d_fake.height(), d_fake.width());
  const double n = static_cast<double>(d_real.size());
  const auto r = d_real.values();
  const auto f = d_fake.values();
  auto gr = grad_real.values();
  auto gf = grad_fake.values();
  for (std::size_t i = 0; i < r.size(); ++i) {
    gr[i] = clamp_active(r[i]) ? T(0) : static_cast<T>(-1.0 / (n * clamp_prob(r[i])));
    gf[i] = clamp_active(f[i]) ? T(0) : static_cast<T>(1.0 / (n * (1.0 - clamp_prob(f[i]))));
  }
}

template <typename T>
double generator_adversarial(const Tensor<T>& d_fake, bool non_saturating) {
  double acc = 0.0;
  for (T p : d_fake.values()) {
    acc += non_saturating ? -std::log(clamp_prob(p)) : std::log(1.0 - clamp_prob(p));
  }
  return acc / static_cast<double>(d_fake.size());
}

template <typename T>
Tensor<T> generator_adversarial_grad(const Tensor<T>& d_fake, bool non_saturating) {
  Tensor<T> g(d_fake.channels(), d_fake.height(), d_fake.width());
  const double n = static_cast<double>(d_fake.size());
  const auto f = d_fake.values();
  auto gv = g.values();
  for (std::size_t i = 0; i < f.size(); ++i) {
    if (clamp_active(f[i])) continue;
    const double p = clamp_prob(f[i]);
    gv[i] = static_cast<T>(non_saturating ? -1.0 / (n * p) : -1.0 / (n * (1.0 - p)));
  }
  return g;
}

template <typename T>
double loss_l1(const Tensor<T>& y, const Tensor<T>& y_hat) {
  require_same(y, y_hat, "loss_l1");
  double acc = 0.0;
  const auto a = y.values();
  const auto b = y_hat.values();
  for (std::size_t i = 0; i < a.size(); ++i) acc += std::abs(static_cast<double>(a[i]) - static_cast<double>(b[i]));
  return acc / static_cast<double>(a.size());
}

template <typename T>
Tensor<T> loss_l1_grad(const Tensor<T>& y, const Tensor<T>& y_hat) {
  require_same(y, y_hat, "loss_l1_grad");
  Tensor<T> g(y.channels(), y.height(), y.width());
  const T inv_n = T(1) / static_cast<T>(y.size());
  const auto a = y.values();
  const auto b = y_hat.values();
  auto gv = g.values();
  for (std::size_t i = 0; i < a.size(); ++i) {
    gv[i] = b[i] > a[i] ? inv_n : (b[i] < a[i] ? -inv_n : T(0));
  }
  return g;
}

double loss_combined(const LossWeights& weights, double adversarial, double l1) {
  if (!(weights.lambda > 0.0)) throw ConfigError("lambda must be positive");
  switch (weights.mode) {
    case LossMode::L1:
      return l1;
    case LossMode::CGAN:
      return adversarial;
    case LossMode::CGAN_L1:
      return adversarial + weights.lambda * l1;
  }
  return adversarial;
}

#define N2N_INSTANTIATE_LOSSES(T)                                                                              \
  template double loss_cgan<T>(const Tensor<T>&, const Tensor<T>&);                                            \
  template void loss_cgan_discriminator_grad<T>(const Tensor<T>&, const Tensor<T>&, Tensor<T>&, Tensor<T>&);  \
  template double generator_adversarial<T>(const Tensor<T>&, bool);                                            \
  template Tensor<T> generator_adversarial_grad<T>(const Tensor<T>&, bool);                                    \
  template double loss_l1<T>(const Tensor<T>&, const Tensor<T>&);                                              \
  template Tensor<T> loss_l1_grad<T>(const Tensor<T>&, const Tensor<T>&);

N2N_INSTANTIATE_LOSSES(float)
N2N_INSTANTIATE_LOSSES(double)

#undef N2N_INSTANTIATE_LOSSES

}  // namespace n2n::nn

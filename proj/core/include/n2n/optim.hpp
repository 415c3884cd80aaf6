#pragma once

#include <cstdint>
#include <vector>

#include "n2n/layers.hpp"

namespace n2n::nn {

struct AdamConfig {
  double learning_rate = 2e-4;
  double beta1 = 0.5;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

// Adam with bias correction. Moment buffers follow the order of the
// parameter list handed to step().
template <typename T>
class Adam {
 public:
  explicit Adam(const AdamConfig& config = {}) : config_(config) {}

  void step(const std::vector<Param<T>*>& params);

  const AdamConfig& config() const { return config_; }
  std::uint64_t steps() const { return t_; }
  std::vector<AlignedVector<T>>& first_moments() { return m_; }
  std::vector<AlignedVector<T>>& second_moments() { return v_; }
  const std::vector<AlignedVector<T>>& first_moments() const { return m_; }
  const std::vector<AlignedVector<T>>& second_moments() const { return v_; }
  void set_steps(std::uint64_t t) { t_ = t; }

 private:
  AdamConfig config_;
  std::uint64_t t_ = 0;
  std::vector<AlignedVector<T>> m_;
  std::vector<AlignedVector<T>> v_;
};

struct SgdConfig {
  double learning_rate = 1e-4;
  double momentum = 0.99;
  double weight_decay = 5e-4;
};

// SGD with classical momentum and L2 weight decay folded into the gradient.
template <typename T>
class SgdMomentum {
 public:
  explicit SgdMomentum(const SgdConfig& config = {}) : config_(config) {}

  void step(const std::vector<Param<T>*>& params);

  const SgdConfig& config() const { return config_; }
  std::vector<AlignedVector<T>>& velocities() { return velocity_; }
  const std::vector<AlignedVector<T>>& velocities() const { return velocity_; }

 private:
  SgdConfig config_;
  std::vector<AlignedVector<T>> velocity_;
};

}  // namespace n2n::nn

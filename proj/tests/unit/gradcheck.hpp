#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "n2n/layers.hpp"

namespace n2n::testing {

inline double relative_error(const std::vector<double>& a, const std::vector<double>& b) {
  double num = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    num += (a[i] - b[i]) * (a[i] - b[i]);
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  return std::sqrt(num) / std::max({std::sqrt(na), std::sqrt(nb), 1e-30});
}

inline Tensor<double> random_tensor(std::mt19937_64& rng, int c, int h, int w, double sigma = 1.0) {
  Tensor<double> t(c, h, w);
  std::normal_distribution<double> nd(0, sigma);
  for (auto& v : t.values()) v = nd(rng);
  return t;
}

inline double dot(const Tensor<double>& a, const Tensor<double>& b) {
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a.values()[i] * b.values()[i];
  return s;
}

// Central differences of `loss` against the entries of `values` (at most `limit`).
template <typename Vec>
std::vector<double> numeric_grad(Vec& values, const std::function<double()>& loss,
                                        std::size_t limit = 64, double h = 1e-5) {
  std::vector<double> g;
  const std::size_t n = std::min(limit, values.size());
  for (std::size_t i = 0; i < n; ++i) {
    const double keep = values[i];
    values[i] = keep + h;
    const double lp = loss();
    values[i] = keep - h;
    const double lm = loss();
    values[i] = keep;
    g.push_back((lp - lm) / (2 * h));
  }
  return g;
}

template <typename Vec>
std::vector<double> head(const Vec& v, std::size_t n) {
  return {v.begin(), v.begin() + static_cast<std::ptrdiff_t>(std::min(n, v.size()))};
}

}  // namespace n2n::testing

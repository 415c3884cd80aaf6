#pragma once

#include <filesystem>
#include <limits>
#include <map>
#include <string>
#include <vector>

#include "n2n/image.hpp"

namespace n2n::metrics {

// Returned by psnr() for identical images (MSE == 0).
inline constexpr double kInfinitePsnr = std::numeric_limits<double>::infinity();

// Mean absolute pixel difference.
double mae(const Image& y, const Image& y_hat);

double mse(const Image& y, const Image& y_hat);

// 10*log10(max_value^2 / MSE) in dB; kInfinitePsnr when MSE == 0.
double psnr(const Image& y, const Image& y_hat, double max_value = 255.0);

// Histogram mutual information in nats; `bins` equal-width bins over [0,255].
double mutual_information(const Image& y, const Image& y_hat, int bins = 256);

// Shannon entropy (nats) of the same histogram binning.
double entropy(const Image& image, int bins = 256);

struct SsimParams {
  double dynamic_range = 255.0;
  double k1 = 0.01;
  double k2 = 0.03;
};

// SSIM from global image statistics (population moments).
double ssim(const Image& y, const Image& y_hat, const SsimParams& params = {});

// Mean SSIM over 11x11 Gaussian (sigma 1.5) windows, valid region only.
double ssim_windowed(const Image& y, const Image& y_hat, const SsimParams& params = {});

// 2|H n G| / (|H| + |G|) for one class. Both masks empty -> 1.
double dice(const LabelMap& truth, const LabelMap& prediction, int class_id);
double dice(std::span<const std::uint8_t> truth, std::span<const std::uint8_t> prediction, int class_id);

struct Aggregate {
  double mean = 0.0;
  double std = 0.0;  // population
};

Aggregate aggregate(const std::vector<double>& values);

// "mean(std)" with three decimals, as in the evaluation tables.
std::string format_mean_std(const Aggregate& a);

// metric name -> per-image values with aggregate statistics.
class MetricReport {
 public:
  void add(const std::string& metric, double value);
  void set(const std::string& metric, std::vector<double> values);

  const std::map<std::string, std::vector<double>>& values() const { return values_; }
  Aggregate summary(const std::string& metric) const;

  // {metric: {per_image: [...], mean, std}}
  std::string to_json() const;
  // header "metric,mean,std,mean(std)" then one row per metric
  std::string to_csv() const;
  void write(const std::filesystem::path& json_path, const std::filesystem::path& csv_path) const;

 private:
  std::map<std::string, std::vector<double>> values_;
};

// Evaluates the named metrics ("mae", "psnr", "mi", "ssim") over image pairs.
MetricReport evaluate_pairs(const std::vector<Image>& real, const std::vector<Image>& fake,
                            const std::vector<std::string>& metric_names);

}  // namespace n2n::metrics

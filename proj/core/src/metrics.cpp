#include "n2n/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "n2n/error.hpp"

namespace n2n::metrics {

namespace {

void require_same(const Image& a, const Image& b, const char* what) {
  if (a.height() != b.height() || a.width() != b.width()) {
    throw ShapeError(std::string(what) + ": image sizes differ (" + std::to_string(a.height()) + "x" +
                     std::to_string(a.width()) + " vs " + std::to_string(b.height()) + "x" +
                     std::to_string(b.width()) + ")");
  }
  if (a.empty()) throw ShapeError(std::string(what) + ": empty image");
}

int bin_of(double v, int bins) {
  const int b = static_cast<int>(std::floor(v * bins / 256.0));
  return std::clamp(b, 0, bins - 1);
}

double plogp_sum(const std::vector<double>& p) {
  double h = 0.0;
  for (double v : p) {
    if (v > 0.0) h -= v * std::log(v);
  }
  return h;
}

}  // namespace

double mae(const Image& y, const Image& y_hat) {
  require_same(y, y_hat, "mae");
  double acc = 0.0;
  const auto a = y.values();
  const auto b = y_hat.values();
  for (std::size_t i = 0; i < a.size(); ++i) acc += std::abs(static_cast<double>(a[i]) - b[i]);
  return acc / static_cast<double>(a.size());
}

double mse(const Image& y, const Image& y_hat) {
  require_same(y, y_hat, "mse");
  double acc = 0.0;
  const auto a = y.values();
  const auto b = y_hat.values();
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = static_cast<double>(a[i]) - b[i];
    acc += d * d;
  }
  return acc / static_cast<double>(a.size());
}

double psnr(const Image& y, const Image& y_hat, double max_value) {
  const double m = mse(y, y_hat);
  if (m == 0.0) return kInfinitePsnr;
  return 10.0 * std::log10(max_value * max_value / m);
}

double mutual_information(const Image& y, const Image& y_hat, int bins) {
  require_same(y, y_hat, "mutual_information");
  if (bins < 1) throw ConfigError("bins must be >= 1");
  const auto nb = static_cast<std::size_t>(bins);
  std::vector<double> joint(nb * nb, 0.0);
  const auto a = y.values();
  const auto b = y_hat.values();
  for (std::size_t i = 0; i < a.size(); ++i) {
    joint[static_cast<std::size_t>(bin_of(a[i], bins)) * nb + static_cast<std::size_t>(bin_of(b[i], bins))] += 1.0;
  }
  const double n = static_cast<double>(a.size());
  std::vector<double> px(nb, 0.0), py(nb, 0.0);
  for (std::size_t i = 0; i < nb; ++i) {
    for (std::size_t j = 0; j < nb; ++j) {
      const double p = joint[i * nb + j] / n;
      joint[i * nb + j] = p;
      px[i] += p;
      py[j] += p;
    }
  }
  double mi = 0.0;
  for (std::size_t i = 0; i < nb; ++i) {
    if (px[i] == 0.0) continue;
    for (std::size_t j = 0; j < nb; ++j) {
      const double p = joint[i * nb + j];
      if (p > 0.0) mi += p * std::log(p / (px[i] * py[j]));
    }
  }
  return std::max(0.0, mi);
}

double entropy(const Image& image, int bins) {
  if (image.empty()) throw ShapeError("entropy: empty image");
  std::vector<double> p(static_cast<std::size_t>(bins), 0.0);
  for (float v : image.values()) p[static_cast<std::size_t>(bin_of(v, bins))] += 1.0;
  for (double& v : p) v /= static_cast<double>(image.size());
  return plogp_sum(p);
}

double ssim(const Image& y, const Image& y_hat, const SsimParams& params) {
  require_same(y, y_hat, "ssim");
  const auto a = y.values();
  const auto b = y_hat.values();
  const double n = static_cast<double>(a.size());
  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    mx += a[i];
    my += b[i];
  }
  mx /= n;
  my /= n;
  double vx = 0.0, vy = 0.0, cxy = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double dx = a[i] - mx;
    const double dy = b[i] - my;
    vx += dx * dx;
    vy += dy * dy;
    cxy += dx * dy;
  }
  vx /= n;
  vy /= n;
  cxy /= n;
  const double c1 = (params.k1 * params.dynamic_range) * (params.k1 * params.dynamic_range);
  const double c2 = (params.k2 * params.dynamic_range) * (params.k2 * params.dynamic_range);
  return ((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
}

double ssim_windowed(const Image& y, const Image& y_hat, const SsimParams& params) {
  require_same(y, y_hat, "ssim_windowed");
  constexpr int kWin = 11;
  constexpr double kSigma = 1.5;
  if (y.height() < kWin || y.width() < kWin) throw ShapeError("ssim_windowed: image smaller than 11x11 window");
  double w[kWin];
  double wsum = 0.0;
  for (int i = 0; i < kWin; ++i) {
    const double d = i - kWin / 2;
    w[i] = std::exp(-d * d / (2 * kSigma * kSigma));
    wsum += w[i];
  }
  for (double& v : w) v /= wsum;
  const double c1 = std::pow(params.k1 * params.dynamic_range, 2);
  const double c2 = std::pow(params.k2 * params.dynamic_range, 2);
  double total = 0.0;
  int count = 0;
  for (int y0 = 0; y0 + kWin <= y.height(); ++y0) {
    for (int x0 = 0; x0 + kWin <= y.width(); ++x0) {
      double mx = 0, my = 0, sxx = 0, syy = 0, sxy = 0;
      for (int i = 0; i < kWin; ++i) {
        for (int j = 0; j < kWin; ++j) {
          const double k = w[i] * w[j];
          const double a = y(y0 + i, x0 + j);
          const double b = y_hat(y0 + i, x0 + j);
          mx += k * a;
          my += k * b;
          sxx += k * a * a;
          syy += k * b * b;
          sxy += k * a * b;
        }
      }
      const double vx = sxx - mx * mx;
      const double vy = syy - my * my;
      const double cxy = sxy - mx * my;
      total += ((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
      ++count;
    }
  }
  return total / count;
}

double dice(std::span<const std::uint8_t> truth, std::span<const std::uint8_t> prediction, int class_id) {
  if (truth.size() != prediction.size()) throw ShapeError("dice: label maps differ in size");
  std::size_t g = 0, h = 0, both = 0;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    const bool in_g = truth[i] == class_id;
    const bool in_h = prediction[i] == class_id;
    g += in_g;
    h += in_h;
    both += in_g && in_h;
  }
  if (g + h == 0) return 1.0;
  return 2.0 * static_cast<double>(both) / static_cast<double>(g + h);
}

double dice(const LabelMap& truth, const LabelMap& prediction, int class_id) {
  if (truth.height() != prediction.height() || truth.width() != prediction.width()) {
    throw ShapeError("dice: label maps differ in size");
  }
  return dice(truth.values(), prediction.values(), class_id);
}

Aggregate aggregate(const std::vector<double>& values) {
  if (values.empty()) throw ContractError("aggregate: empty value list");
  Aggregate a;
  for (double v : values) a.mean += v;
  a.mean /= static_cast<double>(values.size());
  double var = 0.0;
  for (double v : values) var += (v - a.mean) * (v - a.mean);
  a.std = std::sqrt(var / static_cast<double>(values.size()));
  return a;
}

std::string format_mean_std(const Aggregate& a) {
  char buf[96];
  std::snprintf(buf, sizeof(buf), "%.3f(%.3f)", a.mean, a.std);
  return buf;
}

void MetricReport::add(const std::string& metric, double value) { values_[metric].push_back(value); }

void MetricReport::set(const std::string& metric, std::vector<double> values) { values_[metric] = std::move(values); }

Aggregate MetricReport::summary(const std::string& metric) const {
  const auto it = values_.find(metric);
  if (it == values_.end()) throw ContractError("metric '" + metric + "' not in report");
  return aggregate(it->second);
}

namespace {

// JSON has no infinity; PSNR of identical images is written as a string.
nlohmann::json number_or_sentinel(double v) {
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  if (std::isnan(v)) return "nan";
  return v;
}

}  // namespace

std::string MetricReport::to_json() const {
  nlohmann::ordered_json out = nlohmann::ordered_json::object();
  for (const auto& [name, vals] : values_) {
    nlohmann::ordered_json block;
    nlohmann::json per = nlohmann::json::array();
    for (double v : vals) per.push_back(number_or_sentinel(v));
    block["per_image"] = per;
    const Aggregate a = aggregate(vals);
    block["mean"] = number_or_sentinel(a.mean);
    block["std"] = number_or_sentinel(a.std);
    out[name] = block;
  }
  return out.dump(2) + "\n";
}

std::string MetricReport::to_csv() const {
  std::ostringstream os;
  os << "metric,mean,std,mean(std)\n";
  os.precision(17);
  for (const auto& [name, vals] : values_) {
    const Aggregate a = aggregate(vals);
    os << name << ',' << a.mean << ',' << a.std << ',' << format_mean_std(a) << '\n';
  }
  return os.str();
}

void MetricReport::write(const std::filesystem::path& json_path, const std::filesystem::path& csv_path) const {
  auto dump = [](const std::filesystem::path& p, const std::string& text) {
    std::ofstream f(p, std::ios::binary);
    if (!f) throw IoError("cannot write " + p.string());
    f << text;
    if (!f) throw IoError("write failed: " + p.string());
  };
  dump(json_path, to_json());
  dump(csv_path, to_csv());
}

MetricReport evaluate_pairs(const std::vector<Image>& real, const std::vector<Image>& fake,
                            const std::vector<std::string>& metric_names) {
  if (real.size() != fake.size()) {
    throw ContractError("evaluate_pairs: " + std::to_string(real.size()) + " real vs " +
                        std::to_string(fake.size()) + " fake images");
  }
  if (real.empty()) throw ContractError("evaluate_pairs: no image pairs");
  MetricReport report;
  for (const auto& name : metric_names) {
    if (name != "mae" && name != "psnr" && name != "mi" && name != "ssim") {
      throw ConfigError("unknown metric '" + name + "' (expected mae, psnr, mi, ssim)");
    }
    std::vector<double> vals;
    vals.reserve(real.size());
    for (std::size_t i = 0; i < real.size(); ++i) {
      if (name == "mae") vals.push_back(mae(real[i], fake[i]));
      if (name == "psnr") vals.push_back(psnr(real[i], fake[i]));
      if (name == "mi") vals.push_back(mutual_information(real[i], fake[i]));
      if (name == "ssim") vals.push_back(ssim(real[i], fake[i]));
    }
    report.set(name, std::move(vals));
  }
  return report;
}

}  // namespace n2n::metrics

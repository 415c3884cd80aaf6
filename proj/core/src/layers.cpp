#include "n2n/layers.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>

namespace n2n::nn {

namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;

struct Geometry {
  int channels;
  int in_h;
  int in_w;
  int k;
  int stride;
  int pad;
  int out_h;
  int out_w;
  Padding padding;
};

inline int wrap(int i, int n) {
  i %= n;
  return i < 0 ? i + n : i;
}

// cols[(c*k+ky)*k+kx][oy*out_w+ox] = x[c][oy*s-p+ky][ox*s-p+kx]
template <typename T>
void im2col(const T* x, const Geometry& g, T* cols) {
  const std::size_t P = static_cast<std::size_t>(g.out_h) * static_cast<std::size_t>(g.out_w);
  for (int c = 0; c < g.channels; ++c) {
    const T* plane = x + static_cast<std::size_t>(c) * g.in_h * g.in_w;
    for (int ky = 0; ky < g.k; ++ky) {
      for (int kx = 0; kx < g.k; ++kx) {
        T* row = cols + (static_cast<std::size_t>(c * g.k + ky) * g.k + kx) * P;
        for (int oy = 0; oy < g.out_h; ++oy) {
          int iy = oy * g.stride - g.pad + ky;
          T* dst = row + static_cast<std::size_t>(oy) * g.out_w;
          if (g.padding == Padding::Circular) {
            iy = wrap(iy, g.in_h);
          } else if (iy < 0 || iy >= g.in_h) {
            std::fill(dst, dst + g.out_w, T(0));
            continue;
          }
          const T* src = plane + static_cast<std::size_t>(iy) * g.in_w;
          for (int ox = 0; ox < g.out_w; ++ox) {
            int ix = ox * g.stride - g.pad + kx;
            if (g.padding == Padding::Circular) {
              dst[ox] = src[wrap(ix, g.in_w)];
            } else {
              dst[ox] = (ix >= 0 && ix < g.in_w) ? src[ix] : T(0);
            }
          }
        }
      }
    }
  }
}

// Adjoint of im2col: accumulates cols back into x (x must be zeroed).
template <typename T>
void col2im(const T* cols, const Geometry& g, T* x) {
  const std::size_t P = static_cast<std::size_t>(g.out_h) * static_cast<std::size_t>(g.out_w);
  for (int c = 0; c < g.channels; ++c) {
    T* plane = x + static_cast<std::size_t>(c) * g.in_h * g.in_w;
    for (int ky = 0; ky < g.k; ++ky) {
      for (int kx = 0; kx < g.k; ++kx) {
        const T* row = cols + (static_cast<std::size_t>(c * g.k + ky) * g.k + kx) * P;
        for (int oy = 0; oy < g.out_h; ++oy) {
          int iy = oy * g.stride - g.pad + ky;
          const T* src = row + static_cast<std::size_t>(oy) * g.out_w;
          if (g.padding == Padding::Circular) {
            iy = wrap(iy, g.in_h);
          } else if (iy < 0 || iy >= g.in_h) {
            continue;
          }
          T* dst = plane + static_cast<std::size_t>(iy) * g.in_w;
          for (int ox = 0; ox < g.out_w; ++ox) {
            int ix = ox * g.stride - g.pad + kx;
            if (g.padding == Padding::Circular) {
              dst[wrap(ix, g.in_w)] += src[ox];
            } else if (ix >= 0 && ix < g.in_w) {
              dst[ix] += src[ox];
            }
          }
        }
      }
    }
  }
}

}  // namespace

template <typename T>
Param<T>::Param(std::string n, std::vector<int> s) : name(std::move(n)), shape(std::move(s)) {
  std::size_t count = 1;
  for (int d : shape) count *= static_cast<std::size_t>(d);
  value.assign(count, T(0));
  grad.assign(count, T(0));
}

template <typename T>
void Param<T>::zero_grad() {
  std::fill(grad.begin(), grad.end(), T(0));
}

// ---------------------------------------------------------------- Conv2d

template <typename T>
Conv2d<T>::Conv2d(const std::string& name, int in_channels, int out_channels, int kernel, int stride, int pad,
                  Padding padding)
    : in_(in_channels),
      out_(out_channels),
      k_(kernel),
      stride_(stride),
      pad_(pad),
      padding_(padding),
      weight_(name + ".weight", {out_channels, in_channels, kernel, kernel}),
      bias_(name + ".bias", {out_channels}) {}

template <typename T>
Tensor<T> Conv2d<T>::forward(const Tensor<T>& x) {
  if (x.channels() != in_) {
    throw ShapeError(weight_.name + ": expected " + std::to_string(in_) + " input channels, got " + x.shape_string());
  }
  in_h_ = x.height();
  in_w_ = x.width();
  out_h_ = conv_output_size(in_h_, k_, stride_, pad_);
  out_w_ = conv_output_size(in_w_, k_, stride_, pad_);
  if (out_h_ < 1 || out_w_ < 1) throw ShapeError(weight_.name + ": input " + x.shape_string() + " too small");

  const Geometry g{in_, in_h_, in_w_, k_, stride_, pad_, out_h_, out_w_, padding_};
  const int K = in_ * k_ * k_;
  const int P = out_h_ * out_w_;
  cols_.resize(static_cast<std::size_t>(K) * static_cast<std::size_t>(P));
  im2col(x.data(), g, cols_.data());

  Tensor<T> y(out_, out_h_, out_w_);
  MatMap<T> ym(y.data(), out_, P);
  ConstMatMap<T> wm(weight_.value.data(), out_, K);
  ConstMatMap<T> cm(cols_.data(), K, P);
  ym.noalias() = wm * cm;
  for (int o = 0; o < out_; ++o) ym.row(o).array() += bias_.value[static_cast<std::size_t>(o)];
  return y;
}

template <typename T>
Tensor<T> Conv2d<T>::backward(const Tensor<T>& grad_out, bool need_input_grad) {
  if (grad_out.channels() != out_ || grad_out.height() != out_h_ || grad_out.width() != out_w_) {
    throw ShapeError(weight_.name + ": gradient shape mismatch");
  }
  const int K = in_ * k_ * k_;
  const int P = out_h_ * out_w_;
  ConstMatMap<T> gm(grad_out.data(), out_, P);
  ConstMatMap<T> cm(cols_.data(), K, P);
  MatMap<T> dw(weight_.grad.data(), out_, K);
  dw.noalias() += gm * cm.transpose();
  for (int o = 0; o < out_; ++o) bias_.grad[static_cast<std::size_t>(o)] += gm.row(o).sum();

  if (!need_input_grad) return {};
  AlignedVector<T> dcols(static_cast<std::size_t>(K) * static_cast<std::size_t>(P));
  MatMap<T> dc(dcols.data(), K, P);
  ConstMatMap<T> wm(weight_.value.data(), out_, K);
  dc.noalias() = wm.transpose() * gm;
  Tensor<T> dx(in_, in_h_, in_w_);
  const Geometry g{in_, in_h_, in_w_, k_, stride_, pad_, out_h_, out_w_, padding_};
  col2im(dcols.data(), g, dx.data());
  return dx;
}

// ------------------------------------------------------- ConvTranspose2d

template <typename T>
ConvTranspose2d<T>::ConvTranspose2d(const std::string& name, int in_channels, int out_channels, int kernel, int stride,
                                    int pad)
    : in_(in_channels),
      out_(out_channels),
      k_(kernel),
      stride_(stride),
      pad_(pad),
      weight_(name + ".weight", {in_channels, out_channels, kernel, kernel}),
      bias_(name + ".bias", {out_channels}) {}

template <typename T>
Tensor<T> ConvTranspose2d<T>::forward(const Tensor<T>& x) {
  if (x.channels() != in_) {
    throw ShapeError(weight_.name + ": expected " + std::to_string(in_) + " input channels, got " + x.shape_string());
  }
  input_ = x;
  const int H = x.height();
  const int W = x.width();
  const int OH = conv_transpose_output_size(H, k_, stride_, pad_);
  const int OW = conv_transpose_output_size(W, k_, stride_, pad_);
  const int K = out_ * k_ * k_;
  const int P = H * W;

  AlignedVector<T> cols(static_cast<std::size_t>(K) * static_cast<std::size_t>(P));
  MatMap<T> cm(cols.data(), K, P);
  ConstMatMap<T> wm(weight_.value.data(), in_, K);
  ConstMatMap<T> xm(x.data(), in_, P);
  cm.noalias() = wm.transpose() * xm;

  Tensor<T> y(out_, OH, OW);
  const Geometry g{out_, OH, OW, k_, stride_, pad_, H, W, Padding::Zero};
  col2im(cols.data(), g, y.data());
  for (int o = 0; o < out_; ++o) {
    T* plane = y.channel(o);
    const T b = bias_.value[static_cast<std::size_t>(o)];
    for (std::size_t i = 0; i < y.plane(); ++i) plane[i] += b;
  }
  return y;
}

template <typename T>
Tensor<T> ConvTranspose2d<T>::backward(const Tensor<T>& grad_out, bool need_input_grad) {
  const int H = input_.height();
  const int W = input_.width();
  const int OH = grad_out.height();
  const int OW = grad_out.width();
  if (grad_out.channels() != out_ || OH != conv_transpose_output_size(H, k_, stride_, pad_) ||
      OW != conv_transpose_output_size(W, k_, stride_, pad_)) {
    throw ShapeError(weight_.name + ": gradient shape mismatch");
  }
  const int K = out_ * k_ * k_;
  const int P = H * W;
  AlignedVector<T> dcols(static_cast<std::size_t>(K) * static_cast<std::size_t>(P));
  const Geometry g{out_, OH, OW, k_, stride_, pad_, H, W, Padding::Zero};
  im2col(grad_out.data(), g, dcols.data());

  ConstMatMap<T> dc(dcols.data(), K, P);
  ConstMatMap<T> xm(input_.data(), in_, P);
  MatMap<T> dw(weight_.grad.data(), in_, K);
  dw.noalias() += xm * dc.transpose();
  for (int o = 0; o < out_; ++o) {
    const T* plane = grad_out.channel(o);
    T s = 0;
    for (std::size_t i = 0; i < grad_out.plane(); ++i) s += plane[i];
    bias_.grad[static_cast<std::size_t>(o)] += s;
  }

  if (!need_input_grad) return {};
  Tensor<T> dx(in_, H, W);
  MatMap<T> dxm(dx.data(), in_, P);
  ConstMatMap<T> wm(weight_.value.data(), in_, K);
  dxm.noalias() = wm * dc;
  return dx;
}

// ------------------------------------------------------------ BatchNorm2d

template <typename T>
BatchNorm2d<T>::BatchNorm2d(const std::string& name, int channels, T eps)
    : channels_(channels), eps_(eps), gamma_(name + ".gamma", {channels}), beta_(name + ".beta", {channels}) {
  std::fill(gamma_.value.begin(), gamma_.value.end(), T(1));
}

template <typename T>
Tensor<T> BatchNorm2d<T>::forward(const Tensor<T>& x) {
  if (x.channels() != channels_) throw ShapeError(gamma_.name + ": channel mismatch " + x.shape_string());
  const std::size_t n = x.plane();
  if (!frozen_ || mean_.size() != static_cast<std::size_t>(channels_)) {
    mean_.assign(static_cast<std::size_t>(channels_), T(0));
    inv_std_.assign(static_cast<std::size_t>(channels_), T(0));
    for (int c = 0; c < channels_; ++c) {
      const T* src = x.channel(c);
      T mean = 0;
      for (std::size_t i = 0; i < n; ++i) mean += src[i];
      mean /= static_cast<T>(n);
      T var = 0;
      for (std::size_t i = 0; i < n; ++i) var += (src[i] - mean) * (src[i] - mean);
      var /= static_cast<T>(n);
      mean_[static_cast<std::size_t>(c)] = mean;
      inv_std_[static_cast<std::size_t>(c)] = T(1) / std::sqrt(var + eps_);
    }
  }
  xhat_ = Tensor<T>(x.channels(), x.height(), x.width());
  Tensor<T> y(x.channels(), x.height(), x.width());
  for (int c = 0; c < channels_; ++c) {
    const T* src = x.channel(c);
    T* xh = xhat_.channel(c);
    T* dst = y.channel(c);
    const T m = mean_[static_cast<std::size_t>(c)];
    const T is = inv_std_[static_cast<std::size_t>(c)];
    const T g = gamma_.value[static_cast<std::size_t>(c)];
    const T b = beta_.value[static_cast<std::size_t>(c)];
    for (std::size_t i = 0; i < n; ++i) {
      xh[i] = (src[i] - m) * is;
      dst[i] = g * xh[i] + b;
    }
  }
  return y;
}

template <typename T>
Tensor<T> BatchNorm2d<T>::backward(const Tensor<T>& grad_out) {
  if (!grad_out.same_shape(xhat_)) throw ShapeError(gamma_.name + ": gradient shape mismatch");
  const std::size_t n = grad_out.plane();
  Tensor<T> dx(grad_out.channels(), grad_out.height(), grad_out.width());
  for (int c = 0; c < channels_; ++c) {
    const T* dy = grad_out.channel(c);
    const T* xh = xhat_.channel(c);
    T* d = dx.channel(c);
    T sum_dy = 0;
    T sum_dy_xh = 0;
    for (std::size_t i = 0; i < n; ++i) {
      sum_dy += dy[i];
      sum_dy_xh += dy[i] * xh[i];
    }
    const auto ci = static_cast<std::size_t>(c);
    gamma_.grad[ci] += sum_dy_xh;
    beta_.grad[ci] += sum_dy;
    const T g = gamma_.value[ci];
    const T is = inv_std_[ci];
    if (frozen_) {
      for (std::size_t i = 0; i < n; ++i) d[i] = g * is * dy[i];
      continue;
    }
    const T inv_n = T(1) / static_cast<T>(n);
    for (std::size_t i = 0; i < n; ++i) {
      d[i] = g * is * (dy[i] - inv_n * sum_dy - xh[i] * inv_n * sum_dy_xh);
    }
  }
  return dx;
}

// ------------------------------------------------------------ activations

template <typename T>
Tensor<T> LeakyRelu<T>::forward(const Tensor<T>& x) {
  input_ = x;
  Tensor<T> y = x;
  for (T& v : y.values()) v = v > T(0) ? v : slope_ * v;
  return y;
}

template <typename T>
Tensor<T> LeakyRelu<T>::backward(const Tensor<T>& grad_out) const {
  Tensor<T> dx = grad_out;
  auto in = input_.values();
  auto d = dx.values();
  for (std::size_t i = 0; i < d.size(); ++i) d[i] = in[i] > T(0) ? d[i] : slope_ * d[i];
  return dx;
}

template <typename T>
Tensor<T> TanhLayer<T>::forward(const Tensor<T>& x) {
  output_ = x;
  for (T& v : output_.values()) v = std::tanh(v);
  return output_;
}

template <typename T>
Tensor<T> TanhLayer<T>::backward(const Tensor<T>& grad_out) const {
  Tensor<T> dx = grad_out;
  auto out = output_.values();
  auto d = dx.values();
  for (std::size_t i = 0; i < d.size(); ++i) d[i] *= T(1) - out[i] * out[i];
  return dx;
}

template <typename T>
Tensor<T> SigmoidLayer<T>::forward(const Tensor<T>& x) {
  output_ = x;
  for (T& v : output_.values()) v = T(1) / (T(1) + std::exp(-v));
  return output_;
}

template <typename T>
Tensor<T> SigmoidLayer<T>::backward(const Tensor<T>& grad_out) const {
  Tensor<T> dx = grad_out;
  auto out = output_.values();
  auto d = dx.values();
  for (std::size_t i = 0; i < d.size(); ++i) d[i] *= out[i] * (T(1) - out[i]);
  return dx;
}

template <typename T>
Tensor<T> Dropout<T>::forward(const Tensor<T>& x, bool active, std::mt19937_64& rng) {
  active_ = active && rate_ > T(0);
  if (!active_) return x;
  std::bernoulli_distribution keep(1.0 - static_cast<double>(rate_));
  const T scale = T(1) / (T(1) - rate_);
  mask_.resize(x.size());
  Tensor<T> y = x;
  auto v = y.values();
  for (std::size_t i = 0; i < v.size(); ++i) {
    mask_[i] = keep(rng) ? scale : T(0);
    v[i] *= mask_[i];
  }
  return y;
}

template <typename T>
Tensor<T> Dropout<T>::backward(const Tensor<T>& grad_out) const {
  if (!active_) return grad_out;
  Tensor<T> dx = grad_out;
  auto d = dx.values();
  for (std::size_t i = 0; i < d.size(); ++i) d[i] *= mask_[i];
  return dx;
}

// ------------------------------------------------------- BilinearUpsample

template <typename T>
BilinearUpsample<T>::BilinearUpsample(int factor) : factor_(factor) {
  if (factor < 2 || factor % 2 != 0) throw ShapeError("BilinearUpsample: factor must be an even integer >= 2");
  const int k = 2 * factor;
  const double center = factor - 0.5;
  kernel_.resize(static_cast<std::size_t>(k * k));
  for (int y = 0; y < k; ++y) {
    for (int x = 0; x < k; ++x) {
      const double wy = 1.0 - std::abs(y - center) / factor;
      const double wx = 1.0 - std::abs(x - center) / factor;
      kernel_[static_cast<std::size_t>(y * k + x)] = static_cast<T>(wy * wx);
    }
  }
}

template <typename T>
Tensor<T> BilinearUpsample<T>::forward(const Tensor<T>& x) {
  in_h_ = x.height();
  in_w_ = x.width();
  const int f = factor_;
  const int k = 2 * f;
  const int pad = f / 2;
  const int OH = in_h_ * f;
  const int OW = in_w_ * f;
  Tensor<T> y(x.channels(), OH, OW);
  for (int c = 0; c < x.channels(); ++c) {
    const T* src = x.channel(c);
    T* dst = y.channel(c);
    for (int iy = 0; iy < in_h_; ++iy) {
      for (int ix = 0; ix < in_w_; ++ix) {
        const T v = src[iy * in_w_ + ix];
        for (int ky = 0; ky < k; ++ky) {
          const int oy = iy * f - pad + ky;
          if (oy < 0 || oy >= OH) continue;
          for (int kx = 0; kx < k; ++kx) {
            const int ox = ix * f - pad + kx;
            if (ox < 0 || ox >= OW) continue;
            dst[oy * OW + ox] += v * kernel_[static_cast<std::size_t>(ky * k + kx)];
          }
        }
      }
    }
  }
  return y;
}

template <typename T>
Tensor<T> BilinearUpsample<T>::backward(const Tensor<T>& grad_out) const {
  const int f = factor_;
  const int k = 2 * f;
  const int pad = f / 2;
  const int OH = grad_out.height();
  const int OW = grad_out.width();
  Tensor<T> dx(grad_out.channels(), in_h_, in_w_);
  for (int c = 0; c < grad_out.channels(); ++c) {
    const T* g = grad_out.channel(c);
    T* d = dx.channel(c);
    for (int iy = 0; iy < in_h_; ++iy) {
      for (int ix = 0; ix < in_w_; ++ix) {
        T acc = 0;
        for (int ky = 0; ky < k; ++ky) {
          const int oy = iy * f - pad + ky;
          if (oy < 0 || oy >= OH) continue;
          for (int kx = 0; kx < k; ++kx) {
            const int ox = ix * f - pad + kx;
            if (ox < 0 || ox >= OW) continue;
            acc += g[oy * OW + ox] * kernel_[static_cast<std::size_t>(ky * k + kx)];
          }
        }
        d[iy * in_w_ + ix] = acc;
      }
    }
  }
  return dx;
}

template <typename T>
Tensor<T> crop_top_left(const Tensor<T>& x, int h, int w) {
  if (h > x.height() || w > x.width()) throw ShapeError("crop_top_left: crop larger than input");
  if (h == x.height() && w == x.width()) return x;
  Tensor<T> y(x.channels(), h, w);
  for (int c = 0; c < x.channels(); ++c) {
    for (int yy = 0; yy < h; ++yy) {
      std::copy_n(x.channel(c) + static_cast<std::size_t>(yy) * x.width(), w,
                  y.channel(c) + static_cast<std::size_t>(yy) * w);
    }
  }
  return y;
}

template <typename T>
Tensor<T> uncrop_top_left(const Tensor<T>& grad, int full_h, int full_w) {
  if (grad.height() == full_h && grad.width() == full_w) return grad;
  Tensor<T> y(grad.channels(), full_h, full_w);
  for (int c = 0; c < grad.channels(); ++c) {
    for (int yy = 0; yy < grad.height(); ++yy) {
      std::copy_n(grad.channel(c) + static_cast<std::size_t>(yy) * grad.width(), grad.width(),
                  y.channel(c) + static_cast<std::size_t>(yy) * full_w);
    }
  }
  return y;
}

template <typename T>
void add_inplace(Tensor<T>& acc, const Tensor<T>& x) {
  if (!acc.same_shape(x)) throw ShapeError("add_inplace: shape mismatch " + acc.shape_string() + " vs " + x.shape_string());
  auto a = acc.values();
  auto b = x.values();
  for (std::size_t i = 0; i < a.size(); ++i) a[i] += b[i];
}

template <typename T>
void init_normal(Param<T>& p, std::mt19937_64& rng, double mean, double sigma) {
  std::normal_distribution<double> dist(mean, sigma);
  for (T& v : p.value) v = static_cast<T>(dist(rng));
}

#define N2N_INSTANTIATE_LAYERS(T)                                               \
  template struct Param<T>;                                                     \
  template class Conv2d<T>;                                                     \
  template class ConvTranspose2d<T>;                                            \
  template class BatchNorm2d<T>;                                                \
  template class LeakyRelu<T>;                                                  \
  template class TanhLayer<T>;                                                  \
  template class SigmoidLayer<T>;                                               \
  template class Dropout<T>;                                                    \
  template class BilinearUpsample<T>;                                           \
  template Tensor<T> crop_top_left<T>(const Tensor<T>&, int, int);              \
  template Tensor<T> uncrop_top_left<T>(const Tensor<T>&, int, int);            \
  template void add_inplace<T>(Tensor<T>&, const Tensor<T>&);                   \
  template void init_normal<T>(Param<T>&, std::mt19937_64&, double, double);

N2N_INSTANTIATE_LAYERS(float)
N2N_INSTANTIATE_LAYERS(double)

#undef N2N_INSTANTIATE_LAYERS

}  // namespace n2n::nn

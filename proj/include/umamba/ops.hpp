#pragma once

// Differentiable operations over umamba::Tensor. Sequence tensors are laid
// out channels x time, row-major.

#include <Eigen/Dense>

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "umamba/tensor.hpp"

namespace umamba {

namespace detail {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMatrix>;
using ConstMatMap = Eigen::Map<const RowMatrix>;

inline void require(bool condition, const std::string& message) {
  if (!condition) throw ShapeError(message);
}

inline void require_rank(const Tensor& t, std::size_t rank, const char* what) {
  require(t.defined() && t.rank() == rank,
          std::string(what) + ": expected rank " + std::to_string(rank) + " tensor, got " +
              (t.defined() ? umamba::to_string(t.shape()) : std::string("undefined")));
}

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* what) {
  require(a.shape() == b.shape(), std::string(what) + ": shape mismatch " +
                                      umamba::to_string(a.shape()) + " vs " +
                                      umamba::to_string(b.shape()));
}

template <class Fwd, class Deriv>
Tensor unary(const Tensor& x, Fwd fwd, Deriv deriv) {
  const auto xv = x.values();
  std::vector<double> out(xv.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(xv[i]);
  return make_result(x.shape(), std::move(out), {&x}, [x, deriv](Node& self) {
    auto* gx = grad_of(x);
    const auto xv = x.values();
    for (std::size_t i = 0; i < xv.size(); ++i) (*gx)[i] += self.grad[i] * deriv(xv[i]);
  });
}

inline double sigmoid_scalar(double v) {
  if (v >= 0) return 1.0 / (1.0 + std::exp(-v));
  const double e = std::exp(v);
  return e / (1.0 + e);
}

inline double softplus_scalar(double v) {
  if (v > 30.0) return v;
  return std::log1p(std::exp(v));
}

}  // namespace detail

// ---------------------------------------------------------------- elementwise

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "add");
  const auto av = a.values();
  const auto bv = b.values();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
  return detail::make_result(a.shape(), std::move(out), {&a, &b}, [a, b](detail::Node& self) {
    if (auto* g = detail::grad_of(a)) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i];
    }
    if (auto* g = detail::grad_of(b)) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i];
    }
  });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "sub");
  const auto av = a.values();
  const auto bv = b.values();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] - bv[i];
  return detail::make_result(a.shape(), std::move(out), {&a, &b}, [a, b](detail::Node& self) {
    if (auto* g = detail::grad_of(a)) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i];
    }
    if (auto* g = detail::grad_of(b)) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] -= self.grad[i];
    }
  });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "mul");
  const auto av = a.values();
  const auto bv = b.values();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  return detail::make_result(a.shape(), std::move(out), {&a, &b}, [a, b](detail::Node& self) {
    const auto av = a.values();
    const auto bv = b.values();
    if (auto* g = detail::grad_of(a)) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i] * bv[i];
    }
    if (auto* g = detail::grad_of(b)) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i] * av[i];
    }
  });
}

inline Tensor scale(const Tensor& x, double factor) {
  return detail::unary(x, [factor](double v) { return factor * v; },
                       [factor](double) { return factor; });
}

inline Tensor neg(const Tensor& x) { return scale(x, -1.0); }

inline Tensor relu(const Tensor& x) {
  return detail::unary(x, [](double v) { return v > 0 ? v : 0.0; },
                       [](double v) { return v > 0 ? 1.0 : 0.0; });
}

inline Tensor sigmoid(const Tensor& x) {
  return detail::unary(x, detail::sigmoid_scalar, [](double v) {
    const double s = detail::sigmoid_scalar(v);
    return s * (1.0 - s);
  });
}

inline Tensor silu(const Tensor& x) {
  return detail::unary(x, [](double v) { return v * detail::sigmoid_scalar(v); },
                       [](double v) {
                         const double s = detail::sigmoid_scalar(v);
                         return s * (1.0 + v * (1.0 - s));
                       });
}

inline Tensor softplus(const Tensor& x) {
  return detail::unary(x, detail::softplus_scalar, detail::sigmoid_scalar);
}

inline Tensor exp(const Tensor& x) {
  return detail::unary(x, [](double v) { return std::exp(v); },
                       [](double v) { return std::exp(v); });
}

// y = x for x >= 0, slope * x otherwise; slope is a learnable 1-element tensor.
inline Tensor prelu(const Tensor& x, const Tensor& slope) {
  detail::require(slope.defined() && slope.size() == 1, "prelu: slope must hold one value");
  const auto xv = x.values();
  const double a = slope.item();
  std::vector<double> out(xv.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[i] >= 0 ? xv[i] : a * xv[i];
  return detail::make_result(x.shape(), std::move(out), {&x, &slope},
                             [x, slope](detail::Node& self) {
                               const auto xv = x.values();
                               const double a = slope.item();
                               if (auto* g = detail::grad_of(x)) {
                                 for (std::size_t i = 0; i < xv.size(); ++i) {
                                   (*g)[i] += self.grad[i] * (xv[i] >= 0 ? 1.0 : a);
                                 }
                               }
                               if (auto* g = detail::grad_of(slope)) {
                                 double acc = 0.0;
                                 for (std::size_t i = 0; i < xv.size(); ++i) {
                                   if (xv[i] < 0) acc += self.grad[i] * xv[i];
                                 }
                                 (*g)[0] += acc;
                               }
                             });
}

inline Tensor sum(const Tensor& x) {
  const auto xv = x.values();
  double acc = 0.0;
  for (double v : xv) acc += v;
  return detail::make_result({1}, {acc}, {&x}, [x](detail::Node& self) {
    auto* g = detail::grad_of(x);
    for (double& v : *g) v += self.grad[0];
  });
}

inline Tensor mean(const Tensor& x) { return scale(sum(x), 1.0 / static_cast<double>(x.size())); }

// Adds bias[c] to every time step of channel c.
inline Tensor add_channel_bias(const Tensor& x, const Tensor& bias) {
  detail::require_rank(x, 2, "add_channel_bias");
  detail::require(bias.size() == x.dim(0), "add_channel_bias: bias length " +
                                               std::to_string(bias.size()) + " vs channels " +
                                               std::to_string(x.dim(0)));
  const std::size_t channels = x.dim(0);
  const std::size_t frames = x.dim(1);
  const auto xv = x.values();
  const auto bv = bias.values();
  std::vector<double> out(xv.begin(), xv.end());
  for (std::size_t c = 0; c < channels; ++c) {
    for (std::size_t t = 0; t < frames; ++t) out[c * frames + t] += bv[c];
  }
  return detail::make_result(x.shape(), std::move(out), {&x, &bias},
                             [x, bias, channels, frames](detail::Node& self) {
                               if (auto* g = detail::grad_of(x)) {
                                 for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i];
                               }
                               if (auto* g = detail::grad_of(bias)) {
                                 for (std::size_t c = 0; c < channels; ++c) {
                                   double acc = 0.0;
                                   for (std::size_t t = 0; t < frames; ++t) acc += self.grad[c * frames + t];
                                   (*g)[c] += acc;
                                 }
                               }
                             });
}

// ---------------------------------------------------------------- linear algebra

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  detail::require_rank(a, 2, "matmul");
  detail::require_rank(b, 2, "matmul");
  detail::require(a.dim(1) == b.dim(0), "matmul: inner dimension mismatch " +
                                            umamba::to_string(a.shape()) + " * " +
                                            umamba::to_string(b.shape()));
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<double> out(m * n);
  {
    detail::ConstMatMap am(a.values().data(), m, k);
    detail::ConstMatMap bm(b.values().data(), k, n);
    detail::MatMap om(out.data(), m, n);
    om.noalias() = am * bm;
  }
  mac_counter() += m * k * n;
  return detail::make_result({m, n}, std::move(out), {&a, &b}, [a, b, m, k, n](detail::Node& self) {
    detail::ConstMatMap gm(self.grad.data(), m, n);
    if (auto* g = detail::grad_of(a)) {
      detail::ConstMatMap bm(b.values().data(), k, n);
      detail::MatMap ga(g->data(), m, k);
      ga.noalias() += gm * bm.transpose();
    }
    if (auto* g = detail::grad_of(b)) {
      detail::ConstMatMap am(a.values().data(), m, k);
      detail::MatMap gb(g->data(), k, n);
      gb.noalias() += am.transpose() * gm;
    }
  });
}

// ---------------------------------------------------------------- convolution

// Cross-correlation. input C_in x T, kernel C_out x C_in x k, optional bias C_out.
inline Tensor conv1d(const Tensor& input, const Tensor& kernel, const Tensor& bias = {},
                     std::size_t stride = 1, std::size_t padding = 0) {
  detail::require_rank(input, 2, "conv1d input");
  detail::require_rank(kernel, 3, "conv1d kernel");
  detail::require(stride > 0, "conv1d: stride must be positive");
  const std::size_t c_in = input.dim(0), frames = input.dim(1);
  const std::size_t c_out = kernel.dim(0), width = kernel.dim(2);
  detail::require(kernel.dim(1) == c_in, "conv1d: kernel expects " + std::to_string(kernel.dim(1)) +
                                             " input channels, input has " + std::to_string(c_in));
  detail::require(width <= frames + 2 * padding,
                  "conv1d: kernel width " + std::to_string(width) + " exceeds padded length " +
                      std::to_string(frames + 2 * padding));
  detail::require(!bias.defined() || bias.size() == c_out, "conv1d: bias length mismatch");
  const std::size_t out_frames = (frames + 2 * padding - width) / stride + 1;
  const auto xv = input.values();
  const auto wv = kernel.values();
  std::vector<double> out(c_out * out_frames, 0.0);

  // Valid output range for tap j: t*stride + j - padding in [0, frames).
  auto tap_range = [=](std::size_t j) {
    std::size_t lo = 0;
    if (j < padding) lo = (padding - j + stride - 1) / stride;
    std::size_t hi = 0;  // exclusive
    if (frames + padding > j) hi = std::min(out_frames, (frames + padding - j - 1) / stride + 1);
    return std::pair{lo, std::max(lo, hi)};
  };

  for (std::size_t co = 0; co < c_out; ++co) {
    double* o = out.data() + co * out_frames;
    if (bias.defined()) std::fill(o, o + out_frames, bias.values()[co]);
    for (std::size_t ci = 0; ci < c_in; ++ci) {
      const double* x = xv.data() + ci * frames;
      for (std::size_t j = 0; j < width; ++j) {
        const double w = wv[(co * c_in + ci) * width + j];
        const auto [lo, hi] = tap_range(j);
        for (std::size_t t = lo; t < hi; ++t) o[t] += w * x[t * stride + j - padding];
      }
    }
  }
  mac_counter() += c_in * c_out * width * out_frames;
  return detail::make_result(
      {c_out, out_frames}, std::move(out), {&input, &kernel, &bias},
      [=](detail::Node& self) {
        const auto xv = input.values();
        const auto wv = kernel.values();
        auto* gx = detail::grad_of(input);
        auto* gw = detail::grad_of(kernel);
        for (std::size_t co = 0; co < c_out; ++co) {
          const double* g = self.grad.data() + co * out_frames;
          for (std::size_t ci = 0; ci < c_in; ++ci) {
            const double* x = xv.data() + ci * frames;
            for (std::size_t j = 0; j < width; ++j) {
              const auto [lo, hi] = tap_range(j);
              const std::size_t widx = (co * c_in + ci) * width + j;
              if (gx) {
                double* dx = gx->data() + ci * frames;
                const double w = wv[widx];
                for (std::size_t t = lo; t < hi; ++t) dx[t * stride + j - padding] += w * g[t];
              }
              if (gw) {
                double acc = 0.0;
                for (std::size_t t = lo; t < hi; ++t) acc += g[t] * x[t * stride + j - padding];
                (*gw)[widx] += acc;
              }
            }
          }
          if (auto* gb = detail::grad_of(bias)) {
            double acc = 0.0;
            for (std::size_t t = 0; t < out_frames; ++t) acc += g[t];
            (*gb)[co] += acc;
          }
        }
      });
}

// Pointwise (kernel width 1) convolution through the matrix-product path.
// weight C_out x C_in.
inline Tensor pointwise_conv(const Tensor& input, const Tensor& weight, const Tensor& bias = {}) {
  Tensor y = matmul(weight, input);
  return bias.defined() ? add_channel_bias(y, bias) : y;
}

// Per-channel convolution. input C x T, kernel C x k, bias C (optional).
// Output length floor((T + pad_left + pad_right - k) / stride) + 1.
inline Tensor depthwise_conv1d(const Tensor& input, const Tensor& kernel, const Tensor& bias,
                               std::size_t stride, std::size_t pad_left, std::size_t pad_right) {
  detail::require_rank(input, 2, "depthwise_conv1d input");
  detail::require_rank(kernel, 2, "depthwise_conv1d kernel");
  detail::require(stride > 0, "depthwise_conv1d: stride must be positive");
  const std::size_t channels = input.dim(0), frames = input.dim(1), width = kernel.dim(1);
  detail::require(kernel.dim(0) == channels, "depthwise_conv1d: kernel channel mismatch");
  detail::require(!bias.defined() || bias.size() == channels, "depthwise_conv1d: bias length mismatch");
  detail::require(width <= frames + pad_left + pad_right, "depthwise_conv1d: kernel wider than padded input");
  const std::size_t out_frames = (frames + pad_left + pad_right - width) / stride + 1;
  auto tap_range = [=](std::size_t j) {
    std::size_t lo = 0;
    if (j < pad_left) lo = (pad_left - j + stride - 1) / stride;
    std::size_t hi = 0;
    if (frames + pad_left > j) hi = std::min(out_frames, (frames + pad_left - j - 1) / stride + 1);
    return std::pair{lo, std::max(lo, hi)};
  };
  const auto xv = input.values();
  const auto wv = kernel.values();
  std::vector<double> out(channels * out_frames, 0.0);
  for (std::size_t c = 0; c < channels; ++c) {
    double* o = out.data() + c * out_frames;
    if (bias.defined()) std::fill(o, o + out_frames, bias.values()[c]);
    const double* x = xv.data() + c * frames;
    for (std::size_t j = 0; j < width; ++j) {
      const double w = wv[c * width + j];
      const auto [lo, hi] = tap_range(j);
      for (std::size_t t = lo; t < hi; ++t) o[t] += w * x[t * stride + j - pad_left];
    }
  }
  mac_counter() += channels * width * out_frames;
  return detail::make_result(
      {channels, out_frames}, std::move(out), {&input, &kernel, &bias}, [=](detail::Node& self) {
        const auto xv = input.values();
        const auto wv = kernel.values();
        auto* gx = detail::grad_of(input);
        auto* gw = detail::grad_of(kernel);
        auto* gb = detail::grad_of(bias);
        for (std::size_t c = 0; c < channels; ++c) {
          const double* g = self.grad.data() + c * out_frames;
          const double* x = xv.data() + c * frames;
          for (std::size_t j = 0; j < width; ++j) {
            const auto [lo, hi] = tap_range(j);
            if (gx) {
              double* dx = gx->data() + c * frames;
              const double w = wv[c * width + j];
              for (std::size_t t = lo; t < hi; ++t) dx[t * stride + j - pad_left] += w * g[t];
            }
            if (gw) {
              double acc = 0.0;
              for (std::size_t t = lo; t < hi; ++t) acc += g[t] * x[t * stride + j - pad_left];
              (*gw)[c * width + j] += acc;
            }
          }
          if (gb) {
            double acc = 0.0;
            for (std::size_t t = 0; t < out_frames; ++t) acc += g[t];
            (*gb)[c] += acc;
          }
        }
      });
}

// Overlap-add transposed convolution, the adjoint of conv1d (no padding).
// input C_in x T, kernel C_in x C_out x k; output C_out x ((T-1)*stride + k).
inline Tensor transposed_conv1d(const Tensor& input, const Tensor& kernel, const Tensor& bias = {},
                                std::size_t stride = 1) {
  detail::require_rank(input, 2, "transposed_conv1d input");
  detail::require_rank(kernel, 3, "transposed_conv1d kernel");
  detail::require(stride > 0, "transposed_conv1d: stride must be positive");
  const std::size_t c_in = input.dim(0), frames = input.dim(1);
  detail::require(kernel.dim(0) == c_in, "transposed_conv1d: kernel layout must be C_in x C_out x k; "
                                         "kernel has " + std::to_string(kernel.dim(0)) +
                                             " input channels, input has " + std::to_string(c_in));
  const std::size_t c_out = kernel.dim(1), width = kernel.dim(2);
  detail::require(width >= stride, "transposed_conv1d: kernel width must be at least the stride");
  detail::require(!bias.defined() || bias.size() == c_out, "transposed_conv1d: bias length mismatch");
  const std::size_t out_frames = (frames - 1) * stride + width;
  const auto xv = input.values();
  const auto wv = kernel.values();
  std::vector<double> out(c_out * out_frames, 0.0);
  for (std::size_t co = 0; co < c_out; ++co) {
    double* o = out.data() + co * out_frames;
    if (bias.defined()) std::fill(o, o + out_frames, bias.values()[co]);
    for (std::size_t ci = 0; ci < c_in; ++ci) {
      const double* x = xv.data() + ci * frames;
      for (std::size_t j = 0; j < width; ++j) {
        const double w = wv[(ci * c_out + co) * width + j];
        for (std::size_t t = 0; t < frames; ++t) o[t * stride + j] += w * x[t];
      }
    }
  }
  mac_counter() += c_in * c_out * width * frames;
  return detail::make_result(
      {c_out, out_frames}, std::move(out), {&input, &kernel, &bias}, [=](detail::Node& self) {
        const auto xv = input.values();
        const auto wv = kernel.values();
        auto* gx = detail::grad_of(input);
        auto* gw = detail::grad_of(kernel);
        for (std::size_t co = 0; co < c_out; ++co) {
          const double* g = self.grad.data() + co * out_frames;
          for (std::size_t ci = 0; ci < c_in; ++ci) {
            const double* x = xv.data() + ci * frames;
            for (std::size_t j = 0; j < width; ++j) {
              const std::size_t widx = (ci * c_out + co) * width + j;
              if (gx) {
                double* dx = gx->data() + ci * frames;
                const double w = wv[widx];
                for (std::size_t t = 0; t < frames; ++t) dx[t] += w * g[t * stride + j];
              }
              if (gw) {
                double acc = 0.0;
                for (std::size_t t = 0; t < frames; ++t) acc += g[t * stride + j] * x[t];
                (*gw)[widx] += acc;
              }
            }
          }
          if (auto* gb = detail::grad_of(bias)) {
            double acc = 0.0;
            for (std::size_t t = 0; t < out_frames; ++t) acc += g[t];
            (*gb)[co] += acc;
          }
        }
      });
}

// Per-channel transposed convolution. input C x T, kernel C x k.
inline Tensor depthwise_transposed_conv1d(const Tensor& input, const Tensor& kernel,
                                          const Tensor& bias, std::size_t stride) {
  detail::require_rank(input, 2, "depthwise_transposed_conv1d input");
  detail::require_rank(kernel, 2, "depthwise_transposed_conv1d kernel");
  detail::require(stride > 0, "depthwise_transposed_conv1d: stride must be positive");
  const std::size_t channels = input.dim(0), frames = input.dim(1), width = kernel.dim(1);
  detail::require(kernel.dim(0) == channels, "depthwise_transposed_conv1d: kernel channel mismatch");
  detail::require(width >= stride, "depthwise_transposed_conv1d: kernel width must be at least the stride");
  detail::require(!bias.defined() || bias.size() == channels, "depthwise_transposed_conv1d: bias length mismatch");
  const std::size_t out_frames = (frames - 1) * stride + width;
  const auto xv = input.values();
  const auto wv = kernel.values();
  std::vector<double> out(channels * out_frames, 0.0);
  for (std::size_t c = 0; c < channels; ++c) {
    double* o = out.data() + c * out_frames;
    if (bias.defined()) std::fill(o, o + out_frames, bias.values()[c]);
    const double* x = xv.data() + c * frames;
    for (std::size_t j = 0; j < width; ++j) {
      const double w = wv[c * width + j];
      for (std::size_t t = 0; t < frames; ++t) o[t * stride + j] += w * x[t];
    }
  }
  mac_counter() += channels * width * frames;
  return detail::make_result(
      {channels, out_frames}, std::move(out), {&input, &kernel, &bias}, [=](detail::Node& self) {
        const auto xv = input.values();
        const auto wv = kernel.values();
        auto* gx = detail::grad_of(input);
        auto* gw = detail::grad_of(kernel);
        auto* gb = detail::grad_of(bias);
        for (std::size_t c = 0; c < channels; ++c) {
          const double* g = self.grad.data() + c * out_frames;
          const double* x = xv.data() + c * frames;
          for (std::size_t j = 0; j < width; ++j) {
            if (gx) {
              double* dx = gx->data() + c * frames;
              const double w = wv[c * width + j];
              for (std::size_t t = 0; t < frames; ++t) dx[t] += w * g[t * stride + j];
            }
            if (gw) {
              double acc = 0.0;
              for (std::size_t t = 0; t < frames; ++t) acc += g[t * stride + j] * x[t];
              (*gw)[c * width + j] += acc;
            }
          }
          if (gb) {
            double acc = 0.0;
            for (std::size_t t = 0; t < out_frames; ++t) acc += g[t];
            (*gb)[c] += acc;
          }
        }
      });
}

// ---------------------------------------------------------------- normalization

// Normalizes every time frame over the channel axis, then applies per-channel
// gain and bias.
inline Tensor layer_norm_channels(const Tensor& x, const Tensor& gain, const Tensor& bias,
                                  double eps = 1e-8) {
  detail::require_rank(x, 2, "layer_norm_channels");
  const std::size_t channels = x.dim(0), frames = x.dim(1);
  detail::require(channels > 0, "layer_norm_channels: zero channels");
  detail::require(eps > 0, "layer_norm_channels: eps must be positive");
  detail::require(gain.size() == channels && bias.size() == channels,
                  "layer_norm_channels: gain/bias length must equal channel count");
  const auto xv = x.values();
  const auto gv = gain.values();
  const auto bv = bias.values();
  std::vector<double> normalized(xv.size());
  std::vector<double> inv_std(frames);
  std::vector<double> out(xv.size());
  std::vector<double> mu(frames, 0.0), var(frames, 0.0);
  for (std::size_t c = 0; c < channels; ++c) {
    for (std::size_t t = 0; t < frames; ++t) mu[t] += xv[c * frames + t];
  }
  for (double& m : mu) m /= static_cast<double>(channels);
  for (std::size_t c = 0; c < channels; ++c) {
    for (std::size_t t = 0; t < frames; ++t) {
      const double d = xv[c * frames + t] - mu[t];
      var[t] += d * d;
    }
  }
  for (std::size_t t = 0; t < frames; ++t) {
    inv_std[t] = 1.0 / std::sqrt(var[t] / static_cast<double>(channels) + eps);
  }
  for (std::size_t c = 0; c < channels; ++c) {
    for (std::size_t t = 0; t < frames; ++t) {
      const std::size_t i = c * frames + t;
      normalized[i] = (xv[i] - mu[t]) * inv_std[t];
      out[i] = normalized[i] * gv[c] + bv[c];
    }
  }
  return detail::make_result(
      x.shape(), std::move(out), {&x, &gain, &bias},
      [x, gain, bias, channels, frames, normalized = std::move(normalized),
       inv_std = std::move(inv_std)](detail::Node& self) {
        const auto gv = gain.values();
        if (auto* gg = detail::grad_of(gain)) {
          for (std::size_t c = 0; c < channels; ++c) {
            double acc = 0.0;
            for (std::size_t t = 0; t < frames; ++t) acc += self.grad[c * frames + t] * normalized[c * frames + t];
            (*gg)[c] += acc;
          }
        }
        if (auto* gb = detail::grad_of(bias)) {
          for (std::size_t c = 0; c < channels; ++c) {
            double acc = 0.0;
            for (std::size_t t = 0; t < frames; ++t) acc += self.grad[c * frames + t];
            (*gb)[c] += acc;
          }
        }
        if (auto* gx = detail::grad_of(x)) {
          // dx = inv_std * (dn - mean(dn) - n * mean(dn * n)), dn = g * gain.
          const double inv_c = 1.0 / static_cast<double>(channels);
          std::vector<double> mean_dn(frames, 0.0), mean_dn_n(frames, 0.0);
          for (std::size_t c = 0; c < channels; ++c) {
            for (std::size_t t = 0; t < frames; ++t) {
              const std::size_t i = c * frames + t;
              const double dn = self.grad[i] * gv[c];
              mean_dn[t] += dn;
              mean_dn_n[t] += dn * normalized[i];
            }
          }
          for (std::size_t c = 0; c < channels; ++c) {
            for (std::size_t t = 0; t < frames; ++t) {
              const std::size_t i = c * frames + t;
              const double dn = self.grad[i] * gv[c];
              (*gx)[i] += inv_std[t] * (dn - mean_dn[t] * inv_c - normalized[i] * mean_dn_n[t] * inv_c);
            }
          }
        }
      });
}

// ---------------------------------------------------------------- reshaping

inline Tensor slice_rows(const Tensor& x, std::size_t begin, std::size_t end) {
  detail::require_rank(x, 2, "slice_rows");
  detail::require(begin <= end && end <= x.dim(0), "slice_rows: range out of bounds");
  const std::size_t cols = x.dim(1);
  const auto xv = x.values();
  std::vector<double> out(xv.begin() + static_cast<std::ptrdiff_t>(begin * cols),
                          xv.begin() + static_cast<std::ptrdiff_t>(end * cols));
  return detail::make_result({end - begin, cols}, std::move(out), {&x},
                             [x, begin, cols](detail::Node& self) {
                               auto* g = detail::grad_of(x);
                               for (std::size_t i = 0; i < self.grad.size(); ++i) {
                                 (*g)[begin * cols + i] += self.grad[i];
                               }
                             });
}

// Columns [offset, offset + length) of x; columns past the end read as zero.
inline Tensor crop_time(const Tensor& x, std::size_t offset, std::size_t length) {
  detail::require_rank(x, 2, "crop_time");
  const std::size_t rows = x.dim(0), cols = x.dim(1);
  const auto xv = x.values();
  std::vector<double> out(rows * length, 0.0);
  const std::size_t avail = offset < cols ? std::min(length, cols - offset) : 0;
  for (std::size_t r = 0; r < rows; ++r) {
    std::copy_n(xv.data() + r * cols + offset, avail, out.data() + r * length);
  }
  return detail::make_result({rows, length}, std::move(out), {&x},
                             [x, rows, cols, offset, length, avail](detail::Node& self) {
                               auto* g = detail::grad_of(x);
                               for (std::size_t r = 0; r < rows; ++r) {
                                 for (std::size_t t = 0; t < avail; ++t) {
                                   (*g)[r * cols + offset + t] += self.grad[r * length + t];
                                 }
                               }
                             });
}

// Nearest-neighbour resampling along time: out[j] = x[floor(j * T / target)].
inline Tensor upsample_nearest(const Tensor& x, std::size_t target) {
  detail::require_rank(x, 2, "upsample_nearest");
  const std::size_t rows = x.dim(0), cols = x.dim(1);
  detail::require(cols > 0 && target > 0, "upsample_nearest: empty input or target");
  std::vector<std::size_t> src(target);
  for (std::size_t j = 0; j < target; ++j) src[j] = j * cols / target;
  const auto xv = x.values();
  std::vector<double> out(rows * target);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t j = 0; j < target; ++j) out[r * target + j] = xv[r * cols + src[j]];
  }
  return detail::make_result({rows, target}, std::move(out), {&x},
                             [x, rows, cols, target, src = std::move(src)](detail::Node& self) {
                               auto* g = detail::grad_of(x);
                               for (std::size_t r = 0; r < rows; ++r) {
                                 for (std::size_t j = 0; j < target; ++j) {
                                   (*g)[r * cols + src[j]] += self.grad[r * target + j];
                                 }
                               }
                             });
}

// Linear interpolation with aligned endpoints: sample j sits at
// j * (T - 1) / (target - 1) on the input grid.
inline Tensor upsample_linear(const Tensor& x, std::size_t target) {
  detail::require_rank(x, 2, "upsample_linear");
  const std::size_t rows = x.dim(0), cols = x.dim(1);
  detail::require(cols > 0 && target > 0, "upsample_linear: empty input or target");
  std::vector<std::size_t> left(target);
  std::vector<double> frac(target);
  for (std::size_t j = 0; j < target; ++j) {
    const double pos = target == 1 ? 0.0
                                   : static_cast<double>(j) * static_cast<double>(cols - 1) /
                                         static_cast<double>(target - 1);
    std::size_t i = static_cast<std::size_t>(std::floor(pos));
    if (i >= cols - 1) i = cols > 1 ? cols - 2 : 0;
    left[j] = i;
    frac[j] = cols > 1 ? pos - static_cast<double>(i) : 0.0;
  }
  const auto xv = x.values();
  std::vector<double> out(rows * target);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = xv.data() + r * cols;
    for (std::size_t j = 0; j < target; ++j) {
      const double a = xr[left[j]];
      const double b = cols > 1 ? xr[left[j] + 1] : a;
      out[r * target + j] = (1.0 - frac[j]) * a + frac[j] * b;
    }
  }
  return detail::make_result(
      {rows, target}, std::move(out), {&x},
      [x, rows, cols, target, left = std::move(left), frac = std::move(frac)](detail::Node& self) {
        auto* g = detail::grad_of(x);
        for (std::size_t r = 0; r < rows; ++r) {
          for (std::size_t j = 0; j < target; ++j) {
            const double gj = self.grad[r * target + j];
            (*g)[r * cols + left[j]] += (1.0 - frac[j]) * gj;
            if (cols > 1) (*g)[r * cols + left[j] + 1] += frac[j] * gj;
          }
        }
      });
}

}  // namespace umamba

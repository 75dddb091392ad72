#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <optional>
#include <string>
#include <tuple>
#include <utility>
#include <vector>

#include "fd2/tensor.hpp"

namespace fd2 {

/// Geometry of a 2-D (cross-correlation) convolution.
///
/// For conv2d the weight layout is (out_channels, in_channels/groups, kh, kw).
/// For conv2d_transpose the spec describes the transposed op itself
/// (in_channels = channels of x) and the weight layout is
/// (in_channels, out_channels/groups, kh, kw).
struct ConvSpec {
  std::size_t in_channels = 1;
  std::size_t out_channels = 1;
  std::size_t kernel_h = 1;
  std::size_t kernel_w = 1;
  std::size_t stride = 1;
  std::size_t padding = 0;
  std::size_t dilation = 1;
  std::size_t groups = 1;
  bool has_bias = false;

  static ConvSpec square(std::size_t in, std::size_t out, std::size_t k, std::size_t stride = 1,
                         std::size_t padding = 0, std::size_t dilation = 1, std::size_t groups = 1,
                         bool bias = false) {
    return ConvSpec{in, out, k, k, stride, padding, dilation, groups, bias};
  }

  static ConvSpec depthwise(std::size_t channels, std::size_t k, std::size_t dilation, bool bias) {
    return square(channels, channels, k, 1, dilation * (k - 1) / 2, dilation, channels, bias);
  }

  void validate() const {
    if (in_channels == 0 || out_channels == 0 || kernel_h == 0 || kernel_w == 0 || groups == 0) {
      throw ShapeError("ConvSpec: channels, kernel extents and groups must be positive");
    }
    if (stride == 0) throw ShapeError("ConvSpec: stride must be >= 1");
    if (dilation == 0) throw ShapeError("ConvSpec: dilation must be >= 1");
    if (in_channels % groups != 0) {
      throw ShapeError("ConvSpec: in_channels " + std::to_string(in_channels) +
                       " not divisible by groups " + std::to_string(groups));
    }
    if (out_channels % groups != 0) {
      throw ShapeError("ConvSpec: out_channels " + std::to_string(out_channels) +
                       " not divisible by groups " + std::to_string(groups));
    }
  }

  std::size_t effective_h() const { return dilation * (kernel_h - 1) + 1; }
  std::size_t effective_w() const { return dilation * (kernel_w - 1) + 1; }

  std::size_t parameter_count() const {
    return out_channels * (in_channels / groups) * kernel_h * kernel_w + (has_bias ? out_channels : 0);
  }

  Shape weight_shape() const { return {out_channels, in_channels / groups, kernel_h, kernel_w}; }
  Shape transposed_weight_shape() const { return {in_channels, out_channels / groups, kernel_h, kernel_w}; }
  Shape bias_shape() const { return {1, out_channels, 1, 1}; }

  /// Output shape of conv2d on `in`; throws naming the axis that collapses.
  Shape output_shape(const Shape& in) const {
    return {in.n, out_channels, out_extent(in.h, effective_h(), "height"),
            out_extent(in.w, effective_w(), "width")};
  }

  Shape transposed_output_shape(const Shape& in) const {
    const auto ext = [&](std::size_t x, std::size_t eff, const char* axis) {
      const std::size_t full = stride * (x - 1) + eff;
      if (x == 0 || full <= 2 * padding) {
        throw ShapeError(std::string("conv2d_transpose: ") + axis + " collapses to zero");
      }
      return full - 2 * padding;
    };
    return {in.n, out_channels, ext(in.h, effective_h(), "height"), ext(in.w, effective_w(), "width")};
  }

  /// The forward convolution whose input-gradient this transposed conv computes.
  ConvSpec forward_of_transposed() const {
    ConvSpec f = *this;
    std::swap(f.in_channels, f.out_channels);
    return f;
  }

 private:
  std::size_t out_extent(std::size_t in, std::size_t eff, const char* axis) const {
    const std::size_t padded = in + 2 * padding;
    if (padded < eff) {
      throw ShapeError(std::string("conv2d: ") + axis + " " + std::to_string(in) + " with padding " +
                       std::to_string(padding) + " is smaller than effective kernel " +
                       std::to_string(eff));
    }
    return (padded - eff) / stride + 1;
  }
};

namespace detail {

/// Output indices o in [first, last) for which o*stride + offset lands inside [0, in_extent).
inline std::pair<std::size_t, std::size_t> tap_range(std::ptrdiff_t offset, std::size_t stride,
                                                     std::size_t in_extent, std::size_t out_extent) {
  const auto s = static_cast<std::ptrdiff_t>(stride);
  std::ptrdiff_t first = 0;
  if (offset < 0) first = (-offset + s - 1) / s;
  const std::ptrdiff_t top = static_cast<std::ptrdiff_t>(in_extent) - 1 - offset;
  if (top < 0) return {0, 0};
  std::ptrdiff_t last = top / s + 1;
  last = std::min<std::ptrdiff_t>(last, static_cast<std::ptrdiff_t>(out_extent));
  if (first >= last) return {0, 0};
  return {static_cast<std::size_t>(first), static_cast<std::size_t>(last)};
}

enum class ConvPass { forward, input_grad, weight_grad };

/// One loop nest for all three convolution passes. `x` has the conv input
/// geometry, `y` the conv output geometry, `w` the forward weight layout.
template <Scalar T, ConvPass Pass>
void conv_nest(const ConvSpec& spec, const Shape& xs, const Shape& ys, T* x, T* y, T* w) {
  const std::size_t cin_g = spec.in_channels / spec.groups;
  const std::size_t cout_g = spec.out_channels / spec.groups;
  const std::size_t kh_n = spec.kernel_h;
  const std::size_t kw_n = spec.kernel_w;
  const std::size_t s = spec.stride;
  for (std::size_t n = 0; n < xs.n; ++n) {
    for (std::size_t g = 0; g < spec.groups; ++g) {
      for (std::size_t ocg = 0; ocg < cout_g; ++ocg) {
        const std::size_t oc = g * cout_g + ocg;
        T* yplane = y + (n * ys.c + oc) * ys.plane();
        for (std::size_t icg = 0; icg < cin_g; ++icg) {
          const std::size_t ic = g * cin_g + icg;
          T* xplane = x + (n * xs.c + ic) * xs.plane();
          T* wk = w + (oc * cin_g + icg) * kh_n * kw_n;
          for (std::size_t kh = 0; kh < kh_n; ++kh) {
            const auto off_h = static_cast<std::ptrdiff_t>(kh * spec.dilation) -
                               static_cast<std::ptrdiff_t>(spec.padding);
            const auto [oh0, oh1] = tap_range(off_h, s, xs.h, ys.h);
            for (std::size_t kw = 0; kw < kw_n; ++kw) {
              const auto off_w = static_cast<std::ptrdiff_t>(kw * spec.dilation) -
                                 static_cast<std::ptrdiff_t>(spec.padding);
              const auto [ow0, ow1] = tap_range(off_w, s, xs.w, ys.w);
              if (ow0 >= ow1) continue;
              T& wv = wk[kh * kw_n + kw];
              T acc = 0;
              for (std::size_t oh = oh0; oh < oh1; ++oh) {
                const auto ih = static_cast<std::size_t>(static_cast<std::ptrdiff_t>(oh * s) + off_h);
                T* yp = yplane + oh * ys.w + ow0;
                T* xp = xplane + ih * xs.w + (static_cast<std::ptrdiff_t>(ow0 * s) + off_w);
                const std::size_t count = ow1 - ow0;
                if constexpr (Pass == ConvPass::forward) {
                  const T wval = wv;
                  for (std::size_t i = 0; i < count; ++i) yp[i] += wval * xp[i * s];
                } else if constexpr (Pass == ConvPass::input_grad) {
                  const T wval = wv;
                  for (std::size_t i = 0; i < count; ++i) xp[i * s] += wval * yp[i];
                } else {
                  for (std::size_t i = 0; i < count; ++i) acc += yp[i] * xp[i * s];
                }
              }
              if constexpr (Pass == ConvPass::weight_grad) wv += acc;
            }
          }
        }
      }
    }
  }
}

template <Scalar T>
void check_conv_operands(const char* op, const Shape& xs, const ConvSpec& spec, const Shape& ws,
                         const Shape& expected_w, std::size_t x_channels_expected,
                         const Tensor<T>* bias, std::size_t bias_channels) {
  spec.validate();
  if (xs.c != x_channels_expected) {
    throw ShapeError(std::string(op) + ": input channels " + std::to_string(xs.c) + " != spec channels " +
                     std::to_string(x_channels_expected));
  }
  if (ws != expected_w) {
    throw ShapeError(std::string(op) + ": weight shape " + ws.str() + " != expected " + expected_w.str());
  }
  if (bias != nullptr) {
    if (bias->shape() != Shape{1, bias_channels, 1, 1}) {
      throw ShapeError(std::string(op) + ": bias shape " + bias->shape().str() + " != expected " +
                       Shape{1, bias_channels, 1, 1}.str());
    }
  }
}

template <Scalar T>
void add_bias(Tensor<T>& y, const Tensor<T>& bias) {
  const Shape& s = y.shape();
  for (std::size_t n = 0; n < s.n; ++n) {
    for (std::size_t c = 0; c < s.c; ++c) {
      T* p = y.plane(n, c);
      const T b = bias[c];
      for (std::size_t i = 0; i < s.plane(); ++i) p[i] += b;
    }
  }
}

}  // namespace detail

/// Cross-correlation with stride, padding, dilation and groups.
template <Scalar T>
Tensor<T> conv2d(const Tensor<T>& x, const ConvSpec& spec, const Tensor<T>& weight,
                 const Tensor<T>* bias = nullptr) {
  detail::check_conv_operands("conv2d", x.shape(), spec, weight.shape(), spec.weight_shape(),
                              spec.in_channels, bias, spec.out_channels);
  require_finite(x, "conv2d");
  Tensor<T> y(spec.output_shape(x.shape()));
  detail::conv_nest<T, detail::ConvPass::forward>(spec, x.shape(), y.shape(), const_cast<T*>(x.data().data()),
                                                  y.data().data(), const_cast<T*>(weight.data().data()));
  if (bias != nullptr) detail::add_bias(y, *bias);
  return y;
}

/// Input gradient of conv2d: scatters `dy` back onto a tensor of shape `x_shape`.
template <Scalar T>
Tensor<T> conv2d_input_grad(const Tensor<T>& dy, const ConvSpec& spec, const Tensor<T>& weight,
                            const Shape& x_shape) {
  Tensor<T> dx(x_shape);
  detail::conv_nest<T, detail::ConvPass::input_grad>(spec, x_shape, dy.shape(), dx.data().data(),
                                                     const_cast<T*>(dy.data().data()),
                                                     const_cast<T*>(weight.data().data()));
  return dx;
}

template <Scalar T>
Tensor<T> conv2d_weight_grad(const Tensor<T>& dy, const ConvSpec& spec, const Tensor<T>& x) {
  Tensor<T> dw(spec.weight_shape());
  detail::conv_nest<T, detail::ConvPass::weight_grad>(spec, x.shape(), dy.shape(), const_cast<T*>(x.data().data()),
                                                      const_cast<T*>(dy.data().data()), dw.data().data());
  return dw;
}

/// Per-channel sum over batch and space; the gradient of a channel bias.
template <Scalar T>
Tensor<T> channel_sums(const Tensor<T>& dy) {
  const Shape& s = dy.shape();
  Tensor<T> db(Shape{1, s.c, 1, 1});
  for (std::size_t n = 0; n < s.n; ++n) {
    for (std::size_t c = 0; c < s.c; ++c) {
      const T* p = dy.plane(n, c);
      T acc = 0;
      for (std::size_t i = 0; i < s.plane(); ++i) acc += p[i];
      db[c] += acc;
    }
  }
  return db;
}

/// Transposed convolution; the adjoint of conv2d with the swapped spec.
template <Scalar T>
Tensor<T> conv2d_transpose(const Tensor<T>& x, const ConvSpec& spec, const Tensor<T>& weight,
                           const Tensor<T>* bias = nullptr) {
  detail::check_conv_operands("conv2d_transpose", x.shape(), spec, weight.shape(),
                              spec.transposed_weight_shape(), spec.in_channels, bias, spec.out_channels);
  require_finite(x, "conv2d_transpose");
  const Shape out = spec.transposed_output_shape(x.shape());
  const ConvSpec fwd = spec.forward_of_transposed();
  // The forward conv must map `out` back onto exactly x's extents.
  const Shape back = fwd.output_shape(out);
  if (back.h != x.shape().h || back.w != x.shape().w) {
    throw ShapeError("conv2d_transpose: geometry is not invertible for input " + x.shape().str());
  }
  Tensor<T> y = conv2d_input_grad(x, fwd, weight, out);
  if (bias != nullptr) detail::add_bias(y, *bias);
  return y;
}

enum class PointwiseKind { add, mul, relu, sigmoid };

namespace detail {

enum class Broadcast { none, spatial, channel };

struct BroadcastPlan {
  Broadcast kind = Broadcast::none;
  bool batch_shared = false;  // b has batch extent 1 while a has more

  /// Index into b for flat index i of a.
  std::size_t map(std::size_t i, const Shape& a) const {
    if (kind == Broadcast::none) return batch_shared ? i % (a.c * a.plane()) : i;
    const std::size_t n = i / (a.c * a.plane());
    const std::size_t rem = i % (a.c * a.plane());
    const std::size_t nb = batch_shared ? 0 : n;
    if (kind == Broadcast::spatial) return nb * a.plane() + rem % a.plane();
    return nb * a.c + rem / a.plane();
  }
};

inline BroadcastPlan plan_broadcast(const Shape& a, const Shape& b, const char* op) {
  BroadcastPlan plan;
  if (b.n != a.n) {
    if (b.n != 1) {
      throw ShapeError(std::string(op) + ": batch extent " + std::to_string(b.n) + " cannot broadcast to " +
                       std::to_string(a.n));
    }
    plan.batch_shared = true;
  }
  if (b.c == a.c && b.h == a.h && b.w == a.w) {
    plan.kind = Broadcast::none;
  } else if (b.c == 1 && b.h == a.h && b.w == a.w) {
    plan.kind = Broadcast::spatial;
  } else if (b.c == a.c && b.h == 1 && b.w == 1) {
    plan.kind = Broadcast::channel;
  } else {
    throw ShapeError(std::string(op) + ": shape " + b.str() + " is not broadcastable to " + a.str() +
                     " (only (N,1,H,W) and (N,C,1,1) operands broadcast)");
  }
  return plan;
}

template <Scalar T>
T sigmoid_scalar(T v) {
  T s;
  if (v >= 0) {
    s = T{1} / (T{1} + std::exp(-v));
  } else {
    const T e = std::exp(v);
    s = e / (T{1} + e);
  }
  // keep the open interval (0,1) in finite precision
  constexpr T lo = std::numeric_limits<T>::min();
  constexpr T hi = T{1} - std::numeric_limits<T>::epsilon() / 2;
  return std::clamp(s, lo, hi);
}

}  // namespace detail

/// Binary element-wise op with restricted broadcasting of `b`.
template <Scalar T>
Tensor<T> pointwise(const Tensor<T>& a, const Tensor<T>& b, PointwiseKind kind) {
  if (kind != PointwiseKind::add && kind != PointwiseKind::mul) {
    throw ValueError("pointwise: relu/sigmoid take a single operand");
  }
  const auto plan = detail::plan_broadcast(a.shape(), b.shape(), "pointwise");
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) {
    const T bv = b[plan.map(i, a.shape())];
    out[i] = kind == PointwiseKind::add ? a[i] + bv : a[i] * bv;
  }
  return out;
}

template <Scalar T>
Tensor<T> pointwise(const Tensor<T>& a, PointwiseKind kind) {
  Tensor<T> out(a.shape());
  switch (kind) {
    case PointwiseKind::relu:
      for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] > 0 ? a[i] : T{0};
      break;
    case PointwiseKind::sigmoid:
      for (std::size_t i = 0; i < a.size(); ++i) out[i] = detail::sigmoid_scalar(a[i]);
      break;
    default:
      throw ValueError("pointwise: add/mul need two operands");
  }
  return out;
}

enum class PoolMode { avg, max };

/// Reduction across channels; output (N,1,H,W).
template <Scalar T>
Tensor<T> channel_pool(const Tensor<T>& x, PoolMode mode) {
  const Shape& s = x.shape();
  if (s.c == 0) throw ShapeError("channel_pool: zero channels");
  Tensor<T> out(Shape{s.n, 1, s.h, s.w});
  for (std::size_t n = 0; n < s.n; ++n) {
    T* o = out.plane(n, 0);
    const T* first = x.plane(n, 0);
    std::copy(first, first + s.plane(), o);
    for (std::size_t c = 1; c < s.c; ++c) {
      const T* p = x.plane(n, c);
      if (mode == PoolMode::avg) {
        for (std::size_t i = 0; i < s.plane(); ++i) o[i] += p[i];
      } else {
        for (std::size_t i = 0; i < s.plane(); ++i) o[i] = std::max(o[i], p[i]);
      }
    }
    if (mode == PoolMode::avg) {
      const T inv = T{1} / static_cast<T>(s.c);
      for (std::size_t i = 0; i < s.plane(); ++i) o[i] *= inv;
    }
  }
  return out;
}

/// Spatial mean per channel; output (N,C,1,1).
template <Scalar T>
Tensor<T> global_avg_pool(const Tensor<T>& x) {
  const Shape& s = x.shape();
  if (s.plane() == 0) throw ShapeError("global_avg_pool: empty spatial extent");
  Tensor<T> out(Shape{s.n, s.c, 1, 1});
  for (std::size_t n = 0; n < s.n; ++n) {
    for (std::size_t c = 0; c < s.c; ++c) {
      const T* p = x.plane(n, c);
      T acc = 0;
      for (std::size_t i = 0; i < s.plane(); ++i) acc += p[i];
      out(n, c, 0, 0) = acc / static_cast<T>(s.plane());
    }
  }
  return out;
}

/// Channel count of the first half of an alpha split (round half up).
inline std::size_t split_point(std::size_t channels, double alpha) {
  if (!(alpha > 0.0 && alpha < 1.0)) throw ValueError("channel_split: alpha must lie in (0,1)");
  const auto first = static_cast<std::size_t>(std::floor(alpha * static_cast<double>(channels) + 0.5));
  if (first < 1 || first + 1 > channels) {
    throw ValueError("channel_split: alpha " + std::to_string(alpha) + " on " + std::to_string(channels) +
                     " channels leaves an empty side");
  }
  return first;
}

template <Scalar T>
Tensor<T> slice_channels(const Tensor<T>& x, std::size_t begin, std::size_t end) {
  const Shape& s = x.shape();
  if (begin >= end || end > s.c) {
    throw ShapeError("slice_channels: range [" + std::to_string(begin) + "," + std::to_string(end) +
                     ") outside " + std::to_string(s.c) + " channels");
  }
  Tensor<T> out(Shape{s.n, end - begin, s.h, s.w});
  for (std::size_t n = 0; n < s.n; ++n) {
    std::copy(x.plane(n, begin), x.plane(n, begin) + (end - begin) * s.plane(), out.plane(n, 0));
  }
  return out;
}

template <Scalar T>
Tensor<T> concat_channels(const std::vector<const Tensor<T>*>& parts) {
  if (parts.empty()) throw ShapeError("concat_channels: no inputs");
  const Shape& s0 = parts.front()->shape();
  std::size_t channels = 0;
  for (const auto* p : parts) {
    const Shape& s = p->shape();
    if (s.n != s0.n || s.h != s0.h || s.w != s0.w) {
      throw ShapeError("concat_channels: " + s.str() + " does not match " + s0.str() + " outside channels");
    }
    channels += s.c;
  }
  Tensor<T> out(Shape{s0.n, channels, s0.h, s0.w});
  for (std::size_t n = 0; n < s0.n; ++n) {
    T* dst = out.plane(n, 0);
    for (const auto* p : parts) {
      const std::size_t len = p->shape().c * s0.plane();
      std::copy(p->plane(n, 0), p->plane(n, 0) + len, dst);
      dst += len;
    }
  }
  return out;
}

template <Scalar T>
std::pair<Tensor<T>, Tensor<T>> channel_split(const Tensor<T>& x, double alpha) {
  const std::size_t k = split_point(x.shape().c, alpha);
  return {slice_channels(x, 0, k), slice_channels(x, k, x.shape().c)};
}

enum class NormMode { train, eval };

struct BatchNormOptions {
  NormMode mode = NormMode::train;
  double momentum = 0.1;
  double eps = 1e-5;
};

/// Batch statistics per channel: mean and biased variance over (N,H,W).
template <Scalar T>
std::pair<std::vector<double>, std::vector<double>> batch_moments(const Tensor<T>& x) {
  const Shape& s = x.shape();
  std::vector<double> mean(s.c, 0.0), var(s.c, 0.0);
  const double count = static_cast<double>(s.n * s.plane());
  for (std::size_t c = 0; c < s.c; ++c) {
    double acc = 0;
    for (std::size_t n = 0; n < s.n; ++n) {
      const T* p = x.plane(n, c);
      for (std::size_t i = 0; i < s.plane(); ++i) acc += p[i];
    }
    mean[c] = acc / count;
    double sq = 0;
    for (std::size_t n = 0; n < s.n; ++n) {
      const T* p = x.plane(n, c);
      for (std::size_t i = 0; i < s.plane(); ++i) {
        const double d = p[i] - mean[c];
        sq += d * d;
      }
    }
    var[c] = sq / count;
  }
  return {mean, var};
}

/// Batch normalization over (N,H,W). Train mode updates the running statistics
/// in place: running = (1 - momentum) * running + momentum * batch, with the
/// unbiased batch variance.
template <Scalar T>
Tensor<T> batchnorm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, Tensor<T>& running_mean,
                    Tensor<T>& running_var, const BatchNormOptions& opt) {
  const Shape& s = x.shape();
  if (!(opt.eps > 0.0)) throw ValueError("batchnorm: eps must be positive");
  const Shape ps{1, s.c, 1, 1};
  for (const Tensor<T>* p : {&gamma, &beta, static_cast<const Tensor<T>*>(&running_mean),
                             static_cast<const Tensor<T>*>(&running_var)}) {
    if (p->shape() != ps) {
      throw ShapeError("batchnorm: parameter shape " + p->shape().str() + " != " + ps.str());
    }
  }
  std::vector<double> mean(s.c), var(s.c);
  if (opt.mode == NormMode::train) {
    std::tie(mean, var) = batch_moments(x);
    const double count = static_cast<double>(s.n * s.plane());
    for (std::size_t c = 0; c < s.c; ++c) {
      const double unbiased = count > 1 ? var[c] * count / (count - 1) : var[c];
      running_mean[c] = static_cast<T>((1 - opt.momentum) * running_mean[c] + opt.momentum * mean[c]);
      running_var[c] = static_cast<T>((1 - opt.momentum) * running_var[c] + opt.momentum * unbiased);
    }
  } else {
    for (std::size_t c = 0; c < s.c; ++c) {
      mean[c] = running_mean[c];
      var[c] = running_var[c];
    }
  }
  Tensor<T> y(s);
  for (std::size_t c = 0; c < s.c; ++c) {
    const double inv = 1.0 / std::sqrt(var[c] + opt.eps);
    for (std::size_t n = 0; n < s.n; ++n) {
      const T* p = x.plane(n, c);
      T* o = y.plane(n, c);
      for (std::size_t i = 0; i < s.plane(); ++i) {
        o[i] = static_cast<T>((p[i] - mean[c]) * inv * gamma[c] + beta[c]);
      }
    }
  }
  return y;
}

}  // namespace fd2

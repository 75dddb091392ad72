#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <vector>

#include "fd2/autodiff.hpp"
#include "fd2/ops.hpp"

/// Differentiable counterparts of the tensor operations, recorded on a Graph.
namespace fd2::ad {

template <Scalar T>
Var<T> conv2d(Var<T> x, Var<T> weight, std::optional<Var<T>> bias, const ConvSpec& spec) {
  Graph<T>& g = *x.graph;
  Tensor<T> y = fd2::conv2d(x.value(), spec, weight.value(), bias ? &bias->value() : nullptr);
  std::vector<Var<T>> inputs{x, weight};
  if (bias) inputs.push_back(*bias);
  return g.record(std::move(y), inputs, [x, weight, bias, spec](Graph<T>& g, const Tensor<T>& gy) {
    if (g.requires_grad(x)) g.accumulate(x, conv2d_input_grad(gy, spec, weight.value(), x.shape()));
    if (g.requires_grad(weight)) g.accumulate(weight, conv2d_weight_grad(gy, spec, x.value()));
    if (bias && g.requires_grad(*bias)) g.accumulate(*bias, channel_sums(gy));
  });
}

template <Scalar T>
Var<T> conv2d_transpose(Var<T> x, Var<T> weight, std::optional<Var<T>> bias, const ConvSpec& spec) {
  Graph<T>& g = *x.graph;
  Tensor<T> y = fd2::conv2d_transpose(x.value(), spec, weight.value(), bias ? &bias->value() : nullptr);
  std::vector<Var<T>> inputs{x, weight};
  if (bias) inputs.push_back(*bias);
  return g.record(std::move(y), inputs, [x, weight, bias, spec](Graph<T>& g, const Tensor<T>& gy) {
    const ConvSpec fwd = spec.forward_of_transposed();
    if (g.requires_grad(x)) g.accumulate(x, fd2::conv2d(gy, fwd, weight.value()));
    // roles swap: x plays the forward output gradient, gy the forward input
    if (g.requires_grad(weight)) g.accumulate(weight, conv2d_weight_grad(x.value(), fwd, gy));
    if (bias && g.requires_grad(*bias)) g.accumulate(*bias, channel_sums(gy));
  });
}

namespace detail {

template <Scalar T>
Var<T> binary(Var<T> a, Var<T> b, PointwiseKind kind) {
  Graph<T>& g = *a.graph;
  const auto plan = fd2::detail::plan_broadcast(a.shape(), b.shape(), "pointwise");
  Tensor<T> y = fd2::pointwise(a.value(), b.value(), kind);
  return g.record(std::move(y), {a, b}, [a, b, kind, plan](Graph<T>& g, const Tensor<T>& gy) {
    const Shape& as = a.shape();
    if (Tensor<T>* ga = g.grad_slot(a)) {
      if (kind == PointwiseKind::add) {
        for (std::size_t i = 0; i < gy.size(); ++i) (*ga)[i] += gy[i];
      } else {
        const Tensor<T>& bv = b.value();
        for (std::size_t i = 0; i < gy.size(); ++i) (*ga)[i] += gy[i] * bv[plan.map(i, as)];
      }
    }
    if (Tensor<T>* gb = g.grad_slot(b)) {
      if (kind == PointwiseKind::add) {
        for (std::size_t i = 0; i < gy.size(); ++i) (*gb)[plan.map(i, as)] += gy[i];
      } else {
        const Tensor<T>& av = a.value();
        for (std::size_t i = 0; i < gy.size(); ++i) (*gb)[plan.map(i, as)] += gy[i] * av[i];
      }
    }
  });
}

}  // namespace detail

template <Scalar T>
Var<T> add(Var<T> a, Var<T> b) {
  return detail::binary(a, b, PointwiseKind::add);
}

template <Scalar T>
Var<T> mul(Var<T> a, Var<T> b) {
  return detail::binary(a, b, PointwiseKind::mul);
}

template <Scalar T>
Var<T> relu(Var<T> x) {
  Tensor<T> y = fd2::pointwise(x.value(), PointwiseKind::relu);
  return x.graph->record(std::move(y), {x}, [x](Graph<T>& g, const Tensor<T>& gy) {
    Tensor<T>* gx = g.grad_slot(x);
    const Tensor<T>& xv = x.value();
    for (std::size_t i = 0; i < gy.size(); ++i) {
      if (xv[i] > 0) (*gx)[i] += gy[i];
    }
  });
}

template <Scalar T>
Var<T> sigmoid(Var<T> x) {
  Tensor<T> y = fd2::pointwise(x.value(), PointwiseKind::sigmoid);
  Tensor<T> saved = y;
  return x.graph->record(std::move(y), {x}, [x, saved](Graph<T>& g, const Tensor<T>& gy) {
    Tensor<T>* gx = g.grad_slot(x);
    for (std::size_t i = 0; i < gy.size(); ++i) (*gx)[i] += gy[i] * saved[i] * (T{1} - saved[i]);
  });
}

template <Scalar T>
Var<T> scale(Var<T> x, T factor) {
  Tensor<T> y(x.shape());
  const Tensor<T>& xv = x.value();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = xv[i] * factor;
  return x.graph->record(std::move(y), {x}, [x, factor](Graph<T>& g, const Tensor<T>& gy) {
    Tensor<T>* gx = g.grad_slot(x);
    for (std::size_t i = 0; i < gy.size(); ++i) (*gx)[i] += gy[i] * factor;
  });
}

template <Scalar T>
Var<T> channel_pool(Var<T> x, PoolMode mode) {
  Tensor<T> y = fd2::channel_pool(x.value(), mode);
  return x.graph->record(std::move(y), {x}, [x, mode](Graph<T>& g, const Tensor<T>& gy) {
    Tensor<T>* gx = g.grad_slot(x);
    const Shape& s = x.shape();
    const Tensor<T>& xv = x.value();
    for (std::size_t n = 0; n < s.n; ++n) {
      const T* go = gy.plane(n, 0);
      if (mode == PoolMode::avg) {
        const T inv = T{1} / static_cast<T>(s.c);
        for (std::size_t c = 0; c < s.c; ++c) {
          T* gp = gx->plane(n, c);
          for (std::size_t i = 0; i < s.plane(); ++i) gp[i] += go[i] * inv;
        }
      } else {
        for (std::size_t i = 0; i < s.plane(); ++i) {
          std::size_t best = 0;
          T best_v = xv.plane(n, 0)[i];
          for (std::size_t c = 1; c < s.c; ++c) {
            const T v = xv.plane(n, c)[i];
            if (v > best_v) {
              best_v = v;
              best = c;
            }
          }
          gx->plane(n, best)[i] += go[i];
        }
      }
    }
  });
}

template <Scalar T>
Var<T> global_avg_pool(Var<T> x) {
  Tensor<T> y = fd2::global_avg_pool(x.value());
  return x.graph->record(std::move(y), {x}, [x](Graph<T>& g, const Tensor<T>& gy) {
    Tensor<T>* gx = g.grad_slot(x);
    const Shape& s = x.shape();
    const T inv = T{1} / static_cast<T>(s.plane());
    for (std::size_t n = 0; n < s.n; ++n) {
      for (std::size_t c = 0; c < s.c; ++c) {
        const T v = gy(n, c, 0, 0) * inv;
        T* gp = gx->plane(n, c);
        for (std::size_t i = 0; i < s.plane(); ++i) gp[i] += v;
      }
    }
  });
}

template <Scalar T>
Var<T> slice_channels(Var<T> x, std::size_t begin, std::size_t end) {
  Tensor<T> y = fd2::slice_channels(x.value(), begin, end);
  return x.graph->record(std::move(y), {x}, [x, begin, end](Graph<T>& g, const Tensor<T>& gy) {
    Tensor<T>* gx = g.grad_slot(x);
    const Shape& s = x.shape();
    const std::size_t len = (end - begin) * s.plane();
    for (std::size_t n = 0; n < s.n; ++n) {
      T* dst = gx->plane(n, begin);
      const T* src = gy.plane(n, 0);
      for (std::size_t i = 0; i < len; ++i) dst[i] += src[i];
    }
  });
}

template <Scalar T>
Var<T> concat_channels(const std::vector<Var<T>>& parts) {
  if (parts.empty()) throw ShapeError("concat_channels: no inputs");
  std::vector<const Tensor<T>*> values;
  values.reserve(parts.size());
  for (const auto& p : parts) values.push_back(&p.value());
  Tensor<T> y = fd2::concat_channels(values);
  return parts.front().graph->record(std::move(y), parts, [parts](Graph<T>& g, const Tensor<T>& gy) {
    const Shape& s = gy.shape();
    std::size_t offset = 0;
    for (const auto& p : parts) {
      const std::size_t c = p.shape().c;
      if (Tensor<T>* gp = g.grad_slot(p)) {
        for (std::size_t n = 0; n < s.n; ++n) {
          const T* src = gy.plane(n, offset);
          T* dst = gp->plane(n, 0);
          for (std::size_t i = 0; i < c * s.plane(); ++i) dst[i] += src[i];
        }
      }
      offset += c;
    }
  });
}

template <Scalar T>
std::pair<Var<T>, Var<T>> channel_split(Var<T> x, double alpha) {
  const std::size_t k = split_point(x.shape().c, alpha);
  return {slice_channels(x, 0, k), slice_channels(x, k, x.shape().c)};
}

/// Batch normalization; running statistics live in non-trainable parameters
/// and are updated in train mode.
template <Scalar T>
Var<T> batchnorm(Var<T> x, Var<T> gamma, Var<T> beta, Parameter<T>& running_mean, Parameter<T>& running_var,
                 const BatchNormOptions& opt) {
  const Shape s = x.shape();
  Tensor<T>& rm = running_mean.mutable_value();
  Tensor<T>& rv = running_var.mutable_value();
  std::vector<double> mean(s.c), var(s.c);
  if (opt.mode == NormMode::train) {
    std::tie(mean, var) = batch_moments(x.value());
  } else {
    for (std::size_t c = 0; c < s.c; ++c) {
      mean[c] = rm[c];
      var[c] = rv[c];
    }
  }
  Tensor<T> y = fd2::batchnorm(x.value(), gamma.value(), beta.value(), rm, rv, opt);
  std::vector<double> inv(s.c);
  for (std::size_t c = 0; c < s.c; ++c) inv[c] = 1.0 / std::sqrt(var[c] + opt.eps);
  const bool train = opt.mode == NormMode::train;
  return x.graph->record(
      std::move(y), {x, gamma, beta}, [x, gamma, beta, mean, inv, train](Graph<T>& g, const Tensor<T>& gy) {
        const Shape& s = x.shape();
        const Tensor<T>& xv = x.value();
        const Tensor<T>& gm = gamma.value();
        Tensor<T>* gx = g.grad_slot(x);
        Tensor<T>* gg = g.grad_slot(gamma);
        Tensor<T>* gb = g.grad_slot(beta);
        const double count = static_cast<double>(s.n * s.plane());
        for (std::size_t c = 0; c < s.c; ++c) {
          double sum_g = 0, sum_gx = 0;
          for (std::size_t n = 0; n < s.n; ++n) {
            const T* gp = gy.plane(n, c);
            const T* xp = xv.plane(n, c);
            for (std::size_t i = 0; i < s.plane(); ++i) {
              const double xhat = (xp[i] - mean[c]) * inv[c];
              sum_g += gp[i];
              sum_gx += gp[i] * xhat;
            }
          }
          if (gg != nullptr) (*gg)[c] += static_cast<T>(sum_gx);
          if (gb != nullptr) (*gb)[c] += static_cast<T>(sum_g);
          if (gx == nullptr) continue;
          for (std::size_t n = 0; n < s.n; ++n) {
            const T* gp = gy.plane(n, c);
            const T* xp = xv.plane(n, c);
            T* dp = gx->plane(n, c);
            for (std::size_t i = 0; i < s.plane(); ++i) {
              if (train) {
                const double xhat = (xp[i] - mean[c]) * inv[c];
                dp[i] += static_cast<T>(gm[c] * inv[c] * (gp[i] - sum_g / count - xhat * sum_gx / count));
              } else {
                dp[i] += static_cast<T>(gm[c] * inv[c] * gp[i]);
              }
            }
          }
        }
      });
}

template <Scalar T>
Var<T> sum(Var<T> x) {
  long double acc = 0;  // extended accumulator keeps loss roundoff below per-element gradients
  for (T v : x.value().data()) acc += v;
  return x.graph->record(Tensor<T>::scalar(static_cast<T>(acc)), {x}, [x](Graph<T>& g, const Tensor<T>& gy) {
    Tensor<T>* gx = g.grad_slot(x);
    const T v = gy[0];
    for (auto& e : gx->data()) e += v;
  });
}

template <Scalar T>
Var<T> mean(Var<T> x) {
  return scale(sum(x), T{1} / static_cast<T>(x.value().size()));
}

/// Mean over all elements of (a - b)^2.
template <Scalar T>
Var<T> mse(Var<T> a, Var<T> b) {
  if (a.shape() != b.shape()) throw ShapeError("mse: " + a.shape().str() + " vs " + b.shape().str());
  const Tensor<T>& av = a.value();
  const Tensor<T>& bv = b.value();
  long double acc = 0;
  for (std::size_t i = 0; i < av.size(); ++i) {
    const long double d = static_cast<long double>(av[i]) - bv[i];
    acc += d * d;
  }
  const T value = static_cast<T>(acc / static_cast<long double>(av.size()));
  return a.graph->record(Tensor<T>::scalar(value), {a, b}, [a, b](Graph<T>& g, const Tensor<T>& gy) {
    const Tensor<T>& av = a.value();
    const Tensor<T>& bv = b.value();
    const T k = gy[0] * T{2} / static_cast<T>(av.size());
    Tensor<T>* ga = g.grad_slot(a);
    Tensor<T>* gb = g.grad_slot(b);
    for (std::size_t i = 0; i < av.size(); ++i) {
      const T d = k * (av[i] - bv[i]);
      if (ga != nullptr) (*ga)[i] += d;
      if (gb != nullptr) (*gb)[i] -= d;
    }
  });
}

/// Places a (C,1,k,k) depthwise kernel at dilation `d` into the centre of a
/// (C,1,rf,rf) kernel, zeros elsewhere.
template <Scalar T>
Tensor<T> embed_kernel(const Tensor<T>& w, std::size_t dilation, std::size_t rf) {
  const Shape& s = w.shape();
  if (s.h != s.w) throw ShapeError("embed_kernel: kernel must be square, got " + s.str());
  const std::size_t eff = dilation * (s.h - 1) + 1;
  if (eff > rf || (rf - eff) % 2 != 0) {
    throw ShapeError("embed_kernel: effective size " + std::to_string(eff) + " cannot be centred in " +
                     std::to_string(rf));
  }
  const std::size_t off = (rf - eff) / 2;
  Tensor<T> out(Shape{s.n, s.c, rf, rf});
  for (std::size_t n = 0; n < s.n; ++n) {
    for (std::size_t c = 0; c < s.c; ++c) {
      for (std::size_t i = 0; i < s.h; ++i) {
        for (std::size_t j = 0; j < s.w; ++j) {
          out(n, c, off + i * dilation, off + j * dilation) = w(n, c, i, j);
        }
      }
    }
  }
  return out;
}

template <Scalar T>
Var<T> embed_kernel(Var<T> w, std::size_t dilation, std::size_t rf) {
  Tensor<T> y = embed_kernel(w.value(), dilation, rf);
  return w.graph->record(std::move(y), {w}, [w, dilation, rf](Graph<T>& g, const Tensor<T>& gy) {
    Tensor<T>* gw = g.grad_slot(w);
    const Shape& s = w.shape();
    const std::size_t off = (rf - (dilation * (s.h - 1) + 1)) / 2;
    for (std::size_t n = 0; n < s.n; ++n) {
      for (std::size_t c = 0; c < s.c; ++c) {
        for (std::size_t i = 0; i < s.h; ++i) {
          for (std::size_t j = 0; j < s.w; ++j) {
            (*gw)(n, c, i, j) += gy(n, c, off + i * dilation, off + j * dilation);
          }
        }
      }
    }
  });
}

/// Zeroes every channel at spatial positions where `drop[h*w_ext + w]` is set.
template <Scalar T>
Var<T> drop_positions(Var<T> x, const std::vector<std::uint8_t>& drop) {
  const Shape& s = x.shape();
  if (drop.size() != s.plane()) {
    throw ShapeError("drop_positions: mask has " + std::to_string(drop.size()) + " cells for a " +
                     std::to_string(s.h) + "x" + std::to_string(s.w) + " map");
  }
  Tensor<T> y = x.value();
  for (std::size_t n = 0; n < s.n; ++n) {
    for (std::size_t c = 0; c < s.c; ++c) {
      T* p = y.plane(n, c);
      for (std::size_t i = 0; i < s.plane(); ++i) {
        if (drop[i]) p[i] = T{0};
      }
    }
  }
  return x.graph->record(std::move(y), {x}, [x, drop](Graph<T>& g, const Tensor<T>& gy) {
    Tensor<T>* gx = g.grad_slot(x);
    const Shape& s = x.shape();
    for (std::size_t n = 0; n < s.n; ++n) {
      for (std::size_t c = 0; c < s.c; ++c) {
        const T* gp = gy.plane(n, c);
        T* dp = gx->plane(n, c);
        for (std::size_t i = 0; i < s.plane(); ++i) {
          if (!drop[i]) dp[i] += gp[i];
        }
      }
    }
  });
}

/// Token similarity: for (N,C,h,w) inputs viewed as h*w tokens of width C,
/// returns (N,1,Lq,Lk) with entry factor * <q_l, k_m>.
template <Scalar T>
Var<T> token_scores(Var<T> q, Var<T> k, T factor) {
  const Shape qs = q.shape();
  const Shape ks = k.shape();
  if (qs.n != ks.n || qs.c != ks.c) throw ShapeError("token_scores: " + qs.str() + " vs " + ks.str());
  const std::size_t lq = qs.plane();
  const std::size_t lk = ks.plane();
  if (lq == 0 || lk == 0) throw ShapeError("token_scores: zero tokens");
  Tensor<T> y(Shape{qs.n, 1, lq, lk});
  for (std::size_t n = 0; n < qs.n; ++n) {
    T* out = y.plane(n, 0);
    for (std::size_t c = 0; c < qs.c; ++c) {
      const T* qp = q.value().plane(n, c);
      const T* kp = k.value().plane(n, c);
      for (std::size_t l = 0; l < lq; ++l) {
        const T qv = qp[l] * factor;
        T* row = out + l * lk;
        for (std::size_t m = 0; m < lk; ++m) row[m] += qv * kp[m];
      }
    }
  }
  return q.graph->record(std::move(y), {q, k}, [q, k, factor](Graph<T>& g, const Tensor<T>& gy) {
    const Shape& qs = q.shape();
    const std::size_t lq = qs.plane();
    const std::size_t lk = k.shape().plane();
    Tensor<T>* gq = g.grad_slot(q);
    Tensor<T>* gk = g.grad_slot(k);
    for (std::size_t n = 0; n < qs.n; ++n) {
      const T* gs = gy.plane(n, 0);
      for (std::size_t c = 0; c < qs.c; ++c) {
        const T* qp = q.value().plane(n, c);
        const T* kp = k.value().plane(n, c);
        for (std::size_t l = 0; l < lq; ++l) {
          const T* row = gs + l * lk;
          if (gq != nullptr) {
            T acc = 0;
            for (std::size_t m = 0; m < lk; ++m) acc += row[m] * kp[m];
            gq->plane(n, c)[l] += acc * factor;
          }
          if (gk != nullptr) {
            const T qv = qp[l] * factor;
            T* dk = gk->plane(n, c);
            for (std::size_t m = 0; m < lk; ++m) dk[m] += row[m] * qv;
          }
        }
      }
    }
  });
}

/// Softmax along the last axis of every row.
template <Scalar T>
Var<T> softmax_rows(Var<T> x) {
  const Shape s = x.shape();
  Tensor<T> y(s);
  const Tensor<T>& xv = x.value();
  const std::size_t rows = s.n * s.c * s.h;
  for (std::size_t r = 0; r < rows; ++r) {
    const T* in = xv.data().data() + r * s.w;
    T* out = y.data().data() + r * s.w;
    T peak = in[0];
    for (std::size_t j = 1; j < s.w; ++j) peak = std::max(peak, in[j]);
    T total = 0;
    for (std::size_t j = 0; j < s.w; ++j) {
      out[j] = std::exp(in[j] - peak);
      total += out[j];
    }
    for (std::size_t j = 0; j < s.w; ++j) out[j] /= total;
  }
  Tensor<T> saved = y;
  return x.graph->record(std::move(y), {x}, [x, saved](Graph<T>& g, const Tensor<T>& gy) {
    Tensor<T>* gx = g.grad_slot(x);
    const Shape& s = x.shape();
    const std::size_t rows = s.n * s.c * s.h;
    for (std::size_t r = 0; r < rows; ++r) {
      const T* yr = saved.data().data() + r * s.w;
      const T* gr = gy.data().data() + r * s.w;
      T dot = 0;
      for (std::size_t j = 0; j < s.w; ++j) dot += yr[j] * gr[j];
      T* dr = gx->data().data() + r * s.w;
      for (std::size_t j = 0; j < s.w; ++j) dr[j] += yr[j] * (gr[j] - dot);
    }
  });
}

/// Weighted token sum: attn (N,1,Lq,Lk) applied to values (N,C,hk,wk);
/// output (N,C,out_h,out_w) with out_h*out_w = Lq.
template <Scalar T>
Var<T> attend(Var<T> attn, Var<T> values, std::size_t out_h, std::size_t out_w) {
  const Shape as = attn.shape();
  const Shape vs = values.shape();
  if (as.c != 1 || as.n != vs.n || as.w != vs.plane() || as.h != out_h * out_w) {
    throw ShapeError("attend: attention " + as.str() + " incompatible with values " + vs.str());
  }
  Tensor<T> y(Shape{vs.n, vs.c, out_h, out_w});
  const std::size_t lq = as.h;
  const std::size_t lk = as.w;
  for (std::size_t n = 0; n < vs.n; ++n) {
    const T* a = attn.value().plane(n, 0);
    for (std::size_t c = 0; c < vs.c; ++c) {
      const T* vp = values.value().plane(n, c);
      T* out = y.plane(n, c);
      for (std::size_t l = 0; l < lq; ++l) {
        const T* row = a + l * lk;
        T acc = 0;
        for (std::size_t m = 0; m < lk; ++m) acc += row[m] * vp[m];
        out[l] = acc;
      }
    }
  }
  return attn.graph->record(std::move(y), {attn, values}, [attn, values](Graph<T>& g, const Tensor<T>& gy) {
    const Shape& as = attn.shape();
    const Shape& vs = values.shape();
    const std::size_t lq = as.h;
    const std::size_t lk = as.w;
    Tensor<T>* ga = g.grad_slot(attn);
    Tensor<T>* gv = g.grad_slot(values);
    for (std::size_t n = 0; n < vs.n; ++n) {
      const T* a = attn.value().plane(n, 0);
      for (std::size_t c = 0; c < vs.c; ++c) {
        const T* vp = values.value().plane(n, c);
        const T* go = gy.plane(n, c);
        for (std::size_t l = 0; l < lq; ++l) {
          const T gl = go[l];
          if (ga != nullptr) {
            T* grow = ga->plane(n, 0) + l * lk;
            for (std::size_t m = 0; m < lk; ++m) grow[m] += gl * vp[m];
          }
          if (gv != nullptr) {
            const T* row = a + l * lk;
            T* dv = gv->plane(n, c);
            for (std::size_t m = 0; m < lk; ++m) dv[m] += row[m] * gl;
          }
        }
      }
    }
  });
}

}  // namespace fd2::ad

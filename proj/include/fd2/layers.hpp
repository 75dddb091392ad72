#pragma once

#include <cmath>
#include <optional>
#include <string>
#include <utility>

#include "fd2/ad_ops.hpp"
#include "fd2/autodiff.hpp"
#include "fd2/ops.hpp"

namespace fd2 {

/// Convolution (or transposed convolution) with its weight and optional bias.
template <Scalar T>
class Conv2d {
 public:
  Conv2d() = default;

  Conv2d(std::string name, ConvSpec spec, bool transposed = false) : spec_(spec), transposed_(transposed) {
    spec_.validate();
    weight_ = Parameter<T>(name + ".weight",
                           Tensor<T>(transposed ? spec_.transposed_weight_shape() : spec_.weight_shape()));
    if (spec_.has_bias) bias_.emplace(name + ".bias", Tensor<T>(spec_.bias_shape()));
  }

  /// Xavier-uniform weights, zero bias.
  void init(Rng& rng) {
    const Shape ws = weight_.shape();
    const double receptive = static_cast<double>(ws.h * ws.w);
    const double fan_in = static_cast<double>(spec_.in_channels / spec_.groups) * receptive;
    const double fan_out = static_cast<double>(spec_.out_channels / spec_.groups) * receptive;
    const double bound = std::sqrt(6.0 / (fan_in + fan_out));
    weight_.assign(random_uniform<T>(ws, rng, -bound, bound));
    if (bias_) bias_->assign(Tensor<T>(bias_->shape()));
  }

  Var<T> forward(Var<T> x) {
    Graph<T>& g = *x.graph;
    std::optional<Var<T>> b;
    if (bias_) b = g.param(*bias_);
    if (transposed_) return ad::conv2d_transpose(x, g.param(weight_), b, spec_);
    return ad::conv2d(x, g.param(weight_), b, spec_);
  }

  void collect(ParamList<T>& out) {
    out.push_back(&weight_);
    if (bias_) out.push_back(&*bias_);
  }

  const ConvSpec& spec() const { return spec_; }
  bool transposed() const { return transposed_; }
  Parameter<T>& weight() { return weight_; }
  const Parameter<T>& weight() const { return weight_; }
  Parameter<T>* bias() { return bias_ ? &*bias_ : nullptr; }
  const Parameter<T>* bias() const { return bias_ ? &*bias_ : nullptr; }

 private:
  ConvSpec spec_{};
  bool transposed_ = false;
  Parameter<T> weight_;
  std::optional<Parameter<T>> bias_;
};

template <Scalar T>
class BatchNorm2d {
 public:
  BatchNorm2d() = default;

  BatchNorm2d(const std::string& name, std::size_t channels, double momentum = 0.1, double eps = 1e-5)
      : gamma_(name + ".gamma", Tensor<T>(Shape{1, channels, 1, 1}, T{1})),
        beta_(name + ".beta", Tensor<T>(Shape{1, channels, 1, 1})),
        running_mean_(name + ".running_mean", Tensor<T>(Shape{1, channels, 1, 1}), false),
        running_var_(name + ".running_var", Tensor<T>(Shape{1, channels, 1, 1}, T{1}), false),
        momentum_(momentum),
        eps_(eps) {}

  Var<T> forward(Var<T> x, NormMode mode) {
    Graph<T>& g = *x.graph;
    return ad::batchnorm(x, g.param(gamma_), g.param(beta_), running_mean_, running_var_,
                         BatchNormOptions{mode, momentum_, eps_});
  }

  void collect(ParamList<T>& out) {
    out.push_back(&gamma_);
    out.push_back(&beta_);
    out.push_back(&running_mean_);
    out.push_back(&running_var_);
  }

  std::size_t channels() const { return gamma_.shape().c; }

 private:
  Parameter<T> gamma_;
  Parameter<T> beta_;
  Parameter<T> running_mean_;
  Parameter<T> running_var_;
  double momentum_ = 0.1;
  double eps_ = 1e-5;
};

/// Convolution without bias, batch normalization, ReLU.
template <Scalar T>
class ConvBnRelu {
 public:
  ConvBnRelu() = default;
  ConvBnRelu(const std::string& name, ConvSpec spec)
      : conv_(name + ".conv", without_bias(spec)), bn_(name + ".bn", spec.out_channels) {}

  void init(Rng& rng) { conv_.init(rng); }

  Var<T> forward(Var<T> x, NormMode mode) { return ad::relu(bn_.forward(conv_.forward(x), mode)); }

  void collect(ParamList<T>& out) {
    conv_.collect(out);
    bn_.collect(out);
  }

  const ConvSpec& spec() const { return conv_.spec(); }

 private:
  static ConvSpec without_bias(ConvSpec spec) {
    spec.has_bias = false;
    return spec;
  }

  Conv2d<T> conv_;
  BatchNorm2d<T> bn_;
};

}  // namespace fd2

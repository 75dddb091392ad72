#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <functional>
#include <numbers>
#include <numeric>
#include <optional>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

#include "json.hpp"

#include "fd2/ad_ops.hpp"
#include "fd2/dct.hpp"
#include "fd2/fde.hpp"
#include "fd2/mrm.hpp"
#include "fd2/training.hpp"

namespace fd2 {

struct CheckReport {
  std::string name;
  bool passed = false;
  double metric = 0.0;
  double tolerance = 0.0;
  double millis = 0.0;
  std::uint64_t seed = 0;
  std::string detail;

  static CheckReport judge(std::string name, double metric, double tolerance, std::uint64_t seed) {
    CheckReport r;
    r.name = std::move(name);
    r.metric = metric;
    r.tolerance = tolerance;
    r.seed = seed;
    r.passed = std::isfinite(metric) && metric <= tolerance;
    return r;
  }

  nlohmann::json to_json() const {
    return {{"name", name},       {"status", passed ? "pass" : "fail"},
            {"metric", metric},   {"tolerance", tolerance},
            {"seed", seed},       {"millis", millis},
            {"detail", detail}};
  }
};

namespace detail {

class Stopwatch {
 public:
  double millis() const {
    return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start_).count();
  }

 private:
  std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

template <class F>
CheckReport timed(F&& f) {
  Stopwatch sw;
  CheckReport r = f();
  r.millis = sw.millis();
  return r;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Oracles. Written from the definitions alone, sharing nothing with ops.hpp.

/// Direct summation y[n,o,i,j] = b[o] + sum_{c in group(o), a, b} x[n,c,i*s-p+a*d, j*s-p+b*d] * w[o,c',a,b].
template <Scalar T>
Tensor<double> conv_direct_oracle(const Tensor<T>& x, const Tensor<T>& weight, const std::type_identity_t<Tensor<T>>* bias,
                                  const ConvSpec& spec) {
  const Shape xs = x.shape();
  const Shape ys = spec.output_shape(xs);
  if (weight.shape() != spec.weight_shape()) throw ShapeError("oracle: weight shape mismatch");
  const std::size_t cin_g = spec.in_channels / spec.groups;
  const std::size_t cout_g = spec.out_channels / spec.groups;
  const auto p = static_cast<long>(spec.padding);
  Tensor<double> y(ys);
  for (std::size_t n = 0; n < ys.n; ++n) {
    for (std::size_t o = 0; o < ys.c; ++o) {
      const std::size_t g = o / cout_g;
      for (std::size_t i = 0; i < ys.h; ++i) {
        for (std::size_t j = 0; j < ys.w; ++j) {
          double acc = bias != nullptr ? static_cast<double>((*bias)[o]) : 0.0;
          for (std::size_t ci = 0; ci < cin_g; ++ci) {
            for (std::size_t a = 0; a < spec.kernel_h; ++a) {
              for (std::size_t b = 0; b < spec.kernel_w; ++b) {
                const long r = static_cast<long>(i * spec.stride + a * spec.dilation) - p;
                const long c = static_cast<long>(j * spec.stride + b * spec.dilation) - p;
                if (r < 0 || c < 0 || r >= static_cast<long>(xs.h) || c >= static_cast<long>(xs.w)) continue;
                acc += static_cast<double>(x(n, g * cin_g + ci, static_cast<std::size_t>(r),
                                             static_cast<std::size_t>(c))) *
                       static_cast<double>(weight(o, ci, a, b));
              }
            }
          }
          y(n, o, i, j) = acc;
        }
      }
    }
  }
  return y;
}

/// f[u,v] = sum_ij x[i,j] cos(pi u (2i+1) / 2H) cos(pi v (2j+1) / 2W), per plane.
template <Scalar T>
Tensor<double> dct_direct_oracle(const Tensor<T>& x) {
  const Shape s = x.shape();
  Tensor<double> f(s);
  for (std::size_t n = 0; n < s.n; ++n) {
    for (std::size_t c = 0; c < s.c; ++c) {
      for (std::size_t u = 0; u < s.h; ++u) {
        for (std::size_t v = 0; v < s.w; ++v) {
          double acc = 0;
          for (std::size_t i = 0; i < s.h; ++i) {
            for (std::size_t j = 0; j < s.w; ++j) {
              acc += static_cast<double>(x(n, c, i, j)) *
                     std::cos(std::numbers::pi * static_cast<double>(u * (2 * i + 1)) / static_cast<double>(2 * s.h)) *
                     std::cos(std::numbers::pi * static_cast<double>(v * (2 * j + 1)) / static_cast<double>(2 * s.w));
            }
          }
          f(n, c, u, v) = acc;
        }
      }
    }
  }
  return f;
}

template <Scalar A, Scalar B>
double max_abs_diff_any(const Tensor<A>& a, const Tensor<B>& b) {
  if (a.shape() != b.shape()) throw ShapeError("compare: " + a.shape().str() + " vs " + b.shape().str());
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = std::abs(static_cast<double>(a[i]) - static_cast<double>(b[i]));
    if (std::isnan(d)) return std::numeric_limits<double>::infinity();
    m = std::max(m, d);
  }
  return m;
}

// ---------------------------------------------------------------------------
// Finite differences

struct FdOptions {
  double step = 1e-6;
  double tolerance = 1e-4;
  std::size_t samples = 64;
  std::uint64_t seed = 0;
  /// Multiplies the reverse-mode gradient before comparison; 1.0 except in fault injection.
  double gradient_scale = 1.0;
  double floor = 1e-8;
};

using Fragment = std::function<Var<double>(Graph<double>&)>;

/// Compares reverse-mode gradients of a scalar fragment with central
/// differences on a seeded coordinate sample of every trainable parameter.
inline CheckReport finite_diff_check(const std::string& name, const ParamList<double>& params,
                                     const Fragment& fragment, const FdOptions& opt = {}) {
  detail::Stopwatch sw;
  CheckReport report;
  report.name = name;
  report.tolerance = opt.tolerance;
  report.seed = opt.seed;
  const auto fail = [&](const std::string& why) {
    report.passed = false;
    report.metric = std::numeric_limits<double>::infinity();
    report.detail = why;
    report.millis = sw.millis();
    return report;
  };

  zero_grads(params);
  {
    Graph<double> g;
    Var<double> loss = fragment(g);
    if (loss.shape().numel() != 1) return fail("fragment is not scalar");
    if (!loss.value().all_finite()) return fail("fragment value is not finite");
    g.backward(loss);
  }
  const auto evaluate = [&]() {
    Graph<double> g;
    return fragment(g).value().item();
  };

  Rng rng(opt.seed);
  double worst = 0.0;
  std::string worst_at;
  std::size_t checked = 0;
  for (Parameter<double>* p : params) {
    if (!p->trainable()) continue;
    const std::size_t n = p->value().size();
    std::vector<std::size_t> coords(n);
    std::iota(coords.begin(), coords.end(), std::size_t{0});
    const std::size_t take = std::min(n, opt.samples);
    for (std::size_t i = 0; i < take; ++i) std::swap(coords[i], coords[i + rng.below(n - i)]);
    coords.resize(take);
    const Tensor<double> analytic = p->grad();
    for (std::size_t idx : coords) {
      const double original = p->value()[idx];
      p->mutable_value()[idx] = original + opt.step;
      const double up = evaluate();
      p->mutable_value()[idx] = original - opt.step;
      const double down = evaluate();
      p->mutable_value()[idx] = original;
      if (!std::isfinite(up) || !std::isfinite(down)) {
        return fail("non-finite perturbed value at " + p->name() + "[" + std::to_string(idx) + "]");
      }
      const double numeric = (up - down) / (2.0 * opt.step);
      const double a = analytic[idx] * opt.gradient_scale;
      const double err = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), opt.floor});
      if (err > worst || !std::isfinite(err)) {
        worst = err;
        char buf[96];
        std::snprintf(buf, sizeof buf, "] analytic %.6e numeric %.6e", a, numeric);
        worst_at = p->name() + "[" + std::to_string(idx) + buf;
      }
      ++checked;
    }
  }
  zero_grads(params);
  report.metric = worst;
  report.passed = std::isfinite(worst) && worst <= opt.tolerance;
  report.detail = std::to_string(checked) + " coordinates; worst " + worst_at;
  report.millis = sw.millis();
  return report;
}

/// Reduces a tensor output to a scalar with fixed random weights so every
/// element contributes a distinct, non-degenerate gradient.
inline Var<double> probe(Var<double> out, std::uint64_t seed) {
  Rng rng(seed);
  Graph<double>& g = *out.graph;
  return ad::sum(ad::mul(out, g.constant(random_uniform<double>(out.shape(), rng, -1.0, 1.0))));
}

/// Sensitivity check: the inner check must fail. Metric is 0 when it did.
inline CheckReport expect_failure(const std::string& name, const CheckReport& inner) {
  CheckReport r = CheckReport::judge(name, inner.passed ? 1.0 : 0.0, 0.0, inner.seed);
  r.millis = inner.millis;
  r.detail = "inner metric " + std::to_string(inner.metric) + " vs tolerance " + std::to_string(inner.tolerance);
  return r;
}

// ---------------------------------------------------------------------------
// Re-parameterization equivalence

struct ReparamOptions {
  std::vector<std::uint64_t> seeds;
  double tolerance = 1e-10;
  Shape input{1, 16, 64, 64};
  /// Adds this to one tap of the post-hoc merged kernel when non-zero.
  double fault = 0.0;
};

/// Max |multi_branch - merged| over seeds, covering both the in-graph merge and
/// the post-hoc merged kernel.
template <Scalar T>
CheckReport reparam_equivalence_check(const std::string& name, const LfuConfig& cfg, const ReparamOptions& opt) {
  return detail::timed([&] {
    double worst = 0.0;
    for (std::uint64_t seed : opt.seeds) {
      Rng rng(seed);
      Lfu<T> lfu("lfu", cfg);
      lfu.init(rng);
      for (auto& b : lfu.branches()) b.bias()->assign(random_uniform<T>(b.bias()->shape(), rng, -0.1, 0.1));
      const Tensor<T> x = random_uniform<T>(Shape{opt.input.n, cfg.channels(), opt.input.h, opt.input.w}, rng,
                                            -1.0, 1.0);
      Graph<T> g;
      Var<T> in = g.constant(x);
      const Tensor<T> multi = lfu.forward(in, LfuMode::multi_branch).value();
      const Tensor<T> merged = lfu.forward(in, LfuMode::merged).value();
      MergedKernel<T> kernel = lfu.merged_kernel();
      if (opt.fault != 0.0) {
        const std::size_t rf = cfg.receptive_field();
        kernel.weight(0, 0, rf / 2, rf / 2) += static_cast<T>(opt.fault);
      }
      const Tensor<T> posthoc = lfu.forward_with_kernel(in, kernel).value();
      worst = std::max({worst, max_abs_diff_any(multi, posthoc),
                        opt.fault == 0.0 ? max_abs_diff_any(multi, merged) : 0.0});
    }
    CheckReport r = CheckReport::judge(name, worst, opt.tolerance, opt.seeds.empty() ? 0 : opt.seeds.front());
    r.detail = std::to_string(opt.seeds.size()) + " seeds at " + opt.input.str();
    return r;
  });
}

inline std::vector<std::uint64_t> seed_range(std::uint64_t first, std::size_t count) {
  std::vector<std::uint64_t> s(count);
  std::iota(s.begin(), s.end(), first);
  return s;
}

// ---------------------------------------------------------------------------
// Desk-scale fragments shared by the suites and the tests

namespace fragments {

struct Desk {
  std::size_t n = 2;
  std::size_t h = 8;
  std::size_t w = 8;
};

/// Wraps a random input tensor as a trainable parameter so its gradient is checked too.
inline Parameter<double> input_param(const std::string& name, Shape s, Rng& rng) {
  return Parameter<double>(name, random_uniform<double>(s, rng, -1.0, 1.0));
}

/// Zero-initialised biases leave ReLU inputs exactly on the kink wherever the
/// incoming activations vanish; random biases move them off it.
inline void randomize_biases(const ParamList<double>& params, Rng& rng) {
  for (Parameter<double>* p : params) {
    const std::string& n = p->name();
    if (n.size() >= 5 && n.compare(n.size() - 5, 5, ".bias") == 0) {
      p->assign(random_uniform<double>(p->shape(), rng, -0.2, 0.2));
    }
  }
}

}  // namespace fragments

// ---------------------------------------------------------------------------
// Suites

struct SuiteReport {
  std::uint64_t seed = 0;
  std::vector<std::string> suites;
  std::vector<CheckReport> checks;

  bool passed() const {
    return std::all_of(checks.begin(), checks.end(), [](const CheckReport& c) { return c.passed; });
  }

  nlohmann::json to_json() const {
    nlohmann::json records = nlohmann::json::array();
    for (const auto& c : checks) records.push_back(c.to_json());
    return {{"seed", seed}, {"suites", suites}, {"status", passed() ? "pass" : "fail"}, {"checks", records}};
  }
};

inline const std::vector<std::string>& suite_names() {
  static const std::vector<std::string> names{"tensor", "dct", "hfu", "lfu", "css", "mrm", "training"};
  return names;
}

namespace suites {

inline void tensor(std::uint64_t seed, std::vector<CheckReport>& out) {
  out.push_back(detail::timed([&] {
    Rng rng(seed);
    double worst = 0.0;
    const std::size_t kernels[] = {1, 3, 6, 7};
    for (int t = 0; t < 50; ++t) {
      const std::size_t cin = 2 + rng.below(3);
      const bool depthwise = rng.below(2) == 1;
      ConvSpec spec = ConvSpec::square(cin, depthwise ? cin : 1 + rng.below(4), kernels[rng.below(4)],
                                       1 + rng.below(2), 0, 1 + rng.below(3), depthwise ? cin : 1, rng.below(2) == 1);
      spec.padding = rng.below(spec.effective_h() / 2 + 1);
      const std::size_t extent = spec.effective_h() + rng.below(5);
      const Tensor<double> x = random_uniform<double>(Shape{2, cin, extent, extent + 1}, rng, -1.0, 1.0);
      const Tensor<double> w = random_uniform<double>(spec.weight_shape(), rng, -1.0, 1.0);
      const Tensor<double> b = random_uniform<double>(spec.bias_shape(), rng, -1.0, 1.0);
      const Tensor<double>* bp = spec.has_bias ? &b : nullptr;
      worst = std::max(worst, max_abs_diff_any(conv2d(x, spec, w, bp), conv_direct_oracle(x, w, bp, spec)));
    }
    CheckReport r = CheckReport::judge("tensor.conv2d_vs_oracle", worst, 1e-12, seed);
    r.detail = "50 random specs, f64";
    return r;
  }));
  out.push_back(detail::timed([&] {
    Rng rng(seed + 1);
    double worst = 0.0;
    for (int t = 0; t < 20; ++t) {
      const std::size_t cin = 1 + rng.below(4);
      const ConvSpec spec = ConvSpec::square(cin, 1 + rng.below(4), 1 + rng.below(4), 1 + rng.below(2),
                                             rng.below(2), 1 + rng.below(2));
      const std::size_t extent = spec.effective_h() + 2 + rng.below(4);
      const Tensor<double> x = random_uniform<double>(Shape{1, cin, extent, extent}, rng, -1.0, 1.0);
      const Tensor<double> w = random_uniform<double>(spec.weight_shape(), rng, -1.0, 1.0);
      const Tensor<double> y = random_uniform<double>(spec.output_shape(x.shape()), rng, -1.0, 1.0);
      const Tensor<double> ax = conv2d(x, spec, w);
      const Tensor<double> aty = conv2d_input_grad(y, spec, w, x.shape());
      double lhs = 0, rhs = 0;
      for (std::size_t i = 0; i < y.size(); ++i) lhs += ax[i] * y[i];
      for (std::size_t i = 0; i < x.size(); ++i) rhs += x[i] * aty[i];
      worst = std::max(worst, std::abs(lhs - rhs));
    }
    return CheckReport::judge("tensor.conv_adjoint", worst, 1e-9, seed + 1);
  }));
  {
    Rng rng(seed + 2);
    Parameter<double> x = fragments::input_param("x", Shape{2, 3, 6, 6}, rng);
    Parameter<double> w("w", random_uniform<double>(Shape{4, 3, 3, 3}, rng, -0.5, 0.5));
    Parameter<double> gamma("gamma", random_uniform<double>(Shape{1, 4, 1, 1}, rng, 0.5, 1.5));
    Parameter<double> beta("beta", random_uniform<double>(Shape{1, 4, 1, 1}, rng, -0.5, 0.5));
    Parameter<double> rm("rm", Tensor<double>(Shape{1, 4, 1, 1}), false);
    Parameter<double> rv("rv", Tensor<double>(Shape{1, 4, 1, 1}, 1.0), false);
    const ConvSpec spec = ConvSpec::square(3, 4, 3, 1, 1);
    Fragment f = [&](Graph<double>& g) {
      Var<double> y = ad::conv2d(g.param(x), g.param(w), std::optional<Var<double>>{}, spec);
      y = ad::batchnorm(y, g.param(gamma), g.param(beta), rm, rv, BatchNormOptions{});
      Var<double> gate = ad::sigmoid(ad::channel_pool(y, PoolMode::avg));
      return probe(ad::mul(y, gate), seed + 3);
    };
    FdOptions opt;
    opt.seed = seed + 2;
    out.push_back(finite_diff_check("tensor.fd_composite", {&x, &w, &gamma, &beta}, f, opt));
    opt.gradient_scale = 1.01;
    out.push_back(expect_failure("tensor.fd_fault_detected",
                                 finite_diff_check("tensor.fd_fault", {&x, &w, &gamma, &beta}, f, opt)));
  }
}

inline void dct(std::uint64_t seed, std::vector<CheckReport>& out) {
  out.push_back(detail::timed([&] {
    Rng rng(seed);
    double worst = 0.0;
    for (int t = 0; t < 100; ++t) {
      const Tensor<double> x = random_uniform<double>(Shape{1, 1, 8, 8}, rng, -1.0, 1.0);
      worst = std::max(worst, max_abs_diff_any(dct2d(x), dct_direct_oracle(x)));
    }
    CheckReport r = CheckReport::judge("dct.dct2d_vs_oracle", worst, 1e-12, seed);
    r.detail = "100 random 8x8 planes";
    return r;
  }));
  out.push_back(detail::timed([&] {
    std::vector<Tensor<double>> basis;
    for (std::size_t u = 0; u < 8; ++u) {
      for (std::size_t v = 0; v < 8; ++v) basis.push_back(dct_basis<double>(u, v, 8, 8).values);
    }
    double worst = 0.0;
    for (std::size_t a = 0; a < basis.size(); ++a) {
      for (std::size_t b = a + 1; b < basis.size(); ++b) {
        double dot = 0;
        for (std::size_t i = 0; i < 64; ++i) dot += basis[a][i] * basis[b][i];
        worst = std::max(worst, std::abs(dot));
      }
    }
    return CheckReport::judge("dct.basis_orthogonality", worst, 1e-9, seed);
  }));
  out.push_back(detail::timed([&] {
    Rng rng(seed + 1);
    const Tensor<double> x = random_uniform<double>(Shape{2, 2, 8, 6}, rng, -1.0, 1.0);
    return CheckReport::judge("dct.inverse_round_trip", max_abs_diff_any(inverse_dct2d(dct2d(x)), x), 1e-12,
                              seed + 1);
  }));
}

inline void hfu(std::uint64_t seed, std::vector<CheckReport>& out) {
  Rng rng(seed);
  HfuConfig hc;
  hc.channels = 8;
  Hfu<double> unit("hfu", hc);
  unit.init(rng);
  Parameter<double> x = fragments::input_param("x", Shape{2, 8, 8, 8}, rng);
  ParamList<double> params{&x};
  unit.collect(params);
  Fragment f = [&](Graph<double>& g) { return probe(unit.forward(g.param(x)), seed + 1); };
  FdOptions opt;
  opt.seed = seed;
  out.push_back(finite_diff_check("hfu.fd", params, f, opt));
  out.push_back(detail::timed([&] {
    Graph<double> g;
    const auto taps = unit.forward_taps(g.constant(x.value()));
    double lo = 1.0, hi = 0.0;
    for (double a : taps.attention.value().data()) {
      lo = std::min(lo, a);
      hi = std::max(hi, a);
    }
    CheckReport r = CheckReport::judge("hfu.attention_in_unit_interval", (lo > 0.0 && hi < 1.0) ? 0.0 : 1.0, 0.0,
                                       seed);
    r.detail = "range [" + std::to_string(lo) + ", " + std::to_string(hi) + "]";
    return r;
  }));
}

inline void lfu(std::uint64_t seed, std::vector<CheckReport>& out) {
  const LfuConfig cfg = LfuConfig::make(16);
  ReparamOptions opt{seed_range(seed, 20), 1e-10, Shape{1, 16, 64, 64}, 0.0};
  out.push_back(reparam_equivalence_check<double>("lfu.reparam_f64", cfg, opt));
  opt.tolerance = 1e-4;
  out.push_back(reparam_equivalence_check<float>("lfu.reparam_f32", cfg, opt));
  ReparamOptions fault{seed_range(seed, 1), 1e-10, Shape{1, 16, 32, 32}, 1e-2};
  out.push_back(expect_failure("lfu.reparam_fault_detected",
                               reparam_equivalence_check<double>("lfu.reparam_fault", cfg, fault)));
  ReparamOptions single{seed_range(seed, 3), 0.0, Shape{1, 8, 16, 16}, 0.0};
  out.push_back(
      reparam_equivalence_check<double>("lfu.single_branch_exact", LfuConfig::make(8, 7, {{7, 1}}), single));

  for (LfuMode mode : {LfuMode::multi_branch, LfuMode::merged}) {
    Rng rng(seed + 1);
    Lfu<double> unit("lfu", LfuConfig::make(8));
    unit.init(rng);
    for (auto& b : unit.branches()) b.bias()->assign(random_uniform<double>(b.bias()->shape(), rng, -0.1, 0.1));
    Parameter<double> x = fragments::input_param("x", Shape{2, 8, 8, 8}, rng);
    ParamList<double> params{&x};
    unit.collect(params);
    Fragment f = [&](Graph<double>& g) { return probe(unit.forward(g.param(x), mode), seed + 2); };
    FdOptions fd;
    fd.seed = seed;
    out.push_back(finite_diff_check(mode == LfuMode::merged ? "lfu.fd_merged" : "lfu.fd_multi_branch", params, f,
                                    fd));
  }
}

inline void css(std::uint64_t seed, std::vector<CheckReport>& out) {
  for (bool symmetric : {false, true}) {
    Rng rng(seed);
    Css<double> unit("css", 4, 4, 8, symmetric);
    unit.init(rng);
    Parameter<double> ih = fragments::input_param("xi_h", Shape{2, 4, 6, 6}, rng);
    Parameter<double> vh = fragments::input_param("xv_h", Shape{2, 4, 6, 6}, rng);
    Parameter<double> il = fragments::input_param("xi_l", Shape{2, 4, 6, 6}, rng);
    Parameter<double> vl = fragments::input_param("xv_l", Shape{2, 4, 6, 6}, rng);
    ParamList<double> params{&ih, &vh, &il, &vl};
    unit.collect(params);
    Fragment f = [&](Graph<double>& g) {
      const auto r = unit.forward(g.param(ih), g.param(vh), g.param(il), g.param(vl));
      return ad::add(probe(r.y_i, seed + 1), probe(r.y_v, seed + 2));
    };
    FdOptions opt;
    opt.seed = seed;
    out.push_back(finite_diff_check(symmetric ? "css.fd_symmetric" : "css.fd", params, f, opt));
  }
  out.push_back(detail::timed([&] {
    double worst = 0.0;
    for (std::size_t c = 2; c <= 64; ++c) {
      for (double alpha : {0.25, 0.5, 0.75}) {
        std::size_t hi = 0;
        try {
          hi = split_point(c, alpha);
        } catch (const ValueError&) {
          continue;
        }
        worst = std::max(worst, std::abs(static_cast<double>(hi + (c - hi)) - static_cast<double>(c)));
      }
    }
    return CheckReport::judge("css.channel_accounting", worst, 0.0, seed);
  }));
}

inline void mrm(std::uint64_t seed, std::vector<CheckReport>& out) {
  out.push_back(detail::timed([&] {
    std::size_t violations = 0;
    for (std::uint64_t s = seed; s < seed + 1000; ++s) {
      const MaskPair m = sample_complementary_masks(64, 64, 0.3, 4, s);
      const MaskPair again = sample_complementary_masks(64, 64, 0.3, 4, s);
      if (m.infrared != again.infrared || m.visible != again.visible) ++violations;
      if (m.union_count() != 77 * 16) ++violations;
      for (std::size_t i = 0; i < m.infrared.size(); ++i) {
        if (m.infrared[i] && m.visible[i]) ++violations;
      }
      for (const auto* mask : {&m.infrared, &m.visible}) {
        for (std::size_t y = 0; y < 64; ++y) {
          for (std::size_t x = 0; x < 64; ++x) {
            if ((*mask)[y * 64 + x] != (*mask)[(y / 4 * 4) * 64 + x / 4 * 4]) ++violations;
          }
        }
      }
    }
    CheckReport r = CheckReport::judge("mrm.mask_contract", static_cast<double>(violations), 0.0, seed);
    r.detail = "1000 seeds, 64x64, p=4, ratio 0.3";
    return r;
  }));
  for (Modality target : {Modality::infrared, Modality::visible}) {
    Rng rng(seed);
    CruConfig cfg;
    cfg.feature_channels = 8;
    cfg.upsample_stages = 1;
    Cru<double> unit("cru", cfg, target);
    unit.init(rng);
    Parameter<double> xs = fragments::input_param("x_self", Shape{2, 8, 4, 4}, rng);
    Parameter<double> xo = fragments::input_param("x_other", Shape{2, 8, 4, 4}, rng);
    ParamList<double> params{&xs, &xo};
    unit.collect(params);
    fragments::randomize_biases(params, rng);
    Fragment f = [&](Graph<double>& g) { return probe(unit.forward(g.param(xs), g.param(xo)), seed + 1); };
    FdOptions opt;
    opt.seed = seed;
    out.push_back(finite_diff_check(std::string("mrm.fd_cru_") + to_string(target), params, f, opt));
  }
}

inline void training(std::uint64_t seed, std::vector<CheckReport>& out) {
  out.push_back(detail::timed([&] {
    Rng rng(seed);
    const Shape si{2, 1, 5, 7}, sv{2, 3, 5, 7};
    const auto fi = random_normal<double>(si, rng), fv = random_normal<double>(sv, rng);
    const auto ii = random_normal<double>(si, rng), iv = random_normal<double>(sv, rng);
    double mi = 0, mv = 0;
    for (std::size_t k = 0; k < fi.size(); ++k) mi += (fi[k] - ii[k]) * (fi[k] - ii[k]);
    for (std::size_t k = 0; k < fv.size(); ++k) mv += (fv[k] - iv[k]) * (fv[k] - iv[k]);
    const double expected = 0.5 * mi / static_cast<double>(fi.size()) + 0.5 * mv / static_cast<double>(fv.size());
    return CheckReport::judge("training.rc_loss_oracle", std::abs(rc_loss(fi, fv, ii, iv) - expected), 1e-12, seed);
  }));
  {
    Rng rng(seed);
    EncoderConfig ec;
    ec.stem_channels = 8;
    ec.stages = 1;
    ec.seed = seed;
    Stem<double> stem("stem", 1, 8);
    stem.init(rng);
    Parameter<double> img = fragments::input_param("image", Shape{2, 1, 8, 8}, rng);
    ParamList<double> params{&img};
    stem.collect(params);
    Fragment f = [&](Graph<double>& g) { return probe(stem.forward(g.param(img), NormMode::train), seed + 1); };
    FdOptions opt;
    opt.seed = seed;
    out.push_back(finite_diff_check("training.fd_stem", params, f, opt));

    // Targets sit close to the current reconstructions so the loss value is
    // small next to its gradients; otherwise rounding of the loss itself
    // (eps * loss / step) swamps coordinates with gradients below ~1e-7.
    ReconstructionModel<double> model(ec, cru_config_for(ec));
    const MaskPair masks = sample_complementary_masks(4, 4, 0.5, 1, seed);
    const Tensor<double> ii = random_uniform<double>(Shape{2, 1, 8, 8}, rng, 0.0, 1.0);
    const Tensor<double> iv = random_uniform<double>(Shape{2, 3, 8, 8}, rng, 0.0, 1.0);
    ParamList<double> all = model.parameters();
    fragments::randomize_biases(all, rng);
    const auto near = [&](const Tensor<double>& t) {
      Tensor<double> r = t;
      for (auto& v : r.data()) v += 0.02 * rng.uniform(-1.0, 1.0);
      return r;
    };
    Tensor<double> ti, tv;
    {
      Graph<double> g;
      auto o = model.forward(g.constant(ii), g.constant(iv), &masks, NormMode::train);
      ti = near(o.recon_i.value());
      tv = near(o.recon_v.value());
    }
    Fragment loss = [&](Graph<double>& g) {
      auto o = model.forward(g.constant(ii), g.constant(iv), &masks, NormMode::train);
      return ad::rc_loss(o.recon_i, o.recon_v, g.constant(ti), g.constant(tv));
    };
    out.push_back(finite_diff_check("training.fd_rc_loss_model", all, loss, opt));

    CruConfig cc;
    cc.feature_channels = 8;
    cc.upsample_stages = 1;
    Cru<double> cru_i("cru_ir", cc, Modality::infrared);
    Cru<double> cru_v("cru_vis", cc, Modality::visible);
    cru_i.init(rng);
    cru_v.init(rng);
    Parameter<double> fi = fragments::input_param("feat_i", Shape{1, 8, 4, 4}, rng);
    Parameter<double> fv = fragments::input_param("feat_v", Shape{1, 8, 4, 4}, rng);
    ParamList<double> heads{&fi, &fv};
    cru_i.collect(heads);
    cru_v.collect(heads);
    fragments::randomize_biases(heads, rng);
    const MaskPair feature_masks = sample_complementary_masks(4, 4, 0.5, 1, seed + 1);
    const auto reconstruct = [&](Graph<double>& g) {
      auto [mi, mv] = ad::apply_masks(g.param(fi), g.param(fv), feature_masks);
      return std::pair{cru_i.forward(mi, mv), cru_v.forward(mv, mi)};
    };
    Parameter<double> target_i, target_v;
    {
      Graph<double> g;
      auto [ri, rv] = reconstruct(g);
      target_i = Parameter<double>("target_i", near(ri.value()));
      target_v = Parameter<double>("target_v", near(rv.value()));
    }
    heads.push_back(&target_i);
    heads.push_back(&target_v);
    Fragment composite = [&](Graph<double>& g) {
      auto [ri, rv] = reconstruct(g);
      return ad::rc_loss(ri, rv, g.param(target_i), g.param(target_v));
    };
    out.push_back(finite_diff_check("training.fd_rc_loss_cru", heads, composite, opt));
  }
  out.push_back(detail::timed([&] {
    TrainConfig tc;
    tc.steps = 3;
    tc.image_size = 32;
    tc.dataset_count = 2;
    tc.mask_patch = 1;
    tc.seed = seed;
    EncoderConfig ec;
    ec.stem_channels = 8;
    ec.stages = 2;
    const auto a = toy_train_run<float>(tc, ec, LossWeights{1.0, 0.0});
    const auto b = toy_train_run<float>(tc, ec, LossWeights{1.0, 0.0});
    return CheckReport::judge("training.toy_determinism", a.losses == b.losses ? 0.0 : 1.0, 0.0, seed);
  }));
}

}  // namespace suites

/// Runs the named suites ("all" expands to every suite). Names are validated
/// before anything executes.
inline SuiteReport run_suite(const std::vector<std::string>& names, std::uint64_t seed) {
  std::vector<std::string> selected;
  for (const auto& n : names) {
    if (n == "all") {
      selected.insert(selected.end(), suite_names().begin(), suite_names().end());
    } else if (std::find(suite_names().begin(), suite_names().end(), n) != suite_names().end()) {
      selected.push_back(n);
    } else {
      throw ValueError("unknown suite '" + n + "'");
    }
  }
  if (selected.empty()) throw ValueError("no suites selected");
  SuiteReport report;
  report.seed = seed;
  for (const auto& n : suite_names()) {
    if (std::find(selected.begin(), selected.end(), n) == selected.end()) continue;
    report.suites.push_back(n);
    if (n == "tensor") suites::tensor(seed, report.checks);
    if (n == "dct") suites::dct(seed, report.checks);
    if (n == "hfu") suites::hfu(seed, report.checks);
    if (n == "lfu") suites::lfu(seed, report.checks);
    if (n == "css") suites::css(seed, report.checks);
    if (n == "mrm") suites::mrm(seed, report.checks);
    if (n == "training") suites::training(seed, report.checks);
  }
  return report;
}

}  // namespace fd2

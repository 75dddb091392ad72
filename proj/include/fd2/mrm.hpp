#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "fd2/ad_ops.hpp"
#include "fd2/layers.hpp"

namespace fd2 {

// ---------------------------------------------------------------------------
// Complementary masks

/// Two disjoint binary spatial masks built from p x p patches. A set cell
/// means "hidden" for that modality.
struct MaskPair {
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t patch = 1;
  double ratio = 0.0;
  std::size_t selected_patches = 0;
  std::vector<std::uint8_t> infrared;
  std::vector<std::uint8_t> visible;

  std::size_t count(const std::vector<std::uint8_t>& m) const {
    return static_cast<std::size_t>(std::count(m.begin(), m.end(), std::uint8_t{1}));
  }
  std::size_t union_count() const { return count(infrared) + count(visible); }

  /// 0/1 plane (1,1,h,w) of one mask.
  template <Scalar T>
  Tensor<T> to_tensor(const std::vector<std::uint8_t>& m) const {
    Tensor<T> t(Shape{1, 1, height, width});
    for (std::size_t i = 0; i < m.size(); ++i) t[i] = m[i] ? T{1} : T{0};
    return t;
  }
};

/// Selects round(ratio * cells) distinct patches of the floor(h/p) x floor(w/p)
/// grid and hands each to the infrared mask with probability `infrared_share`,
/// otherwise to the visible mask. Deterministic in all arguments.
inline MaskPair sample_complementary_masks(std::size_t height, std::size_t width, double ratio, std::size_t patch,
                                           std::uint64_t seed, double infrared_share = 0.5) {
  if (!(ratio > 0.0 && ratio < 1.0)) throw ValueError("masks: ratio must lie in (0,1)");
  if (patch == 0) throw ValueError("masks: patch size must be positive");
  if (!(infrared_share >= 0.0 && infrared_share <= 1.0)) throw ValueError("masks: share must lie in [0,1]");
  const std::size_t rows = height / patch;
  const std::size_t cols = width / patch;
  const std::size_t cells = rows * cols;
  const auto selected = static_cast<std::size_t>(std::floor(ratio * static_cast<double>(cells) + 0.5));
  if (selected < 2) {
    throw ValueError("masks: ratio " + std::to_string(ratio) + " of " + std::to_string(cells) +
                     " patches selects fewer than 2");
  }
  MaskPair m{height, width, patch, ratio, selected, std::vector<std::uint8_t>(height * width, 0),
             std::vector<std::uint8_t>(height * width, 0)};
  Rng rng(seed);
  std::vector<std::size_t> order(cells);
  std::iota(order.begin(), order.end(), std::size_t{0});
  for (std::size_t i = 0; i < selected; ++i) {  // partial Fisher-Yates
    std::swap(order[i], order[i + rng.below(cells - i)]);
  }
  for (std::size_t i = 0; i < selected; ++i) {
    const std::size_t r = order[i] / cols;
    const std::size_t c = order[i] % cols;
    auto& target = rng.uniform() < infrared_share ? m.infrared : m.visible;
    for (std::size_t y = r * patch; y < (r + 1) * patch; ++y) {
      for (std::size_t x = c * patch; x < (c + 1) * patch; ++x) target[y * width + x] = 1;
    }
  }
  return m;
}

namespace detail {

inline void check_mask_extent(const Shape& s, const MaskPair& m) {
  if (s.h != m.height || s.w != m.width) {
    throw ShapeError("apply_masks: feature extents " + std::to_string(s.h) + "x" + std::to_string(s.w) +
                     " != mask extents " + std::to_string(m.height) + "x" + std::to_string(m.width));
  }
}

template <Scalar T>
Tensor<T> zero_positions(const Tensor<T>& x, const std::vector<std::uint8_t>& drop) {
  Tensor<T> y = x;
  const Shape& s = x.shape();
  for (std::size_t n = 0; n < s.n; ++n) {
    for (std::size_t c = 0; c < s.c; ++c) {
      T* p = y.plane(n, c);
      for (std::size_t i = 0; i < s.plane(); ++i) {
        if (drop[i]) p[i] = T{0};
      }
    }
  }
  return y;
}

}  // namespace detail

/// Hides infrared features under mask.infrared and visible features under mask.visible.
template <Scalar T>
std::pair<Tensor<T>, Tensor<T>> apply_masks(const Tensor<T>& feat_i, const Tensor<T>& feat_v, const MaskPair& m) {
  detail::check_mask_extent(feat_i.shape(), m);
  detail::check_mask_extent(feat_v.shape(), m);
  return {detail::zero_positions(feat_i, m.infrared), detail::zero_positions(feat_v, m.visible)};
}

namespace ad {

template <Scalar T>
std::pair<Var<T>, Var<T>> apply_masks(Var<T> feat_i, Var<T> feat_v, const MaskPair& m) {
  fd2::detail::check_mask_extent(feat_i.shape(), m);
  fd2::detail::check_mask_extent(feat_v.shape(), m);
  return {drop_positions(feat_i, m.infrared), drop_positions(feat_v, m.visible)};
}

}  // namespace ad

// ---------------------------------------------------------------------------
// Cross-reconstruction unit

enum class Modality { infrared, visible };

inline std::size_t image_channels(Modality m) { return m == Modality::infrared ? 1 : 3; }
inline const char* to_string(Modality m) { return m == Modality::infrared ? "ir" : "vis"; }

struct CruConfig {
  std::size_t feature_channels = 64;
  /// Number of stride-2 transposed convolutions; log2 of the encoder stride.
  std::size_t upsample_stages = 3;
  std::size_t se_reduction = 4;
  std::size_t min_channels = 4;

  std::size_t cumulative_stride() const { return std::size_t{1} << upsample_stages; }

  /// Channel width after upsampling stage k (halving, floored at min_channels).
  std::size_t up_channels(std::size_t k) const {
    return std::max(min_channels, feature_channels >> (k + 1));
  }
  std::size_t head_channels() const {
    return upsample_stages == 0 ? feature_channels : up_channels(upsample_stages - 1);
  }
};

/// Single-head scaled dot-product attention with queries from one map and
/// keys/values from another; tokens are spatial positions of width C. The key
/// projection has no bias: softmax over keys cancels it.
template <Scalar T>
class CrossAttention {
 public:
  struct Taps {
    Var<T> weights;  // (N,1,Lq,Lk), rows sum to 1
    Var<T> output;
  };

  CrossAttention() = default;
  CrossAttention(const std::string& name, std::size_t channels)
      : channels_(channels),
        query_(name + ".query", ConvSpec::square(channels, channels, 1, 1, 0, 1, 1, true)),
        key_(name + ".key", ConvSpec::square(channels, channels, 1)),
        value_(name + ".value", ConvSpec::square(channels, channels, 1, 1, 0, 1, 1, true)),
        out_(name + ".out", ConvSpec::square(channels, channels, 1, 1, 0, 1, 1, true)) {}

  void init(Rng& rng) {
    for (auto* c : {&query_, &key_, &value_, &out_}) c->init(rng);
  }

  Taps forward_taps(Var<T> query_feat, Var<T> kv_feat) {
    const Shape& qs = query_feat.shape();
    if (qs != kv_feat.shape()) {
      throw ShapeError("cross_attention: " + qs.str() + " vs " + kv_feat.shape().str());
    }
    if (qs.c != channels_) {
      throw ShapeError("cross_attention: expected " + std::to_string(channels_) + " channels, got " +
                       std::to_string(qs.c));
    }
    if (qs.plane() == 0) throw ShapeError("cross_attention: zero tokens");
    Var<T> q = query_.forward(query_feat);
    Var<T> k = key_.forward(kv_feat);
    Var<T> v = value_.forward(kv_feat);
    const T factor = T{1} / std::sqrt(static_cast<T>(channels_));
    Var<T> weights = ad::softmax_rows(ad::token_scores(q, k, factor));
    Var<T> mixed = ad::attend(weights, v, qs.h, qs.w);
    return {weights, out_.forward(mixed)};
  }

  Var<T> forward(Var<T> query_feat, Var<T> kv_feat) { return forward_taps(query_feat, kv_feat).output; }

  void collect(ParamList<T>& out) {
    for (auto* c : {&query_, &key_, &value_, &out_}) c->collect(out);
  }

  Conv2d<T>& query() { return query_; }
  Conv2d<T>& key() { return key_; }
  Conv2d<T>& value() { return value_; }
  Conv2d<T>& out() { return out_; }

 private:
  std::size_t channels_ = 0;
  Conv2d<T> query_, key_, value_, out_;
};

/// Squeeze-excitation gate: x * sigmoid(up(relu(down(GAP(x))))).
template <Scalar T>
class SqueezeExcite {
 public:
  SqueezeExcite() = default;
  SqueezeExcite(const std::string& name, std::size_t channels, std::size_t reduction)
      : down_(name + ".down",
              ConvSpec::square(channels, std::max<std::size_t>(1, channels / reduction), 1, 1, 0, 1, 1, true)),
        up_(name + ".up",
            ConvSpec::square(std::max<std::size_t>(1, channels / reduction), channels, 1, 1, 0, 1, 1, true)) {}

  void init(Rng& rng) {
    down_.init(rng);
    up_.init(rng);
  }

  Var<T> forward(Var<T> x) {
    return ad::mul(x, ad::sigmoid(up_.forward(ad::relu(down_.forward(ad::global_avg_pool(x))))));
  }

  void collect(ParamList<T>& out) {
    down_.collect(out);
    up_.collect(out);
  }

 private:
  Conv2d<T> down_, up_;
};

/// Rebuilds one modality's image from its own and the other modality's
/// last-stage features:
///   x   = relu(conv3x3(x_self))
///   x'  = CA(x, x_other) + SE(relu(conv3x3(squeeze1x1([x, x_other]))))
///   out = conv1x1(relu(conv1x1(upsample(x'))))
/// where upsample is a chain of stride-2 transposed convolutions with ReLU.
template <Scalar T>
class Cru {
 public:
  Cru() = default;
  Cru(const std::string& name, CruConfig cfg, Modality target) : cfg_(cfg), target_(target) {
    const std::size_t c = cfg_.feature_channels;
    if (c == 0) throw ValueError("cru: feature channels must be positive");
    local_ = Conv2d<T>(name + ".local", ConvSpec::square(c, c, 3, 1, 1, 1, 1, true));
    attention_ = CrossAttention<T>(name + ".cross_attention", c);
    squeeze_ = Conv2d<T>(name + ".squeeze", ConvSpec::square(2 * c, c, 1, 1, 0, 1, 1, true));
    refine_ = Conv2d<T>(name + ".refine", ConvSpec::square(c, c, 3, 1, 1, 1, 1, true));
    excite_ = SqueezeExcite<T>(name + ".excite", c, cfg_.se_reduction);
    std::size_t in = c;
    for (std::size_t k = 0; k < cfg_.upsample_stages; ++k) {
      const std::size_t out = cfg_.up_channels(k);
      upsample_.emplace_back(name + ".upsample" + std::to_string(k), ConvSpec::square(in, out, 2, 2, 0, 1, 1, true),
                             true);
      in = out;
    }
    head_hidden_ = Conv2d<T>(name + ".head_hidden", ConvSpec::square(in, in, 1, 1, 0, 1, 1, true));
    head_out_ = Conv2d<T>(name + ".head_out", ConvSpec::square(in, image_channels(target), 1, 1, 0, 1, 1, true));
  }

  void init(Rng& rng) {
    local_.init(rng);
    attention_.init(rng);
    squeeze_.init(rng);
    refine_.init(rng);
    excite_.init(rng);
    for (auto& u : upsample_) u.init(rng);
    head_hidden_.init(rng);
    head_out_.init(rng);
  }

  /// `expected_extent`, when given, is the (h, w) of the image being rebuilt.
  Var<T> forward(Var<T> x_self, Var<T> x_other,
                 std::optional<std::pair<std::size_t, std::size_t>> expected_extent = std::nullopt) {
    if (x_self.shape() != x_other.shape()) {
      throw ShapeError("cru: feature shapes differ " + x_self.shape().str() + " vs " + x_other.shape().str());
    }
    Var<T> x = ad::relu(local_.forward(x_self));
    Var<T> global = attention_.forward(x, x_other);
    Var<T> local = excite_.forward(
        ad::relu(refine_.forward(squeeze_.forward(ad::concat_channels<T>({x, x_other})))));
    Var<T> y = ad::add(global, local);
    for (auto& u : upsample_) y = ad::relu(u.forward(y));
    Var<T> out = head_out_.forward(ad::relu(head_hidden_.forward(y)));
    if (expected_extent) {
      const Shape& s = out.shape();
      if (s.h != expected_extent->first || s.w != expected_extent->second) {
        throw ShapeError("cru: reconstruction " + std::to_string(s.h) + "x" + std::to_string(s.w) +
                         " does not match image " + std::to_string(expected_extent->first) + "x" +
                         std::to_string(expected_extent->second));
      }
    }
    return out;
  }

  void collect(ParamList<T>& out) {
    local_.collect(out);
    attention_.collect(out);
    squeeze_.collect(out);
    refine_.collect(out);
    excite_.collect(out);
    for (auto& u : upsample_) u.collect(out);
    head_hidden_.collect(out);
    head_out_.collect(out);
  }

  ParamList<T> parameters() {
    ParamList<T> out;
    collect(out);
    return out;
  }

  const CruConfig& config() const { return cfg_; }
  Modality target() const { return target_; }
  CrossAttention<T>& attention() { return attention_; }

 private:
  CruConfig cfg_;
  Modality target_ = Modality::visible;
  Conv2d<T> local_;
  CrossAttention<T> attention_;
  Conv2d<T> squeeze_;
  Conv2d<T> refine_;
  SqueezeExcite<T> excite_;
  std::vector<Conv2d<T>> upsample_;
  Conv2d<T> head_hidden_;
  Conv2d<T> head_out_;
};

}  // namespace fd2

#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "fd2/ad_ops.hpp"
#include "fd2/dct.hpp"
#include "fd2/layers.hpp"

namespace fd2 {

// ---------------------------------------------------------------------------
// Configuration

/// One dilated depthwise branch of the low-frequency unit.
struct BranchSpec {
  std::size_t kernel = 3;
  std::size_t dilation = 1;

  std::size_t effective_size() const { return kernel + (kernel - 1) * (dilation - 1); }

  friend constexpr bool operator==(const BranchSpec&, const BranchSpec&) = default;
};

inline std::vector<BranchSpec> default_branches() { return {{7, 1}, {3, 1}, {3, 2}, {3, 3}}; }

inline std::string describe(const BranchSpec& b) {
  return "(k=" + std::to_string(b.kernel) + ", d=" + std::to_string(b.dilation) + ")";
}

struct HfuConfig {
  std::size_t channels = 0;
  std::size_t group_count = 4;
  FrequencyPolicy policy = FrequencyPolicy::zigzag_skip_dc;
  std::vector<FrequencyIndex> custom_frequencies;
  std::size_t attention_kernel = 7;
  bool normalized_basis = false;

  void validate() const {
    if (group_count == 0) throw ValueError("HfuConfig: group_count must be positive");
    if (channels == 0 || channels % group_count != 0) {
      throw ShapeError("HfuConfig: channels " + std::to_string(channels) + " not divisible into " +
                       std::to_string(group_count) + " groups");
    }
    if (attention_kernel % 2 == 0) throw ValueError("HfuConfig: attention kernel must be odd");
  }

  FrequencySet frequencies(std::size_t height, std::size_t width) const {
    return select_frequencies(group_count, height, width, policy, custom_frequencies);
  }
};

/// Low-frequency unit geometry. Construction through make() enforces the
/// receptive-field bound k + (k-1)(d-1) <= RF on every branch.
class LfuConfig {
 public:
  static LfuConfig make(std::size_t channels, std::size_t receptive_field = 7,
                        std::vector<BranchSpec> branches = default_branches()) {
    if (channels == 0) throw ShapeError("LfuConfig: zero channels");
    if (receptive_field == 0 || receptive_field % 2 == 0) {
      throw ValueError("LfuConfig: receptive field must be odd, got " + std::to_string(receptive_field));
    }
    if (branches.empty()) throw ValueError("LfuConfig: no branches");
    for (std::size_t i = 0; i < branches.size(); ++i) {
      const BranchSpec& b = branches[i];
      if (b.kernel == 0 || b.dilation == 0) {
        throw ValueError("LfuConfig: branch " + std::to_string(i) + " " + describe(b) + " is degenerate");
      }
      if (b.effective_size() > receptive_field) {
        throw ValueError("LfuConfig: branch " + std::to_string(i) + " " + describe(b) + " has effective size " +
                         std::to_string(b.effective_size()) + " > RF " + std::to_string(receptive_field));
      }
      if (b.effective_size() % 2 == 0) {
        throw ValueError("LfuConfig: branch " + std::to_string(i) + " " + describe(b) +
                         " has even effective size and cannot stay aligned");
      }
    }
    LfuConfig cfg;
    cfg.channels_ = channels;
    cfg.receptive_field_ = receptive_field;
    cfg.branches_ = std::move(branches);
    return cfg;
  }

  std::size_t channels() const { return channels_; }
  std::size_t receptive_field() const { return receptive_field_; }
  const std::vector<BranchSpec>& branches() const { return branches_; }
  std::size_t bottleneck() const { return std::max<std::size_t>(1, channels_ / 4); }

  ConvSpec branch_spec(std::size_t i) const {
    return ConvSpec::depthwise(channels_, branches_[i].kernel, branches_[i].dilation, true);
  }
  ConvSpec merged_spec() const { return ConvSpec::depthwise(channels_, receptive_field_, 1, true); }

 private:
  LfuConfig() = default;
  std::size_t channels_ = 0;
  std::size_t receptive_field_ = 7;
  std::vector<BranchSpec> branches_;
};

enum class CombinationMode { h_only, l_only, serial_hl, serial_lh, parallel_hl };
enum class LfuMode { multi_branch, merged };

inline const char* to_string(CombinationMode m) {
  switch (m) {
    case CombinationMode::h_only: return "H_only";
    case CombinationMode::l_only: return "L_only";
    case CombinationMode::serial_hl: return "serial_HL";
    case CombinationMode::serial_lh: return "serial_LH";
    case CombinationMode::parallel_hl: return "parallel_HL";
  }
  return "?";
}

inline CombinationMode combination_mode_from_string(const std::string& s) {
  for (auto m : {CombinationMode::h_only, CombinationMode::l_only, CombinationMode::serial_hl,
                 CombinationMode::serial_lh, CombinationMode::parallel_hl}) {
    if (s == to_string(m)) return m;
  }
  throw ValueError("unknown combination mode '" + s + "'");
}

struct EncoderConfig {
  double alpha = 0.5;
  std::size_t stem_channels = 16;
  std::size_t stages = 3;
  std::size_t group_count = 4;
  FrequencyPolicy frequency_policy = FrequencyPolicy::zigzag_skip_dc;
  std::vector<FrequencyIndex> custom_frequencies;
  std::vector<BranchSpec> branches = default_branches();
  std::size_t receptive_field = 7;
  CombinationMode combination_mode = CombinationMode::parallel_hl;
  LfuMode lfu_mode = LfuMode::multi_branch;
  bool symmetric_css = false;
  bool normalized_dct = false;
  std::uint64_t seed = 0;

  std::size_t stage_channels(std::size_t stage) const { return stem_channels << stage; }
  /// Stem stride times one stride-2 downsample between consecutive stages.
  std::size_t cumulative_stride() const { return std::size_t{1} << stages; }
};

// ---------------------------------------------------------------------------
// Stem

/// 6x6 stride-2 CBR block halving the resolution of one modality.
template <Scalar T>
class Stem {
 public:
  Stem() = default;
  Stem(const std::string& name, std::size_t in_channels, std::size_t out_channels)
      : in_channels_(in_channels), block_(name, ConvSpec::square(in_channels, out_channels, 6, 2, 2)) {}

  void init(Rng& rng) { block_.init(rng); }

  Var<T> forward(Var<T> image, NormMode mode) {
    const Shape& s = image.shape();
    if (s.c != in_channels_) {
      throw ShapeError("stem: expected " + std::to_string(in_channels_) + " input channels, got " +
                       std::to_string(s.c));
    }
    if (s.h < 6 || s.w < 6) throw ShapeError("stem: input extents " + s.str() + " smaller than 6x6");
    return block_.forward(image, mode);
  }

  void collect(ParamList<T>& out) { block_.collect(out); }
  const ConvSpec& spec() const { return block_.spec(); }

 private:
  std::size_t in_channels_ = 1;
  ConvBnRelu<T> block_;
};

// ---------------------------------------------------------------------------
// High-frequency unit

template <Scalar T>
class Hfu {
 public:
  struct Taps {
    Var<T> filtered;   // groups multiplied by their basis planes
    Var<T> attention;  // (N,1,h,w) spatial mask in (0,1)
    Var<T> output;
  };

  Hfu() = default;
  Hfu(const std::string& name, HfuConfig cfg)
      : cfg_(validated(std::move(cfg))),
        attention_(name + ".attention",
                   ConvSpec::square(2, 1, cfg_.attention_kernel, 1, cfg_.attention_kernel / 2, 1, 1, true)) {}

  void init(Rng& rng) { attention_.init(rng); }

  /// Basis planes (1,1,h,w) assigned to each group at feature resolution.
  std::vector<Tensor<T>> basis_planes(std::size_t height, std::size_t width) const {
    const FrequencySet set = cfg_.frequencies(height, width);
    std::vector<Tensor<T>> planes;
    planes.reserve(set.size());
    for (const auto& idx : set.indices) {
      planes.push_back(dct_basis<T>(idx.u, idx.v, height, width, cfg_.normalized_basis).values);
    }
    return planes;
  }

  Var<T> filter(Var<T> x) const {
    const Shape& s = x.shape();
    if (s.c != cfg_.channels) {
      throw ShapeError("hfu: expected " + std::to_string(cfg_.channels) + " channels, got " + std::to_string(s.c));
    }
    Graph<T>& g = *x.graph;
    const auto planes = basis_planes(s.h, s.w);
    const std::size_t per_group = s.c / cfg_.group_count;
    std::vector<Var<T>> parts;
    parts.reserve(cfg_.group_count);
    for (std::size_t k = 0; k < cfg_.group_count; ++k) {
      Var<T> group = ad::slice_channels(x, k * per_group, (k + 1) * per_group);
      parts.push_back(ad::mul(group, g.constant(planes[k])));
    }
    return parts.size() == 1 ? parts.front() : ad::concat_channels(parts);
  }

  Taps forward_taps(Var<T> x) {
    Var<T> filtered = filter(x);
    Var<T> pooled = ad::concat_channels<T>(
        {ad::channel_pool(filtered, PoolMode::avg), ad::channel_pool(filtered, PoolMode::max)});
    Var<T> mask = ad::sigmoid(attention_.forward(pooled));
    return {filtered, mask, ad::mul(filtered, mask)};
  }

  Var<T> forward(Var<T> x) { return forward_taps(x).output; }

  void collect(ParamList<T>& out) { attention_.collect(out); }
  const HfuConfig& config() const { return cfg_; }

  static HfuConfig validated(HfuConfig cfg) {
    cfg.validate();
    return cfg;
  }
  const Conv2d<T>& attention() const { return attention_; }
  Conv2d<T>& attention() { return attention_; }

 private:
  HfuConfig cfg_;
  Conv2d<T> attention_;
};

// ---------------------------------------------------------------------------
// Low-frequency unit

/// Single depthwise RF x RF kernel equivalent to the sum of all branches.
template <Scalar T>
struct MergedKernel {
  Tensor<T> weight;  // (channels, 1, RF, RF)
  Tensor<T> bias;    // (1, channels, 1, 1)
};

/// Inserts dilation-1 zeros between the taps of a (C,1,k,k) kernel.
template <Scalar T>
Tensor<T> dilate_kernel(const Tensor<T>& w, std::size_t dilation) {
  const Shape& s = w.shape();
  return ad::embed_kernel(w, dilation, dilation * (s.h - 1) + 1);
}

/// Centres a (C,1,e,e) kernel inside an RF x RF kernel of zeros.
template <Scalar T>
Tensor<T> pad_kernel(const Tensor<T>& w, std::size_t rf) {
  return ad::embed_kernel(w, 1, rf);
}

template <Scalar T>
MergedKernel<T> merge_branches(const std::vector<Tensor<T>>& weights, const std::vector<Tensor<T>>& biases,
                               const LfuConfig& cfg) {
  const auto& branches = cfg.branches();
  if (weights.size() != branches.size() || biases.size() != branches.size()) {
    throw ShapeError("merge_branches: expected " + std::to_string(branches.size()) + " weights and biases");
  }
  const std::size_t c = cfg.channels();
  const std::size_t rf = cfg.receptive_field();
  MergedKernel<T> merged{Tensor<T>(Shape{c, 1, rf, rf}), Tensor<T>(Shape{1, c, 1, 1})};
  for (std::size_t i = 0; i < branches.size(); ++i) {
    const BranchSpec& b = branches[i];
    const Shape expected{c, 1, b.kernel, b.kernel};
    if (weights[i].shape() != expected) {
      throw ShapeError("merge_branches: branch " + std::to_string(i) + " weight " + weights[i].shape().str() +
                       " != " + expected.str());
    }
    if (b.effective_size() > rf) {
      throw ValueError("merge_branches: branch " + std::to_string(i) + " " + describe(b) + " exceeds RF " +
                       std::to_string(rf));
    }
    const Tensor<T> placed = pad_kernel(dilate_kernel(weights[i], b.dilation), rf);
    for (std::size_t k = 0; k < placed.size(); ++k) merged.weight[k] += placed[k];
    if (biases[i].shape() != Shape{1, c, 1, 1}) {
      throw ShapeError("merge_branches: branch " + std::to_string(i) + " bias " + biases[i].shape().str());
    }
    for (std::size_t k = 0; k < c; ++k) merged.bias[k] += biases[i][k];
  }
  return merged;
}

template <Scalar T>
class Lfu {
 public:
  Lfu() = default;
  Lfu(const std::string& name, LfuConfig cfg)
      : cfg_(std::move(cfg)),
        down_(name + ".mix_down", ConvSpec::square(cfg_.channels(), cfg_.bottleneck(), 1, 1, 0, 1, 1, true)),
        up_(name + ".mix_up", ConvSpec::square(cfg_.bottleneck(), cfg_.channels(), 1, 1, 0, 1, 1, true)) {
    for (std::size_t i = 0; i < cfg_.branches().size(); ++i) {
      branches_.emplace_back(name + ".branch" + std::to_string(i), cfg_.branch_spec(i));
    }
  }

  void init(Rng& rng) {
    for (auto& b : branches_) b.init(rng);
    down_.init(rng);
    up_.init(rng);
  }

  /// Multi-scale depthwise stage before the channel mix.
  Var<T> spatial(Var<T> x, LfuMode mode) {
    check_input(x);
    if (mode == LfuMode::multi_branch) {
      Var<T> acc = branches_.front().forward(x);
      for (std::size_t i = 1; i < branches_.size(); ++i) acc = ad::add(acc, branches_[i].forward(x));
      return acc;
    }
    Graph<T>& g = *x.graph;
    const std::size_t rf = cfg_.receptive_field();
    Var<T> weight = ad::embed_kernel(g.param(branches_.front().weight()), cfg_.branches().front().dilation, rf);
    Var<T> bias = g.param(*branches_.front().bias());
    for (std::size_t i = 1; i < branches_.size(); ++i) {
      weight = ad::add(weight, ad::embed_kernel(g.param(branches_[i].weight()), cfg_.branches()[i].dilation, rf));
      bias = ad::add(bias, g.param(*branches_[i].bias()));
    }
    return ad::conv2d(x, weight, std::optional<Var<T>>(bias), cfg_.merged_spec());
  }

  /// Gate = sigmoid(up(relu(down(GAP(x))))), output = x * gate.
  Var<T> channel_mix(Var<T> x) {
    Var<T> gate = ad::sigmoid(up_.forward(ad::relu(down_.forward(ad::global_avg_pool(x)))));
    return ad::mul(x, gate);
  }

  Var<T> forward(Var<T> x, LfuMode mode) { return channel_mix(spatial(x, mode)); }

  /// Merged-mode forward with an externally supplied kernel (held constant).
  Var<T> forward_with_kernel(Var<T> x, const MergedKernel<T>& kernel) {
    check_input(x);
    Graph<T>& g = *x.graph;
    Var<T> y = ad::conv2d(x, g.constant(kernel.weight), std::optional<Var<T>>(g.constant(kernel.bias)),
                          cfg_.merged_spec());
    return channel_mix(y);
  }

  MergedKernel<T> merged_kernel() const {
    std::vector<Tensor<T>> weights, biases;
    for (const auto& b : branches_) {
      weights.push_back(b.weight().value());
      biases.push_back(b.bias()->value());
    }
    return merge_branches(weights, biases, cfg_);
  }

  void collect(ParamList<T>& out) {
    for (auto& b : branches_) b.collect(out);
    down_.collect(out);
    up_.collect(out);
  }

  const LfuConfig& config() const { return cfg_; }
  std::vector<Conv2d<T>>& branches() { return branches_; }

 private:
  void check_input(Var<T> x) const {
    if (x.shape().c != cfg_.channels()) {
      throw ShapeError("lfu: expected " + std::to_string(cfg_.channels()) + " channels, got " +
                       std::to_string(x.shape().c));
    }
  }

  LfuConfig cfg_ = LfuConfig::make(1, 7);
  std::vector<Conv2d<T>> branches_;
  Conv2d<T> down_;
  Conv2d<T> up_;
};

// ---------------------------------------------------------------------------
// Complementary strengths strategy

template <Scalar T>
struct CssResult {
  Var<T> y_i;
  Var<T> y_v;
  Var<T> fused_i;  // [high, low] of the infrared stream before its convolution
  Var<T> fused_v;
};

/// Cross-modal addition of the dominant band followed by a per-modality 3x3 fusion.
/// Asymmetric by default: infrared high += visible high, visible low += infrared low.
template <Scalar T>
class Css {
 public:
  Css() = default;
  Css(const std::string& name, std::size_t high_channels, std::size_t low_channels, std::size_t out_channels,
      bool symmetric = false)
      : symmetric_(symmetric),
        fuse_i_(name + ".fuse_ir",
                ConvSpec::square(high_channels + low_channels, out_channels, 3, 1, 1, 1, 1, true)),
        fuse_v_(name + ".fuse_vis",
                ConvSpec::square(high_channels + low_channels, out_channels, 3, 1, 1, 1, 1, true)) {}

  void init(Rng& rng) {
    fuse_i_.init(rng);
    fuse_v_.init(rng);
  }

  /// The parameter-free addition stage alone.
  std::pair<Var<T>, Var<T>> recouple(Var<T> xi_h, Var<T> xv_h, Var<T> xi_l, Var<T> xv_l) const {
    check(xi_h, xv_h, xi_l, xv_l);
    Var<T> hi = ad::add(xi_h, xv_h);
    Var<T> lv = ad::add(xv_l, xi_l);
    Var<T> hv = symmetric_ ? ad::add(xv_h, xi_h) : xv_h;
    Var<T> li = symmetric_ ? ad::add(xi_l, xv_l) : xi_l;
    return {ad::concat_channels<T>({hi, li}), ad::concat_channels<T>({hv, lv})};
  }

  CssResult<T> forward(Var<T> xi_h, Var<T> xv_h, Var<T> xi_l, Var<T> xv_l) {
    auto [fi, fv] = recouple(xi_h, xv_h, xi_l, xv_l);
    return {fuse_i_.forward(fi), fuse_v_.forward(fv), fi, fv};
  }

  void collect(ParamList<T>& out) {
    fuse_i_.collect(out);
    fuse_v_.collect(out);
  }

  std::vector<ConvSpec> conv_specs() const { return {fuse_i_.spec(), fuse_v_.spec()}; }

 private:
  static void check(Var<T> xi_h, Var<T> xv_h, Var<T> xi_l, Var<T> xv_l) {
    if (xi_h.shape() != xv_h.shape()) {
      throw ShapeError("css: high-frequency shapes differ " + xi_h.shape().str() + " vs " + xv_h.shape().str());
    }
    if (xi_l.shape() != xv_l.shape()) {
      throw ShapeError("css: low-frequency shapes differ " + xi_l.shape().str() + " vs " + xv_l.shape().str());
    }
    const Shape& h = xi_h.shape();
    const Shape& l = xi_l.shape();
    if (h.n != l.n || h.h != l.h || h.w != l.w) {
      throw ShapeError("css: high " + h.str() + " and low " + l.str() + " disagree outside channels");
    }
  }

  bool symmetric_ = false;
  Conv2d<T> fuse_i_;
  Conv2d<T> fuse_v_;
};

// ---------------------------------------------------------------------------
// Stage and encoder

template <Scalar T>
using FeaturePair = std::pair<Var<T>, Var<T>>;

/// One encoder stage: per modality HFU/LFU arranged by the combination mode,
/// then CSS fusion back to `channels`.
template <Scalar T>
class FdeStage {
 public:
  struct Counters {
    std::size_t hfu_calls = 0;
    std::size_t lfu_calls = 0;
  };

  FdeStage() = default;
  FdeStage(const std::string& name, std::size_t channels, const EncoderConfig& cfg)
      : channels_(channels), alpha_(cfg.alpha), mode_(cfg.combination_mode), lfu_mode_(cfg.lfu_mode) {
    const bool serial = mode_ == CombinationMode::serial_hl || mode_ == CombinationMode::serial_lh;
    const std::size_t high = serial ? channels : split_point(channels, cfg.alpha);
    const std::size_t low = serial ? channels : channels - high;
    if (mode_ != CombinationMode::l_only) {
      HfuConfig hc{high, cfg.group_count, cfg.frequency_policy, cfg.custom_frequencies, 7, cfg.normalized_dct};
      hfu_i_.emplace(name + ".ir.hfu", hc);
      hfu_v_.emplace(name + ".vis.hfu", hc);
    }
    if (mode_ != CombinationMode::h_only) {
      const LfuConfig lc = LfuConfig::make(low, cfg.receptive_field, cfg.branches);
      lfu_i_.emplace(name + ".ir.lfu", lc);
      lfu_v_.emplace(name + ".vis.lfu", lc);
    }
    css_ = Css<T>(name + ".css", high, low, channels, cfg.symmetric_css);
  }

  void init(Rng& rng) {
    if (hfu_i_) {
      hfu_i_->init(rng);
      hfu_v_->init(rng);
    }
    if (lfu_i_) {
      lfu_i_->init(rng);
      lfu_v_->init(rng);
    }
    css_.init(rng);
  }

  FeaturePair<T> forward(Var<T> x_i, Var<T> x_v) {
    for (Var<T> x : {x_i, x_v}) {
      if (x.shape().c != channels_) {
        throw ShapeError("fde_stage: expected " + std::to_string(channels_) + " channels, got " +
                         std::to_string(x.shape().c));
      }
    }
    auto [hi, li] = decompose(x_i, hfu_i_, lfu_i_);
    auto [hv, lv] = decompose(x_v, hfu_v_, lfu_v_);
    CssResult<T> r = css_.forward(hi, hv, li, lv);
    return {r.y_i, r.y_v};
  }

  void collect(ParamList<T>& out) {
    if (hfu_i_) {
      hfu_i_->collect(out);
      hfu_v_->collect(out);
    }
    if (lfu_i_) {
      lfu_i_->collect(out);
      lfu_v_->collect(out);
    }
    css_.collect(out);
  }

  std::vector<ConvSpec> conv_specs() const {
    std::vector<ConvSpec> specs;
    for (const auto* h : {&hfu_i_, &hfu_v_}) {
      if (*h) specs.push_back((*h)->attention().spec());
    }
    for (const auto* l : {&lfu_i_, &lfu_v_}) {
      if (!*l) continue;
      const LfuConfig& lc = (*l)->config();
      for (std::size_t i = 0; i < lc.branches().size(); ++i) specs.push_back(lc.branch_spec(i));
      specs.push_back(ConvSpec::square(lc.channels(), lc.bottleneck(), 1, 1, 0, 1, 1, true));
      specs.push_back(ConvSpec::square(lc.bottleneck(), lc.channels(), 1, 1, 0, 1, 1, true));
    }
    for (const auto& s : css_.conv_specs()) specs.push_back(s);
    return specs;
  }

  const Counters& counters() const { return counters_; }
  void reset_counters() { counters_ = {}; }
  Hfu<T>* hfu_ir() { return hfu_i_ ? &*hfu_i_ : nullptr; }
  Lfu<T>* lfu_ir() { return lfu_i_ ? &*lfu_i_ : nullptr; }
  Css<T>& css() { return css_; }

 private:
  Var<T> run_hfu(std::optional<Hfu<T>>& unit, Var<T> x) {
    ++counters_.hfu_calls;
    return unit->forward(x);
  }
  Var<T> run_lfu(std::optional<Lfu<T>>& unit, Var<T> x) {
    ++counters_.lfu_calls;
    return unit->forward(x, lfu_mode_);
  }

  /// Returns the (high, low) pair that feeds CSS.
  std::pair<Var<T>, Var<T>> decompose(Var<T> x, std::optional<Hfu<T>>& hfu, std::optional<Lfu<T>>& lfu) {
    switch (mode_) {
      case CombinationMode::serial_hl: {
        Var<T> h = run_hfu(hfu, x);
        return {h, run_lfu(lfu, h)};
      }
      case CombinationMode::serial_lh: {
        Var<T> l = run_lfu(lfu, x);
        return {run_hfu(hfu, l), l};
      }
      default:
        break;
    }
    auto [high, low] = ad::channel_split(x, alpha_);
    if (mode_ != CombinationMode::l_only) high = run_hfu(hfu, high);
    if (mode_ != CombinationMode::h_only) low = run_lfu(lfu, low);
    return {high, low};
  }

  std::size_t channels_ = 0;
  double alpha_ = 0.5;
  CombinationMode mode_ = CombinationMode::parallel_hl;
  LfuMode lfu_mode_ = LfuMode::multi_branch;
  std::optional<Hfu<T>> hfu_i_, hfu_v_;
  std::optional<Lfu<T>> lfu_i_, lfu_v_;
  Css<T> css_;
  Counters counters_;
};

/// Dual-stream feature decomposition encoder: stems, then `stages` FDE stages
/// with a stride-2 CBR downsample (channel doubling) before every stage but the first.
template <Scalar T>
class Encoder {
 public:
  explicit Encoder(EncoderConfig cfg) : cfg_(std::move(cfg)) {
    if (cfg_.stages == 0) throw ValueError("encoder: at least one stage required");
    if (cfg_.stem_channels == 0) throw ValueError("encoder: stem_channels must be positive");
    stem_i_ = Stem<T>("encoder.stem_ir", 1, cfg_.stem_channels);
    stem_v_ = Stem<T>("encoder.stem_vis", 3, cfg_.stem_channels);
    for (std::size_t s = 0; s < cfg_.stages; ++s) {
      const std::string prefix = "encoder.stage" + std::to_string(s);
      const std::size_t c = cfg_.stage_channels(s);
      if (s > 0) {
        const ConvSpec down = ConvSpec::square(c / 2, c, 3, 2, 1);
        down_i_.emplace_back(prefix + ".down_ir", down);
        down_v_.emplace_back(prefix + ".down_vis", down);
      }
      stages_.emplace_back(prefix, c, cfg_);
    }
    Rng rng(cfg_.seed);
    stem_i_.init(rng);
    stem_v_.init(rng);
    for (std::size_t s = 0; s < cfg_.stages; ++s) {
      if (s > 0) {
        down_i_[s - 1].init(rng);
        down_v_[s - 1].init(rng);
      }
      stages_[s].init(rng);
    }
  }

  Encoder(const Encoder&) = delete;
  Encoder& operator=(const Encoder&) = delete;
  Encoder(Encoder&&) = default;
  Encoder& operator=(Encoder&&) = default;

  std::vector<FeaturePair<T>> forward(Var<T> image_i, Var<T> image_v, NormMode mode) {
    const Shape& si = image_i.shape();
    const Shape& sv = image_v.shape();
    if (si.n != sv.n || si.h != sv.h || si.w != sv.w) {
      throw ShapeError("encoder: image pair not aligned " + si.str() + " vs " + sv.str());
    }
    const std::size_t stride = cfg_.cumulative_stride();
    if (si.h % stride != 0 || si.w % stride != 0) {
      throw ShapeError("encoder: extents " + std::to_string(si.h) + "x" + std::to_string(si.w) +
                       " cannot be downsampled by " + std::to_string(stride));
    }
    std::vector<FeaturePair<T>> out;
    Var<T> xi = stem_i_.forward(image_i, mode);
    Var<T> xv = stem_v_.forward(image_v, mode);
    for (std::size_t s = 0; s < cfg_.stages; ++s) {
      if (s > 0) {
        xi = down_i_[s - 1].forward(xi, mode);
        xv = down_v_[s - 1].forward(xv, mode);
      }
      auto [yi, yv] = stages_[s].forward(xi, xv);
      out.emplace_back(yi, yv);
      xi = yi;
      xv = yv;
    }
    return out;
  }

  void collect(ParamList<T>& out) {
    stem_i_.collect(out);
    stem_v_.collect(out);
    for (std::size_t s = 0; s < cfg_.stages; ++s) {
      if (s > 0) {
        down_i_[s - 1].collect(out);
        down_v_[s - 1].collect(out);
      }
      stages_[s].collect(out);
    }
  }

  ParamList<T> parameters() {
    ParamList<T> out;
    collect(out);
    return out;
  }

  /// Every convolution the encoder declares.
  std::vector<ConvSpec> conv_specs() const {
    std::vector<ConvSpec> specs{stem_i_.spec(), stem_v_.spec()};
    for (std::size_t s = 0; s < cfg_.stages; ++s) {
      if (s > 0) {
        specs.push_back(down_i_[s - 1].spec());
        specs.push_back(down_v_[s - 1].spec());
      }
      for (const auto& c : stages_[s].conv_specs()) specs.push_back(c);
    }
    return specs;
  }

  /// Channel counts of every batch normalization (gamma and beta each).
  std::vector<std::size_t> norm_channels() const {
    std::vector<std::size_t> chans{cfg_.stem_channels, cfg_.stem_channels};
    for (std::size_t s = 1; s < cfg_.stages; ++s) {
      chans.push_back(cfg_.stage_channels(s));
      chans.push_back(cfg_.stage_channels(s));
    }
    return chans;
  }

  const EncoderConfig& config() const { return cfg_; }
  FdeStage<T>& stage(std::size_t s) { return stages_.at(s); }
  std::size_t stage_count() const { return stages_.size(); }

 private:
  EncoderConfig cfg_;
  Stem<T> stem_i_, stem_v_;
  std::vector<ConvBnRelu<T>> down_i_, down_v_;
  std::vector<FdeStage<T>> stages_;
};

}  // namespace fd2

#pragma once

#include <chrono>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "json.hpp"

#include "fd2/ad_ops.hpp"
#include "fd2/fde.hpp"
#include "fd2/mrm.hpp"

namespace fd2 {

struct LossWeights {
  double lambda1 = 1.0;
  double lambda2 = 1.0;

  void validate() const {
    if (!(lambda1 >= 0.0) || !(lambda2 >= 0.0)) throw ValueError("loss weights must be non-negative");
    if (lambda1 == 0.0 && lambda2 == 0.0) throw ValueError("loss weights cannot both be zero");
  }
};

struct TrainConfig {
  double learning_rate = 0.01;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  std::size_t steps = 200;
  std::size_t batch_size = 2;
  std::uint64_t seed = 42;
  std::size_t image_size = 64;
  std::size_t dataset_count = 8;
  double mask_ratio = 0.3;
  std::size_t mask_patch = 2;
  double mask_infrared_share = 0.5;

  void validate() const {
    if (!(learning_rate > 0.0)) throw ValueError("learning_rate must be positive");
    if (steps < 1) throw ValueError("steps must be >= 1");
    if (batch_size < 1) throw ValueError("batch_size must be >= 1");
    if (dataset_count < 1) throw ValueError("dataset_count must be >= 1");
  }
};

// ---------------------------------------------------------------------------
// Losses

/// 1/2 * mean((f_i - I)^2) + 1/2 * mean((f_v - V)^2).
template <Scalar T>
double rc_loss(const Tensor<T>& f_i, const Tensor<T>& f_v, const Tensor<T>& image_i, const Tensor<T>& image_v) {
  const auto half_mse = [](const Tensor<T>& a, const Tensor<T>& b) {
    if (a.shape() != b.shape()) throw ShapeError("rc_loss: " + a.shape().str() + " vs " + b.shape().str());
    double acc = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
      const double d = static_cast<double>(a[i]) - b[i];
      acc += d * d;
    }
    return 0.5 * acc / static_cast<double>(a.size());
  };
  return half_mse(f_i, image_i) + half_mse(f_v, image_v);
}

inline double total_loss(double l_rc, double l_det, const LossWeights& w) {
  if (!std::isfinite(l_rc) || !std::isfinite(l_det)) throw ValueError("total_loss: non-finite loss input");
  return w.lambda1 * l_rc + w.lambda2 * l_det;
}

namespace ad {

template <Scalar T>
Var<T> rc_loss(Var<T> f_i, Var<T> f_v, Var<T> image_i, Var<T> image_v) {
  return add(scale(mse(f_i, image_i), T{0.5}), scale(mse(f_v, image_v), T{0.5}));
}

/// lambda1 * l_rc + lambda2 * l_det with the detection term supplied as a scalar.
template <Scalar T>
Var<T> total_loss(Var<T> l_rc, double l_det, const LossWeights& w) {
  if (!l_rc.value().all_finite() || !std::isfinite(l_det)) throw ValueError("total_loss: non-finite loss input");
  Graph<T>& g = *l_rc.graph;
  Var<T> det = g.constant(Tensor<T>::scalar(static_cast<T>(w.lambda2 * l_det)));
  return add(scale(l_rc, static_cast<T>(w.lambda1)), det);
}

}  // namespace ad

// ---------------------------------------------------------------------------
// Optimizer

struct SgdOptions {
  double learning_rate = 0.01;
  double momentum = 0.9;
  double weight_decay = 1e-4;
};

/// Momentum SGD with L2 weight decay folded into the gradient:
///   v <- m*v + (g + wd*w);  w <- w - lr*v;  g <- 0.
template <Scalar T>
class Sgd {
 public:
  Sgd(ParamList<T> params, SgdOptions opt) : params_(std::move(params)), opt_(opt) {
    if (!(opt_.learning_rate > 0.0)) throw ValueError("sgd: learning rate must be positive");
    for (auto* p : params_) {
      if (p->trainable()) velocity_.emplace(p, Tensor<T>(p->shape()));
    }
  }

  void step() {
    const T lr = static_cast<T>(opt_.learning_rate);
    const T m = static_cast<T>(opt_.momentum);
    const T wd = static_cast<T>(opt_.weight_decay);
    for (auto* p : params_) {
      if (!p->trainable()) continue;
      Tensor<T>& v = velocity_.at(p);
      Tensor<T>& w = p->mutable_value();
      const Tensor<T>& g = p->grad();
      for (std::size_t i = 0; i < w.size(); ++i) {
        v[i] = m * v[i] + (g[i] + wd * w[i]);
        w[i] -= lr * v[i];
      }
      p->zero_grad();
    }
  }

  const Tensor<T>& velocity(const Parameter<T>& p) const { return velocity_.at(&p); }

 private:
  ParamList<T> params_;
  SgdOptions opt_;
  std::unordered_map<const Parameter<T>*, Tensor<T>> velocity_;
};

// ---------------------------------------------------------------------------
// Full reconstruction model

/// CRU geometry matching an encoder's last stage.
inline CruConfig cru_config_for(const EncoderConfig& enc) {
  CruConfig c;
  c.feature_channels = enc.stage_channels(enc.stages - 1);
  c.upsample_stages = enc.stages;
  return c;
}

template <Scalar T>
class ReconstructionModel {
 public:
  struct Output {
    std::vector<FeaturePair<T>> stages;
    Var<T> recon_i;
    Var<T> recon_v;
  };

  ReconstructionModel(EncoderConfig enc, CruConfig cru)
      : encoder_(std::move(enc)),
        cru_i_("cru_ir", cru, Modality::infrared),
        cru_v_("cru_vis", cru, Modality::visible) {
    const EncoderConfig& ec = encoder_.config();
    if (cru.cumulative_stride() != ec.cumulative_stride()) {
      throw ValueError("model: CRU upsampling stride " + std::to_string(cru.cumulative_stride()) +
                       " != encoder stride " + std::to_string(ec.cumulative_stride()));
    }
    if (cru.feature_channels != ec.stage_channels(ec.stages - 1)) {
      throw ValueError("model: CRU feature channels " + std::to_string(cru.feature_channels) +
                       " != last stage channels " + std::to_string(ec.stage_channels(ec.stages - 1)));
    }
    Rng rng(ec.seed ^ 0x9E3779B97F4A7C15ULL);
    cru_i_.init(rng);
    cru_v_.init(rng);
  }

  /// Masks, if given, hide last-stage features before reconstruction.
  Output forward(Var<T> image_i, Var<T> image_v, const MaskPair* masks, NormMode mode) {
    Output out;
    out.stages = encoder_.forward(image_i, image_v, mode);
    auto [fi, fv] = out.stages.back();
    if (masks != nullptr) std::tie(fi, fv) = ad::apply_masks(fi, fv, *masks);
    const std::pair<std::size_t, std::size_t> extent{image_i.shape().h, image_i.shape().w};
    out.recon_i = cru_i_.forward(fi, fv, extent);
    out.recon_v = cru_v_.forward(fv, fi, extent);
    return out;
  }

  ParamList<T> parameters() {
    ParamList<T> out;
    encoder_.collect(out);
    cru_i_.collect(out);
    cru_v_.collect(out);
    return out;
  }

  Encoder<T>& encoder() { return encoder_; }
  Cru<T>& cru(Modality m) { return m == Modality::infrared ? cru_i_ : cru_v_; }

 private:
  Encoder<T> encoder_;
  Cru<T> cru_i_;
  Cru<T> cru_v_;
};

// ---------------------------------------------------------------------------
// Synthetic paired data

template <Scalar T>
struct ImagePair {
  Tensor<T> infrared;  // (N,1,H,W)
  Tensor<T> visible;   // (N,3,H,W)
};

/// Independent stream seed for (seed, stream, index).
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream, std::uint64_t index) {
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (stream + 1) + 0xBF58476D1CE4E5B9ULL * (index + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

/// Paired scenes sharing one geometry: a few warm ellipses and boxes over a
/// cool background. The visible image is a smooth colour gradient with the
/// objects painted in plus fine sinusoidal texture; the infrared image is the
/// blurred single-channel heat map of the same objects.
template <Scalar T>
std::vector<ImagePair<T>> make_synthetic_pairs(std::size_t count, std::size_t height, std::size_t width,
                                               std::uint64_t seed) {
  std::vector<ImagePair<T>> pairs;
  pairs.reserve(count);
  const double two_pi = 6.283185307179586;
  for (std::size_t k = 0; k < count; ++k) {
    Rng rng(derive_seed(seed, 1, k));
    std::vector<double> heat(height * width, rng.uniform(0.1, 0.25));
    std::vector<double> rgb(3 * height * width);
    double base[3], gx[3], gy[3];
    for (int c = 0; c < 3; ++c) {
      base[c] = rng.uniform(0.2, 0.5);
      gx[c] = rng.uniform(-0.2, 0.2);
      gy[c] = rng.uniform(-0.2, 0.2);
    }
    for (std::size_t i = 0; i < height; ++i) {
      for (std::size_t j = 0; j < width; ++j) {
        const double y = static_cast<double>(i) / static_cast<double>(height);
        const double x = static_cast<double>(j) / static_cast<double>(width);
        for (int c = 0; c < 3; ++c) rgb[(c * height + i) * width + j] = base[c] + gx[c] * x + gy[c] * y;
      }
    }
    const std::size_t objects = 2 + rng.below(3);
    for (std::size_t o = 0; o < objects; ++o) {
      const double cy = rng.uniform(0.15, 0.85) * static_cast<double>(height);
      const double cx = rng.uniform(0.15, 0.85) * static_cast<double>(width);
      const double ry = rng.uniform(0.08, 0.22) * static_cast<double>(height);
      const double rx = rng.uniform(0.08, 0.22) * static_cast<double>(width);
      const bool ellipse = rng.uniform() < 0.5;
      const double temperature = rng.uniform(0.55, 0.95);
      double colour[3];
      for (double& v : colour) v = rng.uniform(0.1, 0.9);
      for (std::size_t i = 0; i < height; ++i) {
        for (std::size_t j = 0; j < width; ++j) {
          const double dy = (static_cast<double>(i) - cy) / ry;
          const double dx = (static_cast<double>(j) - cx) / rx;
          const bool inside = ellipse ? dx * dx + dy * dy <= 1.0 : std::abs(dx) <= 1.0 && std::abs(dy) <= 1.0;
          if (!inside) continue;
          heat[i * width + j] = temperature;
          for (int c = 0; c < 3; ++c) rgb[(c * height + i) * width + j] = colour[c];
        }
      }
    }
    const double fy = rng.uniform(0.3, 0.45);
    const double fx = rng.uniform(0.3, 0.45);
    const double phase = rng.uniform(0.0, two_pi);
    ImagePair<T> pair{Tensor<T>(Shape{1, 1, height, width}), Tensor<T>(Shape{1, 3, height, width})};
    for (std::size_t i = 0; i < height; ++i) {
      for (std::size_t j = 0; j < width; ++j) {
        const double texture =
            0.08 * std::sin(two_pi * (fy * static_cast<double>(i) + fx * static_cast<double>(j)) + phase);
        for (int c = 0; c < 3; ++c) {
          const double v = rgb[(c * height + i) * width + j] + texture;
          pair.visible(0, static_cast<std::size_t>(c), i, j) = static_cast<T>(std::clamp(v, 0.0, 1.0));
        }
      }
    }
    // two passes of a 5x5 box blur, edges clamped
    for (int pass = 0; pass < 2; ++pass) {
      std::vector<double> blurred(heat.size());
      for (std::size_t i = 0; i < height; ++i) {
        for (std::size_t j = 0; j < width; ++j) {
          double acc = 0;
          for (int di = -2; di <= 2; ++di) {
            for (int dj = -2; dj <= 2; ++dj) {
              const auto ii = static_cast<std::size_t>(
                  std::clamp<std::ptrdiff_t>(static_cast<std::ptrdiff_t>(i) + di, 0,
                                             static_cast<std::ptrdiff_t>(height) - 1));
              const auto jj = static_cast<std::size_t>(
                  std::clamp<std::ptrdiff_t>(static_cast<std::ptrdiff_t>(j) + dj, 0,
                                             static_cast<std::ptrdiff_t>(width) - 1));
              acc += heat[ii * width + jj];
            }
          }
          blurred[i * width + j] = acc / 25.0;
        }
      }
      heat = std::move(blurred);
    }
    for (std::size_t i = 0; i < height * width; ++i) pair.infrared[i] = static_cast<T>(heat[i]);
    pairs.push_back(std::move(pair));
  }
  return pairs;
}

/// Stacks `batch` consecutive pairs (wrapping) starting at `start` along N.
template <Scalar T>
ImagePair<T> make_batch(const std::vector<ImagePair<T>>& data, std::size_t start, std::size_t batch) {
  std::vector<const Tensor<T>*> ir, vis;
  for (std::size_t k = 0; k < batch; ++k) {
    const auto& p = data[(start + k) % data.size()];
    ir.push_back(&p.infrared);
    vis.push_back(&p.visible);
  }
  const auto stack = [](const std::vector<const Tensor<T>*>& parts) {
    const Shape s0 = parts.front()->shape();
    std::vector<T> buf;
    buf.reserve(parts.size() * s0.numel());
    for (const auto* t : parts) buf.insert(buf.end(), t->data().begin(), t->data().end());
    return Tensor<T>(Shape{parts.size(), s0.c, s0.h, s0.w}, std::move(buf));
  };
  return {stack(ir), stack(vis)};
}

// ---------------------------------------------------------------------------
// Toy training loop

class TrainingDiverged : public Error {
 public:
  TrainingDiverged(std::size_t step, double loss)
      : Error("training diverged at step " + std::to_string(step) + " (loss " + std::to_string(loss) + ")"),
        step_(step) {}
  std::size_t step() const { return step_; }

 private:
  std::size_t step_;
};

struct TrainReport {
  std::vector<double> losses;
  std::uint64_t seed = 0;
  double elapsed_seconds = 0.0;
  nlohmann::json config;

  double initial() const { return losses.empty() ? 0.0 : losses.front(); }
  double final_loss() const { return losses.empty() ? 0.0 : losses.back(); }
  double ratio() const { return initial() > 0.0 ? final_loss() / initial() : 0.0; }
  bool halved() const { return !losses.empty() && final_loss() <= 0.5 * initial(); }

  nlohmann::json to_json() const {
    return {{"seed", seed},
            {"steps", losses.size()},
            {"losses", losses},
            {"initial_loss", initial()},
            {"final_loss", final_loss()},
            {"final_over_initial", ratio()},
            {"halved", halved()},
            {"elapsed_seconds", elapsed_seconds},
            {"config", config}};
  }

  static TrainReport from_json(const nlohmann::json& j) {
    TrainReport r;
    r.losses = j.at("losses").get<std::vector<double>>();
    r.seed = j.at("seed").get<std::uint64_t>();
    r.elapsed_seconds = j.value("elapsed_seconds", 0.0);
    r.config = j.value("config", nlohmann::json::object());
    return r;
  }
};

inline nlohmann::json describe(const EncoderConfig& e) {
  nlohmann::json branches = nlohmann::json::array();
  for (const auto& b : e.branches) branches.push_back({b.kernel, b.dilation});
  return {{"alpha", e.alpha},
          {"stem_channels", e.stem_channels},
          {"stages", e.stages},
          {"group_count", e.group_count},
          {"frequency_policy", e.frequency_policy == FrequencyPolicy::zigzag_skip_dc ? "zigzag_skip_dc" : "custom"},
          {"branches", branches},
          {"receptive_field", e.receptive_field},
          {"combination_mode", to_string(e.combination_mode)},
          {"lfu_mode", e.lfu_mode == LfuMode::merged ? "merged" : "multi_branch"},
          {"symmetric_css", e.symmetric_css},
          {"normalized_dct", e.normalized_dct}};
}

inline nlohmann::json describe(const TrainConfig& t) {
  return {{"learning_rate", t.learning_rate}, {"momentum", t.momentum},     {"weight_decay", t.weight_decay},
          {"steps", t.steps},                 {"batch_size", t.batch_size}, {"image_size", t.image_size},
          {"dataset_count", t.dataset_count}, {"mask_ratio", t.mask_ratio}, {"mask_patch", t.mask_patch}};
}

/// encoder -> complementary masks -> CRUs -> rc_loss, one SGD step per batch.
/// Model initialisation, data and masks all derive from cfg.seed.
template <Scalar T = float>
TrainReport toy_train_run(const TrainConfig& cfg, EncoderConfig encoder_cfg, const LossWeights& weights) {
  cfg.validate();
  weights.validate();
  const auto start = std::chrono::steady_clock::now();
  encoder_cfg.seed = derive_seed(cfg.seed, 0, 0);
  const CruConfig cru_cfg = cru_config_for(encoder_cfg);
  ReconstructionModel<T> model(encoder_cfg, cru_cfg);
  const auto data = make_synthetic_pairs<T>(cfg.dataset_count, cfg.image_size, cfg.image_size, cfg.seed);
  Sgd<T> opt(model.parameters(), SgdOptions{cfg.learning_rate, cfg.momentum, cfg.weight_decay});
  const std::size_t feat = cfg.image_size / encoder_cfg.cumulative_stride();

  TrainReport report;
  report.seed = cfg.seed;
  report.config = {{"train", describe(cfg)},
                   {"encoder", describe(encoder_cfg)},
                   {"lambda1", weights.lambda1},
                   {"lambda2", weights.lambda2}};
  for (std::size_t step = 0; step < cfg.steps; ++step) {
    const ImagePair<T> batch = make_batch(data, step * cfg.batch_size, cfg.batch_size);
    const MaskPair masks = sample_complementary_masks(feat, feat, cfg.mask_ratio, cfg.mask_patch,
                                                      derive_seed(cfg.seed, 2, step), cfg.mask_infrared_share);
    Graph<T> g;
    Var<T> img_i = g.constant(batch.infrared);
    Var<T> img_v = g.constant(batch.visible);
    auto out = model.forward(img_i, img_v, &masks, NormMode::train);
    Var<T> l_rc = ad::rc_loss(out.recon_i, out.recon_v, img_i, img_v);
    const double value = l_rc.value().item();
    if (!std::isfinite(value)) throw TrainingDiverged(step, value);
    report.losses.push_back(value);
    Var<T> loss = ad::total_loss(l_rc, 0.0, weights);
    g.backward(loss);
    opt.step();
  }
  report.elapsed_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return report;
}

}  // namespace fd2

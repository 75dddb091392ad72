#include <gtest/gtest.h>

#include "support.hpp"

namespace fd2 {
namespace {

using testing::uniform;

HfuConfig hfu_config(std::size_t channels, std::size_t groups = 4) {
  HfuConfig cfg;
  cfg.channels = channels;
  cfg.group_count = groups;
  return cfg;
}

// ---------------------------------------------------------------------------
// Stem

TEST(Stem, HalvesResolution) {
  Stem<double> stem("stem", 3, 16);
  Rng rng(1);
  stem.init(rng);
  Graph<double> g;
  Var<double> y = stem.forward(g.constant(uniform(Shape{1, 3, 256, 256}, 2)), NormMode::train);
  EXPECT_EQ(y.shape(), (Shape{1, 16, 128, 128}));
  for (double v : y.value().data()) EXPECT_GE(v, 0.0);
}

TEST(Stem, RejectsSmallOrMischannelledInput) {
  Stem<double> stem("stem", 1, 4);
  Graph<double> g;
  EXPECT_THROW(stem.forward(g.constant(Tensor<double>(Shape{1, 1, 4, 8})), NormMode::train), ShapeError);
  EXPECT_THROW(stem.forward(g.constant(Tensor<double>(Shape{1, 3, 8, 8})), NormMode::train), ShapeError);
}

TEST(Stem, GradientMatchesCentralDifferences) {
  Stem<double> stem("stem", 1, 4);
  Rng rng(3);
  stem.init(rng);
  ParamList<double> params;
  stem.collect(params);
  Parameter<double> x = fragments::input_param("image", Shape{2, 1, 8, 8}, rng);
  params.push_back(&x);
  const Fragment f = [&](Graph<double>& g) { return probe(stem.forward(g.param(x), NormMode::train), 4); };
  const auto r = finite_diff_check("stem", params, f);
  EXPECT_TRUE(r.passed) << r.detail;
}

// ---------------------------------------------------------------------------
// High-frequency unit

TEST(Hfu, DcOnlyBasisLeavesFilterAsIdentity) {
  HfuConfig cfg = hfu_config(6, 1);
  cfg.policy = FrequencyPolicy::custom;
  cfg.custom_frequencies = {{0, 0}};
  Hfu<double> unit("hfu", cfg);
  Rng rng(5);
  unit.init(rng);
  const auto x = uniform(Shape{2, 6, 5, 5}, 6);
  Graph<double> g;
  const auto taps = unit.forward_taps(g.constant(x));
  EXPECT_EQ(taps.filtered.value().vec(), x.vec());
  EXPECT_EQ(taps.output.value().vec(), pointwise(x, taps.attention.value(), PointwiseKind::mul).vec());
}

TEST(Hfu, AttentionIsSingleChannelInsideOpenInterval) {
  Hfu<double> unit("hfu", hfu_config(8));
  Rng rng(7);
  unit.init(rng);
  Graph<double> g;
  const auto taps = unit.forward_taps(g.constant(uniform(Shape{2, 8, 6, 6}, 8, -3.0, 3.0)));
  EXPECT_EQ(taps.attention.shape(), (Shape{2, 1, 6, 6}));
  for (double v : taps.attention.value().data()) {
    EXPECT_GT(v, 0.0);
    EXPECT_LT(v, 1.0);
  }
  const auto& out = taps.output.value();
  const auto& filt = taps.filtered.value();
  for (std::size_t i = 0; i < out.size(); ++i) EXPECT_LE(std::abs(out[i]), std::abs(filt[i]));
  EXPECT_EQ(out.shape(), (Shape{2, 8, 6, 6}));
}

TEST(Hfu, GroupFilterMatchesReferenceLoop) {
  const std::size_t h = 6, w = 7;
  Hfu<double> unit("hfu", hfu_config(8));
  Rng rng(9);
  unit.init(rng);
  // Nonzero only in group 2 (channels 4 and 5).
  Tensor<double> x(Shape{1, 8, h, w});
  const auto noise = uniform(Shape{1, 2, h, w}, 10);
  std::copy(noise.data().begin(), noise.data().end(), x.plane(0, 4));
  Graph<double> g;
  const auto taps = unit.forward_taps(g.constant(x));
  const FrequencyIndex f2 = select_frequencies(4, h, w, FrequencyPolicy::zigzag_skip_dc).indices[2];
  for (std::size_t c = 0; c < 8; ++c) {
    for (std::size_t i = 0; i < h; ++i) {
      for (std::size_t j = 0; j < w; ++j) {
        const double basis = std::cos(std::numbers::pi * f2.u * (2.0 * i + 1) / (2.0 * h)) *
                             std::cos(std::numbers::pi * f2.v * (2.0 * j + 1) / (2.0 * w));
        const double expect = (c == 4 || c == 5) ? x(0, c, i, j) * basis : 0.0;
        EXPECT_NEAR(taps.filtered.value()(0, c, i, j), expect, 1e-12);
        if (c != 4 && c != 5) EXPECT_EQ(taps.output.value()(0, c, i, j), 0.0);
      }
    }
  }
}

TEST(Hfu, IndivisibleChannelsThrow) { EXPECT_THROW(Hfu<double>("hfu", hfu_config(6, 4)), ShapeError); }

TEST(Hfu, CustomIndexOutsideFeatureGridThrows) {
  HfuConfig cfg = hfu_config(2, 1);
  cfg.policy = FrequencyPolicy::custom;
  cfg.custom_frequencies = {{5, 0}};
  Hfu<double> unit("hfu", cfg);
  Graph<double> g;
  EXPECT_THROW(unit.forward(g.constant(Tensor<double>(Shape{1, 2, 4, 4}))), ValueError);
}

TEST(Hfu, WrongChannelCountThrows) {
  Hfu<double> unit("hfu", hfu_config(8));
  Graph<double> g;
  EXPECT_THROW(unit.forward(g.constant(Tensor<double>(Shape{1, 4, 4, 4}))), ShapeError);
}

// ---------------------------------------------------------------------------
// Low-frequency unit

TEST(LfuConfig, DefaultBranchesFitReceptiveField) {
  const auto cfg = LfuConfig::make(16);
  std::vector<std::size_t> sizes;
  for (const auto& b : cfg.branches()) sizes.push_back(b.effective_size());
  EXPECT_EQ(sizes, (std::vector<std::size_t>{7, 3, 5, 7}));
  EXPECT_EQ(cfg.bottleneck(), 4u);
}

TEST(LfuConfig, OversizedBranchIsRejectedByName) {
  try {
    (void)LfuConfig::make(8, 7, {{3, 1}, {5, 2}});
    FAIL() << "expected ValueError";
  } catch (const ValueError& e) {
    const std::string what = e.what();
    EXPECT_NE(what.find("branch 1"), std::string::npos) << what;
    EXPECT_NE(what.find("9"), std::string::npos) << what;
  }
}

TEST(LfuConfig, EvenKernelRejected) { EXPECT_THROW((void)LfuConfig::make(8, 7, {{4, 1}}), ValueError); }

TEST(Lfu, ZeroInputGivesZeroOutput) {
  Lfu<double> lfu("lfu", LfuConfig::make(8));
  Rng rng(11);
  lfu.init(rng);
  for (LfuMode mode : {LfuMode::multi_branch, LfuMode::merged}) {
    Graph<double> g;
    const auto y = lfu.forward(g.constant(Tensor<double>(Shape{1, 8, 9, 9})), mode).value();
    EXPECT_EQ(y.shape(), (Shape{1, 8, 9, 9}));
    for (double v : y.data()) EXPECT_EQ(v, 0.0);
  }
}

TEST(Lfu, MergedAgreesWithMultiBranchF64) {
  const auto r = reparam_equivalence_check<double>("f64", LfuConfig::make(16), {seed_range(1, 3), 1e-10, {1, 16, 64, 64}});
  EXPECT_TRUE(r.passed) << r.metric;
}

TEST(Lfu, MergedAgreesWithMultiBranchF32) {
  const auto r = reparam_equivalence_check<float>("f32", LfuConfig::make(16), {seed_range(1, 3), 1e-4, {1, 16, 64, 64}});
  EXPECT_TRUE(r.passed) << r.metric;
}

TEST(Lfu, EquivalenceHoldsForOtherValidConfigs) {
  const std::vector<std::pair<std::size_t, std::vector<BranchSpec>>> configs{
      {5, {{5, 1}, {3, 2}, {1, 1}}}, {9, {{3, 4}, {9, 1}, {5, 2}}}, {3, {{3, 1}}}};
  for (const auto& [rf, branches] : configs) {
    const auto r =
        reparam_equivalence_check<double>("cfg", LfuConfig::make(6, rf, branches), {seed_range(20, 4), 1e-10, {2, 6, 17, 13}});
    EXPECT_TRUE(r.passed) << "rf " << rf << " metric " << r.metric;
  }
}

TEST(Lfu, InjectedKernelFaultIsDetected) {
  const auto r = reparam_equivalence_check<double>("fault", LfuConfig::make(8), {seed_range(1, 1), 1e-10, {1, 8, 16, 16}, 1e-2});
  EXPECT_FALSE(r.passed);
}

TEST(Lfu, BothModesMatchCentralDifferences) {
  for (LfuMode mode : {LfuMode::multi_branch, LfuMode::merged}) {
    Lfu<double> lfu("lfu", LfuConfig::make(8));
    Rng rng(12);
    lfu.init(rng);
    ParamList<double> params;
    lfu.collect(params);
    fragments::randomize_biases(params, rng);
    Parameter<double> x = fragments::input_param("x", Shape{2, 8, 8, 8}, rng);
    params.push_back(&x);
    const Fragment f = [&](Graph<double>& g) { return probe(lfu.forward(g.param(x), mode), 13); };
    const auto r = finite_diff_check("lfu", params, f);
    EXPECT_TRUE(r.passed) << r.detail;
  }
}

TEST(MergeBranches, DilatedKernelHasZerosAtOddPositions) {
  const auto w = uniform(Shape{2, 1, 3, 3}, 14);
  const auto d = dilate_kernel(w, 2);
  ASSERT_EQ(d.shape(), (Shape{2, 1, 5, 5}));
  for (std::size_t c = 0; c < 2; ++c) {
    for (std::size_t i = 0; i < 5; ++i) {
      for (std::size_t j = 0; j < 5; ++j) {
        if (i % 2 == 1 || j % 2 == 1) {
          EXPECT_EQ(d(c, 0, i, j), 0.0);
        } else {
          EXPECT_EQ(d(c, 0, i, j), w(c, 0, i / 2, j / 2));
        }
      }
    }
  }
}

TEST(MergeBranches, SingleFullSizeBranchIsUnchanged) {
  const auto cfg = LfuConfig::make(3, 7, {{7, 1}});
  const auto w = uniform(Shape{3, 1, 7, 7}, 15);
  const auto b = uniform(Shape{1, 3, 1, 1}, 16);
  const auto m = merge_branches<double>({w}, {b}, cfg);
  EXPECT_EQ(m.weight.vec(), w.vec());
  EXPECT_EQ(m.bias.vec(), b.vec());
}

TEST(MergeBranches, KernelSumMatchesBranchConvolutionSum) {
  const auto cfg = LfuConfig::make(4);
  std::vector<Tensor<double>> ws, bs;
  for (std::size_t i = 0; i < cfg.branches().size(); ++i) {
    ws.push_back(uniform(Shape{4, 1, cfg.branches()[i].kernel, cfg.branches()[i].kernel}, 30 + i));
    bs.push_back(uniform(Shape{1, 4, 1, 1}, 40 + i));
  }
  const auto x = uniform(Shape{1, 4, 12, 12}, 50);
  Tensor<double> sum(x.shape());
  for (std::size_t i = 0; i < ws.size(); ++i) {
    const auto y = conv_direct_oracle(x, ws[i], &bs[i], cfg.branch_spec(i));
    for (std::size_t k = 0; k < y.size(); ++k) sum[k] += y[k];
  }
  const auto m = merge_branches(ws, bs, cfg);
  EXPECT_LE(max_abs_diff(conv2d(x, cfg.merged_spec(), m.weight, &m.bias), sum), 1e-10);
}

TEST(MergeBranches, WrongBranchCountThrows) {
  const auto cfg = LfuConfig::make(2);
  EXPECT_THROW(merge_branches<double>({Tensor<double>(Shape{2, 1, 7, 7})}, {Tensor<double>(Shape{1, 2, 1, 1})}, cfg),
               ShapeError);
}

// ---------------------------------------------------------------------------
// Complementary strengths strategy

TEST(Css, ZeroPartnersLeaveInputsUnchanged) {
  Css<double> css("css", 4, 4, 8);
  const auto xi_h = uniform(Shape{1, 4, 5, 5}, 1);
  const auto xv_l = uniform(Shape{1, 4, 5, 5}, 2);
  Graph<double> g;
  Var<double> zero = g.constant(Tensor<double>(Shape{1, 4, 5, 5}));
  auto [fi, fv] = css.recouple(g.constant(xi_h), zero, zero, g.constant(xv_l));
  EXPECT_EQ(slice_channels(fi.value(), 0, 4).vec(), xi_h.vec());
  EXPECT_EQ(slice_channels(fv.value(), 4, 8).vec(), xv_l.vec());
}

TEST(Css, RestoresRequestedChannels) {
  Css<double> css("css", 3, 5, 8);
  Rng rng(3);
  css.init(rng);
  Graph<double> g;
  const auto h = [&](std::uint64_t s) { return g.constant(uniform(Shape{2, 3, 6, 7}, s)); };
  const auto l = [&](std::uint64_t s) { return g.constant(uniform(Shape{2, 5, 6, 7}, s)); };
  const auto r = css.forward(h(1), h(2), l(3), l(4));
  EXPECT_EQ(r.y_i.shape(), (Shape{2, 8, 6, 7}));
  EXPECT_EQ(r.y_v.shape(), (Shape{2, 8, 6, 7}));
}

TEST(Css, AdditionStageIsLinear) {
  for (bool symmetric : {false, true}) {
    Css<double> css("css", 4, 4, 8, symmetric);
    const Shape s{1, 4, 6, 6};
    const auto tap = [&](std::uint64_t seed, double scale) {
      Graph<double> g;
      auto v = [&](std::uint64_t k) {
        Tensor<double> t = uniform(s, seed * 10 + k);
        for (auto& e : t.data()) e *= scale;
        return g.constant(t);
      };
      auto [fi, fv] = css.recouple(v(1), v(2), v(3), v(4));
      return std::pair{fi.value(), fv.value()};
    };
    // recouple(a + b) - recouple(a) - recouple(b) + recouple(0)
    const auto sum_inputs = [&]() {
      Graph<double> g;
      auto v = [&](std::uint64_t k) {
        const auto a = uniform(s, 10 + k);
        const auto b = uniform(s, 20 + k);
        return g.constant(testing::axpby(1.0, a, 1.0, b));
      };
      auto [fi, fv] = css.recouple(v(1), v(2), v(3), v(4));
      return std::pair{fi.value(), fv.value()};
    }();
    const auto a = tap(1, 1.0);
    const auto b = tap(2, 1.0);
    const auto z = tap(3, 0.0);
    double worst = 0;
    for (std::size_t i = 0; i < a.first.size(); ++i) {
      worst = std::max(worst, std::abs(sum_inputs.first[i] - a.first[i] - b.first[i] + z.first[i]));
      worst = std::max(worst, std::abs(sum_inputs.second[i] - a.second[i] - b.second[i] + z.second[i]));
    }
    EXPECT_LE(worst, 1e-12) << "symmetric " << symmetric;
  }
}

TEST(Css, ShapeDisagreementThrows) {
  Css<double> css("css", 4, 4, 8);
  Graph<double> g;
  Var<double> a = g.constant(Tensor<double>(Shape{1, 4, 5, 5}));
  Var<double> b = g.constant(Tensor<double>(Shape{1, 4, 5, 4}));
  EXPECT_THROW(css.recouple(a, b, a, a), ShapeError);
  EXPECT_THROW(css.recouple(a, a, b, b), ShapeError);
}

TEST(Css, GradientMatchesCentralDifferences) {
  for (bool symmetric : {false, true}) {
    Css<double> css("css", 4, 4, 8, symmetric);
    Rng rng(21);
    css.init(rng);
    ParamList<double> params;
    css.collect(params);
    fragments::randomize_biases(params, rng);
    std::vector<Parameter<double>> in;
    for (int k = 0; k < 4; ++k) in.push_back(fragments::input_param("in" + std::to_string(k), Shape{1, 4, 5, 5}, rng));
    for (auto& p : in) params.push_back(&p);
    const Fragment f = [&](Graph<double>& g) {
      const auto r = css.forward(g.param(in[0]), g.param(in[1]), g.param(in[2]), g.param(in[3]));
      return ad::add(probe(r.y_i, 1), probe(r.y_v, 2));
    };
    const auto r = finite_diff_check("css", params, f);
    EXPECT_TRUE(r.passed) << r.detail;
  }
}

// ---------------------------------------------------------------------------
// Stage and encoder

EncoderConfig small_config(CombinationMode mode, std::size_t channels = 16) {
  EncoderConfig cfg;
  cfg.stem_channels = channels;
  cfg.combination_mode = mode;
  cfg.seed = 5;
  return cfg;
}

TEST(FdeStage, ParallelPreservesShape) {
  FdeStage<double> stage("s", 16, small_config(CombinationMode::parallel_hl));
  Rng rng(1);
  stage.init(rng);
  Graph<double> g;
  auto [yi, yv] = stage.forward(g.constant(uniform(Shape{1, 16, 64, 64}, 1)), g.constant(uniform(Shape{1, 16, 64, 64}, 2)));
  EXPECT_EQ(yi.shape(), (Shape{1, 16, 64, 64}));
  EXPECT_EQ(yv.shape(), (Shape{1, 16, 64, 64}));
}

struct ModeExpectation {
  CombinationMode mode;
  std::size_t hfu_calls;
  std::size_t lfu_calls;
};

void PrintTo(const ModeExpectation& m, std::ostream* os) { *os << to_string(m.mode); }

class StageModes : public ::testing::TestWithParam<ModeExpectation> {};

TEST_P(StageModes, InvokesOnlyConfiguredUnits) {
  const auto [mode, hfu_calls, lfu_calls] = GetParam();
  FdeStage<double> stage("s", 8, small_config(mode, 8));
  Rng rng(2);
  stage.init(rng);
  Graph<double> g;
  Var<double> xi = g.variable(uniform(Shape{1, 8, 8, 8}, 3));
  Var<double> xv = g.variable(uniform(Shape{1, 8, 8, 8}, 4));
  auto [yi, yv] = stage.forward(xi, xv);
  EXPECT_EQ(yi.shape(), (Shape{1, 8, 8, 8}));
  EXPECT_EQ(stage.counters().hfu_calls, hfu_calls);
  EXPECT_EQ(stage.counters().lfu_calls, lfu_calls);
  EXPECT_EQ(stage.hfu_ir() != nullptr, hfu_calls > 0);
  EXPECT_EQ(stage.lfu_ir() != nullptr, lfu_calls > 0);
  g.backward(ad::add(ad::sum(yi), ad::sum(yv)));
  EXPECT_GT(testing::max_abs(g.grad(xi)), 0.0);
}

TEST_P(StageModes, GradientMatchesCentralDifferences) {
  FdeStage<double> stage("s", 8, small_config(GetParam().mode, 8));
  Rng rng(6);
  stage.init(rng);
  ParamList<double> params;
  stage.collect(params);
  fragments::randomize_biases(params, rng);
  Parameter<double> xi = fragments::input_param("xi", Shape{1, 8, 8, 8}, rng);
  Parameter<double> xv = fragments::input_param("xv", Shape{1, 8, 8, 8}, rng);
  params.push_back(&xi);
  params.push_back(&xv);
  const Fragment f = [&](Graph<double>& g) {
    auto [yi, yv] = stage.forward(g.param(xi), g.param(xv));
    return ad::add(probe(yi, 1), probe(yv, 2));
  };
  const auto r = finite_diff_check("stage", params, f);
  EXPECT_TRUE(r.passed) << r.detail << " metric " << r.metric;
}

INSTANTIATE_TEST_SUITE_P(All, StageModes,
                         ::testing::Values(ModeExpectation{CombinationMode::h_only, 2, 0},
                                           ModeExpectation{CombinationMode::l_only, 0, 2},
                                           ModeExpectation{CombinationMode::serial_hl, 2, 2},
                                           ModeExpectation{CombinationMode::serial_lh, 2, 2},
                                           ModeExpectation{CombinationMode::parallel_hl, 2, 2}),
                         [](const auto& info) { return std::string(to_string(info.param.mode)); });

TEST(FdeStage, SeededRunsAreBitIdentical) {
  const auto run = [] {
    FdeStage<float> stage("s", 16, small_config(CombinationMode::parallel_hl));
    Rng rng(77);
    stage.init(rng);
    Graph<float> g;
    auto [yi, yv] = stage.forward(g.constant(uniform<float>(Shape{1, 16, 16, 16}, 1)),
                                  g.constant(uniform<float>(Shape{1, 16, 16, 16}, 2)));
    return std::pair{yi.value().vec(), yv.value().vec()};
  };
  EXPECT_EQ(run(), run());
}

TEST(Encoder, DefaultStageShapesAt256) {
  EncoderConfig cfg;
  Encoder<float> enc(cfg);
  Graph<float> g;
  const auto stages = enc.forward(g.constant(uniform<float>(Shape{1, 1, 256, 256}, 1)),
                                  g.constant(uniform<float>(Shape{1, 3, 256, 256}, 2)), NormMode::train);
  ASSERT_EQ(stages.size(), 3u);
  const std::vector<Shape> expected{{1, 16, 128, 128}, {1, 32, 64, 64}, {1, 64, 32, 32}};
  for (std::size_t s = 0; s < 3; ++s) {
    EXPECT_EQ(stages[s].first.shape(), expected[s]);
    EXPECT_EQ(stages[s].second.shape(), expected[s]);
  }
}

TEST(Encoder, ParameterCountEqualsDeclaredSpecs) {
  for (CombinationMode mode : {CombinationMode::parallel_hl, CombinationMode::serial_lh, CombinationMode::h_only}) {
    EncoderConfig cfg;
    cfg.combination_mode = mode;
    Encoder<double> enc(cfg);
    std::size_t closed = 0;
    for (const auto& s : enc.conv_specs()) closed += s.parameter_count();
    for (std::size_t c : enc.norm_channels()) closed += 2 * c;
    EXPECT_EQ(count_elements(enc.parameters()), closed) << to_string(mode);
  }
}

TEST(Encoder, DefaultParameterCountClosedForm) {
  // Per stage with c channels and h = l = c/2: two HFU attention convs, two LFUs, two CSS fusions.
  const auto stage = [](std::size_t c) {
    const std::size_t h = c / 2, l = c / 2, d = std::max<std::size_t>(1, l / 4);
    const std::size_t hfu = 2 * 49 + 1;
    const std::size_t lfu = l * (49 + 9 + 9 + 9) + 4 * l + (l * d + d) + (d * l + l);
    const std::size_t css = (h + l) * c * 9 + c;
    return 2 * hfu + 2 * lfu + 2 * css;
  };
  const std::size_t stem = 16 * 1 * 36 + 16 * 3 * 36 + 2 * 2 * 16;
  const std::size_t down = 2 * (16 * 32 * 9 + 2 * 32) + 2 * (32 * 64 * 9 + 2 * 64);
  Encoder<double> enc(EncoderConfig{});
  EXPECT_EQ(count_elements(enc.parameters()), stem + down + stage(16) + stage(32) + stage(64));
}

TEST(Encoder, IndivisibleExtentThrows) {
  Encoder<double> enc(EncoderConfig{});
  Graph<double> g;
  EXPECT_THROW(enc.forward(g.constant(Tensor<double>(Shape{1, 1, 36, 36})),
                           g.constant(Tensor<double>(Shape{1, 3, 36, 36})), NormMode::train),
               ShapeError);
  EXPECT_THROW(enc.forward(g.constant(Tensor<double>(Shape{1, 1, 32, 32})),
                           g.constant(Tensor<double>(Shape{1, 3, 32, 40})), NormMode::train),
               ShapeError);
}

TEST(Encoder, LastStageSumGradientReachesStem) {
  EncoderConfig cfg;
  cfg.seed = 3;
  Encoder<double> enc(cfg);
  Rng rng(4);
  const auto img_i = random_uniform<double>(Shape{1, 1, 32, 32}, rng);
  const auto img_v = random_uniform<double>(Shape{1, 3, 32, 32}, rng);
  ParamList<double> stem;
  for (Parameter<double>* p : enc.parameters()) {
    if (p->name().rfind("encoder.stem", 0) == 0 && p->trainable()) stem.push_back(p);
  }
  ASSERT_EQ(stem.size(), 6u);
  const Fragment f = [&](Graph<double>& g) {
    const auto out = enc.forward(g.constant(img_i), g.constant(img_v), NormMode::train);
    return ad::add(ad::sum(out.back().first), ad::sum(out.back().second));
  };
  FdOptions opt;
  opt.samples = 16;
  const auto r = finite_diff_check("encoder_stem", stem, f, opt);
  EXPECT_TRUE(r.passed) << r.detail;
}

}  // namespace
}  // namespace fd2

// Acceptance run: one PASS/FAIL line per criterion, exit status 1 if any fails.
// Usage: acceptance <fd2net binary> <fixtures dir>

#include <sys/wait.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <sstream>
#include <string>

#include "fd2/fd2.hpp"

namespace fs = std::filesystem;
using namespace fd2;

namespace {

struct Outcome {
  bool passed = true;
  std::string detail;

  void require(bool ok, const std::string& what) {
    if (!ok) {
      passed = false;
      detail += (detail.empty() ? "" : "; ") + what;
    }
  }
  void add(const CheckReport& r) {
    std::ostringstream s;
    s << r.name << " metric " << r.metric << " > " << r.tolerance;
    require(r.passed, s.str());
  }
};

int failures = 0;

void criterion(int id, const std::string& title, double budget_seconds, const std::function<Outcome()>& body) {
  const auto start = std::chrono::steady_clock::now();
  Outcome o;
  try {
    o = body();
  } catch (const std::exception& e) {
    o.require(false, std::string("exception: ") + e.what());
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  if (budget_seconds > 0) {
    std::ostringstream s;
    s << "runtime " << secs << " s over budget " << budget_seconds << " s";
    o.require(secs < budget_seconds, s.str());
  }
  std::printf("%s criterion %d: %s (%.2f s)%s%s\n", o.passed ? "PASS" : "FAIL", id, title.c_str(), secs,
              o.detail.empty() ? "" : " -- ", o.detail.c_str());
  std::fflush(stdout);
  if (!o.passed) ++failures;
}

Outcome dct_correctness() {
  Outcome o;
  std::vector<CheckReport> checks;
  suites::dct(2024, checks);
  for (const auto& c : checks) {
    if (c.name != "dct.inverse_round_trip") o.add(c);
  }
  return o;
}

Outcome reparam_equivalence() {
  Outcome o;
  const LfuConfig cfg = LfuConfig::make(16);
  ReparamOptions opt{seed_range(100, 20), 1e-10, Shape{1, 16, 64, 64}, 0.0};
  o.add(reparam_equivalence_check<double>("reparam_f64", cfg, opt));
  opt.tolerance = 1e-4;
  o.add(reparam_equivalence_check<float>("reparam_f32", cfg, opt));
  ReparamOptions fault{seed_range(100, 3), 1e-10, Shape{1, 16, 64, 64}, 1e-2};
  const CheckReport faulted = reparam_equivalence_check<double>("reparam_fault", cfg, fault);
  o.require(!faulted.passed && faulted.metric >= 1e-3, "perturbed merged kernel not detected");
  return o;
}

Outcome gradient_fidelity() {
  Outcome o;
  std::vector<CheckReport> checks;
  suites::tensor(7, checks);
  suites::hfu(7, checks);
  suites::css(7, checks);
  suites::training(7, checks);
  std::vector<CheckReport> lfu;
  suites::lfu(7, lfu);
  for (const auto& c : lfu) {
    if (c.name.starts_with("lfu.fd_")) checks.push_back(c);
  }
  const std::vector<std::string> required{"training.fd_stem",     "hfu.fd",          "lfu.fd_multi_branch",
                                          "lfu.fd_merged",        "css.fd",          "css.fd_symmetric",
                                          "training.fd_rc_loss_cru", "training.fd_rc_loss_model",
                                          "tensor.fd_fault_detected"};
  for (const auto& name : required) {
    const auto it = std::find_if(checks.begin(), checks.end(), [&](const CheckReport& c) { return c.name == name; });
    if (it == checks.end()) {
      o.require(false, "missing check " + name);
    } else {
      o.add(*it);
    }
  }

  // CRU alone on 16x16 features.
  Rng rng(8);
  CruConfig cc;
  cc.feature_channels = 4;
  cc.upsample_stages = 1;
  Cru<double> cru("cru", cc, Modality::visible);
  cru.init(rng);
  Parameter<double> fs_ = fragments::input_param("self", Shape{1, 4, 16, 16}, rng);
  Parameter<double> fo = fragments::input_param("other", Shape{1, 4, 16, 16}, rng);
  ParamList<double> params{&fs_, &fo};
  cru.collect(params);
  fragments::randomize_biases(params, rng);
  const Fragment f = [&](Graph<double>& g) { return probe(cru.forward(g.param(fs_), g.param(fo)), 9); };
  FdOptions opt;
  opt.samples = 24;
  o.add(finite_diff_check("cru.fd_16x16", params, f, opt));
  opt.gradient_scale = 1.01;
  const CheckReport fault = finite_diff_check("cru.fd_fault", params, f, opt);
  o.require(!fault.passed, "1.01x gradient scaling not detected");
  return o;
}

Outcome mask_contract() {
  Outcome o;
  const std::size_t h = 64, w = 64, p = 4;
  const std::size_t target = static_cast<std::size_t>(std::llround(0.3 * (h / p) * (w / p))) * p * p;
  std::size_t overlap = 0, misaligned = 0, wrong_area = 0, nondeterministic = 0;
  for (std::uint64_t seed = 0; seed < 1000; ++seed) {
    const MaskPair m = sample_complementary_masks(h, w, 0.3, p, seed);
    const MaskPair again = sample_complementary_masks(h, w, 0.3, p, seed);
    nondeterministic += m.infrared != again.infrared || m.visible != again.visible;
    wrong_area += m.union_count() != target;
    for (std::size_t i = 0; i < h * w; ++i) {
      overlap += m.infrared[i] & m.visible[i];
      const std::size_t y = i / w, x = i % w, anchor = (y / p * p) * w + x / p * p;
      misaligned += m.infrared[i] != m.infrared[anchor] || m.visible[i] != m.visible[anchor];
    }
  }
  o.require(overlap == 0, std::to_string(overlap) + " overlapping pixels");
  o.require(misaligned == 0, std::to_string(misaligned) + " pixels off the patch grid");
  o.require(wrong_area == 0, std::to_string(wrong_area) + " seeds with the wrong area");
  o.require(nondeterministic == 0, std::to_string(nondeterministic) + " nondeterministic seeds");
  return o;
}

Outcome shape_contract() {
  Outcome o;
  const EncoderConfig ec;
  ReconstructionModel<float> model(ec, cru_config_for(ec));
  Rng rng(5);
  Graph<float> g;
  const auto out = model.forward(g.constant(random_uniform<float>(Shape{1, 1, 256, 256}, rng, 0.0, 1.0)),
                                 g.constant(random_uniform<float>(Shape{1, 3, 256, 256}, rng, 0.0, 1.0)), nullptr,
                                 NormMode::train);
  const std::vector<Shape> expected{{1, 16, 128, 128}, {1, 32, 64, 64}, {1, 64, 32, 32}};
  o.require(out.stages.size() == 3, "expected 3 stages");
  for (std::size_t s = 0; s < std::min<std::size_t>(3, out.stages.size()); ++s) {
    o.require(out.stages[s].first.shape() == expected[s], "ir stage " + out.stages[s].first.shape().str());
    o.require(out.stages[s].second.shape() == expected[s], "vis stage " + out.stages[s].second.shape().str());
  }
  o.require(out.recon_i.shape() == (Shape{1, 1, 256, 256}), "infrared CRU " + out.recon_i.shape().str());
  o.require(out.recon_v.shape() == (Shape{1, 3, 256, 256}), "visible CRU " + out.recon_v.shape().str());
  return o;
}

Outcome toy_training(const fs::path& fixtures) {
  Outcome o;
  const TrainConfig tc;
  const EncoderConfig ec;
  const TrainReport a = toy_train_run<float>(tc, ec, LossWeights{1.0, 0.0});
  const TrainReport b = toy_train_run<float>(tc, ec, LossWeights{1.0, 0.0});
  o.require(a.losses.size() == 200, "expected 200 losses");
  o.require(std::all_of(a.losses.begin(), a.losses.end(), [](double l) { return std::isfinite(l); }),
            "non-finite loss");
  o.require(a.losses == b.losses, "repeat run differs");
  std::ostringstream ratio;
  ratio << "final/initial " << a.ratio();
  o.require(a.halved(), ratio.str());
  std::ifstream in(fixtures / "toy_train_seed42.json");
  if (!in) {
    o.require(false, "fixture missing");
    return o;
  }
  const TrainReport fixture = TrainReport::from_json(nlohmann::json::parse(in));
  double worst = fixture.losses.size() == a.losses.size() ? 0.0 : 1e300;
  for (std::size_t i = 0; i < std::min(a.losses.size(), fixture.losses.size()); ++i) {
    worst = std::max(worst, std::abs(a.losses[i] - fixture.losses[i]) / std::abs(fixture.losses[i]));
  }
  std::ostringstream s;
  s << "fixture max rel diff " << worst;
  o.require(worst <= 1e-6, s.str());
  if (o.passed) o.detail = ratio.str();
  return o;
}

Outcome ablation_modes() {
  Outcome o;
  for (CombinationMode mode : {CombinationMode::h_only, CombinationMode::l_only, CombinationMode::serial_hl,
                               CombinationMode::serial_lh, CombinationMode::parallel_hl}) {
    const std::string name = to_string(mode);
    EncoderConfig cfg;
    cfg.stem_channels = 8;
    cfg.combination_mode = mode;
    FdeStage<double> stage("stage", 8, cfg);
    Rng rng(11);
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
    stage.reset_counters();
    o.add(finite_diff_check("fd_" + name, params, f));
    const auto c = stage.counters();
    if (mode == CombinationMode::h_only) o.require(c.hfu_calls > 0 && c.lfu_calls == 0, name + " called the LFU");
    if (mode == CombinationMode::l_only) o.require(c.lfu_calls > 0 && c.hfu_calls == 0, name + " called the HFU");
    if (mode != CombinationMode::h_only && mode != CombinationMode::l_only) {
      o.require(c.hfu_calls > 0 && c.lfu_calls > 0, name + " skipped a unit");
    }

    // Full encoder forward/backward in this mode.
    EncoderConfig enc_cfg;
    enc_cfg.stem_channels = 8;
    enc_cfg.stages = 2;
    enc_cfg.combination_mode = mode;
    Encoder<float> enc(enc_cfg);
    Rng data(12);
    Graph<float> g;
    const auto stages = enc.forward(g.constant(random_uniform<float>(Shape{1, 1, 32, 32}, data)),
                                    g.constant(random_uniform<float>(Shape{1, 3, 32, 32}, data)), NormMode::train);
    g.backward(ad::add(ad::sum(stages.back().first), ad::sum(stages.back().second)));
    double norm = 0;
    for (const auto* p : enc.parameters()) {
      for (float v : p->grad().data()) norm += static_cast<double>(v) * v;
    }
    o.require(std::isfinite(norm) && norm > 0, name + " encoder received no gradient");
  }
  return o;
}

int exit_status(const std::string& bin, const std::string& args) {
  const int raw = std::system((bin + " " + args + " >/dev/null 2>&1").c_str());
  return WIFEXITED(raw) ? WEXITSTATUS(raw) : -1;
}

Outcome cli_and_format(const std::string& bin) {
  Outcome o;
  Rng rng(13);
  const Tensor<float> t = random_uniform<float>(Shape{2, 3, 4, 5}, rng);
  const fs::path dir = fs::temp_directory_path() / "fd2_acceptance";
  fs::create_directories(dir);
  write_fdt(dir / "t.fdt", t);
  const Tensor<float> back = read_fdt<float>(dir / "t.fdt");
  o.require(back.shape() == t.shape() && std::memcmp(back.data().data(), t.data().data(), t.size() * 4) == 0,
            "f32 round trip not bit-exact");

  std::vector<std::uint8_t> hand{'F', 'D', 'T', '1', 0, 4};
  for (std::uint64_t e : {1, 1, 1, 2}) {
    for (int i = 0; i < 8; ++i) hand.push_back(static_cast<std::uint8_t>(e >> (8 * i)));
  }
  for (std::uint8_t x : {0x00, 0x00, 0x80, 0x3F, 0x00, 0x00, 0x00, 0x40}) hand.push_back(x);
  const Tensor<float> pair = decode_fdt<float>(hand);
  o.require(pair.shape() == (Shape{1, 1, 1, 2}) && pair[0] == 1.0f && pair[1] == 2.0f, "hand-encoded file misread");
  try {
    auto bad = hand;
    bad[2] = 'X';
    (void)decode_fdt_any(bad);
    o.require(false, "FDX1 accepted");
  } catch (const FormatError&) {
  }

  std::ofstream(dir / "tiny.json") << R"({"stem_channels": 8, "stages": 1, "image_size": 16, "dataset_count": 1,
                                          "mask_patch": 1, "batch_size": 1})";
  std::ofstream(dir / "bad.json") << R"({"stem_chanels": 4})";
  const struct {
    std::string args;
    int expected;
  } runs[] = {{"verify --suite dct --seed 7", 0},
              {"info", 0},
              {"train-toy --steps 1 --config " + (dir / "tiny.json").string(), 1},
              {"verify --suite ffu", 2},
              {"verify --bogus", 2},
              {"info --config " + (dir / "bad.json").string(), 2}};
  for (const auto& r : runs) {
    const int got = exit_status(bin, r.args);
    o.require(got == r.expected, "'" + r.args + "' exited " + std::to_string(got));
  }
  return o;
}

}  // namespace

int main(int argc, char** argv) {
  if (argc != 3) {
    std::fprintf(stderr, "usage: %s <fd2net binary> <fixtures dir>\n", argv[0]);
    return 2;
  }
  const std::string bin = argv[1];
  const fs::path fixtures = argv[2];
  criterion(1, "DCT matches the direct oracle and the basis is orthogonal", 5, dct_correctness);
  criterion(2, "merged and multi-branch LFU agree; faulted kernel detected", 30, reparam_equivalence);
  criterion(3, "gradients match central differences; scaled gradient detected", 120, gradient_fidelity);
  criterion(4, "complementary masks are disjoint, aligned and sized over 1000 seeds", 10, mask_contract);
  criterion(5, "256x256 stage and reconstruction shapes", 0, shape_contract);
  criterion(6, "toy reconstruction training halves the loss deterministically", 300,
            [&] { return toy_training(fixtures); });
  criterion(7, "all five combination modes run, differentiate and stay exclusive", 0, ablation_modes);
  criterion(8, "FDT round trip, hand-encoded file and CLI exit codes", 0, [&] { return cli_and_format(bin); });
  std::printf("%d of 8 criteria failed\n", failures);
  return failures == 0 ? 0 : 1;
}

#pragma once

#include <chrono>
#include <cstdint>
#include <iomanip>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "fd2/config.hpp"
#include "fd2/dct.hpp"
#include "fd2/fdt.hpp"
#include "fd2/training.hpp"
#include "fd2/verify.hpp"

namespace fd2 {

enum ExitCode : int { exit_pass = 0, exit_fail = 1, exit_usage = 2 };

inline Shape parse_shape(const std::string& text) {
  std::vector<std::size_t> dims;
  std::stringstream ss(text);
  std::string part;
  while (std::getline(ss, part, 'x')) {
    if (part.empty() || part.find_first_not_of("0123456789") != std::string::npos) {
      throw ValueError("shape '" + text + "' is not of the form NxCxHxW");
    }
    dims.push_back(std::stoull(part));
  }
  if (dims.size() != 4) throw ValueError("shape '" + text + "' is not of the form NxCxHxW");
  return Shape{dims[0], dims[1], dims[2], dims[3]};
}

namespace detail {

struct CliState {
  std::uint64_t seed = 42;
  std::string config_path;
  bool json = false;

  std::vector<std::string> suites{"all"};

  std::string bench_target;
  std::string bench_shape = "1x16x64x64";
  std::size_t bench_iters = 100;

  std::size_t train_steps = 0;
  std::string train_compare;
  std::string train_out;
  double compare_tolerance = 1e-6;

  std::string dct_what;
  std::size_t dct_u = 0, dct_v = 1, dct_h = 8, dct_w = 8;
  bool dct_normalized = false;
  std::string dct_in;
  std::string dct_out;
};

inline int emit(std::ostream& out, bool json, const nlohmann::json& report, const std::string& plain) {
  if (json) {
    out << report.dump(2) << '\n';
  } else {
    out << plain;
  }
  return 0;
}

inline int run_verify(const CliState& st, std::ostream& out) {
  const SuiteReport report = run_suite(st.suites, st.seed);
  std::ostringstream plain;
  for (const auto& c : report.checks) {
    plain << (c.passed ? "PASS " : "FAIL ") << std::left << std::setw(34) << c.name << " metric "
          << std::scientific << std::setprecision(3) << c.metric << " tol " << c.tolerance << std::fixed
          << std::setprecision(1) << "  " << c.millis << " ms\n";
  }
  plain << (report.passed() ? "all checks passed" : "some checks FAILED") << " (seed " << st.seed << ")\n";
  emit(out, st.json, report.to_json(), plain.str());
  return report.passed() ? exit_pass : exit_fail;
}

inline int run_bench(const CliState& st, const PipelineConfig& cfg, std::ostream& out) {
  const Shape shape = parse_shape(st.bench_shape);
  if (st.bench_iters == 0) throw ValueError("--iters must be positive");
  const LfuConfig lc = LfuConfig::make(shape.c, cfg.encoder.receptive_field, cfg.encoder.branches);
  Rng rng(st.seed);
  Lfu<float> lfu("lfu", lc);
  lfu.init(rng);
  for (auto& b : lfu.branches()) b.bias()->assign(random_uniform<float>(b.bias()->shape(), rng, -0.1, 0.1));
  const Tensor<float> x = random_uniform<float>(shape, rng, -1.0, 1.0);
  const MergedKernel<float> kernel = lfu.merged_kernel();

  struct Timing {
    double mean_ms = 0, min_ms = 1e300;
    Tensor<float> last;
  };
  const auto time_mode = [&](bool merged) {
    Timing t;
    double total = 0;
    for (std::size_t i = 0; i < st.bench_iters; ++i) {
      Graph<float> g;
      const auto start = std::chrono::steady_clock::now();
      Var<float> y = merged ? lfu.forward_with_kernel(g.constant(x), kernel)
                            : lfu.forward(g.constant(x), LfuMode::multi_branch);
      const double ms =
          std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
      total += ms;
      t.min_ms = std::min(t.min_ms, ms);
      if (i + 1 == st.bench_iters) t.last = y.value();
    }
    t.mean_ms = total / static_cast<double>(st.bench_iters);
    return t;
  };
  const Timing multi = time_mode(false);
  const Timing merged = time_mode(true);
  const double diff = max_abs_diff_any(multi.last, merged.last);
  const bool ok = diff <= 1e-4;
  const nlohmann::json report{
      {"benchmark", "lfu"},
      {"shape", {shape.n, shape.c, shape.h, shape.w}},
      {"iters", st.bench_iters},
      {"seed", st.seed},
      {"modes",
       {{"multi_branch", {{"mean_ms", multi.mean_ms}, {"min_ms", multi.min_ms}}},
        {"merged", {{"mean_ms", merged.mean_ms}, {"min_ms", merged.min_ms}}}}},
      {"equivalence", {{"max_abs_diff", diff}, {"tolerance", 1e-4}, {"status", ok ? "pass" : "fail"}}}};
  std::ostringstream plain;
  plain << std::fixed << std::setprecision(3) << "lfu benchmark " << shape.str() << " x" << st.bench_iters
        << " (seed " << st.seed << ")\n"
        << "  multi_branch  mean " << multi.mean_ms << " ms  min " << multi.min_ms << " ms\n"
        << "  merged        mean " << merged.mean_ms << " ms  min " << merged.min_ms << " ms\n"
        << std::scientific << "  max |multi - merged| = " << diff << (ok ? " (pass)\n" : " (FAIL)\n");
  emit(out, st.json, report, plain.str());
  return ok ? exit_pass : exit_fail;
}

inline int run_train(const CliState& st, PipelineConfig cfg, std::ostream& out, std::ostream& err) {
  if (st.train_steps > 0) cfg.train.steps = st.train_steps;
  LossWeights w = cfg.loss;
  w.lambda2 = 0.0;
  if (w.lambda1 == 0.0) throw ConfigError("lambda1", "toy training needs lambda1 > 0");
  const TrainReport report = toy_train_run<float>(cfg.train, cfg.encoder, w);
  bool ok = report.halved();
  nlohmann::json j = report.to_json();
  std::ostringstream plain;
  plain << "toy training: " << report.losses.size() << " steps, seed " << report.seed << "\n"
        << std::scientific << std::setprecision(6) << "  initial loss " << report.initial() << "\n"
        << "  final loss   " << report.final_loss() << "\n"
        << std::fixed << std::setprecision(4) << "  final/initial " << report.ratio()
        << (report.halved() ? " (<= 0.5, pass)\n" : " (> 0.5, FAIL)\n");
  if (!st.train_compare.empty()) {
    std::ifstream in(st.train_compare);
    if (!in) throw ConfigError("--compare", "cannot open " + st.train_compare);
    const TrainReport fixture = TrainReport::from_json(nlohmann::json::parse(in));
    double worst = fixture.losses.size() == report.losses.size() ? 0.0 : 1e300;
    for (std::size_t i = 0; i < std::min(fixture.losses.size(), report.losses.size()); ++i) {
      const double a = fixture.losses[i], b = report.losses[i];
      worst = std::max(worst, std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-12}));
    }
    const bool match = worst <= st.compare_tolerance;
    ok = ok && match;
    j["regression"] = {{"fixture", st.train_compare},
                       {"max_rel_diff", worst},
                       {"tolerance", st.compare_tolerance},
                       {"status", match ? "pass" : "fail"}};
    plain << std::scientific << std::setprecision(3) << "  regression vs " << st.train_compare << ": max rel diff "
          << worst << (match ? " (pass)\n" : " (FAIL)\n");
  }
  if (!st.train_out.empty()) {
    std::ofstream f(st.train_out);
    if (!f) {
      err << "cannot write " << st.train_out << '\n';
      return exit_fail;
    }
    f << report.to_json().dump(2) << '\n';
  }
  emit(out, st.json, j, plain.str());
  return ok ? exit_pass : exit_fail;
}

inline int run_dct(const CliState& st, std::ostream& out) {
  nlohmann::json report{{"seed", st.seed}, {"out", st.dct_out}};
  std::ostringstream plain;
  if (st.dct_what == "basis") {
    const auto b = dct_basis<double>(st.dct_u, st.dct_v, st.dct_h, st.dct_w, st.dct_normalized);
    write_fdt(st.dct_out, b.values);
    report["basis"] = {{"u", st.dct_u}, {"v", st.dct_v}, {"shape", {1, 1, st.dct_h, st.dct_w}},
                       {"normalized", st.dct_normalized}};
    plain << "wrote basis (" << st.dct_u << "," << st.dct_v << ") " << st.dct_h << "x" << st.dct_w << " to "
          << st.dct_out << '\n';
  } else {
    if (st.dct_in.empty()) throw ConfigError("--in", "spectrum needs an input FDT file");
    AnyTensor input;
    try {
      input = read_fdt_any(st.dct_in);
    } catch (const FormatError& e) {
      throw ConfigError("--in", e.what());
    }
    Shape s;
    std::visit(
        [&](const auto& t) {
          s = t.shape();
          write_fdt(st.dct_out, dct2d(t));
        },
        input);
    report["spectrum"] = {{"in", st.dct_in}, {"shape", {s.n, s.c, s.h, s.w}}};
    plain << "wrote spectrum of " << st.dct_in << " " << s.str() << " to " << st.dct_out << '\n';
  }
  plain << "seed " << st.seed << '\n';
  emit(out, st.json, report, plain.str());
  return exit_pass;
}

inline int run_info(const CliState& st, const PipelineConfig& cfg, std::ostream& out) {
  EncoderConfig ec = cfg.encoder;
  ReconstructionModel<float> model(ec, cfg.cru());
  ParamList<float> enc = model.encoder().parameters();
  ParamList<float> cru_i, cru_v;
  model.cru(Modality::infrared).collect(cru_i);
  model.cru(Modality::visible).collect(cru_v);
  const std::size_t n_enc = count_elements(enc), n_i = count_elements(cru_i), n_v = count_elements(cru_v);
  nlohmann::json stages = nlohmann::json::array();
  for (std::size_t s = 0; s < ec.stages; ++s) stages.push_back(ec.stage_channels(s));
  const nlohmann::json report{{"seed", ec.seed},
                              {"encoder", describe(ec)},
                              {"train", describe(cfg.train)},
                              {"stage_channels", stages},
                              {"cumulative_stride", ec.cumulative_stride()},
                              {"parameters",
                               {{"encoder", n_enc},
                                {"cru_ir", n_i},
                                {"cru_vis", n_v},
                                {"total", n_enc + n_i + n_v},
                                {"buffers", count_elements(enc, false) - n_enc}}}};
  std::ostringstream plain;
  plain << "config (seed " << ec.seed << ")\n" << describe(ec).dump() << "\n"
        << "stage channels:";
  for (std::size_t s = 0; s < ec.stages; ++s) plain << ' ' << ec.stage_channels(s);
  plain << "\ntrainable parameters: encoder " << n_enc << ", cru_ir " << n_i << ", cru_vis " << n_v << ", total "
        << n_enc + n_i + n_v << '\n';
  emit(out, st.json, report, plain.str());
  return exit_pass;
}

}  // namespace detail

/// Parses and runs one invocation. Reports go to `out`, diagnostics to `err`.
/// Returns 0 when every executed check passes, 1 on check failure, 2 on usage
/// or configuration errors.
inline int run_cli(std::vector<std::string> args, std::ostream& out, std::ostream& err) {
  detail::CliState st;
  CLI::App app{"fd2net: frequency-decomposition encoder toolkit", "fd2net"};
  app.fallthrough();
  app.require_subcommand(1, 1);
  app.add_option("--seed", st.seed, "seed for all randomized behaviour");
  app.add_option("--config", st.config_path, "JSON configuration file");
  app.add_flag("--json", st.json, "emit the structured report");

  auto* verify = app.add_subcommand("verify", "run verification suites");
  verify->add_option("--suite", st.suites, "suite name (repeatable)")
      ->check(CLI::IsMember({"tensor", "dct", "hfu", "lfu", "css", "mrm", "training", "all"}));

  auto* bench = app.add_subcommand("bench", "time multi-branch vs merged LFU");
  bench->add_option("target", st.bench_target, "what to benchmark")->required()->check(CLI::IsMember({"lfu"}));
  bench->add_option("--shape", st.bench_shape, "input shape NxCxHxW");
  bench->add_option("--iters", st.bench_iters, "repetitions per mode");

  auto* train = app.add_subcommand("train-toy", "run the toy reconstruction loop");
  train->add_option("--steps", st.train_steps, "override the number of steps");
  train->add_option("--compare", st.train_compare, "regression fixture (training report JSON)");
  train->add_option("--compare-tolerance", st.compare_tolerance, "max relative loss difference");
  train->add_option("--out", st.train_out, "write the training report here");

  auto* dct = app.add_subcommand("dct", "export a DCT basis plane or spectrum as FDT");
  dct->add_option("what", st.dct_what, "basis or spectrum")->required()->check(CLI::IsMember({"basis", "spectrum"}));
  dct->add_option("--u", st.dct_u, "vertical frequency");
  dct->add_option("--v", st.dct_v, "horizontal frequency");
  dct->add_option("--height", st.dct_h, "basis height");
  dct->add_option("--width", st.dct_w, "basis width");
  dct->add_flag("--normalized", st.dct_normalized, "orthonormal scaling");
  dct->add_option("--in", st.dct_in, "input FDT (spectrum)");
  dct->add_option("--out", st.dct_out, "output FDT")->required();

  auto* info = app.add_subcommand("info", "print the configuration and parameter counts");

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return exit_pass;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return exit_pass;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n\n" << app.help();
    return exit_usage;
  }

  try {
    PipelineConfig cfg;
    if (!st.config_path.empty()) cfg = load_config(st.config_path);
    if (app.count("--seed") > 0 || st.config_path.empty()) cfg.set_seed(st.seed);
    st.seed = cfg.train.seed;
    if (verify->parsed()) return detail::run_verify(st, out);
    if (bench->parsed()) return detail::run_bench(st, cfg, out);
    if (train->parsed()) return detail::run_train(st, cfg, out, err);
    if (dct->parsed()) return detail::run_dct(st, out);
    if (info->parsed()) return detail::run_info(st, cfg, out);
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return exit_usage;
  } catch (const ValueError& e) {
    err << "invalid argument: " << e.what() << "\n\n" << app.help();
    return exit_usage;
  } catch (const ShapeError& e) {
    err << "invalid argument: " << e.what() << "\n\n" << app.help();
    return exit_usage;
  } catch (const TrainingDiverged& e) {
    err << e.what() << '\n';
    return exit_fail;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return exit_fail;
  }
  err << app.help();
  return exit_usage;
}

inline int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  return run_cli(std::vector<std::string>(argv + 1, argv + argc), out, err);
}

}  // namespace fd2

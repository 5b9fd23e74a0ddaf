// crsel: command-line front end for the selector, the ScA head, gradient
// checks, detection metrics and fixture generation.
//
// Exit codes: 0 success, 1 validation failure, 2 check failure.

#include <cstdint>
#include <cstdio>
#include <exception>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "crsel/crsel.hpp"

namespace fs = std::filesystem;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitValidation = 1;
constexpr int kExitCheckFailed = 2;

struct RunConfig {
  std::string out_dir = ".";
  std::optional<std::uint64_t> seed;

  // crselector
  std::string features;
  std::string image;
  std::string params;
  std::optional<std::size_t> window;
  std::optional<float> r;
  std::optional<float> tau;
  bool soft_mask = false;
  bool hard_mask = false;

  // sca
  std::vector<std::string> levels;

  // gradcheck
  std::string module = "all";
  double threshold = 1e-3;
  std::size_t max_sites = 64;

  // eval
  std::string dets;
  std::string gts;
  bool voc11 = false;

  // gen-fixtures
  double crack_fraction = 0.06;
};

std::uint64_t effective_seed(const RunConfig& cfg, std::uint64_t fallback = 42) { return cfg.seed.value_or(fallback); }

std::string keymask_text(const crsel::KeyMask<float>& km) {
  std::ostringstream os;
  char buf[32];
  os << "# windows " << km.n << "x" << km.rows << "x" << km.cols << (km.hard ? " hard" : " soft") << "\n";
  for (std::size_t b = 0; b < km.n; ++b) {
    os << "batch " << b << "\n";
    for (std::size_t i = 0; i < km.rows; ++i) {
      for (std::size_t j = 0; j < km.cols; ++j) {
        std::snprintf(buf, sizeof buf, "%.6f", static_cast<double>(km.values[(b * km.rows + i) * km.cols + j]));
        os << (j ? " " : "") << buf;
      }
      os << "\n";
    }
  }
  return os.str();
}

int cmd_crselector(const RunConfig& cfg) {
  crsel::CRSelectorBundle bundle = crsel::load_crp(cfg.params);
  auto& p = bundle.params;
  if (cfg.window) {
    p.m = *cfg.window;
    if (p.w_mask.rows != p.m * p.m) {
      throw crsel::DimensionError("--window " + std::to_string(p.m) + " incompatible with w_mask of " +
                                  std::to_string(p.w_mask.rows) + " rows in " + cfg.params);
    }
  }
  if (cfg.r) p.r = *cfg.r;
  if (cfg.tau) p.tau = *cfg.tau;
  if (cfg.soft_mask) p.hard_mask = false;
  if (cfg.hard_mask) p.hard_mask = true;
  p.validate();
  const std::uint64_t seed = effective_seed(cfg, bundle.seed);

  const crsel::Tensor x = crsel::load_crt(cfg.features);
  const crsel::Tensor image = crsel::load_crt(cfg.image);
  const auto trace = crsel::crselector_trace(x, image, p, crsel::RngState{seed});

  const fs::path out(cfg.out_dir);
  fs::create_directories(out);
  crsel::save_crt(out / "output.crt", trace.output);
  crsel::write_file_atomic(out / "keymask.txt", keymask_text(trace.keymask));
  crsel::write_file_atomic(out / "heatmap_input.pgm", crsel::encode_pgm(crsel::activation_heatmap(x)));
  crsel::write_file_atomic(out / "heatmap_output.pgm", crsel::encode_pgm(crsel::activation_heatmap(trace.output)));

  std::ostringstream meta;
  meta << "subcommand=crselector\nseed=" << seed << "\nwindow=" << p.m << "\nr=" << p.r << "\ntau=" << p.tau
       << "\nmask=" << (p.hard_mask ? "hard" : "soft") << "\nshape=" << x.shape().str() << "\n";
  crsel::write_file_atomic(out / "run.txt", meta.str());
  std::cout << meta.str();
  return kExitOk;
}

int cmd_sca(const RunConfig& cfg) {
  const crsel::ScAParams<float> p = crsel::load_sca(cfg.params);
  crsel::PyramidFeatures<float> levels;
  for (const auto& path : cfg.levels) levels.push_back(crsel::load_crt(path));
  crsel::validate_pyramid(levels);
  const auto gamma = crsel::scale_weights(levels, p);
  const auto weighted = crsel::apply_scale_weighting(levels, gamma);

  const fs::path out(cfg.out_dir);
  fs::create_directories(out);
  std::ostringstream g;
  char buf[48];
  g << "# gamma per batch element, one column per level\n";
  for (std::size_t b = 0; b < gamma.batch; ++b) {
    for (std::size_t h = 0; h < gamma.levels; ++h) {
      std::snprintf(buf, sizeof buf, "%.9g", static_cast<double>(gamma(b, h)));
      g << (h ? " " : "") << buf;
    }
    g << "\n";
  }
  for (std::size_t h = 0; h < weighted.size(); ++h) {
    crsel::save_crt(out / ("level_" + std::to_string(h) + ".crt"), weighted[h]);
  }
  crsel::write_file_atomic(out / "gamma.txt", g.str());
  std::cout << "subcommand=sca\nseed=" << effective_seed(cfg) << "\nlevels=" << levels.size() << "\n" << g.str();
  return kExitOk;
}

int cmd_gradcheck(const RunConfig& cfg) {
  crsel::GradCheckOptions opt;
  opt.threshold = cfg.threshold;
  opt.max_sites = cfg.max_sites;
  const std::uint64_t seed = effective_seed(cfg);
  const auto reports = crsel::check_module(cfg.module, seed, opt);
  std::ostringstream os;
  char buf[256];
  std::size_t failed = 0;
  for (const auto& r : reports) {
    std::snprintf(buf, sizeof buf, "%s %s %zu %.12e %.12e %.6e %s\n", r.op_name.c_str(), r.param_path.c_str(), r.coord,
                  r.analytic, r.numeric, r.rel_err, r.pass ? "pass" : "FAIL");
    os << buf;
    if (!r.pass) ++failed;
  }
  std::cout << os.str();
  std::cerr << "gradcheck seed=" << seed << " checks=" << reports.size() << " failed=" << failed << "\n";
  if (cfg.out_dir != ".") {
    fs::create_directories(cfg.out_dir);
    crsel::write_file_atomic(fs::path(cfg.out_dir) / "gradcheck.txt", os.str());
  }
  return failed == 0 ? kExitOk : kExitCheckFailed;
}

crsel::eval::BoxFile parse_box_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path);
  return crsel::eval::parse_boxes(in, path);
}

int cmd_eval(const RunConfig& cfg) {
  const auto dets = parse_box_file(cfg.dets);
  const auto gts = parse_box_file(cfg.gts);
  if (!dets.has_scores && !dets.ground_truth.empty()) {
    throw std::runtime_error(cfg.dets + ": detection records need a score column");
  }
  if (gts.has_scores) throw std::runtime_error(cfg.gts + ": ground-truth records must not carry scores");
  crsel::eval::EvalConfig ec;
  if (cfg.voc11) ec.interpolation = crsel::eval::Interpolation::voc11;
  const auto result = crsel::eval::evaluate(dets.detections, gts.ground_truth, ec);
  const std::string report = crsel::eval::format_report(result);
  std::cout << report;
  if (cfg.out_dir != ".") {
    fs::create_directories(cfg.out_dir);
    crsel::write_file_atomic(fs::path(cfg.out_dir) / "metrics.txt", report);
  }
  return kExitOk;
}

int cmd_gen_fixtures(const RunConfig& cfg) {
  crsel::fixtures::FixtureConfig fc;
  fc.seed = effective_seed(cfg);
  fc.crack_fraction = cfg.crack_fraction;
  const auto manifest = crsel::fixtures::write_fixture_set(cfg.out_dir, fc);
  std::cout << "subcommand=gen-fixtures\nseed=" << fc.seed << "\nfiles=" << manifest.size() << "\n";
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Critical-region selector, scale-aware head and detection metrics toolkit"};
  app.require_subcommand(1);
  RunConfig cfg;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--seed", cfg.seed, "Random seed (default 42)");
    sub->add_option("--out-dir", cfg.out_dir, "Output directory");
  };

  auto* crs = app.add_subcommand("crselector", "Run the critical-region selector on a feature map");
  add_common(crs);
  crs->add_option("--features", cfg.features, "Feature map (CRT1)")->required()->check(CLI::ExistingFile);
  crs->add_option("--image", cfg.image, "Original image (CRT1)")->required()->check(CLI::ExistingFile);
  crs->add_option("--params", cfg.params, "Selector parameters (CRP1)")->required()->check(CLI::ExistingFile);
  crs->add_option("--window", cfg.window, "Override window size")->check(CLI::PositiveNumber);
  crs->add_option("--r", cfg.r, "Override offset scale")->check(CLI::NonNegativeNumber);
  crs->add_option("--tau", cfg.tau, "Override Gumbel temperature")->check(CLI::PositiveNumber);
  auto* soft = crs->add_flag("--soft-mask", cfg.soft_mask, "Use soft keep probabilities");
  crs->add_flag("--hard-mask", cfg.hard_mask, "Use hard straight-through mask")->excludes(soft);

  auto* sca = app.add_subcommand("sca", "Apply the scale-aware head to pyramid levels");
  add_common(sca);
  sca->add_option("--levels", cfg.levels, "Pyramid level files (CRT1), in level order")
      ->required()
      ->check(CLI::ExistingFile);
  sca->add_option("--params", cfg.params, "Gate parameters (SCA1)")->required()->check(CLI::ExistingFile);

  auto* gc = app.add_subcommand("gradcheck", "Compare analytic and finite-difference gradients");
  add_common(gc);
  gc->add_option("--module", cfg.module, "Module to check")
      ->check(CLI::IsMember({"all", "tensor-core", "crselector", "sca-head"}));
  gc->add_option("--threshold", cfg.threshold, "Relative error threshold")->check(CLI::NonNegativeNumber);
  gc->add_option("--max-sites", cfg.max_sites, "Coordinates checked per tensor")->check(CLI::PositiveNumber);

  auto* ev = app.add_subcommand("eval", "Detection metrics (mAP, mAP50, mAP_S/M/L)");
  add_common(ev);
  ev->add_option("--dets", cfg.dets, "Detection records")->required()->check(CLI::ExistingFile);
  ev->add_option("--gts", cfg.gts, "Ground-truth records")->required()->check(CLI::ExistingFile);
  ev->add_flag("--voc11", cfg.voc11, "11-point interpolation instead of 101-point");

  auto* gen = app.add_subcommand("gen-fixtures", "Write deterministic synthetic inputs");
  add_common(gen);
  gen->add_option("--crack-fraction", cfg.crack_fraction, "Bright pixel fraction of the crack image")
      ->check(CLI::Range(0.0, 1.0));

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitValidation;
  }

  try {
    if (*crs) return cmd_crselector(cfg);
    if (*sca) return cmd_sca(cfg);
    if (*gc) return cmd_gradcheck(cfg);
    if (*ev) return cmd_eval(cfg);
    if (*gen) return cmd_gen_fixtures(cfg);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitValidation;
  }
  return kExitValidation;
}

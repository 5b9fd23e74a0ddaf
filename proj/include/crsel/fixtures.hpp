#pragma once

// Deterministic synthetic inputs: random tensors, "crack" images, parameter
// bundles and matched detection / ground-truth box sets.

#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <set>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "crsel/crselector.hpp"
#include "crsel/detect_eval.hpp"
#include "crsel/heatmap.hpp"
#include "crsel/io.hpp"
#include "crsel/rng.hpp"
#include "crsel/sca_head.hpp"
#include "crsel/tensor.hpp"

namespace crsel::fixtures {

inline Tensor uniform_tensor(Shape s, RngStream stream, float lo = -1.0f, float hi = 1.0f) {
  RngCursor rng(stream);
  Tensor t(s);
  for (auto& v : t.data()) v = static_cast<float>(rng.uniform(lo, hi));
  return t;
}

inline constexpr float kCrackBackgroundMax = 0.1f;
inline constexpr float kCrackForeground = 1.0f;

/// Dark image (values in [0, 0.1)) with bright one-pixel polylines. Drawing
/// stops at the pixel that brings the bright fraction to `fraction`, so the
/// foreground count is round(fraction * h * w).
inline Tensor crack_image(std::size_t h, std::size_t w, double fraction, RngStream stream) {
  RngCursor rng(stream);
  Tensor img(Shape{1, 1, h, w});
  for (auto& v : img.data()) v = static_cast<float>(rng.uniform(0.0, kCrackBackgroundMax));
  const auto target = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(h * w)));
  std::size_t bright = 0;
  auto plot = [&](long i, long j) {
    if (i < 0 || j < 0 || i >= static_cast<long>(h) || j >= static_cast<long>(w) || bright >= target) return;
    float& px = img(0, 0, static_cast<std::size_t>(i), static_cast<std::size_t>(j));
    if (px != kCrackForeground) {
      px = kCrackForeground;
      ++bright;
    }
  };
  for (int guard = 0; bright < target && guard < 10000; ++guard) {
    // one polyline of 2..5 segments
    long i = static_cast<long>(rng.below(h));
    long j = static_cast<long>(rng.below(w));
    const auto segments = 2 + rng.below(4);
    for (std::uint64_t s = 0; s < segments && bright < target; ++s) {
      const double angle = rng.uniform(0.0, 6.283185307179586);
      const double len = rng.uniform(3.0, 10.0);
      const long i1 = i + std::lround(len * std::sin(angle));
      const long j1 = j + std::lround(len * std::cos(angle));
      // Bresenham
      long di = std::labs(i1 - i), dj = std::labs(j1 - j);
      const long si = i < i1 ? 1 : -1, sj = j < j1 ? 1 : -1;
      long err = dj - di;
      long ci = i, cj = j;
      while (true) {
        plot(ci, cj);
        if (ci == i1 && cj == j1) break;
        const long e2 = 2 * err;
        if (e2 > -di) {
          err -= di;
          cj += sj;
        }
        if (e2 < dj) {
          err += dj;
          ci += si;
        }
      }
      i = i1;
      j = j1;
    }
  }
  return img;
}

struct BoxFixture {
  std::vector<eval::GroundTruthBox> gts;
  std::vector<eval::Detection> dets;
};

/// Random boxes on `images` images with between `min_gts` and `max_gts` ground
/// truths and at most `max_dets` detections per image. Detections are jittered copies of ground
/// truths plus unrelated boxes; scores are quantised to 1/1000 so ties occur.
inline BoxFixture random_boxes(RngCursor& rng, std::size_t images, std::size_t max_dets, std::size_t max_gts,
                               std::size_t classes = 2, std::size_t min_gts = 0) {
  BoxFixture fx;
  auto random_box = [&] {
    // side lengths spanning the small / medium / large area buckets
    static const double sides[] = {8, 20, 31, 40, 64, 90, 120, 160};
    const double bw = sides[rng.below(8)] * rng.uniform(0.8, 1.2);
    const double bh = sides[rng.below(8)] * rng.uniform(0.8, 1.2);
    const double x1 = std::round(rng.uniform(0, 300));
    const double y1 = std::round(rng.uniform(0, 300));
    return eval::BBox{x1, y1, x1 + std::round(bw), y1 + std::round(bh)};
  };
  for (std::size_t im = 0; im < images; ++im) {
    const std::string id = "img" + std::to_string(im);
    const std::size_t n_gt = min_gts + rng.below(max_gts - min_gts + 1);
    std::vector<eval::GroundTruthBox> image_gts;
    for (std::size_t g = 0; g < n_gt; ++g) {
      image_gts.push_back({id, static_cast<std::int64_t>(rng.below(classes)), random_box()});
    }
    const std::size_t n_det = rng.below(max_dets + 1);
    for (std::size_t d = 0; d < n_det; ++d) {
      eval::Detection det;
      det.image_id = id;
      det.score = static_cast<double>(rng.below(1001)) / 1000.0;
      if (!image_gts.empty() && rng.uniform() < 0.75) {
        const auto& g = image_gts[rng.below(image_gts.size())];
        det.class_id = rng.uniform() < 0.9 ? g.class_id : static_cast<std::int64_t>(rng.below(classes));
        const double jit = std::max(1.0, 0.15 * std::min(g.box.width(), g.box.height()));
        det.box = g.box;
        det.box.x1 += std::round(rng.uniform(-jit, jit));
        det.box.y1 += std::round(rng.uniform(-jit, jit));
        det.box.x2 = std::max(det.box.x1, det.box.x2 + std::round(rng.uniform(-jit, jit)));
        det.box.y2 = std::max(det.box.y1, det.box.y2 + std::round(rng.uniform(-jit, jit)));
      } else {
        det.class_id = static_cast<std::int64_t>(rng.below(classes));
        det.box = random_box();
      }
      fx.dets.push_back(det);
    }
    fx.gts.insert(fx.gts.end(), image_gts.begin(), image_gts.end());
  }
  return fx;
}

inline std::string format_number(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3f", v);
  return buf;
}

inline std::string format_gts(const std::vector<eval::GroundTruthBox>& gts) {
  std::ostringstream os;
  for (const auto& g : gts) {
    os << g.image_id << ' ' << g.class_id << ' ' << format_number(g.box.x1) << ' ' << format_number(g.box.y1) << ' '
       << format_number(g.box.x2) << ' ' << format_number(g.box.y2) << '\n';
  }
  return os.str();
}

inline std::string format_dets(const std::vector<eval::Detection>& dets) {
  std::ostringstream os;
  for (const auto& d : dets) {
    os << d.image_id << ' ' << d.class_id << ' ' << format_number(d.box.x1) << ' ' << format_number(d.box.y1) << ' '
       << format_number(d.box.x2) << ' ' << format_number(d.box.y2) << ' ' << format_number(d.score) << '\n';
  }
  return os.str();
}

struct FixtureConfig {
  std::uint64_t seed = 42;
  std::size_t channels = 4;
  std::size_t height = 8;
  std::size_t width = 8;
  std::size_t window = 2;
  std::size_t image_size = 32;
  double crack_fraction = 0.06;
};

struct ManifestEntry {
  std::string file;
  std::string kind;
  std::string shape;
  std::string stream;
};

inline std::string shape_text(const Shape& s) {
  return std::to_string(s.n) + "x" + std::to_string(s.c) + "x" + std::to_string(s.h) + "x" + std::to_string(s.w);
}

/// Writes the full fixture set into `dir` and returns the manifest entries
/// (also written as manifest.txt).
inline std::vector<ManifestEntry> write_fixture_set(const std::filesystem::path& dir, const FixtureConfig& cfg) {
  std::filesystem::create_directories(dir);
  const RngState rng{cfg.seed};
  std::vector<ManifestEntry> manifest;

  const Tensor features =
      uniform_tensor(Shape{1, cfg.channels, cfg.height, cfg.width}, rng.stream("fixtures/features"));
  save_crt(dir / "features.crt", features);
  manifest.push_back({"features.crt", "tensor", shape_text(features.shape()), "fixtures/features"});

  const Tensor crack = crack_image(cfg.image_size, cfg.image_size, cfg.crack_fraction, rng.stream("fixtures/crack"));
  save_crt(dir / "image.crt", crack);
  manifest.push_back({"image.crt", "crack-image", shape_text(crack.shape()), "fixtures/crack"});
  write_file_atomic(dir / "image.pgm", encode_pgm(activation_heatmap(crack)));
  manifest.push_back({"image.pgm", "pgm", std::to_string(cfg.image_size) + "x" + std::to_string(cfg.image_size),
                      "fixtures/crack"});

  CRSelectorBundle bundle;
  bundle.params = random_crselector_params<float>(cfg.channels, 1, cfg.window, rng.stream("fixtures/params"));
  bundle.seed = cfg.seed;
  save_crp(dir / "params.crp", bundle);
  manifest.push_back({"params.crp", "crselector-params", "c=" + std::to_string(cfg.channels) + ",m=" +
                                                             std::to_string(cfg.window),
                      "fixtures/params"});
  bundle.params.out_conv = Conv1x1Params<float>::zeros(cfg.channels, cfg.channels);
  save_crp(dir / "params_zero_out.crp", bundle);
  manifest.push_back({"params_zero_out.crp", "crselector-params",
                      "c=" + std::to_string(cfg.channels) + ",m=" + std::to_string(cfg.window), "fixtures/params"});

  {
    RngCursor g(rng.stream("fixtures/sca"));
    ScAParams<float> sca{Conv1x1Params<float>::zeros(1, cfg.channels)};
    for (auto& v : sca.gate_conv.weight.data) v = static_cast<float>(g.uniform(-1.0, 1.0));
    sca.gate_conv.bias[0] = static_cast<float>(g.uniform(-0.5, 0.5));
    save_sca(dir / "sca.sca", sca);
    manifest.push_back({"sca.sca", "sca-params", "c=" + std::to_string(cfg.channels), "fixtures/sca"});
    save_sca(dir / "sca_zero.sca", ScAParams<float>{Conv1x1Params<float>::zeros(1, cfg.channels)});
    manifest.push_back({"sca_zero.sca", "sca-params", "c=" + std::to_string(cfg.channels), "none"});
  }

  for (std::size_t lvl = 0; lvl < 3; ++lvl) {
    const std::size_t side = (2 * cfg.height) >> lvl;
    const std::string stream = "fixtures/level" + std::to_string(lvl);
    const Tensor t = uniform_tensor(Shape{1, cfg.channels, std::max<std::size_t>(side, 1),
                                          std::max<std::size_t>(side, 1)},
                                    rng.stream(stream));
    const std::string name = "level" + std::to_string(lvl) + ".crt";
    save_crt(dir / name, t);
    manifest.push_back({name, "pyramid-level", shape_text(t.shape()), stream});
  }

  RngCursor boxes_rng(rng.stream("fixtures/boxes"));
  const BoxFixture boxes = random_boxes(boxes_rng, 3, 6, 4, 2, 1);
  write_file_atomic(dir / "gts.txt", format_gts(boxes.gts));
  manifest.push_back({"gts.txt", "ground-truth", std::to_string(boxes.gts.size()) + " boxes", "fixtures/boxes"});
  write_file_atomic(dir / "dets.txt", format_dets(boxes.dets));
  manifest.push_back({"dets.txt", "detections", std::to_string(boxes.dets.size()) + " boxes", "fixtures/boxes"});

  std::ostringstream os;
  os << "seed=" << cfg.seed << "\n";
  os << "crack_foreground_fraction=" << format_number(cfg.crack_fraction) << "\n";
  os << "crack_foreground_threshold=0.5\n";
  for (const auto& e : manifest) {
    os << "file=" << e.file << " kind=" << e.kind << " shape=" << e.shape << " stream=" << e.stream << "\n";
  }
  write_file_atomic(dir / "manifest.txt", os.str());
  return manifest;
}

}  // namespace crsel::fixtures

// Staged oracles: naive double-precision loops that never call the library's
// ops, compared against the templated pipeline. Frozen values below were
// produced by these oracles.

#include <gtest/gtest.h>

#include <cmath>

#include "support.hpp"

using namespace crsel;
using testing_support::random_tensor_d;

namespace {

using D = BasicTensor<double>;

D naive_conv(const D& x, const Conv1x1Params<double>& p) {
  D y(Shape{x.n(), p.weight.rows, x.h(), x.w()});
  for (std::size_t b = 0; b < x.n(); ++b)
    for (std::size_t o = 0; o < p.weight.rows; ++o)
      for (std::size_t i = 0; i < x.h(); ++i)
        for (std::size_t j = 0; j < x.w(); ++j) {
          double acc = p.bias[o];
          for (std::size_t k = 0; k < x.c(); ++k) acc += p.weight(o, k) * x(b, k, i, j);
          y(b, o, i, j) = acc;
        }
  return y;
}

D naive_relu(D x) {
  for (auto& v : x.data()) v = v > 0 ? v : 0;
  return x;
}

// bilinear sample with clamped coordinates, written as x0/x1 neighbours
double naive_sample(const D& x, std::size_t b, std::size_t ch, double sy, double sx) {
  sy = std::clamp(sy, 0.0, static_cast<double>(x.h() - 1));
  sx = std::clamp(sx, 0.0, static_cast<double>(x.w() - 1));
  const auto y0 = static_cast<std::size_t>(std::floor(sy));
  const auto x0 = static_cast<std::size_t>(std::floor(sx));
  const std::size_t y1 = std::min(y0 + 1, x.h() - 1);
  const std::size_t x1 = std::min(x0 + 1, x.w() - 1);
  const double fy = sy - y0, fx = sx - x0;
  return (1 - fy) * (1 - fx) * x(b, ch, y0, x0) + (1 - fy) * fx * x(b, ch, y0, x1) +
         fy * (1 - fx) * x(b, ch, y1, x0) + fy * fx * x(b, ch, y1, x1);
}

struct OracleOut {
  D offset;
  std::vector<double> keymask;
  D attended;  // before out_conv
  D output;
};

OracleOut naive_crselector(const D& x, const D& image, const CRSelectorParams<double>& p,
                           const std::vector<double>& noise) {
  const std::size_t n = x.n(), c = x.c(), h = x.h(), w = x.w(), m = p.m;
  D img(Shape{n, image.c(), h, w});
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t ch = 0; ch < image.c(); ++ch)
      for (std::size_t i = 0; i < h; ++i)
        for (std::size_t j = 0; j < w; ++j) img(b, ch, i, j) = image(b, ch, i * image.h() / h, j * image.w() / w);
  const D gti = naive_conv(naive_relu(naive_conv(img, p.gti_conv1)), p.gti_conv2);
  const D v = naive_conv(x, p.v_conv);

  D fused(Shape{n, 2 * c, h, w});
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t ch = 0; ch < 2 * c; ++ch)
      for (std::size_t i = 0; i < h; ++i)
        for (std::size_t j = 0; j < w; ++j) fused(b, ch, i, j) = ch < c ? x(b, ch, i, j) : gti(b, ch - c, i, j);
  OracleOut out;
  out.offset = naive_conv(naive_relu(fused), p.offset_conv);
  for (auto& o : out.offset.data()) o = std::tanh(o) * p.r;

  D omap(x.shape());
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t i = 0; i < h; ++i)
        for (std::size_t j = 0; j < w; ++j)
          omap(b, ch, i, j) = naive_sample(x, b, ch, i + out.offset(b, 1, i, j), j + out.offset(b, 0, i, j));

  const std::size_t wr = h / m, wc = w / m;
  auto win = [&](std::size_t b, std::size_t i, std::size_t j) { return (b * wr + i / m) * wc + j / m; };
  out.keymask.assign(n * wr * wc, 0.0);
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t a = 0; a < wr; ++a)
      for (std::size_t e = 0; e < wc; ++e) {
        double keep = 0, drop = 0;
        for (std::size_t t = 0; t < m * m; ++t) {
          const std::size_t i = a * m + t / m, j = e * m + t % m;
          double z = 0;
          for (std::size_t ch = 0; ch < c; ++ch) z += p.reduce(0, ch) * v(b, ch, i, j);
          for (std::size_t ch = 0; ch < c; ++ch) z += p.reduce(0, c + ch) * gti(b, ch, i, j);
          keep += z * p.w_mask(t, 0);
          drop += z * p.w_mask(t, 1);
        }
        const std::size_t wi = (b * wr + a) * wc + e;
        const double diff = ((keep + noise[2 * wi]) - (drop + noise[2 * wi + 1])) / p.tau;
        out.keymask[wi] = p.hard_mask ? (diff >= 0 ? 1.0 : 0.0) : 1.0 / (1.0 + std::exp(-diff));
      }

  D q(x.shape()), k(x.shape()), vc(v.shape());
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t i = 0; i < h; ++i)
      for (std::size_t j = 0; j < w; ++j) {
        const double km = out.keymask[win(b, i, j)];
        for (std::size_t o = 0; o < c; ++o) {
          double qa = 0, ka = 0;
          for (std::size_t ch = 0; ch < c; ++ch) {
            qa += omap(b, ch, i, j) * km * p.w_q(ch, o);
            ka += omap(b, ch, i, j) * km * p.w_k(ch, o);
          }
          q(b, o, i, j) = qa;
          k(b, o, i, j) = ka;
        }
        for (std::size_t ch = 0; ch < v.c(); ++ch) vc(b, ch, i, j) = v(b, ch, i, j) * km;
      }

  out.attended = D(v.shape());
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t i = 0; i < h; ++i)
      for (std::size_t j = 0; j < w; ++j) {
        // query pixel (i, j) attends over its own window only
        const std::size_t i0 = i / m * m, j0 = j / m * m;
        std::vector<double> s;
        for (std::size_t ii = i0; ii < i0 + m; ++ii)
          for (std::size_t jj = j0; jj < j0 + m; ++jj) {
            double dot = 0;
            for (std::size_t ch = 0; ch < c; ++ch) dot += q(b, ch, i, j) * k(b, ch, ii, jj);
            s.push_back(dot / std::sqrt(static_cast<double>(c)));
          }
        const double mx = *std::max_element(s.begin(), s.end());
        double z = 0;
        for (auto& e : s) z += (e = std::exp(e - mx));
        for (std::size_t ch = 0; ch < v.c(); ++ch) {
          double acc = 0;
          std::size_t t = 0;
          for (std::size_t ii = i0; ii < i0 + m; ++ii)
            for (std::size_t jj = j0; jj < j0 + m; ++jj) acc += s[t++] / z * vc(b, ch, ii, jj);
          out.attended(b, ch, i, j) = acc;
        }
      }
  out.output = naive_conv(out.attended, p.out_conv);
  for (std::size_t e = 0; e < x.size(); ++e) out.output[e] += x[e];
  return out;
}

double max_abs_diff(const D& a, const D& b) {
  double worst = 0;
  for (std::size_t e = 0; e < a.size(); ++e) worst = std::max(worst, std::abs(a[e] - b[e]));
  return worst;
}

struct FrozenCase {
  D x, image;
  CRSelectorParams<double> p;
  std::vector<double> noise;
};

// 1x4x4x4 input, 1x1x8x8 image, m = 2, seed 42
FrozenCase frozen_case(bool hard) {
  const RngState rng{42};
  RngCursor cur(rng.stream("oracle/inputs"));
  FrozenCase fc;
  fc.x = random_tensor_d(Shape{1, 4, 4, 4}, cur);
  fc.image = random_tensor_d(Shape{1, 1, 8, 8}, cur, 0, 1);
  fc.p = random_crselector_params<double>(4, 1, 2, rng.stream("oracle/params"));
  fc.p.hard_mask = hard;
  fc.noise = sample_gumbel_noise<double>(rng.stream("gumbel"), 4);
  return fc;
}

}  // namespace

TEST(StagedOracle, SelectorMatchesNaiveLoopsOnRandomCases) {
  RngCursor rng(RngState{31}.stream("oracle"));
  for (int trial = 0; trial < 40; ++trial) {
    const std::size_t m = 1 + rng.below(3), c = 1 + rng.below(4), n = 1 + rng.below(2);
    const D x = random_tensor_d(Shape{n, c, m * (1 + rng.below(3)), m * (1 + rng.below(3))}, rng, -2, 2);
    const D img = random_tensor_d(Shape{n, 1 + rng.below(2), 1 + rng.below(11), 1 + rng.below(11)}, rng, 0, 1);
    auto p = random_crselector_params<double>(c, img.c(), m, RngState{static_cast<std::uint64_t>(trial)}.stream("p"));
    p.hard_mask = trial % 2 == 0;
    p.tau = rng.uniform(0.3, 2.0);
    const std::size_t windows = n * (x.h() / m) * (x.w() / m);
    const auto noise = sample_gumbel_noise<double>(RngState{99}.stream("gumbel"), windows);
    const auto t = crselector_trace(x, img, p, noise);
    const auto o = naive_crselector(x, img, p, noise);
    EXPECT_LT(max_abs_diff(t.offset, o.offset), 1e-12) << trial;
    for (std::size_t wi = 0; wi < windows; ++wi) EXPECT_NEAR(t.keymask.values[wi], o.keymask[wi], 1e-12) << trial;
    EXPECT_LT(max_abs_diff(t.attention.attended, o.attended), 1e-10) << trial;
    EXPECT_LT(max_abs_diff(t.output, o.output), 1e-10) << trial;
  }
}

TEST(StagedOracle, FrozenSelectorValues) {
  for (bool hard : {true, false}) {
    const auto fc = frozen_case(hard);
    const auto o = naive_crselector(fc.x, fc.image, fc.p, fc.noise);
    const auto lib = crselector_trace(fc.x, fc.image, fc.p, fc.noise);
    EXPECT_LT(max_abs_diff(lib.output, o.output), 1e-12);

    // float path against the double oracle
    const auto lib32 = crselector_trace(fc.x.cast<float>(), fc.image.cast<float>(), fc.p.cast<float>(),
                                        std::vector<float>(fc.noise.begin(), fc.noise.end()));
    for (std::size_t e = 0; e < o.output.size(); ++e) EXPECT_NEAR(lib32.output[e], o.output[e], 1e-5);

    if (hard) {
      EXPECT_EQ(o.keymask, (std::vector<double>{1, 0, 0, 1}));
      EXPECT_NEAR(o.output[0], -0.78284569058474218, 1e-12);
      EXPECT_NEAR(o.output[17], 0.1471011217240733, 1e-12);
      EXPECT_NEAR(o.output[63], -0.47451739759551936, 1e-12);
    } else {
      EXPECT_NEAR(o.keymask[0], 0.87992233925692909, 1e-12);
      EXPECT_NEAR(o.keymask[3], 0.82526822980656445, 1e-12);
      EXPECT_NEAR(o.output[0], -0.73857221419809993, 1e-12);
      EXPECT_NEAR(o.output[63], -0.46958714066916007, 1e-12);
    }
  }
}

TEST(StagedOracle, AllDropMaskGivesIdentityWithZeroBias) {
  auto fc = frozen_case(true);
  fc.p.out_conv.bias.assign(fc.p.out_conv.bias.size(), 0.0);
  const auto t = crselector_trace(fc.x, fc.image, fc.p, fc.noise, std::optional<std::vector<double>>(
                                                                       std::vector<double>(4, 0.0)));
  EXPECT_EQ(t.output, fc.x);
}

TEST(StagedOracle, SaturatedLogitIgnoresNoise) {
  std::vector<double> logits{1e6, 0.0, 0.0, 1e6};
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    const auto noise = sample_gumbel_noise<double>(RngState{seed}.stream("gumbel"), 2);
    for (bool hard : {true, false}) {
      const auto km = gumbel_softmax(logits, noise, 1.0, hard);
      EXPECT_EQ(km.values[0], 1.0);
      EXPECT_EQ(km.values[1], 0.0);
    }
  }
}

TEST(StagedOracle, WarpHandExamples) {
  D x(Shape{1, 1, 3, 3}, {1, 2, 4, 8, 16, 32, 64, 128, 256});
  D off(Shape{1, 2, 3, 3});
  off(0, 0, 1, 1) = 1.0;  // interior pixel reads its right neighbour
  off(0, 0, 0, 0) = 0.5;  // between 1 and 2
  off(0, 0, 0, 1) = 0.5;  // between 2 and 4
  const D y = warp_bilinear(x, off);
  EXPECT_EQ(y(0, 0, 1, 1), 32.0);
  EXPECT_EQ(y(0, 0, 0, 0), 1.5);
  EXPECT_EQ(y(0, 0, 0, 1), 3.0);
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 3; ++j) EXPECT_EQ(naive_sample(x, 0, 0, i + off(0, 1, i, j), j + off(0, 0, i, j)),
                                                  y(0, 0, i, j));
}

TEST(StagedOracle, GtiAndProjectionExamples) {
  auto p = random_crselector_params<double>(2, 2, 1, RngState{4}.stream("p"));
  // zero image and zero biases give zero GTI
  p.gti_conv1.bias.assign(2, 0.0);
  p.gti_conv2.bias.assign(2, 0.0);
  const D zero_gti = compute_gti(D(Shape{1, 2, 3, 3}), p);
  for (double v : zero_gti.data()) EXPECT_EQ(v, 0.0);
  // identity convs pass a nonnegative image through
  p.gti_conv1 = Conv1x1Params<double>::identity(2);
  p.gti_conv2 = Conv1x1Params<double>::identity(2);
  RngCursor rng(RngState{5}.stream("t"));
  const D img = random_tensor_d(Shape{1, 2, 3, 3}, rng, 0, 1);
  EXPECT_EQ(compute_gti(img, p), img);
  // identity and zero projections
  p.w_q = Matrix<double>::identity(2);
  p.w_k = Matrix<double>(2, 2);
  const auto qk = project_qk(img, p);
  EXPECT_EQ(qk.q, img);
  for (double v : qk.k.data()) EXPECT_EQ(v, 0.0);
}

TEST(StagedOracle, RegionExtremes) {
  RngCursor rng(RngState{6}.stream("t"));
  const D v = random_tensor_d(Shape{1, 2, 4, 4}, rng);
  KeyMask<double> ones;
  ones.rows = ones.cols = 2;
  ones.values.assign(4, 1.0);
  auto r = partition_regions(v, v, ones, 2);
  EXPECT_EQ(r.v_c, v);
  for (double e : r.v_n.data()) EXPECT_EQ(e, 0.0);
  KeyMask<double> zeros = ones;
  zeros.values.assign(4, 0.0);
  r = partition_regions(v, v, zeros, 2);
  EXPECT_EQ(r.v_n, v);
  for (double e : r.v_c.data()) EXPECT_EQ(e, 0.0);
}

TEST(StagedOracle, ScaMatchesNaiveLoops) {
  RngCursor rng(RngState{7}.stream("t"));
  for (int trial = 0; trial < 30; ++trial) {
    const std::size_t n = 1 + rng.below(3), c = 1 + rng.below(4), levels = 1 + rng.below(4);
    PyramidFeatures<double> f;
    for (std::size_t h = 0; h < levels; ++h) {
      f.push_back(random_tensor_d(Shape{n, c, 1 + rng.below(6), 1 + rng.below(6)}, rng, -2, 2));
    }
    ScAParams<double> p{Conv1x1Params<double>::zeros(1, c)};
    for (auto& v : p.gate_conv.weight.data) v = rng.uniform(-2, 2);
    p.gate_conv.bias[0] = rng.uniform(-1, 1);
    const auto out = sca_forward(f, p);
    for (std::size_t h = 0; h < levels; ++h) {
      const std::size_t plane = f[h].h() * f[h].w();
      for (std::size_t b = 0; b < n; ++b) {
        double z = p.gate_conv.bias[0];
        for (std::size_t ch = 0; ch < c; ++ch) {
          double s = 0;
          for (std::size_t k = 0; k < plane; ++k) s += f[h][(b * c + ch) * plane + k];
          z += p.gate_conv.weight(0, ch) * s / static_cast<double>(plane);
        }
        const double gamma = std::min(1.0, std::max(0.0, (std::max(z, 0.0) + 1) / 2));
        for (std::size_t k = 0; k < c * plane; ++k) {
          const std::size_t e = b * c * plane + k;
          EXPECT_NEAR(out[h][e], (1 + gamma) * f[h][e], 1e-12);
          if (f[h][e] != 0) {
            const double ratio = out[h][e] / f[h][e];
            EXPECT_GE(ratio, 1.0 - 1e-12);
            EXPECT_LE(ratio, 2.0 + 1e-12);
          }
        }
      }
    }
  }
}

TEST(StagedOracle, ScaleWeightingHandValues) {
  const D a(Shape{1, 1, 1, 2}, {2, -4});
  const D b(Shape{1, 1, 2, 1}, {8, 1});
  const PyramidFeatures<double> f{a, b};
  ScaleWeights<double> g{1, 2, {0.0, 0.0}};
  auto out = apply_scale_weighting(f, g);
  EXPECT_EQ(out[0], a);
  g.gamma = {1.0, 1.0};
  out = apply_scale_weighting(f, g);
  EXPECT_EQ(out[1][0], 16.0);
  g.gamma = {0.5, 0.25};
  out = apply_scale_weighting(f, g);
  EXPECT_EQ(out[0][1], -6.0);
  EXPECT_EQ(out[1][1], 1.25);
  EXPECT_THROW(apply_scale_weighting(f, ScaleWeights<double>{1, 3, {0, 0, 0}}), DimensionError);
}

TEST(StagedOracle, GammaMonotoneInUniformShift) {
  RngCursor rng(RngState{8}.stream("t"));
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t c = 1 + rng.below(3);
    D lvl = random_tensor_d(Shape{1, c, 3, 3}, rng);
    ScAParams<double> p{Conv1x1Params<double>::zeros(1, c)};
    for (auto& v : p.gate_conv.weight.data) v = rng.uniform(0, 1);
    p.gate_conv.bias[0] = rng.uniform(-2, 0);
    double prev = -1;
    for (double shift = -3; shift <= 3; shift += 0.25) {
      D s = lvl;
      for (auto& v : s.data()) v += shift;
      const double g = scale_weights(PyramidFeatures<double>{s}, p)(0, 0);
      EXPECT_GE(g, prev);
      prev = g;
    }
  }
}

TEST(TensorCoreProperties, ConvLinearityAndSoftmaxExtremes) {
  RngCursor rng(RngState{9}.stream("t"));
  Conv1x1Params<float> p(Matrix<float>(3, 2), std::vector<float>(3, 0.f));
  for (auto& v : p.weight.data) v = static_cast<float>(rng.uniform(-1, 1));
  const Tensor x = testing_support::random_tensor(Shape{1, 2, 3, 3}, rng);
  const Tensor y = testing_support::random_tensor(Shape{1, 2, 3, 3}, rng);
  const float a = 0.7f, b = -1.3f;
  Tensor mix(x.shape());
  for (std::size_t e = 0; e < x.size(); ++e) mix[e] = a * x[e] + b * y[e];
  const Tensor lhs = conv1x1(mix, p);
  const Tensor cx = conv1x1(x, p), cy = conv1x1(y, p);
  for (std::size_t e = 0; e < lhs.size(); ++e) EXPECT_NEAR(lhs[e], a * cx[e] + b * cy[e], 1e-5);

  Matrix<float> big(2, 3, {1e4f, -1e4f, 0.f, -1e4f, -1e4f, -1e4f});
  const auto s = softmax_rows(big);
  for (std::size_t r = 0; r < 2; ++r) {
    double sum = 0;
    for (std::size_t k = 0; k < 3; ++k) sum += s(r, k);
    EXPECT_NEAR(sum, 1.0, 1e-6);
  }
  double prev = -1;
  for (double v = -3; v <= 3; v += 0.125) {
    const double h = hard_sigmoid_scalar(v);
    EXPECT_GE(h, prev);
    EXPECT_GE(h, 0.0);
    EXPECT_LE(h, 1.0);
    prev = h;
  }
  EXPECT_EQ(hard_sigmoid_scalar(-1.0), 0.0);
  EXPECT_EQ(hard_sigmoid_scalar(1.0), 1.0);
}

TEST(TensorCoreProperties, WindowExamples) {
  // m == h == w gives one window holding the flattened plane
  Tensor x(Shape{1, 1, 3, 3});
  for (std::size_t k = 0; k < 9; ++k) x[k] = static_cast<float>(k);
  const auto w = window_partition(x, 3);
  ASSERT_EQ(w.count(), 1u);
  for (std::size_t k = 0; k < 9; ++k) EXPECT_EQ(w.window(0)[k], static_cast<float>(k));
}

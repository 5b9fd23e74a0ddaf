#pragma once

// Finite-difference verification of the analytic backward passes.
//
// Every check evaluates a scalar loss L = sum(R * op(inputs)) with a fixed
// random R, computes the analytic gradient once, and compares it against
// central differences at up to `max_sites` coordinates per tensor. All of it
// runs in double precision. Gumbel noise is sampled once and held fixed.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <tuple>
#include <vector>

#include "crsel/backward.hpp"
#include "crsel/crselector.hpp"
#include "crsel/ops.hpp"
#include "crsel/rng.hpp"
#include "crsel/sca_head.hpp"
#include "crsel/tensor.hpp"
#include "crsel/window.hpp"

namespace crsel {

struct GradCheckReport {
  std::string op_name;
  std::string param_path;
  std::size_t coord = 0;
  double analytic = 0;
  double numeric = 0;
  double rel_err = 0;
  double threshold = 0;
  bool pass = false;
};

struct GradCheckOptions {
  double step = 1e-4;
  double threshold = 1e-3;         // smooth nonlinear ops
  double linear_threshold = 1e-5;  // ops linear in the perturbed tensor
  std::size_t max_sites = 64;
  double kink_margin = 1e-3;
};

inline constexpr double kRelErrFloor = 1e-8;

inline double relative_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), kRelErrFloor});
}

/// Central differences (f(x + h) - f(x - h)) / 2h at the given coordinates
/// (all coordinates when `coords` is empty). `point` is restored on return.
template <typename F>
std::vector<double> finite_diff(F&& loss, std::span<double> point, double step = 1e-4,
                                const std::vector<std::size_t>& coords = {}) {
  std::vector<std::size_t> sites = coords;
  if (sites.empty()) {
    for (std::size_t k = 0; k < point.size(); ++k) sites.push_back(k);
  }
  std::vector<double> grad;
  grad.reserve(sites.size());
  for (std::size_t k : sites) {
    const double saved = point[k];
    point[k] = saved + step;
    const double up = loss();
    point[k] = saved - step;
    const double down = loss();
    point[k] = saved;
    grad.push_back((up - down) / (2 * step));
  }
  return grad;
}

namespace gc_detail {

using Loss = std::function<double()>;

struct Target {
  std::string path;
  std::span<double> values;
  std::vector<double> analytic;
  bool linear = false;
  std::function<bool(std::size_t)> admissible;  // kink filter; empty = every site
};

inline void fill_uniform(std::span<double> v, RngCursor& rng, double lo = -1, double hi = 1) {
  for (auto& x : v) x = rng.uniform(lo, hi);
}

inline BasicTensor<double> random_tensor(Shape s, RngCursor& rng, double lo = -1, double hi = 1) {
  BasicTensor<double> t(s);
  fill_uniform(t.data(), rng, lo, hi);
  return t;
}

inline Matrix<double> random_matrix(std::size_t r, std::size_t c, RngCursor& rng, double lo = -1, double hi = 1) {
  Matrix<double> m(r, c);
  fill_uniform(m.data, rng, lo, hi);
  return m;
}

inline Conv1x1Params<double> random_conv(std::size_t c_out, std::size_t c_in, RngCursor& rng) {
  Matrix<double> w = random_matrix(c_out, c_in, rng);
  std::vector<double> b(c_out);
  fill_uniform(b, rng);
  return {std::move(w), std::move(b)};
}

template <typename T>
double dot(std::span<const T> a, std::span<const T> b) {
  double acc = 0;
  for (std::size_t k = 0; k < a.size(); ++k) acc += a[k] * b[k];
  return acc;
}

inline double dot(const BasicTensor<double>& a, const BasicTensor<double>& b) {
  return dot<double>(a.data(), b.data());
}

inline std::vector<double> flat(const BasicTensor<double>& t) { return t.values(); }

/// Picks up to `max_sites` admissible coordinates, in ascending order.
inline std::vector<std::size_t> choose_sites(const Target& t, std::size_t max_sites, RngCursor& rng) {
  std::vector<std::size_t> candidates;
  for (std::size_t k = 0; k < t.values.size(); ++k) {
    if (!t.admissible || t.admissible(k)) candidates.push_back(k);
  }
  if (candidates.size() <= max_sites) return candidates;
  // partial Fisher-Yates
  for (std::size_t i = 0; i < max_sites; ++i) {
    const std::size_t j = i + rng.below(candidates.size() - i);
    std::swap(candidates[i], candidates[j]);
  }
  candidates.resize(max_sites);
  std::sort(candidates.begin(), candidates.end());
  return candidates;
}

inline void run_targets(const std::string& op, const Loss& loss, std::vector<Target>& targets,
                        const GradCheckOptions& opt, RngCursor& rng, std::vector<GradCheckReport>& out) {
  for (auto& t : targets) {
    if (t.analytic.size() != t.values.size()) {
      throw std::logic_error("gradcheck " + op + "/" + t.path + ": analytic gradient has wrong size");
    }
    const auto sites = choose_sites(t, opt.max_sites, rng);
    const auto numeric = finite_diff(loss, t.values, opt.step, sites);
    const double thr = t.linear ? std::min(opt.threshold, opt.linear_threshold) : opt.threshold;
    for (std::size_t s = 0; s < sites.size(); ++s) {
      GradCheckReport r;
      r.op_name = op;
      r.param_path = t.path;
      r.coord = sites[s];
      r.analytic = t.analytic[sites[s]];
      r.numeric = numeric[s];
      r.rel_err = relative_error(r.analytic, r.numeric);
      r.threshold = thr;
      r.pass = r.rel_err < thr;
      out.push_back(r);
    }
  }
}

inline double frac_distance(double coord) { return std::abs(coord - std::round(coord)); }

/// Smallest distance of any bilinear sample coordinate to a cell boundary.
inline double warp_margin(const BasicTensor<double>& offset) {
  double m = std::numeric_limits<double>::infinity();
  for (std::size_t b = 0; b < offset.n(); ++b) {
    for (std::size_t i = 0; i < offset.h(); ++i) {
      for (std::size_t j = 0; j < offset.w(); ++j) {
        m = std::min(m, frac_distance(static_cast<double>(j) + offset(b, 0, i, j)));
        m = std::min(m, frac_distance(static_cast<double>(i) + offset(b, 1, i, j)));
      }
    }
  }
  return m;
}

inline double abs_margin(std::span<const double> v, double kink = 0) {
  double m = std::numeric_limits<double>::infinity();
  for (double x : v) m = std::min(m, std::abs(x - kink));
  return m;
}

// ---- tensor-core ops -------------------------------------------------------

inline void check_conv1x1(const GradCheckOptions& opt, RngCursor& rng, std::vector<GradCheckReport>& out) {
  auto x = random_tensor({2, 3, 3, 4}, rng);
  auto p = random_conv(4, 3, rng);
  const auto R = random_tensor({2, 4, 3, 4}, rng);
  Loss loss = [&] { return dot(conv1x1(x, p), R); };
  const auto g = conv1x1_backward(x, p, R);
  std::vector<Target> t = {{"x", x.data(), flat(g.dx), true, {}},
                           {"weight", p.weight.data, g.dparams.weight.data, true, {}},
                           {"bias", p.bias, g.dparams.bias, true, {}}};
  run_targets("conv1x1", loss, t, opt, rng, out);
}

inline void check_relu(const GradCheckOptions& opt, RngCursor& rng, std::vector<GradCheckReport>& out) {
  auto x = random_tensor({1, 4, 4, 4}, rng);
  const auto R = random_tensor(x.shape(), rng);
  Loss loss = [&] { return dot(relu(x), R); };
  std::vector<Target> t = {{"x", x.data(), flat(relu_backward(x, R)), false,
                            [&](std::size_t k) { return std::abs(x[k]) >= opt.kink_margin; }}};
  run_targets("relu", loss, t, opt, rng, out);
}

inline void check_tanh(const GradCheckOptions& opt, RngCursor& rng, std::vector<GradCheckReport>& out) {
  auto x = random_tensor({1, 4, 4, 4}, rng, -3, 3);
  const auto R = random_tensor(x.shape(), rng);
  Loss loss = [&] { return dot(tanh_map(x), R); };
  std::vector<Target> t = {{"x", x.data(), flat(tanh_backward(tanh_map(x), R)), false, {}}};
  run_targets("tanh", loss, t, opt, rng, out);
}

inline void check_hard_sigmoid(const GradCheckOptions& opt, RngCursor& rng, std::vector<GradCheckReport>& out) {
  auto x = random_tensor({1, 4, 4, 4}, rng, -2, 2);
  const auto R = random_tensor(x.shape(), rng);
  Loss loss = [&] { return dot(hard_sigmoid(x), R); };
  std::vector<Target> t = {{"x", x.data(), flat(hard_sigmoid_backward(x, R)), false, [&](std::size_t k) {
                              return std::abs(x[k] - 1) >= opt.kink_margin && std::abs(x[k] + 1) >= opt.kink_margin;
                            }}};
  run_targets("hard_sigmoid", loss, t, opt, rng, out);
}

inline void check_softmax(const GradCheckOptions& opt, RngCursor& rng, std::vector<GradCheckReport>& out) {
  auto m = random_matrix(5, 6, rng, -3, 3);
  const auto R = random_matrix(5, 6, rng);
  Loss loss = [&] { return dot<double>(softmax_rows(m).data, R.data); };
  std::vector<Target> t = {{"logits", m.data, softmax_rows_backward(softmax_rows(m), R).data, false, {}}};
  run_targets("softmax_rows", loss, t, opt, rng, out);
}

inline void check_concat(const GradCheckOptions& opt, RngCursor& rng, std::vector<GradCheckReport>& out) {
  auto a = random_tensor({2, 2, 3, 3}, rng);
  auto b = random_tensor({2, 3, 3, 3}, rng);
  const auto R = random_tensor({2, 5, 3, 3}, rng);
  Loss loss = [&] { return dot(concat_channels(a, b), R); };
  std::vector<Target> t = {{"a", a.data(), flat(slice_channels(R, 0, 2)), true, {}},
                           {"b", b.data(), flat(slice_channels(R, 2, 3)), true, {}}};
  run_targets("concat_channels", loss, t, opt, rng, out);
}

inline void check_avg_pool(const GradCheckOptions& opt, RngCursor& rng, std::vector<GradCheckReport>& out) {
  auto x = random_tensor({2, 3, 4, 5}, rng);
  const auto R = random_tensor({2, 3, 1, 1}, rng);
  Loss loss = [&] { return dot(global_avg_pool(x), R); };
  std::vector<Target> t = {{"x", x.data(), flat(global_avg_pool_backward(x.shape(), R)), true, {}}};
  run_targets("global_avg_pool", loss, t, opt, rng, out);
}

inline void check_window_roundtrip(const GradCheckOptions& opt, RngCursor& rng, std::vector<GradCheckReport>& out) {
  auto x = random_tensor({1, 3, 4, 6}, rng);
  const std::size_t m = 2;
  const auto wins_R = random_tensor({1, 1, 1, x.size()}, rng);
  // partition is a permutation, so its adjoint is merge of the upstream gradient
  Loss loss = [&] { return dot<double>(window_partition(x, m).data, wins_R.data()); };
  Windows<double> up = window_partition(x, m);
  up.data = wins_R.values();
  std::vector<Target> t = {{"x", x.data(), flat(window_merge(up)), true, {}}};
  run_targets("window_partition", loss, t, opt, rng, out);

  auto y = random_tensor({1, 3, 4, 6}, rng);
  Windows<double> wins = window_partition(y, m);
  const auto R = random_tensor(y.shape(), rng);
  Loss loss2 = [&] { return dot(window_merge(wins), R); };
  std::vector<Target> t2 = {{"windows", wins.data, window_partition(R, m).data, true, {}}};
  run_targets("window_merge", loss2, t2, opt, rng, out);
}

inline void check_channel_matmul(const GradCheckOptions& opt, RngCursor& rng, std::vector<GradCheckReport>& out) {
  auto x = random_tensor({1, 3, 4, 4}, rng);
  auto w = random_matrix(3, 3, rng);
  const auto R = random_tensor(x.shape(), rng);
  Loss loss = [&] { return dot(channel_matmul(x, w), R); };
  const auto g = channel_matmul_backward(x, w, R);
  std::vector<Target> t = {{"x", x.data(), flat(g.dx), true, {}}, {"matrix", w.data, g.dm.data, true, {}}};
  run_targets("project_qk", loss, t, opt, rng, out);
}

inline void check_resize(const GradCheckOptions& opt, RngCursor& rng, std::vector<GradCheckReport>& out) {
  auto x = random_tensor({1, 2, 7, 5}, rng);
  const auto R = random_tensor({1, 2, 4, 4}, rng);
  Loss loss = [&] { return dot(resize_nearest(x, 4, 4), R); };
  std::vector<Target> t = {{"x", x.data(), flat(resize_nearest_backward(x.shape(), R)), true, {}}};
  run_targets("resize_nearest", loss, t, opt, rng, out);
}

inline void check_warp(const GradCheckOptions& opt, RngCursor& rng, std::vector<GradCheckReport>& out) {
  auto x = random_tensor({1, 2, 5, 5}, rng);
  auto off = random_tensor({1, 2, 5, 5}, rng, -1.6, 1.6);
  const auto R = random_tensor(x.shape(), rng);
  Loss loss = [&] { return dot(warp_bilinear(x, off), R); };
  const auto g = warp_bilinear_backward(x, off, R);
  const std::size_t plane = x.shape().plane();
  auto admissible = [&, plane](std::size_t k) {
    const std::size_t ch = (k / plane) % 2;
    const std::size_t i = (k % plane) / x.w();
    const std::size_t j = k % x.w();
    const double base = ch == 0 ? static_cast<double>(j) : static_cast<double>(i);
    return frac_distance(base + off[k]) >= opt.kink_margin;
  };
  std::vector<Target> t = {{"x", x.data(), flat(g.dx), true, {}},
                           {"offset", off.data(), flat(g.doffset), false, admissible}};
  run_targets("warp_bilinear", loss, t, opt, rng, out);
}

inline void check_attention(const GradCheckOptions& opt, RngCursor& rng, std::vector<GradCheckReport>& out) {
  auto q = random_tensor({1, 3, 4, 4}, rng);
  auto k = random_tensor({1, 3, 4, 4}, rng);
  auto v = random_tensor({1, 2, 4, 4}, rng);
  const std::size_t m = 2;
  const double d = 3;
  const auto R = random_tensor(v.shape(), rng);
  Loss loss = [&] { return dot(window_attention_core(q, k, v, m, d).attended, R); };
  const auto fwd = window_attention_core(q, k, v, m, d);
  const auto g = window_attention_backward(q, k, v, m, d, fwd.weights, R);
  std::vector<Target> t = {{"q", q.data(), flat(g.dq), false, {}},
                           {"k", k.data(), flat(g.dk), false, {}},
                           {"v_c", v.data(), flat(g.dv), true, {}}};
  run_targets("windowed_attention", loss, t, opt, rng, out);
}

inline void check_mask_multiply(const GradCheckOptions& opt, RngCursor& rng, std::vector<GradCheckReport>& out) {
  auto x = random_tensor({1, 2, 4, 4}, rng);
  std::vector<double> mask(4);
  fill_uniform(mask, rng, 0, 1);
  const auto R = random_tensor(x.shape(), rng);
  Loss loss = [&] { return dot(mask_multiply(x, mask, 2), R); };
  const auto g = mask_multiply_backward(x, mask, 2, R);
  std::vector<Target> t = {{"x", x.data(), flat(g.dx), true, {}}, {"keymask", mask, g.dmask, true, {}}};
  run_targets("partition_regions", loss, t, opt, rng, out);
}

inline void check_gumbel(const GradCheckOptions& opt, RngCursor& rng, const RngStream& noise_stream,
                         std::vector<GradCheckReport>& out) {
  const std::size_t windows = 16;
  std::vector<double> logits(2 * windows);
  fill_uniform(logits, rng, -2, 2);
  const auto noise = sample_gumbel_noise<double>(noise_stream, windows);
  std::vector<double> R(windows);
  fill_uniform(R, rng);
  const double tau = 0.7;
  Loss loss = [&] { return dot<double>(gumbel_softmax(logits, noise, tau, false).values, R); };
  const auto soft = gumbel_softmax(logits, noise, tau, false);
  std::vector<Target> t = {{"logits", logits, gumbel_softmax_backward(soft, tau, R), false, {}}};
  run_targets("gumbel_softmax_soft", loss, t, opt, rng, out);

  // The hard forward is piecewise constant: its straight-through gradient is
  // checked against the soft gradient obtained through the generic softmax
  // Jacobian instead of against finite differences.
  const auto hard = gumbel_softmax(logits, noise, tau, true);
  const auto st = gumbel_softmax_backward(hard, tau, R);
  Matrix<double> probs(windows, 2);
  Matrix<double> up(windows, 2);
  for (std::size_t w = 0; w < windows; ++w) {
    probs(w, 0) = hard.keep_prob[w];
    probs(w, 1) = hard.drop_prob[w];
    up(w, 0) = R[w];
  }
  const Matrix<double> via_jacobian = softmax_rows_backward(probs, up);
  for (std::size_t k = 0; k < 2 * windows; ++k) {
    GradCheckReport r;
    r.op_name = "gumbel_softmax_hard_st";
    r.param_path = "logits";
    r.coord = k;
    r.analytic = st[k];
    r.numeric = via_jacobian.data[k] / tau;
    r.rel_err = relative_error(r.analytic, r.numeric);
    r.threshold = opt.threshold;
    r.pass = r.rel_err < r.threshold;
    out.push_back(r);
  }
}

// ---- sca-head ------------------------------------------------------------

/// A pyramid and gate whose gate pre-activations avoid the relu/hard-sigmoid kinks at 0 and 1.
inline std::pair<PyramidFeatures<double>, ScAParams<double>> sca_point(const GradCheckOptions& opt,
                                                                        RngCursor& rng) {
  for (int attempt = 0; attempt < 1000; ++attempt) {
    PyramidFeatures<double> f = {random_tensor({2, 3, 4, 4}, rng, -1, 1.5), random_tensor({2, 3, 2, 2}, rng, -1, 1.5),
                                 random_tensor({2, 3, 1, 1}, rng, -1, 1.5)};
    ScAParams<double> p{random_conv(1, 3, rng)};
    p.gate_conv.bias[0] = rng.uniform(0.2, 0.6);
    const auto z = gate_logits(f, p);
    // keep a mix of active (0 < z < 1) and saturated gates but no kink within margin
    if (abs_margin(z.gamma, 0) >= 10 * opt.kink_margin && abs_margin(z.gamma, 1) >= 10 * opt.kink_margin) {
      return {std::move(f), std::move(p)};
    }
  }
  throw std::runtime_error("gradcheck: could not draw a kink-free ScA point");
}

inline void check_sca(const GradCheckOptions& opt, RngCursor& rng, std::vector<GradCheckReport>& out) {
  {
    auto [f, p] = sca_point(opt, rng);
    ScaleWeights<double> R{f[0].n(), f.size(), std::vector<double>(f[0].n() * f.size())};
    fill_uniform(R.gamma, rng);
    Loss loss = [&] { return dot<double>(scale_weights(f, p).gamma, R.gamma); };
    auto g = scale_weights_backward(f, p, R);
    std::vector<Target> t;
    for (std::size_t h = 0; h < f.size(); ++h) {
      t.push_back({"features[" + std::to_string(h) + "]", f[h].data(), flat(g.dfeatures[h]), false, {}});
    }
    t.push_back({"gate.weight", p.gate_conv.weight.data, g.dgate.weight.data, false, {}});
    t.push_back({"gate.bias", p.gate_conv.bias, g.dgate.bias, false, {}});
    run_targets("scale_weights", loss, t, opt, rng, out);
  }
  {
    auto [f, p] = sca_point(opt, rng);
    ScaleWeights<double> gamma = scale_weights(f, p);
    PyramidFeatures<double> R;
    for (const auto& lvl : f) R.push_back(random_tensor(lvl.shape(), rng));
    Loss loss = [&] {
      const auto o = apply_scale_weighting(f, gamma);
      double acc = 0;
      for (std::size_t h = 0; h < o.size(); ++h) acc += dot(o[h], R[h]);
      return acc;
    };
    auto g = apply_scale_weighting_backward(f, gamma, R);
    std::vector<Target> t;
    for (std::size_t h = 0; h < f.size(); ++h) {
      t.push_back({"features[" + std::to_string(h) + "]", f[h].data(), flat(g.dfeatures[h]), true, {}});
    }
    t.push_back({"gamma", gamma.gamma, g.dgamma.gamma, true, {}});
    run_targets("apply_scale_weighting", loss, t, opt, rng, out);
  }
  {
    auto [f, p] = sca_point(opt, rng);
    PyramidFeatures<double> R;
    for (const auto& lvl : f) R.push_back(random_tensor(lvl.shape(), rng));
    Loss loss = [&] {
      const auto o = sca_forward(f, p);
      double acc = 0;
      for (std::size_t h = 0; h < o.size(); ++h) acc += dot(o[h], R[h]);
      return acc;
    };
    auto g = sca_backward(f, p, R);
    std::vector<Target> t;
    for (std::size_t h = 0; h < f.size(); ++h) {
      t.push_back({"features[" + std::to_string(h) + "]", f[h].data(), flat(g.dfeatures[h]), false, {}});
    }
    t.push_back({"gate.weight", p.gate_conv.weight.data, g.dparams.gate_conv.weight.data, false, {}});
    t.push_back({"gate.bias", p.gate_conv.bias, g.dparams.gate_conv.bias, false, {}});
    run_targets("sca_forward", loss, t, opt, rng, out);
  }
}

// ---- crselector ------------------------------------------------------------

/// Distance of the current forward pass from every kink: relu inputs and
/// bilinear cell boundaries.
inline double crselector_margin(const CRSelectorTrace<double>& t) {
  return std::min({abs_margin(t.gti_pre.data()), abs_margin(t.fused.data()), warp_margin(t.offset)});
}

struct CRSelectorPoint {
  BasicTensor<double> x;
  BasicTensor<double> image;
  CRSelectorParams<double> params;
  std::vector<double> noise;
};

inline CRSelectorPoint crselector_point(const GradCheckOptions& opt, RngCursor& rng, const RngStream& noise_stream) {
  const std::size_t c = 2;
  const std::size_t m = 2;
  for (int attempt = 0; attempt < 1000; ++attempt) {
    CRSelectorPoint pt;
    pt.x = random_tensor({1, c, 4, 4}, rng);
    pt.image = random_tensor({1, 1, 8, 8}, rng);
    auto& p = pt.params;
    p.gti_conv1 = random_conv(c, 1, rng);
    p.gti_conv2 = random_conv(c, c, rng);
    p.v_conv = random_conv(c, c, rng);
    p.offset_conv = random_conv(2, 2 * c, rng);
    p.reduce = random_matrix(1, 2 * c, rng);
    p.w_mask = random_matrix(m * m, 2, rng);
    p.w_q = random_matrix(c, c, rng);
    p.w_k = random_matrix(c, c, rng);
    p.out_conv = random_conv(c, c, rng);
    p.m = m;
    p.r = static_cast<double>(m);
    p.tau = 1.0;
    p.hard_mask = false;
    pt.noise = sample_gumbel_noise<double>(noise_stream, 4);
    const auto trace = crselector_trace(pt.x, pt.image, p, pt.noise);
    if (crselector_margin(trace) >= opt.kink_margin) return pt;
  }
  throw std::runtime_error("gradcheck: could not draw a kink-free selector point");
}

inline void check_crselector(const GradCheckOptions& opt, RngCursor& rng, const RngStream& noise_stream,
                             std::vector<GradCheckReport>& out) {
  CRSelectorPoint pt = crselector_point(opt, rng, noise_stream);
  auto& p = pt.params;
  const auto R = random_tensor(pt.x.shape(), rng);
  Loss loss = [&] { return dot(crselector_trace(pt.x, pt.image, p, pt.noise).output, R); };
  const auto trace = crselector_trace(pt.x, pt.image, p, pt.noise);
  const auto g = crselector_backward(pt.x, pt.image, p, trace, R);
  const auto& d = g.dparams;
  std::vector<Target> t = {
      {"x", pt.x.data(), flat(g.dx), false, {}},
      {"image", pt.image.data(), flat(g.dimage), false, {}},
      {"gti_conv1.weight", p.gti_conv1.weight.data, d.gti_conv1.weight.data, false, {}},
      {"gti_conv1.bias", p.gti_conv1.bias, d.gti_conv1.bias, false, {}},
      {"gti_conv2.weight", p.gti_conv2.weight.data, d.gti_conv2.weight.data, false, {}},
      {"gti_conv2.bias", p.gti_conv2.bias, d.gti_conv2.bias, false, {}},
      {"v_conv.weight", p.v_conv.weight.data, d.v_conv.weight.data, false, {}},
      {"v_conv.bias", p.v_conv.bias, d.v_conv.bias, false, {}},
      {"offset_conv.weight", p.offset_conv.weight.data, d.offset_conv.weight.data, false, {}},
      {"offset_conv.bias", p.offset_conv.bias, d.offset_conv.bias, false, {}},
      {"reduce", p.reduce.data, d.reduce.data, false, {}},
      {"w_mask", p.w_mask.data, d.w_mask.data, false, {}},
      {"w_q", p.w_q.data, d.w_q.data, false, {}},
      {"w_k", p.w_k.data, d.w_k.data, false, {}},
      {"out_conv.weight", p.out_conv.weight.data, d.out_conv.weight.data, true, {}},
      {"out_conv.bias", p.out_conv.bias, d.out_conv.bias, true, {}},
  };
  run_targets("crselector_forward", loss, t, opt, rng, out);
}

}  // namespace gc_detail

inline const std::vector<std::string>& gradcheck_ops() {
  static const std::vector<std::string> ops = {
      "conv1x1",          "relu",          "tanh",           "hard_sigmoid",      "softmax_rows",
      "concat_channels",  "global_avg_pool", "window",       "project_qk",        "resize_nearest",
      "warp_bilinear",    "windowed_attention", "partition_regions", "gumbel_softmax", "scale_weights",
      "crselector_forward"};
  return ops;
}

inline const std::vector<std::string>& gradcheck_modules() {
  static const std::vector<std::string> modules = {"tensor-core", "crselector", "sca-head"};
  return modules;
}

inline void sort_reports(std::vector<GradCheckReport>& reports) {
  std::stable_sort(reports.begin(), reports.end(), [](const GradCheckReport& a, const GradCheckReport& b) {
    return std::tie(a.op_name, a.param_path, a.coord) < std::tie(b.op_name, b.param_path, b.coord);
  });
}

/// Runs the finite-difference comparison for one named operator.
/// Throws std::invalid_argument for an unsupported name.
inline std::vector<GradCheckReport> check_op(const std::string& op, std::uint64_t seed,
                                             const GradCheckOptions& opt = {}) {
  using namespace gc_detail;
  const RngState state{seed};
  RngCursor rng(state.stream("gradcheck/" + op));
  const RngStream noise = state.stream("gumbel");
  std::vector<GradCheckReport> out;
  if (op == "conv1x1") check_conv1x1(opt, rng, out);
  else if (op == "relu") check_relu(opt, rng, out);
  else if (op == "tanh") check_tanh(opt, rng, out);
  else if (op == "hard_sigmoid") check_hard_sigmoid(opt, rng, out);
  else if (op == "softmax_rows") check_softmax(opt, rng, out);
  else if (op == "concat_channels") check_concat(opt, rng, out);
  else if (op == "global_avg_pool") check_avg_pool(opt, rng, out);
  else if (op == "window") check_window_roundtrip(opt, rng, out);
  else if (op == "project_qk") check_channel_matmul(opt, rng, out);
  else if (op == "resize_nearest") check_resize(opt, rng, out);
  else if (op == "warp_bilinear") check_warp(opt, rng, out);
  else if (op == "windowed_attention") check_attention(opt, rng, out);
  else if (op == "partition_regions") check_mask_multiply(opt, rng, out);
  else if (op == "gumbel_softmax") check_gumbel(opt, rng, noise, out);
  else if (op == "scale_weights") check_sca(opt, rng, out);
  else if (op == "crselector_forward") check_crselector(opt, rng, noise, out);
  else throw std::invalid_argument("gradcheck: unsupported op '" + op + "'");
  sort_reports(out);
  return out;
}

/// All checks belonging to a module: "tensor-core", "crselector",
/// "sca-head", or "all".
inline std::vector<GradCheckReport> check_module(const std::string& module, std::uint64_t seed,
                                                 const GradCheckOptions& opt = {}) {
  std::vector<std::string> ops;
  if (module == "tensor-core" || module == "all") {
    ops.insert(ops.end(), {"conv1x1", "relu", "tanh", "hard_sigmoid", "softmax_rows", "concat_channels",
                           "global_avg_pool", "window", "resize_nearest"});
  }
  if (module == "crselector" || module == "all") {
    ops.insert(ops.end(), {"warp_bilinear", "partition_regions", "project_qk", "windowed_attention",
                           "gumbel_softmax", "crselector_forward"});
  }
  if (module == "sca-head" || module == "all") ops.push_back("scale_weights");
  if (ops.empty()) throw std::invalid_argument("gradcheck: unknown module '" + module + "'");
  std::vector<GradCheckReport> out;
  for (const auto& op : ops) {
    auto r = check_op(op, seed, opt);
    out.insert(out.end(), r.begin(), r.end());
  }
  sort_reports(out);
  return out;
}

}  // namespace crsel

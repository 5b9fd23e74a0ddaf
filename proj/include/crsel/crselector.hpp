#pragma once

#include <cmath>
#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "crsel/ops.hpp"
#include "crsel/rng.hpp"
#include "crsel/tensor.hpp"
#include "crsel/warp.hpp"
#include "crsel/window.hpp"

namespace crsel {

/// Learnable weights and hyper-parameters of the critical-region selector.
///
/// Channel bookkeeping, with c the feature channels, c_img the image
/// channels and c_v the local-content channels:
///   gti_conv1   c_img      -> c_hidden
///   gti_conv2   c_hidden   -> c          (texture map has as many channels as x)
///   v_conv      c          -> c_v
///   offset_conv c + c      -> 2
///   reduce      c_v + c    -> 1          (bias-free, rows = 1)
///   w_mask      m*m x 2                  (column 0 = keep, column 1 = drop)
///   w_q, w_k    c x c                    (row-vector convention: q = k_tilde * w_q)
///   out_conv    c_v        -> c
template <typename T>
struct CRSelectorParams {
  Conv1x1Params<T> gti_conv1;
  Conv1x1Params<T> gti_conv2;
  Conv1x1Params<T> v_conv;
  Conv1x1Params<T> offset_conv;
  Matrix<T> reduce;
  Matrix<T> w_mask;
  Matrix<T> w_q;
  Matrix<T> w_k;
  Conv1x1Params<T> out_conv;
  std::size_t m = 2;
  T r = T(2);
  T tau = T(1);
  bool hard_mask = true;

  std::size_t channels() const { return w_q.rows; }
  std::size_t image_channels() const { return gti_conv1.c_in(); }
  std::size_t value_channels() const { return v_conv.c_out(); }
  /// Attention scale divisor: the query/key channel count.
  T d() const { return static_cast<T>(channels()); }

  void validate() const {
    auto fail = [](const std::string& what) { throw DimensionError("CRSelectorParams: " + what); };
    gti_conv1.validate();
    gti_conv2.validate();
    v_conv.validate();
    offset_conv.validate();
    out_conv.validate();
    if (m < 1) fail("window size m must be >= 1");
    if (!(r >= T(0)) || !std::isfinite(r)) fail("offset scale r must be finite and >= 0");
    if (!(tau > T(0)) || !std::isfinite(tau)) fail("temperature tau must be finite and > 0");
    const std::size_t c = w_q.rows;
    if (c == 0 || w_q.cols != c) fail("w_q must be square and non-empty");
    if (w_k.rows != c || w_k.cols != c) fail("w_k must be " + std::to_string(c) + "x" + std::to_string(c));
    if (gti_conv2.c_in() != gti_conv1.c_out()) fail("gti_conv2 input does not match gti_conv1 output");
    if (gti_conv2.c_out() != c) fail("gti_conv2 must produce " + std::to_string(c) + " channels");
    if (v_conv.c_in() != c) fail("v_conv must take " + std::to_string(c) + " channels");
    if (offset_conv.c_out() != 2) fail("offset_conv must produce 2 channels");
    if (offset_conv.c_in() != 2 * c) fail("offset_conv must take " + std::to_string(2 * c) + " channels");
    if (reduce.rows != 1 || reduce.cols != v_conv.c_out() + c) {
      fail("reduce weight must be 1x" + std::to_string(v_conv.c_out() + c));
    }
    if (w_mask.rows != m * m || w_mask.cols != 2) {
      fail("w_mask must be " + std::to_string(m * m) + "x2");
    }
    if (out_conv.c_in() != v_conv.c_out() || out_conv.c_out() != c) {
      fail("out_conv must map " + std::to_string(v_conv.c_out()) + " -> " + std::to_string(c));
    }
  }

  template <typename U>
  CRSelectorParams<U> cast() const {
    CRSelectorParams<U> p;
    p.gti_conv1 = gti_conv1.template cast<U>();
    p.gti_conv2 = gti_conv2.template cast<U>();
    p.v_conv = v_conv.template cast<U>();
    p.offset_conv = offset_conv.template cast<U>();
    p.reduce = reduce.template cast<U>();
    p.w_mask = w_mask.template cast<U>();
    p.w_q = w_q.template cast<U>();
    p.w_k = w_k.template cast<U>();
    p.out_conv = out_conv.template cast<U>();
    p.m = m;
    p.r = static_cast<U>(r);
    p.tau = static_cast<U>(tau);
    p.hard_mask = hard_mask;
    return p;
  }

  bool operator==(const CRSelectorParams&) const = default;
};

/// Uniform(-amplitude, amplitude) initialisation. r defaults to m.
template <typename T>
CRSelectorParams<T> random_crselector_params(std::size_t c, std::size_t c_img, std::size_t m,
                                             RngStream stream, T amplitude = T(0.5)) {
  RngCursor rng(stream);
  auto mat = [&](std::size_t rows, std::size_t cols) {
    Matrix<T> out(rows, cols);
    for (auto& v : out.data) v = static_cast<T>(rng.uniform(-1.0, 1.0)) * amplitude;
    return out;
  };
  auto conv = [&](std::size_t c_out, std::size_t c_in) {
    Matrix<T> w = mat(c_out, c_in);
    std::vector<T> b(c_out);
    for (auto& v : b) v = static_cast<T>(rng.uniform(-1.0, 1.0)) * amplitude;
    return Conv1x1Params<T>(std::move(w), std::move(b));
  };
  CRSelectorParams<T> p;
  p.gti_conv1 = conv(c, c_img);
  p.gti_conv2 = conv(c, c);
  p.v_conv = conv(c, c);
  p.offset_conv = conv(2, 2 * c);
  p.reduce = mat(1, 2 * c);
  p.w_mask = mat(m * m, 2);
  p.w_q = mat(c, c);
  p.w_k = mat(c, c);
  p.out_conv = conv(c, c);
  p.m = m;
  p.r = static_cast<T>(m);
  p.tau = T(1);
  p.hard_mask = true;
  return p;
}

/// GTI = gti_conv2(relu(gti_conv1(image))). The image must already share x's spatial size.
template <typename T>
BasicTensor<T> compute_gti(const BasicTensor<T>& image, const CRSelectorParams<T>& p) {
  return conv1x1(relu(conv1x1(image, p.gti_conv1)), p.gti_conv2);
}

/// offset = tanh(offset_conv(relu(concat(x, gti)))) * r, shape (n, 2, h, w).
template <typename T>
BasicTensor<T> compute_offset(const BasicTensor<T>& x, const BasicTensor<T>& gti,
                              const CRSelectorParams<T>& p) {
  if (p.offset_conv.c_in() != x.c() + gti.c()) {
    throw DimensionError("compute_offset: offset_conv expects " + std::to_string(p.offset_conv.c_in()) +
                         " channels but x and gti provide " + std::to_string(x.c() + gti.c()));
  }
  if (p.offset_conv.c_out() != 2) throw DimensionError("compute_offset: offset_conv must have c_out 2");
  return scale(tanh_map(conv1x1(relu(concat_channels(x, gti)), p.offset_conv)), p.r);
}

/// Per-window keep/drop decision.
template <typename T>
struct KeyMask {
  std::size_t n = 1;
  std::size_t rows = 1;  // windows per column
  std::size_t cols = 1;  // windows per row
  std::vector<T> logits;     // 2 per window: keep, drop
  std::vector<T> noise;      // Gumbel noise added to the logits, 2 per window
  std::vector<T> keep_prob;  // soft probabilities
  std::vector<T> drop_prob;
  std::vector<T> values;     // the mask actually applied: keep_prob or one-hot keep
  bool hard = false;

  std::size_t count() const { return values.size(); }
};

/// Gumbel noise for `windows` windows, two samples per window, drawn from
/// counter 2*win and 2*win + 1 of the stream.
template <typename T>
std::vector<T> sample_gumbel_noise(const RngStream& stream, std::size_t windows) {
  std::vector<T> g(2 * windows);
  for (std::size_t k = 0; k < g.size(); ++k) g[k] = static_cast<T>(stream.gumbel(k));
  return g;
}

/// softmax((logits + noise) / tau) per window; keymask is the keep
/// probability, or in hard mode the indicator keep_prob >= drop_prob.
template <typename T>
KeyMask<T> gumbel_softmax(std::vector<T> logits, std::vector<T> noise, T tau, bool hard) {
  if (logits.size() % 2 != 0 || noise.size() != logits.size()) {
    throw DimensionError("gumbel_softmax: need two logits and two noise samples per window");
  }
  KeyMask<T> km;
  const std::size_t count = logits.size() / 2;
  km.cols = count;
  km.hard = hard;
  km.keep_prob.resize(count);
  km.drop_prob.resize(count);
  km.values.resize(count);
  for (std::size_t w = 0; w < count; ++w) {
    T row[2] = {(logits[2 * w] + noise[2 * w]) / tau, (logits[2 * w + 1] + noise[2 * w + 1]) / tau};
    softmax_inplace(std::span<T>(row, 2));
    km.keep_prob[w] = row[0];
    km.drop_prob[w] = row[1];
    km.values[w] = hard ? (row[0] >= row[1] ? T(1) : T(0)) : row[0];
  }
  km.logits = std::move(logits);
  km.noise = std::move(noise);
  return km;
}

/// f_reduce: bias-free 1x1 reduction of concat(v, gti) to one channel.
template <typename T>
BasicTensor<T> reduce_features(const BasicTensor<T>& v, const BasicTensor<T>& gti,
                               const CRSelectorParams<T>& p) {
  return conv1x1_nobias(concat_channels(v, gti), p.reduce);
}

/// Keep/drop logits: each window of the reduced map, flattened row-major, times w_mask.
template <typename T>
std::vector<T> mask_logits(const BasicTensor<T>& reduced, const CRSelectorParams<T>& p) {
  const Windows<T> wins = window_partition(reduced, p.m);
  const std::size_t tokens = wins.tokens();
  std::vector<T> logits(2 * wins.count(), T(0));
  for (std::size_t w = 0; w < wins.count(); ++w) {
    const T* z = wins.window(w);
    for (std::size_t k = 0; k < 2; ++k) {
      T acc = T(0);
      for (std::size_t t = 0; t < tokens; ++t) acc += z[t] * p.w_mask(t, k);
      logits[2 * w + k] = acc;
    }
  }
  return logits;
}

template <typename T>
KeyMask<T> compute_keymask(const BasicTensor<T>& v, const BasicTensor<T>& gti,
                           const CRSelectorParams<T>& p, const std::vector<T>& noise) {
  window_grid_checked(v.h(), v.w(), p.m);
  if (gti.h() != v.h() || gti.w() != v.w() || gti.n() != v.n()) {
    throw DimensionError("compute_keymask: v " + v.shape().str() + " and gti " + gti.shape().str() +
                         " differ spatially");
  }
  auto logits = mask_logits(reduce_features(v, gti, p), p);
  if (noise.size() != logits.size()) {
    throw DimensionError("compute_keymask: expected " + std::to_string(logits.size()) +
                         " noise samples, got " + std::to_string(noise.size()));
  }
  KeyMask<T> km = gumbel_softmax(std::move(logits), noise, p.tau, p.hard_mask);
  km.n = v.n();
  km.rows = v.h() / p.m;
  km.cols = v.w() / p.m;
  return km;
}

/// Draws Gumbel noise from the "gumbel" sub-stream of rng.
template <typename T>
KeyMask<T> compute_keymask(const BasicTensor<T>& v, const BasicTensor<T>& gti,
                           const CRSelectorParams<T>& p, const RngState& rng) {
  const std::size_t windows = v.n() * window_grid_checked(v.h(), v.w(), p.m);
  return compute_keymask(v, gti, p, sample_gumbel_noise<T>(rng.stream("gumbel"), windows));
}

/// Broadcasts one scalar per window over that window's pixels and channels.
template <typename T>
BasicTensor<T> mask_multiply(const BasicTensor<T>& x, const std::vector<T>& per_window, std::size_t m,
                             bool complement = false) {
  const std::size_t per_image = window_grid_checked(x.h(), x.w(), m);
  if (per_window.size() != x.n() * per_image) {
    throw DimensionError("mask has " + std::to_string(per_window.size()) + " windows, tensor " +
                         x.shape().str() + " has " + std::to_string(x.n() * per_image));
  }
  BasicTensor<T> out(x.shape());
  for (std::size_t b = 0; b < x.n(); ++b) {
    for (std::size_t ch = 0; ch < x.c(); ++ch) {
      for (std::size_t i = 0; i < x.h(); ++i) {
        for (std::size_t j = 0; j < x.w(); ++j) {
          const T k = per_window[window_of(b, i, j, m, x.h(), x.w())];
          out(b, ch, i, j) = x(b, ch, i, j) * (complement ? T(1) - k : k);
        }
      }
    }
  }
  return out;
}

template <typename T>
struct Regions {
  BasicTensor<T> k_tilde;  // offset_map masked to critical windows
  BasicTensor<T> v_c;      // critical local content
  BasicTensor<T> v_n;      // normal local content, returned but unused downstream
};

template <typename T>
Regions<T> partition_regions(const BasicTensor<T>& offset_map, const BasicTensor<T>& v,
                             const KeyMask<T>& km, std::size_t m) {
  if (offset_map.n() != v.n() || offset_map.h() != v.h() || offset_map.w() != v.w()) {
    throw DimensionError("partition_regions: offset_map " + offset_map.shape().str() + " vs v " +
                         v.shape().str());
  }
  return {mask_multiply(offset_map, km.values, m), mask_multiply(v, km.values, m),
          mask_multiply(v, km.values, m, true)};
}

template <typename T>
struct QueryKey {
  BasicTensor<T> q;
  BasicTensor<T> k;
};

/// q = k_tilde * w_q, k = k_tilde * w_k at every pixel.
template <typename T>
QueryKey<T> project_qk(const BasicTensor<T>& k_tilde, const CRSelectorParams<T>& p) {
  return {channel_matmul(k_tilde, p.w_q), channel_matmul(k_tilde, p.w_k)};
}

/// Windowed attention before the output convolution, plus each window's
/// attention matrix (tokens x tokens, row-major) for inspection.
template <typename T>
struct AttentionResult {
  BasicTensor<T> attended;
  std::vector<Matrix<T>> weights;
};

template <typename T>
AttentionResult<T> window_attention_core(const BasicTensor<T>& q, const BasicTensor<T>& k,
                                         const BasicTensor<T>& v, std::size_t m, T d) {
  if (q.shape() != k.shape()) {
    throw DimensionError("attention: q " + q.shape().str() + " vs k " + k.shape().str());
  }
  if (v.n() != q.n() || v.h() != q.h() || v.w() != q.w()) {
    throw DimensionError("attention: v " + v.shape().str() + " vs q " + q.shape().str());
  }
  const Windows<T> qw = window_partition(q, m);
  const Windows<T> kw = window_partition(k, m);
  Windows<T> vw = window_partition(v, m);
  Windows<T> ow = vw;
  const std::size_t tokens = qw.tokens();
  const std::size_t cq = q.c();
  const std::size_t cv = v.c();
  const T inv_sqrt_d = T(1) / std::sqrt(d);
  AttentionResult<T> res;
  res.weights.reserve(qw.count());
  for (std::size_t w = 0; w < qw.count(); ++w) {
    const T* qp = qw.window(w);
    const T* kp = kw.window(w);
    const T* vp = vw.window(w);
    T* op = ow.window(w);
    Matrix<T> scores(tokens, tokens);
    for (std::size_t a = 0; a < tokens; ++a) {
      for (std::size_t b = 0; b < tokens; ++b) {
        T dot = T(0);
        for (std::size_t ch = 0; ch < cq; ++ch) dot += qp[a * cq + ch] * kp[b * cq + ch];
        scores(a, b) = dot * inv_sqrt_d;
      }
    }
    Matrix<T> attn = softmax_rows(scores);
    for (std::size_t a = 0; a < tokens; ++a) {
      for (std::size_t ch = 0; ch < cv; ++ch) {
        T acc = T(0);
        for (std::size_t b = 0; b < tokens; ++b) acc += attn(a, b) * vp[b * cv + ch];
        op[a * cv + ch] = acc;
      }
    }
    res.weights.push_back(std::move(attn));
  }
  res.attended = window_merge(ow);
  return res;
}

/// out_conv(softmax(q k^T / sqrt(d)) v_c), computed independently per m x m window.
template <typename T>
BasicTensor<T> windowed_attention(const BasicTensor<T>& q, const BasicTensor<T>& k,
                                  const BasicTensor<T>& v_c, const CRSelectorParams<T>& p) {
  return conv1x1(window_attention_core(q, k, v_c, p.m, p.d()).attended, p.out_conv);
}

/// Every intermediate of one forward pass.
template <typename T>
struct CRSelectorTrace {
  BasicTensor<T> image_resized;
  BasicTensor<T> gti_pre;     // gti_conv1 output
  BasicTensor<T> gti;
  BasicTensor<T> v;
  BasicTensor<T> fused;       // concat(x, gti), before relu
  BasicTensor<T> offset_pre;  // offset_conv output, before tanh
  BasicTensor<T> offset;
  BasicTensor<T> offset_map;
  BasicTensor<T> reduced;
  KeyMask<T> keymask;
  Regions<T> regions;
  QueryKey<T> qk;
  AttentionResult<T> attention;
  BasicTensor<T> x_prime;
  BasicTensor<T> output;
};

/// Full pipeline with explicit Gumbel noise. When `keymask_override` is set it
/// replaces the computed mask values (logits and probabilities are still recorded).
template <typename T>
CRSelectorTrace<T> crselector_trace(const BasicTensor<T>& x, const BasicTensor<T>& image,
                                    const CRSelectorParams<T>& p, const std::vector<T>& noise,
                                    const std::optional<std::vector<T>>& keymask_override = {}) {
  p.validate();
  if (x.c() != p.channels()) {
    throw DimensionError("crselector: x has " + std::to_string(x.c()) + " channels, params expect " +
                         std::to_string(p.channels()));
  }
  if (image.n() != x.n()) {
    throw DimensionError("crselector: image batch " + std::to_string(image.n()) +
                         " differs from feature batch " + std::to_string(x.n()));
  }
  if (image.c() != p.image_channels()) {
    throw DimensionError("crselector: image has " + std::to_string(image.c()) +
                         " channels, params expect " + std::to_string(p.image_channels()));
  }
  window_grid_checked(x.h(), x.w(), p.m);

  CRSelectorTrace<T> t;
  t.image_resized = resize_nearest(image, x.h(), x.w());
  t.gti_pre = conv1x1(t.image_resized, p.gti_conv1);
  t.gti = conv1x1(relu(t.gti_pre), p.gti_conv2);
  t.v = conv1x1(x, p.v_conv);
  t.fused = concat_channels(x, t.gti);
  t.offset_pre = conv1x1(relu(t.fused), p.offset_conv);
  t.offset = scale(tanh_map(t.offset_pre), p.r);
  t.offset_map = warp_bilinear(x, t.offset);
  t.reduced = reduce_features(t.v, t.gti, p);
  t.keymask = compute_keymask(t.v, t.gti, p, noise);
  if (keymask_override) {
    if (keymask_override->size() != t.keymask.values.size()) {
      throw DimensionError("crselector: keymask override has wrong window count");
    }
    t.keymask.values = *keymask_override;
  }
  t.regions = partition_regions(t.offset_map, t.v, t.keymask, p.m);
  t.qk = project_qk(t.regions.k_tilde, p);
  t.attention = window_attention_core(t.qk.q, t.qk.k, t.regions.v_c, p.m, p.d());
  t.x_prime = conv1x1(t.attention.attended, p.out_conv);
  t.output = add(x, t.x_prime);
  return t;
}

template <typename T>
CRSelectorTrace<T> crselector_trace(const BasicTensor<T>& x, const BasicTensor<T>& image,
                                    const CRSelectorParams<T>& p, const RngState& rng) {
  const std::size_t windows = x.n() * window_grid_checked(x.h(), x.w(), p.m);
  return crselector_trace(x, image, p, sample_gumbel_noise<T>(rng.stream("gumbel"), windows));
}

/// x + x' for the full selector pipeline.
template <typename T>
BasicTensor<T> crselector_forward(const BasicTensor<T>& x, const BasicTensor<T>& image,
                                  const CRSelectorParams<T>& p, const RngState& rng) {
  return crselector_trace(x, image, p, rng).output;
}

}  // namespace crsel

#pragma once

// Explicit backward passes. Each function takes the forward operands and the
// upstream gradient and returns gradients shaped like the forward inputs.
// Non-differentiable points use the zero subgradient.

#include <cmath>
#include <cstddef>
#include <vector>

#include "crsel/crselector.hpp"
#include "crsel/ops.hpp"
#include "crsel/sca_head.hpp"
#include "crsel/tensor.hpp"
#include "crsel/warp.hpp"
#include "crsel/window.hpp"

namespace crsel {

template <typename T>
struct ConvGrads {
  BasicTensor<T> dx;
  Conv1x1Params<T> dparams;
};

template <typename T>
ConvGrads<T> conv1x1_backward(const BasicTensor<T>& x, const Conv1x1Params<T>& p,
                              const BasicTensor<T>& dy) {
  const Shape s = x.shape();
  if (dy.shape() != Shape{s.n, p.c_out(), s.h, s.w}) {
    throw DimensionError("conv1x1_backward: upstream " + dy.shape().str() + " does not match output");
  }
  ConvGrads<T> g{BasicTensor<T>(s), Conv1x1Params<T>::zeros(p.c_out(), p.c_in())};
  const std::size_t plane = s.plane();
  for (std::size_t b = 0; b < s.n; ++b) {
    for (std::size_t o = 0; o < p.c_out(); ++o) {
      const T* up = &dy(b, o, 0, 0);
      T bias_acc = T(0);
      for (std::size_t q = 0; q < plane; ++q) bias_acc += up[q];
      g.dparams.bias[o] += bias_acc;
      for (std::size_t k = 0; k < s.c; ++k) {
        const T* src = &x(b, k, 0, 0);
        T* dx = &g.dx(b, k, 0, 0);
        const T wk = p.weight(o, k);
        T w_acc = T(0);
        for (std::size_t q = 0; q < plane; ++q) {
          w_acc += up[q] * src[q];
          dx[q] += wk * up[q];
        }
        g.dparams.weight(o, k) += w_acc;
      }
    }
  }
  return g;
}

template <typename T>
BasicTensor<T> relu_backward(const BasicTensor<T>& x, const BasicTensor<T>& dy) {
  BasicTensor<T> dx(x.shape());
  for (std::size_t k = 0; k < x.size(); ++k) dx[k] = x[k] > T(0) ? dy[k] : T(0);
  return dx;
}

/// Takes the tanh output y, not its input.
template <typename T>
BasicTensor<T> tanh_backward(const BasicTensor<T>& y, const BasicTensor<T>& dy) {
  BasicTensor<T> dx(y.shape());
  for (std::size_t k = 0; k < y.size(); ++k) dx[k] = dy[k] * (T(1) - y[k] * y[k]);
  return dx;
}

template <typename T>
T hard_sigmoid_derivative(T x) {
  return (x > T(-1) && x < T(1)) ? T(0.5) : T(0);
}

template <typename T>
BasicTensor<T> hard_sigmoid_backward(const BasicTensor<T>& x, const BasicTensor<T>& dy) {
  BasicTensor<T> dx(x.shape());
  for (std::size_t k = 0; k < x.size(); ++k) dx[k] = dy[k] * hard_sigmoid_derivative(x[k]);
  return dx;
}

/// Softmax Jacobian-vector product using the forward output y:
/// dx_i = y_i (dy_i - sum_j y_j dy_j).
template <typename T>
Matrix<T> softmax_rows_backward(const Matrix<T>& y, const Matrix<T>& dy) {
  Matrix<T> dx(y.rows, y.cols);
  for (std::size_t r = 0; r < y.rows; ++r) {
    T dot = T(0);
    for (std::size_t c = 0; c < y.cols; ++c) dot += y(r, c) * dy(r, c);
    for (std::size_t c = 0; c < y.cols; ++c) dx(r, c) = y(r, c) * (dy(r, c) - dot);
  }
  return dx;
}

template <typename T>
BasicTensor<T> global_avg_pool_backward(const Shape& input, const BasicTensor<T>& dy) {
  BasicTensor<T> dx(input);
  const T inv = T(1) / static_cast<T>(input.plane());
  for (std::size_t b = 0; b < input.n; ++b) {
    for (std::size_t ch = 0; ch < input.c; ++ch) {
      const T g = dy(b, ch, 0, 0) * inv;
      T* dst = &dx(b, ch, 0, 0);
      for (std::size_t q = 0; q < input.plane(); ++q) dst[q] = g;
    }
  }
  return dx;
}

template <typename T>
BasicTensor<T> resize_nearest_backward(const Shape& input, const BasicTensor<T>& dy) {
  BasicTensor<T> dx(input);
  for (std::size_t b = 0; b < dy.n(); ++b) {
    for (std::size_t ch = 0; ch < dy.c(); ++ch) {
      for (std::size_t i = 0; i < dy.h(); ++i) {
        const std::size_t si = nearest_source(i, input.h, dy.h());
        for (std::size_t j = 0; j < dy.w(); ++j) {
          dx(b, ch, si, nearest_source(j, input.w, dy.w())) += dy(b, ch, i, j);
        }
      }
    }
  }
  return dx;
}

template <typename T>
struct MatmulGrads {
  BasicTensor<T> dx;
  Matrix<T> dm;
};

template <typename T>
MatmulGrads<T> channel_matmul_backward(const BasicTensor<T>& x, const Matrix<T>& m,
                                       const BasicTensor<T>& dy) {
  MatmulGrads<T> g{BasicTensor<T>(x.shape()), Matrix<T>(m.rows, m.cols)};
  const std::size_t plane = x.shape().plane();
  for (std::size_t b = 0; b < x.n(); ++b) {
    for (std::size_t i = 0; i < m.rows; ++i) {
      const T* src = &x(b, i, 0, 0);
      T* dx = &g.dx(b, i, 0, 0);
      for (std::size_t j = 0; j < m.cols; ++j) {
        const T* up = &dy(b, j, 0, 0);
        const T mij = m(i, j);
        T acc = T(0);
        for (std::size_t q = 0; q < plane; ++q) {
          acc += src[q] * up[q];
          dx[q] += up[q] * mij;
        }
        g.dm(i, j) += acc;
      }
    }
  }
  return g;
}

template <typename T>
struct WarpGrads {
  BasicTensor<T> dx;
  BasicTensor<T> doffset;
};

/// Gradients of warp_bilinear w.r.t. the sampled tensor and the offsets.
/// Clamped coordinates receive zero offset gradient.
template <typename T>
WarpGrads<T> warp_bilinear_backward(const BasicTensor<T>& x, const BasicTensor<T>& offset,
                                    const BasicTensor<T>& dy) {
  WarpGrads<T> g{BasicTensor<T>(x.shape()), BasicTensor<T>(offset.shape())};
  for (std::size_t b = 0; b < x.n(); ++b) {
    for (std::size_t i = 0; i < x.h(); ++i) {
      for (std::size_t j = 0; j < x.w(); ++j) {
        const auto cx = sample_cell(static_cast<T>(j) + offset(b, 0, i, j), x.w());
        const auto cy = sample_cell(static_cast<T>(i) + offset(b, 1, i, j), x.h());
        T dox = T(0);
        T doy = T(0);
        for (std::size_t ch = 0; ch < x.c(); ++ch) {
          const T up = dy(b, ch, i, j);
          g.dx(b, ch, cy.lo, cx.lo) += up * (T(1) - cy.frac) * (T(1) - cx.frac);
          g.dx(b, ch, cy.lo, cx.hi) += up * (T(1) - cy.frac) * cx.frac;
          g.dx(b, ch, cy.hi, cx.lo) += up * cy.frac * (T(1) - cx.frac);
          g.dx(b, ch, cy.hi, cx.hi) += up * cy.frac * cx.frac;
          const T v00 = x(b, ch, cy.lo, cx.lo);
          const T v01 = x(b, ch, cy.lo, cx.hi);
          const T v10 = x(b, ch, cy.hi, cx.lo);
          const T v11 = x(b, ch, cy.hi, cx.hi);
          if (!cx.clamped) dox += up * ((T(1) - cy.frac) * (v01 - v00) + cy.frac * (v11 - v10));
          if (!cy.clamped) doy += up * ((T(1) - cx.frac) * (v10 - v00) + cx.frac * (v11 - v01));
        }
        g.doffset(b, 0, i, j) = dox;
        g.doffset(b, 1, i, j) = doy;
      }
    }
  }
  return g;
}

template <typename T>
struct AttentionGrads {
  BasicTensor<T> dq;
  BasicTensor<T> dk;
  BasicTensor<T> dv;
};

/// Backward of window_attention_core given its recorded attention weights.
template <typename T>
AttentionGrads<T> window_attention_backward(const BasicTensor<T>& q, const BasicTensor<T>& k,
                                            const BasicTensor<T>& v, std::size_t m, T d,
                                            const std::vector<Matrix<T>>& weights,
                                            const BasicTensor<T>& d_attended) {
  const Windows<T> qw = window_partition(q, m);
  const Windows<T> kw = window_partition(k, m);
  const Windows<T> vw = window_partition(v, m);
  const Windows<T> dow = window_partition(d_attended, m);
  Windows<T> dqw = qw;
  Windows<T> dkw = kw;
  Windows<T> dvw = vw;
  std::fill(dqw.data.begin(), dqw.data.end(), T(0));
  std::fill(dkw.data.begin(), dkw.data.end(), T(0));
  std::fill(dvw.data.begin(), dvw.data.end(), T(0));
  const std::size_t tokens = qw.tokens();
  const std::size_t cq = q.c();
  const std::size_t cv = v.c();
  const T inv_sqrt_d = T(1) / std::sqrt(d);
  for (std::size_t w = 0; w < qw.count(); ++w) {
    const Matrix<T>& attn = weights.at(w);
    const T* qp = qw.window(w);
    const T* kp = kw.window(w);
    const T* vp = vw.window(w);
    const T* dop = dow.window(w);
    T* dqp = dqw.window(w);
    T* dkp = dkw.window(w);
    T* dvp = dvw.window(w);
    Matrix<T> dattn(tokens, tokens);
    for (std::size_t a = 0; a < tokens; ++a) {
      for (std::size_t b = 0; b < tokens; ++b) {
        T acc = T(0);
        for (std::size_t ch = 0; ch < cv; ++ch) {
          acc += dop[a * cv + ch] * vp[b * cv + ch];
          dvp[b * cv + ch] += attn(a, b) * dop[a * cv + ch];
        }
        dattn(a, b) = acc;
      }
    }
    const Matrix<T> dscores = softmax_rows_backward(attn, dattn);
    for (std::size_t a = 0; a < tokens; ++a) {
      for (std::size_t b = 0; b < tokens; ++b) {
        const T s = dscores(a, b) * inv_sqrt_d;
        for (std::size_t ch = 0; ch < cq; ++ch) {
          dqp[a * cq + ch] += s * kp[b * cq + ch];
          dkp[b * cq + ch] += s * qp[a * cq + ch];
        }
      }
    }
  }
  return {window_merge(dqw), window_merge(dkw), window_merge(dvw)};
}

/// Gradient of the applied mask values w.r.t. the logits. The soft path is
/// exact; in hard mode the straight-through surrogate (gradient of the soft
/// keep probability) is used.
template <typename T>
std::vector<T> gumbel_softmax_backward(const KeyMask<T>& km, T tau, const std::vector<T>& dvalues) {
  std::vector<T> dlogits(2 * km.keep_prob.size());
  for (std::size_t w = 0; w < km.keep_prob.size(); ++w) {
    const T y0 = km.keep_prob[w];
    const T y1 = km.drop_prob[w];
    // d y0 / d u0 = y0 (1 - y0), d y0 / d u1 = -y0 y1, with u = (logits + noise) / tau
    dlogits[2 * w] = dvalues[w] * y0 * (T(1) - y0) / tau;
    dlogits[2 * w + 1] = -dvalues[w] * y0 * y1 / tau;
  }
  return dlogits;
}

template <typename T>
struct MaskGrads {
  BasicTensor<T> dx;
  std::vector<T> dmask;
};

template <typename T>
MaskGrads<T> mask_multiply_backward(const BasicTensor<T>& x, const std::vector<T>& mask, std::size_t m,
                                    const BasicTensor<T>& dy) {
  MaskGrads<T> g{mask_multiply(dy, mask, m), std::vector<T>(mask.size(), T(0))};
  for (std::size_t b = 0; b < x.n(); ++b) {
    for (std::size_t ch = 0; ch < x.c(); ++ch) {
      for (std::size_t i = 0; i < x.h(); ++i) {
        for (std::size_t j = 0; j < x.w(); ++j) {
          g.dmask[window_of(b, i, j, m, x.h(), x.w())] += dy(b, ch, i, j) * x(b, ch, i, j);
        }
      }
    }
  }
  return g;
}

template <typename T>
struct MaskLogitGrads {
  BasicTensor<T> dreduced;
  Matrix<T> dw_mask;
};

template <typename T>
MaskLogitGrads<T> mask_logits_backward(const BasicTensor<T>& reduced, const CRSelectorParams<T>& p,
                                       const std::vector<T>& dlogits) {
  const Windows<T> wins = window_partition(reduced, p.m);
  Windows<T> dwins = wins;
  std::fill(dwins.data.begin(), dwins.data.end(), T(0));
  MaskLogitGrads<T> g{BasicTensor<T>(reduced.shape()), Matrix<T>(p.w_mask.rows, 2)};
  for (std::size_t w = 0; w < wins.count(); ++w) {
    const T* z = wins.window(w);
    T* dz = dwins.window(w);
    for (std::size_t t = 0; t < wins.tokens(); ++t) {
      for (std::size_t k = 0; k < 2; ++k) {
        g.dw_mask(t, k) += z[t] * dlogits[2 * w + k];
        dz[t] += p.w_mask(t, k) * dlogits[2 * w + k];
      }
    }
  }
  g.dreduced = window_merge(dwins);
  return g;
}

template <typename T>
struct ScaleWeightGrads {
  PyramidFeatures<T> dfeatures;
  Conv1x1Params<T> dgate;
};

template <typename T>
ScaleWeightGrads<T> scale_weights_backward(const PyramidFeatures<T>& f, const ScAParams<T>& p,
                                           const ScaleWeights<T>& dgamma) {
  const ScaleWeights<T> z = gate_logits(f, p);
  ScaleWeightGrads<T> g{{}, Conv1x1Params<T>::zeros(1, p.gate_conv.c_in())};
  for (std::size_t h = 0; h < f.size(); ++h) {
    const BasicTensor<T> pooled = global_avg_pool(f[h]);
    BasicTensor<T> dz(Shape{f[h].n(), 1, 1, 1});
    for (std::size_t b = 0; b < f[h].n(); ++b) {
      const T pre = z(b, h);
      const T drelu = pre > T(0) ? T(1) : T(0);
      dz(b, 0, 0, 0) = dgamma(b, h) * hard_sigmoid_derivative(relu_scalar(pre)) * drelu;
    }
    const ConvGrads<T> cg = conv1x1_backward(pooled, p.gate_conv, dz);
    for (std::size_t k = 0; k < g.dgate.weight.data.size(); ++k) g.dgate.weight.data[k] += cg.dparams.weight.data[k];
    g.dgate.bias[0] += cg.dparams.bias[0];
    g.dfeatures.push_back(global_avg_pool_backward(f[h].shape(), cg.dx));
  }
  return g;
}

template <typename T>
struct WeightingGrads {
  PyramidFeatures<T> dfeatures;
  ScaleWeights<T> dgamma;
};

template <typename T>
WeightingGrads<T> apply_scale_weighting_backward(const PyramidFeatures<T>& f, const ScaleWeights<T>& g,
                                                 const PyramidFeatures<T>& dout) {
  WeightingGrads<T> res{{}, ScaleWeights<T>{g.batch, g.levels, std::vector<T>(g.gamma.size(), T(0))}};
  for (std::size_t h = 0; h < f.size(); ++h) {
    BasicTensor<T> df(f[h].shape());
    const std::size_t per_batch = f[h].c() * f[h].shape().plane();
    for (std::size_t b = 0; b < f[h].n(); ++b) {
      const T gamma = g(b, h);
      T acc = T(0);
      for (std::size_t k = b * per_batch; k < (b + 1) * per_batch; ++k) {
        df[k] = dout[h][k] * (gamma + T(1));
        acc += dout[h][k] * f[h][k];
      }
      res.dgamma(b, h) = acc;
    }
    res.dfeatures.push_back(std::move(df));
  }
  return res;
}

template <typename T>
struct ScAGrads {
  PyramidFeatures<T> dfeatures;
  ScAParams<T> dparams;
};

template <typename T>
ScAGrads<T> sca_backward(const PyramidFeatures<T>& f, const ScAParams<T>& p, const PyramidFeatures<T>& dout) {
  const ScaleWeights<T> gamma = scale_weights(f, p);
  WeightingGrads<T> wg = apply_scale_weighting_backward(f, gamma, dout);
  ScaleWeightGrads<T> sg = scale_weights_backward(f, p, wg.dgamma);
  ScAGrads<T> g{std::move(wg.dfeatures), {std::move(sg.dgate)}};
  for (std::size_t h = 0; h < f.size(); ++h) {
    for (std::size_t k = 0; k < f[h].size(); ++k) g.dfeatures[h][k] += sg.dfeatures[h][k];
  }
  return g;
}

template <typename T>
struct CRSelectorGrads {
  BasicTensor<T> dx;
  BasicTensor<T> dimage;
  CRSelectorParams<T> dparams;  // same layout as the parameters; scalars unused
};

namespace detail {
template <typename T>
void accumulate(BasicTensor<T>& dst, const BasicTensor<T>& src) {
  for (std::size_t k = 0; k < dst.size(); ++k) dst[k] += src[k];
}
}  // namespace detail

/// Reverse pass over a recorded forward trace. The Gumbel noise stored in the
/// trace is treated as a constant; hard masks use the straight-through rule.
template <typename T>
CRSelectorGrads<T> crselector_backward(const BasicTensor<T>& x, const BasicTensor<T>& image,
                                       const CRSelectorParams<T>& p, const CRSelectorTrace<T>& t,
                                       const BasicTensor<T>& dout) {
  CRSelectorGrads<T> g;
  g.dparams = p;
  BasicTensor<T> dx = dout;

  // x' = out_conv(attended)
  const ConvGrads<T> out_g = conv1x1_backward(t.attention.attended, p.out_conv, dout);
  g.dparams.out_conv = out_g.dparams;

  const AttentionGrads<T> att_g = window_attention_backward(
      t.qk.q, t.qk.k, t.regions.v_c, p.m, p.d(), t.attention.weights, out_g.dx);

  const MatmulGrads<T> q_g = channel_matmul_backward(t.regions.k_tilde, p.w_q, att_g.dq);
  const MatmulGrads<T> k_g = channel_matmul_backward(t.regions.k_tilde, p.w_k, att_g.dk);
  g.dparams.w_q = q_g.dm;
  g.dparams.w_k = k_g.dm;
  BasicTensor<T> dk_tilde = add(q_g.dx, k_g.dx);

  // k_tilde = offset_map * mask, v_c = v * mask
  const MaskGrads<T> km_om = mask_multiply_backward(t.offset_map, t.keymask.values, p.m, dk_tilde);
  const MaskGrads<T> km_v = mask_multiply_backward(t.v, t.keymask.values, p.m, att_g.dv);
  std::vector<T> dmask(km_om.dmask.size());
  for (std::size_t w = 0; w < dmask.size(); ++w) dmask[w] = km_om.dmask[w] + km_v.dmask[w];
  BasicTensor<T> dv = km_v.dx;

  const std::vector<T> dlogits = gumbel_softmax_backward(t.keymask, p.tau, dmask);
  const MaskLogitGrads<T> ml_g = mask_logits_backward(t.reduced, p, dlogits);
  g.dparams.w_mask = ml_g.dw_mask;

  const BasicTensor<T> reduce_in = concat_channels(t.v, t.gti);
  const ConvGrads<T> red_g = conv1x1_backward(
      reduce_in, Conv1x1Params<T>(p.reduce, std::vector<T>(1, T(0))), ml_g.dreduced);
  g.dparams.reduce = red_g.dparams.weight;
  const std::size_t cv = t.v.c();
  detail::accumulate(dv, slice_channels(red_g.dx, 0, cv));
  BasicTensor<T> dgti = slice_channels(red_g.dx, cv, t.gti.c());

  // offset_map = warp(x, offset)
  const WarpGrads<T> warp_g = warp_bilinear_backward(x, t.offset, km_om.dx);
  detail::accumulate(dx, warp_g.dx);

  // offset = tanh(offset_pre) * r
  BasicTensor<T> dtanh_out = scale(warp_g.doffset, p.r);
  const BasicTensor<T> dpre = tanh_backward(tanh_map(t.offset_pre), dtanh_out);
  const BasicTensor<T> fused_act = relu(t.fused);
  const ConvGrads<T> off_g = conv1x1_backward(fused_act, p.offset_conv, dpre);
  g.dparams.offset_conv = off_g.dparams;
  const BasicTensor<T> dfused = relu_backward(t.fused, off_g.dx);
  detail::accumulate(dx, slice_channels(dfused, 0, x.c()));
  detail::accumulate(dgti, slice_channels(dfused, x.c(), t.gti.c()));

  // v = v_conv(x)
  const ConvGrads<T> v_g = conv1x1_backward(x, p.v_conv, dv);
  g.dparams.v_conv = v_g.dparams;
  detail::accumulate(dx, v_g.dx);

  // gti = gti_conv2(relu(gti_conv1(image_resized)))
  const ConvGrads<T> g2 = conv1x1_backward(relu(t.gti_pre), p.gti_conv2, dgti);
  g.dparams.gti_conv2 = g2.dparams;
  const ConvGrads<T> g1 = conv1x1_backward(t.image_resized, p.gti_conv1, relu_backward(t.gti_pre, g2.dx));
  g.dparams.gti_conv1 = g1.dparams;
  g.dimage = resize_nearest_backward(image.shape(), g1.dx);
  g.dx = std::move(dx);
  return g;
}

}  // namespace crsel

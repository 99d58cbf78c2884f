#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "bevfuse/diffcore/graph.hpp"

namespace bevfuse::diff {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;

namespace detail {

inline void require_rank(const Var& v, std::size_t rank, const char* op) {
  if (v.value().rank() != rank) {
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) +
                     " input, got " + shape_str(v.shape()) + " at " +
                     v.graph->describe(v.id));
  }
}

inline std::size_t norm_axis(long axis, std::size_t rank, const char* op) {
  long r = static_cast<long>(rank);
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r) {
    throw ShapeError(std::string(op) + ": axis out of range");
  }
  return static_cast<std::size_t>(axis);
}

inline Shape broadcast_shape(const Shape& a, const Shape& b, const char* op) {
  const std::size_t rank = std::max(a.size(), b.size());
  Shape out(rank, 1);
  for (std::size_t i = 0; i < rank; ++i) {
    const std::size_t da = i < rank - a.size() ? 1 : a[i - (rank - a.size())];
    const std::size_t db = i < rank - b.size() ? 1 : b[i - (rank - b.size())];
    if (da != db && da != 1 && db != 1) {
      throw ShapeError(std::string(op) + ": cannot broadcast " + shape_str(a) +
                       " with " + shape_str(b));
    }
    out[i] = da == 1 ? db : da;
  }
  return out;
}

/// Element strides of `in` viewed in the broadcast `out` shape (0 on
/// broadcast axes).
inline std::vector<std::size_t> broadcast_strides(const Shape& in, const Shape& out) {
  std::vector<std::size_t> strides(out.size(), 0);
  std::size_t stride = 1;
  for (std::size_t k = 0; k < in.size(); ++k) {
    const std::size_t i = in.size() - 1 - k;
    const std::size_t o = out.size() - 1 - k;
    strides[o] = in[i] == 1 ? 0 : stride;
    stride *= in[i];
  }
  return strides;
}

/// Calls f(out_index, a_index, b_index) over the broadcast output.
template <typename F>
void for_each_broadcast(const Shape& out, const Shape& a, const Shape& b, F&& f) {
  const std::size_t n = shape_numel(out);
  if (a == out && b == out) {
    for (std::size_t i = 0; i < n; ++i) f(i, i, i);
    return;
  }
  const auto sa = broadcast_strides(a, out);
  const auto sb = broadcast_strides(b, out);
  const std::size_t rank = out.size();
  std::vector<std::size_t> idx(rank, 0);
  std::size_t ia = 0, ib = 0;
  for (std::size_t i = 0; i < n; ++i) {
    f(i, ia, ib);
    for (std::size_t d = rank; d-- > 0;) {
      ++idx[d];
      ia += sa[d];
      ib += sb[d];
      if (idx[d] < out[d]) break;
      ia -= sa[d] * out[d];
      ib -= sb[d] * out[d];
      idx[d] = 0;
    }
  }
}

struct AxisSplit {
  std::size_t outer, n, inner;
};

inline AxisSplit split_axis(const Shape& s, std::size_t axis) {
  AxisSplit r{1, s[axis], 1};
  for (std::size_t i = 0; i < axis; ++i) r.outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) r.inner *= s[i];
  return r;
}

inline void im2col(const double* x, std::size_t C, std::size_t H, std::size_t W,
                   std::size_t kh, std::size_t kw, std::size_t stride, std::size_t pad,
                   std::size_t Ho, std::size_t Wo, double* cols) {
  const std::size_t P = Ho * Wo;
  for (std::size_t c = 0; c < C; ++c) {
    for (std::size_t ki = 0; ki < kh; ++ki) {
      for (std::size_t kj = 0; kj < kw; ++kj) {
        double* row = cols + ((c * kh + ki) * kw + kj) * P;
        for (std::size_t oh = 0; oh < Ho; ++oh) {
          const long ih = static_cast<long>(oh * stride + ki) - static_cast<long>(pad);
          double* dst = row + oh * Wo;
          if (ih < 0 || ih >= static_cast<long>(H)) {
            std::fill(dst, dst + Wo, 0.0);
            continue;
          }
          const double* src = x + (c * H + static_cast<std::size_t>(ih)) * W;
          for (std::size_t ow = 0; ow < Wo; ++ow) {
            const long iw = static_cast<long>(ow * stride + kj) - static_cast<long>(pad);
            dst[ow] = (iw < 0 || iw >= static_cast<long>(W)) ? 0.0 : src[iw];
          }
        }
      }
    }
  }
}

inline void col2im(const double* cols, std::size_t C, std::size_t H, std::size_t W,
                   std::size_t kh, std::size_t kw, std::size_t stride, std::size_t pad,
                   std::size_t Ho, std::size_t Wo, double* dx) {
  const std::size_t P = Ho * Wo;
  for (std::size_t c = 0; c < C; ++c) {
    for (std::size_t ki = 0; ki < kh; ++ki) {
      for (std::size_t kj = 0; kj < kw; ++kj) {
        const double* row = cols + ((c * kh + ki) * kw + kj) * P;
        for (std::size_t oh = 0; oh < Ho; ++oh) {
          const long ih = static_cast<long>(oh * stride + ki) - static_cast<long>(pad);
          if (ih < 0 || ih >= static_cast<long>(H)) continue;
          double* dst = dx + (c * H + static_cast<std::size_t>(ih)) * W;
          const double* src = row + oh * Wo;
          for (std::size_t ow = 0; ow < Wo; ++ow) {
            const long iw = static_cast<long>(ow * stride + kj) - static_cast<long>(pad);
            if (iw >= 0 && iw < static_cast<long>(W)) dst[iw] += src[ow];
          }
        }
      }
    }
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise

inline Var add(Var a, Var b) {
  require_same_graph(a, b, "add");
  Graph& g = *a.graph;
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  Shape so = detail::broadcast_shape(sa, sb, "add");
  Tensor y(so);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  detail::for_each_broadcast(so, sa, sb, [&](std::size_t i, std::size_t ia, std::size_t ib) {
    y[i] = av[ia] + bv[ib];
  });
  const std::size_t ai = a.id, bi = b.id;
  return g.emplace("add", {ai, bi}, std::move(y), [ai, bi](Graph& g, std::size_t self) {
    const Tensor& gy = g.grad(self);
    const Shape so = gy.shape();
    const Shape sa = g.value(ai).shape();
    const Shape sb = g.value(bi).shape();
    Tensor* ga = g.requires_grad(ai) ? &g.grad_ref(ai) : nullptr;
    Tensor* gb = g.requires_grad(bi) ? &g.grad_ref(bi) : nullptr;
    detail::for_each_broadcast(so, sa, sb, [&](std::size_t i, std::size_t ia, std::size_t ib) {
      if (ga) (*ga)[ia] += gy[i];
      if (gb) (*gb)[ib] += gy[i];
    });
  });
}

inline Var mul(Var a, Var b) {
  require_same_graph(a, b, "mul");
  Graph& g = *a.graph;
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  Shape so = detail::broadcast_shape(sa, sb, "mul");
  Tensor y(so);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  detail::for_each_broadcast(so, sa, sb, [&](std::size_t i, std::size_t ia, std::size_t ib) {
    y[i] = av[ia] * bv[ib];
  });
  const std::size_t ai = a.id, bi = b.id;
  return g.emplace("mul", {ai, bi}, std::move(y), [ai, bi](Graph& g, std::size_t self) {
    const Tensor& gy = g.grad(self);
    const Tensor& av = g.value(ai);
    const Tensor& bv = g.value(bi);
    Tensor* ga = g.requires_grad(ai) ? &g.grad_ref(ai) : nullptr;
    Tensor* gb = g.requires_grad(bi) ? &g.grad_ref(bi) : nullptr;
    detail::for_each_broadcast(gy.shape(), av.shape(), bv.shape(),
                               [&](std::size_t i, std::size_t ia, std::size_t ib) {
                                 if (ga) (*ga)[ia] += gy[i] * bv[ib];
                                 if (gb) (*gb)[ib] += gy[i] * av[ia];
                               });
  });
}

inline Var scale(Var x, double c) {
  Graph& g = *x.graph;
  Tensor y = x.value();
  for (double& v : y.values()) v *= c;
  const std::size_t xi = x.id;
  return g.emplace("scale", {xi}, std::move(y), [xi, c](Graph& g, std::size_t self) {
    const Tensor& gy = g.grad(self);
    Tensor& gx = g.grad_ref(xi);
    for (std::size_t i = 0; i < gy.size(); ++i) gx[i] += c * gy[i];
  });
}

inline Var sub(Var a, Var b) { return add(a, scale(b, -1.0)); }

inline Var relu(Var x) {
  Graph& g = *x.graph;
  const Tensor& xv = x.value();
  Tensor y(xv.shape());
  std::vector<bool> active(xv.size());
  for (std::size_t i = 0; i < xv.size(); ++i) {
    active[i] = xv[i] > 0.0;
    y[i] = active[i] ? xv[i] : 0.0;
  }
  g.note_branch(hash_bits(active));
  const std::size_t xi = x.id;
  return g.emplace("relu", {xi}, std::move(y), [xi](Graph& g, std::size_t self) {
    const Tensor& gy = g.grad(self);
    const Tensor& xv = g.value(xi);
    Tensor& gx = g.grad_ref(xi);
    for (std::size_t i = 0; i < gy.size(); ++i) {
      if (xv[i] > 0.0) gx[i] += gy[i];
    }
  });
}

inline double sigmoid_scalar(double v) {
  if (v >= 0.0) return 1.0 / (1.0 + std::exp(-v));
  const double e = std::exp(v);
  return e / (1.0 + e);
}

inline Var sigmoid(Var x) {
  Graph& g = *x.graph;
  Tensor y(x.shape());
  const Tensor& xv = x.value();
  for (std::size_t i = 0; i < xv.size(); ++i) y[i] = sigmoid_scalar(xv[i]);
  const std::size_t xi = x.id;
  return g.emplace("sigmoid", {xi}, std::move(y), [xi](Graph& g, std::size_t self) {
    const Tensor& gy = g.grad(self);
    const Tensor& yv = g.value(self);
    Tensor& gx = g.grad_ref(xi);
    for (std::size_t i = 0; i < gy.size(); ++i) gx[i] += gy[i] * yv[i] * (1.0 - yv[i]);
  });
}

/// Softmax along `axis`, max-subtracted.
inline Var softmax(Var x, long axis) {
  Graph& g = *x.graph;
  const Tensor& xv = x.value();
  const std::size_t ax = detail::norm_axis(axis, xv.rank(), "softmax");
  const auto sp = detail::split_axis(xv.shape(), ax);
  Tensor y(xv.shape());
  for (std::size_t o = 0; o < sp.outer; ++o) {
    for (std::size_t in = 0; in < sp.inner; ++in) {
      const std::size_t base = o * sp.n * sp.inner + in;
      double m = -std::numeric_limits<double>::infinity();
      for (std::size_t k = 0; k < sp.n; ++k) m = std::max(m, xv[base + k * sp.inner]);
      double s = 0.0;
      for (std::size_t k = 0; k < sp.n; ++k) {
        const double e = std::exp(xv[base + k * sp.inner] - m);
        y[base + k * sp.inner] = e;
        s += e;
      }
      for (std::size_t k = 0; k < sp.n; ++k) y[base + k * sp.inner] /= s;
    }
  }
  const std::size_t xi = x.id;
  return g.emplace("softmax", {xi}, std::move(y), [xi, sp](Graph& g, std::size_t self) {
    const Tensor& gy = g.grad(self);
    const Tensor& yv = g.value(self);
    Tensor& gx = g.grad_ref(xi);
    for (std::size_t o = 0; o < sp.outer; ++o) {
      for (std::size_t in = 0; in < sp.inner; ++in) {
        const std::size_t base = o * sp.n * sp.inner + in;
        double dot = 0.0;
        for (std::size_t k = 0; k < sp.n; ++k) {
          dot += gy[base + k * sp.inner] * yv[base + k * sp.inner];
        }
        for (std::size_t k = 0; k < sp.n; ++k) {
          const std::size_t i = base + k * sp.inner;
          gx[i] += yv[i] * (gy[i] - dot);
        }
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Convolution family

struct Conv2dOptions {
  std::size_t stride = 1;
  std::size_t padding = 0;
};

/// x: [N, Ci, H, W], w: [Co, Ci, kh, kw], b: [Co].
inline Var conv2d(Var x, Var w, std::optional<Var> b, Conv2dOptions opt = {}) {
  require_same_graph(x, w, "conv2d");
  Graph& g = *x.graph;
  detail::require_rank(x, 4, "conv2d");
  detail::require_rank(w, 4, "conv2d");
  const Shape xs = x.shape();
  const Shape ws = w.shape();
  const std::size_t N = xs[0], Ci = xs[1], H = xs[2], W = xs[3];
  const std::size_t Co = ws[0], kh = ws[2], kw = ws[3];
  if (ws[1] != Ci) {
    throw ShapeError("conv2d: weight " + shape_str(ws) + " expects " +
                     std::to_string(ws[1]) + " input channels, input " +
                     shape_str(xs) + " at " + g.describe(x.id));
  }
  if (b && (b->value().rank() != 1 || b->dim(0) != Co)) {
    throw ShapeError("conv2d: bias shape " + shape_str(b->shape()) +
                     " does not match " + std::to_string(Co) + " output channels");
  }
  if (opt.stride == 0 || H + 2 * opt.padding < kh || W + 2 * opt.padding < kw) {
    throw ShapeError("conv2d: kernel " + shape_str(ws) + " does not fit input " +
                     shape_str(xs));
  }
  const std::size_t Ho = (H + 2 * opt.padding - kh) / opt.stride + 1;
  const std::size_t Wo = (W + 2 * opt.padding - kw) / opt.stride + 1;
  const std::size_t K = Ci * kh * kw, P = Ho * Wo;
  const bool pointwise = kh == 1 && kw == 1 && opt.stride == 1 && opt.padding == 0;

  Tensor y(Shape{N, Co, Ho, Wo});
  ConstMatMap Wm(w.value().data(), static_cast<long>(Co), static_cast<long>(K));
  RowMat cols;
  if (!pointwise) cols.resize(static_cast<long>(K), static_cast<long>(P));
  for (std::size_t n = 0; n < N; ++n) {
    const double* xn = x.value().data() + n * Ci * H * W;
    MatMap Y(y.data() + n * Co * P, static_cast<long>(Co), static_cast<long>(P));
    if (pointwise) {
      Y.noalias() = Wm * ConstMatMap(xn, static_cast<long>(K), static_cast<long>(P));
    } else {
      detail::im2col(xn, Ci, H, W, kh, kw, opt.stride, opt.padding, Ho, Wo, cols.data());
      Y.noalias() = Wm * cols;
    }
    if (b) {
      const Tensor& bv = b->value();
      for (std::size_t c = 0; c < Co; ++c) Y.row(static_cast<long>(c)).array() += bv[c];
    }
  }

  std::vector<std::size_t> inputs{x.id, w.id};
  if (b) inputs.push_back(b->id);
  const std::size_t xi = x.id, wi = w.id;
  const std::optional<std::size_t> bi = b ? std::optional<std::size_t>(b->id) : std::nullopt;
  return g.emplace(
      "conv2d", std::move(inputs), std::move(y),
      [=](Graph& g, std::size_t self) {
        const Tensor& gy = g.grad(self);
        const Tensor& xv = g.value(xi);
        const Tensor& wv = g.value(wi);
        ConstMatMap Wm(wv.data(), static_cast<long>(Co), static_cast<long>(K));
        const bool need_x = g.requires_grad(xi);
        const bool need_w = g.requires_grad(wi);
        RowMat cols, dcols;
        if (!pointwise) {
          cols.resize(static_cast<long>(K), static_cast<long>(P));
          dcols.resize(static_cast<long>(K), static_cast<long>(P));
        }
        for (std::size_t n = 0; n < N; ++n) {
          const double* xn = xv.data() + n * Ci * H * W;
          ConstMatMap G(gy.data() + n * Co * P, static_cast<long>(Co), static_cast<long>(P));
          if (need_w) {
            MatMap dW(g.grad_ref(wi).data(), static_cast<long>(Co), static_cast<long>(K));
            if (pointwise) {
              dW.noalias() += G * ConstMatMap(xn, static_cast<long>(K), static_cast<long>(P)).transpose();
            } else {
              detail::im2col(xn, Ci, H, W, kh, kw, opt.stride, opt.padding, Ho, Wo, cols.data());
              dW.noalias() += G * cols.transpose();
            }
          }
          if (need_x) {
            double* dxn = g.grad_ref(xi).data() + n * Ci * H * W;
            if (pointwise) {
              MatMap dX(dxn, static_cast<long>(K), static_cast<long>(P));
              dX.noalias() += Wm.transpose() * G;
            } else {
              dcols.noalias() = Wm.transpose() * G;
              detail::col2im(dcols.data(), Ci, H, W, kh, kw, opt.stride, opt.padding, Ho, Wo, dxn);
            }
          }
          if (bi && g.requires_grad(*bi)) {
            Tensor& db = g.grad_ref(*bi);
            // Plain loop: Eigen's vectorized sum depends on pointer alignment.
            const double* gp = gy.data() + n * Co * P;
            for (std::size_t c = 0; c < Co; ++c) {
              double acc = 0.0;
              for (std::size_t p = 0; p < P; ++p) acc += gp[c * P + p];
              db[c] += acc;
            }
          }
        }
      });
}

/// Nearest-neighbour upsampling of the two trailing axes by an integer factor.
inline Var upsample_nearest(Var x, std::size_t factor) {
  Graph& g = *x.graph;
  detail::require_rank(x, 4, "upsample_nearest");
  const Shape xs = x.shape();
  const std::size_t NC = xs[0] * xs[1], H = xs[2], W = xs[3];
  const std::size_t Ho = H * factor, Wo = W * factor;
  Tensor y(Shape{xs[0], xs[1], Ho, Wo});
  const Tensor& xv = x.value();
  for (std::size_t p = 0; p < NC; ++p) {
    for (std::size_t i = 0; i < Ho; ++i) {
      for (std::size_t j = 0; j < Wo; ++j) {
        y[(p * Ho + i) * Wo + j] = xv[(p * H + i / factor) * W + j / factor];
      }
    }
  }
  const std::size_t xi = x.id;
  return g.emplace("upsample_nearest", {xi}, std::move(y), [=](Graph& g, std::size_t self) {
    const Tensor& gy = g.grad(self);
    Tensor& gx = g.grad_ref(xi);
    for (std::size_t p = 0; p < NC; ++p) {
      for (std::size_t i = 0; i < Ho; ++i) {
        for (std::size_t j = 0; j < Wo; ++j) {
          gx[(p * H + i / factor) * W + j / factor] += gy[(p * Ho + i) * Wo + j];
        }
      }
    }
  });
}

/// Per-(sample, channel) normalization over all trailing axes, no affine.
inline Var instance_norm(Var x, double eps = 1e-5) {
  Graph& g = *x.graph;
  const Shape xs = x.shape();
  if (xs.size() < 3) {
    throw ShapeError("instance_norm: expected [N, C, ...], got " + shape_str(xs));
  }
  const std::size_t groups = xs[0] * xs[1];
  const std::size_t S = shape_numel(xs) / std::max<std::size_t>(groups, 1);
  const Tensor& xv = x.value();
  Tensor y(xs);
  std::vector<double> inv_std(groups);
  for (std::size_t q = 0; q < groups; ++q) {
    const double* src = xv.data() + q * S;
    double mean = 0.0;
    for (std::size_t i = 0; i < S; ++i) mean += src[i];
    mean /= static_cast<double>(S);
    double var = 0.0;
    for (std::size_t i = 0; i < S; ++i) var += (src[i] - mean) * (src[i] - mean);
    var /= static_cast<double>(S);
    inv_std[q] = 1.0 / std::sqrt(var + eps);
    double* dst = y.data() + q * S;
    for (std::size_t i = 0; i < S; ++i) dst[i] = (src[i] - mean) * inv_std[q];
  }
  const std::size_t xi = x.id;
  return g.emplace("instance_norm", {xi}, std::move(y),
                   [xi, groups, S, inv_std = std::move(inv_std)](Graph& g, std::size_t self) {
                     const Tensor& gy = g.grad(self);
                     const Tensor& yv = g.value(self);
                     Tensor& gx = g.grad_ref(xi);
                     const double inv_n = 1.0 / static_cast<double>(S);
                     for (std::size_t q = 0; q < groups; ++q) {
                       const double* dy = gy.data() + q * S;
                       const double* yy = yv.data() + q * S;
                       double mdy = 0.0, mdyy = 0.0;
                       for (std::size_t i = 0; i < S; ++i) {
                         mdy += dy[i];
                         mdyy += dy[i] * yy[i];
                       }
                       mdy *= inv_n;
                       mdyy *= inv_n;
                       double* dx = gx.data() + q * S;
                       for (std::size_t i = 0; i < S; ++i) {
                         dx[i] += inv_std[q] * (dy[i] - mdy - yy[i] * mdyy);
                       }
                     }
                   });
}

/// [N, C, H, W] -> [N, C]
inline Var global_avg_pool(Var x) {
  Graph& g = *x.graph;
  detail::require_rank(x, 4, "global_avg_pool");
  const Shape xs = x.shape();
  const std::size_t NC = xs[0] * xs[1], S = xs[2] * xs[3];
  Tensor y(Shape{xs[0], xs[1]});
  const Tensor& xv = x.value();
  for (std::size_t p = 0; p < NC; ++p) {
    double s = 0.0;
    for (std::size_t i = 0; i < S; ++i) s += xv[p * S + i];
    y[p] = s / static_cast<double>(S);
  }
  const std::size_t xi = x.id;
  return g.emplace("global_avg_pool", {xi}, std::move(y), [=](Graph& g, std::size_t self) {
    const Tensor& gy = g.grad(self);
    Tensor& gx = g.grad_ref(xi);
    const double inv = 1.0 / static_cast<double>(S);
    for (std::size_t p = 0; p < NC; ++p) {
      for (std::size_t i = 0; i < S; ++i) gx[p * S + i] += gy[p] * inv;
    }
  });
}

// ---------------------------------------------------------------------------
// Dense algebra

/// y = x W^T + b over the last axis of x. w: [out, in], b: [out].
inline Var linear(Var x, Var w, std::optional<Var> b) {
  require_same_graph(x, w, "linear");
  Graph& g = *x.graph;
  detail::require_rank(w, 2, "linear");
  const Shape xs = x.shape();
  const std::size_t out = w.dim(0), in = w.dim(1);
  if (xs.empty() || xs.back() != in) {
    throw ShapeError("linear: input " + shape_str(xs) + " incompatible with weight " +
                     shape_str(w.shape()) + " at " + g.describe(x.id));
  }
  if (b && (b->value().rank() != 1 || b->dim(0) != out)) {
    throw ShapeError("linear: bias shape " + shape_str(b->shape()));
  }
  const std::size_t rows = in == 0 ? 0 : x.value().size() / in;
  Shape ys = xs;
  ys.back() = out;
  Tensor y(ys);
  if (rows > 0) {
    ConstMatMap X(x.value().data(), static_cast<long>(rows), static_cast<long>(in));
    ConstMatMap Wm(w.value().data(), static_cast<long>(out), static_cast<long>(in));
    MatMap Y(y.data(), static_cast<long>(rows), static_cast<long>(out));
    Y.noalias() = X * Wm.transpose();
    if (b) {
      for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t o = 0; o < out; ++o) y[r * out + o] += b->value()[o];
      }
    }
  }
  std::vector<std::size_t> inputs{x.id, w.id};
  if (b) inputs.push_back(b->id);
  const std::size_t xi = x.id, wi = w.id;
  const std::optional<std::size_t> bi = b ? std::optional<std::size_t>(b->id) : std::nullopt;
  return g.emplace("linear", std::move(inputs), std::move(y), [=](Graph& g, std::size_t self) {
    if (rows == 0) return;
    const Tensor& gy = g.grad(self);
    ConstMatMap G(gy.data(), static_cast<long>(rows), static_cast<long>(out));
    if (g.requires_grad(xi)) {
      ConstMatMap Wm(g.value(wi).data(), static_cast<long>(out), static_cast<long>(in));
      MatMap dX(g.grad_ref(xi).data(), static_cast<long>(rows), static_cast<long>(in));
      dX.noalias() += G * Wm;
    }
    if (g.requires_grad(wi)) {
      ConstMatMap X(g.value(xi).data(), static_cast<long>(rows), static_cast<long>(in));
      MatMap dW(g.grad_ref(wi).data(), static_cast<long>(out), static_cast<long>(in));
      dW.noalias() += G.transpose() * X;
    }
    if (bi && g.requires_grad(*bi)) {
      Tensor& db = g.grad_ref(*bi);
      for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t o = 0; o < out; ++o) db[o] += gy[r * out + o];
      }
    }
  });
}

/// [M, K] x [K, N] -> [M, N]
inline Var matmul(Var a, Var b) {
  require_same_graph(a, b, "matmul");
  Graph& g = *a.graph;
  detail::require_rank(a, 2, "matmul");
  detail::require_rank(b, 2, "matmul");
  const std::size_t M = a.dim(0), K = a.dim(1), N = b.dim(1);
  if (b.dim(0) != K) {
    throw ShapeError("matmul: " + shape_str(a.shape()) + " x " + shape_str(b.shape()) +
                     " at " + g.describe(a.id));
  }
  Tensor y(Shape{M, N});
  if (M * N > 0) {
    MatMap(y.data(), static_cast<long>(M), static_cast<long>(N)).noalias() =
        ConstMatMap(a.value().data(), static_cast<long>(M), static_cast<long>(K)) *
        ConstMatMap(b.value().data(), static_cast<long>(K), static_cast<long>(N));
  }
  const std::size_t ai = a.id, bi = b.id;
  return g.emplace("matmul", {ai, bi}, std::move(y), [=](Graph& g, std::size_t self) {
    if (M * N == 0) return;
    ConstMatMap G(g.grad(self).data(), static_cast<long>(M), static_cast<long>(N));
    if (g.requires_grad(ai)) {
      MatMap(g.grad_ref(ai).data(), static_cast<long>(M), static_cast<long>(K)).noalias() +=
          G * ConstMatMap(g.value(bi).data(), static_cast<long>(K), static_cast<long>(N)).transpose();
    }
    if (g.requires_grad(bi)) {
      MatMap(g.grad_ref(bi).data(), static_cast<long>(K), static_cast<long>(N)).noalias() +=
          ConstMatMap(g.value(ai).data(), static_cast<long>(M), static_cast<long>(K)).transpose() * G;
    }
  });
}

// ---------------------------------------------------------------------------
// Layout

inline Var reshape(Var x, Shape shape) {
  Graph& g = *x.graph;
  if (shape_numel(shape) != x.value().size()) {
    throw ShapeError("reshape: " + shape_str(x.shape()) + " -> " + shape_str(shape) +
                     " at " + g.describe(x.id));
  }
  Tensor y = x.value().reshaped(std::move(shape));
  const std::size_t xi = x.id;
  return g.emplace("reshape", {xi}, std::move(y), [xi](Graph& g, std::size_t self) {
    const Tensor& gy = g.grad(self);
    Tensor& gx = g.grad_ref(xi);
    for (std::size_t i = 0; i < gy.size(); ++i) gx[i] += gy[i];
  });
}

/// Axis permutation: output axis k is input axis perm[k].
inline Var permute(Var x, std::vector<std::size_t> perm) {
  Graph& g = *x.graph;
  const Shape xs = x.shape();
  const std::size_t rank = xs.size();
  if (perm.size() != rank) throw ShapeError("permute: rank mismatch");
  std::vector<std::size_t> in_strides(rank, 1);
  for (std::size_t d = rank; d-- > 1;) in_strides[d - 1] = in_strides[d] * xs[d];
  Shape ys(rank);
  std::vector<std::size_t> strides(rank);
  for (std::size_t k = 0; k < rank; ++k) {
    if (perm[k] >= rank) throw ShapeError("permute: bad axis");
    ys[k] = xs[perm[k]];
    strides[k] = in_strides[perm[k]];
  }
  // Precompute the gather map once; backward reuses it.
  const std::size_t n = shape_numel(xs);
  std::vector<std::size_t> src(n);
  {
    std::vector<std::size_t> idx(rank, 0);
    std::size_t off = 0;
    for (std::size_t i = 0; i < n; ++i) {
      src[i] = off;
      for (std::size_t d = rank; d-- > 0;) {
        ++idx[d];
        off += strides[d];
        if (idx[d] < ys[d]) break;
        off -= strides[d] * ys[d];
        idx[d] = 0;
      }
    }
  }
  Tensor y(ys);
  const Tensor& xv = x.value();
  for (std::size_t i = 0; i < n; ++i) y[i] = xv[src[i]];
  const std::size_t xi = x.id;
  return g.emplace("permute", {xi}, std::move(y), [xi, src = std::move(src)](Graph& g, std::size_t self) {
    const Tensor& gy = g.grad(self);
    Tensor& gx = g.grad_ref(xi);
    for (std::size_t i = 0; i < gy.size(); ++i) gx[src[i]] += gy[i];
  });
}

inline Var transpose(Var x) {
  detail::require_rank(x, 2, "transpose");
  return permute(x, {1, 0});
}

inline Var concat(std::span<const Var> xs, long axis) {
  if (xs.empty()) throw ShapeError("concat: no inputs");
  Graph& g = *xs[0].graph;
  const Shape s0 = xs[0].shape();
  const std::size_t ax = detail::norm_axis(axis, s0.size(), "concat");
  Shape ys = s0;
  ys[ax] = 0;
  for (const Var& v : xs) {
    require_same_graph(xs[0], v, "concat");
    const Shape& s = v.shape();
    if (s.size() != s0.size()) throw ShapeError("concat: rank mismatch");
    for (std::size_t d = 0; d < s.size(); ++d) {
      if (d != ax && s[d] != s0[d]) {
        throw ShapeError("concat: " + shape_str(s) + " vs " + shape_str(s0) + " at " +
                         g.describe(v.id));
      }
    }
    ys[ax] += s[ax];
  }
  const auto sp = detail::split_axis(ys, ax);
  Tensor y(ys);
  std::vector<std::size_t> ids, offsets, widths;
  std::size_t off = 0;
  for (const Var& v : xs) {
    const std::size_t n = v.shape()[ax];
    const Tensor& xv = v.value();
    for (std::size_t o = 0; o < sp.outer; ++o) {
      std::copy_n(xv.data() + o * n * sp.inner, n * sp.inner,
                  y.data() + (o * sp.n + off) * sp.inner);
    }
    ids.push_back(v.id);
    offsets.push_back(off);
    widths.push_back(n);
    off += n;
  }
  return g.emplace("concat", ids, std::move(y), [=](Graph& g, std::size_t self) {
    const Tensor& gy = g.grad(self);
    for (std::size_t k = 0; k < ids.size(); ++k) {
      if (!g.requires_grad(ids[k])) continue;
      Tensor& gx = g.grad_ref(ids[k]);
      const std::size_t n = widths[k];
      for (std::size_t o = 0; o < sp.outer; ++o) {
        const double* src = gy.data() + (o * sp.n + offsets[k]) * sp.inner;
        double* dst = gx.data() + o * n * sp.inner;
        for (std::size_t i = 0; i < n * sp.inner; ++i) dst[i] += src[i];
      }
    }
  });
}

inline Var concat(std::initializer_list<Var> xs, long axis) {
  std::vector<Var> v(xs);
  return concat(std::span<const Var>(v), axis);
}

/// Half-open range [begin, end) along `axis`.
inline Var slice(Var x, long axis, std::size_t begin, std::size_t end) {
  Graph& g = *x.graph;
  const Shape xs = x.shape();
  const std::size_t ax = detail::norm_axis(axis, xs.size(), "slice");
  if (begin > end || end > xs[ax]) {
    throw ShapeError("slice: range [" + std::to_string(begin) + ", " + std::to_string(end) +
                     ") outside " + shape_str(xs) + " at " + g.describe(x.id));
  }
  const auto sp = detail::split_axis(xs, ax);
  const std::size_t n = end - begin;
  Shape ys = xs;
  ys[ax] = n;
  Tensor y(ys);
  const Tensor& xv = x.value();
  for (std::size_t o = 0; o < sp.outer; ++o) {
    std::copy_n(xv.data() + (o * sp.n + begin) * sp.inner, n * sp.inner,
                y.data() + o * n * sp.inner);
  }
  const std::size_t xi = x.id;
  return g.emplace("slice", {xi}, std::move(y), [=](Graph& g, std::size_t self) {
    const Tensor& gy = g.grad(self);
    Tensor& gx = g.grad_ref(xi);
    for (std::size_t o = 0; o < sp.outer; ++o) {
      const double* src = gy.data() + o * n * sp.inner;
      double* dst = gx.data() + (o * sp.n + begin) * sp.inner;
      for (std::size_t i = 0; i < n * sp.inner; ++i) dst[i] += src[i];
    }
  });
}

/// Selects rows (axis 0) by index; repeated indices accumulate in backward.
inline Var gather_rows(Var x, std::vector<std::size_t> rows) {
  Graph& g = *x.graph;
  const Shape xs = x.shape();
  if (xs.empty()) throw ShapeError("gather_rows: scalar input");
  const std::size_t width = xs[0] == 0 ? 0 : x.value().size() / xs[0];
  Shape ys = xs;
  ys[0] = rows.size();
  Tensor y(ys);
  const Tensor& xv = x.value();
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (rows[r] >= xs[0]) throw ShapeError("gather_rows: index out of range");
    std::copy_n(xv.data() + rows[r] * width, width, y.data() + r * width);
  }
  const std::size_t xi = x.id;
  return g.emplace("gather_rows", {xi}, std::move(y),
                   [xi, width, rows = std::move(rows)](Graph& g, std::size_t self) {
                     const Tensor& gy = g.grad(self);
                     Tensor& gx = g.grad_ref(xi);
                     for (std::size_t r = 0; r < rows.size(); ++r) {
                       for (std::size_t c = 0; c < width; ++c) {
                         gx[rows[r] * width + c] += gy[r * width + c];
                       }
                     }
                   });
}

// ---------------------------------------------------------------------------
// Reductions

/// Sums out `axis` (the axis is removed).
inline Var sum_axis(Var x, long axis) {
  Graph& g = *x.graph;
  const Shape xs = x.shape();
  const std::size_t ax = detail::norm_axis(axis, xs.size(), "sum_axis");
  const auto sp = detail::split_axis(xs, ax);
  Shape ys;
  for (std::size_t d = 0; d < xs.size(); ++d) {
    if (d != ax) ys.push_back(xs[d]);
  }
  if (ys.empty()) ys.push_back(1);
  Tensor y(ys);
  const Tensor& xv = x.value();
  for (std::size_t o = 0; o < sp.outer; ++o) {
    for (std::size_t k = 0; k < sp.n; ++k) {
      for (std::size_t in = 0; in < sp.inner; ++in) {
        y[o * sp.inner + in] += xv[(o * sp.n + k) * sp.inner + in];
      }
    }
  }
  const std::size_t xi = x.id;
  return g.emplace("sum_axis", {xi}, std::move(y), [=](Graph& g, std::size_t self) {
    const Tensor& gy = g.grad(self);
    Tensor& gx = g.grad_ref(xi);
    for (std::size_t o = 0; o < sp.outer; ++o) {
      for (std::size_t k = 0; k < sp.n; ++k) {
        for (std::size_t in = 0; in < sp.inner; ++in) {
          gx[(o * sp.n + k) * sp.inner + in] += gy[o * sp.inner + in];
        }
      }
    }
  });
}

inline Var sum(Var x) {
  Graph& g = *x.graph;
  const Tensor& xv = x.value();
  Tensor y = Tensor::scalar(xv.sum());
  const std::size_t xi = x.id;
  return g.emplace("sum", {xi}, std::move(y), [xi](Graph& g, std::size_t self) {
    const double gy = g.grad(self)[0];
    Tensor& gx = g.grad_ref(xi);
    for (double& v : gx.values()) v += gy;
  });
}

inline Var mean(Var x) {
  const std::size_t n = x.value().size();
  return scale(sum(x), n ? 1.0 / static_cast<double>(n) : 0.0);
}

// ---------------------------------------------------------------------------
// Sampling and scatter kernels

/// Bilinear lookup in a [C, H, W] map at continuous pixel coordinates (u
/// along W, v along H; integer values are cell centers). The map covers the
/// rectangle [-0.5, W-0.5] x [-0.5, H-0.5]; coordinates outside it read zero
/// with zero gradient, inside the half-cell border the edge is replicated.
struct BilinearTap {
  bool inside = false;
  std::size_t u0 = 0, u1 = 0, v0 = 0, v1 = 0;
  double au = 0.0, av = 0.0;
  bool u_clamped = false, v_clamped = false;
};

inline BilinearTap bilinear_tap(double u, double v, std::size_t H, std::size_t W) {
  BilinearTap t;
  if (!(u >= -0.5 && u <= static_cast<double>(W) - 0.5 && v >= -0.5 &&
        v <= static_cast<double>(H) - 0.5)) {
    return t;
  }
  t.inside = true;
  const double umax = static_cast<double>(W - 1), vmax = static_cast<double>(H - 1);
  t.u_clamped = u < 0.0 || u > umax;
  t.v_clamped = v < 0.0 || v > vmax;
  const double uc = std::clamp(u, 0.0, umax);
  const double vc = std::clamp(v, 0.0, vmax);
  t.u0 = static_cast<std::size_t>(std::floor(uc));
  t.v0 = static_cast<std::size_t>(std::floor(vc));
  t.u1 = std::min(t.u0 + 1, W - 1);
  t.v1 = std::min(t.v0 + 1, H - 1);
  t.au = uc - static_cast<double>(t.u0);
  t.av = vc - static_cast<double>(t.v0);
  return t;
}

/// map: [C, H, W], coords: [K, 2] as (u, v) -> [C, K]
inline Var bilinear_sample(Var map, Var coords) {
  require_same_graph(map, coords, "bilinear_sample");
  Graph& g = *map.graph;
  detail::require_rank(map, 3, "bilinear_sample");
  detail::require_rank(coords, 2, "bilinear_sample");
  if (coords.dim(1) != 2) throw ShapeError("bilinear_sample: coords must be [K, 2]");
  const std::size_t C = map.dim(0), H = map.dim(1), W = map.dim(2), K = coords.dim(0);
  if (H == 0 || W == 0) throw ShapeError("bilinear_sample: empty map");
  const Tensor& mv = map.value();
  const Tensor& cv = coords.value();
  if (!cv.all_finite()) throw std::domain_error("bilinear_sample: non-finite coordinates");
  std::vector<BilinearTap> taps(K);
  std::uint64_t sig = 1469598103934665603ull;
  for (std::size_t k = 0; k < K; ++k) {
    taps[k] = bilinear_tap(cv[2 * k], cv[2 * k + 1], H, W);
    const auto& t = taps[k];
    const std::uint64_t code = t.inside ? ((t.u0 * 131071 + t.v0) * 4 + t.u_clamped * 2 + t.v_clamped + 1) : 0;
    sig = (sig ^ code) * 1099511628211ull;
  }
  g.note_branch(sig);
  Tensor y(Shape{C, K});
  for (std::size_t c = 0; c < C; ++c) {
    const double* m = mv.data() + c * H * W;
    for (std::size_t k = 0; k < K; ++k) {
      const auto& t = taps[k];
      if (!t.inside) continue;
      y[c * K + k] = (1 - t.av) * ((1 - t.au) * m[t.v0 * W + t.u0] + t.au * m[t.v0 * W + t.u1]) +
                     t.av * ((1 - t.au) * m[t.v1 * W + t.u0] + t.au * m[t.v1 * W + t.u1]);
    }
  }
  const std::size_t mi = map.id, ci = coords.id;
  return g.emplace("bilinear_sample", {mi, ci}, std::move(y),
                   [=, taps = std::move(taps)](Graph& g, std::size_t self) {
                     const Tensor& gy = g.grad(self);
                     const bool need_map = g.requires_grad(mi);
                     const bool need_coords = g.requires_grad(ci);
                     const Tensor& mv = g.value(mi);
                     Tensor* gm = need_map ? &g.grad_ref(mi) : nullptr;
                     Tensor* gc = need_coords ? &g.grad_ref(ci) : nullptr;
                     for (std::size_t c = 0; c < C; ++c) {
                       const double* m = mv.data() + c * H * W;
                       for (std::size_t k = 0; k < K; ++k) {
                         const auto& t = taps[k];
                         if (!t.inside) continue;
                         const double d = gy[c * K + k];
                         if (gm) {
                           double* dm = gm->data() + c * H * W;
                           dm[t.v0 * W + t.u0] += d * (1 - t.av) * (1 - t.au);
                           dm[t.v0 * W + t.u1] += d * (1 - t.av) * t.au;
                           dm[t.v1 * W + t.u0] += d * t.av * (1 - t.au);
                           dm[t.v1 * W + t.u1] += d * t.av * t.au;
                         }
                         if (gc) {
                           const double m00 = m[t.v0 * W + t.u0], m01 = m[t.v0 * W + t.u1];
                           const double m10 = m[t.v1 * W + t.u0], m11 = m[t.v1 * W + t.u1];
                           if (!t.u_clamped) {
                             (*gc)[2 * k] += d * ((1 - t.av) * (m01 - m00) + t.av * (m11 - m10));
                           }
                           if (!t.v_clamped) {
                             (*gc)[2 * k + 1] += d * ((1 - t.au) * (m10 - m00) + t.au * (m11 - m01));
                           }
                         }
                       }
                     }
                   });
}

/// Sums point features [P, C] into cells of an H x W grid -> [1, C, H, W].
/// cell[p] < 0 drops point p. Points are accumulated in index order.
inline Var scatter_add(Var features, const std::vector<long>& cell, std::size_t H, std::size_t W) {
  Graph& g = *features.graph;
  detail::require_rank(features, 2, "scatter_add");
  const std::size_t P = features.dim(0), C = features.dim(1);
  if (cell.size() != P) {
    throw ShapeError("scatter_add: " + std::to_string(cell.size()) + " cell indices for " +
                     std::to_string(P) + " points");
  }
  const std::size_t HW = H * W;
  for (long c : cell) {
    if (c >= static_cast<long>(HW)) throw ShapeError("scatter_add: cell index out of range");
  }
  Tensor y(Shape{1, C, H, W});
  const Tensor& fv = features.value();
  for (std::size_t p = 0; p < P; ++p) {
    if (cell[p] < 0) continue;
    const std::size_t q = static_cast<std::size_t>(cell[p]);
    for (std::size_t c = 0; c < C; ++c) y[c * HW + q] += fv[p * C + c];
  }
  const std::size_t fi = features.id;
  return g.emplace("scatter_add", {fi}, std::move(y), [=](Graph& g, std::size_t self) {
    const Tensor& gy = g.grad(self);
    Tensor& gf = g.grad_ref(fi);
    for (std::size_t p = 0; p < P; ++p) {
      if (cell[p] < 0) continue;
      const std::size_t q = static_cast<std::size_t>(cell[p]);
      for (std::size_t c = 0; c < C; ++c) gf[p * C + c] += gy[c * HW + q];
    }
  });
}

}  // namespace bevfuse::diff

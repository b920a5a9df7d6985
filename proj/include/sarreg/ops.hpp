// Copyright 2026 The sarreg Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

// Differentiable operations over ad::Var. Every op validates shapes, computes
// its value eagerly and records a backward closure when a parent needs it.

#include <Eigen/Core>
#include <cmath>
#include <numeric>
#include <vector>

#include "sarreg/sampling.hpp"
#include "sarreg/similarity.hpp"
#include "sarreg/tensor.hpp"

namespace sarreg::ops {

using ad::Node;
using ad::Var;

namespace detail {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using ConstMapMat = Eigen::Map<const RowMat>;

inline void same_shape(const Var& a, const Var& b, const char* op) {
  require(a.shape() == b.shape(), std::string(op) + ": shape mismatch " +
                                      a.shape().str() + " vs " + b.shape().str());
}

template <class F, class DF>
Var unary(const Var& x, F f, DF df) {
  Tensor out(x.shape());
  const auto in = x.value().data();
  for (std::size_t i = 0; i < in.size(); ++i) out[i] = f(in[i]);
  return ad::record(std::move(out), {x}, [xp = x.get(), df](Node& self) {
    auto& g = xp->grad_buffer();
    const auto& in = xp->value;
    for (std::size_t i = 0; i < g.size(); ++i) {
      g[i] += self.grad[i] * df(in[i], self.value[i]);
    }
  });
}

}  // namespace detail

// ---------------------------------------------------------------- elementwise

inline Var add(const Var& a, const Var& b) {
  detail::same_shape(a, b, "add");
  Tensor out = a.value();
  out += b.value();
  return ad::record(std::move(out), {a, b}, [ap = a.get(), bp = b.get()](Node& self) {
    if (ap->requires_grad) ap->grad_buffer() += self.grad;
    if (bp->requires_grad) bp->grad_buffer() += self.grad;
  });
}

inline Var sub(const Var& a, const Var& b) {
  detail::same_shape(a, b, "sub");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b.value()[i];
  return ad::record(std::move(out), {a, b}, [ap = a.get(), bp = b.get()](Node& self) {
    if (ap->requires_grad) ap->grad_buffer() += self.grad;
    if (bp->requires_grad) {
      auto& g = bp->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
    }
  });
}

inline Var mul(const Var& a, const Var& b) {
  detail::same_shape(a, b, "mul");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
  return ad::record(std::move(out), {a, b}, [ap = a.get(), bp = b.get()](Node& self) {
    if (ap->requires_grad) {
      auto& g = ap->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * bp->value[i];
    }
    if (bp->requires_grad) {
      auto& g = bp->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * ap->value[i];
    }
  });
}

inline Var scale(const Var& x, double k) {
  return detail::unary(x, [k](double v) { return k * v; },
                       [k](double, double) { return k; });
}

inline Var add_scalar(const Var& x, double k) {
  return detail::unary(x, [k](double v) { return v + k; },
                       [](double, double) { return 1.0; });
}

inline Var relu(const Var& x) {
  return detail::unary(x, [](double v) { return v > 0 ? v : 0.0; },
                       [](double v, double) { return v > 0 ? 1.0 : 0.0; });
}

inline Var leaky_relu(const Var& x, double slope = 0.2) {
  return detail::unary(x, [slope](double v) { return v > 0 ? v : slope * v; },
                       [slope](double v, double) { return v > 0 ? 1.0 : slope; });
}

inline Var tanh(const Var& x) {
  return detail::unary(x, [](double v) { return std::tanh(v); },
                       [](double, double y) { return 1.0 - y * y; });
}

inline Var sigmoid(const Var& x) {
  return detail::unary(x, [](double v) { return 1.0 / (1.0 + std::exp(-v)); },
                       [](double, double y) { return y * (1.0 - y); });
}

/// log(x + eps).
inline Var log_eps(const Var& x, double eps) {
  return detail::unary(x, [eps](double v) { return std::log(v + eps); },
                       [eps](double v, double) { return 1.0 / (v + eps); });
}

/// log(clamp(x, lo, hi)); zero gradient where clamped.
inline Var log_clamped(const Var& x, double lo, double hi) {
  return detail::unary(
      x, [lo, hi](double v) { return std::log(std::clamp(v, lo, hi)); },
      [lo, hi](double v, double) { return (v < lo || v > hi) ? 0.0 : 1.0 / v; });
}

/// Gradient barrier: same value, no history.
inline Var detach(const Var& x) { return ad::constant(x.value()); }

// ----------------------------------------------------------------- reductions

inline Var sum_all(const Var& x) {
  const auto d = x.value().data();
  const double s = std::accumulate(d.begin(), d.end(), 0.0);
  return ad::record(Tensor::scalar(s), {x}, [xp = x.get()](Node& self) {
    auto& g = xp->grad_buffer();
    const double up = self.grad[0];
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += up;
  });
}

inline Var mean_all(const Var& x) {
  return scale(sum_all(x), 1.0 / double(x.value().size()));
}

// ------------------------------------------------------------ shape plumbing

inline Var concat_channels(const std::vector<Var>& parts) {
  require(!parts.empty(), "concat_channels: no inputs");
  Shape s = parts.front().shape();
  int channels = 0;
  for (const auto& p : parts) {
    require(p.shape().n == s.n && p.shape().h == s.h && p.shape().w == s.w,
            "concat_channels: incompatible " + p.shape().str() + " vs " + s.str());
    channels += p.shape().c;
  }
  Shape os{s.n, channels, s.h, s.w};
  Tensor out(os);
  for (int n = 0; n < s.n; ++n) {
    double* dst = out.sample(n);
    for (const auto& p : parts) {
      const double* src = p.value().sample(n);
      dst = std::copy(src, src + p.shape().per_sample(), dst);
    }
  }
  std::vector<Node*> raw;
  for (const auto& p : parts) raw.push_back(p.get());
  return ad::record(std::move(out), parts, [raw](Node& self) {
    const Shape& os = self.value.shape();
    for (int n = 0; n < os.n; ++n) {
      const double* src = self.grad.sample(n);
      for (Node* p : raw) {
        const std::size_t len = p->value.shape().per_sample();
        if (p->requires_grad) {
          double* dst = p->grad_buffer().sample(n);
          for (std::size_t i = 0; i < len; ++i) dst[i] += src[i];
        }
        src += len;
      }
    }
  });
}

inline Var slice_channels(const Var& x, int first, int count) {
  const Shape s = x.shape();
  require(first >= 0 && count > 0 && first + count <= s.c, "slice_channels: bad range");
  Tensor out({s.n, count, s.h, s.w});
  for (int n = 0; n < s.n; ++n) {
    const double* src = x.value().channel(n, first);
    std::copy(src, src + std::size_t(count) * s.plane(), out.sample(n));
  }
  return ad::record(std::move(out), {x}, [xp = x.get(), first, count](Node& self) {
    const Shape s = xp->value.shape();
    auto& g = xp->grad_buffer();
    for (int n = 0; n < s.n; ++n) {
      double* dst = g.channel(n, first);
      const double* src = self.grad.sample(n);
      for (std::size_t i = 0; i < std::size_t(count) * s.plane(); ++i) dst[i] += src[i];
    }
  });
}

/// Reinterprets the per-sample payload; the batch extent is kept.
inline Var reshape(const Var& x, Shape shape) {
  require(shape.size() == x.value().size() && shape.n == x.shape().n,
          "reshape: incompatible shape " + shape.str());
  Tensor out(shape, x.value().storage());
  return ad::record(std::move(out), {x}, [xp = x.get()](Node& self) {
    auto& g = xp->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

// ------------------------------------------------------------------ layers

/// 2-D convolution. weight: {out, in, k, k}; bias: {1, out, 1, 1}.
inline Var conv2d(const Var& x, const Var& weight, const Var& bias, int stride, int pad) {
  const Shape xs = x.shape();
  const Shape ws = weight.shape();
  require(ws.c == xs.c, "conv2d: input has " + std::to_string(xs.c) +
                            " channels, weight expects " + std::to_string(ws.c));
  require(ws.h == ws.w, "conv2d: square kernels only");
  require(bias.shape() == Shape{1, ws.n, 1, 1}, "conv2d: bias shape " + bias.shape().str());
  const int k = ws.h;
  const int ho = (xs.h + 2 * pad - k) / stride + 1;
  const int wo = (xs.w + 2 * pad - k) / stride + 1;
  require(ho > 0 && wo > 0, "conv2d: input " + xs.str() + " too small");
  const int rows = xs.c * k * k;
  const int cols = ho * wo;

  auto im2col = [=](const double* img, double* col) {
    for (int ci = 0; ci < xs.c; ++ci) {
      for (int ky = 0; ky < k; ++ky) {
        for (int kx = 0; kx < k; ++kx) {
          double* row = col + std::size_t((ci * k + ky) * k + kx) * cols;
          for (int oy = 0; oy < ho; ++oy) {
            const int iy = oy * stride - pad + ky;
            for (int ox = 0; ox < wo; ++ox) {
              const int ix = ox * stride - pad + kx;
              row[oy * wo + ox] = (iy >= 0 && iy < xs.h && ix >= 0 && ix < xs.w)
                                      ? img[(std::size_t(ci) * xs.h + iy) * xs.w + ix]
                                      : 0.0;
            }
          }
        }
      }
    }
  };

  Tensor out({xs.n, ws.n, ho, wo});
  std::vector<double> col(std::size_t(rows) * cols);
  detail::ConstMapMat wmat(weight.value().data().data(), ws.n, rows);
  for (int n = 0; n < xs.n; ++n) {
    im2col(x.value().sample(n), col.data());
    detail::MapMat o(out.sample(n), ws.n, cols);
    o.noalias() = wmat * detail::ConstMapMat(col.data(), rows, cols);
    for (int co = 0; co < ws.n; ++co) o.row(co).array() += bias.value()[co];
  }

  return ad::record(std::move(out), {x, weight, bias},
                    [xp = x.get(), wp = weight.get(), bp = bias.get(), im2col, xs, ws, k,
                     rows, cols, stride, pad, ho, wo](Node& self) {
    std::vector<double> col(std::size_t(rows) * cols);
    std::vector<double> dcol(std::size_t(rows) * cols);
    detail::ConstMapMat wmat(wp->value.data().data(), ws.n, rows);
    for (int n = 0; n < xs.n; ++n) {
      detail::ConstMapMat go(self.grad.sample(n), ws.n, cols);
      if (wp->requires_grad) {
        im2col(xp->value.sample(n), col.data());
        detail::MapMat gw(wp->grad_buffer().data().data(), ws.n, rows);
        gw.noalias() += go * detail::ConstMapMat(col.data(), rows, cols).transpose();
      }
      if (bp->requires_grad) {
        auto& gb = bp->grad_buffer();
        // Plain loop: Eigen's vectorised sum() depends on pointer alignment,
        // which would make results differ between otherwise identical runs.
        for (int co = 0; co < ws.n; ++co) {
          const double* g = self.grad.sample(n) + std::size_t(co) * cols;
          double acc = 0.0;
          for (int k = 0; k < cols; ++k) acc += g[k];
          gb[co] += acc;
        }
      }
      if (xp->requires_grad) {
        detail::MapMat dc(dcol.data(), rows, cols);
        dc.noalias() = wmat.transpose() * go;
        double* gx = xp->grad_buffer().sample(n);
        for (int ci = 0; ci < xs.c; ++ci) {
          for (int ky = 0; ky < k; ++ky) {
            for (int kx = 0; kx < k; ++kx) {
              const double* row = dcol.data() + std::size_t((ci * k + ky) * k + kx) * cols;
              for (int oy = 0; oy < ho; ++oy) {
                const int iy = oy * stride - pad + ky;
                if (iy < 0 || iy >= xs.h) continue;
                for (int ox = 0; ox < wo; ++ox) {
                  const int ix = ox * stride - pad + kx;
                  if (ix >= 0 && ix < xs.w) {
                    gx[(std::size_t(ci) * xs.h + iy) * xs.w + ix] += row[oy * wo + ox];
                  }
                }
              }
            }
          }
        }
      }
    }
  });
}

/// Batch normalisation over (N, H, W) per channel. In training mode the batch
/// statistics are used and the running estimates are updated in place.
inline Var batch_norm(const Var& x, const Var& gamma, const Var& beta, Tensor& running_mean,
                      Tensor& running_var, bool training, double momentum = 0.1,
                      double eps = 1e-5) {
  const Shape s = x.shape();
  require(gamma.shape() == Shape{1, s.c, 1, 1} && beta.shape() == gamma.shape(),
          "batch_norm: affine parameter shape mismatch");
  const double m = double(s.n) * s.plane();
  std::vector<double> mean(s.c), invstd(s.c);
  for (int c = 0; c < s.c; ++c) {
    if (training) {
      double sum = 0.0;
      for (int n = 0; n < s.n; ++n) {
        const double* p = x.value().channel(n, c);
        for (std::size_t i = 0; i < s.plane(); ++i) sum += p[i];
      }
      const double mu = sum / m;
      double sq = 0.0;
      for (int n = 0; n < s.n; ++n) {
        const double* p = x.value().channel(n, c);
        for (std::size_t i = 0; i < s.plane(); ++i) sq += (p[i] - mu) * (p[i] - mu);
      }
      const double var = sq / m;
      mean[c] = mu;
      invstd[c] = 1.0 / std::sqrt(var + eps);
      running_mean[c] = (1 - momentum) * running_mean[c] + momentum * mu;
      running_var[c] = (1 - momentum) * running_var[c] +
                       momentum * (m > 1 ? sq / (m - 1) : var);
    } else {
      mean[c] = running_mean[c];
      invstd[c] = 1.0 / std::sqrt(running_var[c] + eps);
    }
  }
  Tensor xhat(s), out(s);
  for (int n = 0; n < s.n; ++n) {
    for (int c = 0; c < s.c; ++c) {
      const double* p = x.value().channel(n, c);
      double* h = xhat.channel(n, c);
      double* o = out.channel(n, c);
      const double g = gamma.value()[c], b = beta.value()[c];
      for (std::size_t i = 0; i < s.plane(); ++i) {
        h[i] = (p[i] - mean[c]) * invstd[c];
        o[i] = g * h[i] + b;
      }
    }
  }
  return ad::record(std::move(out), {x, gamma, beta},
                    [xp = x.get(), gp = gamma.get(), bp = beta.get(), xhat = std::move(xhat),
                     invstd, training, m](Node& self) {
    const Shape s = xp->value.shape();
    for (int c = 0; c < s.c; ++c) {
      double sum_g = 0.0, sum_gh = 0.0;
      for (int n = 0; n < s.n; ++n) {
        const double* g = self.grad.channel(n, c);
        const double* h = xhat.channel(n, c);
        for (std::size_t i = 0; i < s.plane(); ++i) {
          sum_g += g[i];
          sum_gh += g[i] * h[i];
        }
      }
      if (gp->requires_grad) gp->grad_buffer()[c] += sum_gh;
      if (bp->requires_grad) bp->grad_buffer()[c] += sum_g;
      if (!xp->requires_grad) continue;
      const double gam = gp->value[c];
      for (int n = 0; n < s.n; ++n) {
        const double* g = self.grad.channel(n, c);
        const double* h = xhat.channel(n, c);
        double* gx = xp->grad_buffer().channel(n, c);
        for (std::size_t i = 0; i < s.plane(); ++i) {
          if (training) {
            gx[i] += gam * invstd[c] * (g[i] - sum_g / m - h[i] * sum_gh / m);
          } else {
            gx[i] += gam * invstd[c] * g[i];
          }
        }
      }
    }
  });
}

/// Inference-mode batch normalisation with fixed statistics.
inline Var batch_norm_eval(const Var& x, const Var& gamma, const Var& beta,
                           const Tensor& running_mean, const Tensor& running_var,
                           double eps = 1e-5) {
  Tensor mean = running_mean, var = running_var;
  return batch_norm(x, gamma, beta, mean, var, false, 0.0, eps);
}

/// Dense layer on the flattened per-sample payload. weight: {out, in, 1, 1}.
inline Var linear(const Var& x, const Var& weight, const Var& bias) {
  const Shape xs = x.shape();
  const Shape ws = weight.shape();
  const int in = static_cast<int>(xs.per_sample());
  require(ws.c == in && ws.h == 1 && ws.w == 1,
          "linear: weight " + ws.str() + " does not accept " + std::to_string(in) + " inputs");
  require(bias.shape() == Shape{1, ws.n, 1, 1}, "linear: bias shape " + bias.shape().str());
  Tensor out({xs.n, ws.n, 1, 1});
  detail::ConstMapMat xm(x.value().data().data(), xs.n, in);
  detail::ConstMapMat wm(weight.value().data().data(), ws.n, in);
  detail::MapMat om(out.data().data(), xs.n, ws.n);
  om.noalias() = xm * wm.transpose();
  for (int n = 0; n < xs.n; ++n) {
    for (int j = 0; j < ws.n; ++j) om(n, j) += bias.value()[j];
  }
  return ad::record(std::move(out), {x, weight, bias},
                    [xp = x.get(), wp = weight.get(), bp = bias.get(), in](Node& self) {
    const int n = xp->value.shape().n, o = wp->value.shape().n;
    detail::ConstMapMat go(self.grad.data().data(), n, o);
    if (xp->requires_grad) {
      detail::MapMat gx(xp->grad_buffer().data().data(), n, in);
      gx.noalias() += go * detail::ConstMapMat(wp->value.data().data(), o, in);
    }
    if (wp->requires_grad) {
      detail::MapMat gw(wp->grad_buffer().data().data(), o, in);
      gw.noalias() += go.transpose() * detail::ConstMapMat(xp->value.data().data(), n, in);
    }
    if (bp->requires_grad) {
      auto& gb = bp->grad_buffer();
      for (int j = 0; j < o; ++j) {
        double acc = 0.0;
        for (int r = 0; r < n; ++r) acc += go(r, j);
        gb[j] += acc;
      }
    }
  });
}

/// 2x2 max pooling with stride 2; odd trailing rows/cols are dropped.
inline Var max_pool2(const Var& x) {
  const Shape s = x.shape();
  require(s.h >= 2 && s.w >= 2, "max_pool2: input too small " + s.str());
  const Shape os{s.n, s.c, s.h / 2, s.w / 2};
  Tensor out(os);
  std::vector<std::size_t> arg(os.size());
  std::size_t o = 0;
  for (int n = 0; n < s.n; ++n) {
    for (int c = 0; c < s.c; ++c) {
      const double* p = x.value().channel(n, c);
      const std::size_t base = (std::size_t(n) * s.c + c) * s.plane();
      for (int y = 0; y < os.h; ++y) {
        for (int xx = 0; xx < os.w; ++xx, ++o) {
          std::size_t best = std::size_t(2 * y) * s.w + 2 * xx;
          for (int dy = 0; dy < 2; ++dy) {
            for (int dx = 0; dx < 2; ++dx) {
              const std::size_t i = std::size_t(2 * y + dy) * s.w + 2 * xx + dx;
              if (p[i] > p[best]) best = i;
            }
          }
          out[o] = p[best];
          arg[o] = base + best;
        }
      }
    }
  }
  return ad::record(std::move(out), {x}, [xp = x.get(), arg = std::move(arg)](Node& self) {
    auto& g = xp->grad_buffer();
    for (std::size_t i = 0; i < arg.size(); ++i) g[arg[i]] += self.grad[i];
  });
}

/// Bilinear upsampling by an integer factor (half-pixel centres, edge clamp).
inline Var upsample_bilinear(const Var& x, int factor) {
  const Shape s = x.shape();
  require(factor >= 1, "upsample_bilinear: factor must be positive");
  const Shape os{s.n, s.c, s.h * factor, s.w * factor};
  struct Axis {
    std::vector<int> i0, i1;
    std::vector<double> f;
  };
  auto axis = [factor](int in, int out) {
    Axis a;
    for (int o = 0; o < out; ++o) {
      double src = (o + 0.5) / factor - 0.5;
      src = std::clamp(src, 0.0, double(in - 1));
      const int lo = static_cast<int>(std::floor(src));
      a.i0.push_back(lo);
      a.i1.push_back(std::min(lo + 1, in - 1));
      a.f.push_back(src - lo);
    }
    return a;
  };
  Axis ay = axis(s.h, os.h), ax = axis(s.w, os.w);
  Tensor out(os);
  for (int n = 0; n < s.n; ++n) {
    for (int c = 0; c < s.c; ++c) {
      const double* p = x.value().channel(n, c);
      double* q = out.channel(n, c);
      for (int y = 0; y < os.h; ++y) {
        const double fy = ay.f[y];
        const double* r0 = p + std::size_t(ay.i0[y]) * s.w;
        const double* r1 = p + std::size_t(ay.i1[y]) * s.w;
        for (int xx = 0; xx < os.w; ++xx) {
          const double fx = ax.f[xx];
          const int x0 = ax.i0[xx], x1 = ax.i1[xx];
          q[y * os.w + xx] = (1 - fy) * ((1 - fx) * r0[x0] + fx * r0[x1]) +
                             fy * ((1 - fx) * r1[x0] + fx * r1[x1]);
        }
      }
    }
  }
  return ad::record(std::move(out), {x}, [xp = x.get(), ay, ax](Node& self) {
    const Shape s = xp->value.shape();
    const Shape os = self.value.shape();
    auto& g = xp->grad_buffer();
    for (int n = 0; n < s.n; ++n) {
      for (int c = 0; c < s.c; ++c) {
        double* p = g.channel(n, c);
        const double* q = self.grad.channel(n, c);
        for (int y = 0; y < os.h; ++y) {
          const double fy = ay.f[y];
          double* r0 = p + std::size_t(ay.i0[y]) * s.w;
          double* r1 = p + std::size_t(ay.i1[y]) * s.w;
          for (int xx = 0; xx < os.w; ++xx) {
            const double fx = ax.f[xx];
            const double v = q[y * os.w + xx];
            r0[ax.i0[xx]] += (1 - fy) * (1 - fx) * v;
            r0[ax.i1[xx]] += (1 - fy) * fx * v;
            r1[ax.i0[xx]] += fy * (1 - fx) * v;
            r1[ax.i1[xx]] += fy * fx * v;
          }
        }
      }
    }
  });
}

/// Backward warp: out(p) = img(p + field(p)) with bilinear sampling and
/// clamp-to-edge. field channel 0 is the row displacement, 1 the column.
inline Var warp(const Var& img, const Var& field) {
  const Shape s = img.shape();
  const Shape fs = field.shape();
  require(fs.n == s.n && fs.c == 2 && fs.h == s.h && fs.w == s.w,
          "warp: field " + fs.str() + " does not match image " + s.str());
  std::vector<sampling::BilinearTap> taps(std::size_t(s.n) * s.plane());
  Tensor out(s);
  for (int n = 0; n < s.n; ++n) {
    const double* dy = field.value().channel(n, 0);
    const double* dx = field.value().channel(n, 1);
    for (int y = 0; y < s.h; ++y) {
      for (int x = 0; x < s.w; ++x) {
        const std::size_t i = std::size_t(y) * s.w + x;
        auto& t = taps[std::size_t(n) * s.plane() + i];
        t = sampling::bilinear_tap(y + dy[i], x + dx[i], s.h, s.w);
        for (int c = 0; c < s.c; ++c) {
          out.channel(n, c)[i] = sampling::bilinear(img.value().channel(n, c), s.w, t);
        }
      }
    }
  }
  return ad::record(std::move(out), {img, field},
                    [ip = img.get(), fp = field.get(), taps = std::move(taps)](Node& self) {
    const Shape s = ip->value.shape();
    for (int n = 0; n < s.n; ++n) {
      for (std::size_t i = 0; i < s.plane(); ++i) {
        const auto& t = taps[std::size_t(n) * s.plane() + i];
        double gdy = 0.0, gdx = 0.0;
        for (int c = 0; c < s.c; ++c) {
          const double g = self.grad.channel(n, c)[i];
          if (g == 0.0) continue;
          const double* p = ip->value.channel(n, c);
          const double v00 = p[t.y0 * s.w + t.x0], v01 = p[t.y0 * s.w + t.x1];
          const double v10 = p[t.y1 * s.w + t.x0], v11 = p[t.y1 * s.w + t.x1];
          if (ip->requires_grad) {
            double* gi = ip->grad_buffer().channel(n, c);
            gi[t.y0 * s.w + t.x0] += g * (1 - t.fy) * (1 - t.fx);
            gi[t.y0 * s.w + t.x1] += g * (1 - t.fy) * t.fx;
            gi[t.y1 * s.w + t.x0] += g * t.fy * (1 - t.fx);
            gi[t.y1 * s.w + t.x1] += g * t.fy * t.fx;
          }
          if (t.y_inside) gdy += g * ((1 - t.fx) * (v10 - v00) + t.fx * (v11 - v01));
          if (t.x_inside) gdx += g * ((1 - t.fy) * (v01 - v00) + t.fy * (v11 - v10));
        }
        if (fp->requires_grad) {
          fp->grad_buffer().channel(n, 0)[i] += gdy;
          fp->grad_buffer().channel(n, 1)[i] += gdx;
        }
      }
    }
  });
}

/// Per-map min-max rescale to [0,1]; constant maps become zeros.
inline Var minmax_normalize(const Var& x) {
  const Shape s = x.shape();
  Tensor out(s);
  const std::size_t maps = std::size_t(s.n) * s.c;
  std::vector<std::size_t> amin(maps), amax(maps);
  std::vector<double> range(maps);
  for (std::size_t m = 0; m < maps; ++m) {
    const double* p = x.value().data().data() + m * s.plane();
    double* q = out.data().data() + m * s.plane();
    const auto [lo, hi] = std::minmax_element(p, p + s.plane());
    amin[m] = std::size_t(lo - p);
    amax[m] = std::size_t(hi - p);
    const double r = *hi - *lo;
    range[m] = r;
    if (r <= 1e-12) continue;
    for (std::size_t i = 0; i < s.plane(); ++i) q[i] = (p[i] - *lo) / r;
  }
  return ad::record(std::move(out), {x},
                    [xp = x.get(), amin = std::move(amin), amax = std::move(amax),
                     range = std::move(range)](Node& self) {
    const Shape s = xp->value.shape();
    auto& g = xp->grad_buffer();
    for (std::size_t m = 0; m < range.size(); ++m) {
      const double r = range[m];
      if (r <= 1e-12) continue;
      const double* up = self.grad.data().data() + m * s.plane();
      const double* y = self.value.data().data() + m * s.plane();
      double* gx = g.data().data() + m * s.plane();
      double to_min = 0.0, to_max = 0.0;
      for (std::size_t i = 0; i < s.plane(); ++i) {
        gx[i] += up[i] / r;
        to_min += up[i] * (y[i] - 1.0) / r;
        to_max -= up[i] * y[i] / r;
      }
      gx[amin[m]] += to_min;
      gx[amax[m]] += to_max;
    }
  });
}

// ------------------------------------------------------- per-sample measures
// Each returns {N,1,1,1}: one value per batch item.

inline Var mean_abs_diff(const Var& a, const Var& b) {
  detail::same_shape(a, b, "mean_abs_diff");
  const Shape s = a.shape();
  const std::size_t len = s.per_sample();
  Tensor out({s.n, 1, 1, 1});
  for (int n = 0; n < s.n; ++n) {
    double acc = 0.0;
    for (std::size_t i = 0; i < len; ++i) acc += std::abs(a.value().sample(n)[i] - b.value().sample(n)[i]);
    out[n] = acc / double(len);
  }
  return ad::record(std::move(out), {a, b}, [ap = a.get(), bp = b.get(), len](Node& self) {
    const int nn = ap->value.shape().n;
    for (int n = 0; n < nn; ++n) {
      const double up = self.grad[n] / double(len);
      for (std::size_t i = 0; i < len; ++i) {
        const double d = ap->value.sample(n)[i] - bp->value.sample(n)[i];
        const double sg = d > 0 ? 1.0 : (d < 0 ? -1.0 : 0.0);
        if (ap->requires_grad) ap->grad_buffer().sample(n)[i] += up * sg;
        if (bp->requires_grad) bp->grad_buffer().sample(n)[i] -= up * sg;
      }
    }
  });
}

inline Var mean_sq_diff(const Var& a, const Var& b) {
  detail::same_shape(a, b, "mean_sq_diff");
  const Shape s = a.shape();
  const std::size_t len = s.per_sample();
  Tensor out({s.n, 1, 1, 1});
  for (int n = 0; n < s.n; ++n) {
    double acc = 0.0;
    for (std::size_t i = 0; i < len; ++i) {
      const double d = a.value().sample(n)[i] - b.value().sample(n)[i];
      acc += d * d;
    }
    out[n] = acc / double(len);
  }
  return ad::record(std::move(out), {a, b}, [ap = a.get(), bp = b.get(), len](Node& self) {
    const int nn = ap->value.shape().n;
    for (int n = 0; n < nn; ++n) {
      const double up = 2.0 * self.grad[n] / double(len);
      for (std::size_t i = 0; i < len; ++i) {
        const double d = ap->value.sample(n)[i] - bp->value.sample(n)[i];
        if (ap->requires_grad) ap->grad_buffer().sample(n)[i] += up * d;
        if (bp->requires_grad) bp->grad_buffer().sample(n)[i] -= up * d;
      }
    }
  });
}

/// Mean squared component difference over (2 d_max)^2, clamped to [0,1].
inline Var mse_norm(const Var& f1, const Var& f2, double d_max) {
  require(d_max > 0, "mse_norm: d_max must be positive");
  const double denom = 4.0 * d_max * d_max;
  Var raw = scale(mean_sq_diff(f1, f2), 1.0 / denom);
  return detail::unary(raw, [](double v) { return std::clamp(v, 0.0, 1.0); },
                       [](double v, double) { return (v < 0.0 || v > 1.0) ? 0.0 : 1.0; });
}

/// (2 sum(pq) + eps) / (sum(p) + sum(q) + eps) per sample.
inline Var soft_dice(const Var& p, const Var& q, double eps = 1e-6) {
  detail::same_shape(p, q, "soft_dice");
  const Shape s = p.shape();
  const std::size_t len = s.per_sample();
  Tensor out({s.n, 1, 1, 1});
  std::vector<double> num(s.n), den(s.n);
  for (int n = 0; n < s.n; ++n) {
    double pq = 0, sp = 0, sq = 0;
    const double* a = p.value().sample(n);
    const double* b = q.value().sample(n);
    for (std::size_t i = 0; i < len; ++i) {
      pq += a[i] * b[i];
      sp += a[i];
      sq += b[i];
    }
    num[n] = 2 * pq + eps;
    den[n] = sp + sq + eps;
    out[n] = num[n] / den[n];
  }
  return ad::record(std::move(out), {p, q},
                    [pp = p.get(), qp = q.get(), num, den, len](Node& self) {
    for (std::size_t n = 0; n < num.size(); ++n) {
      const double up = self.grad[n];
      const double* a = pp->value.sample(int(n));
      const double* b = qp->value.sample(int(n));
      const double inv = 1.0 / den[n], r = num[n] / (den[n] * den[n]);
      for (std::size_t i = 0; i < len; ++i) {
        if (pp->requires_grad) pp->grad_buffer().sample(int(n))[i] += up * (2 * b[i] * inv - r);
        if (qp->requires_grad) qp->grad_buffer().sample(int(n))[i] += up * (2 * a[i] * inv - r);
      }
    }
  });
}

/// Mean windowed SSIM per sample (averaged over channels).
inline Var ssim(const Var& a, const Var& b, const kernels::SsimParams& params = {}) {
  detail::same_shape(a, b, "ssim");
  const Shape s = a.shape();
  require(s.h >= params.window && s.w >= params.window, "ssim: image smaller than window");
  Tensor out({s.n, 1, 1, 1});
  for (int n = 0; n < s.n; ++n) {
    double acc = 0.0;
    for (int c = 0; c < s.c; ++c) {
      acc += kernels::ssim(a.value().channel(n, c), b.value().channel(n, c), s.h, s.w, params);
    }
    out[n] = acc / s.c;
  }
  return ad::record(std::move(out), {a, b}, [ap = a.get(), bp = b.get(), params](Node& self) {
    const Shape s = ap->value.shape();
    for (int n = 0; n < s.n; ++n) {
      for (int c = 0; c < s.c; ++c) {
        kernels::ssim(ap->value.channel(n, c), bp->value.channel(n, c), s.h, s.w, params,
                      ap->requires_grad ? ap->grad_buffer().channel(n, c) : nullptr,
                      bp->requires_grad ? bp->grad_buffer().channel(n, c) : nullptr,
                      self.grad[n] / s.c);
      }
    }
  });
}

/// Parzen-window NMI rescaled to [0,1], per single-channel sample.
inline Var soft_nmi(const Var& a, const Var& b, int bins = 32, double bandwidth = -1.0) {
  detail::same_shape(a, b, "soft_nmi");
  require(a.shape().c == 1, "soft_nmi: single-channel inputs only");
  require(bins >= 2, "soft_nmi: need at least two bins");
  if (bandwidth <= 0) bandwidth = 1.0 / bins;
  const Shape s = a.shape();
  Tensor out({s.n, 1, 1, 1});
  for (int n = 0; n < s.n; ++n) {
    out[n] = kernels::nmi_soft(a.value().sample(n), b.value().sample(n), s.per_sample(), bins,
                               bandwidth);
  }
  return ad::record(std::move(out), {a, b},
                    [ap = a.get(), bp = b.get(), bins, bandwidth](Node& self) {
    const Shape s = ap->value.shape();
    for (int n = 0; n < s.n; ++n) {
      kernels::nmi_soft(ap->value.sample(n), bp->value.sample(n), s.per_sample(), bins,
                        bandwidth, ap->requires_grad ? ap->grad_buffer().sample(n) : nullptr,
                        bp->requires_grad ? bp->grad_buffer().sample(n) : nullptr,
                        self.grad[n]);
    }
  });
}

}  // namespace sarreg::ops

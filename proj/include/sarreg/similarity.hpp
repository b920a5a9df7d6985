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

// Shared numeric kernels for the similarity measures. The metrics module uses
// the value paths; the differentiable ops additionally request gradients.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <vector>

namespace sarreg::kernels {

struct SsimParams {
  int window = 8;
  int stride = 4;
  double k1 = 0.01;
  double k2 = 0.03;
  double range = 1.0;
};

/// Mean local SSIM over a strided grid of square windows, with population
/// statistics per window. When grad_a/grad_b are non-null the gradient of the
/// returned mean is accumulated into them, scaled by `upstream`.
inline double ssim(const double* a, const double* b, int h, int w, const SsimParams& p,
                   double* grad_a = nullptr, double* grad_b = nullptr,
                   double upstream = 1.0) {
  const double c1 = (p.k1 * p.range) * (p.k1 * p.range);
  const double c2 = (p.k2 * p.range) * (p.k2 * p.range);
  const double inv_n = 1.0 / double(p.window * p.window);
  int count = 0;
  for (int y0 = 0; y0 + p.window <= h; y0 += p.stride) {
    for (int x0 = 0; x0 + p.window <= w; x0 += p.stride) ++count;
  }
  if (count == 0) return 0.0;
  double total = 0.0;
  for (int y0 = 0; y0 + p.window <= h; y0 += p.stride) {
    for (int x0 = 0; x0 + p.window <= w; x0 += p.stride) {
      double sa = 0, sb = 0;
      for (int y = y0; y < y0 + p.window; ++y) {
        for (int x = x0; x < x0 + p.window; ++x) {
          sa += a[y * w + x];
          sb += b[y * w + x];
        }
      }
      const double ma = sa * inv_n, mb = sb * inv_n;
      double vaa = 0, vbb = 0, vab = 0;
      for (int y = y0; y < y0 + p.window; ++y) {
        for (int x = x0; x < x0 + p.window; ++x) {
          const double da = a[y * w + x] - ma, db = b[y * w + x] - mb;
          vaa += da * da;
          vbb += db * db;
          vab += da * db;
        }
      }
      vaa *= inv_n;
      vbb *= inv_n;
      vab *= inv_n;
      const double a1 = 2 * ma * mb + c1, a2 = 2 * vab + c2;
      const double b1 = ma * ma + mb * mb + c1, b2 = vaa + vbb + c2;
      const double s = (a1 * a2) / (b1 * b2);
      total += s;
      if (grad_a || grad_b) {
        const double g = upstream / count;
        // Partials of s with respect to the window statistics.
        const double ds_dma = 2 * mb * a2 / (b1 * b2) - s * 2 * ma / b1;
        const double ds_dmb = 2 * ma * a2 / (b1 * b2) - s * 2 * mb / b1;
        const double ds_dvab = 2 * a1 / (b1 * b2);
        const double ds_dvaa = -s / b2;
        const double ds_dvbb = -s / b2;
        for (int y = y0; y < y0 + p.window; ++y) {
          for (int x = x0; x < x0 + p.window; ++x) {
            const double da = a[y * w + x] - ma, db = b[y * w + x] - mb;
            if (grad_a) {
              grad_a[y * w + x] +=
                  g * inv_n * (ds_dma + ds_dvaa * 2 * da + ds_dvab * db);
            }
            if (grad_b) {
              grad_b[y * w + x] +=
                  g * inv_n * (ds_dmb + ds_dvbb * 2 * db + ds_dvab * da);
            }
          }
        }
      }
    }
  }
  return total / count;
}

inline double entropy(const std::vector<double>& p) {
  double h = 0.0;
  for (double v : p) {
    if (v > 0.0) h -= v * std::log(v);
  }
  return h;
}

/// Hard-binned (H(A)+H(B))/H(A,B), shifted from [1,2] to [0,1].
inline double nmi_hard(const double* a, const double* b, std::size_t n, int bins) {
  auto bin_of = [bins](double v) {
    int k = static_cast<int>(v * bins);
    return std::clamp(k, 0, bins - 1);
  };
  std::vector<double> joint(std::size_t(bins) * bins, 0.0);
  for (std::size_t i = 0; i < n; ++i) joint[bin_of(a[i]) * bins + bin_of(b[i])] += 1.0;
  std::vector<double> pa(bins, 0.0), pb(bins, 0.0);
  for (int i = 0; i < bins; ++i) {
    for (int j = 0; j < bins; ++j) {
      const double v = joint[i * bins + j] / double(n);
      joint[i * bins + j] = v;
      pa[i] += v;
      pb[j] += v;
    }
  }
  const double hab = entropy(joint);
  if (hab <= 1e-15) {
    // Both quantized images are constant.
    return bin_of(a[0]) == bin_of(b[0]) ? 1.0 : 0.0;
  }
  const double r = (entropy(pa) + entropy(pb)) / hab - 1.0;
  return std::clamp(r, 0.0, 1.0);
}

namespace detail {

struct NmiTap {
  int k;
  double w;
  double dw;  // dw / dvalue
};

/// Triangular Parzen weights of half-width `bw` around bin centres, with
/// out-of-range bins folded onto the edge bins and weights normalised to 1.
inline void nmi_taps(double v, int bins, double bw, std::vector<NmiTap>& out) {
  out.clear();
  const bool inside = v >= 0.0 && v <= 1.0;
  v = std::clamp(v, 0.0, 1.0);
  const int lo = static_cast<int>(std::floor((v - bw) * bins - 0.5));
  const int hi = static_cast<int>(std::ceil((v + bw) * bins - 0.5));
  double s = 0.0, ds = 0.0;
  for (int k = lo; k <= hi; ++k) {
    const double u = v - (k + 0.5) / bins;
    const double au = std::abs(u);
    if (au >= bw) continue;
    const double w = 1.0 - au / bw;
    const double dw = inside ? (u > 0 ? -1.0 : 1.0) / bw : 0.0;
    const int kk = std::clamp(k, 0, bins - 1);
    if (!out.empty() && out.back().k == kk) {
      out.back().w += w;
      out.back().dw += dw;
    } else {
      out.push_back({kk, w, dw});
    }
    s += w;
    ds += dw;
  }
  for (auto& t : out) {
    t.dw = (t.dw * s - t.w * ds) / (s * s);
    t.w /= s;
  }
}

/// Comonotone (north-west corner) coupling of two tap lists. Calls
/// f(ka, kb, mass, dmass/da, dmass/db) for every cell with positive mass.
/// Identical inputs put all mass on the diagonal.
template <typename F>
void nmi_couple(const std::vector<NmiTap>& ta, const std::vector<NmiTap>& tb, F&& f) {
  double ca0 = 0.0, dca0 = 0.0;
  for (const auto& x : ta) {
    const double ca1 = ca0 + x.w, dca1 = dca0 + x.dw;
    double cb0 = 0.0, dcb0 = 0.0;
    for (const auto& y : tb) {
      const double cb1 = cb0 + y.w, dcb1 = dcb0 + y.dw;
      const bool hi_a = ca1 <= cb1, lo_a = ca0 >= cb0;
      const double m = (hi_a ? ca1 : cb1) - (lo_a ? ca0 : cb0);
      if (m > 0.0) {
        f(x.k, y.k, m, (hi_a ? dca1 : 0.0) - (lo_a ? dca0 : 0.0),
          (hi_a ? 0.0 : dcb1) - (lo_a ? 0.0 : dcb0));
      }
      cb0 = cb1;
      dcb0 = dcb1;
    }
    ca0 = ca1;
    dca0 = dca1;
  }
}

}  // namespace detail

/// Parzen-window NMI. Marginals use a triangular kernel of half-width
/// `bandwidth` around bin centres (k + 0.5) / bins; each pixel's joint mass is
/// the comonotone coupling of its two kernel weight vectors, so a vs a scores
/// exactly 1. Gradients optional, as for ssim().
inline double nmi_soft(const double* a, const double* b, std::size_t n, int bins,
                       double bandwidth, double* grad_a = nullptr,
                       double* grad_b = nullptr, double upstream = 1.0) {
  const std::size_t nb = std::size_t(bins);
  std::vector<double> q(nb * nb, 0.0);
  std::vector<detail::NmiTap> ta, tb;
  for (std::size_t i = 0; i < n; ++i) {
    detail::nmi_taps(a[i], bins, bandwidth, ta);
    detail::nmi_taps(b[i], bins, bandwidth, tb);
    detail::nmi_couple(ta, tb, [&](int ka, int kb, double m, double, double) {
      q[ka * nb + kb] += m;
    });
  }
  double z = 0.0;
  for (double v : q) z += v;
  if (z <= 0.0) return 0.0;
  std::vector<double> p(nb * nb), pa(nb, 0.0), pb(nb, 0.0);
  for (std::size_t i = 0; i < nb; ++i) {
    for (std::size_t j = 0; j < nb; ++j) {
      const double v = q[i * nb + j] / z;
      p[i * nb + j] = v;
      pa[i] += v;
      pb[j] += v;
    }
  }
  const double ha = entropy(pa), hb = entropy(pb), hab = entropy(p);
  if (hab <= 1e-15) {
    bool same = true;
    for (std::size_t i = 0; i < n && same; ++i) same = (a[i] == b[i]);
    return same ? 1.0 : 0.0;
  }
  const double nmi = (ha + hb) / hab;
  if (grad_a || grad_b) {
    auto lg = [](double v) { return std::log(std::max(v, 1e-300)); };
    // dR/dP, then through the normalisation P = Q / Z.
    std::vector<double> g(nb * nb);
    double gp = 0.0;
    for (std::size_t i = 0; i < nb; ++i) {
      for (std::size_t j = 0; j < nb; ++j) {
        const double d_num = -(lg(pa[i]) + 1.0) - (lg(pb[j]) + 1.0);
        const double d_den = -(lg(p[i * nb + j]) + 1.0);
        const double v = d_num / hab - nmi / hab * d_den;
        g[i * nb + j] = v;
        gp += v * p[i * nb + j];
      }
    }
    for (auto& v : g) v = upstream * (v - gp) / z;
    for (std::size_t i = 0; i < n; ++i) {
      detail::nmi_taps(a[i], bins, bandwidth, ta);
      detail::nmi_taps(b[i], bins, bandwidth, tb);
      double da = 0.0, db = 0.0;
      detail::nmi_couple(ta, tb, [&](int ka, int kb, double, double dma, double dmb) {
        da += g[ka * nb + kb] * dma;
        db += g[ka * nb + kb] * dmb;
      });
      if (grad_a) grad_a[i] += da;
      if (grad_b) grad_b[i] += db;
    }
  }
  return nmi - 1.0;
}

}  // namespace sarreg::kernels

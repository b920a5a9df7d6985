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

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include "sarreg/imagecore.hpp"
#include "sarreg/similarity.hpp"

namespace sarreg::metrics {

/// (H(A)+H(B))/H(A,B) on a hard joint histogram, rescaled from [1,2] to [0,1].
inline double nmi(const Image& a, const Image& b, int bins = 64) {
  require(a.same_shape(b), "nmi: images differ in shape");
  require(bins > 0, "nmi: bins must be positive");
  return kernels::nmi_hard(a.data(), b.data(), a.size(), bins);
}

inline double ssim(const Image& a, const Image& b, const kernels::SsimParams& params = {}) {
  require(a.same_shape(b), "ssim: images differ in shape");
  require(a.height() >= params.window && a.width() >= params.window,
          "ssim: image smaller than window");
  return kernels::ssim(a.data(), b.data(), a.height(), a.width(), params);
}

/// 2|A∩B| / (|A|+|B|); two empty masks agree perfectly.
inline double dice(const SegMask& m1, const SegMask& m2) {
  require(m1.same_shape(m2), "dice: masks differ in shape");
  std::size_t inter = 0, total = 0;
  for (std::size_t i = 0; i < m1.size(); ++i) {
    inter += m1.pixels()[i] & m2.pixels()[i];
    total += m1.pixels()[i] + m2.pixels()[i];
  }
  return total == 0 ? 1.0 : 2.0 * double(inter) / double(total);
}

/// Mask pixels with at least one 4-neighbour outside the mask (the image
/// border counts as outside).
inline std::vector<std::pair<int, int>> boundary(const SegMask& m) {
  std::vector<std::pair<int, int>> pts;
  const int h = m.height(), w = m.width();
  auto off = [&](int y, int x) { return y < 0 || y >= h || x < 0 || x >= w || !m(y, x); };
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      if (m(y, x) && (off(y - 1, x) || off(y + 1, x) || off(y, x - 1) || off(y, x + 1))) {
        pts.emplace_back(y, x);
      }
    }
  }
  return pts;
}

namespace detail {

// One-dimensional lower envelope of parabolas (Felzenszwalb & Huttenlocher).
// Pixels without a seed carry kFar instead of infinity.
inline constexpr double kFar = 1e20;

inline void edt_1d(const double* f, int n, double* d, std::vector<int>& v, std::vector<double>& z) {
  const double inf = std::numeric_limits<double>::infinity();
  int k = 0;
  v[0] = 0;
  z[0] = -inf;
  z[1] = inf;
  auto meet = [&](int q, int p) {
    return ((f[q] + double(q) * q) - (f[p] + double(p) * p)) / (2.0 * q - 2.0 * p);
  };
  for (int q = 1; q < n; ++q) {
    double s = meet(q, v[k]);
    while (s <= z[k]) {
      --k;
      s = meet(q, v[k]);
    }
    ++k;
    v[k] = q;
    z[k] = s;
    z[k + 1] = inf;
  }
  k = 0;
  for (int q = 0; q < n; ++q) {
    while (z[k + 1] < q) ++k;
    const double dq = double(q) - v[k];
    d[q] = dq * dq + f[v[k]];
  }
}

/// Exact squared Euclidean distance to the nearest seed pixel.
inline std::vector<double> squared_distance_map(const std::vector<std::pair<int, int>>& seeds,
                                                int h, int w) {
  std::vector<double> g(std::size_t(h) * w, kFar);
  for (auto [y, x] : seeds) g[std::size_t(y) * w + x] = 0.0;
  const int n = std::max(h, w);
  std::vector<double> f(n), d(n);
  std::vector<int> v(n);
  std::vector<double> z(n + 1);
  for (int x = 0; x < w; ++x) {
    for (int y = 0; y < h; ++y) f[y] = g[std::size_t(y) * w + x];
    edt_1d(f.data(), h, d.data(), v, z);
    for (int y = 0; y < h; ++y) g[std::size_t(y) * w + x] = d[y];
  }
  for (int y = 0; y < h; ++y) {
    edt_1d(g.data() + std::size_t(y) * w, w, d.data(), v, z);
    std::copy(d.begin(), d.begin() + w, g.begin() + std::size_t(y) * w);
  }
  return g;
}

/// Distances from every boundary pixel of `from` to the boundary of `to`.
inline std::vector<double> boundary_distances(const SegMask& from, const SegMask& to) {
  const auto bf = boundary(from);
  const auto dt = squared_distance_map(boundary(to), to.height(), to.width());
  std::vector<double> out;
  out.reserve(bf.size());
  for (auto [y, x] : bf) out.push_back(std::sqrt(dt[std::size_t(y) * to.width() + x]));
  return out;
}

inline void require_pair(const SegMask& m1, const SegMask& m2, const char* what) {
  require(m1.same_shape(m2), std::string(what) + ": masks differ in shape");
  if (m1.empty_mask() || m2.empty_mask()) {
    throw DegenerateInput(std::string(what) + ": empty mask");
  }
}

}  // namespace detail

/// Linear interpolation between order statistics at rank q * (n - 1).
inline double percentile(std::vector<double> values, double q) {
  require(!values.empty(), "percentile of an empty set");
  std::sort(values.begin(), values.end());
  const double pos = q * double(values.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, values.size() - 1);
  const double frac = pos - double(lo);
  return values[lo] + frac * (values[hi] - values[lo]);
}

/// 95th percentile of the pooled symmetric boundary-to-boundary distances.
inline double hausdorff95(const SegMask& m1, const SegMask& m2, double spacing = 1.0) {
  detail::require_pair(m1, m2, "hausdorff95");
  auto d = detail::boundary_distances(m1, m2);
  const auto back = detail::boundary_distances(m2, m1);
  d.insert(d.end(), back.begin(), back.end());
  return spacing * percentile(std::move(d), 0.95);
}

/// Symmetric mean boundary distance.
inline double mad(const SegMask& m1, const SegMask& m2, double spacing = 1.0) {
  detail::require_pair(m1, m2, "mad");
  auto mean = [](const std::vector<double>& v) {
    double s = 0.0;
    for (double x : v) s += x;
    return s / double(v.size());
  };
  return spacing * 0.5 *
         (mean(detail::boundary_distances(m1, m2)) + mean(detail::boundary_distances(m2, m1)));
}

/// Mean squared component difference over (2 d_max)^2, clamped to [0,1].
inline double mse_norm(const DisplacementField& f1, const DisplacementField& f2,
                       double d_max = 20.0) {
  require(f1.height() == f2.height() && f1.width() == f2.width(),
          "mse_norm: fields differ in shape");
  require(d_max > 0, "mse_norm: d_max must be positive");
  double acc = 0.0;
  for (std::size_t i = 0; i < f1.size(); ++i) {
    const double a = f1.dy_plane()[i] - f2.dy_plane()[i];
    const double b = f1.dx_plane()[i] - f2.dx_plane()[i];
    acc += a * a + b * b;
  }
  const double mse = acc / (2.0 * double(f1.size()));
  return std::clamp(mse / (4.0 * d_max * d_max), 0.0, 1.0);
}

struct MetricReport {
  std::string case_id;
  double dice = 0.0;
  double hd95 = 0.0;
  double mad = 0.0;
  double nmi = 0.0;
  double ssim = 0.0;
  double runtime_s = 0.0;

  static std::string csv_header() { return "case_id,dice,hd95,mad,nmi,ssim,runtime_s"; }

  std::string csv_row() const {
    std::ostringstream os;
    os << std::setprecision(17) << case_id << ',' << dice << ',' << hd95 << ',' << mad << ','
       << nmi << ',' << ssim << ',' << runtime_s;
    return os.str();
  }

  static MetricReport parse_csv_row(const std::string& line) {
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    require(cells.size() == 7, "metric row must have 7 columns: " + line);
    MetricReport r;
    r.case_id = cells[0];
    r.dice = std::stod(cells[1]);
    r.hd95 = std::stod(cells[2]);
    r.mad = std::stod(cells[3]);
    r.nmi = std::stod(cells[4]);
    r.ssim = std::stod(cells[5]);
    r.runtime_s = std::stod(cells[6]);
    return r;
  }
};

/// Overlap and contour metrics of a registered mask plus intensity similarity
/// of the registered image. `spacing` converts pixels to millimetres.
inline MetricReport evaluate(const std::string& case_id, const Image& ref, const Image& trans,
                             const SegMask& ref_seg, const SegMask& trans_seg,
                             double runtime_s = 0.0, double spacing = 1.0) {
  MetricReport r;
  r.case_id = case_id;
  r.dice = dice(ref_seg, trans_seg);
  if (!ref_seg.empty_mask() && !trans_seg.empty_mask()) {
    r.hd95 = hausdorff95(ref_seg, trans_seg, spacing);
    r.mad = mad(ref_seg, trans_seg, spacing);
  } else {
    r.hd95 = r.mad = std::numeric_limits<double>::quiet_NaN();
  }
  r.nmi = nmi(ref, trans);
  r.ssim = ssim(ref, trans);
  r.runtime_s = runtime_s;
  return r;
}

}  // namespace sarreg::metrics

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

// Shared helpers for the unit tests and the acceptance binary: random
// inputs, deliberately naive reference implementations, and a
// finite-difference gradient checker for the field head.
#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "sarreg/sarreg.hpp"

namespace sarreg::testing {

// ------------------------------------------------------------ random inputs

inline Image random_image(int h, int w, Rng& rng) {
  std::vector<double> px(std::size_t(h) * w);
  for (auto& v : px) v = uniform01(rng);
  return Image(h, w, std::move(px));
}

/// Sum of a few random Gaussian bumps, rescaled into [0.05, 0.95].
inline Image smooth_image(int h, int w, Rng& rng, int bumps = 4) {
  std::vector<double> px(std::size_t(h) * w, 0.0);
  for (int k = 0; k < bumps; ++k) {
    const double cy = uniform(rng, 0, h), cx = uniform(rng, 0, w);
    const double s = uniform(rng, 0.12, 0.3) * std::min(h, w);
    const double a = uniform(rng, 0.3, 1.0);
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        const double d2 = (y - cy) * (y - cy) + (x - cx) * (x - cx);
        px[std::size_t(y) * w + x] += a * std::exp(-d2 / (2 * s * s));
      }
    }
  }
  const auto [lo, hi] = std::minmax_element(px.begin(), px.end());
  const double a = *lo, r = std::max(*hi - *lo, 1e-12);
  for (auto& v : px) v = 0.05 + 0.9 * (v - a) / r;
  return Image(h, w, std::move(px));
}

inline DisplacementField random_field(int h, int w, double bound, Rng& rng) {
  DisplacementField f(h, w);
  for (auto& v : f.dy_plane()) v = uniform(rng, -bound, bound);
  for (auto& v : f.dx_plane()) v = uniform(rng, -bound, bound);
  return f;
}

inline DisplacementField constant_field(int h, int w, double dy, double dx) {
  DisplacementField f(h, w);
  std::fill(f.dy_plane().begin(), f.dy_plane().end(), dy);
  std::fill(f.dx_plane().begin(), f.dx_plane().end(), dx);
  return f;
}

inline SegMask rect_mask(int h, int w, int y0, int x0, int y1, int x1) {
  SegMask m(h, w);
  for (int y = std::max(0, y0); y < std::min(h, y1); ++y) {
    for (int x = std::max(0, x0); x < std::min(w, x1); ++x) m.set(y, x, true);
  }
  return m;
}

inline SegMask disk_mask(int h, int w, double cy, double cx, double r) {
  SegMask m(h, w);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) m.set(y, x, (y - cy) * (y - cy) + (x - cx) * (x - cx) <= r * r);
  }
  return m;
}

/// Union of 1-3 random rectangles; never empty.
inline SegMask random_mask(int h, int w, Rng& rng) {
  SegMask m(h, w);
  const int n = 1 + int(uniform_index(rng, 3));
  for (int k = 0; k < n; ++k) {
    const int y0 = int(uniform_index(rng, h - 1)), x0 = int(uniform_index(rng, w - 1));
    const int y1 = y0 + 1 + int(uniform_index(rng, h - y0)), x1 = x0 + 1 + int(uniform_index(rng, w - x0));
    for (int y = y0; y < std::min(y1, h); ++y) {
      for (int x = x0; x < std::min(x1, w); ++x) m.set(y, x, true);
    }
  }
  return m;
}

// ------------------------------------------------------------------ oracles

/// Bilinear resampling written as a tent-kernel sum over every pixel.
inline double tent_sample(const Image& img, double y, double x) {
  y = std::clamp(y, 0.0, double(img.height() - 1));
  x = std::clamp(x, 0.0, double(img.width() - 1));
  double acc = 0.0;
  for (int i = 0; i < img.height(); ++i) {
    const double wy = std::max(0.0, 1.0 - std::abs(y - i));
    if (wy == 0.0) continue;
    for (int j = 0; j < img.width(); ++j) {
      acc += wy * std::max(0.0, 1.0 - std::abs(x - j)) * img(i, j);
    }
  }
  return acc;
}

inline Image warp_oracle(const Image& img, const DisplacementField& f) {
  std::vector<double> out(img.size());
  for (int y = 0; y < img.height(); ++y) {
    for (int x = 0; x < img.width(); ++x) {
      out[std::size_t(y) * img.width() + x] = tent_sample(img, y + f.dy(y, x), x + f.dx(y, x));
    }
  }
  return Image::clamped(img.height(), img.width(), std::move(out));
}

/// Centred cubic B-spline.
inline double beta3(double t) {
  const double a = std::abs(t);
  if (a < 1) return 2.0 / 3.0 - a * a + a * a * a / 2.0;
  if (a < 2) return (2 - a) * (2 - a) * (2 - a) / 6.0;
  return 0.0;
}

/// Otsu by direct evaluation of w0 w1 (mu0 - mu1)^2 for every split of a
/// 256-bin histogram; returns the lowest maximising level or -1.
inline int otsu_level_oracle(const std::vector<double>& map) {
  std::vector<long double> hist(256, 0.0L);
  for (double v : map) hist[std::min(255, std::max(0, int(std::floor(v * 256))))] += 1;
  const long double n = map.size();
  long double best = -1;
  int level = -1;
  for (int k = 0; k < 255; ++k) {
    long double n0 = 0, s0 = 0, n1 = 0, s1 = 0;
    for (int i = 0; i <= k; ++i) { n0 += hist[i]; s0 += hist[i] * i; }
    for (int i = k + 1; i < 256; ++i) { n1 += hist[i]; s1 += hist[i] * i; }
    if (n0 == 0 || n1 == 0) continue;
    const long double d = s0 / n0 - s1 / n1;
    const long double var = (n0 / n) * (n1 / n) * d * d;
    if (var > best * (1 + 1e-15L)) {
      best = var;
      level = k;
    }
  }
  return best > 0 ? level : -1;
}

inline SegMask otsu_mask_oracle(const std::vector<double>& map, int h, int w) {
  const int level = otsu_level_oracle(map);
  SegMask m(h, w);
  if (level < 0) return m;
  for (int i = 0; i < h * w; ++i) {
    if (std::floor(map[i] * 256) > level) m.set(i / w, i % w, true);
  }
  return m;
}

inline double dice_oracle(const SegMask& a, const SegMask& b) {
  long inter = 0, na = 0, nb = 0;
  for (int y = 0; y < a.height(); ++y) {
    for (int x = 0; x < a.width(); ++x) {
      na += a(y, x);
      nb += b(y, x);
      inter += a(y, x) && b(y, x);
    }
  }
  return na + nb == 0 ? 1.0 : 2.0 * inter / double(na + nb);
}

inline std::vector<std::pair<int, int>> boundary_oracle(const SegMask& m) {
  std::vector<std::pair<int, int>> out;
  auto in = [&](int y, int x) {
    return y >= 0 && x >= 0 && y < m.height() && x < m.width() && m(y, x) == 1;
  };
  for (int y = 0; y < m.height(); ++y) {
    for (int x = 0; x < m.width(); ++x) {
      if (in(y, x) && !(in(y - 1, x) && in(y + 1, x) && in(y, x - 1) && in(y, x + 1))) {
        out.emplace_back(y, x);
      }
    }
  }
  return out;
}

/// All-pairs nearest distances from each boundary pixel of `a` to `b`'s.
inline std::vector<double> nearest_oracle(const SegMask& a, const SegMask& b) {
  const auto ba = boundary_oracle(a), bb = boundary_oracle(b);
  std::vector<double> out;
  for (auto [y, x] : ba) {
    double best = 1e300;
    for (auto [v, u] : bb) best = std::min(best, std::hypot(double(y - v), double(x - u)));
    out.push_back(best);
  }
  return out;
}

inline double hd95_oracle(const SegMask& a, const SegMask& b) {
  auto d = nearest_oracle(a, b);
  const auto e = nearest_oracle(b, a);
  d.insert(d.end(), e.begin(), e.end());
  std::sort(d.begin(), d.end());
  const double pos = 0.95 * double(d.size() - 1);
  const std::size_t lo = std::size_t(pos);
  const std::size_t hi = std::min(lo + 1, d.size() - 1);
  return d[lo] + (pos - double(lo)) * (d[hi] - d[lo]);
}

inline double mad_oracle(const SegMask& a, const SegMask& b) {
  auto mean = [](const std::vector<double>& v) {
    double s = 0;
    for (double x : v) s += x;
    return s / double(v.size());
  };
  return 0.5 * (mean(nearest_oracle(a, b)) + mean(nearest_oracle(b, a)));
}

inline double mse_norm_oracle(const DisplacementField& a, const DisplacementField& b, double d_max) {
  double acc = 0;
  int n = 0;
  for (int y = 0; y < a.height(); ++y) {
    for (int x = 0; x < a.width(); ++x) {
      acc += std::pow(a.dy(y, x) - b.dy(y, x), 2) + std::pow(a.dx(y, x) - b.dx(y, x), 2);
      n += 2;
    }
  }
  return std::min(1.0, acc / n / std::pow(2 * d_max, 2));
}

// ----------------------------------------------------------- tiny models

/// Smallest model that runs on 8x8 inputs with every component present.
inline ModelConfig tiny_model_config(int size = 8) {
  ModelConfig c;
  c.generator = {1, 8, 3, 20.0};
  c.discriminator = {4, 4, 8, 8, 0.2};
  c.height = c.width = size;
  return c;
}

/// Extractor with one pooling stage so 8x8 inputs are valid.
inline ExtractorConfig tiny_extractor_config() {
  ExtractorConfig e;
  e.blocks = {{4, 1}, {4, 2}};
  e.untapped = {};
  e.seed = 3;
  return e;
}

/// Fills the head layers of G and F with small random values so the
/// registration is no longer the identity.
inline void randomize_heads(SarModel& m, std::uint64_t seed, double scale = 0.05) {
  Rng rng(seed);
  for (const char* p : {"G", "F"}) {
    for (const char* s : {".head.conv.weight", ".head.conv.bias"}) {
      for (auto& v : m.params.at(std::string(p) + s).mutable_value().storage()) {
        v = normal(rng, 0.0, scale);
      }
    }
  }
}

inline Tensor image_tensor(const std::vector<Image>& imgs) {
  std::vector<const Image*> p;
  for (const auto& i : imgs) p.push_back(&i);
  return to_tensor(p);
}

inline Tensor mask_tensor(const std::vector<SegMask>& masks) {
  std::vector<const SegMask*> p;
  for (const auto& i : masks) p.push_back(&i);
  return to_tensor(p);
}

struct GradCheck {
  double rel_error = 0;      // ||g_ad - g_fd|| / max(||g_ad||, ||g_fd||)
  double max_abs_diff = 0;
  double grad_norm = 0;      // ||g_fd||
  std::size_t checked = 0;
};

/// Central finite differences of `loss` against reverse-mode gradients, over
/// every entry of the named parameters.
inline GradCheck check_gradient(ParamStore& params, const std::vector<std::string>& names,
                                const std::function<ad::Var()>& loss, double h = 1e-5) {
  params.zero_grad();
  ad::backward(loss());
  std::vector<double> g_ad, g_fd;
  for (const auto& name : names) {
    const Tensor& g = params.at(name).var.grad();
    const std::size_t n = params.at(name).value().size();
    for (std::size_t i = 0; i < n; ++i) g_ad.push_back(g.empty() ? 0.0 : g[i]);
  }
  params.zero_grad();
  for (const auto& name : names) {
    Tensor& w = params.at(name).mutable_value();
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double keep = w[i];
      w[i] = keep + h;
      const double up = loss().item();
      w[i] = keep - h;
      const double down = loss().item();
      w[i] = keep;
      g_fd.push_back((up - down) / (2 * h));
    }
  }
  GradCheck r;
  double diff = 0, na = 0, nf = 0;
  for (std::size_t i = 0; i < g_ad.size(); ++i) {
    diff += (g_ad[i] - g_fd[i]) * (g_ad[i] - g_fd[i]);
    na += g_ad[i] * g_ad[i];
    nf += g_fd[i] * g_fd[i];
    r.max_abs_diff = std::max(r.max_abs_diff, std::abs(g_ad[i] - g_fd[i]));
  }
  r.grad_norm = std::sqrt(nf);
  r.rel_error = std::sqrt(diff) / std::max({std::sqrt(na), std::sqrt(nf), 1e-300});
  r.checked = g_ad.size();
  return r;
}

inline const std::vector<std::string>& head_params() {
  static const std::vector<std::string> names{"G.head.conv.weight", "G.head.conv.bias"};
  return names;
}

}  // namespace sarreg::testing

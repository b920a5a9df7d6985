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
#include <array>
#include <cstdint>
#include <vector>

#include "sarreg/imagecore.hpp"
#include "sarreg/ops.hpp"

namespace sarreg {

inline constexpr int kOtsuBins = 256;

struct OtsuResult {
  int level = -1;          // last histogram bin assigned to the background
  double threshold = 1.0;  // (level + 1) / 256; foreground is value >= threshold
  SegMask mask;
};

inline int otsu_bin(double v) {
  return std::clamp(static_cast<int>(v * kOtsuBins), 0, kOtsuBins - 1);
}

/// Otsu's threshold on a 256-bin histogram of values in [0,1]. Foreground is
/// every pixel whose bin exceeds the chosen level; ties resolve to the lowest
/// maximising level. A map occupying a single bin yields an empty mask.
inline OtsuResult otsu_threshold(const std::vector<double>& map, int height, int width) {
  require(map.size() == std::size_t(height) * width, "otsu: map size does not match shape");
  std::array<std::uint64_t, kOtsuBins> hist{};
  for (double v : map) {
    require(std::isfinite(v), "otsu: non-finite value");
    ++hist[otsu_bin(v)];
  }
  // Between-class variance is proportional to (s0*n1 - s1*n0)^2 / (n0*n1);
  // candidates are compared exactly as fractions in 128-bit integers.
  std::uint64_t n_total = 0, s_total = 0;
  for (int k = 0; k < kOtsuBins; ++k) {
    n_total += hist[k];
    s_total += hist[k] * std::uint64_t(k);
  }
  using u128 = unsigned __int128;
  int best = -1;
  u128 best_num = 0, best_den = 1;
  std::uint64_t n0 = 0, s0 = 0;
  for (int k = 0; k < kOtsuBins - 1; ++k) {
    n0 += hist[k];
    s0 += hist[k] * std::uint64_t(k);
    const std::uint64_t n1 = n_total - n0, s1 = s_total - s0;
    if (n0 == 0 || n1 == 0) continue;
    const __int128 diff = __int128(s0) * n1 - __int128(s1) * n0;
    const u128 num = u128(diff < 0 ? -diff : diff) * u128(diff < 0 ? -diff : diff);
    const u128 den = u128(n0) * n1;
    if (best < 0 || num * best_den > best_num * den) {
      best = k;
      best_num = num;
      best_den = den;
    }
  }
  OtsuResult r;
  r.mask = SegMask(height, width);
  if (best < 0 || best_num == 0) return r;
  r.level = best;
  r.threshold = double(best + 1) / kOtsuBins;
  for (int y = 0; y < height; ++y) {
    for (int x = 0; x < width; ++x) {
      r.mask.set(y, x, otsu_bin(map[std::size_t(y) * width + x]) > best);
    }
  }
  return r;
}

inline std::vector<double> minmax_normalized(std::vector<double> v) {
  if (v.empty()) return v;
  const auto [lo, hi] = std::minmax_element(v.begin(), v.end());
  const double a = *lo, r = *hi - *lo;
  if (r <= 1e-12) {
    std::fill(v.begin(), v.end(), 0.0);
    return v;
  }
  for (auto& x : v) x = (x - a) / r;
  return v;
}

struct FusedSegmentation {
  std::vector<double> fused;  // normalised fused map, height * width
  SegMask mask;
};

/// Channel-mean of each map, normalised, upsampled to (height, width),
/// weighted-summed, renormalised and Otsu-thresholded. `sample` picks the
/// batch item.
inline FusedSegmentation fused_segmentation(const std::vector<Tensor>& maps,
                                            const std::vector<double>& weights, int height,
                                            int width, int sample = 0) {
  require(!maps.empty(), "fused_segmentation: need at least one map");
  require(weights.size() == maps.size(), "fused_segmentation: one weight per map required");
  std::vector<double> fused(std::size_t(height) * width, 0.0);
  for (std::size_t l = 0; l < maps.size(); ++l) {
    const Shape s = maps[l].shape();
    require(std::isfinite(weights[l]), "fused_segmentation: non-finite weight");
    require(height % s.h == 0 && width % s.w == 0 && height / s.h == width / s.w,
            "fused_segmentation: map resolution does not divide the output");
    std::vector<double> mean(s.plane(), 0.0);
    for (int c = 0; c < s.c; ++c) {
      const double* p = maps[l].channel(sample, c);
      for (std::size_t i = 0; i < s.plane(); ++i) mean[i] += p[i] / s.c;
    }
    Tensor t({1, 1, s.h, s.w}, minmax_normalized(std::move(mean)));
    const Tensor up = ops::upsample_bilinear(ad::constant(std::move(t)), height / s.h).value();
    for (std::size_t i = 0; i < fused.size(); ++i) fused[i] += weights[l] * up[i];
  }
  FusedSegmentation out;
  out.fused = minmax_normalized(std::move(fused));
  out.mask = otsu_threshold(out.fused, height, width).mask;
  return out;
}

}  // namespace sarreg

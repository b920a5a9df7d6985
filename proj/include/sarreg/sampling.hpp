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

namespace sarreg::sampling {

/// Bilinear lookup at fractional (y, x) with clamp-to-edge. Integer positions
/// reproduce the stored sample exactly.
struct BilinearTap {
  int y0 = 0, x0 = 0, y1 = 0, x1 = 0;
  double fy = 0.0, fx = 0.0;
  bool y_inside = true;  // false when the coordinate was clamped
  bool x_inside = true;
};

inline BilinearTap bilinear_tap(double y, double x, int h, int w) {
  BilinearTap t;
  const double cy = std::clamp(y, 0.0, double(h - 1));
  const double cx = std::clamp(x, 0.0, double(w - 1));
  t.y_inside = (cy == y);
  t.x_inside = (cx == x);
  t.y0 = static_cast<int>(std::floor(cy));
  t.x0 = static_cast<int>(std::floor(cx));
  if (t.y0 > h - 2) t.y0 = std::max(h - 2, 0);
  if (t.x0 > w - 2) t.x0 = std::max(w - 2, 0);
  t.y1 = std::min(t.y0 + 1, h - 1);
  t.x1 = std::min(t.x0 + 1, w - 1);
  t.fy = cy - t.y0;
  t.fx = cx - t.x0;
  return t;
}

inline double bilinear(const double* plane, int w, const BilinearTap& t) {
  const double v00 = plane[t.y0 * w + t.x0];
  const double v01 = plane[t.y0 * w + t.x1];
  const double v10 = plane[t.y1 * w + t.x0];
  const double v11 = plane[t.y1 * w + t.x1];
  return (1.0 - t.fy) * (1.0 - t.fx) * v00 + (1.0 - t.fy) * t.fx * v01 +
         t.fy * (1.0 - t.fx) * v10 + t.fy * t.fx * v11;
}

inline int nearest_index(double v, int n) {
  const double r = std::floor(v + 0.5);
  if (!(r > 0.0)) return 0;
  if (r > double(n - 1)) return n - 1;
  return static_cast<int>(r);
}

}  // namespace sarreg::sampling

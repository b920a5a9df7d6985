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

#include <array>
#include <cmath>
#include <cstdint>
#include <utility>
#include <vector>

#include "sarreg/error.hpp"
#include "sarreg/rng.hpp"
#include "sarreg/sampling.hpp"
#include "sarreg/tensor.hpp"

namespace sarreg {

inline constexpr int kMinImageSide = 8;

/// Single-channel intensity image with values in [0,1].
class Image {
 public:
  Image() = default;
  Image(int height, int width, double fill = 0.0)
      : Image(height, width, std::vector<double>(std::size_t(height) * width, fill)) {}
  Image(int height, int width, std::vector<double> pixels)
      : h_(height), w_(width), px_(std::move(pixels)) {
    require(h_ >= kMinImageSide && w_ >= kMinImageSide,
            "image must be at least 8x8, got " + std::to_string(h_) + "x" + std::to_string(w_));
    require(px_.size() == std::size_t(h_) * w_, "image pixel count does not match shape");
    for (double v : px_) {
      require(std::isfinite(v) && v >= 0.0 && v <= 1.0, "image intensities must lie in [0,1]");
    }
  }

  /// Builds an image from arbitrary finite values, clamping them to [0,1].
  static Image clamped(int height, int width, std::vector<double> values) {
    for (auto& v : values) {
      require(std::isfinite(v), "image values must be finite");
      v = std::clamp(v, 0.0, 1.0);
    }
    return Image(height, width, std::move(values));
  }

  int height() const { return h_; }
  int width() const { return w_; }
  std::size_t size() const { return px_.size(); }
  double operator()(int y, int x) const { return px_[std::size_t(y) * w_ + x]; }
  const std::vector<double>& pixels() const { return px_; }
  const double* data() const { return px_.data(); }
  bool same_shape(const Image& o) const { return h_ == o.h_ && w_ == o.w_; }

  friend bool operator==(const Image&, const Image&) = default;

 private:
  int h_ = 0;
  int w_ = 0;
  std::vector<double> px_;
};

/// Binary mask; values are 0 or 1.
class SegMask {
 public:
  SegMask() = default;
  SegMask(int height, int width, std::uint8_t fill = 0)
      : h_(height), w_(width), px_(std::size_t(height) * width, fill ? 1 : 0) {
    require(height > 0 && width > 0, "mask must have positive extent");
  }
  SegMask(int height, int width, std::vector<std::uint8_t> values) : h_(height), w_(width) {
    require(height > 0 && width > 0, "mask must have positive extent");
    require(values.size() == std::size_t(height) * width, "mask size does not match shape");
    for (auto v : values) require(v <= 1, "mask values must be 0 or 1");
    px_ = std::move(values);
  }

  int height() const { return h_; }
  int width() const { return w_; }
  std::size_t size() const { return px_.size(); }
  std::uint8_t operator()(int y, int x) const { return px_[std::size_t(y) * w_ + x]; }
  void set(int y, int x, bool on) { px_[std::size_t(y) * w_ + x] = on ? 1 : 0; }
  const std::vector<std::uint8_t>& pixels() const { return px_; }
  std::size_t count() const {
    std::size_t c = 0;
    for (auto v : px_) c += v;
    return c;
  }
  bool empty_mask() const { return count() == 0; }
  bool same_shape(const SegMask& o) const { return h_ == o.h_ && w_ == o.w_; }
  bool same_shape(const Image& o) const { return h_ == o.height() && w_ == o.width(); }

  friend bool operator==(const SegMask&, const SegMask&) = default;

 private:
  int h_ = 0;
  int w_ = 0;
  std::vector<std::uint8_t> px_;
};

/// Per-pixel (drow, dcol) displacement in pixels, stored as two planes.
class DisplacementField {
 public:
  DisplacementField() = default;
  DisplacementField(int height, int width)
      : h_(height), w_(width), dy_(std::size_t(height) * width, 0.0),
        dx_(std::size_t(height) * width, 0.0) {
    require(height > 0 && width > 0, "field must have positive extent");
  }
  DisplacementField(int height, int width, std::vector<double> dy, std::vector<double> dx)
      : h_(height), w_(width), dy_(std::move(dy)), dx_(std::move(dx)) {
    require(dy_.size() == std::size_t(h_) * w_ && dx_.size() == dy_.size(),
            "field planes do not match shape");
    for (std::size_t i = 0; i < dy_.size(); ++i) {
      require(std::isfinite(dy_[i]) && std::isfinite(dx_[i]), "field values must be finite");
    }
  }

  int height() const { return h_; }
  int width() const { return w_; }
  std::size_t size() const { return dy_.size(); }
  double dy(int y, int x) const { return dy_[std::size_t(y) * w_ + x]; }
  double dx(int y, int x) const { return dx_[std::size_t(y) * w_ + x]; }
  std::vector<double>& dy_plane() { return dy_; }
  std::vector<double>& dx_plane() { return dx_; }
  const std::vector<double>& dy_plane() const { return dy_; }
  const std::vector<double>& dx_plane() const { return dx_; }

  double max_abs() const {
    double m = 0.0;
    for (std::size_t i = 0; i < dy_.size(); ++i) {
      m = std::max({m, std::abs(dy_[i]), std::abs(dx_[i])});
    }
    return m;
  }

  DisplacementField negated() const {
    DisplacementField f = *this;
    for (auto& v : f.dy_) v = -v;
    for (auto& v : f.dx_) v = -v;
    return f;
  }

  friend bool operator==(const DisplacementField&, const DisplacementField&) = default;

 private:
  int h_ = 0;
  int w_ = 0;
  std::vector<double> dy_;
  std::vector<double> dx_;
};

// ---------------------------------------------------------------- warping

enum class Interp { bilinear, nearest };

namespace detail {

template <class Sample>
void warp_plane(int h, int w, const DisplacementField& field, Interp mode, Sample&& emit) {
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const std::size_t i = std::size_t(y) * w + x;
      const double sy = y + field.dy_plane()[i];
      const double sx = x + field.dx_plane()[i];
      emit(i, sy, sx, mode);
    }
  }
}

}  // namespace detail

/// Backward warp: out(p) = image(p + field(p)), clamp-to-edge.
inline Image warp(const Image& image, const DisplacementField& field,
                  Interp mode = Interp::bilinear) {
  require(field.height() == image.height() && field.width() == image.width(),
          "warp: field shape does not match image shape");
  const int h = image.height(), w = image.width();
  std::vector<double> out(image.size());
  detail::warp_plane(h, w, field, mode, [&](std::size_t i, double sy, double sx, Interp m) {
    if (m == Interp::nearest) {
      out[i] = image(sampling::nearest_index(sy, h), sampling::nearest_index(sx, w));
    } else {
      out[i] = sampling::bilinear(image.data(), w, sampling::bilinear_tap(sy, sx, h, w));
    }
  });
  return Image::clamped(h, w, std::move(out));
}

/// Masks are always resampled with nearest-neighbour lookup so they stay binary.
inline SegMask warp(const SegMask& mask, const DisplacementField& field) {
  require(field.height() == mask.height() && field.width() == mask.width(),
          "warp: field shape does not match mask shape");
  const int h = mask.height(), w = mask.width();
  std::vector<std::uint8_t> out(mask.size());
  detail::warp_plane(h, w, field, Interp::nearest, [&](std::size_t i, double sy, double sx, Interp) {
    out[i] = mask(sampling::nearest_index(sy, h), sampling::nearest_index(sx, w));
  });
  return SegMask(h, w, std::move(out));
}

/// Resamples each displacement component of `f` at p + by(p).
inline DisplacementField warp(const DisplacementField& f, const DisplacementField& by) {
  require(f.height() == by.height() && f.width() == by.width(), "warp: field shapes differ");
  const int h = f.height(), w = f.width();
  DisplacementField out(h, w);
  detail::warp_plane(h, w, by, Interp::bilinear, [&](std::size_t i, double sy, double sx, Interp) {
    const auto tap = sampling::bilinear_tap(sy, sx, h, w);
    out.dy_plane()[i] = sampling::bilinear(f.dy_plane().data(), w, tap);
    out.dx_plane()[i] = sampling::bilinear(f.dx_plane().data(), w, tap);
  });
  return out;
}

/// Fixed-point inverse: v(p) = -u(p + v(p)). Exact inverses need not exist,
/// so the result is the iterate after `iterations` sweeps.
inline DisplacementField invert_field(const DisplacementField& u, int iterations = 30) {
  DisplacementField v = u.negated();
  for (int it = 0; it < iterations; ++it) v = warp(u, v).negated();
  return v;
}

// --------------------------------------------------------------- B-splines

/// Cubic B-spline segment weights for local coordinate t in [0,1).
inline std::array<double, 4> cubic_bspline_weights(double t) {
  const double t2 = t * t, t3 = t2 * t;
  const double omt = 1.0 - t;
  return {omt * omt * omt / 6.0, (3 * t3 - 6 * t2 + 4) / 6.0,
          (-3 * t3 + 3 * t2 + 3 * t + 1) / 6.0, t3 / 6.0};
}

/// Control lattice for a cubic free-form deformation. Control point k sits at
/// pixel coordinate (k - 1) * spacing on each axis.
struct BSplineGrid {
  int spacing = 16;
  int rows = 0;
  int cols = 0;
  std::vector<double> coeff_dy;  // rows * cols
  std::vector<double> coeff_dx;

  static int required_extent(int pixels, int spacing) { return (pixels - 1) / spacing + 4; }

  static BSplineGrid covering(int height, int width, int spacing) {
    require(spacing >= 2, "B-spline spacing must be at least 2");
    BSplineGrid g;
    g.spacing = spacing;
    g.rows = required_extent(height, spacing);
    g.cols = required_extent(width, spacing);
    g.coeff_dy.assign(std::size_t(g.rows) * g.cols, 0.0);
    g.coeff_dx.assign(std::size_t(g.rows) * g.cols, 0.0);
    return g;
  }

  double& dy(int r, int c) { return coeff_dy[std::size_t(r) * cols + c]; }
  double& dx(int r, int c) { return coeff_dx[std::size_t(r) * cols + c]; }

  bool covers(int height, int width) const {
    return spacing >= 2 && rows >= required_extent(height, spacing) &&
           cols >= required_extent(width, spacing);
  }
};

inline DisplacementField bspline_to_dense(const BSplineGrid& grid, int height, int width) {
  require(grid.spacing >= 2, "B-spline spacing must be at least 2");
  require(grid.coeff_dy.size() == std::size_t(grid.rows) * grid.cols &&
              grid.coeff_dx.size() == grid.coeff_dy.size(),
          "B-spline coefficient arrays do not match the lattice size");
  require(grid.covers(height, width), "B-spline grid does not cover the requested shape");
  DisplacementField field(height, width);
  const double s = grid.spacing;
  for (int y = 0; y < height; ++y) {
    const int iy = static_cast<int>(y / s);
    const auto wy = cubic_bspline_weights(y / s - iy);
    for (int x = 0; x < width; ++x) {
      const int ix = static_cast<int>(x / s);
      const auto wx = cubic_bspline_weights(x / s - ix);
      double vy = 0.0, vx = 0.0;
      for (int a = 0; a < 4; ++a) {
        for (int b = 0; b < 4; ++b) {
          const std::size_t k = std::size_t(iy + a) * grid.cols + (ix + b);
          const double wgt = wy[a] * wx[b];
          vy += wgt * grid.coeff_dy[k];
          vx += wgt * grid.coeff_dx[k];
        }
      }
      const std::size_t i = std::size_t(y) * width + x;
      field.dy_plane()[i] = vy;
      field.dx_plane()[i] = vx;
    }
  }
  return field;
}

/// Control coefficients with per-component magnitude uniform in
/// [min_disp, max_disp] and a random sign.
inline BSplineGrid random_bspline_grid(int height, int width, int spacing, double min_disp,
                                       double max_disp, std::uint64_t seed) {
  require(max_disp >= min_disp && min_disp >= 0.0,
          "random deformation needs max_disp >= min_disp >= 0");
  BSplineGrid g = BSplineGrid::covering(height, width, spacing);
  Rng rng(seed);
  for (std::size_t k = 0; k < g.coeff_dy.size(); ++k) {
    for (auto* plane : {&g.coeff_dy, &g.coeff_dx}) {
      const double mag = uniform(rng, min_disp, max_disp);
      const bool negative = (rng() & 1u) != 0;
      (*plane)[k] = negative ? -mag : mag;
    }
  }
  return g;
}

inline DisplacementField random_elastic_deformation(int height, int width, int spacing = 16,
                                                    double min_disp = 1.0,
                                                    double max_disp = 20.0,
                                                    std::uint64_t seed = 0) {
  return bspline_to_dense(random_bspline_grid(height, width, spacing, min_disp, max_disp, seed),
                          height, width);
}

// ------------------------------------------------------------------ affine

/// Maps floating-image coordinates q to reference coordinates:
/// p = matrix * q + offset, with points ordered (row, col).
struct AffineTransform {
  std::array<double, 4> matrix{1.0, 0.0, 0.0, 1.0};
  std::array<double, 2> offset{0.0, 0.0};

  double det() const { return matrix[0] * matrix[3] - matrix[1] * matrix[2]; }

  std::array<double, 2> apply(double y, double x) const {
    return {matrix[0] * y + matrix[1] * x + offset[0], matrix[2] * y + matrix[3] * x + offset[1]};
  }

  AffineTransform inverse() const {
    const double d = det();
    require(std::abs(d) > 1e-8, "affine transform is not invertible");
    AffineTransform inv;
    inv.matrix = {matrix[3] / d, -matrix[1] / d, -matrix[2] / d, matrix[0] / d};
    inv.offset = {-(inv.matrix[0] * offset[0] + inv.matrix[1] * offset[1]),
                  -(inv.matrix[2] * offset[0] + inv.matrix[3] * offset[1])};
    return inv;
  }

  bool is_identity(double tol = 0.0) const {
    return std::abs(matrix[0] - 1) <= tol && std::abs(matrix[1]) <= tol &&
           std::abs(matrix[2]) <= tol && std::abs(matrix[3] - 1) <= tol &&
           std::abs(offset[0]) <= tol && std::abs(offset[1]) <= tol;
  }
};

/// Intensity-weighted centroid and second central moments (row/col ordered).
struct Moments {
  double mass = 0.0;
  double cy = 0.0, cx = 0.0;
  double syy = 0.0, sxx = 0.0, sxy = 0.0;
};

inline Moments image_moments(const Image& img) {
  Moments m;
  for (int y = 0; y < img.height(); ++y) {
    for (int x = 0; x < img.width(); ++x) {
      const double v = img(y, x);
      m.mass += v;
      m.cy += v * y;
      m.cx += v * x;
    }
  }
  if (m.mass <= 0.0) return m;
  m.cy /= m.mass;
  m.cx /= m.mass;
  for (int y = 0; y < img.height(); ++y) {
    for (int x = 0; x < img.width(); ++x) {
      const double v = img(y, x);
      const double dy = y - m.cy, dx = x - m.cx;
      m.syy += v * dy * dy;
      m.sxx += v * dx * dx;
      m.sxy += v * dy * dx;
    }
  }
  m.syy /= m.mass;
  m.sxx /= m.mass;
  m.sxy /= m.mass;
  return m;
}

/// Displacement field that resamples an image through `t`:
/// out(p) = img(t^-1(p)).
inline DisplacementField affine_field(const AffineTransform& t, int height, int width) {
  const AffineTransform inv = t.inverse();
  DisplacementField f(height, width);
  for (int y = 0; y < height; ++y) {
    for (int x = 0; x < width; ++x) {
      const auto q = inv.apply(y, x);
      const std::size_t i = std::size_t(y) * width + x;
      f.dy_plane()[i] = q[0] - y;
      f.dx_plane()[i] = q[1] - x;
    }
  }
  return f;
}

struct AffineAlignment {
  AffineTransform transform;
  Image aligned;
};

/// Closed-form moment matching: translation from centroids, rotation from the
/// principal-axis angles, isotropic scale from the moment traces.
inline AffineAlignment affine_align(const Image& flt, const Image& ref) {
  require(flt.same_shape(ref), "affine_align: images differ in shape");
  const Moments mf = image_moments(flt);
  const Moments mr = image_moments(ref);
  if (mf.mass <= 0.0 || mr.mass <= 0.0) {
    throw DegenerateInput("affine_align: image has zero total intensity");
  }
  auto axis_angle = [](const Moments& m) {
    return 0.5 * std::atan2(2.0 * m.sxy, m.syy - m.sxx);
  };
  auto anisotropy = [](const Moments& m) {
    const double tr = m.syy + m.sxx;
    const double disc = std::sqrt((m.syy - m.sxx) * (m.syy - m.sxx) + 4 * m.sxy * m.sxy);
    return tr > 0 ? disc / tr : 0.0;
  };
  double angle = 0.0;
  // Principal axes are meaningless for near-isotropic mass distributions.
  if (anisotropy(mf) > 0.05 && anisotropy(mr) > 0.05) {
    const double pi = 3.14159265358979323846;
    angle = axis_angle(mr) - axis_angle(mf);
    while (angle > pi / 2) angle -= pi;
    while (angle <= -pi / 2) angle += pi;
  }
  const double trf = mf.syy + mf.sxx, trr = mr.syy + mr.sxx;
  const double scale = (trf > 0 && trr > 0) ? std::sqrt(trr / trf) : 1.0;
  AffineTransform t;
  // Rotation in (row, col) coordinates; angle measured from the row axis.
  const double c = std::cos(angle), s = std::sin(angle);
  t.matrix = {scale * c, -scale * s, scale * s, scale * c};
  t.offset = {mr.cy - (t.matrix[0] * mf.cy + t.matrix[1] * mf.cx),
              mr.cx - (t.matrix[2] * mf.cy + t.matrix[3] * mf.cx)};
  require(std::abs(t.det()) > 1e-8, "affine_align: singular transform");
  return {t, warp(flt, affine_field(t, flt.height(), flt.width()))};
}

// ------------------------------------------------------ tensor conversion

inline Tensor to_tensor(const std::vector<const Image*>& batch) {
  require(!batch.empty(), "to_tensor: empty batch");
  const int h = batch.front()->height(), w = batch.front()->width();
  Tensor t({int(batch.size()), 1, h, w});
  for (std::size_t n = 0; n < batch.size(); ++n) {
    require(batch[n]->height() == h && batch[n]->width() == w, "to_tensor: mixed shapes");
    std::copy(batch[n]->pixels().begin(), batch[n]->pixels().end(), t.sample(int(n)));
  }
  return t;
}

inline Tensor to_tensor(const std::vector<const SegMask*>& batch) {
  require(!batch.empty(), "to_tensor: empty batch");
  const int h = batch.front()->height(), w = batch.front()->width();
  Tensor t({int(batch.size()), 1, h, w});
  for (std::size_t n = 0; n < batch.size(); ++n) {
    require(batch[n]->height() == h && batch[n]->width() == w, "to_tensor: mixed shapes");
    std::copy(batch[n]->pixels().begin(), batch[n]->pixels().end(), t.sample(int(n)));
  }
  return t;
}

inline Tensor to_tensor(const std::vector<const DisplacementField*>& batch) {
  require(!batch.empty(), "to_tensor: empty batch");
  const int h = batch.front()->height(), w = batch.front()->width();
  Tensor t({int(batch.size()), 2, h, w});
  for (std::size_t n = 0; n < batch.size(); ++n) {
    require(batch[n]->height() == h && batch[n]->width() == w, "to_tensor: mixed shapes");
    std::copy(batch[n]->dy_plane().begin(), batch[n]->dy_plane().end(), t.channel(int(n), 0));
    std::copy(batch[n]->dx_plane().begin(), batch[n]->dx_plane().end(), t.channel(int(n), 1));
  }
  return t;
}

inline Image image_from_tensor(const Tensor& t, int n = 0) {
  const Shape s = t.shape();
  return Image::clamped(s.h, s.w, std::vector<double>(t.channel(n, 0), t.channel(n, 0) + s.plane()));
}

inline DisplacementField field_from_tensor(const Tensor& t, int n = 0) {
  const Shape s = t.shape();
  require(s.c == 2, "field_from_tensor: expected two channels");
  return DisplacementField(s.h, s.w,
                           std::vector<double>(t.channel(n, 0), t.channel(n, 0) + s.plane()),
                           std::vector<double>(t.channel(n, 1), t.channel(n, 1) + s.plane()));
}

}  // namespace sarreg

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

// Procedural stand-in domains: a lung-like chest (body ellipse with two dark
// lung fields, mask = lungs) and a brain-like head (skull ring, tissue and a
// dark ventricle pair, mask = ventricles). Each patient has a base anatomy;
// visits perturb it slightly.

#include <cmath>
#include <filesystem>
#include <fstream>
#include <nlohmann/json.hpp>
#include <string>
#include <vector>

#include "sarreg/io.hpp"
#include "sarreg/training.hpp"

namespace sarreg {

enum class DomainFamily { lung, ring };

inline DomainFamily parse_family(const std::string& s) {
  if (s == "lung") return DomainFamily::lung;
  if (s == "ring") return DomainFamily::ring;
  throw ContractViolation("unknown domain family '" + s + "' (expected lung or ring)");
}
inline std::string family_name(DomainFamily f) { return f == DomainFamily::lung ? "lung" : "ring"; }

struct DomainSpec {
  std::string name = "lung";
  DomainFamily family = DomainFamily::lung;
  int height = 64;
  int width = 64;
  int patients = 50;
  int visits = 2;
  double texture = 0.04;  // amplitude of smooth intensity texture
  double noise = 0.01;    // per-pixel noise amplitude
  std::uint64_t seed = 1;

  void validate() const {
    require(patients >= 2, "domain: need at least two patients");
    require(visits >= 1, "domain: need at least one visit per patient");
    require(height % 4 == 0 && width % 4 == 0, "domain: size must be divisible by 4");
    require(height >= 32 && width >= 32, "domain: size must be at least 32x32");
    require(texture >= 0 && noise >= 0, "domain: amplitudes must be nonnegative");
  }
};

inline void to_json(nlohmann::json& j, const DomainSpec& s) {
  j = {{"name", s.name},         {"family", family_name(s.family)},
       {"height", s.height},     {"width", s.width},
       {"patients", s.patients}, {"visits", s.visits},
       {"texture", s.texture},   {"noise", s.noise},
       {"seed", s.seed}};
}
inline void from_json(const nlohmann::json& j, DomainSpec& s) {
  s.name = j.value("name", s.name);
  if (j.contains("family")) s.family = parse_family(j.at("family").get<std::string>());
  s.height = j.value("height", s.height);
  s.width = j.value("width", s.width);
  s.patients = j.value("patients", s.patients);
  s.visits = j.value("visits", s.visits);
  s.texture = j.value("texture", s.texture);
  s.noise = j.value("noise", s.noise);
  s.seed = j.value("seed", s.seed);
}

namespace domain {

/// Rotated ellipse in pixel units (centre, semi-axes, angle).
struct Ellipse {
  double cy, cx, ay, ax, angle;

  /// Normalised radius: < 1 inside.
  double radius(double y, double x) const {
    const double c = std::cos(angle), s = std::sin(angle);
    const double dy = y - cy, dx = x - cx;
    const double u = (c * dy + s * dx) / ay, v = (-s * dy + c * dx) / ax;
    return std::sqrt(u * u + v * v);
  }
  /// Soft membership with roughly one-pixel edge.
  double cover(double y, double x) const {
    return std::clamp((1.0 - radius(y, x)) * std::min(ay, ax) + 0.5, 0.0, 1.0);
  }
  bool inside(double y, double x) const { return radius(y, x) < 1.0; }
};

/// Sum of random low-frequency cosines, roughly in [-1, 1].
struct Texture {
  std::array<double, 12> p{};
  explicit Texture(Rng& rng) {
    for (int k = 0; k < 3; ++k) {
      p[4 * k] = uniform(rng, 0.05, 0.25);
      p[4 * k + 1] = uniform(rng, 0.05, 0.25);
      p[4 * k + 2] = uniform(rng, 0.0, 6.283185307179586);
      p[4 * k + 3] = uniform(rng, 0.5, 1.0) / 3.0;
    }
  }
  double operator()(double y, double x) const {
    double v = 0;
    for (int k = 0; k < 3; ++k) v += p[4 * k + 3] * std::cos(p[4 * k] * y + p[4 * k + 1] * x + p[4 * k + 2]);
    return v;
  }
};

struct Anatomy {
  std::vector<Ellipse> shapes;  // family-specific roles, see render()
  double scale = 1.0;
};

inline Anatomy base_anatomy(DomainFamily f, int h, int w, Rng& rng) {
  const double cy = h / 2.0 + uniform(rng, -2, 2), cx = w / 2.0 + uniform(rng, -2, 2);
  const double s = std::min(h, w) / 64.0;
  Anatomy a;
  if (f == DomainFamily::lung) {
    // body, left lung, right lung
    const double by = uniform(rng, 24, 28) * s, bx = uniform(rng, 27, 30) * s;
    a.shapes.push_back({cy, cx, by, bx, uniform(rng, -0.08, 0.08)});
    const double ly = uniform(rng, 14, 19) * s, lx = uniform(rng, 7, 10) * s;
    const double off = uniform(rng, 11, 14) * s;
    a.shapes.push_back({cy - 1.5 * s, cx - off, ly, lx, uniform(rng, -0.2, 0.0)});
    a.shapes.push_back({cy - 1.5 * s, cx + off, ly * uniform(rng, 0.9, 1.05), lx, uniform(rng, 0.0, 0.2)});
  } else {
    // skull outer, skull inner (tissue), left ventricle, right ventricle
    const double ry = uniform(rng, 25, 29) * s, rx = uniform(rng, 22, 26) * s;
    const double rot = uniform(rng, -0.1, 0.1);
    const double t = uniform(rng, 2.5, 3.5) * s;
    a.shapes.push_back({cy, cx, ry, rx, rot});
    a.shapes.push_back({cy, cx, ry - t, rx - t, rot});
    const double vy = uniform(rng, 8, 11) * s, vx = uniform(rng, 3.5, 5) * s;
    const double off = uniform(rng, 4.5, 6) * s;
    a.shapes.push_back({cy - 1 * s, cx - off, vy, vx, uniform(rng, -0.35, -0.15)});
    a.shapes.push_back({cy - 1 * s, cx + off, vy, vx, uniform(rng, 0.15, 0.35)});
  }
  return a;
}

/// Small visit-to-visit change: shift, growth and rotation of each part.
inline Anatomy perturb(const Anatomy& base, Rng& rng) {
  Anatomy a = base;
  const double sy = uniform(rng, -1.5, 1.5), sx = uniform(rng, -1.5, 1.5);
  for (auto& e : a.shapes) {
    e.cy += sy + uniform(rng, -0.5, 0.5);
    e.cx += sx + uniform(rng, -0.5, 0.5);
    const double g = uniform(rng, 0.95, 1.05);
    e.ay *= g;
    e.ax *= g;
    e.angle += uniform(rng, -0.05, 0.05);
  }
  return a;
}

inline Case render(const DomainSpec& spec, const Anatomy& a, const std::string& pid, int visit,
                   Rng& rng) {
  const int h = spec.height, w = spec.width;
  const Texture tex(rng);
  std::vector<double> px(std::size_t(h) * w);
  std::vector<std::uint8_t> mask(px.size());
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const double yy = y, xx = x;
      const double t = spec.texture * tex(yy, xx);
      double v = 0.0;
      bool in_mask = false;
      if (spec.family == DomainFamily::lung) {
        const double body = a.shapes[0].cover(yy, xx);
        const double lung = std::max(a.shapes[1].cover(yy, xx), a.shapes[2].cover(yy, xx));
        v = body * (0.65 + t) - lung * (0.45 + 0.5 * t);
        in_mask = a.shapes[1].inside(yy, xx) || a.shapes[2].inside(yy, xx);
      } else {
        const double skull = a.shapes[0].cover(yy, xx);
        const double tissue = a.shapes[1].cover(yy, xx);
        const double vent = std::max(a.shapes[2].cover(yy, xx), a.shapes[3].cover(yy, xx));
        v = skull * 0.9 - tissue * (0.4 - t) - vent * (0.35 + 0.5 * t);
        in_mask = a.shapes[2].inside(yy, xx) || a.shapes[3].inside(yy, xx);
      }
      const std::size_t i = std::size_t(y) * w + x;
      if (v > 0.0) v += spec.noise * (2.0 * uniform01(rng) - 1.0);
      px[i] = std::clamp(v, 0.0, 1.0);
      mask[i] = in_mask ? 1 : 0;
    }
  }
  return {pid, visit, Image(h, w, std::move(px)), SegMask(h, w, std::move(mask))};
}

}  // namespace domain

/// All cases of a domain, patient-major. Deterministic in the spec.
inline std::vector<Case> synth_cases(const DomainSpec& spec) {
  spec.validate();
  std::vector<Case> cases;
  for (int p = 0; p < spec.patients; ++p) {
    Rng rng(mix_seed(spec.seed, std::uint64_t(p)));
    const auto base = domain::base_anatomy(spec.family, spec.height, spec.width, rng);
    char pid[32];
    std::snprintf(pid, sizeof pid, "%s%04d", spec.name.c_str(), p);
    for (int v = 0; v < spec.visits; ++v) {
      cases.push_back(domain::render(spec, domain::perturb(base, rng), pid, v, rng));
      require(!cases.back().mask.empty_mask(), "domain: generated an empty mask");
    }
  }
  return cases;
}

inline std::string case_stem(const Case& c) {
  return c.patient_id + "_v" + std::to_string(c.visit);
}

/// Writes images/, masks/ and manifest.json. Image files are 16-bit PGM.
inline void write_dataset(const std::filesystem::path& dir, const std::vector<Case>& cases,
                          const nlohmann::json& spec_echo) {
  std::filesystem::create_directories(dir / "images");
  std::filesystem::create_directories(dir / "masks");
  nlohmann::json manifest{{"spec", spec_echo}, {"cases", nlohmann::json::array()}};
  for (const auto& c : cases) {
    const std::string stem = case_stem(c);
    io::save_pgm(dir / "images" / (stem + ".pgm"), c.image, 16);
    io::save_pgm(dir / "masks" / (stem + ".pgm"), c.mask);
    manifest["cases"].push_back({{"patient_id", c.patient_id},
                                 {"visit", c.visit},
                                 {"image", "images/" + stem + ".pgm"},
                                 {"mask", "masks/" + stem + ".pgm"}});
  }
  std::ofstream os(dir / "manifest.json");
  os << manifest.dump(2) << '\n';
}

inline void synth_domain(const DomainSpec& spec, const std::filesystem::path& dir) {
  write_dataset(dir, synth_cases(spec), spec);
}

/// Loads any dataset laid out as images/, masks/ and manifest.json, including
/// real data converted to PGM by the user.
inline std::vector<Case> load_dataset(const std::filesystem::path& dir) {
  std::ifstream is(dir / "manifest.json");
  if (!is) throw ContractViolation("dataset manifest missing in " + dir.string());
  const auto manifest = nlohmann::json::parse(is);
  std::vector<Case> cases;
  for (const auto& e : manifest.at("cases")) {
    Case c;
    c.patient_id = e.at("patient_id").get<std::string>();
    c.visit = e.value("visit", 0);
    c.image = io::load_pgm(dir / e.at("image").get<std::string>());
    c.mask = io::load_mask_pgm(dir / e.at("mask").get<std::string>());
    require(c.mask.same_shape(c.image), "dataset: mask and image differ in shape");
    cases.push_back(std::move(c));
  }
  require(!cases.empty(), "dataset: no cases in " + dir.string());
  return cases;
}

}  // namespace sarreg

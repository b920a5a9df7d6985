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
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "sarreg/losses.hpp"
#include "sarreg/networks.hpp"

namespace sarreg {

// ------------------------------------------------------------------- data

/// One image of one patient visit with its ground-truth mask.
struct Case {
  std::string patient_id;
  int visit = 0;
  Image image;
  SegMask mask;
};

struct SynthConfig {
  int spacing = 16;
  double min_disp = 1.0;
  double max_disp = 20.0;
  int floats_per_base = 4;
  int inverse_iterations = 30;

  void validate() const {
    require(spacing >= 2, "synth: spacing must be at least 2");
    require(min_disp >= 0 && max_disp >= min_disp, "synth: need 0 <= min_disp <= max_disp");
    require(floats_per_base >= 1, "synth: floats_per_base must be positive");
  }
};

/// Reference/floating pair with the field that produced the floating image.
/// `def_target` is the field the generator should recover: with backward
/// warping, undoing def_app needs its inverse, not its negation.
struct TrainingPair {
  std::string id;
  Image ref;
  SegMask ref_seg;
  Image flt;
  SegMask flt_seg;
  DisplacementField def_app;
  DisplacementField def_target;
  bool affine_fallback = false;  // alignment was degenerate; identity used
};

inline TrainingPair make_training_pair(const Image& base, const SegMask& base_seg,
                                       const Image& partner, const SegMask& partner_seg,
                                       const SynthConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  require(base.same_shape(partner), "make_training_pair: base and partner differ in shape");
  require(base_seg.same_shape(base) && partner_seg.same_shape(partner),
          "make_training_pair: mask shape mismatch");
  const int h = base.height(), w = base.width();
  TrainingPair p;
  p.ref = base;
  p.ref_seg = base_seg;
  Image aligned = partner;
  SegMask aligned_seg = partner_seg;
  try {
    const auto a = affine_align(partner, base);
    aligned = a.aligned;
    aligned_seg = warp(partner_seg, affine_field(a.transform, h, w));
  } catch (const DegenerateInput&) {
    p.affine_fallback = true;
  }
  p.def_app = random_elastic_deformation(h, w, cfg.spacing, cfg.min_disp, cfg.max_disp, seed);
  p.flt = warp(aligned, p.def_app);
  p.flt_seg = warp(aligned_seg, p.def_app);
  p.def_target = invert_field(p.def_app, cfg.inverse_iterations);
  return p;
}

enum class PairMode { visit, self };

inline PairMode parse_pair_mode(const std::string& s) {
  if (s == "visit") return PairMode::visit;
  if (s == "self") return PairMode::self;
  throw ContractViolation("unknown pair mode '" + s + "' (expected visit or self)");
}

/// `count` pairs cycling over the cases as bases. In visit mode the partner
/// is another visit of the same patient when one exists (self-pairing
/// otherwise). Pair k depends only on (seed, k).
inline std::vector<TrainingPair> make_pairs(const std::vector<Case>& cases, const SynthConfig& cfg,
                                            PairMode mode, int count, std::uint64_t seed) {
  require(!cases.empty(), "make_pairs: no cases");
  require(count >= 1, "make_pairs: count must be positive");
  std::map<std::string, std::vector<std::size_t>> by_patient;
  for (std::size_t i = 0; i < cases.size(); ++i) by_patient[cases[i].patient_id].push_back(i);
  std::vector<TrainingPair> pairs;
  pairs.reserve(std::size_t(count));
  for (int k = 0; k < count; ++k) {
    const std::size_t b = std::size_t(k) % cases.size();
    Rng rng(mix_seed(seed, 2 * std::uint64_t(k)));
    std::size_t partner = b;
    if (mode == PairMode::visit) {
      std::vector<std::size_t> others;
      for (auto i : by_patient[cases[b].patient_id]) {
        if (i != b) others.push_back(i);
      }
      if (!others.empty()) partner = others[uniform_index(rng, others.size())];
    }
    auto p = make_training_pair(cases[b].image, cases[b].mask, cases[partner].image,
                                cases[partner].mask, cfg, mix_seed(seed, 2 * std::uint64_t(k) + 1));
    p.id = cases[b].patient_id + "_v" + std::to_string(cases[b].visit) + "_p" +
           std::to_string(k);
    pairs.push_back(std::move(p));
  }
  return pairs;
}

template <typename T>
struct Split {
  std::vector<T> train;
  std::vector<T> val;
  std::vector<T> test;
};

/// Patient-level split: round(0.1 n) validation and round(0.2 n) test
/// patients after a seeded shuffle, remainder to training.
template <typename T>
Split<T> split_dataset(const std::vector<T>& cases, std::uint64_t seed, double val_frac = 0.1,
                       double test_frac = 0.2) {
  require(val_frac >= 0 && test_frac >= 0 && val_frac + test_frac <= 1.0,
          "split_dataset: bad fractions");
  std::vector<std::string> patients;
  for (const auto& c : cases) patients.push_back(c.patient_id);
  std::sort(patients.begin(), patients.end());
  patients.erase(std::unique(patients.begin(), patients.end()), patients.end());
  Rng rng(seed);
  shuffle(patients.begin(), patients.end(), rng);
  const auto n = double(patients.size());
  const std::size_t n_val = std::size_t(std::lround(val_frac * n));
  const std::size_t n_test = std::size_t(std::lround(test_frac * n));
  require(n_val + n_test <= patients.size(), "split_dataset: too few patients");
  std::map<std::string, int> fold;
  for (std::size_t i = 0; i < patients.size(); ++i) {
    fold[patients[i]] = i < n_val ? 1 : (i < n_val + n_test ? 2 : 0);
  }
  Split<T> s;
  for (const auto& c : cases) {
    const int f = fold.at(c.patient_id);
    (f == 0 ? s.train : f == 1 ? s.val : s.test).push_back(c);
  }
  return s;
}

// ---------------------------------------------------------------- batches

struct Batch {
  ad::Var flt, ref, flt_seg, ref_seg;  // {B,1,H,W}
  ad::Var def_app, def_target;         // {B,2,H,W}
};

inline Batch make_batch(const std::vector<TrainingPair>& pairs,
                        const std::vector<std::size_t>& idx) {
  require(!idx.empty(), "make_batch: empty batch");
  std::vector<const Image*> flt, ref;
  std::vector<const SegMask*> fs, rs;
  std::vector<const DisplacementField*> app, tgt;
  for (auto i : idx) {
    const auto& p = pairs.at(i);
    flt.push_back(&p.flt);
    ref.push_back(&p.ref);
    fs.push_back(&p.flt_seg);
    rs.push_back(&p.ref_seg);
    app.push_back(&p.def_app);
    tgt.push_back(&p.def_target);
  }
  return {ad::constant(to_tensor(flt)),     ad::constant(to_tensor(ref)),
          ad::constant(to_tensor(fs)),      ad::constant(to_tensor(rs)),
          ad::constant(to_tensor(app)),     ad::constant(to_tensor(tgt))};
}

inline std::vector<std::size_t> sample_indices(std::size_t n, int batch, Rng& rng) {
  std::vector<std::size_t> idx(static_cast<std::size_t>(batch));
  for (auto& i : idx) i = std::size_t(uniform_index(rng, n));
  return idx;
}

// ----------------------------------------------------------------- config

struct TrainConfig {
  double lr = 1e-3;
  double beta1 = 0.93;
  double beta2 = 0.999;
  int batch = 8;
  int g_steps = 1;
  int d_steps = 1;
  int max_iters = 2000;
  int pretrain_iters = 0;
  std::uint64_t seed = 0;
  int checkpoint_every = 0;  // 0 disables periodic checkpoints
  std::filesystem::path checkpoint_dir;
  std::filesystem::path log_path;

  void validate() const {
    require(lr > 0, "train: lr must be positive");
    require(beta1 >= 0 && beta1 < 1, "train: beta1 must lie in [0,1)");
    require(beta2 >= 0 && beta2 < 1, "train: beta2 must lie in [0,1)");
    require(batch >= 1, "train: batch must be positive");
    require(g_steps >= 1 && d_steps >= 1, "train: step counts must be positive");
    require(max_iters >= 0 && pretrain_iters >= 0, "train: iteration counts must be >= 0");
    require(checkpoint_every >= 0, "train: checkpoint_every must be >= 0");
  }
  AdamConfig adam() const { return {lr, beta1, beta2, 1e-8}; }
};

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = {{"lr", c.lr},           {"beta1", c.beta1},
       {"beta2", c.beta2},     {"batch", c.batch},
       {"g_steps", c.g_steps}, {"d_steps", c.d_steps},
       {"max_iters", c.max_iters}, {"pretrain_iters", c.pretrain_iters},
       {"checkpoint_every", c.checkpoint_every}};
}
inline void from_json(const nlohmann::json& j, TrainConfig& c) {
  c.lr = j.value("lr", c.lr);
  c.beta1 = j.value("beta1", c.beta1);
  c.beta2 = j.value("beta2", c.beta2);
  c.batch = j.value("batch", c.batch);
  c.g_steps = j.value("g_steps", c.g_steps);
  c.d_steps = j.value("d_steps", c.d_steps);
  c.max_iters = j.value("max_iters", c.max_iters);
  c.pretrain_iters = j.value("pretrain_iters", c.pretrain_iters);
  c.checkpoint_every = j.value("checkpoint_every", c.checkpoint_every);
}
inline void to_json(nlohmann::json& j, const SynthConfig& c) {
  j = {{"spacing", c.spacing}, {"min_disp", c.min_disp}, {"max_disp", c.max_disp},
       {"floats_per_base", c.floats_per_base}, {"inverse_iterations", c.inverse_iterations}};
}
inline void from_json(const nlohmann::json& j, SynthConfig& c) {
  c.spacing = j.value("spacing", c.spacing);
  c.min_disp = j.value("min_disp", c.min_disp);
  c.max_disp = j.value("max_disp", c.max_disp);
  c.floats_per_base = j.value("floats_per_base", c.floats_per_base);
  c.inverse_iterations = j.value("inverse_iterations", c.inverse_iterations);
}

inline bool is_prefix(const std::string& name, const char* prefix) {
  return name.rfind(prefix, 0) == 0;
}
inline bool is_generator_param(const Parameter& p) {
  return is_prefix(p.name, "G.") || is_prefix(p.name, "F.");
}
inline bool is_discriminator_param(const Parameter& p) { return is_prefix(p.name, "D_"); }

// ------------------------------------------------------------- pretraining

/// Per-step losses of the warm-up.
struct PretrainLog {
  std::vector<double> losses;
};

/// Warm-up regression of G (toward ref and def_target) and F (toward flt and
/// def_app): image MSE plus field MSE in units of field_scale.
inline PretrainLog pretrain_generator(SarModel& m, const std::vector<TrainingPair>& pairs,
                                      const TrainConfig& cfg) {
  cfg.validate();
  PretrainLog log;
  if (cfg.pretrain_iters == 0) return log;
  require(!pairs.empty(), "pretrain_generator: no pairs");
  const auto& g = m.config.generator;
  const double field_w = 1.0 / (g.field_scale * g.field_scale);
  const net::Ctx c{m.params, &m.params, true};
  Rng rng(mix_seed(cfg.seed, 0x5052ULL));
  for (int it = 0; it < cfg.pretrain_iters; ++it) {
    const Batch b = make_batch(pairs, sample_indices(pairs.size(), cfg.batch, rng));
    const auto gp = generator_pass(c, g, "G", b.flt, b.ref);
    const auto fp = generator_pass(c, g, "F", b.ref, b.flt);
    ad::Var loss = ops::add(
        ops::add(ops::mean_all(ops::mean_sq_diff(gp.trans, b.ref)),
                 ops::scale(ops::mean_all(ops::mean_sq_diff(gp.def_recv, b.def_target)), field_w)),
        ops::add(ops::mean_all(ops::mean_sq_diff(fp.trans, b.flt)),
                 ops::scale(ops::mean_all(ops::mean_sq_diff(fp.def_recv, b.def_app)), field_w)));
    if (!std::isfinite(loss.item())) throw NonFiniteLoss("pretrain", loss.item());
    m.params.zero_grad();
    ad::backward(loss);
    adam_step(m.params, cfg.adam(), is_generator_param);
    m.params.zero_grad();
    log.losses.push_back(loss.item());
  }
  return log;
}

// ------------------------------------------------------------------ train

struct TrainStep {
  LossBreakdown generator;
  double loss_d = 0;
};

struct TrainLog {
  std::vector<TrainStep> steps;
  double wall_time_s = 0;
};

namespace detail {

/// Discriminator evidence for one direction of the cycle.
inline DiscriminatorInput fake_input(const GeneratorPass& p, const ad::Var& fixed,
                                     const ad::Var& moving_seg, const ad::Var& fixed_seg,
                                     const ad::Var& applied, bool detach) {
  const ad::Var seg = ops::warp(moving_seg, p.def_recv);
  if (detach) {
    return {ops::detach(p.trans), fixed, ops::detach(seg), fixed_seg, ops::detach(p.def_recv),
            applied};
  }
  return {p.trans, fixed, seg, fixed_seg, p.def_recv, applied};
}

/// A perfectly registered sample: the fixed image against itself with the
/// recovered field equal to the applied one.
inline DiscriminatorInput real_input(const ad::Var& fixed, const ad::Var& fixed_seg,
                                     const ad::Var& applied) {
  return {fixed, fixed, fixed_seg, fixed_seg, applied, applied};
}

}  // namespace detail

struct GeneratorPasses {
  GeneratorPass g;  // G(flt -> ref)
  GeneratorPass f;  // F(ref -> flt)
};

inline GeneratorPasses generator_passes(SarModel& m, const Batch& b, bool training) {
  const net::Ctx c{m.params, training ? &m.params : nullptr, training};
  return {generator_pass(c, m.config.generator, "G", b.flt, b.ref),
          generator_pass(c, m.config.generator, "F", b.ref, b.flt)};
}

/// Generator-side objective on one batch, given the forward passes of G and F
/// on that batch. Also used by tests for gradient checks and round-trips.
inline Objective generator_objective(SarModel& m, const FeatureExtractor& extractor,
                                     const Batch& b, const GeneratorPasses& p, bool training) {
  const auto& mc = m.config;
  const net::Ctx c{m.params, training ? &m.params : nullptr, training};
  const auto in_y = detail::fake_input(p.g, b.ref, b.flt_seg, b.ref_seg, b.def_target, false);
  const auto in_x = detail::fake_input(p.f, b.flt, b.ref_seg, b.flt_seg, b.def_app, false);
  const ad::Var p_y = ops::sigmoid(discriminator_logit(c, mc, "D_ref", in_y));
  const ad::Var p_x = ops::sigmoid(discriminator_logit(c, mc, "D_flt", in_x));
  ObjectiveTerms t;
  t.content = content_terms(b.ref, p.g.trans, extractor);
  t.adversarial = adversarial_total(ops::mean_all(loss::neg_log_prob(p_y)),
                                    ops::mean_all(loss::neg_log_prob(p_x)), in_y.seg_trans,
                                    b.ref_seg, p.g.def_recv, b.def_target,
                                    mc.generator.field_scale);
  // Second legs of the cycle: F(G(x)) back toward flt, G(F(y)) back toward ref.
  const ad::Var fgx = generator_pass(c, mc.generator, "F", p.g.trans, b.flt).trans;
  const ad::Var gfy = generator_pass(c, mc.generator, "G", p.f.trans, b.ref).trans;
  t.cycle = ops::add(ops::mean_all(ops::mean_abs_diff(fgx, b.flt)),
                     ops::mean_all(ops::mean_abs_diff(gfy, b.ref)));
  return full_objective(t);
}

inline Objective generator_objective(SarModel& m, const FeatureExtractor& extractor,
                                     const Batch& b, bool training) {
  return generator_objective(m, extractor, b, generator_passes(m, b, training), training);
}

/// Discriminator loss on one batch with generator outputs detached.
inline ad::Var discriminator_objective(SarModel& m, const Batch& b, const GeneratorPasses& p) {
  const auto& mc = m.config;
  const net::Ctx c{m.params, nullptr, false};
  auto prob = [&](const char* d, const DiscriminatorInput& in) {
    return ops::sigmoid(discriminator_logit(c, mc, d, in));
  };
  const auto ly = gan_loss(prob("D_ref", detail::real_input(b.ref, b.ref_seg, b.def_target)),
                           prob("D_ref", detail::fake_input(p.g, b.ref, b.flt_seg, b.ref_seg,
                                                            b.def_target, true)));
  const auto lx = gan_loss(prob("D_flt", detail::real_input(b.flt, b.flt_seg, b.def_app)),
                           prob("D_flt", detail::fake_input(p.f, b.flt, b.ref_seg, b.flt_seg,
                                                            b.def_app, true)));
  return ops::add(ly.loss_d, lx.loss_d);
}

/// Alternating optimisation: discriminator ascent on detached fakes, then a
/// generator/F descent step on the full objective. Never updates both sides
/// in the same optimiser step.
inline TrainLog train(SarModel& m, const std::vector<TrainingPair>& pairs,
                      const FeatureExtractor& extractor, const TrainConfig& cfg,
                      const std::function<void(long, const TrainStep&)>& on_step = {}) {
  cfg.validate();
  require(!pairs.empty(), "train: no training pairs");
  require(pairs.front().ref.height() == m.config.height &&
              pairs.front().ref.width() == m.config.width,
          "train: pair size does not match the model");
  TrainLog log;
  std::ofstream csv;
  if (!cfg.log_path.empty()) {
    if (cfg.log_path.has_parent_path()) std::filesystem::create_directories(cfg.log_path.parent_path());
    csv.open(cfg.log_path);
    csv << LossBreakdown::csv_header() << ",loss_d\n";
  }
  const auto start = std::chrono::steady_clock::now();
  const auto adam = cfg.adam();
  for (int it = 0; it < cfg.max_iters; ++it) {
    Rng rng(mix_seed(cfg.seed, 0x5452ULL + std::uint64_t(it)));
    const Batch b = make_batch(pairs, sample_indices(pairs.size(), cfg.batch, rng));
    TrainStep step;
    // One training-mode forward pass of G and F serves the discriminator
    // step (detached) and the first generator step.
    auto passes = generator_passes(m, b, true);
    for (int k = 0; k < cfg.d_steps; ++k) {
      const ad::Var loss_d = discriminator_objective(m, b, passes);
      step.loss_d = loss_d.item();
      if (!std::isfinite(step.loss_d)) throw NonFiniteLoss("loss_d", step.loss_d);
      m.params.zero_grad();
      ad::backward(loss_d);
      adam_step(m.params, adam, is_discriminator_param);
      m.params.zero_grad();
    }
    for (int k = 0; k < cfg.g_steps; ++k) {
      if (k > 0) passes = generator_passes(m, b, true);
      const auto obj = generator_objective(m, extractor, b, passes, true);
      step.generator = obj.breakdown;
      if (const auto bad = obj.breakdown.non_finite_component()) {
        throw NonFiniteLoss(bad->first, bad->second);
      }
      m.params.zero_grad();
      ad::backward(obj.total);
      adam_step(m.params, adam, is_generator_param);
      m.params.zero_grad();
    }
    const double wall =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    if (csv) csv << step.generator.csv_row(it + 1, wall) << ',' << step.loss_d << '\n';
    log.steps.push_back(step);
    if (on_step) on_step(it + 1, step);
    if (cfg.checkpoint_every > 0 && !cfg.checkpoint_dir.empty() &&
        (it + 1) % cfg.checkpoint_every == 0) {
      char name[32];
      std::snprintf(name, sizeof name, "step_%06d", it + 1);
      save_model(cfg.checkpoint_dir / name, m);
    }
  }
  log.wall_time_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return log;
}

}  // namespace sarreg

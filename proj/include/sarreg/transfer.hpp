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

// Per-pair registration with a trained model: frozen inference, or
// fine-tuning of the field head only against the adversarial, dice and
// generator terms (no applied field exists for a new pair).

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "sarreg/io.hpp"
#include "sarreg/losses.hpp"
#include "sarreg/metrics.hpp"
#include "sarreg/networks.hpp"

namespace sarreg {

struct FinetuneConfig {
  double rel_tol = 0.01;
  int max_iters = 30;
  int min_iters = 1;
  double lr = 1e-3;
  double beta1 = 0.93;
  double beta2 = 0.999;

  void validate() const {
    require(rel_tol > 0 && rel_tol < 1, "finetune: rel_tol must lie in (0,1)");
    require(min_iters >= 1 && max_iters >= min_iters, "finetune: need max_iters >= min_iters >= 1");
    require(lr > 0, "finetune: lr must be positive");
  }
};

inline void to_json(nlohmann::json& j, const FinetuneConfig& c) {
  j = {{"rel_tol", c.rel_tol}, {"max_iters", c.max_iters}, {"min_iters", c.min_iters},
       {"lr", c.lr}, {"beta1", c.beta1}, {"beta2", c.beta2}};
}
inline void from_json(const nlohmann::json& j, FinetuneConfig& c) {
  c.rel_tol = j.value("rel_tol", c.rel_tol);
  c.max_iters = j.value("max_iters", c.max_iters);
  c.min_iters = j.value("min_iters", c.min_iters);
  c.lr = j.value("lr", c.lr);
  c.beta1 = j.value("beta1", c.beta1);
  c.beta2 = j.value("beta2", c.beta2);
}

/// Ground-truth masks of a pair, when known.
struct PairMasks {
  SegMask flt;
  SegMask ref;
};

struct RegistrationResult {
  Image trans;
  DisplacementField def_recv;
  SegMask seg_trans;
  SegMask seg_ref;
  std::vector<double> loss_trace;
  int iters_used = 0;
  int best_iter = 0;  // 1-based index into loss_trace; 0 for frozen inference
  double runtime_s = 0.0;
  std::optional<metrics::MetricReport> metrics;
  bool degraded = false;
  std::string degraded_reason;
  ParamStore tuned;  // fine-tuned parameters at the returned iterate (empty when frozen)
};

/// Relative-change rule on a loss trace L_1..L_t: stop once t >= max(2,
/// min_iters) and |L_t - L_{t-1}| / max(|L_{t-1}|, eps) < rel_tol, or at
/// max_iters.
inline bool should_stop(const std::vector<double>& trace, const FinetuneConfig& cfg) {
  const std::size_t t = trace.size();
  if (t >= std::size_t(cfg.max_iters)) return true;
  if (t < 2 || t < std::size_t(cfg.min_iters)) return false;
  const double prev = trace[t - 2];
  return std::abs(trace[t - 1] - prev) / std::max(std::abs(prev), 1e-12) < cfg.rel_tol;
}

namespace detail {

/// Everything about one pair that does not depend on the field head: the
/// frozen trunk features, the masks and the constant F-side GAN term.
class TransferProblem {
 public:
  TransferProblem(const SarModel& m, const Image& flt, const Image& ref,
                  const std::optional<PairMasks>& masks)
      : model_(m), flt_img_(flt) {
    require(flt.same_shape(ref), "register: images differ in shape (resample first)");
    require(flt.height() == m.config.height && flt.width() == m.config.width,
            "register: image size does not match the model");
    if (masks) {
      require(masks->flt.same_shape(flt) && masks->ref.same_shape(ref),
              "register: mask shape mismatch");
      flt_mask_ = masks->flt;
      ref_mask_ = masks->ref;
    } else {
      flt_mask_ = fused_mask(m, flt);
      ref_mask_ = fused_mask(m, ref);
    }
    flt_ = ad::constant(to_tensor(std::vector<const Image*>{&flt}));
    ref_ = ad::constant(to_tensor(std::vector<const Image*>{&ref}));
    flt_seg_ = ad::constant(to_tensor(std::vector<const SegMask*>{&flt_mask_}));
    ref_seg_ = ad::constant(to_tensor(std::vector<const SegMask*>{&ref_mask_}));
    const net::Ctx c{m.params, nullptr, false};
    features_ = ops::detach(generator_trunk(c, m.config.generator, "G", flt_, ref_).features);
    const auto fp = generator_pass(c, m.config.generator, "F", ref_, flt_);
    const DiscriminatorInput in_x{fp.trans, flt_, ops::warp(ref_seg_, fp.def_recv), flt_seg_,
                                  fp.def_recv, std::nullopt};
    adv_f_ = ops::detach(ops::mean_all(loss::neg_log_prob(
        ops::sigmoid(discriminator_logit(c, m.config, "D_flt", in_x)))));
  }

  struct Eval {
    ad::Var loss;
    Tensor def_recv;
  };

  /// Loss at the current head parameters of `params`.
  Eval evaluate(const ParamStore& params) const {
    const net::Ctx c{params, nullptr, false};
    const ad::Var def_recv = generator_head(c, model_.config.generator, "G", features_);
    const ad::Var trans = ops::warp(flt_, def_recv);
    const ad::Var seg_trans = ops::warp(flt_seg_, def_recv);
    const DiscriminatorInput in_y{trans, ref_, seg_trans, ref_seg_, def_recv, std::nullopt};
    const ad::Var adv_g = ops::mean_all(
        loss::neg_log_prob(ops::sigmoid(discriminator_logit(c, model_.config, "D_ref", in_y))));
    const auto terms = adversarial_total(adv_g, adv_f_, seg_trans, ref_seg_, def_recv,
                                         std::nullopt, model_.config.generator.field_scale);
    return {terms.total(), def_recv.value()};
  }

  /// Final outputs for a recovered field.
  void fill(RegistrationResult& r, const Tensor& def_recv) const {
    r.def_recv = field_from_tensor(def_recv);
    r.trans = warp(flt_img_, r.def_recv);
    r.seg_trans = warp(flt_mask_, r.def_recv);
    r.seg_ref = ref_mask_;
  }

 private:
  const SarModel& model_;
  Image flt_img_;
  SegMask flt_mask_, ref_mask_;
  ad::Var flt_, ref_, flt_seg_, ref_seg_, features_, adv_f_;
};

inline double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

inline void attach_metrics(RegistrationResult& r, const std::string& case_id, const Image& ref,
                           const std::optional<PairMasks>& masks) {
  if (masks) {
    r.metrics = metrics::evaluate(case_id, ref, r.trans, masks->ref, r.seg_trans, r.runtime_s);
  }
}

}  // namespace detail

/// Single inference-mode forward pass; equals the state fine-tuning starts
/// from (its first loss evaluation).
inline RegistrationResult register_frozen(const SarModel& trained, const Image& flt,
                                          const Image& ref,
                                          const std::optional<PairMasks>& masks = std::nullopt,
                                          const std::string& case_id = "case") {
  const auto t0 = std::chrono::steady_clock::now();
  const detail::TransferProblem problem(trained, flt, ref, masks);
  RegistrationResult r;
  problem.fill(r, problem.evaluate(trained.params).def_recv);
  r.runtime_s = detail::seconds_since(t0);
  detail::attach_metrics(r, case_id, ref, masks);
  return r;
}

/// Fine-tunes a private copy of the model on one pair, updating only the
/// transfer layer, and returns the lowest-loss iterate.
inline RegistrationResult finetune_register(const SarModel& trained, const Image& flt,
                                            const Image& ref, const FinetuneConfig& cfg,
                                            const std::optional<PairMasks>& masks = std::nullopt,
                                            const std::string& case_id = "case") {
  cfg.validate();
  const auto t0 = std::chrono::steady_clock::now();
  ParamStore params = trained.params;
  params.freeze_all_except(kTransferLayer);
  const detail::TransferProblem problem(trained, flt, ref, masks);
  const AdamConfig adam{cfg.lr, cfg.beta1, cfg.beta2, 1e-8};
  auto in_layer = [](const Parameter& p) { return p.layer() == kTransferLayer; };

  RegistrationResult r;
  Tensor best_field;
  ParamStore best_params;
  double best = std::numeric_limits<double>::infinity();
  while (true) {
    const auto e = problem.evaluate(params);
    const double loss = e.loss.item();
    if (!std::isfinite(loss)) {
      r.degraded = true;
      r.degraded_reason = "non-finite fine-tuning loss at iteration " +
                          std::to_string(r.loss_trace.size() + 1);
      break;
    }
    r.loss_trace.push_back(loss);
    if (loss < best) {
      best = loss;
      best_field = e.def_recv;
      best_params = params;
      r.best_iter = int(r.loss_trace.size());
    }
    if (should_stop(r.loss_trace, cfg)) break;
    params.zero_grad();
    ad::backward(e.loss);
    adam_step(params, adam, in_layer);
    params.zero_grad();
  }
  r.iters_used = int(r.loss_trace.size());
  if (r.loss_trace.empty()) {
    // Nothing finite to return: fall back to the frozen prediction.
    best_field = problem.evaluate(trained.params).def_recv;
    best_params = trained.params;
  }
  problem.fill(r, best_field);
  r.tuned = std::move(best_params);
  r.runtime_s = detail::seconds_since(t0);
  detail::attach_metrics(r, case_id, ref, masks);
  return r;
}

/// Writes trans.pgm, def_recv.sart, seg_trans.pgm, seg_ref.pgm,
/// loss_trace.csv, metrics.csv (when available) and overlay.ppm.
inline void write_result(const std::filesystem::path& dir, const RegistrationResult& r,
                         const Image& ref) {
  std::filesystem::create_directories(dir);
  io::save_pgm(dir / "trans.pgm", r.trans, 16);
  io::save_sart(dir / "def_recv.sart", {io::to_sart(r.def_recv)});
  io::save_pgm(dir / "seg_trans.pgm", r.seg_trans);
  io::save_pgm(dir / "seg_ref.pgm", r.seg_ref);
  {
    std::ofstream os(dir / "loss_trace.csv");
    os << "iteration,loss\n";
    os.precision(17);
    for (std::size_t i = 0; i < r.loss_trace.size(); ++i) os << i + 1 << ',' << r.loss_trace[i] << '\n';
  }
  if (r.metrics) {
    std::ofstream os(dir / "metrics.csv");
    os << metrics::MetricReport::csv_header() << '\n' << r.metrics->csv_row() << '\n';
  }
  io::save_overlay_ppm(dir / "overlay.ppm", ref, r.seg_ref, r.seg_trans);
}

}  // namespace sarreg

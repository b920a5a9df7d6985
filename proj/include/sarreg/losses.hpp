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

// Training objectives. Every term is a penalty that reaches 0 at perfect
// alignment; batch expectations are minibatch means.

#include <cmath>
#include <functional>
#include <limits>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>

#include "sarreg/ops.hpp"
#include "sarreg/perceptual.hpp"

namespace sarreg {

inline constexpr double kLambdaCycle = 10.0;
inline constexpr double kLogEps = 1e-6;
inline constexpr double kProbClamp = 1e-7;

struct LossBreakdown {
  double content_nmi = 0;
  double content_ssim = 0;
  double content_vgg = 0;
  double adv_g = 0;
  double adv_f = 0;
  double adv_dice = 0;
  double adv_field = 0;
  double cycle = 0;
  double total = 0;
  double lambda_cyc = kLambdaCycle;

  double recompose() const {
    return adv_g + adv_f + adv_dice + adv_field + content_nmi + content_ssim + content_vgg +
           lambda_cyc * cycle;
  }

  /// First non-finite component as (name, value), if any.
  std::optional<std::pair<std::string, double>> non_finite_component() const {
    const std::pair<const char*, double> parts[] = {
        {"content_nmi", content_nmi}, {"content_ssim", content_ssim},
        {"content_vgg", content_vgg}, {"adv_g", adv_g},
        {"adv_f", adv_f},             {"adv_dice", adv_dice},
        {"adv_field", adv_field},     {"cycle", cycle},
        {"total", total}};
    for (const auto& [name, v] : parts) {
      if (!std::isfinite(v)) return std::pair<std::string, double>{name, v};
    }
    return std::nullopt;
  }

  static std::string csv_header() {
    return "step,content_nmi,content_ssim,content_vgg,adv_g,adv_f,adv_dice,adv_field,cycle,"
           "total,wall_time_s";
  }
  std::string csv_row(long step, double wall_time_s) const {
    std::ostringstream os;
    os.precision(17);
    os << step << ',' << content_nmi << ',' << content_ssim << ',' << content_vgg << ','
       << adv_g << ',' << adv_f << ',' << adv_dice << ',' << adv_field << ',' << cycle << ','
       << total << ',' << wall_time_s;
    return os.str();
  }
};

namespace loss {

/// -log(clamp(p)) with the probability clamp shared by all GAN terms.
inline ad::Var neg_log_prob(const ad::Var& p) {
  return ops::scale(ops::log_clamped(p, kProbClamp, 1.0 - kProbClamp), -1.0);
}

/// -log(1 - clamp(p)).
inline ad::Var neg_log_complement(const ad::Var& p) {
  return neg_log_prob(ops::add_scalar(ops::scale(p, -1.0), 1.0));
}

}  // namespace loss

// ---------------------------------------------------------------- content

struct ContentTerms {
  ad::Var nmi;   // 1 - soft NMI
  ad::Var ssim;  // 1 - SSIM, SSIM clamped to [-1, 1]
  ad::Var vgg;
  ad::Var total() const { return ops::add(ops::add(nmi, ssim), vgg); }
};

/// Batch-mean content terms between reference and registered images.
inline ContentTerms content_terms(const ad::Var& ref, const ad::Var& trans,
                                  const FeatureExtractor& extractor) {
  require(ref.shape() == trans.shape(), "content_loss: shape mismatch");
  ContentTerms t;
  t.nmi = ops::mean_all(ops::add_scalar(ops::scale(ops::soft_nmi(ref, trans), -1.0), 1.0));
  // SSIM of [0,1] images is already in [-1, 1]; the window statistics cannot
  // leave that range, so no clamp node is needed.
  t.ssim = ops::mean_all(ops::add_scalar(ops::scale(ops::ssim(ref, trans), -1.0), 1.0));
  t.vgg = ops::mean_all(vgg_distance(extractor.features(ref), extractor.features(trans)));
  return t;
}

struct ContentLoss {
  double nmi = 0;
  double ssim = 0;
  double vgg = 0;
  double total = 0;
};

inline ContentLoss content_loss(const Image& ref, const Image& trans,
                                const FeatureExtractor& extractor) {
  require(ref.same_shape(trans), "content_loss: images differ in shape");
  const auto t = content_terms(ad::constant(to_tensor(std::vector<const Image*>{&ref})),
                               ad::constant(to_tensor(std::vector<const Image*>{&trans})),
                               extractor);
  return {t.nmi.item(), t.ssim.item(), t.vgg.item(), t.total().item()};
}

// -------------------------------------------------------------------- GAN

struct GanLoss {
  ad::Var loss_d;  // -[log d_real + log(1 - d_fake)]
  ad::Var loss_g;  // -log d_fake
};

inline GanLoss gan_loss(const ad::Var& d_real, const ad::Var& d_fake) {
  return {ops::mean_all(ops::add(loss::neg_log_prob(d_real), loss::neg_log_complement(d_fake))),
          ops::mean_all(loss::neg_log_prob(d_fake))};
}

inline std::pair<double, double> gan_loss(double d_real, double d_fake) {
  const auto l = gan_loss(ad::constant(Tensor::scalar(d_real)), ad::constant(Tensor::scalar(d_fake)));
  return {l.loss_d.item(), l.loss_g.item()};
}

// ------------------------------------------------------------------ cycle

using Mapping = std::function<ad::Var(const ad::Var&)>;

/// mean|F(G(x)) - x| + mean|G(F(y)) - y|.
inline ad::Var cycle_loss(const ad::Var& x, const ad::Var& y, const Mapping& g, const Mapping& f) {
  return ops::add(ops::mean_all(ops::mean_abs_diff(f(g(x)), x)),
                  ops::mean_all(ops::mean_abs_diff(g(f(y)), y)));
}

// ------------------------------------------------------------ adversarial

namespace loss {

/// -log(max(x, eps)): exactly 0 at x = 1, at most -log(eps) otherwise.
inline ad::Var neg_log_floor(const ad::Var& x) {
  return ops::scale(ops::log_clamped(x, kLogEps, std::numeric_limits<double>::max()), -1.0);
}

}  // namespace loss

/// -log(max(soft_dice(seg_ref, seg_trans), eps)), batch mean.
inline ad::Var dice_term(const ad::Var& seg_ref, const ad::Var& seg_trans) {
  return ops::mean_all(loss::neg_log_floor(ops::soft_dice(seg_ref, seg_trans)));
}

/// -log(max(1 - mse_norm(def_app, def_recv), eps)), batch mean.
inline ad::Var field_term(const ad::Var& def_app, const ad::Var& def_recv, double d_max) {
  ad::Var agreement = ops::add_scalar(ops::scale(ops::mse_norm(def_app, def_recv, d_max), -1.0), 1.0);
  return ops::mean_all(loss::neg_log_floor(agreement));
}

struct AdversarialTerms {
  ad::Var adv_g;
  ad::Var adv_f;
  ad::Var dice;
  ad::Var field;  // exactly 0, with no graph, when def_app is absent
  ad::Var total() const { return ops::add(ops::add(adv_g, adv_f), ops::add(dice, field)); }
};

inline AdversarialTerms adversarial_total(const ad::Var& adv_g, const ad::Var& adv_f,
                                          const ad::Var& seg_trans, const ad::Var& seg_ref,
                                          const ad::Var& def_recv,
                                          const std::optional<ad::Var>& def_app,
                                          double d_max) {
  AdversarialTerms t{adv_g, adv_f, dice_term(seg_ref, seg_trans), {}};
  t.field = def_app ? field_term(*def_app, def_recv, d_max) : ad::constant(Tensor::scalar(0.0));
  return t;
}

// ------------------------------------------------------------------- total

struct ObjectiveTerms {
  ContentTerms content;
  AdversarialTerms adversarial;
  ad::Var cycle;
  double lambda_cyc = kLambdaCycle;
};

struct Objective {
  ad::Var total;
  LossBreakdown breakdown;
};

inline Objective full_objective(const ObjectiveTerms& t) {
  Objective o;
  o.total = ops::add(ops::add(t.adversarial.total(), t.content.total()),
                     ops::scale(t.cycle, t.lambda_cyc));
  auto& b = o.breakdown;
  b.content_nmi = t.content.nmi.item();
  b.content_ssim = t.content.ssim.item();
  b.content_vgg = t.content.vgg.item();
  b.adv_g = t.adversarial.adv_g.item();
  b.adv_f = t.adversarial.adv_f.item();
  b.adv_dice = t.adversarial.dice.item();
  b.adv_field = t.adversarial.field.item();
  b.cycle = t.cycle.item();
  b.lambda_cyc = t.lambda_cyc;
  b.total = o.total.item();
  return o;
}

/// Breakdown from already-evaluated component values.
inline LossBreakdown compose_breakdown(LossBreakdown parts) {
  parts.total = parts.recompose();
  return parts;
}

}  // namespace sarreg

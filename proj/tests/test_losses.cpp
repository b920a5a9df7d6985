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

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>

#include "sarreg/sarreg.hpp"
#include "support.hpp"

namespace sarreg {
namespace {

using namespace sarreg::testing;

ad::Var img_var(const Image& img) { return ad::constant(image_tensor({img})); }
ad::Var mask_var(const SegMask& m) { return ad::constant(mask_tensor({m})); }

TEST(SoftNmi, SelfSimilarityAndHardAgreement) {
  for (int trial = 0; trial < 5; ++trial) {
    Rng rng(20 + trial);
    const Image a = smooth_image(64, 64, rng), b = smooth_image(64, 64, rng);
    EXPECT_GE(ops::soft_nmi(img_var(a), img_var(a)).item(), 0.99);
    const double soft = ops::soft_nmi(img_var(a), img_var(b)).item();
    EXPECT_NEAR(soft, metrics::nmi(a, b, 32), 0.05) << "trial " << trial;
    const Image c = warp(a, random_elastic_deformation(64, 64, 16, 2.0, 4.0, trial));
    EXPECT_NEAR(ops::soft_nmi(img_var(a), img_var(c)).item(), metrics::nmi(a, c, 32), 0.05);
  }
}

TEST(SoftDice, IdentityDisjointAndHardAgreement) {
  const SegMask a = rect_mask(16, 16, 2, 2, 9, 9);
  EXPECT_NEAR(ops::soft_dice(mask_var(a), mask_var(a)).item(), 1.0, 1e-12);
  EXPECT_LT(ops::soft_dice(mask_var(a), mask_var(rect_mask(16, 16, 10, 10, 15, 15))).item(), 1e-6);
  for (int trial = 0; trial < 50; ++trial) {
    Rng rng(900 + trial);
    const SegMask p = random_mask(16, 16, rng), q = random_mask(16, 16, rng);
    EXPECT_NEAR(ops::soft_dice(mask_var(p), mask_var(q)).item(), metrics::dice(p, q), 1e-4);
  }
}

TEST(ContentLoss, VanishesOnIdenticalImagesAndGrowsWithDeformation) {
  const FeatureExtractor ex;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(1000 + seed);
    const Image ref = smooth_image(64, 64, rng, 6);
    const auto same = content_loss(ref, ref, ex);
    EXPECT_EQ(same.ssim, 0.0);
    EXPECT_EQ(same.vgg, 0.0);
    EXPECT_LT(same.nmi, 0.01);
    const auto f = random_elastic_deformation(64, 64, 16, 5.0, 10.0, seed);
    ASSERT_GE(f.max_abs(), 5.0);
    const auto moved = content_loss(ref, warp(ref, f), ex);
    EXPECT_LT(same.total, moved.total) << "seed " << seed;
    EXPECT_GE(moved.nmi, 0.0);
    EXPECT_GE(moved.ssim, 0.0);
    EXPECT_LE(moved.ssim, 2.0);
    EXPECT_GE(moved.vgg, 0.0);
  }
  EXPECT_THROW(content_loss(Image(16, 16), Image(16, 32), ex), ContractViolation);
}

TEST(GanLoss, Examples) {
  const auto [d_perfect, g_perfect] = gan_loss(1 - 1e-7, 1e-7);
  EXPECT_LT(d_perfect, 1e-6);
  EXPECT_NEAR(g_perfect, -std::log(1e-7), 1e-9);
  const auto [d_half, g_half] = gan_loss(0.5, 0.5);
  EXPECT_NEAR(d_half, 2 * std::log(2.0), 1e-12);
  EXPECT_NEAR(g_half, std::log(2.0), 1e-12);
  for (auto [r, f] : {std::pair{0.0, 1.0}, std::pair{1.0, 0.0}, std::pair{0.0, 0.0}}) {
    const auto [d, g] = gan_loss(r, f);
    EXPECT_TRUE(std::isfinite(d));
    EXPECT_TRUE(std::isfinite(g));
  }
}

TEST(CycleLoss, IdentityAndConstantShift) {
  const ad::Var x = ad::constant(Tensor({1, 1, 2, 2}, {0.1, 0.2, 0.3, 0.4}));
  const ad::Var y = ad::constant(Tensor({1, 1, 2, 2}, {0.5, 0.6, 0.7, 0.9}));
  const Mapping id = [](const ad::Var& v) { return v; };
  EXPECT_EQ(cycle_loss(x, y, id, id).item(), 0.0);
  const Mapping g = [](const ad::Var& v) { return ops::add_scalar(v, 0.1); };
  const Mapping f = [](const ad::Var& v) { return ops::add_scalar(v, -0.05); };
  // |x + 0.1 - 0.05 - x| = 0.05 on both legs.
  EXPECT_NEAR(cycle_loss(x, y, g, f).item(), 0.1, 1e-15);
}

TEST(CycleLoss, ZeroForFreshGenerators) {
  SarModel m = make_model(tiny_model_config(16), 1);
  Rng rng(2);
  const ad::Var x = img_var(smooth_image(16, 16, rng)), y = img_var(smooth_image(16, 16, rng));
  const net::Ctx c{m.params, nullptr, false};
  const Mapping g = [&](const ad::Var& v) { return generator_pass(c, m.config.generator, "G", v, y).trans; };
  const Mapping f = [&](const ad::Var& v) { return generator_pass(c, m.config.generator, "F", v, x).trans; };
  EXPECT_EQ(cycle_loss(x, y, g, f).item(), 0.0);
}

TEST(AdversarialTotal, FixedPointsAndClamps) {
  const SegMask a = rect_mask(16, 16, 3, 3, 10, 12);
  Rng rng(3);
  const DisplacementField f = random_field(16, 16, 4, rng);
  const ad::Var fv = ad::constant(to_tensor(std::vector<const DisplacementField*>{&f}));
  const ad::Var zero = ad::constant(Tensor::scalar(0.0));
  const auto t = adversarial_total(zero, zero, mask_var(a), mask_var(a), fv, fv, 20.0);
  EXPECT_EQ(t.dice.item(), 0.0);
  EXPECT_EQ(t.field.item(), 0.0);
  EXPECT_EQ(t.total().item(), 0.0);
  const auto disjoint = adversarial_total(zero, zero, mask_var(rect_mask(16, 16, 12, 12, 16, 16)),
                                          mask_var(a), fv, std::nullopt, 20.0);
  EXPECT_NEAR(disjoint.dice.item(), -std::log(kLogEps), 1e-12);
  EXPECT_EQ(disjoint.field.item(), 0.0);
  const DisplacementField far = constant_field(16, 16, 1e3, -1e3);
  const auto worst = adversarial_total(
      zero, zero, mask_var(SegMask(16, 16)), mask_var(SegMask(16, 16)), fv,
      ad::constant(to_tensor(std::vector<const DisplacementField*>{&far})), 20.0);
  EXPECT_TRUE(std::isfinite(worst.field.item()));
  EXPECT_NEAR(worst.field.item(), -std::log(kLogEps), 1e-12);
  EXPECT_TRUE(std::isfinite(worst.dice.item()));
}

TEST(FullObjective, ComposesWithLambdaTen) {
  const auto s = [](double v) { return ad::constant(Tensor::scalar(v)); };
  ObjectiveTerms t;
  t.content = {s(0.1), s(0.15), s(0.05)};
  t.adversarial = {s(0.2), s(0.1), s(0.06), s(0.04)};
  t.cycle = s(0.02);
  const auto o = full_objective(t);
  EXPECT_NEAR(o.total.item(), 0.4 + 0.3 + 10 * 0.02, 1e-12);
  EXPECT_NEAR(o.breakdown.recompose(), o.breakdown.total, 1e-9);
  EXPECT_EQ(o.breakdown.lambda_cyc, 10.0);
  ObjectiveTerms z{{s(0), s(0), s(0)}, {s(0), s(0), s(0), s(0)}, s(0)};
  EXPECT_EQ(full_objective(z).total.item(), 0.0);
}

TEST(LossBreakdown, NamesNonFiniteComponentAndWritesCsv) {
  LossBreakdown b;
  b.cycle = 0.5;
  b = compose_breakdown(b);
  EXPECT_EQ(b.total, 5.0);
  EXPECT_FALSE(b.non_finite_component());
  b.adv_dice = std::nan("");
  ASSERT_TRUE(b.non_finite_component());
  EXPECT_EQ(b.non_finite_component()->first, "adv_dice");
  const std::string row = compose_breakdown(LossBreakdown{}).csv_row(3, 1.5);
  const std::string header = LossBreakdown::csv_header();
  EXPECT_EQ(std::count(row.begin(), row.end(), ','), std::count(header.begin(), header.end(), ','));
}

// ------------------------------------------------------------ gradients

/// 8x8 pair, tiny model with perturbed heads, and helpers to rebuild the
/// loss graph from the current parameter values.
struct GradFixture {
  SarModel m = make_model(tiny_model_config(8), 31);
  FeatureExtractor ex{tiny_extractor_config()};
  Image flt, ref;
  SegMask flt_seg = rect_mask(8, 8, 1, 2, 6, 7), ref_seg = rect_mask(8, 8, 2, 1, 7, 6);
  DisplacementField app;

  GradFixture() {
    randomize_heads(m, 32, 0.02);
    Rng rng(33);
    flt = smooth_image(8, 8, rng, 3);
    ref = smooth_image(8, 8, rng, 3);
    app = random_field(8, 8, 1.5, rng);
  }
  net::Ctx ctx() const { return {m.params, nullptr, false}; }
  GeneratorPass g_pass() const {
    return generator_pass(ctx(), m.config.generator, "G", img_var(flt), img_var(ref));
  }
};

TEST(Gradients, SoftNmiWrtFieldHead) {
  GradFixture fx;
  const auto r = check_gradient(fx.m.params, head_params(), [&] {
    return ops::mean_all(ops::soft_nmi(img_var(fx.ref), fx.g_pass().trans));
  });
  EXPECT_GT(r.grad_norm, 1e-6);
  EXPECT_LT(r.rel_error, 1e-3);
}

TEST(Gradients, SoftDiceWrtFieldHead) {
  GradFixture fx;
  const auto r = check_gradient(fx.m.params, head_params(), [&] {
    return ops::mean_all(ops::soft_dice(mask_var(fx.ref_seg),
                                        ops::warp(mask_var(fx.flt_seg), fx.g_pass().def_recv)));
  });
  EXPECT_GT(r.grad_norm, 1e-6);
  EXPECT_LT(r.rel_error, 1e-3);
}

TEST(Gradients, ContentLossWrtFieldHead) {
  GradFixture fx;
  const auto r = check_gradient(fx.m.params, head_params(), [&] {
    return content_terms(img_var(fx.ref), fx.g_pass().trans, fx.ex).total();
  });
  EXPECT_GT(r.grad_norm, 1e-6);
  EXPECT_LT(r.rel_error, 1e-3);
}

TEST(Gradients, CycleLossWrtFieldHead) {
  GradFixture fx;
  const auto x = img_var(fx.flt), y = img_var(fx.ref);
  const auto r = check_gradient(fx.m.params, head_params(), [&] {
    const auto c = fx.ctx();
    const Mapping g = [&](const ad::Var& v) { return generator_pass(c, fx.m.config.generator, "G", v, y).trans; };
    const Mapping f = [&](const ad::Var& v) { return generator_pass(c, fx.m.config.generator, "F", v, x).trans; };
    return cycle_loss(x, y, g, f);
  });
  EXPECT_GT(r.grad_norm, 1e-6);
  EXPECT_LT(r.rel_error, 1e-3);
}

TEST(Gradients, AdversarialTotalWrtFieldHead) {
  GradFixture fx;
  const auto app = ad::constant(to_tensor(std::vector<const DisplacementField*>{&fx.app}));
  const auto r = check_gradient(fx.m.params, head_params(), [&] {
    const auto p = fx.g_pass();
    const auto seg = ops::warp(mask_var(fx.flt_seg), p.def_recv);
    const DiscriminatorInput in{p.trans, img_var(fx.ref), seg, mask_var(fx.ref_seg), p.def_recv, app};
    const auto prob = ops::sigmoid(discriminator_logit(fx.ctx(), fx.m.config, "D_ref", in));
    const auto adv = ops::mean_all(loss::neg_log_prob(prob));
    return adversarial_total(adv, adv, seg, mask_var(fx.ref_seg), p.def_recv, app,
                             fx.m.config.generator.field_scale).total();
  });
  EXPECT_GT(r.grad_norm, 1e-6);
  EXPECT_LT(r.rel_error, 1e-3);
}

TEST(Gradients, FieldTermAbsentContributesNothing) {
  GradFixture fx;
  const auto p = fx.g_pass();
  const auto t = adversarial_total(ad::constant(Tensor::scalar(0.3)), ad::constant(Tensor::scalar(0.2)),
                                   ops::warp(mask_var(fx.flt_seg), p.def_recv), mask_var(fx.ref_seg),
                                   p.def_recv, std::nullopt, 20.0);
  EXPECT_EQ(t.field.item(), 0.0);
  EXPECT_FALSE(t.field.requires_grad());
}

}  // namespace
}  // namespace sarreg

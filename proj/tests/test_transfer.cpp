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
#include <filesystem>
#include <limits>

#include "sarreg/sarreg.hpp"
#include "support.hpp"

namespace sarreg {
namespace {

using namespace sarreg::testing;

struct TransferFixture {
  SarModel model = make_model(tiny_model_config(32), 80);
  TrainingPair pair;
  PairMasks masks;

  TransferFixture() {
    randomize_heads(model, 81, 0.02);
    DomainSpec s;
    s.height = s.width = 32;
    s.patients = 2;
    s.seed = 82;
    const auto cases = synth_cases(s);
    SynthConfig sc;
    sc.spacing = 8;
    sc.max_disp = 4.0;
    pair = make_training_pair(cases[0].image, cases[0].mask, cases[1].image, cases[1].mask, sc, 83);
    masks = {pair.flt_seg, pair.ref_seg};
  }
};

FinetuneConfig fixed_iters(int n) {
  FinetuneConfig c;
  c.min_iters = n;  // the tolerance cannot fire before the cap
  c.max_iters = n;
  return c;
}

TEST(ShouldStop, StopsOnSubPercentChange) {
  FinetuneConfig cfg;
  std::vector<double> trace{10.0, 8.0, 6.0, 5.0};
  EXPECT_FALSE(should_stop(trace, cfg));
  trace.push_back(5.0 * (1.0 - 0.009));
  EXPECT_TRUE(should_stop(trace, cfg));
  EXPECT_FALSE(should_stop({4.0, 4.0 * 0.99 - 1e-9}, cfg));
}

TEST(ShouldStop, NeedsTwoPointsAndHonoursCaps) {
  FinetuneConfig cfg;
  EXPECT_FALSE(should_stop({}, cfg));
  EXPECT_FALSE(should_stop({1.0}, cfg));
  EXPECT_TRUE(should_stop({1.0, 1.0}, cfg));
  cfg.min_iters = 4;
  EXPECT_FALSE(should_stop({1.0, 1.0, 1.0}, cfg));
  EXPECT_TRUE(should_stop({1.0, 1.0, 1.0, 1.0}, cfg));
  cfg.max_iters = 3;
  cfg.min_iters = 1;
  EXPECT_TRUE(should_stop({3.0, 2.0, 1.0}, cfg));
  // Zero previous loss falls back to the epsilon denominator.
  EXPECT_TRUE(should_stop({0.0, 0.0}, FinetuneConfig{}));
}

TEST(Finetune, MutatesOnlyTheTransferLayer) {
  TransferFixture fx;
  const ParamStore pristine = fx.model.params;
  const auto r = finetune_register(fx.model, fx.pair.flt, fx.pair.ref, fixed_iters(6), fx.masks);
  EXPECT_TRUE(changed_parameters(pristine, fx.model.params).empty());
  ASSERT_GT(r.best_iter, 1) << "no Adam step reached the returned iterate";
  const auto changed = changed_parameters(fx.model.params, r.tuned);
  EXPECT_FALSE(changed.empty());
  for (const auto& name : changed) {
    EXPECT_EQ(r.tuned.at(name).layer(), kTransferLayer) << name;
  }
}

TEST(Finetune, ReturnsTheBestIterate) {
  TransferFixture fx;
  const auto r = finetune_register(fx.model, fx.pair.flt, fx.pair.ref, fixed_iters(8), fx.masks);
  ASSERT_EQ(r.iters_used, 8);
  ASSERT_EQ(r.loss_trace.size(), 8u);
  const auto best = std::min_element(r.loss_trace.begin(), r.loss_trace.end());
  EXPECT_EQ(r.best_iter, int(best - r.loss_trace.begin()) + 1);
  // The returned field is the one the returned parameters produce.
  SarModel tuned = fx.model;
  tuned.params = r.tuned;
  const auto again = register_frozen(tuned, fx.pair.flt, fx.pair.ref, fx.masks);
  EXPECT_EQ(again.def_recv, r.def_recv);
  EXPECT_EQ(again.trans.pixels(), r.trans.pixels());
}

TEST(Finetune, StopsWithinCapAndIsDeterministic) {
  TransferFixture fx;
  FinetuneConfig cfg;
  const auto a = finetune_register(fx.model, fx.pair.flt, fx.pair.ref, cfg, fx.masks);
  const auto b = finetune_register(fx.model, fx.pair.flt, fx.pair.ref, cfg, fx.masks);
  EXPECT_GE(a.iters_used, cfg.min_iters);
  EXPECT_LE(a.iters_used, cfg.max_iters);
  EXPECT_EQ(a.loss_trace, b.loss_trace);
  EXPECT_EQ(a.def_recv, b.def_recv);
  EXPECT_TRUE(should_stop(a.loss_trace, cfg));
  std::vector<double> shorter(a.loss_trace.begin(), a.loss_trace.end() - 1);
  EXPECT_FALSE(should_stop(shorter, cfg));
}

TEST(RegisterFrozen, EqualsTheFirstFinetuneEvaluation) {
  TransferFixture fx;
  const auto frozen = register_frozen(fx.model, fx.pair.flt, fx.pair.ref, fx.masks);
  const auto one = finetune_register(fx.model, fx.pair.flt, fx.pair.ref, fixed_iters(1), fx.masks);
  EXPECT_EQ(frozen.iters_used, 0);
  EXPECT_EQ(one.iters_used, 1);
  EXPECT_EQ(frozen.def_recv, one.def_recv);
  EXPECT_EQ(frozen.trans.pixels(), one.trans.pixels());
  EXPECT_EQ(frozen.seg_trans.pixels(), one.seg_trans.pixels());
  EXPECT_GT(frozen.runtime_s, 0.0);
  EXPECT_GT(one.runtime_s, 0.0);
  const auto again = register_frozen(fx.model, fx.pair.flt, fx.pair.ref, fx.masks);
  EXPECT_EQ(again.trans.pixels(), frozen.trans.pixels());
  ASSERT_TRUE(frozen.metrics.has_value());
  EXPECT_EQ(frozen.metrics->dice, metrics::dice(fx.pair.ref_seg, frozen.seg_trans));
}

TEST(RegisterFrozen, UsesFusedMasksWithoutGroundTruth) {
  TransferFixture fx;
  const auto r = register_frozen(fx.model, fx.pair.flt, fx.pair.ref);
  EXPECT_EQ(r.seg_ref.pixels(), fused_mask(fx.model, fx.pair.ref).pixels());
  EXPECT_EQ(r.seg_trans.pixels(), warp(fused_mask(fx.model, fx.pair.flt), r.def_recv).pixels());
  EXPECT_FALSE(r.metrics.has_value());
}

TEST(RegisterFrozen, RejectsMismatchedInputs) {
  TransferFixture fx;
  EXPECT_THROW(register_frozen(fx.model, fx.pair.flt, Image(32, 28)), ContractViolation);
  EXPECT_THROW(register_frozen(fx.model, Image(16, 16), Image(16, 16)), ContractViolation);
  FinetuneConfig bad;
  bad.max_iters = 0;
  EXPECT_THROW(finetune_register(fx.model, fx.pair.flt, fx.pair.ref, bad), ContractViolation);
}

TEST(Finetune, NonFiniteLossIsFlaggedDegraded) {
  TransferFixture fx;
  fx.model.params.at("D_ref.dense2.bias").mutable_value()[0] =
      std::numeric_limits<double>::quiet_NaN();
  const auto r = finetune_register(fx.model, fx.pair.flt, fx.pair.ref, FinetuneConfig{}, fx.masks);
  EXPECT_TRUE(r.degraded);
  EXPECT_FALSE(r.degraded_reason.empty());
  EXPECT_TRUE(r.loss_trace.empty());
  EXPECT_EQ(r.trans.height(), 32);
}

TEST(WriteResult, WritesAllArtifacts) {
  TransferFixture fx;
  const auto dir = std::filesystem::temp_directory_path() / "sarreg_result";
  std::filesystem::remove_all(dir);
  const auto r = finetune_register(fx.model, fx.pair.flt, fx.pair.ref, fixed_iters(2), fx.masks);
  write_result(dir, r, fx.pair.ref);
  for (const char* f : {"trans.pgm", "def_recv.sart", "seg_trans.pgm", "seg_ref.pgm",
                        "loss_trace.csv", "metrics.csv", "overlay.ppm"}) {
    EXPECT_TRUE(std::filesystem::exists(dir / f)) << f;
  }
  const auto field = io::load_sart(dir / "def_recv.sart");
  ASSERT_EQ(field.size(), 1u);
  const auto back = io::field_from_sart(field[0]);
  ASSERT_EQ(back.size(), r.def_recv.size());
  for (std::size_t i = 0; i < back.size(); ++i) {
    // Fields are stored as float32.
    EXPECT_NEAR(back.dy_plane()[i], r.def_recv.dy_plane()[i], 1e-5);
    EXPECT_NEAR(back.dx_plane()[i], r.def_recv.dx_plane()[i], 1e-5);
  }
  std::filesystem::remove_all(dir);
}

}  // namespace
}  // namespace sarreg

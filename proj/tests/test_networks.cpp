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

#include <cmath>
#include <filesystem>

#include "sarreg/sarreg.hpp"
#include "support.hpp"

namespace sarreg {
namespace {

using namespace sarreg::testing;

TEST(Configs, ValidationAndWidthSchedule) {
  EXPECT_THROW((GeneratorConfig{1, 4, 3, 20}.validate()), ContractViolation);
  EXPECT_THROW((GeneratorConfig{0, 16, 3, 20}.validate()), ContractViolation);
  EXPECT_THROW(make_model(ModelConfig::desk_scale(30, 32), 0), ContractViolation);
  const DiscriminatorConfig d;
  std::vector<int> widths, strides;
  for (int i = 0; i < d.n_conv; ++i) {
    widths.push_back(d.conv_width(i));
    strides.push_back(d.conv_stride(i));
  }
  EXPECT_EQ(widths, (std::vector<int>{64, 64, 128, 128, 256, 256, 512, 512}));
  EXPECT_EQ(strides, (std::vector<int>{1, 2, 1, 2, 1, 2, 1, 2}));
}

TEST(Model, LayoutHasOneTransferLayerAndUniformFusionWeights) {
  const SarModel m = make_model(ModelConfig::desk_scale(), 1);
  EXPECT_TRUE(m.params.contains(kTransferLayer + ".weight"));
  EXPECT_TRUE(m.params.contains(kTransferLayer + ".bias"));
  for (double v : m.params.at(kTransferLayer + ".weight").value().storage()) EXPECT_EQ(v, 0.0);
  const auto w = fusion_weights(m.params, "G");
  ASSERT_EQ(int(w.size()), m.config.generator.fusion_maps());
  for (double v : w) EXPECT_DOUBLE_EQ(v, 1.0 / double(w.size()));
  for (const char* p : {"F.head.conv.weight", "D_ref.dense2.weight", "D_flt.conv7.weight"}) {
    EXPECT_TRUE(m.params.contains(p)) << p;
  }
}

TEST(Generator, IdentityAtInitialisation) {
  const SarModel m = make_model(ModelConfig::desk_scale(), 2);
  Rng rng(3);
  const Image flt = smooth_image(64, 64, rng), ref = smooth_image(64, 64, rng);
  const auto out = generator_forward(m, flt, ref);
  EXPECT_EQ(out.def_recv.max_abs(), 0.0);
  EXPECT_EQ(out.trans, flt);
  EXPECT_EQ(out.trans.height(), 64);
  EXPECT_EQ(out.seg_trans.height(), 64);
  EXPECT_EQ(out.seg_trans, out.seg_flt);
  EXPECT_EQ(reverse_generator_forward(m, flt, ref), flt);
  EXPECT_EQ(reverse_generator_forward(m, out.trans, flt), flt);
}

TEST(Generator, FieldBoundedAndTransIsWarpedFloat) {
  SarModel m = make_model(tiny_model_config(16), 4);
  randomize_heads(m, 5, 3.0);
  Rng rng(6);
  const Image flt = smooth_image(16, 16, rng), ref = smooth_image(16, 16, rng);
  const auto out = generator_forward(m, flt, ref);
  EXPECT_GT(out.def_recv.max_abs(), 1.0);
  EXPECT_LE(out.def_recv.max_abs(), m.config.generator.field_scale);
  EXPECT_EQ(out.trans, warp(flt, out.def_recv));
  const SegMask gt = rect_mask(16, 16, 3, 3, 12, 12);
  EXPECT_EQ(generator_forward(m, flt, ref, &gt).seg_trans, warp(gt, out.def_recv));
}

TEST(Generator, ShapeViolations) {
  const SarModel m = make_model(tiny_model_config(16), 7);
  EXPECT_THROW(generator_forward(m, Image(16, 16), Image(16, 20)), ContractViolation);
  const SegMask bad(8, 8);
  EXPECT_THROW(generator_forward(m, Image(16, 16), Image(16, 16), &bad), ContractViolation);
  EXPECT_THROW(generator_forward(m, Image(18, 18), Image(18, 18)), ContractViolation);
}

DiscriminatorInput batch_input(int n, int size, std::uint64_t seed, bool with_app = true) {
  Rng rng(seed);
  std::vector<Image> a, b;
  std::vector<SegMask> ma, mb;
  std::vector<DisplacementField> fr, fa;
  for (int i = 0; i < n; ++i) {
    a.push_back(random_image(size, size, rng));
    b.push_back(random_image(size, size, rng));
    ma.push_back(random_mask(size, size, rng));
    mb.push_back(random_mask(size, size, rng));
    fr.push_back(random_field(size, size, 5, rng));
    fa.push_back(random_field(size, size, 5, rng));
  }
  std::vector<const DisplacementField*> pr, pa;
  for (int i = 0; i < n; ++i) {
    pr.push_back(&fr[i]);
    pa.push_back(&fa[i]);
  }
  DiscriminatorInput in{ad::constant(image_tensor(a)), ad::constant(image_tensor(b)),
                        ad::constant(mask_tensor(ma)), ad::constant(mask_tensor(mb)),
                        ad::constant(to_tensor(pr)), std::nullopt};
  if (with_app) in.def_app = ad::constant(to_tensor(pa));
  return in;
}

/// Sample `i` of every tensor in `in`.
DiscriminatorInput pick(const DiscriminatorInput& in, const std::vector<int>& order) {
  auto sel = [&](const ad::Var& v) {
    const Shape s = v.shape();
    Tensor t({int(order.size()), s.c, s.h, s.w});
    for (std::size_t k = 0; k < order.size(); ++k) {
      std::copy_n(v.value().sample(order[k]), s.per_sample(), t.sample(int(k)));
    }
    return ad::constant(std::move(t));
  };
  DiscriminatorInput out{sel(in.trans), sel(in.ref), sel(in.seg_trans), sel(in.seg_ref),
                         sel(in.def_recv), std::nullopt};
  if (in.def_app) out.def_app = sel(*in.def_app);
  return out;
}

TEST(Discriminator, OutputInUnitIntervalAndDeterministic) {
  const SarModel m = make_model(ModelConfig::desk_scale(32, 32), 8);
  const auto in = batch_input(3, 32, 9);
  const Tensor p = discriminator_forward(m, "D_ref", in).value();
  EXPECT_EQ(p.shape(), (Shape{3, 1, 1, 1}));
  for (double v : p.storage()) {
    EXPECT_GT(v, 0.0);
    EXPECT_LT(v, 1.0);
  }
  EXPECT_EQ(discriminator_forward(m, "D_ref", in).value().storage(), p.storage());
}

TEST(Discriminator, BatchPermutationPermutesOutputs) {
  const SarModel m = make_model(ModelConfig::desk_scale(32, 32), 10);
  const auto in = batch_input(4, 32, 11);
  const Tensor p = discriminator_forward(m, "D_flt", in).value();
  const std::vector<int> order{2, 0, 3, 1};
  const Tensor q = discriminator_forward(m, "D_flt", pick(in, order)).value();
  for (int k = 0; k < 4; ++k) {
    EXPECT_NEAR(q[k], p[order[k]], 1e-12);
    EXPECT_NEAR(discriminator_forward(m, "D_flt", pick(in, {order[k]})).value()[0], p[order[k]], 1e-12);
  }
}

TEST(Discriminator, FieldChannelsIgnoredWithoutAppliedField) {
  const SarModel m = make_model(ModelConfig::desk_scale(32, 32), 12);
  auto a = batch_input(2, 32, 13, false);
  auto b = a;
  Rng rng(14);
  DisplacementField f0 = random_field(32, 32, 9, rng), f1 = random_field(32, 32, 9, rng);
  b.def_recv = ad::constant(to_tensor(std::vector<const DisplacementField*>{&f0, &f1}));
  EXPECT_EQ(discriminator_forward(m, "D_ref", a).value().storage(),
            discriminator_forward(m, "D_ref", b).value().storage());
}

TEST(Discriminator, MonotoneInFinalPreActivation) {
  SarModel m = make_model(ModelConfig::desk_scale(32, 32), 15);
  const auto in = batch_input(1, 32, 16);
  double prev = -1;
  for (double bias : {-4.0, -1.0, 0.0, 0.5, 3.0}) {
    m.params.at("D_ref.dense2.bias").mutable_value()[0] = bias;
    const double p = discriminator_forward(m, "D_ref", in).item();
    EXPECT_GT(p, prev);
    prev = p;
  }
}

TEST(Discriminator, ShapeViolations) {
  const SarModel m = make_model(ModelConfig::desk_scale(32, 32), 17);
  auto in = batch_input(1, 32, 18);
  in.ref = ad::constant(Tensor({1, 1, 32, 16}));
  EXPECT_THROW(discriminator_forward(m, "D_ref", in), ContractViolation);
  EXPECT_THROW(discriminator_forward(m, "D_ref", batch_input(1, 16, 19)), ContractViolation);
}

TEST(Otsu, BimodalAndConstantMaps) {
  std::vector<double> map(64);
  for (int i = 0; i < 64; ++i) map[i] = i < 32 ? 0.0 : 1.0;
  const auto r = otsu_threshold(map, 8, 8);
  EXPECT_GT(r.threshold, 0.0);
  EXPECT_LT(r.threshold, 1.0);
  for (int i = 0; i < 64; ++i) EXPECT_EQ(r.mask(i / 8, i % 8), i < 32 ? 0 : 1);
  EXPECT_TRUE(otsu_threshold(std::vector<double>(64, 0.37), 8, 8).mask.empty_mask());
}

TEST(Otsu, MatchesExhaustiveSearch) {
  for (int trial = 0; trial < 60; ++trial) {
    Rng rng(800 + trial);
    std::vector<double> map(64);
    for (auto& v : map) v = uniform01(rng);
    if (trial % 3 == 0) {
      for (auto& v : map) v = std::round(v * 4) / 4;  // few levels, many ties
    }
    const auto r = otsu_threshold(map, 8, 8);
    EXPECT_EQ(r.level, otsu_level_oracle(map)) << "trial " << trial;
    EXPECT_EQ(r.mask, otsu_mask_oracle(map, 8, 8)) << "trial " << trial;
  }
}

TEST(FusedSegmentation, BinaryMapSeparates) {
  Tensor t({1, 1, 8, 8}, 0.1);
  for (int y = 2; y < 6; ++y) {
    for (int x = 1; x < 5; ++x) t.at(0, 0, y, x) = 0.9;
  }
  const auto fs = fused_segmentation({t}, {1.0}, 8, 8);
  EXPECT_EQ(fs.mask, rect_mask(8, 8, 2, 1, 6, 5));
  EXPECT_TRUE(fused_segmentation({t}, {0.0}, 8, 8).mask.empty_mask());
  EXPECT_THROW(fused_segmentation({}, {}, 8, 8), ContractViolation);
  EXPECT_THROW(fused_segmentation({t}, {1.0, 2.0}, 8, 8), ContractViolation);
}

TEST(FusedSegmentation, ThreeLevelMapMatchesOracle) {
  Tensor a({1, 2, 16, 16}), b({1, 1, 8, 8});
  for (int y = 0; y < 16; ++y) {
    for (int x = 0; x < 16; ++x) {
      const double level = x < 5 ? 0.0 : (x < 11 ? 0.5 : 1.0);
      a.at(0, 0, y, x) = level;
      a.at(0, 1, y, x) = level * 0.5 + (y % 3) * 0.01;
    }
  }
  for (int y = 0; y < 8; ++y) {
    for (int x = 0; x < 8; ++x) b.at(0, 0, y, x) = y < 4 ? 0.2 : 0.7;
  }
  const auto fs = fused_segmentation({a, b}, {0.6, 0.4}, 16, 16);
  EXPECT_EQ(fs.mask, otsu_mask_oracle(fs.fused, 16, 16));
  EXPECT_FALSE(fs.mask.empty_mask());
}

TEST(FusedMask, ValidMaskFromModel) {
  const SarModel m = make_model(ModelConfig::desk_scale(), 20);
  Rng rng(21);
  const SegMask mask = fused_mask(m, smooth_image(64, 64, rng));
  EXPECT_EQ(mask.height(), 64);
  for (auto v : mask.pixels()) EXPECT_LE(v, 1);
}

TEST(Checkpoint, RoundTripPreservesValuesAndFlags) {
  const auto dir = std::filesystem::temp_directory_path() / "sarreg_test_ckpt";
  std::filesystem::remove_all(dir);
  SarModel m = make_model(tiny_model_config(16), 22);
  randomize_heads(m, 23);
  m.params.set_layer_frozen("D_ref.dense1", true);
  save_model(dir, m);
  const SarModel back = load_model(dir);
  EXPECT_EQ(back.config.height, 16);
  EXPECT_EQ(back.config.generator.width, 8);
  EXPECT_TRUE(changed_parameters(m.params, back.params).empty());
  EXPECT_EQ(back.params.size(), m.params.size());
  EXPECT_TRUE(back.params.at("D_ref.dense1.weight").frozen);
  EXPECT_FALSE(back.params.at("D_ref.dense1.weight").var.requires_grad());
  EXPECT_FALSE(back.params.at("G.stem.bn.running_mean").trainable);
  std::filesystem::remove_all(dir);
}

TEST(ParamStore, CopiesAreDeep) {
  SarModel m = make_model(tiny_model_config(), 24);
  ParamStore copy = m.params;
  copy.at("G.head.conv.bias").mutable_value()[0] = 5.0;
  EXPECT_EQ(m.params.at("G.head.conv.bias").value()[0], 0.0);
  EXPECT_EQ(changed_parameters(m.params, copy), std::vector<std::string>{"G.head.conv.bias"});
}

}  // namespace
}  // namespace sarreg

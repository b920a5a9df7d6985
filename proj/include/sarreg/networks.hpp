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

// Generator G (and its reverse twin F) and the discriminators D_ref / D_flt.
//
// Generator: concat(moving, fixed) -> stem conv -> two stride-2 convs ->
// residual blocks (conv-BN-ReLU-conv-BN + skip) at quarter resolution ->
// field head conv -> field_scale * tanh -> bilinear x4 upsampling. The
// registered image is always the moving image warped by that field.

#include <cmath>
#include <nlohmann/json.hpp>
#include <optional>
#include <string>
#include <vector>

#include "sarreg/imagecore.hpp"
#include "sarreg/ops.hpp"
#include "sarreg/params.hpp"
#include "sarreg/segmentation.hpp"

namespace sarreg {

inline constexpr int kGeneratorStride = 4;

struct GeneratorConfig {
  int n_res_blocks = 6;
  int width = 64;
  int kernel = 3;
  double field_scale = 20.0;

  static GeneratorConfig desk_scale() { return {3, 16, 3, 20.0}; }

  void validate() const {
    require(width >= 8, "generator width must be at least 8");
    require(n_res_blocks >= 1, "generator needs at least one residual block");
    require(kernel == 3, "generator kernels are 3x3");
    require(field_scale > 0, "field_scale must be positive");
  }
  int fusion_maps() const { return 3 + n_res_blocks; }
};

struct DiscriminatorConfig {
  int n_conv = 8;
  int base_width = 64;
  int max_width = 512;
  int dense_units = 1024;
  double leaky_slope = 0.2;

  static DiscriminatorConfig desk_scale() { return {8, 8, 64, 32, 0.2}; }

  void validate() const {
    require(n_conv >= 1, "discriminator needs at least one conv layer");
    require(base_width >= 1 && max_width >= base_width, "bad discriminator widths");
    require(dense_units >= 1, "dense_units must be positive");
  }
  /// Width doubles every second layer (64, 64, 128, 128, ...), capped.
  int conv_width(int i) const { return std::min(max_width, base_width << (i / 2)); }
  /// Odd layers are strided, halving resolution before the width doubles.
  int conv_stride(int i) const { return (i % 2 == 1) ? 2 : 1; }
};

struct ModelConfig {
  GeneratorConfig generator;
  DiscriminatorConfig discriminator;
  int height = 64;
  int width = 64;

  static ModelConfig desk_scale(int height = 64, int width = 64) {
    return {GeneratorConfig::desk_scale(), DiscriminatorConfig::desk_scale(), height, width};
  }
};

inline void to_json(nlohmann::json& j, const GeneratorConfig& c) {
  j = {{"n_res_blocks", c.n_res_blocks}, {"width", c.width}, {"kernel", c.kernel},
       {"field_scale", c.field_scale}};
}
inline void from_json(const nlohmann::json& j, GeneratorConfig& c) {
  c.n_res_blocks = j.value("n_res_blocks", c.n_res_blocks);
  c.width = j.value("width", c.width);
  c.kernel = j.value("kernel", c.kernel);
  c.field_scale = j.value("field_scale", c.field_scale);
}
inline void to_json(nlohmann::json& j, const DiscriminatorConfig& c) {
  j = {{"n_conv", c.n_conv}, {"base_width", c.base_width}, {"max_width", c.max_width},
       {"dense_units", c.dense_units}, {"leaky_slope", c.leaky_slope}};
}
inline void from_json(const nlohmann::json& j, DiscriminatorConfig& c) {
  c.n_conv = j.value("n_conv", c.n_conv);
  c.base_width = j.value("base_width", c.base_width);
  c.max_width = j.value("max_width", c.max_width);
  c.dense_units = j.value("dense_units", c.dense_units);
  c.leaky_slope = j.value("leaky_slope", c.leaky_slope);
}
inline void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = {{"generator", c.generator}, {"discriminator", c.discriminator},
       {"height", c.height}, {"width", c.width}};
}
inline void from_json(const nlohmann::json& j, ModelConfig& c) {
  if (j.contains("generator")) c.generator = j.at("generator").get<GeneratorConfig>();
  if (j.contains("discriminator")) c.discriminator = j.at("discriminator").get<DiscriminatorConfig>();
  c.height = j.value("height", c.height);
  c.width = j.value("width", c.width);
}

/// Layer updated during transfer fine-tuning.
inline const std::string kTransferLayer = "G.head.conv";

/// All trainable state of the registration GAN.
struct SarModel {
  ModelConfig config;
  ParamStore params;
};

namespace net {

/// Forward context. Training mode normalises with batch statistics and, when
/// `stats` is set, updates the running statistics there; inference mode
/// reads the running statistics.
struct Ctx {
  const ParamStore& params;
  ParamStore* stats = nullptr;
  bool training = false;
};

inline void add_conv(ParamStore& p, Rng& rng, const std::string& name, int in, int out,
                     bool zero = false) {
  Tensor w({out, in, 3, 3});
  if (!zero) {
    const double std = std::sqrt(2.0 / (9.0 * in));
    for (auto& v : w.storage()) v = normal(rng, 0.0, std);
  }
  p.add(name + ".weight", std::move(w));
  p.add(name + ".bias", Tensor({1, out, 1, 1}));
}

inline void add_bn(ParamStore& p, const std::string& name, int channels) {
  p.add(name + ".gamma", Tensor({1, channels, 1, 1}, 1.0));
  p.add(name + ".beta", Tensor({1, channels, 1, 1}));
  p.add(name + ".running_mean", Tensor({1, channels, 1, 1}), false);
  p.add(name + ".running_var", Tensor({1, channels, 1, 1}, 1.0), false);
}

inline void add_dense(ParamStore& p, Rng& rng, const std::string& name, int in, int out,
                      double gain) {
  Tensor w({out, in, 1, 1});
  const double std = gain * std::sqrt(1.0 / in);
  for (auto& v : w.storage()) v = normal(rng, 0.0, std);
  p.add(name + ".weight", std::move(w));
  p.add(name + ".bias", Tensor({1, out, 1, 1}));
}

inline ad::Var conv(const Ctx& c, const std::string& name, const ad::Var& x, int stride) {
  return ops::conv2d(x, c.params.var(name + ".weight"), c.params.var(name + ".bias"), stride, 1);
}

inline ad::Var bn(const Ctx& c, const std::string& name, const ad::Var& x) {
  const auto& gamma = c.params.var(name + ".gamma");
  const auto& beta = c.params.var(name + ".beta");
  if (c.training) {
    if (c.stats) {
      return ops::batch_norm(x, gamma, beta, c.stats->at(name + ".running_mean").mutable_value(),
                             c.stats->at(name + ".running_var").mutable_value(), true);
    }
    Tensor mean = c.params.at(name + ".running_mean").value();
    Tensor var = c.params.at(name + ".running_var").value();
    return ops::batch_norm(x, gamma, beta, mean, var, true);
  }
  return ops::batch_norm_eval(x, gamma, beta, c.params.at(name + ".running_mean").value(),
                              c.params.at(name + ".running_var").value());
}

inline void add_generator(ParamStore& p, Rng& rng, const std::string& prefix,
                          const GeneratorConfig& g) {
  add_conv(p, rng, prefix + ".stem.conv", 2, g.width);
  add_bn(p, prefix + ".stem.bn", g.width);
  for (const char* stage : {".down1", ".down2"}) {
    add_conv(p, rng, prefix + stage + ".conv", g.width, g.width);
    add_bn(p, prefix + stage + ".bn", g.width);
  }
  for (int i = 0; i < g.n_res_blocks; ++i) {
    const std::string r = prefix + ".res" + std::to_string(i);
    add_conv(p, rng, r + ".conv1", g.width, g.width);
    add_bn(p, r + ".bn1", g.width);
    add_conv(p, rng, r + ".conv2", g.width, g.width);
    add_bn(p, r + ".bn2", g.width);
  }
  p.add(prefix + ".fusion.weight",
        Tensor({1, g.fusion_maps(), 1, 1}, 1.0 / g.fusion_maps()));
  add_conv(p, rng, prefix + ".head.conv", g.width, 2, /*zero=*/true);
}

inline int flattened_size(const DiscriminatorConfig& d, int h, int w) {
  for (int i = 0; i < d.n_conv; ++i) {
    const int s = d.conv_stride(i);
    h = (h - 1) / s + 1;
    w = (w - 1) / s + 1;
  }
  return d.conv_width(d.n_conv - 1) * h * w;
}

inline constexpr int kDiscriminatorChannels = 8;

inline void add_discriminator(ParamStore& p, Rng& rng, const std::string& prefix,
                              const DiscriminatorConfig& d, int height, int width) {
  int in = kDiscriminatorChannels;
  for (int i = 0; i < d.n_conv; ++i) {
    add_conv(p, rng, prefix + ".conv" + std::to_string(i), in, d.conv_width(i));
    in = d.conv_width(i);
  }
  add_dense(p, rng, prefix + ".dense1", flattened_size(d, height, width), d.dense_units,
            std::sqrt(2.0));
  add_dense(p, rng, prefix + ".dense2", d.dense_units, 1, 1.0);
}

}  // namespace net

/// Fresh model; the field heads of G and F start at zero so both begin as the
/// identity registration.
inline SarModel make_model(const ModelConfig& config, std::uint64_t seed) {
  config.generator.validate();
  config.discriminator.validate();
  require(config.height % kGeneratorStride == 0 && config.width % kGeneratorStride == 0,
          "image dimensions must be divisible by 4");
  SarModel m{config, {}};
  Rng rng(seed);
  net::add_generator(m.params, rng, "G", config.generator);
  net::add_generator(m.params, rng, "F", config.generator);
  net::add_discriminator(m.params, rng, "D_ref", config.discriminator, config.height, config.width);
  net::add_discriminator(m.params, rng, "D_flt", config.discriminator, config.height, config.width);
  return m;
}

inline nlohmann::json checkpoint_config(const SarModel& m) {
  return {{"model", m.config}, {"transfer_layer", kTransferLayer}};
}

inline void save_model(const std::filesystem::path& dir, const SarModel& m) {
  save_checkpoint(dir, m.params, checkpoint_config(m));
}

inline SarModel load_model(const std::filesystem::path& dir) {
  auto ck = load_checkpoint(dir);
  SarModel m;
  m.config = ck.config.at("model").get<ModelConfig>();
  m.params = std::move(ck.params);
  return m;
}

// ------------------------------------------------------------- generator

struct TrunkOutput {
  ad::Var features;             // quarter-resolution activations fed to the head
  std::vector<ad::Var> maps;    // per-layer activations used for mask fusion
};

inline TrunkOutput generator_trunk(const net::Ctx& c, const GeneratorConfig& g,
                                   const std::string& prefix, const ad::Var& moving,
                                   const ad::Var& fixed) {
  require(moving.shape() == fixed.shape() && moving.shape().c == 1,
          "generator: inputs must be matching single-channel batches");
  require(moving.shape().h % kGeneratorStride == 0 && moving.shape().w % kGeneratorStride == 0,
          "generator: image dimensions must be divisible by 4");
  TrunkOutput out;
  ad::Var x = ops::concat_channels({moving, fixed});
  x = ops::relu(net::bn(c, prefix + ".stem.bn", net::conv(c, prefix + ".stem.conv", x, 1)));
  out.maps.push_back(x);
  for (const char* stage : {".down1", ".down2"}) {
    x = ops::relu(net::bn(c, prefix + stage + ".bn", net::conv(c, prefix + stage + ".conv", x, 2)));
    out.maps.push_back(x);
  }
  for (int i = 0; i < g.n_res_blocks; ++i) {
    const std::string r = prefix + ".res" + std::to_string(i);
    ad::Var y = ops::relu(net::bn(c, r + ".bn1", net::conv(c, r + ".conv1", x, 1)));
    y = net::bn(c, r + ".bn2", net::conv(c, r + ".conv2", y, 1));
    x = ops::add(x, y);
    out.maps.push_back(x);
  }
  out.features = x;
  return out;
}

/// Field head: dense per-pixel displacement bounded by field_scale.
inline ad::Var generator_head(const net::Ctx& c, const GeneratorConfig& g,
                              const std::string& prefix, const ad::Var& features) {
  ad::Var raw = net::conv(c, prefix + ".head.conv", features, 1);
  return ops::upsample_bilinear(ops::scale(ops::tanh(raw), g.field_scale), kGeneratorStride);
}

struct GeneratorPass {
  ad::Var def_recv;  // {N,2,H,W}
  ad::Var trans;     // moving warped by def_recv
  std::vector<ad::Var> maps;
};

inline GeneratorPass generator_pass(const net::Ctx& c, const GeneratorConfig& g,
                                    const std::string& prefix, const ad::Var& moving,
                                    const ad::Var& fixed) {
  auto trunk = generator_trunk(c, g, prefix, moving, fixed);
  GeneratorPass p;
  p.def_recv = generator_head(c, g, prefix, trunk.features);
  p.trans = ops::warp(moving, p.def_recv);
  p.maps = std::move(trunk.maps);
  return p;
}

inline std::vector<double> fusion_weights(const ParamStore& params, const std::string& prefix) {
  const auto& t = params.at(prefix + ".fusion.weight").value();
  return {t.data().begin(), t.data().end()};
}

/// Fused-map mask of `img`, obtained by running the trunk on the self-pair.
inline SegMask fused_mask(const SarModel& m, const Image& img, const std::string& prefix = "G") {
  const net::Ctx c{m.params, nullptr, false};
  const ad::Var x = ad::constant(to_tensor(std::vector<const Image*>{&img}));
  const auto trunk = generator_trunk(c, m.config.generator, prefix, x, x);
  std::vector<Tensor> maps;
  for (const auto& v : trunk.maps) maps.push_back(v.value());
  return fused_segmentation(maps, fusion_weights(m.params, prefix), img.height(), img.width()).mask;
}

struct GeneratorOutput {
  Image trans;
  DisplacementField def_recv;
  SegMask seg_flt;    // fused-map mask of the floating image
  SegMask seg_ref;    // fused-map mask of the reference image
  SegMask seg_trans;  // floating mask (ground truth if given) warped by def_recv
};

/// Inference-mode forward pass of G on one pair.
inline GeneratorOutput generator_forward(const SarModel& m, const Image& flt, const Image& ref,
                                         const SegMask* flt_seg = nullptr) {
  require(flt.same_shape(ref), "generator_forward: images differ in shape");
  if (flt_seg) require(flt_seg->same_shape(flt), "generator_forward: mask shape mismatch");
  const net::Ctx c{m.params, nullptr, false};
  const auto pass = generator_pass(c, m.config.generator, "G",
                                   ad::constant(to_tensor(std::vector<const Image*>{&flt})),
                                   ad::constant(to_tensor(std::vector<const Image*>{&ref})));
  GeneratorOutput out;
  out.trans = image_from_tensor(pass.trans.value());
  out.def_recv = field_from_tensor(pass.def_recv.value());
  out.seg_flt = fused_mask(m, flt);
  out.seg_ref = fused_mask(m, ref);
  out.seg_trans = warp(flt_seg ? *flt_seg : out.seg_flt, out.def_recv);
  return out;
}

/// F maps an image back toward `target` (the domain G started from).
inline Image reverse_generator_forward(const SarModel& m, const Image& img, const Image& target) {
  require(img.same_shape(target), "reverse_generator_forward: images differ in shape");
  const net::Ctx c{m.params, nullptr, false};
  const auto pass = generator_pass(c, m.config.generator, "F",
                                   ad::constant(to_tensor(std::vector<const Image*>{&img})),
                                   ad::constant(to_tensor(std::vector<const Image*>{&target})));
  return image_from_tensor(pass.trans.value());
}

// --------------------------------------------------------- discriminator

/// Evidence judged by a discriminator. Masks may be soft (in [0,1]).
/// Without an applied field both field channels are zero-filled.
struct DiscriminatorInput {
  ad::Var trans;
  ad::Var ref;
  ad::Var seg_trans;
  ad::Var seg_ref;
  ad::Var def_recv;
  std::optional<ad::Var> def_app;
};

inline ad::Var discriminator_logit(const net::Ctx& c, const ModelConfig& mc,
                                   const std::string& prefix, const DiscriminatorInput& in) {
  const Shape s = in.trans.shape();
  for (const auto* v : {&in.ref, &in.seg_trans, &in.seg_ref}) {
    require(v->shape() == s, "discriminator: image/mask shape mismatch");
  }
  require(in.def_recv.shape() == Shape{s.n, 2, s.h, s.w}, "discriminator: field shape mismatch");
  require(s.h == mc.height && s.w == mc.width,
          "discriminator: model was built for " + std::to_string(mc.height) + "x" +
              std::to_string(mc.width) + " inputs");
  ad::Var recv, app;
  if (in.def_app) {
    require(in.def_app->shape() == in.def_recv.shape(), "discriminator: field shape mismatch");
    recv = ops::scale(in.def_recv, 1.0 / mc.generator.field_scale);
    app = ops::scale(*in.def_app, 1.0 / mc.generator.field_scale);
  } else {
    recv = app = ad::constant(Tensor(in.def_recv.shape()));
  }
  ad::Var x = ops::concat_channels({in.trans, in.ref, in.seg_trans, in.seg_ref, recv, app});
  const auto& d = mc.discriminator;
  for (int i = 0; i < d.n_conv; ++i) {
    x = ops::leaky_relu(net::conv(c, prefix + ".conv" + std::to_string(i), x, d.conv_stride(i)),
                        d.leaky_slope);
  }
  x = ops::leaky_relu(ops::linear(x, c.params.var(prefix + ".dense1.weight"),
                                  c.params.var(prefix + ".dense1.bias")),
                      d.leaky_slope);
  return ops::linear(x, c.params.var(prefix + ".dense2.weight"),
                     c.params.var(prefix + ".dense2.bias"));
}

/// Probability {N,1,1,1} in (0,1) that the evidence is a real aligned pair.
inline ad::Var discriminator_forward(const SarModel& m, const std::string& prefix,
                                     const DiscriminatorInput& in) {
  const net::Ctx c{m.params, nullptr, false};
  return ops::sigmoid(discriminator_logit(c, m.config, prefix, in));
}

}  // namespace sarreg

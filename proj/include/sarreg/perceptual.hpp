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

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <vector>

#include "sarreg/imagecore.hpp"
#include "sarreg/io.hpp"
#include "sarreg/ops.hpp"

namespace sarreg {

struct ConvBlock {
  int width = 64;
  int convs = 2;
};

/// VGG-style stack: 3x3 conv + ReLU layers grouped in blocks, 2x2 max pooling
/// between blocks. Every conv output is tapped except the listed indices.
struct ExtractorConfig {
  std::vector<ConvBlock> blocks{{64, 2}, {128, 2}, {256, 3}, {512, 3}, {512, 3}};
  int width_divisor = 1;
  std::vector<int> untapped{6};  // third conv of the 256-wide block
  std::uint64_t seed = 7;

  static ExtractorConfig full_scale() { return {}; }
  static ExtractorConfig desk_scale() {
    ExtractorConfig c;
    c.width_divisor = 8;
    return c;
  }

  int pool_stages() const { return static_cast<int>(blocks.size()) - 1; }
  int conv_count() const {
    int n = 0;
    for (const auto& b : blocks) n += b.convs;
    return n;
  }
  std::vector<int> conv_widths() const {
    std::vector<int> out;
    for (const auto& b : blocks) {
      for (int i = 0; i < b.convs; ++i) out.push_back(std::max(1, b.width / width_divisor));
    }
    return out;
  }
  bool tapped(int conv) const {
    return std::find(untapped.begin(), untapped.end(), conv) == untapped.end();
  }
  /// Number of feature maps compared by the distance.
  int map_count() const {
    const auto w = conv_widths();
    int total = 0;
    for (int i = 0; i < int(w.size()); ++i) total += tapped(i) ? w[i] : 0;
    return total;
  }

  friend bool operator==(const ExtractorConfig& a, const ExtractorConfig& b) {
    if (a.width_divisor != b.width_divisor || a.untapped != b.untapped || a.seed != b.seed ||
        a.blocks.size() != b.blocks.size()) {
      return false;
    }
    for (std::size_t i = 0; i < a.blocks.size(); ++i) {
      if (a.blocks[i].width != b.blocks[i].width || a.blocks[i].convs != b.blocks[i].convs) return false;
    }
    return true;
  }
};

/// Min-max normalised maps, one tensor per tapped layer ({1, C, h, w}).
struct FeatureStack {
  ExtractorConfig config;
  std::vector<Tensor> maps;
  std::vector<int> layer_widths;

  std::size_t map_count() const {
    std::size_t n = 0;
    for (int w : layer_widths) n += std::size_t(w);
    return n;
  }
};

/// Fixed (non-trainable) feature extractor. Weights are He-initialised from
/// the config seed unless loaded from a SART weight file.
class FeatureExtractor {
 public:
  explicit FeatureExtractor(ExtractorConfig config = ExtractorConfig::desk_scale())
      : config_(std::move(config)) {
    require(!config_.blocks.empty(), "extractor needs at least one block");
    Rng rng(config_.seed);
    int in = 1;
    for (int width : config_.conv_widths()) {
      const double std = std::sqrt(2.0 / (9.0 * in));
      Tensor w({width, in, 3, 3});
      for (auto& v : w.storage()) v = normal(rng, 0.0, std);
      weights_.push_back(ad::constant(std::move(w)));
      biases_.push_back(ad::constant(Tensor({1, width, 1, 1})));
      in = width;
    }
  }

  const ExtractorConfig& config() const { return config_; }
  const Tensor& weight(int conv) const { return weights_.at(conv).value(); }
  const Tensor& bias(int conv) const { return biases_.at(conv).value(); }

  /// Replaces the weights from a SART file with one record per conv layer in
  /// layer order, dims (out, in*9 + 1): flattened kernel then bias per row.
  void load_weights(const std::filesystem::path& path) {
    const auto records = io::load_sart(path);
    require(records.size() == weights_.size(), "weight file has wrong layer count");
    for (std::size_t layer = 0; layer < records.size(); ++layer) {
      const auto& r = records[layer];
      require(r.dims.size() == 2, "weight record must be rank 2");
      const Shape ws = weights_[layer].shape();
      const int row = ws.c * 9 + 1;
      require(int(r.dims[0]) == ws.n && int(r.dims[1]) == row, "weight record shape mismatch");
      Tensor w(ws), b({1, ws.n, 1, 1});
      for (int o = 0; o < ws.n; ++o) {
        for (int j = 0; j < row - 1; ++j) w[std::size_t(o) * (row - 1) + j] = r.values[std::size_t(o) * row + j];
        b[o] = r.values[std::size_t(o) * row + row - 1];
      }
      weights_[layer] = ad::constant(std::move(w));
      biases_[layer] = ad::constant(std::move(b));
    }
  }

  void save_weights(const std::filesystem::path& path) const {
    std::vector<io::SartTensor> records;
    for (std::size_t l = 0; l < weights_.size(); ++l) {
      const Shape ws = weights_[l].shape();
      const int row = ws.c * 9 + 1;
      io::SartTensor t{io::DType::float32, {std::uint32_t(ws.n), std::uint32_t(row)}, {}};
      for (int o = 0; o < ws.n; ++o) {
        for (int j = 0; j < row - 1; ++j) t.values.push_back(weights_[l].value()[std::size_t(o) * (row - 1) + j]);
        t.values.push_back(biases_[l].value()[o]);
      }
      records.push_back(std::move(t));
    }
    io::save_sart(path, records);
  }

  /// Differentiable tapped feature maps of a {N,1,H,W} batch.
  std::vector<ad::Var> features(const ad::Var& img) const {
    const Shape s = img.shape();
    require(s.c == 1, "extractor expects single-channel input");
    const int div = 1 << config_.pool_stages();
    require(s.h % div == 0 && s.w % div == 0,
            "extractor input " + std::to_string(s.h) + "x" + std::to_string(s.w) +
                " not divisible by " + std::to_string(div));
    std::vector<ad::Var> taps;
    ad::Var x = img;
    int conv = 0;
    for (std::size_t b = 0; b < config_.blocks.size(); ++b) {
      for (int i = 0; i < config_.blocks[b].convs; ++i, ++conv) {
        x = ops::relu(ops::conv2d(x, weights_[conv], biases_[conv], 1, 1));
        if (config_.tapped(conv)) taps.push_back(ops::minmax_normalize(x));
      }
      if (b + 1 < config_.blocks.size()) x = ops::max_pool2(x);
    }
    return taps;
  }

  FeatureStack extract(const Image& img) const {
    FeatureStack fs;
    fs.config = config_;
    for (auto& v : features(ad::constant(to_tensor(std::vector<const Image*>{&img})))) {
      fs.layer_widths.push_back(v.shape().c);
      fs.maps.push_back(v.value());
    }
    return fs;
  }

 private:
  ExtractorConfig config_;
  std::vector<ad::Var> weights_;
  std::vector<ad::Var> biases_;
};

/// Mean over all maps of the per-map mean squared difference, per sample.
inline ad::Var vgg_distance(const std::vector<ad::Var>& a, const std::vector<ad::Var>& b) {
  require(a.size() == b.size() && !a.empty(), "vgg_distance: feature stacks do not match");
  ad::Var total;
  double maps = 0.0;
  for (std::size_t l = 0; l < a.size(); ++l) {
    const double c = a[l].shape().c;
    ad::Var term = ops::scale(ops::mean_sq_diff(a[l], b[l]), c);
    total = total ? ops::add(total, term) : term;
    maps += c;
  }
  return ops::scale(total, 1.0 / maps);
}

inline double vgg_distance(const FeatureStack& a, const FeatureStack& b) {
  require(a.config == b.config && a.layer_widths == b.layer_widths,
          "vgg_distance: feature stacks come from different configs");
  std::vector<ad::Var> va, vb;
  for (const auto& t : a.maps) va.push_back(ad::constant(t));
  for (const auto& t : b.maps) vb.push_back(ad::constant(t));
  return vgg_distance(va, vb).item();
}

}  // namespace sarreg

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
using Plane = std::vector<std::vector<double>>;  // [channel][y * w + x]

/// Plain-loop VGG stack: 3x3 zero-padded conv, ReLU, 2x2 max pool between
/// blocks, per-map min-max normalisation of every tapped conv output.
std::vector<Plane> oracle_features(const FeatureExtractor& ex, const Image& img) {
  const auto& cfg = ex.config();
  int h = img.height(), w = img.width();
  Plane x{img.pixels()};
  std::vector<Plane> taps;
  int conv = 0;
  for (std::size_t b = 0; b < cfg.blocks.size(); ++b) {
    for (int k = 0; k < cfg.blocks[b].convs; ++k, ++conv) {
      const Tensor& wt = ex.weight(conv);
      const Tensor& bs = ex.bias(conv);
      const int out_c = wt.shape().n, in_c = wt.shape().c;
      Plane y(out_c, std::vector<double>(std::size_t(h) * w));
      for (int o = 0; o < out_c; ++o) {
        for (int yy = 0; yy < h; ++yy) {
          for (int xx = 0; xx < w; ++xx) {
            double acc = bs[o];
            for (int i = 0; i < in_c; ++i) {
              for (int ky = 0; ky < 3; ++ky) {
                for (int kx = 0; kx < 3; ++kx) {
                  const int sy = yy + ky - 1, sx = xx + kx - 1;
                  if (sy < 0 || sx < 0 || sy >= h || sx >= w) continue;
                  acc += wt.at(o, i, ky, kx) * x[i][std::size_t(sy) * w + sx];
                }
              }
            }
            y[o][std::size_t(yy) * w + xx] = std::max(0.0, acc);
          }
        }
      }
      x = y;
      if (cfg.tapped(conv)) {
        Plane norm = y;
        for (auto& map : norm) {
          const double lo = *std::min_element(map.begin(), map.end());
          const double hi = *std::max_element(map.begin(), map.end());
          for (auto& v : map) v = hi - lo > 1e-12 ? (v - lo) / (hi - lo) : 0.0;
        }
        taps.push_back(norm);
      }
    }
    if (b + 1 < cfg.blocks.size()) {
      Plane p(x.size(), std::vector<double>(std::size_t(h / 2) * (w / 2)));
      for (std::size_t c = 0; c < x.size(); ++c) {
        for (int yy = 0; yy < h / 2; ++yy) {
          for (int xx = 0; xx < w / 2; ++xx) {
            double m = -1e300;
            for (int d = 0; d < 4; ++d) m = std::max(m, x[c][std::size_t(2 * yy + d / 2) * w + 2 * xx + d % 2]);
            p[c][std::size_t(yy) * (w / 2) + xx] = m;
          }
        }
      }
      x = p;
      h /= 2;
      w /= 2;
    }
  }
  return taps;
}

double oracle_distance(const std::vector<Plane>& a, const std::vector<Plane>& b) {
  double total = 0;
  int maps = 0;
  for (std::size_t l = 0; l < a.size(); ++l) {
    for (std::size_t c = 0; c < a[l].size(); ++c, ++maps) {
      double acc = 0;
      for (std::size_t i = 0; i < a[l][c].size(); ++i) acc += std::pow(a[l][c][i] - b[l][c][i], 2);
      total += acc / double(a[l][c].size());
    }
  }
  return total / maps;
}

TEST(ExtractorConfig, MapCounts) {
  const auto full = ExtractorConfig::full_scale();
  EXPECT_EQ(full.conv_count(), 13);
  EXPECT_EQ(full.map_count(), 64 * 2 + 128 * 2 + 256 * 2 + 512 * 3 + 512 * 3);
  EXPECT_EQ(full.map_count(), 3968);
  EXPECT_EQ(ExtractorConfig::desk_scale().map_count(), 3968 / 8);
  const std::vector<int> widths{64, 64, 128, 128, 256, 256, 256, 512, 512, 512, 512, 512, 512};
  EXPECT_EQ(full.conv_widths(), widths);
}

TEST(FeatureExtractor, StackShapeAndRange) {
  const FeatureExtractor ex;
  Rng rng(1);
  const auto fs = ex.extract(smooth_image(32, 32, rng));
  EXPECT_EQ(fs.maps.size(), 12u);
  EXPECT_EQ(fs.map_count(), 496u);
  for (const auto& t : fs.maps) {
    for (double v : t.storage()) {
      ASSERT_GE(v, 0.0);
      ASSERT_LE(v, 1.0);
    }
  }
}

TEST(FeatureExtractor, ZeroImageGivesZeroMaps) {
  const FeatureExtractor ex;
  const auto fs = ex.extract(Image(16, 16));
  for (const auto& t : fs.maps) {
    for (double v : t.storage()) ASSERT_EQ(v, 0.0);
  }
}

TEST(FeatureExtractor, IndivisibleSizeIsContractViolation) {
  const FeatureExtractor ex;
  EXPECT_THROW(ex.extract(Image(24, 24)), ContractViolation);
}

TEST(FeatureExtractor, DeterministicFromSeed) {
  Rng rng(2);
  const Image img = smooth_image(16, 16, rng);
  const auto a = FeatureExtractor().extract(img), b = FeatureExtractor().extract(img);
  for (std::size_t l = 0; l < a.maps.size(); ++l) EXPECT_EQ(a.maps[l].storage(), b.maps[l].storage());
}

TEST(VggDistance, MatchesScalarLoopOracle) {
  const FeatureExtractor ex;
  Rng rng(3);
  const Image a = smooth_image(16, 16, rng), b = smooth_image(16, 16, rng);
  const auto oa = oracle_features(ex, a), ob = oracle_features(ex, b);
  const auto fa = ex.extract(a);
  ASSERT_EQ(oa.size(), fa.maps.size());
  for (std::size_t l = 0; l < oa.size(); ++l) {
    for (std::size_t c = 0; c < oa[l].size(); ++c) {
      for (std::size_t i = 0; i < oa[l][c].size(); ++i) {
        ASSERT_NEAR(fa.maps[l].channel(0, int(c))[i], oa[l][c][i], 1e-9);
      }
    }
  }
  EXPECT_NEAR(vgg_distance(fa, ex.extract(b)), oracle_distance(oa, ob), 1e-5);
}

TEST(VggDistance, IdentitySymmetryAndMismatch) {
  const FeatureExtractor ex;
  Rng rng(4);
  const auto a = ex.extract(smooth_image(16, 16, rng)), b = ex.extract(smooth_image(16, 16, rng));
  EXPECT_EQ(vgg_distance(a, a), 0.0);
  EXPECT_GT(vgg_distance(a, b), 0.0);
  EXPECT_EQ(vgg_distance(a, b), vgg_distance(b, a));
  ExtractorConfig other = ExtractorConfig::desk_scale();
  other.seed = 99;
  const auto c = FeatureExtractor(other).extract(smooth_image(16, 16, rng));
  EXPECT_THROW(vgg_distance(a, c), ContractViolation);
}

TEST(FeatureExtractor, WeightFileRoundTrip) {
  const auto path = std::filesystem::temp_directory_path() / "sarreg_test_weights.sart";
  const FeatureExtractor src;
  src.save_weights(path);
  ExtractorConfig other = ExtractorConfig::desk_scale();
  other.seed = 1234;
  FeatureExtractor dst(other);
  dst.load_weights(path);
  for (int l = 0; l < src.config().conv_count(); ++l) {
    for (std::size_t i = 0; i < src.weight(l).size(); ++i) {
      ASSERT_EQ(double(float(src.weight(l)[i])), dst.weight(l)[i]);
    }
  }
  FeatureExtractor tiny(tiny_extractor_config());
  EXPECT_THROW(tiny.load_weights(path), ContractViolation);
  std::filesystem::remove(path);
}

}  // namespace
}  // namespace sarreg

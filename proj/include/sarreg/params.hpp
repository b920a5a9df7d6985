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
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <nlohmann/json.hpp>
#include <string>
#include <vector>

#include "sarreg/io.hpp"
#include "sarreg/rng.hpp"
#include "sarreg/tensor.hpp"

namespace sarreg {

/// A named tensor in a model. Trainable tensors are autodiff leaves; buffers
/// (batch-norm running statistics) are updated by forward passes only.
struct Parameter {
  std::string name;
  ad::Var var;
  bool trainable = true;
  bool frozen = false;
  // Adam moments, allocated on first update.
  Tensor m;
  Tensor v;
  long step = 0;

  const Tensor& value() const { return var.value(); }
  Tensor& mutable_value() { return var.mutable_value(); }
  /// "G.head.conv.weight" -> "G.head.conv".
  std::string layer() const { return name.substr(0, name.rfind('.')); }
};

/// Ordered, named parameter container. Copies are deep: a copy never shares
/// storage or gradients with its source.
class ParamStore {
 public:
  ParamStore() = default;
  ParamStore(const ParamStore& other) { copy_from(other); }
  ParamStore& operator=(const ParamStore& other) {
    if (this != &other) copy_from(other);
    return *this;
  }
  ParamStore(ParamStore&&) noexcept = default;
  ParamStore& operator=(ParamStore&&) noexcept = default;

  Parameter& add(const std::string& name, Tensor value, bool trainable = true) {
    require(!index_.contains(name), "duplicate parameter " + name);
    auto p = std::make_unique<Parameter>();
    p->name = name;
    p->trainable = trainable;
    p->var = ad::leaf(std::move(value), trainable);
    index_[name] = params_.size();
    params_.push_back(std::move(p));
    return *params_.back();
  }

  bool contains(const std::string& name) const { return index_.contains(name); }

  Parameter& at(const std::string& name) {
    auto it = index_.find(name);
    require(it != index_.end(), "unknown parameter " + name);
    return *params_[it->second];
  }
  const Parameter& at(const std::string& name) const {
    auto it = index_.find(name);
    require(it != index_.end(), "unknown parameter " + name);
    return *params_[it->second];
  }
  const ad::Var& var(const std::string& name) const { return at(name).var; }

  std::size_t size() const { return params_.size(); }
  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.cbegin(); }
  auto end() const { return params_.cend(); }

  std::vector<std::string> layers() const {
    std::vector<std::string> out;
    for (const auto& p : params_) {
      const auto l = p->layer();
      if (out.empty() || out.back() != l) out.push_back(l);
    }
    return out;
  }

  void set_layer_frozen(const std::string& layer, bool frozen) {
    bool found = false;
    for (auto& p : params_) {
      if (p->layer() == layer) {
        set_frozen(*p, frozen);
        found = true;
      }
    }
    require(found, "unknown layer " + layer);
  }

  void freeze_all_except(const std::string& layer) {
    for (auto& p : params_) set_frozen(*p, p->layer() != layer);
  }

  void unfreeze_all() {
    for (auto& p : params_) set_frozen(*p, false);
  }

  void zero_grad() {
    for (auto& p : params_) p->var.node()->grad = Tensor();
  }

 private:
  // Frozen tensors stop collecting gradients altogether.
  static void set_frozen(Parameter& p, bool frozen) {
    p.frozen = frozen;
    p.var.node()->requires_grad = p.trainable && !frozen;
  }

  void copy_from(const ParamStore& other) {
    params_.clear();
    index_ = other.index_;
    for (const auto& src : other.params_) {
      auto p = std::make_unique<Parameter>(*src);
      p->var = ad::leaf(src->value(), src->trainable && !src->frozen);
      params_.push_back(std::move(p));
    }
  }

  std::vector<std::unique_ptr<Parameter>> params_;
  std::map<std::string, std::size_t> index_;
};

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.93;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// One Adam update over the trainable, unfrozen parameters selected by
/// `select`. Parameters without an accumulated gradient are left untouched.
inline void adam_step(ParamStore& store, const AdamConfig& cfg,
                      const std::function<bool(const Parameter&)>& select) {
  for (auto& pp : store) {
    Parameter& p = *pp;
    if (!p.trainable || p.frozen || !select(p)) continue;
    const Tensor& g = p.var.grad();
    if (g.empty()) continue;
    if (p.m.empty()) {
      p.m = Tensor(p.value().shape());
      p.v = Tensor(p.value().shape());
    }
    ++p.step;
    const double c1 = 1.0 - std::pow(cfg.beta1, double(p.step));
    const double c2 = 1.0 - std::pow(cfg.beta2, double(p.step));
    Tensor& w = p.mutable_value();
    for (std::size_t i = 0; i < w.size(); ++i) {
      p.m[i] = cfg.beta1 * p.m[i] + (1 - cfg.beta1) * g[i];
      p.v[i] = cfg.beta2 * p.v[i] + (1 - cfg.beta2) * g[i] * g[i];
      w[i] -= cfg.lr * (p.m[i] / c1) / (std::sqrt(p.v[i] / c2) + cfg.eps);
    }
  }
}

inline bool params_bitwise_equal(const Parameter& a, const Parameter& b) {
  return a.value().shape() == b.value().shape() && a.value().storage() == b.value().storage();
}

/// Names of tensors whose values differ bitwise between two stores.
inline std::vector<std::string> changed_parameters(const ParamStore& a, const ParamStore& b) {
  std::vector<std::string> out;
  for (const auto& p : a) {
    if (!b.contains(p->name) || !params_bitwise_equal(*p, b.at(p->name))) out.push_back(p->name);
  }
  return out;
}

inline constexpr int kCheckpointFormatVersion = 1;

/// Checkpoint directory: one float64 SART file per tensor plus manifest.json
/// (names, shapes, flags, config echo, format version).
inline void save_checkpoint(const std::filesystem::path& dir, const ParamStore& store,
                            const nlohmann::json& config) {
  std::filesystem::create_directories(dir);
  nlohmann::json manifest;
  manifest["format_version"] = kCheckpointFormatVersion;
  manifest["config"] = config;
  manifest["layers"] = nlohmann::json::array();
  for (const auto& p : store) {
    const Shape s = p->value().shape();
    const std::string file = p->name + ".sart";
    io::SartTensor t{io::DType::float64,
                     {std::uint32_t(s.n), std::uint32_t(s.c), std::uint32_t(s.h), std::uint32_t(s.w)},
                     p->value().storage()};
    io::save_sart(dir / file, {t});
    manifest["layers"].push_back({{"name", p->name},
                                  {"layer", p->layer()},
                                  {"shape", {s.n, s.c, s.h, s.w}},
                                  {"trainable", p->trainable},
                                  {"frozen", p->frozen},
                                  {"file", file}});
  }
  std::ofstream os(dir / "manifest.json");
  os << manifest.dump(2) << '\n';
}

struct LoadedCheckpoint {
  ParamStore params;
  nlohmann::json config;
};

inline LoadedCheckpoint load_checkpoint(const std::filesystem::path& dir) {
  std::ifstream is(dir / "manifest.json");
  if (!is) throw ContractViolation("missing checkpoint manifest in " + dir.string());
  const auto manifest = nlohmann::json::parse(is);
  if (manifest.at("format_version").get<int>() != kCheckpointFormatVersion) {
    throw io::FormatError("unsupported checkpoint format version");
  }
  LoadedCheckpoint out;
  out.config = manifest.at("config");
  for (const auto& entry : manifest.at("layers")) {
    const auto records = io::load_sart(dir / entry.at("file").get<std::string>());
    const auto& t = records.front();
    const auto shape = entry.at("shape").get<std::vector<int>>();
    require(shape.size() == 4 && t.dims.size() == 4, "checkpoint tensor must be rank 4");
    Shape s{shape[0], shape[1], shape[2], shape[3]};
    require(s.size() == t.values.size(), "checkpoint tensor size mismatch");
    auto& p = out.params.add(entry.at("name").get<std::string>(), Tensor(s, t.values),
                             entry.at("trainable").get<bool>());
    if (entry.at("frozen").get<bool>()) out.params.set_layer_frozen(p.layer(), true);
  }
  return out;
}

}  // namespace sarreg

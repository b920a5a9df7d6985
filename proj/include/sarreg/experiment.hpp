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

// End-to-end transfer protocol: synthesise two domains, train on A, register
// A-test (in-domain) and B-test (frozen and fine-tuned transfer), optionally
// train a B baseline, and tabulate everything against the unregistered pairs.
// Stages communicate only through files under the output directory.

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <map>
#include <nlohmann/json.hpp>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "sarreg/domains.hpp"
#include "sarreg/transfer.hpp"

namespace sarreg {

// ------------------------------------------------------------ parallelism

/// Worker cap from SARREG_THREADS (default 1).
inline int thread_count() {
  const char* env = std::getenv("SARREG_THREADS");
  if (!env || !*env) return 1;
  const int n = std::atoi(env);
  require(n >= 1, "SARREG_THREADS must be a positive integer");
  return n;
}

/// Runs fn(i) for i in [0, n). Results must be written by index so the
/// outcome does not depend on scheduling.
inline void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn,
                         int threads = thread_count()) {
  threads = std::max(1, std::min<int>(threads, int(n)));
  if (threads == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::exception_ptr> errors(static_cast<std::size_t>(threads));
  std::vector<std::thread> pool;
  for (int t = 0; t < threads; ++t) {
    pool.emplace_back([&, t] {
      try {
        for (std::size_t i; (i = next.fetch_add(1)) < n;) fn(i);
      } catch (...) {
        errors[std::size_t(t)] = std::current_exception();
      }
    });
  }
  for (auto& th : pool) th.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

// ----------------------------------------------------------------- config

struct ExperimentConfig {
  std::uint64_t seed = 1;
  DomainSpec domain_a{"lung", DomainFamily::lung};
  DomainSpec domain_b{"ring", DomainFamily::ring};
  SynthConfig synth;
  PairMode pair_mode = PairMode::visit;
  int train_pairs = 200;
  int test_pairs = 20;
  ModelConfig model = ModelConfig::desk_scale();
  ExtractorConfig extractor = ExtractorConfig::desk_scale();
  TrainConfig train;
  FinetuneConfig finetune;
  bool baseline = true;
  double spacing_mm = 1.0;
};

inline void from_json(const nlohmann::json& j, ExperimentConfig& c) {
  c.seed = j.value("seed", c.seed);
  if (j.contains("domain_a")) c.domain_a = j.at("domain_a").get<DomainSpec>();
  if (j.contains("domain_b")) c.domain_b = j.at("domain_b").get<DomainSpec>();
  if (j.contains("synth")) c.synth = j.at("synth").get<SynthConfig>();
  if (j.contains("pair_mode")) c.pair_mode = parse_pair_mode(j.at("pair_mode").get<std::string>());
  c.train_pairs = j.value("train_pairs", c.train_pairs);
  c.test_pairs = j.value("test_pairs", c.test_pairs);
  if (j.contains("model")) c.model = j.at("model").get<ModelConfig>();
  if (j.contains("extractor")) {
    const auto& e = j.at("extractor");
    c.extractor.width_divisor = e.value("width_divisor", c.extractor.width_divisor);
    c.extractor.seed = e.value("seed", c.extractor.seed);
  }
  if (j.contains("train")) c.train = j.at("train").get<TrainConfig>();
  if (j.contains("finetune")) c.finetune = j.at("finetune").get<FinetuneConfig>();
  c.baseline = j.value("baseline", c.baseline);
  c.spacing_mm = j.value("spacing_mm", c.spacing_mm);
}

inline void to_json(nlohmann::json& j, const ExperimentConfig& c) {
  j = {{"seed", c.seed},
       {"domain_a", c.domain_a},
       {"domain_b", c.domain_b},
       {"synth", c.synth},
       {"pair_mode", c.pair_mode == PairMode::visit ? "visit" : "self"},
       {"train_pairs", c.train_pairs},
       {"test_pairs", c.test_pairs},
       {"model", c.model},
       {"extractor", {{"width_divisor", c.extractor.width_divisor}, {"seed", c.extractor.seed}}},
       {"train", c.train},
       {"finetune", c.finetune},
       {"baseline", c.baseline},
       {"spacing_mm", c.spacing_mm}};
}

inline nlohmann::json read_json(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw ContractViolation("cannot read config " + path.string());
  try {
    return nlohmann::json::parse(is, nullptr, true, /*ignore_comments=*/true);
  } catch (const nlohmann::json::exception& e) {
    throw ContractViolation("config " + path.string() + ": " + e.what());
  }
}

inline void write_json(const std::filesystem::path& path, const nlohmann::json& j) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path);
  os << j.dump(2) << '\n';
}

// ------------------------------------------------------------ pair files

/// Pair sets are stored as one SART file of concatenated float64 records
/// (ref, ref_seg, flt, flt_seg, def_app, def_target per pair) plus a JSON
/// index of pair ids.
inline void write_pairs(const std::filesystem::path& dir, const std::vector<TrainingPair>& pairs) {
  std::filesystem::create_directories(dir);
  std::vector<io::SartTensor> records;
  nlohmann::json index = nlohmann::json::array();
  auto image_rec = [](const Image& img) {
    return io::SartTensor{io::DType::float64,
                          {std::uint32_t(img.height()), std::uint32_t(img.width())},
                          img.pixels()};
  };
  auto field_rec = [](const DisplacementField& f) {
    auto t = io::to_sart(f);
    t.dtype = io::DType::float64;
    return t;
  };
  for (const auto& p : pairs) {
    index.push_back({{"id", p.id}, {"affine_fallback", p.affine_fallback}});
    records.push_back(image_rec(p.ref));
    records.push_back(io::to_sart(p.ref_seg));
    records.push_back(image_rec(p.flt));
    records.push_back(io::to_sart(p.flt_seg));
    records.push_back(field_rec(p.def_app));
    records.push_back(field_rec(p.def_target));
  }
  io::save_sart(dir / "pairs.sart", records);
  write_json(dir / "pairs.json", index);
}

inline std::vector<TrainingPair> read_pairs(const std::filesystem::path& dir) {
  const auto index = read_json(dir / "pairs.json");
  const auto records = io::load_sart(dir / "pairs.sart");
  require(records.size() == 6 * index.size(), "pair file does not match its index");
  std::vector<TrainingPair> pairs;
  auto image = [](const io::SartTensor& t) {
    require(t.dims.size() == 2, "pair image record must be rank 2");
    return Image(int(t.dims[0]), int(t.dims[1]), t.values);
  };
  for (std::size_t i = 0; i < index.size(); ++i) {
    const auto* r = &records[6 * i];
    TrainingPair p;
    p.id = index[i].at("id").get<std::string>();
    p.affine_fallback = index[i].value("affine_fallback", false);
    p.ref = image(r[0]);
    p.ref_seg = io::mask_from_sart(r[1]);
    p.flt = image(r[2]);
    p.flt_seg = io::mask_from_sart(r[3]);
    p.def_app = io::field_from_sart(r[4]);
    p.def_target = io::field_from_sart(r[5]);
    pairs.push_back(std::move(p));
  }
  return pairs;
}

// ----------------------------------------------------------------- report

inline const std::string kBeforeRegistration = "Bef. Reg";

struct CaseRow {
  std::string dataset;  // test set the pair comes from
  std::string method;
  int iters_used = 0;
  metrics::MetricReport m;
};

struct SummaryStat {
  double mean = 0;
  double std = 0;
  std::size_t n = 0;
};

/// Mean and population standard deviation over finite values.
inline SummaryStat summarize(const std::vector<double>& v) {
  SummaryStat s;
  double acc = 0;
  for (double x : v) {
    if (std::isfinite(x)) {
      acc += x;
      ++s.n;
    }
  }
  if (s.n == 0) return {std::nan(""), std::nan(""), 0};
  s.mean = acc / double(s.n);
  double sq = 0;
  for (double x : v) {
    if (std::isfinite(x)) sq += (x - s.mean) * (x - s.mean);
  }
  s.std = std::sqrt(sq / double(s.n));
  return s;
}

struct ExperimentReport {
  std::vector<CaseRow> rows;
  std::map<std::string, std::string> stages;  // stage -> "ok" | "failed: ..." | "skipped"
  std::map<std::string, double> stage_seconds;  // wall time of stages that ran
  bool degraded = false;

  std::vector<std::string> methods(const std::string& dataset) const {
    std::vector<std::string> out;
    for (const auto& r : rows) {
      if (r.dataset == dataset && std::find(out.begin(), out.end(), r.method) == out.end()) {
        out.push_back(r.method);
      }
    }
    return out;
  }

  std::vector<std::string> datasets() const {
    std::vector<std::string> out;
    for (const auto& r : rows) {
      if (std::find(out.begin(), out.end(), r.dataset) == out.end()) out.push_back(r.dataset);
    }
    return out;
  }

  SummaryStat stat(const std::string& dataset, const std::string& method,
                   const std::string& metric) const {
    std::vector<double> v;
    for (const auto& r : rows) {
      if (r.dataset != dataset || r.method != method) continue;
      if (metric == "dice") v.push_back(r.m.dice);
      else if (metric == "hd95") v.push_back(r.m.hd95);
      else if (metric == "mad") v.push_back(r.m.mad);
      else if (metric == "nmi") v.push_back(r.m.nmi);
      else if (metric == "ssim") v.push_back(r.m.ssim);
      else if (metric == "runtime_s") v.push_back(r.m.runtime_s);
      else if (metric == "iters_used") v.push_back(r.iters_used);
      else throw ContractViolation("unknown metric " + metric);
    }
    return summarize(v);
  }

  static std::string cases_header() {
    return "dataset,method,iters_used," + metrics::MetricReport::csv_header();
  }

  /// Per-case rows followed by mean and std summary rows per (dataset, method).
  void write_cases_csv(const std::filesystem::path& path) const {
    std::ofstream os(path);
    os << cases_header() << '\n';
    for (const auto& r : rows) {
      os << r.dataset << ',' << r.method << ',' << r.iters_used << ',' << r.m.csv_row() << '\n';
    }
    for (const auto& d : datasets()) {
      for (const auto& meth : methods(d)) {
        for (const char* kind : {"mean", "std"}) {
          const bool mean = std::string(kind) == "mean";
          auto pick = [&](const char* metric) {
            const auto s = stat(d, meth, metric);
            return mean ? s.mean : s.std;
          };
          metrics::MetricReport m{kind,        pick("dice"), pick("hd95"), pick("mad"),
                                  pick("nmi"), pick("ssim"), pick("runtime_s")};
          os << d << ',' << meth << ',' << pick("iters_used") << ',' << m.csv_row() << '\n';
        }
      }
    }
  }

  /// Reads per-case rows back; summary rows are recomputed, not parsed.
  static ExperimentReport read_cases_csv(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw ContractViolation("cannot read " + path.string());
    std::string line;
    std::getline(is, line);
    require(line == cases_header(), "unexpected case table header in " + path.string());
    ExperimentReport rep;
    while (std::getline(is, line)) {
      if (line.empty()) continue;
      std::vector<std::string> cells;
      std::stringstream ss(line);
      for (std::string c; std::getline(ss, c, ',');) cells.push_back(c);
      require(cells.size() == 10, "case row must have 10 columns: " + line);
      if (cells[3] == "mean" || cells[3] == "std") continue;
      CaseRow r;
      r.dataset = cells[0];
      r.method = cells[1];
      r.iters_used = int(std::stod(cells[2]));
      std::string rest;
      for (std::size_t i = 3; i < cells.size(); ++i) rest += (i > 3 ? "," : "") + cells[i];
      r.m = metrics::MetricReport::parse_csv_row(rest);
      rep.rows.push_back(std::move(r));
    }
    return rep;
  }

  /// Table layout: one row per (dataset, metric), a "Bef. Reg" column, one
  /// column per registration method, cells "mean +- std".
  void write_table_csv(const std::filesystem::path& path) const {
    std::vector<std::string> cols{kBeforeRegistration};
    for (const auto& d : datasets()) {
      for (const auto& m : methods(d)) {
        if (std::find(cols.begin(), cols.end(), m) == cols.end()) cols.push_back(m);
      }
    }
    std::ofstream os(path);
    os << "dataset,metric";
    for (const auto& c : cols) os << ',' << c;
    os << '\n';
    os << std::setprecision(6);
    for (const auto& d : datasets()) {
      const auto present = methods(d);
      for (const char* metric : {"dice", "hd95", "mad", "runtime_s"}) {
        os << d << ',' << metric;
        for (const auto& c : cols) {
          os << ',';
          if (std::find(present.begin(), present.end(), c) == present.end()) continue;
          const auto s = stat(d, c, metric);
          os << s.mean << " +- " << s.std;
        }
        os << '\n';
      }
    }
  }

  void write_stages(const std::filesystem::path& path) const {
    nlohmann::json j = stages;
    j["degraded"] = degraded;
    j["seconds"] = stage_seconds;
    write_json(path, j);
  }
};

/// Registers every pair with `method`, in parallel, appending rows in pair order.
inline void evaluate_pairs(ExperimentReport& rep, const std::string& dataset,
                           const std::string& method, const std::vector<TrainingPair>& pairs,
                           const std::function<RegistrationResult(const TrainingPair&)>& run,
                           double spacing, const std::filesystem::path& figures = {}) {
  std::vector<CaseRow> rows(pairs.size());
  std::vector<char> degraded(pairs.size(), 0);
  parallel_for(pairs.size(), [&](std::size_t i) {
    const auto& p = pairs[i];
    auto r = run(p);
    rows[i].dataset = dataset;
    rows[i].method = method;
    rows[i].iters_used = r.iters_used;
    rows[i].m = metrics::evaluate(p.id, p.ref, r.trans, p.ref_seg, r.seg_trans, r.runtime_s, spacing);
    degraded[i] = r.degraded;
    if (!figures.empty() && i < 4) write_result(figures / method / p.id, r, p.ref);
  });
  for (auto d : degraded) rep.degraded = rep.degraded || d;
  rep.rows.insert(rep.rows.end(), rows.begin(), rows.end());
}

/// Unregistered pairs (after affine pre-alignment): flt against ref.
inline void evaluate_before(ExperimentReport& rep, const std::string& dataset,
                            const std::vector<TrainingPair>& pairs, double spacing) {
  for (const auto& p : pairs) {
    rep.rows.push_back({dataset, kBeforeRegistration, 0,
                        metrics::evaluate(p.id, p.ref, p.flt, p.ref_seg, p.flt_seg, 0.0, spacing)});
  }
}

// --------------------------------------------------------------- stages

inline std::vector<TrainingPair> pairs_for(const std::vector<Case>& cases, const SynthConfig& synth,
                                           PairMode mode, int count, std::uint64_t seed) {
  return make_pairs(cases, synth, mode, count, seed);
}

/// Data stage: datasets on disk plus train/test pair sets for both domains.
inline void stage_data(const ExperimentConfig& cfg, const std::filesystem::path& out) {
  for (const auto* spec : {&cfg.domain_a, &cfg.domain_b}) {
    DomainSpec s = *spec;
    s.seed = mix_seed(cfg.seed, spec == &cfg.domain_a ? 0xA : 0xB) ^ spec->seed;
    synth_domain(s, out / "data" / spec->name);
    const auto cases = load_dataset(out / "data" / spec->name);
    const auto split = split_dataset(cases, mix_seed(s.seed, 0x5));
    write_pairs(out / "pairs" / spec->name / "train",
                pairs_for(split.train, cfg.synth, cfg.pair_mode, cfg.train_pairs, mix_seed(s.seed, 0x7)));
    write_pairs(out / "pairs" / spec->name / "test",
                pairs_for(split.test, cfg.synth, cfg.pair_mode, cfg.test_pairs, mix_seed(s.seed, 0x9)));
  }
}

/// Training stage: pretraining and adversarial training on one pair set.
inline TrainLog stage_train(const ExperimentConfig& cfg, const std::filesystem::path& pairs_dir,
                            const std::filesystem::path& model_dir, std::uint64_t seed) {
  const auto pairs = read_pairs(pairs_dir);
  ModelConfig mc = cfg.model;
  mc.height = pairs.front().ref.height();
  mc.width = pairs.front().ref.width();
  SarModel m = make_model(mc, mix_seed(seed, 0x1));
  TrainConfig tc = cfg.train;
  tc.seed = mix_seed(seed, 0x2);
  tc.log_path = model_dir / "train_log.csv";
  if (tc.checkpoint_every > 0) tc.checkpoint_dir = model_dir / "checkpoints";
  pretrain_generator(m, pairs, tc);
  const auto log = train(m, pairs, FeatureExtractor(cfg.extractor), tc);
  save_model(model_dir / "final", m);
  return log;
}

inline const std::string kInDomain = "in_domain";
inline const std::string kTransferFrozen = "transfer_frozen";
inline const std::string kTransferFinetune = "transfer_finetune";
inline const std::string kBaseline = "baseline";

/// Dice gap between the in-domain baseline and the fine-tuned transfer on
/// the same pairs (positive when the baseline is better).
inline double transfer_gap(const ExperimentReport& rep, const std::string& dataset) {
  return rep.stat(dataset, kBaseline, "dice").mean - rep.stat(dataset, kTransferFinetune, "dice").mean;
}

inline void write_report(const ExperimentReport& rep, const std::filesystem::path& out,
                         const std::string& transfer_dataset) {
  std::filesystem::create_directories(out);
  rep.write_cases_csv(out / "cases.csv");
  rep.write_table_csv(out / "table.csv");
  std::ofstream os(out / "gap.csv");
  os << std::setprecision(17) << "dataset,baseline_dice,transfer_dice,gap\n";
  const double base = rep.stat(transfer_dataset, kBaseline, "dice").mean;
  const double tr = rep.stat(transfer_dataset, kTransferFinetune, "dice").mean;
  os << transfer_dataset << ',' << base << ',' << tr << ',' << base - tr << '\n';
  rep.write_stages(out / "stages.json");
}

/// Runs the protocol. Stage failures are recorded and the report is still
/// written with whatever finished.
inline ExperimentReport run_experiment(const ExperimentConfig& cfg, const std::filesystem::path& out) {
  ExperimentReport rep;
  std::filesystem::create_directories(out);
  write_json(out / "config.json", cfg);
  const std::string a = cfg.domain_a.name, b = cfg.domain_b.name;
  require(a != b, "experiment: the two domains need distinct names");
  auto stage = [&](const std::string& name, const std::function<void()>& fn) {
    if (rep.stages.count(name)) return;
    const auto t0 = std::chrono::steady_clock::now();
    try {
      fn();
      rep.stages[name] = "ok";
      rep.stage_seconds[name] = detail::seconds_since(t0);
    } catch (const ContractViolation&) {
      throw;
    } catch (const std::exception& e) {
      rep.stages[name] = std::string("failed: ") + e.what();
      rep.degraded = true;
    }
  };
  auto ok = [&](const std::string& name) {
    const auto it = rep.stages.find(name);
    return it != rep.stages.end() && it->second == "ok";
  };
  auto skip_unless = [&](const std::string& name, std::initializer_list<const char*> deps) {
    for (const char* d : deps) {
      if (!ok(d)) rep.stages[name] = std::string("skipped: ") + d + " unavailable";
    }
  };

  stage("data", [&] { stage_data(cfg, out); });
  skip_unless("train_a", {"data"});
  stage("train_a", [&] { stage_train(cfg, out / "pairs" / a / "train", out / "models" / a, cfg.seed); });

  std::vector<TrainingPair> test_a, test_b;
  if (ok("data")) {
    test_a = read_pairs(out / "pairs" / a / "test");
    test_b = read_pairs(out / "pairs" / b / "test");
    evaluate_before(rep, a, test_a, cfg.spacing_mm);
    evaluate_before(rep, b, test_b, cfg.spacing_mm);
  }
  const auto figures = out / "figures";
  skip_unless("evaluate_a", {"train_a"});
  stage("evaluate_a", [&] {
    const SarModel m = load_model(out / "models" / a / "final");
    evaluate_pairs(rep, a, kInDomain, test_a, [&](const TrainingPair& p) {
      return register_frozen(m, p.flt, p.ref, PairMasks{p.flt_seg, p.ref_seg}, p.id);
    }, cfg.spacing_mm, figures / a);
  });
  skip_unless("transfer_b", {"train_a"});
  stage("transfer_b", [&] {
    const SarModel m = load_model(out / "models" / a / "final");
    evaluate_pairs(rep, b, kTransferFrozen, test_b, [&](const TrainingPair& p) {
      return register_frozen(m, p.flt, p.ref, PairMasks{p.flt_seg, p.ref_seg}, p.id);
    }, cfg.spacing_mm, figures / b);
    evaluate_pairs(rep, b, kTransferFinetune, test_b, [&](const TrainingPair& p) {
      return finetune_register(m, p.flt, p.ref, cfg.finetune, PairMasks{p.flt_seg, p.ref_seg}, p.id);
    }, cfg.spacing_mm, figures / b);
  });
  if (cfg.baseline) {
    skip_unless("train_b", {"data"});
    stage("train_b", [&] {
      stage_train(cfg, out / "pairs" / b / "train", out / "models" / b, mix_seed(cfg.seed, 0xBA5E));
    });
    skip_unless("evaluate_b", {"train_b"});
    stage("evaluate_b", [&] {
      const SarModel m = load_model(out / "models" / b / "final");
      evaluate_pairs(rep, b, kBaseline, test_b, [&](const TrainingPair& p) {
        return register_frozen(m, p.flt, p.ref, PairMasks{p.flt_seg, p.ref_seg}, p.id);
      }, cfg.spacing_mm, figures / b);
    });
  }
  write_report(rep, out, b);
  return rep;
}

}  // namespace sarreg

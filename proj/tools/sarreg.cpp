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

// Command-line front end.
//
// Every subcommand takes --config <json> --seed <u64> --out <dir>. Exit codes:
// 0 success, 2 contract violation (bad config, arguments or inputs),
// 3 degraded result (a stage failed, a loss went non-finite, or fine-tuning
// returned a flagged iterate).

#include <CLI11.hpp>

#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include "sarreg/sarreg.hpp"

namespace fs = std::filesystem;
using namespace sarreg;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitContract = 2;
constexpr int kExitDegraded = 3;

struct Invocation {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;

  nlohmann::json json() const { return read_json(config); }

  ExperimentConfig experiment() const {
    auto cfg = json().get<ExperimentConfig>();
    if (seed) cfg.seed = *seed;
    return cfg;
  }

  /// Path-valued config key, relative to the config file's directory.
  fs::path path(const std::string& key) const {
    const auto j = json();
    if (!j.contains(key)) throw ContractViolation("config is missing '" + key + "'");
    fs::path p = j.at(key).get<std::string>();
    return p.is_absolute() ? p : fs::path(config).parent_path() / p;
  }

  std::optional<fs::path> optional_path(const std::string& key) const {
    if (!json().contains(key)) return std::nullopt;
    return path(key);
  }
};

int run_synth(const Invocation& inv) {
  stage_data(inv.experiment(), inv.out);
  std::cout << "datasets and pair sets written to " << inv.out << '\n';
  return kExitOk;
}

int run_train(const Invocation& inv) {
  const auto cfg = inv.experiment();
  const auto log = stage_train(cfg, inv.path("pairs_dir"), inv.out, cfg.seed);
  std::cout << "trained " << log.steps.size() << " iterations in " << log.wall_time_s
            << " s; checkpoint " << (fs::path(inv.out) / "final") << '\n';
  return kExitOk;
}

std::optional<PairMasks> pair_masks(const Invocation& inv) {
  const auto fm = inv.optional_path("flt_mask"), rm = inv.optional_path("ref_mask");
  if (!fm && !rm) return std::nullopt;
  if (!fm || !rm) throw ContractViolation("give both flt_mask and ref_mask, or neither");
  return PairMasks{io::load_mask_pgm(*fm), io::load_mask_pgm(*rm)};
}

int run_register(const Invocation& inv, bool finetune) {
  const auto cfg = inv.experiment();
  const SarModel m = load_model(inv.path("checkpoint"));
  const Image flt = io::load_pgm(inv.path("flt"));
  const Image ref = io::load_pgm(inv.path("ref"));
  const auto masks = pair_masks(inv);
  const auto r = finetune ? finetune_register(m, flt, ref, cfg.finetune, masks, "pair")
                          : register_frozen(m, flt, ref, masks, "pair");
  write_result(inv.out, r, ref);
  std::cout << (finetune ? "fine-tuned" : "frozen") << " registration: " << r.iters_used
            << " iterations, " << r.runtime_s << " s";
  if (r.metrics) std::cout << ", dice " << r.metrics->dice;
  std::cout << '\n';
  if (r.degraded) {
    std::cerr << "degraded: " << r.degraded_reason << '\n';
    return kExitDegraded;
  }
  return kExitOk;
}

int run_evaluate(const Invocation& inv) {
  const auto cfg = inv.experiment();
  const auto j = inv.json();
  const SarModel m = load_model(inv.path("checkpoint"));
  const auto pairs = read_pairs(inv.path("pairs_dir"));
  const std::string dataset = j.value("dataset", std::string("test"));
  ExperimentReport rep;
  evaluate_before(rep, dataset, pairs, cfg.spacing_mm);
  evaluate_pairs(rep, dataset, "frozen", pairs, [&](const TrainingPair& p) {
    return register_frozen(m, p.flt, p.ref, PairMasks{p.flt_seg, p.ref_seg}, p.id);
  }, cfg.spacing_mm, fs::path(inv.out) / "figures");
  if (j.value("finetune_eval", true)) {
    evaluate_pairs(rep, dataset, "finetune", pairs, [&](const TrainingPair& p) {
      return finetune_register(m, p.flt, p.ref, cfg.finetune, PairMasks{p.flt_seg, p.ref_seg}, p.id);
    }, cfg.spacing_mm, fs::path(inv.out) / "figures");
  }
  fs::create_directories(inv.out);
  rep.write_cases_csv(fs::path(inv.out) / "cases.csv");
  rep.write_table_csv(fs::path(inv.out) / "table.csv");
  for (const auto& meth : rep.methods(dataset)) {
    std::cout << meth << ": dice " << rep.stat(dataset, meth, "dice").mean << ", hd95 "
              << rep.stat(dataset, meth, "hd95").mean << '\n';
  }
  return rep.degraded ? kExitDegraded : kExitOk;
}

int run_report(const Invocation& inv) {
  const auto cfg = inv.experiment();
  const auto j = inv.json();
  if (!j.contains("cases")) throw ContractViolation("config is missing 'cases'");
  ExperimentReport rep;
  for (const auto& c : j.at("cases")) {
    fs::path p = c.get<std::string>();
    if (!p.is_absolute()) p = fs::path(inv.config).parent_path() / p;
    const auto part = ExperimentReport::read_cases_csv(p);
    rep.rows.insert(rep.rows.end(), part.rows.begin(), part.rows.end());
  }
  write_report(rep, inv.out, cfg.domain_b.name);
  std::cout << "report written to " << inv.out << '\n';
  return kExitOk;
}

int run_experiment_cmd(const Invocation& inv) {
  const auto rep = run_experiment(inv.experiment(), inv.out);
  for (const auto& [stage, status] : rep.stages) std::cout << stage << ": " << status << '\n';
  for (const auto& d : rep.datasets()) {
    for (const auto& meth : rep.methods(d)) {
      std::cout << d << " / " << meth << ": dice " << rep.stat(d, meth, "dice").mean << ", hd95 "
                << rep.stat(d, meth, "hd95").mean << '\n';
    }
  }
  return rep.degraded ? kExitDegraded : kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"sarreg: GAN-based deformable registration with last-layer transfer"};
  app.require_subcommand(1);
  Invocation inv;
  std::uint64_t seed = 0;
  auto add = [&](const std::string& name, const std::string& help) {
    auto* sub = app.add_subcommand(name, help);
    sub->add_option("--config", inv.config, "JSON configuration file")->required();
    sub->add_option("--seed", seed, "Base seed (overrides the config)");
    sub->add_option("--out", inv.out, "Output directory")->required();
    return sub;
  };
  auto* synth = add("synth-data", "Synthesise both domains and their pair sets");
  auto* train = add("train", "Pretrain and adversarially train on a pair set");
  auto* reg = add("register", "Register one pair with a frozen model");
  auto* fine = add("finetune", "Register one pair by fine-tuning the last layer");
  auto* eval = add("evaluate", "Evaluate a model on a pair set");
  auto* report = add("report", "Merge case tables into the report layout");
  auto* exp = add("experiment", "Run the full two-domain transfer protocol");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitContract;
  }
  for (auto* sub : app.get_subcommands()) {
    if (sub->count("--seed")) inv.seed = seed;
  }

  try {
    if (synth->parsed()) return run_synth(inv);
    if (train->parsed()) return run_train(inv);
    if (reg->parsed()) return run_register(inv, false);
    if (fine->parsed()) return run_register(inv, true);
    if (eval->parsed()) return run_evaluate(inv);
    if (report->parsed()) return run_report(inv);
    if (exp->parsed()) return run_experiment_cmd(inv);
  } catch (const ContractViolation& e) {
    std::cerr << "contract violation: " << e.what() << '\n';
    return kExitContract;
  } catch (const io::FormatError& e) {
    std::cerr << "contract violation: " << e.what() << '\n';
    return kExitContract;
  } catch (const nlohmann::json::exception& e) {
    std::cerr << "contract violation: bad configuration: " << e.what() << '\n';
    return kExitContract;
  } catch (const NonFiniteLoss& e) {
    std::cerr << "degraded: " << e.what() << '\n';
    return kExitDegraded;
  } catch (const DegenerateInput& e) {
    std::cerr << "degraded: " << e.what() << '\n';
    return kExitDegraded;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return kExitContract;
}

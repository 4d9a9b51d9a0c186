// amortda: data-assimilation workbench CLI.
//
// Subcommands: generate-data, train, evaluate, tune-enkf, verify-theory.
// All outputs are deterministic for a fixed --seed; wall-clock columns are
// zero unless --timing is passed.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <set>
#include <thread>

#include <CLI11.hpp>
#include <json.hpp>

#include "amortda/evaluation.hpp"
#include "amortda/json_config.hpp"
#include "amortda/training.hpp"

using namespace amortda;
using nlohmann::json;

namespace {

std::string resolve(const std::string& path, const std::string& out_dir) {
  if (path.empty() || path.front() == '/') return path;
  return (std::filesystem::path(out_dir) / path).string();
}

json load_json_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw Error("cannot open config file " + path);
  json j = json::parse(f, nullptr, /*allow_exceptions=*/false);
  if (j.is_discarded()) throw Error("invalid JSON in " + path);
  return j;
}

uint64_t fnv1a(const std::string& s) {
  uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

struct GlobalOpts {
  std::string out_dir = ".";
  std::optional<uint64_t> seed;
  int threads = 0;  // 0 = hardware concurrency
  bool timing = false;

  int effective_threads() const {
    if (threads > 0) return threads;
    const unsigned hc = std::thread::hardware_concurrency();
    return hc > 0 ? (int)hc : 1;
  }
};

int cmd_generate_data(const std::string& config_path, const GlobalOpts& g) {
  json cfg = load_json_file(config_path);
  SystemSpec spec = system_from_json(cfg.at("system"));
  ObservationOperator op = operator_from_json(cfg.at("operator"));
  const int burn_in = cfg.value("burn_in_steps", 1000);
  uint64_t seed = g.seed ? *g.seed : cfg.at("seed").get<uint64_t>();

  std::set<std::string> roles;
  for (const auto& split : cfg.at("splits")) {
    const std::string role = split.at("role").get<std::string>();
    if (!roles.insert(role).second)
      throw Error("generate-data: duplicate split role '" + role + "'");
    const int sequences = split.at("sequences").get<int>();
    const int steps = split.at("steps").get<int>();
    const bool with_truth = split.value("with_truth", true);
    const std::string file = resolve(split.at("file").get<std::string>(), g.out_dir);
    // disjoint split seeds derived from the master seed and the role name
    const uint64_t split_seed = Rng(seed).stream(4, fnv1a(role)).root_seed();
    auto ds = generate_dataset(spec, op, sequences, steps, burn_in, split_seed, role, with_truth);
    ds.save(file);
    std::cout << "wrote " << file << " (" << sequences << " sequences x " << steps
              << " cycles, role " << role << ")\n";
  }
  return 0;
}

AmEnFArch arch_from_config(const json& cfg, const SystemSpec& spec) {
  AmEnFArch arch = AmEnFArch::defaults_for(spec);
  if (cfg.contains("model")) {
    const json& m = cfg.at("model");
    arch.trunk_layers = m.value("trunk_layers", arch.trunk_layers);
    arch.filters = m.value("filters", arch.filters);
    arch.kernel_width = m.value("kernel_width", arch.kernel_width);
    arch.memory_depth = m.value("memory_depth", arch.memory_depth);
    arch.cov_width = m.value("cov_width", arch.cov_width);
    arch.dropout_rate = m.value("dropout_rate", arch.dropout_rate);
    arch.validate();
  }
  return arch;
}

int cmd_train(const std::string& config_path, const GlobalOpts& g) {
  json cfg = load_json_file(config_path);
  auto train_ds =
      TrajectoryDataset::load(resolve(cfg.at("train_file").get<std::string>(), g.out_dir));
  auto val_ds = TrajectoryDataset::load(resolve(cfg.at("val_file").get<std::string>(), g.out_dir));

  TrainConfig tc;
  tc.loss = loss_kind_from_string(cfg.value("loss", "ssf"));
  tc.unroll = cfg.value("unroll", 40);
  tc.batch_size = cfg.value("batch_size", 64);
  tc.epochs = cfg.value("epochs", 100);
  tc.lr = cfg.value("learning_rate", 8e-4);
  tc.warmup_iters = cfg.value("warmup_iters", 50);
  tc.halving_period = cfg.value("halving_period", 200);
  tc.ensemble = cfg.value("ensemble_size", 10);
  tc.seed = g.seed ? *g.seed : cfg.at("seed").get<uint64_t>();
  tc.threads = g.effective_threads();
  tc.grad_clip = cfg.value("grad_clip", 10.0);

  AmEnFArch arch = arch_from_config(cfg, train_ds.system);
  Rng init_rng(Rng(tc.seed).stream(5).root_seed());
  AmEnFModel model = AmEnFModel::init(arch, init_rng);

  auto cb = [&](const EpochMetrics& em) {
    std::cout << "epoch " << em.epoch << " train_loss " << em.train_loss << " val_ssf "
              << em.val_ssf << " val_rmse " << em.val_rmse_vs_truth << " lr " << em.lr
              << std::endl;
  };
  TrainResult res = train(model, train_ds, val_ds, tc, cb, g.timing);

  json echo = cfg;
  echo["seed"] = tc.seed;
  const std::string ckpt = resolve(cfg.value("checkpoint_out", "model.ckpt"), g.out_dir);
  const std::string best = resolve(cfg.value("best_checkpoint_out", "model_best.ckpt"), g.out_dir);
  const std::string metrics = resolve(cfg.value("metrics_out", "metrics.csv"), g.out_dir);

  json final_meta = {{"config", echo}, {"which", "final"}, {"epochs", tc.epochs}};
  res.final_model.metadata_json = final_meta.dump();
  res.final_model.save(ckpt);
  json best_info = json::parse(res.best_model.metadata_json, nullptr, false);
  json best_meta = {{"config", echo},
                    {"which", "best"},
                    {"best", best_info.is_discarded() ? json::object() : best_info}};
  res.best_model.metadata_json = best_meta.dump();
  res.best_model.save(best);
  write_metrics_csv(metrics, res.log);
  std::cout << "wrote " << ckpt << ", " << best << ", " << metrics << "\n";
  return 0;
}

MethodSpec method_from_json(const json& m, const GlobalOpts& g) {
  MethodSpec spec;
  const std::string type = m.at("type").get<std::string>();
  spec.name = m.value("name", "");
  if (type == "identity") {
    spec.type = MethodSpec::Type::Identity;
  } else if (type == "enkf") {
    spec.type = MethodSpec::Type::Enkf;
    if (m.contains("params_file")) {
      json p = load_json_file(resolve(m.at("params_file").get<std::string>(), g.out_dir));
      spec.enkf.inflation = p.at("inflation").get<double>();
      if (!p.at("loc_radius").is_null()) spec.enkf.loc_radius = p.at("loc_radius").get<double>();
    } else {
      spec.enkf.inflation = m.value("inflation", 1.0);
      if (m.contains("loc_radius") && !m.at("loc_radius").is_null())
        spec.enkf.loc_radius = m.at("loc_radius").get<double>();
    }
  } else if (type == "amenf") {
    spec.type = MethodSpec::Type::Amenf;
    spec.checkpoint = resolve(m.at("checkpoint").get<std::string>(), g.out_dir);
    if (m.contains("dropout_override") && !m.at("dropout_override").is_null())
      spec.dropout_override = m.at("dropout_override").get<double>();
  } else {
    throw Error("evaluate: unknown method type '" + type + "'");
  }
  return spec;
}

int cmd_evaluate(const std::string& config_path, const GlobalOpts& g) {
  json cfg = load_json_file(config_path);
  ExperimentConfig ec;
  ec.test_file = resolve(cfg.at("test_file").get<std::string>(), g.out_dir);
  for (const auto& m : cfg.at("methods")) ec.methods.push_back(method_from_json(m, g));
  if (cfg.contains("ensemble_sizes"))
    ec.ensemble_sizes = cfg.at("ensemble_sizes").get<std::vector<int>>();
  if (cfg.contains("sigmas")) ec.sigmas = cfg.at("sigmas").get<std::vector<double>>();
  ec.repetitions = cfg.value("repetitions", 10);
  ec.seed = g.seed ? *g.seed : cfg.at("seed").get<uint64_t>();
  ec.max_cycles = cfg.value("max_cycles", 0);
  ec.threads = g.effective_threads();

  ExperimentReport rep = run_experiment(ec, g.timing);
  const std::string csv = resolve(cfg.value("report_csv", "report.csv"), g.out_dir);
  const std::string js = resolve(cfg.value("report_json", "report.json"), g.out_dir);
  write_report_csv(csv, rep);
  write_report_json(js, ec, rep);
  for (const auto& c : rep.cells)
    std::cout << c.method << " m=" << c.m << " sigma=" << c.sigma << ": rmse " << c.rmse_mean
              << " +/- " << c.rmse_std << " (n=" << c.n << ")\n";
  std::cout << "wrote " << csv << ", " << js << "\n";
  return 0;
}

int cmd_tune_enkf(const std::string& config_path, const GlobalOpts& g) {
  json cfg = load_json_file(config_path);
  EnkfTuneConfig tc;
  tc.val_file = resolve(cfg.at("val_file").get<std::string>(), g.out_dir);
  tc.ensemble_size = cfg.value("ensemble_size", 10);
  if (cfg.contains("inflations")) tc.inflations = cfg.at("inflations").get<std::vector<double>>();
  if (cfg.contains("radii")) tc.radii = cfg.at("radii").get<std::vector<double>>();
  tc.include_no_localization = cfg.value("include_no_localization", true);
  tc.seed = g.seed ? *g.seed : cfg.at("seed").get<uint64_t>();
  tc.max_cycles = cfg.value("max_cycles", 0);

  EnkfTuneResult res = tune_enkf(tc);
  json out;
  out["inflation"] = res.best.inflation;
  out["loc_radius"] = res.best.loc_radius ? json(*res.best.loc_radius) : json(nullptr);
  out["val_rmse"] = res.best_rmse;
  out["ensemble_size"] = tc.ensemble_size;
  out["grid"] = json::array();
  for (const auto& row : res.grid)
    out["grid"].push_back({{"inflation", row.inflation},
                           {"loc_radius", row.radius ? json(*row.radius) : json(nullptr)},
                           {"rmse", row.failed ? json(nullptr) : json(row.rmse)},
                           {"failed", row.failed}});
  const std::string path = resolve(cfg.value("out", "enkf_params.json"), g.out_dir);
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw Error("tune-enkf: cannot open " + path);
  f << out.dump(2) << '\n';
  std::cout << "best inflation " << res.best.inflation << " loc_radius "
            << (res.best.loc_radius ? std::to_string(*res.best.loc_radius) : "none")
            << " val_rmse " << res.best_rmse << "\nwrote " << path << "\n";
  return 0;
}

json lemma_to_json(const Lemma1Result& r) {
  return {{"lhs", r.lhs},
          {"rhs", r.rhs},
          {"supervised_term", r.supervised},
          {"noise_term", r.noise},
          {"rel_gap", r.rel_gap}};
}

int cmd_verify_theory(const GlobalOpts& g, int draws, int dim, double sigma,
                      const std::string& checkpoint, const std::string& test_file,
                      const std::string& out_path) {
  const uint64_t seed = g.seed ? *g.seed : 0;
  Rng rng(seed);
  TheoryReport rep = verify_theory(sigma, dim, draws, rng);
  json out;
  out["lemma1"] = {{"sigma", sigma},
                   {"dim", dim},
                   {"draws", draws},
                   {"perfect_predictor", lemma_to_json(rep.perfect)},
                   {"constant_zero_predictor", lemma_to_json(rep.constant_zero)},
                   {"propagated_observation_predictor", lemma_to_json(rep.propagated)},
                   {"cheating_predictor", lemma_to_json(rep.cheating)},
                   {"cheating_gap_expected", rep.cheating_gap_expected},
                   {"cheating_gap_measured", rep.cheating.rhs - rep.cheating.lhs}};
  if (!checkpoint.empty()) {
    if (test_file.empty()) throw Error("verify-theory: --test-file is required with --checkpoint");
    AmEnFModel model = AmEnFModel::load(resolve(checkpoint, g.out_dir));
    auto ds = TrajectoryDataset::load(resolve(test_file, g.out_dir));
    Rng prng = rng.stream(9);
    Prop2Result p2 = prop2_check(ds, model, 10, 500, prng);
    out["forecast_bound_check"] = {{"cycles", p2.cycles},
                                   {"violations", p2.violations},
                                   {"lipschitz_estimate", p2.lipschitz_estimate},
                                   {"bound_factor", p2.bound_factor}};
  }
  if (out_path.empty()) {
    std::cout << out.dump(2) << '\n';
  } else {
    const std::string path = resolve(out_path, g.out_dir);
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw Error("verify-theory: cannot open " + path);
    f << out.dump(2) << '\n';
    std::cout << "wrote " << path << "\n";
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"amortda: learned and classical ensemble data assimilation workbench"};
  app.require_subcommand(1);

  GlobalOpts g;
  uint64_t seed_opt = 0;
  bool seed_given = false;
  app.add_option("--out-dir", g.out_dir, "Directory against which relative paths resolve");
  app.add_option("--seed", seed_opt, "Override the config seed")->each([&](const std::string&) {
    seed_given = true;
  });
  app.add_option("--threads", g.threads, "Worker threads (default: hardware concurrency)");
  app.add_flag("--timing", g.timing,
               "Record wall-clock columns (off by default for bit-reproducible output)");

  std::string cfg_gen, cfg_train, cfg_eval, cfg_tune;
  auto* c1 = app.add_subcommand("generate-data", "Simulate trajectories and observations");
  c1->add_option("config", cfg_gen, "JSON config")->required();
  auto* c2 = app.add_subcommand("train", "Train an amortized analysis model");
  c2->add_option("config", cfg_train, "JSON config")->required();
  auto* c3 = app.add_subcommand("evaluate", "Run filtering experiments and write reports");
  c3->add_option("config", cfg_eval, "JSON config")->required();
  auto* c4 = app.add_subcommand("tune-enkf", "Grid-search EnKF inflation/localization");
  c4->add_option("config", cfg_tune, "JSON config")->required();

  int draws = 100000, dim = 10;
  double sigma = 1.0;
  std::string checkpoint, test_file, theory_out;
  auto* c5 = app.add_subcommand("verify-theory", "Monte-Carlo checks of the loss decomposition");
  c5->add_option("--draws", draws, "Monte-Carlo draws");
  c5->add_option("--dim", dim, "Toy state dimension");
  c5->add_option("--sigma", sigma, "Observation noise");
  c5->add_option("--checkpoint", checkpoint, "Optional model for the forecast-bound check");
  c5->add_option("--test-file", test_file, "Dataset with truth for the forecast-bound check");
  c5->add_option("--out", theory_out, "Write the JSON report here instead of stdout");

  CLI11_PARSE(app, argc, argv);
  if (seed_given) g.seed = seed_opt;

  try {
    if (c1->parsed()) return cmd_generate_data(cfg_gen, g);
    if (c2->parsed()) return cmd_train(cfg_train, g);
    if (c3->parsed()) return cmd_evaluate(cfg_eval, g);
    if (c4->parsed()) return cmd_tune_enkf(cfg_tune, g);
    if (c5->parsed())
      return cmd_verify_theory(g, draws, dim, sigma, checkpoint, test_file, theory_out);
  } catch (const std::exception& e) {
    nlohmann::json err{{"error", {{"message", e.what()}}}};
    std::cerr << err.dump() << std::endl;
    return 1;
  }
  return 2;
}

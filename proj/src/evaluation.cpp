#include "amortda/evaluation.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <limits>
#include <set>
#include <thread>

#include <json.hpp>

namespace amortda {

double rmse_states(const std::vector<std::vector<double>>& estimates,
                   const std::vector<std::vector<double>>& truth) {
  if (estimates.size() != truth.size()) throw Error("rmse: series length mismatch");
  if (estimates.empty()) throw Error("rmse: empty series");
  double acc = 0.0;
  for (size_t k = 0; k < estimates.size(); ++k) {
    if (estimates[k].size() != truth[k].size()) throw Error("rmse: state dimension mismatch");
    double s = 0.0;
    for (size_t j = 0; j < estimates[k].size(); ++j) {
      const double e = estimates[k][j] - truth[k][j];
      s += e * e;
    }
    acc += std::sqrt(s / (double)estimates[k].size());
  }
  return acc / (double)estimates.size();
}

double rmse(const Trajectory& estimates, const Trajectory& truth) {
  return rmse_states(estimates.states, truth.states);
}

// ---- Lemma 1 -----------------------------------------------------------------

namespace {
// toy dynamics for the decomposition harness
std::vector<double> toy_propagate(const std::vector<double>& x) {
  const size_t d = x.size();
  std::vector<double> out(d);
  for (size_t j = 0; j < d; ++j) out[j] = 0.9 * x[(j + 1) % d] + 0.5;
  return out;
}
}  // namespace

Lemma1Result verify_lemma1(const LemmaPredictor& f, bool declared_cheating, double sigma, int dim,
                           int n_draws, Rng& rng) {
  if (dim < 1 || n_draws < 1) throw Error("verify_lemma1: bad dimensions");
  Lemma1Result res;
  for (int t = 0; t < n_draws; ++t) {
    std::vector<double> xk((size_t)dim);
    for (auto& v : xk) v = 3.0 + rng.normal();
    const auto xn = toy_propagate(xk);
    std::vector<double> yk((size_t)dim), yn((size_t)dim);
    for (int j = 0; j < dim; ++j) {
      yk[(size_t)j] = xk[(size_t)j] + sigma * rng.normal();
      yn[(size_t)j] = xn[(size_t)j] + sigma * rng.normal();
    }
    LemmaProbe probe(yk, yn, xn);
    const auto z = f(probe);
    if ((int)z.size() != dim) throw Error("verify_lemma1: predictor output dimension mismatch");
    if (probe.accessed_next() && !declared_cheating)
      throw Error("verify_lemma1: predictor read y_{k+1}; it is not a function of y_{0:k}");
    double lhs = 0.0, sup = 0.0, noise = 0.0;
    for (int j = 0; j < dim; ++j) {
      const double a = z[(size_t)j] - yn[(size_t)j];
      const double b = z[(size_t)j] - xn[(size_t)j];
      const double c = yn[(size_t)j] - xn[(size_t)j];
      lhs += a * a;
      sup += b * b;
      noise += c * c;
    }
    res.lhs += lhs;
    res.supervised += sup;
    res.noise += noise;
  }
  res.lhs /= n_draws;
  res.supervised /= n_draws;
  res.noise /= n_draws;
  res.rhs = res.supervised + res.noise;
  res.rel_gap = std::abs(res.lhs - res.rhs) / std::max(res.rhs, 1e-300);
  return res;
}

TheoryReport verify_theory(double sigma, int dim, int n_draws, Rng& rng) {
  TheoryReport rep;
  {
    Rng r = rng.stream(1);
    rep.perfect = verify_lemma1(
        [](const LemmaProbe& p) { return p.truth_next(); }, false, sigma, dim, n_draws, r);
  }
  {
    Rng r = rng.stream(2);
    rep.constant_zero = verify_lemma1(
        [dim](const LemmaProbe&) { return std::vector<double>((size_t)dim, 0.0); }, false, sigma,
        dim, n_draws, r);
  }
  {
    Rng r = rng.stream(3);
    rep.propagated = verify_lemma1(
        [](const LemmaProbe& p) { return toy_propagate(p.y_current()); }, false, sigma, dim,
        n_draws, r);
  }
  {
    Rng r = rng.stream(4);
    rep.cheating = verify_lemma1([](const LemmaProbe& p) { return p.y_next(); },
                                 /*declared_cheating=*/true, sigma, dim, n_draws, r);
  }
  rep.cheating_gap_expected = 2.0 * dim * sigma * sigma;
  return rep;
}

Prop2Result prop2_check(const TrajectoryDataset& ds, const AmEnFModel& model, int m,
                        int max_cycles, Rng& rng) {
  const SystemSpec& spec = ds.system;
  Integrator integ(spec);
  const auto& truth = ds.truth_for_diagnostics(0);
  auto view = ds.view(0);
  int cycles = view.cycles();
  if (max_cycles > 0) cycles = std::min(cycles, max_cycles + 1);

  Prop2Result res;
  // empirical Lipschitz estimate of the tendency over the attractor
  {
    Rng lr = rng.stream(1);
    std::vector<double> ga((size_t)spec.dimension), gb((size_t)spec.dimension);
    for (int trial = 0; trial < 200; ++trial) {
      const auto& base = truth[(size_t)lr.uniform_int((int)truth.size())];
      std::vector<double> pert = base;
      double norm = 0.0;
      std::vector<double> dir((size_t)spec.dimension);
      for (auto& v : dir) {
        v = lr.normal();
        norm += v * v;
      }
      norm = std::sqrt(norm);
      const double eps = 1e-5;
      for (int j = 0; j < spec.dimension; ++j) pert[(size_t)j] += eps * dir[(size_t)j] / norm;
      integ.rhs(base.data(), ga.data());
      integ.rhs(pert.data(), gb.data());
      double dg = 0.0;
      for (int j = 0; j < spec.dimension; ++j) {
        const double e = gb[(size_t)j] - ga[(size_t)j];
        dg += e * e;
      }
      res.lipschitz_estimate = std::max(res.lipschitz_estimate, std::sqrt(dg) / eps);
    }
  }
  const double dt_obs = spec.dt * spec.steps_per_observation;
  res.bound_factor = std::exp(res.lipschitz_estimate * dt_obs);

  Rng frng = rng.stream(2);
  AmEnFState st = amenf_initial_state(view.obs(0), model.arch, m, frng);
  for (int k = 1; k < cycles - 1; ++k) {
    Tape tape;
    ModelVars mv = bind_model(tape, model, false);
    CycleVars cv{tape.input(st.members), tape.input(st.memory), st.cycle};
    CycleResult cr = amenf_cycle(tape, integ, cv, view.obs(k), model, mv, frng);
    st.members = tape.val(cr.state.members);
    st.memory = tape.val(cr.state.memory);
    st.cycle = cr.state.cycle;

    const auto mu = members_mean_state(st.members);
    double lhs = 0.0;
    for (size_t j = 0; j < mu.size(); ++j) {
      const double e = mu[j] - truth[(size_t)k][j];
      lhs += e * e;
    }
    lhs = std::sqrt(lhs);

    double max_fore = 0.0;
    for (int i = 0; i < m; ++i) {
      auto x = member_state(st.members, i);
      integ.steps(x, spec.steps_per_observation);
      double e2 = 0.0;
      for (size_t j = 0; j < x.size(); ++j) {
        const double e = x[j] - truth[(size_t)(k + 1)][j];
        e2 += e * e;
      }
      max_fore = std::max(max_fore, std::sqrt(e2));
    }
    res.cycles += 1;
    if (lhs > res.bound_factor * max_fore) res.violations += 1;
  }
  return res;
}

// ---- experiment runner ---------------------------------------------------------

namespace {

std::vector<ObservationRecord> synthesize_observations(
    const std::vector<std::vector<double>>& truth, const ObservationOperator& op_template,
    double sigma, Rng& rng) {
  ObservationOperator op = op_template;
  op.sigma = sigma;
  std::vector<ObservationRecord> obs;
  obs.reserve(truth.size());
  for (size_t k = 0; k < truth.size(); ++k) obs.push_back(observe(truth[k], op, (int)k, rng));
  return obs;
}

double identity_rmse(const std::vector<ObservationRecord>& obs,
                     const std::vector<std::vector<double>>& truth) {
  // raw-observation error over observed coordinates; skip the initial record
  double acc = 0.0;
  int n = 0;
  for (size_t k = 1; k < obs.size(); ++k) {
    const auto& rec = obs[k];
    double s = 0.0;
    size_t vi = 0;
    for (size_t j = 0; j < rec.mask.size(); ++j)
      if (rec.mask[j]) {
        const double e = rec.values[vi++] - truth[k][j];
        s += e * e;
      }
    acc += std::sqrt(s / (double)rec.values.size());
    ++n;
  }
  return acc / n;
}

double mean_of(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return v.empty() ? 0.0 : s / (double)v.size();
}

std::string resolved_name(const MethodSpec& m) {
  if (!m.name.empty()) return m.name;
  switch (m.type) {
    case MethodSpec::Type::Identity: return "identity";
    case MethodSpec::Type::Enkf: return "enkf";
    case MethodSpec::Type::Amenf: return "amenf";
  }
  return "?";
}

}  // namespace

ExperimentReport run_experiment(const ExperimentConfig& cfg, bool timing) {
  if (cfg.repetitions < 1) throw Error("run_experiment: repetitions must be >= 1");
  if (cfg.methods.empty()) throw Error("run_experiment: no methods configured");
  TrajectoryDataset test = TrajectoryDataset::load(cfg.test_file);
  if (!test.has_truth) throw Error("run_experiment: test dataset must carry truth");
  auto truth = test.truth_for_diagnostics(0);
  if (cfg.max_cycles > 0 && (int)truth.size() > cfg.max_cycles + 1)
    truth.resize((size_t)cfg.max_cycles + 1);

  // preload checkpoints once; method names must be unique for aggregation.
  // A method that cannot load poisons only its own rows.
  std::vector<AmEnFModel> models(cfg.methods.size());
  std::vector<std::string> preload_errors(cfg.methods.size());
  std::vector<std::string> names(cfg.methods.size());
  std::set<std::string> seen;
  for (size_t mi = 0; mi < cfg.methods.size(); ++mi) {
    names[mi] = resolved_name(cfg.methods[mi]);
    if (!seen.insert(names[mi]).second)
      throw Error("run_experiment: duplicate method name '" + names[mi] + "'");
    if (cfg.methods[mi].type == MethodSpec::Type::Amenf) {
      try {
        models[mi] = AmEnFModel::load(cfg.methods[mi].checkpoint);
        if (cfg.methods[mi].dropout_override)
          models[mi].arch.dropout_rate = *cfg.methods[mi].dropout_override;
      } catch (const std::exception& e) {
        preload_errors[mi] = e.what();
      }
    }
  }

  Rng master(cfg.seed);
  ExperimentReport report;

  struct Job {
    size_t mi;
    int m;
    size_t si;
    int rep;
  };
  std::vector<Job> jobs;
  for (size_t mi = 0; mi < cfg.methods.size(); ++mi)
    for (int m : cfg.ensemble_sizes)
      for (size_t si = 0; si < cfg.sigmas.size(); ++si)
        for (int rep = 0; rep < cfg.repetitions; ++rep) jobs.push_back({mi, m, si, rep});
  report.rows.resize(jobs.size());

  auto run_job = [&](size_t ji) {
    const Job& job = jobs[ji];
    const MethodSpec& method = cfg.methods[job.mi];
    const double sigma = cfg.sigmas[job.si];
    ExperimentRow& row = report.rows[ji];
    row.method = names[job.mi];
    row.m = job.m;
    row.sigma = sigma;
    row.rep = job.rep;
    if (!preload_errors[job.mi].empty()) {
      row.failed = true;
      row.error = preload_errors[job.mi];
      return;
    }
    const auto t0 = std::chrono::steady_clock::now();
    try {
      // rep-matched noise: the same stream drives every sigma and method
      Rng obs_rng = master.stream(100, (uint64_t)job.rep);
      auto obs = synthesize_observations(truth, test.op, sigma, obs_rng);
      ObservationSequenceView view(test.system, obs);

      switch (method.type) {
        case MethodSpec::Type::Identity:
          row.rmse = identity_rmse(obs, truth);
          row.mean_spread = 0.0;
          break;
        case MethodSpec::Type::Enkf: {
          Rng frng = master.stream(200 + job.mi, (uint64_t)job.rep,
                                   (uint64_t)(job.si * 1000 + (size_t)job.m));
          auto res = run_enkf(view, &truth, method.enkf, job.m, frng);
          row.rmse = res.mean_rmse;
          row.mean_spread = mean_of(res.spread);
          break;
        }
        case MethodSpec::Type::Amenf: {
          Rng frng = master.stream(300 + job.mi, (uint64_t)job.rep,
                                   (uint64_t)(job.si * 1000 + (size_t)job.m));
          auto res = run_amenf(view, &truth, models[job.mi], job.m, frng);
          row.rmse = res.mean_rmse;
          row.mean_spread = mean_of(res.spread);
          break;
        }
      }
    } catch (const std::exception& e) {
      row.failed = true;
      row.error = e.what();
    }
    row.wall_seconds =
        timing ? std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count()
               : 0.0;
  };

  if (cfg.threads <= 1) {
    for (size_t ji = 0; ji < jobs.size(); ++ji) run_job(ji);
  } else {
    std::vector<std::thread> pool;
    for (int t = 0; t < cfg.threads; ++t)
      pool.emplace_back([&, t] {
        for (size_t ji = (size_t)t; ji < jobs.size(); ji += (size_t)cfg.threads) run_job(ji);
      });
    for (auto& th : pool) th.join();
  }

  // aggregate over repetitions
  for (size_t mi = 0; mi < cfg.methods.size(); ++mi)
    for (int m : cfg.ensemble_sizes)
      for (size_t si = 0; si < cfg.sigmas.size(); ++si) {
        ExperimentCell cell;
        cell.method = names[mi];
        cell.m = m;
        cell.sigma = cfg.sigmas[si];
        std::vector<double> vals;
        for (const auto& row : report.rows)
          if (!row.failed && row.method == names[mi] && row.m == m &&
              row.sigma == cfg.sigmas[si])
            vals.push_back(row.rmse);
        if (vals.empty()) continue;
        cell.n = (int)vals.size();
        cell.rmse_mean = mean_of(vals);
        double var = 0.0;
        for (double v : vals) var += (v - cell.rmse_mean) * (v - cell.rmse_mean);
        cell.rmse_std = vals.size() > 1 ? std::sqrt(var / (double)(vals.size() - 1)) : 0.0;
        report.cells.push_back(cell);
      }
  return report;
}

void write_report_csv(const std::string& path, const ExperimentReport& report) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw Error("write_report_csv: cannot open " + path);
  f.precision(17);
  f << "method,m,sigma,rep,rmse,mean_spread,wall_seconds,failed,error\n";
  for (const auto& r : report.rows)
    f << r.method << ',' << r.m << ',' << r.sigma << ',' << r.rep << ',' << r.rmse << ','
      << r.mean_spread << ',' << r.wall_seconds << ',' << (r.failed ? 1 : 0) << ",\""
      << r.error << "\"\n";
  if (!f) throw Error("write_report_csv: write failed");
}

void write_report_json(const std::string& path, const ExperimentConfig& cfg,
                       const ExperimentReport& report) {
  nlohmann::json j;
  j["test_file"] = cfg.test_file;
  j["repetitions"] = cfg.repetitions;
  j["seed"] = cfg.seed;
  j["rows"] = nlohmann::json::array();
  for (const auto& r : report.rows)
    j["rows"].push_back({{"method", r.method},
                         {"m", r.m},
                         {"sigma", r.sigma},
                         {"rep", r.rep},
                         {"rmse", r.rmse},
                         {"mean_spread", r.mean_spread},
                         {"wall_seconds", r.wall_seconds},
                         {"failed", r.failed},
                         {"error", r.error}});
  j["aggregates"] = nlohmann::json::array();
  for (const auto& c : report.cells)
    j["aggregates"].push_back({{"method", c.method},
                               {"m", c.m},
                               {"sigma", c.sigma},
                               {"rmse_mean", c.rmse_mean},
                               {"rmse_std", c.rmse_std},
                               {"n", c.n}});
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw Error("write_report_json: cannot open " + path);
  f << j.dump(2) << '\n';
  if (!f) throw Error("write_report_json: write failed");
}

// ---- EnKF tuning ----------------------------------------------------------------

std::vector<double> default_inflation_grid() {
  return {1.00, 1.01, 1.02, 1.04, 1.07, 1.1, 1.2, 1.4, 1.7, 2.00};
}

std::vector<double> default_radius_grid() {
  return {0.1, 0.2, 0.4, 0.7, 1.0, 2.0, 4.0, 7.0, 10.0, 20.0, 40.0, 70.0};
}

EnkfTuneResult tune_enkf(const EnkfTuneConfig& cfg) {
  TrajectoryDataset val = TrajectoryDataset::load(cfg.val_file);
  if (!val.has_truth) throw Error("tune_enkf: validation dataset must carry truth");
  const auto inflations = cfg.inflations.empty() ? default_inflation_grid() : cfg.inflations;
  const auto radii = cfg.radii.empty() ? default_radius_grid() : cfg.radii;

  std::vector<std::optional<double>> radius_options;
  if (cfg.include_no_localization) radius_options.push_back(std::nullopt);
  for (double r : radii) radius_options.push_back(r);

  EnkfTuneResult result;
  result.best_rmse = std::numeric_limits<double>::infinity();
  Rng master(cfg.seed);

  for (double lambda : inflations) {
    for (const auto& r : radius_options) {
      EnkfTuneRow row;
      row.inflation = lambda;
      row.radius = r;
      EnKFConfig fc;
      fc.inflation = lambda;
      fc.loc_radius = r;
      double acc = 0.0;
      int n = 0;
      try {
        for (int s = 0; s < val.n_sequences(); ++s) {
          auto truth = val.truth_for_diagnostics(s);
          auto obs = val.sequences[(size_t)s].observations;
          if (cfg.max_cycles > 0 && (int)obs.size() > cfg.max_cycles + 1) {
            obs.resize((size_t)cfg.max_cycles + 1);
            truth.resize((size_t)cfg.max_cycles + 1);
          }
          ObservationSequenceView view(val.system, obs);
          Rng rng = master.stream(1, (uint64_t)(lambda * 1000),
                                  (uint64_t)((r ? *r : 0.0) * 1000) + (uint64_t)s);
          auto res = run_enkf(view, &truth, fc, cfg.ensemble_size, rng);
          acc += res.mean_rmse;
          ++n;
        }
        row.rmse = acc / n;
      } catch (const std::exception& e) {
        row.failed = true;
        row.rmse = std::numeric_limits<double>::infinity();
      }
      result.grid.push_back(row);
      if (!row.failed && row.rmse < result.best_rmse) {
        result.best_rmse = row.rmse;
        result.best = fc;
      }
    }
  }
  if (!std::isfinite(result.best_rmse)) throw Error("tune_enkf: every grid cell diverged");
  return result;
}

}  // namespace amortda

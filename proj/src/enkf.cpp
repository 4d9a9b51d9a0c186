#include "amortda/enkf.hpp"

#include <cmath>

namespace amortda {

void EnsembleState::validate() const {
  if (members.size() < 2) throw Error("EnsembleState: at least 2 members required");
  for (const auto& m : members)
    if (m.size() != members[0].size()) throw Error("EnsembleState: member dimension mismatch");
}

void EnKFConfig::validate() const {
  if (inflation < 1.0 || inflation > 2.0) throw Error("EnKFConfig: inflation must be in [1, 2]");
  if (loc_radius && *loc_radius <= 0.0) throw Error("EnKFConfig: localization radius must be > 0");
}

std::vector<double> ensemble_mean(const std::vector<std::vector<double>>& members) {
  const size_t d = members[0].size();
  std::vector<double> mu(d, 0.0);
  for (const auto& m : members)
    for (size_t j = 0; j < d; ++j) mu[j] += m[j];
  const double inv = 1.0 / (double)members.size();
  for (auto& v : mu) v *= inv;
  return mu;
}

Matrix ensemble_covariance(const EnsembleState& ens) {
  ens.validate();
  const int m = ens.size(), d = ens.dimension();
  const auto mu = ensemble_mean(ens.members);
  Matrix p(d, d);
  for (int i = 0; i < m; ++i) {
    const auto& x = ens.members[(size_t)i];
    for (int a = 0; a < d; ++a) {
      const double xa = x[(size_t)a] - mu[(size_t)a];
      for (int b = 0; b < d; ++b) p(a, b) += xa * (x[(size_t)b] - mu[(size_t)b]);
    }
  }
  const double inv = 1.0 / (m - 1);
  for (auto& v : p.a) v *= inv;
  return p;
}

double gaspari_cohn(double distance, double c) {
  if (c <= 0.0) throw Error("gaspari_cohn: radius must be > 0");
  if (distance < 0.0) throw Error("gaspari_cohn: distance must be >= 0");
  const double z = distance / c;
  if (z >= 2.0) return 0.0;
  if (z <= 1.0) {
    return 1.0 + z * z * (-5.0 / 3.0 + z * (5.0 / 8.0 + z * (0.5 - 0.25 * z)));
  }
  return 4.0 - 5.0 * z + z * z * (5.0 / 3.0 + z * (5.0 / 8.0 + z * (-0.5 + z / 12.0))) -
         2.0 / (3.0 * z);
}

int periodic_site_distance(const SystemSpec& spec, int i, int j) {
  const int sites = spec.spatial_dim();
  const int si = i % sites;  // VL20 theta block folds onto the same sites
  const int sj = j % sites;
  int d = std::abs(si - sj);
  return std::min(d, sites - d);
}

std::vector<std::vector<double>> ensemble_init(const ObservationRecord& obs, int m, Rng& rng) {
  obs.validate();
  const int d = (int)obs.mask.size();
  const auto yfull = obs.scatter_full();
  double obs_mean = 0.0;
  for (double v : obs.values) obs_mean += v;
  obs_mean /= (double)obs.values.size();
  const double fill_sd = 2.0 * std::max(obs.sigma, 0.5);

  std::vector<std::vector<double>> members((size_t)m, std::vector<double>((size_t)d));
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < d; ++j)
      members[(size_t)i][(size_t)j] = obs.mask[(size_t)j]
                                          ? yfull[(size_t)j] + obs.sigma * rng.normal()
                                          : obs_mean + fill_sd * rng.normal();
  return members;
}

EnsembleState enkf_analysis(const EnsembleState& ens, const ObservationRecord& obs,
                            const EnKFConfig& cfg, const SystemSpec& spec, Rng& rng) {
  ens.validate();
  cfg.validate();
  obs.validate();
  const int m = ens.size(), d = ens.dimension();
  if ((int)obs.mask.size() != d) throw Error("enkf_analysis: observation dimension mismatch");

  EnsembleState out;
  out.cycle = ens.cycle + 1;
  out.members = ens.members;

  // inflate anomalies about the mean before forming the gain
  const auto mu = ensemble_mean(out.members);
  if (cfg.inflation != 1.0) {
    for (auto& x : out.members)
      for (int j = 0; j < d; ++j)
        x[(size_t)j] = mu[(size_t)j] + cfg.inflation * (x[(size_t)j] - mu[(size_t)j]);
  }

  Matrix p = ensemble_covariance(out);
  if (cfg.loc_radius) {
    for (int a = 0; a < d; ++a)
      for (int b = 0; b < d; ++b)
        p(a, b) *= gaspari_cohn((double)periodic_site_distance(spec, a, b), *cfg.loc_radius);
  }

  std::vector<int> oidx;
  for (int j = 0; j < d; ++j)
    if (obs.mask[(size_t)j]) oidx.push_back(j);
  const int no = (int)oidx.size();
  const double r = obs.sigma * obs.sigma;

  Matrix hph(no, no);
  for (int a = 0; a < no; ++a) {
    for (int b = 0; b < no; ++b) hph(a, b) = p(oidx[(size_t)a], oidx[(size_t)b]);
    hph(a, a) += r;
  }
  const CholeskyFactor factor(hph);  // throws if singular; surfaced, not masked

  // K d_i = P H^T (H P H^T + R)^{-1} d_i, one solve per member
  std::vector<double> innov((size_t)no), w((size_t)no);
  for (int i = 0; i < m; ++i) {
    auto& x = out.members[(size_t)i];
    for (int a = 0; a < no; ++a)
      innov[(size_t)a] =
          obs.values[(size_t)a] + obs.sigma * rng.normal() - x[(size_t)oidx[(size_t)a]];
    w = factor.solve(innov);
    for (int j = 0; j < d; ++j) {
      double acc = 0.0;
      for (int a = 0; a < no; ++a) acc += p(j, oidx[(size_t)a]) * w[(size_t)a];
      x[(size_t)j] += acc;
    }
  }
  return out;
}

double ensemble_spread(const std::vector<std::vector<double>>& members) {
  const int m = (int)members.size(), d = (int)members[0].size();
  if (m < 2) return 0.0;
  const auto mu = ensemble_mean(members);
  double acc = 0.0;
  for (int j = 0; j < d; ++j) {
    double s = 0.0;
    for (int i = 0; i < m; ++i) {
      const double a = members[(size_t)i][(size_t)j] - mu[(size_t)j];
      s += a * a;
    }
    acc += std::sqrt(s / (m - 1));
  }
  return acc / d;
}

FilterRunResult run_enkf(const ObservationSequenceView& seq,
                         const std::vector<std::vector<double>>* truth, const EnKFConfig& cfg,
                         int m, Rng& rng) {
  cfg.validate();
  const SystemSpec& spec = seq.system();
  Integrator integ(spec);
  const int cycles = seq.cycles();
  if (cycles < 1) throw Error("run_enkf: empty sequence");
  if (truth && (int)truth->size() != cycles) throw Error("run_enkf: truth length mismatch");

  EnsembleState ens;
  ens.members = ensemble_init(seq.obs(0), m, rng);
  ens.cycle = 0;

  FilterRunResult res;
  auto score = [&](int k, const std::vector<double>& mean_state) {
    res.analysis_mean.times.push_back(spec.dt * spec.steps_per_observation * k);
    res.analysis_mean.states.push_back(mean_state);
    res.spread.push_back(ensemble_spread(ens.members));
    if (truth) {
      double s = 0.0;
      for (size_t j = 0; j < mean_state.size(); ++j) {
        const double e = mean_state[j] - (*truth)[(size_t)k][j];
        s += e * e;
      }
      res.cycle_rmse.push_back(std::sqrt(s / (double)mean_state.size()));
    }
  };

  for (int k = 1; k < cycles; ++k) {
    try {
      for (auto& x : ens.members) integ.steps(x, spec.steps_per_observation);
    } catch (const BlowupError& e) {
      throw Error("run_enkf: cycle " + std::to_string(k) + ": " + e.what());
    }
    ens = enkf_analysis(ens, seq.obs(k), cfg, spec, rng);
    score(k, ensemble_mean(ens.members));
  }

  if (!res.cycle_rmse.empty()) {
    double s = 0.0;
    for (double v : res.cycle_rmse) s += v;
    res.mean_rmse = s / (double)res.cycle_rmse.size();
  }
  return res;
}

}  // namespace amortda

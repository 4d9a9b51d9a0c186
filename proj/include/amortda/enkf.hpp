#pragma once

#include <optional>
#include <vector>

#include "amortda/linalg.hpp"
#include "amortda/observations.hpp"

namespace amortda {

struct EnsembleState {
  std::vector<std::vector<double>> members;
  int cycle = 0;

  int size() const { return (int)members.size(); }
  int dimension() const { return members.empty() ? 0 : (int)members[0].size(); }
  void validate() const;
};

struct EnKFConfig {
  double inflation = 1.0;                 // multiplicative, applied to forecast anomalies
  std::optional<double> loc_radius;       // Gaspari-Cohn radius in grid cells; nullopt = none
  uint64_t seed = 0;

  void validate() const;
};

std::vector<double> ensemble_mean(const std::vector<std::vector<double>>& members);

/// Unbiased sample covariance (divisor m-1) of the ensemble.
Matrix ensemble_covariance(const EnsembleState& ens);

/// Standard fifth-order piecewise-rational compactly supported taper:
/// 1 at distance 0, exactly 0 at distance >= 2c, monotone nonincreasing.
double gaspari_cohn(double distance, double c);

/// Periodic grid distance between flat state indices; for two-field systems
/// (VL20) both fields live on the same sites so distance is between sites.
int periodic_site_distance(const SystemSpec& spec, int i, int j);

/// Stochastic (perturbed-observation) ensemble Kalman analysis:
/// inflate anomalies, taper the sample covariance, gain through an SPD solve
/// in observation space, then update each member with its own perturbed copy
/// of the observation.
EnsembleState enkf_analysis(const EnsembleState& ens, const ObservationRecord& obs,
                            const EnKFConfig& cfg, const SystemSpec& spec, Rng& rng);

/// Members drawn around the first observation: observed coordinates get
/// y + N(0, sigma^2); unobserved coordinates fall back to the spatial mean of
/// the observed values with a wider perturbation. Shared by every filter so
/// comparisons start from the same information.
std::vector<std::vector<double>> ensemble_init(const ObservationRecord& obs, int m, Rng& rng);

struct FilterRunResult {
  Trajectory analysis_mean;
  std::vector<double> cycle_rmse;  // empty when run without truth
  double mean_rmse = 0.0;
  std::vector<double> spread;      // mean per-coordinate ensemble std, per cycle
};

/// Alternates member forecasts and enkf_analysis over a sequence.
/// truth, when given, is used only to score the analysis mean.
FilterRunResult run_enkf(const ObservationSequenceView& seq,
                         const std::vector<std::vector<double>>* truth, const EnKFConfig& cfg,
                         int m, Rng& rng);

double ensemble_spread(const std::vector<std::vector<double>>& members);

}  // namespace amortda

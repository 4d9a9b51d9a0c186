#pragma once

#include <string>
#include <utility>
#include <vector>

#include "amortda/dynamics.hpp"
#include "amortda/enkf.hpp"
#include "amortda/observations.hpp"
#include "amortda/tape.hpp"

namespace amortda {

/// Architecture of the learned analysis update: a shared circular-conv trunk
/// whose readout splits into a linear residual head and a sigmoid gate head,
/// applied per ensemble member with member-independent dropout masks.
struct AmEnFArch {
  int state_channels = 1;  // fields per spatial site (2 for VL20)
  int spatial_dim = 40;
  int trunk_layers = 4;
  int filters = 64;
  int kernel_width = 5;
  int memory_depth = 6;
  int cov_width = 3;
  double dropout_rate = 0.2;

  static AmEnFArch defaults_for(const SystemSpec& spec);
  void validate() const;

  // input channel layout: [state | covariance | observation | indicator | dynamics | memory]
  int off_state() const { return 0; }
  int off_cov() const { return state_channels; }
  int off_obs() const { return state_channels * (1 + cov_width); }
  int off_ind() const { return off_obs() + state_channels; }
  int off_dyn() const { return off_ind() + state_channels; }
  int off_mem() const { return off_dyn() + state_channels; }
  int input_channels() const { return off_mem() + memory_depth; }

  // readout channel layout: [z_x | z_c | gate_x | gate_c]
  int readout_channels() const { return 2 * (state_channels + memory_depth); }
};

struct AmEnFModel {
  AmEnFArch arch;
  std::vector<Tensor> kernels;  // trunk_layers entries + readout
  std::vector<Tensor> biases;
  std::string metadata_json = "{}";

  static AmEnFModel init(const AmEnFArch& arch, Rng& rng);
  int layer_count() const { return arch.trunk_layers + 1; }
  long param_count() const;

  /// JSON header (architecture + metadata) followed by the parameter blob in
  /// layer order, kernel then bias. Round-trips bit-exactly.
  void save(const std::string& path) const;
  static AmEnFModel load(const std::string& path);
};

struct AmEnFState {
  Tensor members;  // [C][m][D]
  Tensor memory;   // [memory_depth][m][D]
  int cycle = 0;

  int ensemble_size() const { return members.dim(1); }
};

// ---- tensor layout helpers -------------------------------------------------

/// Flat state of member i (channel-major: X block then theta block for VL20).
std::vector<double> member_state(const Tensor& members, int i);
Tensor members_from_vectors(const std::vector<std::vector<double>>& ms, int channels, int d);
std::vector<double> members_mean_state(const Tensor& members);
double members_spread(const Tensor& members);

// ---- operations -------------------------------------------------------------

/// Per-channel local sample covariances: for channel c and offset o in
/// [-(w-1)/2,(w-1)/2], covariance between coordinate d and d+o across members.
/// Plain twin of the tape primitive.
Tensor local_covariance_channels(const Tensor& members, int width);

struct ImputedObservation {
  Tensor obs_channels;  // [C][m][D]; unobserved coordinates from donor members
  Tensor indicator;     // [C][D]; +0.1 observed, -0.1 unobserved
  std::vector<int> donors;
};

/// Observed coordinates carry the measured values; unobserved ones are filled
/// per member from a distinct donor member (random derangement) and treated as
/// constants, so no gradient flows through imputed entries. With m = 1 and
/// partial observations the fill degenerates to zeros.
ImputedObservation impute_observation(const ObservationRecord& obs, const Tensor& members,
                                      Rng& rng);

struct ModelVars {
  std::vector<Var> kernels, biases;
};
ModelVars bind_model(Tape& tape, const AmEnFModel& model, bool requires_grad);

struct AnalysisVars {
  Var members, memory;
  Var gate_state, gate_memory;  // sigmoid outputs, for diagnostics/tests
};

/// One gated analysis update: assemble feature channels from the forecast
/// members, run the shared trunk with fresh member-independent dropout masks,
/// and apply x' = gate_x * x + z_x, c' = gate_c * c + z_c. Dropout stays
/// active at evaluation time (Monte Carlo semantics); the mask draw is the
/// only stochastic element.
AnalysisVars analysis_update(Tape& tape, Var members, Var memory, const AmEnFModel& model,
                             const ModelVars& mv, const ObservationRecord& obs,
                             const Integrator& integ, Rng& rng);

struct CycleVars {
  Var members, memory;
  int cycle = 0;
};
struct CycleResult {
  Var forecast;  // members after the model forecast, before the analysis
  CycleVars state;
};

/// Forecast every member steps_per_observation integrator steps, then apply
/// the learned analysis with the cycle's observation.
CycleResult amenf_cycle(Tape& tape, const Integrator& integ, const CycleVars& state,
                        const ObservationRecord& obs, const AmEnFModel& model,
                        const ModelVars& mv, Rng& rng);

AmEnFState amenf_initial_state(const ObservationRecord& obs, const AmEnFArch& arch, int m,
                               Rng& rng);

struct AmenfRunResult {
  Trajectory analysis_mean;
  std::vector<double> cycle_rmse;
  double mean_rmse = 0.0;
  std::vector<double> spread;
  double ssf_value = 0.0;  // mean squared pseudo-observation error over cycles
};

/// Filtering run over a sequence (fresh tape per cycle, no gradients kept).
AmenfRunResult run_amenf(const ObservationSequenceView& seq,
                         const std::vector<std::vector<double>>* truth, const AmEnFModel& model,
                         int m, Rng& rng);

}  // namespace amortda

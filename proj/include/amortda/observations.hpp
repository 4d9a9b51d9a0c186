#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "amortda/dynamics.hpp"
#include "amortda/rng.hpp"

namespace amortda {

/// Masked-identity observation of the state with isotropic Gaussian noise.
/// "rotating-subset" observes coordinates {(k mod s) + j*s} at cycle k.
struct ObservationOperator {
  enum class Kind { Full, RotatingSubset };
  Kind kind = Kind::Full;
  int stride = 1;
  double sigma = 1.0;

  void validate(int dimension) const;
};

std::vector<uint8_t> rotating_mask(int cycle, int dimension, int stride);
std::vector<uint8_t> observation_mask(const ObservationOperator& op, int cycle, int dimension);

struct ObservationRecord {
  int time_index = 0;
  std::vector<double> values;  // observed coordinates only, ascending coordinate order
  std::vector<uint8_t> mask;   // one flag per full-state coordinate
  double sigma = 0.0;

  int observed_count() const;
  void validate() const;
  /// Full-dimension vector with zeros at unobserved coordinates.
  std::vector<double> scatter_full() const;
};

ObservationRecord observe(const std::vector<double>& x, const ObservationOperator& op, int cycle,
                          Rng& rng);

struct DatasetSequence {
  uint64_t seed = 0;
  std::vector<ObservationRecord> observations;   // record 0 is the initial time
  std::vector<std::vector<double>> truth;        // empty unless generated with truth
};

/// What training code is allowed to see: observations only, never truth.
class ObservationSequenceView {
 public:
  ObservationSequenceView(const SystemSpec& spec, const std::vector<ObservationRecord>& obs)
      : spec_(&spec), obs_(&obs) {}
  int cycles() const { return (int)obs_->size(); }
  const ObservationRecord& obs(int k) const { return (*obs_)[(size_t)k]; }
  const SystemSpec& system() const { return *spec_; }

 private:
  const SystemSpec* spec_;
  const std::vector<ObservationRecord>* obs_;
};

class TrajectoryDataset {
 public:
  SystemSpec system;
  ObservationOperator op;
  uint64_t seed = 0;
  std::string role = "train";
  bool has_truth = true;
  std::vector<DatasetSequence> sequences;

  int n_sequences() const { return (int)sequences.size(); }
  ObservationSequenceView view(int i) const {
    return ObservationSequenceView(system, sequences[(size_t)i].observations);
  }
  /// Diagnostics-only access, kept off the training path by construction.
  const std::vector<std::vector<double>>& truth_for_diagnostics(int i) const;

  void save(const std::string& path) const;
  static TrajectoryDataset load(const std::string& path);
};

/// Random state near the attractor: fixed point plus unit noise for L96/VL20,
/// smoothed low-wavenumber noise for KS. Burn-in happens in generate_dataset.
std::vector<double> attractor_initial_state(const SystemSpec& spec, Rng& rng);

/// Sequences of burn-in-discarded trajectories with one observation record per
/// assimilation cycle (steps_per_sequence cycles after the initial record).
/// Deterministic given the seed; per-sequence RNG streams are derived by index.
TrajectoryDataset generate_dataset(const SystemSpec& spec, const ObservationOperator& op,
                                   int n_sequences, int steps_per_sequence, int burn_in_steps,
                                   uint64_t seed, const std::string& role = "train",
                                   bool with_truth = true);

}  // namespace amortda

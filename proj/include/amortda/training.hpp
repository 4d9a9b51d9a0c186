#pragma once

#include <functional>
#include <string>
#include <vector>

#include "amortda/amenf.hpp"

namespace amortda {

enum class LossKind { Ssf, SupervisedAnalysis, Ssa };

LossKind loss_kind_from_string(const std::string& s);
std::string loss_kind_to_string(LossKind k);

struct TrainConfig {
  LossKind loss = LossKind::Ssf;
  int unroll = 40;        // assimilation cycles per sequence used in BPTT
  int batch_size = 64;
  int epochs = 100;
  double lr = 8e-4;
  int warmup_iters = 50;
  int halving_period = 200;
  int ensemble = 10;
  uint64_t seed = 0;
  int threads = 1;
  double grad_clip = 10.0;
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  double max_reject_fraction = 0.01;

  void validate() const;
};

struct AdamState {
  std::vector<Tensor> m, v;
  long step = 0;
  static AdamState init_like(const std::vector<Tensor>& params);
};

/// Linear ramp 0 -> lr over warmup_iters, then halve every halving_period.
double lr_schedule(long iteration, const TrainConfig& cfg);

/// Bias-corrected Adam update, in place. Rejects non-finite gradients.
void adam_step(std::vector<Tensor>& params, const std::vector<Tensor>& grads, AdamState& st,
               double lr, const TrainConfig& cfg);

struct SequenceLoss {
  Var loss;
  int terms = 0;
  bool blew_up = false;  // unroll left the attractor; loss covers the prefix
};

/// Self-supervised forecast loss over one sequence: after each analysis the
/// ensemble is forecast one observation interval ahead; the masked error
/// between the mean pseudo-observation and the next observation accumulates.
/// The first prediction (from the initialization ensemble) is included; no
/// loss is evaluated at cycle 0 itself.
///
/// A blowup mid-unroll ends the accumulation: the partial loss over the
/// surviving prefix is returned (blew_up = true) so the huge pre-blowup
/// errors still produce a corrective gradient. Discarding such sequences
/// entirely starves training of exactly the signal it needs once the model
/// wanders into the integrator's unstable region. A blowup before the first
/// term rethrows.
SequenceLoss build_ssf_loss(Tape& tape, const Integrator& integ,
                            const ObservationSequenceView& seq, const AmEnFModel& model,
                            const ModelVars& mv, int m, int unroll, Rng& rng);

/// Mean over cycles of || mean analysis - truth ||^2 (simulation diagnostics).
SequenceLoss build_supervised_analysis_loss(Tape& tape, const Integrator& integ,
                                            const ObservationSequenceView& seq,
                                            const std::vector<std::vector<double>>& truth,
                                            const AmEnFModel& model, const ModelVars& mv, int m,
                                            int unroll, Rng& rng);

/// Mean over cycles of || mean analysis - y_k ||^2, same-time observation as
/// target; the degenerate objective. Requires fully observed sequences.
SequenceLoss build_ssa_loss(Tape& tape, const Integrator& integ,
                            const ObservationSequenceView& seq, const AmEnFModel& model,
                            const ModelVars& mv, int m, int unroll, Rng& rng);

struct EpochMetrics {
  int epoch = 0;
  double train_loss = 0.0;
  double val_ssf = 0.0;
  double val_rmse_vs_truth = 0.0;
  double lr = 0.0;
  double wall_seconds = 0.0;
};

struct TrainResult {
  AmEnFModel best_model;   // lowest validation ssf
  AmEnFModel final_model;
  std::vector<EpochMetrics> log;
  long slots_total = 0;
  long slots_blowup = 0;     // unroll left the attractor; skipped and logged
  long slots_nonfinite = 0;  // non-finite gradients; >1% of slots aborts
};

using EpochCallback = std::function<void(const EpochMetrics&)>;

/// Mini-batch training with per-sequence tapes. Sequences within a batch are
/// processed on independent tapes (optionally across threads) and gradients
/// reduce in slot order, so results do not depend on the thread count.
/// Unrolls that blow up are skipped and logged (common for a young model on
/// chaotic dynamics); unrolls with non-finite gradients are also skipped but
/// more than max_reject_fraction of them aborts the run.
TrainResult train(const AmEnFModel& init_model, const TrajectoryDataset& train_ds,
                  const TrajectoryDataset& val_ds, const TrainConfig& cfg,
                  const EpochCallback& cb = EpochCallback(), bool timing = false);

/// CSV columns: epoch,train_loss,val_ssf,val_rmse_vs_truth,lr,wall_seconds.
void write_metrics_csv(const std::string& path, const std::vector<EpochMetrics>& log);

}  // namespace amortda

#include "amortda/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <limits>
#include <thread>

namespace amortda {

LossKind loss_kind_from_string(const std::string& s) {
  if (s == "ssf") return LossKind::Ssf;
  if (s == "supervised-analysis") return LossKind::SupervisedAnalysis;
  if (s == "ssa") return LossKind::Ssa;
  throw Error("unknown loss kind '" + s + "' (expected ssf | supervised-analysis | ssa)");
}

std::string loss_kind_to_string(LossKind k) {
  switch (k) {
    case LossKind::Ssf: return "ssf";
    case LossKind::SupervisedAnalysis: return "supervised-analysis";
    case LossKind::Ssa: return "ssa";
  }
  return "?";
}

void TrainConfig::validate() const {
  if (unroll < 1) throw Error("TrainConfig: unroll must be >= 1");
  if (batch_size < 1 || epochs < 0) throw Error("TrainConfig: bad batch size or epochs");
  if (lr <= 0.0) throw Error("TrainConfig: learning rate must be > 0");
  if (warmup_iters < 0 || halving_period < 1) throw Error("TrainConfig: bad schedule");
  if (ensemble < 2) throw Error("TrainConfig: ensemble size must be >= 2");
  if (threads < 1) throw Error("TrainConfig: threads must be >= 1");
}

AdamState AdamState::init_like(const std::vector<Tensor>& params) {
  AdamState st;
  for (const auto& p : params) {
    st.m.emplace_back(p.shape());
    st.v.emplace_back(p.shape());
  }
  return st;
}

double lr_schedule(long iteration, const TrainConfig& cfg) {
  if (cfg.warmup_iters > 0 && iteration < cfg.warmup_iters)
    return cfg.lr * (double)iteration / (double)cfg.warmup_iters;
  const long t = iteration - cfg.warmup_iters;
  return cfg.lr * std::pow(0.5, (double)(t / cfg.halving_period));
}

void adam_step(std::vector<Tensor>& params, const std::vector<Tensor>& grads, AdamState& st,
               double lr, const TrainConfig& cfg) {
  if (params.size() != grads.size() || params.size() != st.m.size())
    throw Error("adam_step: parameter/gradient shape mismatch");
  for (size_t i = 0; i < grads.size(); ++i)
    for (int k = 0; k < grads[i].size(); ++k)
      if (!std::isfinite(grads[i][k])) throw Error("adam_step: non-finite gradient");

  st.step += 1;
  const double bc1 = 1.0 - std::pow(cfg.beta1, (double)st.step);
  const double bc2 = 1.0 - std::pow(cfg.beta2, (double)st.step);
  for (size_t i = 0; i < params.size(); ++i) {
    Tensor& p = params[i];
    Tensor& m = st.m[i];
    Tensor& v = st.v[i];
    const Tensor& g = grads[i];
    for (int k = 0; k < p.size(); ++k) {
      m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * g[k];
      v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * g[k] * g[k];
      const double mhat = m[k] / bc1;
      const double vhat = v[k] / bc2;
      p[k] -= lr * mhat / (std::sqrt(vhat) + cfg.eps);
    }
  }
}

namespace {

// Masked squared error between the batch-mean of `members_like` and the
// observation record, as a tape scalar.
Var masked_obs_error(Tape& tape, Var members_like, const ObservationRecord& rec, int c_n, int d) {
  Tensor yfull({c_n, d});
  Tensor maskt({c_n, d});
  const auto y = rec.scatter_full();
  for (int i = 0; i < c_n * d; ++i) {
    yfull[i] = y[(size_t)i];
    maskt[i] = rec.mask[(size_t)i] ? 1.0 : 0.0;
  }
  Var pred = tape.mean_batch(members_like);
  Var diff = tape.mul(tape.sub(pred, tape.input(yfull)), tape.input(maskt));
  return tape.squared_norm(diff);
}

Var full_state_error(Tape& tape, Var members_like, const std::vector<double>& target, int c_n,
                     int d) {
  Tensor tt({c_n, d}, std::vector<double>(target));
  Var pred = tape.mean_batch(members_like);
  return tape.squared_norm(tape.sub(pred, tape.input(tt)));
}

int clamp_cycles(const ObservationSequenceView& seq, int unroll) {
  const int cycles = seq.cycles();
  if (cycles < 2) throw Error("loss: sequence needs at least 2 observations");
  if (unroll > cycles - 1)
    throw Error("loss: unroll length exceeds sequence length (" + std::to_string(unroll) + " > " +
                std::to_string(cycles - 1) + ")");
  return unroll + 1;  // records 0..unroll
}

}  // namespace

SequenceLoss build_ssf_loss(Tape& tape, const Integrator& integ,
                            const ObservationSequenceView& seq, const AmEnFModel& model,
                            const ModelVars& mv, int m, int unroll, Rng& rng) {
  const int c_n = model.arch.state_channels, d = model.arch.spatial_dim;
  const int cycles = clamp_cycles(seq, unroll);
  AmEnFState st0 = amenf_initial_state(seq.obs(0), model.arch, m, rng);
  CycleVars cv{tape.input(st0.members), tape.input(st0.memory), 0};

  Var acc;
  int terms = 0;
  bool blew_up = false;
  try {
    for (int k = 1; k < cycles; ++k) {
      Var forecast = integ.steps_t(tape, cv.members, integ.spec().steps_per_observation);
      Var term = masked_obs_error(tape, forecast, seq.obs(k), c_n, d);
      acc = terms == 0 ? term : tape.add(acc, term);
      ++terms;
      if (k < cycles - 1) {  // final analysis would not influence this loss
        AnalysisVars av = analysis_update(tape, forecast, cv.memory, model, mv, seq.obs(k), integ,
                                          rng);
        cv.members = av.members;
        cv.memory = av.memory;
        cv.cycle = k;
      }
    }
  } catch (const BlowupError&) {
    if (terms == 0) throw;
    blew_up = true;
  }
  return {tape.scalar_mul(acc, 1.0 / terms), terms, blew_up};
}

SequenceLoss build_supervised_analysis_loss(Tape& tape, const Integrator& integ,
                                            const ObservationSequenceView& seq,
                                            const std::vector<std::vector<double>>& truth,
                                            const AmEnFModel& model, const ModelVars& mv, int m,
                                            int unroll, Rng& rng) {
  if (truth.empty()) throw Error("supervised analysis loss: truth unavailable");
  const int c_n = model.arch.state_channels, d = model.arch.spatial_dim;
  const int cycles = clamp_cycles(seq, unroll);
  if ((int)truth.size() < cycles) throw Error("supervised analysis loss: truth too short");
  AmEnFState st0 = amenf_initial_state(seq.obs(0), model.arch, m, rng);
  CycleVars cv{tape.input(st0.members), tape.input(st0.memory), 0};

  Var acc;
  int terms = 0;
  bool blew_up = false;
  try {
    for (int k = 1; k < cycles; ++k) {
      CycleResult cr = amenf_cycle(tape, integ, cv, seq.obs(k), model, mv, rng);
      cv = cr.state;
      Var term = full_state_error(tape, cv.members, truth[(size_t)k], c_n, d);
      acc = terms == 0 ? term : tape.add(acc, term);
      ++terms;
    }
  } catch (const BlowupError&) {
    if (terms == 0) throw;
    blew_up = true;
  }
  return {tape.scalar_mul(acc, 1.0 / terms), terms, blew_up};
}

SequenceLoss build_ssa_loss(Tape& tape, const Integrator& integ,
                            const ObservationSequenceView& seq, const AmEnFModel& model,
                            const ModelVars& mv, int m, int unroll, Rng& rng) {
  const int c_n = model.arch.state_channels, d = model.arch.spatial_dim;
  const int cycles = clamp_cycles(seq, unroll);
  for (int k = 0; k < cycles; ++k)
    for (uint8_t b : seq.obs(k).mask)
      if (!b)
        throw Error("ssa loss: undefined target at masked coordinates (sequence is partially "
                    "observed)");
  AmEnFState st0 = amenf_initial_state(seq.obs(0), model.arch, m, rng);
  CycleVars cv{tape.input(st0.members), tape.input(st0.memory), 0};

  Var acc;
  int terms = 0;
  bool blew_up = false;
  try {
    for (int k = 1; k < cycles; ++k) {
      CycleResult cr = amenf_cycle(tape, integ, cv, seq.obs(k), model, mv, rng);
      cv = cr.state;
      Var term = masked_obs_error(tape, cv.members, seq.obs(k), c_n, d);
      acc = terms == 0 ? term : tape.add(acc, term);
      ++terms;
    }
  } catch (const BlowupError&) {
    if (terms == 0) throw;
    blew_up = true;
  }
  return {tape.scalar_mul(acc, 1.0 / terms), terms, blew_up};
}

namespace {

struct SlotResult {
  std::vector<Tensor> grads;
  double loss = 0.0;
  bool ok = false;
  bool blowup = false;
  std::string error;
};

std::vector<Tensor> model_params(const AmEnFModel& m) {
  std::vector<Tensor> p;
  for (size_t l = 0; l < m.kernels.size(); ++l) {
    p.push_back(m.kernels[l]);
    p.push_back(m.biases[l]);
  }
  return p;
}

void params_into_model(const std::vector<Tensor>& p, AmEnFModel& m) {
  for (size_t l = 0; l < m.kernels.size(); ++l) {
    m.kernels[l] = p[2 * l];
    m.biases[l] = p[2 * l + 1];
  }
}

}  // namespace

TrainResult train(const AmEnFModel& init_model, const TrajectoryDataset& train_ds,
                  const TrajectoryDataset& val_ds, const TrainConfig& cfg, const EpochCallback& cb,
                  bool timing) {
  cfg.validate();
  if (train_ds.seed == val_ds.seed)
    throw Error("train: training and validation datasets share a seed; splits must be disjoint");
  if (train_ds.n_sequences() < 1 || val_ds.n_sequences() < 1) throw Error("train: empty dataset");
  if (cfg.loss == LossKind::SupervisedAnalysis && !train_ds.has_truth)
    throw Error("train: supervised analysis loss needs truth in the training dataset");

  const SystemSpec& spec = train_ds.system;
  Integrator integ(spec);
  AmEnFModel model = init_model;
  std::vector<Tensor> params = model_params(model);
  AdamState opt = AdamState::init_like(params);
  Rng master(cfg.seed);

  TrainResult result;
  result.best_model = model;
  double best_val = std::numeric_limits<double>::infinity();
  long iteration = 0;

  const int n_seq = train_ds.n_sequences();
  const auto t_start = std::chrono::steady_clock::now();

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    // deterministic shuffle per epoch
    std::vector<int> order((size_t)n_seq);
    for (int i = 0; i < n_seq; ++i) order[(size_t)i] = i;
    {
      Rng srng = master.stream(10, (uint64_t)epoch);
      for (int i = n_seq - 1; i > 0; --i)
        std::swap(order[(size_t)i], order[(size_t)srng.uniform_int(i + 1)]);
    }

    double epoch_loss = 0.0;
    long epoch_terms = 0;

    for (int start = 0; start < n_seq; start += cfg.batch_size) {
      const int bsz = std::min(cfg.batch_size, n_seq - start);
      std::vector<SlotResult> slots((size_t)bsz);

      auto worker = [&](int tid) {
        for (int s = tid; s < bsz; s += cfg.threads) {
          SlotResult& out = slots[(size_t)s];
          const int seq_idx = order[(size_t)(start + s)];
          Rng rng = master.stream(20, (uint64_t)iteration, (uint64_t)s);
          try {
            Tape tape;
            ModelVars mv = bind_model(tape, model, true);
            auto view = train_ds.view(seq_idx);
            SequenceLoss sl = [&] {
              switch (cfg.loss) {
                case LossKind::Ssf:
                  return build_ssf_loss(tape, integ, view, model, mv, cfg.ensemble, cfg.unroll,
                                        rng);
                case LossKind::SupervisedAnalysis:
                  return build_supervised_analysis_loss(tape, integ, view,
                                                        train_ds.truth_for_diagnostics(seq_idx),
                                                        model, mv, cfg.ensemble, cfg.unroll, rng);
                case LossKind::Ssa:
                  return build_ssa_loss(tape, integ, view, model, mv, cfg.ensemble, cfg.unroll,
                                        rng);
              }
              throw Error("train: unknown loss");
            }();
            std::vector<Var> wrt;
            for (size_t l = 0; l < mv.kernels.size(); ++l) {
              wrt.push_back(mv.kernels[l]);
              wrt.push_back(mv.biases[l]);
            }
            out.grads = tape.gradient(sl.loss, std::span<const Var>(wrt));
            out.loss = tape.val(sl.loss)[0];
            out.ok = true;
            out.blowup = sl.blew_up;  // prefix gradient kept, occurrence logged
          } catch (const BlowupError& e) {
            out.ok = false;
            out.blowup = true;
            out.error = e.what();
          } catch (const Error& e) {
            out.ok = false;
            out.error = e.what();
          }
        }
      };
      if (cfg.threads == 1) {
        worker(0);
      } else {
        std::vector<std::thread> pool;
        for (int t = 0; t < cfg.threads; ++t) pool.emplace_back(worker, t);
        for (auto& th : pool) th.join();
      }

      // ordered reduction over slots; skipped slots contribute nothing
      std::vector<Tensor> gsum;
      int accepted = 0;
      for (int s = 0; s < bsz; ++s) {
        result.slots_total += 1;
        if (slots[(size_t)s].blowup) result.slots_blowup += 1;
        if (!slots[(size_t)s].ok) {
          if (!slots[(size_t)s].blowup) result.slots_nonfinite += 1;
          continue;
        }
        if (accepted == 0) {
          gsum = slots[(size_t)s].grads;
        } else {
          for (size_t i = 0; i < gsum.size(); ++i)
            for (int k = 0; k < gsum[i].size(); ++k) gsum[i][k] += slots[(size_t)s].grads[i][k];
        }
        epoch_loss += slots[(size_t)s].loss;
        ++epoch_terms;
        ++accepted;
      }
      const double lr = lr_schedule(iteration, cfg);
      ++iteration;
      if (accepted == 0) continue;

      const double inv = 1.0 / accepted;
      double norm_sq = 0.0;
      for (auto& g : gsum)
        for (int k = 0; k < g.size(); ++k) {
          g[k] *= inv;
          norm_sq += g[k] * g[k];
        }
      const double norm = std::sqrt(norm_sq);
      if (cfg.grad_clip > 0.0 && norm > cfg.grad_clip) {
        const double scale = cfg.grad_clip / norm;
        for (auto& g : gsum)
          for (int k = 0; k < g.size(); ++k) g[k] *= scale;
      }
      adam_step(params, gsum, opt, lr, cfg);
      params_into_model(params, model);
    }

    if (result.slots_total > 0 &&
        (double)result.slots_nonfinite > cfg.max_reject_fraction * (double)result.slots_total)
      throw Error("train: " + std::to_string(result.slots_nonfinite) + " of " +
                  std::to_string(result.slots_total) +
                  " sequence unrolls produced non-finite gradients; aborting");

    // validation pass on the first validation sequence; an unstable model can
    // blow up a long rollout, which scores as +inf rather than aborting
    EpochMetrics em;
    em.epoch = epoch;
    em.train_loss = epoch_terms > 0 ? epoch_loss / (double)epoch_terms : 0.0;
    try {
      Rng vrng = master.stream(30, (uint64_t)epoch);
      auto vres = run_amenf(val_ds.view(0),
                            val_ds.has_truth ? &val_ds.truth_for_diagnostics(0) : nullptr, model,
                            cfg.ensemble, vrng);
      em.val_ssf = vres.ssf_value;
      em.val_rmse_vs_truth = vres.mean_rmse;
    } catch (const Error&) {
      em.val_ssf = std::numeric_limits<double>::infinity();
      em.val_rmse_vs_truth = std::numeric_limits<double>::infinity();
    }
    em.lr = lr_schedule(iteration, cfg);
    em.wall_seconds =
        timing ? std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count()
               : 0.0;
    result.log.push_back(em);
    if (cb) cb(em);

    if (em.val_ssf < best_val) {
      best_val = em.val_ssf;
      result.best_model = model;
      result.best_model.metadata_json =
          std::string("{\"epoch\":") + std::to_string(epoch) +
          ",\"val_ssf\":" + std::to_string(em.val_ssf) +
          ",\"val_rmse\":" + std::to_string(em.val_rmse_vs_truth) + "}";
    }
  }

  result.final_model = model;
  if (cfg.epochs == 0) result.best_model = model;
  return result;
}

void write_metrics_csv(const std::string& path, const std::vector<EpochMetrics>& log) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw Error("write_metrics_csv: cannot open " + path);
  f << "epoch,train_loss,val_ssf,val_rmse_vs_truth,lr,wall_seconds\n";
  f.precision(17);
  for (const auto& em : log)
    f << em.epoch << ',' << em.train_loss << ',' << em.val_ssf << ',' << em.val_rmse_vs_truth
      << ',' << em.lr << ',' << em.wall_seconds << '\n';
  if (!f) throw Error("write_metrics_csv: write failed");
}

}  // namespace amortda

#include "amortda/amenf.hpp"

#include <cmath>
#include <cstring>

#include "amortda/serialize.hpp"

namespace amortda {

namespace {
const std::string kCheckpointMagic = "AMDACP01";
}

AmEnFArch AmEnFArch::defaults_for(const SystemSpec& spec) {
  AmEnFArch a;
  a.state_channels = spec.state_channels();
  a.spatial_dim = spec.spatial_dim();
  switch (spec.kind) {
    case SystemKind::L96:
    case SystemKind::VL20:
      a.kernel_width = 5;
      a.cov_width = 3;
      a.memory_depth = 6;
      break;
    case SystemKind::KS:
      a.kernel_width = 7;
      a.cov_width = 5;
      a.memory_depth = 4;
      break;
  }
  a.validate();
  return a;
}

void AmEnFArch::validate() const {
  if (state_channels < 1 || spatial_dim < 1) throw Error("AmEnFArch: bad state shape");
  if (trunk_layers < 1 || filters < 1) throw Error("AmEnFArch: bad trunk shape");
  if (kernel_width % 2 == 0) throw Error("AmEnFArch: kernel width must be odd");
  if (cov_width % 2 == 0) throw Error("AmEnFArch: covariance width must be odd");
  if (memory_depth < 1) throw Error("AmEnFArch: memory depth must be >= 1");
  if (dropout_rate < 0.0 || dropout_rate >= 1.0) throw Error("AmEnFArch: dropout in [0,1)");
}

AmEnFModel AmEnFModel::init(const AmEnFArch& arch, Rng& rng) {
  arch.validate();
  AmEnFModel m;
  m.arch = arch;
  const int c_state = arch.state_channels;
  int cin = arch.input_channels();
  for (int l = 0; l < arch.trunk_layers; ++l) {
    Tensor k({arch.filters, cin, arch.kernel_width});
    const double he = std::sqrt(2.0 / (cin * arch.kernel_width));
    for (int i = 0; i < k.size(); ++i) k[i] = he * rng.normal();
    m.kernels.push_back(std::move(k));
    m.biases.push_back(Tensor({arch.filters}));
    cin = arch.filters;
  }
  // readout starts near the identity for the state (gate ~ sigmoid(4.5), so
  // the untrained closed loop is a free-running ensemble on the attractor)
  // but strongly damped for the memory (gate ~ 0.5): a high memory gate makes
  // the recurrence an amplifier, 1/(1-gate) of the residual feeding back
  Tensor k({arch.readout_channels(), cin, arch.kernel_width});
  const double small = 0.01 * std::sqrt(1.0 / (cin * arch.kernel_width));
  for (int i = 0; i < k.size(); ++i) k[i] = small * rng.normal();
  m.kernels.push_back(std::move(k));
  Tensor b({arch.readout_channels()});
  for (int c = c_state + arch.memory_depth; c < c_state + arch.memory_depth + c_state; ++c)
    b[c] = 4.5;
  m.biases.push_back(std::move(b));
  return m;
}

long AmEnFModel::param_count() const {
  long n = 0;
  for (const auto& k : kernels) n += k.size();
  for (const auto& b : biases) n += b.size();
  return n;
}

void AmEnFModel::save(const std::string& path) const {
  nlohmann::json header;
  header["format_version"] = 1;
  header["arch"] = {{"state_channels", arch.state_channels},
                    {"spatial_dim", arch.spatial_dim},
                    {"trunk_layers", arch.trunk_layers},
                    {"filters", arch.filters},
                    {"kernel_width", arch.kernel_width},
                    {"memory_depth", arch.memory_depth},
                    {"cov_width", arch.cov_width},
                    {"dropout_rate", arch.dropout_rate}};
  auto meta = nlohmann::json::parse(metadata_json, nullptr, false);
  header["metadata"] = meta.is_discarded() ? nlohmann::json::object() : meta;

  std::vector<double> payload;
  for (size_t l = 0; l < kernels.size(); ++l) {
    payload.insert(payload.end(), kernels[l].vec().begin(), kernels[l].vec().end());
    payload.insert(payload.end(), biases[l].vec().begin(), biases[l].vec().end());
  }
  write_container(path, kCheckpointMagic, header, payload);
}

AmEnFModel AmEnFModel::load(const std::string& path) {
  Container c = read_container(path, kCheckpointMagic);
  const auto& h = c.header;
  if (h.at("format_version").get<int>() != 1) throw Error("checkpoint: unsupported version");
  AmEnFArch arch;
  const auto& a = h.at("arch");
  arch.state_channels = a.at("state_channels").get<int>();
  arch.spatial_dim = a.at("spatial_dim").get<int>();
  arch.trunk_layers = a.at("trunk_layers").get<int>();
  arch.filters = a.at("filters").get<int>();
  arch.kernel_width = a.at("kernel_width").get<int>();
  arch.memory_depth = a.at("memory_depth").get<int>();
  arch.cov_width = a.at("cov_width").get<int>();
  arch.dropout_rate = a.at("dropout_rate").get<double>();
  arch.validate();

  AmEnFModel m;
  m.arch = arch;
  m.metadata_json = h.value("metadata", nlohmann::json::object()).dump();
  size_t pos = 0;
  auto take = [&](std::vector<int> shape) {
    Tensor t(shape);
    if (pos + (size_t)t.size() > c.payload.size())
      throw Error("checkpoint: parameter blob shorter than architecture implies");
    std::memcpy(t.data(), c.payload.data() + pos, sizeof(double) * (size_t)t.size());
    pos += (size_t)t.size();
    t.check_finite("checkpoint parameters");
    return t;
  };
  int cin = arch.input_channels();
  for (int l = 0; l < arch.trunk_layers; ++l) {
    m.kernels.push_back(take({arch.filters, cin, arch.kernel_width}));
    m.biases.push_back(take({arch.filters}));
    cin = arch.filters;
  }
  m.kernels.push_back(take({arch.readout_channels(), cin, arch.kernel_width}));
  m.biases.push_back(take({arch.readout_channels()}));
  if (pos != c.payload.size()) throw Error("checkpoint: parameter blob longer than expected");
  return m;
}

// ---- layout helpers ---------------------------------------------------------

std::vector<double> member_state(const Tensor& members, int i) {
  const int c_n = members.dim(0), m = members.dim(1), d = members.dim(2);
  std::vector<double> out((size_t)c_n * d);
  for (int c = 0; c < c_n; ++c)
    for (int j = 0; j < d; ++j)
      out[(size_t)c * d + j] = members[((size_t)c * m + (size_t)i) * (size_t)d + (size_t)j];
  return out;
}

Tensor members_from_vectors(const std::vector<std::vector<double>>& ms, int channels, int d) {
  const int m = (int)ms.size();
  Tensor out({channels, m, d});
  for (int i = 0; i < m; ++i) {
    if ((int)ms[(size_t)i].size() != channels * d) throw Error("members_from_vectors: bad size");
    for (int c = 0; c < channels; ++c)
      for (int j = 0; j < d; ++j)
        out[((size_t)c * m + (size_t)i) * (size_t)d + (size_t)j] = ms[(size_t)i][(size_t)c * d + j];
  }
  return out;
}

std::vector<double> members_mean_state(const Tensor& members) {
  const int c_n = members.dim(0), m = members.dim(1), d = members.dim(2);
  std::vector<double> out((size_t)c_n * d, 0.0);
  for (int c = 0; c < c_n; ++c)
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < d; ++j)
        out[(size_t)c * d + j] += members[((size_t)c * m + (size_t)i) * (size_t)d + (size_t)j];
  for (auto& v : out) v /= m;
  return out;
}

double members_spread(const Tensor& members) {
  const int c_n = members.dim(0), m = members.dim(1), d = members.dim(2);
  if (m < 2) return 0.0;
  const auto mu = members_mean_state(members);
  double acc = 0.0;
  for (int c = 0; c < c_n; ++c)
    for (int j = 0; j < d; ++j) {
      double s = 0.0;
      for (int i = 0; i < m; ++i) {
        const double a =
            members[((size_t)c * m + (size_t)i) * (size_t)d + (size_t)j] - mu[(size_t)c * d + j];
        s += a * a;
      }
      acc += std::sqrt(s / (m - 1));
    }
  return acc / (c_n * d);
}

// ---- operations -------------------------------------------------------------

Tensor local_covariance_channels(const Tensor& members, int width) {
  Tape t;
  return t.val(t.ens_cov_channels(t.input(members), width));
}

ImputedObservation impute_observation(const ObservationRecord& obs, const Tensor& members,
                                      Rng& rng) {
  obs.validate();
  const int c_n = members.dim(0), m = members.dim(1), d = members.dim(2);
  if ((int)obs.mask.size() != c_n * d) throw Error("impute_observation: dimension mismatch");
  const auto yfull = obs.scatter_full();

  ImputedObservation out;
  out.indicator = Tensor({c_n, d});
  for (int c = 0; c < c_n; ++c)
    for (int j = 0; j < d; ++j)
      out.indicator[(size_t)c * d + j] = obs.mask[(size_t)c * d + j] ? 0.1 : -0.1;

  bool partial = false;
  for (uint8_t b : obs.mask) partial = partial || !b;
  if (partial && m >= 2)
    rng.derangement(m, out.donors);
  else
    out.donors.assign((size_t)m, -1);

  out.obs_channels = Tensor({c_n, m, d});
  for (int i = 0; i < m; ++i) {
    const int donor = out.donors[(size_t)i];
    for (int c = 0; c < c_n; ++c)
      for (int j = 0; j < d; ++j) {
        const size_t flat = (size_t)c * d + j;
        double v;
        if (obs.mask[flat])
          v = yfull[flat];
        else if (donor >= 0)
          v = members[((size_t)c * m + (size_t)donor) * (size_t)d + (size_t)j];
        else
          v = 0.0;  // degenerate single-member fallback
        out.obs_channels[((size_t)c * m + (size_t)i) * (size_t)d + (size_t)j] = v;
      }
  }
  return out;
}

ModelVars bind_model(Tape& tape, const AmEnFModel& model, bool requires_grad) {
  ModelVars mv;
  for (size_t l = 0; l < model.kernels.size(); ++l) {
    mv.kernels.push_back(tape.input(model.kernels[l], requires_grad));
    mv.biases.push_back(tape.input(model.biases[l], requires_grad));
  }
  return mv;
}

AnalysisVars analysis_update(Tape& tape, Var members, Var memory, const AmEnFModel& model,
                             const ModelVars& mv, const ObservationRecord& obs,
                             const Integrator& integ, Rng& rng) {
  const AmEnFArch& arch = model.arch;
  const Tensor& tm = tape.val(members);
  const int c_n = tm.dim(0), m = tm.dim(1), d = tm.dim(2);
  if (c_n != arch.state_channels || d != arch.spatial_dim)
    throw Error("analysis_update: member shape does not match architecture");

  const ImputedObservation imp = impute_observation(obs, tm, rng);

  Var cov = tape.broadcast_batch(tape.ens_cov_channels(members, arch.cov_width), m);
  Var obs_v = tape.input(imp.obs_channels);
  Var ind_v = tape.broadcast_batch(tape.input(imp.indicator), m);
  // dynamics channel g(x^f); differentiable so the unrolled loss gradient is
  // exact (imputed observation entries above stay detached)
  Var dyn_v = integ.tendency_t(tape, members);
  Var h = tape.concat({members, cov, obs_v, ind_v, dyn_v, memory});

  for (int l = 0; l < arch.trunk_layers; ++l) {
    h = tape.relu(tape.add_bias(tape.conv1d(h, mv.kernels[(size_t)l]), mv.biases[(size_t)l]));
    if (arch.dropout_rate > 0.0) {
      Tensor mask = make_dropout_mask({arch.filters, m, d}, arch.dropout_rate, rng);
      h = tape.dropout_apply(h, tape.input(std::move(mask)));
    }
  }
  Var r = tape.add_bias(tape.conv1d(h, mv.kernels.back()), mv.biases.back());

  const int cs = arch.state_channels, md = arch.memory_depth;
  Var z_x = tape.slice(r, 0, cs);
  Var z_c = tape.slice(r, cs, md);
  Var gate_x = tape.sigmoid(tape.slice(r, cs + md, cs));
  Var gate_c = tape.sigmoid(tape.slice(r, cs + md + cs, md));
  AnalysisVars out;
  out.gate_state = gate_x;
  out.gate_memory = gate_c;
  out.members = tape.add(tape.mul(gate_x, members), z_x);
  out.memory = tape.add(tape.mul(gate_c, memory), z_c);
  return out;
}

CycleResult amenf_cycle(Tape& tape, const Integrator& integ, const CycleVars& state,
                        const ObservationRecord& obs, const AmEnFModel& model,
                        const ModelVars& mv, Rng& rng) {
  const SystemSpec& spec = integ.spec();
  CycleResult res;
  try {
    res.forecast = integ.steps_t(tape, state.members, spec.steps_per_observation);
  } catch (const BlowupError& e) {
    throw BlowupError(std::string("amenf_cycle ") + std::to_string(state.cycle + 1) + ": " +
                          e.what(),
                      e.step);
  }
  AnalysisVars av;
  try {
    av = analysis_update(tape, res.forecast, state.memory, model, mv, obs, integ, rng);
  } catch (const Error& e) {
    throw Error("amenf_cycle " + std::to_string(state.cycle + 1) + ": " + e.what());
  }
  res.state.members = av.members;
  res.state.memory = av.memory;
  res.state.cycle = state.cycle + 1;
  return res;
}

AmEnFState amenf_initial_state(const ObservationRecord& obs, const AmEnFArch& arch, int m,
                               Rng& rng) {
  AmEnFState st;
  st.members = members_from_vectors(ensemble_init(obs, m, rng), arch.state_channels,
                                    arch.spatial_dim);
  st.memory = Tensor({arch.memory_depth, m, arch.spatial_dim});
  st.cycle = 0;
  return st;
}

AmenfRunResult run_amenf(const ObservationSequenceView& seq,
                         const std::vector<std::vector<double>>* truth, const AmEnFModel& model,
                         int m, Rng& rng) {
  const SystemSpec& spec = seq.system();
  Integrator integ(spec);
  const int cycles = seq.cycles();
  if (cycles < 1) throw Error("run_amenf: empty sequence");
  if (truth && (int)truth->size() != cycles) throw Error("run_amenf: truth length mismatch");

  AmEnFState st = amenf_initial_state(seq.obs(0), model.arch, m, rng);
  AmenfRunResult res;
  double ssf_acc = 0.0;
  int ssf_terms = 0;

  for (int k = 1; k < cycles; ++k) {
    Tape tape;
    ModelVars mv = bind_model(tape, model, false);
    CycleVars cv{tape.input(st.members), tape.input(st.memory), st.cycle};
    CycleResult cr = amenf_cycle(tape, integ, cv, seq.obs(k), model, mv, rng);

    // pseudo-observation error of the pre-analysis forecast mean
    {
      const Tensor& f = tape.val(cr.forecast);
      const auto fmean = members_mean_state(f);
      const auto& rec = seq.obs(k);
      const auto y = rec.scatter_full();
      double s = 0.0;
      for (size_t j = 0; j < y.size(); ++j)
        if (rec.mask[j]) {
          const double e = fmean[j] - y[j];
          s += e * e;
        }
      ssf_acc += s;
      ++ssf_terms;
    }

    st.members = tape.val(cr.state.members);
    st.memory = tape.val(cr.state.memory);
    st.cycle = cr.state.cycle;

    const auto mu = members_mean_state(st.members);
    res.analysis_mean.times.push_back(spec.dt * spec.steps_per_observation * k);
    res.analysis_mean.states.push_back(mu);
    res.spread.push_back(members_spread(st.members));
    if (truth) {
      double s = 0.0;
      for (size_t j = 0; j < mu.size(); ++j) {
        const double e = mu[j] - (*truth)[(size_t)k][j];
        s += e * e;
      }
      res.cycle_rmse.push_back(std::sqrt(s / (double)mu.size()));
    }
  }

  if (!res.cycle_rmse.empty()) {
    double s = 0.0;
    for (double v : res.cycle_rmse) s += v;
    res.mean_rmse = s / (double)res.cycle_rmse.size();
  }
  if (ssf_terms > 0) res.ssf_value = ssf_acc / ssf_terms;
  return res;
}

}  // namespace amortda

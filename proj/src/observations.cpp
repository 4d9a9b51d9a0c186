#include "amortda/observations.hpp"

#include <cmath>

#include "amortda/json_config.hpp"
#include "amortda/serialize.hpp"

namespace amortda {

namespace {
const std::string kDatasetMagic = "AMDADS01";
}  // namespace

nlohmann::json system_to_json(const SystemSpec& s) {
  const char* kind = s.kind == SystemKind::L96 ? "l96" : s.kind == SystemKind::VL20 ? "vl20" : "ks";
  nlohmann::json j{{"kind", kind},
                   {"dimension", s.dimension},
                   {"dt", s.dt},
                   {"steps_per_observation", s.steps_per_observation},
                   {"forcing", s.forcing}};
  if (s.kind == SystemKind::VL20) {
    j["vl20_g"] = s.vl20_g;
    j["vl20_alpha"] = s.vl20_alpha;
    j["vl20_gamma"] = s.vl20_gamma;
  }
  if (s.kind == SystemKind::KS) j["ks_domain"] = s.ks_domain;
  return j;
}

SystemSpec system_from_json(const nlohmann::json& j) {
  SystemSpec s;
  const std::string kind = j.at("kind").get<std::string>();
  if (kind == "l96")
    s.kind = SystemKind::L96;
  else if (kind == "vl20")
    s.kind = SystemKind::VL20;
  else if (kind == "ks")
    s.kind = SystemKind::KS;
  else
    throw Error("dataset: unknown system kind '" + kind + "'");
  s.dimension = j.at("dimension").get<int>();
  s.dt = j.at("dt").get<double>();
  s.steps_per_observation = j.at("steps_per_observation").get<int>();
  s.forcing = j.value("forcing", 8.0);
  s.vl20_g = j.value("vl20_g", 10.0);
  s.vl20_alpha = j.value("vl20_alpha", 1.0);
  s.vl20_gamma = j.value("vl20_gamma", 1.0);
  s.ks_domain = j.value("ks_domain", 32.0 * 3.14159265358979323846);
  s.validate();
  return s;
}

nlohmann::json operator_to_json(const ObservationOperator& op) {
  return nlohmann::json{
      {"kind", op.kind == ObservationOperator::Kind::Full ? "full" : "rotating-subset"},
      {"stride", op.stride},
      {"sigma", op.sigma}};
}

ObservationOperator operator_from_json(const nlohmann::json& j) {
  ObservationOperator op;
  const std::string kind = j.at("kind").get<std::string>();
  if (kind == "full")
    op.kind = ObservationOperator::Kind::Full;
  else if (kind == "rotating-subset")
    op.kind = ObservationOperator::Kind::RotatingSubset;
  else
    throw Error("dataset: unknown operator kind '" + kind + "'");
  op.stride = j.value("stride", 1);
  op.sigma = j.at("sigma").get<double>();
  return op;
}

void ObservationOperator::validate(int dimension) const {
  if (sigma < 0.0) throw Error("ObservationOperator: sigma must be >= 0");
  if (kind == Kind::RotatingSubset && (stride < 1 || stride > dimension))
    throw Error("ObservationOperator: stride must be in [1, D]");
}

std::vector<uint8_t> rotating_mask(int cycle, int dimension, int stride) {
  if (stride < 1 || stride > dimension) throw Error("rotating_mask: stride must be in [1, D]");
  std::vector<uint8_t> mask((size_t)dimension, 0);
  const int offset = ((cycle % stride) + stride) % stride;
  for (int j = offset; j < dimension; j += stride) mask[(size_t)j] = 1;
  return mask;
}

std::vector<uint8_t> observation_mask(const ObservationOperator& op, int cycle, int dimension) {
  if (op.kind == ObservationOperator::Kind::Full) return std::vector<uint8_t>((size_t)dimension, 1);
  return rotating_mask(cycle, dimension, op.stride);
}

int ObservationRecord::observed_count() const {
  int n = 0;
  for (uint8_t m : mask) n += m ? 1 : 0;
  return n;
}

void ObservationRecord::validate() const {
  if ((int)values.size() != observed_count())
    throw Error("ObservationRecord: values length must equal number of observed coordinates");
  if (values.empty()) throw Error("ObservationRecord: at least one coordinate must be observed");
  if (sigma < 0.0) throw Error("ObservationRecord: sigma must be >= 0");
}

std::vector<double> ObservationRecord::scatter_full() const {
  std::vector<double> full(mask.size(), 0.0);
  size_t vi = 0;
  for (size_t j = 0; j < mask.size(); ++j)
    if (mask[j]) full[j] = values[vi++];
  return full;
}

ObservationRecord observe(const std::vector<double>& x, const ObservationOperator& op, int cycle,
                          Rng& rng) {
  op.validate((int)x.size());
  ObservationRecord rec;
  rec.time_index = cycle;
  rec.sigma = op.sigma;
  rec.mask = observation_mask(op, cycle, (int)x.size());
  for (size_t j = 0; j < x.size(); ++j)
    if (rec.mask[j]) rec.values.push_back(x[j] + op.sigma * rng.normal());
  rec.validate();
  return rec;
}

const std::vector<std::vector<double>>& TrajectoryDataset::truth_for_diagnostics(int i) const {
  const auto& t = sequences[(size_t)i].truth;
  if (t.empty()) throw Error("dataset: truth not stored for this dataset");
  return t;
}

std::vector<double> attractor_initial_state(const SystemSpec& spec, Rng& rng) {
  std::vector<double> x((size_t)spec.dimension);
  switch (spec.kind) {
    case SystemKind::L96:
      for (auto& v : x) v = spec.forcing + rng.normal();
      break;
    case SystemKind::VL20: {
      const int jn = spec.dimension / 2;
      const double al = spec.vl20_alpha, ga = spec.vl20_gamma;
      double xbar, tbar;
      if (al != 0.0) {
        xbar = (ga * spec.forcing - al * spec.vl20_g) / (al * al + ga * ga);
        tbar = (spec.forcing - ga * xbar) / al;
      } else {
        xbar = spec.forcing / ga;
        tbar = spec.vl20_g / ga;
      }
      for (int j = 0; j < jn; ++j) x[(size_t)j] = xbar + rng.normal();
      for (int j = 0; j < jn; ++j) x[(size_t)(jn + j)] = tbar + rng.normal();
      break;
    }
    case SystemKind::KS: {
      const int n = spec.dimension;
      for (auto& v : x) v = 0.0;
      for (int k = 1; k <= 3; ++k) {
        const double amp = 0.6 / k * rng.normal();
        const double phase = 2.0 * 3.14159265358979323846 * rng.uniform();
        for (int j = 0; j < n; ++j)
          x[(size_t)j] += amp * std::cos(2.0 * 3.14159265358979323846 * k * j / n + phase);
      }
      break;
    }
  }
  return x;
}

TrajectoryDataset generate_dataset(const SystemSpec& spec, const ObservationOperator& op,
                                   int n_sequences, int steps_per_sequence, int burn_in_steps,
                                   uint64_t seed, const std::string& role, bool with_truth) {
  spec.validate();
  op.validate(spec.dimension);
  if (burn_in_steps < 0) throw Error("generate_dataset: burn_in_steps must be >= 0");
  if (n_sequences < 1 || steps_per_sequence < 0) throw Error("generate_dataset: bad counts");

  TrajectoryDataset ds;
  ds.system = spec;
  ds.op = op;
  ds.seed = seed;
  ds.role = role;
  ds.has_truth = with_truth;
  ds.sequences.resize((size_t)n_sequences);

  Integrator integ(spec);
  Rng master(seed);
  for (int i = 0; i < n_sequences; ++i) {
    DatasetSequence& sq = ds.sequences[(size_t)i];
    Rng rng = master.stream(1, (uint64_t)i);
    sq.seed = rng.root_seed();
    std::vector<double> x = attractor_initial_state(spec, rng);
    try {
      integ.steps(x, burn_in_steps);
      if (with_truth) sq.truth.push_back(x);
      sq.observations.push_back(observe(x, op, 0, rng));
      for (int k = 1; k <= steps_per_sequence; ++k) {
        integ.steps(x, spec.steps_per_observation,
                    burn_in_steps + (long)(k - 1) * spec.steps_per_observation);
        if (with_truth) sq.truth.push_back(x);
        sq.observations.push_back(observe(x, op, k, rng));
      }
    } catch (const BlowupError& e) {
      throw Error("generate_dataset: sequence " + std::to_string(i) + ": " + e.what());
    }
  }
  return ds;
}

void TrajectoryDataset::save(const std::string& path) const {
  nlohmann::json header;
  header["format_version"] = 1;
  header["role"] = role;
  header["seed"] = seed;
  header["has_truth"] = has_truth;
  header["n_sequences"] = (int)sequences.size();
  header["cycles_per_sequence"] = sequences.empty() ? 0 : (int)sequences[0].observations.size();
  header["system"] = system_to_json(system);
  header["operator"] = operator_to_json(op);
  std::vector<uint64_t> seeds;
  for (const auto& s : sequences) seeds.push_back(s.seed);
  header["sequence_seeds"] = seeds;

  std::vector<double> payload;
  for (const auto& sq : sequences) {
    if (has_truth)
      for (const auto& t : sq.truth) payload.insert(payload.end(), t.begin(), t.end());
    for (const auto& rec : sq.observations) {
      for (uint8_t m : rec.mask) payload.push_back(m ? 1.0 : 0.0);
      payload.insert(payload.end(), rec.values.begin(), rec.values.end());
    }
  }
  write_container(path, kDatasetMagic, header, payload);
}

TrajectoryDataset TrajectoryDataset::load(const std::string& path) {
  Container c = read_container(path, kDatasetMagic);
  const auto& h = c.header;
  if (h.at("format_version").get<int>() != 1) throw Error("dataset: unsupported format version");
  TrajectoryDataset ds;
  ds.role = h.at("role").get<std::string>();
  ds.seed = h.at("seed").get<uint64_t>();
  ds.has_truth = h.at("has_truth").get<bool>();
  ds.system = system_from_json(h.at("system"));
  ds.op = operator_from_json(h.at("operator"));
  const int n_seq = h.at("n_sequences").get<int>();
  const int cycles = h.at("cycles_per_sequence").get<int>();
  const auto seeds = h.at("sequence_seeds").get<std::vector<uint64_t>>();
  if ((int)seeds.size() != n_seq) throw Error("dataset: sequence seed count mismatch");

  const int d = ds.system.dimension;
  size_t pos = 0;
  auto take = [&](size_t n) {
    if (pos + n > c.payload.size()) throw Error("dataset: payload shorter than header implies");
    const double* p = c.payload.data() + pos;
    pos += n;
    return p;
  };

  ds.sequences.resize((size_t)n_seq);
  for (int i = 0; i < n_seq; ++i) {
    DatasetSequence& sq = ds.sequences[(size_t)i];
    sq.seed = seeds[(size_t)i];
    if (ds.has_truth) {
      sq.truth.resize((size_t)cycles);
      for (int k = 0; k < cycles; ++k) {
        const double* p = take((size_t)d);
        sq.truth[(size_t)k].assign(p, p + d);
      }
    }
    sq.observations.resize((size_t)cycles);
    for (int k = 0; k < cycles; ++k) {
      ObservationRecord& rec = sq.observations[(size_t)k];
      rec.time_index = k;
      rec.sigma = ds.op.sigma;
      const double* pm = take((size_t)d);
      rec.mask.resize((size_t)d);
      int count = 0;
      for (int j = 0; j < d; ++j) {
        rec.mask[(size_t)j] = pm[j] != 0.0;
        count += rec.mask[(size_t)j] ? 1 : 0;
      }
      const double* pv = take((size_t)count);
      rec.values.assign(pv, pv + count);
      rec.validate();
    }
  }
  if (pos != c.payload.size()) throw Error("dataset: payload longer than header implies");
  return ds;
}

}  // namespace amortda

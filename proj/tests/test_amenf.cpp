#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <fstream>

#include "amortda/amenf.hpp"

using namespace amortda;

namespace {

AmEnFArch small_arch(int d = 8, int filters = 2, int mem = 2, double dropout = 0.0) {
  AmEnFArch a;
  a.state_channels = 1;
  a.spatial_dim = d;
  a.trunk_layers = 4;
  a.filters = filters;
  a.kernel_width = 3;
  a.memory_depth = mem;
  a.cov_width = 3;
  a.dropout_rate = dropout;
  return a;
}

AmEnFModel zero_model(const AmEnFArch& arch) {
  Rng rng(0);
  AmEnFModel m = AmEnFModel::init(arch, rng);
  for (auto& k : m.kernels)
    for (int i = 0; i < k.size(); ++i) k[i] = 0.0;
  for (auto& b : m.biases)
    for (int i = 0; i < b.size(); ++i) b[i] = 0.0;
  return m;
}

/// All-zero network except saturated gates: analysis == forecast.
AmEnFModel identity_gate_model(const AmEnFArch& arch) {
  AmEnFModel m = zero_model(arch);
  Tensor& b = m.biases.back();
  for (int c = arch.state_channels + arch.memory_depth; c < arch.readout_channels(); ++c)
    b[c] = 1000.0;  // sigmoid saturates to exactly 1.0
  return m;
}

/// Gates forced to zero, residual head reproducing the observation channel
/// through relu(x) - relu(-x): analysis == imputed observation.
AmEnFModel obs_copy_model(const AmEnFArch& arch) {
  REQUIRE(arch.filters >= 2);
  AmEnFModel m = zero_model(arch);
  const int w = arch.kernel_width, center = (arch.kernel_width - 1) / 2;
  const int obs_ch = arch.off_obs();
  auto kat = [&](Tensor& k, int o, int c, int tap) -> double& {
    return k[(o * k.dim(1) + c) * w + tap];
  };
  kat(m.kernels[0], 0, obs_ch, center) = 1.0;
  kat(m.kernels[0], 1, obs_ch, center) = -1.0;
  for (int l = 1; l < arch.trunk_layers; ++l) {
    kat(m.kernels[(size_t)l], 0, 0, center) = 1.0;
    kat(m.kernels[(size_t)l], 1, 1, center) = 1.0;
  }
  kat(m.kernels.back(), 0, 0, center) = 1.0;   // z_x = h0 - h1
  kat(m.kernels.back(), 1, 0, center) = -1.0;  // wait: row 0 is z_x; see below
  Tensor& k = m.kernels.back();
  for (int i = 0; i < k.size(); ++i) k[i] = 0.0;
  kat(k, 0, 0, center) = 1.0;
  kat(k, 0, 1, center) = -1.0;
  Tensor& b = m.biases.back();
  for (int c = arch.state_channels + arch.memory_depth; c < arch.readout_channels(); ++c)
    b[c] = -1000.0;  // sigmoid underflows to exactly 0.0
  return m;
}

ObservationRecord make_record(const std::vector<double>& yfull, const std::vector<uint8_t>& mask,
                              double sigma) {
  ObservationRecord rec;
  rec.mask = mask;
  rec.sigma = sigma;
  for (size_t j = 0; j < mask.size(); ++j)
    if (mask[j]) rec.values.push_back(yfull[j]);
  return rec;
}

Tensor roll_last(const Tensor& t, int s) {
  const int d = t.dim(t.rank() - 1);
  const int rows = t.size() / d;
  Tensor out(t.shape());
  for (int r = 0; r < rows; ++r)
    for (int j = 0; j < d; ++j) out[r * d + (j + s) % d] = t[r * d + j];
  return out;
}

}  // namespace

TEST_CASE("local covariance channels: degenerate cases and analytic field") {
  SUBCASE("identical members give all-zero channels") {
    Tensor members({1, 4, 6});
    for (int i = 0; i < 4; ++i)
      for (int j = 0; j < 6; ++j) members[i * 6 + j] = 1.0 + j;
    Tensor cov = local_covariance_channels(members, 3);
    for (int i = 0; i < cov.size(); ++i) CHECK(cov[i] == 0.0);
  }

  SUBCASE("width 1 equals the diagonal of the ensemble covariance") {
    Rng rng(5);
    const int m = 7, d = 5;
    Tensor members({1, m, d});
    EnsembleState ens;
    ens.members.resize(m);
    for (int i = 0; i < m; ++i) {
      ens.members[(size_t)i].resize(d);
      for (int j = 0; j < d; ++j) {
        const double v = rng.normal();
        members[i * d + j] = v;
        ens.members[(size_t)i][(size_t)j] = v;
      }
    }
    Tensor cov = local_covariance_channels(members, 1);
    Matrix p = ensemble_covariance(ens);
    for (int j = 0; j < d; ++j) CHECK(cov[j] == doctest::Approx(p(j, j)).epsilon(1e-12));
  }

  SUBCASE("circular moving-average field matches its analytic covariances") {
    Rng rng(11);
    const int m = 10000, d = 16;
    const double c0 = 0.6, c1 = 0.3, c2 = 0.1;
    Tensor members({1, m, d});
    std::vector<double> eps((size_t)d);
    for (int i = 0; i < m; ++i) {
      for (auto& e : eps) e = rng.normal();
      for (int j = 0; j < d; ++j)
        members[i * d + j] =
            c0 * eps[(size_t)j] + c1 * eps[(size_t)((j + 1) % d)] + c2 * eps[(size_t)((j + 2) % d)];
    }
    Tensor cov = local_covariance_channels(members, 3);
    const double var = c0 * c0 + c1 * c1 + c2 * c2;        // 0.46
    const double lag1 = c0 * c1 + c1 * c2;                 // 0.21
    for (int j = 0; j < d; ++j) {
      CHECK(std::abs(cov[0 * d + j] - lag1) < 0.05 * var);  // offset -1
      CHECK(std::abs(cov[1 * d + j] - var) < 0.05 * var);   // variance
      CHECK(std::abs(cov[2 * d + j] - lag1) < 0.05 * var);  // offset +1
    }
  }

  SUBCASE("even width rejected") {
    Tensor members({1, 3, 6});
    CHECK_THROWS_AS(local_covariance_channels(members, 2), Error);
  }
}

TEST_CASE("imputation: full observation, partial donors, degenerate m=1") {
  Rng rng(3);
  Tensor members({1, 4, 8});
  for (int i = 0; i < members.size(); ++i) members[i] = 10.0 + i;

  SUBCASE("full observation carries y on every member and +0.1 indicators") {
    std::vector<double> y(8);
    for (int j = 0; j < 8; ++j) y[(size_t)j] = 0.5 * j;
    auto rec = make_record(y, std::vector<uint8_t>(8, 1), 1.0);
    auto imp = impute_observation(rec, members, rng);
    for (int i = 0; i < 4; ++i)
      for (int j = 0; j < 8; ++j) CHECK(imp.obs_channels[i * 8 + j] == y[(size_t)j]);
    for (int j = 0; j < 8; ++j) CHECK(imp.indicator[j] == 0.1);
  }

  SUBCASE("rotating 25% mask mixes y with donor forecasts") {
    std::vector<double> y(8, 0.0);
    y[0] = -1.0;
    y[4] = -2.0;
    auto mask = rotating_mask(0, 8, 4);
    auto rec = make_record(y, mask, 1.0);
    auto imp = impute_observation(rec, members, rng);
    for (int i = 0; i < 4; ++i) {
      CHECK(imp.obs_channels[i * 8 + 0] == -1.0);
      CHECK(imp.obs_channels[i * 8 + 4] == -2.0);
      const int donor = imp.donors[(size_t)i];
      CHECK(donor != i);
      CHECK(donor >= 0);
      for (int j : {1, 2, 3, 5, 6, 7})
        CHECK(imp.obs_channels[i * 8 + j] == members[donor * 8 + j]);
    }
    for (int j = 0; j < 8; ++j) CHECK(imp.indicator[j] == ((j % 4 == 0) ? 0.1 : -0.1));
  }

  SUBCASE("single member with partial observations falls back to zero fill") {
    Tensor solo({1, 1, 8});
    for (int i = 0; i < 8; ++i) solo[i] = 3.0;
    std::vector<double> y(8, 1.0);
    auto rec = make_record(y, rotating_mask(0, 8, 4), 1.0);
    auto imp = impute_observation(rec, solo, rng);
    CHECK(imp.obs_channels[0] == 1.0);
    CHECK(imp.obs_channels[1] == 0.0);
  }
}

TEST_CASE("structural models: identity gating and observation copying") {
  AmEnFArch arch = small_arch();
  SystemSpec spec = SystemSpec::l96(8, 8.0);
  Integrator integ(spec);
  Rng rng(7);

  Tensor members({1, 3, 8});
  for (int i = 0; i < members.size(); ++i) members[i] = 2.0 + 0.1 * i;
  Tensor memory({2, 3, 8});
  for (int i = 0; i < memory.size(); ++i) memory[i] = 0.01 * i;
  std::vector<double> y(8);
  for (int j = 0; j < 8; ++j) y[(size_t)j] = -1.0 + 0.3 * j;
  auto rec = make_record(y, std::vector<uint8_t>(8, 1), 1.0);

  SUBCASE("saturated gate with zero residual returns the forecast unchanged") {
    AmEnFModel m = identity_gate_model(arch);
    Tape t;
    ModelVars mv = bind_model(t, m, false);
    auto av = analysis_update(t, t.input(members), t.input(memory), m, mv, rec, integ, rng);
    const Tensor& out = t.val(av.members);
    for (int i = 0; i < members.size(); ++i) CHECK(out[i] == members[i]);
    const Tensor& mem_out = t.val(av.memory);
    for (int i = 0; i < memory.size(); ++i) CHECK(mem_out[i] == memory[i]);
  }

  SUBCASE("zero gate with an observation-copying residual returns the imputed observation") {
    AmEnFModel m = obs_copy_model(arch);
    Tape t;
    ModelVars mv = bind_model(t, m, false);
    auto av = analysis_update(t, t.input(members), t.input(memory), m, mv, rec, integ, rng);
    const Tensor& out = t.val(av.members);
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 8; ++j) CHECK(out[i * 8 + j] == y[(size_t)j]);
  }
}

TEST_CASE("no gradient flows through donor-imputed observation entries") {
  AmEnFArch arch = small_arch();
  SystemSpec spec = SystemSpec::l96(8, 8.0);
  Integrator integ(spec);
  Rng rng(13);
  AmEnFModel model = obs_copy_model(arch);

  Tensor members({1, 4, 8});
  for (int i = 0; i < members.size(); ++i) members[i] = 1.0 + 0.2 * i;
  Tensor memory({2, 4, 8});
  std::vector<double> y(8, 0.7);
  auto rec = make_record(y, rotating_mask(0, 8, 4), 1.0);

  Tape t;
  ModelVars mv = bind_model(t, model, false);
  Var mv_in = t.input(members, true);
  auto av = analysis_update(t, mv_in, t.input(memory), model, mv, rec, integ, rng);
  // analysis equals the imputed observation, which contains donor member values
  auto g = t.gradient(t.squared_norm(av.members), {mv_in});
  for (int i = 0; i < g[0].size(); ++i) CHECK(g[0][i] == 0.0);
}

TEST_CASE("gates stay strictly inside (0,1) for generic models") {
  AmEnFArch arch = small_arch(8, 6, 2, 0.0);
  SystemSpec spec = SystemSpec::l96(8, 8.0);
  Integrator integ(spec);
  Rng rng(17);
  AmEnFModel model = AmEnFModel::init(arch, rng);

  Tensor members({1, 5, 8});
  for (int i = 0; i < members.size(); ++i) members[i] = 3.0 * std::sin(0.37 * i);
  Tensor memory({2, 5, 8});
  std::vector<double> y(8, 1.0);
  auto rec = make_record(y, std::vector<uint8_t>(8, 1), 1.0);

  Tape t;
  ModelVars mvars = bind_model(t, model, false);
  auto av = analysis_update(t, t.input(members), t.input(memory), model, mvars, rec, integ, rng);
  const Tensor& gx = t.val(av.gate_state);
  const Tensor& gc = t.val(av.gate_memory);
  for (int i = 0; i < gx.size(); ++i) {
    CHECK(gx[i] > 0.0);
    CHECK(gx[i] < 1.0);
  }
  for (int i = 0; i < gc.size(); ++i) {
    CHECK(gc[i] > 0.0);
    CHECK(gc[i] < 1.0);
  }
}

TEST_CASE("full analysis update is translation equivariant (no dropout)") {
  AmEnFArch arch = small_arch(12, 4, 2, 0.0);
  SystemSpec spec = SystemSpec::l96(12, 8.0);
  Integrator integ(spec);
  Rng mrng(19);
  AmEnFModel model = AmEnFModel::init(arch, mrng);
  const int s = 5;

  Tensor members({1, 3, 12});
  Rng rng(23);
  for (int i = 0; i < members.size(); ++i) members[i] = 2.0 * rng.normal();
  Tensor memory({2, 3, 12});
  for (int i = 0; i < memory.size(); ++i) memory[i] = 0.5 * rng.normal();
  std::vector<double> y(12);
  for (auto& v : y) v = rng.normal();
  auto mask = rotating_mask(0, 12, 4);
  auto rec = make_record(y, mask, 1.0);

  // shifted copies of every input
  std::vector<double> ys(12);
  std::vector<uint8_t> masks(12);
  for (int j = 0; j < 12; ++j) {
    ys[(size_t)((j + s) % 12)] = y[(size_t)j];
    masks[(size_t)((j + s) % 12)] = mask[(size_t)j];
  }
  auto rec_s = make_record(ys, masks, 1.0);

  Rng r1(31), r2(31);  // identical donor draws
  Tape t1, t2;
  ModelVars mv1 = bind_model(t1, model, false);
  ModelVars mv2 = bind_model(t2, model, false);
  auto a1 = analysis_update(t1, t1.input(members), t1.input(memory), model, mv1, rec, integ, r1);
  auto a2 = analysis_update(t2, t2.input(roll_last(members, s)), t2.input(roll_last(memory, s)),
                            model, mv2, rec_s, integ, r2);
  Tensor want = roll_last(t1.val(a1.members), s);
  const Tensor& got = t2.val(a2.members);
  for (int i = 0; i < want.size(); ++i) CHECK(got[i] == want[i]);
  Tensor want_mem = roll_last(t1.val(a1.memory), s);
  const Tensor& got_mem = t2.val(a2.memory);
  for (int i = 0; i < want_mem.size(); ++i) CHECK(got_mem[i] == want_mem[i]);
}

TEST_CASE("dropout controls ensemble diversity for identical inputs") {
  SystemSpec spec = SystemSpec::l96(8, 8.0);
  Integrator integ(spec);
  Rng mrng(37);
  std::vector<double> y(8, 0.5);
  auto rec = make_record(y, std::vector<uint8_t>(8, 1), 1.0);

  Tensor members({1, 4, 8});
  for (int c = 0; c < 4; ++c)
    for (int j = 0; j < 8; ++j) members[c * 8 + j] = 1.0 + 0.3 * j;  // identical members
  Tensor memory({2, 4, 8});

  SUBCASE("rate 0: deterministic collapse, all outputs identical") {
    AmEnFArch arch = small_arch(8, 6, 2, 0.0);
    AmEnFModel model = AmEnFModel::init(arch, mrng);
    Rng rng(41);
    Tape t;
    ModelVars mv = bind_model(t, model, false);
    auto av = analysis_update(t, t.input(members), t.input(memory), model, mv, rec, integ, rng);
    const Tensor& out = t.val(av.members);
    for (int i = 1; i < 4; ++i)
      for (int j = 0; j < 8; ++j) CHECK(out[i * 8 + j] == out[j]);
  }

  SUBCASE("rate 0.2: member-independent masks inject spread") {
    AmEnFArch arch = small_arch(8, 6, 2, 0.2);
    AmEnFModel model = AmEnFModel::init(arch, mrng);
    // make the residual head matter so dropout reaches the output
    for (int i = 0; i < model.kernels.back().size(); ++i)
      model.kernels.back()[i] = 0.3 * mrng.normal();
    Rng rng(41);
    Tape t;
    ModelVars mv = bind_model(t, model, false);
    auto av = analysis_update(t, t.input(members), t.input(memory), model, mv, rec, integ, rng);
    const Tensor& out = t.val(av.members);
    double maxdiff = 0.0;
    for (int i = 1; i < 4; ++i)
      for (int j = 0; j < 8; ++j) maxdiff = std::max(maxdiff, std::abs(out[i * 8 + j] - out[j]));
    CHECK(maxdiff > 1e-8);
  }
}

TEST_CASE("amenf_cycle: identity-gate model tracks the bare forecast; runs are deterministic") {
  SystemSpec spec = SystemSpec::l96(8, 8.0);
  ObservationOperator op;
  op.sigma = 1.0;
  auto ds = generate_dataset(spec, op, 1, 6, 200, 77, "train", true);
  AmEnFArch arch = small_arch();
  AmEnFModel model = identity_gate_model(arch);
  Integrator integ(spec);

  SUBCASE("analysis equals forecast under identity gating") {
    Rng rng(3);
    AmEnFState st = amenf_initial_state(ds.sequences[0].observations[0], arch, 3, rng);
    Tape t;
    ModelVars mv = bind_model(t, model, false);
    CycleVars cv{t.input(st.members), t.input(st.memory), 0};
    auto cr = amenf_cycle(t, integ, cv, ds.sequences[0].observations[1], model, mv, rng);
    const Tensor& f = t.val(cr.forecast);
    const Tensor& a = t.val(cr.state.members);
    for (int i = 0; i < f.size(); ++i) CHECK(a[i] == f[i]);
  }

  SUBCASE("bit-identical repeated runs") {
    Rng mrng(5);
    AmEnFModel rnd = AmEnFModel::init(small_arch(8, 4, 2, 0.2), mrng);
    Rng r1(9), r2(9);
    auto res1 = run_amenf(ds.view(0), &ds.truth_for_diagnostics(0), rnd, 4, r1);
    auto res2 = run_amenf(ds.view(0), &ds.truth_for_diagnostics(0), rnd, 4, r2);
    REQUIRE(res1.cycle_rmse.size() == res2.cycle_rmse.size());
    for (size_t i = 0; i < res1.cycle_rmse.size(); ++i)
      CHECK(res1.cycle_rmse[i] == res2.cycle_rmse[i]);
    CHECK(res1.ssf_value == res2.ssf_value);
  }
}

TEST_CASE("architecture defaults follow the per-system settings") {
  AmEnFArch l96 = AmEnFArch::defaults_for(SystemSpec::l96(40, 8.0));
  CHECK(l96.kernel_width == 5);
  CHECK(l96.cov_width == 3);
  CHECK(l96.memory_depth == 6);
  CHECK(l96.filters == 64);
  CHECK(l96.dropout_rate == 0.2);
  CHECK(l96.input_channels() == 13);

  AmEnFArch ks = AmEnFArch::defaults_for(SystemSpec::ks(128));
  CHECK(ks.kernel_width == 7);
  CHECK(ks.cov_width == 5);
  CHECK(ks.memory_depth == 4);
  CHECK(ks.input_channels() == 13);

  AmEnFArch vl = AmEnFArch::defaults_for(SystemSpec::vl20(36));
  CHECK(vl.state_channels == 2);
  CHECK(vl.spatial_dim == 36);
  CHECK(vl.input_channels() == 2 * 4 + 2 * 3 + 6);
}

TEST_CASE("assimilation cycles run on the two-field and spectral systems") {
  SUBCASE("vl20: two state channels through the full cycle") {
    SystemSpec spec = SystemSpec::vl20(8);
    ObservationOperator op;
    op.kind = ObservationOperator::Kind::RotatingSubset;
    op.stride = 4;
    op.sigma = 1.0;
    auto ds = generate_dataset(spec, op, 1, 3, 200, 66, "train", true);
    AmEnFArch arch = AmEnFArch::defaults_for(spec);
    arch.filters = 6;  // desk-size trunk for the smoke test
    Rng mrng(3);
    AmEnFModel model = AmEnFModel::init(arch, mrng);
    Rng rng(5);
    auto res = run_amenf(ds.view(0), &ds.truth_for_diagnostics(0), model, 4, rng);
    CHECK(res.cycle_rmse.size() == 3);
    for (double v : res.cycle_rmse) CHECK(std::isfinite(v));
  }

  SUBCASE("ks: spectral forecast and differentiable tendency channel") {
    SystemSpec spec = SystemSpec::ks(32);
    spec.ks_domain = 8.0 * M_PI;  // keep the grid spacing of the 128-point setup
    ObservationOperator op;
    op.sigma = 0.3;
    auto ds = generate_dataset(spec, op, 1, 3, 400, 67, "train", true);
    AmEnFArch arch = AmEnFArch::defaults_for(spec);
    arch.filters = 6;
    Rng mrng(3);
    AmEnFModel model = AmEnFModel::init(arch, mrng);
    Rng rng(5);
    auto res = run_amenf(ds.view(0), &ds.truth_for_diagnostics(0), model, 4, rng);
    CHECK(res.cycle_rmse.size() == 3);
    for (double v : res.cycle_rmse) CHECK(std::isfinite(v));

    // tape tendency agrees with the plain spectral tendency
    Integrator integ(spec);
    Tensor members({1, 2, 32});
    for (int i = 0; i < members.size(); ++i) members[i] = std::cos(0.19 * i);
    Tape t;
    Tensor g_t = t.val(integ.tendency_t(t, t.input(members)));
    for (int i = 0; i < 2; ++i) {
      std::vector<double> x(32), g(32);
      for (int j = 0; j < 32; ++j) x[(size_t)j] = members[i * 32 + j];
      integ.rhs(x.data(), g.data());
      for (int j = 0; j < 32; ++j)
        CHECK(g_t[i * 32 + j] == doctest::Approx(g[(size_t)j]).epsilon(1e-10));
    }
  }
}

TEST_CASE("checkpoint round-trips bit-exactly") {
  Rng rng(51);
  AmEnFArch arch = AmEnFArch::defaults_for(SystemSpec::l96(40, 8.0));
  AmEnFModel model = AmEnFModel::init(arch, rng);
  model.metadata_json = "{\"epoch\":3,\"val\":1.25}";

  const std::string p1 = "/tmp/amortda_ckpt1.bin", p2 = "/tmp/amortda_ckpt2.bin";
  model.save(p1);
  AmEnFModel loaded = AmEnFModel::load(p1);
  loaded.save(p2);

  std::ifstream f1(p1, std::ios::binary), f2(p2, std::ios::binary);
  std::string b1((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
  std::string b2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
  CHECK(b1 == b2);
  CHECK(!b1.empty());
  for (size_t l = 0; l < model.kernels.size(); ++l)
    for (int i = 0; i < model.kernels[l].size(); ++i)
      CHECK(loaded.kernels[l][i] == model.kernels[l][i]);
  std::remove(p1.c_str());
  std::remove(p2.c_str());
}

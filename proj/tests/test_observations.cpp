#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <fstream>

#include "amortda/observations.hpp"

using namespace amortda;

TEST_CASE("rotating mask schedule") {
  auto m0 = rotating_mask(0, 8, 4);
  auto m1 = rotating_mask(1, 8, 4);
  CHECK(m0 == std::vector<uint8_t>{1, 0, 0, 0, 1, 0, 0, 0});
  CHECK(m1 == std::vector<uint8_t>{0, 1, 0, 0, 0, 1, 0, 0});
  for (int k = 0; k < 10; ++k) {
    auto m = rotating_mask(k, 8, 1);
    for (uint8_t b : m) CHECK(b == 1);
  }
  // every mask observes ceil(D/s) or floor(D/s) coordinates
  for (int k = 0; k < 7; ++k) {
    auto m = rotating_mask(k, 10, 3);
    int n = 0;
    for (uint8_t b : m) n += b;
    CHECK((n == 3 || n == 4));
  }
  CHECK_THROWS_AS(rotating_mask(0, 8, 9), Error);
  CHECK_THROWS_AS(rotating_mask(0, 8, 0), Error);
}

TEST_CASE("observe: exact at sigma=0, unbiased with correct spread at sigma=1") {
  Rng rng(2);
  std::vector<double> x = {1.0, -2.0, 0.5, 3.0};
  ObservationOperator op;
  op.sigma = 0.0;
  auto rec = observe(x, op, 0, rng);
  CHECK(rec.values == x);

  op.sigma = 1.0;
  const int draws = 100000;
  std::vector<double> sum(4, 0.0), sumsq(4, 0.0);
  for (int i = 0; i < draws; ++i) {
    auto r = observe(x, op, i, rng);
    for (int j = 0; j < 4; ++j) {
      sum[(size_t)j] += r.values[(size_t)j];
      sumsq[(size_t)j] += r.values[(size_t)j] * r.values[(size_t)j];
    }
  }
  for (int j = 0; j < 4; ++j) {
    const double mean = sum[(size_t)j] / draws;
    const double var = sumsq[(size_t)j] / draws - mean * mean;
    CHECK(std::abs(mean - x[(size_t)j]) < 3.0 / std::sqrt((double)draws));
    CHECK(std::abs(std::sqrt(var) - 1.0) < 0.02);
  }

  ObservationOperator bad;
  bad.sigma = -1.0;
  CHECK_THROWS_AS(observe(x, bad, 0, rng), Error);

  ObservationRecord empty;
  empty.mask.assign(4, 0);
  empty.sigma = 1.0;
  CHECK_THROWS_AS(empty.validate(), Error);
}

TEST_CASE("observation noise is uncorrelated across cycles") {
  Rng rng(8);
  std::vector<double> x = {0.0};
  ObservationOperator op;
  op.sigma = 1.0;
  op.kind = ObservationOperator::Kind::Full;
  const int n = 10000;
  std::vector<double> eta;
  eta.reserve((size_t)n);
  std::vector<double> xx = {0.0, 0.0, 0.0, 0.0};
  for (int k = 0; k < n; ++k) eta.push_back(observe(xx, op, k, rng).values[0]);
  for (int lag = 1; lag <= 3; ++lag) {
    double c = 0.0, v = 0.0;
    for (int k = 0; k + lag < n; ++k) c += eta[(size_t)k] * eta[(size_t)(k + lag)];
    for (int k = 0; k < n; ++k) v += eta[(size_t)k] * eta[(size_t)k];
    CHECK(std::abs(c / v) < 0.02);
  }
}

TEST_CASE("generate_dataset: single-record sequence and determinism") {
  SystemSpec spec = SystemSpec::l96(8, 8.0);
  ObservationOperator op;
  op.sigma = 0.5;
  auto one = generate_dataset(spec, op, 1, 0, 50, 7, "train", true);
  REQUIRE(one.n_sequences() == 1);
  CHECK(one.sequences[0].observations.size() == 1);

  auto a = generate_dataset(spec, op, 3, 5, 50, 7, "train", true);
  auto b = generate_dataset(spec, op, 3, 5, 50, 7, "train", true);
  for (int i = 0; i < 3; ++i) {
    for (size_t k = 0; k < a.sequences[(size_t)i].observations.size(); ++k) {
      CHECK(a.sequences[(size_t)i].observations[k].values ==
            b.sequences[(size_t)i].observations[k].values);
      CHECK(a.sequences[(size_t)i].truth[k] == b.sequences[(size_t)i].truth[k]);
    }
  }
}

TEST_CASE("dataset sequences live on the attractor (long-run L96 climatology)") {
  SystemSpec spec = SystemSpec::l96(40, 8.0);

  // independent oracle: one long free run
  Integrator integ(spec);
  Rng rng(3);
  std::vector<double> x = attractor_initial_state(spec, rng);
  integ.steps(x, 2000);
  double osum = 0.0, osq = 0.0;
  long on = 0;
  for (int i = 0; i < 20000; ++i) {
    integ.steps(x, 5);
    for (double v : x) {
      osum += v;
      osq += v * v;
      ++on;
    }
  }
  const double omean = osum / on;
  const double ostd = std::sqrt(osq / on - omean * omean);
  MESSAGE("free-run climatology mean ", omean, " std ", ostd);
  CHECK(std::abs(omean - 2.3) < 0.23);
  CHECK(std::abs(ostd - 3.6) < 0.36);

  ObservationOperator op;
  op.sigma = 1.0;
  auto ds = generate_dataset(spec, op, 40, 40, 1000, 99, "train", true);
  double sum = 0.0, sq = 0.0;
  long n = 0;
  for (const auto& sqc : ds.sequences)
    for (const auto& t : sqc.truth)
      for (double v : t) {
        sum += v;
        sq += v * v;
        ++n;
      }
  const double mean = sum / n;
  const double sd = std::sqrt(sq / n - mean * mean);
  CHECK(std::abs(mean - omean) < 0.1 * std::abs(omean) + 0.15);
  CHECK(std::abs(sd - ostd) < 0.1 * ostd);
}

TEST_CASE("dataset file round-trips bit-exactly") {
  SystemSpec spec = SystemSpec::vl20(6);
  ObservationOperator op;
  op.kind = ObservationOperator::Kind::RotatingSubset;
  op.stride = 4;
  op.sigma = 1.5;
  auto ds = generate_dataset(spec, op, 2, 6, 100, 42, "test", true);

  const std::string p1 = "/tmp/amortda_test_ds1.bin", p2 = "/tmp/amortda_test_ds2.bin";
  ds.save(p1);
  auto loaded = TrajectoryDataset::load(p1);
  loaded.save(p2);

  std::ifstream f1(p1, std::ios::binary), f2(p2, std::ios::binary);
  std::string b1((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
  std::string b2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
  CHECK(b1 == b2);
  CHECK(!b1.empty());

  CHECK(loaded.system.dimension == 12);
  CHECK(loaded.op.stride == 4);
  CHECK(loaded.sequences[1].observations[3].values == ds.sequences[1].observations[3].values);
  CHECK(loaded.sequences[0].truth[2] == ds.sequences[0].truth[2]);
  std::remove(p1.c_str());
  std::remove(p2.c_str());
}

TEST_CASE("corrupt containers are rejected") {
  const std::string p = "/tmp/amortda_test_bad.bin";
  {
    std::ofstream f(p, std::ios::binary);
    f << "NOTMAGIC garbage";
  }
  CHECK_THROWS_AS(TrajectoryDataset::load(p), Error);
  std::remove(p.c_str());
  CHECK_THROWS_AS(TrajectoryDataset::load("/tmp/amortda_does_not_exist.bin"), Error);
}

TEST_CASE("truth access is fenced off from the observation view") {
  SystemSpec spec = SystemSpec::l96(8, 8.0);
  ObservationOperator op;
  auto ds = generate_dataset(spec, op, 1, 3, 20, 5, "train", /*with_truth=*/false);
  CHECK_THROWS_AS(ds.truth_for_diagnostics(0), Error);
  auto view = ds.view(0);  // compiles and works without truth
  CHECK(view.cycles() == 4);
}

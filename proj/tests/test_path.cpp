#include <doctest.h>

#include <cmath>
#include <limits>
#include <sstream>

#include "tvo/errors.hpp"
#include "tvo/estimators.hpp"
#include "tvo/models.hpp"
#include "tvo/objectives.hpp"
#include "tvo/oracles.hpp"
#include "tvo/path.hpp"

using namespace tvo;

TEST_CASE("potential derivative") {
  CHECK(potential_derivative(-10.0, -10.0) == 0.0);
  CHECK(potential_derivative(-8.0, -10.0) == 2.0);
  CHECK_THROWS_AS(potential_derivative(-1.0, -std::numeric_limits<double>::infinity()), DomainError);
}

TEST_CASE("potential derivative matches the enumeration oracle per state") {
  ToyBernoulli m(3, 4);
  Rng rng(1);
  const ParamVector p = m.random_params(rng, 1.0);
  const auto x = m.sample_joint(p, rng).x;
  const EnumerationResult e = enumerate(m, p, x);
  const LatentBatch states = enumerate_binary_latents(3);
  for (std::size_t j = 0; j < states.count; ++j) {
    const double lj = m.log_joint(p, x, states.row(j));
    const double lq = m.log_q(p, x, states.row(j));
    CHECK(potential_derivative(lj, lq) == doctest::Approx(e.log_joint()[j] - e.log_q()[j]).epsilon(1e-12));
  }
}

TEST_CASE("log unnormalized path density") {
  CHECK(log_unnormalized_path_density(-8, -10, 0) == -10);
  CHECK(log_unnormalized_path_density(-8, -10, 1) == -8);
  CHECK(log_unnormalized_path_density(-8, -10, 0.25) == -9.5);
  CHECK_THROWS_AS(log_unnormalized_path_density(-8, -10, 1.5), DomainError);
  CHECK_THROWS_AS(log_unnormalized_path_density(-8, -10, -0.1), DomainError);
}

TEST_CASE("make_schedule") {
  const auto one = make_schedule(1, 0.5, Spacing::equal);
  CHECK(std::vector<double>(one.betas().begin(), one.betas().end()) == std::vector<double>{0, 1});
  const auto four = make_schedule(4, 0.0, Spacing::equal);
  CHECK(std::vector<double>(four.betas().begin(), four.betas().end()) == std::vector<double>{0, 0.25, 0.5, 0.75, 1});
  for (std::size_t k = 1; k <= 4; ++k) CHECK(four.width(k) == 0.25);
  const auto lg = make_schedule(3, 0.01, Spacing::log);
  CHECK(lg.K() == 3);
  CHECK(lg.beta(0) == 0.0);
  CHECK(lg.beta(1) == doctest::Approx(0.01).epsilon(1e-14));
  CHECK(lg.beta(2) == doctest::Approx(0.1).epsilon(1e-14));
  CHECK(lg.beta(3) == 1.0);
  const auto lg5 = make_schedule(5, 0.003, Spacing::log);
  for (std::size_t k = 1; k + 1 < lg5.K(); ++k) {
    CHECK(lg5.beta(k + 1) / lg5.beta(k) == doctest::Approx(lg5.beta(k + 2) / lg5.beta(k + 1)).epsilon(1e-12));
  }
  CHECK_THROWS_AS(make_schedule(0, 0.1, Spacing::equal), DomainError);
  CHECK_THROWS_AS(make_schedule(3, 0.0, Spacing::log), DomainError);
  CHECK_THROWS_AS(make_schedule(3, 1.0, Spacing::log), DomainError);
}

TEST_CASE("schedule validation") {
  CHECK_THROWS_AS(PartitionSchedule({0.0}), DomainError);
  CHECK_THROWS_AS(PartitionSchedule({0.1, 1.0}), DomainError);
  CHECK_THROWS_AS(PartitionSchedule({0.0, 0.5, 0.5, 1.0}), DomainError);
  CHECK_THROWS_AS(PartitionSchedule({0.0, 0.9}), DomainError);
  double total = 0.0;
  const PartitionSchedule s({0.0, 0.1, 0.4, 1.0});
  for (std::size_t k = 1; k <= s.K(); ++k) total += s.width(k);
  CHECK(total == doctest::Approx(1.0).epsilon(1e-15));
}

TEST_CASE("integrand curve: beta = 0 point is the plain Monte Carlo ELBO") {
  ToyBernoulli m(4, 6);
  Rng rng(2);
  const ParamVector p = m.random_params(rng, 1.0);
  const auto x = m.sample_joint(p, rng).x;
  const double betas[] = {0.0, 0.3, 1.0};
  const WeightTable table = build_weight_table(m, p, x, 50, betas, 11);
  const IntegrandCurve c = integrand_curve(table);
  double mean = 0.0;
  for (std::size_t s = 0; s < 50; ++s) mean += table.log_w()[s];
  CHECK(c.values[0] == doctest::Approx(mean / 50).epsilon(1e-14));
  const IntegrandCurve c2 = integrand_curve(m, p, x, betas, 50, 11);
  CHECK(c2.values == c.values);
}

TEST_CASE("integrand curve is non-decreasing under exact expectations") {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    ToyBernoulli m(4, 5);
    Rng rng(seed);
    const ParamVector p = m.random_params(rng, 1.5);
    const auto x = m.sample_joint(p, rng).x;
    std::vector<double> grid;
    for (int i = 0; i <= 40; ++i) grid.push_back(i / 40.0);
    const IntegrandCurve c = integrand_curve(build_exact_table(m, p, x, grid));
    for (std::size_t i = 1; i < c.values.size(); ++i) CHECK(c.values[i] >= c.values[i - 1]);
    for (double se : c.std_errors) CHECK(se == 0.0);
  }
}

TEST_CASE("integrand curve matches closed-form g on the conjugate Gaussian") {
  ConjugateGaussian m(1.0, 1.0);
  const ParamVector p = m.make_params(0.3, 0.2, -0.1, std::log(0.9));
  const double x[] = {0.7};
  const double betas[] = {0.0, 0.25, 0.5, 0.75, 1.0};
  const IntegrandCurve c = integrand_curve(m, p, x, betas, 10000, 5);
  for (std::size_t i = 0; i < 5; ++i) {
    CHECK(std::abs(c.values[i] - analytic_g(m, p, x[0], betas[i])) < 3.0 * c.std_errors[i]);
  }
}

TEST_CASE("max curvature diagnostic") {
  IntegrandCurve c;
  c.betas = {0.0, 0.25, 0.5, 0.75, 1.0};
  c.values = {0.0, 0.0, 1.0, 1.0, 1.0};
  const double b = max_curvature_beta(c);
  CHECK((b == 0.25 || b == 0.5));
  c.values = {0.0, 0.1, 0.2, 0.3, 2.0};
  CHECK(max_curvature_beta(c) == 0.75);
  IntegrandCurve tiny;
  tiny.betas = {0.0, 1.0};
  tiny.values = {0.0, 1.0};
  CHECK_THROWS_AS(max_curvature_beta(tiny), DomainError);
}

TEST_CASE("curve serializes as beta, g_estimate, std_error") {
  IntegrandCurve c{{0.0, 1.0}, {-2.5, -1.0}, {0.1, 0.2}};
  std::ostringstream csv;
  write_curve(csv, c, OutputFormat::csv);
  CHECK(csv.str() == "beta,g_estimate,std_error\n0,-2.5,0.1\n1,-1,0.2\n");
  std::ostringstream jl;
  write_curve(jl, c, OutputFormat::jsonl);
  CHECK(jl.str() == "{\"beta\":0.0,\"g_estimate\":-2.5,\"std_error\":0.1}\n{\"beta\":1.0,\"g_estimate\":-1.0,\"std_error\":0.2}\n");
}

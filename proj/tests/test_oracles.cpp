#include <doctest.h>

#include <cmath>
#include <vector>

#include "tvo/errors.hpp"
#include "tvo/estimators.hpp"
#include "tvo/models.hpp"
#include "tvo/oracles.hpp"
#include "tvo/rng.hpp"

using namespace tvo;

namespace {

struct ToyCase {
  ToyBernoulli model;
  ParamVector params;
  std::vector<double> x;
};

ToyCase toy_case(std::uint64_t seed, std::size_t M = 4, std::size_t Dx = 6, double scale = 1.0) {
  ToyBernoulli m(M, Dx);
  Rng rng(seed);
  ParamVector p = m.random_params(rng, scale);
  std::vector<double> x = m.sample_joint(p, rng).x;
  return {std::move(m), std::move(p), std::move(x)};
}

}  // namespace

TEST_CASE("enumeration of the uniform model") {
  ToyBernoulli m(2, 1);
  const ParamVector p(m.layout());
  const double x[] = {0.0};
  const EnumerationResult e = enumerate(m, p, x);
  CHECK(e.states() == 4);
  CHECK(e.log_evidence() == doctest::Approx(std::log(0.5)).epsilon(1e-15));
  for (double post : e.posterior()) CHECK(post == doctest::Approx(0.25).epsilon(1e-15));
}

TEST_CASE("enumeration refuses large latent spaces") {
  CHECK_THROWS(ToyBernoulli(13, 2));
}

TEST_CASE("posterior-matched proposal gives a constant integrand") {
  ToyCase tc = toy_case(1);
  tc.model.match_posterior_by_decoupling(tc.params);
  const EnumerationResult e = enumerate(tc.model, tc.params, tc.x);
  CHECK(e.g(0.0) == doctest::Approx(e.log_evidence()).epsilon(1e-13));
  CHECK(e.g(0.5) == doctest::Approx(e.g(0.0)).epsilon(1e-13));
  CHECK(e.g(1.0) == doctest::Approx(e.g(0.0)).epsilon(1e-13));
  CHECK(e.total_variation() < 1e-12);
  CHECK(ti_identity_check([&](double b) { return e.g(b); }, e.log_evidence(), 2) < 1e-12);
  const VarianceCheck v = variance_identity_check(e, 0.5, 1e-5);
  CHECK(std::abs(v.fd_dg) <= 1e-10);
  CHECK(std::abs(v.exact_var) <= 1e-10);
}

TEST_CASE("endpoints match direct definitional sums") {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const ToyCase tc = toy_case(10 + seed, 2 + seed % 5, 3 + seed % 4, 1.5);
    const EnumerationResult e = enumerate(tc.model, tc.params, tc.x);
    CHECK(std::abs(e.elbo() - direct_elbo(tc.model, tc.params, tc.x)) < 1e-12);
    CHECK(std::abs(e.eubo() - direct_eubo(tc.model, tc.params, tc.x)) < 1e-12);
  }
}

TEST_CASE("integrating the exact integrand recovers the evidence") {
  const ToyCase tc = toy_case(2);
  const EnumerationResult e = enumerate(tc.model, tc.params, tc.x);
  CHECK(ti_identity_check([&](double b) { return e.g(b); }, e.log_evidence(), 10000) < 1e-6);
  ConjugateGaussian m(1.2, 0.6);
  const ParamVector p = m.make_params(-0.3, 0.1, 0.4, std::log(1.3));
  CHECK(ti_identity_check([&](double b) { return analytic_g(m, p, 0.8, b); }, analytic_log_evidence(m, p, 0.8),
                          10000) < 1e-6);
}

TEST_CASE("coarse grids leave a visible residual") {
  const ToyCase tc = toy_case(3, 4, 8, 3.0);
  const EnumerationResult e = enumerate(tc.model, tc.params, tc.x);
  CHECK(ti_identity_check([&](double b) { return e.g(b); }, e.log_evidence(), 2) > 1e-3);
}

TEST_CASE("trapezoid rule") {
  CHECK(trapezoid([](double) { return 2.5; }, 2) == 2.5);
  CHECK(trapezoid([](double b) { return b; }, 3) == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(std::abs(trapezoid([](double b) { return b * b; }, 10001) - 1.0 / 3.0) < 1e-8);
  CHECK_THROWS_AS(trapezoid([](double b) { return b; }, 1), DomainError);
}

TEST_CASE("variance identity") {
  const ToyCase tc = toy_case(4);
  const EnumerationResult e = enumerate(tc.model, tc.params, tc.x);
  const VarianceCheck v = variance_identity_check(e, 0.5, 1e-5);
  CHECK(std::abs(v.fd_dg - v.exact_var) <= 1e-6 * std::max(1.0, v.exact_var));
  ConjugateGaussian m(1.0, 0.7);
  const ParamVector p = m.make_params(0.2, 0.1, -0.3, std::log(0.9));
  const VarianceCheck g = variance_identity_check([&](double b) { return analytic_g(m, p, 1.4, b); },
                                                  [&](double b) { return analytic::integrand_variance(m, p, 1.4, b); },
                                                  0.25, 1e-5);
  CHECK(std::abs(g.fd_dg - g.exact_var) <= 1e-6 * std::max(1.0, g.exact_var));
}

TEST_CASE("quadrature agrees with the closed forms") {
  ConjugateGaussian m(1.4, 0.9);
  const ParamVector p = m.make_params(0.5, -0.2, 0.3, std::log(0.6));
  const double x = -0.7;
  CHECK(std::abs(quadrature_log_evidence(m, p, x) - analytic_log_evidence(m, p, x)) < 1e-9);
  for (double b : {0.0, 0.3, 0.7, 1.0}) {
    CHECK(std::abs(quadrature_g(m, p, x, b) - analytic_g(m, p, x, b)) < 1e-9);
    CHECK(std::abs(quadrature_variance(m, p, x, b) - analytic::integrand_variance(m, p, x, b)) < 1e-9);
  }
}

TEST_CASE("the integrand rises by the sum of the two divergences") {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const ToyCase tc = toy_case(40 + seed);
    const EnumerationResult e = enumerate(tc.model, tc.params, tc.x);
    double kl_qp = 0.0;
    double kl_pq = 0.0;
    for (std::size_t j = 0; j < e.states(); ++j) {
      const double log_post = e.log_joint()[j] - e.log_evidence();
      kl_qp += std::exp(e.log_q()[j]) * (e.log_q()[j] - log_post);
      kl_pq += std::exp(log_post) * (log_post - e.log_q()[j]);
    }
    CHECK(e.g(1.0) - e.g(0.0) == doctest::Approx(kl_qp + kl_pq).epsilon(1e-10));
  }
}

TEST_CASE("log normalizer gradient equals the expected tempered score") {
  const ToyCase tc = toy_case(5, 3, 5);
  for (double beta : {0.0, 0.3, 1.0}) {
    const auto grad = log_normalizer_gradient(tc.model, tc.params, tc.x, beta);
    const auto fd = finite_difference_gradient(
        [&](const ParamVector& v) { return enumerate(tc.model, v, tc.x).log_normalizer(beta); }, tc.params, 1e-5);
    for (std::size_t d = 0; d < fd.size(); ++d) CHECK(std::abs(grad[d] - fd[d]) < 1e-8);
  }
}

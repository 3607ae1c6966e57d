#include <doctest.h>

#include <cmath>
#include <vector>

#include "tvo/errors.hpp"
#include "tvo/estimators.hpp"
#include "tvo/models.hpp"
#include "tvo/objectives.hpp"
#include "tvo/oracles.hpp"
#include "tvo/rng.hpp"

using namespace tvo;

namespace {

struct ToyCase {
  ToyBernoulli model;
  ParamVector params;
  std::vector<double> x;
};

ToyCase toy_case(std::uint64_t seed, std::size_t M = 3, std::size_t Dx = 5, double scale = 1.0) {
  ToyBernoulli m(M, Dx);
  Rng rng(seed);
  ParamVector p = m.random_params(rng, scale);
  std::vector<double> x = m.sample_joint(p, rng).x;
  return {std::move(m), std::move(p), std::move(x)};
}

// Gradient of the analytic ELBO by central differences.
std::vector<double> analytic_elbo_gradient(const ConjugateGaussian& m, const ParamVector& p, double x) {
  return finite_difference_gradient([&](const ParamVector& v) { return analytic::elbo(m, v, x); }, p, 1e-6);
}

struct Moments {
  std::vector<double> mean;
  std::vector<double> se;
  std::vector<double> var;
};

Moments moments_of(const std::vector<std::vector<double>>& estimates) {
  const CoordinateMoments cm = coordinate_moments(estimates);
  Moments out{cm.mean, {}, {}};
  for (double s : cm.std_dev) {
    out.se.push_back(s / std::sqrt(static_cast<double>(estimates.size())));
    out.var.push_back(s * s);
  }
  return out;
}

}  // namespace

TEST_CASE("weight columns") {
  const double log_w[] = {0.0, std::log(3.0)};
  const WeightTable t = WeightTable::from_log_weights(log_w, {0.0, 0.5, 1.0});
  CHECK(t.weights(0)[0] == 0.5);
  CHECK(t.weights(0)[1] == 0.5);
  CHECK(t.weights(1)[0] == doctest::Approx(1.0 / (1.0 + std::sqrt(3.0))).epsilon(1e-14));
  CHECK(t.weights(1)[1] == doctest::Approx(std::sqrt(3.0) / (1.0 + std::sqrt(3.0))).epsilon(1e-14));
  CHECK(t.weights(2)[0] == doctest::Approx(0.25).epsilon(1e-14));
  CHECK(t.weights(2)[1] == doctest::Approx(0.75).epsilon(1e-14));
}

TEST_CASE("uniform beta = 0 column for any log weights") {
  Rng rng(4);
  std::vector<double> log_w(7);
  for (double& v : log_w) v = 30.0 * rng.normal();
  const WeightTable t = WeightTable::from_log_weights(log_w, {0.0, 1.0});
  for (double w : t.weights(0)) CHECK(w == doctest::Approx(1.0 / 7).epsilon(1e-15));
  CHECK(t.ess(0) == doctest::Approx(7.0).epsilon(1e-12));
}

TEST_CASE("weight columns are invariant to a constant shift of the log weights") {
  Rng rng(5);
  std::vector<double> log_w(20);
  for (double& v : log_w) v = 3.0 * rng.normal();
  std::vector<double> shifted = log_w;
  for (double& v : shifted) v += 123.4;
  const std::vector<double> betas = {0.0, 0.1, 0.7, 1.0};
  const WeightTable a = WeightTable::from_log_weights(log_w, betas);
  const WeightTable b = WeightTable::from_log_weights(shifted, betas);
  for (std::size_t k = 0; k < betas.size(); ++k) {
    for (std::size_t s = 0; s < 20; ++s) CHECK(std::abs(a.weights(k)[s] - b.weights(k)[s]) <= 1e-12);
  }
}

TEST_CASE("degenerate support is rejected") {
  const double inf = std::numeric_limits<double>::infinity();
  const double log_w[] = {-inf, -inf};
  CHECK_THROWS_AS(WeightTable::from_log_weights(log_w, {0.0, 1.0}), NumericalError);
}

TEST_CASE("expectation basics") {
  Rng rng(6);
  std::vector<double> log_w(9);
  for (double& v : log_w) v = rng.normal();
  const WeightTable t = WeightTable::from_log_weights(log_w, {0.0, 0.4, 1.0});
  const std::vector<double> c(9, 2.5);
  for (std::size_t k = 0; k < 3; ++k) CHECK(expectation(t, k, c) == doctest::Approx(2.5).epsilon(1e-14));
  std::vector<double> f(9);
  double mean = 0.0;
  for (double& v : f) {
    v = rng.normal();
    mean += v / 9;
  }
  CHECK(expectation(t, 0, f) == doctest::Approx(mean).epsilon(1e-13));
  const std::vector<double> short_f(8, 0.0);
  CHECK_THROWS_AS(expectation(t, 0, short_f), StructuralError);
}

TEST_CASE("sampled expectation converges to the enumerated value") {
  const ToyCase tc = toy_case(7, 4, 6);
  const EnumerationResult e = enumerate(tc.model, tc.params, tc.x);
  const std::vector<double> betas = {0.0, 0.3, 0.8, 1.0};
  const WeightTable t = build_weight_table(tc.model, tc.params, tc.x, 10000, betas, 17);
  const std::vector<double> f = SampleFunction::instantaneous_elbo().values(t);
  for (std::size_t k = 0; k < betas.size(); ++k) {
    const double est = expectation(t, k, f);
    const double se = expectation_std_error(t, k, f);
    CHECK(std::abs(est - e.g(betas[k])) < 3.0 * se);
  }
}

TEST_CASE("identical seed gives an identical table") {
  const ToyCase tc = toy_case(8);
  const double betas[] = {0.0, 0.5, 1.0};
  const WeightTable a = build_weight_table(tc.model, tc.params, tc.x, 25, betas, 99);
  const WeightTable b = build_weight_table(tc.model, tc.params, tc.x, 25, betas, 99);
  for (std::size_t k = 0; k < 3; ++k) {
    for (std::size_t s = 0; s < 25; ++s) CHECK(a.weights(k)[s] == b.weights(k)[s]);
  }
}

TEST_CASE("covariance gradient of a constant is zero") {
  const ToyCase tc = toy_case(9);
  const double betas[] = {0.0, 0.5, 1.0};
  const WeightTable t = build_weight_table(tc.model, tc.params, tc.x, 30, betas, 3);
  for (std::size_t k = 0; k < 3; ++k) {
    const GradientEstimate g = covariance_gradient(tc.model, tc.params, tc.x, SampleFunction::constant(4.0), t, k);
    for (double v : g.vector) CHECK(std::abs(v) < 1e-12);
  }
}

TEST_CASE("covariance gradient with exact expectations equals the derivative of E_pi[f]") {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const ToyCase tc = toy_case(100 + seed);
    for (double beta : {0.0, 0.4, 1.0}) {
      const double betas[] = {beta};
      const WeightTable t = build_exact_table(tc.model, tc.params, tc.x, betas);
      const GradientEstimate g =
          covariance_gradient(tc.model, tc.params, tc.x, SampleFunction::instantaneous_elbo(), t, 0);
      const auto fd = finite_difference_gradient(
          [&](const ParamVector& v) { return enumerate(tc.model, v, tc.x).g(beta); }, tc.params, 1e-5);
      double norm = 0.0;
      for (double v : fd) norm = std::max(norm, std::abs(v));
      for (std::size_t d = 0; d < fd.size(); ++d) CHECK(std::abs(g.vector[d] - fd[d]) <= 1e-6 * std::max(1.0, norm));
    }
  }
}

TEST_CASE("fused covariance gradient agrees with the per-sample assembly") {
  const ToyCase tc = toy_case(11);
  const double betas[] = {0.0, 0.3, 1.0};
  const WeightTable t = build_weight_table(tc.model, tc.params, tc.x, 40, betas, 5);
  for (std::size_t k = 0; k < 3; ++k) {
    const auto a = covariance_gradient(tc.model, tc.params, tc.x, SampleFunction::instantaneous_elbo(), t, k);
    const auto b = covariance_gradient_per_sample(tc.model, tc.params, tc.x, SampleFunction::instantaneous_elbo(), t, k);
    for (std::size_t d = 0; d < a.vector.size(); ++d) CHECK(std::abs(a.vector[d] - b.vector[d]) < 1e-9);
  }
}

TEST_CASE("covariance ELBO gradient on the conjugate Gaussian is unbiased") {
  ConjugateGaussian m(1.0, 1.0);
  const ParamVector p = m.make_params(0.2, 0.3, -0.2, std::log(0.8));
  const double x[] = {0.9};
  const auto exact = analytic_elbo_gradient(m, p, x[0]);
  const double betas[] = {0.0};
  std::vector<std::vector<double>> est;
  for (std::uint64_t r = 0; r < 100; ++r) {
    const WeightTable t = build_weight_table(m, p, x, 1000, betas, derive_seed(21, {r}));
    est.push_back(covariance_gradient(m, p, x, SampleFunction::instantaneous_elbo(), t, 0).vector);
  }
  const Moments mo = moments_of(est);
  for (std::size_t d = 0; d < exact.size(); ++d) CHECK(std::abs(mo.mean[d] - exact[d]) < 3.0 * mo.se[d]);
}

TEST_CASE("plain REINFORCE is only defined at beta = 0") {
  const ToyCase tc = toy_case(12);
  const double betas[] = {0.0, 0.5};
  const WeightTable t = build_weight_table(tc.model, tc.params, tc.x, 10, betas, 1);
  CHECK_NOTHROW(reinforce_gradient(tc.model, tc.params, tc.x, SampleFunction::instantaneous_elbo(), t, 0));
  CHECK_THROWS_AS(reinforce_gradient(tc.model, tc.params, tc.x, SampleFunction::instantaneous_elbo(), t, 1),
                  UnsupportedError);
}

TEST_CASE("score-function estimators on the conjugate Gaussian ELBO") {
  ConjugateGaussian m(1.0, 1.0);
  const ParamVector p = m.make_params(0.2, 0.3, -0.2, std::log(0.8));
  const double x[] = {0.9};
  const auto exact = analytic_elbo_gradient(m, p, x[0]);
  const double betas[] = {0.0};
  const SampleFunction f = SampleFunction::instantaneous_elbo();
  std::vector<std::vector<double>> plain;
  std::vector<std::vector<double>> based;
  for (std::uint64_t r = 0; r < 10000; ++r) {
    const WeightTable t = build_weight_table(m, p, x, 10, betas, derive_seed(31, {r}));
    plain.push_back(reinforce_gradient(m, p, x, f, t, 0).vector);
    const double b = independent_baseline(m, p, x, f, 10, 0.0, derive_seed(32, {r}));
    based.push_back(reinforce_baseline_gradient(m, p, x, f, t, 0, b).vector);
  }
  const Moments mp = moments_of(plain);
  const Moments mb = moments_of(based);
  for (std::size_t d = 0; d < exact.size(); ++d) {
    CHECK(std::abs(mp.mean[d] - exact[d]) < 3.0 * mp.se[d]);
    CHECK(std::abs(mb.mean[d] - exact[d]) < 3.0 * mb.se[d]);
    CHECK(mp.var[d] >= mb.var[d]);
  }
}

TEST_CASE("baseline REINFORCE of a z-constant function has zero mean score term") {
  const ToyCase tc = toy_case(13);
  const double betas[] = {0.0, 0.5};
  const SampleFunction f = SampleFunction::constant(3.0);
  std::vector<std::vector<double>> est;
  for (std::uint64_t r = 0; r < 2000; ++r) {
    const WeightTable t = build_weight_table(tc.model, tc.params, tc.x, 50, betas, derive_seed(41, {r}));
    est.push_back(reinforce_baseline_gradient(tc.model, tc.params, tc.x, f, t, 1, 2.0).vector);
  }
  const Moments mo = moments_of(est);
  for (std::size_t d = 0; d < mo.mean.size(); ++d) CHECK(std::abs(mo.mean[d]) <= 3.0 * mo.se[d] + 1e-12);
}

TEST_CASE("reparameterized gradients") {
  ConjugateGaussian m(1.0, 1.0);
  const ParamVector p = m.make_params(0.2, 0.3, -0.2, std::log(0.8));
  const double x[] = {0.9};
  SUBCASE("location shift") {
    const ReparamObjective mean_z = [](Tape& t, const ReparamNodes& n, std::size_t S) {
      return t.scale(t.sum(n.z), 1.0 / static_cast<double>(S));
    };
    const GradientEstimate g = reparam_gradient(m, p, x, mean_z, 7, 3);
    CHECK(g.vector[2] == doctest::Approx(1.0).epsilon(1e-14));
    CHECK(g.vector[1] == doctest::Approx(x[0]).epsilon(1e-14));
    CHECK(g.vector[0] == 0.0);
  }
  SUBCASE("ELBO matches the analytic gradient") {
    const auto exact = analytic_elbo_gradient(m, p, x[0]);
    std::vector<std::vector<double>> est;
    for (std::uint64_t r = 0; r < 10000; ++r) est.push_back(reparam_gradient(m, p, x, reparam_elbo(), 1, r).vector);
    const Moments mo = moments_of(est);
    for (std::size_t d = 0; d < exact.size(); ++d) CHECK(std::abs(mo.mean[d] - exact[d]) < 3.0 * mo.se[d] + 1e-12);
  }
  SUBCASE("discrete proposals are unsupported") {
    const ToyCase tc = toy_case(14);
    CHECK_THROWS_AS(reparam_gradient(tc.model, tc.params, tc.x, reparam_elbo(), 5, 1), UnsupportedError);
  }
}

TEST_CASE("VAE reparameterized ELBO matches frozen-noise finite differences") {
  GaussianVAE m(VaeConfig{6, 2, 4});
  Rng rng(15);
  ParamVector p = m.init_params(rng);
  for (double& v : p.values()) v += 0.1 * rng.normal();
  const std::vector<double> x = {1, 0, 0, 1, 1, 0};
  const LatentBatch noise = standard_normal_noise(3, 2, 16);
  for (const ReparamObjective& obj : {reparam_elbo(), reparam_iwae()}) {
    const GradientEstimate g = reparam_gradient(m, p, x, obj, noise);
    const auto fd = finite_difference_gradient(
        [&](const ParamVector& v) { return reparam_objective_value(m, v, x, obj, noise); }, p, 1e-6);
    for (std::size_t d = 0; d < fd.size(); ++d) CHECK(std::abs(g.vector[d] - fd[d]) <= 1e-5 * std::max(1.0, std::abs(fd[d])));
  }
}

TEST_CASE("gradient std diagnostic") {
  SUBCASE("deterministic estimator") {
    const ToyCase tc = toy_case(17);
    const double betas[] = {0.5};
    const WeightTable t = build_exact_table(tc.model, tc.params, tc.x, betas);
    const double sd = gradient_std_diagnostic(
        [&](std::uint64_t) {
          auto g = covariance_gradient(tc.model, tc.params, tc.x, SampleFunction::instantaneous_elbo(), t, 0);
          g.kind = EstimatorKind::exact_enumeration;
          return g;
        },
        10, 0);
    CHECK(sd == 0.0);
  }
  SUBCASE("shrinks like one over root S") {
    ConjugateGaussian m(1.0, 1.0);
    const ParamVector p = m.make_params(0.2, 0.3, -0.2, std::log(0.8));
    const double x[] = {0.9};
    auto at = [&](std::size_t S) {
      return gradient_std_diagnostic(
          [&](std::uint64_t seed) { return reparam_gradient(m, p, x, reparam_elbo(), S, seed); }, 200, 51);
    };
    const double ratio = at(10) / at(1000);
    CHECK(ratio >= 7.0);
    CHECK(ratio <= 13.0);
  }
}

TEST_CASE("common random numbers share one table across partition terms") {
  // Without CRN each term draws its own batch; with CRN the estimate is a
  // function of a single batch. Both estimate the same gradient.
  const ToyCase tc = toy_case(18, 3, 5, 1.0);
  ObjectiveSpec spec = ObjectiveSpec::make(ObjectiveKind::tvo_lower, make_schedule(3, 0.1, Spacing::log), 20);
  const auto with_crn = estimator_gradient(EstimatorKind::covariance, spec, tc.model, tc.params, tc.x, 7);
  spec.crn = false;
  const auto without_crn = estimator_gradient(EstimatorKind::covariance, spec, tc.model, tc.params, tc.x, 7);
  CHECK(with_crn.vector != without_crn.vector);

  std::vector<std::vector<double>> a;
  std::vector<std::vector<double>> b;
  for (std::uint64_t r = 0; r < 400; ++r) {
    spec.crn = true;
    a.push_back(estimator_gradient(EstimatorKind::covariance, spec, tc.model, tc.params, tc.x, r).vector);
    spec.crn = false;
    b.push_back(estimator_gradient(EstimatorKind::covariance, spec, tc.model, tc.params, tc.x, r).vector);
  }
  const Moments ma = moments_of(a);
  const Moments mb = moments_of(b);
  for (std::size_t d = 0; d < ma.mean.size(); ++d) {
    CHECK(std::abs(ma.mean[d] - mb.mean[d]) < 4.0 * std::hypot(ma.se[d], mb.se[d]) + 1e-12);
  }
}

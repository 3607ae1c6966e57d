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

double exact_tvo_lower(const EnumerationResult& e, const PartitionSchedule& s) {
  double total = 0.0;
  for (std::size_t k = 1; k <= s.K(); ++k) total += s.width(k) * e.g(s.beta(k - 1));
  return total;
}

double exact_tvo_upper(const EnumerationResult& e, const PartitionSchedule& s) {
  double total = 0.0;
  for (std::size_t k = 1; k <= s.K(); ++k) total += s.width(k) * e.g(s.beta(k));
  return total;
}

WeightTable exact_table(const ToyCase& tc, const PartitionSchedule& s) {
  return build_exact_table(tc.model, tc.params, tc.x, s.betas());
}

}  // namespace

TEST_CASE("single partition reduces to ELBO and EUBO bit for bit") {
  const ToyCase tc = toy_case(1);
  const PartitionSchedule s = make_schedule(1, 0.5, Spacing::equal);
  const WeightTable t = build_weight_table(tc.model, tc.params, tc.x, 50, s, 3);
  CHECK(tvo_lower(t, s) == elbo_estimate(t));
  CHECK(tvo_upper(t, s) == eubo_estimate(t).value);
}

TEST_CASE("posterior-matched proposal makes every bound exact") {
  ToyCase tc = toy_case(2);
  tc.model.match_posterior_by_decoupling(tc.params);
  const double log_px = enumerate(tc.model, tc.params, tc.x).log_evidence();
  for (std::size_t K : {1, 2, 5, 20}) {
    const PartitionSchedule s = make_schedule(K, 0.1, Spacing::log);
    const WeightTable t = exact_table(tc, s);
    CHECK(tvo_lower(t, s) == doctest::Approx(log_px).epsilon(1e-12));
    CHECK(tvo_upper(t, s) == doctest::Approx(log_px).epsilon(1e-12));
  }
  const double zero[] = {0.0, 1.0};
  const WeightTable t = build_exact_table(tc.model, tc.params, tc.x, zero);
  CHECK(elbo_estimate(t) == doctest::Approx(log_px).epsilon(1e-12));
  CHECK(eubo_estimate(t).value == doctest::Approx(log_px).epsilon(1e-12));
}

TEST_CASE("exact bounds sandwich the log evidence and tighten under refinement") {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const ToyCase tc = toy_case(10 + seed, 4, 6, 1.5);
    const EnumerationResult e = enumerate(tc.model, tc.params, tc.x);
    const double log_px = e.log_evidence();
    const PartitionSchedule coarse({0.0, 0.5, 1.0});
    const PartitionSchedule fine({0.0, 0.25, 0.5, 0.75, 1.0});
    const WeightTable tc_coarse = exact_table(tc, coarse);
    const WeightTable tc_fine = exact_table(tc, fine);
    const double lo_c = tvo_lower(tc_coarse, coarse);
    const double lo_f = tvo_lower(tc_fine, fine);
    const double up_c = tvo_upper(tc_coarse, coarse);
    const double up_f = tvo_upper(tc_fine, fine);
    CHECK(e.elbo() <= lo_c + 1e-12);
    CHECK(lo_c <= lo_f + 1e-12);
    CHECK(lo_f <= log_px + 1e-12);
    CHECK(log_px <= up_f + 1e-12);
    CHECK(up_f <= up_c + 1e-12);
    CHECK(up_c <= e.eubo() + 1e-12);
    CHECK(lo_f == doctest::Approx(exact_tvo_lower(e, fine)).epsilon(1e-12));
    CHECK(up_f == doctest::Approx(exact_tvo_upper(e, fine)).epsilon(1e-12));
  }
}

TEST_CASE("schedule and table must share knots") {
  const ToyCase tc = toy_case(3);
  const PartitionSchedule s({0.0, 0.5, 1.0});
  const double other[] = {0.0, 0.3, 1.0};
  const WeightTable t = build_weight_table(tc.model, tc.params, tc.x, 10, other, 1);
  CHECK_THROWS_AS(tvo_lower(t, s), StructuralError);
  CHECK_THROWS_AS(tvo_upper(t, s), StructuralError);
}

TEST_CASE("ELBO estimate") {
  const double log_w[] = {-3.5};
  CHECK(elbo_estimate(WeightTable::from_log_weights(log_w, {0.0, 1.0})) == -3.5);
  ConjugateGaussian m(1.0, 1.0);
  const ParamVector p = m.make_params(0.2, 0.3, -0.2, std::log(0.8));
  const double x[] = {0.9};
  const double betas[] = {0.0};
  const WeightTable t = build_weight_table(m, p, x, 10000, betas, 5);
  const std::vector<double> f = SampleFunction::instantaneous_elbo().values(t);
  CHECK(std::abs(elbo_estimate(t) - analytic::elbo(m, p, x[0])) < 3.0 * expectation_std_error(t, 0, f));
}

TEST_CASE("EUBO estimate") {
  const double flat[] = {-2.0, -2.0, -2.0};
  const EuboEstimate e = eubo_estimate(WeightTable::from_log_weights(flat, {0.0, 1.0}));
  CHECK(e.value == -2.0);
  CHECK_FALSE(e.low_ess);
  const double spiky[] = {0.0, -50.0, -50.0};
  CHECK(eubo_estimate(WeightTable::from_log_weights(spiky, {0.0, 1.0})).low_ess);
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const ToyCase tc = toy_case(20 + seed);
    const double ends[] = {0.0, 1.0};
    const double eubo = eubo_estimate(build_exact_table(tc.model, tc.params, tc.x, ends)).value;
    CHECK(eubo >= enumerate(tc.model, tc.params, tc.x).log_evidence());
  }
}

TEST_CASE("IWAE estimate") {
  const double one[] = {-4.25};
  CHECK(iwae_estimate(one) == -4.25);
  const double same[] = {std::log(0.3), std::log(0.3), std::log(0.3)};
  CHECK(iwae_estimate(same) == doctest::Approx(std::log(0.3)).epsilon(1e-15));
  // Uniform proposal over every state: the average weight is p(x) exactly.
  const ToyCase tc = toy_case(4);
  const EnumerationResult e = enumerate(tc.model, tc.params, tc.x);
  std::vector<double> log_w;
  const double log_uniform = -std::log(static_cast<double>(e.states()));
  for (double lj : e.log_joint()) log_w.push_back(lj - log_uniform);
  CHECK(iwae_estimate(log_w) == doctest::Approx(e.log_evidence()).epsilon(1e-12));
}

TEST_CASE("validation rejects unusable combinations") {
  const ToyBernoulli toy(3, 4);
  const ConjugateGaussian gauss(1.0, 1.0);
  const PartitionSchedule s = make_schedule(2, 0.3, Spacing::log);
  ObjectiveSpec spec = ObjectiveSpec::make(ObjectiveKind::elbo, s, 10);
  CHECK_NOTHROW(spec.validate(toy));
  spec.method = GradientMethod::reparam;
  CHECK_THROWS_AS(spec.validate(toy), ConfigError);
  CHECK_NOTHROW(spec.validate(gauss));
  spec.kind = ObjectiveKind::tvo_lower;
  CHECK_THROWS_AS(spec.validate(gauss), ConfigError);
  spec = ObjectiveSpec::make(ObjectiveKind::tvo_upper, s, 10, OptimizeTarget::theta, DataSource::model_simulated);
  CHECK_THROWS_AS(spec.validate(toy), ConfigError);
  spec = ObjectiveSpec::make(ObjectiveKind::elbo, s, 10);
  spec.method = GradientMethod::exact;
  CHECK_THROWS_AS(spec.validate(gauss), ConfigError);
  spec.S = 0;
  CHECK_THROWS_AS(spec.validate(toy), ConfigError);
  CHECK(ObjectiveSpec::make(ObjectiveKind::eubo, s, 10).direction == Direction::minimize);
  CHECK(ObjectiveSpec::make(ObjectiveKind::tvo_lower, s, 10).direction == Direction::maximize);
}

TEST_CASE("exact TVO gradient matches finite differences of the exact bound") {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const ToyCase tc = toy_case(30 + seed);
    const PartitionSchedule s = make_schedule(2, 0.3, Spacing::log);
    ObjectiveSpec spec = ObjectiveSpec::make(ObjectiveKind::tvo_lower, s, 10);
    spec.method = GradientMethod::exact;
    const TrainingStep step = training_step(spec, tc.model, tc.params, tc.x, 1);
    const EnumerationResult e = enumerate(tc.model, tc.params, tc.x);
    CHECK(step.objective == doctest::Approx(exact_tvo_lower(e, s)).epsilon(1e-12));
    const auto fd = finite_difference_gradient(
        [&](const ParamVector& v) { return exact_tvo_lower(enumerate(tc.model, v, tc.x), s); }, tc.params, 1e-5);
    double norm = 0.0;
    for (double v : fd) norm = std::max(norm, std::abs(v));
    for (std::size_t d = 0; d < fd.size(); ++d) {
      CHECK(std::abs(step.gradient.vector[d] - fd[d]) <= 1e-6 * std::max(1.0, norm));
    }
  }
}

TEST_CASE("optimize target masks the other parameter group") {
  const ToyCase tc = toy_case(5);
  const PartitionSchedule s({0.0, 1.0});
  const auto grad = [&](OptimizeTarget target) {
    return training_gradient(ObjectiveSpec::make(ObjectiveKind::elbo, s, 10, target), tc.model, tc.params, tc.x, 2)
        .vector;
  };
  const auto both = grad(OptimizeTarget::both);
  const auto theta = grad(OptimizeTarget::theta);
  const auto phi = grad(OptimizeTarget::phi);
  for (const Segment& seg : tc.model.layout()->segments()) {
    for (std::size_t i = seg.offset; i < seg.offset + seg.size(); ++i) {
      CHECK(theta[i] == (is_theta_segment(seg) ? both[i] : 0.0));
      CHECK(phi[i] == (is_phi_segment(seg) ? both[i] : 0.0));
    }
  }
}

TEST_CASE("sleep phase never moves the generative model") {
  const ToyCase tc = toy_case(6);
  const ObjectiveSpec spec = ObjectiveSpec::make(ObjectiveKind::tvo_upper, make_schedule(3, 0.1, Spacing::log), 10,
                                                 OptimizeTarget::both, DataSource::model_simulated);
  const auto g = training_gradient(spec, tc.model, tc.params, tc.x, 3).vector;
  bool any_phi = false;
  for (const Segment& seg : tc.model.layout()->segments()) {
    for (std::size_t i = seg.offset; i < seg.offset + seg.size(); ++i) {
      if (is_theta_segment(seg)) CHECK(g[i] == 0.0);
      if (is_phi_segment(seg) && g[i] != 0.0) any_phi = true;
    }
  }
  CHECK(any_phi);
}

TEST_CASE("simulated-data EUBO gradient is the inference compilation gradient") {
  ConjugateGaussian m(1.3, 0.7);
  const ParamVector p = m.make_params(0.4, 0.2, 0.1, std::log(0.9));
  const auto exact = finite_difference_gradient(
      [&](const ParamVector& v) { return analytic::joint_cross_entropy(m, v); }, p, 1e-6);
  const ObjectiveSpec spec = ObjectiveSpec::make(ObjectiveKind::eubo, PartitionSchedule({0.0, 1.0}), 5,
                                                 OptimizeTarget::phi, DataSource::model_simulated);
  const double x[] = {0.0};
  std::vector<std::vector<double>> est;
  for (std::uint64_t r = 0; r < 100000; ++r) est.push_back(training_gradient(spec, m, p, x, r).vector);
  const CoordinateMoments mo = coordinate_moments(est);
  const double n = static_cast<double>(est.size());
  CHECK(mo.mean[0] == 0.0);
  for (std::size_t d = 1; d < exact.size(); ++d) {
    CHECK(std::abs(mo.mean[d] - exact[d]) < 3.0 * mo.std_dev[d] / std::sqrt(n));
  }
}

TEST_CASE("minibatch step averages per-datum steps with derived seeds") {
  const ToyCase tc = toy_case(7);
  Rng rng(70);
  std::vector<std::vector<double>> batch = {tc.x, tc.model.sample_joint(tc.params, rng).x};
  const ObjectiveSpec spec = ObjectiveSpec::make(ObjectiveKind::tvo_lower, make_schedule(2, 0.3, Spacing::log), 8);
  const TrainingStep avg = training_step(spec, tc.model, tc.params, batch, 11);
  const TrainingStep a = training_step(spec, tc.model, tc.params, batch[0], derive_seed(11, {0}));
  const TrainingStep b = training_step(spec, tc.model, tc.params, batch[1], derive_seed(11, {1}));
  CHECK(avg.objective == doctest::Approx(0.5 * (a.objective + b.objective)).epsilon(1e-14));
  for (std::size_t d = 0; d < a.gradient.vector.size(); ++d) {
    CHECK(avg.gradient.vector[d] ==
          doctest::Approx(0.5 * (a.gradient.vector[d] + b.gradient.vector[d])).epsilon(1e-12).scale(1e-12));
  }
  const TrainingStep threaded = training_step(spec, tc.model, tc.params, batch, 11, 2);
  CHECK(threaded.gradient.vector == avg.gradient.vector);
}

TEST_CASE("score-function estimators are rejected where undefined") {
  const ToyCase tc = toy_case(8);
  ObjectiveSpec spec = ObjectiveSpec::make(ObjectiveKind::tvo_lower, make_schedule(2, 0.3, Spacing::log), 8);
  CHECK_THROWS_AS(estimator_gradient(EstimatorKind::reinforce, spec, tc.model, tc.params, tc.x, 1), UnsupportedError);
  CHECK_NOTHROW(estimator_gradient(EstimatorKind::reinforce_baseline, spec, tc.model, tc.params, tc.x, 1));
  CHECK_THROWS_AS(estimator_gradient(EstimatorKind::reparam, spec, tc.model, tc.params, tc.x, 1), ConfigError);
  spec.kind = ObjectiveKind::elbo;
  spec.schedule = PartitionSchedule({0.0, 1.0});
  CHECK_NOTHROW(estimator_gradient(EstimatorKind::reinforce, spec, tc.model, tc.params, tc.x, 1));
}

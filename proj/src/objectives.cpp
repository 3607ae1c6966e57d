#include "tvo/objectives.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>

#include "tvo/errors.hpp"
#include "tvo/parallel.hpp"
#include "tvo/rng.hpp"

namespace tvo {

ObjectiveKind parse_objective_kind(std::string_view text) {
  if (text == "elbo") return ObjectiveKind::elbo;
  if (text == "eubo") return ObjectiveKind::eubo;
  if (text == "tvo_lower" || text == "tvo") return ObjectiveKind::tvo_lower;
  if (text == "tvo_upper") return ObjectiveKind::tvo_upper;
  if (text == "iwae") return ObjectiveKind::iwae;
  throw ConfigError("unknown objective '" + std::string(text) + "'");
}

OptimizeTarget parse_optimize_target(std::string_view text) {
  if (text == "theta") return OptimizeTarget::theta;
  if (text == "phi") return OptimizeTarget::phi;
  if (text == "both") return OptimizeTarget::both;
  throw ConfigError("unknown optimize target '" + std::string(text) + "' (expected theta, phi or both)");
}

DataSource parse_data_source(std::string_view text) {
  if (text == "real") return DataSource::real;
  if (text == "model_simulated" || text == "simulated") return DataSource::model_simulated;
  throw ConfigError("unknown data source '" + std::string(text) + "' (expected real or model_simulated)");
}

GradientMethod parse_gradient_method(std::string_view text) {
  if (text == "cov" || text == "covariance") return GradientMethod::covariance;
  if (text == "reparam") return GradientMethod::reparam;
  if (text == "exact") return GradientMethod::exact;
  throw ConfigError("unknown gradient method '" + std::string(text) + "' (expected cov, reparam or exact)");
}

std::string_view to_string(ObjectiveKind kind) {
  switch (kind) {
    case ObjectiveKind::elbo: return "elbo";
    case ObjectiveKind::eubo: return "eubo";
    case ObjectiveKind::tvo_lower: return "tvo_lower";
    case ObjectiveKind::tvo_upper: return "tvo_upper";
    case ObjectiveKind::iwae: return "iwae";
  }
  return "unknown";
}

std::string_view to_string(OptimizeTarget target) {
  switch (target) {
    case OptimizeTarget::theta: return "theta";
    case OptimizeTarget::phi: return "phi";
    case OptimizeTarget::both: return "both";
  }
  return "unknown";
}

Direction default_direction(ObjectiveKind kind) {
  return kind == ObjectiveKind::eubo || kind == ObjectiveKind::tvo_upper ? Direction::minimize : Direction::maximize;
}

ObjectiveSpec ObjectiveSpec::make(ObjectiveKind kind, PartitionSchedule schedule, std::size_t S,
                                  OptimizeTarget optimize, DataSource source) {
  ObjectiveSpec spec;
  spec.kind = kind;
  spec.schedule = std::move(schedule);
  spec.S = S;
  spec.optimize = optimize;
  spec.data_source = source;
  spec.direction = default_direction(kind);
  return spec;
}

void ObjectiveSpec::validate(const LatentModel& model) const {
  if (S == 0) throw ConfigError("S must be at least 1");
  if (data_source == DataSource::model_simulated && optimize == OptimizeTarget::theta) {
    throw ConfigError("the theta gradient is zero on model-simulated data; optimize phi instead");
  }
  switch (method) {
    case GradientMethod::reparam:
      if (!model.reparameterizable()) {
        throw ConfigError(model.name() + ": reparameterized gradients need a continuous location-scale q");
      }
      if (kind != ObjectiveKind::elbo && kind != ObjectiveKind::iwae) {
        throw ConfigError("reparameterized gradients are provided for elbo and iwae only");
      }
      if (data_source != DataSource::real) throw ConfigError("reparameterized gradients need real data");
      break;
    case GradientMethod::exact:
      if (model.latent_kind() != LatentKind::discrete || model.latent_dim() > ToyBernoulli::kMaxLatents) {
        throw ConfigError(model.name() + ": exact enumeration needs at most " +
                          std::to_string(ToyBernoulli::kMaxLatents) + " binary latents");
      }
      [[fallthrough]];
    case GradientMethod::covariance:
      if (kind == ObjectiveKind::iwae && optimize != OptimizeTarget::theta) {
        throw ConfigError("score-function iwae gradients are supported for theta only; use reparam or optimize=theta");
      }
      if (kind == ObjectiveKind::iwae && data_source != DataSource::real) {
        throw ConfigError("iwae training needs real data");
      }
      break;
  }
}

namespace {

std::size_t column_of(const WeightTable& table, double beta, const char* what) {
  for (std::size_t k = 0; k < table.columns(); ++k) {
    if (table.beta(k) == beta) return k;
  }
  throw StructuralError(std::string(what) + " needs a beta = " + std::to_string(beta) + " column");
}

void check_knots(const WeightTable& table, const PartitionSchedule& schedule) {
  auto b = schedule.betas();
  auto t = table.betas();
  if (!std::equal(b.begin(), b.end(), t.begin(), t.end())) {
    throw StructuralError("schedule has " + std::to_string(b.size()) + " knots but the table columns (" +
                          std::to_string(t.size()) + ") do not match them");
  }
}

}  // namespace

std::vector<double> integrand_values(const WeightTable& table) {
  const auto f = SampleFunction::instantaneous_elbo().values(table);
  std::vector<double> g(table.columns());
  for (std::size_t k = 0; k < g.size(); ++k) g[k] = expectation(table, k, f);
  return g;
}

double elbo_estimate(const WeightTable& table) {
  const auto f = SampleFunction::instantaneous_elbo().values(table);
  return expectation(table, column_of(table, 0.0, "elbo"), f);
}

EuboEstimate eubo_estimate(const WeightTable& table) {
  const std::size_t k = column_of(table, 1.0, "eubo");
  const auto f = SampleFunction::instantaneous_elbo().values(table);
  EuboEstimate out;
  out.value = expectation(table, k, f);
  out.ess = table.ess(k);
  out.low_ess = !table.is_exact() && out.ess < 2.0;
  return out;
}

double tvo_lower(const WeightTable& table, const PartitionSchedule& schedule) {
  check_knots(table, schedule);
  const auto g = integrand_values(table);
  double total = 0.0;
  for (std::size_t k = 1; k <= schedule.K(); ++k) total += schedule.width(k) * g[k - 1];
  return total;
}

double tvo_upper(const WeightTable& table, const PartitionSchedule& schedule) {
  check_knots(table, schedule);
  const auto g = integrand_values(table);
  double total = 0.0;
  for (std::size_t k = 1; k <= schedule.K(); ++k) total += schedule.width(k) * g[k];
  return total;
}

double iwae_estimate(std::span<const double> log_w) {
  if (log_w.empty()) throw DomainError("iwae needs at least one weight");
  const double m = *std::max_element(log_w.begin(), log_w.end());
  if (m == -std::numeric_limits<double>::infinity()) return m;
  double total = 0.0;
  for (double v : log_w) total += std::exp(v - m);
  return m + std::log(total) - std::log(static_cast<double>(log_w.size()));
}

void mask_gradient(std::span<double> gradient, const ParamLayout& layout, OptimizeTarget target) {
  if (target == OptimizeTarget::both) return;
  for (const Segment& seg : layout.segments()) {
    const bool keep = target == OptimizeTarget::theta ? is_theta_segment(seg) : is_phi_segment(seg);
    if (!keep) std::fill_n(gradient.begin() + static_cast<std::ptrdiff_t>(seg.offset), seg.size(), 0.0);
  }
}

namespace {

struct Term {
  double beta;
  double scale;
};

// The objective as a weighted sum of g(beta) terms. iwae is handled apart.
std::vector<Term> terms_of(const ObjectiveSpec& spec) {
  const auto& sch = spec.schedule;
  std::vector<Term> terms;
  switch (spec.kind) {
    case ObjectiveKind::elbo: terms.push_back({0.0, 1.0}); break;
    case ObjectiveKind::eubo: terms.push_back({1.0, 1.0}); break;
    case ObjectiveKind::tvo_lower:
      for (std::size_t k = 1; k <= sch.K(); ++k) terms.push_back({sch.beta(k - 1), sch.width(k)});
      break;
    case ObjectiveKind::tvo_upper:
      for (std::size_t k = 1; k <= sch.K(); ++k) terms.push_back({sch.beta(k), sch.width(k)});
      break;
    case ObjectiveKind::iwae: terms.push_back({1.0, 1.0}); break;
  }
  return terms;
}

std::vector<double> term_betas(const std::vector<Term>& terms) {
  std::vector<double> betas;
  for (const Term& t : terms) betas.push_back(t.beta);
  std::sort(betas.begin(), betas.end());
  betas.erase(std::unique(betas.begin(), betas.end()), betas.end());
  return betas;
}

void add_into(std::vector<double>& acc, std::span<const double> v) {
  if (acc.empty()) acc.assign(v.size(), 0.0);
  for (std::size_t d = 0; d < v.size(); ++d) acc[d] += v[d];
}

// Value and gradient contribution of the given terms on one table. Terms at
// beta = 1 are skipped when `skip_posterior` is set.
double accumulate_terms(const ObjectiveSpec& spec, const std::vector<Term>& terms, const WeightTable& table,
                        bool skip_posterior, std::vector<double>& gradient) {
  const auto f = SampleFunction::instantaneous_elbo();
  const auto fv = f.values(table);
  SeedCoefficients c(table.samples());
  double value = 0.0;
  bool any = false;
  if (spec.kind == ObjectiveKind::iwae) {
    value = iwae_estimate(table.log_w());
    const auto w = table.weights(column_of(table, 1.0, "iwae"));
    std::copy(w.begin(), w.end(), c.joint.begin());
    any = true;
  } else {
    for (const Term& t : terms) {
      if (skip_posterior && t.beta == 1.0) continue;
      const std::size_t k = column_of(table, t.beta, "objective");
      value += t.scale * expectation(table, k, fv);
      accumulate_covariance(table, k, f, t.scale, c);
      any = true;
    }
  }
  if (any) add_into(gradient, table.evaluation()->gradient(c.joint, c.q).values());
  return value;
}

}  // namespace

TrainingStep training_step(const ObjectiveSpec& spec, const LatentModel& model, const ParamVector& params,
                           std::span<const double> x, std::uint64_t seed) {
  spec.validate(model);
  const std::vector<Term> terms = terms_of(spec);
  std::vector<double> gradient;
  double value = 0.0;

  std::vector<double> x_used(x.begin(), x.end());
  std::vector<double> z_star;
  const bool simulated = spec.data_source == DataSource::model_simulated;
  if (simulated) {
    Rng rng(derive_seed(seed, {0}));
    JointSample js = model.sample_joint(params, rng);
    x_used = std::move(js.x);
    z_star = std::move(js.z);
  }

  EstimatorKind kind = EstimatorKind::covariance;
  if (spec.method == GradientMethod::reparam) {
    kind = EstimatorKind::reparam;
    const ReparamObjective objective = spec.kind == ObjectiveKind::iwae ? reparam_iwae() : reparam_elbo();
    const LatentBatch noise = standard_normal_noise(spec.S, model.latent_dim(), derive_seed(seed, {1}));
    Tape tape;
    const ReparamNodes nodes = model.record_reparameterized(tape, x_used, noise);
    tape.set_output(objective(tape, nodes, spec.S));
    value = tape.forward(params);
    add_into(gradient, tape.backward().values());
  } else if (spec.method == GradientMethod::exact) {
    kind = EstimatorKind::exact_enumeration;
    const WeightTable table = build_exact_table(model, params, x_used, term_betas(terms));
    value = accumulate_terms(spec, terms, table, false, gradient);
  } else {
    // A simulated latent is an exact draw from p(z | x), so the beta = 1 term
    // is estimated from it directly instead of by self-normalized weights.
    const bool posterior_draw = simulated;
    if (spec.crn || terms.size() == 1) {
      std::vector<double> betas = term_betas(terms);
      if (posterior_draw && spec.kind != ObjectiveKind::iwae) std::erase(betas, 1.0);
      if (!betas.empty()) {
        const WeightTable table = build_weight_table(model, params, x_used, spec.S, betas, derive_seed(seed, {1}));
        value += accumulate_terms(spec, terms, table, posterior_draw, gradient);
      }
    } else {
      for (std::size_t t = 0; t < terms.size(); ++t) {
        if (posterior_draw && terms[t].beta == 1.0) continue;
        const double beta[] = {terms[t].beta};
        const WeightTable table = build_weight_table(model, params, x_used, spec.S, beta, derive_seed(seed, {2 + t}));
        value += accumulate_terms(spec, {terms[t]}, table, false, gradient);
      }
    }
    if (posterior_draw) {
      for (const Term& t : terms) {
        if (t.beta != 1.0) continue;
        LatentBatch one(1, z_star.size());
        std::copy(z_star.begin(), z_star.end(), one.values.begin());
        const ModelEvaluation eval(model, params, x_used, one);
        value += t.scale * (eval.log_joint()[0] - eval.log_q()[0]);
        const double jp[] = {t.scale};
        const double jq[] = {-t.scale};
        add_into(gradient, eval.gradient(jp, jq).values());
      }
    }
  }
  if (gradient.empty()) gradient.assign(params.size(), 0.0);

  mask_gradient(gradient, params.layout(), simulated ? OptimizeTarget::phi : spec.optimize);
  for (std::size_t d = 0; d < gradient.size(); ++d) {
    if (!std::isfinite(gradient[d])) throw NumericalError("non-finite training gradient at coordinate " + std::to_string(d));
  }

  TrainingStep out;
  out.objective = value;
  out.gradient.vector = std::move(gradient);
  out.gradient.kind = kind;
  out.gradient.S = spec.S;
  out.gradient.K = spec.schedule.K();
  out.gradient.seed = seed;
  return out;
}

TrainingStep training_step(const ObjectiveSpec& spec, const LatentModel& model, const ParamVector& params,
                           std::span<const std::vector<double>> batch, std::uint64_t seed, std::size_t workers) {
  if (batch.empty()) throw DomainError("training batch is empty");
  std::vector<TrainingStep> steps(batch.size());
  parallel_for(batch.size(), workers, [&](std::size_t i) {
    steps[i] = training_step(spec, model, params, batch[i], derive_seed(seed, {i}));
  });
  TrainingStep out = steps.front();
  const double n = static_cast<double>(batch.size());
  for (std::size_t i = 1; i < steps.size(); ++i) {
    out.objective += steps[i].objective;
    for (std::size_t d = 0; d < out.gradient.vector.size(); ++d) out.gradient.vector[d] += steps[i].gradient.vector[d];
  }
  out.objective /= n;
  for (double& v : out.gradient.vector) v /= n;
  out.gradient.seed = seed;
  return out;
}

GradientEstimate training_gradient(const ObjectiveSpec& spec, const LatentModel& model, const ParamVector& params,
                                   std::span<const double> x, std::uint64_t seed) {
  return training_step(spec, model, params, x, seed).gradient;
}

GradientEstimate estimator_gradient(EstimatorKind kind, const ObjectiveSpec& spec, const LatentModel& model,
                                    const ParamVector& params, std::span<const double> x, std::uint64_t seed) {
  if (spec.data_source != DataSource::real) throw ConfigError("estimator comparison needs real data");
  ObjectiveSpec s = spec;
  switch (kind) {
    case EstimatorKind::covariance: s.method = GradientMethod::covariance; return training_gradient(s, model, params, x, seed);
    case EstimatorKind::reparam: s.method = GradientMethod::reparam; return training_gradient(s, model, params, x, seed);
    case EstimatorKind::exact_enumeration: s.method = GradientMethod::exact; return training_gradient(s, model, params, x, seed);
    case EstimatorKind::reinforce:
    case EstimatorKind::reinforce_baseline: break;
  }
  s.method = GradientMethod::covariance;
  s.validate(model);
  if (s.kind == ObjectiveKind::iwae) throw UnsupportedError("score-function estimators are not defined for iwae here");
  const std::vector<Term> terms = terms_of(s);
  const auto f = SampleFunction::instantaneous_elbo();
  std::vector<double> gradient(params.size(), 0.0);
  std::optional<WeightTable> shared;
  if (s.crn) shared.emplace(build_weight_table(model, params, x, s.S, term_betas(terms), derive_seed(seed, {1})));
  for (std::size_t t = 0; t < terms.size(); ++t) {
    std::optional<WeightTable> own;
    if (!s.crn) {
      const double beta[] = {terms[t].beta};
      own.emplace(build_weight_table(model, params, x, s.S, beta, derive_seed(seed, {2 + t})));
    }
    const WeightTable& table = s.crn ? *shared : *own;
    const std::size_t k = column_of(table, terms[t].beta, "objective");
    GradientEstimate g;
    if (kind == EstimatorKind::reinforce) {
      g = reinforce_gradient(model, params, x, f, table, k);
    } else {
      const double b = independent_baseline(model, params, x, f, s.S, terms[t].beta, derive_seed(seed, {100 + t}));
      g = reinforce_baseline_gradient(model, params, x, f, table, k, b);
    }
    for (std::size_t d = 0; d < gradient.size(); ++d) gradient[d] += terms[t].scale * g.vector[d];
  }
  mask_gradient(gradient, params.layout(), s.optimize);
  GradientEstimate out;
  out.vector = std::move(gradient);
  out.kind = kind;
  out.S = s.S;
  out.K = s.schedule.K();
  out.seed = seed;
  return out;
}

GradientEstimate estimator_gradient(EstimatorKind kind, const ObjectiveSpec& spec, const LatentModel& model,
                                    const ParamVector& params, std::span<const std::vector<double>> batch,
                                    std::uint64_t seed, std::size_t workers) {
  if (batch.empty()) throw DomainError("gradient batch is empty");
  std::vector<GradientEstimate> parts(batch.size());
  parallel_for(batch.size(), workers, [&](std::size_t i) {
    parts[i] = estimator_gradient(kind, spec, model, params, batch[i], derive_seed(seed, {i}));
  });
  GradientEstimate out = parts.front();
  for (std::size_t i = 1; i < parts.size(); ++i) {
    for (std::size_t d = 0; d < out.vector.size(); ++d) out.vector[d] += parts[i].vector[d];
  }
  for (double& v : out.vector) v /= static_cast<double>(batch.size());
  out.seed = seed;
  return out;
}

}  // namespace tvo

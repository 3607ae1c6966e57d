#include "tvo/estimators.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "tvo/errors.hpp"
#include "tvo/rng.hpp"

namespace tvo {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

void check_betas(std::span<const double> betas) {
  if (betas.empty()) throw StructuralError("weight table needs at least one beta column");
  for (double b : betas) {
    if (!(b >= 0.0 && b <= 1.0)) throw DomainError("beta = " + std::to_string(b) + " lies outside [0, 1]");
  }
}

void check_finite(const ParamVector& g, const char* what) {
  for (const Segment& seg : g.layout().segments()) {
    auto v = g.segment(seg.name);
    for (std::size_t i = 0; i < v.size(); ++i) {
      if (!std::isfinite(v[i])) {
        throw NumericalError(std::string(what) + ": non-finite gradient in segment '" + seg.name + "' at element " +
                             std::to_string(i));
      }
    }
  }
}

std::shared_ptr<const ModelEvaluation> evaluation_for(const WeightTable& table, const LatentModel& model,
                                                      const ParamVector& params, std::span<const double> x) {
  if (table.evaluation()) return table.evaluation();
  if (table.latents().count != table.samples()) {
    throw UsageError("weight table carries no latent draws; build it from a model to take gradients");
  }
  return std::make_shared<const ModelEvaluation>(model, params, x, table.latents());
}

GradientEstimate finish(ParamVector gradient, EstimatorKind kind, const WeightTable& table, const char* what) {
  check_finite(gradient, what);
  GradientEstimate out;
  out.vector.assign(gradient.values().begin(), gradient.values().end());
  out.kind = kind;
  out.S = table.samples();
  out.K = table.columns() - 1;
  out.seed = table.seed();
  return out;
}

GradientEstimate from_coefficients(const LatentModel& model, const ParamVector& params, std::span<const double> x,
                                   const WeightTable& table, const SeedCoefficients& c, EstimatorKind kind,
                                   const char* what) {
  auto eval = evaluation_for(table, model, params, x);
  return finish(eval->gradient(c.joint, c.q), kind, table, what);
}

void check_index(const WeightTable& table, std::size_t k) {
  if (k >= table.columns()) {
    throw StructuralError("beta index " + std::to_string(k) + " outside a table with " +
                          std::to_string(table.columns()) + " columns");
  }
}

}  // namespace

// ---------------------------------------------------------------------------
// WeightTable

WeightTable::WeightTable(std::vector<double> log_joint, std::vector<double> log_q, std::vector<double> betas)
    : log_joint_(std::move(log_joint)), log_q_(std::move(log_q)), betas_(std::move(betas)) {
  normalize();
}

WeightTable WeightTable::exact(std::vector<double> log_joint, std::vector<double> log_q, std::vector<double> betas) {
  WeightTable t;
  t.log_joint_ = std::move(log_joint);
  t.log_q_ = std::move(log_q);
  t.betas_ = std::move(betas);
  t.exact_ = true;
  t.normalize();
  return t;
}

WeightTable WeightTable::from_log_weights(std::span<const double> log_w, std::vector<double> betas) {
  return WeightTable(std::vector<double>(log_w.begin(), log_w.end()), std::vector<double>(log_w.size(), 0.0),
                     std::move(betas));
}

void WeightTable::normalize() {
  const std::size_t S = log_joint_.size();
  if (S == 0) throw DomainError("weight table needs at least one draw");
  if (log_q_.size() != S) throw StructuralError("log p and log q have different lengths");
  check_betas(betas_);

  log_w_.resize(S);
  bool any_support = false;
  for (std::size_t s = 0; s < S; ++s) {
    if (std::isnan(log_joint_[s]) || std::isnan(log_q_[s])) {
      throw NumericalError("log density is NaN at draw " + std::to_string(s));
    }
    log_w_[s] = log_q_[s] == kNegInf ? kNegInf : log_joint_[s] - log_q_[s];
    any_support = any_support || log_w_[s] > kNegInf;
  }
  if (!any_support) {
    throw NumericalError("degenerate support: all " + std::to_string(S) + " log weights are -inf");
  }

  weights_.assign(S * betas_.size(), 0.0);
  std::vector<double> a(S);
  for (std::size_t k = 0; k < betas_.size(); ++k) {
    const double beta = betas_[k];
    double* col = weights_.data() + k * S;
    if (!exact_ && beta == 0.0) {
      std::fill(col, col + S, 1.0 / static_cast<double>(S));
      continue;
    }
    double m = kNegInf;
    for (std::size_t s = 0; s < S; ++s) {
      const double base = exact_ ? log_q_[s] : 0.0;
      if (base == kNegInf || (beta > 0.0 && log_w_[s] == kNegInf)) {
        a[s] = kNegInf;
      } else {
        a[s] = beta == 0.0 ? base : base + beta * log_w_[s];
      }
      m = std::max(m, a[s]);
    }
    if (m == kNegInf) {
      throw NumericalError("degenerate weights at beta = " + std::to_string(beta) + ": every draw has zero weight");
    }
    double total = 0.0;
    for (std::size_t s = 0; s < S; ++s) total += std::exp(a[s] - m);
    const double lse = m + std::log(total);
    for (std::size_t s = 0; s < S; ++s) col[s] = std::exp(a[s] - lse);
  }
}

std::span<const double> WeightTable::weights(std::size_t k) const {
  check_index(*this, k);
  return std::span<const double>(weights_).subspan(k * samples(), samples());
}

double WeightTable::ess(std::size_t k) const {
  double sq = 0.0;
  for (double w : weights(k)) sq += w * w;
  return 1.0 / sq;
}

void WeightTable::attach(LatentBatch latents, std::shared_ptr<const ModelEvaluation> evaluation, std::uint64_t seed) {
  if (latents.count != samples()) throw StructuralError("latent batch size does not match the weight table");
  latents_ = std::move(latents);
  evaluation_ = std::move(evaluation);
  seed_ = seed;
}

WeightTable build_weight_table(const LatentModel& model, const ParamVector& params, std::span<const double> x,
                               LatentBatch latents, std::span<const double> betas) {
  auto eval = std::make_shared<const ModelEvaluation>(model, params, x, latents);
  WeightTable table({eval->log_joint().begin(), eval->log_joint().end()}, {eval->log_q().begin(), eval->log_q().end()},
                    {betas.begin(), betas.end()});
  table.attach(std::move(latents), std::move(eval), 0);
  return table;
}

WeightTable build_weight_table(const LatentModel& model, const ParamVector& params, std::span<const double> x,
                               std::size_t S, std::span<const double> betas, std::uint64_t seed) {
  if (S == 0) throw DomainError("S must be at least 1");
  check_betas(betas);
  Rng rng(seed);
  LatentBatch latents = model.sample_q(params, x, S, rng);
  auto eval = std::make_shared<const ModelEvaluation>(model, params, x, latents);
  WeightTable table({eval->log_joint().begin(), eval->log_joint().end()}, {eval->log_q().begin(), eval->log_q().end()},
                    {betas.begin(), betas.end()});
  table.attach(std::move(latents), std::move(eval), seed);
  return table;
}

WeightTable build_weight_table(const LatentModel& model, const ParamVector& params, std::span<const double> x,
                               std::size_t S, const PartitionSchedule& schedule, std::uint64_t seed) {
  return build_weight_table(model, params, x, S, schedule.betas(), seed);
}

LatentBatch enumerate_binary_latents(std::size_t dim) {
  if (dim == 0 || dim > ToyBernoulli::kMaxLatents) {
    throw UnsupportedError("enumeration is limited to 1.." + std::to_string(ToyBernoulli::kMaxLatents) +
                           " binary latents, got " + std::to_string(dim));
  }
  const std::size_t n = std::size_t{1} << dim;
  LatentBatch out(n, dim);
  for (std::size_t i = 0; i < n; ++i) {
    auto row = out.row(i);
    for (std::size_t j = 0; j < dim; ++j) row[j] = static_cast<double>((i >> j) & 1U);
  }
  return out;
}

WeightTable build_exact_table(const LatentModel& model, const ParamVector& params, std::span<const double> x,
                              std::span<const double> betas) {
  if (model.latent_kind() != LatentKind::discrete) {
    throw UnsupportedError(model.name() + ": exact enumeration needs discrete latents");
  }
  LatentBatch latents = enumerate_binary_latents(model.latent_dim());
  auto eval = std::make_shared<const ModelEvaluation>(model, params, x, latents);
  WeightTable table = WeightTable::exact({eval->log_joint().begin(), eval->log_joint().end()},
                                         {eval->log_q().begin(), eval->log_q().end()}, {betas.begin(), betas.end()});
  table.attach(std::move(latents), std::move(eval), 0);
  return table;
}

double expectation(const WeightTable& table, std::size_t k, std::span<const double> f) {
  if (f.size() != table.samples()) {
    throw StructuralError("expectation: " + std::to_string(f.size()) + " function values for " +
                          std::to_string(table.samples()) + " draws");
  }
  auto w = table.weights(k);
  double total = 0.0;
  for (std::size_t s = 0; s < f.size(); ++s) {
    if (w[s] != 0.0) total += w[s] * f[s];
  }
  return total;
}

double expectation_std_error(const WeightTable& table, std::size_t k, std::span<const double> f) {
  if (table.is_exact()) return 0.0;
  const double mean = expectation(table, k, f);
  auto w = table.weights(k);
  double total = 0.0;
  for (std::size_t s = 0; s < f.size(); ++s) {
    if (w[s] != 0.0) total += w[s] * w[s] * (f[s] - mean) * (f[s] - mean);
  }
  return std::sqrt(total);
}

std::vector<double> SampleFunction::values(const WeightTable& table) const {
  std::vector<double> out(table.samples(), offset);
  auto lp = table.log_joint();
  auto lq = table.log_q();
  for (std::size_t s = 0; s < out.size(); ++s) {
    if (joint_coef != 0.0) out[s] += joint_coef * lp[s];
    if (q_coef != 0.0) out[s] += q_coef * lq[s];
  }
  return out;
}

std::string_view to_string(EstimatorKind kind) {
  switch (kind) {
    case EstimatorKind::covariance: return "cov";
    case EstimatorKind::reinforce: return "reinforce";
    case EstimatorKind::reinforce_baseline: return "reinforce-baseline";
    case EstimatorKind::reparam: return "reparam";
    case EstimatorKind::exact_enumeration: return "exact";
  }
  return "unknown";
}

// ---------------------------------------------------------------------------
// Score-function family

void accumulate_covariance(const WeightTable& table, std::size_t k, const SampleFunction& f, double scale,
                           SeedCoefficients& out) {
  const auto w = table.weights(k);
  const auto fv = f.values(table);
  const double mean = expectation(table, k, fv);
  const double beta = table.beta(k);
  for (std::size_t s = 0; s < fv.size(); ++s) {
    if (w[s] == 0.0) continue;
    const double centred = fv[s] - mean;
    out.joint[s] += scale * w[s] * (f.joint_coef + beta * centred);
    out.q[s] += scale * w[s] * (f.q_coef + (1.0 - beta) * centred);
  }
}

GradientEstimate covariance_gradient(const LatentModel& model, const ParamVector& params, std::span<const double> x,
                                     const SampleFunction& f, const WeightTable& table, std::size_t beta_index) {
  check_index(table, beta_index);
  SeedCoefficients c(table.samples());
  accumulate_covariance(table, beta_index, f, 1.0, c);
  const auto kind = table.is_exact() ? EstimatorKind::exact_enumeration : EstimatorKind::covariance;
  return from_coefficients(model, params, x, table, c, kind, "covariance estimator");
}

GradientEstimate covariance_gradient_per_sample(const LatentModel& model, const ParamVector& params,
                                                std::span<const double> x, const SampleFunction& f,
                                                const WeightTable& table, std::size_t beta_index) {
  check_index(table, beta_index);
  auto eval = evaluation_for(table, model, params, x);
  const std::size_t S = table.samples();
  const std::size_t D = params.size();
  const auto w = table.weights(beta_index);
  const auto fv = f.values(table);
  const double beta = table.beta(beta_index);
  const double f_mean = expectation(table, beta_index, fv);

  std::vector<std::vector<double>> grad_f(S), grad_path(S);
  std::vector<double> one_hot(S, 0.0), zeros(S, 0.0);
  for (std::size_t s = 0; s < S; ++s) {
    one_hot[s] = 1.0;
    const ParamVector gp = eval->gradient(one_hot, zeros);
    const ParamVector gq = eval->gradient(zeros, one_hot);
    one_hot[s] = 0.0;
    grad_f[s].resize(D);
    grad_path[s].resize(D);
    for (std::size_t d = 0; d < D; ++d) {
      grad_f[s][d] = f.joint_coef * gp[d] + f.q_coef * gq[d];
      grad_path[s][d] = beta * gp[d] + (1.0 - beta) * gq[d];
    }
  }

  std::vector<double> mean_grad_f(D, 0.0), mean_grad_path(D, 0.0);
  for (std::size_t s = 0; s < S; ++s) {
    for (std::size_t d = 0; d < D; ++d) {
      mean_grad_f[d] += w[s] * grad_f[s][d];
      mean_grad_path[d] += w[s] * grad_path[s][d];
    }
  }
  ParamVector out(params.layout_ptr());
  for (std::size_t d = 0; d < D; ++d) {
    double cov = 0.0;
    for (std::size_t s = 0; s < S; ++s) {
      if (w[s] != 0.0) cov += w[s] * (grad_path[s][d] - mean_grad_path[d]) * (fv[s] - f_mean);
    }
    out[d] = mean_grad_f[d] + cov;
  }
  const auto kind = table.is_exact() ? EstimatorKind::exact_enumeration : EstimatorKind::covariance;
  return finish(std::move(out), kind, table, "covariance estimator");
}

GradientEstimate reinforce_gradient(const LatentModel& model, const ParamVector& params, std::span<const double> x,
                                    const SampleFunction& f, const WeightTable& table, std::size_t beta_index) {
  check_index(table, beta_index);
  if (table.beta(beta_index) != 0.0) {
    throw UnsupportedError("plain REINFORCE needs grad log pi_beta, which involves the intractable Z_beta for beta > 0");
  }
  const auto w = table.weights(beta_index);
  const auto fv = f.values(table);
  SeedCoefficients c(table.samples());
  for (std::size_t s = 0; s < fv.size(); ++s) {
    if (w[s] == 0.0) continue;
    c.joint[s] = w[s] * f.joint_coef;
    c.q[s] = w[s] * (f.q_coef + fv[s]);
  }
  return from_coefficients(model, params, x, table, c, EstimatorKind::reinforce, "reinforce estimator");
}

GradientEstimate reinforce_baseline_gradient(const LatentModel& model, const ParamVector& params,
                                             std::span<const double> x, const SampleFunction& f,
                                             const WeightTable& table, std::size_t beta_index, double baseline) {
  check_index(table, beta_index);
  const auto w = table.weights(beta_index);
  const auto fv = f.values(table);
  const double beta = table.beta(beta_index);
  const std::size_t S = fv.size();

  std::vector<double> centred(S, 0.0);
  double total = 0.0;
  for (std::size_t s = 0; s < S; ++s) {
    if (w[s] == 0.0) continue;
    centred[s] = w[s] * (fv[s] - baseline);
    total += centred[s];
  }
  SeedCoefficients c(S);
  for (std::size_t s = 0; s < S; ++s) {
    if (w[s] == 0.0) continue;
    // At beta = 0 the score of the normalized q is available directly.
    const double score = beta == 0.0 ? centred[s] : centred[s] - w[s] * total;
    c.joint[s] = w[s] * f.joint_coef + beta * score;
    c.q[s] = w[s] * f.q_coef + (1.0 - beta) * score;
  }
  return from_coefficients(model, params, x, table, c, EstimatorKind::reinforce_baseline,
                           "reinforce-baseline estimator");
}

double independent_baseline(const LatentModel& model, const ParamVector& params, std::span<const double> x,
                            const SampleFunction& f, std::size_t S, double beta, std::uint64_t seed) {
  const double betas[] = {beta};
  const WeightTable table = build_weight_table(model, params, x, S, betas, seed);
  return expectation(table, 0, f.values(table));
}

// ---------------------------------------------------------------------------
// Reparameterization

ReparamObjective reparam_elbo() {
  return [](Tape& tape, const ReparamNodes& nodes, std::size_t S) {
    return tape.scale(tape.sum(tape.sub(nodes.log_joint, nodes.log_q)), 1.0 / static_cast<double>(S));
  };
}

ReparamObjective reparam_iwae() {
  return [](Tape& tape, const ReparamNodes& nodes, std::size_t S) {
    return tape.shift(tape.log_sum_exp(tape.sub(nodes.log_joint, nodes.log_q)), -std::log(static_cast<double>(S)));
  };
}

LatentBatch standard_normal_noise(std::size_t S, std::size_t dim, std::uint64_t seed) {
  Rng rng(seed);
  LatentBatch out(S, dim);
  for (double& v : out.values) v = rng.normal();
  return out;
}

namespace {

Tape record_reparam(const LatentModel& model, std::span<const double> x, const ReparamObjective& objective,
                    const LatentBatch& noise) {
  if (!model.reparameterizable()) {
    throw UnsupportedError(model.name() + ": reparameterization needs a location-scale Gaussian inference network");
  }
  if (noise.count == 0) throw DomainError("S must be at least 1");
  Tape tape;
  const ReparamNodes nodes = model.record_reparameterized(tape, x, noise);
  tape.set_output(objective(tape, nodes, noise.count));
  return tape;
}

}  // namespace

GradientEstimate reparam_gradient(const LatentModel& model, const ParamVector& params, std::span<const double> x,
                                  const ReparamObjective& objective, const LatentBatch& noise) {
  Tape tape = record_reparam(model, x, objective, noise);
  tape.forward(params);
  ParamVector g = tape.backward();
  check_finite(g, "reparameterization estimator");
  GradientEstimate out;
  out.vector.assign(g.values().begin(), g.values().end());
  out.kind = EstimatorKind::reparam;
  out.S = noise.count;
  out.K = 1;
  return out;
}

GradientEstimate reparam_gradient(const LatentModel& model, const ParamVector& params, std::span<const double> x,
                                  const ReparamObjective& objective, std::size_t S, std::uint64_t seed) {
  if (!model.reparameterizable()) {
    throw UnsupportedError(model.name() + ": reparameterization needs a location-scale Gaussian inference network");
  }
  auto out = reparam_gradient(model, params, x, objective, standard_normal_noise(S, model.latent_dim(), seed));
  out.seed = seed;
  return out;
}

double reparam_objective_value(const LatentModel& model, const ParamVector& params, std::span<const double> x,
                               const ReparamObjective& objective, const LatentBatch& noise) {
  Tape tape = record_reparam(model, x, objective, noise);
  return tape.forward(params);
}

// ---------------------------------------------------------------------------

CoordinateMoments coordinate_moments(std::span<const std::vector<double>> estimates) {
  if (estimates.size() < 2) throw DomainError("need at least two estimates for a standard deviation");
  const std::size_t D = estimates.front().size();
  const double n = static_cast<double>(estimates.size());
  CoordinateMoments m{std::vector<double>(D, 0.0), std::vector<double>(D, 0.0)};
  // Moments of deviations from the first estimate, so identical estimates
  // give exactly zero spread.
  const std::vector<double>& ref = estimates.front();
  std::vector<double> shift(D, 0.0);
  for (const auto& e : estimates) {
    if (e.size() != D) throw StructuralError("gradient estimates have different lengths");
    for (std::size_t d = 0; d < D; ++d) shift[d] += (e[d] - ref[d]) / n;
  }
  for (const auto& e : estimates) {
    for (std::size_t d = 0; d < D; ++d) {
      const double dev = (e[d] - ref[d]) - shift[d];
      m.std_dev[d] += dev * dev;
    }
  }
  for (std::size_t d = 0; d < D; ++d) {
    m.mean[d] = ref[d] + shift[d];
    m.std_dev[d] = std::sqrt(m.std_dev[d] / (n - 1.0));
  }
  return m;
}

double gradient_std_diagnostic(const std::function<GradientEstimate(std::uint64_t)>& estimator,
                               std::size_t repetitions, std::uint64_t seed) {
  if (repetitions < 2) throw DomainError("gradient std needs at least two repetitions");
  std::vector<std::vector<double>> estimates;
  estimates.reserve(repetitions);
  for (std::size_t r = 0; r < repetitions; ++r) estimates.push_back(estimator(derive_seed(seed, {r})).vector);
  const auto m = coordinate_moments(estimates);
  double total = 0.0;
  for (double v : m.std_dev) total += v;
  return m.std_dev.empty() ? 0.0 : total / static_cast<double>(m.std_dev.size());
}

}  // namespace tvo

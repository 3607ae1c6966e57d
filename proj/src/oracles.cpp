#include "tvo/oracles.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

#include "tvo/errors.hpp"
#include "tvo/estimators.hpp"

namespace tvo {

namespace {

double log_sum_exp(std::span<const double> a) {
  const double m = *std::max_element(a.begin(), a.end());
  if (m == -std::numeric_limits<double>::infinity()) return m;
  double total = 0.0;
  for (double v : a) total += std::exp(v - m);
  return m + std::log(total);
}

std::vector<double> tempered(std::span<const double> lj, std::span<const double> lq, double beta) {
  std::vector<double> a(lj.size());
  for (std::size_t s = 0; s < a.size(); ++s) a[s] = beta * lj[s] + (1.0 - beta) * lq[s];
  return a;
}

}  // namespace

EnumerationResult::EnumerationResult(std::vector<double> log_joint, std::vector<double> log_q)
    : log_joint_(std::move(log_joint)), log_q_(std::move(log_q)) {
  if (log_joint_.empty() || log_joint_.size() != log_q_.size()) {
    throw StructuralError("enumeration needs matching, non-empty log p and log q tables");
  }
  log_evidence_ = log_sum_exp(log_joint_);
  posterior_.resize(log_joint_.size());
  for (std::size_t s = 0; s < posterior_.size(); ++s) posterior_[s] = std::exp(log_joint_[s] - log_evidence_);
}

double EnumerationResult::log_normalizer(double beta) const {
  const auto a = tempered(log_joint_, log_q_, beta);
  return log_sum_exp(a);
}

std::vector<double> EnumerationResult::path_distribution(double beta) const {
  auto a = tempered(log_joint_, log_q_, beta);
  const double z = log_sum_exp(a);
  for (double& v : a) v = std::exp(v - z);
  return a;
}

double EnumerationResult::expectation(double beta, std::span<const double> f) const {
  if (f.size() != states()) throw StructuralError("function table does not match the enumerated states");
  const auto p = path_distribution(beta);
  double total = 0.0;
  for (std::size_t s = 0; s < p.size(); ++s) total += p[s] * f[s];
  return total;
}

double EnumerationResult::g(double beta) const {
  std::vector<double> u(states());
  for (std::size_t s = 0; s < u.size(); ++s) u[s] = log_joint_[s] - log_q_[s];
  return expectation(beta, u);
}

double EnumerationResult::variance(double beta) const {
  const auto p = path_distribution(beta);
  double mean = 0.0;
  for (std::size_t s = 0; s < p.size(); ++s) mean += p[s] * (log_joint_[s] - log_q_[s]);
  double var = 0.0;
  for (std::size_t s = 0; s < p.size(); ++s) {
    const double d = log_joint_[s] - log_q_[s] - mean;
    var += p[s] * d * d;
  }
  return var;
}

double EnumerationResult::total_variation() const {
  double total = 0.0;
  for (std::size_t s = 0; s < states(); ++s) total += std::abs(std::exp(log_q_[s]) - posterior_[s]);
  return 0.5 * total;
}

EnumerationResult enumerate(const ToyBernoulli& model, const ParamVector& params, std::span<const double> x) {
  const std::size_t M = model.latent_dim();
  if (M > ToyBernoulli::kMaxLatents) throw UnsupportedError("enumeration refused: more than 12 latents");
  model.check_data(x);
  const std::size_t n = std::size_t{1} << M;
  std::vector<double> lj(n), lq(n), z(M);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < M; ++j) z[j] = static_cast<double>((i >> j) & 1U);
    lj[i] = model.log_joint_direct(params, x, z);
    lq[i] = model.log_q_direct(params, x, z);
  }
  return EnumerationResult(std::move(lj), std::move(lq));
}

double direct_elbo(const ToyBernoulli& model, const ParamVector& params, std::span<const double> x) {
  const std::size_t M = model.latent_dim();
  std::vector<double> z(M);
  double total = 0.0;
  for (std::size_t i = 0; i < (std::size_t{1} << M); ++i) {
    for (std::size_t j = 0; j < M; ++j) z[j] = static_cast<double>((i >> j) & 1U);
    const double lq = model.log_q_direct(params, x, z);
    total += std::exp(lq) * (model.log_joint_direct(params, x, z) - lq);
  }
  return total;
}

double direct_eubo(const ToyBernoulli& model, const ParamVector& params, std::span<const double> x) {
  const std::size_t M = model.latent_dim();
  const std::size_t n = std::size_t{1} << M;
  std::vector<double> z(M), joint(n), u(n);
  double evidence = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < M; ++j) z[j] = static_cast<double>((i >> j) & 1U);
    const double lj = model.log_joint_direct(params, x, z);
    joint[i] = std::exp(lj);
    u[i] = lj - model.log_q_direct(params, x, z);
    evidence += joint[i];
  }
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) total += joint[i] / evidence * u[i];
  return total;
}

// ---------------------------------------------------------------------------
// Quadrature for the conjugate Gaussian model.

namespace {

constexpr std::size_t kQuadraturePoints = 40001;
constexpr double kQuadratureHalfWidth = 14.0;

double log_normal(double v, double mean, double var) {
  return -0.5 * std::log(2.0 * std::numbers::pi * var) - 0.5 * (v - mean) * (v - mean) / var;
}

struct QuadraturePoint {
  double log_weight;
  double u;
};

// Grid over z centred on the path distribution's region of mass. The centre
// and width come from the proposal and the prior-likelihood product
// evaluated numerically, not from the closed-form path distribution.
std::vector<QuadraturePoint> path_grid(const ConjugateGaussian& model, const ParamVector& params, double x,
                                       double beta, double& step) {
  const double mu0 = params.segment("theta/prior_mean")[0];
  const double a = params.segment("phi/slope")[0];
  const double b = params.segment("phi/offset")[0];
  const double s = std::exp(params.segment("phi/log_std")[0]);
  const double v0 = model.prior_std() * model.prior_std();
  const double vn = model.noise_std() * model.noise_std();
  const double qm = a * x + b;
  const double lo_centre = std::min({qm, mu0, x});
  const double hi_centre = std::max({qm, mu0, x});
  const double spread = std::max({s, model.prior_std(), model.noise_std()});
  const double lo = lo_centre - kQuadratureHalfWidth * spread;
  const double hi = hi_centre + kQuadratureHalfWidth * spread;
  step = (hi - lo) / static_cast<double>(kQuadraturePoints - 1);
  std::vector<QuadraturePoint> pts(kQuadraturePoints);
  for (std::size_t i = 0; i < kQuadraturePoints; ++i) {
    const double z = lo + step * static_cast<double>(i);
    const double lj = log_normal(z, mu0, v0) + log_normal(x, z, vn);
    const double lq = log_normal(z, qm, s * s);
    pts[i] = {beta * lj + (1.0 - beta) * lq, lj - lq};
  }
  return pts;
}

// Trapezoid weights normalized in log space.
std::vector<double> normalized(const std::vector<QuadraturePoint>& pts) {
  double m = -std::numeric_limits<double>::infinity();
  for (const auto& p : pts) m = std::max(m, p.log_weight);
  std::vector<double> w(pts.size());
  double total = 0.0;
  for (std::size_t i = 0; i < pts.size(); ++i) {
    const double end_factor = (i == 0 || i + 1 == pts.size()) ? 0.5 : 1.0;
    w[i] = end_factor * std::exp(pts[i].log_weight - m);
    total += w[i];
  }
  for (double& v : w) v /= total;
  return w;
}

}  // namespace

double quadrature_log_evidence(const ConjugateGaussian& model, const ParamVector& params, double x) {
  double step = 0.0;
  const auto pts = path_grid(model, params, x, 1.0, step);
  double m = -std::numeric_limits<double>::infinity();
  for (const auto& p : pts) m = std::max(m, p.log_weight);
  double total = 0.0;
  for (std::size_t i = 0; i < pts.size(); ++i) {
    const double end_factor = (i == 0 || i + 1 == pts.size()) ? 0.5 : 1.0;
    total += end_factor * std::exp(pts[i].log_weight - m);
  }
  return m + std::log(total * step);
}

double quadrature_g(const ConjugateGaussian& model, const ParamVector& params, double x, double beta) {
  double step = 0.0;
  const auto pts = path_grid(model, params, x, beta, step);
  const auto w = normalized(pts);
  double total = 0.0;
  for (std::size_t i = 0; i < pts.size(); ++i) total += w[i] * pts[i].u;
  return total;
}

double quadrature_variance(const ConjugateGaussian& model, const ParamVector& params, double x, double beta) {
  double step = 0.0;
  const auto pts = path_grid(model, params, x, beta, step);
  const auto w = normalized(pts);
  double mean = 0.0;
  for (std::size_t i = 0; i < pts.size(); ++i) mean += w[i] * pts[i].u;
  double var = 0.0;
  for (std::size_t i = 0; i < pts.size(); ++i) var += w[i] * (pts[i].u - mean) * (pts[i].u - mean);
  return var;
}

std::vector<double> log_normalizer_gradient(const LatentModel& model, const ParamVector& params,
                                            std::span<const double> x, double beta) {
  const LatentBatch states = enumerate_binary_latents(model.latent_dim());
  Tape tape;
  const LogNodes nodes = model.record(tape, x, states);
  Var tempered_log = tape.add(tape.scale(nodes.log_joint, beta), tape.scale(nodes.log_q, 1.0 - beta));
  tape.set_output(tape.log_sum_exp(tempered_log));
  tape.forward(params);
  const ParamVector g = tape.backward();
  return {g.values().begin(), g.values().end()};
}

double trapezoid(const std::function<double(double)>& g, std::size_t grid_size) {
  if (grid_size < 2) throw DomainError("trapezoid rule needs at least two grid points");
  const double intervals = static_cast<double>(grid_size - 1);
  // Neumaier-compensated sum, so a constant integrand integrates to itself.
  double total = 0.0;
  double carry = 0.0;
  auto add = [&](double v) {
    const double t = total + v;
    carry += std::abs(total) >= std::abs(v) ? (total - t) + v : (v - t) + total;
    total = t;
  };
  add(0.5 * g(0.0));
  add(0.5 * g(1.0));
  for (std::size_t i = 1; i + 1 < grid_size; ++i) add(g(static_cast<double>(i) / intervals));
  return (total + carry) / intervals;
}

double ti_identity_check(const std::function<double(double)>& g, double log_evidence, std::size_t grid_size) {
  return std::abs(trapezoid(g, grid_size) - log_evidence);
}

VarianceCheck variance_identity_check(const std::function<double(double)>& g,
                                      const std::function<double(double)>& variance, double beta, double h) {
  if (!(h > 0.0) || !(beta - h >= 0.0 && beta + h <= 1.0)) {
    throw DomainError("variance identity check needs h > 0 and [beta - h, beta + h] inside [0, 1]");
  }
  return {(g(beta + h) - g(beta - h)) / (2.0 * h), variance(beta)};
}

VarianceCheck variance_identity_check(const EnumerationResult& enumeration, double beta, double h) {
  return variance_identity_check([&](double b) { return enumeration.g(b); },
                                 [&](double b) { return enumeration.variance(b); }, beta, h);
}

}  // namespace tvo

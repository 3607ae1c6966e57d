#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <utility>
#include <vector>

#include "tvo/models.hpp"

namespace tvo {

/// Exact quantities for a ToyBernoulli instance, summed over all 2^M latent
/// states with plain loops (no tape).
class EnumerationResult {
 public:
  EnumerationResult(std::vector<double> log_joint, std::vector<double> log_q);

  std::size_t states() const noexcept { return log_joint_.size(); }
  std::span<const double> log_joint() const noexcept { return log_joint_; }
  std::span<const double> log_q() const noexcept { return log_q_; }
  double log_evidence() const noexcept { return log_evidence_; }
  /// p(z | x) per state.
  std::span<const double> posterior() const noexcept { return posterior_; }

  /// log Z_beta = log sum_z p(x, z)^beta q(z | x)^(1 - beta).
  double log_normalizer(double beta) const;
  /// pi_beta(z) per state.
  std::vector<double> path_distribution(double beta) const;
  double expectation(double beta, std::span<const double> f) const;
  /// g(beta) = E_{pi_beta}[U'].
  double g(double beta) const;
  /// Var_{pi_beta}[U'].
  double variance(double beta) const;

  double elbo() const { return g(0.0); }
  double eubo() const { return g(1.0); }
  /// Total-variation distance between q(z | x) and p(z | x).
  double total_variation() const;

 private:
  std::vector<double> log_joint_;
  std::vector<double> log_q_;
  std::vector<double> posterior_;
  double log_evidence_ = 0.0;
};

/// Refuses models with more than 12 latents.
EnumerationResult enumerate(const ToyBernoulli& model, const ParamVector& params, std::span<const double> x);

/// ELBO and EUBO by direct definitional sums, summed in a different order
/// from EnumerationResult (per-state ratios rather than column weights).
double direct_elbo(const ToyBernoulli& model, const ParamVector& params, std::span<const double> x);
double direct_eubo(const ToyBernoulli& model, const ParamVector& params, std::span<const double> x);

/// Numerical integration over z for ConjugateGaussian, from the densities
/// alone. Used to cross-check the closed forms.
double quadrature_log_evidence(const ConjugateGaussian& model, const ParamVector& params, double x);
double quadrature_g(const ConjugateGaussian& model, const ParamVector& params, double x, double beta);
double quadrature_variance(const ConjugateGaussian& model, const ParamVector& params, double x, double beta);

/// Gradient of log Z_beta computed by differentiating a log-sum-exp over all
/// enumerated states.
std::vector<double> log_normalizer_gradient(const LatentModel& model, const ParamVector& params,
                                            std::span<const double> x, double beta);

/// Trapezoid rule on `grid_size` equally spaced points of [0, 1].
double trapezoid(const std::function<double(double)>& g, std::size_t grid_size);

/// |trapezoid(g, grid_size) - log_evidence|.
double ti_identity_check(const std::function<double(double)>& g, double log_evidence, std::size_t grid_size);

struct VarianceCheck {
  double fd_dg = 0.0;
  double exact_var = 0.0;
};

/// Centered difference of g at beta against the exact variance of U'.
VarianceCheck variance_identity_check(const std::function<double(double)>& g,
                                      const std::function<double(double)>& variance, double beta, double h);
VarianceCheck variance_identity_check(const EnumerationResult& enumeration, double beta, double h);

}  // namespace tvo

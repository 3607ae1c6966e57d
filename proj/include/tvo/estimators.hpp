#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "tvo/autodiff.hpp"
#include "tvo/models.hpp"
#include "tvo/path.hpp"

namespace tvo {

/// Self-normalized tempered importance weights sharing one batch of draws.
///
/// Column k holds weights proportional to exp(log_base_s + beta_k log_w_s).
/// Sampled tables use log_base = 0, which gives w_s^beta normalized over the
/// batch. Tables over an enumerated state space use log_base = log q, so
/// each column is the exact path distribution pi_beta.
class WeightTable {
 public:
  /// Sampled form: uniform base measure.
  WeightTable(std::vector<double> log_joint, std::vector<double> log_q, std::vector<double> betas);
  /// Enumerated form: base measure exp(log_q).
  static WeightTable exact(std::vector<double> log_joint, std::vector<double> log_q, std::vector<double> betas);
  /// Sampled form from log weights alone (log_q taken as 0).
  static WeightTable from_log_weights(std::span<const double> log_w, std::vector<double> betas);

  std::size_t samples() const noexcept { return log_w_.size(); }
  std::size_t columns() const noexcept { return betas_.size(); }
  std::span<const double> betas() const noexcept { return betas_; }
  double beta(std::size_t k) const { return betas_.at(k); }
  bool is_exact() const noexcept { return exact_; }

  std::span<const double> log_joint() const noexcept { return log_joint_; }
  std::span<const double> log_q() const noexcept { return log_q_; }
  /// log w_s = log p(x, z_s) - log q(z_s | x).
  std::span<const double> log_w() const noexcept { return log_w_; }
  /// Normalized weights of column k.
  std::span<const double> weights(std::size_t k) const;
  /// Kish effective sample size 1 / sum_s wbar_s^2 of column k.
  double ess(std::size_t k) const;

  /// Draws and tape evaluation behind the table, when it was built from a
  /// model. Gradient estimators reuse the evaluation for their reverse pass.
  const LatentBatch& latents() const noexcept { return latents_; }
  const std::shared_ptr<const ModelEvaluation>& evaluation() const noexcept { return evaluation_; }
  std::uint64_t seed() const noexcept { return seed_; }
  void attach(LatentBatch latents, std::shared_ptr<const ModelEvaluation> evaluation, std::uint64_t seed);

 private:
  WeightTable() = default;
  void normalize();

  std::vector<double> log_joint_;
  std::vector<double> log_q_;
  std::vector<double> log_w_;
  std::vector<double> betas_;
  std::vector<double> weights_;  // column-major: column k at [k * S, (k + 1) * S)
  bool exact_ = false;
  LatentBatch latents_;
  std::shared_ptr<const ModelEvaluation> evaluation_;
  std::uint64_t seed_ = 0;
};

/// Draws S latents from q(. | x) with a stream derived from `seed`, evaluates
/// log p and log q once and normalizes one column per beta.
WeightTable build_weight_table(const LatentModel& model, const ParamVector& params, std::span<const double> x,
                               std::size_t S, std::span<const double> betas, std::uint64_t seed);
WeightTable build_weight_table(const LatentModel& model, const ParamVector& params, std::span<const double> x,
                               std::size_t S, const PartitionSchedule& schedule, std::uint64_t seed);
WeightTable build_weight_table(const LatentModel& model, const ParamVector& params, std::span<const double> x,
                               LatentBatch latents, std::span<const double> betas);

/// Every configuration of a discrete model's latents (at most 12 binary
/// dimensions), in binary counting order.
LatentBatch enumerate_binary_latents(std::size_t dim);

/// Exact table over every latent configuration of a small discrete model.
WeightTable build_exact_table(const LatentModel& model, const ParamVector& params, std::span<const double> x,
                              std::span<const double> betas);

/// sum_s wbar_s^{beta_k} f_s.
double expectation(const WeightTable& table, std::size_t k, std::span<const double> f);
/// Delta-method standard error sqrt(sum_s wbar_s^2 (f_s - E f)^2); zero for
/// exact tables.
double expectation_std_error(const WeightTable& table, std::size_t k, std::span<const double> f);

/// Per-draw function f(z) = joint_coef log p(x, z) + q_coef log q(z | x) +
/// offset. Its gradient is joint_coef grad log p + q_coef grad log q, which
/// covers the instantaneous ELBO and every objective built from it.
struct SampleFunction {
  double joint_coef = 0.0;
  double q_coef = 0.0;
  double offset = 0.0;

  static SampleFunction instantaneous_elbo() { return {1.0, -1.0, 0.0}; }
  static SampleFunction constant(double c) { return {0.0, 0.0, c}; }

  std::vector<double> values(const WeightTable& table) const;
};

enum class EstimatorKind { covariance, reinforce, reinforce_baseline, reparam, exact_enumeration };

std::string_view to_string(EstimatorKind kind);

struct GradientEstimate {
  std::vector<double> vector;
  EstimatorKind kind = EstimatorKind::covariance;
  std::size_t S = 0;
  std::size_t K = 0;
  std::uint64_t seed = 0;
};

/// Per-draw coefficients (c_p, c_q) such that the estimate equals
/// sum_s c_p[s] grad log p(x, z_s) + c_q[s] grad log q(z_s | x).
struct SeedCoefficients {
  std::vector<double> joint;
  std::vector<double> q;

  explicit SeedCoefficients(std::size_t S = 0) : joint(S, 0.0), q(S, 0.0) {}
};

/// Adds scale * (E[grad f] + Cov[grad log pi~_beta, f]) for column k, with
/// every expectation taken under the column's weights, to `out`.
void accumulate_covariance(const WeightTable& table, std::size_t k, const SampleFunction& f, double scale,
                           SeedCoefficients& out);

/// E_{pi_beta}[grad f] + Cov_{pi_beta}[grad log pi~_beta, f] with all
/// expectations from the shared table, evaluated with one reverse pass.
GradientEstimate covariance_gradient(const LatentModel& model, const ParamVector& params, std::span<const double> x,
                                     const SampleFunction& f, const WeightTable& table, std::size_t beta_index);

/// The same estimator assembled term by term from one reverse pass per draw
/// and per density. Slow; used to cross-check covariance_gradient.
GradientEstimate covariance_gradient_per_sample(const LatentModel& model, const ParamVector& params,
                                                std::span<const double> x, const SampleFunction& f,
                                                const WeightTable& table, std::size_t beta_index);

/// E_q[grad f + f grad log q]. Only defined at beta = 0, where pi_0 = q is
/// normalized; throws UnsupportedError otherwise.
GradientEstimate reinforce_gradient(const LatentModel& model, const ParamVector& params, std::span<const double> x,
                                    const SampleFunction& f, const WeightTable& table, std::size_t beta_index);

/// E[grad f + (f - b)(grad log pi~_beta - E[grad log pi~_beta])] with a
/// baseline b supplied by the caller, normally estimated on an independent
/// batch. At beta = 0 the score grad log q is used as is.
GradientEstimate reinforce_baseline_gradient(const LatentModel& model, const ParamVector& params,
                                             std::span<const double> x, const SampleFunction& f,
                                             const WeightTable& table, std::size_t beta_index, double baseline);

/// E_{pi_beta}[f] estimated on a fresh batch of S draws.
double independent_baseline(const LatentModel& model, const ParamVector& params, std::span<const double> x,
                            const SampleFunction& f, std::size_t S, double beta, std::uint64_t seed);

/// Scalar Monte Carlo objective recorded over reparameterized draws.
using ReparamObjective = std::function<Var(Tape&, const ReparamNodes&, std::size_t S)>;

/// mean_s (log p(x, z_s) - log q(z_s | x)).
ReparamObjective reparam_elbo();
/// log mean_s exp(log p(x, z_s) - log q(z_s | x)).
ReparamObjective reparam_iwae();

/// Pathwise gradient through z = mean + std * eps with eps drawn from a stream
/// derived from `seed`. Throws UnsupportedError for models without a
/// location-scale inference network.
GradientEstimate reparam_gradient(const LatentModel& model, const ParamVector& params, std::span<const double> x,
                                  const ReparamObjective& objective, std::size_t S, std::uint64_t seed);
/// As above with caller-provided standard-normal noise (S x latent_dim).
GradientEstimate reparam_gradient(const LatentModel& model, const ParamVector& params, std::span<const double> x,
                                  const ReparamObjective& objective, const LatentBatch& noise);
/// Value of the objective for fixed noise.
double reparam_objective_value(const LatentModel& model, const ParamVector& params, std::span<const double> x,
                               const ReparamObjective& objective, const LatentBatch& noise);

/// Standard-normal noise for reparameterized draws.
LatentBatch standard_normal_noise(std::size_t S, std::size_t dim, std::uint64_t seed);

/// Runs `estimator` once per repetition r with seed derive_seed(seed, {r}),
/// takes the per-coordinate sample standard deviation over repetitions and
/// averages it over all coordinates.
double gradient_std_diagnostic(const std::function<GradientEstimate(std::uint64_t)>& estimator,
                               std::size_t repetitions, std::uint64_t seed);

/// Per-coordinate sample mean and standard deviation of a set of estimates.
struct CoordinateMoments {
  std::vector<double> mean;
  std::vector<double> std_dev;
};
CoordinateMoments coordinate_moments(std::span<const std::vector<double>> estimates);

}  // namespace tvo

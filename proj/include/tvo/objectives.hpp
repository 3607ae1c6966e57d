#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string_view>
#include <vector>

#include "tvo/estimators.hpp"
#include "tvo/models.hpp"
#include "tvo/path.hpp"

namespace tvo {

enum class ObjectiveKind { elbo, eubo, tvo_lower, tvo_upper, iwae };
enum class OptimizeTarget { theta, phi, both };
enum class DataSource { real, model_simulated };
/// How expectations are differentiated: covariance estimator over sampled
/// draws, pathwise (reparameterized) draws, or exact enumeration of a small
/// discrete latent space.
enum class GradientMethod { covariance, reparam, exact };
enum class Direction { maximize, minimize };

ObjectiveKind parse_objective_kind(std::string_view text);
OptimizeTarget parse_optimize_target(std::string_view text);
DataSource parse_data_source(std::string_view text);
GradientMethod parse_gradient_method(std::string_view text);
std::string_view to_string(ObjectiveKind kind);
std::string_view to_string(OptimizeTarget target);

/// Upper bounds (eubo, tvo_upper) are minimized, everything else maximized.
Direction default_direction(ObjectiveKind kind);

struct ObjectiveSpec {
  ObjectiveKind kind = ObjectiveKind::tvo_lower;
  PartitionSchedule schedule = PartitionSchedule({0.0, 1.0});
  std::size_t S = 10;
  OptimizeTarget optimize = OptimizeTarget::both;
  DataSource data_source = DataSource::real;
  GradientMethod method = GradientMethod::covariance;
  /// Reuse one batch of draws for every partition term.
  bool crn = true;
  Direction direction = Direction::maximize;

  /// Spec with the direction implied by `kind`.
  static ObjectiveSpec make(ObjectiveKind kind, PartitionSchedule schedule, std::size_t S,
                            OptimizeTarget optimize = OptimizeTarget::both, DataSource source = DataSource::real);

  /// Throws ConfigError when the combination cannot be trained on `model`.
  void validate(const LatentModel& model) const;
};

/// g(beta_k) for every column.
std::vector<double> integrand_values(const WeightTable& table);

/// Average of U' under the beta = 0 column.
double elbo_estimate(const WeightTable& table);

struct EuboEstimate {
  double value = 0.0;
  double ess = 0.0;
  /// Effective sample size of the beta = 1 column below 2.
  bool low_ess = false;
};
/// Self-normalized estimate of E_{p(z|x)}[U'] from the beta = 1 column.
EuboEstimate eubo_estimate(const WeightTable& table);

/// sum_k Delta_k g(beta_{k-1}). The table must have one column per knot.
double tvo_lower(const WeightTable& table, const PartitionSchedule& schedule);
/// sum_k Delta_k g(beta_k).
double tvo_upper(const WeightTable& table, const PartitionSchedule& schedule);

/// log mean_s exp(log_w_s).
double iwae_estimate(std::span<const double> log_w);

struct TrainingStep {
  GradientEstimate gradient;
  double objective = 0.0;
};

/// Objective value and gradient for one datum. Streams are derived from
/// `seed`, so the result is a pure function of its arguments. With
/// model-simulated data x is ignored and replaced by an ancestral draw; the
/// beta = 1 term then uses the simulated latent as an exact posterior sample
/// and the theta gradient is zero.
TrainingStep training_step(const ObjectiveSpec& spec, const LatentModel& model, const ParamVector& params,
                           std::span<const double> x, std::uint64_t seed);

/// Minibatch average of per-datum steps; datum i uses derive_seed(seed, {i}).
TrainingStep training_step(const ObjectiveSpec& spec, const LatentModel& model, const ParamVector& params,
                           std::span<const std::vector<double>> batch, std::uint64_t seed, std::size_t workers = 1);

GradientEstimate training_gradient(const ObjectiveSpec& spec, const LatentModel& model, const ParamVector& params,
                                   std::span<const double> x, std::uint64_t seed);

/// Gradient of the objective on real data by the named estimator. The
/// covariance and reparam kinds follow training_step; the reinforce kinds
/// sum one score-function estimate per partition term, sharing draws when
/// spec.crn is set. Throws UnsupportedError where an estimator is undefined
/// (plain REINFORCE at beta > 0, score-function iwae) and ConfigError where
/// the model does not allow it.
GradientEstimate estimator_gradient(EstimatorKind kind, const ObjectiveSpec& spec, const LatentModel& model,
                                    const ParamVector& params, std::span<const double> x, std::uint64_t seed);
/// Minibatch average; datum i uses derive_seed(seed, {i}).
GradientEstimate estimator_gradient(EstimatorKind kind, const ObjectiveSpec& spec, const LatentModel& model,
                                    const ParamVector& params, std::span<const std::vector<double>> batch,
                                    std::uint64_t seed, std::size_t workers = 1);

/// Zeroes the segments not selected by `target`.
void mask_gradient(std::span<double> gradient, const ParamLayout& layout, OptimizeTarget target);

}  // namespace tvo

#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <span>
#include <string_view>
#include <vector>

#include "tvo/autodiff.hpp"
#include "tvo/table.hpp"

namespace tvo {

class LatentModel;
class WeightTable;

/// Ordered grid 0 = beta_0 < ... < beta_K = 1.
class PartitionSchedule {
 public:
  /// Throws DomainError unless the grid starts at 0, ends at 1, is strictly
  /// increasing and has K >= 1.
  explicit PartitionSchedule(std::vector<double> betas);

  std::size_t K() const noexcept { return betas_.size() - 1; }
  std::span<const double> betas() const noexcept { return betas_; }
  double beta(std::size_t k) const { return betas_.at(k); }
  /// Delta_k = beta_k - beta_{k-1} for k = 1..K.
  double width(std::size_t k) const;

  bool operator==(const PartitionSchedule&) const = default;

 private:
  std::vector<double> betas_;
};

enum class Spacing { equal, log };

Spacing parse_spacing(std::string_view text);

/// equal: beta_k = k / K (beta1 ignored). log: 0 followed by K points
/// geometrically spaced from beta1 to 1 inclusive.
PartitionSchedule make_schedule(std::size_t K, double beta1, Spacing spacing);

/// U'(z) = log p(x, z) - log q(z | x). Throws DomainError when log_q is -inf
/// (z outside the proposal's support).
double potential_derivative(double log_joint, double log_q);

/// log pi~_beta(z) = beta log p(x, z) + (1 - beta) log q(z | x).
double log_unnormalized_path_density(double log_joint, double log_q, double beta);

/// Estimates of g(beta) = E_{pi_beta}[U'] on a grid.
struct IntegrandCurve {
  std::vector<double> betas;
  std::vector<double> values;
  std::vector<double> std_errors;
};

/// Every grid point is estimated from the same columns of one weight table.
IntegrandCurve integrand_curve(const WeightTable& table);

/// Draws S proposal samples once and reuses them for every beta on the grid.
IntegrandCurve integrand_curve(const LatentModel& model, const ParamVector& params, std::span<const double> x,
                               std::span<const double> betas, std::size_t S, std::uint64_t seed);

/// Grid point with the largest discrete second difference of g, the point
/// of maximum curvature. Needs at least three grid points.
double max_curvature_beta(const IntegrandCurve& curve);

/// Columns: beta, g_estimate, std_error.
void write_curve(std::ostream& out, const IntegrandCurve& curve, OutputFormat format);

}  // namespace tvo

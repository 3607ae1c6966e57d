#include "tvo/path.hpp"

#include <cmath>
#include <limits>
#include <ostream>

#include "tvo/errors.hpp"
#include "tvo/estimators.hpp"

namespace tvo {

PartitionSchedule::PartitionSchedule(std::vector<double> betas) : betas_(std::move(betas)) {
  if (betas_.size() < 2) throw DomainError("a partition needs K >= 1 (at least two knots)");
  if (betas_.front() != 0.0 || betas_.back() != 1.0) throw DomainError("a partition must start at 0 and end at 1");
  for (std::size_t k = 1; k < betas_.size(); ++k) {
    if (!(betas_[k] > betas_[k - 1])) {
      throw DomainError("partition knots must be strictly increasing (knot " + std::to_string(k) + ")");
    }
  }
}

double PartitionSchedule::width(std::size_t k) const {
  if (k == 0 || k > K()) throw StructuralError("partition width index " + std::to_string(k) + " outside 1.." + std::to_string(K()));
  return betas_[k] - betas_[k - 1];
}

Spacing parse_spacing(std::string_view text) {
  if (text == "equal") return Spacing::equal;
  if (text == "log") return Spacing::log;
  throw ConfigError("unknown spacing '" + std::string(text) + "' (expected equal or log)");
}

PartitionSchedule make_schedule(std::size_t K, double beta1, Spacing spacing) {
  if (K == 0) throw DomainError("K must be at least 1");
  std::vector<double> betas(K + 1);
  betas[0] = 0.0;
  if (spacing == Spacing::equal) {
    for (std::size_t k = 1; k <= K; ++k) betas[k] = static_cast<double>(k) / static_cast<double>(K);
  } else {
    if (!(beta1 > 0.0 && beta1 < 1.0)) throw DomainError("log spacing needs 0 < beta1 < 1");
    if (K > 1) {
      for (std::size_t k = 1; k < K; ++k) {
        betas[k] = std::pow(beta1, static_cast<double>(K - k) / static_cast<double>(K - 1));
      }
    }
  }
  betas[K] = 1.0;
  return PartitionSchedule(std::move(betas));
}

double potential_derivative(double log_joint, double log_q) {
  if (log_q == -std::numeric_limits<double>::infinity()) {
    throw DomainError("log q = -inf: the latent lies outside the proposal's support");
  }
  return log_joint - log_q;
}

double log_unnormalized_path_density(double log_joint, double log_q, double beta) {
  if (!(beta >= 0.0 && beta <= 1.0)) throw DomainError("beta = " + std::to_string(beta) + " lies outside [0, 1]");
  if (beta == 0.0) return log_q;
  if (beta == 1.0) return log_joint;
  return beta * log_joint + (1.0 - beta) * log_q;
}

IntegrandCurve integrand_curve(const WeightTable& table) {
  const auto f = SampleFunction::instantaneous_elbo().values(table);
  IntegrandCurve curve;
  for (std::size_t k = 0; k < table.columns(); ++k) {
    curve.betas.push_back(table.beta(k));
    curve.values.push_back(expectation(table, k, f));
    curve.std_errors.push_back(expectation_std_error(table, k, f));
  }
  return curve;
}

IntegrandCurve integrand_curve(const LatentModel& model, const ParamVector& params, std::span<const double> x,
                               std::span<const double> betas, std::size_t S, std::uint64_t seed) {
  return integrand_curve(build_weight_table(model, params, x, S, betas, seed));
}

double max_curvature_beta(const IntegrandCurve& curve) {
  const auto& b = curve.betas;
  const auto& g = curve.values;
  if (b.size() < 3) throw DomainError("curvature needs at least three grid points");
  std::size_t best = 1;
  double best_value = -1.0;
  for (std::size_t i = 1; i + 1 < b.size(); ++i) {
    const double left = (g[i] - g[i - 1]) / (b[i] - b[i - 1]);
    const double right = (g[i + 1] - g[i]) / (b[i + 1] - b[i]);
    const double second = std::abs(2.0 * (right - left) / (b[i + 1] - b[i - 1]));
    if (second > best_value) {
      best_value = second;
      best = i;
    }
  }
  return b[best];
}

void write_curve(std::ostream& out, const IntegrandCurve& curve, OutputFormat format) {
  TableWriter writer(out, {"beta", "g_estimate", "std_error"}, format);
  for (std::size_t i = 0; i < curve.betas.size(); ++i) {
    writer.row({curve.betas[i], curve.values[i], curve.std_errors[i]});
  }
}

}  // namespace tvo

#pragma once

#include <cstddef>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "tvo/autodiff.hpp"
#include "tvo/rng.hpp"

namespace tvo {

enum class LatentKind { discrete, continuous };

/// S latent draws stored row-major, one row of `dim` values per draw.
struct LatentBatch {
  std::size_t count = 0;
  std::size_t dim = 0;
  std::vector<double> values;

  LatentBatch() = default;
  LatentBatch(std::size_t n, std::size_t d) : count(n), dim(d), values(n * d, 0.0) {}

  std::span<double> row(std::size_t s) { return std::span<double>(values).subspan(s * dim, dim); }
  std::span<const double> row(std::size_t s) const { return std::span<const double>(values).subspan(s * dim, dim); }
};

struct JointSample {
  std::vector<double> x;
  std::vector<double> z;
};

/// Tape nodes holding log p(x, z_s) and log q(z_s | x) for every draw s, as
/// length-S vectors.
struct LogNodes {
  Var log_joint;
  Var log_q;
};

/// As LogNodes, with the latents themselves a differentiable (S x dim) node
/// z = mean + std * noise.
struct ReparamNodes {
  Var z;
  Var log_joint;
  Var log_q;
};

/// A latent-variable model p_theta(x, z) paired with its inference network
/// q_phi(z | x). Parameters live in one flat vector whose segments are named
/// "theta/..." or "phi/...".
class LatentModel {
 public:
  virtual ~LatentModel() = default;

  virtual std::string name() const = 0;
  virtual const std::shared_ptr<const ParamLayout>& layout() const = 0;
  virtual LatentKind latent_kind() const = 0;
  virtual std::size_t latent_dim() const = 0;
  virtual std::size_t data_dim() const = 0;

  /// Throws DomainError when x is not a valid observation.
  virtual void check_data(std::span<const double> x) const = 0;

  virtual LatentBatch sample_q(const ParamVector& params, std::span<const double> x, std::size_t count,
                               Rng& rng) const = 0;
  /// Ancestral sample from p_theta(x, z).
  virtual JointSample sample_joint(const ParamVector& params, Rng& rng) const = 0;

  /// Records log p(x, z_s) and log q(z_s | x) with the latents held fixed.
  virtual LogNodes record(Tape& tape, std::span<const double> x, const LatentBatch& latents) const = 0;

  /// Location-scale Gaussian inference networks only.
  virtual bool reparameterizable() const { return false; }
  virtual ReparamNodes record_reparameterized(Tape& tape, std::span<const double> x, const LatentBatch& noise) const;

  virtual ParamVector init_params(Rng& rng) const = 0;

  /// Single-draw conveniences built on record().
  double log_joint(const ParamVector& params, std::span<const double> x, std::span<const double> z) const;
  double log_q(const ParamVector& params, std::span<const double> x, std::span<const double> z) const;
};

/// A recorded and evaluated batch: values of log p and log q per draw, and
/// seeded reverse passes over them.
class ModelEvaluation {
 public:
  ModelEvaluation(const LatentModel& model, const ParamVector& params, std::span<const double> x,
                  const LatentBatch& latents);
  ModelEvaluation(const ModelEvaluation&) = delete;
  ModelEvaluation& operator=(const ModelEvaluation&) = delete;

  std::size_t count() const noexcept { return log_joint_.size(); }
  std::span<const double> log_joint() const noexcept { return log_joint_; }
  std::span<const double> log_q() const noexcept { return log_q_; }

  /// sum_s joint_seed[s] * grad log p(x, z_s) + q_seed[s] * grad log q(z_s | x).
  ParamVector gradient(std::span<const double> joint_seed, std::span<const double> q_seed) const;

 private:
  Tape tape_;
  LogNodes nodes_;
  std::vector<double> log_joint_;
  std::vector<double> log_q_;
};

// ---------------------------------------------------------------------------

/// One-layer sigmoid belief net small enough to enumerate: M binary latents
/// with factorized Bernoulli prior, likelihood logits W(2z - 1) + c and a
/// factorized inference network with logits V(2x - 1) + d.
class ToyBernoulli final : public LatentModel {
 public:
  static constexpr std::size_t kMaxLatents = 12;

  ToyBernoulli(std::size_t latents, std::size_t data_dim);

  std::string name() const override { return "toy"; }
  const std::shared_ptr<const ParamLayout>& layout() const override { return layout_; }
  LatentKind latent_kind() const override { return LatentKind::discrete; }
  std::size_t latent_dim() const override { return latents_; }
  std::size_t data_dim() const override { return data_dim_; }
  void check_data(std::span<const double> x) const override;

  LatentBatch sample_q(const ParamVector& params, std::span<const double> x, std::size_t count,
                       Rng& rng) const override;
  JointSample sample_joint(const ParamVector& params, Rng& rng) const override;
  LogNodes record(Tape& tape, std::span<const double> x, const LatentBatch& latents) const override;
  ParamVector init_params(Rng& rng) const override;

  /// Every parameter drawn from N(0, scale^2).
  ParamVector random_params(Rng& rng, double scale) const;

  /// Plain loops, no tape; the enumeration oracle uses these.
  double log_joint_direct(const ParamVector& params, std::span<const double> x, std::span<const double> z) const;
  double log_q_direct(const ParamVector& params, std::span<const double> x, std::span<const double> z) const;

  /// Sets the inference network to ignore x and reproduce the prior, and zeroes
  /// the likelihood weights, so that q(z|x) equals the posterior exactly.
  void match_posterior_by_decoupling(ParamVector& params) const;

 private:
  std::size_t latents_;
  std::size_t data_dim_;
  std::shared_ptr<const ParamLayout> layout_;
};

/// z ~ N(mu0, sigma0^2), x | z ~ N(z, sigma^2), q(z | x) = N(a x + b, s^2).
/// theta = {mu0}; phi = {a, b, log s}. sigma0 and sigma are fixed.
class ConjugateGaussian final : public LatentModel {
 public:
  ConjugateGaussian(double prior_std, double noise_std);

  std::string name() const override { return "gaussian"; }
  const std::shared_ptr<const ParamLayout>& layout() const override { return layout_; }
  LatentKind latent_kind() const override { return LatentKind::continuous; }
  std::size_t latent_dim() const override { return 1; }
  std::size_t data_dim() const override { return 1; }
  void check_data(std::span<const double> x) const override;

  LatentBatch sample_q(const ParamVector& params, std::span<const double> x, std::size_t count,
                       Rng& rng) const override;
  JointSample sample_joint(const ParamVector& params, Rng& rng) const override;
  LogNodes record(Tape& tape, std::span<const double> x, const LatentBatch& latents) const override;
  bool reparameterizable() const override { return true; }
  ReparamNodes record_reparameterized(Tape& tape, std::span<const double> x, const LatentBatch& noise) const override;
  ParamVector init_params(Rng& rng) const override;

  ParamVector make_params(double prior_mean, double slope, double offset, double log_std) const;
  ParamVector random_params(Rng& rng) const;
  /// Sets (a, b, s) so q(z | x) equals the exact posterior for every x.
  void match_posterior(ParamVector& params) const;

  double prior_std() const noexcept { return prior_std_; }
  double noise_std() const noexcept { return noise_std_; }

 private:
  double prior_std_;
  double noise_std_;
  std::shared_ptr<const ParamLayout> layout_;
};

struct Gaussian1d {
  double mean;
  double var;
};

/// Closed forms for ConjugateGaussian. The path distribution pi_beta is
/// Gaussian with precision beta / v_post + (1 - beta) / s^2 and the
/// instantaneous ELBO is quadratic in z, so its mean and variance under
/// pi_beta follow from Gaussian moments.
namespace analytic {

Gaussian1d posterior(const ConjugateGaussian& model, const ParamVector& params, double x);
Gaussian1d proposal(const ParamVector& params, double x);
Gaussian1d path_distribution(const ConjugateGaussian& model, const ParamVector& params, double x, double beta);

double log_evidence(const ConjugateGaussian& model, const ParamVector& params, double x);
/// g(beta) = E_{pi_beta}[log p(x, z) - log q(z | x)].
double integrand(const ConjugateGaussian& model, const ParamVector& params, double x, double beta);
/// Var_{pi_beta}[log p(x, z) - log q(z | x)].
double integrand_variance(const ConjugateGaussian& model, const ParamVector& params, double x, double beta);

double elbo(const ConjugateGaussian& model, const ParamVector& params, double x);
double kl_proposal_posterior(const ConjugateGaussian& model, const ParamVector& params, double x);
double kl_posterior_proposal(const ConjugateGaussian& model, const ParamVector& params, double x);

/// E_{p(x, z)}[-log q(z | x)] under the model's joint: the inference
/// compilation loss.
double joint_cross_entropy(const ConjugateGaussian& model, const ParamVector& params);

}  // namespace analytic

double analytic_log_evidence(const ConjugateGaussian& model, const ParamVector& params, double x);
double analytic_g(const ConjugateGaussian& model, const ParamVector& params, double x, double beta);

// ---------------------------------------------------------------------------

struct SbnConfig {
  std::size_t data_dim = 784;
  std::size_t latent_dim = 20;
  std::size_t layers = 2;
  bool nonlinear = false;
};

/// Multi-layer sigmoid belief network with an inference network factorized
/// in the opposite direction. Latents are concatenated [z_1 | ... | z_L].
///
///   p(z_L) = Bern(b_L),  p(z_l | z_{l+1}) = Bern(dec_l(2 z_{l+1} - 1)),
///   p(x | z_1) = Bern(dec_x(2 z_1 - 1) + x_tilde)
///   q(z_1 | x) = Bern(enc_1((x - x_bar + 1) / 2)),
///   q(z_l | z_{l-1}) = Bern(enc_l(2 z_{l-1} - 1))
///
/// x_tilde is the logit of the clamped training mean x_bar.
class SigmoidBeliefNet final : public LatentModel {
 public:
  static constexpr double kMeanClamp = 1.0 / 784.0;

  explicit SigmoidBeliefNet(SbnConfig config, std::vector<double> train_mean = {});

  std::string name() const override { return "sbn"; }
  const std::shared_ptr<const ParamLayout>& layout() const override { return layout_; }
  LatentKind latent_kind() const override { return LatentKind::discrete; }
  std::size_t latent_dim() const override { return config_.latent_dim * config_.layers; }
  std::size_t data_dim() const override { return config_.data_dim; }
  void check_data(std::span<const double> x) const override;

  LatentBatch sample_q(const ParamVector& params, std::span<const double> x, std::size_t count,
                       Rng& rng) const override;
  JointSample sample_joint(const ParamVector& params, Rng& rng) const override;
  LogNodes record(Tape& tape, std::span<const double> x, const LatentBatch& latents) const override;
  ParamVector init_params(Rng& rng) const override;

  const SbnConfig& config() const noexcept { return config_; }
  std::span<const double> train_mean() const noexcept { return train_mean_; }
  std::span<const double> output_bias() const noexcept { return output_bias_; }

 private:
  SbnConfig config_;
  std::vector<double> train_mean_;
  std::vector<double> output_bias_;
  std::shared_ptr<const ParamLayout> layout_;
};

struct VaeConfig {
  std::size_t data_dim = 784;
  std::size_t latent_dim = 20;
  std::size_t hidden = 100;
};

/// p(z) = N(0, I), p(x | z) = Bern(decoder(z)) with a three-layer tanh
/// decoder; q(z | x) = N(mean(h), exp(log_std(h))^2) where h is a two-layer
/// tanh trunk shared by the two linear heads.
class GaussianVAE final : public LatentModel {
 public:
  explicit GaussianVAE(VaeConfig config);

  std::string name() const override { return "vae"; }
  const std::shared_ptr<const ParamLayout>& layout() const override { return layout_; }
  LatentKind latent_kind() const override { return LatentKind::continuous; }
  std::size_t latent_dim() const override { return config_.latent_dim; }
  std::size_t data_dim() const override { return config_.data_dim; }
  void check_data(std::span<const double> x) const override;

  LatentBatch sample_q(const ParamVector& params, std::span<const double> x, std::size_t count,
                       Rng& rng) const override;
  JointSample sample_joint(const ParamVector& params, Rng& rng) const override;
  LogNodes record(Tape& tape, std::span<const double> x, const LatentBatch& latents) const override;
  bool reparameterizable() const override { return true; }
  ReparamNodes record_reparameterized(Tape& tape, std::span<const double> x, const LatentBatch& noise) const override;
  ParamVector init_params(Rng& rng) const override;

  /// Encoder mean and log-std for x.
  std::pair<std::vector<double>, std::vector<double>> encode(const ParamVector& params, std::span<const double> x) const;

  const VaeConfig& config() const noexcept { return config_; }

 private:
  LogNodes record_from(Tape& tape, std::span<const double> x, Var z, std::size_t count) const;
  std::pair<Var, Var> record_encoder(Tape& tape, std::span<const double> x) const;

  VaeConfig config_;
  std::shared_ptr<const ParamLayout> layout_;
};

/// Draws Glorot-uniform weights into every "*.weight" segment and zeroes the
/// rest.
void glorot_init(ParamVector& params, Rng& rng);

/// log Bern(z | sigmoid(logit)), stable for large |logit|.
double bernoulli_log_prob(double z, double logit);

}  // namespace tvo

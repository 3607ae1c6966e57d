#include "tvo/models.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "tvo/errors.hpp"

namespace tvo {

namespace {

constexpr double kHalfLog2Pi = 0.91893853320467274178;  // 0.5 * log(2 pi)

double sigmoid(double a) {
  if (a >= 0.0) return 1.0 / (1.0 + std::exp(-a));
  const double e = std::exp(a);
  return e / (1.0 + e);
}

double softplus(double a) { return a > 0.0 ? a + std::log1p(std::exp(-a)) : std::log1p(std::exp(a)); }

void check_binary(std::span<const double> x, std::size_t dim, const std::string& model) {
  if (x.size() != dim) {
    throw StructuralError(model + ": observation has length " + std::to_string(x.size()) + ", expected " +
                          std::to_string(dim));
  }
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (x[i] != 0.0 && x[i] != 1.0) {
      throw DomainError(model + ": Bernoulli likelihood needs binary data, x[" + std::to_string(i) +
                        "] = " + std::to_string(x[i]));
    }
  }
}

// out = in * W + b with W stored [in, out].
std::vector<double> affine(std::span<const double> in, std::span<const double> weight, std::span<const double> bias) {
  const std::size_t out_dim = bias.size();
  std::vector<double> out(bias.begin(), bias.end());
  for (std::size_t i = 0; i < in.size(); ++i) {
    const double v = in[i];
    if (v == 0.0) continue;
    const double* row = weight.data() + i * out_dim;
    for (std::size_t j = 0; j < out_dim; ++j) out[j] += v * row[j];
  }
  return out;
}

std::vector<double> affine(const ParamVector& params, const std::string& prefix, std::span<const double> in) {
  return affine(in, params.segment(prefix + ".weight"), params.segment(prefix + ".bias"));
}

void apply_tanh(std::vector<double>& v) {
  for (double& e : v) e = std::tanh(e);
}

Var record_affine(Tape& tape, const std::string& prefix, Var in) {
  return tape.add_row(tape.matmul(in, tape.param(prefix + ".weight")), tape.param(prefix + ".bias"));
}

// Sum over columns of log Bern(z | logits), one entry per row.
Var record_bernoulli(Tape& tape, Var z, Var logits) {
  return tape.sum_rows(tape.sub(tape.mul(z, logits), tape.softplus(logits)));
}

void add_affine(ParamLayout& layout, const std::string& prefix, std::size_t in, std::size_t out) {
  layout.add(prefix + ".weight", {in, out});
  layout.add(prefix + ".bias", {out});
}

// Binary rows as a (rows x cols) constant and its +-1 version.
std::pair<RealArray, RealArray> binary_block(const LatentBatch& latents, std::size_t begin, std::size_t width) {
  std::vector<double> z(latents.count * width), pm(latents.count * width);
  for (std::size_t s = 0; s < latents.count; ++s) {
    auto row = latents.row(s);
    for (std::size_t j = 0; j < width; ++j) {
      z[s * width + j] = row[begin + j];
      pm[s * width + j] = 2.0 * row[begin + j] - 1.0;
    }
  }
  return {RealArray::matrix(latents.count, width, std::move(z)), RealArray::matrix(latents.count, width, std::move(pm))};
}

RealArray repeat_rows(std::span<const double> x, std::size_t rows) {
  std::vector<double> v;
  v.reserve(rows * x.size());
  for (std::size_t s = 0; s < rows; ++s) v.insert(v.end(), x.begin(), x.end());
  return RealArray::matrix(rows, x.size(), std::move(v));
}

}  // namespace

double bernoulli_log_prob(double z, double logit) { return z * logit - softplus(logit); }

void glorot_init(ParamVector& params, Rng& rng) {
  for (const Segment& seg : params.layout().segments()) {
    auto values = params.segment(seg.name);
    if (seg.name.ends_with(".weight") && seg.shape.size() == 2) {
      const double limit = std::sqrt(6.0 / static_cast<double>(seg.shape[0] + seg.shape[1]));
      for (double& v : values) v = limit * (2.0 * rng.uniform() - 1.0);
    } else {
      std::fill(values.begin(), values.end(), 0.0);
    }
  }
}

// ---------------------------------------------------------------------------

ReparamNodes LatentModel::record_reparameterized(Tape&, std::span<const double>, const LatentBatch&) const {
  throw UnsupportedError(name() + ": the inference network is not reparameterizable");
}

double LatentModel::log_joint(const ParamVector& params, std::span<const double> x, std::span<const double> z) const {
  LatentBatch batch(1, z.size());
  std::copy(z.begin(), z.end(), batch.values.begin());
  return ModelEvaluation(*this, params, x, batch).log_joint()[0];
}

double LatentModel::log_q(const ParamVector& params, std::span<const double> x, std::span<const double> z) const {
  LatentBatch batch(1, z.size());
  std::copy(z.begin(), z.end(), batch.values.begin());
  return ModelEvaluation(*this, params, x, batch).log_q()[0];
}

ModelEvaluation::ModelEvaluation(const LatentModel& model, const ParamVector& params, std::span<const double> x,
                                 const LatentBatch& latents) {
  if (latents.count == 0) throw StructuralError("model evaluation needs at least one latent draw");
  if (latents.dim != model.latent_dim()) {
    throw StructuralError(model.name() + ": latent rows have width " + std::to_string(latents.dim) + ", expected " +
                          std::to_string(model.latent_dim()));
  }
  model.check_data(x);
  nodes_ = model.record(tape_, x, latents);
  tape_.evaluate(params);
  const auto& lj = tape_.value(nodes_.log_joint).data;
  const auto& lq = tape_.value(nodes_.log_q).data;
  log_joint_.assign(lj.begin(), lj.end());
  log_q_.assign(lq.begin(), lq.end());
}

ParamVector ModelEvaluation::gradient(std::span<const double> joint_seed, std::span<const double> q_seed) const {
  const Seed seeds[] = {{nodes_.log_joint, joint_seed}, {nodes_.log_q, q_seed}};
  return tape_.backward(seeds);
}

// ---------------------------------------------------------------------------
// ToyBernoulli

ToyBernoulli::ToyBernoulli(std::size_t latents, std::size_t data_dim) : latents_(latents), data_dim_(data_dim) {
  if (latents == 0 || latents > kMaxLatents) {
    throw DomainError("toy model needs 1.." + std::to_string(kMaxLatents) + " latents");
  }
  if (data_dim == 0) throw DomainError("toy model needs at least one observed dimension");
  auto layout = std::make_shared<ParamLayout>();
  layout->add("theta/prior_logits", {latents});
  layout->add("theta/decoder.weight", {latents, data_dim});
  layout->add("theta/decoder.bias", {data_dim});
  layout->add("phi/encoder.weight", {data_dim, latents});
  layout->add("phi/encoder.bias", {latents});
  layout_ = std::move(layout);
}

void ToyBernoulli::check_data(std::span<const double> x) const { check_binary(x, data_dim_, "toy"); }

LatentBatch ToyBernoulli::sample_q(const ParamVector& params, std::span<const double> x, std::size_t count,
                                   Rng& rng) const {
  check_data(x);
  std::vector<double> pm(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) pm[i] = 2.0 * x[i] - 1.0;
  const auto logits = affine(params, "phi/encoder", pm);
  LatentBatch out(count, latents_);
  for (std::size_t s = 0; s < count; ++s) {
    auto row = out.row(s);
    for (std::size_t m = 0; m < latents_; ++m) row[m] = rng.bernoulli(sigmoid(logits[m])) ? 1.0 : 0.0;
  }
  return out;
}

JointSample ToyBernoulli::sample_joint(const ParamVector& params, Rng& rng) const {
  JointSample out;
  auto prior = params.segment("theta/prior_logits");
  out.z.resize(latents_);
  std::vector<double> pm(latents_);
  for (std::size_t m = 0; m < latents_; ++m) {
    out.z[m] = rng.bernoulli(sigmoid(prior[m])) ? 1.0 : 0.0;
    pm[m] = 2.0 * out.z[m] - 1.0;
  }
  const auto logits = affine(params, "theta/decoder", pm);
  out.x.resize(data_dim_);
  for (std::size_t i = 0; i < data_dim_; ++i) out.x[i] = rng.bernoulli(sigmoid(logits[i])) ? 1.0 : 0.0;
  return out;
}

LogNodes ToyBernoulli::record(Tape& tape, std::span<const double> x, const LatentBatch& latents) const {
  const std::size_t n = latents.count;
  auto [z, pm] = binary_block(latents, 0, latents_);
  Var zc = tape.constant(std::move(z));
  Var pmc = tape.constant(std::move(pm));

  Var prior = record_bernoulli(tape, zc, tape.broadcast_rows(tape.param("theta/prior_logits"), n));
  Var lik_logits = record_affine(tape, "theta/decoder", pmc);
  Var lik = record_bernoulli(tape, tape.constant(repeat_rows(x, n)), lik_logits);

  std::vector<double> xpm(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) xpm[i] = 2.0 * x[i] - 1.0;
  Var q_logits = record_affine(tape, "phi/encoder", tape.constant(RealArray::matrix(1, x.size(), std::move(xpm))));
  Var lq = record_bernoulli(tape, zc, tape.broadcast_rows(q_logits, n));
  return {tape.add(prior, lik), lq};
}

ParamVector ToyBernoulli::init_params(Rng& rng) const {
  ParamVector p(layout_);
  glorot_init(p, rng);
  return p;
}

ParamVector ToyBernoulli::random_params(Rng& rng, double scale) const {
  ParamVector p(layout_);
  for (double& v : p.values()) v = scale * rng.normal();
  return p;
}

double ToyBernoulli::log_joint_direct(const ParamVector& params, std::span<const double> x,
                                      std::span<const double> z) const {
  auto prior = params.segment("theta/prior_logits");
  auto w = params.segment("theta/decoder.weight");
  auto c = params.segment("theta/decoder.bias");
  double total = 0.0;
  for (std::size_t m = 0; m < latents_; ++m) total += bernoulli_log_prob(z[m], prior[m]);
  for (std::size_t i = 0; i < data_dim_; ++i) {
    double logit = c[i];
    for (std::size_t m = 0; m < latents_; ++m) logit += (2.0 * z[m] - 1.0) * w[m * data_dim_ + i];
    total += bernoulli_log_prob(x[i], logit);
  }
  return total;
}

double ToyBernoulli::log_q_direct(const ParamVector& params, std::span<const double> x,
                                  std::span<const double> z) const {
  auto v = params.segment("phi/encoder.weight");
  auto d = params.segment("phi/encoder.bias");
  double total = 0.0;
  for (std::size_t m = 0; m < latents_; ++m) {
    double logit = d[m];
    for (std::size_t i = 0; i < data_dim_; ++i) logit += (2.0 * x[i] - 1.0) * v[i * latents_ + m];
    total += bernoulli_log_prob(z[m], logit);
  }
  return total;
}

void ToyBernoulli::match_posterior_by_decoupling(ParamVector& params) const {
  auto w = params.segment("theta/decoder.weight");
  std::fill(w.begin(), w.end(), 0.0);
  auto v = params.segment("phi/encoder.weight");
  std::fill(v.begin(), v.end(), 0.0);
  auto prior = params.segment("theta/prior_logits");
  auto d = params.segment("phi/encoder.bias");
  std::copy(prior.begin(), prior.end(), d.begin());
}

// ---------------------------------------------------------------------------
// ConjugateGaussian

ConjugateGaussian::ConjugateGaussian(double prior_std, double noise_std) : prior_std_(prior_std), noise_std_(noise_std) {
  if (!(prior_std > 0.0) || !(noise_std > 0.0)) throw DomainError("conjugate Gaussian needs positive scales");
  auto layout = std::make_shared<ParamLayout>();
  layout->add("theta/prior_mean", {});
  layout->add("phi/slope", {});
  layout->add("phi/offset", {});
  layout->add("phi/log_std", {});
  layout_ = std::move(layout);
}

void ConjugateGaussian::check_data(std::span<const double> x) const {
  if (x.size() != 1) throw StructuralError("gaussian: observation must be a scalar");
  if (!std::isfinite(x[0])) throw DomainError("gaussian: observation must be finite");
}

LatentBatch ConjugateGaussian::sample_q(const ParamVector& params, std::span<const double> x, std::size_t count,
                                        Rng& rng) const {
  check_data(x);
  const Gaussian1d q = analytic::proposal(params, x[0]);
  const double sd = std::sqrt(q.var);
  LatentBatch out(count, 1);
  for (std::size_t s = 0; s < count; ++s) out.values[s] = q.mean + sd * rng.normal();
  return out;
}

JointSample ConjugateGaussian::sample_joint(const ParamVector& params, Rng& rng) const {
  const double z = params.segment("theta/prior_mean")[0] + prior_std_ * rng.normal();
  const double x = z + noise_std_ * rng.normal();
  return {{x}, {z}};
}

namespace {

// log N(z | mean, sd^2) for a vector node z and scalar-node mean.
Var gaussian_log_density(Tape& tape, Var z, Var mean, double sd) {
  Var sq = tape.square(tape.sub(z, mean));
  return tape.shift(tape.scale(sq, -0.5 / (sd * sd)), -kHalfLog2Pi - std::log(sd));
}

}  // namespace

LogNodes ConjugateGaussian::record(Tape& tape, std::span<const double> x, const LatentBatch& latents) const {
  Var z = tape.constant(RealArray::vector(latents.values));
  Var xc = tape.constant(x[0]);
  Var log_joint = tape.add(gaussian_log_density(tape, z, tape.param("theta/prior_mean"), prior_std_),
                           gaussian_log_density(tape, xc, z, noise_std_));
  Var mean = tape.add(tape.scale(tape.param("phi/slope"), x[0]), tape.param("phi/offset"));
  Var log_std = tape.param("phi/log_std");
  Var u = tape.mul(tape.sub(z, mean), tape.exp(tape.neg(log_std)));
  Var lq = tape.sub(tape.shift(tape.scale(tape.square(u), -0.5), -kHalfLog2Pi), log_std);
  return {log_joint, lq};
}

ReparamNodes ConjugateGaussian::record_reparameterized(Tape& tape, std::span<const double> x,
                                                       const LatentBatch& noise) const {
  check_data(x);
  Var eps = tape.constant(RealArray::vector(noise.values));
  Var mean = tape.add(tape.scale(tape.param("phi/slope"), x[0]), tape.param("phi/offset"));
  Var log_std = tape.param("phi/log_std");
  Var z = tape.add(mean, tape.mul(tape.exp(log_std), eps));
  Var xc = tape.constant(x[0]);
  Var log_joint = tape.add(gaussian_log_density(tape, z, tape.param("theta/prior_mean"), prior_std_),
                           gaussian_log_density(tape, xc, z, noise_std_));
  Var u = tape.mul(tape.sub(z, mean), tape.exp(tape.neg(log_std)));
  Var lq = tape.sub(tape.shift(tape.scale(tape.square(u), -0.5), -kHalfLog2Pi), log_std);
  return {z, log_joint, lq};
}

ParamVector ConjugateGaussian::init_params(Rng&) const { return ParamVector(layout_); }

ParamVector ConjugateGaussian::make_params(double prior_mean, double slope, double offset, double log_std) const {
  return ParamVector(layout_, {prior_mean, slope, offset, log_std});
}

ParamVector ConjugateGaussian::random_params(Rng& rng) const {
  return make_params(rng.normal(), 2.0 * rng.uniform() - 1.0, rng.normal(), -1.0 + rng.uniform());
}

void ConjugateGaussian::match_posterior(ParamVector& params) const {
  // Posterior mean v (mu0 / v0 + x / vn) is affine in x.
  const double v0 = prior_std_ * prior_std_;
  const double vn = noise_std_ * noise_std_;
  const double var = 1.0 / (1.0 / v0 + 1.0 / vn);
  params.segment("phi/slope")[0] = var / vn;
  params.segment("phi/offset")[0] = var * params.segment("theta/prior_mean")[0] / v0;
  params.segment("phi/log_std")[0] = 0.5 * std::log(var);
}

namespace analytic {

Gaussian1d posterior(const ConjugateGaussian& model, const ParamVector& params, double x) {
  const double v0 = model.prior_std() * model.prior_std();
  const double vn = model.noise_std() * model.noise_std();
  const double mu0 = params.segment("theta/prior_mean")[0];
  const double var = 1.0 / (1.0 / v0 + 1.0 / vn);
  return {var * (mu0 / v0 + x / vn), var};
}

Gaussian1d proposal(const ParamVector& params, double x) {
  const double a = params.segment("phi/slope")[0];
  const double b = params.segment("phi/offset")[0];
  const double ls = params.segment("phi/log_std")[0];
  return {a * x + b, std::exp(2.0 * ls)};
}

Gaussian1d path_distribution(const ConjugateGaussian& model, const ParamVector& params, double x, double beta) {
  const Gaussian1d post = posterior(model, params, x);
  const Gaussian1d q = proposal(params, x);
  const double precision = beta / post.var + (1.0 - beta) / q.var;
  const double mean = (beta * post.mean / post.var + (1.0 - beta) * q.mean / q.var) / precision;
  return {mean, 1.0 / precision};
}

double log_evidence(const ConjugateGaussian& model, const ParamVector& params, double x) {
  const double mu0 = params.segment("theta/prior_mean")[0];
  const double var = model.prior_std() * model.prior_std() + model.noise_std() * model.noise_std();
  return -0.5 * std::log(2.0 * std::numbers::pi * var) - 0.5 * (x - mu0) * (x - mu0) / var;
}

namespace {

// U'(z) = log p(x) + log N(z | m_post, v_post) - log N(z | m_q, v_q)
//       = c + alpha (z - m)^2 + gamma (z - m) around m = the path mean.
struct Quadratic {
  double constant;
  double alpha;
  double gamma;
  Gaussian1d path;
};

Quadratic expand(const ConjugateGaussian& model, const ParamVector& params, double x, double beta) {
  const Gaussian1d post = posterior(model, params, x);
  const Gaussian1d q = proposal(params, x);
  const Gaussian1d path = path_distribution(model, params, x, beta);
  const double m = path.mean;
  const double dp = m - post.mean;
  const double dq = m - q.mean;
  Quadratic out{};
  out.path = path;
  out.alpha = -0.5 / post.var + 0.5 / q.var;
  out.gamma = -dp / post.var + dq / q.var;
  out.constant = log_evidence(model, params, x) - 0.5 * std::log(post.var) + 0.5 * std::log(q.var) -
                 0.5 * dp * dp / post.var + 0.5 * dq * dq / q.var;
  return out;
}

double kl(const Gaussian1d& a, const Gaussian1d& b) {
  return 0.5 * (std::log(b.var / a.var) + (a.var + (a.mean - b.mean) * (a.mean - b.mean)) / b.var - 1.0);
}

}  // namespace

double integrand(const ConjugateGaussian& model, const ParamVector& params, double x, double beta) {
  const Quadratic u = expand(model, params, x, beta);
  return u.constant + u.alpha * u.path.var;
}

double integrand_variance(const ConjugateGaussian& model, const ParamVector& params, double x, double beta) {
  const Quadratic u = expand(model, params, x, beta);
  const double v = u.path.var;
  return 2.0 * u.alpha * u.alpha * v * v + u.gamma * u.gamma * v;
}

double elbo(const ConjugateGaussian& model, const ParamVector& params, double x) {
  return log_evidence(model, params, x) - kl_proposal_posterior(model, params, x);
}

double kl_proposal_posterior(const ConjugateGaussian& model, const ParamVector& params, double x) {
  return kl(proposal(params, x), posterior(model, params, x));
}

double kl_posterior_proposal(const ConjugateGaussian& model, const ParamVector& params, double x) {
  return kl(posterior(model, params, x), proposal(params, x));
}

double joint_cross_entropy(const ConjugateGaussian& model, const ParamVector& params) {
  const double a = params.segment("phi/slope")[0];
  const double b = params.segment("phi/offset")[0];
  const double ls = params.segment("phi/log_std")[0];
  const double mu0 = params.segment("theta/prior_mean")[0];
  const double v0 = model.prior_std() * model.prior_std();
  const double vn = model.noise_std() * model.noise_std();
  // z - a x - b = (1 - a) z - a eps - b with z ~ N(mu0, v0), eps ~ N(0, vn).
  const double mean = (1.0 - a) * mu0 - b;
  const double second = (1.0 - a) * (1.0 - a) * v0 + a * a * vn + mean * mean;
  return kHalfLog2Pi + ls + 0.5 * second * std::exp(-2.0 * ls);
}

}  // namespace analytic

double analytic_log_evidence(const ConjugateGaussian& model, const ParamVector& params, double x) {
  return analytic::log_evidence(model, params, x);
}

double analytic_g(const ConjugateGaussian& model, const ParamVector& params, double x, double beta) {
  if (!(beta >= 0.0 && beta <= 1.0)) throw DomainError("beta must lie in [0, 1]");
  return analytic::integrand(model, params, x, beta);
}

// ---------------------------------------------------------------------------
// SigmoidBeliefNet

namespace {

std::string sbn_prefix(const char* role, std::size_t layer) { return std::string(role) + std::to_string(layer); }

void add_map(ParamLayout& layout, const std::string& prefix, std::size_t in, std::size_t out, std::size_t hidden,
             bool nonlinear) {
  if (!nonlinear) {
    add_affine(layout, prefix, in, out);
    return;
  }
  add_affine(layout, prefix + ".l1", in, hidden);
  add_affine(layout, prefix + ".l2", hidden, hidden);
  add_affine(layout, prefix + ".l3", hidden, out);
}

std::vector<double> apply_map(const ParamVector& params, const std::string& prefix, bool nonlinear,
                              std::span<const double> in) {
  if (!nonlinear) return affine(params, prefix, in);
  auto h = affine(params, prefix + ".l1", in);
  apply_tanh(h);
  auto h2 = affine(params, prefix + ".l2", h);
  apply_tanh(h2);
  return affine(params, prefix + ".l3", h2);
}

Var record_map(Tape& tape, const std::string& prefix, bool nonlinear, Var in) {
  if (!nonlinear) return record_affine(tape, prefix, in);
  Var h = tape.tanh(record_affine(tape, prefix + ".l1", in));
  Var h2 = tape.tanh(record_affine(tape, prefix + ".l2", h));
  return record_affine(tape, prefix + ".l3", h2);
}

}  // namespace

SigmoidBeliefNet::SigmoidBeliefNet(SbnConfig config, std::vector<double> train_mean)
    : config_(config), train_mean_(std::move(train_mean)) {
  if (config_.data_dim == 0 || config_.latent_dim == 0 || config_.layers == 0) {
    throw DomainError("sbn: dimensions and layer count must be positive");
  }
  if (train_mean_.empty()) train_mean_.assign(config_.data_dim, 0.5);
  if (train_mean_.size() != config_.data_dim) throw StructuralError("sbn: training mean has the wrong length");
  output_bias_.resize(config_.data_dim);
  for (std::size_t i = 0; i < config_.data_dim; ++i) {
    const double m = std::clamp(train_mean_[i], kMeanClamp, 1.0 - kMeanClamp);
    output_bias_[i] = std::log(m / (1.0 - m));
  }

  const std::size_t dz = config_.latent_dim;
  const bool nl = config_.nonlinear;
  auto layout = std::make_shared<ParamLayout>();
  layout->add("theta/prior_logits", {dz});
  for (std::size_t l = config_.layers - 1; l >= 1; --l) add_map(*layout, sbn_prefix("theta/decoder", l), dz, dz, dz, nl);
  add_map(*layout, "theta/decoder_x", dz, config_.data_dim, dz, nl);
  add_map(*layout, "phi/encoder1", config_.data_dim, dz, dz, nl);
  for (std::size_t l = 2; l <= config_.layers; ++l) add_map(*layout, sbn_prefix("phi/encoder", l), dz, dz, dz, nl);
  layout_ = std::move(layout);
}

void SigmoidBeliefNet::check_data(std::span<const double> x) const { check_binary(x, config_.data_dim, "sbn"); }

LatentBatch SigmoidBeliefNet::sample_q(const ParamVector& params, std::span<const double> x, std::size_t count,
                                       Rng& rng) const {
  check_data(x);
  const std::size_t dz = config_.latent_dim;
  std::vector<double> centred(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) centred[i] = (x[i] - train_mean_[i] + 1.0) / 2.0;
  const auto first_logits = apply_map(params, "phi/encoder1", config_.nonlinear, centred);

  LatentBatch out(count, latent_dim());
  std::vector<double> pm(dz);
  for (std::size_t s = 0; s < count; ++s) {
    auto row = out.row(s);
    for (std::size_t j = 0; j < dz; ++j) row[j] = rng.bernoulli(sigmoid(first_logits[j])) ? 1.0 : 0.0;
    for (std::size_t l = 2; l <= config_.layers; ++l) {
      for (std::size_t j = 0; j < dz; ++j) pm[j] = 2.0 * row[(l - 2) * dz + j] - 1.0;
      const auto logits = apply_map(params, sbn_prefix("phi/encoder", l), config_.nonlinear, pm);
      for (std::size_t j = 0; j < dz; ++j) row[(l - 1) * dz + j] = rng.bernoulli(sigmoid(logits[j])) ? 1.0 : 0.0;
    }
  }
  return out;
}

JointSample SigmoidBeliefNet::sample_joint(const ParamVector& params, Rng& rng) const {
  const std::size_t dz = config_.latent_dim;
  const std::size_t L = config_.layers;
  JointSample out;
  out.z.assign(latent_dim(), 0.0);
  auto prior = params.segment("theta/prior_logits");
  for (std::size_t j = 0; j < dz; ++j) out.z[(L - 1) * dz + j] = rng.bernoulli(sigmoid(prior[j])) ? 1.0 : 0.0;
  std::vector<double> pm(dz);
  for (std::size_t l = L - 1; l >= 1; --l) {
    for (std::size_t j = 0; j < dz; ++j) pm[j] = 2.0 * out.z[l * dz + j] - 1.0;
    const auto logits = apply_map(params, sbn_prefix("theta/decoder", l), config_.nonlinear, pm);
    for (std::size_t j = 0; j < dz; ++j) out.z[(l - 1) * dz + j] = rng.bernoulli(sigmoid(logits[j])) ? 1.0 : 0.0;
  }
  for (std::size_t j = 0; j < dz; ++j) pm[j] = 2.0 * out.z[j] - 1.0;
  auto logits = apply_map(params, "theta/decoder_x", config_.nonlinear, pm);
  out.x.resize(config_.data_dim);
  for (std::size_t i = 0; i < config_.data_dim; ++i) {
    out.x[i] = rng.bernoulli(sigmoid(logits[i] + output_bias_[i])) ? 1.0 : 0.0;
  }
  return out;
}

LogNodes SigmoidBeliefNet::record(Tape& tape, std::span<const double> x, const LatentBatch& latents) const {
  const std::size_t n = latents.count;
  const std::size_t dz = config_.latent_dim;
  const std::size_t L = config_.layers;
  const bool nl = config_.nonlinear;

  std::vector<Var> z(L), pm(L);
  for (std::size_t l = 0; l < L; ++l) {
    auto [zl, pml] = binary_block(latents, l * dz, dz);
    z[l] = tape.constant(std::move(zl));
    pm[l] = tape.constant(std::move(pml));
  }

  std::vector<double> centred(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) centred[i] = (x[i] - train_mean_[i] + 1.0) / 2.0;
  Var first = record_map(tape, "phi/encoder1", nl, tape.constant(RealArray::matrix(1, x.size(), std::move(centred))));
  Var lq = record_bernoulli(tape, z[0], tape.broadcast_rows(first, n));
  for (std::size_t l = 2; l <= L; ++l) {
    lq = tape.add(lq, record_bernoulli(tape, z[l - 1], record_map(tape, sbn_prefix("phi/encoder", l), nl, pm[l - 2])));
  }

  Var lp = record_bernoulli(tape, z[L - 1], tape.broadcast_rows(tape.param("theta/prior_logits"), n));
  for (std::size_t l = L - 1; l >= 1; --l) {
    lp = tape.add(lp, record_bernoulli(tape, z[l - 1], record_map(tape, sbn_prefix("theta/decoder", l), nl, pm[l])));
  }
  Var x_logits = tape.add_row(record_map(tape, "theta/decoder_x", nl, pm[0]), tape.constant(RealArray::vector(output_bias_)));
  lp = tape.add(lp, record_bernoulli(tape, tape.constant(repeat_rows(x, n)), x_logits));
  return {lp, lq};
}

ParamVector SigmoidBeliefNet::init_params(Rng& rng) const {
  ParamVector p(layout_);
  glorot_init(p, rng);
  return p;
}

// ---------------------------------------------------------------------------
// GaussianVAE

GaussianVAE::GaussianVAE(VaeConfig config) : config_(config) {
  if (config_.data_dim == 0 || config_.latent_dim == 0 || config_.hidden == 0) {
    throw DomainError("vae: dimensions must be positive");
  }
  const std::size_t h = config_.hidden;
  auto layout = std::make_shared<ParamLayout>();
  add_affine(*layout, "theta/decoder.l1", config_.latent_dim, h);
  add_affine(*layout, "theta/decoder.l2", h, h);
  add_affine(*layout, "theta/decoder.l3", h, config_.data_dim);
  add_affine(*layout, "phi/encoder.l1", config_.data_dim, h);
  add_affine(*layout, "phi/encoder.l2", h, h);
  add_affine(*layout, "phi/encoder.mean", h, config_.latent_dim);
  add_affine(*layout, "phi/encoder.log_std", h, config_.latent_dim);
  layout_ = std::move(layout);
}

void GaussianVAE::check_data(std::span<const double> x) const { check_binary(x, config_.data_dim, "vae"); }

std::pair<std::vector<double>, std::vector<double>> GaussianVAE::encode(const ParamVector& params,
                                                                        std::span<const double> x) const {
  auto h = affine(params, "phi/encoder.l1", x);
  apply_tanh(h);
  auto h2 = affine(params, "phi/encoder.l2", h);
  apply_tanh(h2);
  return {affine(params, "phi/encoder.mean", h2), affine(params, "phi/encoder.log_std", h2)};
}

LatentBatch GaussianVAE::sample_q(const ParamVector& params, std::span<const double> x, std::size_t count,
                                  Rng& rng) const {
  check_data(x);
  const auto [mean, log_std] = encode(params, x);
  LatentBatch out(count, config_.latent_dim);
  for (std::size_t s = 0; s < count; ++s) {
    auto row = out.row(s);
    for (std::size_t d = 0; d < config_.latent_dim; ++d) row[d] = mean[d] + std::exp(log_std[d]) * rng.normal();
  }
  return out;
}

JointSample GaussianVAE::sample_joint(const ParamVector& params, Rng& rng) const {
  JointSample out;
  out.z.resize(config_.latent_dim);
  for (double& v : out.z) v = rng.normal();
  auto h = affine(params, "theta/decoder.l1", out.z);
  apply_tanh(h);
  auto h2 = affine(params, "theta/decoder.l2", h);
  apply_tanh(h2);
  const auto logits = affine(params, "theta/decoder.l3", h2);
  out.x.resize(config_.data_dim);
  for (std::size_t i = 0; i < config_.data_dim; ++i) out.x[i] = rng.bernoulli(sigmoid(logits[i])) ? 1.0 : 0.0;
  return out;
}

std::pair<Var, Var> GaussianVAE::record_encoder(Tape& tape, std::span<const double> x) const {
  Var xc = tape.constant(RealArray::matrix(1, x.size(), std::vector<double>(x.begin(), x.end())));
  Var h = tape.tanh(record_affine(tape, "phi/encoder.l1", xc));
  Var h2 = tape.tanh(record_affine(tape, "phi/encoder.l2", h));
  return {record_affine(tape, "phi/encoder.mean", h2), record_affine(tape, "phi/encoder.log_std", h2)};
}

LogNodes GaussianVAE::record_from(Tape& tape, std::span<const double> x, Var z, std::size_t count) const {
  const double dz = static_cast<double>(config_.latent_dim);
  auto [mean, log_std] = record_encoder(tape, x);
  Var m = tape.broadcast_rows(mean, count);
  Var ls = tape.broadcast_rows(log_std, count);
  Var u = tape.mul(tape.sub(z, m), tape.exp(tape.neg(ls)));
  Var lq = tape.shift(tape.sum_rows(tape.sub(tape.scale(tape.square(u), -0.5), ls)), -dz * kHalfLog2Pi);

  Var prior = tape.shift(tape.sum_rows(tape.scale(tape.square(z), -0.5)), -dz * kHalfLog2Pi);
  Var h = tape.tanh(record_affine(tape, "theta/decoder.l1", z));
  Var h2 = tape.tanh(record_affine(tape, "theta/decoder.l2", h));
  Var logits = record_affine(tape, "theta/decoder.l3", h2);
  Var lik = record_bernoulli(tape, tape.constant(repeat_rows(x, count)), logits);
  return {tape.add(prior, lik), lq};
}

LogNodes GaussianVAE::record(Tape& tape, std::span<const double> x, const LatentBatch& latents) const {
  Var z = tape.constant(RealArray::matrix(latents.count, latents.dim, latents.values));
  return record_from(tape, x, z, latents.count);
}

ReparamNodes GaussianVAE::record_reparameterized(Tape& tape, std::span<const double> x, const LatentBatch& noise) const {
  check_data(x);
  if (noise.dim != config_.latent_dim) throw StructuralError("vae: noise rows have the wrong width");
  auto [mean, log_std] = record_encoder(tape, x);
  Var eps = tape.constant(RealArray::matrix(noise.count, noise.dim, noise.values));
  Var z = tape.add(tape.broadcast_rows(mean, noise.count),
                   tape.mul(tape.exp(tape.broadcast_rows(log_std, noise.count)), eps));
  LogNodes nodes = record_from(tape, x, z, noise.count);
  return {z, nodes.log_joint, nodes.log_q};
}

ParamVector GaussianVAE::init_params(Rng& rng) const {
  ParamVector p(layout_);
  glorot_init(p, rng);
  return p;
}

}  // namespace tvo

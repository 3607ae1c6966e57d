#include "tvo/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <iostream>
#include <iterator>

#include "tvo/checkpoint.hpp"
#include "tvo/errors.hpp"
#include "tvo/estimators.hpp"
#include "tvo/parallel.hpp"
#include "tvo/rng.hpp"

namespace tvo {

bool adam_step(AdamState& state, ParamVector& params, std::span<const double> gradient, bool maximize) {
  const std::size_t D = params.size();
  if (gradient.size() != D || state.m.size() != D || state.v.size() != D) {
    throw StructuralError("adam: gradient, moments and parameters must have the same length");
  }
  for (std::size_t d = 0; d < D; ++d) {
    if (!std::isfinite(gradient[d])) {
      std::cerr << "adam: skipped step " << state.step + 1 << ", non-finite gradient at coordinate " << d << '\n';
      return false;
    }
  }
  ++state.step;
  const double sign = maximize ? -1.0 : 1.0;
  const double c1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
  for (std::size_t d = 0; d < D; ++d) {
    const double g = sign * gradient[d];
    state.m[d] = state.beta1 * state.m[d] + (1.0 - state.beta1) * g;
    state.v[d] = state.beta2 * state.v[d] + (1.0 - state.beta2) * g * g;
    params[d] -= state.lr * (state.m[d] / c1) / (std::sqrt(state.v[d] / c2) + state.eps);
  }
  return true;
}

// ---------------------------------------------------------------------------
// IDX files

namespace {

constexpr std::uint32_t kImageMagic = 0x00000803;
constexpr std::uint32_t kLabelMagic = 0x00000801;

std::string read_file(const std::filesystem::path& path) {
  std::ifstream file(path, std::ios::binary);
  if (!file) throw IoError("cannot open " + path.string());
  return std::string(std::istreambuf_iterator<char>(file), {});
}

std::uint32_t be32(const std::string& bytes, std::size_t offset, const char* what) {
  if (bytes.size() < offset + 4) throw FormatError(std::string("truncated IDX header reading ") + what, bytes.size());
  std::uint32_t v = 0;
  for (std::size_t i = 0; i < 4; ++i) v = (v << 8) | static_cast<unsigned char>(bytes[offset + i]);
  return v;
}

}  // namespace

Dataset read_idx_images(const std::filesystem::path& path, double threshold) {
  const std::string bytes = read_file(path);
  const std::uint32_t magic = be32(bytes, 0, "magic number");
  if (magic != kImageMagic) throw FormatError("wrong IDX image magic " + std::to_string(magic), 0);
  const std::size_t n = be32(bytes, 4, "item count");
  const std::size_t rows = be32(bytes, 8, "row count");
  const std::size_t cols = be32(bytes, 12, "column count");
  const std::size_t dim = rows * cols;
  const std::size_t needed = 16 + n * dim;
  if (bytes.size() < needed) {
    throw FormatError("truncated IDX image data: expected " + std::to_string(needed) + " bytes", bytes.size());
  }
  Dataset out(n, std::vector<double>(dim));
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < dim; ++j) {
      const double pixel = static_cast<unsigned char>(bytes[16 + i * dim + j]) / 255.0;
      out[i][j] = pixel >= threshold ? 1.0 : 0.0;
    }
  }
  return out;
}

std::vector<std::uint8_t> read_idx_labels(const std::filesystem::path& path) {
  const std::string bytes = read_file(path);
  const std::uint32_t magic = be32(bytes, 0, "magic number");
  if (magic != kLabelMagic) throw FormatError("wrong IDX label magic " + std::to_string(magic), 0);
  const std::size_t n = be32(bytes, 4, "item count");
  if (bytes.size() < 8 + n) {
    throw FormatError("truncated IDX label data: expected " + std::to_string(8 + n) + " bytes", bytes.size());
  }
  return {bytes.begin() + 8, bytes.begin() + 8 + static_cast<std::ptrdiff_t>(n)};
}

MnistSplit load_mnist(const std::filesystem::path& dir, std::size_t limit, double threshold) {
  constexpr std::size_t kTrainSize = 50000;
  Dataset full = read_idx_images(dir / "train-images-idx3-ubyte", threshold);
  MnistSplit split;
  const std::size_t cut = std::min(kTrainSize, full.size());
  split.train.assign(std::make_move_iterator(full.begin()), std::make_move_iterator(full.begin() + cut));
  split.validation.assign(std::make_move_iterator(full.begin() + cut), std::make_move_iterator(full.end()));
  split.test = read_idx_images(dir / "t10k-images-idx3-ubyte", threshold);
  if (limit > 0 && split.train.size() > limit) split.train.resize(limit);
  return split;
}

std::vector<double> dataset_mean(const Dataset& data) {
  if (data.empty()) throw DomainError("mean of an empty dataset");
  std::vector<double> mean(data.front().size(), 0.0);
  for (const auto& x : data) {
    for (std::size_t i = 0; i < mean.size(); ++i) mean[i] += x[i];
  }
  for (double& v : mean) v /= static_cast<double>(data.size());
  return mean;
}

// ---------------------------------------------------------------------------
// Configuration

PartitionSchedule RunConfig::schedule() const { return make_schedule(K, beta1, spacing); }

ObjectiveSpec RunConfig::objective_spec() const {
  ObjectiveSpec spec = ObjectiveSpec::make(objective, schedule(), S, optimize, data_source);
  spec.method = method;
  spec.crn = crn;
  return spec;
}

void RunConfig::validate() const {
  if (model != "sbn" && model != "vae" && model != "toy" && model != "gaussian") {
    throw ConfigError("unknown model '" + model + "' (expected sbn, vae, toy or gaussian)");
  }
  if (wake_sleep != "off" && wake_sleep != "sleep" && wake_sleep != "wake") {
    throw ConfigError("wake_sleep must be off, sleep or wake");
  }
  if (S == 0 || K == 0 || batch == 0 || iterations == 0 || eval_interval == 0 || eval_samples == 0 ||
      eval_items == 0 || latent_dim == 0 || layers == 0 || data_dim == 0 || hidden == 0 || test_items == 0) {
    throw ConfigError("counts and dimensions must be positive");
  }
  if (grad_std && grad_std_reps < 2) throw ConfigError("grad_std_reps must be at least 2");
  if (!(lr > 0.0)) throw ConfigError("learning rate must be positive");
  try {
    (void)schedule();
  } catch (const DomainError& e) {
    throw ConfigError(e.what());
  }
  if (model == "toy" && (latent_dim > ToyBernoulli::kMaxLatents || data_dim > 16)) {
    throw ConfigError("toy model needs latent_dim <= 12 and data_dim <= 16");
  }
  if ((model == "toy" || model == "gaussian") && !data_dir.empty()) {
    throw ConfigError(model + " trains on synthetic data only");
  }
  if (!allow_large) {
    if (iterations > 50000 || S > 500 || K > 100 || eval_samples > 1000 || latent_dim > 64 || batch > 256) {
      throw ConfigError("setting exceeds desk-scale limits (iterations 50000, S 500, K 100, eval_samples 1000, "
                        "latent_dim 64, batch 256); pass allow_large to override");
    }
  }
}

// ---------------------------------------------------------------------------
// Problems

namespace {

Dataset simulate(const LatentModel& teacher, const ParamVector& params, std::size_t n, Rng& rng) {
  Dataset out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) out.push_back(teacher.sample_joint(params, rng).x);
  return out;
}

ParamVector scaled_glorot(const LatentModel& model, double scale, Rng& rng) {
  ParamVector p = model.init_params(rng);
  for (double& v : p.values()) v *= scale;
  return p;
}

}  // namespace

Problem make_problem(const RunConfig& config) {
  config.validate();
  Problem problem;
  Rng data_rng(derive_seed(config.data_seed, {1}));
  const std::size_t n_train = config.limit;
  const std::size_t n_test = config.test_items;

  if (config.model == "toy") {
    auto toy = std::make_unique<ToyBernoulli>(config.latent_dim, config.data_dim);
    ParamVector teacher = toy->random_params(data_rng, 1.5);
    problem.train = simulate(*toy, teacher, n_train, data_rng);
    problem.test = simulate(*toy, teacher, n_test, data_rng);
    problem.teacher = std::move(teacher);
    problem.model = std::move(toy);
  } else if (config.model == "gaussian") {
    auto g = std::make_unique<ConjugateGaussian>(1.0, 1.0);
    ParamVector teacher = g->make_params(1.0, 0.0, 0.0, 0.0);
    problem.train = simulate(*g, teacher, n_train, data_rng);
    problem.test = simulate(*g, teacher, n_test, data_rng);
    problem.teacher = std::move(teacher);
    problem.model = std::move(g);
  } else if (config.model == "sbn") {
    SbnConfig sc{config.data_dim, config.latent_dim, config.layers, config.nonlinear};
    if (!config.data_dir.empty()) {
      MnistSplit split = load_mnist(config.data_dir, config.limit);
      sc.data_dim = split.train.front().size();
      problem.train = std::move(split.train);
      problem.test = std::move(split.test);
      if (problem.test.size() > n_test) problem.test.resize(n_test);
    } else {
      SigmoidBeliefNet teacher_model(sc);
      ParamVector teacher = scaled_glorot(teacher_model, config.teacher_scale, data_rng);
      problem.train = simulate(teacher_model, teacher, n_train, data_rng);
      problem.test = simulate(teacher_model, teacher, n_test, data_rng);
      problem.teacher = std::move(teacher);
    }
    problem.model = std::make_unique<SigmoidBeliefNet>(sc, dataset_mean(problem.train));
  } else {
    VaeConfig vc{config.data_dim, config.latent_dim, config.hidden};
    if (!config.data_dir.empty()) {
      MnistSplit split = load_mnist(config.data_dir, config.limit);
      vc.data_dim = split.train.front().size();
      problem.train = std::move(split.train);
      problem.test = std::move(split.test);
      if (problem.test.size() > n_test) problem.test.resize(n_test);
    } else {
      GaussianVAE teacher_model(vc);
      ParamVector teacher = scaled_glorot(teacher_model, config.teacher_scale, data_rng);
      problem.train = simulate(teacher_model, teacher, n_train, data_rng);
      problem.test = simulate(teacher_model, teacher, n_test, data_rng);
      problem.teacher = std::move(teacher);
    }
    problem.model = std::make_unique<GaussianVAE>(vc);
  }
  if (problem.train.empty() || problem.test.empty()) throw ConfigError("training and test sets must be non-empty");
  return problem;
}

Evaluation evaluate(const LatentModel& model, const ParamVector& params, std::span<const std::vector<double>> items,
                    std::size_t samples, std::uint64_t seed, std::size_t workers) {
  if (items.empty()) throw DomainError("evaluation set is empty");
  std::vector<Evaluation> per(items.size());
  parallel_for(items.size(), workers, [&](std::size_t i) {
    Rng rng(derive_seed(seed, {i}));
    const LatentBatch z = model.sample_q(params, items[i], samples, rng);
    const ModelEvaluation eval(model, params, items[i], z);
    std::vector<double> log_w(samples);
    double mean = 0.0;
    for (std::size_t s = 0; s < samples; ++s) {
      log_w[s] = eval.log_joint()[s] - eval.log_q()[s];
      mean += log_w[s];
    }
    per[i] = {iwae_estimate(log_w), mean / static_cast<double>(samples)};
  });
  Evaluation out;
  for (const auto& e : per) {
    out.log_evidence += e.log_evidence;
    out.elbo += e.elbo;
  }
  out.log_evidence /= static_cast<double>(items.size());
  out.elbo /= static_cast<double>(items.size());
  return out;
}

// ---------------------------------------------------------------------------
// Training

void write_metrics_row(TableWriter& writer, const MetricsRow& row) {
  auto opt = [](const std::optional<double>& v) -> Cell { return v ? Cell(*v) : Cell(std::monostate{}); };
  writer.row({static_cast<std::int64_t>(row.iteration), row.objective, row.test_log_evidence, row.kl_gap,
              opt(row.grad_std), opt(row.wallclock_ms)});
}

void write_metrics(const std::filesystem::path& path, const std::vector<MetricsRow>& rows, OutputFormat format) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  TableWriter writer(out, kMetricsColumns, format);
  for (const auto& row : rows) write_metrics_row(writer, row);
}

namespace {

std::vector<NamedBuffer> model_buffers(const LatentModel& model) {
  if (const auto* sbn = dynamic_cast<const SigmoidBeliefNet*>(&model)) {
    return {{"buffer/x_bar", {sbn->train_mean().begin(), sbn->train_mean().end()}}};
  }
  return {};
}

}  // namespace

TrainResult train(const RunConfig& config, const MetricsCallback& on_row) {
  Problem problem = make_problem(config);
  return train(config, problem, on_row);
}

TrainResult train(const RunConfig& config, Problem& problem, const MetricsCallback& on_row) {
  config.validate();
  const LatentModel& model = *problem.model;
  const std::size_t workers = worker_count(config.single_thread);
  const bool wake_sleep = config.wake_sleep != "off";

  ObjectiveSpec spec = config.objective_spec();
  ObjectiveSpec phi_spec = spec;
  if (wake_sleep) {
    spec = ObjectiveSpec::make(ObjectiveKind::tvo_lower, config.schedule(), config.S, OptimizeTarget::theta);
    spec.crn = config.crn;
    phi_spec = ObjectiveSpec::make(ObjectiveKind::tvo_upper, config.schedule(), config.S, OptimizeTarget::phi,
                                   config.wake_sleep == "sleep" ? DataSource::model_simulated : DataSource::real);
    phi_spec.crn = config.crn;
    phi_spec.validate(model);
  }
  spec.validate(model);

  Rng init_rng(derive_seed(config.seed, {2}));
  TrainResult result;
  result.params = model.init_params(init_rng);
  AdamState adam(result.params.size(), config.lr);
  AdamState phi_adam(result.params.size(), config.lr);
  Rng batch_rng(derive_seed(config.seed, {5}));
  const std::uint64_t eval_seed = derive_seed(config.seed, {4});
  const std::size_t eval_n = std::min(config.eval_items, problem.test.size());
  const std::span<const std::vector<double>> eval_items(problem.test.data(), eval_n);

  const auto start = std::chrono::steady_clock::now();
  ParamVector last_good = result.params;
  std::vector<std::vector<double>> batch(config.batch);

  auto checkpoint = [&](const ParamVector& p) {
    if (config.out_dir.empty()) return;
    std::filesystem::create_directories(config.out_dir);
    save_checkpoint(std::filesystem::path(config.out_dir) / "checkpoint.tvom", p, model_buffers(model));
  };

  for (std::size_t it = 1; it <= config.iterations; ++it) {
    for (auto& x : batch) x = problem.train[batch_rng.next() % problem.train.size()];
    const TrainingStep step = training_step(spec, model, result.params, batch, derive_seed(config.seed, {3, it}), workers);
    if (!std::isfinite(step.objective)) {
      checkpoint(last_good);
      throw NumericalError("objective became non-finite at iteration " + std::to_string(it));
    }
    if (!adam_step(adam, result.params, step.gradient.vector, spec.direction == Direction::maximize)) {
      ++result.skipped_steps;
    }
    double phi_objective = 0.0;
    if (wake_sleep) {
      const TrainingStep phi_step =
          training_step(phi_spec, model, result.params, batch, derive_seed(config.seed, {6, it}), workers);
      phi_objective = phi_step.objective;
      if (!std::isfinite(phi_objective)) {
        checkpoint(last_good);
        throw NumericalError("phi objective became non-finite at iteration " + std::to_string(it));
      }
      if (!adam_step(phi_adam, result.params, phi_step.gradient.vector, false)) ++result.skipped_steps;
    }
    last_good = result.params;

    if (it % config.eval_interval == 0 || it == config.iterations) {
      const Evaluation ev = evaluate(model, result.params, eval_items, config.eval_samples, eval_seed, workers);
      MetricsRow row;
      row.iteration = it;
      row.objective = step.objective;
      row.test_log_evidence = ev.log_evidence;
      row.kl_gap = ev.log_evidence - ev.elbo;
      if (config.grad_std) {
        const ParamVector& p = result.params;
        row.grad_std = gradient_std_diagnostic(
            [&](std::uint64_t s) { return training_step(spec, model, p, batch, s, workers).gradient; },
            config.grad_std_reps, derive_seed(config.seed, {7, it}));
      }
      if (!config.single_thread) {
        row.wallclock_ms =
            std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
      }
      result.metrics.push_back(row);
      if (wake_sleep) {
        MetricsRow phi_row = row;
        phi_row.objective = phi_objective;
        phi_row.grad_std.reset();
        result.phi_metrics.push_back(phi_row);
      }
      if (on_row) on_row(row);
    }
  }

  if (!config.out_dir.empty()) {
    std::filesystem::create_directories(config.out_dir);
    const std::filesystem::path dir(config.out_dir);
    write_metrics(dir / "metrics.csv", result.metrics, OutputFormat::csv);
    if (wake_sleep) write_metrics(dir / "metrics_phi.csv", result.phi_metrics, OutputFormat::csv);
    checkpoint(result.params);
  }
  return result;
}

// ---------------------------------------------------------------------------
// Sweeps

std::vector<SweepCell> sweep(const RunConfig& base, const SweepAxes& axes) {
  if (axes.beta1.empty() || axes.K.empty() || axes.S.empty()) throw ConfigError("sweep axes must be non-empty");
  std::vector<SweepCell> cells;
  for (double b : axes.beta1) {
    for (std::size_t k : axes.K) {
      for (std::size_t s : axes.S) {
        SweepCell c;
        c.index = cells.size();
        c.beta1 = b;
        c.K = k;
        c.S = s;
        c.seed = base.seed + c.index;
        cells.push_back(c);
      }
    }
  }
  // Cells run one after another; each run already spreads its minibatch
  // over the worker pool.
  for (SweepCell& c : cells) {
    RunConfig cfg = base;
    cfg.beta1 = c.beta1;
    cfg.K = c.K;
    cfg.S = c.S;
    cfg.seed = c.seed;
    if (!base.out_dir.empty()) cfg.out_dir = (std::filesystem::path(base.out_dir) / ("cell_" + std::to_string(c.index))).string();
    try {
      TrainResult r = train(cfg);
      if (!r.metrics.empty()) c.final_row = r.metrics.back();
      c.ok = true;
    } catch (const std::exception& e) {
      c.error = e.what();
    }
  }
  return cells;
}

void write_sweep(std::ostream& out, const std::vector<SweepCell>& cells, OutputFormat format) {
  auto status = [&](const SweepCell& c) {
    if (c.ok) return std::string("ok");
    std::string msg = "failed: " + c.error;
    if (format == OutputFormat::csv) std::replace_if(msg.begin(), msg.end(), [](char ch) { return ch == ',' || ch == '\n'; }, ';');
    return msg;
  };
  TableWriter writer(out, {"cell", "beta1", "K", "S", "seed", "status", "iteration", "test_log_evidence", "kl_gap"},
                     format);
  for (const auto& c : cells) {
    const bool has = c.ok && c.final_row.has_value();
    writer.row({static_cast<std::int64_t>(c.index), c.beta1, static_cast<std::int64_t>(c.K),
                static_cast<std::int64_t>(c.S), static_cast<std::int64_t>(c.seed),
                status(c),
                has ? Cell(static_cast<std::int64_t>(c.final_row->iteration)) : Cell(),
                has ? Cell(c.final_row->test_log_evidence) : Cell(), has ? Cell(c.final_row->kl_gap) : Cell()});
  }
}

}  // namespace tvo

#include "tvo/cli.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "tvo/checkpoint.hpp"
#include "tvo/errors.hpp"
#include "tvo/estimators.hpp"
#include "tvo/models.hpp"
#include "tvo/objectives.hpp"
#include "tvo/oracles.hpp"
#include "tvo/parallel.hpp"
#include "tvo/path.hpp"
#include "tvo/rng.hpp"
#include "tvo/table.hpp"
#include "tvo/trainer.hpp"

namespace tvo {
namespace {

struct Options {
  RunConfig run;
  std::string objective = "tvo_lower";
  std::string method = "cov";
  std::string optimize = "both";
  std::string data_source = "real";
  std::string spacing = "log";
  std::string crn = "on";
  std::string format = "csv";
  std::string out;
  std::string config;
  std::string checkpoint;
  bool posterior_matched = false;
  bool report_only = false;
  std::size_t grid = 0;
  double tolerance = 1e-5;
  double param_scale = 1.5;
  double fd_step = 1e-5;
  std::string betas;
  std::string beta1_list;
  std::string K_list;
  std::string S_list;
  std::string estimators = "cov";
  std::size_t reps = 10;
  std::size_t train_iters = 0;
};

std::vector<std::string> split_list(const std::string& text) {
  std::vector<std::string> items;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item.erase(0, item.find_first_not_of(" \t"));
    item.erase(item.find_last_not_of(" \t") + 1);
    if (!item.empty()) items.push_back(item);
  }
  return items;
}

double parse_double(const std::string& text, const std::string& what) {
  try {
    std::size_t used = 0;
    const double v = std::stod(text, &used);
    if (used == text.size()) return v;
  } catch (const std::exception&) {
  }
  throw ConfigError("invalid number '" + text + "' in " + what);
}

std::size_t parse_count(const std::string& text, const std::string& what) {
  try {
    std::size_t used = 0;
    const unsigned long long v = std::stoull(text, &used);
    if (used == text.size() && text.find('-') == std::string::npos) return static_cast<std::size_t>(v);
  } catch (const std::exception&) {
  }
  throw ConfigError("invalid count '" + text + "' in " + what);
}

std::vector<double> double_list(const std::string& text, const std::string& what) {
  std::vector<double> out;
  for (const auto& s : split_list(text)) out.push_back(parse_double(s, what));
  if (out.empty()) throw ConfigError(what + " must not be empty");
  return out;
}

std::vector<std::size_t> count_list(const std::string& text, const std::string& what) {
  std::vector<std::size_t> out;
  for (const auto& s : split_list(text)) out.push_back(parse_count(s, what));
  if (out.empty()) throw ConfigError(what + " must not be empty");
  return out;
}

// Appends the key=value lines of the --config file as --key=value tokens, so
// they are parsed after (and therefore override) the command-line flags.
std::vector<std::string> expand_config(std::vector<std::string> args) {
  std::string path;
  for (std::size_t i = 1; i < args.size(); ++i) {
    if (args[i] == "--config" && i + 1 < args.size()) path = args[i + 1];
    if (args[i].rfind("--config=", 0) == 0) path = args[i].substr(9);
  }
  if (path.empty()) return args;
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config file " + path);
  std::string line;
  std::size_t number = 0;
  while (std::getline(in, line)) {
    ++number;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line.erase(0, line.find_first_not_of(" \t\r"));
    line.erase(line.find_last_not_of(" \t\r") + 1);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos || eq == 0) {
      throw ConfigError(path + ":" + std::to_string(number) + ": expected key=value");
    }
    std::string key = line.substr(0, eq);
    std::string value = line.substr(eq + 1);
    key.erase(key.find_last_not_of(" \t") + 1);
    value.erase(0, value.find_first_not_of(" \t"));
    std::replace(key.begin(), key.end(), '_', '-');
    if (key == "config") continue;
    args.push_back("--" + key + "=" + value);
  }
  return args;
}

void add_common(CLI::App* c, Options& o) {
  auto& r = o.run;
  c->add_option("--config", o.config, "key=value file; its entries override flags");
  c->add_option("--model", r.model, "sbn, vae, toy or gaussian")->capture_default_str();
  c->add_option("--objective", o.objective, "elbo, eubo, tvo_lower, tvo_upper or iwae")->capture_default_str();
  c->add_option("--method", o.method, "gradient method: cov, reparam or exact")->capture_default_str();
  c->add_option("--optimize", o.optimize, "theta, phi or both")->capture_default_str();
  c->add_option("--data-source", o.data_source, "real or model_simulated")->capture_default_str();
  c->add_option("--wake-sleep", r.wake_sleep, "off, sleep or wake")->capture_default_str();
  c->add_option("--S", r.S, "samples per datum")->capture_default_str();
  c->add_option("--K", r.K, "partitions")->capture_default_str();
  c->add_option("--beta1", r.beta1, "first nonzero knot")->capture_default_str();
  c->add_option("--spacing", o.spacing, "log or equal")->capture_default_str();
  c->add_option("--crn", o.crn, "reuse draws across partitions: on or off")
      ->check(CLI::IsMember({"on", "off"}))
      ->capture_default_str();
  c->add_option("--lr", r.lr, "Adam learning rate")->capture_default_str();
  c->add_option("--batch", r.batch, "minibatch size")->capture_default_str();
  c->add_option("--iters", r.iterations, "training iterations")->capture_default_str();
  c->add_option("--eval-interval", r.eval_interval, "iterations between evaluations")->capture_default_str();
  c->add_option("--eval-samples", r.eval_samples, "IWAE samples per test item")->capture_default_str();
  c->add_option("--eval-items", r.eval_items, "test items per evaluation")->capture_default_str();
  c->add_flag("--grad-std", r.grad_std, "report gradient std at each evaluation");
  c->add_option("--grad-std-reps", r.grad_std_reps, "repetitions for --grad-std")->capture_default_str();
  c->add_option("--seed", r.seed, "run seed")->capture_default_str();
  c->add_option("--data-seed", r.data_seed, "seed of the synthetic dataset")->capture_default_str();
  c->add_option("--data-dir", r.data_dir, "directory with MNIST IDX files; empty uses synthetic data");
  c->add_option("--limit", r.limit, "training items kept")->capture_default_str();
  c->add_option("--test-items", r.test_items, "test items kept")->capture_default_str();
  c->add_option("--out", o.out, "output directory (train, sweep) or file (other commands)");
  c->add_flag("--single-thread", r.single_thread, "run on one thread; output is then byte-reproducible");
  c->add_flag("--allow-large", r.allow_large, "lift the desk-scale limits");
  c->add_option("--format", o.format, "csv or jsonl")->check(CLI::IsMember({"csv", "jsonl"}))->capture_default_str();
  c->add_option("--latent-dim", r.latent_dim, "latents per layer (toy default 4)")->capture_default_str();
  c->add_option("--layers", r.layers, "stochastic layers (sbn)")->capture_default_str();
  c->add_flag("--nonlinear", r.nonlinear, "three-layer tanh maps between sbn layers");
  c->add_option("--hidden", r.hidden, "hidden width (vae)")->capture_default_str();
  c->add_option("--data-dim", r.data_dim, "observation width for synthetic data (toy default 8)")->capture_default_str();
  c->add_option("--teacher-scale", r.teacher_scale, "weight scale of the synthetic teacher")->capture_default_str();
}

void add_params_source(CLI::App* c, Options& o) {
  c->add_option("--checkpoint", o.checkpoint, "parameters to load");
  c->add_flag("--posterior-matched", o.posterior_matched, "toy/gaussian: set q to the exact posterior");
  c->add_option("--train-iters", o.train_iters, "train this many iterations first")->capture_default_str();
}

// Applies string-valued options and model-dependent defaults.
void finalize(CLI::App* c, Options& o) {
  auto& r = o.run;
  r.objective = parse_objective_kind(o.objective);
  r.method = parse_gradient_method(o.method);
  r.optimize = parse_optimize_target(o.optimize);
  r.data_source = parse_data_source(o.data_source);
  r.spacing = parse_spacing(o.spacing);
  r.crn = o.crn == "on";
  if (r.model == "toy") {
    if (c->count("--latent-dim") == 0) r.latent_dim = 4;
    if (c->count("--data-dim") == 0) r.data_dim = 8;
  }
  if (r.model == "gaussian") {
    r.latent_dim = 1;
    r.data_dim = 1;
  }
}

OutputFormat format_of(const Options& o) { return parse_output_format(o.format); }

// Tables go to --out when given, stdout otherwise.
class Output {
 public:
  Output(const std::string& path, std::ostream& fallback) : os_(&fallback) {
    if (path.empty()) return;
    const std::filesystem::path p(path);
    if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
    file_.open(p);
    if (!file_) throw IoError("cannot write " + path);
    os_ = &file_;
  }
  std::ostream& stream() { return *os_; }
  void finish() {
    os_->flush();
    if (!*os_) throw IoError("write failed");
  }

 private:
  std::ofstream file_;
  std::ostream* os_;
};

// A model with parameters and an observation, for the oracle-backed checks.
struct Instance {
  std::unique_ptr<LatentModel> model;
  ParamVector params;
  std::vector<double> x;
};

Instance oracle_instance(const Options& o) {
  const auto& r = o.run;
  Instance inst;
  Rng rng(derive_seed(r.seed, {2}));
  if (r.model == "toy") {
    if (r.latent_dim > ToyBernoulli::kMaxLatents) throw ConfigError("toy model needs latent_dim <= 12");
    auto toy = std::make_unique<ToyBernoulli>(r.latent_dim, r.data_dim);
    inst.params = toy->random_params(rng, o.param_scale);
    if (o.posterior_matched) toy->match_posterior_by_decoupling(inst.params);
    inst.model = std::move(toy);
  } else if (r.model == "gaussian") {
    auto g = std::make_unique<ConjugateGaussian>(1.0, 1.0);
    inst.params = g->random_params(rng);
    if (o.posterior_matched) g->match_posterior(inst.params);
    inst.model = std::move(g);
  } else {
    throw ConfigError("model '" + r.model + "' has no exact oracle (use toy or gaussian)");
  }
  Rng data_rng(derive_seed(r.seed, {3}));
  inst.x = inst.model->sample_joint(inst.params, data_rng).x;
  return inst;
}

// Parameters for eval, export-curve and diagnose-grad-std.
ParamVector prepared_params(const Options& o, Problem& problem) {
  const auto& r = o.run;
  if (!o.checkpoint.empty()) {
    if (!std::filesystem::exists(o.checkpoint)) throw IoError("checkpoint not found: " + o.checkpoint);
    const auto segments = read_checkpoint(o.checkpoint);
    if (auto* sbn = dynamic_cast<SigmoidBeliefNet*>(problem.model.get())) {
      if (const NamedBuffer* b = find_buffer(segments, "buffer/x_bar")) {
        if (b->values.size() != sbn->data_dim()) throw FormatError("buffer/x_bar has the wrong length", 0);
        problem.model = std::make_unique<SigmoidBeliefNet>(sbn->config(), b->values);
      }
    }
    return load_params(o.checkpoint, problem.model->layout());
  }
  if (o.posterior_matched) {
    Rng rng(derive_seed(r.seed, {2}));
    if (auto* toy = dynamic_cast<ToyBernoulli*>(problem.model.get())) {
      ParamVector p = toy->random_params(rng, o.param_scale);
      toy->match_posterior_by_decoupling(p);
      return p;
    }
    if (auto* g = dynamic_cast<ConjugateGaussian*>(problem.model.get())) {
      ParamVector p = g->random_params(rng);
      g->match_posterior(p);
      return p;
    }
    throw ConfigError("--posterior-matched needs the toy or gaussian model");
  }
  if (o.train_iters > 0) {
    RunConfig c = r;
    c.iterations = o.train_iters;
    c.eval_interval = o.train_iters;
    c.out_dir.clear();
    c.grad_std = false;
    return train(c, problem).params;
  }
  Rng init_rng(derive_seed(r.seed, {2}));
  return problem.model->init_params(init_rng);
}

std::span<const std::vector<double>> eval_items(const Options& o, const Problem& problem) {
  const std::size_t n = std::min(o.run.eval_items, problem.test.size());
  return {problem.test.data(), n};
}

// ---------------------------------------------------------------------------

int cmd_train(Options& o, std::ostream& out) {
  o.run.out_dir = o.out;
  TableWriter writer(out, kMetricsColumns, format_of(o));
  const TrainResult result = train(o.run, [&](const MetricsRow& row) {
    write_metrics_row(writer, row);
    out.flush();
  });
  if (result.skipped_steps > 0) std::cerr << "skipped " << result.skipped_steps << " non-finite steps\n";
  return kExitOk;
}

int cmd_sweep(Options& o, std::ostream& out) {
  o.run.out_dir = o.out;
  o.run.validate();
  SweepAxes axes;
  axes.beta1 = o.beta1_list.empty() ? std::vector<double>{o.run.beta1} : double_list(o.beta1_list, "--beta1-list");
  axes.K = o.K_list.empty() ? std::vector<std::size_t>{o.run.K} : count_list(o.K_list, "--K-list");
  axes.S = o.S_list.empty() ? std::vector<std::size_t>{o.run.S} : count_list(o.S_list, "--S-list");
  const auto cells = sweep(o.run, axes);
  write_sweep(out, cells, format_of(o));
  return kExitOk;
}

int cmd_eval(Options& o, std::ostream& sink) {
  Problem problem = make_problem(o.run);
  const ParamVector params = prepared_params(o, problem);
  const LatentModel& model = *problem.model;
  const auto items = eval_items(o, problem);
  const std::size_t workers = worker_count(o.run.single_thread);
  const PartitionSchedule schedule = o.run.schedule();

  const Evaluation ev = evaluate(model, params, items, o.run.eval_samples, derive_seed(o.run.seed, {4}), workers);
  struct Bounds {
    double elbo = 0, eubo = 0, lower = 0, upper = 0, exact = 0;
    bool low_ess = false;
  };
  std::vector<Bounds> per(items.size());
  const auto* toy = dynamic_cast<const ToyBernoulli*>(&model);
  const auto* gauss = dynamic_cast<const ConjugateGaussian*>(&model);
  parallel_for(items.size(), workers, [&](std::size_t i) {
    const WeightTable table =
        build_weight_table(model, params, items[i], o.run.S, schedule.betas(), derive_seed(o.run.seed, {i}));
    Bounds& b = per[i];
    b.elbo = elbo_estimate(table);
    const EuboEstimate e = eubo_estimate(table);
    b.eubo = e.value;
    b.low_ess = e.low_ess;
    b.lower = tvo_lower(table, schedule);
    b.upper = tvo_upper(table, schedule);
    if (toy) b.exact = enumerate(*toy, params, items[i]).log_evidence();
    if (gauss) b.exact = analytic_log_evidence(*gauss, params, items[i][0]);
  });
  Bounds mean;
  std::int64_t low_ess = 0;
  for (const Bounds& b : per) {
    mean.elbo += b.elbo;
    mean.eubo += b.eubo;
    mean.lower += b.lower;
    mean.upper += b.upper;
    mean.exact += b.exact;
    low_ess += b.low_ess ? 1 : 0;
  }
  const double n = static_cast<double>(per.size());
  TableWriter writer(sink, {"metric", "value"}, format_of(o));
  writer.row({std::string("log_evidence"), ev.log_evidence});
  writer.row({std::string("elbo"), mean.elbo / n});
  writer.row({std::string("eubo"), mean.eubo / n});
  writer.row({std::string("tvo_lower"), mean.lower / n});
  writer.row({std::string("tvo_upper"), mean.upper / n});
  writer.row({std::string("kl_gap"), ev.log_evidence - ev.elbo});
  writer.row({std::string("eubo_low_ess_items"), low_ess});
  if (toy || gauss) writer.row({std::string("exact_log_evidence"), mean.exact / n});
  return kExitOk;
}

int cmd_check_identity(Options& o, std::ostream& sink) {
  const Instance inst = oracle_instance(o);
  const std::size_t grid = o.grid == 0 ? 10000 : o.grid;
  if (grid < 2) throw ConfigError("--grid must be at least 2");
  double log_evidence = 0.0;
  std::function<double(double)> g;
  std::optional<EnumerationResult> enumeration;
  if (const auto* toy = dynamic_cast<const ToyBernoulli*>(inst.model.get())) {
    enumeration.emplace(enumerate(*toy, inst.params, inst.x));
    log_evidence = enumeration->log_evidence();
    g = [&](double b) { return enumeration->g(b); };
  } else {
    const auto& gm = dynamic_cast<const ConjugateGaussian&>(*inst.model);
    log_evidence = analytic_log_evidence(gm, inst.params, inst.x[0]);
    g = [&](double b) { return analytic_g(gm, inst.params, inst.x[0], b); };
  }
  const double integral = trapezoid(g, grid);
  const double residual = std::abs(integral - log_evidence);
  const bool pass = residual < o.tolerance;
  TableWriter writer(sink, {"model", "grid", "log_evidence", "trapezoid", "residual", "status"}, format_of(o));
  writer.row({o.run.model, static_cast<std::int64_t>(grid), log_evidence, integral, residual,
              std::string(pass ? "pass" : "fail")});
  return pass || o.report_only ? kExitOk : kExitCheckFailed;
}

double max_scaled_error(std::span<const double> a, std::span<const double> b) {
  double worst = 0.0;
  for (std::size_t d = 0; d < a.size(); ++d) {
    worst = std::max(worst, std::abs(a[d] - b[d]) / std::max(1.0, std::abs(b[d])));
  }
  return worst;
}

int cmd_check_gradients(Options& o, std::ostream& sink) {
  std::unique_ptr<LatentModel> model;
  ParamVector params;
  std::vector<double> x;
  if (o.run.model == "toy" || o.run.model == "gaussian") {
    Instance inst = oracle_instance(o);
    model = std::move(inst.model);
    params = std::move(inst.params);
    x = std::move(inst.x);
  } else {
    Problem problem = make_problem(o.run);
    Rng rng(derive_seed(o.run.seed, {2}));
    params = problem.model->init_params(rng);
    x = problem.train.front();
    model = std::move(problem.model);
  }
  const std::size_t S = std::min<std::size_t>(o.run.S, 4);
  struct Row {
    std::string check;
    double error;
  };
  std::vector<Row> rows;

  {
    Rng rng(derive_seed(o.run.seed, {4}));
    const LatentBatch latents = model->sample_q(params, x, S, rng);
    Tape tape;
    const LogNodes nodes = model->record(tape, x, latents);
    tape.set_output(tape.sum(nodes.log_joint - nodes.log_q));
    tape.forward(params);
    const ParamVector grad = tape.backward();
    const auto fd = finite_difference_gradient([&](const ParamVector& p) { return tape.forward(p); }, params, o.fd_step);
    rows.push_back({"autodiff_log_weights", max_scaled_error(grad.values(), fd)});
  }
  if (model->reparameterizable()) {
    const LatentBatch noise = standard_normal_noise(S, model->latent_dim(), derive_seed(o.run.seed, {5}));
    const GradientEstimate g = reparam_gradient(*model, params, x, reparam_iwae(), noise);
    const auto fd = finite_difference_gradient(
        [&](const ParamVector& p) { return reparam_objective_value(*model, p, x, reparam_iwae(), noise); }, params,
        o.fd_step);
    rows.push_back({"autodiff_reparam_iwae", max_scaled_error(g.vector, fd)});
  }
  {
    const PartitionSchedule schedule = o.run.schedule();
    const WeightTable table = build_weight_table(*model, params, x, o.run.S, schedule.betas(), derive_seed(o.run.seed, {6}));
    const auto f = SampleFunction::instantaneous_elbo();
    double worst = 0.0;
    for (std::size_t k = 0; k < table.columns(); ++k) {
      const auto fused = covariance_gradient(*model, params, x, f, table, k);
      const auto literal = covariance_gradient_per_sample(*model, params, x, f, table, k);
      worst = std::max(worst, max_scaled_error(fused.vector, literal.vector));
    }
    rows.push_back({"covariance_fused_vs_per_sample", worst});
  }
  if (model->latent_kind() == LatentKind::discrete && model->latent_dim() <= ToyBernoulli::kMaxLatents) {
    ObjectiveSpec spec = ObjectiveSpec::make(ObjectiveKind::tvo_lower, o.run.schedule(), o.run.S);
    spec.method = GradientMethod::exact;
    const auto exact = training_gradient(spec, *model, params, x, 0);
    const auto fd = finite_difference_gradient(
        [&](const ParamVector& p) {
          return tvo_lower(build_exact_table(*model, p, x, spec.schedule.betas()), spec.schedule);
        },
        params, o.fd_step);
    rows.push_back({"exact_covariance_tvo_lower", max_scaled_error(exact.vector, fd)});
  }

  bool all = true;
  TableWriter writer(sink, {"check", "max_rel_error", "tolerance", "status"}, format_of(o));
  for (const Row& r : rows) {
    const bool pass = r.error <= o.tolerance;
    all = all && pass;
    writer.row({r.check, r.error, o.tolerance, std::string(pass ? "pass" : "fail")});
  }
  return all || o.report_only ? kExitOk : kExitCheckFailed;
}

EstimatorKind parse_estimator(const std::string& text) {
  if (text == "cov" || text == "covariance") return EstimatorKind::covariance;
  if (text == "reinforce") return EstimatorKind::reinforce;
  if (text == "reinforce-baseline") return EstimatorKind::reinforce_baseline;
  if (text == "reparam") return EstimatorKind::reparam;
  throw ConfigError("unknown estimator '" + text + "' (expected cov, reinforce, reinforce-baseline or reparam)");
}

int cmd_diagnose(Options& o, std::ostream& sink) {
  if (o.reps < 2) throw ConfigError("--reps must be at least 2");
  std::vector<EstimatorKind> kinds;
  for (const auto& e : split_list(o.estimators)) kinds.push_back(parse_estimator(e));
  if (kinds.empty()) throw ConfigError("--estimator must not be empty");
  const std::vector<std::size_t> sizes =
      o.S_list.empty() ? std::vector<std::size_t>{o.run.S} : count_list(o.S_list, "--S-list");

  Problem problem = make_problem(o.run);
  for (EstimatorKind k : kinds) {
    if (k == EstimatorKind::reparam && !problem.model->reparameterizable()) {
      throw ConfigError("reparam estimator needs a continuous, reparameterizable model");
    }
  }
  const ParamVector params = prepared_params(o, problem);
  const LatentModel& model = *problem.model;
  const std::size_t n = std::min(o.run.batch, problem.train.size());
  const std::span<const std::vector<double>> batch(problem.train.data(), n);
  const std::size_t workers = worker_count(o.run.single_thread);

  TableWriter writer(sink, {"estimator", "S", "K", "beta1", "iteration", "avg_std"}, format_of(o));
  for (EstimatorKind kind : kinds) {
    for (std::size_t S : sizes) {
      RunConfig cfg = o.run;
      cfg.S = S;
      const ObjectiveSpec spec = cfg.objective_spec();
      const double std_dev = gradient_std_diagnostic(
          [&](std::uint64_t s) { return estimator_gradient(kind, spec, model, params, batch, s, workers); }, o.reps,
          derive_seed(o.run.seed, {8}));
      writer.row({std::string(kind == EstimatorKind::covariance ? "cov" : to_string(kind)),
                  static_cast<std::int64_t>(S), static_cast<std::int64_t>(cfg.K), cfg.beta1,
                  static_cast<std::int64_t>(o.train_iters), std_dev});
    }
  }
  return kExitOk;
}

int cmd_export_curve(Options& o, std::ostream& sink) {
  std::vector<double> betas;
  if (!o.betas.empty()) {
    betas = double_list(o.betas, "--betas");
  } else {
    const std::size_t n = o.grid == 0 ? 11 : o.grid;
    if (n < 2) throw ConfigError("--grid must be at least 2");
    for (std::size_t i = 0; i < n; ++i) betas.push_back(static_cast<double>(i) / static_cast<double>(n - 1));
  }
  for (std::size_t i = 0; i < betas.size(); ++i) {
    if (!(betas[i] >= 0.0 && betas[i] <= 1.0) || (i > 0 && !(betas[i] > betas[i - 1]))) {
      throw ConfigError("--betas must be strictly increasing within [0, 1]");
    }
  }
  Problem problem = make_problem(o.run);
  const ParamVector params = prepared_params(o, problem);
  const LatentModel& model = *problem.model;
  const auto items = eval_items(o, problem);
  std::vector<IntegrandCurve> curves(items.size());
  parallel_for(items.size(), worker_count(o.run.single_thread), [&](std::size_t i) {
    curves[i] = integrand_curve(model, params, items[i], betas, o.run.S, derive_seed(o.run.seed, {i}));
  });
  IntegrandCurve mean;
  mean.betas = betas;
  mean.values.assign(betas.size(), 0.0);
  mean.std_errors.assign(betas.size(), 0.0);
  for (const auto& c : curves) {
    for (std::size_t j = 0; j < betas.size(); ++j) {
      mean.values[j] += c.values[j];
      mean.std_errors[j] += c.std_errors[j] * c.std_errors[j];
    }
  }
  const double n = static_cast<double>(curves.size());
  for (std::size_t j = 0; j < betas.size(); ++j) {
    mean.values[j] /= n;
    mean.std_errors[j] = std::sqrt(mean.std_errors[j]) / n;
  }
  write_curve(sink, mean, format_of(o));
  return kExitOk;
}

int dispatch(const std::vector<std::string>& raw, std::ostream& out, std::ostream& err) {
  CLI::App app("Thermodynamic-integration bounds for latent-variable models: training, evaluation and diagnostics", "tvo");
  app.option_defaults()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "help for every subcommand");

  Options o;
  struct Command {
    CLI::App* app;
    int (*run)(Options&, std::ostream&);
    bool writes_dir;
  };
  std::vector<Command> commands;
  auto add = [&](const char* name, const char* help, int (*fn)(Options&, std::ostream&), bool writes_dir) {
    CLI::App* c = app.add_subcommand(name, help);
    add_common(c, o);
    commands.push_back({c, fn, writes_dir});
    return c;
  };

  add("train", "train a model; streams metrics rows", cmd_train, true);
  auto* sw = add("sweep", "grid of independent training runs", cmd_sweep, true);
  sw->add_option("--beta1-list", o.beta1_list, "comma-separated beta1 values");
  sw->add_option("--K-list", o.K_list, "comma-separated K values");
  sw->add_option("--S-list", o.S_list, "comma-separated S values");
  auto* ev = add("eval", "evidence estimates and bounds on the test items", cmd_eval, false);
  add_params_source(ev, o);
  auto* ci = add("check-identity", "trapezoid integral of the exact integrand against log p(x)", cmd_check_identity, false);
  ci->add_option("--grid", o.grid, "trapezoid points (default 10000)");
  ci->add_flag("--posterior-matched", o.posterior_matched, "set q to the exact posterior");
  ci->add_flag("--report-only", o.report_only, "exit 0 whatever the residual");
  ci->add_option("--tolerance", o.tolerance, "largest passing residual")->capture_default_str();
  ci->add_option("--param-scale", o.param_scale, "std of random toy parameters")->capture_default_str();
  auto* cg = add("check-gradients", "reverse-mode and estimator gradients against finite differences",
                 cmd_check_gradients, false);
  cg->add_option("--tolerance", o.tolerance, "largest passing relative error")->capture_default_str();
  cg->add_option("--fd-step", o.fd_step, "finite-difference step")->capture_default_str();
  cg->add_option("--param-scale", o.param_scale, "std of random toy parameters")->capture_default_str();
  cg->add_flag("--report-only", o.report_only, "exit 0 whatever the errors");
  auto* dg = add("diagnose-grad-std", "average per-coordinate std of gradient estimators", cmd_diagnose, false);
  add_params_source(dg, o);
  dg->add_option("--estimator", o.estimators, "comma-separated: cov, reinforce, reinforce-baseline, reparam")
      ->capture_default_str();
  dg->add_option("--S-list", o.S_list, "comma-separated S values (default --S)");
  dg->add_option("--reps", o.reps, "repetitions per cell")->capture_default_str();
  auto* ec = add("export-curve", "integrand estimates on a beta grid", cmd_export_curve, false);
  add_params_source(ec, o);
  ec->add_option("--grid", o.grid, "equally spaced points on [0, 1] (default 11)");
  ec->add_option("--betas", o.betas, "comma-separated beta grid");
  ec->add_option("--param-scale", o.param_scale, "std of random toy parameters")->capture_default_str();

  const std::vector<std::string> args = expand_config(raw);
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitConfig;
  }

  for (const Command& c : commands) {
    if (!c.app->parsed()) continue;
    finalize(c.app, o);
    if (c.writes_dir) {
      const int code = c.run(o, out);
      out.flush();
      return code;
    }
    Output sink(o.out, out);
    const int code = c.run(o, sink.stream());
    sink.finish();
    return code;
  }
  return kExitConfig;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  try {
    return dispatch(args, out, err);
  } catch (const ConfigError& e) {
    err << "configuration error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const UsageError& e) {
    err << "configuration error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const UnsupportedError& e) {
    err << "configuration error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const DomainError& e) {
    err << "configuration error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const IoError& e) {
    err << "i/o error: " << e.what() << '\n';
    return kExitIo;
  } catch (const FormatError& e) {
    err << "format error: " << e.what() << '\n';
    return kExitIo;
  } catch (const std::filesystem::filesystem_error& e) {
    err << "i/o error: " << e.what() << '\n';
    return kExitIo;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitCheckFailed;
  }
}

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  return run_cli(std::vector<std::string>(argv, argv + argc), out, err);
}

}  // namespace tvo

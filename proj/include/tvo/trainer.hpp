#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "tvo/autodiff.hpp"
#include "tvo/models.hpp"
#include "tvo/objectives.hpp"
#include "tvo/path.hpp"
#include "tvo/table.hpp"

namespace tvo {

// ---------------------------------------------------------------------------
// Adam

struct AdamState {
  std::vector<double> m;
  std::vector<double> v;
  std::size_t step = 0;
  double lr = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  explicit AdamState(std::size_t dim = 0, double learning_rate = 3e-4)
      : m(dim, 0.0), v(dim, 0.0), lr(learning_rate) {}
};

/// Bias-corrected Adam update; `maximize` ascends. A non-finite gradient
/// leaves params and state untouched, reports the event to stderr and
/// returns false.
bool adam_step(AdamState& state, ParamVector& params, std::span<const double> gradient, bool maximize);

// ---------------------------------------------------------------------------
// Data

using Dataset = std::vector<std::vector<double>>;

struct MnistSplit {
  Dataset train;
  Dataset validation;
  Dataset test;
};

/// Binarized images (pixel / 255 >= threshold) from an IDX image file.
Dataset read_idx_images(const std::filesystem::path& path, double threshold = 0.5);
std::vector<std::uint8_t> read_idx_labels(const std::filesystem::path& path);

/// Loads train-images-idx3-ubyte and t10k-images-idx3-ubyte from `dir`. The
/// training file is split 50000 / rest into train and validation. `limit`
/// (0 = all) keeps the first `limit` training items.
MnistSplit load_mnist(const std::filesystem::path& dir, std::size_t limit = 0, double threshold = 0.5);

/// Element-wise mean of a dataset.
std::vector<double> dataset_mean(const Dataset& data);

// ---------------------------------------------------------------------------
// Runs

struct RunConfig {
  std::string model = "sbn";  // sbn | vae | toy | gaussian
  ObjectiveKind objective = ObjectiveKind::tvo_lower;
  GradientMethod method = GradientMethod::covariance;
  OptimizeTarget optimize = OptimizeTarget::both;
  DataSource data_source = DataSource::real;
  /// "off", "sleep" (phi on simulated data) or "wake" (phi on real data).
  std::string wake_sleep = "off";
  std::size_t S = 10;
  std::size_t K = 2;
  double beta1 = 0.3;
  Spacing spacing = Spacing::log;
  bool crn = true;
  double lr = 3e-4;
  std::size_t batch = 24;
  std::size_t iterations = 20000;
  std::size_t eval_interval = 500;
  std::size_t eval_samples = 500;
  std::size_t eval_items = 200;
  /// Report the gradient std diagnostic at each evaluation.
  bool grad_std = false;
  std::size_t grad_std_reps = 10;
  std::uint64_t seed = 0;
  /// Seed of the synthetic teacher and its data; kept apart from `seed` so
  /// runs with different seeds share one dataset.
  std::uint64_t data_seed = 1234;

  /// Directory holding the MNIST IDX files; empty selects synthetic data
  /// drawn from a frozen teacher of the same model family.
  std::string data_dir;
  std::size_t limit = 1000;
  std::size_t test_items = 200;
  std::string out_dir;
  bool single_thread = false;
  bool allow_large = false;

  std::size_t latent_dim = 20;
  std::size_t layers = 2;
  bool nonlinear = false;
  std::size_t hidden = 100;
  /// Observation width for synthetic data (784 for MNIST).
  std::size_t data_dim = 784;
  /// Scale applied to the teacher's Glorot weights for synthetic data.
  double teacher_scale = 4.0;

  PartitionSchedule schedule() const;
  ObjectiveSpec objective_spec() const;
  /// Throws ConfigError for inconsistent or over-budget settings.
  void validate() const;
};

struct MetricsRow {
  std::size_t iteration = 0;
  double objective = 0.0;
  double test_log_evidence = 0.0;
  double kl_gap = 0.0;
  std::optional<double> grad_std;
  std::optional<double> wallclock_ms;
};

/// A model with its training and evaluation data.
struct Problem {
  std::unique_ptr<LatentModel> model;
  Dataset train;
  Dataset test;
  /// Parameters of the generator behind synthetic data, when there is one.
  std::optional<ParamVector> teacher;
};

Problem make_problem(const RunConfig& config);

struct Evaluation {
  double log_evidence = 0.0;
  double elbo = 0.0;
};

/// IWAE log-evidence and ELBO averaged over `items`, each item drawing
/// `samples` latents from a stream fixed by (seed, item index).
Evaluation evaluate(const LatentModel& model, const ParamVector& params, std::span<const std::vector<double>> items,
                    std::size_t samples, std::uint64_t seed, std::size_t workers = 1);

struct TrainResult {
  ParamVector params;
  std::vector<MetricsRow> metrics;
  /// Objective stream of the phi phase in wake-sleep runs.
  std::vector<MetricsRow> phi_metrics;
  std::size_t skipped_steps = 0;
};

using MetricsCallback = std::function<void(const MetricsRow&)>;

/// Runs the configured optimization. When out_dir is set, writes
/// metrics.csv (and metrics_phi.csv for wake-sleep) and checkpoint.tvom.
/// Aborts with NumericalError on a non-finite objective, after saving the
/// last good parameters.
TrainResult train(const RunConfig& config, const MetricsCallback& on_row = {});
TrainResult train(const RunConfig& config, Problem& problem, const MetricsCallback& on_row = {});

inline const std::vector<std::string> kMetricsColumns = {"iteration", "objective", "test_log_evidence",
                                                         "kl_gap", "grad_std", "wallclock_ms"};
void write_metrics_row(TableWriter& writer, const MetricsRow& row);
void write_metrics(const std::filesystem::path& path, const std::vector<MetricsRow>& rows, OutputFormat format);

struct SweepAxes {
  std::vector<double> beta1;
  std::vector<std::size_t> K;
  std::vector<std::size_t> S;
};

struct SweepCell {
  std::size_t index = 0;
  double beta1 = 0.0;
  std::size_t K = 0;
  std::size_t S = 0;
  std::uint64_t seed = 0;
  bool ok = false;
  std::string error;
  std::optional<MetricsRow> final_row;
};

/// One independent run per grid cell; cell i uses seed base + i and writes to
/// out_dir/cell_i when out_dir is set. Failures are recorded per cell.
std::vector<SweepCell> sweep(const RunConfig& base, const SweepAxes& axes);
void write_sweep(std::ostream& out, const std::vector<SweepCell>& cells, OutputFormat format);

}  // namespace tvo

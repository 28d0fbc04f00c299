#pragma once

// Experiment orchestration: dataset construction, per-algorithm runs from a
// shared zero start, mu selection, participation sweeps, and the theory
// report. Results are written as one CSV per algorithm plus JSON sidecars.

#include <fedsim/theory.hpp>

#include <json.hpp>

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

namespace fedsim {

struct DatasetSpec {
  enum class Kind { kSynthetic, kLeaf };
  Kind kind = Kind::kSynthetic;
  SynthConfig synthetic;     // seed is derived from the experiment seed
  std::string leaf_path;
  std::string eval_path;     // optional held-out LEAF file
  bool normalize = true;
};

struct ExperimentConfig {
  std::string name = "experiment";
  DatasetSpec dataset;
  std::vector<Algorithm> algorithms{Algorithm::kFedAvg, Algorithm::kFedProx,
                                    Algorithm::kFedDane};
  // Fixed mu per algorithm; when absent, mu is chosen from mu_grid.
  std::optional<double> mu_fedprox;
  std::optional<double> mu_feddane;
  std::vector<double> mu_grid{0.0, 0.001, 0.01, 0.1, 1.0};
  double select_fraction = 0.25;  // share of T used per candidate

  int rounds = 200;          // T
  int devices_per_round = 10;
  int local_epochs = 20;
  double step_size = 0.01;
  int batch_size = 10;
  Sampling sampling = Sampling::kWithReplacement;
  bool reuse_gradient_subset = false;
  LocalSolver solver = LocalSolver::kSgd;
  double l2 = 0.0;

  std::uint64_t seed = 0;
  int eval_every = 1;
  int grad_norm_every = 5;
  int final_window = 10;
  int threads = 1;
  std::string output_dir;  // empty: nothing written

  // theory-report
  int theory_every = 10;
  int theory_trials = 20;

  void validate() const;
  AlgorithmConfig algorithm_config(Algorithm a, double mu) const;
};

nlohmann::json to_json(const ExperimentConfig& cfg);
ExperimentConfig config_from_json(const nlohmann::json& j);

struct MetricsRow {
  std::int64_t update = 0;
  std::int64_t comm_rounds = 0;
  double loss = 0.0;
  std::optional<double> grad_sq_norm;
  bool diverged = false;
};

struct MetricsLog {
  Algorithm algorithm = Algorithm::kFedAvg;
  double mu = 0.0;
  int devices_per_round = 0;
  std::uint64_t seed = 0;
  std::vector<MetricsRow> rows;
  nlohmann::json header;  // resolved config
};

void write_metrics_csv(const MetricsLog& log, std::ostream& out);
std::vector<MetricsRow> read_metrics_csv(std::istream& in);

/// Mean of the last `window` logged losses; +inf if any of them diverged.
double final_loss(const MetricsLog& log, int window = 10);

struct BuiltDataset {
  FederatedDataset train;
  std::optional<FederatedDataset> eval;
  Objective objective;
};

BuiltDataset build_dataset(const ExperimentConfig& cfg);

/// Runs T updates of one algorithm from w0 = 0, logging every eval_every
/// updates (and the last one).
MetricsLog run_algorithm(const BuiltDataset& data, const ExperimentConfig& cfg,
                         Algorithm algorithm, double mu);

struct MuSelection {
  double mu = 0.0;
  std::vector<std::pair<double, double>> scores;  // (mu, final loss)
  bool all_diverged = false;
};

MuSelection select_mu(const BuiltDataset& data, const ExperimentConfig& cfg,
                      Algorithm algorithm, const std::vector<double>& grid);

struct ExperimentResult {
  DatasetStats stats;
  std::vector<MetricsLog> logs;
  std::vector<std::pair<Algorithm, MuSelection>> selections;
};

/// All algorithms share the dataset, w0 and stream derivation.
ExperimentResult run_experiment(const ExperimentConfig& cfg);
ExperimentResult run_experiment(const BuiltDataset& data, const ExperimentConfig& cfg);

/// mu used for `a`: fixed value, or selected from the grid (FedAvg: 0).
double resolve_mu(const BuiltDataset& data, const ExperimentConfig& cfg, Algorithm a,
                  std::vector<std::pair<Algorithm, MuSelection>>* selections = nullptr);

ExperimentResult participation_sweep(const ExperimentConfig& cfg,
                                     const std::vector<int>& devices_per_round);

/// E = 1 with all devices (synthetic) or half of them (LEAF) per round.
ExperimentConfig unrealistic_config(const ExperimentConfig& cfg, Index num_devices);
ExperimentResult unrealistic_setting(const ExperimentConfig& cfg);

struct TheoryRow {
  std::int64_t round = 0;  // t; constants measured at w^{t-1}
  std::optional<double> B;
  std::optional<double> gamma;
  double L = 0.0;
  double mu = 0.0;
  std::optional<double> rho;
  bool precondition = false;  // rho > 0 and gamma < 1
  std::optional<DecreaseReport> decrease;
};

struct TheoryReport {
  double mu = 0.0;
  double L = 0.0;
  std::vector<TheoryRow> rows;
  double precondition_fraction = 0.0;
  int decrease_checked = 0;
  int decrease_held = 0;
};

/// Runs `algorithm` (FedDANE by default) and measures B, gamma, rho and the
/// decrease check every theory_every rounds (and at round 1).
TheoryReport theory_report(const BuiltDataset& data, const ExperimentConfig& cfg,
                           Algorithm algorithm = Algorithm::kFedDane);
TheoryReport theory_report(const ExperimentConfig& cfg);
nlohmann::json to_json(const TheoryReport& report);

/// Writes <dir>/<name>_<algorithm>[_K<k>].csv and .meta.json per log.
void write_outputs(const ExperimentConfig& cfg, const ExperimentResult& result,
                   bool tag_k = false);

nlohmann::json to_json(const DatasetStats& s);

}  // namespace fedsim

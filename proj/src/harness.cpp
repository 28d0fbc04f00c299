#include <fedsim/harness.hpp>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <limits>

namespace fedsim {

using nlohmann::json;

void ExperimentConfig::validate() const {
  if (rounds < 0) throw ConfigError("rounds must be >= 0");
  if (algorithms.empty()) throw ConfigError("no algorithms selected");
  if (eval_every < 1) throw ConfigError("eval_every must be >= 1");
  if (grad_norm_every < 0) throw ConfigError("grad_norm_every must be >= 0");
  if (final_window < 1) throw ConfigError("final_window must be >= 1");
  if (!(select_fraction > 0.0 && select_fraction <= 1.0))
    throw ConfigError("select_fraction must lie in (0, 1]");
  if (theory_every < 1 || theory_trials < 1)
    throw ConfigError("theory_every and theory_trials must be >= 1");
  for (Algorithm a : algorithms) {
    const bool fixed = (a == Algorithm::kFedProx && mu_fedprox) ||
                       (a == Algorithm::kFedDane && mu_feddane);
    if (a != Algorithm::kFedAvg && !fixed && mu_grid.empty())
      throw ConfigError("mu grid is empty and no fixed mu given for " + to_string(a));
  }
  for (double m : mu_grid)
    if (!(m >= 0.0)) throw ConfigError("mu grid values must be >= 0");
  if (dataset.kind == DatasetSpec::Kind::kSynthetic) dataset.synthetic.validate();
  if (dataset.kind == DatasetSpec::Kind::kLeaf && dataset.leaf_path.empty())
    throw ConfigError("LEAF dataset needs a path");
}

AlgorithmConfig ExperimentConfig::algorithm_config(Algorithm a, double mu) const {
  AlgorithmConfig ac;
  ac.algorithm = a;
  ac.devices_per_round = devices_per_round;
  ac.local_epochs = local_epochs;
  ac.step_size = step_size;
  ac.batch_size = batch_size;
  ac.mu = a == Algorithm::kFedAvg ? 0.0 : mu;
  ac.sampling = sampling;
  ac.reuse_gradient_subset = reuse_gradient_subset;
  ac.solver = a == Algorithm::kFedAvg ? LocalSolver::kSgd : solver;
  ac.threads = threads;
  ac.grad_norm_every = grad_norm_every;
  return ac;
}

double final_loss(const MetricsLog& log, int window) {
  if (log.rows.empty()) return std::numeric_limits<double>::infinity();
  const std::size_t n = std::min<std::size_t>(log.rows.size(), static_cast<std::size_t>(window));
  double sum = 0.0;
  for (std::size_t i = log.rows.size() - n; i < log.rows.size(); ++i) {
    const auto& r = log.rows[i];
    if (r.diverged || !std::isfinite(r.loss)) return std::numeric_limits<double>::infinity();
    sum += r.loss;
  }
  return sum / static_cast<double>(n);
}

BuiltDataset build_dataset(const ExperimentConfig& cfg) {
  cfg.validate();
  BuiltDataset b;
  if (cfg.dataset.kind == DatasetSpec::Kind::kSynthetic) {
    SynthConfig s = cfg.dataset.synthetic;
    s.seed = derive_seed(cfg.seed, Stream::kDataset, {});
    b.train = generate_synthetic(s);
  } else {
    LeafOptions opts;
    opts.normalize = cfg.dataset.normalize;
    b.train = load_leaf(cfg.dataset.leaf_path, opts);
    if (!cfg.dataset.eval_path.empty()) {
      opts.num_classes = b.train.num_classes;
      b.eval = load_leaf(cfg.dataset.eval_path, opts);
    }
  }
  b.objective = classification_objective(b.train);
  b.objective.l2 = cfg.l2;
  return b;
}

namespace {

MetricsRow row_from(const RoundRecord& rec, std::int64_t comm) {
  MetricsRow r;
  r.update = rec.round;
  r.comm_rounds = comm;
  r.loss = rec.loss;
  r.grad_sq_norm = rec.grad_sq_norm;
  r.diverged = rec.diverged;
  return r;
}

}  // namespace

MetricsLog run_algorithm(const BuiltDataset& data, const ExperimentConfig& cfg,
                         Algorithm algorithm, double mu) {
  const AlgorithmConfig ac = cfg.algorithm_config(algorithm, mu);
  ServerState state = initial_state(data.train, data.objective, ac, cfg.seed);
  MetricsLog log;
  log.algorithm = algorithm;
  log.mu = ac.mu;
  log.devices_per_round = ac.devices_per_round;
  log.seed = cfg.seed;
  log.header = to_json(cfg);
  log.header["algorithm"] = to_string(algorithm);
  log.header["mu"] = ac.mu;

  MetricsRow first;
  first.loss = global_loss(data.train, data.objective, state.w);
  if (cfg.grad_norm_every > 0)
    first.grad_sq_norm = global_gradient(data.train, data.objective, state.w).squaredNorm();
  log.rows.push_back(first);
  for (int t = 1; t <= cfg.rounds; ++t) {
    const RoundRecord rec = run_round(state, data.train, data.objective);
    if (t % cfg.eval_every == 0 || t == cfg.rounds)
      log.rows.push_back(row_from(rec, state.comm_rounds));
  }
  return log;
}

MuSelection select_mu(const BuiltDataset& data, const ExperimentConfig& cfg,
                      Algorithm algorithm, const std::vector<double>& grid) {
  if (grid.empty()) throw ConfigError("select_mu: empty grid");
  MuSelection sel;
  if (grid.size() == 1) {
    sel.mu = grid.front();
    return sel;
  }
  ExperimentConfig short_cfg = cfg;
  short_cfg.rounds = std::max(1, static_cast<int>(std::lround(cfg.rounds * cfg.select_fraction)));
  short_cfg.grad_norm_every = 0;
  double best = std::numeric_limits<double>::infinity();
  std::optional<double> best_mu;
  for (double mu : grid) {
    const double score = final_loss(run_algorithm(data, short_cfg, algorithm, mu),
                                    cfg.final_window);
    sel.scores.emplace_back(mu, score);
    if (!std::isfinite(score)) continue;
    const double tie = 1e-12 * std::max(1.0, std::abs(best));
    if (!best_mu || score < best - tie || (std::abs(score - best) <= tie && mu > *best_mu)) {
      best = std::min(best, score);
      best_mu = mu;
    }
  }
  if (!best_mu) {
    sel.all_diverged = true;
    sel.mu = *std::max_element(grid.begin(), grid.end());
    std::cerr << "warning: every mu candidate diverged for " << to_string(algorithm)
              << "; using mu = " << sel.mu << '\n';
  } else {
    sel.mu = *best_mu;
  }
  return sel;
}

double resolve_mu(const BuiltDataset& data, const ExperimentConfig& cfg, Algorithm a,
                  std::vector<std::pair<Algorithm, MuSelection>>* selections) {
  if (a == Algorithm::kFedAvg) return 0.0;
  if (a == Algorithm::kFedProx && cfg.mu_fedprox) return *cfg.mu_fedprox;
  if (a == Algorithm::kFedDane && cfg.mu_feddane) return *cfg.mu_feddane;
  MuSelection sel = select_mu(data, cfg, a, cfg.mu_grid);
  const double mu = sel.mu;
  if (selections) selections->emplace_back(a, std::move(sel));
  return mu;
}

ExperimentResult run_experiment(const BuiltDataset& data, const ExperimentConfig& cfg) {
  cfg.validate();
  ExperimentResult res;
  res.stats = dataset_stats(data.train);
  for (Algorithm a : cfg.algorithms) {
    const double mu = resolve_mu(data, cfg, a, &res.selections);
    res.logs.push_back(run_algorithm(data, cfg, a, mu));
  }
  return res;
}

ExperimentResult run_experiment(const ExperimentConfig& cfg) {
  return run_experiment(build_dataset(cfg), cfg);
}

ExperimentResult participation_sweep(const ExperimentConfig& cfg,
                                     const std::vector<int>& devices_per_round) {
  if (devices_per_round.empty()) throw ConfigError("participation sweep needs K values");
  const BuiltDataset data = build_dataset(cfg);
  ExperimentResult res;
  res.stats = dataset_stats(data.train);
  for (int K : devices_per_round) {
    if (K < 1 || K > data.train.num_devices())
      throw ConfigError("K = " + std::to_string(K) + " outside [1, N = " +
                        std::to_string(data.train.num_devices()) + "]");
    ExperimentConfig c = cfg;
    c.devices_per_round = K;
    ExperimentResult part = run_experiment(data, c);
    for (auto& log : part.logs) res.logs.push_back(std::move(log));
    for (auto& s : part.selections) res.selections.push_back(std::move(s));
  }
  return res;
}

ExperimentConfig unrealistic_config(const ExperimentConfig& cfg, Index num_devices) {
  ExperimentConfig c = cfg;
  c.local_epochs = 1;
  c.sampling = Sampling::kWithoutReplacement;
  if (cfg.dataset.kind == DatasetSpec::Kind::kSynthetic)
    c.devices_per_round = static_cast<int>(num_devices);
  else
    c.devices_per_round = static_cast<int>(std::max<Index>(1, (num_devices + 1) / 2));
  return c;
}

ExperimentResult unrealistic_setting(const ExperimentConfig& cfg) {
  const BuiltDataset data = build_dataset(cfg);
  return run_experiment(data, unrealistic_config(cfg, data.train.num_devices()));
}

TheoryReport theory_report(const BuiltDataset& data, const ExperimentConfig& cfg,
                           Algorithm algorithm) {
  cfg.validate();
  const FederatedDataset& fd = data.train;
  const Objective& obj = data.objective;
  TheoryReport rep;
  rep.mu = resolve_mu(data, cfg, Algorithm::kFedDane);
  const AlgorithmConfig ac = cfg.algorithm_config(algorithm, rep.mu);
  const AlgorithmConfig dane_cfg = cfg.algorithm_config(Algorithm::kFedDane, rep.mu);
  rep.L = network_lipschitz(fd, obj);
  ServerState state = initial_state(fd, obj, ac, cfg.seed);
  for (int t = 1; t <= cfg.rounds; ++t) {
    const bool measure = t == 1 || t % cfg.theory_every == 0;
    if (!measure) {
      run_round(state, fd, obj);
      continue;
    }
    TheoryRow row;
    row.round = t;
    row.L = rep.L;
    row.mu = rep.mu;
    const ParameterVector w_prev = state.w;
    if (w_prev.allFinite()) {
      try {
        row.B = measure_dissimilarity(fd, obj, w_prev);
      } catch (const UndefinedQuantity&) {
      }
    }
    RoundDetail detail;
    const RoundRecord rec = run_round(state, fd, obj, &detail);
    if (algorithm != Algorithm::kFedAvg) row.gamma = round_inexactness(fd, obj, ac, rec, detail);
    if (row.B && row.gamma && rep.mu > obj.curvature_shift()) {
      TheoryConstants c{.L = rep.L, .mu = rep.mu, .gamma = *row.gamma, .B = *row.B,
                        .lambda = obj.curvature_shift()};
      row.rho = obj.convex() ? rho_convex(c) : rho_nonconvex(c);
      row.precondition = *row.rho > 0.0 && *row.gamma < 1.0;
      row.decrease = verify_sufficient_decrease(
          fd, obj, w_prev, dane_cfg, c, cfg.theory_trials,
          derive_seed(cfg.seed, Stream::kTrial, {static_cast<std::uint64_t>(t)}));
      ++rep.decrease_checked;
      if (row.decrease->holds) ++rep.decrease_held;
    }
    rep.rows.push_back(row);
  }
  std::size_t ok = 0;
  for (const auto& r : rep.rows) ok += r.precondition ? 1 : 0;
  rep.precondition_fraction =
      rep.rows.empty() ? 0.0 : static_cast<double>(ok) / static_cast<double>(rep.rows.size());
  return rep;
}

TheoryReport theory_report(const ExperimentConfig& cfg) {
  return theory_report(build_dataset(cfg), cfg);
}

namespace {

json optional_json(const std::optional<double>& v) {
  if (!v || !std::isfinite(*v)) return nullptr;
  return *v;
}

json finite_or_null(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }

}  // namespace

nlohmann::json to_json(const TheoryReport& r) {
  json rows = json::array();
  for (const auto& row : r.rows) {
    json j = {{"round", row.round},
              {"B", optional_json(row.B)},
              {"gamma", optional_json(row.gamma)},
              {"L", row.L},
              {"mu", row.mu},
              {"rho", optional_json(row.rho)},
              {"precondition", row.precondition},
              {"status", !row.B ? "undefined-dissimilarity"
                         : !row.gamma ? "undefined-inexactness"
                         : row.precondition ? "applicable"
                                            : "precondition-unmet"}};
    if (row.decrease) {
      const auto& d = *row.decrease;
      j["decrease"] = {{"f_prev", finite_or_null(d.f_prev)},
                       {"grad_sq_norm", finite_or_null(d.grad_sq_norm)},
                       {"mean_f", finite_or_null(d.mean_f)},
                       {"mean_decrease", finite_or_null(d.mean_decrease)},
                       {"required_decrease", finite_or_null(d.rho * d.grad_sq_norm)},
                       {"half_width", finite_or_null(d.half_width)},
                       {"trials", d.trials},
                       {"diverged_trials", d.diverged_trials},
                       {"holds", d.holds}};
    }
    rows.push_back(std::move(j));
  }
  return {{"mu", r.mu},
          {"L", r.L},
          {"rows", rows},
          {"precondition_fraction", r.precondition_fraction},
          {"decrease_checked", r.decrease_checked},
          {"decrease_held", r.decrease_held}};
}

void write_outputs(const ExperimentConfig& cfg, const ExperimentResult& result, bool tag_k) {
  if (cfg.output_dir.empty()) return;
  namespace fs = std::filesystem;
  fs::create_directories(cfg.output_dir);
  for (const auto& log : result.logs) {
    std::string stem = cfg.name + "_" + to_string(log.algorithm);
    if (tag_k) stem += "_K" + std::to_string(log.devices_per_round);
    const fs::path base = fs::path(cfg.output_dir) / stem;
    std::ofstream csv(base.string() + ".csv");
    write_metrics_csv(log, csv);
    json meta = {{"config", log.header}, {"dataset_stats", to_json(result.stats)}};
    meta["config"]["devices_per_round"] = log.devices_per_round;
    json sel = json::array();
    for (const auto& [algo, s] : result.selections) {
      if (algo != log.algorithm) continue;
      json scores = json::array();
      for (const auto& [mu, score] : s.scores)
        scores.push_back({{"mu", mu}, {"final_loss", finite_or_null(score)}});
      sel.push_back({{"selected", s.mu}, {"all_diverged", s.all_diverged}, {"scores", scores}});
    }
    meta["mu_selection"] = sel;
    std::ofstream(base.string() + ".meta.json") << meta.dump(2) << '\n';
  }
}

}  // namespace fedsim

#include <fedsim/harness.hpp>

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>

using namespace fedsim;

namespace {

struct Options {
  ExperimentConfig cfg;
  std::string dataset = "synthetic";
  std::vector<std::string> algorithms{"fedavg", "fedprox", "feddane"};
  std::string sampling = "with-replacement";
  std::string solver = "sgd";
  double mu_fedprox = -1.0;
  double mu_feddane = -1.0;
  std::vector<int> k_list{1, 5, 10, 30};
  std::string select_algorithm = "feddane";
};

void add_experiment_options(CLI::App& app, Options& o) {
  ExperimentConfig& c = o.cfg;
  SynthConfig& s = c.dataset.synthetic;
  app.add_option("--name", c.name, "Experiment name (output file prefix)");
  app.add_option("--dataset", o.dataset, "synthetic or leaf")
      ->check(CLI::IsMember({"synthetic", "leaf"}));
  app.add_option("--alpha", s.alpha, "Synthetic model heterogeneity");
  app.add_option("--beta", s.beta, "Synthetic feature heterogeneity");
  app.add_flag("--iid", s.iid, "Synthetic-IID");
  app.add_option("--num-devices", s.num_devices, "Synthetic device count");
  app.add_option("--input-dim", s.input_dim, "Synthetic feature dimension");
  app.add_option("--num-classes", s.num_classes, "Synthetic class count");
  app.add_option("--max-samples", s.max_samples, "Cap on samples per device (0: none)");
  app.add_option("--leaf-path", c.dataset.leaf_path, "LEAF training JSON");
  app.add_option("--eval-path", c.dataset.eval_path, "LEAF evaluation JSON");
  app.add_option("--normalize", c.dataset.normalize, "Rescale LEAF features into [0,1]");
  app.add_option("--algorithms", o.algorithms, "Subset of fedavg fedprox feddane")
      ->delimiter(',');
  app.add_option("--mu-fedprox", o.mu_fedprox, "Fixed FedProx mu (negative: select)");
  app.add_option("--mu-feddane", o.mu_feddane, "Fixed FedDANE mu (negative: select)");
  app.add_option("--mu-grid", c.mu_grid, "Candidate mu values")->delimiter(',');
  app.add_option("--select-fraction", c.select_fraction, "Share of T per mu candidate");
  app.add_option("--rounds,-T", c.rounds, "Model updates");
  app.add_option("--devices-per-round,-K", c.devices_per_round, "Devices per round");
  app.add_option("--local-epochs,-E", c.local_epochs, "Local epochs");
  app.add_option("--step-size", c.step_size, "Local SGD step size");
  app.add_option("--batch-size", c.batch_size, "Local minibatch size");
  app.add_option("--sampling", o.sampling, "with-replacement or without-replacement");
  app.add_flag("--reuse-gradient-subset", c.reuse_gradient_subset,
               "FedDANE: update devices equal gradient devices");
  app.add_option("--solver", o.solver, "Local solver: sgd or exact");
  app.add_option("--l2", c.l2, "l2 regularisation");
  app.add_option("--seed", c.seed, "Experiment seed");
  app.add_option("--eval-every", c.eval_every, "Updates between logged losses");
  app.add_option("--grad-norm-every", c.grad_norm_every, "Updates between gradient norms");
  app.add_option("--final-window", c.final_window, "Rows averaged for the final loss");
  app.add_option("--threads", c.threads, "Within-round worker threads");
  app.add_option("--output,-o", c.output_dir, "Output directory");
  app.add_option("--theory-every", c.theory_every, "Rounds between theory rows");
  app.add_option("--theory-trials", c.theory_trials, "Trials per decrease check");
}

void finalize(Options& o) {
  ExperimentConfig& c = o.cfg;
  c.dataset.kind =
      o.dataset == "leaf" ? DatasetSpec::Kind::kLeaf : DatasetSpec::Kind::kSynthetic;
  c.algorithms.clear();
  for (const auto& a : o.algorithms) c.algorithms.push_back(parse_algorithm(a));
  c.sampling = parse_sampling(o.sampling);
  c.solver = parse_local_solver(o.solver);
  if (o.mu_fedprox >= 0.0) c.mu_fedprox = o.mu_fedprox;
  if (o.mu_feddane >= 0.0) c.mu_feddane = o.mu_feddane;
  c.validate();
}

void print_summary(const ExperimentConfig& cfg, const ExperimentResult& r) {
  for (const auto& [a, s] : r.selections)
    std::cout << "selected mu for " << to_string(a) << ": " << s.mu
              << (s.all_diverged ? " (all candidates diverged)" : "") << '\n';
  for (const auto& log : r.logs) {
    std::cout << to_string(log.algorithm) << " K=" << log.devices_per_round
              << " mu=" << log.mu << " final_loss=" << final_loss(log, cfg.final_window);
    if (!log.rows.empty() && log.rows.back().diverged) std::cout << " (diverged)";
    std::cout << '\n';
  }
}

void write_json(const ExperimentConfig& cfg, const std::string& file, const nlohmann::json& j) {
  if (cfg.output_dir.empty()) return;
  std::filesystem::create_directories(cfg.output_dir);
  std::ofstream((std::filesystem::path(cfg.output_dir) / file).string()) << j.dump(2) << '\n';
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Federated optimisation simulator: FedAvg, FedProx and FedDANE"};
  app.set_config("--config", "", "Key-value configuration file (flags override it)");
  app.require_subcommand(1);
  app.fallthrough();
  Options o;
  add_experiment_options(app, o);

  auto* run = app.add_subcommand("run", "Run each algorithm for T updates");
  auto* sweep = app.add_subcommand("sweep-participation", "One run per (algorithm, K)");
  sweep->add_option("--k-list", o.k_list, "Devices-per-round values")->delimiter(',');
  auto* unreal = app.add_subcommand("unrealistic", "E = 1 with near-full participation");
  auto* select = app.add_subcommand("select-mu", "Pick mu from the grid by training loss");
  select->add_option("--algorithm", o.select_algorithm, "fedprox or feddane");
  auto* theory = app.add_subcommand("theory-report", "Track B, gamma and rho along a run");
  auto* stats = app.add_subcommand("stats", "Dataset statistics");

  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;
  }

  try {
    finalize(o);
    ExperimentConfig& cfg = o.cfg;
    if (*run) {
      const auto r = run_experiment(cfg);
      write_outputs(cfg, r);
      print_summary(cfg, r);
    } else if (*sweep) {
      const auto r = participation_sweep(cfg, o.k_list);
      write_outputs(cfg, r, true);
      print_summary(cfg, r);
    } else if (*unreal) {
      const BuiltDataset data = build_dataset(cfg);
      const ExperimentConfig u = unrealistic_config(cfg, data.train.num_devices());
      const auto r = run_experiment(data, u);
      write_outputs(u, r);
      print_summary(u, r);
    } else if (*select) {
      const BuiltDataset data = build_dataset(cfg);
      const Algorithm a = parse_algorithm(o.select_algorithm);
      const MuSelection s = select_mu(data, cfg, a, cfg.mu_grid);
      nlohmann::json scores = nlohmann::json::array();
      for (const auto& [mu, sc] : s.scores)
        scores.push_back({{"mu", mu},
                          {"final_loss", std::isfinite(sc) ? nlohmann::json(sc)
                                                           : nlohmann::json(nullptr)}});
      const nlohmann::json j = {{"algorithm", to_string(a)},
                                {"mu", s.mu},
                                {"all_diverged", s.all_diverged},
                                {"scores", scores}};
      write_json(cfg, cfg.name + "_select_mu.json", j);
      std::cout << j.dump(2) << '\n';
    } else if (*theory) {
      const nlohmann::json j = to_json(theory_report(cfg));
      write_json(cfg, cfg.name + "_theory.json", j);
      std::cout << j.dump(2) << '\n';
    } else if (*stats) {
      const BuiltDataset data = build_dataset(cfg);
      nlohmann::json j = to_json(dataset_stats(data.train));
      j["provenance"] = to_string(data.train.provenance);
      j["input_dim"] = data.train.input_dim;
      j["num_classes"] = data.train.num_classes;
      std::cout << j.dump(2) << '\n';
    }
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 1;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return 2;
  } catch (const NumericalError& e) {
    std::cerr << "numerical error: " << e.what() << '\n';
    return 3;
  } catch (const std::filesystem::filesystem_error& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << '\n';
    return 3;
  }
  return 0;
}

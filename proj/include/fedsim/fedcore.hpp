#pragma once

// Federated round engine: device sampling, local solvers, and the FedAvg,
// FedProx and FedDANE update rules.

#include <fedsim/data.hpp>
#include <fedsim/rng.hpp>

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace fedsim {

enum class Algorithm { kFedAvg, kFedProx, kFedDane };
enum class Sampling { kWithReplacement, kWithoutReplacement };
enum class LocalSolver { kSgd, kExact };

std::string to_string(Algorithm a);
std::string to_string(Sampling s);
std::string to_string(LocalSolver s);
Algorithm parse_algorithm(const std::string& name);
Sampling parse_sampling(const std::string& name);
LocalSolver parse_local_solver(const std::string& name);

struct AlgorithmConfig {
  Algorithm algorithm = Algorithm::kFedAvg;
  int devices_per_round = 10;  // K
  int local_epochs = 20;       // E
  double step_size = 0.01;     // eta
  int batch_size = 10;
  double mu = 0.0;
  Sampling sampling = Sampling::kWithReplacement;
  // FedDANE: solve on S_t itself instead of an independent S_t'.
  bool reuse_gradient_subset = false;
  LocalSolver solver = LocalSolver::kSgd;
  double exact_tol = 1e-10;
  int exact_max_iterations = 100000;
  // FedDANE: replace g_t by each device's own gradient so the correction term
  // vanishes. Only used to check reduction identities.
  bool zero_correction = false;
  int threads = 1;
  // Compute |grad f(w^t)|^2 every this many rounds (0 disables).
  int grad_norm_every = 0;

  void validate(Index num_devices) const;
  int comm_rounds_per_update() const { return algorithm == Algorithm::kFedDane ? 2 : 1; }
};

struct ServerState {
  ParameterVector w;
  std::int64_t round = 0;
  std::int64_t comm_rounds = 0;
  std::uint64_t seed = 0;
  AlgorithmConfig algo;
};

ServerState initial_state(const FederatedDataset& fd, const Objective& obj,
                          const AlgorithmConfig& algo, std::uint64_t seed);

struct RoundRecord {
  std::int64_t round = 0;
  std::vector<Index> update_devices;    // S_t (FedAvg, FedProx) or S_t' (FedDANE)
  std::vector<Index> gradient_devices;  // FedDANE S_t
  int comm_rounds = 1;
  double loss = 0.0;                    // f(w^t)
  std::optional<double> grad_sq_norm;   // |grad f(w^t)|^2
  bool diverged = false;
  double seconds = 0.0;
};

/// Per-round internals for verification code.
struct RoundDetail {
  ParameterVector w_prev;
  std::optional<ParameterVector> g_t;
  std::vector<ParameterVector> local_models;  // aligned with update_devices
  std::vector<ParameterVector> local_grads;   // grad F_k(w_prev), FedDANE only
};

/// Non-finite local iterate. The round engine records it instead of failing.
class DivergenceError : public NumericalError {
 public:
  DivergenceError(const std::string& what, Index device, std::int64_t round)
      : NumericalError(what), device_(device), round_(round) {}
  Index device() const { return device_; }
  std::int64_t round() const { return round_; }

 private:
  Index device_;
  std::int64_t round_;
};

/// f(w) = sum_k p_k F_k(w).
double global_loss(const FederatedDataset& fd, const Objective& obj,
                   const ParameterVector& w);
ParameterVector global_gradient(const FederatedDataset& fd, const Objective& obj,
                                const ParameterVector& w);

std::vector<Index> sample_devices(const Eigen::VectorXd& p, int K, Sampling mode,
                                  Engine& stream);
inline std::vector<Index> sample_devices(const FederatedDataset& fd, int K,
                                         Sampling mode, Engine& stream) {
  return sample_devices(fd.weights, K, mode, stream);
}

/// E epochs of minibatch SGD on F_k over a fresh permutation per epoch.
ParameterVector local_sgd(const Objective& obj, const DeviceDataset& data,
                          const ParameterVector& w_start, int epochs, double eta,
                          int batch_size, Engine& stream);

/// Local subproblem
///   F_k(w) + <correction, w - anchor> + mu/2 |w - anchor|^2
/// with correction = g_t - grad F_k(anchor) for FedDANE and absent for FedProx.
struct Subproblem {
  const DeviceDataset* data = nullptr;
  ParameterVector anchor;
  std::optional<ParameterVector> correction;
  double mu = 0.0;

  static Subproblem proximal(const DeviceDataset& data, ParameterVector anchor,
                             double mu);
  static Subproblem corrected(const DeviceDataset& data, ParameterVector anchor,
                              const ParameterVector& g_t,
                              const ParameterVector& grad_k_prev, double mu);
};

double surrogate_value(const Objective& obj, const Subproblem& sub,
                       const ParameterVector& w);
ParameterVector surrogate_full_gradient(const Objective& obj, const Subproblem& sub,
                                        const ParameterVector& w);
ParameterVector surrogate_gradient(const Objective& obj, const Subproblem& sub,
                                   const ParameterVector& w,
                                   std::span<const Index> batch);
/// Same gradient with the correction given by its two parts; pass nullptr
/// for both to drop the correction term.
ParameterVector surrogate_gradient(const Objective& obj, const DeviceDataset& data,
                                   const ParameterVector& w,
                                   const ParameterVector& w_prev,
                                   const ParameterVector* g_t,
                                   const ParameterVector* grad_k_prev, double mu,
                                   std::span<const Index> batch);

/// E epochs of SGD on the surrogate starting from the anchor.
ParameterVector solve_subproblem_inexact(const Objective& obj, const Subproblem& sub,
                                         int epochs, double eta, int batch_size,
                                         Engine& stream);

struct ExactSolution {
  ParameterVector w;
  bool converged = false;
  int iterations = 0;
  double relative_residual = 0.0;  // |grad P(w)| / |grad P(anchor)|
};

/// Near-exact minimiser of a strongly convex surrogate by accelerated
/// full-batch gradient descent with backtracking and restarts.
ExactSolution solve_subproblem_exact(const Objective& obj, const Subproblem& sub,
                                     double tol = 1e-10, int max_iterations = 100000);

RoundRecord fedavg_round(ServerState& state, const FederatedDataset& fd,
                         const Objective& obj, RoundDetail* detail = nullptr);
RoundRecord fedprox_round(ServerState& state, const FederatedDataset& fd,
                          const Objective& obj, RoundDetail* detail = nullptr);
RoundRecord feddane_round(ServerState& state, const FederatedDataset& fd,
                          const Objective& obj, RoundDetail* detail = nullptr);
/// Dispatches on state.algo.algorithm.
RoundRecord run_round(ServerState& state, const FederatedDataset& fd,
                      const Objective& obj, RoundDetail* detail = nullptr);

}  // namespace fedsim

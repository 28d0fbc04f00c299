#pragma once

// Inexactness and dissimilarity measurements, the sufficient-decrease
// constants for FedDANE (convex, non-convex, device-specific), the iteration
// budget they imply, and an empirical check of the expected decrease.

#include <fedsim/fedcore.hpp>

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

namespace fedsim {

struct TheoryConstants {
  double L = 1.0;       // gradient Lipschitz bound
  double mu = 1.0;      // proximal coefficient
  double gamma = 0.0;   // inexactness, in [0, 1)
  double B = 1.0;       // local dissimilarity bound
  double lambda = 0.0;  // curvature shift (non-convex only), mu - lambda > 0
};

struct DeviceConstants {
  double L = 1.0;
  double mu = 1.0;
  double gamma = 0.0;
};

/// Which smoothness constant multiplies (1 + gamma_k)^2 / mu_k^2 in the
/// dissimilarity sum of the device-specific bound. The printed bound uses the
/// network-level L there and L_k elsewhere.
enum class CrossTermL { kNetwork, kDevice };

/// rho = (2 - 3g)/(2 mu) - (2L(1+g)^2 + 3L)/(2 mu^2)
///       - (B^2 - 1)((L(1+g)^2 + L)/mu^2 + g/mu)
double rho_convex(const TheoryConstants& c);

/// rho = 1/mu - 3g/(2(mu-l)) - L(1+g)^2/(mu-l)^2 - 3L/(2 mu (mu-l))
///       - (B^2 - 1)(L(1+g)^2/(mu-l)^2 + L/(mu(mu-l)) + g/(mu-l))
/// Throws ConfigError unless mu > lambda.
double rho_nonconvex(const TheoryConstants& c);

double rho_device_specific(std::span<const DeviceConstants> devices, double L, double B,
                           CrossTermL cross = CrossTermL::kNetwork);

struct ConvergenceBudget {
  double delta = 0.0;    // f(w0) - f*
  double epsilon = 0.0;  // stationarity target on the mean |grad f|^2
  double rho = 0.0;
};

/// ceil(delta / (rho * epsilon)); nullopt when rho <= 0 (bound inapplicable).
std::optional<std::int64_t> iteration_bound(const ConvergenceBudget& budget);

/// B(w) = sqrt(E_k |grad F_k(w)|^2 / |grad f(w)|^2), expectation under p_k.
/// Throws UndefinedQuantity when |grad f(w)| <= threshold.
double measure_dissimilarity(const FederatedDataset& fd, const Objective& obj,
                             const ParameterVector& w, double threshold = 1e-12);

/// Smallest gamma with |w_t - w_exact| <= gamma |w_exact - w_prev|; nullopt
/// when |w_exact - w_prev| <= 1e-12.
std::optional<double> measure_inexactness(const ParameterVector& w_t,
                                          const ParameterVector& w_exact,
                                          const ParameterVector& w_prev);

/// max_k L_k over all devices.
double network_lipschitz(const FederatedDataset& fd, const Objective& obj);

struct OptimumEstimate {
  ParameterVector w;
  double value = 0.0;
  bool converged = false;  // reached the gradient tolerance
};

/// Centralised full-batch minimisation of f; an estimate of f* when not
/// converged or when f is non-convex.
OptimumEstimate estimate_optimum(const FederatedDataset& fd, const Objective& obj,
                                 double grad_tol = 1e-10, int max_iterations = 200000);

/// Max measured gamma over the update devices of one recorded round, each
/// compared against the exact solve of its own subproblem. nullopt when any
/// device's gamma is undefined.
std::optional<double> round_inexactness(const FederatedDataset& fd, const Objective& obj,
                                        const AlgorithmConfig& algo,
                                        const RoundRecord& rec, const RoundDetail& detail);

struct MeasuredConstants {
  TheoryConstants constants;
  bool dissimilarity_defined = true;
  bool inexactness_defined = true;
};

/// L from lipschitz_estimate (max over devices), B at w_prev, gamma as the
/// max over `rounds` sampled FedDANE rounds from w_prev.
MeasuredConstants measure_constants(const FederatedDataset& fd, const Objective& obj,
                                    const ParameterVector& w_prev,
                                    const AlgorithmConfig& algo, int rounds,
                                    std::uint64_t seed);

struct DecreaseReport {
  double rho = 0.0;
  double f_prev = 0.0;
  double grad_sq_norm = 0.0;
  double mean_f = 0.0;
  double mean_decrease = 0.0;  // f_prev - mean f(w^t)
  double half_width = 0.0;     // 95% normal-approximation half-width
  int trials = 0;
  int diverged_trials = 0;
  bool applicable = false;     // rho > 0
  bool holds = false;          // mean f <= f_prev - rho |grad|^2 + half_width
};

/// Runs `trials` FedDANE rounds from w_prev with independent sampling, and
/// compares the mean objective against the guaranteed decrease. Uses the
/// non-convex constant when obj is not convex.
DecreaseReport verify_sufficient_decrease(const FederatedDataset& fd, const Objective& obj,
                                          const ParameterVector& w_prev,
                                          const AlgorithmConfig& algo,
                                          const TheoryConstants& constants, int trials,
                                          std::uint64_t seed);

}  // namespace fedsim

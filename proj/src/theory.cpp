#include <fedsim/optim.hpp>
#include <fedsim/parallel.hpp>
#include <fedsim/theory.hpp>

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>

namespace fedsim {

double rho_convex(const TheoryConstants& c) {
  if (!(c.mu > 0.0)) throw ConfigError("rho_convex needs mu > 0");
  const double g = c.gamma, L = c.L, mu = c.mu;
  const double sq = (1.0 + g) * (1.0 + g);
  return (2.0 - 3.0 * g) / (2.0 * mu) - (2.0 * L * sq + 3.0 * L) / (2.0 * mu * mu) -
         (c.B * c.B - 1.0) * ((L * sq + L) / (mu * mu) + g / mu);
}

double rho_nonconvex(const TheoryConstants& c) {
  if (!(c.mu > c.lambda))
    throw ConfigError("rho_nonconvex needs mu > lambda (mu = " + std::to_string(c.mu) +
                      ", lambda = " + std::to_string(c.lambda) + ")");
  if (!(c.mu > 0.0)) throw ConfigError("rho_nonconvex needs mu > 0");
  const double g = c.gamma, L = c.L, mu = c.mu;
  const double gap = c.mu - c.lambda;
  const double sq = (1.0 + g) * (1.0 + g);
  return 1.0 / mu - 3.0 * g / (2.0 * gap) - L * sq / (gap * gap) -
         3.0 * L / (2.0 * mu * gap) -
         (c.B * c.B - 1.0) * (L * sq / (gap * gap) + L / (mu * gap) + g / gap);
}

double rho_device_specific(std::span<const DeviceConstants> devices, double L, double B,
                           CrossTermL cross) {
  if (devices.empty()) throw ConfigError("rho_device_specific needs at least one device");
  double progress = 0.0, penalty = 0.0;
  for (const auto& d : devices) {
    if (!(d.mu > 0.0)) throw ConfigError("rho_device_specific needs every mu_k > 0");
    const double sq = (1.0 + d.gamma) * (1.0 + d.gamma);
    const double mu2 = d.mu * d.mu;
    progress += 1.0 / d.mu - 3.0 * d.gamma / (2.0 * d.mu) - d.L * sq / mu2 -
                3.0 * d.L / (2.0 * mu2);
    const double cross_L = cross == CrossTermL::kNetwork ? L : d.L;
    penalty += cross_L * sq / mu2 + d.L / mu2 + d.gamma / d.mu;
  }
  const double K = static_cast<double>(devices.size());
  return progress / K - penalty / K * (B * B - 1.0);
}

std::optional<std::int64_t> iteration_bound(const ConvergenceBudget& b) {
  if (!(b.epsilon > 0.0)) throw ConfigError("iteration_bound needs epsilon > 0");
  if (!(b.delta >= 0.0)) throw ConfigError("iteration_bound needs delta >= 0");
  if (!(b.rho > 0.0)) return std::nullopt;
  return static_cast<std::int64_t>(std::ceil(b.delta / (b.rho * b.epsilon)));
}

double measure_dissimilarity(const FederatedDataset& fd, const Objective& obj,
                             const ParameterVector& w, double threshold) {
  ParameterVector global = ParameterVector::Zero(w.size());
  double mean_sq = 0.0;
  for (Index k = 0; k < fd.num_devices(); ++k) {
    const ParameterVector g = gradient(obj, w, fd.devices[k]);
    global += fd.weights(k) * g;
    mean_sq += fd.weights(k) * g.squaredNorm();
  }
  const double norm = global.norm();
  if (norm <= threshold)
    throw UndefinedQuantity("dissimilarity undefined: |grad f(w)| = " +
                            std::to_string(norm));
  return std::sqrt(mean_sq) / norm;
}

std::optional<double> measure_inexactness(const ParameterVector& w_t,
                                          const ParameterVector& w_exact,
                                          const ParameterVector& w_prev) {
  if (w_t.size() != w_exact.size() || w_prev.size() != w_exact.size())
    throw ConfigError("measure_inexactness: dimension mismatch");
  const double denom = (w_exact - w_prev).norm();
  if (!(denom > 1e-12)) return std::nullopt;
  return (w_t - w_exact).norm() / denom;
}

double network_lipschitz(const FederatedDataset& fd, const Objective& obj) {
  double L = 0.0;
  for (const auto& d : fd.devices) L = std::max(L, lipschitz_estimate(obj, d).value);
  return L;
}

OptimumEstimate estimate_optimum(const FederatedDataset& fd, const Objective& obj,
                                 double grad_tol, int max_iterations) {
  // Each F_k is L_k-smooth, so f is (max L_k)-smooth.
  const double smoothness = network_lipschitz(fd, obj);
  auto value_grad = [&](const ParameterVector& w, ParameterVector& g) {
    g.setZero(w.size());
    ParameterVector gk(w.size());
    double v = 0.0;
    for (Index k = 0; k < fd.num_devices(); ++k) {
      v += fd.weights(k) * loss_and_gradient(obj, w, fd.devices[k], gk);
      g += fd.weights(k) * gk;
    }
    return v;
  };
  ParameterVector w0 = ParameterVector::Zero(obj.param_dim(fd.input_dim));
  ParameterVector g0(w0.size());
  value_grad(w0, g0);
  // Absolute tolerance on |grad f|, expressed relative to the start.
  const double g0n = g0.norm();
  const double rel = g0n > 0.0 ? grad_tol / g0n : 1.0;
  auto r = minimize_accelerated<double>(value_grad, w0, smoothness, rel, max_iterations);
  return OptimumEstimate{std::move(r.x), r.value, r.converged};
}

namespace {

Subproblem subproblem_for(const FederatedDataset& fd, const AlgorithmConfig& algo,
                          const RoundDetail& detail, Index device, std::size_t slot) {
  const DeviceDataset& data = fd.devices[device];
  if (algo.algorithm != Algorithm::kFedDane)
    return Subproblem::proximal(data, detail.w_prev, algo.mu);
  const ParameterVector& own = detail.local_grads.at(slot);
  const ParameterVector& target = algo.zero_correction ? own : *detail.g_t;
  return Subproblem::corrected(data, detail.w_prev, target, own, algo.mu);
}

}  // namespace

std::optional<double> round_inexactness(const FederatedDataset& fd, const Objective& obj,
                                        const AlgorithmConfig& algo,
                                        const RoundRecord& rec, const RoundDetail& detail) {
  if (algo.algorithm == Algorithm::kFedAvg || !(algo.mu > obj.curvature_shift()))
    return std::nullopt;
  if (rec.diverged) return std::nullopt;
  std::map<Index, ParameterVector> exact;
  double worst = 0.0;
  for (std::size_t i = 0; i < rec.update_devices.size(); ++i) {
    const Index k = rec.update_devices[i];
    auto it = exact.find(k);
    if (it == exact.end()) {
      const Subproblem sub = subproblem_for(fd, algo, detail, k, i);
      it = exact.emplace(k, solve_subproblem_exact(obj, sub, algo.exact_tol,
                                                   algo.exact_max_iterations).w)
               .first;
    }
    const auto g = measure_inexactness(detail.local_models[i], it->second, detail.w_prev);
    if (!g) return std::nullopt;
    worst = std::max(worst, *g);
  }
  return worst;
}

MeasuredConstants measure_constants(const FederatedDataset& fd, const Objective& obj,
                                    const ParameterVector& w_prev,
                                    const AlgorithmConfig& algo, int rounds,
                                    std::uint64_t seed) {
  MeasuredConstants m;
  m.constants.L = network_lipschitz(fd, obj);
  m.constants.mu = algo.mu;
  m.constants.lambda = obj.curvature_shift();
  try {
    m.constants.B = measure_dissimilarity(fd, obj, w_prev);
  } catch (const UndefinedQuantity&) {
    m.dissimilarity_defined = false;
    m.constants.B = std::numeric_limits<double>::quiet_NaN();
  }
  double gamma = 0.0;
  for (int r = 0; r < rounds; ++r) {
    ServerState s;
    s.w = w_prev;
    s.seed = derive_seed(seed, Stream::kMisc, {static_cast<std::uint64_t>(r)});
    s.algo = algo;
    RoundDetail detail;
    const RoundRecord rec = run_round(s, fd, obj, &detail);
    const auto g = round_inexactness(fd, obj, algo, rec, detail);
    if (!g) {
      m.inexactness_defined = false;
      gamma = std::numeric_limits<double>::quiet_NaN();
      break;
    }
    gamma = std::max(gamma, *g);
  }
  m.constants.gamma = gamma;
  return m;
}

DecreaseReport verify_sufficient_decrease(const FederatedDataset& fd, const Objective& obj,
                                          const ParameterVector& w_prev,
                                          const AlgorithmConfig& algo,
                                          const TheoryConstants& constants, int trials,
                                          std::uint64_t seed) {
  if (trials < 1) throw ConfigError("verify_sufficient_decrease needs trials >= 1");
  DecreaseReport rep;
  rep.trials = trials;
  rep.f_prev = global_loss(fd, obj, w_prev);
  rep.grad_sq_norm = global_gradient(fd, obj, w_prev).squaredNorm();
  rep.rho = obj.convex() ? rho_convex(constants) : rho_nonconvex(constants);
  rep.applicable = rep.rho > 0.0 && constants.gamma >= 0.0 && constants.gamma < 1.0;

  AlgorithmConfig round_cfg = algo;
  round_cfg.algorithm = Algorithm::kFedDane;
  round_cfg.threads = 1;
  std::vector<double> f(static_cast<std::size_t>(trials));
  parallel_for(f.size(), algo.threads, [&](std::size_t i) {
    ServerState s;
    s.w = w_prev;
    s.seed = derive_seed(seed, Stream::kTrial, {static_cast<std::uint64_t>(i)});
    s.algo = round_cfg;
    f[i] = feddane_round(s, fd, obj).loss;
  });
  double sum = 0.0;
  for (double v : f) {
    if (!std::isfinite(v)) ++rep.diverged_trials;
    sum += v;
  }
  rep.mean_f = sum / trials;
  double ss = 0.0;
  for (double v : f) ss += (v - rep.mean_f) * (v - rep.mean_f);
  const double sd = trials > 1 ? std::sqrt(ss / (trials - 1)) : 0.0;
  rep.half_width = 1.96 * sd / std::sqrt(static_cast<double>(trials));
  rep.mean_decrease = rep.f_prev - rep.mean_f;
  rep.holds = rep.mean_f <= rep.f_prev - rep.rho * rep.grad_sq_norm + rep.half_width;
  return rep;
}

}  // namespace fedsim

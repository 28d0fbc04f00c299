#include <fedsim/fedcore.hpp>
#include <fedsim/optim.hpp>
#include <fedsim/parallel.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>

namespace fedsim {

std::string to_string(Algorithm a) {
  switch (a) {
    case Algorithm::kFedAvg:
      return "fedavg";
    case Algorithm::kFedProx:
      return "fedprox";
    case Algorithm::kFedDane:
      return "feddane";
  }
  return "unknown";
}

std::string to_string(Sampling s) {
  return s == Sampling::kWithReplacement ? "with-replacement" : "without-replacement";
}

std::string to_string(LocalSolver s) { return s == LocalSolver::kSgd ? "sgd" : "exact"; }

Algorithm parse_algorithm(const std::string& name) {
  if (name == "fedavg") return Algorithm::kFedAvg;
  if (name == "fedprox") return Algorithm::kFedProx;
  if (name == "feddane") return Algorithm::kFedDane;
  throw ConfigError("unknown algorithm '" + name + "'");
}

Sampling parse_sampling(const std::string& name) {
  if (name == "with-replacement") return Sampling::kWithReplacement;
  if (name == "without-replacement") return Sampling::kWithoutReplacement;
  throw ConfigError("unknown sampling mode '" + name + "'");
}

LocalSolver parse_local_solver(const std::string& name) {
  if (name == "sgd") return LocalSolver::kSgd;
  if (name == "exact") return LocalSolver::kExact;
  throw ConfigError("unknown local solver '" + name + "'");
}

void AlgorithmConfig::validate(Index num_devices) const {
  if (devices_per_round < 1) throw ConfigError("K must be >= 1");
  if (sampling == Sampling::kWithoutReplacement && devices_per_round > num_devices)
    throw ConfigError("K = " + std::to_string(devices_per_round) + " exceeds N = " +
                      std::to_string(num_devices) + " for sampling without replacement");
  if (solver == LocalSolver::kSgd) {
    if (local_epochs < 1) throw ConfigError("E must be >= 1");
    if (!(step_size >= 0.0) || !std::isfinite(step_size))
      throw ConfigError("step size must be finite and non-negative");
    if (batch_size < 1) throw ConfigError("batch size must be >= 1");
  }
  if (!(mu >= 0.0)) throw ConfigError("mu must be >= 0");
  if (solver == LocalSolver::kExact && !(mu > 0.0))
    throw ConfigError("exact local solves need mu > 0");
}

ServerState initial_state(const FederatedDataset& fd, const Objective& obj,
                          const AlgorithmConfig& algo, std::uint64_t seed) {
  algo.validate(fd.num_devices());
  ServerState s;
  s.w = ParameterVector::Zero(obj.param_dim(fd.input_dim));
  s.seed = seed;
  s.algo = algo;
  return s;
}

double global_loss(const FederatedDataset& fd, const Objective& obj,
                   const ParameterVector& w) {
  double f = 0.0;
  for (Index k = 0; k < fd.num_devices(); ++k)
    f += fd.weights(k) * loss(obj, w, fd.devices[k]);
  return f;
}

ParameterVector global_gradient(const FederatedDataset& fd, const Objective& obj,
                                const ParameterVector& w) {
  ParameterVector g = ParameterVector::Zero(w.size());
  for (Index k = 0; k < fd.num_devices(); ++k)
    g += fd.weights(k) * gradient(obj, w, fd.devices[k]);
  return g;
}

std::vector<Index> sample_devices(const Eigen::VectorXd& p, int K, Sampling mode,
                                  Engine& stream) {
  if (K < 1) throw ConfigError("K must be >= 1");
  const Index N = p.size();
  std::vector<double> weights(p.data(), p.data() + N);
  std::vector<Index> out;
  out.reserve(static_cast<std::size_t>(K));
  if (mode == Sampling::kWithReplacement) {
    std::discrete_distribution<Index> pick(weights.begin(), weights.end());
    for (int i = 0; i < K; ++i) out.push_back(pick(stream));
    return out;
  }
  if (K > N)
    throw ConfigError("cannot draw " + std::to_string(K) + " distinct devices from " +
                      std::to_string(N));
  std::vector<Index> ids(static_cast<std::size_t>(N));
  std::iota(ids.begin(), ids.end(), Index{0});
  for (int i = 0; i < K; ++i) {
    // Only zero-weight devices left: continue uniformly.
    if (std::accumulate(weights.begin(), weights.end(), 0.0) <= 0.0)
      std::fill(weights.begin(), weights.end(), 1.0);
    std::discrete_distribution<std::size_t> pick(weights.begin(), weights.end());
    const std::size_t j = pick(stream);
    out.push_back(ids[j]);
    ids.erase(ids.begin() + static_cast<std::ptrdiff_t>(j));
    weights.erase(weights.begin() + static_cast<std::ptrdiff_t>(j));
  }
  return out;
}

namespace {

// Row-gathering minibatch gradient with reusable buffers; indices are trusted.
class BatchGradient {
 public:
  BatchGradient(const Objective& obj, const DeviceDataset& data)
      : obj_(obj), data_(data) {}

  void operator()(const ParameterVector& w, std::span<const Index> rows,
                  ParameterVector& g) {
    const auto b = static_cast<Index>(rows.size());
    X_.resize(b, data_.input_dim());
    y_.resize(b);
    for (Index i = 0; i < b; ++i) {
      X_.row(i) = data_.features.row(rows[static_cast<std::size_t>(i)]);
      y_(i) = data_.labels(rows[static_cast<std::size_t>(i)]);
    }
    g.setZero(w.size());
    detail::accumulate<double>(obj_, w, X_, y_, &g, &Z_);
    g /= static_cast<double>(b);
    detail::add_penalty_gradient(obj_, w, g);
  }

 private:
  const Objective& obj_;
  const DeviceDataset& data_;
  RowMatrixX<double> X_;
  VectorX<double> y_;
  RowMatrixX<double> Z_;
};

// Adds the correction and proximal terms of the surrogate to g in place.
void add_surrogate_terms(const Subproblem& sub, const ParameterVector& w,
                         ParameterVector& g) {
  if (sub.correction) g += *sub.correction;
  if (sub.mu != 0.0) g += sub.mu * (w - sub.anchor);
}

template <typename Extra>
ParameterVector sgd_epochs(const Objective& obj, const DeviceDataset& data,
                           ParameterVector w, int epochs, double eta,
                           int batch_size, Engine& stream, Extra&& extra) {
  if (epochs < 1) throw ConfigError("local epochs must be >= 1");
  if (!(eta >= 0.0)) throw ConfigError("step size must be >= 0");
  if (batch_size < 1) throw ConfigError("batch size must be >= 1");
  if (w.size() != obj.param_dim(data.input_dim()))
    throw ConfigError("start point has wrong dimension");
  const Index n = data.num_samples();
  std::vector<Index> perm(static_cast<std::size_t>(n));
  std::iota(perm.begin(), perm.end(), Index{0});
  BatchGradient batch_grad(obj, data);
  ParameterVector g(w.size());
  for (int e = 0; e < epochs; ++e) {
    std::shuffle(perm.begin(), perm.end(), stream);
    for (Index start = 0; start < n; start += batch_size) {
      const Index len = std::min<Index>(batch_size, n - start);
      const std::span<const Index> rows(perm.data() + start, static_cast<std::size_t>(len));
      batch_grad(w, rows, g);
      extra(w, g);
      w -= eta * g;
      if (!w.allFinite())
        throw DivergenceError("local iterate became non-finite at epoch " +
                                  std::to_string(e) + " on device " +
                                  std::to_string(data.device_id),
                              data.device_id, -1);
    }
  }
  return w;
}

}  // namespace

ParameterVector local_sgd(const Objective& obj, const DeviceDataset& data,
                          const ParameterVector& w_start, int epochs, double eta,
                          int batch_size, Engine& stream) {
  return sgd_epochs(obj, data, w_start, epochs, eta, batch_size, stream,
                    [](const ParameterVector&, ParameterVector&) {});
}

Subproblem Subproblem::proximal(const DeviceDataset& data, ParameterVector anchor,
                                double mu) {
  Subproblem s;
  s.data = &data;
  s.anchor = std::move(anchor);
  s.mu = mu;
  return s;
}

Subproblem Subproblem::corrected(const DeviceDataset& data, ParameterVector anchor,
                                 const ParameterVector& g_t,
                                 const ParameterVector& grad_k_prev, double mu) {
  if (g_t.size() != anchor.size() || grad_k_prev.size() != anchor.size())
    throw ConfigError("correction vectors have wrong dimension");
  Subproblem s = proximal(data, std::move(anchor), mu);
  s.correction = g_t - grad_k_prev;
  return s;
}

namespace {

void check_subproblem(const Objective& obj, const Subproblem& sub,
                      const ParameterVector& w) {
  if (sub.data == nullptr) throw ConfigError("subproblem has no data");
  const Index d = obj.param_dim(sub.data->input_dim());
  if (w.size() != d || sub.anchor.size() != d ||
      (sub.correction && sub.correction->size() != d))
    throw ConfigError("subproblem vectors have wrong dimension");
}

}  // namespace

double surrogate_value(const Objective& obj, const Subproblem& sub,
                       const ParameterVector& w) {
  check_subproblem(obj, sub, w);
  const ParameterVector delta = w - sub.anchor;
  double v = loss(obj, w, *sub.data);
  if (sub.correction) v += sub.correction->dot(delta);
  v += 0.5 * sub.mu * delta.squaredNorm();
  return v;
}

ParameterVector surrogate_full_gradient(const Objective& obj, const Subproblem& sub,
                                        const ParameterVector& w) {
  check_subproblem(obj, sub, w);
  ParameterVector g = gradient(obj, w, *sub.data);
  add_surrogate_terms(sub, w, g);
  return g;
}

ParameterVector surrogate_gradient(const Objective& obj, const Subproblem& sub,
                                   const ParameterVector& w,
                                   std::span<const Index> batch) {
  check_subproblem(obj, sub, w);
  ParameterVector g = minibatch_gradient(obj, w, *sub.data, batch);
  add_surrogate_terms(sub, w, g);
  return g;
}

ParameterVector surrogate_gradient(const Objective& obj, const DeviceDataset& data,
                                   const ParameterVector& w,
                                   const ParameterVector& w_prev,
                                   const ParameterVector* g_t,
                                   const ParameterVector* grad_k_prev, double mu,
                                   std::span<const Index> batch) {
  if ((g_t == nullptr) != (grad_k_prev == nullptr))
    throw ConfigError("g_t and grad_k_prev must be given together");
  const Subproblem sub = g_t ? Subproblem::corrected(data, w_prev, *g_t, *grad_k_prev, mu)
                             : Subproblem::proximal(data, w_prev, mu);
  return surrogate_gradient(obj, sub, w, batch);
}

ParameterVector solve_subproblem_inexact(const Objective& obj, const Subproblem& sub,
                                         int epochs, double eta, int batch_size,
                                         Engine& stream) {
  check_subproblem(obj, sub, sub.anchor);
  return sgd_epochs(obj, *sub.data, sub.anchor, epochs, eta, batch_size, stream,
                    [&sub](const ParameterVector& w, ParameterVector& g) {
                      add_surrogate_terms(sub, w, g);
                    });
}

ExactSolution solve_subproblem_exact(const Objective& obj, const Subproblem& sub,
                                     double tol, int max_iterations) {
  check_subproblem(obj, sub, sub.anchor);
  const double smoothness = lipschitz_estimate(obj, *sub.data).value + sub.mu;
  auto value_grad = [&](const ParameterVector& w, ParameterVector& g) {
    double v = loss_and_gradient(obj, w, *sub.data, g);
    add_surrogate_terms(sub, w, g);
    const ParameterVector delta = w - sub.anchor;
    v += 0.5 * sub.mu * delta.squaredNorm();
    if (sub.correction) v += sub.correction->dot(delta);
    return v;
  };
  auto r = minimize_accelerated<double>(value_grad, sub.anchor, smoothness, tol,
                                        max_iterations);
  ExactSolution out;
  out.w = std::move(r.x);
  out.converged = r.converged;
  out.iterations = r.iterations;
  out.relative_residual = r.relative_residual;
  return out;
}

namespace {

// Sorted device ids plus, for each slot, how many earlier slots hold the same
// device. (round, device, occurrence) keys the solver stream.
struct Slots {
  std::vector<Index> devices;
  std::vector<std::uint64_t> occurrence;
};

Slots make_slots(std::vector<Index> devices) {
  std::sort(devices.begin(), devices.end());
  Slots s;
  s.occurrence.resize(devices.size());
  for (std::size_t i = 0; i < devices.size(); ++i)
    s.occurrence[i] = (i > 0 && devices[i] == devices[i - 1]) ? s.occurrence[i - 1] + 1 : 0;
  s.devices = std::move(devices);
  return s;
}

ParameterVector nan_vector(Index d) {
  return ParameterVector::Constant(d, std::numeric_limits<double>::quiet_NaN());
}

ParameterVector mean_of(const std::vector<ParameterVector>& models, Index d) {
  ParameterVector sum = ParameterVector::Zero(d);
  for (const auto& m : models) sum += m;
  return sum / static_cast<double>(models.size());
}

struct Step {
  const ServerState& state;
  const FederatedDataset& fd;
  const Objective& obj;
  std::int64_t round;  // t of the update being computed (1-based)

  Engine solver_stream(Index device, std::uint64_t occurrence) const {
    return make_engine(state.seed, Stream::kSolver,
                       {static_cast<std::uint64_t>(round), static_cast<std::uint64_t>(device),
                        occurrence});
  }
  std::vector<Index> sample(Stream family) const {
    Engine e = make_engine(state.seed, family, {static_cast<std::uint64_t>(round)});
    return sample_devices(fd, state.algo.devices_per_round, state.algo.sampling, e);
  }
};

// Runs the local solver for every slot; a diverging device yields NaN.
std::vector<ParameterVector> solve_slots(
    const Step& step, const Slots& slots, bool& diverged,
    const std::function<ParameterVector(std::size_t, Engine&)>& solve) {
  const Index d = step.state.w.size();
  std::vector<ParameterVector> out(slots.devices.size());
  std::vector<char> failed(slots.devices.size(), 0);
  parallel_for(slots.devices.size(), step.state.algo.threads, [&](std::size_t i) {
    Engine stream = step.solver_stream(slots.devices[i], slots.occurrence[i]);
    try {
      out[i] = solve(i, stream);
      if (!out[i].allFinite()) throw NumericalError("non-finite local model");
    } catch (const NumericalError&) {
      out[i] = nan_vector(d);
      failed[i] = 1;
    }
  });
  diverged = std::any_of(failed.begin(), failed.end(), [](char f) { return f != 0; });
  return out;
}

ParameterVector local_update(const Step& step, const Subproblem& sub, Engine& stream) {
  const AlgorithmConfig& a = step.state.algo;
  if (a.solver == LocalSolver::kExact)
    return solve_subproblem_exact(step.obj, sub, a.exact_tol, a.exact_max_iterations).w;
  return solve_subproblem_inexact(step.obj, sub, a.local_epochs, a.step_size,
                                  a.batch_size, stream);
}

void finish_round(ServerState& state, const FederatedDataset& fd, const Objective& obj,
                  RoundRecord& rec, ParameterVector w_next,
                  std::chrono::steady_clock::time_point started) {
  state.w = std::move(w_next);
  state.round += 1;
  state.comm_rounds += rec.comm_rounds;
  rec.round = state.round;
  if (!state.w.allFinite()) rec.diverged = true;
  if (rec.diverged) {
    rec.loss = std::numeric_limits<double>::quiet_NaN();
  } else {
    try {
      rec.loss = global_loss(fd, obj, state.w);
      const int every = state.algo.grad_norm_every;
      if (every > 0 && state.round % every == 0)
        rec.grad_sq_norm = global_gradient(fd, obj, state.w).squaredNorm();
    } catch (const NumericalError&) {
      rec.diverged = true;
      rec.loss = std::numeric_limits<double>::quiet_NaN();
    }
  }
  rec.seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
}

// Shared body of FedAvg and FedProx: sample S_t, solve locally, average.
RoundRecord single_phase_round(ServerState& state, const FederatedDataset& fd,
                               const Objective& obj, RoundDetail* detail,
                               bool proximal) {
  const auto started = std::chrono::steady_clock::now();
  const Step step{state, fd, obj, state.round + 1};
  RoundRecord rec;
  rec.comm_rounds = 1;
  const Slots slots = make_slots(step.sample(Stream::kUpdateSample));
  rec.update_devices = slots.devices;
  const Index d = state.w.size();
  if (detail) {
    *detail = RoundDetail{};
    detail->w_prev = state.w;
  }
  if (!state.w.allFinite()) {
    rec.diverged = true;
    finish_round(state, fd, obj, rec, nan_vector(d), started);
    return rec;
  }
  const AlgorithmConfig& a = state.algo;
  bool diverged = false;
  auto models = solve_slots(step, slots, diverged, [&](std::size_t i, Engine& stream) {
    const DeviceDataset& data = fd.devices[slots.devices[i]];
    if (!proximal)
      return local_sgd(obj, data, state.w, a.local_epochs, a.step_size, a.batch_size, stream);
    return local_update(step, Subproblem::proximal(data, state.w, a.mu), stream);
  });
  rec.diverged = diverged;
  ParameterVector w_next = mean_of(models, d);
  if (detail) detail->local_models = std::move(models);
  finish_round(state, fd, obj, rec, std::move(w_next), started);
  return rec;
}

}  // namespace

RoundRecord fedavg_round(ServerState& state, const FederatedDataset& fd,
                         const Objective& obj, RoundDetail* detail) {
  if (state.algo.algorithm != Algorithm::kFedAvg)
    throw ConfigError("fedavg_round called with algorithm " + to_string(state.algo.algorithm));
  if (state.algo.solver != LocalSolver::kSgd)
    throw ConfigError("FedAvg runs SGD on F_k; exact solves need mu > 0 (use fedprox)");
  return single_phase_round(state, fd, obj, detail, false);
}

RoundRecord fedprox_round(ServerState& state, const FederatedDataset& fd,
                          const Objective& obj, RoundDetail* detail) {
  if (state.algo.algorithm != Algorithm::kFedProx)
    throw ConfigError("fedprox_round called with algorithm " + to_string(state.algo.algorithm));
  return single_phase_round(state, fd, obj, detail, true);
}

RoundRecord feddane_round(ServerState& state, const FederatedDataset& fd,
                          const Objective& obj, RoundDetail* detail) {
  if (state.algo.algorithm != Algorithm::kFedDane)
    throw ConfigError("feddane_round called with algorithm " + to_string(state.algo.algorithm));
  const auto started = std::chrono::steady_clock::now();
  const AlgorithmConfig& a = state.algo;
  const Step step{state, fd, obj, state.round + 1};
  RoundRecord rec;
  rec.comm_rounds = 2;
  const Slots grad_slots = make_slots(step.sample(Stream::kGradientSample));
  const Slots slots = a.reuse_gradient_subset ? grad_slots
                                              : make_slots(step.sample(Stream::kUpdateSample));
  rec.gradient_devices = grad_slots.devices;
  rec.update_devices = slots.devices;
  const Index d = state.w.size();
  if (detail) {
    *detail = RoundDetail{};
    detail->w_prev = state.w;
  }
  if (!state.w.allFinite()) {
    rec.diverged = true;
    finish_round(state, fd, obj, rec, nan_vector(d), started);
    return rec;
  }

  // Full-batch local gradients at w^{t-1}, once per distinct device.
  std::map<Index, ParameterVector> device_grads;
  for (Index k : grad_slots.devices) device_grads.emplace(k, ParameterVector{});
  for (Index k : slots.devices) device_grads.emplace(k, ParameterVector{});
  std::vector<Index> distinct;
  for (const auto& kv : device_grads) distinct.push_back(kv.first);
  bool grad_failed = false;
  std::vector<ParameterVector> grads(distinct.size());
  std::vector<char> failed(distinct.size(), 0);
  parallel_for(distinct.size(), a.threads, [&](std::size_t i) {
    try {
      grads[i] = gradient(obj, state.w, fd.devices[distinct[i]]);
    } catch (const NumericalError&) {
      grads[i] = nan_vector(d);
      failed[i] = 1;
    }
  });
  for (std::size_t i = 0; i < distinct.size(); ++i) {
    device_grads[distinct[i]] = std::move(grads[i]);
    grad_failed = grad_failed || failed[i];
  }

  // g_t = (1/K) sum_{k in S_t} grad F_k(w^{t-1}), summed in device-id order.
  ParameterVector g_t = ParameterVector::Zero(d);
  for (Index k : grad_slots.devices) g_t += device_grads[k];
  g_t /= static_cast<double>(grad_slots.devices.size());

  bool diverged = false;
  auto models = solve_slots(step, slots, diverged, [&](std::size_t i, Engine& stream) {
    const Index k = slots.devices[i];
    const ParameterVector& own = device_grads.at(k);
    const ParameterVector& target = a.zero_correction ? own : g_t;
    return local_update(step, Subproblem::corrected(fd.devices[k], state.w, target, own, a.mu),
                        stream);
  });
  rec.diverged = diverged || grad_failed;
  ParameterVector w_next = mean_of(models, d);
  if (detail) {
    detail->g_t = g_t;
    detail->local_models = std::move(models);
    for (Index k : slots.devices) detail->local_grads.push_back(device_grads.at(k));
  }
  finish_round(state, fd, obj, rec, std::move(w_next), started);
  return rec;
}

RoundRecord run_round(ServerState& state, const FederatedDataset& fd,
                      const Objective& obj, RoundDetail* detail) {
  switch (state.algo.algorithm) {
    case Algorithm::kFedAvg:
      return fedavg_round(state, fd, obj, detail);
    case Algorithm::kFedProx:
      return fedprox_round(state, fd, obj, detail);
    case Algorithm::kFedDane:
      return feddane_round(state, fd, obj, detail);
  }
  throw ConfigError("unknown algorithm");
}

}  // namespace fedsim

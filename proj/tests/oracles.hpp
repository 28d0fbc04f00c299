#pragma once

// Straight-line reference implementations used as test oracles. They share
// no code with the library beyond the data containers.

#include <fedsim/data.hpp>
#include <fedsim/models.hpp>

#include <cmath>
#include <functional>
#include <random>
#include <vector>

namespace oracle {

using fedsim::DeviceDataset;
using fedsim::Index;
using fedsim::Objective;
using fedsim::ParameterVector;

inline long double weight(const ParameterVector& w, Index c, Index j,
                          Index d_in) {
  return static_cast<long double>(w(c * d_in + j));
}

inline long double bias(const Objective& obj, const ParameterVector& w, Index c, Index d_in) {
  if (!obj.intercept) return 0.0L;
  const Index outputs = obj.task == fedsim::Task::kMultinomialLogistic ? obj.num_classes : 1;
  return static_cast<long double>(w(outputs * d_in + c));
}

// Per-sample loss, computed with long double and no shifting tricks.
inline long double sample_loss(const Objective& obj, const ParameterVector& w,
                               const DeviceDataset& d, Index i) {
  const Index d_in = d.input_dim();
  if (obj.task == fedsim::Task::kLinearRegression) {
    long double pred = bias(obj, w, 0, d_in);
    for (Index j = 0; j < d_in; ++j) pred += weight(w, 0, j, d_in) * d.features(i, j);
    const long double r = pred - d.labels(i);
    return 0.5L * r * r;
  }
  std::vector<long double> z(static_cast<std::size_t>(obj.num_classes));
  for (Index c = 0; c < obj.num_classes; ++c) {
    long double s = bias(obj, w, c, d_in);
    for (Index j = 0; j < d_in; ++j) s += weight(w, c, j, d_in) * d.features(i, j);
    z[static_cast<std::size_t>(c)] = s;
  }
  long double denom = 0.0L;
  for (long double v : z) denom += std::exp(v);
  const auto label = static_cast<std::size_t>(d.labels(i));
  return -std::log(std::exp(z[label]) / denom);
}

inline long double penalty(const Objective& obj, const ParameterVector& w) {
  long double p = 0.0L;
  for (Index i = 0; i < w.size(); ++i) {
    const long double x = w(i);
    p += 0.5L * obj.l2 * x * x + obj.sine_amplitude * (1.0L - std::cos(x));
  }
  return p;
}

inline double loss(const Objective& obj, const ParameterVector& w, const DeviceDataset& d) {
  long double s = 0.0L;
  for (Index i = 0; i < d.num_samples(); ++i) s += sample_loss(obj, w, d, i);
  return static_cast<double>(s / d.num_samples() + penalty(obj, w));
}

// Gradient of one sample's loss (no penalty), written out per coordinate.
inline ParameterVector sample_gradient(const Objective& obj, const ParameterVector& w,
                                       const DeviceDataset& d, Index i) {
  const Index d_in = d.input_dim();
  ParameterVector g = ParameterVector::Zero(w.size());
  if (obj.task == fedsim::Task::kLinearRegression) {
    long double pred = bias(obj, w, 0, d_in);
    for (Index j = 0; j < d_in; ++j) pred += weight(w, 0, j, d_in) * d.features(i, j);
    const long double r = pred - d.labels(i);
    for (Index j = 0; j < d_in; ++j) g(j) = static_cast<double>(r * d.features(i, j));
    if (obj.intercept) g(d_in) = static_cast<double>(r);
    return g;
  }
  const Index C = obj.num_classes;
  std::vector<long double> p(static_cast<std::size_t>(C));
  long double denom = 0.0L;
  for (Index c = 0; c < C; ++c) {
    long double s = bias(obj, w, c, d_in);
    for (Index j = 0; j < d_in; ++j) s += weight(w, c, j, d_in) * d.features(i, j);
    p[static_cast<std::size_t>(c)] = std::exp(s);
    denom += p[static_cast<std::size_t>(c)];
  }
  for (Index c = 0; c < C; ++c) {
    const long double coef = p[static_cast<std::size_t>(c)] / denom -
                             (c == static_cast<Index>(d.labels(i)) ? 1.0L : 0.0L);
    for (Index j = 0; j < d_in; ++j) g(c * d_in + j) = static_cast<double>(coef * d.features(i, j));
    if (obj.intercept) g(C * d_in + c) = static_cast<double>(coef);
  }
  return g;
}

inline ParameterVector penalty_gradient(const Objective& obj, const ParameterVector& w) {
  ParameterVector g(w.size());
  for (Index i = 0; i < w.size(); ++i) g(i) = obj.l2 * w(i) + obj.sine_amplitude * std::sin(w(i));
  return g;
}

inline ParameterVector gradient(const Objective& obj, const ParameterVector& w,
                                const DeviceDataset& d) {
  std::vector<long double> acc(static_cast<std::size_t>(w.size()), 0.0L);
  for (Index i = 0; i < d.num_samples(); ++i) {
    const ParameterVector gi = sample_gradient(obj, w, d, i);
    for (Index j = 0; j < w.size(); ++j) acc[static_cast<std::size_t>(j)] += gi(j);
  }
  ParameterVector g(w.size());
  for (Index j = 0; j < w.size(); ++j)
    g(j) = static_cast<double>(acc[static_cast<std::size_t>(j)] / d.num_samples());
  return g + penalty_gradient(obj, w);
}

// Central difference of f along v.
inline double directional_fd(const std::function<double(const ParameterVector&)>& f,
                             const ParameterVector& w, const ParameterVector& v, double eps) {
  return (f(w + eps * v) - f(w - eps * v)) / (2.0 * eps);
}

inline double relative_error(double a, double b, double floor = 1e-12) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

inline DeviceDataset random_device(std::mt19937_64& rng, Index n, Index d_in, int classes,
                                   bool regression = false, double scale = 1.0) {
  std::normal_distribution<double> N01;
  DeviceDataset d;
  d.features.resize(n, d_in);
  d.labels.resize(n);
  for (Index i = 0; i < n; ++i) {
    for (Index j = 0; j < d_in; ++j) d.features(i, j) = scale * N01(rng);
    d.labels(i) = regression ? N01(rng)
                             : static_cast<double>(std::uniform_int_distribution<int>(
                                   0, classes - 1)(rng));
  }
  return d;
}

inline ParameterVector random_vector(std::mt19937_64& rng, Index n, double scale = 1.0) {
  std::normal_distribution<double> N01;
  ParameterVector v(n);
  for (Index i = 0; i < n; ++i) v(i) = scale * N01(rng);
  return v;
}

inline ParameterVector random_unit(std::mt19937_64& rng, Index n) {
  ParameterVector v = random_vector(rng, n);
  return v / v.norm();
}

// Sufficient-decrease constants, expanded as polynomials in 1/mu with
// every product multiplied out by hand.
inline double rho_convex(double L, double mu, double g, double B) {
  const long double b2 = static_cast<long double>(B) * B;
  const long double inv = 1.0L / mu, inv2 = inv * inv;
  // (2 - 3g)/(2mu) = inv - 1.5 g inv
  // (2L(1+2g+g^2) + 3L)/(2mu^2) = (2.5 L + 2 L g + L g^2) inv2
  // (b2 - 1)((L(1+2g+g^2) + L) inv2 + g inv) = (b2 - 1)((2L + 2Lg + Lg^2) inv2 + g inv)
  return inv - 1.5 * g * inv - (2.5 * L + 2.0 * L * g + L * g * g) * inv2 -
         (b2 - 1.0) * (2.0 * L + 2.0 * L * g + L * g * g) * inv2 - (b2 - 1.0) * g * inv;
}

inline double rho_nonconvex(double L, double mu, double g, double B, double lambda) {
  const long double b2 = static_cast<long double>(B) * B;
  const long double a = 1.0L / (static_cast<long double>(mu) - lambda), a2 = a * a;
  const long double q = 1.0 + 2.0 * g + g * g;
  return 1.0L / mu - 1.5 * g * a - L * q * a2 - 1.5 * L * a / mu - b2 * L * q * a2 +
         L * q * a2 - b2 * L * a / mu + L * a / mu - b2 * g * a + g * a;
}

struct DeviceTuple {
  double L, mu, g;
};

inline double rho_device(const std::vector<DeviceTuple>& ds, double L, double B,
                         bool cross_uses_device_L) {
  long double total = 0.0L;
  for (const auto& d : ds) {
    const long double q = 1.0 + 2.0 * d.g + d.g * d.g;
    const long double inv = 1.0L / d.mu, inv2 = inv * inv;
    const long double Lx = cross_uses_device_L ? d.L : L;
    total += inv - 1.5 * d.g * inv - d.L * q * inv2 - 1.5 * d.L * inv2 -
             (B * B - 1.0) * (Lx * q * inv2 + d.L * inv2 + d.g * inv);
  }
  return total / static_cast<double>(ds.size());
}

inline double dissimilarity(const fedsim::FederatedDataset& fd, const Objective& obj,
                            const ParameterVector& w) {
  long double mean_sq = 0.0L;
  std::vector<long double> mean(static_cast<std::size_t>(w.size()), 0.0L);
  for (Index k = 0; k < fd.num_devices(); ++k) {
    const ParameterVector g = gradient(obj, w, fd.devices[k]);
    const long double p = static_cast<long double>(fd.devices[k].num_samples()) /
                          static_cast<long double>(fd.total_samples());
    for (Index j = 0; j < w.size(); ++j) {
      mean_sq += p * g(j) * g(j);
      mean[static_cast<std::size_t>(j)] += p * g(j);
    }
  }
  long double norm_sq = 0.0L;
  for (long double m : mean) norm_sq += m * m;
  return static_cast<double>(std::sqrt(mean_sq / norm_sq));
}

}  // namespace oracle

#pragma once

// Local objectives F_k for convex model families.
//
// Parameter layout for the multinomial logistic model with C classes and
// d_in inputs: the C x d_in weight matrix flattened class-major (row c holds
// the weights of class c), followed by the C biases. Linear regression uses
// d_in weights followed by one bias. The bias block is omitted when
// Objective::intercept is false.

#include <fedsim/common.hpp>

#include <Eigen/Dense>

#include <cmath>
#include <span>
#include <string>
#include <vector>

namespace fedsim {

enum class Task { kMultinomialLogistic, kLinearRegression };

std::string to_string(Task task);
Task parse_task(const std::string& name);

struct Objective {
  Task task = Task::kMultinomialLogistic;
  int num_classes = 10;
  double l2 = 0.0;
  bool intercept = true;
  // Optional non-convex perturbation a * sum_j (1 - cos w_j). Its Hessian is
  // diagonal with entries in [-a, a], so lambda = a shifts it back to PSD.
  double sine_amplitude = 0.0;

  Index param_dim(Index input_dim) const {
    const Index outputs = task == Task::kMultinomialLogistic ? num_classes : 1;
    return outputs * input_dim + (intercept ? outputs : 0);
  }
  /// Curvature shift making every Hessian positive semidefinite.
  double curvature_shift() const { return sine_amplitude; }
  bool convex() const { return sine_amplitude == 0.0; }
};

/// One device's local samples. Class labels are stored as exact integers.
template <typename Scalar>
struct BasicDeviceDataset {
  RowMatrixX<Scalar> features;  // n_k x d_in
  VectorX<Scalar> labels;       // n_k
  int device_id = 0;

  Index num_samples() const { return features.rows(); }
  Index input_dim() const { return features.cols(); }
};

using DeviceDataset = BasicDeviceDataset<double>;

/// Throws DataError unless the dataset satisfies n_k >= 1, matching row
/// counts, and labels valid for the task.
template <typename Scalar>
void validate_dataset(const Objective& obj, const BasicDeviceDataset<Scalar>& d);

template <typename Scalar>
struct LipschitzBound {
  Scalar value;
  // False when power iteration did not settle and the Frobenius bound was
  // returned instead.
  bool spectral = true;
};

namespace detail {

template <typename Scalar>
void check_dims(const Objective& obj, const VectorX<Scalar>& w,
                const BasicDeviceDataset<Scalar>& data) {
  if (w.size() != obj.param_dim(data.input_dim())) {
    throw ConfigError("parameter length " + std::to_string(w.size()) +
                      " does not match model dimension " +
                      std::to_string(obj.param_dim(data.input_dim())));
  }
}

// Sum (not mean) of per-sample losses over the rows of X; adds the sum of
// per-sample gradients into grad when it is non-null. `logits` is optional
// scratch space reused across calls.
template <typename Scalar, typename XType, typename YType>
Scalar accumulate(const Objective& obj, const VectorX<Scalar>& w,
                  const Eigen::MatrixBase<XType>& X,
                  const Eigen::MatrixBase<YType>& y, VectorX<Scalar>* grad,
                  RowMatrixX<Scalar>* logits = nullptr) {
  const Index d_in = X.cols();
  const Index n = X.rows();
  if (obj.task == Task::kMultinomialLogistic) {
    const Index C = obj.num_classes;
    Eigen::Map<const RowMatrixX<Scalar>> W(w.data(), C, d_in);
    RowMatrixX<Scalar> local;
    RowMatrixX<Scalar>& Z = logits ? *logits : local;
    Z.resize(n, C);
    Z.noalias() = X * W.transpose();
    if (obj.intercept) Z.rowwise() += w.segment(C * d_in, C).transpose();
    Scalar total = 0;
    for (Index i = 0; i < n; ++i) {
      const auto label = static_cast<Index>(y(i));
      const Scalar m = Z.row(i).maxCoeff();
      const Scalar shifted_label_logit = Z(i, label) - m;
      Z.row(i) = (Z.row(i).array() - m).exp().matrix();
      const Scalar s = Z.row(i).sum();
      total += std::log(s) - shifted_label_logit;
      if (grad) {
        Z.row(i) /= s;
        Z(i, label) -= Scalar(1);
      }
    }
    if (grad) {
      Eigen::Map<RowMatrixX<Scalar>> G(grad->data(), C, d_in);
      G.noalias() += Z.transpose() * X;
      if (obj.intercept) grad->segment(C * d_in, C) += Z.colwise().sum().transpose();
    }
    return total;
  }
  VectorX<Scalar> r = X * w.head(d_in);
  if (obj.intercept) r.array() += w(d_in);
  r -= y;
  if (grad) {
    grad->head(d_in).noalias() += X.transpose() * r;
    if (obj.intercept) (*grad)(d_in) += r.sum();
  }
  return Scalar(0.5) * r.squaredNorm();
}

template <typename Scalar>
Scalar penalty(const Objective& obj, const VectorX<Scalar>& w) {
  Scalar p = Scalar(0.5) * Scalar(obj.l2) * w.squaredNorm();
  if (obj.sine_amplitude != 0.0)
    p += Scalar(obj.sine_amplitude) * (Scalar(1) - w.array().cos()).sum();
  return p;
}

template <typename Scalar>
void add_penalty_gradient(const Objective& obj, const VectorX<Scalar>& w,
                          VectorX<Scalar>& grad) {
  if (obj.l2 != 0.0) grad += Scalar(obj.l2) * w;
  if (obj.sine_amplitude != 0.0)
    grad.array() += Scalar(obj.sine_amplitude) * w.array().sin();
}

}  // namespace detail

/// F_k(w) = mean per-sample loss + l2 * |w|^2 / 2 (+ optional perturbation).
template <typename Scalar>
Scalar loss(const Objective& obj, const VectorX<Scalar>& w,
            const BasicDeviceDataset<Scalar>& data) {
  detail::check_dims(obj, w, data);
  const Scalar value =
      detail::accumulate<Scalar>(obj, w, data.features, data.labels, nullptr) /
          Scalar(data.num_samples()) +
      detail::penalty(obj, w);
  if (!std::isfinite(value)) throw NumericalError("non-finite loss");
  return value;
}

template <typename Scalar>
VectorX<Scalar> gradient(const Objective& obj, const VectorX<Scalar>& w,
                         const BasicDeviceDataset<Scalar>& data) {
  detail::check_dims(obj, w, data);
  VectorX<Scalar> g = VectorX<Scalar>::Zero(w.size());
  detail::accumulate<Scalar>(obj, w, data.features, data.labels, &g);
  g /= Scalar(data.num_samples());
  detail::add_penalty_gradient(obj, w, g);
  if (!g.allFinite()) throw NumericalError("non-finite gradient");
  return g;
}

/// Loss and gradient in one pass.
template <typename Scalar>
Scalar loss_and_gradient(const Objective& obj, const VectorX<Scalar>& w,
                         const BasicDeviceDataset<Scalar>& data,
                         VectorX<Scalar>& grad) {
  detail::check_dims(obj, w, data);
  grad.setZero(w.size());
  const Scalar n = Scalar(data.num_samples());
  Scalar value =
      detail::accumulate<Scalar>(obj, w, data.features, data.labels, &grad) / n;
  grad /= n;
  value += detail::penalty(obj, w);
  detail::add_penalty_gradient(obj, w, grad);
  if (!std::isfinite(value) || !grad.allFinite())
    throw NumericalError("non-finite loss or gradient");
  return value;
}

/// Gradient of the mean loss over data rows `batch` plus the penalty gradient.
template <typename Scalar>
VectorX<Scalar> minibatch_gradient(const Objective& obj, const VectorX<Scalar>& w,
                                   const BasicDeviceDataset<Scalar>& data,
                                   std::span<const Index> batch) {
  detail::check_dims(obj, w, data);
  if (batch.empty()) throw ConfigError("empty minibatch");
  for (Index i : batch) {
    if (i < 0 || i >= data.num_samples())
      throw ConfigError("minibatch index " + std::to_string(i) +
                        " out of range [0, " +
                        std::to_string(data.num_samples()) + ")");
  }
  const std::vector<Index> rows(batch.begin(), batch.end());
  VectorX<Scalar> g = VectorX<Scalar>::Zero(w.size());
  detail::accumulate<Scalar>(obj, w, data.features(rows, Eigen::all),
                             data.labels(rows), &g);
  g /= Scalar(batch.size());
  detail::add_penalty_gradient(obj, w, g);
  if (!g.allFinite()) throw NumericalError("non-finite minibatch gradient");
  return g;
}

/// Upper bound on the gradient Lipschitz constant of F_k. Uses the largest
/// eigenvalue of the (intercept-augmented) Gram matrix X^T X / n_k, scaled by
/// 1/2 for the softmax model, plus the penalty curvature.
template <typename Scalar>
LipschitzBound<Scalar> lipschitz_estimate(const Objective& obj,
                                          const BasicDeviceDataset<Scalar>& data,
                                          int max_iterations = 100,
                                          Scalar rel_tol = Scalar(1e-9)) {
  validate_dataset(obj, data);
  const Index n = data.num_samples();
  const Index d_in = data.input_dim();
  const Index d = d_in + (obj.intercept ? 1 : 0);
  Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic> gram(d, d);
  gram.topLeftCorner(d_in, d_in).noalias() =
      data.features.transpose() * data.features;
  if (obj.intercept) {
    const VectorX<Scalar> colsum = data.features.colwise().sum().transpose();
    gram.col(d_in).head(d_in) = colsum;
    gram.row(d_in).head(d_in) = colsum.transpose();
    gram(d_in, d_in) = Scalar(n);
  }
  gram /= Scalar(n);

  VectorX<Scalar> v = VectorX<Scalar>::LinSpaced(d, Scalar(1), Scalar(2));
  v.normalize();
  Scalar eig = 0;
  bool converged = false;
  for (int it = 0; it < max_iterations; ++it) {
    VectorX<Scalar> next = gram * v;
    const Scalar rayleigh = v.dot(next);
    const Scalar norm = next.norm();
    if (norm == Scalar(0)) {
      eig = 0;
      converged = true;
      break;
    }
    v = next / norm;
    if (it > 0 && std::abs(rayleigh - eig) <= rel_tol * std::abs(rayleigh)) {
      eig = rayleigh;
      converged = true;
      break;
    }
    eig = rayleigh;
  }
  LipschitzBound<Scalar> out{};
  out.spectral = converged;
  if (!converged) eig = gram.trace();
  const Scalar factor =
      obj.task == Task::kMultinomialLogistic ? Scalar(0.5) : Scalar(1);
  out.value = factor * eig + Scalar(obj.l2) + Scalar(obj.sine_amplitude);
  return out;
}

template <typename Scalar>
void validate_dataset(const Objective& obj, const BasicDeviceDataset<Scalar>& d) {
  const std::string where = "device " + std::to_string(d.device_id) + ": ";
  if (d.num_samples() < 1) throw DataError(where + "no samples");
  if (d.labels.size() != d.num_samples())
    throw DataError(where + "feature rows and labels differ in count");
  if (!d.features.allFinite()) throw DataError(where + "non-finite feature");
  for (Index i = 0; i < d.labels.size(); ++i) {
    const Scalar y = d.labels(i);
    if (obj.task == Task::kMultinomialLogistic) {
      if (y != std::floor(y) || y < 0 || y >= Scalar(obj.num_classes))
        throw DataError(where + "label " + std::to_string(double(y)) +
                        " at sample " + std::to_string(i) +
                        " outside [0, " + std::to_string(obj.num_classes) + ")");
    } else if (!std::isfinite(y)) {
      throw DataError(where + "non-finite regression target");
    }
  }
}

extern template double loss<double>(const Objective&, const VectorX<double>&,
                                    const BasicDeviceDataset<double>&);
extern template VectorX<double> gradient<double>(const Objective&,
                                                 const VectorX<double>&,
                                                 const BasicDeviceDataset<double>&);
extern template double loss_and_gradient<double>(const Objective&,
                                                 const VectorX<double>&,
                                                 const BasicDeviceDataset<double>&,
                                                 VectorX<double>&);
extern template VectorX<double> minibatch_gradient<double>(
    const Objective&, const VectorX<double>&, const BasicDeviceDataset<double>&,
    std::span<const Index>);
extern template LipschitzBound<double> lipschitz_estimate<double>(
    const Objective&, const BasicDeviceDataset<double>&, int, double);
extern template void validate_dataset<double>(const Objective&,
                                              const BasicDeviceDataset<double>&);

}  // namespace fedsim

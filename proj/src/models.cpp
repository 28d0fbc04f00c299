#include <fedsim/models.hpp>

namespace fedsim {

std::string to_string(Task task) {
  switch (task) {
    case Task::kMultinomialLogistic:
      return "multinomial-logistic";
    case Task::kLinearRegression:
      return "linear-regression";
  }
  return "unknown";
}

Task parse_task(const std::string& name) {
  if (name == "multinomial-logistic" || name == "logistic")
    return Task::kMultinomialLogistic;
  if (name == "linear-regression" || name == "regression")
    return Task::kLinearRegression;
  throw ConfigError("unknown task '" + name + "'");
}

template double loss<double>(const Objective&, const VectorX<double>&,
                             const BasicDeviceDataset<double>&);
template VectorX<double> gradient<double>(const Objective&, const VectorX<double>&,
                                          const BasicDeviceDataset<double>&);
template double loss_and_gradient<double>(const Objective&, const VectorX<double>&,
                                          const BasicDeviceDataset<double>&,
                                          VectorX<double>&);
template VectorX<double> minibatch_gradient<double>(const Objective&,
                                                    const VectorX<double>&,
                                                    const BasicDeviceDataset<double>&,
                                                    std::span<const Index>);
template LipschitzBound<double> lipschitz_estimate<double>(
    const Objective&, const BasicDeviceDataset<double>&, int, double);
template void validate_dataset<double>(const Objective&,
                                       const BasicDeviceDataset<double>&);

}  // namespace fedsim

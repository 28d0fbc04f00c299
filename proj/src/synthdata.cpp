#include <fedsim/data.hpp>
#include <fedsim/rng.hpp>

#include <algorithm>
#include <cmath>
#include <numeric>

namespace fedsim {

std::string to_string(Provenance p) {
  switch (p) {
    case Provenance::kSynthetic:
      return "synthetic";
    case Provenance::kSyntheticIid:
      return "synthetic-iid";
    case Provenance::kLeafFile:
      return "leaf-file";
    case Provenance::kCustom:
      return "custom";
  }
  return "unknown";
}

Index FederatedDataset::total_samples() const {
  Index n = 0;
  for (const auto& d : devices) n += d.num_samples();
  return n;
}

FederatedDataset make_federated(std::vector<DeviceDataset> devices,
                                const Objective& obj, Provenance provenance,
                                std::string description) {
  if (devices.empty()) throw DataError("federated dataset has no devices");
  FederatedDataset fd;
  fd.input_dim = devices.front().input_dim();
  fd.num_classes = obj.task == Task::kMultinomialLogistic ? obj.num_classes : 0;
  fd.provenance = provenance;
  fd.description = std::move(description);
  for (std::size_t k = 0; k < devices.size(); ++k) {
    devices[k].device_id = static_cast<int>(k);
    validate_dataset(obj, devices[k]);
    if (devices[k].input_dim() != fd.input_dim)
      throw DataError("device " + std::to_string(k) + " has input dimension " +
                      std::to_string(devices[k].input_dim()) + ", expected " +
                      std::to_string(fd.input_dim));
  }
  fd.devices = std::move(devices);
  fd.weights.resize(fd.num_devices());
  const double n = static_cast<double>(fd.total_samples());
  for (Index k = 0; k < fd.num_devices(); ++k)
    fd.weights(k) = static_cast<double>(fd.devices[k].num_samples()) / n;
  return fd;
}

FederatedDataset replicate_device(const DeviceDataset& device, int count,
                                  const Objective& obj) {
  if (count < 1) throw ConfigError("replica count must be positive");
  std::vector<DeviceDataset> devices(static_cast<std::size_t>(count), device);
  return make_federated(std::move(devices), obj, Provenance::kCustom,
                        "replicated x" + std::to_string(count));
}

void SynthConfig::validate() const {
  if (num_devices < 1) throw ConfigError("synthetic: num_devices must be >= 1");
  if (input_dim < 1) throw ConfigError("synthetic: input_dim must be >= 1");
  if (num_classes < 2) throw ConfigError("synthetic: num_classes must be >= 2");
  if (alpha < 0 || beta < 0) throw ConfigError("synthetic: alpha, beta must be >= 0");
  if (min_samples < 1) throw ConfigError("synthetic: min_samples must be >= 1");
  if (max_samples != 0 && max_samples < min_samples)
    throw ConfigError("synthetic: max_samples below min_samples");
}

namespace {

Eigen::MatrixXd normal_matrix(Engine& rng, Index rows, Index cols, double mean) {
  std::normal_distribution<double> dist(mean, 1.0);
  Eigen::MatrixXd m(rows, cols);
  // Fill in a fixed (row-major) order so the draw sequence is layout-free.
  for (Index i = 0; i < rows; ++i)
    for (Index j = 0; j < cols; ++j) m(i, j) = dist(rng);
  return m;
}

}  // namespace

FederatedDataset generate_synthetic(const SynthConfig& cfg,
                                    std::vector<SyntheticTruth>* truth) {
  cfg.validate();
  const Index N = cfg.num_devices;
  const Index d = cfg.input_dim;
  const Index C = cfg.num_classes;

  Engine global = make_engine(cfg.seed, Stream::kDataset, {0});
  std::normal_distribution<double> std_normal(0.0, 1.0);
  std::lognormal_distribution<double> lognormal(0.0, cfg.lognormal_sigma);

  std::vector<Index> counts(static_cast<std::size_t>(N));
  for (auto& c : counts) {
    c = cfg.min_samples +
        static_cast<Index>(std::floor(std::abs(lognormal(global)) * cfg.sample_scale));
    if (cfg.max_samples > 0) c = std::min<Index>(c, cfg.max_samples);
  }
  // Per-device centres: u_k ~ N(0, alpha) for the model, B_k ~ N(0, beta) for
  // the features. alpha and beta act as standard deviations.
  std::vector<double> model_centre(static_cast<std::size_t>(N));
  std::vector<double> feature_centre(static_cast<std::size_t>(N));
  for (Index k = 0; k < N; ++k) model_centre[k] = cfg.alpha * std_normal(global);
  for (Index k = 0; k < N; ++k) feature_centre[k] = cfg.beta * std_normal(global);

  Eigen::VectorXd sd(d);
  for (Index j = 0; j < d; ++j)
    sd(j) = std::sqrt(std::pow(static_cast<double>(j + 1), -cfg.cov_exponent));

  Eigen::MatrixXd shared_W;
  Eigen::VectorXd shared_b;
  if (cfg.iid) {
    shared_W = normal_matrix(global, C, d, 0.0);
    shared_b = normal_matrix(global, C, 1, 0.0).col(0);
  }

  const Objective obj{.task = Task::kMultinomialLogistic,
                      .num_classes = static_cast<int>(C)};
  std::vector<DeviceDataset> devices(static_cast<std::size_t>(N));
  if (truth) truth->clear();
  for (Index k = 0; k < N; ++k) {
    Engine rng = make_engine(cfg.seed, Stream::kDataset, {1, static_cast<std::uint64_t>(k)});
    Eigen::MatrixXd W;
    Eigen::VectorXd b;
    Eigen::VectorXd centre = Eigen::VectorXd::Zero(d);
    if (cfg.iid) {
      W = shared_W;
      b = shared_b;
    } else {
      W = normal_matrix(rng, C, d, model_centre[k]);
      b = normal_matrix(rng, C, 1, model_centre[k]).col(0);
      centre = normal_matrix(rng, d, 1, feature_centre[k]).col(0);
    }
    DeviceDataset& dev = devices[k];
    dev.features.resize(counts[k], d);
    dev.labels.resize(counts[k]);
    for (Index i = 0; i < counts[k]; ++i) {
      for (Index j = 0; j < d; ++j)
        dev.features(i, j) = centre(j) + sd(j) * std_normal(rng);
      // argmax of softmax equals argmax of the logits.
      const Eigen::VectorXd logits = W * dev.features.row(i).transpose() + b;
      Index label = 0;
      logits.maxCoeff(&label);
      dev.labels(i) = static_cast<double>(label);
    }
    if (truth)
      truth->push_back({cfg.iid ? 0.0 : model_centre[k], cfg.iid ? 0.0 : feature_centre[k],
                        std::move(W), std::move(b), std::move(centre)});
  }
  const std::string desc =
      cfg.iid ? std::string("Synthetic-IID")
              : "Synthetic(" + std::to_string(cfg.alpha) + "," + std::to_string(cfg.beta) + ")";
  return make_federated(std::move(devices), obj,
                        cfg.iid ? Provenance::kSyntheticIid : Provenance::kSynthetic,
                        desc);
}

Objective classification_objective(const FederatedDataset& fd) {
  return Objective{.task = Task::kMultinomialLogistic, .num_classes = fd.num_classes};
}

DatasetStats dataset_stats(const FederatedDataset& fd) {
  DatasetStats s;
  s.num_devices = fd.num_devices();
  s.total_samples = fd.total_samples();
  if (s.num_devices == 0) return s;
  s.min_samples = fd.devices.front().num_samples();
  s.max_samples = s.min_samples;
  for (const auto& d : fd.devices) {
    s.min_samples = std::min(s.min_samples, d.num_samples());
    s.max_samples = std::max(s.max_samples, d.num_samples());
  }
  s.mean = static_cast<double>(s.total_samples) / static_cast<double>(s.num_devices);
  double ss = 0.0;
  for (const auto& d : fd.devices) {
    const double dev = static_cast<double>(d.num_samples()) - s.mean;
    ss += dev * dev;
  }
  s.stdev_population = std::sqrt(ss / static_cast<double>(s.num_devices));
  s.stdev_sample =
      s.num_devices > 1 ? std::sqrt(ss / static_cast<double>(s.num_devices - 1)) : 0.0;
  return s;
}

}  // namespace fedsim

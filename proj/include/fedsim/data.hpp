#pragma once

#include <fedsim/models.hpp>

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace fedsim {

enum class Provenance { kSynthetic, kSyntheticIid, kLeafFile, kCustom };

std::string to_string(Provenance p);

/// N devices plus sampling weights p_k = n_k / n.
struct FederatedDataset {
  std::vector<DeviceDataset> devices;
  Eigen::VectorXd weights;  // p_k
  Index input_dim = 0;
  int num_classes = 0;
  Provenance provenance = Provenance::kCustom;
  std::string description;

  Index num_devices() const { return static_cast<Index>(devices.size()); }
  Index total_samples() const;
};

/// Validates every device against `obj`, checks shared input dimension, and
/// computes p_k from sample counts. Device ids are reassigned to positions.
FederatedDataset make_federated(std::vector<DeviceDataset> devices,
                                const Objective& obj, Provenance provenance,
                                std::string description = {});

/// Device with the same rows replicated onto `count` devices.
FederatedDataset replicate_device(const DeviceDataset& device, int count,
                                  const Objective& obj);

/// Synthetic(alpha, beta) and Synthetic-IID generator settings.
struct SynthConfig {
  double alpha = 0.0;
  double beta = 0.0;
  bool iid = false;
  int num_devices = 30;
  int input_dim = 60;
  int num_classes = 10;
  // n_k = min_samples + floor(|LogNormal(0, lognormal_sigma)| * sample_scale)
  int min_samples = 50;
  double lognormal_sigma = 2.0;
  double sample_scale = 40.0;
  // 0 means uncapped.
  int max_samples = 0;
  // Sigma_jj = (j + 1)^(-cov_exponent)
  double cov_exponent = 1.2;
  std::uint64_t seed = 0;

  void validate() const;
};

/// Generating model of one synthetic device.
struct SyntheticTruth {
  double model_centre = 0.0;    // u_k
  double feature_centre = 0.0;  // B_k
  Eigen::MatrixXd W;            // C x d_in
  Eigen::VectorXd b;
  Eigen::VectorXd v;            // feature mean
};

FederatedDataset generate_synthetic(const SynthConfig& cfg,
                                    std::vector<SyntheticTruth>* truth = nullptr);

/// Matching logistic objective for a generated or loaded dataset.
Objective classification_objective(const FederatedDataset& fd);

struct LeafOptions {
  // Derived from max label + 1 when absent.
  std::optional<int> num_classes;
  // Rescale features into [0, 1] when any value lies outside that range.
  bool normalize = true;
};

/// Reads a LEAF-layout JSON document. Throws DataError with location context.
FederatedDataset load_leaf(const std::string& path, const LeafOptions& opts = {});
FederatedDataset parse_leaf(const std::string& text, const LeafOptions& opts = {},
                            const std::string& source = "<memory>");
void save_leaf(const FederatedDataset& fd, const std::string& path);

struct DatasetStats {
  Index num_devices = 0;
  Index total_samples = 0;
  double mean = 0.0;
  double stdev_population = 0.0;
  double stdev_sample = 0.0;
  Index min_samples = 0;
  Index max_samples = 0;
};

DatasetStats dataset_stats(const FederatedDataset& fd);

}  // namespace fedsim

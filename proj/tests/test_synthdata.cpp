#include "oracles.hpp"

#include <fedsim/data.hpp>
#include <fedsim/theory.hpp>

#include <doctest.h>

#include <filesystem>
#include <algorithm>
#include <fstream>
#include <sstream>
#include <string>

using namespace fedsim;

namespace {

SynthConfig synth(double a, double b, std::uint64_t seed, bool iid = false) {
  SynthConfig c;
  c.alpha = a;
  c.beta = b;
  c.iid = iid;
  c.seed = seed;
  return c;
}

std::string temp_path(const std::string& name) {
  return (std::filesystem::temp_directory_path() / ("fedsim_test_" + name)).string();
}

bool same(const FederatedDataset& a, const FederatedDataset& b) {
  if (a.num_devices() != b.num_devices() || a.weights != b.weights) return false;
  for (Index k = 0; k < a.num_devices(); ++k)
    if (a.devices[k].features != b.devices[k].features ||
        a.devices[k].labels != b.devices[k].labels)
      return false;
  return true;
}

}  // namespace

TEST_CASE("synthetic generation is a pure function of its config") {
  for (bool iid : {true, false}) {
    const auto a = generate_synthetic(synth(1, 1, 7, iid));
    const auto b = generate_synthetic(synth(1, 1, 7, iid));
    CHECK(same(a, b));
    CHECK_FALSE(same(a, generate_synthetic(synth(1, 1, 8, iid))));
  }
}

TEST_CASE("default shape and weights") {
  const auto fd = generate_synthetic(synth(0.5, 0.5, 3));
  CHECK(fd.num_devices() == 30);
  CHECK(fd.input_dim == 60);
  CHECK(fd.num_classes == 10);
  CHECK(fd.provenance == Provenance::kSynthetic);
  CHECK(fd.weights.sum() == doctest::Approx(1.0).epsilon(1e-12));
  for (Index k = 0; k < fd.num_devices(); ++k) {
    CHECK(fd.weights(k) >= 0.0);
    CHECK(fd.weights(k) == doctest::Approx(double(fd.devices[k].num_samples()) /
                                           double(fd.total_samples())));
    CHECK(fd.devices[k].device_id == k);
  }
}

TEST_CASE("zero heterogeneity still gives distinct device models") {
  std::vector<SyntheticTruth> truth;
  generate_synthetic(synth(0, 0, 11), &truth);
  REQUIRE(truth.size() == 30);
  for (const auto& t : truth) {
    CHECK(t.model_centre == 0.0);
    CHECK(t.feature_centre == 0.0);
  }
  for (std::size_t i = 0; i < truth.size(); ++i)
    for (std::size_t j = i + 1; j < truth.size(); ++j) CHECK(truth[i].W != truth[j].W);
}

TEST_CASE("iid mode shares one model and centres features at zero") {
  std::vector<SyntheticTruth> truth;
  const auto fd = generate_synthetic(synth(1, 1, 12, true), &truth);
  CHECK(fd.provenance == Provenance::kSyntheticIid);
  for (const auto& t : truth) {
    CHECK(t.W == truth.front().W);
    CHECK(t.b == truth.front().b);
    CHECK(t.v.isZero(0.0));
  }
}

TEST_CASE("labels are the argmax of the generating logits") {
  std::vector<SyntheticTruth> truth;
  const auto fd = generate_synthetic(synth(1, 1, 13), &truth);
  for (Index k = 0; k < fd.num_devices(); ++k) {
    const auto& d = fd.devices[k];
    for (Index i = 0; i < d.num_samples(); ++i) {
      const Eigen::VectorXd z = truth[k].W * d.features.row(i).transpose() + truth[k].b;
      Index best = 0;
      for (Index c = 1; c < z.size(); ++c)
        if (z(c) > z(best)) best = c;
      CHECK(d.labels(i) == double(best));
    }
  }
}

TEST_CASE("feature covariance follows the power decay") {
  SynthConfig c = synth(0, 0, 14, true);
  c.num_devices = 4;
  c.min_samples = 4000;
  c.sample_scale = 0.0;
  const auto fd = generate_synthetic(c);
  for (Index j : {0, 4, 30, 59}) {
    double s = 0, ss = 0;
    Index n = 0;
    for (const auto& d : fd.devices)
      for (Index i = 0; i < d.num_samples(); ++i, ++n) {
        s += d.features(i, j);
        ss += d.features(i, j) * d.features(i, j);
      }
    const double var = ss / n - (s / n) * (s / n);
    CHECK(var == doctest::Approx(std::pow(j + 1.0, -1.2)).epsilon(0.06));
  }
}

TEST_CASE("sample counts over a seed sweep") {
  double mean_of_means = 0.0;
  Index smallest = 1 << 30;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    const auto s = dataset_stats(generate_synthetic(synth(0, 0, seed)));
    smallest = std::min(smallest, s.min_samples);
    mean_of_means += s.mean / 100.0;
  }
  CHECK(smallest >= 50);
  CHECK(mean_of_means >= 60.0);
  CHECK(mean_of_means <= 400.0);
}

TEST_CASE("max_samples caps device sizes") {
  SynthConfig c = synth(1, 1, 1);
  c.max_samples = 120;
  const auto s = dataset_stats(generate_synthetic(c));
  CHECK(s.max_samples <= 120);
  CHECK(s.min_samples >= 50);
}

TEST_CASE("every synthetic device is better than chance after training") {
  const auto fd = generate_synthetic(synth(1, 1, 15));
  const Objective obj = classification_objective(fd);
  for (Index k = 0; k < fd.num_devices(); k += 3) {
    const auto one = make_federated({fd.devices[k]}, obj, Provenance::kCustom);
    const auto opt = estimate_optimum(one, obj, 1e-6, 400);
    CHECK(opt.value < std::log(10.0));
  }
}

TEST_CASE("config validation") {
  SynthConfig c;
  c.num_classes = 1;
  CHECK_THROWS_AS(generate_synthetic(c), ConfigError);
  c = SynthConfig{};
  c.alpha = -1;
  CHECK_THROWS_AS(generate_synthetic(c), ConfigError);
  c = SynthConfig{};
  c.num_devices = 0;
  CHECK_THROWS_AS(generate_synthetic(c), ConfigError);
}

TEST_CASE("dataset stats recount") {
  const auto fd = generate_synthetic(synth(0.5, 0.5, 16));
  const auto s = dataset_stats(fd);
  std::vector<double> counts;
  for (const auto& d : fd.devices) counts.push_back(double(d.num_samples()));
  double total = 0;
  for (double c : counts) total += c;
  const double mean = total / counts.size();
  double ss = 0;
  for (double c : counts) ss += (c - mean) * (c - mean);
  CHECK(s.total_samples == Index(total));
  CHECK(s.mean == doctest::Approx(mean));
  CHECK(s.stdev_population == doctest::Approx(std::sqrt(ss / counts.size())));
  CHECK(s.stdev_sample == doctest::Approx(std::sqrt(ss / (counts.size() - 1))));
  CHECK(s.min_samples == Index(*std::min_element(counts.begin(), counts.end())));
  CHECK(s.max_samples == Index(*std::max_element(counts.begin(), counts.end())));
}

TEST_CASE("two-user LEAF document") {
  const std::string text = R"({"users": ["a", "b"], "num_samples": [3, 5],
    "user_data": {"a": {"x": [[0.1, 0.2], [0.3, 0.4], [0.5, 0.6]], "y": [0, 1, 2]},
                  "b": {"x": [[0, 1], [1, 0], [0.5, 0.5], [0.2, 0.8], [0.9, 0.1]],
                        "y": [2, 2, 1, 0, 1]}}})";
  const auto fd = parse_leaf(text);
  CHECK(fd.num_devices() == 2);
  CHECK(fd.weights(0) == doctest::Approx(0.375).epsilon(1e-15));
  CHECK(fd.weights(1) == doctest::Approx(0.625).epsilon(1e-15));
  CHECK(fd.num_classes == 3);
  CHECK(fd.provenance == Provenance::kLeafFile);
  CHECK(fd.devices[0].features(1, 1) == 0.4);
  const auto s = dataset_stats(fd);
  CHECK(s.mean == 4.0);
  CHECK(s.stdev_population == 1.0);
}

TEST_CASE("LEAF normalisation rescales into the unit interval") {
  const std::string text = R"({"users": ["u"], "num_samples": [2],
    "user_data": {"u": {"x": [[0, 255], [51, 102]], "y": [0, 1]}}})";
  const auto fd = parse_leaf(text);
  CHECK(fd.devices[0].features(0, 1) == 1.0);
  CHECK(fd.devices[0].features(1, 0) == doctest::Approx(0.2));
  LeafOptions raw;
  raw.normalize = false;
  CHECK(parse_leaf(text, raw).devices[0].features(0, 1) == 255.0);
}

TEST_CASE("LEAF schema errors") {
  auto fails = [](const std::string& text, const std::string& needle) {
    try {
      parse_leaf(text);
    } catch (const DataError& e) {
      const std::string msg = e.what();
      CHECK_MESSAGE(msg.find(needle) != std::string::npos, msg);
      return;
    }
    FAIL("expected DataError for: " << text);
  };
  fails(R"({"users": ["a"], "num_samples": [1], "user_data": {"a": {"x": [[1, 2]], "y": [0)",
        "line 1");
  fails("{\n\"users\": [\"a\"],\n  \"num_samples\": [1] \"user_data\": {}}", "line 3");
  fails(R"({"num_samples": [], "user_data": {}})", "users");
  fails(R"({"users": ["a"], "num_samples": [0], "user_data": {"a": {"x": [], "y": []}}})",
        "no samples");
  fails(R"({"users": ["a"], "num_samples": [2],
            "user_data": {"a": {"x": [[1, 2], [3]], "y": [0, 1]}}})",
        "length");
  fails(R"({"users": ["a", "b"], "num_samples": [1, 1],
            "user_data": {"a": {"x": [[1, 2]], "y": [0]}, "b": {"x": [[1]], "y": [1]}}})",
        "length");
  fails(R"({"users": ["a"], "num_samples": [2], "user_data": {"a": {"x": [[1]], "y": [0]}}})",
        "disagrees");
  fails(R"({"users": ["a"], "num_samples": [1], "user_data": {"a": {"x": [[1]], "y": [1.5]}}})",
        "integer");
  fails(R"({"users": ["a"], "num_samples": [1], "user_data": {}})", "missing");
  CHECK_THROWS_AS(load_leaf(temp_path("does_not_exist.json")), DataError);
}

TEST_CASE("LEAF round trip through a file") {
  const auto fd = generate_synthetic(synth(0.5, 0.5, 17));
  const std::string path = temp_path("roundtrip.json");
  save_leaf(fd, path);
  LeafOptions opts;
  opts.normalize = false;
  opts.num_classes = 10;
  const auto back = load_leaf(path, opts);
  std::filesystem::remove(path);
  CHECK(back.num_devices() == fd.num_devices());
  CHECK(back.weights == fd.weights);
  for (Index k = 0; k < fd.num_devices(); ++k) {
    CHECK(back.devices[k].labels == fd.devices[k].labels);
    CHECK((back.devices[k].features - fd.devices[k].features).cwiseAbs().maxCoeff() == 0.0);
  }
}

TEST_CASE("FEMNIST-shaped count structure") {
  // 200 users, 18,345 samples; counts chosen so the per-device mean is 92
  // and the sample standard deviation 159 after rounding.
  const std::vector<int> counts{
      1,   2,   2,   3,   3,   4,   4,   4,   5,   5,   5,   6,   6,   6,   6,   7,   7,
      7,   8,   8,   8,   9,   9,   9,   9,   10,  10,  10,  11,  11,  11,  12,  12,  12,
      12,  13,  13,  13,  14,  14,  14,  15,  15,  15,  16,  16,  16,  17,  17,  17,  18,
      18,  18,  19,  19,  20,  20,  20,  21,  21,  21,  22,  22,  23,  23,  23,  24,  24,
      25,  25,  26,  26,  27,  27,  27,  28,  28,  29,  29,  30,  30,  31,  31,  32,  32,
      33,  33,  34,  35,  35,  36,  36,  37,  37,  38,  39,  39,  40,  41,  41,  42,  42,
      43,  44,  45,  45,  46,  47,  48,  48,  49,  50,  51,  52,  52,  53,  54,  55,  56,
      57,  58,  59,  60,  61,  62,  63,  64,  65,  66,  67,  68,  70,  71,  72,  73,  75,
      76,  77,  79,  80,  82,  83,  85,  86,  88,  90,  91,  93,  95,  97,  99,  101, 103,
      105, 107, 110, 112, 115, 117, 120, 123, 125, 128, 132, 135, 138, 142, 145, 149, 153,
      158, 162, 167, 172, 177, 182, 188, 195, 201, 209, 216, 225, 234, 243, 254, 266, 279,
      293, 309, 327, 348, 372, 401, 435, 478, 534, 609, 721, 920, 1484};
  REQUIRE(counts.size() == 200);
  std::ostringstream doc;
  doc << R"({"users": [)";
  for (std::size_t u = 0; u < counts.size(); ++u) doc << (u ? "," : "") << "\"f" << u << "\"";
  doc << R"(], "num_samples": [)";
  for (std::size_t u = 0; u < counts.size(); ++u) doc << (u ? "," : "") << counts[u];
  doc << R"(], "user_data": {)";
  for (std::size_t u = 0; u < counts.size(); ++u) {
    doc << (u ? "," : "") << "\"f" << u << R"(": {"x": [)";
    for (int i = 0; i < counts[u]; ++i) doc << (i ? "," : "") << "[" << (i % 7) / 7.0 << "]";
    doc << R"(], "y": [)";
    for (int i = 0; i < counts[u]; ++i) doc << (i ? "," : "") << (i % 10);
    doc << "]}";
  }
  doc << "}}";
  const auto fd = parse_leaf(doc.str());
  const auto s = dataset_stats(fd);
  CHECK(s.num_devices == 200);
  CHECK(s.total_samples == 18345);
  CHECK(std::lround(s.mean) == 92);
  CHECK(std::lround(s.stdev_sample) == 159);
  CHECK(fd.weights.sum() == doctest::Approx(1.0).epsilon(1e-12));
}

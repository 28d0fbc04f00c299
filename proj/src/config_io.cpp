#include <fedsim/harness.hpp>

#include <charconv>
#include <cmath>
#include <cstdio>
#include <istream>
#include <limits>
#include <ostream>
#include <sstream>

namespace fedsim {

using nlohmann::json;

nlohmann::json to_json(const ExperimentConfig& c) {
  json ds;
  if (c.dataset.kind == DatasetSpec::Kind::kSynthetic) {
    const SynthConfig& s = c.dataset.synthetic;
    ds = {{"kind", "synthetic"},
          {"alpha", s.alpha},
          {"beta", s.beta},
          {"iid", s.iid},
          {"num_devices", s.num_devices},
          {"input_dim", s.input_dim},
          {"num_classes", s.num_classes},
          {"min_samples", s.min_samples},
          {"lognormal_sigma", s.lognormal_sigma},
          {"sample_scale", s.sample_scale},
          {"max_samples", s.max_samples},
          {"cov_exponent", s.cov_exponent}};
  } else {
    ds = {{"kind", "leaf"},
          {"leaf_path", c.dataset.leaf_path},
          {"eval_path", c.dataset.eval_path},
          {"normalize", c.dataset.normalize}};
  }
  json algos = json::array();
  for (Algorithm a : c.algorithms) algos.push_back(to_string(a));
  json j = {{"name", c.name},
            {"dataset", ds},
            {"algorithms", algos},
            {"mu_grid", c.mu_grid},
            {"select_fraction", c.select_fraction},
            {"rounds", c.rounds},
            {"devices_per_round", c.devices_per_round},
            {"local_epochs", c.local_epochs},
            {"step_size", c.step_size},
            {"batch_size", c.batch_size},
            {"sampling", to_string(c.sampling)},
            {"reuse_gradient_subset", c.reuse_gradient_subset},
            {"solver", to_string(c.solver)},
            {"l2", c.l2},
            {"seed", c.seed},
            {"eval_every", c.eval_every},
            {"grad_norm_every", c.grad_norm_every},
            {"final_window", c.final_window},
            {"threads", c.threads},
            {"output_dir", c.output_dir},
            {"theory_every", c.theory_every},
            {"theory_trials", c.theory_trials}};
  j["mu_fedprox"] = c.mu_fedprox ? json(*c.mu_fedprox) : json(nullptr);
  j["mu_feddane"] = c.mu_feddane ? json(*c.mu_feddane) : json(nullptr);
  return j;
}

ExperimentConfig config_from_json(const nlohmann::json& j) {
  ExperimentConfig c;
  try {
    c.name = j.at("name").get<std::string>();
    const json& ds = j.at("dataset");
    if (ds.at("kind").get<std::string>() == "synthetic") {
      c.dataset.kind = DatasetSpec::Kind::kSynthetic;
      SynthConfig& s = c.dataset.synthetic;
      s.alpha = ds.at("alpha").get<double>();
      s.beta = ds.at("beta").get<double>();
      s.iid = ds.at("iid").get<bool>();
      s.num_devices = ds.at("num_devices").get<int>();
      s.input_dim = ds.at("input_dim").get<int>();
      s.num_classes = ds.at("num_classes").get<int>();
      s.min_samples = ds.at("min_samples").get<int>();
      s.lognormal_sigma = ds.at("lognormal_sigma").get<double>();
      s.sample_scale = ds.at("sample_scale").get<double>();
      s.max_samples = ds.at("max_samples").get<int>();
      s.cov_exponent = ds.at("cov_exponent").get<double>();
    } else {
      c.dataset.kind = DatasetSpec::Kind::kLeaf;
      c.dataset.leaf_path = ds.at("leaf_path").get<std::string>();
      c.dataset.eval_path = ds.at("eval_path").get<std::string>();
      c.dataset.normalize = ds.at("normalize").get<bool>();
    }
    c.algorithms.clear();
    for (const auto& a : j.at("algorithms")) c.algorithms.push_back(parse_algorithm(a));
    c.mu_grid = j.at("mu_grid").get<std::vector<double>>();
    c.select_fraction = j.at("select_fraction").get<double>();
    c.rounds = j.at("rounds").get<int>();
    c.devices_per_round = j.at("devices_per_round").get<int>();
    c.local_epochs = j.at("local_epochs").get<int>();
    c.step_size = j.at("step_size").get<double>();
    c.batch_size = j.at("batch_size").get<int>();
    c.sampling = parse_sampling(j.at("sampling").get<std::string>());
    c.reuse_gradient_subset = j.at("reuse_gradient_subset").get<bool>();
    c.solver = parse_local_solver(j.at("solver").get<std::string>());
    c.l2 = j.at("l2").get<double>();
    c.seed = j.at("seed").get<std::uint64_t>();
    c.eval_every = j.at("eval_every").get<int>();
    c.grad_norm_every = j.at("grad_norm_every").get<int>();
    c.final_window = j.at("final_window").get<int>();
    c.threads = j.at("threads").get<int>();
    c.output_dir = j.at("output_dir").get<std::string>();
    c.theory_every = j.at("theory_every").get<int>();
    c.theory_trials = j.at("theory_trials").get<int>();
    if (!j.at("mu_fedprox").is_null()) c.mu_fedprox = j.at("mu_fedprox").get<double>();
    if (!j.at("mu_feddane").is_null()) c.mu_feddane = j.at("mu_feddane").get<double>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("configuration document: ") + e.what());
  }
  return c;
}

nlohmann::json to_json(const DatasetStats& s) {
  return {{"num_devices", s.num_devices},
          {"total_samples", s.total_samples},
          {"mean_samples", s.mean},
          {"stdev_population", s.stdev_population},
          {"stdev_sample", s.stdev_sample},
          {"min_samples", s.min_samples},
          {"max_samples", s.max_samples}};
}

namespace {

std::string format_double(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

double parse_double(const std::string& s) {
  if (s == "nan") return std::numeric_limits<double>::quiet_NaN();
  if (s == "inf") return std::numeric_limits<double>::infinity();
  if (s == "-inf") return -std::numeric_limits<double>::infinity();
  std::size_t used = 0;
  const double v = std::stod(s, &used);
  if (used != s.size()) throw DataError("bad number '" + s + "'");
  return v;
}

}  // namespace

void write_metrics_csv(const MetricsLog& log, std::ostream& out) {
  out << "update,comm_rounds,loss,grad_sq_norm,diverged\n";
  for (const auto& r : log.rows) {
    out << r.update << ',' << r.comm_rounds << ',' << format_double(r.loss) << ','
        << (r.grad_sq_norm ? format_double(*r.grad_sq_norm) : std::string()) << ','
        << (r.diverged ? 1 : 0) << '\n';
  }
}

std::vector<MetricsRow> read_metrics_csv(std::istream& in) {
  std::string line;
  if (!std::getline(in, line) || line != "update,comm_rounds,loss,grad_sq_norm,diverged")
    throw DataError("metrics CSV: unexpected header");
  std::vector<MetricsRow> rows;
  int lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    if (!line.empty() && line.back() == ',') cells.emplace_back();
    if (cells.size() != 5)
      throw DataError("metrics CSV line " + std::to_string(lineno) + ": expected 5 fields");
    try {
      MetricsRow r;
      r.update = std::stoll(cells[0]);
      r.comm_rounds = std::stoll(cells[1]);
      r.loss = parse_double(cells[2]);
      if (!cells[3].empty()) r.grad_sq_norm = parse_double(cells[3]);
      if (cells[4] != "0" && cells[4] != "1") throw DataError("bad diverged flag");
      r.diverged = cells[4] == "1";
      rows.push_back(r);
    } catch (const std::exception& e) {
      throw DataError("metrics CSV line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return rows;
}

}  // namespace fedsim

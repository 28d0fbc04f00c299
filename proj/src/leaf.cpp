#include <fedsim/data.hpp>

#include <json.hpp>

#include <algorithm>
#include <fstream>
#include <sstream>

namespace fedsim {

using nlohmann::json;

namespace {

std::string location(const std::string& text, std::size_t byte) {
  byte = std::min(byte, text.size());
  std::size_t line = 1, col = 1;
  for (std::size_t i = 0; i + 1 < byte; ++i) {
    if (text[i] == '\n') {
      ++line;
      col = 1;
    } else {
      ++col;
    }
  }
  return "line " + std::to_string(line) + ", column " + std::to_string(col);
}

const json& field(const json& obj, const char* name, const std::string& source) {
  auto it = obj.find(name);
  if (it == obj.end())
    throw DataError(source + ": missing top-level field '" + name + "'");
  return *it;
}

}  // namespace

FederatedDataset parse_leaf(const std::string& text, const LeafOptions& opts,
                            const std::string& source) {
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::parse_error& e) {
    throw DataError(source + ": parse error at " + location(text, e.byte) + ": " +
                    e.what());
  }
  if (!doc.is_object()) throw DataError(source + ": top level is not an object");
  const json& users = field(doc, "users", source);
  const json& counts = field(doc, "num_samples", source);
  const json& user_data = field(doc, "user_data", source);
  if (!users.is_array()) throw DataError(source + ": 'users' is not an array");
  if (!counts.is_array()) throw DataError(source + ": 'num_samples' is not an array");
  if (!user_data.is_object()) throw DataError(source + ": 'user_data' is not an object");
  if (counts.size() != users.size())
    throw DataError(source + ": 'num_samples' has " + std::to_string(counts.size()) +
                    " entries for " + std::to_string(users.size()) + " users");

  std::vector<DeviceDataset> devices;
  devices.reserve(users.size());
  Index input_dim = -1;
  int max_label = -1;
  double lo = 0.0, hi = 0.0;
  for (std::size_t u = 0; u < users.size(); ++u) {
    if (!users[u].is_string())
      throw DataError(source + ": users[" + std::to_string(u) + "] is not a string");
    const std::string id = users[u].get<std::string>();
    const std::string where = source + ": user '" + id + "'";
    auto entry = user_data.find(id);
    if (entry == user_data.end()) throw DataError(where + ": missing from 'user_data'");
    if (!entry->is_object() || !entry->contains("x") || !entry->contains("y"))
      throw DataError(where + ": entry needs fields 'x' and 'y'");
    const json& xs = (*entry)["x"];
    const json& ys = (*entry)["y"];
    if (!xs.is_array() || !ys.is_array())
      throw DataError(where + ": 'x' and 'y' must be arrays");
    if (xs.empty()) throw DataError(where + ": no samples (n_k >= 1 required)");
    if (xs.size() != ys.size())
      throw DataError(where + ": " + std::to_string(xs.size()) + " feature rows but " +
                      std::to_string(ys.size()) + " labels");
    if (!counts[u].is_number_integer() || counts[u].get<std::int64_t>() !=
                                              static_cast<std::int64_t>(xs.size()))
      throw DataError(where + ": num_samples[" + std::to_string(u) +
                      "] disagrees with sample count " + std::to_string(xs.size()));

    DeviceDataset dev;
    for (std::size_t i = 0; i < xs.size(); ++i) {
      const json& row = xs[i];
      if (!row.is_array())
        throw DataError(where + ": x[" + std::to_string(i) + "] is not an array");
      if (input_dim < 0) input_dim = static_cast<Index>(row.size());
      if (static_cast<Index>(row.size()) != input_dim)
        throw DataError(where + ": x[" + std::to_string(i) + "] has length " +
                        std::to_string(row.size()) + ", expected " +
                        std::to_string(input_dim));
      if (i == 0) {
        dev.features.resize(static_cast<Index>(xs.size()), input_dim);
        dev.labels.resize(static_cast<Index>(xs.size()));
      }
      for (Index j = 0; j < input_dim; ++j) {
        const json& v = row[static_cast<std::size_t>(j)];
        if (!v.is_number())
          throw DataError(where + ": x[" + std::to_string(i) + "][" +
                          std::to_string(j) + "] is not a number");
        const double value = v.get<double>();
        dev.features(static_cast<Index>(i), j) = value;
        if (devices.empty() && i == 0 && j == 0) lo = hi = value;
        lo = std::min(lo, value);
        hi = std::max(hi, value);
      }
      const json& y = ys[i];
      if (!y.is_number())
        throw DataError(where + ": y[" + std::to_string(i) + "] is not a number");
      const double label = y.get<double>();
      if (label != static_cast<double>(static_cast<int>(label)) || label < 0)
        throw DataError(where + ": y[" + std::to_string(i) +
                        "] is not a non-negative integer class");
      max_label = std::max(max_label, static_cast<int>(label));
      dev.labels(static_cast<Index>(i)) = label;
    }
    devices.push_back(std::move(dev));
  }
  if (devices.empty()) throw DataError(source + ": no users");

  if (opts.normalize && (lo < 0.0 || hi > 1.0) && hi > lo) {
    for (auto& d : devices) d.features = (d.features.array() - lo) / (hi - lo);
  }
  Objective obj;
  obj.num_classes = opts.num_classes.value_or(max_label + 1);
  if (obj.num_classes < 2) obj.num_classes = 2;
  return make_federated(std::move(devices), obj, Provenance::kLeafFile, source);
}

FederatedDataset load_leaf(const std::string& path, const LeafOptions& opts) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError(path + ": cannot open");
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_leaf(buf.str(), opts, path);
}

void save_leaf(const FederatedDataset& fd, const std::string& path) {
  json doc;
  doc["users"] = json::array();
  doc["num_samples"] = json::array();
  doc["user_data"] = json::object();
  for (const auto& d : fd.devices) {
    const std::string id = "f_" + std::to_string(d.device_id);
    doc["users"].push_back(id);
    doc["num_samples"].push_back(d.num_samples());
    json xs = json::array(), ys = json::array();
    for (Index i = 0; i < d.num_samples(); ++i) {
      json row = json::array();
      for (Index j = 0; j < d.input_dim(); ++j) row.push_back(d.features(i, j));
      xs.push_back(std::move(row));
      ys.push_back(static_cast<int>(d.labels(i)));
    }
    doc["user_data"][id] = {{"x", std::move(xs)}, {"y", std::move(ys)}};
  }
  std::ofstream out(path);
  if (!out) throw DataError(path + ": cannot write");
  out << doc.dump();
}

}  // namespace fedsim

#include "mstop/instance.h"

#include <cmath>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "mstop/rng.h"

namespace mstop {

using nlohmann::json;

const char* to_string(PrizeMode mode) { return mode == PrizeMode::kConstant ? "constant" : "uniform"; }

PrizeMode parse_prize_mode(const std::string& s) {
  if (s == "constant" || s == "const") return PrizeMode::kConstant;
  if (s == "uniform" || s == "unif") return PrizeMode::kUniform;
  throw InvalidConfig("unknown prize mode '" + s + "' (expected constant|uniform)");
}

Point Instance::point(std::size_t node) const {
  if (node == 0) return depot;
  if (node <= customers.size()) return customers[node - 1].pos;
  if (node < node_count()) return vehicles[node - 1 - customers.size()].start;
  throw std::out_of_range("node " + std::to_string(node) + " outside instance of " +
                          std::to_string(node_count()) + " nodes");
}

double Instance::total_prize() const {
  double s = 0.0;
  for (const auto& c : customers) s += c.prize;
  return s;
}

double distance(const Instance& inst, std::size_t i, std::size_t j) {
  if (i == j) {
    (void)inst.point(i);
    return 0.0;
  }
  return euclidean(inst.point(i), inst.point(j));
}

const std::array<Preset, 4>& presets() {
  static const std::array<Preset, 4> table{{
      {"mstop10", 10, 2, 1.5},
      {"mstop20", 20, 2, 2.0},
      {"mstop50", 50, 3, 3.0},
      {"mstop70", 70, 3, 3.0},
  }};
  return table;
}

std::optional<Preset> find_preset(const std::string& name) {
  for (const auto& p : presets())
    if (name == p.name) return p;
  return std::nullopt;
}

Instance generate(const GenConfig& config) {
  if (config.n < 1) throw InvalidConfig("generate: n must be >= 1");
  if (config.k < 1) throw InvalidConfig("generate: K must be >= 1");
  if (!(config.t_max > 0.0) || !std::isfinite(config.t_max)) throw InvalidConfig("generate: t_max must be > 0");

  Rng rng(mix64(config.seed));
  Instance inst;
  inst.t_max = config.t_max;
  inst.prize_mode = config.prize_mode;
  inst.seed = config.seed;
  inst.depot = {rng.uniform(), rng.uniform()};
  inst.customers.resize(config.n);
  for (auto& c : inst.customers) {
    c.pos = {rng.uniform(), rng.uniform()};
    c.prize = config.prize_mode == PrizeMode::kConstant ? 1.0 : rng.uniform();
  }
  inst.vehicles.resize(config.k);
  for (auto& v : inst.vehicles) {
    // Starts farther than t_max from the depot could never return; redraw.
    double home = 0.0;
    int attempts = 0;
    do {
      v.start = {rng.uniform(), rng.uniform()};
      home = euclidean(v.start, inst.depot);
      if (++attempts > 100000) throw InvalidConfig("generate: t_max too small to place vehicles");
    } while (home > config.t_max);
    v.fuel = std::min(rng.uniform(home, config.t_max), config.t_max);
  }
  return inst;
}

std::vector<Instance> generate_many(const GenConfig& config, std::size_t count) {
  std::vector<Instance> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    GenConfig c = config;
    c.seed = derive_seed(config.seed, {i});
    out.push_back(generate(c));
  }
  return out;
}

Point apply_transform(std::size_t transform, const Point& p) {
  const double x = p.x, y = p.y;
  switch (transform) {
    case 0: return {x, y};
    case 1: return {y, x};
    case 2: return {x, 1.0 - y};
    case 3: return {y, 1.0 - x};
    case 4: return {1.0 - x, y};
    case 5: return {1.0 - y, x};
    case 6: return {1.0 - x, 1.0 - y};
    case 7: return {1.0 - y, 1.0 - x};
    default: throw std::out_of_range("transform index " + std::to_string(transform));
  }
}

const char* transform_name(std::size_t transform) {
  static const char* names[kNumTransforms] = {"(x,y)",   "(y,x)",   "(x,1-y)",   "(y,1-x)",
                                              "(1-x,y)", "(1-y,x)", "(1-x,1-y)", "(1-y,1-x)"};
  if (transform >= kNumTransforms) throw std::out_of_range("transform index " + std::to_string(transform));
  return names[transform];
}

Instance transform_instance(const Instance& inst, std::size_t transform) {
  Instance out = inst;
  out.depot = apply_transform(transform, inst.depot);
  for (auto& c : out.customers) c.pos = apply_transform(transform, c.pos);
  for (auto& v : out.vehicles) v.start = apply_transform(transform, v.start);
  return out;
}

std::vector<Instance> augment(const Instance& inst) {
  std::vector<Instance> out;
  out.reserve(kNumTransforms);
  for (std::size_t t = 0; t < kNumTransforms; ++t) out.push_back(transform_instance(inst, t));
  return out;
}

// ---------------------------------------------------------------------------
// Dataset IO

std::string to_json_line(const Instance& inst) {
  json j;
  j["version"] = kDatasetVersion;
  j["n"] = inst.n();
  j["K"] = inst.k();
  j["t_max"] = inst.t_max;
  j["prize_mode"] = to_string(inst.prize_mode);
  j["depot"] = {inst.depot.x, inst.depot.y};
  json cs = json::array();
  for (const auto& c : inst.customers) cs.push_back({c.pos.x, c.pos.y, c.prize});
  j["customers"] = std::move(cs);
  json vs = json::array();
  for (const auto& v : inst.vehicles) vs.push_back({v.start.x, v.start.y, v.fuel});
  j["vehicles"] = std::move(vs);
  j["seed"] = inst.seed;
  return j.dump();
}

namespace {

[[noreturn]] void malformed(std::size_t line, const std::string& what) {
  throw DatasetError("dataset line " + std::to_string(line) + ": " + what);
}

double number_at(const json& arr, std::size_t i, std::size_t line, const char* field) {
  if (!arr.is_array() || i >= arr.size() || !arr[i].is_number())
    malformed(line, std::string("field '") + field + "' is not a numeric tuple");
  return arr[i].get<double>();
}

}  // namespace

Instance from_json_line(const std::string& text, std::size_t line) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    malformed(line, std::string("parse error: ") + e.what());
  }
  if (!j.is_object()) malformed(line, "record is not an object");
  for (const char* key : {"version", "n", "K", "t_max", "prize_mode", "depot", "customers", "vehicles", "seed"})
    if (!j.contains(key)) malformed(line, std::string("missing field '") + key + "'");
  try {
    if (j["version"].get<int>() != kDatasetVersion)
      malformed(line, "unsupported version " + j["version"].dump());
    Instance inst;
    inst.t_max = j["t_max"].get<double>();
    inst.prize_mode = parse_prize_mode(j["prize_mode"].get<std::string>());
    inst.seed = j["seed"].get<std::uint64_t>();
    inst.depot = {number_at(j["depot"], 0, line, "depot"), number_at(j["depot"], 1, line, "depot")};
    for (const auto& c : j["customers"])
      inst.customers.push_back({{number_at(c, 0, line, "customers"), number_at(c, 1, line, "customers")},
                                number_at(c, 2, line, "customers")});
    for (const auto& v : j["vehicles"])
      inst.vehicles.push_back({{number_at(v, 0, line, "vehicles"), number_at(v, 1, line, "vehicles")},
                               number_at(v, 2, line, "vehicles")});
    if (inst.n() != j["n"].get<std::size_t>()) malformed(line, "customer count does not match n");
    if (inst.k() != j["K"].get<std::size_t>()) malformed(line, "vehicle count does not match K");
    return inst;
  } catch (const json::exception& e) {
    malformed(line, e.what());
  } catch (const InvalidConfig& e) {
    malformed(line, e.what());
  }
}

void save_dataset(const std::vector<Instance>& instances, const std::string& path) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw DatasetError("cannot open " + path + " for writing");
  for (const auto& inst : instances) os << to_json_line(inst) << '\n';
  if (!os) throw DatasetError("write failed for " + path);
}

std::vector<Instance> load_dataset(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw DatasetError("cannot open " + path);
  std::vector<Instance> out;
  std::string line;
  std::size_t number = 0;
  while (std::getline(is, line)) {
    ++number;
    if (line.empty()) continue;
    out.push_back(from_json_line(line, number));
  }
  return out;
}

}  // namespace mstop

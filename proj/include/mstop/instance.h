#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace mstop {

struct Point {
  double x = 0.0;
  double y = 0.0;
  bool operator==(const Point&) const = default;
};

inline double euclidean(const Point& a, const Point& b) {
  const double dx = a.x - b.x, dy = a.y - b.y;
  return std::sqrt(dx * dx + dy * dy);
}

enum class PrizeMode { kConstant, kUniform };

const char* to_string(PrizeMode mode);
PrizeMode parse_prize_mode(const std::string& s);

struct Customer {
  Point pos;
  double prize = 1.0;
  bool operator==(const Customer&) const = default;
};

// `fuel` is the remaining travel budget at the start of the mission.
struct Vehicle {
  Point start;
  double fuel = 0.0;
  bool operator==(const Vehicle&) const = default;
};

// Node numbering used throughout: 0 is the depot, 1..n the customers and
// n+1..n+K the vehicle start locations.
struct Instance {
  Point depot;
  std::vector<Customer> customers;
  std::vector<Vehicle> vehicles;
  double t_max = 0.0;
  PrizeMode prize_mode = PrizeMode::kConstant;
  std::uint64_t seed = 0;

  std::size_t n() const { return customers.size(); }
  std::size_t k() const { return vehicles.size(); }
  std::size_t node_count() const { return 1 + customers.size() + vehicles.size(); }
  Point point(std::size_t node) const;
  double prize(std::size_t customer_node) const { return customers.at(customer_node - 1).prize; }
  double total_prize() const;

  bool operator==(const Instance&) const = default;
};

// Euclidean distance between two node references; throws
// std::out_of_range for references outside the instance.
double distance(const Instance& inst, std::size_t i, std::size_t j);

struct GenConfig {
  std::size_t n = 10;
  std::size_t k = 2;
  double t_max = 1.5;
  PrizeMode prize_mode = PrizeMode::kConstant;
  std::uint64_t seed = 0;
};

struct Preset {
  const char* name;
  std::size_t n;
  std::size_t k;
  double t_max;
};

// mstop10, mstop20, mstop50, mstop70.
const std::array<Preset, 4>& presets();
std::optional<Preset> find_preset(const std::string& name);

class InvalidConfig : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Coordinates uniform in the unit square; vehicle fuel uniform between the
// straight-line distance to the depot and t_max.
Instance generate(const GenConfig& config);
// `count` instances whose seeds are derived from config.seed.
std::vector<Instance> generate_many(const GenConfig& config, std::size_t count);

// The eight symmetries of the unit square, identity first.
inline constexpr std::size_t kNumTransforms = 8;
Point apply_transform(std::size_t transform, const Point& p);
const char* transform_name(std::size_t transform);
Instance transform_instance(const Instance& inst, std::size_t transform);
std::vector<Instance> augment(const Instance& inst);

class DatasetError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr int kDatasetVersion = 1;
void save_dataset(const std::vector<Instance>& instances, const std::string& path);
std::vector<Instance> load_dataset(const std::string& path);
std::string to_json_line(const Instance& inst);
Instance from_json_line(const std::string& line, std::size_t line_number = 0);

}  // namespace mstop

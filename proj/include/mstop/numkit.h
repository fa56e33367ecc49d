#pragma once

// Minimal reverse-mode automatic differentiation over row-major f64
// matrices. A Tape owns every intermediate value of one forward pass;
// Tensor is a lightweight handle into it. Trainable arrays live in a
// ParameterSet and enter a tape as cached leaves.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

namespace mstop::nk {

// Additive mask value for excluded logits. Any mask entry at or below
// this value (including -inf) is clamped to it.
inline constexpr double kMasked = -1e9;

struct Shape {
  std::size_t rows = 0;
  std::size_t cols = 0;

  std::size_t size() const { return rows * cols; }
  bool operator==(const Shape&) const = default;
  std::string str() const;
};

class ShapeError : public std::invalid_argument {
 public:
  ShapeError(const std::string& op, const std::string& detail);
};

class NonFiniteError : public std::domain_error {
 public:
  explicit NonFiniteError(const std::string& op);
};

// A named array. Trainable parameters receive gradients; buffers (batch
// norm running statistics) are checkpointed but never differentiated.
struct Parameter {
  std::string name;
  Shape shape;
  std::vector<double> value;
  bool trainable = true;
};

class ParameterSet {
 public:
  std::size_t add(std::string name, Shape shape, bool trainable = true);
  std::size_t size() const { return params_.size(); }

  Parameter& operator[](std::size_t i) { return params_[i]; }
  const Parameter& operator[](std::size_t i) const { return params_[i]; }

  // Throws std::out_of_range for unknown names.
  std::size_t index(const std::string& name) const;
  bool contains(const std::string& name) const;

  std::vector<Parameter>::iterator begin() { return params_.begin(); }
  std::vector<Parameter>::iterator end() { return params_.end(); }
  std::vector<Parameter>::const_iterator begin() const { return params_.begin(); }
  std::vector<Parameter>::const_iterator end() const { return params_.end(); }

  // Fills every trainable array uniformly in [-1/sqrt(fan), 1/sqrt(fan)]
  // where fan is the array's row count.
  void init_uniform(std::uint64_t seed);

  std::size_t trainable_count() const;

 private:
  std::vector<Parameter> params_;
  std::unordered_map<std::string, std::size_t> by_name_;
};

// One gradient buffer per parameter index; empty when the parameter did
// not participate.
using Gradients = std::vector<std::vector<double>>;

class Tape;

class Tensor {
 public:
  Tensor() = default;
  Tensor(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  bool valid() const { return tape_ != nullptr; }
  std::size_t id() const { return id_; }
  Tape* tape() const { return tape_; }

  const Shape& shape() const;
  std::size_t rows() const { return shape().rows; }
  std::size_t cols() const { return shape().cols; }
  std::span<const double> values() const;
  double at(std::size_t r, std::size_t c) const;
  double item() const;  // 1x1 only
  bool requires_grad() const;

 private:
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

// Statistics observed by a training-mode batch normalization; the
// trainer folds them into the running buffers between steps.
struct BatchNormObservation {
  std::size_t mean_param = 0;
  std::size_t var_param = 0;
  std::vector<double> mean;
  std::vector<double> var;
};

enum class NormMode { kTrain, kEval };

class Tape {
 public:
  explicit Tape(const ParameterSet* params = nullptr) : params_(params) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;
  Tape(Tape&&) = default;
  Tape& operator=(Tape&&) = default;

  Tensor constant(Shape shape, std::vector<double> values);
  Tensor constant_row(std::span<const double> values);
  Tensor scalar(double v) { return constant({1, 1}, {v}); }
  // Differentiable leaf not backed by a parameter (used in gradient checks).
  Tensor variable(Shape shape, std::vector<double> values);
  // Cached leaf for parameter `index` of the bound ParameterSet.
  Tensor param(std::size_t index);
  Tensor param(const std::string& name);

  std::size_t node_count() const { return nodes_.size(); }

  // Seeds d(loss)/d(loss) = 1 and propagates to every reachable node.
  void backward(const Tensor& loss);
  // Gradient of the last backward pass at `t`; throws for nodes that do
  // not require grad (constants and detached values).
  std::span<const double> grad(const Tensor& t) const;
  // Adds `scale` times each parameter-leaf gradient into `out`.
  void accumulate(Gradients& out, double scale = 1.0) const;

  const std::vector<BatchNormObservation>& norm_observations() const { return norm_obs_; }
  const ParameterSet* params() const { return params_; }

 private:
  friend class Tensor;
  friend struct Ops;

  struct Node {
    Shape shape;
    std::vector<double> value;
    std::vector<double> grad;
    std::function<void(Tape&, std::size_t)> backward;
    long param = -1;
    bool requires_grad = false;
  };

  std::size_t push(Shape shape, std::vector<double> value, bool requires_grad);
  Node& node(std::size_t id) { return nodes_[id]; }
  const Node& node(std::size_t id) const { return nodes_[id]; }
  std::vector<double>& grad_buffer(std::size_t id);

  const ParameterSet* params_;
  std::vector<Node> nodes_;
  std::unordered_map<std::size_t, std::size_t> param_leaf_;
  std::vector<BatchNormObservation> norm_obs_;
  bool has_backward_ = false;
};

// Forward operations. Every op records a backward rule on the tape of its
// inputs; all inputs must share one tape.
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
Tensor add(const Tensor& a, const Tensor& b);
// Adds a 1 x cols row to every row of `a`.
Tensor add_row(const Tensor& a, const Tensor& row);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
Tensor concat_cols(const Tensor& a, const Tensor& b);
Tensor concat_rows(std::span<const Tensor> parts);
Tensor slice_cols(const Tensor& a, std::size_t begin, std::size_t width);
Tensor select_rows(const Tensor& a, std::span<const std::size_t> rows);
// Row-wise softmax of a + mask. `mask` has either cols entries (broadcast
// over rows) or rows*cols entries; empty means unmasked.
Tensor softmax(const Tensor& a, std::span<const double> mask = {});
Tensor log_softmax(const Tensor& a, std::span<const double> mask = {});
Tensor relu(const Tensor& a);
Tensor tanh(const Tensor& a);
Tensor log(const Tensor& a);
Tensor sum(const Tensor& a);
// Mean over rows (axis 0), giving 1 x cols.
Tensor mean_rows(const Tensor& a);
// Batch normalization over the row axis with affine gamma/beta (1 x cols).
// Training mode with a single row falls back to the running statistics.
Tensor batch_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  std::size_t running_mean, std::size_t running_var, NormMode mode,
                  double eps = 1e-5);

// Row-major kernels shared by matmul; the parallel variant splits output
// rows across threads and must agree bit-for-bit with the serial one.
void gemm_serial(std::span<const double> a, std::span<const double> b, std::span<double> out,
                 std::size_t m, std::size_t k, std::size_t n);
void gemm_parallel(std::span<const double> a, std::span<const double> b, std::span<double> out,
                   std::size_t m, std::size_t k, std::size_t n);

struct AdamConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamState {
  AdamConfig config;
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;
  std::uint64_t step = 0;

  static AdamState for_params(const ParameterSet& params, AdamConfig config);
};

// One Adam update over every trainable parameter. Throws
// std::invalid_argument when a trainable parameter has no gradient buffer.
void adam_step(ParameterSet& params, const Gradients& grads, AdamState& state);

double global_norm(const Gradients& grads);
// Rescales in place so the global norm is at most max_norm; returns the
// norm before clipping.
double clip_global_norm(Gradients& grads, double max_norm);

// Checkpoint container: magic "MSTOP\0", u32 version, parameter blocks,
// then optimizer blocks. Loading checks names and shapes against the
// destination set.
inline constexpr std::uint32_t kCheckpointVersion = 1;
void save_checkpoint(const std::string& path, const ParameterSet& params,
                     const AdamState* adam = nullptr);
void load_checkpoint(const std::string& path, ParameterSet& params, AdamState* adam = nullptr);

}  // namespace mstop::nk

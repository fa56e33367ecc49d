#include "mstop/numkit.h"

#include <algorithm>
#include <cmath>
#include <sstream>

#include <omp.h>

#include "mstop/rng.h"

namespace mstop::nk {

std::string Shape::str() const {
  std::ostringstream os;
  os << "[" << rows << " x " << cols << "]";
  return os.str();
}

ShapeError::ShapeError(const std::string& op, const std::string& detail)
    : std::invalid_argument(op + ": shape mismatch " + detail) {}

NonFiniteError::NonFiniteError(const std::string& op)
    : std::domain_error(op + ": non-finite value") {}

// ---------------------------------------------------------------------------
// ParameterSet

std::size_t ParameterSet::add(std::string name, Shape shape, bool trainable) {
  if (by_name_.count(name)) throw std::invalid_argument("duplicate parameter " + name);
  const std::size_t idx = params_.size();
  by_name_.emplace(name, idx);
  params_.push_back({std::move(name), shape, std::vector<double>(shape.size(), 0.0), trainable});
  return idx;
}

std::size_t ParameterSet::index(const std::string& name) const {
  auto it = by_name_.find(name);
  if (it == by_name_.end()) throw std::out_of_range("unknown parameter " + name);
  return it->second;
}

bool ParameterSet::contains(const std::string& name) const { return by_name_.count(name) > 0; }

void ParameterSet::init_uniform(std::uint64_t seed) {
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto& p = params_[i];
    if (!p.trainable) continue;
    Rng rng(derive_seed(seed, {i}));
    const double bound = 1.0 / std::sqrt(static_cast<double>(std::max<std::size_t>(p.shape.rows, 1)));
    for (auto& v : p.value) v = rng.uniform(-bound, bound);
  }
}

std::size_t ParameterSet::trainable_count() const {
  std::size_t n = 0;
  for (const auto& p : params_)
    if (p.trainable) n += p.value.size();
  return n;
}

// ---------------------------------------------------------------------------
// Tensor

const Shape& Tensor::shape() const { return tape_->node(id_).shape; }
std::span<const double> Tensor::values() const { return tape_->node(id_).value; }
double Tensor::at(std::size_t r, std::size_t c) const {
  return tape_->node(id_).value[r * shape().cols + c];
}
double Tensor::item() const {
  if (shape().size() != 1) throw ShapeError("item", shape().str());
  return tape_->node(id_).value[0];
}
bool Tensor::requires_grad() const { return tape_->node(id_).requires_grad; }

// ---------------------------------------------------------------------------
// Tape

namespace {

void check_finite(std::span<const double> v, const char* op) {
  for (double x : v)
    if (!std::isfinite(x)) throw NonFiniteError(op);
}

}  // namespace

std::size_t Tape::push(Shape shape, std::vector<double> value, bool requires_grad) {
  nodes_.push_back(Node{shape, std::move(value), {}, {}, -1, requires_grad});
  return nodes_.size() - 1;
}

std::vector<double>& Tape::grad_buffer(std::size_t id) {
  auto& n = nodes_[id];
  if (n.grad.empty()) n.grad.assign(n.value.size(), 0.0);
  return n.grad;
}

Tensor Tape::constant(Shape shape, std::vector<double> values) {
  if (values.size() != shape.size())
    throw ShapeError("constant", shape.str() + " vs " + std::to_string(values.size()) + " values");
  check_finite(values, "constant");
  return {this, push(shape, std::move(values), false)};
}

Tensor Tape::constant_row(std::span<const double> values) {
  return constant({1, values.size()}, std::vector<double>(values.begin(), values.end()));
}

Tensor Tape::variable(Shape shape, std::vector<double> values) {
  if (values.size() != shape.size())
    throw ShapeError("variable", shape.str() + " vs " + std::to_string(values.size()) + " values");
  check_finite(values, "variable");
  return {this, push(shape, std::move(values), true)};
}

Tensor Tape::param(std::size_t index) {
  if (params_ == nullptr || index >= params_->size())
    throw std::out_of_range("tape has no parameter " + std::to_string(index));
  auto it = param_leaf_.find(index);
  if (it != param_leaf_.end()) return {this, it->second};
  const auto& p = (*params_)[index];
  const std::size_t id = push(p.shape, p.value, p.trainable);
  nodes_[id].param = static_cast<long>(index);
  param_leaf_.emplace(index, id);
  return {this, id};
}

Tensor Tape::param(const std::string& name) {
  if (params_ == nullptr) throw std::out_of_range("tape has no parameters");
  return param(params_->index(name));
}

void Tape::backward(const Tensor& loss) {
  if (loss.tape() != this) throw std::invalid_argument("backward: loss from another tape");
  if (loss.shape().size() != 1) throw ShapeError("backward", "loss must be scalar, got " + loss.shape().str());
  for (auto& n : nodes_) n.grad.clear();
  has_backward_ = true;
  if (!nodes_[loss.id()].requires_grad) return;
  grad_buffer(loss.id())[0] = 1.0;
  for (std::size_t i = loss.id() + 1; i-- > 0;) {
    auto& n = nodes_[i];
    if (n.grad.empty() || !n.backward) continue;
    n.backward(*this, i);
  }
}

std::span<const double> Tape::grad(const Tensor& t) const {
  const auto& n = nodes_.at(t.id());
  if (!n.requires_grad) throw std::invalid_argument("grad: node is detached from the tape");
  if (!has_backward_) throw std::logic_error("grad: backward has not run");
  if (n.grad.empty()) {
    static thread_local std::vector<double> zeros;
    zeros.assign(n.value.size(), 0.0);
    return zeros;
  }
  return n.grad;
}

void Tape::accumulate(Gradients& out, double scale) const {
  if (params_ == nullptr) return;
  if (out.size() < params_->size()) out.resize(params_->size());
  for (const auto& [index, id] : param_leaf_) {
    const auto& n = nodes_[id];
    if (!n.requires_grad) continue;
    auto& dst = out[index];
    if (dst.empty()) dst.assign(n.value.size(), 0.0);
    if (n.grad.empty()) continue;
    for (std::size_t j = 0; j < dst.size(); ++j) dst[j] += scale * n.grad[j];
  }
}

// ---------------------------------------------------------------------------
// Ops

struct Ops {
  static Tape::Node& node(const Tensor& t) { return t.tape()->node(t.id()); }
  static Tape::Node& node(Tape& tape, std::size_t id) { return tape.node(id); }
  static std::vector<double>& grad(Tape& tape, std::size_t id) { return tape.grad_buffer(id); }
  static bool wants(Tape& tape, std::size_t id) { return tape.node(id).requires_grad; }

  static Tensor emit(Tape* tape, Shape shape, std::vector<double> value, bool requires_grad,
                     std::function<void(Tape&, std::size_t)> backward) {
    const std::size_t id = tape->push(shape, std::move(value), requires_grad);
    if (requires_grad) tape->node(id).backward = std::move(backward);
    return {tape, id};
  }

  static void push_norm_observation(Tape* tape, BatchNormObservation obs) {
    tape->norm_obs_.push_back(std::move(obs));
  }
};

namespace {

Tape* same_tape(const char* op, std::initializer_list<const Tensor*> ts) {
  Tape* tape = nullptr;
  for (const Tensor* t : ts) {
    if (!t->valid()) throw std::invalid_argument(std::string(op) + ": invalid tensor");
    if (tape == nullptr) tape = t->tape();
    if (t->tape() != tape) throw std::invalid_argument(std::string(op) + ": tensors from different tapes");
  }
  return tape;
}

constexpr std::size_t kParallelGemmWork = 1u << 16;

}  // namespace

void gemm_serial(std::span<const double> a, std::span<const double> b, std::span<double> out,
                 std::size_t m, std::size_t k, std::size_t n) {
  std::fill(out.begin(), out.end(), 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    double* row = out.data() + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = a[i * k + p];
      const double* brow = b.data() + p * n;
      for (std::size_t j = 0; j < n; ++j) row[j] += av * brow[j];
    }
  }
}

void gemm_parallel(std::span<const double> a, std::span<const double> b, std::span<double> out,
                   std::size_t m, std::size_t k, std::size_t n) {
  // Each output row is computed by one thread with the serial summation
  // order, so results match gemm_serial exactly.
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t si = 0; si < static_cast<std::ptrdiff_t>(m); ++si) {
    const auto i = static_cast<std::size_t>(si);
    double* row = out.data() + i * n;
    std::fill(row, row + n, 0.0);
    for (std::size_t p = 0; p < k; ++p) {
      const double av = a[i * k + p];
      const double* brow = b.data() + p * n;
      for (std::size_t j = 0; j < n; ++j) row[j] += av * brow[j];
    }
  }
}

namespace {

void gemm(std::span<const double> a, std::span<const double> b, std::span<double> out, std::size_t m,
          std::size_t k, std::size_t n) {
  if (m * k * n >= kParallelGemmWork && m > 1 && !omp_in_parallel())
    gemm_parallel(a, b, out, m, k, n);
  else
    gemm_serial(a, b, out, m, k, n);
}

// out(m x n) += a(m x k) * b(n x k)^T
void gemm_nt_acc(const double* a, const double* b, double* out, std::size_t m, std::size_t k,
                 std::size_t n) {
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      double s = 0.0;
      for (std::size_t p = 0; p < k; ++p) s += a[i * k + p] * b[j * k + p];
      out[i * n + j] += s;
    }
}

// out(k x n) += a(m x k)^T * b(m x n)
void gemm_tn_acc(const double* a, const double* b, double* out, std::size_t m, std::size_t k,
                 std::size_t n) {
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t p = 0; p < k; ++p) {
      const double av = a[i * k + p];
      if (av == 0.0) continue;
      for (std::size_t j = 0; j < n; ++j) out[p * n + j] += av * b[i * n + j];
    }
}

std::vector<double> expand_mask(std::span<const double> mask, const Shape& s, const char* op) {
  std::vector<double> full;
  if (mask.empty()) return full;
  if (mask.size() != s.cols && mask.size() != s.size())
    throw ShapeError(op, "mask of " + std::to_string(mask.size()) + " entries for " + s.str());
  full.resize(s.size());
  for (std::size_t r = 0; r < s.rows; ++r)
    for (std::size_t c = 0; c < s.cols; ++c) {
      double m = mask.size() == s.cols ? mask[c] : mask[r * s.cols + c];
      if (std::isnan(m)) throw NonFiniteError(op);
      full[r * s.cols + c] = std::max(m, kMasked);
    }
  // A fully masked row is a constant shift, which (log-)softmax ignores.
  // Dropping it avoids rounding every score to the sentinel's ulp.
  for (std::size_t r = 0; r < s.rows; ++r) {
    auto row = std::span(full).subspan(r * s.cols, s.cols);
    if (std::ranges::all_of(row, [](double v) { return v <= kMasked; })) std::ranges::fill(row, 0.0);
  }
  return full;
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  Tape* tape = same_tape("matmul", {&a, &b});
  const Shape sa = a.shape(), sb = b.shape();
  if (sa.cols != sb.rows) throw ShapeError("matmul", sa.str() + " * " + sb.str());
  std::vector<double> out(sa.rows * sb.cols);
  gemm(a.values(), b.values(), out, sa.rows, sa.cols, sb.cols);
  const std::size_t ia = a.id(), ib = b.id();
  return Ops::emit(tape, {sa.rows, sb.cols}, std::move(out), a.requires_grad() || b.requires_grad(),
                   [ia, ib, sa, sb](Tape& t, std::size_t o) {
                     const auto& g = Ops::node(t, o).grad;
                     if (Ops::wants(t, ia)) {
                       auto& ga = Ops::grad(t, ia);
                       gemm_nt_acc(g.data(), Ops::node(t, ib).value.data(), ga.data(), sa.rows, sb.cols,
                                   sa.cols);
                     }
                     if (Ops::wants(t, ib)) {
                       auto& gb = Ops::grad(t, ib);
                       gemm_tn_acc(Ops::node(t, ia).value.data(), g.data(), gb.data(), sa.rows, sa.cols,
                                   sb.cols);
                     }
                   });
}

Tensor transpose(const Tensor& a) {
  Tape* tape = same_tape("transpose", {&a});
  const Shape s = a.shape();
  std::vector<double> out(s.size());
  auto v = a.values();
  for (std::size_t r = 0; r < s.rows; ++r)
    for (std::size_t c = 0; c < s.cols; ++c) out[c * s.rows + r] = v[r * s.cols + c];
  const std::size_t ia = a.id();
  return Ops::emit(tape, {s.cols, s.rows}, std::move(out), a.requires_grad(),
                   [ia, s](Tape& t, std::size_t o) {
                     const auto& g = Ops::node(t, o).grad;
                     auto& ga = Ops::grad(t, ia);
                     for (std::size_t r = 0; r < s.rows; ++r)
                       for (std::size_t c = 0; c < s.cols; ++c) ga[r * s.cols + c] += g[c * s.rows + r];
                   });
}

Tensor add(const Tensor& a, const Tensor& b) {
  Tape* tape = same_tape("add", {&a, &b});
  if (a.shape() != b.shape()) throw ShapeError("add", a.shape().str() + " + " + b.shape().str());
  std::vector<double> out(a.values().begin(), a.values().end());
  auto bv = b.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  const std::size_t ia = a.id(), ib = b.id();
  return Ops::emit(tape, a.shape(), std::move(out), a.requires_grad() || b.requires_grad(),
                   [ia, ib](Tape& t, std::size_t o) {
                     const auto& g = Ops::node(t, o).grad;
                     for (std::size_t id : {ia, ib}) {
                       if (!Ops::wants(t, id)) continue;
                       auto& gx = Ops::grad(t, id);
                       for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
                     }
                   });
}

Tensor add_row(const Tensor& a, const Tensor& row) {
  Tape* tape = same_tape("add_row", {&a, &row});
  const Shape s = a.shape();
  if (row.shape() != Shape{1, s.cols}) throw ShapeError("add_row", s.str() + " + " + row.shape().str());
  std::vector<double> out(a.values().begin(), a.values().end());
  auto rv = row.values();
  for (std::size_t r = 0; r < s.rows; ++r)
    for (std::size_t c = 0; c < s.cols; ++c) out[r * s.cols + c] += rv[c];
  const std::size_t ia = a.id(), ir = row.id();
  return Ops::emit(tape, s, std::move(out), a.requires_grad() || row.requires_grad(),
                   [ia, ir, s](Tape& t, std::size_t o) {
                     const auto& g = Ops::node(t, o).grad;
                     if (Ops::wants(t, ia)) {
                       auto& ga = Ops::grad(t, ia);
                       for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
                     }
                     if (Ops::wants(t, ir)) {
                       auto& gr = Ops::grad(t, ir);
                       for (std::size_t r = 0; r < s.rows; ++r)
                         for (std::size_t c = 0; c < s.cols; ++c) gr[c] += g[r * s.cols + c];
                     }
                   });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  Tape* tape = same_tape("mul", {&a, &b});
  if (a.shape() != b.shape()) throw ShapeError("mul", a.shape().str() + " * " + b.shape().str());
  std::vector<double> out(a.values().begin(), a.values().end());
  auto bv = b.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  const std::size_t ia = a.id(), ib = b.id();
  return Ops::emit(tape, a.shape(), std::move(out), a.requires_grad() || b.requires_grad(),
                   [ia, ib](Tape& t, std::size_t o) {
                     const auto& g = Ops::node(t, o).grad;
                     if (Ops::wants(t, ia)) {
                       auto& ga = Ops::grad(t, ia);
                       const auto& bv = Ops::node(t, ib).value;
                       for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv[i];
                     }
                     if (Ops::wants(t, ib)) {
                       auto& gb = Ops::grad(t, ib);
                       const auto& av = Ops::node(t, ia).value;
                       for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av[i];
                     }
                   });
}

Tensor scale(const Tensor& a, double s) {
  Tape* tape = same_tape("scale", {&a});
  if (!std::isfinite(s)) throw NonFiniteError("scale");
  std::vector<double> out(a.values().begin(), a.values().end());
  for (auto& x : out) x *= s;
  const std::size_t ia = a.id();
  return Ops::emit(tape, a.shape(), std::move(out), a.requires_grad(), [ia, s](Tape& t, std::size_t o) {
    const auto& g = Ops::node(t, o).grad;
    auto& ga = Ops::grad(t, ia);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += s * g[i];
  });
}

Tensor concat_cols(const Tensor& a, const Tensor& b) {
  Tape* tape = same_tape("concat_cols", {&a, &b});
  const Shape sa = a.shape(), sb = b.shape();
  if (sa.rows != sb.rows) throw ShapeError("concat_cols", sa.str() + " | " + sb.str());
  const std::size_t cols = sa.cols + sb.cols;
  std::vector<double> out(sa.rows * cols);
  auto av = a.values(), bv = b.values();
  for (std::size_t r = 0; r < sa.rows; ++r) {
    std::copy_n(av.data() + r * sa.cols, sa.cols, out.data() + r * cols);
    std::copy_n(bv.data() + r * sb.cols, sb.cols, out.data() + r * cols + sa.cols);
  }
  const std::size_t ia = a.id(), ib = b.id();
  return Ops::emit(tape, {sa.rows, cols}, std::move(out), a.requires_grad() || b.requires_grad(),
                   [ia, ib, sa, sb, cols](Tape& t, std::size_t o) {
                     const auto& g = Ops::node(t, o).grad;
                     if (Ops::wants(t, ia)) {
                       auto& ga = Ops::grad(t, ia);
                       for (std::size_t r = 0; r < sa.rows; ++r)
                         for (std::size_t c = 0; c < sa.cols; ++c) ga[r * sa.cols + c] += g[r * cols + c];
                     }
                     if (Ops::wants(t, ib)) {
                       auto& gb = Ops::grad(t, ib);
                       for (std::size_t r = 0; r < sb.rows; ++r)
                         for (std::size_t c = 0; c < sb.cols; ++c)
                           gb[r * sb.cols + c] += g[r * cols + sa.cols + c];
                     }
                   });
}

Tensor concat_rows(std::span<const Tensor> parts) {
  if (parts.empty()) throw ShapeError("concat_rows", "no inputs");
  Tape* tape = parts[0].tape();
  const std::size_t cols = parts[0].cols();
  std::size_t rows = 0;
  bool rg = false;
  for (const auto& p : parts) {
    same_tape("concat_rows", {&parts[0], &p});
    if (p.cols() != cols) throw ShapeError("concat_rows", parts[0].shape().str() + " / " + p.shape().str());
    rows += p.rows();
    rg = rg || p.requires_grad();
  }
  std::vector<double> out;
  out.reserve(rows * cols);
  std::vector<std::size_t> ids;
  for (const auto& p : parts) {
    out.insert(out.end(), p.values().begin(), p.values().end());
    ids.push_back(p.id());
  }
  return Ops::emit(tape, {rows, cols}, std::move(out), rg, [ids](Tape& t, std::size_t o) {
    const auto& g = Ops::node(t, o).grad;
    std::size_t offset = 0;
    for (std::size_t id : ids) {
      const std::size_t n = Ops::node(t, id).value.size();
      if (Ops::wants(t, id)) {
        auto& gx = Ops::grad(t, id);
        for (std::size_t i = 0; i < n; ++i) gx[i] += g[offset + i];
      }
      offset += n;
    }
  });
}

Tensor slice_cols(const Tensor& a, std::size_t begin, std::size_t width) {
  Tape* tape = same_tape("slice_cols", {&a});
  const Shape s = a.shape();
  if (begin + width > s.cols)
    throw ShapeError("slice_cols", s.str() + " cols [" + std::to_string(begin) + ", " +
                                       std::to_string(begin + width) + ")");
  std::vector<double> out(s.rows * width);
  auto v = a.values();
  for (std::size_t r = 0; r < s.rows; ++r)
    std::copy_n(v.data() + r * s.cols + begin, width, out.data() + r * width);
  const std::size_t ia = a.id();
  return Ops::emit(tape, {s.rows, width}, std::move(out), a.requires_grad(),
                   [ia, s, begin, width](Tape& t, std::size_t o) {
                     const auto& g = Ops::node(t, o).grad;
                     auto& ga = Ops::grad(t, ia);
                     for (std::size_t r = 0; r < s.rows; ++r)
                       for (std::size_t c = 0; c < width; ++c) ga[r * s.cols + begin + c] += g[r * width + c];
                   });
}

Tensor select_rows(const Tensor& a, std::span<const std::size_t> rows) {
  Tape* tape = same_tape("select_rows", {&a});
  const Shape s = a.shape();
  std::vector<std::size_t> idx(rows.begin(), rows.end());
  std::vector<double> out(idx.size() * s.cols);
  auto v = a.values();
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] >= s.rows) throw ShapeError("select_rows", "row " + std::to_string(idx[i]) + " of " + s.str());
    std::copy_n(v.data() + idx[i] * s.cols, s.cols, out.data() + i * s.cols);
  }
  const std::size_t ia = a.id();
  const std::size_t n = idx.size();
  return Ops::emit(tape, {n, s.cols}, std::move(out), a.requires_grad(),
                   [ia, s, idx = std::move(idx)](Tape& t, std::size_t o) {
                     const auto& g = Ops::node(t, o).grad;
                     auto& ga = Ops::grad(t, ia);
                     for (std::size_t i = 0; i < idx.size(); ++i)
                       for (std::size_t c = 0; c < s.cols; ++c) ga[idx[i] * s.cols + c] += g[i * s.cols + c];
                   });
}

Tensor softmax(const Tensor& a, std::span<const double> mask) {
  Tape* tape = same_tape("softmax", {&a});
  const Shape s = a.shape();
  const auto m = expand_mask(mask, s, "softmax");
  std::vector<double> out(a.values().begin(), a.values().end());
  for (std::size_t r = 0; r < s.rows; ++r) {
    double* row = out.data() + r * s.cols;
    if (!m.empty())
      for (std::size_t c = 0; c < s.cols; ++c) row[c] += m[r * s.cols + c];
    const double mx = *std::max_element(row, row + s.cols);
    double z = 0.0;
    for (std::size_t c = 0; c < s.cols; ++c) z += (row[c] = std::exp(row[c] - mx));
    for (std::size_t c = 0; c < s.cols; ++c) row[c] /= z;
  }
  const std::size_t ia = a.id();
  return Ops::emit(tape, s, std::move(out), a.requires_grad(), [ia, s](Tape& t, std::size_t o) {
    const auto& g = Ops::node(t, o).grad;
    const auto& y = Ops::node(t, o).value;
    auto& ga = Ops::grad(t, ia);
    for (std::size_t r = 0; r < s.rows; ++r) {
      double dot = 0.0;
      for (std::size_t c = 0; c < s.cols; ++c) dot += g[r * s.cols + c] * y[r * s.cols + c];
      for (std::size_t c = 0; c < s.cols; ++c)
        ga[r * s.cols + c] += y[r * s.cols + c] * (g[r * s.cols + c] - dot);
    }
  });
}

Tensor log_softmax(const Tensor& a, std::span<const double> mask) {
  Tape* tape = same_tape("log_softmax", {&a});
  const Shape s = a.shape();
  const auto m = expand_mask(mask, s, "log_softmax");
  std::vector<double> out(a.values().begin(), a.values().end());
  for (std::size_t r = 0; r < s.rows; ++r) {
    double* row = out.data() + r * s.cols;
    if (!m.empty())
      for (std::size_t c = 0; c < s.cols; ++c) row[c] += m[r * s.cols + c];
    const double mx = *std::max_element(row, row + s.cols);
    double z = 0.0;
    for (std::size_t c = 0; c < s.cols; ++c) z += std::exp(row[c] - mx);
    const double lz = mx + std::log(z);
    for (std::size_t c = 0; c < s.cols; ++c) row[c] -= lz;
  }
  const std::size_t ia = a.id();
  return Ops::emit(tape, s, std::move(out), a.requires_grad(), [ia, s](Tape& t, std::size_t o) {
    const auto& g = Ops::node(t, o).grad;
    const auto& y = Ops::node(t, o).value;
    auto& ga = Ops::grad(t, ia);
    for (std::size_t r = 0; r < s.rows; ++r) {
      double gs = 0.0;
      for (std::size_t c = 0; c < s.cols; ++c) gs += g[r * s.cols + c];
      for (std::size_t c = 0; c < s.cols; ++c)
        ga[r * s.cols + c] += g[r * s.cols + c] - std::exp(y[r * s.cols + c]) * gs;
    }
  });
}

Tensor relu(const Tensor& a) {
  Tape* tape = same_tape("relu", {&a});
  std::vector<double> out(a.values().begin(), a.values().end());
  for (auto& x : out) x = x > 0.0 ? x : 0.0;
  const std::size_t ia = a.id();
  return Ops::emit(tape, a.shape(), std::move(out), a.requires_grad(), [ia](Tape& t, std::size_t o) {
    const auto& g = Ops::node(t, o).grad;
    const auto& x = Ops::node(t, ia).value;
    auto& ga = Ops::grad(t, ia);
    for (std::size_t i = 0; i < g.size(); ++i)
      if (x[i] > 0.0) ga[i] += g[i];
  });
}

Tensor tanh(const Tensor& a) {
  Tape* tape = same_tape("tanh", {&a});
  std::vector<double> out(a.values().begin(), a.values().end());
  for (auto& x : out) x = std::tanh(x);
  const std::size_t ia = a.id();
  return Ops::emit(tape, a.shape(), std::move(out), a.requires_grad(), [ia](Tape& t, std::size_t o) {
    const auto& g = Ops::node(t, o).grad;
    const auto& y = Ops::node(t, o).value;
    auto& ga = Ops::grad(t, ia);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * (1.0 - y[i] * y[i]);
  });
}

Tensor log(const Tensor& a) {
  Tape* tape = same_tape("log", {&a});
  std::vector<double> out(a.values().begin(), a.values().end());
  for (auto& x : out) {
    if (!(x > 0.0)) throw NonFiniteError("log");
    x = std::log(x);
  }
  const std::size_t ia = a.id();
  return Ops::emit(tape, a.shape(), std::move(out), a.requires_grad(), [ia](Tape& t, std::size_t o) {
    const auto& g = Ops::node(t, o).grad;
    const auto& x = Ops::node(t, ia).value;
    auto& ga = Ops::grad(t, ia);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] / x[i];
  });
}

Tensor sum(const Tensor& a) {
  Tape* tape = same_tape("sum", {&a});
  double s = 0.0;
  for (double x : a.values()) s += x;
  const std::size_t ia = a.id();
  return Ops::emit(tape, {1, 1}, {s}, a.requires_grad(), [ia](Tape& t, std::size_t o) {
    const double g = Ops::node(t, o).grad[0];
    auto& ga = Ops::grad(t, ia);
    for (auto& x : ga) x += g;
  });
}

Tensor mean_rows(const Tensor& a) {
  Tape* tape = same_tape("mean_rows", {&a});
  const Shape s = a.shape();
  if (s.rows == 0) throw ShapeError("mean_rows", s.str());
  std::vector<double> out(s.cols, 0.0);
  auto v = a.values();
  for (std::size_t r = 0; r < s.rows; ++r)
    for (std::size_t c = 0; c < s.cols; ++c) out[c] += v[r * s.cols + c];
  for (auto& x : out) x /= static_cast<double>(s.rows);
  const std::size_t ia = a.id();
  return Ops::emit(tape, {1, s.cols}, std::move(out), a.requires_grad(), [ia, s](Tape& t, std::size_t o) {
    const auto& g = Ops::node(t, o).grad;
    auto& ga = Ops::grad(t, ia);
    const double inv = 1.0 / static_cast<double>(s.rows);
    for (std::size_t r = 0; r < s.rows; ++r)
      for (std::size_t c = 0; c < s.cols; ++c) ga[r * s.cols + c] += g[c] * inv;
  });
}

Tensor batch_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, std::size_t running_mean,
                  std::size_t running_var, NormMode mode, double eps) {
  Tape* tape = same_tape("batch_norm", {&x, &gamma, &beta});
  const Shape s = x.shape();
  if (gamma.shape() != Shape{1, s.cols} || beta.shape() != Shape{1, s.cols})
    throw ShapeError("batch_norm", s.str() + " with affine " + gamma.shape().str() + "/" + beta.shape().str());
  const ParameterSet* ps = tape->params();
  if (ps == nullptr) throw std::invalid_argument("batch_norm: tape has no parameters");
  const auto& rm = (*ps)[running_mean].value;
  const auto& rv = (*ps)[running_var].value;
  if (rm.size() != s.cols || rv.size() != s.cols)
    throw ShapeError("batch_norm", "running statistics vs " + s.str());

  const bool use_batch = mode == NormMode::kTrain && s.rows > 1;
  std::vector<double> mean(s.cols, 0.0), var(s.cols, 0.0);
  auto xv = x.values();
  if (use_batch) {
    for (std::size_t r = 0; r < s.rows; ++r)
      for (std::size_t c = 0; c < s.cols; ++c) mean[c] += xv[r * s.cols + c];
    for (auto& m : mean) m /= static_cast<double>(s.rows);
    for (std::size_t r = 0; r < s.rows; ++r)
      for (std::size_t c = 0; c < s.cols; ++c) {
        const double d = xv[r * s.cols + c] - mean[c];
        var[c] += d * d;
      }
    for (auto& v : var) v /= static_cast<double>(s.rows);
    Ops::push_norm_observation(tape, {running_mean, running_var, mean, var});
  } else {
    mean = rm;
    var = rv;
  }
  std::vector<double> inv_std(s.cols), xhat(s.size()), out(s.size());
  for (std::size_t c = 0; c < s.cols; ++c) inv_std[c] = 1.0 / std::sqrt(var[c] + eps);
  auto gv = gamma.values(), bv = beta.values();
  for (std::size_t r = 0; r < s.rows; ++r)
    for (std::size_t c = 0; c < s.cols; ++c) {
      const std::size_t i = r * s.cols + c;
      xhat[i] = (xv[i] - mean[c]) * inv_std[c];
      out[i] = gv[c] * xhat[i] + bv[c];
    }
  const std::size_t ix = x.id(), ig = gamma.id(), ib = beta.id();
  const bool rg = x.requires_grad() || gamma.requires_grad() || beta.requires_grad();
  return Ops::emit(
      tape, s, std::move(out), rg,
      [ix, ig, ib, s, use_batch, inv_std = std::move(inv_std), xhat = std::move(xhat)](Tape& t, std::size_t o) {
        const auto& g = Ops::node(t, o).grad;
        const auto& gv = Ops::node(t, ig).value;
        if (Ops::wants(t, ig)) {
          auto& gg = Ops::grad(t, ig);
          for (std::size_t i = 0; i < g.size(); ++i) gg[i % s.cols] += g[i] * xhat[i];
        }
        if (Ops::wants(t, ib)) {
          auto& gb = Ops::grad(t, ib);
          for (std::size_t i = 0; i < g.size(); ++i) gb[i % s.cols] += g[i];
        }
        if (!Ops::wants(t, ix)) return;
        auto& gx = Ops::grad(t, ix);
        if (!use_batch) {
          for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * gv[i % s.cols] * inv_std[i % s.cols];
          return;
        }
        const double n = static_cast<double>(s.rows);
        for (std::size_t c = 0; c < s.cols; ++c) {
          double sum_g = 0.0, sum_gx = 0.0;
          for (std::size_t r = 0; r < s.rows; ++r) {
            const double gh = g[r * s.cols + c] * gv[c];
            sum_g += gh;
            sum_gx += gh * xhat[r * s.cols + c];
          }
          for (std::size_t r = 0; r < s.rows; ++r) {
            const std::size_t i = r * s.cols + c;
            const double gh = g[i] * gv[c];
            gx[i] += inv_std[c] * (gh - sum_g / n - xhat[i] * sum_gx / n);
          }
        }
      });
}

}  // namespace mstop::nk

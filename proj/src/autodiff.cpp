#include "tvo/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

#include "tvo/errors.hpp"

namespace tvo {

namespace {

double softplus_value(double x) {
  return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

double sigmoid_value(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

const char* op_name(Tape::Op op) {
  switch (op) {
    case Tape::Op::param: return "param";
    case Tape::Op::input: return "input";
    case Tape::Op::constant: return "constant";
    case Tape::Op::add: return "add";
    case Tape::Op::sub: return "sub";
    case Tape::Op::mul: return "mul";
    case Tape::Op::neg: return "neg";
    case Tape::Op::scale: return "scale";
    case Tape::Op::shift: return "shift";
    case Tape::Op::matmul: return "matmul";
    case Tape::Op::add_row: return "add_row";
    case Tape::Op::broadcast_rows: return "broadcast_rows";
    case Tape::Op::sum: return "sum";
    case Tape::Op::sum_rows: return "sum_rows";
    case Tape::Op::exp: return "exp";
    case Tape::Op::log: return "log";
    case Tape::Op::sigmoid: return "sigmoid";
    case Tape::Op::tanh: return "tanh";
    case Tape::Op::log_sigmoid: return "log_sigmoid";
    case Tape::Op::softplus: return "softplus";
    case Tape::Op::square: return "square";
    case Tape::Op::log_sum_exp: return "log_sum_exp";
    case Tape::Op::index: return "index";
    case Tape::Op::slice_cols: return "slice_cols";
  }
  return "?";
}

}  // namespace

std::size_t shape_size(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

RealArray::RealArray(Shape s, std::vector<double> d) : shape(std::move(s)), data(std::move(d)) {
  for (std::size_t dim : shape) {
    if (dim == 0) throw StructuralError("array shape " + shape_string(shape) + " has a zero dimension");
  }
  if (data.size() != shape_size(shape)) {
    throw StructuralError("array shape " + shape_string(shape) + " does not match data length " +
                          std::to_string(data.size()));
  }
}

RealArray RealArray::scalar(double v) { return RealArray({}, {v}); }
RealArray RealArray::vector(std::vector<double> v) {
  const std::size_t n = v.size();
  return RealArray({n}, std::move(v));
}
RealArray RealArray::matrix(std::size_t rows, std::size_t cols, std::vector<double> v) {
  return RealArray({rows, cols}, std::move(v));
}
RealArray RealArray::zeros(Shape s) {
  const std::size_t n = shape_size(s);
  return RealArray(std::move(s), std::vector<double>(n, 0.0));
}

std::size_t ParamLayout::add(std::string name, Shape shape) {
  if (find(name) != nullptr) throw StructuralError("duplicate parameter segment '" + name + "'");
  const std::size_t offset = size_;
  Segment seg{std::move(name), offset, std::move(shape)};
  size_ += seg.size();
  segments_.push_back(std::move(seg));
  return offset;
}

const Segment* ParamLayout::find(std::string_view name) const {
  for (const auto& s : segments_) {
    if (s.name == name) return &s;
  }
  return nullptr;
}

const Segment& ParamLayout::segment(std::string_view name) const {
  const Segment* s = find(name);
  if (s == nullptr) throw UsageError("unknown parameter segment '" + std::string(name) + "'");
  return *s;
}

bool is_theta_segment(const Segment& segment) { return segment.name.starts_with("theta/"); }
bool is_phi_segment(const Segment& segment) { return segment.name.starts_with("phi/"); }

ParamVector::ParamVector(std::shared_ptr<const ParamLayout> layout)
    : layout_(std::move(layout)), values_(layout_->size(), 0.0) {}

ParamVector::ParamVector(std::shared_ptr<const ParamLayout> layout, std::vector<double> values)
    : layout_(std::move(layout)), values_(std::move(values)) {
  if (values_.size() != layout_->size()) {
    throw StructuralError("parameter vector length " + std::to_string(values_.size()) +
                          " does not match layout size " + std::to_string(layout_->size()));
  }
}

std::span<double> ParamVector::segment(std::string_view name) {
  const Segment& s = layout_->segment(name);
  return std::span<double>(values_).subspan(s.offset, s.size());
}

std::span<const double> ParamVector::segment(std::string_view name) const {
  const Segment& s = layout_->segment(name);
  return std::span<const double>(values_).subspan(s.offset, s.size());
}

RealArray ParamVector::array(std::string_view name) const {
  const Segment& s = layout_->segment(name);
  auto span = segment(name);
  return RealArray(s.shape, std::vector<double>(span.begin(), span.end()));
}

// ---------------------------------------------------------------------------
// Recording

Var Tape::push(Node node) {
  nodes_.push_back(std::move(node));
  return Var{this, static_cast<std::uint32_t>(nodes_.size() - 1)};
}

void Tape::check_owned(Var v) const {
  if (v.tape != this || v.id >= nodes_.size()) throw UsageError("variable does not belong to this tape");
}

Var Tape::unary(Op op, Var a) {
  check_owned(a);
  Node n{};
  n.op = op;
  n.a = a.id;
  n.grad = nodes_[a.id].grad;
  return push(std::move(n));
}

Var Tape::binary(Op op, Var a, Var b) {
  check_owned(a);
  check_owned(b);
  Node n{};
  n.op = op;
  n.a = a.id;
  n.b = b.id;
  n.grad = nodes_[a.id].grad || nodes_[b.id].grad;
  return push(std::move(n));
}

Var Tape::param(std::string name) {
  Node n{};
  n.op = Op::param;
  n.name = std::move(name);
  n.grad = true;
  return push(std::move(n));
}

Var Tape::input(std::string name) {
  Node n{};
  n.op = Op::input;
  n.name = std::move(name);
  return push(std::move(n));
}

Var Tape::constant(RealArray value) {
  Node n{};
  n.op = Op::constant;
  n.value = std::move(value);
  return push(std::move(n));
}

Var Tape::constant(double value) { return constant(RealArray::scalar(value)); }

Var Tape::add(Var a, Var b) { return binary(Op::add, a, b); }
Var Tape::sub(Var a, Var b) { return binary(Op::sub, a, b); }
Var Tape::mul(Var a, Var b) { return binary(Op::mul, a, b); }
Var Tape::neg(Var a) { return unary(Op::neg, a); }
Var Tape::matmul(Var a, Var b) { return binary(Op::matmul, a, b); }
Var Tape::add_row(Var matrix, Var row) { return binary(Op::add_row, matrix, row); }
Var Tape::sum(Var a) { return unary(Op::sum, a); }
Var Tape::sum_rows(Var a) { return unary(Op::sum_rows, a); }
Var Tape::exp(Var a) { return unary(Op::exp, a); }
Var Tape::log(Var a) { return unary(Op::log, a); }
Var Tape::sigmoid(Var a) { return unary(Op::sigmoid, a); }
Var Tape::tanh(Var a) { return unary(Op::tanh, a); }
Var Tape::log_sigmoid(Var a) { return unary(Op::log_sigmoid, a); }
Var Tape::softplus(Var a) { return unary(Op::softplus, a); }
Var Tape::square(Var a) { return unary(Op::square, a); }
Var Tape::log_sum_exp(Var a) { return unary(Op::log_sum_exp, a); }

Var Tape::scale(Var a, double factor) {
  Var v = unary(Op::scale, a);
  nodes_[v.id].scalar = factor;
  return v;
}

Var Tape::shift(Var a, double offset) {
  Var v = unary(Op::shift, a);
  nodes_[v.id].scalar = offset;
  return v;
}

Var Tape::broadcast_rows(Var row, std::size_t rows) {
  Var v = unary(Op::broadcast_rows, row);
  nodes_[v.id].i0 = rows;
  return v;
}

Var Tape::index(Var a, std::size_t i) {
  Var v = unary(Op::index, a);
  nodes_[v.id].i0 = i;
  return v;
}

Var Tape::slice_cols(Var a, std::size_t begin, std::size_t end) {
  Var v = unary(Op::slice_cols, a);
  nodes_[v.id].i0 = begin;
  nodes_[v.id].i1 = end;
  return v;
}

void Tape::set_output(Var v) {
  check_owned(v);
  output_ = v.id;
  has_output_ = true;
}

Var Tape::output() const {
  if (!has_output_) throw UsageError("tape has no output node");
  return Var{const_cast<Tape*>(this), output_};
}

// ---------------------------------------------------------------------------
// Forward

std::string Tape::describe(std::uint32_t id) const {
  const Node& n = nodes_[id];
  std::string s = "node #" + std::to_string(id) + " (" + op_name(n.op);
  if (!n.name.empty()) s += " '" + n.name + "'";
  return s + ")";
}

void Tape::eval_node(std::uint32_t id, const ParamVector& params, const Inputs& inputs) {
  Node& n = nodes_[id];
  auto fail = [&](const std::string& msg) { throw StructuralError(describe(id) + ": " + msg); };
  auto resize = [&](Shape shape) {
    const std::size_t sz = shape_size(shape);
    n.value.shape = std::move(shape);
    n.value.data.resize(sz);
  };

  switch (n.op) {
    case Op::param: {
      const Segment* seg = params.layout().find(n.name);
      if (seg == nullptr) throw UsageError(describe(id) + ": parameter not declared in layout");
      n.param_offset = seg->offset;
      resize(seg->shape);
      auto src = params.values().subspan(seg->offset, seg->size());
      std::copy(src.begin(), src.end(), n.value.data.begin());
      return;
    }
    case Op::input: {
      auto it = inputs.find(n.name);
      if (it == inputs.end()) throw UsageError(describe(id) + ": input not supplied");
      n.value = it->second;
      return;
    }
    case Op::constant:
      return;
    default:
      break;
  }

  const RealArray& a = nodes_[n.a].value;
  switch (n.op) {
    case Op::add:
    case Op::sub:
    case Op::mul: {
      const RealArray& b = nodes_[n.b].value;
      const bool same = a.shape == b.shape;
      if (!same && a.rank() != 0 && b.rank() != 0) {
        fail("operand shapes " + shape_string(a.shape) + " and " + shape_string(b.shape) + " differ");
      }
      const bool a_scalar = !same && a.rank() == 0;
      resize(a_scalar ? b.shape : a.shape);
      const std::size_t sz = n.value.data.size();
      const std::size_t sa = a.size() == 1 && sz != 1 ? 0 : 1;
      const std::size_t sb = b.size() == 1 && sz != 1 ? 0 : 1;
      for (std::size_t i = 0; i < sz; ++i) {
        const double x = a.data[i * sa];
        const double y = b.data[i * sb];
        n.value.data[i] = n.op == Op::add ? x + y : n.op == Op::sub ? x - y : x * y;
      }
      return;
    }
    case Op::matmul: {
      const RealArray& b = nodes_[n.b].value;
      if (a.rank() != 2 || b.rank() != 2 || a.cols() != b.rows()) {
        fail("cannot multiply " + shape_string(a.shape) + " by " + shape_string(b.shape));
      }
      const std::size_t rows = a.rows(), inner = a.cols(), cols = b.cols();
      resize({rows, cols});
      std::fill(n.value.data.begin(), n.value.data.end(), 0.0);
      for (std::size_t i = 0; i < rows; ++i) {
        double* out = n.value.data.data() + i * cols;
        for (std::size_t k = 0; k < inner; ++k) {
          const double aik = a.data[i * inner + k];
          if (aik == 0.0) continue;
          const double* brow = b.data.data() + k * cols;
          for (std::size_t j = 0; j < cols; ++j) out[j] += aik * brow[j];
        }
      }
      return;
    }
    case Op::add_row: {
      const RealArray& b = nodes_[n.b].value;
      if (a.rank() != 2 || b.rank() != 1 || b.shape[0] != a.cols()) {
        fail("cannot add row " + shape_string(b.shape) + " to matrix " + shape_string(a.shape));
      }
      resize(a.shape);
      const std::size_t cols = a.cols();
      for (std::size_t i = 0; i < a.size(); ++i) n.value.data[i] = a.data[i] + b.data[i % cols];
      return;
    }
    case Op::broadcast_rows: {
      const bool row_matrix = a.rank() == 2 && a.rows() == 1;
      if (a.rank() != 1 && !row_matrix) fail("broadcast_rows expects a vector or 1xm matrix, got " + shape_string(a.shape));
      if (n.i0 == 0) fail("broadcast_rows needs at least one row");
      const std::size_t cols = a.size();
      resize({n.i0, cols});
      for (std::size_t i = 0; i < n.i0; ++i) std::copy(a.data.begin(), a.data.end(), n.value.data.begin() + i * cols);
      return;
    }
    case Op::sum:
      resize({});
      n.value.data[0] = std::accumulate(a.data.begin(), a.data.end(), 0.0);
      return;
    case Op::sum_rows: {
      if (a.rank() != 2) fail("sum_rows expects a matrix, got " + shape_string(a.shape));
      const std::size_t rows = a.rows(), cols = a.cols();
      resize({rows});
      for (std::size_t i = 0; i < rows; ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < cols; ++j) s += a.data[i * cols + j];
        n.value.data[i] = s;
      }
      return;
    }
    case Op::log_sum_exp: {
      resize({});
      const double m = *std::max_element(a.data.begin(), a.data.end());
      if (!std::isfinite(m)) {
        n.value.data[0] = m;
        return;
      }
      double s = 0.0;
      for (double v : a.data) s += std::exp(v - m);
      n.value.data[0] = m + std::log(s);
      return;
    }
    case Op::index:
      if (n.i0 >= a.size()) fail("index " + std::to_string(n.i0) + " out of range for " + shape_string(a.shape));
      resize({});
      n.value.data[0] = a.data[n.i0];
      return;
    case Op::slice_cols: {
      if (a.rank() != 2 || n.i0 >= n.i1 || n.i1 > a.cols()) {
        fail("invalid column slice [" + std::to_string(n.i0) + "," + std::to_string(n.i1) + ") of " +
             shape_string(a.shape));
      }
      const std::size_t rows = a.rows(), cols = a.cols(), width = n.i1 - n.i0;
      resize({rows, width});
      for (std::size_t i = 0; i < rows; ++i) {
        std::copy_n(a.data.begin() + i * cols + n.i0, width, n.value.data.begin() + i * width);
      }
      return;
    }
    default:
      break;
  }

  // Elementwise unary.
  resize(a.shape);
  auto& out = n.value.data;
  const std::size_t sz = out.size();
  switch (n.op) {
    case Op::neg: for (std::size_t i = 0; i < sz; ++i) out[i] = -a.data[i]; break;
    case Op::scale: for (std::size_t i = 0; i < sz; ++i) out[i] = n.scalar * a.data[i]; break;
    case Op::shift: for (std::size_t i = 0; i < sz; ++i) out[i] = a.data[i] + n.scalar; break;
    case Op::exp: for (std::size_t i = 0; i < sz; ++i) out[i] = std::exp(a.data[i]); break;
    case Op::log: for (std::size_t i = 0; i < sz; ++i) out[i] = std::log(a.data[i]); break;
    case Op::sigmoid: for (std::size_t i = 0; i < sz; ++i) out[i] = sigmoid_value(a.data[i]); break;
    case Op::tanh: for (std::size_t i = 0; i < sz; ++i) out[i] = std::tanh(a.data[i]); break;
    case Op::log_sigmoid: for (std::size_t i = 0; i < sz; ++i) out[i] = -softplus_value(-a.data[i]); break;
    case Op::softplus: for (std::size_t i = 0; i < sz; ++i) out[i] = softplus_value(a.data[i]); break;
    case Op::square: for (std::size_t i = 0; i < sz; ++i) out[i] = a.data[i] * a.data[i]; break;
    default: fail("unhandled op");
  }
}

void Tape::evaluate(const ParamVector& params, const Inputs& inputs) {
  evaluated_count_ = 0;
  for (std::uint32_t id = 0; id < nodes_.size(); ++id) eval_node(id, params, inputs);
  evaluated_layout_ = params.layout_ptr();
  evaluated_count_ = nodes_.size();
}

double Tape::forward(const ParamVector& params, const Inputs& inputs) {
  evaluate(params, inputs);
  return scalar(output());
}

const RealArray& Tape::value(Var v) const {
  check_owned(v);
  if (v.id >= evaluated_count_) throw UsageError("value requested before forward evaluation");
  return nodes_[v.id].value;
}

double Tape::scalar(Var v) const {
  const RealArray& a = value(v);
  if (a.size() != 1) throw StructuralError(describe(v.id) + ": expected a scalar, got shape " + shape_string(a.shape));
  return a.data[0];
}

// ---------------------------------------------------------------------------
// Backward

ParamVector Tape::backward() const {
  const Var out = output();
  if (!evaluated()) throw UsageError("backward called before forward");
  if (nodes_[out.id].value.size() != 1) {
    throw StructuralError(describe(out.id) + ": backward() without seeds needs a scalar output");
  }
  const double one = 1.0;
  const Seed seed{out, std::span<const double>(&one, 1)};
  return backward(std::span<const Seed>(&seed, 1));
}

ParamVector Tape::backward(std::span<const Seed> seeds) const {
  if (!evaluated()) throw UsageError("backward called before forward");
  ParamVector grad(evaluated_layout_);
  std::vector<std::vector<double>> adj(nodes_.size());
  std::uint32_t top = 0;
  for (const Seed& s : seeds) {
    check_owned(s.node);
    const auto& v = nodes_[s.node.id].value;
    if (s.adjoint.size() != v.size()) {
      throw StructuralError(describe(s.node.id) + ": seed length " + std::to_string(s.adjoint.size()) +
                            " does not match value size " + std::to_string(v.size()));
    }
    auto& a = adj[s.node.id];
    if (a.empty()) a.assign(v.size(), 0.0);
    for (std::size_t i = 0; i < v.size(); ++i) a[i] += s.adjoint[i];
    top = std::max(top, s.node.id);
  }

  // Operands without parameters below them accumulate into scratch space
  // that is never read.
  std::vector<double> scratch;
  auto slot = [&](std::uint32_t id) -> std::vector<double>& {
    if (!nodes_[id].grad) {
      scratch.resize(std::max(scratch.size(), nodes_[id].value.size()));
      return scratch;
    }
    auto& a = adj[id];
    if (a.empty()) a.assign(nodes_[id].value.size(), 0.0);
    return a;
  };

  for (std::int64_t sid = top; sid >= 0; --sid) {
    const auto id = static_cast<std::uint32_t>(sid);
    if (adj[id].empty() || !nodes_[id].grad) continue;
    const Node& n = nodes_[id];
    const std::vector<double>& g = adj[id];
    const std::vector<double>& y = n.value.data;

    switch (n.op) {
      case Op::param: {
        auto dst = grad.values().subspan(n.param_offset, g.size());
        for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
        break;
      }
      case Op::input:
      case Op::constant:
        break;
      case Op::add:
      case Op::sub:
      case Op::mul: {
        const auto& av = nodes_[n.a].value.data;
        const auto& bv = nodes_[n.b].value.data;
        const std::size_t sa = av.size() == 1 && g.size() != 1 ? 0 : 1;
        const std::size_t sb = bv.size() == 1 && g.size() != 1 ? 0 : 1;
        if (nodes_[n.a].grad) {
          auto& ga = slot(n.a);
          for (std::size_t i = 0; i < g.size(); ++i) ga[i * sa] += n.op == Op::mul ? g[i] * bv[i * sb] : g[i];
        }
        if (nodes_[n.b].grad) {
          auto& gb = slot(n.b);
          const double sign = n.op == Op::sub ? -1.0 : 1.0;
          for (std::size_t i = 0; i < g.size(); ++i) gb[i * sb] += n.op == Op::mul ? g[i] * av[i * sa] : sign * g[i];
        }
        break;
      }
      case Op::matmul: {
        const RealArray& A = nodes_[n.a].value;
        const RealArray& B = nodes_[n.b].value;
        const std::size_t rows = A.rows(), inner = A.cols(), cols = B.cols();
        const bool need_a = nodes_[n.a].grad;
        const bool need_b = nodes_[n.b].grad;
        auto& ga = slot(n.a);
        auto& gb = slot(n.b);
        for (std::size_t i = 0; i < rows; ++i) {
          const double* grow = g.data() + i * cols;
          for (std::size_t k = 0; k < inner; ++k) {
            if (need_a) {
              const double* brow = B.data.data() + k * cols;
              double s = 0.0;
              for (std::size_t j = 0; j < cols; ++j) s += grow[j] * brow[j];
              ga[i * inner + k] += s;
            }
            if (!need_b) continue;
            const double aik = A.data[i * inner + k];
            if (aik == 0.0) continue;
            double* gbrow = gb.data() + k * cols;
            for (std::size_t j = 0; j < cols; ++j) gbrow[j] += aik * grow[j];
          }
        }
        break;
      }
      case Op::add_row: {
        const std::size_t cols = nodes_[n.b].value.size();
        if (nodes_[n.a].grad) {
          auto& ga = slot(n.a);
          for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
        }
        if (nodes_[n.b].grad) {
          auto& gb = slot(n.b);
          for (std::size_t r = 0; r < g.size(); r += cols) {
            for (std::size_t j = 0; j < cols; ++j) gb[j] += g[r + j];
          }
        }
        break;
      }
      case Op::broadcast_rows: {
        auto& ga = slot(n.a);
        const std::size_t cols = ga.size();
        for (std::size_t i = 0; i < g.size(); ++i) ga[i % cols] += g[i];
        break;
      }
      case Op::sum: {
        auto& ga = slot(n.a);
        for (double& v : ga) v += g[0];
        break;
      }
      case Op::sum_rows: {
        auto& ga = slot(n.a);
        const std::size_t cols = nodes_[n.a].value.cols();
        for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[i / cols];
        break;
      }
      case Op::log_sum_exp: {
        auto& ga = slot(n.a);
        const auto& av = nodes_[n.a].value.data;
        if (!std::isfinite(y[0])) break;
        for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[0] * std::exp(av[i] - y[0]);
        break;
      }
      case Op::index:
        slot(n.a)[n.i0] += g[0];
        break;
      case Op::slice_cols: {
        auto& ga = slot(n.a);
        const std::size_t cols = nodes_[n.a].value.cols();
        const std::size_t width = n.i1 - n.i0;
        for (std::size_t i = 0; i < g.size(); ++i) ga[(i / width) * cols + n.i0 + i % width] += g[i];
        break;
      }
      default: {
        auto& ga = slot(n.a);
        const auto& av = nodes_[n.a].value.data;
        for (std::size_t i = 0; i < g.size(); ++i) {
          double d = 0.0;
          switch (n.op) {
            case Op::neg: d = -1.0; break;
            case Op::scale: d = n.scalar; break;
            case Op::shift: d = 1.0; break;
            case Op::exp: d = y[i]; break;
            case Op::log: d = 1.0 / av[i]; break;
            case Op::sigmoid: d = y[i] * (1.0 - y[i]); break;
            case Op::tanh: d = 1.0 - y[i] * y[i]; break;
            case Op::log_sigmoid: d = sigmoid_value(-av[i]); break;
            case Op::softplus: d = sigmoid_value(av[i]); break;
            case Op::square: d = 2.0 * av[i]; break;
            default: break;
          }
          ga[i] += g[i] * d;
        }
        break;
      }
    }
  }
  return grad;
}

double forward(Tape& tape, const ParamVector& params, const Inputs& inputs) { return tape.forward(params, inputs); }

ParamVector backward(const Tape& tape, const ParamVector& params) {
  ParamVector g = tape.backward();
  if (g.size() != params.size()) throw StructuralError("tape was evaluated with a different parameter layout");
  return g;
}

std::vector<double> finite_difference_gradient(const std::function<double(const ParamVector&)>& eval,
                                               const ParamVector& params, double h) {
  if (!(h > 0.0)) throw DomainError("finite-difference step must be positive");
  std::vector<double> grad(params.size());
  ParamVector probe = params;
  for (std::size_t d = 0; d < params.size(); ++d) {
    const double orig = params[d];
    probe[d] = orig + h;
    const double up = eval(probe);
    probe[d] = orig - h;
    const double down = eval(probe);
    probe[d] = orig;
    if (!std::isfinite(up) || !std::isfinite(down)) {
      throw NumericalError("non-finite evaluation at coordinate " + std::to_string(d));
    }
    grad[d] = (up - down) / (2.0 * h);
  }
  return grad;
}

}  // namespace tvo

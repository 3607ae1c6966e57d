#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace tvo {

using Shape = std::vector<std::size_t>;

std::size_t shape_size(const Shape& shape);
std::string shape_string(const Shape& shape);

/// Dense row-major array of doubles. Rank 0 is a scalar.
struct RealArray {
  Shape shape;
  std::vector<double> data;

  RealArray() = default;
  RealArray(Shape s, std::vector<double> d);

  static RealArray scalar(double v);
  static RealArray vector(std::vector<double> v);
  static RealArray matrix(std::size_t rows, std::size_t cols, std::vector<double> v);
  static RealArray zeros(Shape s);

  std::size_t size() const noexcept { return data.size(); }
  std::size_t rank() const noexcept { return shape.size(); }
  std::size_t rows() const { return shape.at(0); }
  std::size_t cols() const { return shape.at(1); }
};

/// Named slice of the flat parameter vector.
struct Segment {
  std::string name;
  std::size_t offset = 0;
  Shape shape;

  std::size_t size() const { return shape_size(shape); }
};

/// Partition of [0, D) into uniquely named, disjoint segments.
class ParamLayout {
 public:
  /// Appends a segment and returns its offset. Throws StructuralError on a
  /// duplicate name.
  std::size_t add(std::string name, Shape shape);

  const Segment* find(std::string_view name) const;
  const Segment& segment(std::string_view name) const;
  std::span<const Segment> segments() const noexcept { return segments_; }
  std::size_t size() const noexcept { return size_; }

 private:
  std::vector<Segment> segments_;
  std::size_t size_ = 0;
};

/// Generative-model parameters are prefixed "theta/", inference-network
/// parameters "phi/".
bool is_theta_segment(const Segment& segment);
bool is_phi_segment(const Segment& segment);

/// Flat parameter (or gradient) vector laid out by a shared ParamLayout.
class ParamVector {
 public:
  ParamVector() = default;
  explicit ParamVector(std::shared_ptr<const ParamLayout> layout);
  ParamVector(std::shared_ptr<const ParamLayout> layout, std::vector<double> values);

  const ParamLayout& layout() const { return *layout_; }
  const std::shared_ptr<const ParamLayout>& layout_ptr() const noexcept { return layout_; }
  std::size_t size() const noexcept { return values_.size(); }

  std::span<double> values() noexcept { return values_; }
  std::span<const double> values() const noexcept { return values_; }
  double& operator[](std::size_t i) { return values_[i]; }
  double operator[](std::size_t i) const { return values_[i]; }

  std::span<double> segment(std::string_view name);
  std::span<const double> segment(std::string_view name) const;
  RealArray array(std::string_view name) const;

 private:
  std::shared_ptr<const ParamLayout> layout_;
  std::vector<double> values_;
};

class Tape;

/// Handle to a node on a Tape.
struct Var {
  Tape* tape = nullptr;
  std::uint32_t id = 0;
};

using Inputs = std::map<std::string, RealArray, std::less<>>;

/// Adjoint seed for a (possibly non-scalar) node.
struct Seed {
  Var node;
  std::span<const double> adjoint;
};

/// Reverse-mode tape. Operations are recorded first and evaluated by
/// forward(); shapes are checked at evaluation time, so the same recording
/// can be re-run with different parameters or inputs.
///
/// Binary elementwise ops accept equal shapes or a rank-0 operand, which is
/// broadcast. A tape is not thread-safe; use one tape per thread.
class Tape {
 public:
  enum class Op : std::uint8_t {
    param,
    input,
    constant,
    add,
    sub,
    mul,
    neg,
    scale,
    shift,
    matmul,
    add_row,
    broadcast_rows,
    sum,
    sum_rows,
    exp,
    log,
    sigmoid,
    tanh,
    log_sigmoid,
    softplus,
    square,
    log_sum_exp,
    index,
    slice_cols,
  };

  Var param(std::string name);
  Var input(std::string name);
  Var constant(RealArray value);
  Var constant(double value);

  Var add(Var a, Var b);
  Var sub(Var a, Var b);
  Var mul(Var a, Var b);
  Var neg(Var a);
  Var scale(Var a, double factor);
  Var shift(Var a, double offset);
  /// (n x k) * (k x m).
  Var matmul(Var a, Var b);
  /// Adds a length-m vector to every row of an (n x m) matrix.
  Var add_row(Var matrix, Var row);
  /// Stacks a length-m vector (or 1 x m matrix) into an (rows x m) matrix.
  Var broadcast_rows(Var row, std::size_t rows);
  Var sum(Var a);
  /// (n x m) -> length n.
  Var sum_rows(Var a);
  Var exp(Var a);
  Var log(Var a);
  Var sigmoid(Var a);
  Var tanh(Var a);
  Var log_sigmoid(Var a);
  Var softplus(Var a);
  Var square(Var a);
  Var log_sum_exp(Var a);
  /// Element i of a flat array, as a scalar.
  Var index(Var a, std::size_t i);
  /// Columns [begin, end) of a matrix.
  Var slice_cols(Var a, std::size_t begin, std::size_t end);

  void set_output(Var v);
  Var output() const;

  /// Evaluates every node. Throws StructuralError naming the first node
  /// whose operand shapes do not line up, and UsageError when a parameter or
  /// input is not supplied.
  void evaluate(const ParamVector& params, const Inputs& inputs = {});

  /// evaluate() and return the (scalar) output value.
  double forward(const ParamVector& params, const Inputs& inputs = {});

  const RealArray& value(Var v) const;
  double scalar(Var v) const;

  /// Gradient of the scalar output w.r.t. every parameter.
  ParamVector backward() const;
  /// Gradient of sum_i <seed_i.adjoint, value(seed_i.node)>.
  ParamVector backward(std::span<const Seed> seeds) const;

  std::size_t size() const noexcept { return nodes_.size(); }
  bool evaluated() const noexcept { return evaluated_count_ == nodes_.size() && !nodes_.empty(); }

 private:
  struct Node {
    Op op;
    std::uint32_t a = 0;
    std::uint32_t b = 0;
    double scalar = 0.0;
    std::size_t i0 = 0;
    std::size_t i1 = 0;
    std::string name;
    std::size_t param_offset = 0;
    // True when a parameter lies below this node, i.e. it carries a gradient.
    bool grad = false;
    RealArray value;
  };

  Var push(Node node);
  Var unary(Op op, Var a);
  Var binary(Op op, Var a, Var b);
  void check_owned(Var v) const;
  void eval_node(std::uint32_t id, const ParamVector& params, const Inputs& inputs);
  std::string describe(std::uint32_t id) const;

  std::vector<Node> nodes_;
  std::shared_ptr<const ParamLayout> evaluated_layout_;
  std::size_t evaluated_count_ = 0;
  bool has_output_ = false;
  std::uint32_t output_ = 0;
};

inline Var operator+(Var a, Var b) { return a.tape->add(a, b); }
inline Var operator-(Var a, Var b) { return a.tape->sub(a, b); }
inline Var operator*(Var a, Var b) { return a.tape->mul(a, b); }
inline Var operator-(Var a) { return a.tape->neg(a); }
inline Var operator*(double c, Var a) { return a.tape->scale(a, c); }
inline Var operator*(Var a, double c) { return a.tape->scale(a, c); }
inline Var operator+(Var a, double c) { return a.tape->shift(a, c); }
inline Var operator+(double c, Var a) { return a.tape->shift(a, c); }
inline Var operator-(Var a, double c) { return a.tape->shift(a, -c); }

/// Free-function forms of the tape protocol.
double forward(Tape& tape, const ParamVector& params, const Inputs& inputs = {});
ParamVector backward(const Tape& tape, const ParamVector& params);

/// Central differences (f(p + h e_d) - f(p - h e_d)) / 2h for every
/// coordinate d. Throws NumericalError naming the coordinate when an
/// evaluation is not finite.
std::vector<double> finite_difference_gradient(const std::function<double(const ParamVector&)>& eval,
                                               const ParamVector& params, double h);

}  // namespace tvo

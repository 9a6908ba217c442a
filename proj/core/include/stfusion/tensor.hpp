#pragma once

// Dense 64-bit tensors plus reverse-mode automatic differentiation on an
// explicit tape.
//
// The op set is intentionally small: exactly the primitives the towers and
// losses need (matmul, elementwise arithmetic, row softmax, GELU, exp/log,
// transpose, row concat/slice/gather, sum/mean reductions). There is no
// broadcasting engine; row/column broadcasts are composed from matmul with
// constant ones-matrices, which keeps every backward rule trivial.
//
// Usage pattern: build a Tape per forward pass, register parameters and
// constants as leaves, chain ops, call backward(loss) once, then read
// gradients back off the leaves. Nodes are stored in creation order, which
// is a topological order by construction, so the backward sweep visits each
// node exactly once in reverse and accumulates gradients additively across
// fan-out.

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "stfusion/errors.hpp"

namespace stf {

using Shape = std::vector<int>;

std::string shape_str(const Shape& s);
int64_t shape_numel(const Shape& s);

struct Tensor {
  Shape shape;
  std::vector<double> values;
  std::vector<double> grad;  // empty means "no gradient stored"
  bool requires_grad = false;

  Tensor() = default;
  explicit Tensor(Shape s);
  Tensor(Shape s, std::vector<double> v);

  static Tensor zeros(Shape s) { return Tensor(std::move(s)); }
  static Tensor full(Shape s, double x);
  static Tensor row(std::vector<double> v);  // [1, n]
  static Tensor matrix(int rows, int cols, std::vector<double> v);
  static Tensor identity(int n);

  int rank() const { return static_cast<int>(shape.size()); }
  int dim(int i) const;
  int64_t size() const { return static_cast<int64_t>(values.size()); }

  // Rank-2 accessors; throw ShapeError on other ranks.
  int rows() const;
  int cols() const;
  double& at(int r, int c);
  double at(int r, int c) const;

  bool all_finite() const;
  void ensure_grad();  // allocate zero gradient storage if absent
  void zero_grad();
};

// Handle into a Tape. Only meaningful for the tape that produced it.
struct Var {
  int id = -1;
  bool valid() const { return id >= 0; }
};

class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Leaves. input() copies the tensor; gradients are read back via grad().
  Var input(Tensor t, bool requires_grad = false);
  Var constant(Tensor t) { return input(std::move(t), false); }
  Var ones(int rows, int cols);

  // Primitives. Shape requirements are checked eagerly and violations throw
  // ShapeError naming both shapes.
  Var matmul(Var a, Var b);
  Var add(Var a, Var b);
  Var sub(Var a, Var b);
  Var mul(Var a, Var b);
  Var scale(Var a, double s);
  Var add_scalar(Var a, double s);
  Var exp(Var a);
  Var log(Var a);
  Var gelu(Var a);  // tanh approximation
  Var softmax_rows(Var a);
  Var transpose(Var a);
  Var concat_rows(Var a, Var b);
  Var slice_rows(Var a, int begin, int end);
  Var gather_rows(Var table, std::vector<int> ids);
  Var sum_all(Var a);    // -> [1,1]
  Var mean_rows(Var a);  // [n,d] -> [n,1]

  const Tensor& value(Var v) const;
  double scalar(Var v) const;  // value of a single-element tensor
  bool requires_grad(Var v) const;

  // Reverse sweep from a scalar loss. May be called once per tape. After it
  // returns, grad(v) is the total derivative for every requires_grad node
  // reachable from the loss.
  void backward(Var loss);
  std::span<const double> grad(Var v) const;

  int size() const { return static_cast<int>(nodes_.size()); }

 private:
  struct Node {
    Tensor t;
    const char* op;
    std::vector<int> inputs;
    std::function<void(Tape&, int)> back;
  };

  int push(Tensor t, const char* op, std::vector<int> inputs,
           std::function<void(Tape&, int)> back);
  const Node& node(Var v) const;
  // Accumulate into an input's gradient; no-op when it does not require grad.
  void add_grad(int id, const std::vector<double>& delta);
  std::vector<double>* grad_buf(int id);

  std::vector<Node> nodes_;
  bool backward_done_ = false;
};

// Composed helpers (no new backward rules).
Var broadcast_rows(Tape& tp, Var rowvec, int n);     // [1,d] -> [n,d]
Var linear(Tape& tp, Var x, Var w, Var b);           // x*w + b per row
Var l2_normalize_rows(Tape& tp, Var x);              // each row to unit norm
Var mean_over_rows(Tape& tp, Var x);                 // [n,d] -> [1,d]

// Central-difference gradient verification.
//
// eval(false) must return the loss; eval(true) must additionally leave the
// analytic gradient in each listed tensor's grad field. eval must be
// deterministic: it is called twice up front and a bitwise value mismatch is
// a ContractError, as is eps outside [1e-6, 1e-3]. The returned error is
//   max over coordinates of |analytic - numeric| / (|analytic| + |numeric| + 1e-12)
struct GradCheckReport {
  double max_rel_error = 0.0;
  std::string worst_name;
  int worst_coord = -1;
  double analytic = 0.0;
  double numeric = 0.0;
};

GradCheckReport grad_check(
    const std::function<double(bool)>& eval,
    std::span<const std::pair<std::string, Tensor*>> params, double eps);

}  // namespace stf

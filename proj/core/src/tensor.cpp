#include "stfusion/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace stf {

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) os << ",";
    os << s[i];
  }
  os << "]";
  return os.str();
}

int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int d : s) n *= d;
  return n;
}

namespace {

void check_shape_valid(const Shape& s) {
  if (s.empty()) throw ShapeError("tensor shape must have at least one dimension");
  for (int d : s) {
    if (d <= 0) throw ShapeError("tensor dimensions must be positive, got " + shape_str(s));
  }
}

}  // namespace

Tensor::Tensor(Shape s) {
  check_shape_valid(s);
  shape = std::move(s);
  values.assign(static_cast<size_t>(shape_numel(shape)), 0.0);
}

Tensor::Tensor(Shape s, std::vector<double> v) {
  check_shape_valid(s);
  if (static_cast<int64_t>(v.size()) != shape_numel(s)) {
    throw ShapeError("value count " + std::to_string(v.size()) +
                     " does not match shape " + shape_str(s));
  }
  shape = std::move(s);
  values = std::move(v);
}

Tensor Tensor::full(Shape s, double x) {
  Tensor t(std::move(s));
  std::fill(t.values.begin(), t.values.end(), x);
  return t;
}

Tensor Tensor::row(std::vector<double> v) {
  int n = static_cast<int>(v.size());
  return Tensor({1, n}, std::move(v));
}

Tensor Tensor::matrix(int rows, int cols, std::vector<double> v) {
  return Tensor({rows, cols}, std::move(v));
}

Tensor Tensor::identity(int n) {
  Tensor t({n, n});
  for (int i = 0; i < n; ++i) t.values[static_cast<size_t>(i) * n + i] = 1.0;
  return t;
}

int Tensor::dim(int i) const {
  if (i < 0 || i >= rank()) throw ShapeError("dimension index out of range");
  return shape[static_cast<size_t>(i)];
}

int Tensor::rows() const {
  if (rank() != 2) throw ShapeError("rows() needs rank 2, shape is " + shape_str(shape));
  return shape[0];
}

int Tensor::cols() const {
  if (rank() != 2) throw ShapeError("cols() needs rank 2, shape is " + shape_str(shape));
  return shape[1];
}

double& Tensor::at(int r, int c) {
  return values[static_cast<size_t>(r) * cols() + c];
}

double Tensor::at(int r, int c) const {
  return values[static_cast<size_t>(r) * cols() + c];
}

bool Tensor::all_finite() const {
  for (double v : values) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

void Tensor::ensure_grad() {
  if (grad.size() != values.size()) grad.assign(values.size(), 0.0);
}

void Tensor::zero_grad() {
  std::fill(grad.begin(), grad.end(), 0.0);
}

// ---------------------------------------------------------------------------
// Tape

int Tape::push(Tensor t, const char* op, std::vector<int> inputs,
               std::function<void(Tape&, int)> back) {
  if (!t.all_finite()) {
    throw NumericError(std::string("non-finite value produced by op '") + op + "'");
  }
  bool rg = false;
  for (int id : inputs) rg = rg || nodes_[static_cast<size_t>(id)].t.requires_grad;
  t.requires_grad = rg;
  nodes_.push_back(Node{std::move(t), op, std::move(inputs), std::move(back)});
  return static_cast<int>(nodes_.size()) - 1;
}

const Tape::Node& Tape::node(Var v) const {
  if (v.id < 0 || v.id >= static_cast<int>(nodes_.size())) {
    throw ContractError("Var does not belong to this tape");
  }
  return nodes_[static_cast<size_t>(v.id)];
}

std::vector<double>* Tape::grad_buf(int id) {
  Node& n = nodes_[static_cast<size_t>(id)];
  if (!n.t.requires_grad) return nullptr;
  n.t.ensure_grad();
  return &n.t.grad;
}

void Tape::add_grad(int id, const std::vector<double>& delta) {
  std::vector<double>* g = grad_buf(id);
  if (!g) return;
  for (size_t i = 0; i < g->size(); ++i) (*g)[i] += delta[i];
}

Var Tape::input(Tensor t, bool requires_grad) {
  if (!t.all_finite()) throw NumericError("non-finite value in tape input");
  t.requires_grad = requires_grad;
  t.grad.clear();
  nodes_.push_back(Node{std::move(t), "input", {}, nullptr});
  return Var{static_cast<int>(nodes_.size()) - 1};
}

Var Tape::ones(int rows, int cols) {
  return constant(Tensor::full({rows, cols}, 1.0));
}

const Tensor& Tape::value(Var v) const { return node(v).t; }

double Tape::scalar(Var v) const {
  const Tensor& t = node(v).t;
  if (t.size() != 1) throw ShapeError("scalar() needs a single-element tensor, shape is " + shape_str(t.shape));
  return t.values[0];
}

bool Tape::requires_grad(Var v) const { return node(v).t.requires_grad; }

std::span<const double> Tape::grad(Var v) const {
  const Tensor& t = node(v).t;
  return {t.grad.data(), t.grad.size()};
}

namespace {

void require_rank2(const Tensor& t, const char* op) {
  if (t.rank() != 2) {
    throw ShapeError(std::string(op) + " needs rank-2 input, shape is " + shape_str(t.shape));
  }
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape != b.shape) {
    throw ShapeError(std::string(op) + " shape mismatch: " + shape_str(a.shape) +
                     " vs " + shape_str(b.shape));
  }
}

}  // namespace

Var Tape::matmul(Var a, Var b) {
  const Tensor& ta = value(a);
  const Tensor& tb = value(b);
  require_rank2(ta, "matmul");
  require_rank2(tb, "matmul");
  if (ta.cols() != tb.rows()) {
    throw ShapeError("matmul inner dimensions disagree: " + shape_str(ta.shape) +
                     " vs " + shape_str(tb.shape));
  }
  const int m = ta.rows(), k = ta.cols(), n = tb.cols();
  Tensor out({m, n});
  for (int i = 0; i < m; ++i) {
    const double* arow = &ta.values[static_cast<size_t>(i) * k];
    double* orow = &out.values[static_cast<size_t>(i) * n];
    for (int p = 0; p < k; ++p) {
      const double av = arow[p];
      if (av == 0.0) continue;
      const double* brow = &tb.values[static_cast<size_t>(p) * n];
      for (int j = 0; j < n; ++j) orow[j] += av * brow[j];
    }
  }
  int id = push(std::move(out), "matmul", {a.id, b.id}, [a, b, m, k, n](Tape& tp, int self) {
    const std::vector<double>& g = tp.nodes_[static_cast<size_t>(self)].t.grad;
    const Tensor& av = tp.value(a);
    const Tensor& bv = tp.value(b);
    if (std::vector<double>* ga = tp.grad_buf(a.id)) {
      // dA = dC * B^T
      for (int i = 0; i < m; ++i) {
        for (int p = 0; p < k; ++p) {
          double acc = 0.0;
          const double* grow = &g[static_cast<size_t>(i) * n];
          const double* brow = &bv.values[static_cast<size_t>(p) * n];
          for (int j = 0; j < n; ++j) acc += grow[j] * brow[j];
          (*ga)[static_cast<size_t>(i) * k + p] += acc;
        }
      }
    }
    if (std::vector<double>* gb = tp.grad_buf(b.id)) {
      // dB = A^T * dC
      for (int i = 0; i < m; ++i) {
        const double* arow = &av.values[static_cast<size_t>(i) * k];
        const double* grow = &g[static_cast<size_t>(i) * n];
        for (int p = 0; p < k; ++p) {
          const double a_ip = arow[p];
          if (a_ip == 0.0) continue;
          double* gbrow = &(*gb)[static_cast<size_t>(p) * n];
          for (int j = 0; j < n; ++j) gbrow[j] += a_ip * grow[j];
        }
      }
    }
  });
  return Var{id};
}

Var Tape::add(Var a, Var b) {
  const Tensor& ta = value(a);
  const Tensor& tb = value(b);
  require_same_shape(ta, tb, "add");
  Tensor out(ta.shape);
  for (size_t i = 0; i < out.values.size(); ++i) out.values[i] = ta.values[i] + tb.values[i];
  int id = push(std::move(out), "add", {a.id, b.id}, [a, b](Tape& tp, int self) {
    const std::vector<double>& g = tp.nodes_[static_cast<size_t>(self)].t.grad;
    tp.add_grad(a.id, g);
    tp.add_grad(b.id, g);
  });
  return Var{id};
}

Var Tape::sub(Var a, Var b) {
  const Tensor& ta = value(a);
  const Tensor& tb = value(b);
  require_same_shape(ta, tb, "sub");
  Tensor out(ta.shape);
  for (size_t i = 0; i < out.values.size(); ++i) out.values[i] = ta.values[i] - tb.values[i];
  int id = push(std::move(out), "sub", {a.id, b.id}, [a, b](Tape& tp, int self) {
    const std::vector<double>& g = tp.nodes_[static_cast<size_t>(self)].t.grad;
    tp.add_grad(a.id, g);
    if (std::vector<double>* gb = tp.grad_buf(b.id)) {
      for (size_t i = 0; i < gb->size(); ++i) (*gb)[i] -= g[i];
    }
  });
  return Var{id};
}

Var Tape::mul(Var a, Var b) {
  const Tensor& ta = value(a);
  const Tensor& tb = value(b);
  require_same_shape(ta, tb, "mul");
  Tensor out(ta.shape);
  for (size_t i = 0; i < out.values.size(); ++i) out.values[i] = ta.values[i] * tb.values[i];
  int id = push(std::move(out), "mul", {a.id, b.id}, [a, b](Tape& tp, int self) {
    const std::vector<double>& g = tp.nodes_[static_cast<size_t>(self)].t.grad;
    const Tensor& av = tp.value(a);
    const Tensor& bv = tp.value(b);
    if (std::vector<double>* ga = tp.grad_buf(a.id)) {
      for (size_t i = 0; i < ga->size(); ++i) (*ga)[i] += g[i] * bv.values[i];
    }
    if (std::vector<double>* gb = tp.grad_buf(b.id)) {
      for (size_t i = 0; i < gb->size(); ++i) (*gb)[i] += g[i] * av.values[i];
    }
  });
  return Var{id};
}

Var Tape::scale(Var a, double s) {
  const Tensor& ta = value(a);
  Tensor out(ta.shape);
  for (size_t i = 0; i < out.values.size(); ++i) out.values[i] = ta.values[i] * s;
  int id = push(std::move(out), "scale", {a.id}, [a, s](Tape& tp, int self) {
    const std::vector<double>& g = tp.nodes_[static_cast<size_t>(self)].t.grad;
    if (std::vector<double>* ga = tp.grad_buf(a.id)) {
      for (size_t i = 0; i < ga->size(); ++i) (*ga)[i] += g[i] * s;
    }
  });
  return Var{id};
}

Var Tape::add_scalar(Var a, double s) {
  const Tensor& ta = value(a);
  Tensor out(ta.shape);
  for (size_t i = 0; i < out.values.size(); ++i) out.values[i] = ta.values[i] + s;
  int id = push(std::move(out), "add_scalar", {a.id}, [a](Tape& tp, int self) {
    const std::vector<double>& g = tp.nodes_[static_cast<size_t>(self)].t.grad;
    tp.add_grad(a.id, g);
  });
  return Var{id};
}

Var Tape::exp(Var a) {
  const Tensor& ta = value(a);
  Tensor out(ta.shape);
  for (size_t i = 0; i < out.values.size(); ++i) out.values[i] = std::exp(ta.values[i]);
  int id = push(std::move(out), "exp", {a.id}, [a](Tape& tp, int self) {
    const Node& n = tp.nodes_[static_cast<size_t>(self)];
    if (std::vector<double>* ga = tp.grad_buf(a.id)) {
      for (size_t i = 0; i < ga->size(); ++i) (*ga)[i] += n.t.grad[i] * n.t.values[i];
    }
  });
  return Var{id};
}

Var Tape::log(Var a) {
  const Tensor& ta = value(a);
  Tensor out(ta.shape);
  for (size_t i = 0; i < out.values.size(); ++i) out.values[i] = std::log(ta.values[i]);
  int id = push(std::move(out), "log", {a.id}, [a](Tape& tp, int self) {
    const std::vector<double>& g = tp.nodes_[static_cast<size_t>(self)].t.grad;
    const Tensor& av = tp.value(a);
    if (std::vector<double>* ga = tp.grad_buf(a.id)) {
      for (size_t i = 0; i < ga->size(); ++i) (*ga)[i] += g[i] / av.values[i];
    }
  });
  return Var{id};
}

namespace {
constexpr double kGeluK0 = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluK1 = 0.044715;
}  // namespace

Var Tape::gelu(Var a) {
  const Tensor& ta = value(a);
  Tensor out(ta.shape);
  for (size_t i = 0; i < out.values.size(); ++i) {
    const double x = ta.values[i];
    const double u = kGeluK0 * (x + kGeluK1 * x * x * x);
    out.values[i] = 0.5 * x * (1.0 + std::tanh(u));
  }
  int id = push(std::move(out), "gelu", {a.id}, [a](Tape& tp, int self) {
    const std::vector<double>& g = tp.nodes_[static_cast<size_t>(self)].t.grad;
    const Tensor& av = tp.value(a);
    if (std::vector<double>* ga = tp.grad_buf(a.id)) {
      for (size_t i = 0; i < ga->size(); ++i) {
        const double x = av.values[i];
        const double u = kGeluK0 * (x + kGeluK1 * x * x * x);
        const double th = std::tanh(u);
        const double du = kGeluK0 * (1.0 + 3.0 * kGeluK1 * x * x);
        const double d = 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du;
        (*ga)[i] += g[i] * d;
      }
    }
  });
  return Var{id};
}

Var Tape::softmax_rows(Var a) {
  const Tensor& ta = value(a);
  require_rank2(ta, "softmax_rows");
  const int n = ta.rows(), d = ta.cols();
  Tensor out({n, d});
  for (int i = 0; i < n; ++i) {
    const double* x = &ta.values[static_cast<size_t>(i) * d];
    double* y = &out.values[static_cast<size_t>(i) * d];
    double m = x[0];
    for (int j = 1; j < d; ++j) m = std::max(m, x[j]);
    double s = 0.0;
    for (int j = 0; j < d; ++j) {
      y[j] = std::exp(x[j] - m);
      s += y[j];
    }
    for (int j = 0; j < d; ++j) y[j] /= s;
  }
  int id = push(std::move(out), "softmax_rows", {a.id}, [a, n, d](Tape& tp, int self) {
    const Node& node = tp.nodes_[static_cast<size_t>(self)];
    if (std::vector<double>* ga = tp.grad_buf(a.id)) {
      for (int i = 0; i < n; ++i) {
        const double* y = &node.t.values[static_cast<size_t>(i) * d];
        const double* g = &node.t.grad[static_cast<size_t>(i) * d];
        double dot = 0.0;
        for (int j = 0; j < d; ++j) dot += g[j] * y[j];
        double* out = &(*ga)[static_cast<size_t>(i) * d];
        for (int j = 0; j < d; ++j) out[j] += y[j] * (g[j] - dot);
      }
    }
  });
  return Var{id};
}

Var Tape::transpose(Var a) {
  const Tensor& ta = value(a);
  require_rank2(ta, "transpose");
  const int r = ta.rows(), c = ta.cols();
  Tensor out({c, r});
  for (int i = 0; i < r; ++i) {
    for (int j = 0; j < c; ++j) out.values[static_cast<size_t>(j) * r + i] = ta.values[static_cast<size_t>(i) * c + j];
  }
  int id = push(std::move(out), "transpose", {a.id}, [a, r, c](Tape& tp, int self) {
    const std::vector<double>& g = tp.nodes_[static_cast<size_t>(self)].t.grad;
    if (std::vector<double>* ga = tp.grad_buf(a.id)) {
      for (int i = 0; i < r; ++i) {
        for (int j = 0; j < c; ++j) {
          (*ga)[static_cast<size_t>(i) * c + j] += g[static_cast<size_t>(j) * r + i];
        }
      }
    }
  });
  return Var{id};
}

Var Tape::concat_rows(Var a, Var b) {
  const Tensor& ta = value(a);
  const Tensor& tb = value(b);
  require_rank2(ta, "concat_rows");
  require_rank2(tb, "concat_rows");
  if (ta.cols() != tb.cols()) {
    throw ShapeError("concat_rows column mismatch: " + shape_str(ta.shape) + " vs " +
                     shape_str(tb.shape));
  }
  const int ra = ta.rows(), rb = tb.rows(), c = ta.cols();
  Tensor out({ra + rb, c});
  std::copy(ta.values.begin(), ta.values.end(), out.values.begin());
  std::copy(tb.values.begin(), tb.values.end(), out.values.begin() + static_cast<int64_t>(ra) * c);
  int id = push(std::move(out), "concat_rows", {a.id, b.id}, [a, b, ra, rb, c](Tape& tp, int self) {
    const std::vector<double>& g = tp.nodes_[static_cast<size_t>(self)].t.grad;
    if (std::vector<double>* ga = tp.grad_buf(a.id)) {
      for (size_t i = 0; i < static_cast<size_t>(ra) * c; ++i) (*ga)[i] += g[i];
    }
    if (std::vector<double>* gb = tp.grad_buf(b.id)) {
      const size_t off = static_cast<size_t>(ra) * c;
      for (size_t i = 0; i < static_cast<size_t>(rb) * c; ++i) (*gb)[i] += g[off + i];
    }
  });
  return Var{id};
}

Var Tape::slice_rows(Var a, int begin, int end) {
  const Tensor& ta = value(a);
  require_rank2(ta, "slice_rows");
  if (begin < 0 || end <= begin || end > ta.rows()) {
    throw ShapeError("slice_rows range [" + std::to_string(begin) + "," + std::to_string(end) +
                     ") invalid for shape " + shape_str(ta.shape));
  }
  const int c = ta.cols();
  Tensor out({end - begin, c});
  std::copy(ta.values.begin() + static_cast<int64_t>(begin) * c,
            ta.values.begin() + static_cast<int64_t>(end) * c, out.values.begin());
  int id = push(std::move(out), "slice_rows", {a.id}, [a, begin, end, c](Tape& tp, int self) {
    const std::vector<double>& g = tp.nodes_[static_cast<size_t>(self)].t.grad;
    if (std::vector<double>* ga = tp.grad_buf(a.id)) {
      const size_t off = static_cast<size_t>(begin) * c;
      for (size_t i = 0; i < static_cast<size_t>(end - begin) * c; ++i) (*ga)[off + i] += g[i];
    }
  });
  return Var{id};
}

Var Tape::gather_rows(Var table, std::vector<int> ids) {
  const Tensor& tt = value(table);
  require_rank2(tt, "gather_rows");
  if (ids.empty()) throw ContractError("gather_rows needs at least one index");
  for (int i : ids) {
    if (i < 0 || i >= tt.rows()) {
      throw ShapeError("gather_rows index " + std::to_string(i) + " out of range for shape " +
                       shape_str(tt.shape));
    }
  }
  const int c = tt.cols();
  Tensor out({static_cast<int>(ids.size()), c});
  for (size_t r = 0; r < ids.size(); ++r) {
    std::copy(tt.values.begin() + static_cast<int64_t>(ids[r]) * c,
              tt.values.begin() + static_cast<int64_t>(ids[r] + 1) * c,
              out.values.begin() + static_cast<int64_t>(r) * c);
  }
  int id = push(std::move(out), "gather_rows", {table.id},
                [table, ids = std::move(ids), c](Tape& tp, int self) {
    const std::vector<double>& g = tp.nodes_[static_cast<size_t>(self)].t.grad;
    if (std::vector<double>* gt = tp.grad_buf(table.id)) {
      for (size_t r = 0; r < ids.size(); ++r) {
        double* dst = &(*gt)[static_cast<size_t>(ids[r]) * c];
        const double* src = &g[r * c];
        for (int j = 0; j < c; ++j) dst[j] += src[j];
      }
    }
  });
  return Var{id};
}

Var Tape::sum_all(Var a) {
  const Tensor& ta = value(a);
  double s = 0.0;
  for (double v : ta.values) s += v;
  Tensor out({1, 1}, {s});
  int id = push(std::move(out), "sum_all", {a.id}, [a](Tape& tp, int self) {
    const double g = tp.nodes_[static_cast<size_t>(self)].t.grad[0];
    if (std::vector<double>* ga = tp.grad_buf(a.id)) {
      for (size_t i = 0; i < ga->size(); ++i) (*ga)[i] += g;
    }
  });
  return Var{id};
}

Var Tape::mean_rows(Var a) {
  const Tensor& ta = value(a);
  require_rank2(ta, "mean_rows");
  const int n = ta.rows(), d = ta.cols();
  Tensor out({n, 1});
  for (int i = 0; i < n; ++i) {
    double s = 0.0;
    const double* row = &ta.values[static_cast<size_t>(i) * d];
    for (int j = 0; j < d; ++j) s += row[j];
    out.values[static_cast<size_t>(i)] = s / d;
  }
  int id = push(std::move(out), "mean_rows", {a.id}, [a, n, d](Tape& tp, int self) {
    const std::vector<double>& g = tp.nodes_[static_cast<size_t>(self)].t.grad;
    if (std::vector<double>* ga = tp.grad_buf(a.id)) {
      for (int i = 0; i < n; ++i) {
        const double gi = g[static_cast<size_t>(i)] / d;
        double* row = &(*ga)[static_cast<size_t>(i) * d];
        for (int j = 0; j < d; ++j) row[j] += gi;
      }
    }
  });
  return Var{id};
}

void Tape::backward(Var loss) {
  if (backward_done_) throw ContractError("backward() already ran on this tape");
  const Tensor& lt = node(loss).t;
  if (lt.size() != 1) {
    throw ContractError("backward() needs a scalar loss, shape is " + shape_str(lt.shape));
  }
  backward_done_ = true;
  if (!lt.requires_grad) return;  // no parameter feeds the loss
  {
    std::vector<double>* g = grad_buf(loss.id);
    (*g)[0] = 1.0;
  }
  for (int i = loss.id; i >= 0; --i) {
    Node& n = nodes_[static_cast<size_t>(i)];
    if (!n.back || !n.t.requires_grad || n.t.grad.empty()) continue;
    n.back(*this, i);
  }
  for (const Node& n : nodes_) {
    for (double g : n.t.grad) {
      if (!std::isfinite(g)) {
        throw NumericError(std::string("non-finite gradient at op '") + n.op + "'");
      }
    }
  }
}

// ---------------------------------------------------------------------------
// Composed helpers

Var broadcast_rows(Tape& tp, Var rowvec, int n) {
  const Tensor& t = tp.value(rowvec);
  if (t.rank() != 2 || t.rows() != 1) {
    throw ShapeError("broadcast_rows needs a [1,d] tensor, shape is " + shape_str(t.shape));
  }
  return tp.matmul(tp.ones(n, 1), rowvec);
}

Var linear(Tape& tp, Var x, Var w, Var b) {
  Var y = tp.matmul(x, w);
  return tp.add(y, broadcast_rows(tp, b, tp.value(y).rows()));
}

Var l2_normalize_rows(Tape& tp, Var x) {
  const Tensor& t = tp.value(x);
  const int d = t.cols();
  Var sq = tp.mul(x, x);
  Var norm2 = tp.scale(tp.mean_rows(sq), static_cast<double>(d));  // [n,1] row sums
  Var inv = tp.exp(tp.scale(tp.log(norm2), -0.5));                 // 1/sqrt per row
  return tp.mul(x, tp.matmul(inv, tp.ones(1, d)));
}

Var mean_over_rows(Tape& tp, Var x) {
  const Tensor& t = tp.value(x);
  const int n = t.rows();
  return tp.scale(tp.matmul(tp.ones(1, n), x), 1.0 / n);
}

// ---------------------------------------------------------------------------
// Gradient checking

GradCheckReport grad_check(
    const std::function<double(bool)>& eval,
    std::span<const std::pair<std::string, Tensor*>> params, double eps) {
  if (!(eps >= 1e-6 && eps <= 1e-3)) {
    throw ContractError("grad_check eps must lie in [1e-6, 1e-3]");
  }
  const double l0 = eval(false);
  const double l1 = eval(false);
  if (!(l0 == l1)) {
    throw ContractError("grad_check requires a deterministic function; repeated calls disagree");
  }

  for (auto& [name, t] : params) t->grad.clear();
  eval(true);
  for (auto& [name, t] : params) {
    if (t->grad.size() != t->values.size()) {
      throw ContractError("analytic gradient missing for parameter '" + name + "'");
    }
  }

  GradCheckReport rep;
  for (auto& [name, t] : params) {
    for (size_t i = 0; i < t->values.size(); ++i) {
      const double saved = t->values[i];
      t->values[i] = saved + eps;
      const double lp = eval(false);
      t->values[i] = saved - eps;
      const double lm = eval(false);
      t->values[i] = saved;
      const double numeric = (lp - lm) / (2.0 * eps);
      const double analytic = t->grad[i];
      const double rel = std::abs(analytic - numeric) /
                         (std::abs(analytic) + std::abs(numeric) + 1e-12);
      if (rel > rep.max_rel_error) {
        rep.max_rel_error = rel;
        rep.worst_name = name;
        rep.worst_coord = static_cast<int>(i);
        rep.analytic = analytic;
        rep.numeric = numeric;
      }
    }
  }
  return rep;
}

}  // namespace stf

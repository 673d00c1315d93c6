#pragma once

// Matrix-valued reverse-mode differentiation.
//
// Two evaluation contexts expose the same operation set:
//   Eval  - plain forward evaluation, Var is a Matrix;
//   Tape  - records every operation and runs an exact backward pass into a
//           flat gradient aligned with a ParamStore.
// Model code is written once as templates over the context.

#include <Eigen/Dense>
#include <concepts>
#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "dflow/engine/errors.hpp"
#include "dflow/engine/kernels.hpp"
#include "dflow/engine/param_store.hpp"

namespace dflow {

/// Location of a dense layer's parameters inside a ParamStore.
struct AffineRef {
  std::size_t w_offset = 0;
  std::size_t b_offset = 0;
  Eigen::Index rows = 0;  // outputs
  Eigen::Index cols = 0;  // inputs
  bool has_bias = true;
};

/// Plain forward evaluator.
class Eval {
 public:
  using Var = Matrix;

  explicit Eval(const ParamStore& params) : params_(&params) {}

  const ParamStore& params() const { return *params_; }
  static constexpr bool records = false;

  Var constant(Matrix m) { return m; }
  const Matrix& value(const Var& v) const { return v; }
  Var detach(const Var& v) { return v; }

  Var affine(const AffineRef& r, const Var& x) {
    return kernels::affine(params_->data(), r.w_offset, r.rows, r.cols, r.b_offset, r.has_bias, x);
  }
  /// Row vector of parameters (at `offset`, length K) times a constant K x M matrix.
  Var head(std::size_t offset, const Matrix& basis) {
    return kernels::affine(params_->data(), offset, 1, basis.rows(), 0, false, basis);
  }
  Var add(const Var& a, const Var& b) { return kernels::broadcast_binary('+', a, b); }
  Var sub(const Var& a, const Var& b) { return kernels::broadcast_binary('-', a, b); }
  Var mul(const Var& a, const Var& b) { return kernels::broadcast_binary('*', a, b); }
  Var scale(const Var& a, double s) { return a * s; }
  Var add_scalar(const Var& a, double s) { return (a.array() + s).matrix(); }
  Var scale_cols(const Var& a, const RowVector& s) { return kernels::scale_cols(a, s); }
  Var unary(UnaryOp op, const Var& a) { return kernels::unary(op, a); }
  Var pow(const Var& a, double p) { return kernels::pow(a, p); }
  Var col_sum(const Var& a) { return a.colwise().sum(); }
  Var sum(const Var& a) { return Matrix::Constant(1, 1, a.sum()); }
  Var stencil(const Var& x, const RowVector& h) { return kernels::stencil_points(x, h); }
  Var stencil_center(const Var& y, Eigen::Index samples) { return kernels::stencil_center(y, samples); }
  Var stencil_div(const Var& y, const RowVector& h) { return kernels::stencil_div(y, h); }
  Var stencil_grad(const Var& y, const RowVector& h) { return kernels::stencil_grad(y, h); }
  Var stencil_laplacian(const Var& y, const RowVector& h) { return kernels::stencil_laplacian(y, h); }
  Var field(const std::shared_ptr<const FieldFn>& fn, const Var& x) { return kernels::field_values(*fn, x); }

 private:
  const ParamStore* params_;
};

/// Handle to a recorded tape node.
struct TapeVar {
  std::int32_t id = -1;
};

/// Single-owner recording of a scalar computation over a read-only parameter snapshot.
class Tape {
 public:
  using Var = TapeVar;
  static constexpr bool records = true;

  explicit Tape(const ParamStore& params) : params_(&params) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  const ParamStore& params() const { return *params_; }
  std::size_t size() const { return nodes_.size(); }

  const Matrix& value(const Var& v) const { return values_.at(static_cast<std::size_t>(v.id)); }

  Var constant(Matrix m) {
    Node n{Op::constant};
    n.aux = std::move(m);
    return push(std::move(n));
  }
  Var detach(const Var& v) { return constant(value(v)); }

  Var affine(const AffineRef& r, const Var& x) {
    Node n{Op::affine, x.id};
    n.w_off = r.w_offset;
    n.b_off = r.b_offset;
    n.rows = r.rows;
    n.cols = r.cols;
    n.has_bias = r.has_bias;
    return push(std::move(n));
  }
  Var head(std::size_t offset, const Matrix& basis) {
    Node n{Op::head};
    n.w_off = offset;
    n.aux = basis;
    return push(std::move(n));
  }
  Var add(const Var& a, const Var& b) { return push(Node{Op::add, a.id, b.id}); }
  Var sub(const Var& a, const Var& b) { return push(Node{Op::sub, a.id, b.id}); }
  Var mul(const Var& a, const Var& b) { return push(Node{Op::mul, a.id, b.id}); }
  Var scale(const Var& a, double s) {
    Node n{Op::scale, a.id};
    n.scalar = s;
    return push(std::move(n));
  }
  Var add_scalar(const Var& a, double s) {
    Node n{Op::add_scalar, a.id};
    n.scalar = s;
    return push(std::move(n));
  }
  Var scale_cols(const Var& a, const RowVector& s) {
    Node n{Op::scale_cols, a.id};
    n.aux = s;
    return push(std::move(n));
  }
  Var unary(UnaryOp op, const Var& a) {
    Node n{Op::unary, a.id};
    n.uop = op;
    return push(std::move(n));
  }
  Var pow(const Var& a, double p) {
    Node n{Op::pow, a.id};
    n.scalar = p;
    return push(std::move(n));
  }
  Var col_sum(const Var& a) { return push(Node{Op::col_sum, a.id}); }
  Var sum(const Var& a) { return push(Node{Op::sum, a.id}); }
  Var stencil(const Var& x, const RowVector& h) {
    Node n{Op::stencil, x.id};
    n.aux = h;
    return push(std::move(n));
  }
  Var stencil_center(const Var& y, Eigen::Index samples) {
    Node n{Op::stencil_center, y.id};
    n.rows = samples;
    return push(std::move(n));
  }
  Var stencil_div(const Var& y, const RowVector& h) {
    Node n{Op::stencil_div, y.id};
    n.aux = h;
    return push(std::move(n));
  }
  Var stencil_grad(const Var& y, const RowVector& h) {
    Node n{Op::stencil_grad, y.id};
    n.aux = h;
    return push(std::move(n));
  }
  Var stencil_laplacian(const Var& y, const RowVector& h) {
    Node n{Op::stencil_laplacian, y.id};
    n.aux = h;
    return push(std::move(n));
  }
  Var field(const std::shared_ptr<const FieldFn>& fn, const Var& x) {
    Node n{Op::field, x.id};
    n.fn = static_cast<int>(fns_.size());
    fns_.push_back(fn);
    return push(std::move(n));
  }

  /// Accumulates d(out)/d(params) into `grad`. `out` must be a 1x1 node.
  void backward(const Var& out, std::span<double> grad) {
    if (grad.size() != params_->size()) throw DimensionError("gradient buffer does not match parameter count");
    const Matrix& y = value(out);
    if (y.rows() != 1 || y.cols() != 1) throw DimensionError("backward needs a scalar output");
    std::vector<Matrix> grads(nodes_.size());
    grads[static_cast<std::size_t>(out.id)] = Matrix::Ones(1, 1);
    order_.clear();
    for (std::int32_t i = out.id; i >= 0; --i) {
      auto& g = grads[static_cast<std::size_t>(i)];
      if (g.size() == 0) continue;
      order_.push_back(i);
      backward_node(i, g, grads, grad.data());
      g = Matrix();
    }
  }

  /// Node ids visited by the last backward pass, in visit order.
  const std::vector<std::int32_t>& backward_order() const { return order_; }

  /// Recomputes every node from the recorded inputs and returns the value of `out`.
  Matrix replay(const Var& out) const {
    std::vector<Matrix> vals;
    vals.reserve(nodes_.size());
    for (std::size_t i = 0; i <= static_cast<std::size_t>(out.id); ++i) vals.push_back(compute(nodes_[i], vals));
    return vals.back();
  }

 private:
  enum class Op : std::uint8_t {
    constant,
    affine,
    head,
    add,
    sub,
    mul,
    scale,
    add_scalar,
    scale_cols,
    unary,
    pow,
    col_sum,
    sum,
    stencil,
    stencil_center,
    stencil_div,
    stencil_grad,
    stencil_laplacian,
    field,
  };

  struct Node {
    Op op;
    std::int32_t a = -1;
    std::int32_t b = -1;
    UnaryOp uop = UnaryOp::swish;
    std::size_t w_off = 0;
    std::size_t b_off = 0;
    Eigen::Index rows = 0;
    Eigen::Index cols = 0;
    bool has_bias = false;
    double scalar = 0.0;
    Matrix aux;
    int fn = -1;
    bool requires_grad = false;
  };

  static const char* op_name(const Node& n) {
    switch (n.op) {
      case Op::constant: return "constant";
      case Op::affine: return "affine";
      case Op::head: return "head";
      case Op::add: return "add";
      case Op::sub: return "sub";
      case Op::mul: return "mul";
      case Op::scale: return "scale";
      case Op::add_scalar: return "add_scalar";
      case Op::scale_cols: return "scale_cols";
      case Op::unary: return unary_name(n.uop);
      case Op::pow: return "pow";
      case Op::col_sum: return "col_sum";
      case Op::sum: return "sum";
      case Op::stencil: return "stencil";
      case Op::stencil_center: return "stencil_center";
      case Op::stencil_div: return "stencil_div";
      case Op::stencil_grad: return "stencil_grad";
      case Op::stencil_laplacian: return "stencil_laplacian";
      case Op::field: return "field";
    }
    return "?";
  }

  Matrix compute(const Node& n, const std::vector<Matrix>& v) const {
    auto in = [&](std::int32_t id) -> const Matrix& { return v[static_cast<std::size_t>(id)]; };
    switch (n.op) {
      case Op::constant: return n.aux;
      case Op::affine:
        return kernels::affine(params_->data(), n.w_off, n.rows, n.cols, n.b_off, n.has_bias, in(n.a));
      case Op::head: return kernels::affine(params_->data(), n.w_off, 1, n.aux.rows(), 0, false, n.aux);
      case Op::add: return kernels::broadcast_binary('+', in(n.a), in(n.b));
      case Op::sub: return kernels::broadcast_binary('-', in(n.a), in(n.b));
      case Op::mul: return kernels::broadcast_binary('*', in(n.a), in(n.b));
      case Op::scale: return in(n.a) * n.scalar;
      case Op::add_scalar: return (in(n.a).array() + n.scalar).matrix();
      case Op::scale_cols: return kernels::scale_cols(in(n.a), n.aux.row(0));
      case Op::unary: return kernels::unary(n.uop, in(n.a));
      case Op::pow: return kernels::pow(in(n.a), n.scalar);
      case Op::col_sum: return in(n.a).colwise().sum();
      case Op::sum: return Matrix::Constant(1, 1, in(n.a).sum());
      case Op::stencil: return kernels::stencil_points(in(n.a), n.aux.row(0));
      case Op::stencil_center: return kernels::stencil_center(in(n.a), n.rows);
      case Op::stencil_div: return kernels::stencil_div(in(n.a), n.aux.row(0));
      case Op::stencil_grad: return kernels::stencil_grad(in(n.a), n.aux.row(0));
      case Op::stencil_laplacian: return kernels::stencil_laplacian(in(n.a), n.aux.row(0));
      case Op::field: return kernels::field_values(*fns_[static_cast<std::size_t>(n.fn)], in(n.a));
    }
    throw UnsupportedPrimitive(op_name(n));
  }

  Var push(Node n) {
    const auto id = static_cast<std::int32_t>(nodes_.size());
    Matrix val = compute(n, values_);
    if (!val.allFinite())
      throw NumericalError("non-finite value at tape node " + std::to_string(id) + " (" + op_name(n) + ")");
    n.requires_grad = n.op == Op::affine || n.op == Op::head || (n.a >= 0 && nodes_[n.a].requires_grad) ||
                      (n.b >= 0 && nodes_[n.b].requires_grad);
    nodes_.push_back(std::move(n));
    values_.push_back(std::move(val));
    return Var{id};
  }

  bool needs(std::int32_t id) const { return id >= 0 && nodes_[static_cast<std::size_t>(id)].requires_grad; }

  static void accumulate(std::vector<Matrix>& grads, std::int32_t id, Matrix g) {
    auto& slot = grads[static_cast<std::size_t>(id)];
    if (slot.size() == 0)
      slot = std::move(g);
    else
      slot += g;
  }

  void backward_node(std::int32_t i, const Matrix& dy, std::vector<Matrix>& grads, double* pgrad) const {
    const Node& n = nodes_[static_cast<std::size_t>(i)];
    if (!n.requires_grad) return;
    auto in = [&](std::int32_t id) -> const Matrix& { return values_[static_cast<std::size_t>(id)]; };
    switch (n.op) {
      case Op::constant: return;
      case Op::affine: {
        const Matrix& x = in(n.a);
        Eigen::Map<Matrix>(pgrad + n.w_off, n.rows, n.cols).noalias() += dy * x.transpose();
        if (n.has_bias) Eigen::Map<Vector>(pgrad + n.b_off, n.rows) += dy.rowwise().sum();
        if (needs(n.a)) {
          Eigen::Map<const Matrix> w(params_->data() + n.w_off, n.rows, n.cols);
          accumulate(grads, n.a, w.transpose() * dy);
        }
        return;
      }
      case Op::head:
        Eigen::Map<Matrix>(pgrad + n.w_off, 1, n.aux.rows()).noalias() += dy * n.aux.transpose();
        return;
      case Op::add:
      case Op::sub:
      case Op::mul: {
        const Matrix& a = in(n.a);
        const Matrix& b = in(n.b);
        const bool bcast = !(a.rows() == b.rows() && a.cols() == b.cols());
        if (needs(n.a)) {
          if (n.op == Op::mul)
            accumulate(grads, n.a, kernels::broadcast_binary('*', dy, b));
          else
            accumulate(grads, n.a, dy);
        }
        if (needs(n.b)) {
          Matrix gb = n.op == Op::mul ? Matrix(dy.cwiseProduct(a)) : (n.op == Op::sub ? Matrix(-dy) : dy);
          accumulate(grads, n.b, bcast ? Matrix(gb.colwise().sum()) : std::move(gb));
        }
        return;
      }
      case Op::scale:
        if (needs(n.a)) accumulate(grads, n.a, dy * n.scalar);
        return;
      case Op::add_scalar:
        if (needs(n.a)) accumulate(grads, n.a, dy);
        return;
      case Op::scale_cols:
        if (needs(n.a)) accumulate(grads, n.a, kernels::scale_cols(dy, n.aux.row(0)));
        return;
      case Op::unary:
        if (needs(n.a)) accumulate(grads, n.a, kernels::unary_backward(n.uop, in(n.a), values_[i], dy));
        return;
      case Op::pow:
        if (needs(n.a))
          accumulate(grads, n.a,
                     (dy.array() * n.scalar * in(n.a).array().pow(n.scalar - 1.0)).matrix());
        return;
      case Op::col_sum:
        if (needs(n.a)) accumulate(grads, n.a, Matrix(dy.replicate(in(n.a).rows(), 1)));
        return;
      case Op::sum:
        if (needs(n.a)) accumulate(grads, n.a, Matrix::Constant(in(n.a).rows(), in(n.a).cols(), dy(0, 0)));
        return;
      case Op::stencil:
        if (needs(n.a)) accumulate(grads, n.a, kernels::stencil_points_backward(dy, in(n.a).rows(), n.aux.cols()));
        return;
      case Op::stencil_center:
        if (needs(n.a))
          accumulate(grads, n.a, kernels::stencil_center_backward(dy, kernels::stencil_dim_of(in(n.a), n.rows)));
        return;
      case Op::stencil_div:
        if (needs(n.a))
          accumulate(grads, n.a, kernels::stencil_div_backward(dy, n.aux.row(0), in(n.a).rows()));
        return;
      case Op::stencil_grad:
        if (needs(n.a)) accumulate(grads, n.a, kernels::stencil_grad_backward(dy, n.aux.row(0)));
        return;
      case Op::stencil_laplacian:
        if (needs(n.a))
          accumulate(grads, n.a,
                     kernels::stencil_laplacian_backward(dy, n.aux.row(0),
                                                         kernels::stencil_dim_of(in(n.a), n.aux.cols())));
        return;
      case Op::field:
        if (needs(n.a))
          accumulate(grads, n.a, kernels::field_backward(*fns_[static_cast<std::size_t>(n.fn)], in(n.a), dy));
        return;
    }
    throw UnsupportedPrimitive(op_name(n));
  }

  const ParamStore* params_;
  std::vector<Node> nodes_;
  std::vector<Matrix> values_;
  std::vector<std::shared_ptr<const FieldFn>> fns_;
  std::vector<std::int32_t> order_;
};

/// Operation set shared by Eval and Tape.
template <class C>
concept Context = requires(C& c, const typename C::Var& v, const RowVector& r) {
  { c.value(v) } -> std::convertible_to<const Matrix&>;
  c.add(v, v);
  c.mul(v, v);
  c.scale_cols(v, r);
  c.stencil(v, r);
};

/// Convenience: per-column inner product <a, b>.
template <Context Ctx>
typename Ctx::Var col_dot(Ctx& ctx, const typename Ctx::Var& a, const typename Ctx::Var& b) {
  return ctx.col_sum(ctx.mul(a, b));
}

/// Evaluates `loss(tape)` on a fresh tape and returns (value, gradient).
template <class LossFn>
std::pair<double, Vector> value_and_grad(const ParamStore& params, LossFn&& loss) {
  Tape tape(params);
  const TapeVar out = loss(tape);
  Vector g = Vector::Zero(static_cast<Eigen::Index>(params.size()));
  tape.backward(out, std::span<double>(g.data(), params.size()));
  return {tape.value(out)(0, 0), std::move(g)};
}

/// Gradient only.
template <class LossFn>
Vector grad(const ParamStore& params, LossFn&& loss) {
  return value_and_grad(params, std::forward<LossFn>(loss)).second;
}

}  // namespace dflow

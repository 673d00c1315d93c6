#pragma once

// Dense kernels shared by the recording tape and the plain evaluator, so both
// produce bit-identical values for the same expression.
//
// Columns are samples. Central-difference stencils are laid out per sample as
// blocks of 2n+1 columns: [x, x+h e_1, x-h e_1, ..., x+h e_n, x-h e_n].

#include <Eigen/Dense>
#include <cmath>
#include <cstddef>
#include <functional>
#include <span>
#include <string>

#include "dflow/engine/errors.hpp"

namespace dflow {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using RowVector = Eigen::RowVectorXd;

/// Scalar field x -> f(x) with its gradient, applied column-wise.
struct FieldFn {
  std::string name;
  std::function<double(std::span<const double>)> value;
  std::function<void(std::span<const double>, std::span<double>)> gradient;
};

enum class UnaryOp { swish, exp, log, abs, square, sign };

inline const char* unary_name(UnaryOp op) {
  switch (op) {
    case UnaryOp::swish: return "swish";
    case UnaryOp::exp: return "exp";
    case UnaryOp::log: return "log";
    case UnaryOp::abs: return "abs";
    case UnaryOp::square: return "square";
    case UnaryOp::sign: return "sign";
  }
  return "?";
}

namespace kernels {

inline Matrix affine(const double* params, std::size_t w_off, Eigen::Index rows, Eigen::Index cols,
                     std::size_t b_off, bool has_bias, const Matrix& x) {
  if (x.rows() != cols)
    throw DimensionError("affine layer expects " + std::to_string(cols) + " inputs, got " +
                         std::to_string(x.rows()));
  Eigen::Map<const Matrix> w(params + w_off, rows, cols);
  Matrix y = w * x;
  if (has_bias) y.colwise() += Eigen::Map<const Vector>(params + b_off, rows);
  return y;
}

inline Matrix unary(UnaryOp op, const Matrix& x) {
  switch (op) {
    case UnaryOp::swish: return (x.array() / (1.0 + (-x.array()).exp())).matrix();
    case UnaryOp::exp: return x.array().exp().matrix();
    case UnaryOp::log: return x.array().log().matrix();
    case UnaryOp::abs: return x.array().abs().matrix();
    case UnaryOp::square: return x.array().square().matrix();
    case UnaryOp::sign: return x.array().sign().matrix();
  }
  return x;
}

/// d unary(x) / dx evaluated elementwise, multiplied by the upstream gradient.
inline Matrix unary_backward(UnaryOp op, const Matrix& x, const Matrix& y, const Matrix& dy) {
  switch (op) {
    case UnaryOp::swish: {
      Eigen::ArrayXXd s = 1.0 / (1.0 + (-x.array()).exp());
      return (dy.array() * s * (1.0 + x.array() * (1.0 - s))).matrix();
    }
    case UnaryOp::exp: return (dy.array() * y.array()).matrix();
    case UnaryOp::log: return (dy.array() / x.array()).matrix();
    case UnaryOp::abs: return (dy.array() * x.array().sign()).matrix();
    case UnaryOp::square: return (2.0 * dy.array() * x.array()).matrix();
    case UnaryOp::sign: throw UnsupportedPrimitive(unary_name(op));
  }
  return dy;
}

inline Matrix pow(const Matrix& x, double p) { return x.array().pow(p).matrix(); }

inline Matrix broadcast_binary(char op, const Matrix& a, const Matrix& b) {
  if (a.rows() == b.rows() && a.cols() == b.cols()) {
    switch (op) {
      case '+': return a + b;
      case '-': return a - b;
      default: return a.cwiseProduct(b);
    }
  }
  if (b.rows() == 1 && b.cols() == a.cols()) {
    Matrix y = a;
    switch (op) {
      case '+': y.rowwise() += b.row(0); break;
      case '-': y.rowwise() -= b.row(0); break;
      default: y.array().rowwise() *= b.row(0).array(); break;
    }
    return y;
  }
  throw DimensionError("operand shapes " + std::to_string(a.rows()) + "x" + std::to_string(a.cols()) +
                       " and " + std::to_string(b.rows()) + "x" + std::to_string(b.cols()) +
                       " are not compatible");
}

inline Matrix scale_cols(const Matrix& a, const RowVector& s) {
  if (s.cols() != a.cols()) throw DimensionError("column scale length mismatch");
  Matrix y = a;
  y.array().rowwise() *= s.array();
  return y;
}

inline Eigen::Index stencil_width(Eigen::Index n) { return 2 * n + 1; }

inline Matrix stencil_points(const Matrix& x, const RowVector& h) {
  const Eigen::Index n = x.rows(), b = x.cols(), w = stencil_width(n);
  if (h.cols() != b) throw DimensionError("stencil step count does not match sample count");
  Matrix y(n, b * w);
  for (Eigen::Index j = 0; j < b; ++j) {
    for (Eigen::Index c = 0; c < w; ++c) y.col(j * w + c) = x.col(j);
    for (Eigen::Index i = 0; i < n; ++i) {
      y(i, j * w + 1 + 2 * i) += h(j);
      y(i, j * w + 2 + 2 * i) -= h(j);
    }
  }
  return y;
}

inline Matrix stencil_points_backward(const Matrix& dy, Eigen::Index n, Eigen::Index b) {
  const Eigen::Index w = stencil_width(n);
  Matrix dx = Matrix::Zero(n, b);
  for (Eigen::Index j = 0; j < b; ++j)
    for (Eigen::Index c = 0; c < w; ++c) dx.col(j) += dy.col(j * w + c);
  return dx;
}

inline Eigen::Index stencil_dim_of(const Matrix& y, Eigen::Index samples) {
  if (samples == 0 || y.cols() % samples != 0) throw DimensionError("malformed stencil block");
  const Eigen::Index w = y.cols() / samples;
  if (w % 2 != 1) throw DimensionError("malformed stencil block");
  return (w - 1) / 2;
}

inline Matrix stencil_center(const Matrix& y, Eigen::Index samples) {
  const Eigen::Index w = stencil_width(stencil_dim_of(y, samples));
  Matrix c(y.rows(), samples);
  for (Eigen::Index j = 0; j < samples; ++j) c.col(j) = y.col(j * w);
  return c;
}

inline Matrix stencil_center_backward(const Matrix& dc, Eigen::Index n) {
  const Eigen::Index w = stencil_width(n), b = dc.cols();
  Matrix dy = Matrix::Zero(dc.rows(), b * w);
  for (Eigen::Index j = 0; j < b; ++j) dy.col(j * w) = dc.col(j);
  return dy;
}

/// sum_i (y_i(x + h e_i) - y_i(x - h e_i)) / 2h for an n-valued field on the stencil.
inline Matrix stencil_div(const Matrix& y, const RowVector& h) {
  const Eigen::Index b = h.cols(), n = stencil_dim_of(y, b), w = stencil_width(n);
  if (y.rows() != n) throw DimensionError("divergence needs a field with as many outputs as inputs");
  Matrix d(1, b);
  for (Eigen::Index j = 0; j < b; ++j) {
    double s = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) s += y(i, j * w + 1 + 2 * i) - y(i, j * w + 2 + 2 * i);
    d(0, j) = s / (2.0 * h(j));
  }
  return d;
}

inline Matrix stencil_div_backward(const Matrix& dd, const RowVector& h, Eigen::Index n) {
  const Eigen::Index b = h.cols(), w = stencil_width(n);
  Matrix dy = Matrix::Zero(n, b * w);
  for (Eigen::Index j = 0; j < b; ++j) {
    const double g = dd(0, j) / (2.0 * h(j));
    for (Eigen::Index i = 0; i < n; ++i) {
      dy(i, j * w + 1 + 2 * i) = g;
      dy(i, j * w + 2 + 2 * i) = -g;
    }
  }
  return dy;
}

/// Central-difference gradient of a scalar field evaluated on the stencil.
inline Matrix stencil_grad(const Matrix& y, const RowVector& h) {
  const Eigen::Index b = h.cols(), n = stencil_dim_of(y, b), w = stencil_width(n);
  if (y.rows() != 1) throw DimensionError("stencil gradient needs a scalar field");
  Matrix g(n, b);
  for (Eigen::Index j = 0; j < b; ++j)
    for (Eigen::Index i = 0; i < n; ++i)
      g(i, j) = (y(0, j * w + 1 + 2 * i) - y(0, j * w + 2 + 2 * i)) / (2.0 * h(j));
  return g;
}

inline Matrix stencil_grad_backward(const Matrix& dg, const RowVector& h) {
  const Eigen::Index n = dg.rows(), b = h.cols(), w = stencil_width(n);
  Matrix dy = Matrix::Zero(1, b * w);
  for (Eigen::Index j = 0; j < b; ++j)
    for (Eigen::Index i = 0; i < n; ++i) {
      const double v = dg(i, j) / (2.0 * h(j));
      dy(0, j * w + 1 + 2 * i) = v;
      dy(0, j * w + 2 + 2 * i) = -v;
    }
  return dy;
}

/// sum_i (y(x + h e_i) - 2 y(x) + y(x - h e_i)) / h^2 for a scalar field on the stencil.
inline Matrix stencil_laplacian(const Matrix& y, const RowVector& h) {
  const Eigen::Index b = h.cols(), n = stencil_dim_of(y, b), w = stencil_width(n);
  if (y.rows() != 1) throw DimensionError("stencil laplacian needs a scalar field");
  Matrix l(1, b);
  for (Eigen::Index j = 0; j < b; ++j) {
    double s = 0.0;
    for (Eigen::Index i = 0; i < n; ++i)
      s += y(0, j * w + 1 + 2 * i) - 2.0 * y(0, j * w) + y(0, j * w + 2 + 2 * i);
    l(0, j) = s / (h(j) * h(j));
  }
  return l;
}

inline Matrix stencil_laplacian_backward(const Matrix& dl, const RowVector& h, Eigen::Index n) {
  const Eigen::Index b = h.cols(), w = stencil_width(n);
  Matrix dy = Matrix::Zero(1, b * w);
  for (Eigen::Index j = 0; j < b; ++j) {
    const double g = dl(0, j) / (h(j) * h(j));
    dy(0, j * w) = -2.0 * static_cast<double>(n) * g;
    for (Eigen::Index i = 0; i < n; ++i) {
      dy(0, j * w + 1 + 2 * i) = g;
      dy(0, j * w + 2 + 2 * i) = g;
    }
  }
  return dy;
}

inline Matrix field_values(const FieldFn& fn, const Matrix& x) {
  Matrix y(1, x.cols());
  for (Eigen::Index j = 0; j < x.cols(); ++j)
    y(0, j) = fn.value(std::span<const double>(x.col(j).data(), static_cast<std::size_t>(x.rows())));
  return y;
}

inline Matrix field_backward(const FieldFn& fn, const Matrix& x, const Matrix& dy) {
  Matrix dx(x.rows(), x.cols());
  for (Eigen::Index j = 0; j < x.cols(); ++j) {
    fn.gradient(std::span<const double>(x.col(j).data(), static_cast<std::size_t>(x.rows())),
                std::span<double>(dx.col(j).data(), static_cast<std::size_t>(x.rows())));
    dx.col(j) *= dy(0, j);
  }
  return dx;
}

}  // namespace kernels
}  // namespace dflow

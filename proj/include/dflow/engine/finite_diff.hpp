#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <array>
#include <cmath>
#include <string>

#include "dflow/engine/errors.hpp"
#include "dflow/engine/kernels.hpp"

namespace dflow {

/// Step sizes for the numerical derivatives inside residuals.
struct FDConfig {
  double h_space = 1e-3;  // scaled by max(1, |x|_inf) at each point
  double h_time = 1e-3;

  void validate() const {
    if (!(h_space > 0.0)) throw ConfigError("fd.h_space", "must be positive");
    if (!(h_time > 0.0) || h_time > 0.25) throw ConfigError("fd.h_time", "must lie in (0, 0.25]");
  }

  template <class Derived>
  double space_step(const Eigen::MatrixBase<Derived>& x) const {
    return h_space * std::max(1.0, x.size() == 0 ? 0.0 : x.cwiseAbs().maxCoeff());
  }

  RowVector space_steps(const Matrix& x) const {
    RowVector h(x.cols());
    for (Eigen::Index j = 0; j < x.cols(); ++j) h(j) = space_step(x.col(j));
    return h;
  }
};

/// Sample offsets and weights of the time-derivative stencil at `t`.
///
/// Central differences when [t - 2h, t + 2h] fits inside [0, 1]; otherwise the
/// second-order one-sided stencil pointing into the interval.
struct TimeStencil {
  std::array<double, 3> offsets{};
  std::array<double, 3> weights{};
  int count = 0;

  static TimeStencil at(double t, const FDConfig& cfg) {
    const double h = cfg.h_time;
    TimeStencil s;
    if (t - 2.0 * h >= 0.0 && t + 2.0 * h <= 1.0) {
      s.count = 2;
      s.offsets = {-h, h, 0.0};
      s.weights = {-0.5 / h, 0.5 / h, 0.0};
    } else if (t < 0.5) {
      s.count = 3;
      s.offsets = {0.0, h, 2.0 * h};
      s.weights = {-1.5 / h, 2.0 / h, -0.5 / h};
    } else {
      s.count = 3;
      s.offsets = {0.0, -h, -2.0 * h};
      s.weights = {1.5 / h, -2.0 / h, 0.5 / h};
    }
    return s;
  }
};

namespace detail {
inline void require_finite(double v, const std::string& where) {
  if (!std::isfinite(v)) throw NumericalError("non-finite field value at " + where);
}
}  // namespace detail

/// Central-difference divergence of `field: Vector -> Vector` at `x`.
template <class Field>
double fd_divergence(Field&& field, const Vector& x, const FDConfig& cfg) {
  const double h = cfg.space_step(x);
  double div = 0.0;
  Vector xp = x;
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    xp(i) = x(i) + h;
    const Vector vp = field(xp);
    xp(i) = x(i) - h;
    const Vector vm = field(xp);
    xp(i) = x(i);
    if (vp.size() != x.size() || vm.size() != x.size())
      throw DimensionError("divergence needs a field with as many outputs as inputs");
    detail::require_finite(vp(i), "coordinate " + std::to_string(i) + " (+h)");
    detail::require_finite(vm(i), "coordinate " + std::to_string(i) + " (-h)");
    div += vp(i) - vm(i);
  }
  return div / (2.0 * h);
}

/// Central-difference gradient of `f: Vector -> double` at `x`.
template <class Scalar>
Vector fd_space_grad(Scalar&& f, const Vector& x, const FDConfig& cfg) {
  const double h = cfg.space_step(x);
  Vector g(x.size());
  Vector xp = x;
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    xp(i) = x(i) + h;
    const double fp = f(xp);
    xp(i) = x(i) - h;
    const double fm = f(xp);
    xp(i) = x(i);
    detail::require_finite(fp, "coordinate " + std::to_string(i) + " (+h)");
    detail::require_finite(fm, "coordinate " + std::to_string(i) + " (-h)");
    g(i) = (fp - fm) / (2.0 * h);
  }
  return g;
}

/// Numerical d/dt of `f: double -> double` at `t` in [0, 1].
template <class Scalar>
double fd_time_partial(Scalar&& f, double t, const FDConfig& cfg) {
  if (t < 0.0 || t > 1.0) throw DimensionError("time derivative requested outside [0, 1]");
  const auto s = TimeStencil::at(t, cfg);
  double d = 0.0;
  for (int k = 0; k < s.count; ++k) {
    const double v = f(t + s.offsets[k]);
    detail::require_finite(v, "t = " + std::to_string(t + s.offsets[k]));
    d += s.weights[k] * v;
  }
  return d;
}

}  // namespace dflow

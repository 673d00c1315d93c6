#pragma once

// Pointwise deformation error  E = d_t f + <grad f, V> - div V + C.

#include <Eigen/Dense>
#include <functional>

#include "dflow/engine/finite_diff.hpp"
#include "dflow/engine/tape.hpp"
#include "dflow/flow/integrator.hpp"
#include "dflow/interp/interpolant.hpp"
#include "dflow/nets/flow_model.hpp"

namespace dflow {

/// Assembles the residual from its four ingredients.
template <Context Ctx>
typename Ctx::Var deformation_residual(Ctx& ctx, const typename Ctx::Var& dt_f, const typename Ctx::Var& grad_f,
                                       const typename Ctx::Var& v, const typename Ctx::Var& div_v,
                                       const typename Ctx::Var& c) {
  return ctx.add(ctx.sub(ctx.add(dt_f, col_dot(ctx, grad_f, v)), div_v), c);
}

inline double deformation_residual(double dt_f, const Vector& grad_f, const Vector& v, double div_v, double c) {
  return dt_f + grad_f.dot(v) - div_v + c;
}

/// Velocity and divergence of the model field at columns of `x` with per-column times.
/// Positions are constants; only the network parameters are recorded.
template <Context Ctx>
std::pair<typename Ctx::Var, typename Ctx::Var> velocity_and_divergence(Ctx& ctx, const RbfTimeEnsemble& net,
                                                                        const RowVector& t, const Matrix& x,
                                                                        const FDConfig& fd) {
  const Eigen::Index b = x.cols(), w = kernels::stencil_width(x.rows());
  const RowVector h = fd.space_steps(x);
  RowVector ts(b * w);
  for (Eigen::Index j = 0; j < b; ++j) ts.segment(j * w, w).setConstant(t(j));
  const auto vs = ensemble_forward(ctx, net, ctx.constant(kernels::stencil_points(x, h)), net.kernels.weights(ts));
  return {ctx.stencil_center(vs, b), ctx.stencil_div(vs, h)};
}

/// Residuals of the model triple (f from `ip`, V and C from `model`) at columns of `x`.
/// When `correction_live` is false the learned part of f is a constant.
template <Context Ctx>
typename Ctx::Var deformation_residuals(Ctx& ctx, const FlowModel& model, const Interpolant& ip, const RowVector& t,
                                        const Matrix& x, const FDConfig& fd, bool correction_live = true) {
  const auto d = interp_derivs(ctx, ip, t, x, fd, false, correction_live);
  const auto [v, div] = velocity_and_divergence(ctx, model.velocity, t, x, fd);
  return deformation_residual(ctx, d.dt_f, d.grad_f, v, div, time_head_forward(ctx, model.c_head, t));
}

/// Deformation error of the model at a single point.
inline double deformation_error_at(double t, const Vector& x, const Interpolant& ip, const FlowModel& model,
                                   const FDConfig& fd = {}) {
  if (t < 0.0 || t > 1.0) throw DimensionError("deformation error time outside [0, 1]");
  Eval ctx(model.params);
  return deformation_residuals(ctx, model, ip, RowVector::Constant(1, t), Matrix(x), fd)(0, 0);
}

/// Deformation error of user-supplied callables, every derivative by finite differences.
///   f(t, x) -> double, V(t, x) -> Vector, C(t) -> double.
inline double deformation_error_fd(const std::function<double(double, const Vector&)>& f,
                                   const std::function<Vector(double, const Vector&)>& V,
                                   const std::function<double(double)>& C, double t, const Vector& x,
                                   const FDConfig& fd = {}) {
  const double dt_f = fd_time_partial([&](double s) { return f(s, x); }, t, fd);
  const Vector grad_f = fd_space_grad([&](const Vector& y) { return f(t, y); }, x, fd);
  const double div_v = fd_divergence([&](const Vector& y) { return V(t, y); }, x, fd);
  return deformation_residual(dt_f, grad_f, V(t, x), div_v, C(t));
}

}  // namespace dflow

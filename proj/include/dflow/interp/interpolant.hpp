#pragma once

// Time-indexed energy families f_t with f_0 = base and f_1 = target.

#include <Eigen/Dense>
#include <cmath>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include "dflow/energies/energy.hpp"
#include "dflow/engine/errors.hpp"
#include "dflow/engine/finite_diff.hpp"
#include "dflow/engine/tape.hpp"
#include "dflow/nets/rbf_ensemble.hpp"

namespace dflow {

enum class InterpKind { linear, learned, mixture_diffusion };

inline const char* interp_kind_name(InterpKind k) {
  switch (k) {
    case InterpKind::linear: return "linear";
    case InterpKind::learned: return "learned";
    case InterpKind::mixture_diffusion: return "mixture_diffusion";
  }
  return "?";
}

/// Component parameters of a Gaussian mixture pushed through the diffusion process at time t:
/// weights unchanged, means sqrt(t) mu_i, variances t var_i + sigma^2 (1 - t).
inline GaussianMixtureSpec diffuse_mixture(const GaussianMixtureSpec& target, double sigma, double t) {
  GaussianMixtureSpec out = target;
  const double s = std::sqrt(t);
  for (std::size_t i = 0; i < target.size(); ++i) {
    out.means[i] = s * target.means[i];
    out.variances[i] = t * target.variances[i] + sigma * sigma * (1.0 - t);
  }
  return out;
}

struct Interpolant {
  InterpKind kind = InterpKind::linear;
  EnergySpec base;
  EnergySpec target;
  double sigma_base = 1.0;                     // diffusion kind only
  std::optional<RbfTimeEnsemble> correction;  // learned kind only

  int dim() const { return energy_dim(target); }

  void validate() const {
    dflow::validate(base);
    dflow::validate(target);
    if (energy_dim(base) != energy_dim(target)) throw ConfigError("base.dim", "base and target dimensions differ");
    if (kind == InterpKind::learned) {
      if (!correction) throw ConfigError("interp.kind", "learned interpolation needs a correction network");
      if (correction->spec.out_dim != 1) throw ConfigError("interp.kind", "correction network must be scalar");
    }
    if (kind == InterpKind::mixture_diffusion) {
      if (!std::holds_alternative<GaussianMixtureSpec>(target))
        throw ConfigError("interp.kind", "mixture_diffusion needs a Gaussian-mixture target");
      const auto* b = std::get_if<NormalBaseSpec>(&base);
      if (b == nullptr || std::abs(b->std - sigma_base) > 1e-15)
        throw ConfigError("interp.kind", "mixture_diffusion needs a normal base with std equal to sigma_base");
    }
  }

  const GaussianMixtureSpec& mixture() const {
    const auto* m = std::get_if<GaussianMixtureSpec>(&target);
    if (m == nullptr) throw ConfigError("interp.kind", "mixture_diffusion requested for a non-mixture target");
    return *m;
  }

  /// log of the base normalizer (2 pi sigma^2)^(n/2); subtracted as (1-t) log Z0 so that f_0 is the base energy.
  double diffusion_log_z0() const {
    return 0.5 * static_cast<double>(dim()) * std::log(2.0 * std::numbers::pi * sigma_base * sigma_base);
  }
};

namespace detail {

/// -log p_t(x) - (1-t) log Z0 for the diffused mixture, and its analytic derivatives.
struct DiffusionPoint {
  double f = 0.0;
  double dt_f = 0.0;
  Vector grad_f;
};

inline DiffusionPoint diffusion_point(const Interpolant& ip, double t, const Eigen::Ref<const Vector>& x,
                                      bool derivatives) {
  const auto& target = ip.mixture();
  const auto mix = diffuse_mixture(target, ip.sigma_base, t);
  const Vector logs = mixture_component_logs(mix, x);
  DiffusionPoint p;
  p.f = -log_sum_exp(logs) - (1.0 - t) * ip.diffusion_log_z0();
  if (!derivatives) return p;
  const Vector r = responsibilities(logs);
  const double n = static_cast<double>(x.size());
  const double s2 = ip.sigma_base * ip.sigma_base;
  p.grad_f = Vector::Zero(x.size());
  double dt_log_p = 0.0;
  for (std::size_t i = 0; i < mix.size(); ++i) {
    const double v = mix.variances[i];
    const double dv = target.variances[i] - s2;
    const Vector d = x - mix.means[i];
    double dm_term = 0.0;
    if (target.means[i].squaredNorm() > 0.0) {
      if (t <= 0.0) throw NumericalError("diffusion interpolation is not differentiable in t at t = 0");
      dm_term = d.dot(target.means[i]) / (2.0 * std::sqrt(t) * v);
    }
    const double dlog = -0.5 * n * dv / v + dm_term + d.squaredNorm() * dv / (2.0 * v * v);
    const double ri = r(static_cast<Eigen::Index>(i));
    dt_log_p += ri * dlog;
    p.grad_f += ri * d / v;
  }
  p.dt_f = -dt_log_p + ip.diffusion_log_z0();
  return p;
}

inline double analytic_part(const Interpolant& ip, double t, const Eigen::Ref<const Vector>& x) {
  return (1.0 - t) * energy(ip.base, x) + t * energy(ip.target, x);
}

}  // namespace detail

/// Derivatives of f_t at a batch of (t_j, x_j) columns, as context variables.
template <Context Ctx>
struct InterpDerivs {
  typename Ctx::Var dt_f;                    // 1 x M
  typename Ctx::Var grad_f;                  // n x M
  std::optional<typename Ctx::Var> lap_f;    // 1 x M, when requested
};

namespace detail {

/// Correction-network terms t(1-t) F and their derivatives, evaluated on a context.
template <Context Ctx>
struct CorrectionTerms {
  typename Ctx::Var dt;    // (1-2t) F + t(1-t) dF/dt
  typename Ctx::Var grad;  // t(1-t) grad F
  std::optional<typename Ctx::Var> lap;
};

template <Context Ctx>
CorrectionTerms<Ctx> correction_terms(Ctx& ctx, const RbfTimeEnsemble& net, const RowVector& t, const Matrix& x,
                                      const RowVector& h, const FDConfig& fd, bool laplacian) {
  const Eigen::Index b = x.cols(), w = kernels::stencil_width(x.rows());
  // Kernel weights at t and finite-difference weights for d/dt, repeated over each stencil block.
  Matrix kappa(net.kernels.count, b * w), dkappa(net.kernels.count, b * w);
  for (Eigen::Index j = 0; j < b; ++j) {
    const Vector k0 = net.kernels.weights(t(j));
    const auto ts = TimeStencil::at(t(j), fd);
    Vector dk = Vector::Zero(net.kernels.count);
    for (int s = 0; s < ts.count; ++s) dk += ts.weights[s] * net.kernels.weights(t(j) + ts.offsets[s]);
    for (Eigen::Index c = 0; c < w; ++c) {
      kappa.col(j * w + c) = k0;
      dkappa.col(j * w + c) = dk;
    }
  }
  const auto pts = ctx.constant(kernels::stencil_points(x, h));
  const auto outs = ensemble_forward_multi(ctx, net, pts, {kappa, dkappa});
  const auto f_c = ctx.stencil_center(outs[0], b);
  const auto df_c = ctx.stencil_center(outs[1], b);
  const RowVector bump = (t.array() * (1.0 - t.array())).matrix();
  const RowVector slope = (1.0 - 2.0 * t.array()).matrix();
  CorrectionTerms<Ctx> c{ctx.add(ctx.scale_cols(f_c, slope), ctx.scale_cols(df_c, bump)),
                         ctx.scale_cols(ctx.stencil_grad(outs[0], h), bump), std::nullopt};
  if (laplacian) c.lap = ctx.scale_cols(ctx.stencil_laplacian(outs[0], h), bump);
  return c;
}

}  // namespace detail

/// Batched derivatives of f_t. Analytic terms enter as constants; when `correction_live`
/// is false the learned correction is evaluated without recording (no gradient to f).
template <Context Ctx>
InterpDerivs<Ctx> interp_derivs(Ctx& ctx, const Interpolant& ip, const RowVector& t, const Matrix& x,
                                const FDConfig& fd, bool laplacian = false, bool correction_live = true) {
  const Eigen::Index n = x.rows(), b = x.cols();
  if (n != ip.dim()) throw DimensionError("interpolant expects dimension " + std::to_string(ip.dim()));
  if (t.cols() != b) throw DimensionError("time row does not match sample count");
  Matrix dt(1, b), grad(n, b);
  Matrix lap = Matrix::Zero(1, b);
  const RowVector h = fd.space_steps(x);
  for (Eigen::Index j = 0; j < b; ++j) {
    const double tj = t(j);
    if (tj < 0.0 || tj > 1.0) throw DimensionError("interpolant time outside [0, 1]");
    if (ip.kind == InterpKind::mixture_diffusion) {
      const auto p = detail::diffusion_point(ip, tj, x.col(j), true);
      dt(0, j) = p.dt_f;
      grad.col(j) = p.grad_f;
    } else {
      const Vector xj = x.col(j);
      dt(0, j) = energy(ip.target, xj) - energy(ip.base, xj);
      grad.col(j) = (1.0 - tj) * energy_grad(ip.base, xj) + tj * energy_grad(ip.target, xj);
    }
  }
  if (laplacian) {
    const Matrix pts = kernels::stencil_points(x, h);
    Matrix vals(1, pts.cols());
    const Eigen::Index w = kernels::stencil_width(n);
    for (Eigen::Index c = 0; c < pts.cols(); ++c) {
      const double tj = t(c / w);
      vals(0, c) = ip.kind == InterpKind::mixture_diffusion ? detail::diffusion_point(ip, tj, pts.col(c), false).f
                                                             : detail::analytic_part(ip, tj, pts.col(c));
    }
    lap = kernels::stencil_laplacian(vals, h);
  }
  InterpDerivs<Ctx> d{ctx.constant(dt), ctx.constant(grad), std::nullopt};
  if (laplacian) d.lap_f = ctx.constant(lap);
  if (ip.kind == InterpKind::learned) {
    if (!ip.correction) throw ConfigError("interp.kind", "learned interpolation needs a correction network");
    if (correction_live) {
      auto c = detail::correction_terms(ctx, *ip.correction, t, x, h, fd, laplacian);
      d.dt_f = ctx.add(d.dt_f, c.dt);
      d.grad_f = ctx.add(d.grad_f, c.grad);
      if (laplacian) d.lap_f = ctx.add(*d.lap_f, *c.lap);
    } else {
      Eval plain(ctx.params());
      auto c = detail::correction_terms(plain, *ip.correction, t, x, h, fd, laplacian);
      d.dt_f = ctx.add(d.dt_f, ctx.constant(c.dt));
      d.grad_f = ctx.add(d.grad_f, ctx.constant(c.grad));
      if (laplacian) d.lap_f = ctx.add(*d.lap_f, ctx.constant(*c.lap));
    }
  }
  return d;
}

/// f_t(x).
inline double f_eval(const Interpolant& ip, double t, const Vector& x, const ParamStore& params) {
  if (t < 0.0 || t > 1.0) throw DimensionError("interpolant time outside [0, 1]");
  switch (ip.kind) {
    case InterpKind::linear: return detail::analytic_part(ip, t, x);
    case InterpKind::learned: {
      const double lin = detail::analytic_part(ip, t, x);
      if (t == 0.0 || t == 1.0) return lin;
      return lin + t * (1.0 - t) * ensemble_eval(t, x, *ip.correction, params)(0);
    }
    case InterpKind::mixture_diffusion: return detail::diffusion_point(ip, t, x, false).f;
  }
  return 0.0;
}

inline double f_time_partial(const Interpolant& ip, double t, const Vector& x, const ParamStore& params,
                             const FDConfig& fd = {}) {
  Eval ctx(params);
  return interp_derivs(ctx, ip, RowVector::Constant(1, t), Matrix(x), fd).dt_f(0, 0);
}

inline Vector f_space_grad(const Interpolant& ip, double t, const Vector& x, const ParamStore& params,
                           const FDConfig& fd = {}) {
  Eval ctx(params);
  return interp_derivs(ctx, ip, RowVector::Constant(1, t), Matrix(x), fd).grad_f.col(0);
}

/// Residual of the diffusion PDE for the density of a diffused mixture:
///   d_t p + (1/2t) (n p + <grad p, x> + sigma^2 lap p).
inline double diffusion_density_residual(const GaussianMixtureSpec& target, double sigma, double t,
                                         const Vector& x, double* dt_p_out = nullptr) {
  if (!(t > 0.0)) throw NumericalError("diffusion density residual is singular at t = 0");
  if (x.size() != target.dim()) throw DimensionError("point dimension does not match mixture");
  const auto mix = diffuse_mixture(target, sigma, t);
  const Vector logs = detail::mixture_component_logs(mix, x);
  const double shift = logs.maxCoeff();
  const double n = static_cast<double>(x.size());
  double p = 0.0, dt_p = 0.0, lap_p = 0.0;
  Vector grad_p = Vector::Zero(x.size());
  for (std::size_t i = 0; i < mix.size(); ++i) {
    const double pi = std::exp(logs(static_cast<Eigen::Index>(i)) - shift);
    const double v = mix.variances[i];
    const double dv = target.variances[i] - sigma * sigma;
    const Vector d = x - mix.means[i];
    const double dm = d.dot(target.means[i]) / (2.0 * std::sqrt(t) * v);
    p += pi;
    dt_p += pi * (-0.5 * n * dv / v + dm + d.squaredNorm() * dv / (2.0 * v * v));
    grad_p -= pi * d / v;
    lap_p += pi * (d.squaredNorm() / (v * v) - n / v);
  }
  const double res = dt_p + (n * p + grad_p.dot(x) + sigma * sigma * lap_p) / (2.0 * t);
  const double scale = std::exp(shift);
  if (dt_p_out) *dt_p_out = dt_p * scale;
  return res * scale;
}

/// Diffusion-path interpolation residual assembled from f-derivatives and D_t:
///   2t d_t f + <grad f, x> + sigma^2 (lap f - |grad f|^2) + D_t.
template <Context Ctx>
typename Ctx::Var interpolation_residual(Ctx& ctx, const RowVector& t, const Matrix& x, const InterpDerivs<Ctx>& d,
                                         const typename Ctx::Var& d_head, double sigma) {
  if (!d.lap_f) throw Error("interpolation residual needs the laplacian of f");
  const auto two_t = (2.0 * t.array()).matrix();
  auto e = ctx.scale_cols(d.dt_f, two_t);
  e = ctx.add(e, col_dot(ctx, d.grad_f, ctx.constant(x)));
  auto diffusion = ctx.sub(*d.lap_f, col_dot(ctx, d.grad_f, d.grad_f));
  e = ctx.add(e, ctx.scale(diffusion, sigma * sigma));
  return ctx.add(e, d_head);
}

/// Single-point interpolation error of a learned interpolant with D_t from `d_head`.
inline double interpolation_error(const Interpolant& ip, const TimeScalarHead& d_head, double t, const Vector& x,
                                  const ParamStore& params, double sigma, const FDConfig& fd = {}) {
  Eval ctx(params);
  const RowVector tr = RowVector::Constant(1, t);
  const auto d = interp_derivs(ctx, ip, tr, Matrix(x), fd, true);
  return interpolation_residual(ctx, tr, Matrix(x), d, time_head_forward(ctx, d_head, tr), sigma)(0, 0);
}

/// Fraction of the mass of exp(-f_t) in each Voronoi cell of `centers`, by 2D/1D grid quadrature.
inline std::vector<double> mode_mass_fractions(const Interpolant& ip, double t, const std::vector<Vector>& centers,
                                               double lo, double hi, int steps, const ParamStore& params) {
  const int n = ip.dim();
  if (n > 2) throw DimensionError("mode mass quadrature supports dimension 1 or 2");
  std::vector<double> mass(centers.size(), 0.0);
  const double dx = (hi - lo) / steps;
  // Shift energies by the minimum grid value to avoid underflow.
  std::vector<std::pair<Vector, double>> pts;
  double fmin = std::numeric_limits<double>::infinity();
  const int ny = n == 2 ? steps : 1;
  for (int a = 0; a < steps; ++a)
    for (int c = 0; c < ny; ++c) {
      Vector x(n);
      x(0) = lo + (a + 0.5) * dx;
      if (n == 2) x(1) = lo + (c + 0.5) * dx;
      const double f = f_eval(ip, t, x, params);
      fmin = std::min(fmin, f);
      pts.emplace_back(std::move(x), f);
    }
  double total = 0.0;
  for (const auto& [x, f] : pts) {
    const double w = std::exp(-(f - fmin));
    std::size_t best = 0;
    for (std::size_t k = 1; k < centers.size(); ++k)
      if ((x - centers[k]).squaredNorm() < (x - centers[best]).squaredNorm()) best = k;
    mass[best] += w;
    total += w;
  }
  for (auto& m : mass) m /= total;
  return mass;
}

}  // namespace dflow

#pragma once

// Training objectives: the deformation loss, the reverse-KL baseline and the
// combined deformation + interpolation loss with a learned interpolant.
//
// Residual losses are evaluated on frozen collocation points: trajectories are
// integrated without recording, then the residual is differentiated with
// respect to the network parameters at those positions.

#include <Eigen/Dense>
#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "dflow/energies/energy.hpp"
#include "dflow/engine/errors.hpp"
#include "dflow/engine/finite_diff.hpp"
#include "dflow/engine/parallel.hpp"
#include "dflow/engine/tape.hpp"
#include "dflow/flow/deformation.hpp"
#include "dflow/flow/integrator.hpp"
#include "dflow/interp/interpolant.hpp"
#include "dflow/nets/flow_model.hpp"

namespace dflow {

enum class PenaltyKind { abs, square, abs_plus_square, log1p_abs };

inline const char* penalty_name(PenaltyKind k) {
  switch (k) {
    case PenaltyKind::abs: return "abs";
    case PenaltyKind::square: return "square";
    case PenaltyKind::abs_plus_square: return "abs_plus_square";
    case PenaltyKind::log1p_abs: return "log1p_abs";
  }
  return "?";
}

inline PenaltyKind parse_penalty(const std::string& s, const std::string& key = "train.penalty") {
  for (auto k : {PenaltyKind::abs, PenaltyKind::square, PenaltyKind::abs_plus_square, PenaltyKind::log1p_abs})
    if (s == penalty_name(k)) return k;
  throw ConfigError(key, "unknown penalty '" + s + "'");
}

/// Per-trajectory weights of the deformation loss: batch-normalized e^{-f_1}/q, or all ones.
enum class TrajectoryWeighting { importance, uniform };

inline const char* weighting_name(TrajectoryWeighting w) {
  return w == TrajectoryWeighting::importance ? "importance" : "uniform";
}

inline TrajectoryWeighting parse_weighting(const std::string& s) {
  for (auto w : {TrajectoryWeighting::importance, TrajectoryWeighting::uniform})
    if (s == weighting_name(w)) return w;
  throw ConfigError("train.weighting", "unknown weighting '" + s + "'");
}

inline double penalty(PenaltyKind k, double e) {
  const double a = std::abs(e);
  switch (k) {
    case PenaltyKind::abs: return a;
    case PenaltyKind::square: return a * a;
    case PenaltyKind::abs_plus_square: return a + a * a;
    case PenaltyKind::log1p_abs: return std::log1p(a);
  }
  return a;
}

template <Context Ctx>
typename Ctx::Var penalty(Ctx& ctx, PenaltyKind k, const typename Ctx::Var& e) {
  switch (k) {
    case PenaltyKind::abs: return ctx.unary(UnaryOp::abs, e);
    case PenaltyKind::square: return ctx.unary(UnaryOp::square, e);
    case PenaltyKind::abs_plus_square: return ctx.add(ctx.unary(UnaryOp::abs, e), ctx.unary(UnaryOp::square, e));
    case PenaltyKind::log1p_abs: return ctx.unary(UnaryOp::log, ctx.add_scalar(ctx.unary(UnaryOp::abs, e), 1.0));
  }
  return ctx.unary(UnaryOp::abs, e);
}

/// Per-trajectory importance weights e^{-f_1(x_1)} / q(x_1), kept in log space.
struct TrajectoryWeights {
  RowVector log_raw;
  RowVector normalized;  // mean exactly 1 up to rounding
};

inline TrajectoryWeights normalize_weights(const RowVector& log_raw) {
  if (log_raw.size() == 0) throw Error("empty batch");
  double m = -std::numeric_limits<double>::infinity();
  for (Eigen::Index j = 0; j < log_raw.size(); ++j) {
    if (std::isnan(log_raw(j)) || log_raw(j) == std::numeric_limits<double>::infinity())
      throw NumericalError("non-finite trajectory weight at sample " + std::to_string(j));
    m = std::max(m, log_raw(j));
  }
  if (!std::isfinite(m)) throw NumericalError("all trajectory weights are zero (degenerate batch)");
  // Scalar exp keeps exp(-inf) exactly 0 (the vectorized version clamps).
  RowVector w = (log_raw.array() - m).unaryExpr([](double v) { return std::exp(v); }).matrix();
  w *= static_cast<double>(w.size()) / w.sum();
  return {log_raw, w};
}

/// Frozen trajectory grid of a batch: states[k] is n x B at times[k].
struct Collocation {
  std::vector<double> times;
  std::vector<Matrix> states;
  Matrix z;
  RowVector log_q;  // log q(x_1), empty when not computed

  Eigen::Index batch() const { return z.cols(); }
  int dim() const { return static_cast<int>(z.rows()); }
};

/// Integrates the model field from z without recording; also evaluates log q at the endpoints.
inline Collocation collocate(const FlowModel& model, const EnergySpec& base, const Matrix& z, int steps,
                             const FDConfig& fd, bool with_log_q = true) {
  Eval ctx(model.params);
  auto tr = integrate(ctx, VelocityField{&model.velocity}, z, IntegratorConfig{steps, 0.0, 1.0}, fd, with_log_q);
  Collocation c{std::move(tr.times), std::move(tr.states), z, RowVector()};
  if (with_log_q) c.log_q = log_densities(base, z) - RowVector(tr.div_integral.back());
  return c;
}

/// log w = -f_1(x_1) - log q(x_1).
inline RowVector log_trajectory_weights(const Collocation& c, const EnergySpec& target) {
  if (c.log_q.size() != c.batch()) throw Error("collocation has no log q");
  return -energies(target, c.states.back()) - c.log_q;
}

/// Columns of samples [b0, b1) over grid points [k0, S], sample-major, with their times.
struct CollocationBlock {
  RowVector t;
  Matrix x;
};

inline CollocationBlock collocation_block(const Collocation& c, Eigen::Index b0, Eigen::Index b1, int k0) {
  const auto g = static_cast<Eigen::Index>(c.times.size()) - k0;
  CollocationBlock blk{RowVector(g * (b1 - b0)), Matrix(c.dim(), g * (b1 - b0))};
  Eigen::Index col = 0;
  for (Eigen::Index b = b0; b < b1; ++b)
    for (Eigen::Index k = k0; k < static_cast<Eigen::Index>(c.times.size()); ++k, ++col) {
      blk.t(col) = c.times[static_cast<std::size_t>(k)];
      blk.x.col(col) = c.states[static_cast<std::size_t>(k)].col(b);
    }
  return blk;
}

struct LossOptions {
  PenaltyKind penalty = PenaltyKind::abs_plus_square;
  PenaltyKind penalty2 = PenaltyKind::abs_plus_square;  // interpolation term of the combined loss
  TrajectoryWeighting weighting = TrajectoryWeighting::importance;
  int steps = 50;
  FDConfig fd;
  std::size_t chunk = 16;  // samples per independent work item
  double sigma = 1.0;      // base standard deviation, combined loss only
  int combined_term = 0;   // combined loss: 0 both terms, 1 deformation only, 2 interpolation only
};

struct LossResult {
  double value = 0.0;
  Vector grad;          // empty when not requested
  double part1 = 0.0;   // deformation term (combined loss)
  double part2 = 0.0;   // interpolation term (combined loss)
};

/// First grid index used by residual losses. The diffusion path has no time derivative at t = 0.
inline int first_grid_point(const Interpolant& ip) { return ip.kind == InterpKind::mixture_diffusion ? 1 : 0; }

namespace detail {

inline std::vector<std::pair<Eigen::Index, Eigen::Index>> chunks(Eigen::Index batch, std::size_t chunk) {
  if (batch <= 0) throw Error("empty batch");
  const auto c = static_cast<Eigen::Index>(std::max<std::size_t>(1, chunk));
  std::vector<std::pair<Eigen::Index, Eigen::Index>> out;
  for (Eigen::Index b = 0; b < batch; b += c) out.emplace_back(b, std::min(batch, b + c));
  return out;
}

/// Sums per-chunk (value, gradient) pairs in chunk order so the result does not depend on threading.
template <class ChunkFn>
LossResult reduce_chunks(const ParamStore& params, Eigen::Index batch, std::size_t chunk, bool with_grad,
                         ChunkFn&& fn) {
  const auto parts = chunks(batch, chunk);
  std::vector<LossResult> results(parts.size());
  parallel_for(parts.size(), [&](std::size_t i) { results[i] = fn(parts[i].first, parts[i].second, with_grad); });
  LossResult total;
  if (with_grad) total.grad = Vector::Zero(static_cast<Eigen::Index>(params.size()));
  for (const auto& r : results) {
    total.value += r.value;
    total.part1 += r.part1;
    total.part2 += r.part2;
    if (with_grad) total.grad += r.grad;
  }
  return total;
}

template <class Build>
LossResult run_chunk(const ParamStore& params, bool with_grad, Build&& build) {
  LossResult r;
  if (with_grad) {
    Tape tape(params);
    const auto out = build(tape);
    r.value = tape.value(out)(0, 0);
    r.grad = Vector::Zero(static_cast<Eigen::Index>(params.size()));
    tape.backward(out, std::span<double>(r.grad.data(), params.size()));
  } else {
    Eval ctx(params);
    r.value = build(ctx)(0, 0);
  }
  return r;
}

template <Context Ctx>
typename Ctx::Var weighted_penalty_sum(Ctx& ctx, PenaltyKind kind, const typename Ctx::Var& e,
                                       const RowVector& coeff) {
  return ctx.sum(ctx.scale_cols(penalty(ctx, kind, e), coeff));
}

inline void require_finite_residuals(const Matrix& e, Eigen::Index b0, Eigen::Index g, const Collocation& c,
                                     int k0) {
  for (Eigen::Index col = 0; col < e.cols(); ++col)
    if (!std::isfinite(e(0, col)))
      throw NumericalError("non-finite residual at sample " + std::to_string(b0 + col / g) + ", t = " +
                           std::to_string(c.times[static_cast<std::size_t>(k0 + col % g)]));
}

}  // namespace detail

/// Weighted grid average of penalty(residual) for any residual evaluator r(t_row, X) -> RowVector.
template <class ResidualFn>
double deformation_loss_value(const ResidualFn& residual, const Collocation& c, const RowVector& weights,
                              PenaltyKind kind, int k0 = 0) {
  const auto g = static_cast<Eigen::Index>(c.times.size()) - k0;
  const auto blk = collocation_block(c, 0, c.batch(), k0);
  const RowVector e = residual(blk.t, blk.x);
  detail::require_finite_residuals(e, 0, g, c, k0);
  double total = 0.0;
  for (Eigen::Index b = 0; b < c.batch(); ++b) {
    double s = 0.0;
    for (Eigen::Index k = 0; k < g; ++k) s += penalty(kind, e(b * g + k));
    total += weights(b) * s / static_cast<double>(g);
  }
  return total / static_cast<double>(c.batch());
}

/// Deformation loss of the model on a frozen collocation with fixed normalized weights.
inline LossResult deformation_loss_frozen(const FlowModel& model, const Interpolant& ip, const Collocation& c,
                                          const RowVector& weights, const LossOptions& opt, bool with_grad) {
  const int k0 = first_grid_point(ip);
  const auto g = static_cast<Eigen::Index>(c.times.size()) - k0;
  const double denom = static_cast<double>(g) * static_cast<double>(c.batch());
  return detail::reduce_chunks(model.params, c.batch(), opt.chunk, with_grad,
                               [&](Eigen::Index b0, Eigen::Index b1, bool grad) {
    const auto blk = collocation_block(c, b0, b1, k0);
    RowVector coeff(blk.t.size());
    for (Eigen::Index b = b0; b < b1; ++b) coeff.segment((b - b0) * g, g).setConstant(weights(b) / denom);
    return detail::run_chunk(model.params, grad, [&](auto& ctx) {
      const auto e = deformation_residuals(ctx, model, ip, blk.t, blk.x, opt.fd);
      detail::require_finite_residuals(ctx.value(e), b0, g, c, k0);
      return detail::weighted_penalty_sum(ctx, opt.penalty, e, coeff);
    });
  });
}

/// Trajectory-weighted deformation loss on base samples z (columns).
inline LossResult deformation_loss(const FlowModel& model, const Interpolant& ip, const Matrix& z,
                                   const LossOptions& opt, bool with_grad = true) {
  const auto c = collocate(model, ip.base, z, opt.steps, opt.fd);
  const auto w = normalize_weights(log_trajectory_weights(c, ip.target));
  if (opt.weighting == TrajectoryWeighting::uniform)
    return deformation_loss_frozen(model, ip, c, RowVector::Ones(z.cols()), opt, with_grad);
  return deformation_loss_frozen(model, ip, c, w.normalized, opt, with_grad);
}

/// Mean of log q(x_1) + f_1(x_1), differentiated through the integrator and the divergence integral.
inline LossResult reverse_kl_loss(const FlowModel& model, const EnergySpec& base, const EnergySpec& target,
                                  const Matrix& z, const LossOptions& opt, bool with_grad = true) {
  const auto f1 = energy_field(target);
  const double inv_b = 1.0 / static_cast<double>(z.cols());
  return detail::reduce_chunks(model.params, z.cols(), opt.chunk, with_grad,
                               [&](Eigen::Index b0, Eigen::Index b1, bool grad) {
    const Matrix zc = z.middleCols(b0, b1 - b0);
    const RowVector log_p0 = log_densities(base, zc);
    return detail::run_chunk(model.params, grad, [&](auto& ctx) {
      const auto tr = integrate(ctx, VelocityField{&model.velocity}, ctx.constant(zc),
                                IntegratorConfig{opt.steps, 0.0, 1.0}, opt.fd);
      const auto log_q = ctx.sub(ctx.constant(log_p0), tr.div_integral.back());
      return ctx.scale(ctx.sum(ctx.add(log_q, ctx.field(f1, tr.states.back()))), inv_b);
    });
  });
}

/// Combined loss on a frozen, unweighted collocation: L1(deformation residual) + L2(interpolation residual).
/// The correction network enters the deformation term as a constant, and V and C do not appear in the
/// interpolation term, so (V, C) and (f, D) each receive gradient from one term only.
inline LossResult combined_loss_frozen(const FlowModel& model, const Interpolant& ip, const Collocation& c,
                                       const LossOptions& opt, bool with_grad) {
  if (ip.kind != InterpKind::learned || !model.d_head)
    throw ConfigError("train.objective", "combined loss needs a learned interpolant and a D head");
  const auto g = static_cast<Eigen::Index>(c.times.size());
  const double inv = 1.0 / (static_cast<double>(g) * static_cast<double>(c.batch()));
  return detail::reduce_chunks(model.params, c.batch(), opt.chunk, with_grad,
                               [&](Eigen::Index b0, Eigen::Index b1, bool grad) {
    const auto blk = collocation_block(c, b0, b1, 0);
    const RowVector coeff = RowVector::Constant(blk.t.size(), inv);
    double p1 = 0.0, p2 = 0.0;
    auto r = detail::run_chunk(model.params, grad, [&](auto& ctx) {
      const auto e1 = deformation_residuals(ctx, model, ip, blk.t, blk.x, opt.fd, false);
      const auto d = interp_derivs(ctx, ip, blk.t, blk.x, opt.fd, true, true);
      const auto e2 =
          interpolation_residual(ctx, blk.t, blk.x, d, time_head_forward(ctx, *model.d_head, blk.t), opt.sigma);
      detail::require_finite_residuals(ctx.value(e1), b0, g, c, 0);
      detail::require_finite_residuals(ctx.value(e2), b0, g, c, 0);
      const auto l1 = detail::weighted_penalty_sum(ctx, opt.penalty, e1, coeff);
      const auto l2 = detail::weighted_penalty_sum(ctx, opt.penalty2, e2, coeff);
      p1 = ctx.value(l1)(0, 0);
      p2 = ctx.value(l2)(0, 0);
      if (opt.combined_term == 1) return l1;
      if (opt.combined_term == 2) return l2;
      return ctx.add(l1, l2);
    });
    r.part1 = p1;
    r.part2 = p2;
    return r;
  });
}

inline LossResult combined_loss(const FlowModel& model, const Interpolant& ip, const Matrix& z,
                                const LossOptions& opt, bool with_grad = true) {
  const auto c = collocate(model, ip.base, z, opt.steps, opt.fd, false);
  return combined_loss_frozen(model, ip, c, opt, with_grad);
}

}  // namespace dflow

#pragma once

// Fixed-step RK4 transport along a time-dependent vector field with the
// divergence integral accumulated by the trapezoidal rule on the grid states.

#include <Eigen/Dense>
#include <string>
#include <utility>
#include <vector>

#include "dflow/energies/energy.hpp"
#include "dflow/engine/errors.hpp"
#include "dflow/engine/finite_diff.hpp"
#include "dflow/engine/tape.hpp"
#include "dflow/nets/flow_model.hpp"

namespace dflow {

struct IntegratorConfig {
  int steps = 50;
  double t0 = 0.0;
  double t1 = 1.0;

  void validate() const {
    if (steps < 1) throw ConfigError("train.integration_steps", "must be at least 1");
  }
  double time(int k) const { return t0 + (t1 - t0) * static_cast<double>(k) / static_cast<double>(steps); }
  double dt() const { return (t1 - t0) / static_cast<double>(steps); }
};

/// Grid states of a batch of trajectories (one column per sample).
template <Context Ctx>
struct TrajectoryBatch {
  std::vector<double> times;
  std::vector<typename Ctx::Var> states;        // n x B per grid point
  std::vector<typename Ctx::Var> divergence;    // 1 x B, div V at each grid state
  std::vector<typename Ctx::Var> div_integral;  // 1 x B, integral of div V from t0 to t_k
};

using Trajectory = TrajectoryBatch<Eval>;

/// The learned velocity field V_t(x) = sum_k kappa_k(t) MLP_k(x).
struct VelocityField {
  const RbfTimeEnsemble* net;

  template <Context Ctx>
  typename Ctx::Var operator()(Ctx& ctx, const RowVector& t, const typename Ctx::Var& x) const {
    return ensemble_forward(ctx, *net, x, net->kernels.weights(t));
  }
};

/// Field value and central-difference divergence at the columns of `x`, all at time `t`.
template <Context Ctx, class Field>
std::pair<typename Ctx::Var, typename Ctx::Var> field_and_divergence(Ctx& ctx, const Field& field, double t,
                                                                     const typename Ctx::Var& x,
                                                                     const FDConfig& fd) {
  const Matrix xv = ctx.value(x);
  const RowVector h = fd.space_steps(xv);
  const auto pts = ctx.stencil(x, h);
  const auto vs = field(ctx, RowVector::Constant(ctx.value(pts).cols(), t), pts);
  if (ctx.value(vs).rows() != xv.rows()) throw DimensionError("vector field output dimension mismatch");
  return {ctx.stencil_center(vs, xv.cols()), ctx.stencil_div(vs, h)};
}

namespace detail {
inline void require_finite_state(const Matrix& x, int k, double t) {
  if (!x.allFinite())
    throw NumericalError("non-finite trajectory state at step " + std::to_string(k) + " (t = " + std::to_string(t) +
                         "); max |x| before blow-up exceeded double range");
}
}  // namespace detail

/// Integrates dx/dt = V_t(x) from cfg.t0 to cfg.t1 (either direction) with classical RK4.
template <Context Ctx, class Field>
TrajectoryBatch<Ctx> integrate(Ctx& ctx, const Field& field, const typename Ctx::Var& z, const IntegratorConfig& cfg,
                               const FDConfig& fd, bool track_divergence = true) {
  cfg.validate();
  using Var = typename Ctx::Var;
  const Eigen::Index b = ctx.value(z).cols();
  const double dt = cfg.dt();
  TrajectoryBatch<Ctx> tr;
  tr.times.reserve(static_cast<std::size_t>(cfg.steps) + 1);
  tr.states.reserve(static_cast<std::size_t>(cfg.steps) + 1);
  Var x = z;
  for (int k = 0;; ++k) {
    const double t = cfg.time(k);
    tr.times.push_back(t);
    tr.states.push_back(x);
    Var k1;
    if (track_divergence) {
      auto [v, div] = field_and_divergence(ctx, field, t, x, fd);
      k1 = v;
      if (k == 0)
        tr.div_integral.push_back(ctx.constant(Matrix::Zero(1, b)));
      else
        tr.div_integral.push_back(
            ctx.add(tr.div_integral.back(), ctx.scale(ctx.add(tr.divergence.back(), div), 0.5 * dt)));
      tr.divergence.push_back(div);
    }
    if (k == cfg.steps) break;
    const RowVector t_a = RowVector::Constant(b, t);
    const RowVector t_mid = RowVector::Constant(b, t + 0.5 * dt);
    const RowVector t_b = RowVector::Constant(b, cfg.time(k + 1));
    if (!track_divergence) k1 = field(ctx, t_a, x);
    const Var k2 = field(ctx, t_mid, ctx.add(x, ctx.scale(k1, 0.5 * dt)));
    const Var k3 = field(ctx, t_mid, ctx.add(x, ctx.scale(k2, 0.5 * dt)));
    const Var k4 = field(ctx, t_b, ctx.add(x, ctx.scale(k3, dt)));
    const Var incr = ctx.add(ctx.add(k1, k4), ctx.scale(ctx.add(k2, k3), 2.0));
    x = ctx.add(x, ctx.scale(incr, dt / 6.0));
    detail::require_finite_state(ctx.value(x), k + 1, cfg.time(k + 1));
  }
  return tr;
}

/// Plain single-trajectory integration of the model's velocity field from z.
inline Trajectory integrate_forward(const Vector& z, const FlowModel& model, const IntegratorConfig& cfg,
                                    const FDConfig& fd = {}) {
  Eval ctx(model.params);
  return integrate(ctx, VelocityField{&model.velocity}, Matrix(z), cfg, fd);
}

/// Pushforward of base samples: x1 = gamma_1(z), log q(x1) = log p_base(z) - int_0^1 div V.
struct Pushforward {
  Matrix x;
  RowVector log_q;
};

template <class Field>
Pushforward log_q_of_pushforward(const Field& field, const ParamStore& params, const EnergySpec& base,
                                 const Matrix& z, int steps, const FDConfig& fd = {}) {
  Eval ctx(params);
  const auto tr = integrate(ctx, field, z, IntegratorConfig{steps, 0.0, 1.0}, fd);
  return {tr.states.back(), log_densities(base, z) - RowVector(tr.div_integral.back())};
}

inline Pushforward log_q_of_pushforward(const FlowModel& model, const EnergySpec& base, const Matrix& z, int steps,
                                        const FDConfig& fd = {}) {
  return log_q_of_pushforward(VelocityField{&model.velocity}, model.params, base, z, steps, fd);
}

/// Preimage z of x under the flow and log q(x), by integrating from t = 1 back to t = 0.
struct Pullback {
  Matrix z;
  RowVector log_q;
};

template <class Field>
Pullback integrate_backward(const Field& field, const ParamStore& params, const EnergySpec& base, const Matrix& x,
                            int steps, const FDConfig& fd = {}) {
  Eval ctx(params);
  const auto tr = integrate(ctx, field, x, IntegratorConfig{steps, 1.0, 0.0}, fd);
  // div_integral holds int_1^0 div V = -int_0^1 div V.
  return {tr.states.back(), log_densities(base, tr.states.back()) + RowVector(tr.div_integral.back())};
}

inline Pullback integrate_backward(const FlowModel& model, const EnergySpec& base, const Matrix& x, int steps,
                                   const FDConfig& fd = {}) {
  return integrate_backward(VelocityField{&model.velocity}, model.params, base, x, steps, fd);
}

}  // namespace dflow

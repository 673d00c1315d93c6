#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <functional>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include "dflow/energies/energy.hpp"
#include "dflow/engine/errors.hpp"
#include "dflow/engine/random.hpp"
#include "dflow/interp/interpolant.hpp"
#include "dflow/metrics/metrics.hpp"
#include "dflow/nets/flow_model.hpp"
#include "dflow/objectives/losses.hpp"

namespace dflow {

enum class Objective {
  reverse_kl,
  deformation_linear,
  deformation_learned,
  deformation_diffusion_closed_form,
  combined_appendix,
};

inline const char* objective_name(Objective o) {
  switch (o) {
    case Objective::reverse_kl: return "reverse_kl";
    case Objective::deformation_linear: return "deformation_linear";
    case Objective::deformation_learned: return "deformation_learned";
    case Objective::deformation_diffusion_closed_form: return "deformation_diffusion_closed_form";
    case Objective::combined_appendix: return "combined_appendix";
  }
  return "?";
}

inline Objective parse_objective(const std::string& s) {
  for (auto o : {Objective::reverse_kl, Objective::deformation_linear, Objective::deformation_learned,
                 Objective::deformation_diffusion_closed_form, Objective::combined_appendix})
    if (s == objective_name(o)) return o;
  throw ConfigError("train.objective", "unknown objective '" + s + "'");
}

/// Interpolation family implied by an objective (reverse KL uses none; linear is reported).
inline InterpKind objective_interp(Objective o) {
  switch (o) {
    case Objective::deformation_learned:
    case Objective::combined_appendix: return InterpKind::learned;
    case Objective::deformation_diffusion_closed_form: return InterpKind::mixture_diffusion;
    default: return InterpKind::linear;
  }
}

struct TrainConfig {
  Objective objective = Objective::deformation_linear;
  long steps = 10000;
  long batch = 256;
  long eval_batch = 4096;
  double lr0 = 3e-3;
  PenaltyKind penalty = PenaltyKind::abs_plus_square;
  PenaltyKind penalty2 = PenaltyKind::abs_plus_square;
  TrajectoryWeighting weighting = TrajectoryWeighting::importance;
  int integration_steps = 50;
  std::uint64_t seed = 0;
  long eval_every = 1000;
  double clip_norm = 100.0;  // 0 disables clipping
  std::size_t chunk = 16;
  FDConfig fd;

  void validate() const {
    if (steps < 0) throw ConfigError("train.steps", "must be non-negative");
    if (batch < 1) throw ConfigError("train.batch", "must be at least 1");
    if (eval_batch < 2) throw ConfigError("train.eval_batch", "must be at least 2");
    if (!(lr0 > 0.0)) throw ConfigError("train.lr0", "must be positive");
    if (integration_steps < 1) throw ConfigError("train.integration_steps", "must be at least 1");
    if (eval_every < 1) throw ConfigError("train.eval_every", "must be at least 1");
    if (clip_norm < 0.0) throw ConfigError("train.clip_norm", "must be non-negative");
    if (chunk < 1) throw ConfigError("train.chunk", "must be at least 1");
    fd.validate();
  }
};

/// Cosine annealing from lr0 at step 0 to 0 at step `steps`.
inline double lr_schedule(long step, const TrainConfig& cfg) {
  if (step < 0 || step > cfg.steps) throw Error("learning-rate step outside [0, steps]");
  if (cfg.steps == 0) return cfg.lr0;
  return cfg.lr0 * 0.5 * (1.0 + std::cos(std::numbers::pi * static_cast<double>(step) / static_cast<double>(cfg.steps)));
}

struct OptimizerState {
  Vector m;
  Vector v;
  long step = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  explicit OptimizerState(std::size_t n = 0) : m(Vector::Zero(static_cast<Eigen::Index>(n))), v(m) {}
};

/// One bias-corrected Adam update of `params` in place.
inline void adam_step(std::span<double> params, const Vector& grad, OptimizerState& st, double lr) {
  const auto n = static_cast<Eigen::Index>(params.size());
  if (grad.size() != n || st.m.size() != n) throw DimensionError("adam: gradient and moments must match parameters");
  if (!grad.allFinite()) throw NumericalError("adam: non-finite gradient");
  ++st.step;
  st.m = st.beta1 * st.m + (1.0 - st.beta1) * grad;
  st.v = st.beta2 * st.v + (1.0 - st.beta2) * grad.cwiseProduct(grad);
  const double c1 = 1.0 - std::pow(st.beta1, static_cast<double>(st.step));
  const double c2 = 1.0 - std::pow(st.beta2, static_cast<double>(st.step));
  Eigen::Map<Vector> theta(params.data(), n);
  theta.array() -= lr * (st.m.array() / c1) / ((st.v.array() / c2).sqrt() + st.eps);
}

/// Rescales `grad` to global norm at most `max_norm`; returns the norm before clipping.
inline double clip_gradient(Vector& grad, double max_norm) {
  const double norm = grad.norm();
  if (max_norm > 0.0 && norm > max_norm) grad *= max_norm / norm;
  return norm;
}

/// Everything needed to build and train a model.
struct RunSpec {
  EnergySpec base;
  EnergySpec target;
  NetConfig net;
  TrainConfig train;

  void validate() const {
    dflow::validate(base);
    dflow::validate(target);
    if (energy_dim(base) != energy_dim(target)) throw ConfigError("base.dim", "base and target dimensions differ");
    net.validate();
    train.validate();
    const auto kind = objective_interp(train.objective);
    if (kind == InterpKind::mixture_diffusion || train.objective == Objective::combined_appendix) {
      if (!std::holds_alternative<NormalBaseSpec>(base))
        throw ConfigError("base.kind", "this objective needs a normal base");
    }
    if (kind == InterpKind::mixture_diffusion && !std::holds_alternative<GaussianMixtureSpec>(target))
      throw ConfigError("target.kind", "closed-form diffusion interpolation needs a Gaussian-mixture target");
  }

  double base_sigma() const {
    if (const auto* b = std::get_if<NormalBaseSpec>(&base)) return b->std;
    if (const auto* g = std::get_if<GenGaussianBaseSpec>(&base)) return g->sigma;
    return 1.0;
  }
};

inline FlowModel build_model(const RunSpec& run) {
  const auto kind = objective_interp(run.train.objective);
  auto m = FlowModel::create(energy_dim(run.target), run.net, kind == InterpKind::learned,
                             run.train.objective == Objective::combined_appendix);
  m.initialize(run.train.seed);
  return m;
}

inline Interpolant build_interpolant(const RunSpec& run, const FlowModel& model) {
  Interpolant ip;
  ip.kind = objective_interp(run.train.objective);
  ip.base = run.base;
  ip.target = run.target;
  ip.sigma_base = run.base_sigma();
  if (ip.kind == InterpKind::learned) ip.correction = model.correction;
  ip.validate();
  return ip;
}

inline LossOptions loss_options(const RunSpec& run) {
  LossOptions o;
  o.penalty = run.train.penalty;
  o.penalty2 = run.train.penalty2;
  o.weighting = run.train.weighting;
  o.steps = run.train.integration_steps;
  o.fd = run.train.fd;
  o.chunk = run.train.chunk;
  o.sigma = run.base_sigma();
  return o;
}

/// Objective value and gradient for one batch of base samples.
inline LossResult objective_loss(const RunSpec& run, const FlowModel& model, const Interpolant& ip, const Matrix& z,
                                 bool with_grad = true) {
  const auto opt = loss_options(run);
  switch (run.train.objective) {
    case Objective::reverse_kl: return reverse_kl_loss(model, run.base, run.target, z, opt, with_grad);
    case Objective::combined_appendix: return combined_loss(model, ip, z, opt, with_grad);
    default: return deformation_loss(model, ip, z, opt, with_grad);
  }
}

/// Training batch for `step`; every step has its own random stream.
inline Matrix training_batch(const RunSpec& run, long step) {
  return sample_base(run.base, static_cast<std::size_t>(run.train.batch), run.train.seed, streams::train_batch,
                     static_cast<std::uint64_t>(step));
}

/// Thrown when a step produces a non-finite loss or gradient.
class TrainingAborted : public NumericalError {
 public:
  TrainingAborted(long step, const std::string& why, Matrix batch)
      : NumericalError("training aborted at step " + std::to_string(step) + ": " + why),
        step_(step),
        batch_(std::move(batch)) {}
  long step() const noexcept { return step_; }
  const Matrix& batch() const noexcept { return batch_; }

 private:
  long step_;
  Matrix batch_;
};

/// Checks that the deformation term of the combined loss only reaches (V, C) and the
/// interpolation term only reaches (f, D). Throws on violation.
inline void check_gradient_routing(const RunSpec& run, const FlowModel& model, const Interpolant& ip,
                                   const Matrix& z) {
  auto opt = loss_options(run);
  const auto c = collocate(model, ip.base, z, opt.steps, opt.fd, false);
  const std::pair<const char*, int> blocks[] = {{"V", 1}, {"C", 1}, {"f", 2}, {"D", 2}};
  for (int term : {1, 2}) {
    opt.combined_term = term;
    const auto r = combined_loss_frozen(model, ip, c, opt, true);
    for (const auto& [name, owner] : blocks) {
      if (owner == term) continue;
      const auto [off, len] = model.block(name);
      if (r.grad.segment(static_cast<Eigen::Index>(off), static_cast<Eigen::Index>(len)).cwiseAbs().maxCoeff() != 0.0)
        throw Error(std::string("combined loss leaks gradient into block ") + name);
    }
  }
}

struct TrainHooks {
  std::function<void(const MetricsRecord&, const FlowModel&)> on_eval;
  std::function<void(long step, double loss)> on_step;
};

struct TrainResult {
  FlowModel model;
  std::vector<MetricsRecord> history;
  std::vector<double> losses;
};

inline bool is_eval_step(long step, const TrainConfig& cfg) {
  return step % cfg.eval_every == 0 || step == cfg.steps;
}

inline MetricsRecord evaluate_model(const RunSpec& run, const FlowModel& model, long step) {
  auto rec = evaluate(model, run.base, run.target, static_cast<std::size_t>(run.train.eval_batch), run.train.seed,
                      run.train.integration_steps, run.train.fd)
                 .record;
  rec.step = step;
  return rec;
}

/// Adam on the configured objective with cosine annealing and global-norm clipping.
/// Metrics are evaluated at step 0, every eval_every steps, and at the final step.
inline TrainResult train(const RunSpec& run, const TrainHooks& hooks = {}) {
  run.validate();
  TrainResult res{build_model(run), {}, {}};
  FlowModel& model = res.model;
  const Interpolant ip = build_interpolant(run, model);
  OptimizerState opt(model.params.size());
  auto eval_now = [&](long step) {
    if (run.train.objective == Objective::combined_appendix)
      check_gradient_routing(run, model, ip, sample_base(run.base, 4, run.train.seed, streams::dump));
    res.history.push_back(evaluate_model(run, model, step));
    if (hooks.on_eval) hooks.on_eval(res.history.back(), model);
  };
  eval_now(0);
  for (long step = 0; step < run.train.steps; ++step) {
    const Matrix z = training_batch(run, step);
    LossResult r;
    try {
      r = objective_loss(run, model, ip, z);
    } catch (const NumericalError& e) {
      throw TrainingAborted(step, e.what(), z);
    }
    if (!std::isfinite(r.value)) throw TrainingAborted(step, "non-finite loss", z);
    if (!r.grad.allFinite()) throw TrainingAborted(step, "non-finite gradient", z);
    clip_gradient(r.grad, run.train.clip_norm);
    adam_step(model.params.values(), r.grad, opt, lr_schedule(step, run.train));
    res.losses.push_back(r.value);
    if (hooks.on_step) hooks.on_step(step + 1, r.value);
    if (is_eval_step(step + 1, run.train)) eval_now(step + 1);
  }
  return res;
}

}  // namespace dflow

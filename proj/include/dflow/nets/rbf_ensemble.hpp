#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "dflow/engine/errors.hpp"
#include "dflow/engine/param_store.hpp"
#include "dflow/engine/tape.hpp"
#include "dflow/nets/mlp.hpp"

namespace dflow {

/// Evenly spaced Gaussian kernels in time: centers k/(K-1), shared bandwidth.
struct TimeKernels {
  int count = 2;
  double bandwidth = 1.0;

  static TimeKernels make(int count, double bandwidth = 0.0) {
    if (count < 2) throw ConfigError("net.kernels", "need at least 2 time kernels");
    TimeKernels k{count, bandwidth > 0.0 ? bandwidth : 1.0 / static_cast<double>(count - 1)};
    return k;
  }

  double center(int k) const { return static_cast<double>(k) / static_cast<double>(count - 1); }

  /// kappa_k(t) = exp(-(t - c_k)^2 / (2 l^2)), not normalized across k.
  Vector weights(double t) const {
    Vector w(count);
    for (int k = 0; k < count; ++k) {
      const double d = t - center(k);
      w(k) = std::exp(-d * d / (2.0 * bandwidth * bandwidth));
    }
    return w;
  }

  /// K x M matrix of kernel weights, one column per time.
  Matrix weights(const RowVector& times) const {
    Matrix w(count, times.cols());
    for (Eigen::Index j = 0; j < times.cols(); ++j) w.col(j) = weights(times(j));
    return w;
  }
};

/// Time-dependent function sum_k kappa_k(t) * MLP_k(x).
struct RbfTimeEnsemble {
  MlpSpec spec;
  TimeKernels kernels;
  std::vector<MlpLayout> members;
  std::string prefix;

  static RbfTimeEnsemble allocate(ParamStore& params, const std::string& prefix, const MlpSpec& spec,
                                  const TimeKernels& kernels) {
    RbfTimeEnsemble e{spec, kernels, {}, prefix};
    for (int k = 0; k < kernels.count; ++k)
      e.members.push_back(MlpLayout::allocate(params, prefix + "/k" + std::to_string(k), spec));
    return e;
  }

  std::size_t param_count() const { return spec.param_count() * static_cast<std::size_t>(kernels.count); }
};

/// Sum over k of kappa_k(t_j) * MLP_k(x_j), with per-column times given as a K x M weight matrix.
template <Context Ctx>
typename Ctx::Var ensemble_forward(Ctx& ctx, const RbfTimeEnsemble& e, const typename Ctx::Var& x,
                                   const Matrix& kappa) {
  if (ctx.value(x).rows() != e.spec.in_dim)
    throw DimensionError("ensemble '" + e.prefix + "' expects input dimension " + std::to_string(e.spec.in_dim));
  typename Ctx::Var acc = ctx.scale_cols(mlp_forward(ctx, e.members[0], x), kappa.row(0));
  for (std::size_t k = 1; k < e.members.size(); ++k)
    acc = ctx.add(acc, ctx.scale_cols(mlp_forward(ctx, e.members[k], x), kappa.row(static_cast<Eigen::Index>(k))));
  return acc;
}

/// Several kernel weightings of the same member outputs (used for time stencils).
template <Context Ctx>
std::vector<typename Ctx::Var> ensemble_forward_multi(Ctx& ctx, const RbfTimeEnsemble& e,
                                                      const typename Ctx::Var& x,
                                                      const std::vector<Matrix>& kappas) {
  if (ctx.value(x).rows() != e.spec.in_dim)
    throw DimensionError("ensemble '" + e.prefix + "' expects input dimension " + std::to_string(e.spec.in_dim));
  std::vector<typename Ctx::Var> outs;
  std::vector<typename Ctx::Var> members;
  for (const auto& m : e.members) members.push_back(mlp_forward(ctx, m, x));
  for (const auto& kappa : kappas) {
    typename Ctx::Var acc = ctx.scale_cols(members[0], kappa.row(0));
    for (std::size_t k = 1; k < members.size(); ++k)
      acc = ctx.add(acc, ctx.scale_cols(members[k], kappa.row(static_cast<Eigen::Index>(k))));
    outs.push_back(acc);
  }
  return outs;
}

/// Single-point evaluation at (t, x).
inline Vector ensemble_eval(double t, const Vector& x, const RbfTimeEnsemble& e, const ParamStore& params) {
  Eval ctx(params);
  RowVector times = RowVector::Constant(1, t);
  return ensemble_forward(ctx, e, Matrix(x), e.kernels.weights(times)).col(0);
}

/// Time-only function sum_k kappa_k(t) * c_k.
struct TimeScalarHead {
  TimeKernels kernels;
  std::size_t offset = 0;
  std::string name;
  double scale = 1.0;

  static TimeScalarHead allocate(ParamStore& params, const std::string& name, const TimeKernels& kernels,
                                 double scale = 1.0) {
    return {kernels, params.add_slice(name, static_cast<std::size_t>(kernels.count)), name, scale};
  }
};

template <Context Ctx>
typename Ctx::Var time_head_forward(Ctx& ctx, const TimeScalarHead& h, const RowVector& times) {
  if (h.scale == 1.0) return ctx.head(h.offset, h.kernels.weights(times));
  return ctx.head(h.offset, (h.scale * h.kernels.weights(times).array()).matrix());
}

inline double time_scalar_eval(double t, const TimeScalarHead& h, const ParamStore& params) {
  Eval ctx(params);
  return time_head_forward(ctx, h, RowVector::Constant(1, t))(0, 0);
}

}  // namespace dflow

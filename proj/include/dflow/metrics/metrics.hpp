#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "dflow/energies/energy.hpp"
#include "dflow/engine/errors.hpp"
#include "dflow/engine/parallel.hpp"
#include "dflow/engine/random.hpp"
#include "dflow/flow/integrator.hpp"
#include "dflow/nets/flow_model.hpp"

namespace dflow {

namespace detail {

inline void require_samples(Eigen::Index n, Eigen::Index need, const char* what) {
  if (n < need) throw Error(std::string(what) + " needs at least " + std::to_string(need) + " samples");
}

inline void require_finite_row(const RowVector& r, const char* what) {
  for (Eigen::Index j = 0; j < r.size(); ++j)
    if (!std::isfinite(r(j))) throw NumericalError(std::string("non-finite ") + what + " at sample " + std::to_string(j));
}

/// (mean r)^2 / mean(r^2) for r = exp(log_r), computed with max subtraction.
inline double ess_from_log_ratios(const RowVector& log_r) {
  require_finite_row(log_r, "importance log-ratio");
  const double m = log_r.maxCoeff();
  const Eigen::ArrayXd r = (log_r.array() - m).exp().transpose();
  const double mean = r.mean();
  const double mean_sq = r.square().mean();
  if (!(mean_sq > 0.0)) throw NumericalError("all importance weights are zero");
  return mean * mean / mean_sq;
}

}  // namespace detail

/// Reverse KL minus log Z: mean of log q(x) + f_1(x) over x ~ q.
inline double rev_kl(const RowVector& log_q, const RowVector& f1) {
  detail::require_samples(log_q.size(), 2, "rev_kl");
  if (f1.size() != log_q.size()) throw DimensionError("rev_kl: length mismatch");
  const RowVector s = log_q + f1;
  detail::require_finite_row(s, "log q + f");
  return s.mean();
}

/// Reverse effective sample size in [0, 1]; invariant to constants added to f_1.
inline double ess_reverse(const RowVector& log_q, const RowVector& f1) {
  detail::require_samples(log_q.size(), 1, "ess_reverse");
  if (f1.size() != log_q.size()) throw DimensionError("ess_reverse: length mismatch");
  return detail::ess_from_log_ratios(-f1 - log_q);
}

/// max over means m of min over samples x of |m - x|.
inline double hausdorff(const std::vector<Vector>& means, const Matrix& samples) {
  if (means.empty() || samples.cols() == 0) throw Error("hausdorff needs nonempty means and samples");
  double worst = 0.0;
  for (const auto& m : means) {
    if (m.size() != samples.rows()) throw DimensionError("hausdorff: dimension mismatch");
    const double best = (samples.colwise() - m).colwise().squaredNorm().minCoeff();
    worst = std::max(worst, best);
  }
  return std::sqrt(worst);
}

struct ForwardMetrics {
  double fwd_kl = 0.0;  // forward KL plus log Z (zero for normalized targets)
  double ess_f = 0.0;
};

/// Forward KL and ESS from exact target samples and log q evaluated at them.
inline ForwardMetrics forward_metrics(const RowVector& log_p, const RowVector& log_q) {
  detail::require_samples(log_p.size(), 2, "fwd_kl");
  if (log_q.size() != log_p.size()) throw DimensionError("fwd_kl: length mismatch");
  const RowVector d = log_p - log_q;
  detail::require_finite_row(d, "log p - log q");
  return {d.mean(), detail::ess_from_log_ratios(-d)};
}

/// Push base samples through the flow in parallel chunks (deterministic, chunk-independent results).
inline Pushforward pushforward_batched(const FlowModel& model, const EnergySpec& base, const Matrix& z, int steps,
                                       const FDConfig& fd = {}, Eigen::Index chunk = 256) {
  Pushforward out{Matrix(z.rows(), z.cols()), RowVector(z.cols())};
  const Eigen::Index parts = (z.cols() + chunk - 1) / chunk;
  parallel_for(static_cast<std::size_t>(parts), [&](std::size_t i) {
    const Eigen::Index b0 = static_cast<Eigen::Index>(i) * chunk, len = std::min(chunk, z.cols() - b0);
    const auto p = log_q_of_pushforward(model, base, z.middleCols(b0, len), steps, fd);
    out.x.middleCols(b0, len) = p.x;
    out.log_q.segment(b0, len) = p.log_q;
  });
  return out;
}

inline Pullback pullback_batched(const FlowModel& model, const EnergySpec& base, const Matrix& x, int steps,
                                 const FDConfig& fd = {}, Eigen::Index chunk = 256) {
  Pullback out{Matrix(x.rows(), x.cols()), RowVector(x.cols())};
  const Eigen::Index parts = (x.cols() + chunk - 1) / chunk;
  parallel_for(static_cast<std::size_t>(parts), [&](std::size_t i) {
    const Eigen::Index b0 = static_cast<Eigen::Index>(i) * chunk, len = std::min(chunk, x.cols() - b0);
    const auto p = integrate_backward(model, base, x.middleCols(b0, len), steps, fd);
    out.z.middleCols(b0, len) = p.z;
    out.log_q.segment(b0, len) = p.log_q;
  });
  return out;
}

/// Forward metrics of the model against exact target samples x (columns).
inline ForwardMetrics fwd_kl_and_ess(const FlowModel& model, const EnergySpec& base, const EnergySpec& target,
                                     const Matrix& x, int steps, const FDConfig& fd = {}) {
  if (!std::holds_alternative<GaussianMixtureSpec>(target))
    throw UnavailableError("forward metrics need exact target samples: no exact sampler for this target");
  const RowVector log_p = log_densities(target, x);
  return forward_metrics(log_p, pullback_batched(model, base, x, steps, fd).log_q);
}

/// The two local minima of the per-site potential -m phi^2 + lambda (phi - alpha)^4.
inline std::pair<double, double> phi4_modes(const Phi4Spec& s) {
  if (!(s.m > 0.0)) throw ConfigError("target.m", "phi4 potential needs m > 0 for two minima");
  s.validate();
  auto newton = [&](double x) {
    for (int it = 0; it < 100; ++it) {
      const double u = x - s.alpha;
      const double g = -2.0 * s.m * x + 4.0 * s.lambda * u * u * u;
      const double h = -2.0 * s.m + 12.0 * s.lambda * u * u;
      const double step = g / h;
      x -= step;
      if (std::abs(step) <= 1e-15 * std::max(1.0, std::abs(x))) return x;
    }
    throw NumericalError("phi4 mode search did not converge in 100 iterations");
  };
  const double x0 = std::sqrt(s.m / (2.0 * s.lambda));
  return {newton(-x0), newton(x0)};
}

/// Mode means used by the Hausdorff metric: mixture means, or constant fields for phi^4.
inline std::vector<Vector> mode_means(const EnergySpec& target) {
  if (const auto* g = std::get_if<GaussianMixtureSpec>(&target)) return g->means;
  if (const auto* p = std::get_if<Phi4Spec>(&target)) {
    const auto [a, b] = phi4_modes(*p);
    return {Vector::Constant(p->N, a), Vector::Constant(p->N, b)};
  }
  // Centered base densities peak at the origin.
  return {Vector::Zero(energy_dim(target))};
}

struct MeanFieldHistogram {
  std::vector<double> centers;
  std::vector<std::size_t> counts;
  std::vector<double> reference;  // density normalized so that sum(reference) * width = 1
  double width = 0.0;
};

/// Histogram of the per-sample field average against exp(N (m u^2 - lambda (u - alpha)^4)).
inline MeanFieldHistogram mean_field_histogram(const Matrix& samples, const Phi4Spec& s, int bins, double lo,
                                               double hi) {
  if (bins < 1 || !(hi > lo)) throw Error("histogram needs bins >= 1 and hi > lo");
  if (samples.rows() != s.N) throw DimensionError("histogram samples do not match lattice size");
  MeanFieldHistogram h;
  h.width = (hi - lo) / bins;
  h.counts.assign(static_cast<std::size_t>(bins), 0);
  std::vector<double> log_ref;
  for (int i = 0; i < bins; ++i) {
    const double u = lo + (i + 0.5) * h.width;
    h.centers.push_back(u);
    log_ref.push_back(s.N * (s.m * u * u - s.lambda * std::pow(u - s.alpha, 4)));
  }
  const double mx = *std::max_element(log_ref.begin(), log_ref.end());
  double total = 0.0;
  for (double l : log_ref) total += std::exp(l - mx);
  for (double l : log_ref) h.reference.push_back(std::exp(l - mx) / (total * h.width));
  const RowVector avg = samples.colwise().mean();
  for (Eigen::Index j = 0; j < avg.size(); ++j) {
    const double k = std::floor((avg(j) - lo) / h.width);
    if (k >= 0 && k < bins) ++h.counts[static_cast<std::size_t>(k)];
  }
  return h;
}

struct MetricsRecord {
  long step = 0;
  double rev_kl = 0.0;  // reverse KL minus log Z
  double ess_r = 0.0;
  double hausdorff = 0.0;
  std::optional<double> fwd_kl;  // forward KL plus log Z
  std::optional<double> ess_f;
  std::size_t n_samples = 0;
  std::uint64_t seed = 0;
};

struct Evaluation {
  MetricsRecord record;
  Matrix samples;  // model samples x_1
};

/// Draws n samples from the model and evaluates every available metric. Seeds use evaluation
/// streams disjoint from training batches.
inline Evaluation evaluate(const FlowModel& model, const EnergySpec& base, const EnergySpec& target, std::size_t n,
                           std::uint64_t seed, int steps, const FDConfig& fd = {}) {
  const Matrix z = sample_base(base, n, seed, streams::eval_base);
  const auto push = pushforward_batched(model, base, z, steps, fd);
  const RowVector f1 = energies(target, push.x);
  Evaluation ev;
  auto& r = ev.record;
  r.rev_kl = rev_kl(push.log_q, f1);
  r.ess_r = ess_reverse(push.log_q, f1);
  r.hausdorff = hausdorff(mode_means(target), push.x);
  r.n_samples = n;
  r.seed = seed;
  if (const auto* g = std::get_if<GaussianMixtureSpec>(&target)) {
    const Matrix x = sample_mixture(*g, n, seed, streams::eval_target);
    const auto fm = fwd_kl_and_ess(model, base, target, x, steps, fd);
    r.fwd_kl = fm.fwd_kl;
    r.ess_f = fm.ess_f;
  }
  ev.samples = push.x;
  return ev;
}

}  // namespace dflow

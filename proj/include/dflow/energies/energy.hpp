#pragma once

// Base and target energies f with p ∝ exp(-f).

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <numbers>
#include <random>
#include <string>
#include <variant>
#include <vector>

#include "dflow/engine/errors.hpp"
#include "dflow/engine/kernels.hpp"
#include "dflow/engine/random.hpp"

namespace dflow {

/// Isotropic Gaussian mixture sum_i w_i N(mu_i, var_i I).
struct GaussianMixtureSpec {
  std::vector<double> weights;
  std::vector<Vector> means;
  std::vector<double> variances;

  int dim() const { return means.empty() ? 0 : static_cast<int>(means.front().size()); }
  std::size_t size() const { return weights.size(); }

  void validate() const {
    if (weights.empty()) throw ConfigError("target.weights", "mixture needs at least one component");
    if (means.size() != weights.size() || variances.size() != weights.size())
      throw ConfigError("target.means", "weights, means and variances must have the same count");
    double total = 0.0;
    for (double w : weights) {
      if (!(w > 0.0)) throw ConfigError("target.weights", "weights must be positive");
      total += w;
    }
    if (std::abs(total - 1.0) > 1e-12) throw ConfigError("target.weights", "weights must sum to 1");
    for (double v : variances)
      if (!(v > 0.0)) throw ConfigError("target.variances", "variances must be positive");
    for (const auto& m : means)
      if (m.size() != means.front().size() || m.size() == 0)
        throw ConfigError("target.means", "all means need the same positive dimension");
  }
};

/// Lattice phi^4 on the cycle graph with N sites.
struct Phi4Spec {
  int N = 16;
  double m = 1.0;
  double lambda = 1.0 / 16.0;
  double alpha = 1e-2;

  void validate() const {
    if (N < 2) throw ConfigError("target.N", "lattice needs at least 2 sites");
    if (!(lambda > 0.0)) throw ConfigError("target.lambda", "quartic coupling must be positive");
  }
};

/// exp(-sum_i |x_i / sigma|^p).
struct GenGaussianBaseSpec {
  int n = 1;
  double sigma = 1.0;
  double p = 2.0;

  void validate() const {
    if (n < 1) throw ConfigError("base.dim", "must be at least 1");
    if (!(sigma > 0.0)) throw ConfigError("base.sigma", "must be positive");
    if (!(p >= 1.0)) throw ConfigError("base.p", "must be at least 1");
  }
};

/// exp(-|x|^2 / (2 std^2)).
struct NormalBaseSpec {
  int n = 1;
  double std = 1.0;

  void validate() const {
    if (n < 1) throw ConfigError("base.dim", "must be at least 1");
    if (!(std > 0.0)) throw ConfigError("base.std", "must be positive");
  }
};

using EnergySpec = std::variant<GaussianMixtureSpec, Phi4Spec, GenGaussianBaseSpec, NormalBaseSpec>;

inline int energy_dim(const EnergySpec& spec) {
  struct {
    int operator()(const GaussianMixtureSpec& s) const { return s.dim(); }
    int operator()(const Phi4Spec& s) const { return s.N; }
    int operator()(const GenGaussianBaseSpec& s) const { return s.n; }
    int operator()(const NormalBaseSpec& s) const { return s.n; }
  } v;
  return std::visit(v, spec);
}

inline void validate(const EnergySpec& spec) {
  std::visit([](const auto& s) { s.validate(); }, spec);
}

namespace detail {

inline void check_dim(const EnergySpec& spec, Eigen::Index n) {
  if (energy_dim(spec) != n)
    throw DimensionError("energy expects dimension " + std::to_string(energy_dim(spec)) + ", got " +
                         std::to_string(n));
}

/// log(w_i N(x; mu_i, var_i I)) for every component.
inline Vector mixture_component_logs(const GaussianMixtureSpec& s, const Eigen::Ref<const Vector>& x) {
  const double n = static_cast<double>(x.size());
  Vector logs(static_cast<Eigen::Index>(s.size()));
  for (std::size_t i = 0; i < s.size(); ++i) {
    const double v = s.variances[i];
    logs(static_cast<Eigen::Index>(i)) = std::log(s.weights[i]) - 0.5 * n * std::log(2.0 * std::numbers::pi * v) -
                                         (x - s.means[i]).squaredNorm() / (2.0 * v);
  }
  return logs;
}

inline double log_sum_exp(const Vector& a) {
  const double m = a.maxCoeff();
  if (!std::isfinite(m)) return m;
  return m + std::log((a.array() - m).exp().sum());
}

/// Softmax of the component logs (responsibilities).
inline Vector responsibilities(const Vector& logs) {
  const double m = logs.maxCoeff();
  Vector r = (logs.array() - m).exp().matrix();
  return r / r.sum();
}

}  // namespace detail

inline double energy(const EnergySpec& spec, const Eigen::Ref<const Vector>& x) {
  detail::check_dim(spec, x.size());
  struct {
    const Eigen::Ref<const Vector>& x;
    double operator()(const GaussianMixtureSpec& s) const {
      return -detail::log_sum_exp(detail::mixture_component_logs(s, x));
    }
    double operator()(const Phi4Spec& s) const {
      double e = 0.0;
      for (int i = 0; i < s.N; ++i) {
        const double d = x(i) - x((i + 1) % s.N);
        const double q = x(i) - s.alpha;
        e += d * d - s.m * x(i) * x(i) + s.lambda * q * q * q * q;
      }
      return e;
    }
    double operator()(const GenGaussianBaseSpec& s) const {
      double e = 0.0;
      for (Eigen::Index i = 0; i < x.size(); ++i) e += std::pow(std::abs(x(i) / s.sigma), s.p);
      return e;
    }
    double operator()(const NormalBaseSpec& s) const { return x.squaredNorm() / (2.0 * s.std * s.std); }
  } v{x};
  return std::visit(v, spec);
}

inline Vector energy_grad(const EnergySpec& spec, const Eigen::Ref<const Vector>& x) {
  detail::check_dim(spec, x.size());
  struct {
    const Eigen::Ref<const Vector>& x;
    Vector operator()(const GaussianMixtureSpec& s) const {
      const Vector r = detail::responsibilities(detail::mixture_component_logs(s, x));
      Vector g = Vector::Zero(x.size());
      for (std::size_t i = 0; i < s.size(); ++i)
        g += r(static_cast<Eigen::Index>(i)) * (x - s.means[i]) / s.variances[i];
      return g;
    }
    Vector operator()(const Phi4Spec& s) const {
      Vector g(s.N);
      for (int i = 0; i < s.N; ++i) {
        const double prev = x((i + s.N - 1) % s.N), next = x((i + 1) % s.N);
        const double q = x(i) - s.alpha;
        g(i) = 2.0 * (2.0 * x(i) - prev - next) - 2.0 * s.m * x(i) + 4.0 * s.lambda * q * q * q;
      }
      return g;
    }
    Vector operator()(const GenGaussianBaseSpec& s) const {
      Vector g(x.size());
      for (Eigen::Index i = 0; i < x.size(); ++i) {
        const double u = x(i) / s.sigma;
        g(i) = s.p * std::pow(std::abs(u), s.p - 1.0) * (u > 0 ? 1.0 : (u < 0 ? -1.0 : 0.0)) / s.sigma;
      }
      return g;
    }
    Vector operator()(const NormalBaseSpec& s) const { return x / (s.std * s.std); }
  } v{x};
  return std::visit(v, spec);
}

/// Normalized log-density; throws UnavailableError for phi^4 (unknown Z).
inline double log_density_exact(const EnergySpec& spec, const Eigen::Ref<const Vector>& x) {
  detail::check_dim(spec, x.size());
  struct {
    const Eigen::Ref<const Vector>& x;
    double operator()(const GaussianMixtureSpec& s) const {
      return detail::log_sum_exp(detail::mixture_component_logs(s, x));
    }
    double operator()(const Phi4Spec&) const {
      throw UnavailableError("phi4 target is unnormalized-only: log Z is unknown");
    }
    double operator()(const GenGaussianBaseSpec& s) const {
      const double log_z = std::log(2.0 * s.sigma * std::tgamma(1.0 + 1.0 / s.p));
      return -energy(EnergySpec{s}, x) - static_cast<double>(s.n) * log_z;
    }
    double operator()(const NormalBaseSpec& s) const {
      return -x.squaredNorm() / (2.0 * s.std * s.std) -
             0.5 * static_cast<double>(s.n) * std::log(2.0 * std::numbers::pi * s.std * s.std);
    }
  } v{x};
  return std::visit(v, spec);
}

/// Column-wise energies of a batch.
inline RowVector energies(const EnergySpec& spec, const Matrix& x) {
  RowVector e(x.cols());
  for (Eigen::Index j = 0; j < x.cols(); ++j) e(j) = energy(spec, x.col(j));
  return e;
}

inline RowVector log_densities(const EnergySpec& spec, const Matrix& x) {
  RowVector e(x.cols());
  for (Eigen::Index j = 0; j < x.cols(); ++j) e(j) = log_density_exact(spec, x.col(j));
  return e;
}

/// Energy as a differentiable column-wise tape primitive.
inline std::shared_ptr<const FieldFn> energy_field(const EnergySpec& spec) {
  auto fn = std::make_shared<FieldFn>();
  fn->name = "energy";
  fn->value = [spec](std::span<const double> x) {
    return energy(spec, Eigen::Map<const Vector>(x.data(), static_cast<Eigen::Index>(x.size())));
  };
  fn->gradient = [spec](std::span<const double> x, std::span<double> g) {
    Eigen::Map<Vector>(g.data(), static_cast<Eigen::Index>(g.size())) =
        energy_grad(spec, Eigen::Map<const Vector>(x.data(), static_cast<Eigen::Index>(x.size())));
  };
  return fn;
}

/// Exact i.i.d. samples from a base density, one per column.
inline Matrix sample_base(const EnergySpec& spec, std::size_t count, std::uint64_t seed,
                          std::uint64_t stream = 0, std::uint64_t index = 0) {
  auto rng = make_rng(seed, stream, index);
  if (const auto* s = std::get_if<NormalBaseSpec>(&spec)) {
    std::normal_distribution<double> normal(0.0, s->std);
    Matrix z(s->n, static_cast<Eigen::Index>(count));
    for (Eigen::Index j = 0; j < z.cols(); ++j)
      for (Eigen::Index i = 0; i < z.rows(); ++i) z(i, j) = normal(rng);
    return z;
  }
  if (const auto* s = std::get_if<GenGaussianBaseSpec>(&spec)) {
    std::gamma_distribution<double> gamma(1.0 / s->p, 1.0);
    std::bernoulli_distribution coin(0.5);
    Matrix z(s->n, static_cast<Eigen::Index>(count));
    for (Eigen::Index j = 0; j < z.cols(); ++j)
      for (Eigen::Index i = 0; i < z.rows(); ++i) {
        const double mag = s->sigma * std::pow(gamma(rng), 1.0 / s->p);
        z(i, j) = coin(rng) ? mag : -mag;
      }
    return z;
  }
  throw UnavailableError("sample_base needs a normal or generalized Gaussian base");
}

/// Exact i.i.d. mixture samples; `components`, when given, receives each draw's component index.
inline Matrix sample_mixture(const GaussianMixtureSpec& spec, std::size_t count, std::uint64_t seed,
                             std::uint64_t stream = 0, std::vector<int>* components = nullptr,
                             std::uint64_t index = 0) {
  spec.validate();
  auto rng = make_rng(seed, stream, index);
  std::uniform_real_distribution<double> uniform(0.0, 1.0);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<double> cumulative;
  double acc = 0.0;
  for (double w : spec.weights) cumulative.push_back(acc += w);
  const int n = spec.dim();
  Matrix x(n, static_cast<Eigen::Index>(count));
  if (components) components->assign(count, 0);
  for (Eigen::Index j = 0; j < x.cols(); ++j) {
    const double u = uniform(rng) * acc;
    std::size_t c = 0;
    while (c + 1 < cumulative.size() && u >= cumulative[c]) ++c;
    const double sd = std::sqrt(spec.variances[c]);
    for (int i = 0; i < n; ++i) x(i, j) = spec.means[c](i) + sd * normal(rng);
    if (components) (*components)[static_cast<std::size_t>(j)] = static_cast<int>(c);
  }
  return x;
}

}  // namespace dflow

#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <random>

#include "dflow/interp/interpolant.hpp"
#include "dflow/nets/flow_model.hpp"

using namespace dflow;

namespace {

GaussianMixtureSpec two_modes() {
  GaussianMixtureSpec g;
  g.weights = {1.0 / 3.0, 2.0 / 3.0};
  g.means = {(Vector(2) << 4.0, 4.0).finished(), (Vector(2) << -8.0, -8.0).finished()};
  g.variances = {1.0, 1.0};
  return g;
}

GaussianMixtureSpec random_mixture(std::mt19937_64& rng, int n, int k) {
  std::uniform_real_distribution<double> u(0.2, 1.0);
  std::normal_distribution<double> g;
  GaussianMixtureSpec m;
  double total = 0.0;
  for (int i = 0; i < k; ++i) {
    m.weights.push_back(u(rng));
    total += m.weights.back();
    Vector mu(n);
    for (int j = 0; j < n; ++j) mu(j) = 3.0 * g(rng);
    m.means.push_back(mu);
    m.variances.push_back(0.3 + 2.0 * u(rng));
  }
  for (auto& w : m.weights) w /= total;
  double s = 0.0;
  for (std::size_t i = 0; i + 1 < m.weights.size(); ++i) s += m.weights[i];
  m.weights.back() = 1.0 - s;
  return m;
}

Interpolant diffusion(const GaussianMixtureSpec& target, double sigma) {
  return Interpolant{InterpKind::mixture_diffusion, NormalBaseSpec{target.dim(), sigma}, target, sigma, std::nullopt};
}

struct Learned {
  FlowModel model;
  Interpolant ip;
};

Learned learned(int dim, std::uint64_t seed) {
  Learned l{FlowModel::create(dim, NetConfig{4, 2, 16, 0.0}, true, true), {}};
  l.model.initialize(seed);
  l.ip = Interpolant{InterpKind::learned, NormalBaseSpec{dim, 2.0}, two_modes(), 2.0, l.model.correction};
  return l;
}

double normal_pdf(double x, double mean, double var) {
  return std::exp(-(x - mean) * (x - mean) / (2 * var)) / std::sqrt(2 * std::numbers::pi * var);
}

}  // namespace

TEST(Interp, BoundaryConditionsForEveryKind) {
  auto l = learned(2, 5);
  const auto target = two_modes();
  const std::vector<Interpolant> ips{{InterpKind::linear, NormalBaseSpec{2, 2.0}, target, 2.0, std::nullopt},
                                     l.ip, diffusion(target, 2.0)};
  std::mt19937_64 rng(3);
  std::normal_distribution<double> g;
  for (const auto& ip : ips) {
    for (int i = 0; i < 20; ++i) {
      const Vector x = (Vector(2) << 5 * g(rng), 5 * g(rng)).finished();
      const double f0 = energy(ip.base, x), f1 = energy(ip.target, x);
      if (ip.kind == InterpKind::mixture_diffusion) {
        EXPECT_NEAR(f_eval(ip, 0.0, x, l.model.params), f0, 1e-12 * std::max(1.0, f0));
        EXPECT_NEAR(f_eval(ip, 1.0, x, l.model.params), f1, 1e-12 * std::max(1.0, f1));
      } else {
        EXPECT_EQ(f_eval(ip, 0.0, x, l.model.params), f0);
        EXPECT_EQ(f_eval(ip, 1.0, x, l.model.params), f1);
      }
    }
  }
}

TEST(Interp, LinearMidpoint) {
  const Interpolant ip{InterpKind::linear, NormalBaseSpec{2, 1.0}, Phi4Spec{2, 0.0, 2.0, 1.0}, 1.0, std::nullopt};
  ParamStore none;
  const Vector x = Vector::Zero(2);
  EXPECT_EQ(energy(ip.base, x), 0.0);
  EXPECT_EQ(energy(ip.target, x), 4.0);
  EXPECT_EQ(f_eval(ip, 0.5, x, none), 2.0);
  EXPECT_THROW(f_eval(ip, 1.5, x, none), DimensionError);
}

TEST(Interp, DiffusionRequiresMixture) {
  Interpolant ip{InterpKind::mixture_diffusion, NormalBaseSpec{16, 1.0}, Phi4Spec{}, 1.0, std::nullopt};
  EXPECT_THROW(ip.validate(), ConfigError);
  EXPECT_THROW(f_eval(ip, 0.5, Vector::Zero(16), ParamStore{}), ConfigError);
}

TEST(Diffusion, ComponentParameters) {
  GaussianMixtureSpec g;
  g.weights = {1.0};
  g.means = {(Vector(2) << 8.0, 8.0).finished()};
  g.variances = {1.0};
  const auto d = diffuse_mixture(g, 2.0, 0.25);
  EXPECT_DOUBLE_EQ(d.means[0](0), 4.0);
  EXPECT_DOUBLE_EQ(d.means[0](1), 4.0);
  EXPECT_DOUBLE_EQ(d.variances[0], 3.25);
  EXPECT_DOUBLE_EQ(d.weights[0], 1.0);
  const auto t2 = two_modes();
  const auto one = diffuse_mixture(t2, 2.0, 1.0);
  const auto zero = diffuse_mixture(t2, 2.0, 0.0);
  for (std::size_t i = 0; i < t2.size(); ++i) {
    EXPECT_EQ(one.means[i], t2.means[i]);
    EXPECT_EQ(one.variances[i], t2.variances[i]);
    EXPECT_EQ(zero.means[i], Vector::Zero(2));
    EXPECT_EQ(zero.variances[i], 4.0);
  }
  for (double t : {0.0, 0.1, 0.5, 0.9, 1.0}) EXPECT_EQ(diffuse_mixture(t2, 2.0, t).weights, t2.weights);
}

TEST(Diffusion, MatchesNumericalConvolution) {
  // 1-D: stretch the target by sqrt(t), then convolve with N(0, sigma^2 (1 - t)).
  GaussianMixtureSpec g;
  g.weights = {0.3, 0.7};
  g.means = {Vector::Constant(1, -3.0), Vector::Constant(1, 5.0)};
  g.variances = {0.5, 1.5};
  const double sigma = 2.0, t = 0.25;
  const auto ip = diffusion(g, sigma);
  auto target = [&](double x) { return 0.3 * normal_pdf(x, -3.0, 0.5) + 0.7 * normal_pdf(x, 5.0, 1.5); };
  const double st = std::sqrt(t), kv = sigma * sigma * (1 - t);
  const double log_z0 = 0.5 * std::log(2 * std::numbers::pi * sigma * sigma);
  for (double y : {-4.0, -1.0, 0.0, 1.5, 3.0}) {
    double p = 0.0;
    const double h = 1e-3;
    for (double u = -30.0; u <= 30.0; u += h) p += h * target(u / st) / st * normal_pdf(y - u, 0.0, kv);
    EXPECT_NEAR(f_eval(ip, t, Vector::Constant(1, y), ParamStore{}), -std::log(p) - (1 - t) * log_z0, 1e-8) << y;
  }
}

TEST(Derivatives, LinearTimePartialIsEnergyGap) {
  const Interpolant ip{InterpKind::linear, NormalBaseSpec{2, 2.0}, two_modes(), 2.0, std::nullopt};
  const Vector x = (Vector(2) << 1.0, -2.0).finished();
  for (double t : {0.0, 0.3, 1.0})
    EXPECT_DOUBLE_EQ(f_time_partial(ip, t, x, ParamStore{}), energy(ip.target, x) - energy(ip.base, x));
}

TEST(Derivatives, ZeroCorrectionMatchesLinear) {
  auto l = learned(2, 1);
  for (auto& v : l.model.params.values()) v = 0.0;
  Interpolant lin = l.ip;
  lin.kind = InterpKind::linear;
  const Vector x = (Vector(2) << 0.7, 2.5).finished();
  for (double t : {0.0, 0.2, 0.6, 1.0}) {
    EXPECT_NEAR(f_time_partial(l.ip, t, x, l.model.params), f_time_partial(lin, t, x, l.model.params), 1e-6);
    EXPECT_LE((f_space_grad(l.ip, t, x, l.model.params) - f_space_grad(lin, t, x, l.model.params)).norm(), 1e-6);
  }
}

TEST(Derivatives, LearnedMatchesFiniteDifferencesOfValue) {
  auto l = learned(2, 7);
  std::mt19937_64 rng(9);
  std::uniform_real_distribution<double> ut(0.05, 0.95);
  std::normal_distribution<double> g;
  const double h = 1e-5;
  for (int i = 0; i < 20; ++i) {
    const double t = ut(rng);
    const Vector x = (Vector(2) << 3 * g(rng), 3 * g(rng)).finished();
    const double dt = (f_eval(l.ip, t + h, x, l.model.params) - f_eval(l.ip, t - h, x, l.model.params)) / (2 * h);
    EXPECT_NEAR(f_time_partial(l.ip, t, x, l.model.params), dt, 1e-4 * std::max(1.0, std::abs(dt)));
    const Vector gr = f_space_grad(l.ip, t, x, l.model.params);
    for (int k = 0; k < 2; ++k) {
      Vector xp = x, xm = x;
      xp(k) += h;
      xm(k) -= h;
      const double d = (f_eval(l.ip, t, xp, l.model.params) - f_eval(l.ip, t, xm, l.model.params)) / (2 * h);
      EXPECT_NEAR(gr(k), d, 1e-4 * std::max(1.0, std::abs(d)));
    }
  }
}

TEST(Derivatives, DiffusionMatchesFiniteDifferences) {
  std::mt19937_64 rng(21);
  std::uniform_real_distribution<double> ut(0.05, 0.95);
  std::normal_distribution<double> g;
  const auto ip = diffusion(two_modes(), 2.0);
  const double h = 1e-6;
  for (int i = 0; i < 100; ++i) {
    const double t = ut(rng);
    const Vector x = (Vector(2) << 4 * g(rng), 4 * g(rng)).finished();
    const double dt = (f_eval(ip, t + h, x, {}) - f_eval(ip, t - h, x, {})) / (2 * h);
    EXPECT_NEAR(f_time_partial(ip, t, x, {}), dt, 1e-5 * std::max(1.0, std::abs(dt)));
    const Vector gr = f_space_grad(ip, t, x, {});
    for (int k = 0; k < 2; ++k) {
      Vector xp = x, xm = x;
      xp(k) += h;
      xm(k) -= h;
      const double d = (f_eval(ip, t, xp, {}) - f_eval(ip, t, xm, {})) / (2 * h);
      EXPECT_NEAR(gr(k), d, 1e-5 * std::max(1.0, std::abs(d)));
    }
  }
}

TEST(DensityResidual, VanishesForRandomMixtures) {
  std::mt19937_64 rng(31);
  std::uniform_real_distribution<double> ut(0.1, 1.0);
  std::normal_distribution<double> g;
  for (int trial = 0; trial < 50; ++trial) {
    const int n = 1 + trial % 3;
    const auto mix = random_mixture(rng, n, 1 + trial % 4);
    const double sigma = 0.5 + std::abs(g(rng));
    const double t = ut(rng);
    Vector x(n);
    for (int j = 0; j < n; ++j) x(j) = 2 * g(rng);
    double dt_p = 0.0;
    const double r = diffusion_density_residual(mix, sigma, t, x, &dt_p);
    EXPECT_LE(std::abs(r), 1e-8 * std::max(std::abs(dt_p), 1e-12)) << "trial " << trial;
    // d_t p against a finite difference of the closed-form density.
    const double h = 1e-6;
    const double fd = (std::exp(log_density_exact(diffuse_mixture(mix, sigma, t + std::min(h, 1 - t)), x)) -
                       std::exp(log_density_exact(diffuse_mixture(mix, sigma, t - h), x))) /
                      (std::min(h, 1 - t) + h);
    EXPECT_NEAR(dt_p, fd, 1e-4 * std::max(std::abs(fd), 1e-8));
  }
}

TEST(DensityResidual, StationaryAndSymmetricCases) {
  GaussianMixtureSpec g;
  g.weights = {1.0};
  g.means = {Vector::Zero(2)};
  g.variances = {4.0};
  double dt_p = 1.0;
  EXPECT_NEAR(diffusion_density_residual(g, 2.0, 0.4, (Vector(2) << 0.3, -1.0).finished(), &dt_p), 0.0, 1e-17);
  EXPECT_EQ(dt_p, 0.0);
  GaussianMixtureSpec sym;
  sym.weights = {0.5, 0.5};
  sym.means = {Vector::Constant(2, 3.0), Vector::Constant(2, -3.0)};
  sym.variances = {1.0, 1.0};
  // At x = 0 the <grad p, x> term drops out; compare against the density scale.
  const double p0 = std::exp(log_density_exact(diffuse_mixture(sym, 2.0, 0.5), Vector::Zero(2)));
  EXPECT_LE(std::abs(diffusion_density_residual(sym, 2.0, 0.5, Vector::Zero(2), &dt_p)), 1e-12 * p0);
  EXPECT_THROW(diffusion_density_residual(sym, 1.0, 0.0, Vector::Zero(2)), NumericalError);
}

TEST(InterpolationError, ExactDiffusionSolution) {
  std::mt19937_64 rng(41);
  std::uniform_real_distribution<double> ut(0.1, 0.95);
  std::normal_distribution<double> g;
  const auto ip = diffusion(two_modes(), 2.0);
  const double n = 2.0;
  FDConfig fd;
  for (int i = 0; i < 50; ++i) {
    const double t = ut(rng);
    const Matrix x = (Matrix(2, 1) << 3 * g(rng), 3 * g(rng)).finished();
    const RowVector tr = RowVector::Constant(1, t);
    Eval ctx((ParamStore()));
    const auto d = interp_derivs(ctx, ip, tr, x, fd, true);
    const Matrix d_t = Matrix::Constant(1, 1, -(n + 2 * t * ip.diffusion_log_z0()));
    const double e = interpolation_residual(ctx, tr, x, d, d_t, 2.0)(0, 0);
    EXPECT_LT(std::abs(e), 1e-3) << "t=" << t;
  }
}

TEST(InterpolationError, StationaryGaussian) {
  const double sigma = 1.5;
  auto model = FlowModel::create(3, NetConfig{2, 1, 4, 0.0}, true, true);
  const Interpolant ip{InterpKind::learned, NormalBaseSpec{3, sigma}, NormalBaseSpec{3, sigma}, sigma, model.correction};
  const Matrix x = (Matrix(3, 1) << 0.4, -1.1, 2.0).finished();
  const RowVector tr = RowVector::Constant(1, 0.3);
  Eval ctx(model.params);
  const auto d = interp_derivs(ctx, ip, tr, x, FDConfig{}, true);
  EXPECT_NEAR(interpolation_residual(ctx, tr, x, d, Matrix::Constant(1, 1, -3.0), sigma)(0, 0), 0.0, 1e-6);
  // D head with all coefficients zero: residual is n.
  EXPECT_NEAR(interpolation_error(ip, *model.d_head, 0.3, x.col(0), model.params, sigma), 3.0, 1e-6);
  // At x = 0 the <grad f, x> term vanishes; D_t = 0 leaves sigma^2 lap f = n.
  EXPECT_NEAR(interpolation_error(ip, *model.d_head, 0.7, Vector::Zero(3), model.params, sigma), 3.0, 1e-6);
}

TEST(MassTeleportation, LinearInterpolationMovesMass) {
  const auto target = two_modes();
  const Interpolant lin{InterpKind::linear, NormalBaseSpec{2, 2.0}, target, 2.0, std::nullopt};
  const auto m1 = mode_mass_fractions(lin, 1.0, target.means, -16.0, 12.0, 400, {});
  EXPECT_NEAR(m1[1], 2.0 / 3.0, 1e-3);
  double worst = 0.0;
  for (double t = 0.5; t < 1.0; t += 0.05) {
    const auto m = mode_mass_fractions(lin, t, target.means, -16.0, 12.0, 400, {});
    worst = std::max(worst, std::abs(m[1] - m1[1]) / m1[1]);
  }
  EXPECT_GT(worst, 0.10);
}

#include <gtest/gtest.h>

#include <cmath>
#include <cstdlib>
#include <limits>
#include <numbers>
#include <random>

#include "dflow/objectives/losses.hpp"

using namespace dflow;

namespace {

GaussianMixtureSpec two_modes() {
  GaussianMixtureSpec g;
  g.weights = {1.0 / 3.0, 2.0 / 3.0};
  g.means = {(Vector(2) << 4.0, 4.0).finished(), (Vector(2) << -8.0, -8.0).finished()};
  g.variances = {1.0, 1.0};
  return g;
}

FlowModel small_model(int dim, bool correction, std::uint64_t seed) {
  auto m = FlowModel::create(dim, NetConfig{2, 1, 6, 0.0}, correction, correction);
  m.initialize(seed);
  return m;
}

void randomize(ParamStore& p, std::mt19937_64& rng, double scale = 0.5) {
  std::uniform_real_distribution<double> u(-scale, scale);
  for (auto& v : p.values()) v = u(rng);
}

/// Central differences of a scalar function of the parameters over [begin, begin + len).
template <class F>
Vector fd_grad(ParamStore& p, F&& f, std::size_t begin, std::size_t len, double h = 1e-6) {
  Vector g(static_cast<Eigen::Index>(len));
  for (std::size_t i = 0; i < len; ++i) {
    double& v = p.data()[begin + i];
    const double v0 = v;
    v = v0 + h;
    const double fp = f();
    v = v0 - h;
    const double fm = f();
    v = v0;
    g(static_cast<Eigen::Index>(i)) = (fp - fm) / (2 * h);
  }
  return g;
}

/// Collocation on the analytic family gamma_t = gamma_1 / sqrt(t) for t in [0.2, 1].
Collocation shrink_collocation(const Matrix& x1, int steps) {
  Collocation c;
  c.z = x1;
  for (int k = 0; k <= steps; ++k) {
    const double t = 0.2 + 0.8 * k / steps;
    c.times.push_back(t);
    c.states.push_back(x1 / std::sqrt(t));
  }
  return c;
}

}  // namespace

TEST(Penalty, ValuesAndMonotonicity) {
  for (auto k : {PenaltyKind::abs, PenaltyKind::square, PenaltyKind::abs_plus_square, PenaltyKind::log1p_abs}) {
    EXPECT_EQ(penalty(k, 0.0), 0.0);
    double prev = 0.0;
    for (double e = 0.1; e < 5; e += 0.1) {
      EXPECT_GT(penalty(k, e), prev);
      EXPECT_EQ(penalty(k, e), penalty(k, -e));
      prev = penalty(k, e);
    }
    EXPECT_EQ(parse_penalty(penalty_name(k)), k);
    ParamStore none;
    Eval ctx(none);
    const Matrix e = (Matrix(1, 3) << -1.5, 0.2, 3.0).finished();
    const Matrix v = penalty(ctx, k, e);
    for (int j = 0; j < 3; ++j) EXPECT_NEAR(v(0, j), penalty(k, e(0, j)), 1e-15);
  }
  EXPECT_DOUBLE_EQ(penalty(PenaltyKind::abs_plus_square, -2.0), 6.0);
  EXPECT_DOUBLE_EQ(penalty(PenaltyKind::log1p_abs, std::exp(1.0) - 1), 1.0);
  EXPECT_THROW(parse_penalty("cubic"), ConfigError);
}

TEST(Weights, NormalizationIsMeanOneAndScaleFree) {
  const RowVector log_raw = (RowVector(4) << -800.0, -801.5, -799.0, -850.0).finished();
  const auto w = normalize_weights(log_raw);
  EXPECT_NEAR(w.normalized.mean(), 1.0, 1e-15);
  EXPECT_TRUE((w.normalized.array() > 0).all());
  const auto w2 = normalize_weights((log_raw.array() + std::log(2.0)).matrix());
  EXPECT_LE((w2.normalized - w.normalized).cwiseAbs().maxCoeff(), 1e-14);
  const double inf = std::numeric_limits<double>::infinity();
  EXPECT_THROW(normalize_weights(RowVector::Constant(3, -inf)), NumericalError);
  EXPECT_THROW(normalize_weights((RowVector(2) << 0.0, std::nan("")).finished()), NumericalError);
  const auto partial = normalize_weights((RowVector(2) << 0.0, -inf).finished());
  EXPECT_EQ(partial.normalized(1), 0.0);
  EXPECT_EQ(partial.normalized(0), 2.0);
}

TEST(DeformationLoss, ConstantResidualGivesPenaltyOfResidual) {
  const Collocation c = shrink_collocation(Matrix::Random(2, 5), 10);
  const RowVector ones = RowVector::Ones(5);
  for (double r : {-0.7, 0.0, 2.5}) {
    auto constant = [r](const RowVector& t, const Matrix&) { return RowVector::Constant(t.size(), r); };
    EXPECT_NEAR(deformation_loss_value(constant, c, ones, PenaltyKind::abs), std::abs(r), 1e-15);
    EXPECT_NEAR(deformation_loss_value(constant, c, ones, PenaltyKind::abs_plus_square), std::abs(r) + r * r, 1e-14);
  }
}

TEST(DeformationLoss, ExactAnalyticSolution) {
  const int n = 2;
  const Matrix x1 = sample_base(NormalBaseSpec{n, 1.0}, 16, 3);
  const Collocation c = shrink_collocation(x1, 40);
  const RowVector w = normalize_weights(RowVector::Zero(16)).normalized;
  auto f = [](double t, const Vector& x) { return t * x.squaredNorm() / 2; };
  auto V = [](double t, const Vector& x) -> Vector { return -x / (2 * t); };
  auto C = [n](double t) { return -n / (2.0 * t); };
  auto by_fd = [&](const RowVector& t, const Matrix& x) {
    RowVector e(t.size());
    for (Eigen::Index j = 0; j < t.size(); ++j) e(j) = deformation_error_fd(f, V, C, t(j), x.col(j));
    return e;
  };
  auto analytic = [&](const RowVector& t, const Matrix& x) {
    RowVector e(t.size());
    for (Eigen::Index j = 0; j < t.size(); ++j) {
      const Vector xj = x.col(j);
      e(j) = deformation_residual(xj.squaredNorm() / 2, t(j) * xj, V(t(j), xj), -n / (2 * t(j)), C(t(j)));
    }
    return e;
  };
  EXPECT_LT(deformation_loss_value(by_fd, c, w, PenaltyKind::abs_plus_square), 1e-3);
  EXPECT_LT(deformation_loss_value(analytic, c, w, PenaltyKind::abs_plus_square), 1e-10);
  auto wrong_c = [&](const RowVector& t, const Matrix& x) { return (analytic(t, x).array() + n / (2 * t.array())).matrix(); };
  EXPECT_GT(deformation_loss_value(wrong_c, c, w, PenaltyKind::abs), 1.0);
}

TEST(DeformationLoss, NonFiniteResidualNamesSampleAndTime) {
  const Collocation c = shrink_collocation(Matrix::Random(1, 3), 4);
  auto bad = [](const RowVector& t, const Matrix&) {
    RowVector e = RowVector::Zero(t.size());
    e(7) = std::nan("");
    return e;
  };
  try {
    deformation_loss_value(bad, c, RowVector::Ones(3), PenaltyKind::abs);
    FAIL();
  } catch (const NumericalError& err) {
    const std::string msg = err.what();
    EXPECT_NE(msg.find("sample 1"), std::string::npos) << msg;
    EXPECT_NE(msg.find("t = 0.6"), std::string::npos) << msg;
  }
}

TEST(DeformationLoss, NonNegativeAndZeroOnlyForZeroResiduals) {
  auto m = small_model(2, false, 1);
  const Interpolant same{InterpKind::linear, NormalBaseSpec{2, 1.0}, NormalBaseSpec{2, 1.0}, 1.0, std::nullopt};
  for (auto& v : m.params.values()) v = 0.0;
  const Matrix z = sample_base(same.base, 8, 2);
  LossOptions opt;
  opt.steps = 10;
  EXPECT_EQ(deformation_loss(m, same, z, opt).value, 0.0);
  m.initialize(4);
  for (auto k : {PenaltyKind::abs, PenaltyKind::square, PenaltyKind::abs_plus_square, PenaltyKind::log1p_abs}) {
    opt.penalty = k;
    EXPECT_GT(deformation_loss(m, same, z, opt, false).value, 0.0);
  }
}

TEST(DeformationLoss, DoublingRawWeightsLeavesLossUnchanged) {
  auto m = small_model(2, false, 7);
  const Interpolant ip{InterpKind::linear, NormalBaseSpec{2, 2.0}, two_modes(), 2.0, std::nullopt};
  LossOptions opt;
  opt.steps = 8;
  const auto c = collocate(m, ip.base, sample_base(ip.base, 12, 5), opt.steps, opt.fd);
  const RowVector log_w = log_trajectory_weights(c, ip.target);
  const double a = deformation_loss_frozen(m, ip, c, normalize_weights(log_w).normalized, opt, false).value;
  const double b =
      deformation_loss_frozen(m, ip, c, normalize_weights((log_w.array() + std::log(2.0)).matrix()).normalized, opt, false)
          .value;
  EXPECT_NEAR(a, b, 1e-13 * a);
  EXPECT_NEAR(a, deformation_loss(m, ip, c.z, opt, false).value, 1e-13 * a);
}

TEST(DeformationLoss, UniformWeightingIsPlainTrajectoryAverage) {
  auto m = small_model(2, false, 7);
  const Interpolant ip{InterpKind::linear, NormalBaseSpec{2, 2.0}, two_modes(), 2.0, std::nullopt};
  LossOptions opt;
  opt.steps = 8;
  opt.weighting = TrajectoryWeighting::uniform;
  const auto c = collocate(m, ip.base, sample_base(ip.base, 12, 5), opt.steps, opt.fd);
  const double ones = deformation_loss_frozen(m, ip, c, RowVector::Ones(12), opt, false).value;
  EXPECT_NEAR(deformation_loss(m, ip, c.z, opt, false).value, ones, 1e-13 * ones);
  EXPECT_EQ(parse_weighting("uniform"), TrajectoryWeighting::uniform);
  EXPECT_THROW(parse_weighting("flat"), ConfigError);
}

TEST(DeformationLoss, WeightsMatchLogQDefinition) {
  auto m = small_model(2, false, 9);
  const Interpolant ip{InterpKind::linear, NormalBaseSpec{2, 2.0}, two_modes(), 2.0, std::nullopt};
  const Matrix z = sample_base(ip.base, 6, 1);
  const auto c = collocate(m, ip.base, z, 20, FDConfig{});
  const auto pf = log_q_of_pushforward(m, ip.base, z, 20);
  const RowVector expect = -energies(ip.target, pf.x) - pf.log_q;
  EXPECT_LE((log_trajectory_weights(c, ip.target) - expect).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(DeformationLoss, GradientMatchesFiniteDifferences) {
  auto m = small_model(2, true, 11);
  const Interpolant ip{InterpKind::learned, NormalBaseSpec{2, 2.0}, two_modes(), 2.0, m.correction};
  LossOptions opt;
  opt.steps = 6;
  opt.chunk = 3;
  std::mt19937_64 rng(12);
  for (int trial = 0; trial < 10; ++trial) {
    randomize(m.params, rng);
    const auto c = collocate(m, ip.base, sample_base(ip.base, 5, trial), opt.steps, opt.fd);
    const RowVector w = normalize_weights(log_trajectory_weights(c, ip.target)).normalized;
    const auto r = deformation_loss_frozen(m, ip, c, w, opt, true);
    const Vector fd =
        fd_grad(m.params, [&] { return deformation_loss_frozen(m, ip, c, w, opt, false).value; }, 0, m.params.size());
    EXPECT_LE((r.grad - fd).norm(), 1e-5 * fd.norm()) << "trial " << trial;
    const auto [d0, dn] = m.block("D");
    EXPECT_EQ(r.grad.segment(static_cast<Eigen::Index>(d0), static_cast<Eigen::Index>(dn)).norm(), 0.0);
  }
}

TEST(ReverseKl, IdentityFlowOnMatchingTarget) {
  auto m = small_model(1, false, 1);
  for (auto& v : m.params.values()) v = 0.0;
  const NormalBaseSpec base{1, 1.0};
  const Matrix z = sample_base(base, 4096, 3);
  LossOptions opt;
  opt.steps = 5;
  const auto r = reverse_kl_loss(m, base, base, z, opt, false);
  EXPECT_NEAR(r.value, -0.5 * std::log(2 * std::numbers::pi), 1e-12);
  EXPECT_NEAR(r.value, -0.91894, 1e-5);
}

TEST(ReverseKl, ConstantEnergyShift) {
  auto m = small_model(2, false, 5);
  const NormalBaseSpec base{2, 1.0};
  GaussianMixtureSpec normal;
  normal.weights = {1.0};
  normal.means = {Vector::Zero(2)};
  normal.variances = {1.0};
  const Matrix z = sample_base(base, 16, 4);
  LossOptions opt;
  opt.steps = 10;
  const double a = reverse_kl_loss(m, base, base, z, opt, false).value;
  const double b = reverse_kl_loss(m, base, normal, z, opt, false).value;
  EXPECT_NEAR(b - a, std::log(2 * std::numbers::pi), 1e-12);
}

TEST(ReverseKl, GradientMatchesFiniteDifferences) {
  auto m = small_model(2, false, 13);
  const NormalBaseSpec base{2, 2.0};
  const auto target = two_modes();
  LossOptions opt;
  opt.steps = 6;
  opt.chunk = 2;
  std::mt19937_64 rng(14);
  for (int trial = 0; trial < 10; ++trial) {
    randomize(m.params, rng);
    const Matrix z = sample_base(base, 4, 100 + trial);
    const auto r = reverse_kl_loss(m, base, target, z, opt, true);
    EXPECT_NEAR(r.value, reverse_kl_loss(m, base, target, z, opt, false).value, 1e-12 * std::abs(r.value));
    const Vector fd =
        fd_grad(m.params, [&] { return reverse_kl_loss(m, base, target, z, opt, false).value; }, 0, m.params.size());
    EXPECT_LE((r.grad - fd).norm(), 1e-5 * fd.norm()) << "trial " << trial;
  }
}

TEST(Combined, ExactStationaryScenario) {
  // Base = target = N(0, sigma^2): f static, V = 0, C = 0 solve the deformation equation and
  // D = -n solves the interpolation equation. Wide kernels make D nearly constant in t.
  const double sigma = 1.5;
  auto m = FlowModel::create(2, NetConfig{2, 1, 6, 1e3}, true, true);
  const Interpolant ip{InterpKind::learned, NormalBaseSpec{2, sigma}, NormalBaseSpec{2, sigma}, sigma, m.correction};
  for (auto& v : m.params.values("D")) v = -1.0;  // two kernels of weight ~1 each
  LossOptions opt;
  opt.steps = 10;
  opt.sigma = sigma;
  const auto r = combined_loss(m, ip, sample_base(ip.base, 8, 1), opt, false);
  EXPECT_EQ(r.part1, 0.0);
  EXPECT_LT(r.part2, 1e-5);
  EXPECT_NEAR(r.value, r.part2, 1e-15);
}

TEST(Combined, GradientRoutingMasks) {
  auto m = small_model(2, true, 21);
  const Interpolant ip{InterpKind::learned, NormalBaseSpec{2, 2.0}, two_modes(), 2.0, m.correction};
  LossOptions opt;
  opt.steps = 5;
  opt.sigma = 2.0;
  std::mt19937_64 rng(22);
  randomize(m.params, rng);
  const auto c = collocate(m, ip.base, sample_base(ip.base, 4, 2), opt.steps, opt.fd, false);
  auto slice = [&](const Vector& g, const char* name) {
    const auto [o, n] = m.block(name);
    return Vector(g.segment(static_cast<Eigen::Index>(o), static_cast<Eigen::Index>(n)));
  };
  auto only = [&](int term) {
    auto o = opt;
    o.combined_term = term;
    return combined_loss_frozen(m, ip, c, o, true);
  };
  const auto both = only(0), l1 = only(1), l2 = only(2);
  EXPECT_EQ(slice(l1.grad, "f").norm(), 0.0);
  EXPECT_EQ(slice(l1.grad, "D").norm(), 0.0);
  EXPECT_EQ(slice(l2.grad, "V").norm(), 0.0);
  EXPECT_EQ(slice(l2.grad, "C").norm(), 0.0);
  EXPECT_LE((both.grad - l1.grad - l2.grad).norm(), 1e-12 * both.grad.norm());
  EXPECT_NEAR(both.value, both.part1 + both.part2, 1e-14 * both.value);

  // Each routed slice is the true partial derivative of its own term.
  for (const char* name : {"V", "C"}) {
    const auto [o, n] = m.block(name);
    auto o1 = opt;
    o1.combined_term = 1;
    const Vector fd = fd_grad(m.params, [&] { return combined_loss_frozen(m, ip, c, o1, false).part1; }, o, n);
    EXPECT_LE((slice(l1.grad, name) - fd).norm(), 1e-5 * fd.norm()) << name;
  }
  for (const char* name : {"f", "D"}) {
    const auto [o, n] = m.block(name);
    const Vector fd = fd_grad(m.params, [&] { return combined_loss_frozen(m, ip, c, opt, false).part2; }, o, n);
    EXPECT_LE((slice(l2.grad, name) - fd).norm(), 1e-5 * fd.norm()) << name;
  }

  // Perturbing V leaves the interpolation term unchanged on a fixed collocation.
  const double p2 = both.part2;
  const auto [vo, vn] = m.block("V");
  for (std::size_t i = 0; i < vn; ++i) m.params.data()[vo + i] += 0.1;
  EXPECT_EQ(combined_loss_frozen(m, ip, c, opt, false).part2, p2);
}

TEST(Losses, ResultDoesNotDependOnThreadCount) {
  auto m = small_model(2, false, 31);
  const Interpolant ip{InterpKind::linear, NormalBaseSpec{2, 2.0}, two_modes(), 2.0, std::nullopt};
  LossOptions opt;
  opt.steps = 6;
  opt.chunk = 2;
  const Matrix z = sample_base(ip.base, 9, 7);
  setenv("DFLOW_THREADS", "1", 1);
  const auto a = deformation_loss(m, ip, z, opt);
  const auto ka = reverse_kl_loss(m, ip.base, ip.target, z, opt);
  setenv("DFLOW_THREADS", "4", 1);
  const auto b = deformation_loss(m, ip, z, opt);
  const auto kb = reverse_kl_loss(m, ip.base, ip.target, z, opt);
  unsetenv("DFLOW_THREADS");
  EXPECT_EQ(a.value, b.value);
  EXPECT_EQ(a.grad, b.grad);
  EXPECT_EQ(ka.value, kb.value);
  EXPECT_EQ(ka.grad, kb.grad);
}

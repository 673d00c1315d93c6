#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include "dflow/nets/checkpoint.hpp"
#include "dflow/nets/flow_model.hpp"

using namespace dflow;

namespace {

std::size_t mlp_params(int in, int out, int layers, int width) {
  std::size_t n = 0;
  int prev = in;
  for (int l = 0; l < layers; ++l) {
    n += static_cast<std::size_t>(prev * width + width);
    prev = width;
  }
  return n + static_cast<std::size_t>(prev * out + out);
}

std::string temp_path(const std::string& name) {
  return (std::filesystem::temp_directory_path() / ("dflow_nets_" + name)).string();
}

}  // namespace

TEST(Kernels, WeightsAtCentersAndSpacing) {
  const auto k4 = TimeKernels::make(4);
  for (int k = 0; k < 4; ++k) EXPECT_DOUBLE_EQ(k4.weights(k4.center(k))(k), 1.0);
  EXPECT_DOUBLE_EQ(k4.center(0), 0.0);
  EXPECT_DOUBLE_EQ(k4.center(1), 1.0 / 3.0);
  EXPECT_DOUBLE_EQ(k4.center(2), 2.0 / 3.0);
  EXPECT_DOUBLE_EQ(k4.center(3), 1.0);
  EXPECT_DOUBLE_EQ(k4.bandwidth, 1.0 / 3.0);

  const auto k2 = TimeKernels::make(2, 1.0);
  const Vector w = k2.weights(0.0);
  EXPECT_DOUBLE_EQ(w(0), 1.0);
  EXPECT_NEAR(w(1), 0.6065306597, 1e-9);
  EXPECT_THROW(TimeKernels::make(1), ConfigError);
}

TEST(Ensemble, ZeroNetworkIsZero) {
  ParamStore p;
  const auto e = RbfTimeEnsemble::allocate(p, "V", MlpSpec{3, 3, 2, 5}, TimeKernels::make(4));
  std::mt19937_64 rng(1);
  std::normal_distribution<double> g;
  for (double t : {0.0, 0.2, 0.77, 1.0}) {
    Vector x(3);
    for (int i = 0; i < 3; ++i) x(i) = 3.0 * g(rng);
    EXPECT_EQ(ensemble_eval(t, x, e, p), Vector::Zero(3));
  }
}

TEST(Ensemble, SharedMembersScaleByKernelSum) {
  ParamStore p;
  const auto e = RbfTimeEnsemble::allocate(p, "V", MlpSpec{2, 2, 2, 4}, TimeKernels::make(3));
  std::mt19937_64 rng(5);
  e.members[0].initialize(p, rng);
  const auto& first = e.members[0];
  for (std::size_t k = 1; k < e.members.size(); ++k)
    for (std::size_t l = 0; l < first.layers.size(); ++l) {
      const auto& a = first.layers[l];
      const auto& b = e.members[k].layers[l];
      std::copy_n(p.data() + a.w_offset, a.rows * a.cols, p.data() + b.w_offset);
      std::copy_n(p.data() + a.b_offset, a.rows, p.data() + b.b_offset);
    }
  Vector x(2);
  x << 0.4, -1.3;
  ParamStore single;
  const auto one = MlpLayout::allocate(single, "m", MlpSpec{2, 2, 2, 4});
  std::copy_n(p.data(), single.size(), single.data());
  Eval ctx(single);
  const Vector mlp = mlp_forward(ctx, one, Matrix(x)).col(0);
  for (double t : {0.0, 0.35, 1.0}) {
    const Vector out = ensemble_eval(t, x, e, p);
    EXPECT_LE((out - e.kernels.weights(t).sum() * mlp).norm(), 1e-12);
  }
}

TEST(Ensemble, SwishOfOneThroughOutputLayer) {
  ParamStore p;
  const auto e = RbfTimeEnsemble::allocate(p, "f", MlpSpec{1, 1, 1, 1}, TimeKernels::make(2, 1.0));
  const auto& m = e.members[0];
  p.data()[m.layers[0].w_offset] = 1.0;
  p.data()[m.layers[1].w_offset] = 2.0;
  p.data()[m.layers[1].b_offset] = 0.5;
  const double swish1 = 1.0 / (1.0 + std::exp(-1.0));
  EXPECT_NEAR(swish1, 0.73106, 1e-5);
  EXPECT_NEAR(ensemble_eval(0.0, Vector::Ones(1), e, p)(0), 2.0 * swish1 + 0.5, 1e-14);
}

TEST(Ensemble, DimensionMismatchNamesEnsemble) {
  ParamStore p;
  const auto e = RbfTimeEnsemble::allocate(p, "V", MlpSpec{2, 2, 1, 3}, TimeKernels::make(2));
  try {
    ensemble_eval(0.5, Vector::Zero(3), e, p);
    FAIL();
  } catch (const DimensionError& err) {
    EXPECT_NE(std::string(err.what()).find("'V'"), std::string::npos);
  }
}

TEST(TimeHead, Examples) {
  ParamStore p;
  const auto h = TimeScalarHead::allocate(p, "C", TimeKernels::make(2, 1.0));
  EXPECT_EQ(time_scalar_eval(0.3, h, p), 0.0);
  p.values("C")[0] = 1.0;
  EXPECT_NEAR(time_scalar_eval(1.0, h, p), std::exp(-0.5), 1e-15);
  p.values("C")[1] = 1.0;
  for (double t : {0.0, 0.4, 1.0}) EXPECT_NEAR(time_scalar_eval(t, h, p), h.kernels.weights(t).sum(), 1e-15);
}

TEST(TimeHead, ScaleMultipliesOutput) {
  ParamStore p;
  const auto h1 = TimeScalarHead::allocate(p, "C", TimeKernels::make(3, 0.5));
  const auto h50 = TimeScalarHead::allocate(p, "D", TimeKernels::make(3, 0.5), 50.0);
  for (int k = 0; k < 3; ++k) p.values("C")[k] = p.values("D")[k] = 0.1 * (k + 1);
  for (double t : {0.0, 0.3, 1.0}) EXPECT_NEAR(time_scalar_eval(t, h50, p), 50.0 * time_scalar_eval(t, h1, p), 1e-13);
  EXPECT_THROW((NetConfig{4, 2, 64, 0.0, 0.0}.validate()), ConfigError);
}

TEST(Init, DeterministicAndFinite) {
  NetConfig net;
  auto a = FlowModel::create(2, net, true, true);
  auto b = FlowModel::create(2, net, true, true);
  a.initialize(42);
  b.initialize(42);
  EXPECT_TRUE(std::equal(a.params.values().begin(), a.params.values().end(), b.params.values().begin()));
  b.initialize(43);
  EXPECT_FALSE(std::equal(a.params.values().begin(), a.params.values().end(), b.params.values().begin()));
  const Vector out = ensemble_eval(0.5, Vector::Zero(2), a.velocity, a.params);
  EXPECT_TRUE(out.allFinite());
  for (double v : a.params.values("C")) EXPECT_EQ(v, 0.0);
}

TEST(Init, FirstLayerPreactivationScale) {
  ParamStore p;
  const auto m = MlpLayout::allocate(p, "m", MlpSpec{16, 16, 3, 128});
  std::mt19937_64 rng(9);
  m.initialize(p, rng);
  const auto& l0 = m.layers[0];
  const Eigen::Map<const Matrix> w(p.data() + l0.w_offset, l0.rows, l0.cols);
  std::normal_distribution<double> g;
  double s = 0.0, s2 = 0.0;
  const int draws = 10000;
  for (int i = 0; i < draws; ++i) {
    Vector x(16);
    for (int j = 0; j < 16; ++j) x(j) = g(rng);
    const double a = (w * x)(i % l0.rows);
    s += a;
    s2 += a * a;
  }
  const double sd = std::sqrt(s2 / draws - (s / draws) * (s / draws));
  EXPECT_GE(sd, 0.5);
  EXPECT_LE(sd, 2.0);
}

TEST(Model, ParameterCountsForTableConfigs) {
  struct Case {
    int dim, kernels, layers, width;
  };
  for (const auto c : {Case{2, 4, 2, 64}, Case{16, 8, 3, 128}}) {
    NetConfig net{c.kernels, c.layers, c.width, 0.0};
    const auto m = FlowModel::create(c.dim, net, true, true);
    const std::size_t v = c.kernels * mlp_params(c.dim, c.dim, c.layers, c.width);
    const std::size_t f = c.kernels * mlp_params(c.dim, 1, c.layers, c.width);
    EXPECT_EQ(m.velocity.param_count(), v);
    EXPECT_EQ(m.correction->param_count(), f);
    EXPECT_EQ(m.params.size(), v + f + 2 * static_cast<std::size_t>(c.kernels));
    EXPECT_EQ(m.block("V").second, v);
    EXPECT_EQ(m.block("f").second, f);
    EXPECT_EQ(m.block("C").second, static_cast<std::size_t>(c.kernels));
    const auto plain = FlowModel::create(c.dim, net, false, false);
    EXPECT_EQ(plain.params.size(), v + static_cast<std::size_t>(c.kernels));
  }
}

TEST(Model, EveryNetworkGradientMatchesFiniteDifferences) {
  NetConfig net{2, 1, 5, 0.0};
  auto m = FlowModel::create(2, net, true, true);
  std::mt19937_64 rng(17);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  const Matrix x = Matrix::Random(2, 3);
  const RowVector times = (RowVector(3) << 0.1, 0.5, 0.9).finished();
  const Matrix kappa = m.velocity.kernels.weights(times);
  auto loss = [&](auto& ctx) {
    const auto v = ensemble_forward(ctx, m.velocity, ctx.constant(x), kappa);
    const auto f = ensemble_forward(ctx, *m.correction, ctx.constant(x), kappa);
    const auto c = time_head_forward(ctx, m.c_head, times);
    const auto d = time_head_forward(ctx, *m.d_head, times);
    const auto s = ctx.add(ctx.add(ctx.col_sum(ctx.unary(UnaryOp::square, v)), ctx.unary(UnaryOp::exp, f)),
                           ctx.mul(c, d));
    return ctx.sum(s);
  };
  for (int trial = 0; trial < 10; ++trial) {
    for (auto& v : m.params.values()) v = u(rng);
    const Vector g = grad(m.params, [&](Tape& t) { return loss(t); });
    Vector fd(g.size());
    for (Eigen::Index i = 0; i < g.size(); ++i) {
      const double v = m.params.data()[i];
      m.params.data()[i] = v + 1e-6;
      Eval ep(m.params);
      const double fp = loss(ep)(0, 0);
      m.params.data()[i] = v - 1e-6;
      Eval em(m.params);
      const double fm = loss(em)(0, 0);
      m.params.data()[i] = v;
      fd(i) = (fp - fm) / 2e-6;
    }
    EXPECT_LE((g - fd).norm(), 1e-5 * fd.norm()) << "trial " << trial;
  }
}

TEST(Model, ContinuousInTime) {
  auto m = FlowModel::create(2, NetConfig{}, false, false);
  m.initialize(3);
  const Vector x = (Vector(2) << 0.3, -0.8).finished();
  double lip = 0.0;
  const double h = 1e-3;
  for (int i = 0; i < 1000; ++i) {
    const double t = i * h;
    lip = std::max(lip, (ensemble_eval(t + h, x, m.velocity, m.params) - ensemble_eval(t, x, m.velocity, m.params)).norm() / h);
  }
  EXPECT_TRUE(std::isfinite(lip));
  for (double t : {0.1234, 0.5, 0.9876}) {
    const double d = (ensemble_eval(t + 1e-5, x, m.velocity, m.params) - ensemble_eval(t, x, m.velocity, m.params)).norm();
    EXPECT_LE(d, 1.5 * lip * 1e-5);
  }
}

TEST(Checkpoint, RoundTripIsExact) {
  auto m = FlowModel::create(2, NetConfig{}, true, true);
  m.initialize(11);
  m.params.values("C")[1] = -0.125;
  const auto path = temp_path("rt.dflow");
  write_checkpoint(path, m.params);
  const auto back = read_checkpoint(path);
  EXPECT_TRUE(back.same_layout(m.params));
  EXPECT_TRUE(std::equal(back.values().begin(), back.values().end(), m.params.values().begin()));
  std::ifstream in(path, std::ios::binary);
  char magic[6];
  in.read(magic, 6);
  EXPECT_EQ(std::string(magic, 6), "DFLOW1");
  std::filesystem::remove(path);
}

TEST(Checkpoint, RejectsGarbageAndTruncation) {
  const auto bad = temp_path("bad.dflow");
  { std::ofstream(bad, std::ios::binary) << "NOTACKPT"; }
  EXPECT_THROW(read_checkpoint(bad), Error);
  auto m = FlowModel::create(1, NetConfig{2, 1, 2, 0.0}, false, false);
  write_checkpoint(bad, m.params);
  std::filesystem::resize_file(bad, std::filesystem::file_size(bad) - 3);
  EXPECT_THROW(read_checkpoint(bad), Error);
  std::filesystem::remove(bad);
  EXPECT_THROW(read_checkpoint(temp_path("missing.dflow")), Error);
}

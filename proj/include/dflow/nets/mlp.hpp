#pragma once

#include <cmath>
#include <random>
#include <string>
#include <vector>

#include "dflow/engine/errors.hpp"
#include "dflow/engine/param_store.hpp"
#include "dflow/engine/tape.hpp"

namespace dflow {

enum class Activation { swish };

struct MlpSpec {
  int in_dim = 1;
  int out_dim = 1;
  int hidden_layers = 1;
  int hidden_width = 1;
  Activation activation = Activation::swish;

  void validate() const {
    if (in_dim < 1 || out_dim < 1 || hidden_layers < 1 || hidden_width < 1)
      throw ConfigError("net", "MLP dimensions must all be at least 1");
  }

  /// Weights plus biases over all affine layers.
  std::size_t param_count() const {
    const auto h = static_cast<std::size_t>(hidden_width);
    std::size_t count = static_cast<std::size_t>(in_dim) * h + h;
    count += static_cast<std::size_t>(hidden_layers - 1) * (h * h + h);
    count += h * static_cast<std::size_t>(out_dim) + static_cast<std::size_t>(out_dim);
    return count;
  }
};

/// Where an MLP's affine layers live inside the parameter vector.
struct MlpLayout {
  std::vector<AffineRef> layers;

  static MlpLayout allocate(ParamStore& params, const std::string& prefix, const MlpSpec& spec) {
    spec.validate();
    MlpLayout m;
    int in = spec.in_dim;
    for (int l = 0; l <= spec.hidden_layers; ++l) {
      const int out = l == spec.hidden_layers ? spec.out_dim : spec.hidden_width;
      const std::string base = prefix + "/l" + std::to_string(l);
      AffineRef r;
      r.rows = out;
      r.cols = in;
      r.w_offset = params.add_slice(base + "/W", static_cast<std::size_t>(out) * static_cast<std::size_t>(in));
      r.b_offset = params.add_slice(base + "/b", static_cast<std::size_t>(out));
      r.has_bias = true;
      m.layers.push_back(r);
      in = out;
    }
    return m;
  }

  /// Zero-mean normal weights with variance 1/fan_in; zero biases.
  void initialize(ParamStore& params, std::mt19937_64& rng) const {
    for (const auto& r : layers) {
      std::normal_distribution<double> dist(0.0, 1.0 / std::sqrt(static_cast<double>(r.cols)));
      double* w = params.data() + r.w_offset;
      for (Eigen::Index i = 0; i < r.rows * r.cols; ++i) w[i] = dist(rng);
      double* b = params.data() + r.b_offset;
      for (Eigen::Index i = 0; i < r.rows; ++i) b[i] = 0.0;
    }
  }
};

/// affine -> swish for every hidden layer, then a final affine layer.
template <Context Ctx>
typename Ctx::Var mlp_forward(Ctx& ctx, const MlpLayout& mlp, const typename Ctx::Var& x) {
  typename Ctx::Var h = ctx.affine(mlp.layers.front(), x);
  for (std::size_t l = 1; l < mlp.layers.size(); ++l) {
    h = ctx.unary(UnaryOp::swish, h);
    h = ctx.affine(mlp.layers[l], h);
  }
  return h;
}

}  // namespace dflow

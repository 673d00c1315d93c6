#pragma once

#include <optional>
#include <random>
#include <string>
#include <utility>

#include "dflow/engine/param_store.hpp"
#include "dflow/nets/rbf_ensemble.hpp"

namespace dflow {

/// Architecture shared by every trainable object of a run.
struct NetConfig {
  int kernels = 4;
  int hidden_layers = 2;
  int hidden_width = 64;
  double bandwidth = 0.0;  // 0 selects the kernel spacing 1/(K-1)
  double head_scale = 1.0;  // C_t and D_t are head_scale * sum_k kappa_k(t) c_k

  bool operator==(const NetConfig&) const = default;

  void validate() const {
    if (kernels < 2) throw ConfigError("net.kernels", "must be at least 2");
    if (hidden_layers < 1) throw ConfigError("net.hidden_layers", "must be at least 1");
    if (hidden_width < 1) throw ConfigError("net.hidden_width", "must be at least 1");
    if (bandwidth < 0.0) throw ConfigError("net.bandwidth", "must be non-negative");
    if (!(head_scale > 0.0)) throw ConfigError("net.head_scale", "must be positive");
  }
};

/// The trainable objects: velocity field V, time constant C, and optionally the
/// interpolation correction f and the diffusion left-hand side D.
struct FlowModel {
  int dim = 0;
  NetConfig net;
  ParamStore params;
  RbfTimeEnsemble velocity;
  TimeScalarHead c_head;
  std::optional<RbfTimeEnsemble> correction;
  std::optional<TimeScalarHead> d_head;

  static FlowModel create(int dim, const NetConfig& net, bool with_correction, bool with_d_head) {
    net.validate();
    if (dim < 1) throw ConfigError("dim", "must be at least 1");
    FlowModel m;
    m.dim = dim;
    m.net = net;
    const auto kernels = TimeKernels::make(net.kernels, net.bandwidth);
    const MlpSpec v_spec{dim, dim, net.hidden_layers, net.hidden_width, Activation::swish};
    m.velocity = RbfTimeEnsemble::allocate(m.params, "V", v_spec, kernels);
    m.c_head = TimeScalarHead::allocate(m.params, "C", kernels, net.head_scale);
    if (with_correction) {
      const MlpSpec f_spec{dim, 1, net.hidden_layers, net.hidden_width, Activation::swish};
      m.correction = RbfTimeEnsemble::allocate(m.params, "f", f_spec, kernels);
    }
    if (with_d_head) m.d_head = TimeScalarHead::allocate(m.params, "D", kernels, net.head_scale);
    m.params.validate();
    return m;
  }

  /// Deterministic initialization; every network draws from its own stream.
  void initialize(std::uint64_t seed) {
    auto init_ensemble = [&](const RbfTimeEnsemble& e, std::uint64_t salt) {
      std::seed_seq seq{seed, salt, std::uint64_t{0x1217}};
      std::mt19937_64 rng(seq);
      for (const auto& member : e.members) member.initialize(params, rng);
    };
    init_ensemble(velocity, 1);
    if (correction) init_ensemble(*correction, 2);
    for (auto& v : params.values("C")) v = 0.0;
    if (d_head)
      for (auto& v : params.values("D")) v = 0.0;
  }

  /// [offset, offset + length) of all slices whose name starts with `prefix` + "/" or equals it.
  std::pair<std::size_t, std::size_t> block(const std::string& prefix) const {
    std::size_t begin = params.size(), end = 0;
    for (const auto& s : params.layout()) {
      if (s.name == prefix || s.name.rfind(prefix + "/", 0) == 0) {
        begin = std::min(begin, s.offset);
        end = std::max(end, s.offset + s.length);
      }
    }
    if (end == 0) return {0, 0};
    return {begin, end - begin};
  }
};

}  // namespace dflow

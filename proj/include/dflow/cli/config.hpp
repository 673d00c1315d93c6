#pragma once

// Run configuration files: one "key = value" per line, '#' starts a comment,
// arrays are comma-separated. Unknown keys are errors.

#include <charconv>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <system_error>
#include <vector>

#include "dflow/energies/energy.hpp"
#include "dflow/engine/errors.hpp"
#include "dflow/trainkit/train.hpp"

namespace dflow {

struct RunConfig {
  std::string name = "run";
  RunSpec spec;
  InterpKind interp = InterpKind::linear;
  std::string output_dir = "out";

  void validate() const {
    spec.validate();
    if (spec.train.objective != Objective::reverse_kl && interp != objective_interp(spec.train.objective))
      throw ConfigError("interp.kind", std::string("objective ") + objective_name(spec.train.objective) +
                                           " uses the " + interp_kind_name(objective_interp(spec.train.objective)) +
                                           " interpolation");
  }
};

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

inline std::string format_double(double v) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

inline double parse_double(const std::string& key, const std::string& s) {
  double v = 0.0;
  const auto t = trim(s);
  const auto r = std::from_chars(t.data(), t.data() + t.size(), v);
  if (r.ec != std::errc() || r.ptr != t.data() + t.size()) throw ConfigError(key, "expected a number, got '" + s + "'");
  return v;
}

inline long parse_long(const std::string& key, const std::string& s) {
  long v = 0;
  const auto t = trim(s);
  const auto r = std::from_chars(t.data(), t.data() + t.size(), v);
  if (r.ec != std::errc() || r.ptr != t.data() + t.size())
    throw ConfigError(key, "expected an integer, got '" + s + "'");
  return v;
}

inline std::vector<double> parse_list(const std::string& key, const std::string& s) {
  std::vector<double> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(parse_double(key, item));
  if (out.empty()) throw ConfigError(key, "empty list");
  return out;
}

inline std::string format_list(const std::vector<double>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + format_double(v[i]);
  return s;
}

inline InterpKind parse_interp(const std::string& s) {
  for (auto k : {InterpKind::linear, InterpKind::learned, InterpKind::mixture_diffusion})
    if (s == interp_kind_name(k)) return k;
  throw ConfigError("interp.kind", "unknown interpolation '" + s + "'");
}

/// Ordered key/value pairs.
using KeyValues = std::vector<std::pair<std::string, std::string>>;

inline KeyValues to_key_values(const RunConfig& c) {
  KeyValues kv;
  auto put = [&](const std::string& k, const std::string& v) { kv.emplace_back(k, v); };
  const auto& s = c.spec;
  put("name", c.name);
  if (const auto* g = std::get_if<GaussianMixtureSpec>(&s.target)) {
    put("target.kind", "gaussian_mixture");
    put("target.dim", std::to_string(g->dim()));
    put("target.weights", format_list(g->weights));
    std::vector<double> means;
    for (const auto& m : g->means) means.insert(means.end(), m.data(), m.data() + m.size());
    put("target.means", format_list(means));
    put("target.variances", format_list(g->variances));
  } else if (const auto* p = std::get_if<Phi4Spec>(&s.target)) {
    put("target.kind", "phi4");
    put("target.N", std::to_string(p->N));
    put("target.m", format_double(p->m));
    put("target.lambda", format_double(p->lambda));
    put("target.alpha", format_double(p->alpha));
  } else {
    throw ConfigError("target.kind", "target must be a Gaussian mixture or phi4");
  }
  if (const auto* b = std::get_if<NormalBaseSpec>(&s.base)) {
    put("base.kind", "normal");
    put("base.dim", std::to_string(b->n));
    put("base.std", format_double(b->std));
  } else if (const auto* b = std::get_if<GenGaussianBaseSpec>(&s.base)) {
    put("base.kind", "gen_gaussian");
    put("base.dim", std::to_string(b->n));
    put("base.sigma", format_double(b->sigma));
    put("base.p", format_double(b->p));
  } else {
    throw ConfigError("base.kind", "base must be normal or gen_gaussian");
  }
  put("net.kernels", std::to_string(s.net.kernels));
  put("net.hidden_layers", std::to_string(s.net.hidden_layers));
  put("net.hidden_width", std::to_string(s.net.hidden_width));
  put("net.bandwidth", format_double(s.net.bandwidth));
  put("net.head_scale", format_double(s.net.head_scale));
  put("interp.kind", interp_kind_name(c.interp));
  const auto& t = s.train;
  put("train.objective", objective_name(t.objective));
  put("train.steps", std::to_string(t.steps));
  put("train.batch", std::to_string(t.batch));
  put("train.eval_batch", std::to_string(t.eval_batch));
  put("train.lr0", format_double(t.lr0));
  put("train.penalty", penalty_name(t.penalty));
  put("train.penalty2", penalty_name(t.penalty2));
  put("train.weighting", weighting_name(t.weighting));
  put("train.integration_steps", std::to_string(t.integration_steps));
  put("train.seed", std::to_string(t.seed));
  put("train.eval_every", std::to_string(t.eval_every));
  put("train.clip_norm", format_double(t.clip_norm));
  put("train.chunk", std::to_string(t.chunk));
  put("fd.h_space", format_double(t.fd.h_space));
  put("fd.h_time", format_double(t.fd.h_time));
  put("output.dir", c.output_dir);
  return kv;
}

}  // namespace detail

inline std::string serialize_config(const RunConfig& c) {
  std::string out;
  for (const auto& [k, v] : detail::to_key_values(c)) out += k + " = " + v + "\n";
  return out;
}

/// Parses and validates a configuration. Missing network and training keys take the
/// defaults of TrainConfig and NetConfig; target.kind and base.kind are required.
inline RunConfig parse_config(const std::string& text) {
  using namespace detail;
  std::map<std::string, std::string> kv;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("line " + std::to_string(lineno), "expected 'key = value'");
    const auto key = trim(line.substr(0, eq));
    if (kv.count(key)) throw ConfigError(key, "duplicate key");
    kv[key] = trim(line.substr(eq + 1));
  }
  std::map<std::string, bool> used;
  auto get = [&](const std::string& k) -> const std::string* {
    auto it = kv.find(k);
    if (it == kv.end()) return nullptr;
    used[k] = true;
    return &it->second;
  };
  auto need = [&](const std::string& k) -> const std::string& {
    const auto* v = get(k);
    if (v == nullptr) throw ConfigError(k, "missing required key");
    return *v;
  };
  auto num = [&](const std::string& k, double& dst) {
    if (const auto* v = get(k)) dst = parse_double(k, *v);
  };
  auto integer = [&](const std::string& k, auto& dst) {
    if (const auto* v = get(k)) {
      const long x = parse_long(k, *v);
      if (x < 0) throw ConfigError(k, "must be non-negative");
      dst = static_cast<std::remove_reference_t<decltype(dst)>>(x);
    }
  };

  RunConfig c;
  if (const auto* v = get("name")) c.name = *v;
  const auto& tk = need("target.kind");
  if (tk == "gaussian_mixture") {
    GaussianMixtureSpec g;
    const long dim = parse_long("target.dim", need("target.dim"));
    if (dim < 1) throw ConfigError("target.dim", "must be at least 1");
    g.weights = parse_list("target.weights", need("target.weights"));
    g.variances = parse_list("target.variances", need("target.variances"));
    const auto means = parse_list("target.means", need("target.means"));
    if (means.size() != g.weights.size() * static_cast<std::size_t>(dim))
      throw ConfigError("target.means", "expected weights x dim values");
    for (std::size_t i = 0; i < g.weights.size(); ++i)
      g.means.push_back(Eigen::Map<const Vector>(means.data() + i * static_cast<std::size_t>(dim), dim));
    c.spec.target = g;
  } else if (tk == "phi4") {
    Phi4Spec p;
    integer("target.N", p.N);
    num("target.m", p.m);
    num("target.lambda", p.lambda);
    num("target.alpha", p.alpha);
    c.spec.target = p;
  } else {
    throw ConfigError("target.kind", "unknown target '" + tk + "'");
  }
  const auto& bk = need("base.kind");
  const int dim = energy_dim(c.spec.target);
  if (bk == "normal") {
    NormalBaseSpec b{dim, 1.0};
    integer("base.dim", b.n);
    num("base.std", b.std);
    c.spec.base = b;
  } else if (bk == "gen_gaussian") {
    GenGaussianBaseSpec b{dim, 1.0, 2.0};
    integer("base.dim", b.n);
    num("base.sigma", b.sigma);
    num("base.p", b.p);
    c.spec.base = b;
  } else {
    throw ConfigError("base.kind", "unknown base '" + bk + "'");
  }
  integer("net.kernels", c.spec.net.kernels);
  integer("net.hidden_layers", c.spec.net.hidden_layers);
  integer("net.hidden_width", c.spec.net.hidden_width);
  num("net.bandwidth", c.spec.net.bandwidth);
  num("net.head_scale", c.spec.net.head_scale);
  auto& t = c.spec.train;
  if (const auto* v = get("train.objective")) t.objective = parse_objective(*v);
  c.interp = objective_interp(t.objective);
  if (const auto* v = get("interp.kind")) c.interp = parse_interp(*v);
  integer("train.steps", t.steps);
  integer("train.batch", t.batch);
  integer("train.eval_batch", t.eval_batch);
  num("train.lr0", t.lr0);
  if (const auto* v = get("train.penalty")) t.penalty = parse_penalty(*v, "train.penalty");
  if (const auto* v = get("train.penalty2")) t.penalty2 = parse_penalty(*v, "train.penalty2");
  if (const auto* v = get("train.weighting")) t.weighting = parse_weighting(*v);
  integer("train.integration_steps", t.integration_steps);
  integer("train.seed", t.seed);
  integer("train.eval_every", t.eval_every);
  num("train.clip_norm", t.clip_norm);
  integer("train.chunk", t.chunk);
  num("fd.h_space", t.fd.h_space);
  num("fd.h_time", t.fd.h_time);
  if (const auto* v = get("output.dir")) c.output_dir = *v;
  for (const auto& [k, v] : kv)
    if (!used.count(k)) throw ConfigError(k, "unknown key");
  c.validate();
  return c;
}

inline RunConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("config", "cannot read '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

inline bool operator==(const RunConfig& a, const RunConfig& b) { return serialize_config(a) == serialize_config(b); }

}  // namespace dflow

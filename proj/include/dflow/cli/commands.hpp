#pragma once

#include <cmath>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "dflow/cli/config.hpp"
#include "dflow/cli/csv.hpp"
#include "dflow/metrics/metrics.hpp"
#include "dflow/nets/checkpoint.hpp"
#include "dflow/trainkit/train.hpp"

namespace dflow::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitConfig = 1;
inline constexpr int kExitNumerical = 2;

/// Maps library exceptions to exit codes and prints the message.
template <class Fn>
int guarded(std::ostream& err, Fn&& fn) {
  try {
    return fn();
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const NumericalError& e) {
    err << "numerical error: " << e.what() << "\n";
    return kExitNumerical;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitConfig;
  }
}

inline std::string checkpoint_name(long step) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "ckpt_%07ld.dflow", step);
  return buf;
}

/// Model for `cfg` with parameters from a checkpoint; the slice tables must agree.
inline FlowModel load_model(const RunConfig& cfg, const std::string& ckpt) {
  auto model = build_model(cfg.spec);
  auto params = read_checkpoint(ckpt);
  if (!params.same_layout(model.params))
    throw ConfigError("checkpoint", "slice table of '" + ckpt + "' does not match the configured networks");
  model.params = std::move(params);
  return model;
}

inline int cmd_train(const std::string& config_path, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    const auto cfg = load_config(config_path);
    namespace fs = std::filesystem;
    const fs::path dir = cfg.output_dir;
    fs::create_directories(dir);
    {
      std::ofstream f(dir / "config.resolved", std::ios::binary);
      f << serialize_config(cfg);
    }
    CsvFile metrics((dir / "metrics.csv").string(), kMetricsHeader);
    CsvFile losses((dir / "loss.csv").string(), "step,loss");
    TrainHooks hooks;
    hooks.on_eval = [&](const MetricsRecord& r, const FlowModel& m) {
      metrics.line(metrics_row(r));
      metrics.flush();
      write_checkpoint((dir / checkpoint_name(r.step)).string(), m.params);
      write_checkpoint((dir / "model.dflow").string(), m.params);
      out << "step " << r.step << "  rev_kl " << r.rev_kl << "  ess_r " << r.ess_r << "  hausdorff " << r.hausdorff
          << "\n";
    };
    hooks.on_step = [&](long step, double loss) {
      losses.line(std::to_string(step) + "," + detail::format_double(loss));
    };
    try {
      train(cfg.spec, hooks);
    } catch (const TrainingAborted& e) {
      write_samples_csv((dir / "abort_batch.csv").string(), e.batch());
      throw;
    }
    return kExitOk;
  });
}

inline int cmd_eval(const std::string& ckpt, const std::string& config_path, std::optional<long> n,
                    std::optional<std::uint64_t> seed, std::optional<std::string> out_dir, std::ostream& out,
                    std::ostream& err) {
  return guarded(err, [&] {
    const auto cfg = load_config(config_path);
    const auto model = load_model(cfg, ckpt);
    const auto& t = cfg.spec.train;
    const long count = n.value_or(t.eval_batch);
    if (count < 2) throw ConfigError("n", "need at least 2 samples");
    const auto ev = evaluate(model, cfg.spec.base, cfg.spec.target, static_cast<std::size_t>(count),
                             seed.value_or(t.seed), t.integration_steps, t.fd);
    namespace fs = std::filesystem;
    const fs::path dir = out_dir.value_or(cfg.output_dir);
    fs::create_directories(dir);
    CsvFile metrics((dir / "eval_metrics.csv").string(), kMetricsHeader);
    metrics.line(metrics_row(ev.record));
    write_samples_csv((dir / "eval_samples.csv").string(), ev.samples);
    if (const auto* p = std::get_if<Phi4Spec>(&cfg.spec.target)) {
      const auto [a, b] = phi4_modes(*p);
      const double r = 1.5 * std::max(std::abs(a), std::abs(b));
      write_histogram_csv((dir / "eval_histogram.csv").string(), mean_field_histogram(ev.samples, *p, 60, -r, r));
    }
    out << kMetricsHeader << "\n" << metrics_row(ev.record) << "\n";
    return kExitOk;
  });
}

struct GridSpec {
  double x0 = -1.0;
  double x1 = 1.0;
  long steps = 2;
};

inline GridSpec parse_grid(const std::string& s) {
  const auto v = detail::parse_list("grid", s);
  if (v.size() != 3) throw ConfigError("grid", "expected x0,x1,steps");
  GridSpec g{v[0], v[1], std::lround(v[2])};
  if (!(g.x1 > g.x0) || g.steps < 2 || static_cast<double>(g.steps) != v[2])
    throw ConfigError("grid", "need x0 < x1 and an integer steps >= 2");
  return g;
}

inline constexpr double kMaxGridPoints = 1e7;

/// f_t and exp(-f_t) on a rectangular grid (every axis uses the same range) at each listed time.
inline int cmd_dump_interp(const std::string& config_path, const std::string& grid, const std::string& times,
                           std::optional<std::string> ckpt, const std::string& out_path, std::ostream& err) {
  return guarded(err, [&] {
    const auto cfg = load_config(config_path);
    const auto g = parse_grid(grid);
    const auto ts = detail::parse_list("times", times);
    for (double t : ts)
      if (t < 0.0 || t > 1.0) throw ConfigError("times", "times must lie in [0, 1]");
    const int n = energy_dim(cfg.spec.target);
    const double points = std::pow(static_cast<double>(g.steps), n) * static_cast<double>(ts.size());
    if (points > kMaxGridPoints)
      throw ConfigError("grid", "grid has " + detail::format_double(points) + " points; the limit is 1e7 (reduce steps to at most " +
                                    std::to_string(static_cast<long>(std::pow(kMaxGridPoints / ts.size(), 1.0 / n))) +
                                    " per axis)");
    const auto model = ckpt ? load_model(cfg, *ckpt) : build_model(cfg.spec);
    const auto ip = build_interpolant(cfg.spec, model);
    std::string header = "t";
    for (int i = 0; i < n; ++i) header += ",x" + std::to_string(i + 1);
    CsvFile f(out_path, header + ",f,exp_neg_f");
    const double dx = (g.x1 - g.x0) / static_cast<double>(g.steps - 1);
    for (double t : ts) {
      std::vector<long> idx(static_cast<std::size_t>(n), 0);
      Vector x(n);
      while (true) {
        for (int i = 0; i < n; ++i) x(i) = g.x0 + dx * static_cast<double>(idx[static_cast<std::size_t>(i)]);
        const double fv = f_eval(ip, t, x, model.params);
        std::vector<double> row{t};
        row.insert(row.end(), x.data(), x.data() + n);
        row.push_back(fv);
        row.push_back(std::exp(-fv));
        f.row(row);
        int i = n - 1;
        while (i >= 0 && ++idx[static_cast<std::size_t>(i)] == g.steps) idx[static_cast<std::size_t>(i--)] = 0;
        if (i < 0) break;
      }
    }
    if (cfg.interp == InterpKind::mixture_diffusion) {
      std::string ch = "t,component,weight";
      for (int i = 0; i < n; ++i) ch += ",mean" + std::to_string(i + 1);
      CsvFile c(out_path + ".components.csv", ch + ",variance");
      for (double t : ts) {
        const auto mix = diffuse_mixture(ip.mixture(), ip.sigma_base, t);
        for (std::size_t k = 0; k < mix.size(); ++k) {
          std::vector<double> row{t, static_cast<double>(k), mix.weights[k]};
          row.insert(row.end(), mix.means[k].data(), mix.means[k].data() + n);
          row.push_back(mix.variances[k]);
          c.row(row);
        }
      }
    }
    return kExitOk;
  });
}

/// Grid states of `count` trajectories: "sample,t,x1..xn".
inline int cmd_dump_traj(const std::string& ckpt, const std::string& config_path, long count,
                         std::optional<std::uint64_t> seed, const std::string& out_path, std::ostream& err) {
  return guarded(err, [&] {
    const auto cfg = load_config(config_path);
    if (count < 1) throw ConfigError("count", "must be at least 1");
    const auto model = load_model(cfg, ckpt);
    const auto& t = cfg.spec.train;
    const Matrix z =
        sample_base(cfg.spec.base, static_cast<std::size_t>(count), seed.value_or(t.seed), streams::dump);
    Eval ctx(model.params);
    const auto tr =
        integrate(ctx, VelocityField{&model.velocity}, z, IntegratorConfig{t.integration_steps, 0.0, 1.0}, t.fd, false);
    const int n = static_cast<int>(z.rows());
    std::string header = "sample,t";
    for (int i = 0; i < n; ++i) header += ",x" + std::to_string(i + 1);
    CsvFile f(out_path, header);
    for (Eigen::Index j = 0; j < z.cols(); ++j)
      for (std::size_t k = 0; k < tr.times.size(); ++k) {
        std::vector<double> row{tr.times[k]};
        row.insert(row.end(), tr.states[k].col(j).data(), tr.states[k].col(j).data() + n);
        f.row(row, std::to_string(j));
      }
    return kExitOk;
  });
}

}  // namespace dflow::cli

#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "dflow/cli/commands.hpp"

int main(int argc, char** argv) {
  CLI::App app{"Train and evaluate deformation-equation flows"};
  app.require_subcommand(1);

  std::string config, ckpt, grid, times, out;
  std::optional<long> n;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out_dir, ckpt_opt;
  long count = 16;

  auto* train = app.add_subcommand("train", "train a model from a config file");
  train->add_option("config", config, "run config")->required();

  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint");
  eval->add_option("checkpoint", ckpt, "checkpoint file")->required();
  eval->add_option("config", config, "run config")->required();
  eval->add_option("--n", n, "number of samples");
  eval->add_option("--seed", seed, "evaluation seed");
  eval->add_option("--out", out_dir, "output directory");

  auto* interp = app.add_subcommand("dump-interp", "write f_t on a grid");
  interp->add_option("config", config, "run config")->required();
  interp->add_option("--grid", grid, "x0,x1,steps")->required();
  interp->add_option("--times", times, "t1,t2,...")->required();
  interp->add_option("--ckpt", ckpt_opt, "checkpoint for a learned interpolation");
  interp->add_option("--out", out, "output CSV")->default_val("interp.csv");

  auto* traj = app.add_subcommand("dump-traj", "write trajectory grid states");
  traj->add_option("checkpoint", ckpt, "checkpoint file")->required();
  traj->add_option("config", config, "run config")->required();
  traj->add_option("--count", count, "number of trajectories")->required();
  traj->add_option("--seed", seed, "sampling seed");
  traj->add_option("--out", out, "output CSV")->default_val("trajectories.csv");

  CLI11_PARSE(app, argc, argv);

  namespace cli = dflow::cli;
  if (*train) return cli::cmd_train(config, std::cout, std::cerr);
  if (*eval) return cli::cmd_eval(ckpt, config, n, seed, out_dir, std::cout, std::cerr);
  if (*interp) return cli::cmd_dump_interp(config, grid, times, ckpt_opt, out, std::cerr);
  if (*traj) return cli::cmd_dump_traj(ckpt, config, count, seed, out, std::cerr);
  return 1;
}

// kk <task> --config path [--seed n] [--out dir]
#include <iostream>

#include "CLI11.hpp"
#include "experiment.hpp"

int main(int argc, char** argv) {
  CLI::App app{"Kinetic diffusion experiment runner"};
  app.require_subcommand(1);
  std::string config;
  std::uint64_t seed = 0;
  std::string out;
  for (const std::string& task : kk::cli::task_names()) {
    CLI::App* sub = app.add_subcommand(task, "run the " + task + " task");
    sub->add_option("--config", config, "JSON configuration file (or an emitted manifest)")->required();
    sub->add_option("--seed", seed, "overrides the configured seed");
    sub->add_option("--out", out, "output directory (overrides output.dir)");
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kk::cli::kValidation;
  }

  kk::cli::RunRequest req;
  req.task = app.get_subcommands().front()->get_name();
  req.config_path = config;
  const CLI::App* sub = app.get_subcommands().front();
  if (sub->count("--seed")) req.seed = seed;
  if (sub->count("--out")) req.out_dir = out;

  const kk::cli::RunOutcome res = kk::cli::run_experiment(req);
  if (res.exit_code != kk::cli::kOk) {
    std::cerr << "kk " << req.task << ": " << res.message << "\n";
    return res.exit_code;
  }
  std::cout << "kk " << req.task << ": wrote " << (res.out_dir / "manifest.json").string() << "\n";
  std::cout << res.manifest["summary"].dump() << "\n";
  return 0;
}

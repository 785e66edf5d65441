#include <exception>
#include <iostream>

#include <CLI11.hpp>

#include "dipolegrid/cli.hpp"
#include "dipolegrid/errors.hpp"

namespace cli = dipolegrid::cli;

int main(int argc, char** argv) {
  CLI::App app{"Grid-based dipole tracking: simulate, fit, compare and plot"};
  app.require_subcommand(1);

  struct Args {
    std::string config, out;
    std::uint64_t seed = 0;
  };
  Args args;
  auto add = [&](const char* name, const char* help, bool seeded) {
    CLI::App* sub = app.add_subcommand(name, help);
    sub->add_option("--config", args.config, "JSON config file")->required();
    sub->add_option("--out", args.out, "output directory")->required();
    if (seeded) sub->add_option("--seed", args.seed, "override the config seed");
    return sub;
  };
  CLI::App* simulate = add("simulate", "simulate a trajectory and its measurements", true);
  CLI::App* fit = add("fit", "estimate parameters from measurements", true);
  CLI::App* compare = add("compare", "replicated error comparison of procedures", true);
  CLI::App* plot = add("plot", "SVG plots of a posterior", true);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  cli::RunOptions options{args.config, args.out, std::nullopt};
  for (CLI::App* sub : {simulate, fit, compare, plot}) {
    if (sub->parsed() && sub->count("--seed")) options.seed = args.seed;
  }
  try {
    if (simulate->parsed()) cli::cmd_simulate(options);
    if (fit->parsed()) cli::cmd_fit(options);
    if (compare->parsed()) cli::cmd_compare(options);
    if (plot->parsed()) cli::cmd_plot(options);
  } catch (const dipolegrid::ValidationError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const dipolegrid::json::exception& e) {
    std::cerr << "error: malformed config: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}

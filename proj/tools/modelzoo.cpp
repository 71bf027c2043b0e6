// modelzoo gen-data|fit|sample|eval --config PATH [--out DIR]
#include <iostream>
#include <string>

#include "CLI11.hpp"
#include "modelzoo/experiment.hpp"

int main(int argc, char** argv) {
  CLI::App app{"Energy-based, latent-variable and discriminative model experiments"};
  app.require_subcommand(1);

  struct VerbSpec {
    const char* name;
    const char* help;
  };
  const VerbSpec verbs[] = {
      {"gen-data", "generate the configured dataset under the output directory"},
      {"fit", "train the configured model; writes metrics.csv and model.bin"},
      {"sample", "draw samples from a fitted model"},
      {"eval", "evaluate a fitted model; writes eval.csv"},
  };
  modelzoo::RunOptions opts;
  std::string out;
  for (const auto& v : verbs) {
    auto* sub = app.add_subcommand(v.name, v.help);
    sub->add_option("--config", opts.config, "experiment config file")->required()->check(CLI::ExistingFile);
    sub->add_option("--out", out, "output directory (overrides [experiment] out)");
  }
  CLI11_PARSE(app, argc, argv);

  if (!out.empty()) opts.out = out;
  const auto verb = modelzoo::parse_verb(app.get_subcommands().front()->get_name());
  return modelzoo::run_reporting(verb, opts, std::cerr);
}

#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "raffm/cli.hpp"

int main(int argc, char** argv) {
  using namespace raffm::cli;
  CLI::App app{"raffm: resource-aware federated transformer simulator"};
  app.require_subcommand(1);

  RunOptions run;
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out_dir, export_data;
  auto* run_cmd = app.add_subcommand("run", "run a federated simulation from a JSON config");
  run_cmd->add_option("config", config, "config file")->required();
  run_cmd->add_option("--seed", seed, "override federation.master_seed");
  run_cmd->add_option("--out", out_dir, "output directory (overrides output_dir)");
  run_cmd->add_option("--export-data", export_data, "also write the training set as an RFFM container");

  VerifyOptions verify;
  auto* verify_cmd = app.add_subcommand("verify", "check permutation invariance on random instances");
  verify_cmd->add_option("--trials", verify.trials, "number of random trials")->capture_default_str();
  verify_cmd->add_option("--seed", verify.seed, "base seed")->capture_default_str();
  verify_cmd->add_flag("--negative-control", verify.negative_control,
                       "permute only W^q (must fail)");

  std::string ex_in, ex_spec, ex_out;
  auto* extract_cmd = app.add_subcommand("extract", "prioritize and slice a sub-model from a checkpoint");
  extract_cmd->add_option("--in", ex_in, "input checkpoint")->required();
  extract_cmd->add_option("--spec", ex_spec, "JSON sub-model spec")->required();
  extract_cmd->add_option("--out", ex_out, "output checkpoint")->required();

  std::string in_path;
  auto* inspect_cmd = app.add_subcommand("inspect", "list the tensors in a checkpoint");
  inspect_cmd->add_option("checkpoint", in_path, "RFFM file")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kValidation;
  }

  if (*run_cmd) {
    run.config_path = config;
    run.seed = seed;
    if (!out_dir.empty()) run.out_dir = out_dir;
    if (!export_data.empty()) run.export_data = export_data;
    return cmd_run(run, std::cout, std::cerr);
  }
  if (*verify_cmd) return cmd_verify(verify, std::cout, std::cerr);
  if (*extract_cmd) return cmd_extract(ex_in, ex_spec, ex_out, std::cout, std::cerr);
  return cmd_inspect(in_path, std::cout, std::cerr);
}

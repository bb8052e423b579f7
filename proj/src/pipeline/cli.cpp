#include <chrono>
#include <filesystem>
#include <iostream>

#include "CLI11.hpp"
#include "tspsae/error.hpp"
#include "tspsae/pipeline/pipeline.hpp"

namespace tspsae::pipeline {

namespace {

struct Failure {
  int code;
  std::string kind;
};

// Exception -> exit code. Anything unexpected is an internal error.
Failure classify(std::exception_ptr ep) {
  try {
    std::rethrow_exception(ep);
  } catch (const NumericalError&) {
    return {kNumerical, "numerical"};
  } catch (const ConfigError&) {
    return {kConfig, "config"};
  } catch (const FormatError&) {
    return {kData, "data"};
  } catch (const ParameterError&) {
    return {kConfig, "config"};
  } catch (const DimensionError&) {
    return {kConfig, "config"};
  } catch (const CapacityError&) {
    return {kConfig, "config"};
  } catch (const std::filesystem::filesystem_error&) {
    return {kData, "data"};
  } catch (const ContractError&) {
    return {kInternal, "internal"};
  } catch (const std::runtime_error&) {
    return {kData, "data"};
  } catch (...) {
    return {kInternal, "internal"};
  }
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Train TSP policies and sparse autoencoders over their activations."};
  app.name("tspsae");
  app.require_subcommand(1);
  app.fallthrough();

  std::optional<std::string> config_path, workdir;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> threads;
  std::vector<std::string> sets;
  app.add_option("--config", config_path, "Pipeline config (JSON)")->check(CLI::ExistingFile);
  app.add_option("--seed", seed, "Global seed; replaces every stage seed");
  app.add_option("--threads", threads, "Worker threads")->check(CLI::PositiveNumber);
  app.add_option("--workdir", workdir, "Artifact directory (overrides $TSPSAE_WORKDIR and the config)");
  app.add_option("--set", sets, "Override a config field: dotted.key=value (repeatable)");
  bool print_config = false;
  app.add_flag("--print-config", print_config, "Print the resolved config to stderr before running");

  auto* generate = app.add_subcommand("generate", "Write random instances as JSON files");
  auto* train = app.add_subcommand("train-policy", "Train the policy with REINFORCE");
  std::optional<std::string> resume;
  train->add_option("--resume", resume, "Resume from a training checkpoint")->check(CLI::ExistingFile);
  auto* eval = app.add_subcommand("eval", "Compare greedy tours with nearest neighbour, 2-opt and Held-Karp");
  std::optional<std::string> eval_ckpt;
  eval->add_option("--checkpoint", eval_ckpt, "Policy checkpoint (default: paths.policy)")->check(CLI::ExistingFile);
  auto* capture = app.add_subcommand("capture", "Record encoder residual activations");
  auto* train_sae = app.add_subcommand("train-sae", "Train a sparse autoencoder on captured activations");
  auto* grid = app.add_subcommand("grid-search", "Train one SAE per grid point and tabulate the results");
  auto* analyze = app.add_subcommand("analyze", "Summarise and rank SAE features");
  auto* explorer = app.add_subcommand("export-explorer", "Write overlay exports and the explorer manifest");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n\n" << app.help();
    return kConfig;
  }

  const CLI::App* sub = app.get_subcommands().front();
  const std::string stage = sub->get_name();
  const auto start = std::chrono::steady_clock::now();
  auto emit = [&](nlohmann::json j) {
    out << j.dump() << '\n';
    out.flush();
  };
  try {
    ConfigOverrides o;
    o.seed = seed;
    o.threads = threads;
    if (workdir) o.workdir = *workdir;
    o.set = sets;
    const auto config = load_config(config_path ? std::optional<std::filesystem::path>(*config_path) : std::nullopt, o);
    if (print_config) err << to_json(config).dump(2) << '\n';
    std::filesystem::create_directories(config.paths.workdir);

    nlohmann::json record;
    if (sub == generate) {
      record = run_generate(config);
    } else if (sub == train) {
      record = run_train_policy(config, resume ? std::optional<std::filesystem::path>(*resume) : std::nullopt, emit);
    } else if (sub == eval) {
      record = run_eval(config, eval_ckpt ? std::optional<std::filesystem::path>(*eval_ckpt) : std::nullopt);
    } else if (sub == capture) {
      record = run_capture(config);
    } else if (sub == train_sae) {
      record = run_train_sae(config);
    } else if (sub == grid) {
      record = run_grid_search(config);
    } else if (sub == analyze) {
      record = run_analyze(config);
    } else if (sub == explorer) {
      record = run_export_explorer(config);
    }
    record["wall_seconds"] = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    emit(record);
    err << stage << ": done";
    for (const char* key : {"final_eval", "policy_mean", "gap_vs_held_karp", "records", "overlays", "succeeded"}) {
      if (record.contains(key) && !record[key].is_null()) err << ", " << key << " " << record[key].dump();
    }
    if (record.contains("metrics")) {
      err << ", reconstruction_error " << record["metrics"]["reconstruction_error"].dump();
    }
    err << '\n';
    return kOk;
  } catch (const std::exception& e) {
    const auto f = classify(std::current_exception());
    err << stage << ": " << f.kind << " error: " << e.what() << '\n';
    emit({{"stage", stage}, {"status", "error"}, {"kind", f.kind}, {"exit_code", f.code}, {"error", e.what()}});
    return f.code;
  }
}

}  // namespace tspsae::pipeline

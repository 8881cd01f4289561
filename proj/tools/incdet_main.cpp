#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>

#include "CLI11.hpp"
#include "incdet/experiment.hpp"
#include "json.hpp"

namespace fs = std::filesystem;
using incdet::UsageError;

namespace {

// flags override config-file values; the file supplies defaults
void apply_config_file(const fs::path& path, incdet::TrainConfig& cfg, const CLI::App& app) {
  std::ifstream in(path);
  incdet::check(in.good(), "cannot open config file " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw UsageError("config file " + path.string() + " is not valid JSON: " + e.what());
  }
  auto unset = [&](const std::string& flag) { return app.count(flag) == 0; };
  if (j.contains("epochs") && unset("--epochs")) cfg.epochs = j["epochs"].get<int>();
  if (j.contains("low_lr_epochs") && unset("--low-lr-epochs"))
    cfg.low_lr_epochs = j["low_lr_epochs"].get<int>();
  if (j.contains("lr") && unset("--lr")) cfg.lr = j["lr"].get<double>();
  if (j.contains("batch_size") && unset("--batch")) cfg.batch_size = j["batch_size"].get<int>();
  if (j.contains("lambda") && unset("--lambda")) cfg.lambda = j["lambda"].get<double>();
  if (j.contains("method") && unset("--method"))
    cfg.method = incdet::method_from_name(j["method"].get<std::string>());
  if (j.contains("exemplar_budget") && unset("--exemplars"))
    cfg.exemplars.budget_total = j["exemplar_budget"].get<int>();
  if (j.contains("exemplar_strategy") && unset("--strategy"))
    cfg.exemplars.strategy = incdet::sampling_strategy_from_name(j["exemplar_strategy"].get<std::string>());
  if (j.contains("eta") && unset("--eta")) cfg.exemplars.eta = j["eta"].get<int>();
  if (j.contains("seed") && unset("--seed")) cfg.seed = j["seed"].get<std::uint64_t>();
  if (j.contains("exemplar_batch")) cfg.exemplar_batch = j["exemplar_batch"].get<int>();
  if (j.contains("mask_proposals")) cfg.afd.mask_proposals = j["mask_proposals"].get<int>();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"incremental multi-task shape detection laboratory"};
  app.require_subcommand(1);

  // generate
  auto* gen = app.add_subcommand("generate", "render scenario datasets to disk");
  std::string gen_preset, gen_spec;
  std::string gen_out;
  std::uint64_t gen_seed = 1;
  bool gen_force = false;
  gen->add_option("--preset", gen_preset, "scenario preset name");
  gen->add_option("--spec", gen_spec, "scenario spec JSON file");
  gen->add_option("--out", gen_out, "output directory");
  gen->add_option("--seed", gen_seed, "master seed");
  gen->add_flag("--force", gen_force, "overwrite existing output");

  // shared run/ablate training options
  auto add_train_options = [](CLI::App* cmd, incdet::TrainConfig& cfg, std::string& data,
                              std::string& out, std::string& config_file, int& repeat, bool& force,
                              std::string& method) {
    cmd->add_option("--data", data, "scenario dataset directory")->required();
    cmd->add_option("--out", out, "output directory");
    cmd->add_option("--config", config_file, "JSON config file (flags override)");
    cmd->add_option("--method", method, "training method");
    cmd->add_option("--epochs", cfg.epochs, "total epochs per task");
    cmd->add_option("--low-lr-epochs", cfg.low_lr_epochs, "final epochs at lr*0.1");
    cmd->add_option("--lr", cfg.lr, "learning rate");
    cmd->add_option("--batch", cfg.batch_size, "batch size");
    cmd->add_option("--lambda", cfg.lambda, "distillation weight");
    cmd->add_option("--exemplars", cfg.exemplars.budget_total, "exemplars kept per finished task");
    cmd->add_option("--strategy", [&cfg](const std::vector<std::string>& v) {
      cfg.exemplars.strategy = incdet::sampling_strategy_from_name(v[0]);
      return true;
    }, "exemplar sampling strategy (random|hard|adaptive)");
    cmd->add_option("--eta", cfg.exemplars.eta, "adaptive sampling window factor");
    cmd->add_option("--seed", cfg.seed, "master seed");
    cmd->add_option("--repeat", repeat, "number of seeds to run");
    cmd->add_flag("--force", force, "overwrite existing output");
  };

  auto* run = app.add_subcommand("run", "train a task sequence and evaluate");
  incdet::TrainConfig run_cfg;
  std::string run_data, run_out, run_config, run_method;
  int run_repeat = 1;
  bool run_force = false;
  add_train_options(run, run_cfg, run_data, run_out, run_config, run_repeat, run_force, run_method);

  auto* abl = app.add_subcommand("ablate", "sweep one parameter over a set of values");
  incdet::TrainConfig abl_cfg;
  std::string abl_data, abl_out, abl_config, abl_method;
  int abl_repeat = 1;
  bool abl_force = false;
  std::string abl_sweep;
  add_train_options(abl, abl_cfg, abl_data, abl_out, abl_config, abl_repeat, abl_force, abl_method);
  abl->add_option("--sweep", abl_sweep, "parameter=v1,v2,... (eta|budget|lambda|strategy|method)")
      ->required();

  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint on a dataset");
  std::string ev_ckpt, ev_data, ev_task, ev_out;
  ev->add_option("--ckpt", ev_ckpt, "model checkpoint")->required();
  ev->add_option("--data", ev_data, "task dataset directory")->required();
  ev->add_option("--task", ev_task, "branch name or index (default: dataset name)");
  ev->add_option("--out", ev_out, "write a JSON report here");

  auto* pl = app.add_subcommand("plot", "render plots from a run directory");
  std::string pl_run, pl_out;
  pl->add_option("--run", pl_run, "run directory containing result.json")->required();
  pl->add_option("--out", pl_out, "output directory (default: the run directory)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);  // --help
    app.exit(e);
    return 2;
  }

  try {
    if (gen->parsed()) {
      incdet::GenerateOptions o;
      o.preset = gen_preset;
      o.spec_file = gen_spec;
      o.out_dir = incdet::resolve_out_dir(gen_out, "generate");
      o.seed = gen_seed;
      o.force = gen_force;
      incdet::cmd_generate(o);
    } else if (run->parsed()) {
      if (!run_config.empty()) apply_config_file(run_config, run_cfg, *run);
      if (run->count("--method")) run_cfg.method = incdet::method_from_name(run_method);
      incdet::RunOptions o;
      o.data_dir = run_data;
      o.out_dir = incdet::resolve_out_dir(run_out, "run");
      o.train = run_cfg;
      o.repeat = run_repeat;
      o.force = run_force;
      incdet::cmd_run(o);
    } else if (abl->parsed()) {
      if (!abl_config.empty()) apply_config_file(abl_config, abl_cfg, *abl);
      if (abl->count("--method")) abl_cfg.method = incdet::method_from_name(abl_method);
      const auto eq = abl_sweep.find('=');
      if (eq == std::string::npos)
        throw UsageError("--sweep expects parameter=v1,v2,...; got '" + abl_sweep + "'");
      incdet::AblateOptions o;
      o.base.data_dir = abl_data;
      o.base.out_dir = incdet::resolve_out_dir(abl_out, "ablate");
      o.base.train = abl_cfg;
      o.base.repeat = abl_repeat;
      o.base.force = abl_force;
      o.parameter = abl_sweep.substr(0, eq);
      std::string rest = abl_sweep.substr(eq + 1);
      std::size_t pos = 0;
      while (pos != std::string::npos) {
        const std::size_t comma = rest.find(',', pos);
        const std::string v = rest.substr(pos, comma == std::string::npos ? comma : comma - pos);
        if (!v.empty()) o.values.push_back(v);
        pos = comma == std::string::npos ? comma : comma + 1;
      }
      incdet::cmd_ablate(o);
    } else if (ev->parsed()) {
      incdet::EvalOptions o;
      o.checkpoint = ev_ckpt;
      o.data_dir = ev_data;
      o.task = ev_task;
      o.out_file = ev_out;
      incdet::cmd_eval(o);
    } else if (pl->parsed()) {
      incdet::cmd_plot(pl_run, pl_out);
    }
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  }
  return 0;
}

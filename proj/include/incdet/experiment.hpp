#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "incdet/trainer.hpp"

namespace incdet {

// Command-line misuse (bad preset, unknown sweep parameter); maps to exit 2.
class UsageError : public Error {
 public:
  using Error::Error;
};

struct GenerateOptions {
  std::string preset;                 // one of scenario_preset_names(), or empty
  std::filesystem::path spec_file;    // alternative to preset
  std::filesystem::path out_dir;
  std::uint64_t seed = 1;
  bool force = false;
};

struct RunOptions {
  std::filesystem::path data_dir;
  std::filesystem::path out_dir;
  TrainConfig train;
  int repeat = 1;
  bool force = false;
};

struct AblateOptions {
  RunOptions base;
  std::string parameter;            // eta | budget | lambda | strategy | method
  std::vector<std::string> values;
};

struct EvalOptions {
  std::filesystem::path checkpoint;
  std::filesystem::path data_dir;
  std::string task;  // branch name or index; empty matches the dataset name
  std::filesystem::path out_file;  // optional json report
  EvalConfig eval;
};

// Writes one dataset directory per task plus scenario.json; prints per-task
// summaries. Returns the task directories.
std::vector<std::filesystem::path> cmd_generate(const GenerateOptions& opts);

// Loads the datasets, runs the sequence (repeat times with consecutive
// seeds), writes run artifacts and the aggregate when repeated.
std::vector<SequenceResult> cmd_run(const RunOptions& opts);

// One run per sweep value under <out>/<param>_<value>, plus comparison files.
void cmd_ablate(const AblateOptions& opts);

MapResult cmd_eval(const EvalOptions& opts);

// Renders forgetting heatmap and mAP curves from a run directory.
std::vector<std::filesystem::path> cmd_plot(const std::filesystem::path& run_dir,
                                            const std::filesystem::path& out_dir = {});

// Datasets of a generated scenario directory, in scenario order.
std::vector<TaskDataset> load_scenario_datasets(const std::filesystem::path& dir);

// Resolves an output path against INCDET_OUT when relative.
std::filesystem::path resolve_out_dir(const std::filesystem::path& given, const std::string& verb);

}  // namespace incdet

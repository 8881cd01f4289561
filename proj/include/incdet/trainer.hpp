#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "incdet/detector.hpp"
#include "incdet/distill.hpp"
#include "incdet/eval.hpp"
#include "incdet/sampling.hpp"
#include "incdet/synthdata.hpp"

namespace incdet {

enum class Method { finetune, feature_distill, attention_distill, afd, afd_bu, afd_td, joint };

const char* method_name(Method m);
Method method_from_name(const std::string& name);
std::vector<std::string> method_names();

struct ExemplarConfig {
  int budget_total = 0;  // exemplars stored per finished task; 0 disables replay
  SamplingStrategy strategy = SamplingStrategy::adaptive;
  int eta = 5;
};

struct TrainConfig {
  int epochs = 12;
  int low_lr_epochs = 2;  // final span at lr * 0.1
  double lr = 0.01;
  double momentum = 0.9;
  int batch_size = 8;
  double lambda = 1e-4;  // distillation weight
  Method method = Method::finetune;
  ExemplarConfig exemplars;
  int exemplar_batch = 8;
  std::uint64_t seed = 1;
  bool freeze_first_block = true;
  AfdConfig afd;
  ModelConfig model;
  EvalConfig eval;

  void validate() const;
};

struct StepRecord {
  int step = 0;
  double det_b = 0;    // detection loss on the current task's batch
  double det_a = 0;    // detection loss on the exemplar batch
  double distill = 0;  // unweighted distillation term
  double total = 0;    // det_b + det_a + lambda * distill
};

using StepLogger = std::function<void(const StepRecord&)>;

struct SequenceResult {
  std::vector<std::string> task_names;
  std::vector<std::string> checkpoints;        // column labels
  std::vector<std::vector<double>> map_table;  // [task][checkpoint]; NaN where undefined
  std::string method;
  std::uint64_t seed = 0;

  double at(int task, int checkpoint) const;
  bool sequential() const { return checkpoints == task_names; }
};

void save_sequence_result(const SequenceResult& r, const std::filesystem::path& path);
SequenceResult load_sequence_result(const std::filesystem::path& path);
std::string format_result_table(const SequenceResult& r);

// Per-image sampling stream used inside detection losses; exposed so tests
// can recompute a step's loss components independently.
std::uint64_t det_sample_seed(std::uint64_t cfg_seed, int task, int global_step);

// Trains the first branch by minimizing the detection loss alone. The model
// must be fresh (no trained tasks); adds the branch itself.
int train_first_task(DetectorModel& model, const TaskDataset& ds, const TrainConfig& cfg,
                     const StepLogger& log = nullptr);

// One incremental task: detection loss on the new task, detection loss on
// exemplar batches through their own branches, and the configured
// distillation term against the frozen teacher.
int train_incremental(DetectorModel& model, const DetectorModel& teacher, const TaskDataset& ds_new,
                      const std::vector<const TaskDataset*>& datasets_by_task,
                      const std::vector<ExemplarItem>& exemplars, const TrainConfig& cfg,
                      const StepLogger& log = nullptr);

// Uniformly interleaved multi-task training; the incremental upper bound.
DetectorModel joint_train(const std::vector<TaskDataset>& datasets, const TrainConfig& cfg,
                          const StepLogger& log = nullptr);

struct RunArtifacts {
  std::filesystem::path dir;  // empty disables persistence
};

SequenceResult run_sequence(const std::vector<TaskDataset>& datasets, const TrainConfig& cfg,
                            const RunArtifacts& artifacts = {});

}  // namespace incdet

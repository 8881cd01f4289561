#pragma once

#include <filesystem>

#include "incdet/trainer.hpp"

namespace incdet {

// Lower-triangular heatmap of per-task mAP deltas (later checkpoints vs the
// task's own checkpoint). Requires a sequential result with >= 2 tasks.
void plot_forgetting_heatmap(const SequenceResult& r, const std::filesystem::path& out_png);

// Per-task mAP over checkpoints.
void plot_map_curves(const SequenceResult& r, const std::filesystem::path& out_png);

}  // namespace incdet

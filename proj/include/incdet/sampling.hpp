#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "incdet/synthdata.hpp"

namespace incdet {

enum class SamplingStrategy { random, hard, adaptive };

const char* sampling_strategy_name(SamplingStrategy s);
SamplingStrategy sampling_strategy_from_name(const std::string& name);

struct ExemplarItem {
  std::string image_id;
  int task_id = 0;
  bool operator==(const ExemplarItem&) const = default;
};

struct ExemplarSet {
  std::vector<ExemplarItem> items;  // unique image ids
  int budget_per_class = 0;         // s
  SamplingStrategy strategy = SamplingStrategy::adaptive;
  int eta = 1;
  std::uint64_t seed = 0;
};

struct SamplingOptions {
  // rank candidates by total box count instead of per-class count
  bool rank_by_total_boxes = false;
};

// Image ids of the training split that contain at least one box of `cls`,
// sorted by descending box count with ties broken by ascending id.
std::vector<std::string> rank_by_boxes(const TaskDataset& ds, int cls,
                                       const SamplingOptions& opts = {});

// Per class: uniform sample of s ids without replacement from the first
// window of the ranked list, where the window is s (hard), K (random) or
// min(eta*s, K) (adaptive). Cross-class duplicates are merged and the
// shortfall refilled from beyond the window in rank order.
ExemplarSet sample_exemplars(const TaskDataset& ds, int task_id, int s, int eta,
                             SamplingStrategy strategy, std::uint64_t seed,
                             const SamplingOptions& opts = {});

void save_exemplar_set(const ExemplarSet& ex, const std::filesystem::path& path);
ExemplarSet load_exemplar_set(const std::filesystem::path& path);

// Cycles the exemplar set in reshuffled epochs; every item appears exactly
// once per cycle. An empty set yields empty batches.
class ExemplarBatcher {
 public:
  ExemplarBatcher(std::vector<ExemplarItem> items, int batch_size, std::uint64_t seed);

  std::vector<ExemplarItem> next();
  std::size_t size() const { return items_.size(); }
  std::size_t batches_per_cycle() const;

 private:
  std::vector<ExemplarItem> items_;
  int batch_size_;
  std::mt19937_64 rng_;
  std::size_t pos_ = 0;
};

}  // namespace incdet

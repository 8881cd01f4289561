#pragma once

#include <string>
#include <vector>

#include "incdet/detector.hpp"

namespace incdet {

enum class ApMethod { all_point, eleven_point };

struct ImageEval {
  std::vector<Detection> dets;
  std::vector<BoundingBox> gts;
};

// Greedy confidence-ordered matching against unmatched ground truth at the
// IoU threshold, then area under the monotone-interpolated PR curve.
// No ground truth: 1 when there are also no detections, else 0.
double average_precision(const std::vector<ImageEval>& images, int cls, double iou_thr = 0.5,
                         ApMethod method = ApMethod::all_point);

// single-image convenience
double average_precision(const std::vector<Detection>& dets, const std::vector<BoundingBox>& gts,
                         int cls, double iou_thr = 0.5, ApMethod method = ApMethod::all_point);

struct EvalConfig {
  double score_thr = 0.05;
  double nms_thr = 0.3;
  int max_dets = 100;
  double iou_thr = 0.5;
  ApMethod method = ApMethod::all_point;
};

struct MapResult {
  double map = 0.0;  // mean AP over classes present in the ground truth, in [0,100]
  std::vector<std::pair<int, double>> per_class_ap;
};

// mAP over the classes present in the ground truth of `images`.
MapResult map_from_evals(const std::vector<ImageEval>& images, double iou_thr = 0.5,
                         ApMethod method = ApMethod::all_point);

MapResult evaluate_map(const DetectorModel& model, int task,
                       const std::vector<LabeledImage>& test_set, const EvalConfig& cfg = {});

// mean of per-class AP x 100 over classes present in the test set
double map_score(const DetectorModel& model, int task, const std::vector<LabeledImage>& test_set,
                 const EvalConfig& cfg = {});

// f[i][j] = map(i after j) - map(i after i) for j > i; row sums quantify the
// total forgetting of task i.
struct ForgettingMatrix {
  std::vector<std::string> task_names;
  std::vector<std::vector<double>> delta;  // [i][j], defined for j > i, else 0
  std::vector<double> row_sums;

  int tasks() const { return static_cast<int>(task_names.size()); }
  bool empty() const { return task_names.empty(); }
  // positive total drop across all rows (0 when nothing was forgotten)
  double total_drop() const;
};

// map_table[i][j] = mAP of task i evaluated after training task j (j >= i).
// Entries with j < i are ignored. NaN in a required cell is an error.
ForgettingMatrix forgetting_matrix(const std::vector<std::string>& task_names,
                                   const std::vector<std::vector<double>>& map_table);

}  // namespace incdet

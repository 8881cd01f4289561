#include "incdet/eval.hpp"

#include <algorithm>
#include <cmath>
#include <set>

namespace incdet {

double average_precision(const std::vector<ImageEval>& images, int cls, double iou_thr,
                         ApMethod method) {
  struct Det {
    double score;
    std::size_t image;
    const BoundingBox* box;
  };
  std::vector<Det> dets;
  int total_gt = 0;
  for (std::size_t i = 0; i < images.size(); ++i) {
    for (const BoundingBox& g : images[i].gts)
      if (g.label == cls) ++total_gt;
    for (const Detection& d : images[i].dets)
      if (d.label == cls) dets.push_back({d.score.value_or(0.0), i, &d});
  }
  if (total_gt == 0) return dets.empty() ? 1.0 : 0.0;
  if (dets.empty()) return 0.0;

  std::stable_sort(dets.begin(), dets.end(), [](const Det& a, const Det& b) { return a.score > b.score; });

  std::vector<std::vector<bool>> matched(images.size());
  for (std::size_t i = 0; i < images.size(); ++i) matched[i].assign(images[i].gts.size(), false);

  std::vector<double> precision, recall;
  int tp = 0, fp = 0;
  for (const Det& d : dets) {
    const auto& gts = images[d.image].gts;
    double best = 0;
    int best_gi = -1;
    for (std::size_t gi = 0; gi < gts.size(); ++gi) {
      if (gts[gi].label != cls || matched[d.image][gi]) continue;
      const double v = iou(*d.box, gts[gi]);
      if (v >= iou_thr && v > best) {
        best = v;
        best_gi = static_cast<int>(gi);
      }
    }
    if (best_gi >= 0) {
      matched[d.image][static_cast<std::size_t>(best_gi)] = true;
      ++tp;
    } else {
      ++fp;
    }
    precision.push_back(static_cast<double>(tp) / (tp + fp));
    recall.push_back(static_cast<double>(tp) / total_gt);
  }

  if (method == ApMethod::eleven_point) {
    double ap = 0;
    for (int k = 0; k <= 10; ++k) {
      const double r = k / 10.0;
      double pmax = 0;
      for (std::size_t i = 0; i < recall.size(); ++i)
        if (recall[i] >= r) pmax = std::max(pmax, precision[i]);
      ap += pmax / 11.0;
    }
    return ap;
  }

  // all-point: monotone interpolation then sum over recall increments
  for (std::size_t i = precision.size(); i-- > 1;)
    precision[i - 1] = std::max(precision[i - 1], precision[i]);
  double ap = 0, prev_r = 0;
  for (std::size_t i = 0; i < recall.size(); ++i) {
    ap += (recall[i] - prev_r) * precision[i];
    prev_r = recall[i];
  }
  return ap;
}

double average_precision(const std::vector<Detection>& dets, const std::vector<BoundingBox>& gts,
                         int cls, double iou_thr, ApMethod method) {
  return average_precision(std::vector<ImageEval>{{dets, gts}}, cls, iou_thr, method);
}

MapResult map_from_evals(const std::vector<ImageEval>& images, double iou_thr, ApMethod method) {
  std::set<int> present;
  for (const ImageEval& e : images)
    for (const BoundingBox& b : e.gts) present.insert(b.label);
  MapResult r;
  for (int cls : present)
    r.per_class_ap.emplace_back(cls, average_precision(images, cls, iou_thr, method));
  check(!r.per_class_ap.empty(), "map_from_evals: no ground truth boxes");
  double sum = 0;
  for (const auto& [cls, ap] : r.per_class_ap) sum += ap;
  r.map = 100.0 * sum / static_cast<double>(r.per_class_ap.size());
  return r;
}

MapResult evaluate_map(const DetectorModel& model, int task,
                       const std::vector<LabeledImage>& test_set, const EvalConfig& cfg) {
  check(!test_set.empty(), "evaluate_map: empty test set");
  std::vector<ImageEval> evals;
  evals.reserve(test_set.size());
  for (const LabeledImage& li : test_set) {
    ImageEval e;
    e.dets = model.infer(task, li, cfg.score_thr, cfg.nms_thr, cfg.max_dets);
    e.gts = li.boxes;
    evals.push_back(std::move(e));
  }
  return map_from_evals(evals, cfg.iou_thr, cfg.method);
}

double map_score(const DetectorModel& model, int task, const std::vector<LabeledImage>& test_set,
                 const EvalConfig& cfg) {
  return evaluate_map(model, task, test_set, cfg).map;
}

double ForgettingMatrix::total_drop() const {
  double drop = 0;
  for (double rs : row_sums) drop -= rs;
  return drop;
}

ForgettingMatrix forgetting_matrix(const std::vector<std::string>& task_names,
                                   const std::vector<std::vector<double>>& map_table) {
  ForgettingMatrix fm;
  const std::size_t t = task_names.size();
  if (map_table.size() != t || (t > 0 && map_table[0].size() != t)) return fm;  // not a sequential table
  fm.task_names = task_names;
  fm.delta.assign(t, std::vector<double>(t, 0.0));
  fm.row_sums.assign(t, 0.0);
  for (std::size_t i = 0; i < t; ++i) {
    for (std::size_t j = i; j < t; ++j)
      check(std::isfinite(map_table[i][j]), "forgetting_matrix: missing checkpoint entry (" +
                                                std::to_string(i) + "," + std::to_string(j) + ")");
    for (std::size_t j = i + 1; j < t; ++j) {
      fm.delta[i][j] = map_table[i][j] - map_table[i][i];
      fm.row_sums[i] += fm.delta[i][j];
    }
  }
  return fm;
}

}  // namespace incdet

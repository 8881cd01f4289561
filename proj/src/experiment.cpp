#include "incdet/experiment.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <limits>
#include <sstream>

#include "incdet/plots.hpp"
#include "json.hpp"

namespace incdet {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

void ensure_fresh(const fs::path& dir, const fs::path& sentinel, bool force) {
  if (fs::exists(dir / sentinel)) {
    check(force, "output " + (dir / sentinel).string() + " already exists; pass --force to overwrite");
  }
  fs::create_directories(dir);
}

json train_config_to_json(const TrainConfig& c) {
  json j;
  j["epochs"] = c.epochs;
  j["low_lr_epochs"] = c.low_lr_epochs;
  j["lr"] = c.lr;
  j["momentum"] = c.momentum;
  j["batch_size"] = c.batch_size;
  j["lambda"] = c.lambda;
  j["method"] = method_name(c.method);
  j["exemplar_budget"] = c.exemplars.budget_total;
  j["exemplar_strategy"] = sampling_strategy_name(c.exemplars.strategy);
  j["eta"] = c.exemplars.eta;
  j["exemplar_batch"] = c.exemplar_batch;
  j["seed"] = c.seed;
  j["freeze_first_block"] = c.freeze_first_block;
  j["mask_proposals"] = c.afd.mask_proposals;
  j["mask_region"] = c.afd.region == MaskRegion::intersection
                         ? "intersection"
                         : (c.afd.region == MaskRegion::proposal ? "proposal" : "ground_truth");
  j["eval_score_thr"] = c.eval.score_thr;
  j["eval_nms_thr"] = c.eval.nms_thr;
  j["eval_iou_thr"] = c.eval.iou_thr;
  return j;
}

}  // namespace

fs::path resolve_out_dir(const fs::path& given, const std::string& verb) {
  fs::path base = ".";
  if (const char* env = std::getenv("INCDET_OUT"); env && *env) base = env;
  if (given.empty()) return base / ("incdet_" + verb);
  if (given.is_absolute()) return given;
  return base / given;
}

std::vector<fs::path> cmd_generate(const GenerateOptions& opts) {
  ScenarioSpec spec;
  if (!opts.preset.empty()) {
    const auto names = scenario_preset_names();
    if (std::find(names.begin(), names.end(), opts.preset) == names.end()) {
      std::string valid;
      for (const auto& n : names) valid += " " + n;
      throw UsageError("unknown preset '" + opts.preset + "'; valid presets:" + valid);
    }
    spec = scenario_preset(opts.preset, opts.seed);
  } else if (!opts.spec_file.empty()) {
    spec = scenario_spec_from_json_file(opts.spec_file);
    spec.seed = opts.seed;
  } else {
    throw UsageError("generate: either --preset or --spec is required");
  }

  ensure_fresh(opts.out_dir, "scenario.json", opts.force);
  std::vector<TaskDataset> datasets = make_scenario(spec);
  std::vector<fs::path> dirs;
  for (const TaskDataset& ds : datasets) {
    const fs::path dir = opts.out_dir / ds.name;
    save_dataset(ds, dir);
    dirs.push_back(dir);
    std::size_t boxes = 0;
    for (const auto& li : ds.train) boxes += li.boxes.size();
    for (const auto& li : ds.test) boxes += li.boxes.size();
    std::cout << "task " << ds.name << ": " << ds.train.size() << " train / " << ds.test.size()
              << " test images, " << boxes << " boxes, " << ds.num_classes() << " classes ("
              << ds.image_h << "x" << ds.image_w << ")\n";
  }
  scenario_spec_to_json_file(spec, opts.out_dir / "scenario.json");
  return dirs;
}

std::vector<TaskDataset> load_scenario_datasets(const fs::path& dir) {
  check(fs::exists(dir), "dataset directory not found: " + dir.string());
  std::vector<std::string> names;
  if (fs::exists(dir / "scenario.json")) {
    ScenarioSpec spec = scenario_spec_from_json_file(dir / "scenario.json");
    for (const auto& t : spec.tasks) names.push_back(t.name);
  } else {
    for (const auto& entry : fs::directory_iterator(dir))
      if (entry.is_directory() && fs::exists(entry.path() / "manifest.json"))
        names.push_back(entry.path().filename().string());
    std::sort(names.begin(), names.end());
  }
  check(!names.empty(), "no task datasets found under " + dir.string());
  std::vector<TaskDataset> out;
  for (const auto& n : names) out.push_back(load_dataset(dir / n));
  return out;
}

namespace {

void write_aggregate(const std::vector<SequenceResult>& results, const fs::path& dir) {
  const SequenceResult& first = results.front();
  const std::size_t rows = first.task_names.size(), cols = first.checkpoints.size();
  json j;
  j["tasks"] = first.task_names;
  j["checkpoints"] = first.checkpoints;
  j["method"] = first.method;
  j["seeds"] = json::array();
  for (const auto& r : results) j["seeds"].push_back(r.seed);
  json mean_rows = json::array(), stdev_rows = json::array();
  std::ostringstream txt;
  txt << "aggregate over " << results.size() << " seeds (mean +- stdev)\n";
  for (std::size_t i = 0; i < rows; ++i) {
    json mr = json::array(), sr = json::array();
    for (std::size_t jx = 0; jx < cols; ++jx) {
      std::vector<double> vs;
      for (const auto& r : results)
        if (std::isfinite(r.map_table[i][jx])) vs.push_back(r.map_table[i][jx]);
      if (vs.empty()) {
        mr.push_back(nullptr);
        sr.push_back(nullptr);
        continue;
      }
      double mean = 0;
      for (double v : vs) mean += v;
      mean /= static_cast<double>(vs.size());
      double var = 0;
      for (double v : vs) var += (v - mean) * (v - mean);
      const double stdev = vs.size() > 1 ? std::sqrt(var / static_cast<double>(vs.size() - 1)) : 0.0;
      mr.push_back(mean);
      sr.push_back(stdev);
      txt << first.task_names[i] << " after " << first.checkpoints[jx] << ": " << mean << " +- "
          << stdev << "\n";
    }
    mean_rows.push_back(mr);
    stdev_rows.push_back(sr);
  }
  j["mean"] = mean_rows;
  j["stdev"] = stdev_rows;
  std::ofstream out(dir / "aggregate.json");
  out << j.dump(2) << "\n";
  std::ofstream t(dir / "aggregate.txt");
  t << txt.str();
}

}  // namespace

std::vector<SequenceResult> cmd_run(const RunOptions& opts) {
  std::vector<TaskDataset> datasets = load_scenario_datasets(opts.data_dir);
  ensure_fresh(opts.out_dir, "config.json", opts.force);

  {
    json cfg_json = train_config_to_json(opts.train);
    cfg_json["data"] = opts.data_dir.string();
    cfg_json["repeat"] = opts.repeat;
    std::ofstream out(opts.out_dir / "config.json");
    out << cfg_json.dump(2) << "\n";
  }

  std::vector<SequenceResult> results;
  for (int k = 0; k < opts.repeat; ++k) {
    TrainConfig cfg = opts.train;
    cfg.seed = opts.train.seed + static_cast<std::uint64_t>(k);
    const fs::path run_dir =
        opts.repeat > 1 ? opts.out_dir / ("seed_" + std::to_string(cfg.seed)) : opts.out_dir;
    fs::create_directories(run_dir);
    {
      std::ofstream out(run_dir / "config.json");
      out << train_config_to_json(cfg).dump(2) << "\n";
    }
    std::cout << "run: method=" << method_name(cfg.method) << " seed=" << cfg.seed << " -> "
              << run_dir.string() << "\n";
    results.push_back(run_sequence(datasets, cfg, {run_dir}));
    std::cout << format_result_table(results.back());
  }
  if (opts.repeat > 1) write_aggregate(results, opts.out_dir);
  return results;
}

void cmd_ablate(const AblateOptions& opts) {
  const std::vector<std::string> known = {"eta", "budget", "lambda", "strategy", "method"};
  if (std::find(known.begin(), known.end(), opts.parameter) == known.end()) {
    std::string valid;
    for (const auto& n : known) valid += " " + n;
    throw UsageError("unknown sweep parameter '" + opts.parameter + "'; valid:" + valid);
  }
  check(!opts.values.empty(), "ablate: no sweep values given");
  ensure_fresh(opts.base.out_dir, "comparison.json", opts.base.force);

  json comparison = json::array();
  std::ostringstream txt;
  for (const std::string& value : opts.values) {
    RunOptions ro = opts.base;
    if (opts.parameter == "eta")
      ro.train.exemplars.eta = std::stoi(value);
    else if (opts.parameter == "budget")
      ro.train.exemplars.budget_total = std::stoi(value);
    else if (opts.parameter == "lambda")
      ro.train.lambda = std::stod(value);
    else if (opts.parameter == "strategy")
      ro.train.exemplars.strategy = sampling_strategy_from_name(value);
    else if (opts.parameter == "method")
      ro.train.method = method_from_name(value);
    ro.out_dir = opts.base.out_dir / (opts.parameter + "_" + value);

    std::vector<SequenceResult> results = cmd_run(ro);

    // summarize: per-task mAP at the final checkpoint, averaged over seeds
    const std::size_t rows = results[0].task_names.size();
    const std::size_t last = results[0].checkpoints.size() - 1;
    json entry;
    entry[opts.parameter] = value;
    entry["method"] = results[0].method;
    json final_map = json::array();
    txt << opts.parameter << "=" << value << ":";
    for (std::size_t i = 0; i < rows; ++i) {
      double mean = 0;
      int cnt = 0;
      for (const auto& r : results)
        if (std::isfinite(r.map_table[i][last])) {
          mean += r.map_table[i][last];
          ++cnt;
        }
      mean = cnt ? mean / cnt : std::numeric_limits<double>::quiet_NaN();
      final_map.push_back(mean);
      txt << " " << results[0].task_names[i] << "=" << mean;
    }
    txt << "\n";
    entry["final_map"] = final_map;
    comparison.push_back(entry);
  }
  std::ofstream out(opts.base.out_dir / "comparison.json");
  out << comparison.dump(2) << "\n";
  std::ofstream t(opts.base.out_dir / "comparison.txt");
  t << txt.str();
  std::cout << txt.str();
}

MapResult cmd_eval(const EvalOptions& opts) {
  DetectorModel model = DetectorModel::load_checkpoint(opts.checkpoint);
  TaskDataset ds = load_dataset(opts.data_dir);

  int task = -1;
  if (opts.task.empty()) {
    for (int t = 0; t < model.num_tasks(); ++t)
      if (model.task_name(t) == ds.name) task = t;
    check(task >= 0, "eval: checkpoint has no branch named '" + ds.name + "'; pass --task");
  } else {
    bool numeric = !opts.task.empty() && std::all_of(opts.task.begin(), opts.task.end(),
                                                     [](char c) { return std::isdigit(c); });
    if (numeric) {
      task = std::stoi(opts.task);
    } else {
      for (int t = 0; t < model.num_tasks(); ++t)
        if (model.task_name(t) == opts.task) task = t;
    }
    check(task >= 0 && task < model.num_tasks(), "eval: unknown task '" + opts.task + "'");
  }

  MapResult r = evaluate_map(model, task, ds.test, opts.eval);
  std::cout << "task " << model.task_name(task) << " on " << ds.name << ": mAP " << r.map << "\n";
  for (const auto& [cls, ap] : r.per_class_ap) {
    const auto& names = model.class_names(task);
    const std::string label =
        cls < static_cast<int>(names.size()) ? names[static_cast<std::size_t>(cls)] : std::to_string(cls);
    std::cout << "  " << label << ": AP " << ap << "\n";
  }
  if (!opts.out_file.empty()) {
    json j;
    j["task"] = model.task_name(task);
    j["dataset"] = ds.name;
    j["map"] = r.map;
    j["per_class"] = json::array();
    for (const auto& [cls, ap] : r.per_class_ap) j["per_class"].push_back({{"class", cls}, {"ap", ap}});
    std::ofstream out(opts.out_file);
    check(out.good(), "eval: cannot write " + opts.out_file.string());
    out << j.dump(2) << "\n";
  }
  return r;
}

std::vector<fs::path> cmd_plot(const fs::path& run_dir, const fs::path& out_dir) {
  const fs::path result_file = run_dir / "result.json";
  check(fs::exists(result_file), "plot: missing result file " + result_file.string());
  SequenceResult r = load_sequence_result(result_file);
  const fs::path dest = out_dir.empty() ? run_dir : out_dir;
  fs::create_directories(dest);
  std::vector<fs::path> written;
  const fs::path curves = dest / "map_curves.png";
  plot_map_curves(r, curves);
  written.push_back(curves);
  if (r.sequential() && r.task_names.size() >= 2) {
    const fs::path heat = dest / "forgetting_heatmap.png";
    plot_forgetting_heatmap(r, heat);
    written.push_back(heat);
  }
  for (const auto& p : written) std::cout << "wrote " << p.string() << "\n";
  return written;
}

}  // namespace incdet

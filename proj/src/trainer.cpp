#include "incdet/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>
#include <unordered_map>

#include "json.hpp"

namespace incdet {

using nlohmann::json;

const char* method_name(Method m) {
  switch (m) {
    case Method::finetune: return "finetune";
    case Method::feature_distill: return "feature_distill";
    case Method::attention_distill: return "attention_distill";
    case Method::afd: return "afd";
    case Method::afd_bu: return "afd_bu";
    case Method::afd_td: return "afd_td";
    case Method::joint: return "joint";
  }
  return "?";
}

Method method_from_name(const std::string& name) {
  for (Method m : {Method::finetune, Method::feature_distill, Method::attention_distill, Method::afd,
                   Method::afd_bu, Method::afd_td, Method::joint})
    if (name == method_name(m)) return m;
  throw Error("unknown method '" + name + "'");
}

std::vector<std::string> method_names() {
  std::vector<std::string> out;
  for (Method m : {Method::finetune, Method::feature_distill, Method::attention_distill, Method::afd,
                   Method::afd_bu, Method::afd_td, Method::joint})
    out.emplace_back(method_name(m));
  return out;
}

void TrainConfig::validate() const {
  check(epochs >= 1, "TrainConfig: epochs must be >= 1");
  check(low_lr_epochs >= 0 && low_lr_epochs <= epochs, "TrainConfig: bad low_lr_epochs");
  check(lambda >= 0, "TrainConfig: lambda must be >= 0");
  check(batch_size >= 1 && exemplar_batch >= 1, "TrainConfig: bad batch size");
  check(exemplars.budget_total >= 0, "TrainConfig: bad exemplar budget");
  check(exemplars.eta >= 1, "TrainConfig: eta must be >= 1");
}

std::uint64_t det_sample_seed(std::uint64_t cfg_seed, int task, int global_step) {
  return mix64(cfg_seed, 0xD5AE ^ static_cast<std::uint64_t>(task),
               static_cast<std::uint64_t>(global_step));
}

double SequenceResult::at(int task, int checkpoint) const {
  check(task >= 0 && task < static_cast<int>(task_names.size()), "SequenceResult: bad task index");
  check(checkpoint >= 0 && checkpoint < static_cast<int>(checkpoints.size()),
        "SequenceResult: bad checkpoint index");
  return map_table[static_cast<std::size_t>(task)][static_cast<std::size_t>(checkpoint)];
}

void save_sequence_result(const SequenceResult& r, const std::filesystem::path& path) {
  json j;
  j["tasks"] = r.task_names;
  j["checkpoints"] = r.checkpoints;
  j["method"] = r.method;
  j["seed"] = r.seed;
  j["map_table"] = json::array();
  for (const auto& row : r.map_table) {
    json jr = json::array();
    for (double v : row) {
      if (std::isfinite(v))
        jr.push_back(v);
      else
        jr.push_back(nullptr);
    }
    j["map_table"].push_back(jr);
  }
  std::ofstream out(path);
  check(out.good(), "save_sequence_result: cannot write " + path.string());
  out << j.dump(2) << "\n";
}

SequenceResult load_sequence_result(const std::filesystem::path& path) {
  std::ifstream in(path);
  check(in.good(), "load_sequence_result: cannot open " + path.string());
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw Error("sequence result is not valid JSON (" + path.string() + "): " + e.what());
  }
  SequenceResult r;
  try {
    r.task_names = j.at("tasks").get<std::vector<std::string>>();
    r.checkpoints = j.at("checkpoints").get<std::vector<std::string>>();
    r.method = j.at("method").get<std::string>();
    r.seed = j.at("seed").get<std::uint64_t>();
    for (const auto& jr : j.at("map_table")) {
      std::vector<double> row;
      for (const auto& v : jr)
        row.push_back(v.is_null() ? std::numeric_limits<double>::quiet_NaN() : v.get<double>());
      r.map_table.push_back(std::move(row));
    }
  } catch (const json::exception& e) {
    throw Error("sequence result " + path.string() + " is missing a field: " + e.what());
  }
  check(r.map_table.size() == r.task_names.size(), "sequence result: bad table row count");
  return r;
}

std::string format_result_table(const SequenceResult& r) {
  std::ostringstream os;
  os << "method: " << r.method << "  seed: " << r.seed << "\n";
  os << "mAP table (rows: task evaluated, columns: after training)\n";
  char buf[64];
  os << "            ";
  for (const auto& c : r.checkpoints) {
    std::snprintf(buf, sizeof(buf), " %12s", c.c_str());
    os << buf;
  }
  os << "\n";
  for (std::size_t i = 0; i < r.task_names.size(); ++i) {
    std::snprintf(buf, sizeof(buf), "%12s", r.task_names[i].c_str());
    os << buf;
    for (std::size_t j = 0; j < r.checkpoints.size(); ++j) {
      const double v = r.map_table[i][j];
      if (std::isfinite(v))
        std::snprintf(buf, sizeof(buf), " %12.2f", v);
      else
        std::snprintf(buf, sizeof(buf), " %12s", "-");
      os << buf;
    }
    os << "\n";
  }
  if (r.sequential() && r.task_names.size() >= 2) {
    ForgettingMatrix fm = forgetting_matrix(r.task_names, r.map_table);
    os << "forgetting row sums:";
    for (std::size_t i = 0; i + 1 < fm.row_sums.size(); ++i)
      os << " " << r.task_names[i] << "=" << fm.row_sums[i];
    os << "  (total drop " << fm.total_drop() << ")\n";
  }
  return os.str();
}

namespace {

struct StepImage {
  const LabeledImage* img = nullptr;
  int det_task = 0;          // branch receiving the detection loss
  int student_mask_task = 0; // branch providing student proposals for the mask
  int teacher_mask_task = 0;
  bool exemplar = false;
};

// Teacher-side forward results are constant during a task, so they are
// computed once per image and cached.
struct TeacherContext {
  const DetectorModel* teacher = nullptr;
  AfdConfig afd;
  std::unordered_map<std::string, Tensor> fm_cache;
  std::unordered_map<std::string, Tensor> mask_cache;

  const Tensor& features_for(const LabeledImage& img) {
    auto it = fm_cache.find(img.id);
    if (it != fm_cache.end()) return it->second;
    Tensor fm = teacher->extract_features(img).values;
    return fm_cache.emplace(img.id, std::move(fm)).first->second;
  }

  const Tensor& mask_for(const LabeledImage& img, int mask_task) {
    auto it = mask_cache.find(img.id);
    if (it != mask_cache.end()) return it->second;
    FeatureMap fm{features_for(img), teacher->config().stride()};
    AttentionMap m = model_topdown_mask(*teacher, mask_task, img.boxes, fm, afd);
    return mask_cache.emplace(img.id, std::move(m.values)).first->second;
  }
};

bool uses_topdown(Method m) { return m == Method::afd || m == Method::afd_td; }

Tensor student_mask_for(const DetectorModel& model, ad::Graph& g, ad::Var fm,
                        const StepImage& si, const DetectorModel::RpnOut& det_rpn,
                        const AfdConfig& afd) {
  const Tensor *obj, *deltas;
  DetectorModel::RpnOut extra;
  if (si.student_mask_task == si.det_task) {
    obj = &det_rpn.obj->value;
    deltas = &det_rpn.deltas->value;
  } else {
    extra = model.rpn_forward(g, si.student_mask_task, fm);
    obj = &extra.obj->value;
    deltas = &extra.deltas->value;
  }
  std::vector<Proposal> props = model.decode_proposals(*obj, *deltas, afd.mask_proposals);
  const int hf = model.config().feat_size();
  return topdown_mask(si.img->boxes, props, hf, hf, model.config().stride(), afd.region).values;
}

StepRecord run_step(DetectorModel& model, nn::SgdMomentum& opt, TeacherContext* tc,
                    const std::vector<StepImage>& images, const TrainConfig& cfg, int global_step,
                    double lr, const std::string& stage) {
  opt.zero_grads();
  int n_b = 0, n_a = 0;
  for (const StepImage& si : images) (si.exemplar ? n_a : n_b)++;
  const int n_all = n_b + n_a;
  const bool distill = tc != nullptr && cfg.lambda != 0.0 && cfg.method != Method::finetune &&
                       cfg.method != Method::joint;

  StepRecord rec;
  rec.step = global_step;
  for (const StepImage& si : images) {
    ad::Graph g;
    ad::Var fm = model.features(g, model.model_input(*si.img));
    DetectorModel::RpnOut rpn = model.rpn_forward(g, si.det_task, fm);
    std::mt19937_64 rng = make_rng(
        mix64(det_sample_seed(cfg.seed, si.det_task, global_step), str_hash64(si.img->id)));
    DetTargets targets =
        model.build_targets(si.det_task, rpn.obj->value, rpn.deltas->value, si.img->boxes, rng);
    LossParts parts;
    ad::Var det = model.det_loss_from_targets(g, si.det_task, fm, rpn, targets, &parts);
    const double det_w = si.exemplar ? 1.0 / n_a : 1.0 / n_b;
    (si.exemplar ? rec.det_a : rec.det_b) += parts.total() * det_w;
    ad::Var loss = g.scale(det, det_w);

    if (distill) {
      const Tensor& t_fm = tc->features_for(*si.img);
      ad::Var dvar = nullptr;
      switch (cfg.method) {
        case Method::feature_distill:
          dvar = feature_distill_loss(g, fm, t_fm);
          break;
        case Method::attention_distill:
          dvar = attention_distill_loss(g, fm, t_fm);
          break;
        case Method::afd_bu:
          dvar = bottom_up_afd_loss(g, fm, t_fm);
          break;
        case Method::afd:
        case Method::afd_td: {
          Tensor smask = student_mask_for(model, g, fm, si, rpn, cfg.afd);
          const Tensor& tmask = tc->mask_for(*si.img, si.teacher_mask_task);
          if (cfg.method == Method::afd)
            dvar = afd_image_loss(g, fm, t_fm, smask, tmask);
          else
            dvar = topdown_afd_loss(g, fm, t_fm, smask, tmask);
          break;
        }
        default:
          break;
      }
      rec.distill += dvar->value[0] / n_all;
      loss = g.add(loss, g.scale(dvar, cfg.lambda / n_all));
    }

    g.backward(loss);
    const auto& params = model.params();
    g.for_each_param_grad([&](int idx, const Tensor& grad) {
      params[static_cast<std::size_t>(idx)]->grad.add_(grad);
    });
  }

  rec.total = rec.det_b + rec.det_a + cfg.lambda * rec.distill;
  if (!std::isfinite(rec.total))
    throw Error("training diverged at " + stage + ", step " + std::to_string(global_step) +
                " (det_b=" + std::to_string(rec.det_b) + ", det_a=" + std::to_string(rec.det_a) +
                ", distill=" + std::to_string(rec.distill) + ")");
  opt.step(lr);
  return rec;
}

std::vector<std::vector<int>> epoch_batches(std::size_t n, int batch_size, std::mt19937_64& rng) {
  std::vector<int> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = static_cast<int>(i);
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<std::vector<int>> batches;
  for (std::size_t start = 0; start < n; start += static_cast<std::size_t>(batch_size)) {
    const std::size_t end = std::min(n, start + static_cast<std::size_t>(batch_size));
    batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(start),
                         order.begin() + static_cast<std::ptrdiff_t>(end));
  }
  return batches;
}

double lr_for_epoch(const TrainConfig& cfg, int epoch) {
  return epoch >= cfg.epochs - cfg.low_lr_epochs ? cfg.lr * 0.1 : cfg.lr;
}

std::uint64_t branch_seed(const TrainConfig& cfg, int task) {
  return mix64(cfg.seed, 0xB0, static_cast<std::uint64_t>(task));
}

std::uint64_t shuffle_seed(const TrainConfig& cfg, int task, int epoch) {
  return mix64(cfg.seed, 0xE9 ^ static_cast<std::uint64_t>(task), static_cast<std::uint64_t>(epoch));
}

}  // namespace

int train_first_task(DetectorModel& model, const TaskDataset& ds, const TrainConfig& cfg,
                     const StepLogger& log) {
  cfg.validate();
  check(model.num_tasks() == 0, "train_first_task: model already has trained tasks");
  check(!ds.train.empty(), "train_first_task: empty training split");
  const int task = model.add_branch(ds.name, ds.category_names, branch_seed(cfg, 0));

  nn::SgdMomentum opt(cfg.momentum);
  opt.add_all(model.params());

  int step = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::mt19937_64 rng = make_rng(shuffle_seed(cfg, task, epoch));
    for (const auto& batch : epoch_batches(ds.train.size(), cfg.batch_size, rng)) {
      std::vector<StepImage> images;
      for (int i : batch) images.push_back({&ds.train[static_cast<std::size_t>(i)], task, task, 0, false});
      StepRecord rec = run_step(model, opt, nullptr, images, cfg, step, lr_for_epoch(cfg, epoch),
                                "first task " + ds.name);
      if (log) log(rec);
      ++step;
    }
  }
  return task;
}

int train_incremental(DetectorModel& model, const DetectorModel& teacher, const TaskDataset& ds_new,
                      const std::vector<const TaskDataset*>& datasets_by_task,
                      const std::vector<ExemplarItem>& exemplars, const TrainConfig& cfg,
                      const StepLogger& log) {
  cfg.validate();
  check(model.num_tasks() >= 1, "train_incremental: model has no previous task");
  check(teacher.all_frozen(), "train_incremental: teacher must be frozen");
  check(teacher.num_tasks() == model.num_tasks(),
        "train_incremental: teacher/model task count mismatch (snapshot the model before adding "
        "the new branch)");
  check(teacher.config().image_size == model.config().image_size,
        "train_incremental: teacher/model architecture mismatch");
  check(!ds_new.train.empty(), "train_incremental: empty training split");

  const int task = model.add_branch(ds_new.name, ds_new.category_names,
                                    branch_seed(cfg, model.num_tasks()));
  if (cfg.freeze_first_block) model.freeze_first_block();

  nn::SgdMomentum opt(cfg.momentum);
  opt.add_all(model.params());

  // resolve exemplar ids against their source datasets
  std::unordered_map<int, std::unordered_map<std::string, const LabeledImage*>> by_task;
  for (const ExemplarItem& it : exemplars) {
    check(it.task_id >= 0 && it.task_id < static_cast<int>(datasets_by_task.size()) &&
              datasets_by_task[static_cast<std::size_t>(it.task_id)] != nullptr,
          "train_incremental: exemplar references unknown task " + std::to_string(it.task_id));
    auto& index = by_task[it.task_id];
    if (index.empty())
      for (const LabeledImage& li : datasets_by_task[static_cast<std::size_t>(it.task_id)]->train)
        index.emplace(li.id, &li);
    check(index.count(it.image_id) == 1,
          "train_incremental: exemplar image " + it.image_id + " not found in task " +
              std::to_string(it.task_id));
  }

  TeacherContext tc;
  tc.teacher = &teacher;
  tc.afd = cfg.afd;
  const int teacher_newest = teacher.num_tasks() - 1;

  ExemplarBatcher batcher(exemplars, cfg.exemplar_batch, mix64(cfg.seed, 0xEB));

  int step = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::mt19937_64 rng = make_rng(shuffle_seed(cfg, task, epoch));
    for (const auto& batch : epoch_batches(ds_new.train.size(), cfg.batch_size, rng)) {
      std::vector<StepImage> images;
      for (int i : batch)
        images.push_back({&ds_new.train[static_cast<std::size_t>(i)], task, task, teacher_newest, false});
      for (const ExemplarItem& it : batcher.next()) {
        const LabeledImage* li = by_task[it.task_id][it.image_id];
        images.push_back({li, it.task_id, it.task_id, std::min(it.task_id, teacher_newest), true});
      }
      StepRecord rec = run_step(model, opt, &tc, images, cfg, step, lr_for_epoch(cfg, epoch),
                                "incremental task " + ds_new.name);
      if (log) log(rec);
      ++step;
    }
  }
  return task;
}

DetectorModel joint_train(const std::vector<TaskDataset>& datasets, const TrainConfig& cfg,
                          const StepLogger& log) {
  cfg.validate();
  check(!datasets.empty(), "joint_train: no datasets");
  ModelConfig mc = cfg.model;
  mc.image_size = datasets[0].image_h;
  for (const TaskDataset& ds : datasets)
    check(ds.image_h == mc.image_size && ds.image_w == mc.image_size,
          "joint_train: all datasets must share the image size");

  DetectorModel model(mc, mix64(cfg.seed, 0x40DE1));
  for (std::size_t t = 0; t < datasets.size(); ++t)
    model.add_branch(datasets[t].name, datasets[t].category_names, branch_seed(cfg, static_cast<int>(t)));

  nn::SgdMomentum opt(cfg.momentum);
  opt.add_all(model.params());

  int step = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::vector<std::vector<std::vector<int>>> per_task;
    std::size_t max_batches = 0;
    for (std::size_t t = 0; t < datasets.size(); ++t) {
      std::mt19937_64 rng = make_rng(shuffle_seed(cfg, static_cast<int>(t), epoch));
      per_task.push_back(epoch_batches(datasets[t].train.size(), cfg.batch_size, rng));
      max_batches = std::max(max_batches, per_task.back().size());
    }
    for (std::size_t k = 0; k < max_batches; ++k) {
      for (std::size_t t = 0; t < datasets.size(); ++t) {
        if (k >= per_task[t].size()) continue;
        std::vector<StepImage> images;
        for (int i : per_task[t][k])
          images.push_back({&datasets[t].train[static_cast<std::size_t>(i)], static_cast<int>(t),
                            static_cast<int>(t), 0, false});
        StepRecord rec =
            run_step(model, opt, nullptr, images, cfg, step, lr_for_epoch(cfg, epoch), "joint training");
        if (log) log(rec);
        ++step;
      }
    }
  }
  return model;
}

namespace {

StepLogger jsonl_logger(const std::filesystem::path& path, std::shared_ptr<std::ofstream>& keeper) {
  keeper = std::make_shared<std::ofstream>(path);
  check(keeper->good(), "cannot open step log " + path.string());
  auto out = keeper;
  return [out](const StepRecord& r) {
    json j = {{"step", r.step}, {"det_b", r.det_b}, {"det_a", r.det_a}, {"distill", r.distill},
              {"total", r.total}};
    (*out) << j.dump() << "\n";
  };
}

}  // namespace

SequenceResult run_sequence(const std::vector<TaskDataset>& datasets, const TrainConfig& cfg,
                            const RunArtifacts& artifacts) {
  cfg.validate();
  const bool persist = !artifacts.dir.empty();
  namespace fs = std::filesystem;

  SequenceResult result;
  result.method = method_name(cfg.method);
  result.seed = cfg.seed;
  for (const TaskDataset& ds : datasets) result.task_names.push_back(ds.name);

  const double nan = std::numeric_limits<double>::quiet_NaN();

  if (cfg.method == Method::joint) {
    check(!datasets.empty(), "run_sequence: no datasets");
    std::shared_ptr<std::ofstream> keeper;
    StepLogger log;
    if (persist) {
      fs::create_directories(artifacts.dir / "tasks" / "joint");
      log = jsonl_logger(artifacts.dir / "tasks" / "joint" / "steps.jsonl", keeper);
    }
    DetectorModel model = joint_train(datasets, cfg, log);
    result.checkpoints = {"joint"};
    result.map_table.assign(datasets.size(), {nan});
    for (std::size_t t = 0; t < datasets.size(); ++t)
      result.map_table[t][0] = map_score(model, static_cast<int>(t), datasets[t].test, cfg.eval);
    if (persist) {
      fs::create_directories(artifacts.dir / "checkpoints");
      model.save_checkpoint(artifacts.dir / "checkpoints" / "joint.ckpt");
      save_sequence_result(result, artifacts.dir / "result.json");
      std::ofstream txt(artifacts.dir / "result.txt");
      txt << format_result_table(result);
    }
    return result;
  }

  check(datasets.size() >= 2, "run_sequence: a sequential run needs at least 2 tasks");
  for (const TaskDataset& ds : datasets) result.checkpoints.push_back(ds.name);
  result.map_table.assign(datasets.size(), std::vector<double>(datasets.size(), nan));

  ModelConfig mc = cfg.model;
  mc.image_size = datasets[0].image_h;
  for (const TaskDataset& ds : datasets)
    check(ds.image_h == mc.image_size && ds.image_w == mc.image_size,
          "run_sequence: all datasets must share the image size");
  DetectorModel model(mc, mix64(cfg.seed, 0x40DE1));

  std::vector<const TaskDataset*> ds_ptrs;
  for (const TaskDataset& ds : datasets) ds_ptrs.push_back(&ds);
  std::vector<ExemplarItem> exemplar_pool;

  auto persist_partial = [&] {
    if (!persist) return;
    save_sequence_result(result, artifacts.dir / "result.json");
    std::ofstream txt(artifacts.dir / "result.txt");
    txt << format_result_table(result);
  };

  for (std::size_t t = 0; t < datasets.size(); ++t) {
    const std::string stage = "task " + datasets[t].name;
    try {
      std::shared_ptr<std::ofstream> keeper;
      StepLogger log;
      if (persist) {
        fs::create_directories(artifacts.dir / "tasks" / datasets[t].name);
        log = jsonl_logger(artifacts.dir / "tasks" / datasets[t].name / "steps.jsonl", keeper);
      }
      if (t == 0) {
        train_first_task(model, datasets[0], cfg, log);
      } else {
        DetectorModel teacher = model.snapshot_teacher();
        train_incremental(model, teacher, datasets[t], ds_ptrs, exemplar_pool, cfg, log);
        // teacher goes out of scope here; only the student stays resident
      }

      for (std::size_t i = 0; i <= t; ++i)
        result.map_table[i][t] = map_score(model, static_cast<int>(i), datasets[i].test, cfg.eval);

      if (cfg.exemplars.budget_total > 0 && t + 1 < datasets.size()) {
        const int classes = datasets[t].num_classes();
        const int s = std::max(1, cfg.exemplars.budget_total / classes);
        ExemplarSet ex = sample_exemplars(datasets[t], static_cast<int>(t), s, cfg.exemplars.eta,
                                          cfg.exemplars.strategy,
                                          mix64(cfg.seed, 0xEC, static_cast<std::uint64_t>(t)));
        exemplar_pool.insert(exemplar_pool.end(), ex.items.begin(), ex.items.end());
        if (persist) {
          fs::create_directories(artifacts.dir / "exemplars");
          save_exemplar_set(ex, artifacts.dir / "exemplars" / (datasets[t].name + ".json"));
        }
      }
      if (persist) {
        fs::create_directories(artifacts.dir / "checkpoints");
        model.save_checkpoint(artifacts.dir / "checkpoints" / ("after_" + datasets[t].name + ".ckpt"));
      }
      persist_partial();
    } catch (const Error& e) {
      persist_partial();
      throw Error("run_sequence failed at " + stage + ": " + e.what());
    }
  }
  return result;
}

}  // namespace incdet

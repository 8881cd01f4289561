#include "incdet/trainer.hpp"

#include <cmath>
#include <filesystem>

#include "doctest.h"
#include "testutil.hpp"

using namespace incdet;

namespace {

ScenarioSpec tiny_scenario(std::uint64_t seed, int tasks = 2) {
  DomainStyle s1;
  s1.palette = {color_from_hex("#1b2a38")};
  s1.noise = 0.02;
  DomainStyle s2;
  s2.palette = {color_from_hex("#d8d2c4")};
  s2.texture = TextureKind::stripes;
  s2.noise = 0.04;
  ScenarioSpec spec;
  spec.tasks = {{"ta", s1, CategorySet{{Shape::circle, Shape::square}}},
                {"tb", s2, CategorySet{{Shape::triangle, Shape::cross}}}};
  if (tasks == 3) spec.tasks.push_back({"tc", s1, CategorySet{{Shape::star, Shape::ring}}});
  spec.train_per_task = 8;
  spec.test_per_task = 4;
  spec.image_h = spec.image_w = 64;
  spec.min_objects = 1;
  spec.max_objects = 2;
  spec.seed = seed;
  return spec;
}

TrainConfig tiny_config(std::uint64_t seed = 5) {
  TrainConfig cfg;
  cfg.epochs = 1;
  cfg.low_lr_epochs = 0;
  cfg.lr = 0.005;
  cfg.batch_size = 4;
  cfg.exemplar_batch = 4;
  cfg.seed = seed;
  cfg.model.widths = {4, 8, 8, 16};
  cfg.model.rpn_channels = 8;
  cfg.model.roi_fc_dim = 16;
  cfg.model.anchors.scales = {10, 16, 22, 30};
  cfg.afd.mask_proposals = 8;
  return cfg;
}

DetectorModel fresh_model(const TrainConfig& cfg, int image_size) {
  ModelConfig mc = cfg.model;
  mc.image_size = image_size;
  return DetectorModel(mc, mix64(cfg.seed, 0x40DE1));
}

}  // namespace

TEST_CASE("finetune without exemplars reduces the objective to the new-task detection loss") {
  auto sets = make_scenario(tiny_scenario(3));
  TrainConfig cfg = tiny_config();
  cfg.method = Method::finetune;

  DetectorModel model = fresh_model(cfg, 64);
  train_first_task(model, sets[0], cfg);
  DetectorModel teacher = model.snapshot_teacher();

  std::vector<const TaskDataset*> ptrs = {&sets[0], &sets[1]};
  std::vector<StepRecord> records;
  train_incremental(model, teacher, sets[1], ptrs, {}, cfg,
                    [&](const StepRecord& r) { records.push_back(r); });
  REQUIRE(!records.empty());
  for (const StepRecord& r : records) {
    CHECK(r.det_a == 0.0);
    CHECK(r.distill == 0.0);
    CHECK(r.total == r.det_b);
    CHECK(std::isfinite(r.total));
    CHECK(r.total >= 0.0);
  }
}

TEST_CASE("afd with lambda 0 follows the finetune trajectory bit for bit") {
  auto sets = make_scenario(tiny_scenario(7));

  auto run_with = [&](Method m, double lambda) {
    TrainConfig cfg = tiny_config(11);
    cfg.method = m;
    cfg.lambda = lambda;
    DetectorModel model = fresh_model(cfg, 64);
    train_first_task(model, sets[0], cfg);
    DetectorModel teacher = model.snapshot_teacher();
    std::vector<const TaskDataset*> ptrs = {&sets[0], &sets[1]};
    train_incremental(model, teacher, sets[1], ptrs, {}, cfg);
    return model.param_hash();
  };

  CHECK(run_with(Method::afd, 0.0) == run_with(Method::finetune, 0.0));
  CHECK(run_with(Method::afd, 0.5) != run_with(Method::finetune, 0.0));
}

TEST_CASE("step-0 total equals detection loss plus lambda times afd, recomputed independently") {
  auto sets = make_scenario(tiny_scenario(13));
  TrainConfig cfg = tiny_config(17);
  cfg.method = Method::afd;
  cfg.lambda = 0.3;
  cfg.batch_size = 8;  // whole tiny training split in one step

  DetectorModel model = fresh_model(cfg, 64);
  train_first_task(model, sets[0], cfg);
  DetectorModel before = model.clone();
  DetectorModel teacher = model.snapshot_teacher();

  std::vector<StepRecord> records;
  std::vector<const TaskDataset*> ptrs = {&sets[0], &sets[1]};
  train_incremental(model, teacher, sets[1], ptrs, {}, cfg,
                    [&](const StepRecord& r) { records.push_back(r); });
  REQUIRE(!records.empty());
  const StepRecord r0 = records[0];

  // recompute both components with the pre-step snapshot and public ops
  before.add_branch(sets[1].name, sets[1].category_names, mix64(cfg.seed, 0xB0, 1));
  std::vector<const LabeledImage*> batch;
  for (const auto& li : sets[1].train) batch.push_back(&li);
  const double det_b = before.detection_loss(1, batch, det_sample_seed(cfg.seed, 1, 0)).total();
  const double distill = afd(before, teacher, batch, 1, 0, cfg.afd);

  CHECK(r0.det_b == doctest::Approx(det_b).epsilon(1e-9));
  CHECK(r0.distill == doctest::Approx(distill).epsilon(1e-9));
  CHECK(r0.total == doctest::Approx(det_b + cfg.lambda * distill).epsilon(1e-9));
}

TEST_CASE("teacher parameters never move during incremental training") {
  auto sets = make_scenario(tiny_scenario(19));
  TrainConfig cfg = tiny_config(23);
  cfg.method = Method::afd;
  cfg.lambda = 0.1;
  cfg.exemplars.budget_total = 4;

  DetectorModel model = fresh_model(cfg, 64);
  train_first_task(model, sets[0], cfg);
  DetectorModel teacher = model.snapshot_teacher();
  const std::uint64_t hash_before = teacher.param_hash();

  ExemplarSet ex = sample_exemplars(sets[0], 0, 2, cfg.exemplars.eta, cfg.exemplars.strategy, 5);
  std::vector<const TaskDataset*> ptrs = {&sets[0], &sets[1]};
  train_incremental(model, teacher, sets[1], ptrs, ex.items, cfg);
  CHECK(teacher.param_hash() == hash_before);
}

TEST_CASE("same seed reproduces identical parameters; different seeds diverge") {
  auto sets = make_scenario(tiny_scenario(29));
  TrainConfig cfg = tiny_config(31);

  auto first_hash = [&](std::uint64_t seed) {
    TrainConfig c = cfg;
    c.seed = seed;
    DetectorModel model = fresh_model(c, 64);
    train_first_task(model, sets[0], c);
    return model.param_hash();
  };
  CHECK(first_hash(101) == first_hash(101));
  CHECK(first_hash(101) != first_hash(102));
}

TEST_CASE("poisoned parameters abort training with diagnostics") {
  auto sets = make_scenario(tiny_scenario(37));
  TrainConfig cfg = tiny_config(41);
  DetectorModel model = fresh_model(cfg, 64);
  model.params()[2]->value[0] = std::numeric_limits<double>::quiet_NaN();
  try {
    train_first_task(model, sets[0], cfg);
    FAIL("expected divergence error");
  } catch (const Error& e) {
    CHECK(std::string(e.what()).find("diverged") != std::string::npos);
  }
}

TEST_CASE("run_sequence: table shape for 2 and 3 tasks, artifacts persisted") {
  testutil::TempDir tmp("incdet_run");
  auto sets = make_scenario(tiny_scenario(43));
  TrainConfig cfg = tiny_config(47);
  cfg.exemplars.budget_total = 4;

  SequenceResult r = run_sequence(sets, cfg, {tmp.path()});
  CHECK(r.task_names == std::vector<std::string>{"ta", "tb"});
  CHECK(r.sequential());
  int defined = 0;
  for (const auto& row : r.map_table)
    for (double v : row) defined += std::isfinite(v) ? 1 : 0;
  CHECK(defined == 3);  // (A|A), (A|B), (B|B)
  for (std::size_t i = 0; i < 2; ++i)
    for (std::size_t j = i; j < 2; ++j) {
      CHECK(r.map_table[i][j] >= 0.0);
      CHECK(r.map_table[i][j] <= 100.0);
    }

  namespace fs = std::filesystem;
  CHECK(fs::exists(tmp.path() / "result.json"));
  CHECK(fs::exists(tmp.path() / "result.txt"));
  CHECK(fs::exists(tmp.path() / "tasks" / "ta" / "steps.jsonl"));
  CHECK(fs::exists(tmp.path() / "tasks" / "tb" / "steps.jsonl"));
  CHECK(fs::exists(tmp.path() / "checkpoints" / "after_ta.ckpt"));
  CHECK(fs::exists(tmp.path() / "checkpoints" / "after_tb.ckpt"));
  CHECK(fs::exists(tmp.path() / "exemplars" / "ta.json"));

  SequenceResult loaded = load_sequence_result(tmp.path() / "result.json");
  CHECK(loaded.task_names == r.task_names);
  CHECK(loaded.at(0, 1) == doctest::Approx(r.at(0, 1)));

  auto sets3 = make_scenario(tiny_scenario(53, 3));
  SequenceResult r3 = run_sequence(sets3, tiny_config(59), {});
  int defined3 = 0;
  for (const auto& row : r3.map_table)
    for (double v : row) defined3 += std::isfinite(v) ? 1 : 0;
  CHECK(defined3 == 6);
}

TEST_CASE("joint training: single evaluation row; one dataset equals first-task training") {
  auto sets = make_scenario(tiny_scenario(61));
  TrainConfig cfg = tiny_config(67);
  cfg.method = Method::joint;

  SequenceResult r = run_sequence(sets, cfg, {});
  CHECK(r.checkpoints == std::vector<std::string>{"joint"});
  CHECK_FALSE(r.sequential());
  CHECK(std::isfinite(r.at(0, 0)));
  CHECK(std::isfinite(r.at(1, 0)));
  CHECK(forgetting_matrix(r.task_names, r.map_table).empty());

  // single dataset: joint collapses to plain first-task training
  TrainConfig cfg1 = tiny_config(71);
  DetectorModel joint_model = joint_train({sets[0]}, cfg1);
  DetectorModel first = fresh_model(cfg1, 64);
  train_first_task(first, sets[0], cfg1);
  CHECK(joint_model.param_hash() == first.param_hash());
}

TEST_CASE("joint training: balanced batch interleave over an epoch") {
  auto sets = make_scenario(tiny_scenario(73));
  TrainConfig cfg = tiny_config(79);
  cfg.method = Method::joint;
  int steps = 0;
  joint_train(sets, cfg, [&](const StepRecord&) { ++steps; });
  // equal split sizes: every task contributes the same number of batches
  const int batches_per_task = (8 + cfg.batch_size - 1) / cfg.batch_size;
  CHECK(steps == cfg.epochs * 2 * batches_per_task);
}

TEST_CASE("exemplar replay feeds the previous branch: det_a is logged nonzero") {
  auto sets = make_scenario(tiny_scenario(83));
  TrainConfig cfg = tiny_config(89);
  cfg.method = Method::finetune;
  cfg.exemplars.budget_total = 4;

  DetectorModel model = fresh_model(cfg, 64);
  train_first_task(model, sets[0], cfg);
  DetectorModel teacher = model.snapshot_teacher();
  ExemplarSet ex = sample_exemplars(sets[0], 0, 2, 5, SamplingStrategy::adaptive, 91);
  REQUIRE(!ex.items.empty());

  std::vector<StepRecord> records;
  std::vector<const TaskDataset*> ptrs = {&sets[0], &sets[1]};
  train_incremental(model, teacher, sets[1], ptrs, ex.items, cfg,
                    [&](const StepRecord& r) { records.push_back(r); });
  for (const StepRecord& r : records) {
    CHECK(r.det_a > 0.0);
    CHECK(r.total == doctest::Approx(r.det_b + r.det_a).epsilon(1e-12));
  }
}

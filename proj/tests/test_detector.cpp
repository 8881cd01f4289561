#include "incdet/detector.hpp"

#include <map>

#include "doctest.h"
#include "incdet/synthdata.hpp"
#include "testutil.hpp"

using namespace incdet;

namespace {

DomainStyle style() {
  DomainStyle s;
  s.palette = {color_from_hex("#223344")};
  s.noise = 0.02;
  return s;
}

LabeledImage sample_image(int size, std::uint64_t seed, int n_objects = 2) {
  CategorySet cats{{Shape::circle, Shape::square}};
  return render_image(style(), cats, n_objects, seed, size, size, "img" + std::to_string(seed));
}

ModelConfig micro_config() {
  ModelConfig c;
  c.image_size = 16;
  c.widths = {2, 2, 2, 3};
  c.rpn_channels = 2;
  c.roi_fc_dim = 4;
  c.anchors.scales = {4, 6, 8, 12};
  return c;
}

DetectorModel small_model(int image_size = 64, std::uint64_t seed = 3) {
  ModelConfig c;
  c.image_size = image_size;
  c.widths = {4, 8, 8, 16};
  c.rpn_channels = 8;
  c.roi_fc_dim = 16;
  DetectorModel m(c, seed);
  m.add_branch("taskA", {"circle", "square"}, seed);
  return m;
}

std::int64_t param_count(const DetectorModel& m) {
  std::int64_t n = 0;
  for (const auto& p : m.params()) n += p->value.numel();
  return n;
}

}  // namespace

TEST_CASE("anchor count per cell is exactly 12") {
  DetectorModel m = small_model();
  CHECK(m.config().anchors.per_cell() == 12);
  const int hf = m.config().feat_size();
  CHECK(static_cast<int>(m.anchors().size()) == 12 * hf * hf);
}

TEST_CASE("extract_features: shape contract, finiteness, determinism") {
  ModelConfig c;
  c.image_size = 128;
  DetectorModel m(c, 7);
  m.add_branch("t", {"a"}, 7);

  LabeledImage img = sample_image(128, 5);
  FeatureMap fm = m.extract_features(img);
  CHECK(fm.values.shape() == std::vector<int>{c.widths.back(), 16, 16});
  CHECK(fm.stride == 8);

  LabeledImage zero;
  zero.id = "zero";
  zero.image = Image(128, 128);
  FeatureMap fz = m.extract_features(zero);
  CHECK(fz.values.all_finite());

  FeatureMap fm2 = m.extract_features(img);
  CHECK(fm.values.equals(fm2.values));
}

TEST_CASE("extract_features rejects mismatched image size") {
  DetectorModel m = small_model(64);
  LabeledImage img = sample_image(128, 5);
  try {
    m.extract_features(img);
    FAIL("expected size error");
  } catch (const Error& e) {
    const std::string msg = e.what();
    CHECK(msg.find("64") != std::string::npos);   // expected
    CHECK(msg.find("128") != std::string::npos);  // actual
  }
}

TEST_CASE("propose: k=0 empty, invariants, nms bound verified brute force") {
  DetectorModel m = small_model();
  LabeledImage img = sample_image(64, 11, 3);
  FeatureMap fm = m.extract_features(img);

  CHECK(m.propose(0, fm, 0).empty());

  std::vector<Proposal> props = m.propose(0, fm, 16);
  CHECK(static_cast<int>(props.size()) <= 16);
  CHECK(!props.empty());
  for (const Proposal& p : props) {
    CHECK(p.valid());
    REQUIRE(p.score.has_value());
    CHECK(*p.score >= 0.0);
    CHECK(*p.score <= 1.0);
    CHECK(p.x1 >= 0);
    CHECK(p.y1 >= 0);
    CHECK(p.x2 <= 64);
    CHECK(p.y2 <= 64);
  }
  for (std::size_t i = 0; i < props.size(); ++i)
    for (std::size_t j = i + 1; j < props.size(); ++j)
      CHECK(iou(props[i], props[j]) <= m.config().rpn_nms_thr);

  CHECK_THROWS_AS(m.propose(3, fm, 5), Error);  // unknown task
}

TEST_CASE("detection_loss: non-negative, finite, label range enforced") {
  DetectorModel m = small_model();
  LabeledImage a = sample_image(64, 21, 2);
  LabeledImage b = sample_image(64, 22, 3);
  LossParts parts = m.detection_loss(0, {&a, &b}, 99);
  CHECK(parts.total() >= 0.0);
  CHECK(std::isfinite(parts.total()));
  CHECK(parts.rpn_cls > 0.0);

  LabeledImage bad = a;
  bad.boxes[0].label = 7;  // task has 2 classes
  CHECK_THROWS_AS(m.detection_loss(0, {&bad}, 99), Error);
}

TEST_CASE("box encode/decode round trip and zero regression loss at exact offsets") {
  std::mt19937_64 rng(31);
  std::uniform_real_distribution<double> u(5.0, 50.0);
  for (int i = 0; i < 200; ++i) {
    BoundingBox ref{u(rng), u(rng), 0, 0, 0, {}};
    ref.x2 = ref.x1 + u(rng);
    ref.y2 = ref.y1 + u(rng);
    BoundingBox tgt{u(rng), u(rng), 0, 0, 0, {}};
    tgt.x2 = tgt.x1 + u(rng);
    tgt.y2 = tgt.y1 + u(rng);
    const auto enc = encode_box(ref, tgt);
    const BoundingBox back = decode_box(ref, enc.data());
    CHECK(back.x1 == doctest::Approx(tgt.x1).epsilon(1e-9));
    CHECK(back.y2 == doctest::Approx(tgt.y2).epsilon(1e-9));

    // exact offsets -> zero smooth-L1
    ad::Graph g;
    Tensor pred({1, 4}, {enc[0], enc[1], enc[2], enc[3]});
    ad::Var loss = g.smooth_l1(g.constant(pred), pred, 1.0);
    CHECK(loss->value[0] == 0.0);
  }
}

TEST_CASE("detection_loss gradient matches finite differences on a micro-model") {
  // seeds chosen so no relu or smooth-L1 input sits within the finite
  // difference step of its kink, where two-sided differences are undefined
  DetectorModel m(micro_config(), 101);
  m.add_branch("t", {"c0", "c1"}, 101);
  CHECK(param_count(m) <= 1000);

  LabeledImage img;
  img.id = "micro";
  img.image = Image(16, 16);
  std::mt19937_64 prng(31);
  for (auto& v : img.image.data) v = static_cast<std::uint8_t>(prng() % 256);
  img.boxes.push_back({2, 3, 10, 12, 0, {}});
  img.boxes.push_back({8, 1, 15, 9, 1, {}});

  const Tensor input = m.model_input(img);

  // freeze matching/sampling once
  DetTargets targets;
  {
    ad::Graph g;
    ad::Var fm = m.features(g, input);
    auto rpn = m.rpn_forward(g, 0, fm);
    std::mt19937_64 rng = make_rng(17);
    targets = m.build_targets(0, rpn.obj->value, rpn.deltas->value, img.boxes, rng);
  }
  REQUIRE(targets.rpn_num_pos > 0);
  REQUIRE(!targets.roi_pos_rows.empty());

  auto eval_loss = [&] {
    ad::Graph g;
    ad::Var fm = m.features(g, input);
    auto rpn = m.rpn_forward(g, 0, fm);
    return m.det_loss_from_targets(g, 0, fm, rpn, targets)->value[0];
  };

  std::map<int, Tensor> analytic;
  {
    ad::Graph g;
    ad::Var fm = m.features(g, input);
    auto rpn = m.rpn_forward(g, 0, fm);
    ad::Var loss = m.det_loss_from_targets(g, 0, fm, rpn, targets);
    g.backward(loss);
    g.for_each_param_grad([&](int idx, const Tensor& grad) { analytic.emplace(idx, grad.clone()); });
  }

  double worst = 0;
  std::string worst_name;
  for (const auto& p : m.params()) {
    Tensor grad = analytic.count(p->index) ? analytic[p->index] : Tensor::zeros(p->value.shape());
    auto r = incdet::testutil::check_gradient(eval_loss, p->value, grad, 1e-3);
    if (r.max_err > worst) {
      worst = r.max_err;
      worst_name = p->name;
    }
  }
  INFO("worst parameter: ", worst_name, " rel err ", worst);
  CHECK(worst <= 1e-3);
}

TEST_CASE("infer: threshold above 1 yields nothing; outputs respect bounds") {
  DetectorModel m = small_model();
  LabeledImage img = sample_image(64, 41, 2);
  CHECK(m.infer(0, img, 1.01, 0.3).empty());

  std::vector<Detection> dets = m.infer(0, img, 0.01, 0.5);
  for (const Detection& d : dets) {
    CHECK(d.valid());
    REQUIRE(d.score.has_value());
    CHECK(*d.score >= 0.01);
    CHECK(d.label >= 0);
    CHECK(d.label < 2);
  }
  for (std::size_t i = 0; i < dets.size(); ++i) CHECK(dets[i].score <= dets[0].score);
  // class-wise nms bound, brute force
  for (std::size_t i = 0; i < dets.size(); ++i)
    for (std::size_t j = i + 1; j < dets.size(); ++j)
      if (dets[i].label == dets[j].label) CHECK(iou(dets[i], dets[j]) <= 0.5);

  CHECK_THROWS_AS(m.infer(9, img, 0.1, 0.3), Error);
}

TEST_CASE("snapshot_teacher: identical outputs, isolation, frozen flags") {
  DetectorModel m = small_model();
  CHECK_THROWS_AS(DetectorModel(micro_config(), 1).snapshot_teacher(), Error);  // no tasks yet

  DetectorModel teacher = m.snapshot_teacher();
  CHECK(teacher.all_frozen());
  CHECK(teacher.param_hash() == m.param_hash());

  LabeledImage img = sample_image(64, 51, 2);
  FeatureMap fs = m.extract_features(img);
  FeatureMap ft = teacher.extract_features(img);
  CHECK(fs.values.equals(ft.values));

  // mutate the student; the teacher must not move
  const std::uint64_t teacher_hash = teacher.param_hash();
  for (const auto& p : m.params()) p->value.fill(0.123);
  CHECK(teacher.param_hash() == teacher_hash);
  FeatureMap ft2 = teacher.extract_features(img);
  CHECK(ft.values.equals(ft2.values));

  nn::SgdMomentum opt;
  CHECK_THROWS_AS(opt.add(teacher.params()[0]), Error);
  opt.add_all(teacher.params());
  CHECK(opt.size() == 0);
}

TEST_CASE("branch isolation: training task B never touches task A's branch") {
  DetectorModel m = small_model();
  m.add_branch("taskB", {"x", "y", "z"}, 77);

  LabeledImage img = sample_image(64, 61, 2);
  const Tensor input = m.model_input(img);

  // record task-A outputs on a fixed feature map
  Tensor fixed_fm = Tensor::full({16, 8, 8}, 0.25);
  auto a_outputs = [&] {
    ad::Graph g;
    auto rpn = m.rpn_forward(g, 0, g.constant(fixed_fm));
    return std::pair(rpn.obj->value.clone(), rpn.deltas->value.clone());
  };
  auto before = a_outputs();

  // a few optimization steps on task B
  nn::SgdMomentum opt;
  opt.add_all(m.params());
  for (int step = 0; step < 3; ++step) {
    opt.zero_grads();
    ad::Graph g;
    ad::Var fm = m.features(g, input);
    auto rpn = m.rpn_forward(g, 1, fm);
    std::mt19937_64 rng = make_rng(step);
    LabeledImage relabeled = img;
    for (auto& b : relabeled.boxes) b.label = 1;
    DetTargets t = m.build_targets(1, rpn.obj->value, rpn.deltas->value, relabeled.boxes, rng);
    ad::Var loss = m.det_loss_from_targets(g, 1, fm, rpn, t);
    g.backward(loss);
    g.for_each_param_grad(
        [&](int idx, const Tensor& grad) { m.params()[static_cast<std::size_t>(idx)]->grad.add_(grad); });
    opt.step(0.01);
  }

  auto after = a_outputs();
  CHECK(before.first.equals(after.first));
  CHECK(before.second.equals(after.second));
}

TEST_CASE("checkpoint round trip preserves parameters and metadata") {
  testutil::TempDir tmp("incdet_ckpt");
  DetectorModel m = small_model();
  m.add_branch("taskB", {"p", "q"}, 5);
  m.freeze_first_block();
  const auto path = tmp.path() / "model.ckpt";
  m.save_checkpoint(path);

  DetectorModel r = DetectorModel::load_checkpoint(path);
  CHECK(r.param_hash() == m.param_hash());
  CHECK(r.num_tasks() == 2);
  CHECK(r.task_name(0) == "taskA");
  CHECK(r.task_name(1) == "taskB");
  CHECK(r.class_names(1) == std::vector<std::string>{"p", "q"});
  CHECK(r.config().image_size == 64);

  LabeledImage img = sample_image(64, 71, 2);
  FeatureMap fa = m.extract_features(img);
  FeatureMap fb = r.extract_features(img);
  CHECK(fa.values.equals(fb.values));

  // frozen flags survive
  int frozen = 0;
  for (const auto& p : r.params()) frozen += p->frozen ? 1 : 0;
  CHECK(frozen == 8);
}

TEST_CASE("first block freeze marks exactly the first block") {
  DetectorModel m = small_model();
  m.freeze_first_block();
  int frozen = 0;
  for (const auto& p : m.params()) {
    if (p->frozen) {
      ++frozen;
      CHECK(p->name.find("backbone.b0") == 0);
    }
  }
  CHECK(frozen == 8);
}

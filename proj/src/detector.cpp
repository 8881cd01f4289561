#include "incdet/detector.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include "json.hpp"

namespace incdet {

using nlohmann::json;

std::vector<int> nms_keep(const std::vector<BoundingBox>& sorted_boxes, double iou_thr) {
  std::vector<int> keep;
  std::vector<bool> suppressed(sorted_boxes.size(), false);
  for (std::size_t i = 0; i < sorted_boxes.size(); ++i) {
    if (suppressed[i]) continue;
    keep.push_back(static_cast<int>(i));
    for (std::size_t j = i + 1; j < sorted_boxes.size(); ++j) {
      if (!suppressed[j] && iou(sorted_boxes[i], sorted_boxes[j]) > iou_thr) suppressed[j] = true;
    }
  }
  return keep;
}

std::array<double, 4> encode_box(const BoundingBox& ref, const BoundingBox& target) {
  const double rw = ref.width(), rh = ref.height();
  const double rcx = ref.x1 + rw / 2, rcy = ref.y1 + rh / 2;
  const double tw = target.width(), th = target.height();
  const double tcx = target.x1 + tw / 2, tcy = target.y1 + th / 2;
  return {(tcx - rcx) / rw, (tcy - rcy) / rh, std::log(tw / rw), std::log(th / rh)};
}

BoundingBox decode_box(const BoundingBox& ref, const double* d, double clip_wh) {
  const double rw = ref.width(), rh = ref.height();
  const double rcx = ref.x1 + rw / 2, rcy = ref.y1 + rh / 2;
  const double cx = rcx + d[0] * rw;
  const double cy = rcy + d[1] * rh;
  const double w = rw * std::exp(std::clamp(d[2], -clip_wh, clip_wh));
  const double h = rh * std::exp(std::clamp(d[3], -clip_wh, clip_wh));
  BoundingBox b;
  b.x1 = cx - w / 2;
  b.y1 = cy - h / 2;
  b.x2 = cx + w / 2;
  b.y2 = cy + h / 2;
  return b;
}

DetectorModel::DetectorModel(ModelConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
  check(cfg_.widths.size() == 4, "model: expected 4 backbone blocks");
  check(cfg_.anchors.per_cell() > 0, "model: empty anchor config");
  build_backbone(seed);

  // anchors in (a, h, w) order, clipped to the image
  const int hf = cfg_.feat_size(), wf = cfg_.feat_size();
  const int stride = cfg_.stride();
  const double img = cfg_.image_size;
  for (std::size_t si = 0; si < cfg_.anchors.scales.size(); ++si) {
    for (std::size_t ri = 0; ri < cfg_.anchors.ratios.size(); ++ri) {
      const double s = cfg_.anchors.scales[si];
      const double r = cfg_.anchors.ratios[ri];
      const double aw = s * std::sqrt(r), ah = s / std::sqrt(r);
      for (int h = 0; h < hf; ++h) {
        for (int w = 0; w < wf; ++w) {
          const double cx = (w + 0.5) * stride, cy = (h + 0.5) * stride;
          BoundingBox b;
          b.x1 = std::clamp(cx - aw / 2, 0.0, img);
          b.y1 = std::clamp(cy - ah / 2, 0.0, img);
          b.x2 = std::clamp(cx + aw / 2, 0.0, img);
          b.y2 = std::clamp(cy + ah / 2, 0.0, img);
          anchors_.push_back(b);
        }
      }
    }
  }
}

void DetectorModel::build_backbone(std::uint64_t seed) {
  std::mt19937_64 rng = make_rng(mix64(seed, 0xBB));
  int cin = 3;
  for (int bi = 0; bi < 4; ++bi) {
    const int cout = cfg_.widths[static_cast<std::size_t>(bi)];
    const int stride = bi < 3 ? 2 : 1;
    Block blk;
    const std::string base = "backbone.b" + std::to_string(bi);
    blk.conv1 = nn::Conv2d(registry_, base + ".conv1", cin, cout, 3, stride, rng);
    blk.norm1 = nn::GroupNorm(registry_, base + ".norm1", cout);
    blk.conv2 = nn::Conv2d(registry_, base + ".conv2", cout, cout, 3, 1, rng);
    blk.norm2 = nn::GroupNorm(registry_, base + ".norm2", cout);
    blocks_.push_back(std::move(blk));
    cin = cout;
  }
}

int DetectorModel::add_branch(const std::string& name, std::vector<std::string> class_names,
                              std::uint64_t seed) {
  check(!class_names.empty(), "add_branch: no classes");
  std::mt19937_64 rng = make_rng(mix64(seed, 0xAA, branches_.size()));
  Branch br;
  br.name = name;
  br.class_names = std::move(class_names);
  const int fm_ch = cfg_.widths.back();
  const int a = cfg_.anchors.per_cell();
  const std::string base = "task" + std::to_string(branches_.size());
  br.rpn_conv = nn::Conv2d(registry_, base + ".rpn.conv", fm_ch, cfg_.rpn_channels, 3, 1, rng);
  br.rpn_obj = nn::Conv2d(registry_, base + ".rpn.obj", cfg_.rpn_channels, a, 1, 1, rng);
  br.rpn_delta = nn::Conv2d(registry_, base + ".rpn.delta", cfg_.rpn_channels, 4 * a, 1, 1, rng);
  // low objectness prior keeps early proposals sparse
  br.rpn_obj.b->value.fill(-2.0);
  const int k = static_cast<int>(br.class_names.size());
  const int pooled = fm_ch * cfg_.roi_pool * cfg_.roi_pool;
  br.fc = nn::Linear(registry_, base + ".head.fc", pooled, cfg_.roi_fc_dim, rng);
  br.cls = nn::Linear(registry_, base + ".head.cls", cfg_.roi_fc_dim, k + 1, rng);
  br.reg = nn::Linear(registry_, base + ".head.reg", cfg_.roi_fc_dim, 4, rng);
  branches_.push_back(std::move(br));
  return static_cast<int>(branches_.size()) - 1;
}

int DetectorModel::num_classes(int task) const {
  check(task >= 0 && task < num_tasks(), "unknown task id " + std::to_string(task));
  return static_cast<int>(branches_[static_cast<std::size_t>(task)].class_names.size());
}

const std::string& DetectorModel::task_name(int task) const {
  check(task >= 0 && task < num_tasks(), "unknown task id " + std::to_string(task));
  return branches_[static_cast<std::size_t>(task)].name;
}

const std::vector<std::string>& DetectorModel::class_names(int task) const {
  check(task >= 0 && task < num_tasks(), "unknown task id " + std::to_string(task));
  return branches_[static_cast<std::size_t>(task)].class_names;
}

const DetectorModel::Branch& DetectorModel::rpn_branch(int task) const {
  check(task >= 0 && task < num_tasks(), "unknown task id " + std::to_string(task));
  return branches_[static_cast<std::size_t>(cfg_.share_rpn ? 0 : task)];
}

ad::Var DetectorModel::features(ad::Graph& g, const Tensor& input) const {
  check(input.ndim() == 3 && input.dim(0) == 3, "features: expected [3,H,W] input");
  check(input.dim(1) == cfg_.image_size && input.dim(2) == cfg_.image_size,
        "features: image size mismatch, expected " + std::to_string(cfg_.image_size) + "x" +
            std::to_string(cfg_.image_size) + ", got " + std::to_string(input.dim(1)) + "x" +
            std::to_string(input.dim(2)));
  ad::Var x = g.constant(input);
  for (const Block& blk : blocks_) {
    x = g.relu(blk.norm1.forward(g, blk.conv1.forward(g, x)));
    x = g.relu(blk.norm2.forward(g, blk.conv2.forward(g, x)));
  }
  return x;
}

DetectorModel::RpnOut DetectorModel::rpn_forward(ad::Graph& g, int task, ad::Var fm) const {
  const Branch& br = rpn_branch(task);
  ad::Var mid = g.relu(br.rpn_conv.forward(g, fm));
  return {br.rpn_obj.forward(g, mid), br.rpn_delta.forward(g, mid)};
}

DetectorModel::HeadOut DetectorModel::head_forward(ad::Graph& g, int task, ad::Var fm,
                                                   const std::vector<GridRect>& rois) const {
  check(task >= 0 && task < num_tasks(), "unknown task id " + std::to_string(task));
  const Branch& br = branches_[static_cast<std::size_t>(task)];
  ad::Var pooled = g.roi_avg_pool(fm, rois, cfg_.roi_pool, cfg_.roi_pool);
  ad::Var hidden = g.relu(br.fc.forward(g, pooled));
  return {br.cls.forward(g, hidden), br.reg.forward(g, hidden)};
}

Tensor DetectorModel::model_input(const LabeledImage& img) const {
  Tensor t = img.image.to_tensor();
  for (std::int64_t i = 0; i < t.numel(); ++i) t[i] -= 0.5;
  return t;
}

FeatureMap DetectorModel::extract_features(const LabeledImage& img) const {
  ad::Graph g;
  ad::Var fm = features(g, model_input(img));
  check(fm->value.all_finite(), "extract_features: non-finite feature values");
  return {fm->value, cfg_.stride()};
}

std::vector<Proposal> DetectorModel::decode_proposals(const Tensor& obj_values,
                                                      const Tensor& delta_values,
                                                      int post_nms) const {
  if (post_nms <= 0) return {};
  const int a = cfg_.anchors.per_cell();
  const int hf = obj_values.dim(1), wf = obj_values.dim(2);
  const std::int64_t hw = static_cast<std::int64_t>(hf) * wf;
  const double img = cfg_.image_size;

  struct Scored {
    double score;
    std::int64_t idx;
  };
  std::vector<Scored> scored;
  scored.reserve(static_cast<std::size_t>(a * hw));
  for (std::int64_t i = 0; i < a * hw; ++i) {
    const BoundingBox& ref = anchors_[static_cast<std::size_t>(i)];
    if (!ref.valid()) continue;
    scored.push_back({1.0 / (1.0 + std::exp(-obj_values[i])), i});
  }
  std::stable_sort(scored.begin(), scored.end(), [](const Scored& x, const Scored& y) {
    return x.score > y.score;
  });
  if (static_cast<int>(scored.size()) > cfg_.pre_nms) scored.resize(static_cast<std::size_t>(cfg_.pre_nms));

  std::vector<BoundingBox> boxes;
  boxes.reserve(scored.size());
  for (const Scored& s : scored) {
    const std::int64_t ai = s.idx / hw;
    const std::int64_t pos = s.idx % hw;
    double d[4];
    for (int k = 0; k < 4; ++k) d[k] = delta_values[(4 * ai + k) * hw + pos];
    BoundingBox b = decode_box(anchors_[static_cast<std::size_t>(s.idx)], d);
    b.x1 = std::clamp(b.x1, 0.0, img);
    b.y1 = std::clamp(b.y1, 0.0, img);
    b.x2 = std::clamp(b.x2, 0.0, img);
    b.y2 = std::clamp(b.y2, 0.0, img);
    if (b.width() < cfg_.min_box_size || b.height() < cfg_.min_box_size) continue;
    b.score = s.score;
    b.label = 0;
    boxes.push_back(b);
  }
  std::vector<int> keep = nms_keep(boxes, cfg_.rpn_nms_thr);
  std::vector<Proposal> out;
  for (int i : keep) {
    out.push_back(boxes[static_cast<std::size_t>(i)]);
    if (static_cast<int>(out.size()) >= post_nms) break;
  }
  return out;
}

std::vector<Proposal> DetectorModel::propose(int task, const FeatureMap& fm, int k) const {
  check(fm.values.dim(0) == cfg_.widths.back(), "propose: wrong feature channel count");
  if (k <= 0) return {};
  ad::Graph g;
  ad::Var fmv = g.constant(fm.values);
  RpnOut rpn = rpn_forward(g, task, fmv);
  return decode_proposals(rpn.obj->value, rpn.deltas->value, k);
}

DetTargets DetectorModel::build_targets(int task, const Tensor& obj_values,
                                        const Tensor& delta_values,
                                        const std::vector<BoundingBox>& gts,
                                        std::mt19937_64& rng) const {
  DetTargets t;
  const int a = cfg_.anchors.per_cell();
  const int hf = obj_values.dim(1), wf = obj_values.dim(2);
  const std::int64_t hw = static_cast<std::int64_t>(hf) * wf;
  const std::int64_t n_anchors = a * hw;
  const int k_classes = num_classes(task);
  for (const auto& gt : gts)
    check(gt.label >= 0 && gt.label < k_classes,
          "detection_loss: label " + std::to_string(gt.label) + " out of range for task " +
              std::to_string(task));

  // anchor matching
  std::vector<double> best_iou(static_cast<std::size_t>(n_anchors), 0.0);
  std::vector<int> best_gt(static_cast<std::size_t>(n_anchors), -1);
  std::vector<std::int64_t> best_anchor_for_gt(gts.size(), -1);
  std::vector<double> best_anchor_iou(gts.size(), 0.0);
  for (std::int64_t i = 0; i < n_anchors; ++i) {
    const BoundingBox& anc = anchors_[static_cast<std::size_t>(i)];
    if (!anc.valid()) continue;
    for (std::size_t gi = 0; gi < gts.size(); ++gi) {
      const double v = iou(anc, gts[gi]);
      if (v > best_iou[static_cast<std::size_t>(i)]) {
        best_iou[static_cast<std::size_t>(i)] = v;
        best_gt[static_cast<std::size_t>(i)] = static_cast<int>(gi);
      }
      if (v > best_anchor_iou[gi]) {
        best_anchor_iou[gi] = v;
        best_anchor_for_gt[gi] = i;
      }
    }
  }

  std::vector<std::int64_t> pos, neg;
  std::vector<char> is_pos(static_cast<std::size_t>(n_anchors), 0);
  for (std::size_t gi = 0; gi < gts.size(); ++gi)
    if (best_anchor_for_gt[gi] >= 0 && best_anchor_iou[gi] > 0)
      is_pos[static_cast<std::size_t>(best_anchor_for_gt[gi])] = 1;
  for (std::int64_t i = 0; i < n_anchors; ++i) {
    if (!anchors_[static_cast<std::size_t>(i)].valid()) continue;
    if (best_iou[static_cast<std::size_t>(i)] >= cfg_.rpn_pos_iou) is_pos[static_cast<std::size_t>(i)] = 1;
    if (is_pos[static_cast<std::size_t>(i)])
      pos.push_back(i);
    else if (best_iou[static_cast<std::size_t>(i)] < cfg_.rpn_neg_iou)
      neg.push_back(i);
  }
  std::shuffle(pos.begin(), pos.end(), rng);
  if (static_cast<int>(pos.size()) > cfg_.rpn_pos_cap) pos.resize(static_cast<std::size_t>(cfg_.rpn_pos_cap));
  std::shuffle(neg.begin(), neg.end(), rng);
  const int n_neg = std::min<int>(static_cast<int>(neg.size()),
                                  std::max(1, cfg_.rpn_batch - static_cast<int>(pos.size())));
  neg.resize(static_cast<std::size_t>(n_neg));

  t.rpn_num_pos = static_cast<int>(pos.size());
  t.rpn_obj_targets = Tensor::zeros({static_cast<int>(pos.size() + neg.size())});
  for (std::size_t i = 0; i < pos.size(); ++i) {
    t.rpn_sample_idx.push_back(pos[i]);
    t.rpn_obj_targets[static_cast<std::int64_t>(i)] = 1.0;
  }
  for (std::int64_t i : neg) t.rpn_sample_idx.push_back(i);

  t.rpn_delta_targets = Tensor::zeros({static_cast<int>(pos.size()), 4});
  for (std::size_t i = 0; i < pos.size(); ++i) {
    const std::int64_t ai = pos[i] / hw, ppos = pos[i] % hw;
    const BoundingBox& anc = anchors_[static_cast<std::size_t>(pos[i])];
    const BoundingBox& gt = gts[static_cast<std::size_t>(best_gt[static_cast<std::size_t>(pos[i])])];
    const auto enc = encode_box(anc, gt);
    for (int c = 0; c < 4; ++c) {
      t.rpn_delta_idx.push_back((4 * ai + c) * hw + ppos);
      t.rpn_delta_targets.at(static_cast<int>(i), c) = enc[static_cast<std::size_t>(c)];
    }
  }

  // roi sampling: decoded proposals plus ground truth
  std::vector<BoundingBox> rois_boxes;
  for (const Proposal& p : decode_proposals(obj_values, delta_values, cfg_.post_nms_train))
    rois_boxes.push_back(p);
  for (const BoundingBox& gt : gts) rois_boxes.push_back(gt);

  struct RoiCand {
    BoundingBox box;
    int label;  // k_classes == background
    std::array<double, 4> enc{};
  };
  std::vector<RoiCand> pos_c, neg_c;
  for (const BoundingBox& rb : rois_boxes) {
    double bi = 0;
    int bg = -1;
    for (std::size_t gi = 0; gi < gts.size(); ++gi) {
      const double v = iou(rb, gts[gi]);
      if (v > bi) {
        bi = v;
        bg = static_cast<int>(gi);
      }
    }
    if (bg >= 0 && bi >= cfg_.roi_pos_iou) {
      RoiCand c;
      c.box = rb;
      c.label = gts[static_cast<std::size_t>(bg)].label;
      c.enc = encode_box(rb, gts[static_cast<std::size_t>(bg)]);
      pos_c.push_back(c);
    } else {
      neg_c.push_back({rb, k_classes, {}});
    }
  }
  std::shuffle(pos_c.begin(), pos_c.end(), rng);
  if (static_cast<int>(pos_c.size()) > cfg_.roi_pos_cap) pos_c.resize(static_cast<std::size_t>(cfg_.roi_pos_cap));
  std::shuffle(neg_c.begin(), neg_c.end(), rng);
  const int want_neg = std::max(1, cfg_.roi_batch - static_cast<int>(pos_c.size()));
  if (static_cast<int>(neg_c.size()) > want_neg) neg_c.resize(static_cast<std::size_t>(want_neg));

  const int hf_grid = cfg_.feat_size();
  t.roi_delta_targets = Tensor::zeros({static_cast<int>(pos_c.size()), 4});
  int row = 0;
  for (const RoiCand& c : pos_c) {
    t.roi_rects.push_back(project_to_grid(c.box, cfg_.stride(), hf_grid, hf_grid));
    t.roi_labels.push_back(c.label);
    t.roi_pos_rows.push_back(row);
    for (int k = 0; k < 4; ++k) t.roi_delta_targets.at(row, k) = c.enc[static_cast<std::size_t>(k)];
    ++row;
  }
  for (const RoiCand& c : neg_c) {
    t.roi_rects.push_back(project_to_grid(c.box, cfg_.stride(), hf_grid, hf_grid));
    t.roi_labels.push_back(c.label);
    ++row;
  }
  return t;
}

ad::Var DetectorModel::det_loss_from_targets(ad::Graph& g, int task, ad::Var fm, const RpnOut& rpn,
                                             const DetTargets& t, LossParts* parts) const {
  // rpn objectness + regression
  ad::Var obj_flat = g.reshape(rpn.obj, {static_cast<int>(rpn.obj->value.numel())});
  ad::Var obj_sampled = g.gather(obj_flat, t.rpn_sample_idx);
  ad::Var rpn_cls = g.bce_with_logits(obj_sampled, t.rpn_obj_targets);

  ad::Var rpn_reg;
  if (t.rpn_num_pos > 0) {
    ad::Var d_flat = g.reshape(rpn.deltas, {static_cast<int>(rpn.deltas->value.numel())});
    ad::Var d = g.reshape(g.gather(d_flat, t.rpn_delta_idx), {t.rpn_num_pos, 4});
    rpn_reg = g.scale(g.smooth_l1(d, t.rpn_delta_targets, 1.0 / 9.0), 1.0 / t.rpn_num_pos);
  } else {
    rpn_reg = g.constant(Tensor::scalar(0.0));
  }

  // head classification + regression
  ad::Var cls_loss, reg_loss;
  if (!t.roi_rects.empty()) {
    HeadOut head = head_forward(g, task, fm, t.roi_rects);
    cls_loss = g.softmax_cross_entropy(head.cls, t.roi_labels);
    if (!t.roi_pos_rows.empty()) {
      std::vector<std::int64_t> idx;
      idx.reserve(t.roi_pos_rows.size() * 4);
      for (int r : t.roi_pos_rows)
        for (int k = 0; k < 4; ++k) idx.push_back(static_cast<std::int64_t>(r) * 4 + k);
      ad::Var reg_flat = g.reshape(head.reg, {static_cast<int>(head.reg->value.numel())});
      ad::Var d = g.reshape(g.gather(reg_flat, idx), {static_cast<int>(t.roi_pos_rows.size()), 4});
      reg_loss = g.scale(g.smooth_l1(d, t.roi_delta_targets, 1.0),
                         1.0 / static_cast<double>(t.roi_pos_rows.size()));
    } else {
      reg_loss = g.constant(Tensor::scalar(0.0));
    }
  } else {
    cls_loss = g.constant(Tensor::scalar(0.0));
    reg_loss = g.constant(Tensor::scalar(0.0));
  }

  if (parts) {
    parts->rpn_cls = rpn_cls->value[0];
    parts->rpn_reg = rpn_reg->value[0];
    parts->cls = cls_loss->value[0];
    parts->reg = reg_loss->value[0];
  }
  return g.add(g.add(rpn_cls, rpn_reg), g.add(cls_loss, reg_loss));
}

LossParts DetectorModel::detection_loss(int task, const std::vector<const LabeledImage*>& batch,
                                        std::uint64_t sample_seed) const {
  check(!batch.empty(), "detection_loss: empty batch");
  LossParts acc;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    ad::Graph g;
    ad::Var fm = features(g, model_input(*batch[i]));
    RpnOut rpn = rpn_forward(g, task, fm);
    std::mt19937_64 rng = make_rng(mix64(sample_seed, i));
    DetTargets t = build_targets(task, rpn.obj->value, rpn.deltas->value, batch[i]->boxes, rng);
    LossParts parts;
    det_loss_from_targets(g, task, fm, rpn, t, &parts);
    acc.rpn_cls += parts.rpn_cls;
    acc.rpn_reg += parts.rpn_reg;
    acc.cls += parts.cls;
    acc.reg += parts.reg;
  }
  const double inv = 1.0 / static_cast<double>(batch.size());
  acc.rpn_cls *= inv;
  acc.rpn_reg *= inv;
  acc.cls *= inv;
  acc.reg *= inv;
  return acc;
}

std::vector<Detection> DetectorModel::infer(int task, const LabeledImage& img, double score_thr,
                                            double nms_thr, int max_dets) const {
  check(task >= 0 && task < num_tasks(), "unknown task id " + std::to_string(task));
  ad::Graph g;
  ad::Var fm = features(g, model_input(img));
  RpnOut rpn = rpn_forward(g, task, fm);
  std::vector<Proposal> props = decode_proposals(rpn.obj->value, rpn.deltas->value, cfg_.post_nms_test);
  if (props.empty()) return {};

  const int hf = cfg_.feat_size();
  std::vector<GridRect> rects;
  rects.reserve(props.size());
  for (const Proposal& p : props) rects.push_back(project_to_grid(p, cfg_.stride(), hf, hf));
  HeadOut head = head_forward(g, task, fm, rects);

  const int k_classes = num_classes(task);
  const double img_size = cfg_.image_size;
  std::vector<std::vector<Detection>> per_class(static_cast<std::size_t>(k_classes));
  for (std::size_t r = 0; r < props.size(); ++r) {
    // softmax over K+1
    double mx = head.cls->value.at(static_cast<int>(r), 0);
    for (int c = 1; c <= k_classes; ++c) mx = std::max(mx, head.cls->value.at(static_cast<int>(r), c));
    double z = 0;
    for (int c = 0; c <= k_classes; ++c) z += std::exp(head.cls->value.at(static_cast<int>(r), c) - mx);
    double d[4];
    for (int c = 0; c < 4; ++c) d[c] = head.reg->value.at(static_cast<int>(r), c);
    BoundingBox decoded = decode_box(props[r], d);
    decoded.x1 = std::clamp(decoded.x1, 0.0, img_size);
    decoded.y1 = std::clamp(decoded.y1, 0.0, img_size);
    decoded.x2 = std::clamp(decoded.x2, 0.0, img_size);
    decoded.y2 = std::clamp(decoded.y2, 0.0, img_size);
    if (!decoded.valid()) continue;
    for (int c = 0; c < k_classes; ++c) {
      const double p = std::exp(head.cls->value.at(static_cast<int>(r), c) - mx) / z;
      if (p < score_thr) continue;
      Detection det = decoded;
      det.label = c;
      det.score = p;
      per_class[static_cast<std::size_t>(c)].push_back(det);
    }
  }

  std::vector<Detection> out;
  for (auto& dets : per_class) {
    std::stable_sort(dets.begin(), dets.end(),
                     [](const Detection& a, const Detection& b) { return *a.score > *b.score; });
    for (int i : nms_keep(dets, nms_thr)) out.push_back(dets[static_cast<std::size_t>(i)]);
  }
  std::stable_sort(out.begin(), out.end(),
                   [](const Detection& a, const Detection& b) { return *a.score > *b.score; });
  if (static_cast<int>(out.size()) > max_dets) out.resize(static_cast<std::size_t>(max_dets));
  return out;
}

DetectorModel DetectorModel::clone() const {
  DetectorModel m(cfg_, 0);
  for (const Branch& br : branches_) m.add_branch(br.name, br.class_names, 0);
  check(m.registry_.size() == registry_.size(), "clone: registry size mismatch");
  for (std::size_t i = 0; i < registry_.size(); ++i) {
    const nn::Param& src = *registry_.all()[i];
    nn::Param& dst = *m.registry_.all()[i];
    check(src.name == dst.name, "clone: parameter order mismatch");
    dst.value = src.value.clone();
    dst.grad = Tensor::zeros(src.value.shape());
    dst.frozen = src.frozen;
  }
  return m;
}

DetectorModel DetectorModel::snapshot_teacher() const {
  check(num_tasks() >= 1, "snapshot_teacher: model has no trained task branch");
  DetectorModel t = clone();
  for (const auto& p : t.registry_.all()) p->frozen = true;
  return t;
}

void DetectorModel::freeze_first_block() {
  for (const auto& p : {blocks_[0].conv1.w, blocks_[0].conv1.b, blocks_[0].conv2.w,
                        blocks_[0].conv2.b, blocks_[0].norm1.gamma, blocks_[0].norm1.beta,
                        blocks_[0].norm2.gamma, blocks_[0].norm2.beta})
    p->frozen = true;
}

bool DetectorModel::all_frozen() const {
  for (const auto& p : registry_.all())
    if (!p->frozen) return false;
  return true;
}

std::uint64_t DetectorModel::param_hash() const {
  std::uint64_t h = 1469598103934665603ULL;  // FNV-1a
  for (const auto& p : registry_.all()) {
    const auto* bytes = reinterpret_cast<const unsigned char*>(p->value.data());
    const std::size_t n = static_cast<std::size_t>(p->value.numel()) * sizeof(double);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= bytes[i];
      h *= 1099511628211ULL;
    }
  }
  return h;
}

namespace {

json model_config_to_json(const ModelConfig& c) {
  json j;
  j["image_size"] = c.image_size;
  j["widths"] = c.widths;
  j["rpn_channels"] = c.rpn_channels;
  j["roi_fc_dim"] = c.roi_fc_dim;
  j["roi_pool"] = c.roi_pool;
  j["anchor_scales"] = c.anchors.scales;
  j["anchor_ratios"] = c.anchors.ratios;
  j["share_rpn"] = c.share_rpn;
  j["rpn_pos_iou"] = c.rpn_pos_iou;
  j["rpn_neg_iou"] = c.rpn_neg_iou;
  j["rpn_batch"] = c.rpn_batch;
  j["rpn_pos_cap"] = c.rpn_pos_cap;
  j["roi_pos_iou"] = c.roi_pos_iou;
  j["roi_batch"] = c.roi_batch;
  j["roi_pos_cap"] = c.roi_pos_cap;
  j["pre_nms"] = c.pre_nms;
  j["rpn_nms_thr"] = c.rpn_nms_thr;
  j["post_nms_train"] = c.post_nms_train;
  j["post_nms_test"] = c.post_nms_test;
  j["min_box_size"] = c.min_box_size;
  return j;
}

ModelConfig model_config_from_json(const json& j) {
  ModelConfig c;
  c.image_size = j.at("image_size").get<int>();
  c.widths = j.at("widths").get<std::vector<int>>();
  c.rpn_channels = j.at("rpn_channels").get<int>();
  c.roi_fc_dim = j.at("roi_fc_dim").get<int>();
  c.roi_pool = j.at("roi_pool").get<int>();
  c.anchors.scales = j.at("anchor_scales").get<std::vector<double>>();
  c.anchors.ratios = j.at("anchor_ratios").get<std::vector<double>>();
  c.share_rpn = j.at("share_rpn").get<bool>();
  c.rpn_pos_iou = j.at("rpn_pos_iou").get<double>();
  c.rpn_neg_iou = j.at("rpn_neg_iou").get<double>();
  c.rpn_batch = j.at("rpn_batch").get<int>();
  c.rpn_pos_cap = j.at("rpn_pos_cap").get<int>();
  c.roi_pos_iou = j.at("roi_pos_iou").get<double>();
  c.roi_batch = j.at("roi_batch").get<int>();
  c.roi_pos_cap = j.at("roi_pos_cap").get<int>();
  c.pre_nms = j.at("pre_nms").get<int>();
  c.rpn_nms_thr = j.at("rpn_nms_thr").get<double>();
  c.post_nms_train = j.at("post_nms_train").get<int>();
  c.post_nms_test = j.at("post_nms_test").get<int>();
  c.min_box_size = j.at("min_box_size").get<double>();
  return c;
}

constexpr char kCkptMagic[8] = {'I', 'N', 'C', 'D', 'E', 'T', 'K', '1'};

}  // namespace

void DetectorModel::save_checkpoint(const std::filesystem::path& path) const {
  json meta;
  meta["config"] = model_config_to_json(cfg_);
  meta["tasks"] = json::array();
  for (const Branch& br : branches_)
    meta["tasks"].push_back({{"name", br.name}, {"classes", br.class_names}});
  meta["params"] = json::array();
  for (const auto& p : registry_.all())
    meta["params"].push_back({{"name", p->name}, {"shape", p->value.shape()}, {"frozen", p->frozen}});
  const std::string header = meta.dump();

  std::ofstream out(path, std::ios::binary);
  check(out.good(), "save_checkpoint: cannot write " + path.string());
  out.write(kCkptMagic, 8);
  const std::uint64_t len = header.size();
  out.write(reinterpret_cast<const char*>(&len), sizeof(len));
  out.write(header.data(), static_cast<std::streamsize>(header.size()));
  for (const auto& p : registry_.all())
    out.write(reinterpret_cast<const char*>(p->value.data()),
              static_cast<std::streamsize>(p->value.numel() * sizeof(double)));
  check(out.good(), "save_checkpoint: write failed for " + path.string());
}

DetectorModel DetectorModel::load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  check(in.good(), "load_checkpoint: cannot open " + path.string());
  char magic[8];
  in.read(magic, 8);
  check(in.good() && std::equal(magic, magic + 8, kCkptMagic), "load_checkpoint: bad magic in " + path.string());
  std::uint64_t len = 0;
  in.read(reinterpret_cast<char*>(&len), sizeof(len));
  std::string header(len, '\0');
  in.read(header.data(), static_cast<std::streamsize>(len));
  check(in.good(), "load_checkpoint: truncated header in " + path.string());
  json meta = json::parse(header);

  DetectorModel m(model_config_from_json(meta.at("config")), 0);
  for (const auto& tj : meta.at("tasks"))
    m.add_branch(tj.at("name").get<std::string>(), tj.at("classes").get<std::vector<std::string>>(), 0);

  const auto& pj = meta.at("params");
  check(pj.size() == m.registry_.size(), "load_checkpoint: parameter count mismatch");
  for (std::size_t i = 0; i < m.registry_.size(); ++i) {
    nn::Param& p = *m.registry_.all()[i];
    check(pj[i].at("name").get<std::string>() == p.name, "load_checkpoint: parameter order mismatch");
    check(pj[i].at("shape").get<std::vector<int>>() == p.value.shape(),
          "load_checkpoint: shape mismatch for " + p.name);
    p.frozen = pj[i].at("frozen").get<bool>();
    in.read(reinterpret_cast<char*>(p.value.data()),
            static_cast<std::streamsize>(p.value.numel() * sizeof(double)));
  }
  check(in.good(), "load_checkpoint: truncated data in " + path.string());
  return m;
}

}  // namespace incdet

#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include "incdet/autodiff.hpp"
#include "incdet/boxes.hpp"
#include "incdet/nn.hpp"
#include "incdet/synthdata.hpp"

namespace incdet {

// A proposal is a box whose score is RPN objectness; a detection is a box
// whose label is the class id and whose score is the classifier confidence.
using Proposal = BoundingBox;
using Detection = BoundingBox;

struct FeatureMap {
  Tensor values;  // [C, Hf, Wf]
  int stride = 8;

  int channels() const { return values.dim(0); }
  int height() const { return values.dim(1); }
  int width() const { return values.dim(2); }
};

struct AnchorConfig {
  std::vector<double> scales = {16, 26, 40, 56};
  std::vector<double> ratios = {0.5, 1.0, 2.0};

  int per_cell() const { return static_cast<int>(scales.size() * ratios.size()); }
};

struct ModelConfig {
  int image_size = 128;
  std::vector<int> widths = {8, 16, 32, 64};  // backbone block output channels
  int rpn_channels = 32;
  int roi_fc_dim = 64;
  int roi_pool = 4;
  AnchorConfig anchors;
  bool share_rpn = false;  // when true, every branch reuses task 0's RPN

  // matching and sampling
  double rpn_pos_iou = 0.7;
  double rpn_neg_iou = 0.3;
  int rpn_batch = 64;
  int rpn_pos_cap = 24;
  double roi_pos_iou = 0.5;
  int roi_batch = 32;
  int roi_pos_cap = 8;

  // proposal generation
  int pre_nms = 1024;
  double rpn_nms_thr = 0.7;
  int post_nms_train = 32;
  int post_nms_test = 64;
  double min_box_size = 2.0;

  int stride() const { return 8; }  // three stride-2 blocks
  int feat_size() const { return (image_size + 7) / 8; }
};

struct LossParts {
  double rpn_cls = 0, rpn_reg = 0, cls = 0, reg = 0;
  double total() const { return rpn_cls + rpn_reg + cls + reg; }
};

// Frozen per-image matching/sampling decisions; the loss is differentiable
// given these.
struct DetTargets {
  std::vector<std::int64_t> rpn_sample_idx;  // flat indices into [A,Hf,Wf]
  Tensor rpn_obj_targets;                    // [n_sampled]
  std::vector<std::int64_t> rpn_delta_idx;   // flat indices into [4A,Hf,Wf], 4 per positive
  Tensor rpn_delta_targets;                  // [n_pos, 4]
  int rpn_num_pos = 0;
  std::vector<GridRect> roi_rects;
  std::vector<int> roi_labels;       // background == num_classes
  std::vector<int> roi_pos_rows;     // rows of roi_rects that are positive
  Tensor roi_delta_targets;          // [n_roi_pos, 4]
};

class DetectorModel {
 public:
  explicit DetectorModel(ModelConfig cfg, std::uint64_t seed = 0);

  int add_branch(const std::string& name, std::vector<std::string> class_names, std::uint64_t seed);
  int num_tasks() const { return static_cast<int>(branches_.size()); }
  int num_classes(int task) const;
  const std::string& task_name(int task) const;
  const std::vector<std::string>& class_names(int task) const;
  const ModelConfig& config() const { return cfg_; }
  const std::vector<nn::ParamPtr>& params() const { return registry_.all(); }

  // graph-building forward passes
  ad::Var features(ad::Graph& g, const Tensor& input) const;  // input = pixels - 0.5
  struct RpnOut {
    ad::Var obj;     // [A, Hf, Wf] logits
    ad::Var deltas;  // [4A, Hf, Wf]
  };
  RpnOut rpn_forward(ad::Graph& g, int task, ad::Var fm) const;
  struct HeadOut {
    ad::Var cls;  // [R, K+1] logits
    ad::Var reg;  // [R, 4]
  };
  HeadOut head_forward(ad::Graph& g, int task, ad::Var fm, const std::vector<GridRect>& rois) const;

  // eval-mode operations
  Tensor model_input(const LabeledImage& img) const;  // [3,H,W], pixels - 0.5
  FeatureMap extract_features(const LabeledImage& img) const;
  std::vector<Proposal> propose(int task, const FeatureMap& fm, int k) const;
  std::vector<Detection> infer(int task, const LabeledImage& img, double score_thr,
                               double nms_thr, int max_dets = 100) const;

  // training support
  DetTargets build_targets(int task, const Tensor& obj_values, const Tensor& delta_values,
                           const std::vector<BoundingBox>& gts, std::mt19937_64& rng) const;
  ad::Var det_loss_from_targets(ad::Graph& g, int task, ad::Var fm, const RpnOut& rpn,
                                const DetTargets& t, LossParts* parts = nullptr) const;
  // convenience: full per-batch detection loss (values only, no step)
  LossParts detection_loss(int task, const std::vector<const LabeledImage*>& batch,
                           std::uint64_t sample_seed) const;

  // proposals decoded from raw RPN outputs (used for masks and training)
  std::vector<Proposal> decode_proposals(const Tensor& obj_values, const Tensor& delta_values,
                                         int post_nms) const;

  DetectorModel clone() const;
  DetectorModel snapshot_teacher() const;  // frozen deep copy; needs >= 1 trained task
  void freeze_first_block();
  bool all_frozen() const;
  std::uint64_t param_hash() const;

  void save_checkpoint(const std::filesystem::path& path) const;
  static DetectorModel load_checkpoint(const std::filesystem::path& path);

  const std::vector<BoundingBox>& anchors() const { return anchors_; }

 private:
  struct Block {
    nn::Conv2d conv1, conv2;
    nn::GroupNorm norm1, norm2;
  };
  struct Branch {
    std::string name;
    std::vector<std::string> class_names;
    nn::Conv2d rpn_conv;
    nn::Conv2d rpn_obj;
    nn::Conv2d rpn_delta;
    nn::Linear fc;
    nn::Linear cls;
    nn::Linear reg;
  };

  void build_backbone(std::uint64_t seed);
  const Branch& rpn_branch(int task) const;

  ModelConfig cfg_;
  nn::ParamRegistry registry_;
  std::vector<Block> blocks_;
  std::vector<Branch> branches_;
  std::vector<BoundingBox> anchors_;  // clipped to image, order (a, h, w)
};

// greedy NMS over boxes sorted by descending score; returns kept indices
std::vector<int> nms_keep(const std::vector<BoundingBox>& sorted_boxes, double iou_thr);

// delta encoding between a reference box and a target box
std::array<double, 4> encode_box(const BoundingBox& ref, const BoundingBox& target);
BoundingBox decode_box(const BoundingBox& ref, const double* deltas, double clip_wh = 4.0);

}  // namespace incdet

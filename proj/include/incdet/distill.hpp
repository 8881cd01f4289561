#pragma once

#include <vector>

#include "incdet/autodiff.hpp"
#include "incdet/boxes.hpp"
#include "incdet/detector.hpp"

namespace incdet {

enum class AttentionKind { self, topdown };

// Non-negative [Hf, Wf] saliency map over the feature grid.
struct AttentionMap {
  Tensor values;
  AttentionKind kind = AttentionKind::self;
};

// Which rectangle a qualifying (ground truth, proposal) pair stamps into the
// top-down mask.
enum class MaskRegion { intersection, proposal, ground_truth };

struct AfdConfig {
  int mask_proposals = 24;
  MaskRegion region = MaskRegion::intersection;
};

// ---- graph-building losses (differentiable in the student feature map) ----

// a[h,w] = sum_c F[c,h,w]^2
ad::Var self_attention_var(ad::Graph& g, ad::Var fm);

// 0.5 * || (a_s/||a_s||) . F_s  -  (a_t/||a_t||) . F_t ||^2
// An all-zero attention map contributes a zero weighted feature.
ad::Var bottom_up_afd_loss(ad::Graph& g, ad::Var student_fm, const Tensor& teacher_fm);

// Same form with externally supplied (constant) masks in place of the
// self-attention maps.
ad::Var topdown_afd_loss(ad::Graph& g, ad::Var student_fm, const Tensor& teacher_fm,
                         const Tensor& student_mask, const Tensor& teacher_mask);

ad::Var feature_distill_loss(ad::Graph& g, ad::Var student_fm, const Tensor& teacher_fm);
ad::Var attention_distill_loss(ad::Graph& g, ad::Var student_fm, const Tensor& teacher_fm);

// bottom-up plus top-down for one image
ad::Var afd_image_loss(ad::Graph& g, ad::Var student_fm, const Tensor& teacher_fm,
                       const Tensor& student_mask, const Tensor& teacher_mask);

// ---- plain-value operations ----

AttentionMap self_attention(const FeatureMap& fm);
double bottom_up_afd(const FeatureMap& student, const FeatureMap& teacher);

// th = 0.5 * max_j IoU(g, P_j); 0 when no proposals. Qualifying pairs must
// satisfy IoU > th strictly, so a zero threshold still excludes non-overlaps.
double topdown_threshold(const BoundingBox& gt, const std::vector<Proposal>& proposals);

AttentionMap topdown_mask(const std::vector<BoundingBox>& gts,
                          const std::vector<Proposal>& proposals, int grid_h, int grid_w,
                          int stride, MaskRegion region = MaskRegion::intersection);

double topdown_afd(const FeatureMap& student, const FeatureMap& teacher,
                   const AttentionMap& student_mask, const AttentionMap& teacher_mask);

double feature_distill(const FeatureMap& student, const FeatureMap& teacher);
double attention_distill(const FeatureMap& student, const FeatureMap& teacher);

// Top-down mask for one image using the model's own proposals on `task`.
AttentionMap model_topdown_mask(const DetectorModel& model, int task,
                                const std::vector<BoundingBox>& gts, const FeatureMap& fm,
                                const AfdConfig& cfg);

// Full per-batch loss: mean over images of (bottom-up + top-down), with masks
// computed from each model's own proposals against the image's ground truth.
double afd(const DetectorModel& student, const DetectorModel& teacher,
           const std::vector<const LabeledImage*>& batch, int student_mask_task,
           int teacher_mask_task, const AfdConfig& cfg = {});

}  // namespace incdet

#include "incdet/distill.hpp"

#include <cmath>

namespace incdet {

namespace {

bool all_zero(const Tensor& t) {
  for (std::int64_t i = 0; i < t.numel(); ++i)
    if (t[i] != 0.0) return false;
  return true;
}

// (a/||a||) . F with a = self-attention of F; zero map -> zero feature
ad::Var self_weighted(ad::Graph& g, ad::Var fm) {
  ad::Var a = g.sum_channels(g.mul(fm, fm));
  if (all_zero(a->value)) return g.constant(Tensor::zeros(fm->value.shape()));
  ad::Var norm = g.sqrt_scalar(g.sum(g.mul(a, a)));
  ad::Var w = g.scale_by(g.recip_scalar(norm), a);
  return g.mul_spatial(w, fm);
}

// (m/||m||) . F with a constant mask m
ad::Var mask_weighted(ad::Graph& g, ad::Var fm, const Tensor& mask) {
  check(mask.ndim() == 2 && mask.dim(0) == fm->value.dim(1) && mask.dim(1) == fm->value.dim(2),
        "mask_weighted: mask/feature shape mismatch");
  double norm_sq = 0;
  for (std::int64_t i = 0; i < mask.numel(); ++i) norm_sq += mask[i] * mask[i];
  if (norm_sq == 0.0) return g.constant(Tensor::zeros(fm->value.shape()));
  const double inv_norm = 1.0 / std::sqrt(norm_sq);
  Tensor w = mask.clone();
  w.scale_(inv_norm);
  return g.mul_spatial(g.constant(w), fm);
}

ad::Var half_sq_norm(ad::Graph& g, ad::Var x) { return g.scale(g.sum(g.mul(x, x)), 0.5); }

void check_same_shape(const Tensor& a, const Tensor& b, const char* what) {
  check(a.shape() == b.shape(), std::string(what) + ": student/teacher shape mismatch");
}

}  // namespace

ad::Var self_attention_var(ad::Graph& g, ad::Var fm) {
  check(fm->value.ndim() == 3, "self_attention: expected [C,Hf,Wf]");
  return g.sum_channels(g.mul(fm, fm));
}

ad::Var bottom_up_afd_loss(ad::Graph& g, ad::Var student_fm, const Tensor& teacher_fm) {
  check_same_shape(student_fm->value, teacher_fm, "bottom_up_afd");
  ad::Var ws = self_weighted(g, student_fm);
  ad::Var wt = self_weighted(g, g.constant(teacher_fm));
  return half_sq_norm(g, g.sub(ws, wt));
}

ad::Var topdown_afd_loss(ad::Graph& g, ad::Var student_fm, const Tensor& teacher_fm,
                         const Tensor& student_mask, const Tensor& teacher_mask) {
  check_same_shape(student_fm->value, teacher_fm, "topdown_afd");
  ad::Var ws = mask_weighted(g, student_fm, student_mask);
  ad::Var wt = mask_weighted(g, g.constant(teacher_fm), teacher_mask);
  return half_sq_norm(g, g.sub(ws, wt));
}

ad::Var feature_distill_loss(ad::Graph& g, ad::Var student_fm, const Tensor& teacher_fm) {
  check_same_shape(student_fm->value, teacher_fm, "feature_distill");
  return half_sq_norm(g, g.sub(student_fm, g.constant(teacher_fm)));
}

ad::Var attention_distill_loss(ad::Graph& g, ad::Var student_fm, const Tensor& teacher_fm) {
  check_same_shape(student_fm->value, teacher_fm, "attention_distill");
  auto normalized_attention = [&](ad::Var fm) -> ad::Var {
    ad::Var a = g.sum_channels(g.mul(fm, fm));
    if (all_zero(a->value)) return g.constant(Tensor::zeros(a->value.shape()));
    ad::Var norm = g.sqrt_scalar(g.sum(g.mul(a, a)));
    return g.scale_by(g.recip_scalar(norm), a);
  };
  ad::Var ns = normalized_attention(student_fm);
  ad::Var nt = normalized_attention(g.constant(teacher_fm));
  return half_sq_norm(g, g.sub(ns, nt));
}

ad::Var afd_image_loss(ad::Graph& g, ad::Var student_fm, const Tensor& teacher_fm,
                       const Tensor& student_mask, const Tensor& teacher_mask) {
  return g.add(bottom_up_afd_loss(g, student_fm, teacher_fm),
               topdown_afd_loss(g, student_fm, teacher_fm, student_mask, teacher_mask));
}

AttentionMap self_attention(const FeatureMap& fm) {
  check(fm.values.all_finite(), "self_attention: non-finite features");
  ad::Graph g;
  ad::Var a = self_attention_var(g, g.constant(fm.values));
  return {a->value, AttentionKind::self};
}

double bottom_up_afd(const FeatureMap& student, const FeatureMap& teacher) {
  ad::Graph g;
  return bottom_up_afd_loss(g, g.constant(student.values), teacher.values)->value[0];
}

double topdown_threshold(const BoundingBox& gt, const std::vector<Proposal>& proposals) {
  double best = 0;
  for (const Proposal& p : proposals) best = std::max(best, iou(gt, p));
  return 0.5 * best;
}

AttentionMap topdown_mask(const std::vector<BoundingBox>& gts,
                          const std::vector<Proposal>& proposals, int grid_h, int grid_w,
                          int stride, MaskRegion region) {
  AttentionMap m;
  m.kind = AttentionKind::topdown;
  m.values = Tensor::zeros({grid_h, grid_w});
  for (const BoundingBox& gt : gts) {
    const double th = topdown_threshold(gt, proposals);
    for (const Proposal& p : proposals) {
      const double v = iou(gt, p);
      if (!(v > th)) continue;  // strict: th == 0 still requires positive overlap
      BoundingBox rect;
      switch (region) {
        case MaskRegion::intersection: {
          auto inter = intersect(gt, p);
          if (!inter) continue;
          rect = *inter;
          break;
        }
        case MaskRegion::proposal:
          rect = p;
          break;
        case MaskRegion::ground_truth:
          rect = gt;
          break;
      }
      const GridRect gr = project_to_grid(rect, stride, grid_h, grid_w);
      for (int r = gr.r1; r < gr.r2; ++r)
        for (int c = gr.c1; c < gr.c2; ++c) m.values.at(r, c) += 1.0;
    }
  }
  return m;
}

double topdown_afd(const FeatureMap& student, const FeatureMap& teacher,
                   const AttentionMap& student_mask, const AttentionMap& teacher_mask) {
  ad::Graph g;
  return topdown_afd_loss(g, g.constant(student.values), teacher.values, student_mask.values,
                          teacher_mask.values)
      ->value[0];
}

double feature_distill(const FeatureMap& student, const FeatureMap& teacher) {
  ad::Graph g;
  return feature_distill_loss(g, g.constant(student.values), teacher.values)->value[0];
}

double attention_distill(const FeatureMap& student, const FeatureMap& teacher) {
  ad::Graph g;
  return attention_distill_loss(g, g.constant(student.values), teacher.values)->value[0];
}

AttentionMap model_topdown_mask(const DetectorModel& model, int task,
                                const std::vector<BoundingBox>& gts, const FeatureMap& fm,
                                const AfdConfig& cfg) {
  ad::Graph g;
  ad::Var fmv = g.constant(fm.values);
  DetectorModel::RpnOut rpn = model.rpn_forward(g, task, fmv);
  std::vector<Proposal> props =
      model.decode_proposals(rpn.obj->value, rpn.deltas->value, cfg.mask_proposals);
  return topdown_mask(gts, props, fm.height(), fm.width(), fm.stride, cfg.region);
}

double afd(const DetectorModel& student, const DetectorModel& teacher,
           const std::vector<const LabeledImage*>& batch, int student_mask_task,
           int teacher_mask_task, const AfdConfig& cfg) {
  check(!batch.empty(), "afd: empty batch");
  double total = 0;
  for (const LabeledImage* img : batch) {
    FeatureMap s_fm = student.extract_features(*img);
    FeatureMap t_fm = teacher.extract_features(*img);
    AttentionMap sm = model_topdown_mask(student, student_mask_task, img->boxes, s_fm, cfg);
    AttentionMap tm = model_topdown_mask(teacher, teacher_mask_task, img->boxes, t_fm, cfg);
    ad::Graph g;
    total += afd_image_loss(g, g.constant(s_fm.values), t_fm.values, sm.values, tm.values)->value[0];
  }
  return total / static_cast<double>(batch.size());
}

}  // namespace incdet

#pragma once

// Training losses, the test-time 3D consistency loss, and the evaluation
// metrics (MPJPE, MPJPE-RA, MRRPE, 2D L2). Losses are built from tape ops so
// gradients flow to whatever produced their inputs; metrics are plain values.

#include <cmath>
#include <limits>
#include <optional>
#include <vector>

#include "vhpose/autodiff.hpp"
#include "vhpose/geometry.hpp"

namespace vhpose {

struct LossWeights {
  double depth_map = 0.1;      // auxiliary pseudo-depth term
  double heatmap = 1.0;        // 2D keypoint IoU term
  double virtual_depth = 1.0;  // per-joint depth regression term
  double handedness = 0.1;     // presence classification term

  bool valid() const {
    return depth_map >= 0 && heatmap >= 0 && virtual_depth >= 0 && handedness >= 0 &&
           (depth_map + heatmap + virtual_depth + handedness) > 0;
  }
};

// Mean absolute difference over all pixels.
inline Val loss_pseudo_depth(Val pred, Val target) { return mean(abs_elem(sub(pred, target))); }

// 1 - sum(min)/sum(max) over all channels jointly. Inputs must be
// nonnegative; the denominator is clamped so an all-zero pair stays finite.
inline Val loss_heatmap_iou(Val pred, Val target) {
  const Tensor& pv = pred.tape->val(pred);
  const Tensor& tv = pred.tape->val(target);
  for (int64_t i = 0; i < pv.numel(); ++i) {
    if (pv[i] < 0.0f) throw std::domain_error("loss_heatmap_iou: negative prediction entry");
  }
  for (int64_t i = 0; i < tv.numel(); ++i) {
    if (tv[i] < 0.0f) throw std::domain_error("loss_heatmap_iou: negative target entry");
  }
  Val inter = sum(emin(pred, target));
  Val uni = clamp_min(sum(emax(pred, target)), 1e-8f);
  return add_scalar(neg(ediv(inter, uni)), 1.0f);
}

// Sum (not mean) of absolute per-joint depth errors.
inline Val loss_virtual_depth(Val pred, Val target) {
  const Tensor& pv = pred.tape->val(pred);
  const Tensor& tv = pred.tape->val(target);
  if (!pv.all_finite() || !tv.all_finite()) throw std::invalid_argument("loss_virtual_depth: non-finite input");
  return sum(abs_elem(sub(pred, target)));
}

// Two-way cross-entropy for one hand's (present, absent) distribution.
inline Val handedness_ce(Val probs, bool present) {
  Tape& t = *probs.tape;
  Tensor onehot({2});
  onehot[0] = present ? 1.0f : 0.0f;
  onehot[1] = present ? 0.0f : 1.0f;
  Val logp = log_elem(clamp_min(probs, 1e-7f));
  return neg(sum(mul(logp, constant(t, std::move(onehot)))));
}

inline Val loss_handedness(Val probs_left, bool left_present, Val probs_right, bool right_present) {
  return add(handedness_ce(probs_left, left_present), handedness_ce(probs_right, right_present));
}

// Weighted total. Pose terms are absent for hands missing from the ground
// truth; the depth-map and handedness terms are always present.
struct TrainLossTerms {
  std::optional<Val> depth_map;
  std::optional<Val> heatmap;
  std::optional<Val> virtual_depth;
  std::optional<Val> handedness;
};

inline Val loss_train_total(Tape& t, const TrainLossTerms& terms, const LossWeights& w) {
  Val total = constant(t, Tensor::scalar(0.0f));
  auto acc = [&](const std::optional<Val>& term, double weight) {
    if (term && weight != 0.0) total = add(total, mul_scalar(*term, static_cast<float>(weight)));
  };
  acc(terms.depth_map, w.depth_map);
  acc(terms.heatmap, w.heatmap);
  acc(terms.virtual_depth, w.virtual_depth);
  acc(terms.handedness, w.handedness);
  return total;
}

// Coordinate mask for the consistency-loss ablations (xy-only, z-only, xyz).
struct CoordMask {
  bool x = true;
  bool y = true;
  bool z = true;
  bool full() const { return x && y && z; }
};

// Sum over views i of the elementwise L1 distance between the depth-shifted
// initial pose and the pose re-predicted from the corresponding shifted
// image. Poses are [21,3] nodes in virtual-camera 3D space; gradients flow
// through both branches unless the caller detached the initial one.
inline Val loss_tto_consistency(const std::vector<Val>& init_poses, const std::vector<std::vector<Val>>& repredicted,
                                const std::vector<double>& scales, AugmentMode mode, CoordMask mask = {}) {
  if (init_poses.empty()) throw std::invalid_argument("loss_tto_consistency: no poses");
  if (repredicted.size() != scales.size() || scales.empty()) {
    throw std::invalid_argument("loss_tto_consistency: need one repredicted set per scale");
  }
  Tape& t = *init_poses.front().tape;
  Val total = constant(t, Tensor::scalar(0.0f));
  for (size_t i = 0; i < scales.size(); ++i) {
    if (repredicted[i].size() != init_poses.size()) {
      throw std::invalid_argument("loss_tto_consistency: presence mismatch across branches");
    }
    float s = static_cast<float>(scales[i]);
    Tensor factors({kJoints, 3});
    for (int j = 0; j < kJoints; ++j) {
      float sxy = (mode == AugmentMode::UniformScale) ? s : 1.0f;
      factors[static_cast<int64_t>(j) * 3 + 0] = sxy;
      factors[static_cast<int64_t>(j) * 3 + 1] = sxy;
      factors[static_cast<int64_t>(j) * 3 + 2] = s;
    }
    Val fac = constant(t, std::move(factors));
    for (size_t h = 0; h < init_poses.size(); ++h) {
      Val shifted = mul(init_poses[h], fac);
      Val diff = sub(shifted, repredicted[i][h]);
      if (!mask.full()) {
        Tensor m({kJoints, 3});
        for (int j = 0; j < kJoints; ++j) {
          m[static_cast<int64_t>(j) * 3 + 0] = mask.x ? 1.0f : 0.0f;
          m[static_cast<int64_t>(j) * 3 + 1] = mask.y ? 1.0f : 0.0f;
          m[static_cast<int64_t>(j) * 3 + 2] = mask.z ? 1.0f : 0.0f;
        }
        diff = mul(diff, constant(t, std::move(m)));
      }
      total = add(total, sum(abs_elem(diff)));
    }
  }
  return total;
}

// ---------------------------------------------------------------------------
// Metrics

struct FrameTruth {
  std::optional<HandPose3D> left;
  std::optional<HandPose3D> right;
};

struct FramePrediction {
  std::optional<HandPose3D> left;
  std::optional<HandPose3D> right;
};

struct MetricsReport {
  double mpjpe = 0.0;     // mm
  double mpjpe_ra = 0.0;  // mm, root-aligned
  double mrrpe = 0.0;     // mm, relative-root error over two-hand frames
  double l2_px = 0.0;     // pixels on the eval grid
  int64_t frames = 0;     // frames contributing at least one matched hand
  int64_t total_frames = 0;
  int64_t hands_evaluated = 0;
  int64_t mrrpe_frames = 0;
  int64_t gt_hands = 0;
  int64_t matched_hands = 0;
  double match_rate = 0.0;
  // Per contributing frame, for loss-curve plots.
  std::vector<double> per_frame_l2_xy;  // px at eval grid
  std::vector<double> per_frame_l1_z;   // mm
};

namespace metricdetail {

inline double joint_dist(const Vec3& a, const Vec3& b) {
  double dx = a[0] - b[0], dy = a[1] - b[1], dz = a[2] - b[2];
  return std::sqrt(dx * dx + dy * dy + dz * dz);
}

struct HandAcc {
  double mpjpe_sum = 0, ra_sum = 0, l2_sum = 0, z_sum = 0;
  void add(const HandPose3D& pred, const HandPose3D& gt, const CameraIntrinsics& cam, double grid_scale) {
    const Vec3& pr = pred.joints[kWristJoint];
    const Vec3& gr = gt.joints[kWristJoint];
    for (int j = 0; j < kJoints; ++j) {
      mpjpe_sum += joint_dist(pred.joints[j], gt.joints[j]);
      Vec3 pa = {pred.joints[j][0] - pr[0], pred.joints[j][1] - pr[1], pred.joints[j][2] - pr[2]};
      Vec3 ga = {gt.joints[j][0] - gr[0], gt.joints[j][1] - gr[1], gt.joints[j][2] - gr[2]};
      ra_sum += joint_dist(pa, ga);
      Vec2 pp = project_point(pred.joints[j], cam);
      Vec2 gp = project_point(gt.joints[j], cam);
      double du = (pp[0] - gp[0]) * grid_scale, dv = (pp[1] - gp[1]) * grid_scale;
      l2_sum += std::sqrt(du * du + dv * dv);
      z_sum += std::fabs(pred.joints[j][2] - gt.joints[j][2]);
    }
  }
};

}  // namespace metricdetail

inline MetricsReport compute_metrics(const std::vector<FrameTruth>& truths, const std::vector<FramePrediction>& preds,
                                     const CameraIntrinsics& cam, int eval_grid = 224) {
  if (truths.empty() || truths.size() != preds.size()) {
    throw std::invalid_argument("compute_metrics: empty or mismatched evaluation set");
  }
  double grid_scale = static_cast<double>(eval_grid) / static_cast<double>(cam.width);
  MetricsReport rep;
  rep.total_frames = static_cast<int64_t>(truths.size());
  double mpjpe_total = 0, ra_total = 0, l2_total = 0, mrrpe_total = 0;
  for (size_t f = 0; f < truths.size(); ++f) {
    metricdetail::HandAcc acc;
    int matched = 0;
    auto consider = [&](const std::optional<HandPose3D>& gt, const std::optional<HandPose3D>& pr) {
      if (gt) ++rep.gt_hands;
      if (gt && pr) {
        acc.add(*pr, *gt, cam, grid_scale);
        ++matched;
      }
    };
    consider(truths[f].left, preds[f].left);
    consider(truths[f].right, preds[f].right);
    if (truths[f].left && truths[f].right && preds[f].left && preds[f].right) {
      Vec3 rel_p, rel_g;
      for (int k = 0; k < 3; ++k) {
        rel_p[static_cast<size_t>(k)] =
            preds[f].left->joints[kWristJoint][static_cast<size_t>(k)] - preds[f].right->joints[kWristJoint][static_cast<size_t>(k)];
        rel_g[static_cast<size_t>(k)] =
            truths[f].left->joints[kWristJoint][static_cast<size_t>(k)] - truths[f].right->joints[kWristJoint][static_cast<size_t>(k)];
      }
      mrrpe_total += metricdetail::joint_dist(rel_p, rel_g);
      ++rep.mrrpe_frames;
    }
    if (matched > 0) {
      ++rep.frames;
      rep.matched_hands += matched;
      mpjpe_total += acc.mpjpe_sum;
      ra_total += acc.ra_sum;
      l2_total += acc.l2_sum;
      rep.per_frame_l2_xy.push_back(acc.l2_sum / (matched * kJoints));
      rep.per_frame_l1_z.push_back(acc.z_sum / (matched * kJoints));
    }
  }
  double joints = static_cast<double>(rep.matched_hands) * kJoints;
  rep.hands_evaluated = rep.matched_hands;
  if (rep.matched_hands > 0) {
    rep.mpjpe = mpjpe_total / joints;
    rep.mpjpe_ra = ra_total / joints;
    rep.l2_px = l2_total / joints;
  } else {
    rep.mpjpe = rep.mpjpe_ra = rep.l2_px = std::numeric_limits<double>::infinity();
  }
  rep.mrrpe = rep.mrrpe_frames > 0 ? mrrpe_total / static_cast<double>(rep.mrrpe_frames) : 0.0;
  rep.match_rate = rep.gt_hands > 0 ? static_cast<double>(rep.matched_hands) / static_cast<double>(rep.gt_hands) : 0.0;
  return rep;
}

}  // namespace vhpose

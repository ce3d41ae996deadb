#pragma once

// Optimization loops: SGD with momentum and the stepped learning-rate
// schedule, source-domain training with validation-based checkpoint
// selection, the online test-time optimization procedure, its per-sample
// offline variant, and evaluation.

#include <algorithm>
#include <cmath>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "vhpose/autodiff.hpp"
#include "vhpose/geometry.hpp"
#include "vhpose/model.hpp"
#include "vhpose/objectives.hpp"
#include "vhpose/parallel.hpp"
#include "vhpose/synthdata.hpp"

namespace vhpose {

// ---------------------------------------------------------------------------
// Configs

struct TrainConfig {
  double learning_rate = 0.1;
  double momentum = 0.9;
  int epochs = 30;
  // The stepped decay is defined on a 50-epoch reference schedule (halve
  // every 5 epochs starting at 25); shorter runs rescale the breakpoints.
  int reference_epochs = 50;
  int decay_start_ref = 25;
  int decay_every_ref = 5;
  double decay_factor = 0.5;
  int batch_size = 32;
  bool aug_flip = true;
  bool aug_zoom = true;
  bool aug_blur = true;
  bool aug_pixelate = true;
  uint64_t seed = 1;

  void validate() const {
    if (!(learning_rate > 0) || momentum < 0 || momentum >= 1 || epochs < 1 || batch_size < 1) {
      throw std::invalid_argument("train config: invalid hyperparameters");
    }
  }
};

inline double lr_schedule(int epoch, const TrainConfig& cfg) {
  if (epoch < 0 || epoch >= cfg.epochs) throw std::out_of_range("lr_schedule: epoch out of range");
  int start = cfg.decay_start_ref * cfg.epochs / cfg.reference_epochs;
  int period = std::max(1, cfg.decay_every_ref * cfg.epochs / cfg.reference_epochs);
  if (epoch < start) return cfg.learning_rate;
  int halvings = 1 + (epoch - start) / period;
  return cfg.learning_rate * std::pow(cfg.decay_factor, halvings);
}

enum class TTOMode { Online, Offline };

struct TTOConfig {
  double learning_rate = 0.3;
  double momentum = 0.2;
  int views = 2;  // augmented poses per frame
  double scale_lo = 1.0;
  double scale_hi = 1.25;
  double budget_fraction = 0.05;  // share of the stream that drives updates
  int budget_frames = -1;         // fixed frame count when >= 0
  TTOMode mode = TTOMode::Online;
  int offline_steps = 1;
  AugmentMode augment_mode = AugmentMode::DepthScale;
  double noise_mm = 0.0;  // uniform perturbation of the initial pose
  bool detach_init = false;
  CoordMask mask{};
  uint64_t seed = 7;

  void validate() const {
    if (!(scale_lo >= 1.0) || !(scale_hi >= scale_lo) || views < 1 ||
        (budget_frames < 0 && !(budget_fraction > 0)) || (budget_frames == 0)) {
      throw std::invalid_argument("tto config: invalid hyperparameters");
    }
  }

  int budget_for(int stream_length) const {
    if (budget_frames >= 0) return std::min(budget_frames, stream_length);
    return std::min(stream_length, std::max(1, static_cast<int>(std::llround(budget_fraction * stream_length))));
  }
};

struct OptimizerState {
  GradBuffer velocity;
  int64_t step = 0;
  double lr = 0.0;
};

// v <- m*v + g; p <- p - lr*v. Non-trainable parameters are untouched.
inline void sgd_step(ParameterSet& ps, const GradBuffer& grads, OptimizerState& state, double lr, double momentum) {
  if (state.velocity.size() == 0) state.velocity = GradBuffer(ps);
  if (state.velocity.size() != grads.size()) throw std::invalid_argument("sgd_step: gradient layout mismatch");
  for (int i = 0; i < ps.size(); ++i) {
    Parameter& p = ps.at(i);
    if (!p.trainable) continue;
    float* v = state.velocity.slot(i);
    const float* g = grads.slot(i);
    float m = static_cast<float>(momentum);
    float step_lr = static_cast<float>(lr);
    for (int64_t k = 0; k < p.value.numel(); ++k) {
      v[k] = m * v[k] + g[k];
      p.value[k] -= step_lr * v[k];
    }
  }
  state.step += 1;
  state.lr = lr;
}

// Convenience overload reading the set's own gradient accumulators.
inline void sgd_step(ParameterSet& ps, OptimizerState& state, double lr, double momentum) {
  GradBuffer g(ps);
  for (int i = 0; i < ps.size(); ++i) {
    const Tensor& src = ps.at(i).grad;
    float* dst = g.slot(i);
    for (int64_t k = 0; k < src.numel(); ++k) dst[k] = src[k];
  }
  sgd_step(ps, g, state, lr, momentum);
}

inline std::vector<Tensor> snapshot_params(const ParameterSet& ps) {
  std::vector<Tensor> out;
  out.reserve(static_cast<size_t>(ps.size()));
  for (int i = 0; i < ps.size(); ++i) out.push_back(ps.at(i).value);
  return out;
}

inline void restore_params(ParameterSet& ps, const std::vector<Tensor>& snap) {
  if (static_cast<int>(snap.size()) != ps.size()) throw std::invalid_argument("restore_params: size mismatch");
  for (int i = 0; i < ps.size(); ++i) ps.at(i).value = snap[static_cast<size_t>(i)];
}

// ---------------------------------------------------------------------------
// Training-sample preparation (augmentation + targets)

struct TrainTargets {
  Tensor image;
  Tensor depth_target;  // 1,S,S in units of depth_scale
  std::optional<Tensor> hm_left, hm_right;
  std::optional<Tensor> zv_left, zv_right;  // [J], units of depth_scale
  bool present_left = false, present_right = false;
};

namespace engdetail {

// Rescales content by factor s about the image center with edge clamping;
// used by the train-time zoom jitter (both directions, unlike the test-time
// depth shift which only moves content farther).
inline void zoom_channel(const float* src, float* dst, int W, int H, double s) {
  double cx = W / 2.0, cy = H / 2.0;
  for (int y = 0; y < H; ++y) {
    double sy = cy + (y - cy) / s;
    sy = std::min(static_cast<double>(H - 1), std::max(0.0, sy));
    int y0 = static_cast<int>(sy);
    int y1 = std::min(H - 1, y0 + 1);
    double fy = sy - y0;
    for (int x = 0; x < W; ++x) {
      double sx = cx + (x - cx) / s;
      sx = std::min(static_cast<double>(W - 1), std::max(0.0, sx));
      int x0 = static_cast<int>(sx);
      int x1 = std::min(W - 1, x0 + 1);
      double fx = sx - x0;
      double v = (1 - fx) * (1 - fy) * src[y0 * W + x0] + fx * (1 - fy) * src[y0 * W + x1] +
                 (1 - fx) * fy * src[y1 * W + x0] + fx * fy * src[y1 * W + x1];
      dst[y * W + x] = static_cast<float>(v);
    }
  }
}

inline void flip_channel(float* chan, int W, int H) {
  for (int y = 0; y < H; ++y) {
    float* row = chan + static_cast<int64_t>(y) * W;
    for (int x = 0; x < W / 2; ++x) std::swap(row[x], row[W - 1 - x]);
  }
}

inline void blur_tensor(Tensor& img, double sigma) {
  int C = img.extent(0), H = img.extent(1), W = img.extent(2);
  int radius = static_cast<int>(std::ceil(2.0 * sigma));
  if (radius < 1) return;
  std::vector<float> kernel(static_cast<size_t>(2 * radius + 1));
  float ksum = 0;
  for (int i = -radius; i <= radius; ++i) {
    kernel[static_cast<size_t>(i + radius)] = static_cast<float>(std::exp(-0.5 * i * i / (sigma * sigma)));
    ksum += kernel[static_cast<size_t>(i + radius)];
  }
  for (auto& k : kernel) k /= ksum;
  std::vector<float> tmp(static_cast<size_t>(H) * W);
  for (int c = 0; c < C; ++c) {
    float* chan = img.data() + static_cast<int64_t>(c) * H * W;
    for (int y = 0; y < H; ++y) {
      for (int x = 0; x < W; ++x) {
        float acc = 0;
        for (int i = -radius; i <= radius; ++i) {
          int xx = std::min(W - 1, std::max(0, x + i));
          acc += kernel[static_cast<size_t>(i + radius)] * chan[y * W + xx];
        }
        tmp[static_cast<size_t>(y) * W + x] = acc;
      }
    }
    for (int y = 0; y < H; ++y) {
      for (int x = 0; x < W; ++x) {
        float acc = 0;
        for (int i = -radius; i <= radius; ++i) {
          int yy = std::min(H - 1, std::max(0, y + i));
          acc += kernel[static_cast<size_t>(i + radius)] * tmp[static_cast<size_t>(yy) * W + x];
        }
        chan[y * W + x] = acc;
      }
    }
  }
}

inline void pixelate_tensor(Tensor& img, int factor) {
  int C = img.extent(0), H = img.extent(1), W = img.extent(2);
  for (int c = 0; c < C; ++c) {
    float* chan = img.data() + static_cast<int64_t>(c) * H * W;
    for (int by = 0; by < H; by += factor) {
      for (int bx = 0; bx < W; bx += factor) {
        float acc = 0;
        int cnt = 0;
        for (int y = by; y < std::min(H, by + factor); ++y) {
          for (int x = bx; x < std::min(W, bx + factor); ++x) {
            acc += chan[y * W + x];
            ++cnt;
          }
        }
        float v = acc / static_cast<float>(cnt);
        for (int y = by; y < std::min(H, by + factor); ++y) {
          for (int x = bx; x < std::min(W, bx + factor); ++x) chan[y * W + x] = v;
        }
      }
    }
  }
}

}  // namespace engdetail

// Builds the per-image training targets, optionally applying the train-time
// augmentations. When the virtual-camera transform is enabled the regression
// target is virtual depth and the zoom jitter rescales it consistently; in
// the metric variant the depth target is deliberately left untouched by
// zoom, since a zoomed image with unchanged metric depth is exactly the
// ambiguity that representation suffers from.
inline TrainTargets build_train_targets(const Sample& sample, const ModelConfig& cfg, bool use_virtual_depth,
                                        const VirtualCameraConfig& vc, const TrainConfig& tc, Rng& rng, bool augment) {
  int W = cfg.input_size, H = cfg.input_size;
  TrainTargets out;
  out.image = sample.image;
  Tensor depth = sample.depth_map;
  bool pl = sample.present_left, pr = sample.present_right;
  JointArray2 kl = sample.keypoints_left, kr = sample.keypoints_right;
  std::array<double, kJoints> zl{}, zr{};
  for (int j = 0; j < kJoints; ++j) {
    if (pl) zl[static_cast<size_t>(j)] = sample.pose_left->joints[static_cast<size_t>(j)][2];
    if (pr) zr[static_cast<size_t>(j)] = sample.pose_right->joints[static_cast<size_t>(j)][2];
  }

  if (augment && tc.aug_flip && rng.bernoulli(0.5)) {
    for (int c = 0; c < 3; ++c) engdetail::flip_channel(out.image.data() + static_cast<int64_t>(c) * H * W, W, H);
    engdetail::flip_channel(depth.data(), W, H);
    auto flip_kps = [&](JointArray2& k) {
      for (int j = 0; j < kJoints; ++j) k[static_cast<size_t>(j)][0] = (W - 1) - k[static_cast<size_t>(j)][0];
    };
    if (pl) flip_kps(kl);
    if (pr) flip_kps(kr);
    std::swap(pl, pr);
    std::swap(kl, kr);
    std::swap(zl, zr);
  }

  double zoom = 1.0;
  if (augment && tc.aug_zoom) {
    zoom = rng.uniform(0.9, 1.1);
    Tensor zoomed({3, H, W});
    for (int c = 0; c < 3; ++c) {
      engdetail::zoom_channel(out.image.data() + static_cast<int64_t>(c) * H * W,
                              zoomed.data() + static_cast<int64_t>(c) * H * W, W, H, zoom);
    }
    out.image = std::move(zoomed);
    Tensor dz({H, W});
    engdetail::zoom_channel(depth.data(), dz.data(), W, H, zoom);
    for (int64_t i = 0; i < dz.numel(); ++i) dz[i] = static_cast<float>(dz[i] / zoom);
    depth = std::move(dz);
    double cx = W / 2.0, cy = H / 2.0;
    auto zoom_kps = [&](JointArray2& k) {
      for (int j = 0; j < kJoints; ++j) {
        k[static_cast<size_t>(j)][0] = cx + zoom * (k[static_cast<size_t>(j)][0] - cx);
        k[static_cast<size_t>(j)][1] = cy + zoom * (k[static_cast<size_t>(j)][1] - cy);
      }
    };
    if (pl) zoom_kps(kl);
    if (pr) zoom_kps(kr);
  }

  if (augment && tc.aug_blur && rng.bernoulli(0.35)) {
    engdetail::blur_tensor(out.image, rng.uniform(0.4, 0.9));
  }
  if (augment && tc.aug_pixelate && rng.bernoulli(0.25)) {
    engdetail::pixelate_tensor(out.image, 2);
  }

  out.present_left = pl;
  out.present_right = pr;
  auto make_depth_target = [&](const std::array<double, kJoints>& z) {
    Tensor t({kJoints});
    for (int j = 0; j < kJoints; ++j) {
      double zv = use_virtual_depth ? to_virtual_depth(z[static_cast<size_t>(j)], sample.intrinsics, vc)
                                    : z[static_cast<size_t>(j)];
      if (use_virtual_depth) zv /= zoom;  // zoom emulates a focal change; virtual depth tracks it
      t[j] = static_cast<float>(zv / cfg.depth_scale);
    }
    return t;
  };
  if (pl) {
    out.hm_left = gaussian_heatmaps(kl, cfg.heatmap_size, cfg.input_size, cfg.heatmap_sigma);
    out.zv_left = make_depth_target(zl);
  }
  if (pr) {
    out.hm_right = gaussian_heatmaps(kr, cfg.heatmap_size, cfg.input_size, cfg.heatmap_sigma);
    out.zv_right = make_depth_target(zr);
  }
  out.depth_target = Tensor({1, H, W});
  for (int64_t i = 0; i < depth.numel(); ++i) {
    out.depth_target[i] = static_cast<float>(depth[i] / cfg.depth_scale);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Evaluation

inline FrameTruth truth_of(const Sample& s) {
  FrameTruth t;
  if (s.present_left) t.left = s.pose_left;
  if (s.present_right) t.right = s.pose_right;
  return t;
}

struct EvalResult {
  MetricsReport report;
  std::vector<FramePrediction> predictions;
};

inline EvalResult evaluate(PoseNet& model, const std::vector<Sample>& samples, const CameraIntrinsics& cam,
                           int eval_grid, bool use_virtual_depth, const VirtualCameraConfig& vc, int threads) {
  if (samples.empty()) throw std::invalid_argument("evaluate: empty dataset");
  EvalResult res;
  res.predictions.resize(samples.size());
  std::vector<FrameTruth> truths(samples.size());
  parallel_for(static_cast<int>(samples.size()), threads, [&](int i) {
    ForwardOutputs out = model.infer(samples[static_cast<size_t>(i)].image);
    res.predictions[static_cast<size_t>(i)] = predict_pose_3d(out, cam, vc, use_virtual_depth, model.config());
    truths[static_cast<size_t>(i)] = truth_of(samples[static_cast<size_t>(i)]);
  });
  res.report = compute_metrics(truths, res.predictions, cam, eval_grid);
  return res;
}

// ---------------------------------------------------------------------------
// Source-domain training

struct EpochStats {
  int epoch = 0;
  double lr = 0;
  double loss_depth = 0, loss_heatmap = 0, loss_vdepth = 0, loss_handed = 0, loss_total = 0;
  double val_mpjpe = 0;
};

struct TrainResult {
  std::vector<EpochStats> history;
  int best_epoch = -1;
  double best_val_mpjpe = std::numeric_limits<double>::infinity();
};

struct ImageLossParts {
  double total = 0, depth = 0, heatmap = 0, vdepth = 0, handed = 0;
};

inline ImageLossParts image_loss_and_grad(PoseNet& model, const TrainTargets& tgt, const LossWeights& weights,
                                          GradBuffer* out_grads) {
  Tape t;
  ForwardGraph g = model.forward(t, tgt.image);
  TrainLossTerms terms;
  terms.depth_map = loss_pseudo_depth(g.depth_map, constant(t, tgt.depth_target));
  std::optional<Val> lxy, lzv;
  auto add_hand = [&](const std::optional<Tensor>& hm, const std::optional<Tensor>& zv, Val hm_pred, Val z_pred) {
    if (!hm) return;
    Val iou = loss_heatmap_iou(hm_pred, constant(t, *hm));
    lxy = lxy ? add(*lxy, iou) : iou;
    Val zl = loss_virtual_depth(z_pred, constant(t, *zv));
    lzv = lzv ? add(*lzv, zl) : zl;
  };
  add_hand(tgt.hm_left, tgt.zv_left, g.heatmaps_left, g.depth_left);
  add_hand(tgt.hm_right, tgt.zv_right, g.heatmaps_right, g.depth_right);
  terms.heatmap = lxy;
  terms.virtual_depth = lzv;
  terms.handedness = loss_handedness(g.hand_left, tgt.present_left, g.hand_right, tgt.present_right);
  Val total = loss_train_total(t, terms, weights);

  ImageLossParts parts;
  parts.total = t.val(total).item();
  parts.depth = t.val(*terms.depth_map).item();
  parts.heatmap = lxy ? t.val(*lxy).item() : 0.0;
  parts.vdepth = lzv ? t.val(*lzv).item() : 0.0;
  parts.handed = t.val(*terms.handedness).item();
  if (out_grads != nullptr) {
    t.backward(total);
    t.collect_param_grads(*out_grads);
  }
  return parts;
}

inline TrainResult train(PoseNet& model, const std::vector<Sample>& train_set, const std::vector<Sample>& val_set,
                         const TrainConfig& tc, const LossWeights& weights, bool use_virtual_depth,
                         const VirtualCameraConfig& vc, int threads, const std::string& checkpoint_path = "") {
  tc.validate();
  if (train_set.empty() || val_set.empty()) throw std::invalid_argument("train: datasets must be nonempty");
  const int n = static_cast<int>(train_set.size());
  const int bs = tc.batch_size;
  TrainResult result;
  Rng shuffle_rng(derive_seed(tc.seed, 0x5f0ffULL));  // dedicated stream for epoch shuffles

  std::vector<int> order(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) order[static_cast<size_t>(i)] = i;

  std::vector<GradBuffer> slots;
  for (int i = 0; i < bs; ++i) slots.emplace_back(model.params());
  GradBuffer batch_grads(model.params());
  OptimizerState opt;
  std::vector<Tensor> best_snapshot;

  for (int epoch = 0; epoch < tc.epochs; ++epoch) {
    double lr = lr_schedule(epoch, tc);
    // Fisher-Yates with the dedicated stream
    for (int i = n - 1; i > 0; --i) std::swap(order[static_cast<size_t>(i)], order[static_cast<size_t>(shuffle_rng.uniform_int(0, i))]);

    double sum_total = 0, sum_d = 0, sum_hm = 0, sum_zv = 0, sum_h = 0;
    for (int batch_start = 0; batch_start < n; batch_start += bs) {
      int batch_n = std::min(bs, n - batch_start);
      std::vector<ImageLossParts> parts(static_cast<size_t>(batch_n));
      parallel_for(batch_n, threads, [&](int k) {
        int sample_idx = order[static_cast<size_t>(batch_start + k)];
        Rng aug_rng(derive_seed(derive_seed(tc.seed, 0xA06000ULL + static_cast<uint64_t>(epoch)),
                                static_cast<uint64_t>(sample_idx)));
        TrainTargets tgt = build_train_targets(train_set[static_cast<size_t>(sample_idx)], model.config(),
                                               use_virtual_depth, vc, tc, aug_rng, true);
        slots[static_cast<size_t>(k)].clear();
        parts[static_cast<size_t>(k)] = image_loss_and_grad(model, tgt, weights, &slots[static_cast<size_t>(k)]);
      });
      for (int k = 0; k < batch_n; ++k) {
        if (!std::isfinite(parts[static_cast<size_t>(k)].total)) {
          std::ostringstream oss;
          oss << "train: non-finite loss at epoch " << epoch << " batch " << (batch_start / bs) << " (depth="
              << parts[static_cast<size_t>(k)].depth << " heatmap=" << parts[static_cast<size_t>(k)].heatmap
              << " vdepth=" << parts[static_cast<size_t>(k)].vdepth << " handed=" << parts[static_cast<size_t>(k)].handed
              << ")";
          throw std::runtime_error(oss.str());
        }
      }
      batch_grads.clear();
      for (int k = 0; k < batch_n; ++k) batch_grads.add_from(slots[static_cast<size_t>(k)]);
      batch_grads.scale(1.0f / static_cast<float>(batch_n));
      sgd_step(model.params(), batch_grads, opt, lr, tc.momentum);
      for (int k = 0; k < batch_n; ++k) {
        sum_total += parts[static_cast<size_t>(k)].total;
        sum_d += parts[static_cast<size_t>(k)].depth;
        sum_hm += parts[static_cast<size_t>(k)].heatmap;
        sum_zv += parts[static_cast<size_t>(k)].vdepth;
        sum_h += parts[static_cast<size_t>(k)].handed;
      }
    }

    EvalResult val = evaluate(model, val_set, val_set.front().intrinsics, 224, use_virtual_depth, vc, threads);
    EpochStats st;
    st.epoch = epoch;
    st.lr = lr;
    st.loss_total = sum_total / n;
    st.loss_depth = sum_d / n;
    st.loss_heatmap = sum_hm / n;
    st.loss_vdepth = sum_zv / n;
    st.loss_handed = sum_h / n;
    st.val_mpjpe = val.report.mpjpe;
    result.history.push_back(st);
    if (val.report.mpjpe < result.best_val_mpjpe) {
      result.best_val_mpjpe = val.report.mpjpe;
      result.best_epoch = epoch;
      best_snapshot = snapshot_params(model.params());
    }
  }

  if (!best_snapshot.empty()) restore_params(model.params(), best_snapshot);
  if (!checkpoint_path.empty()) save_checkpoint(model.params(), checkpoint_path);
  return result;
}

// ---------------------------------------------------------------------------
// Test-time optimization

struct TTOTraceRow {
  int frame = 0;
  double loss = 0;
  bool updated = false;
  std::string skip_reason;  // empty when an update ran or the budget elapsed
};

struct TTOResult {
  std::vector<FramePrediction> predictions;
  std::vector<TTOTraceRow> trace;
  int budget_frames = 0;
  int update_frames = 0;  // frames inside the budget that attempted an update
  int skipped_frames = 0;
};

namespace engdetail {

// Differentiable lift of one hand's 2.5D outputs into virtual-camera 3D
// space, in units of depth_scale (so gradients through the depth branch stay
// O(1)). u,v are mapped from input-image pixels onto the virtual grid.
inline Val pose_in_virtual_space(Tape& t, Val keypoints_px, Val depth_raw, const ModelConfig& cfg,
                                 const VirtualCameraConfig& vc) {
  float to_virtual = static_cast<float>(vc.height / cfg.input_size);
  float center = static_cast<float>(vc.height / 2.0);
  float inv_focal = static_cast<float>(1.0 / vc.focal);
  Val u = add_scalar(mul_scalar(slice_col(keypoints_px, 0), to_virtual), -center);
  Val v = add_scalar(mul_scalar(slice_col(keypoints_px, 1), to_virtual), -center);
  Val x = mul_scalar(mul(u, depth_raw), inv_focal);
  Val y = mul_scalar(mul(v, depth_raw), inv_focal);
  return interleave3(x, y, depth_raw);
}

struct BranchPoses {
  std::vector<Val> poses;  // one per included hand
};

}  // namespace engdetail

// One consistency update attempt on a single frame. Returns the loss value,
// or nothing when the frame was skipped (reason written to *reason).
inline std::optional<double> tto_update_frame(PoseNet& model, const Sample& sample, const TTOConfig& tto,
                                              const VirtualCameraConfig& vc, float background_fill, Rng& rng,
                                              OptimizerState& opt, GradBuffer& grads, std::string* reason,
                                              ForwardOutputs* init_outputs = nullptr) {
  const ModelConfig& cfg = model.config();
  Tape t;
  ForwardGraph g0 = model.forward(t, sample.image);
  if (init_outputs != nullptr) *init_outputs = PoseNet::snapshot(t, g0);
  bool left0 = t.val(g0.hand_left)[0] > cfg.presence_threshold;
  bool right0 = t.val(g0.hand_right)[0] > cfg.presence_threshold;
  if (!left0 && !right0) {
    if (reason) *reason = "no_hands";
    return std::nullopt;
  }

  std::vector<double> scales(static_cast<size_t>(tto.views));
  for (int i = 0; i < tto.views; ++i) scales[static_cast<size_t>(i)] = rng.uniform(tto.scale_lo, tto.scale_hi);
  Tensor noise_l({kJoints, 3}), noise_r({kJoints, 3});
  if (tto.noise_mm > 0) {
    for (int64_t i = 0; i < noise_l.numel(); ++i) {
      noise_l[i] = static_cast<float>(rng.uniform(-tto.noise_mm / 2, tto.noise_mm / 2) / cfg.depth_scale);
    }
    for (int64_t i = 0; i < noise_r.numel(); ++i) {
      noise_r[i] = static_cast<float>(rng.uniform(-tto.noise_mm / 2, tto.noise_mm / 2) / cfg.depth_scale);
    }
  }

  std::vector<ForwardGraph> views;
  bool left_ok = left0, right_ok = right0;
  for (int i = 0; i < tto.views; ++i) {
    Tensor aug = depth_augment_image(sample.image, scales[static_cast<size_t>(i)], sample.intrinsics, background_fill);
    ForwardGraph gi = model.forward(t, aug);
    left_ok = left_ok && t.val(gi.hand_left)[0] > cfg.presence_threshold;
    right_ok = right_ok && t.val(gi.hand_right)[0] > cfg.presence_threshold;
    views.push_back(gi);
  }
  if (!left_ok && !right_ok) {
    if (reason) *reason = "presence_mismatch";
    return std::nullopt;
  }

  auto branch_poses = [&](const ForwardGraph& g, bool is_init) {
    std::vector<Val> poses;
    auto one = [&](Val kps, Val depth, const Tensor& noise) {
      Val p = engdetail::pose_in_virtual_space(t, kps, depth, cfg, vc);
      if (is_init) {
        if (tto.noise_mm > 0) p = add(p, constant(t, noise));
        if (tto.detach_init) p = constant(t, t.val(p));
      }
      poses.push_back(p);
    };
    if (left_ok) one(g.keypoints_left, g.depth_left, noise_l);
    if (right_ok) one(g.keypoints_right, g.depth_right, noise_r);
    return poses;
  };
  std::vector<Val> init_poses = branch_poses(g0, true);
  std::vector<std::vector<Val>> repred;
  for (const auto& gi : views) repred.push_back(branch_poses(gi, false));

  Val loss = loss_tto_consistency(init_poses, repred, scales, tto.augment_mode, tto.mask);
  double loss_value = t.val(loss).item();
  if (!std::isfinite(loss_value)) {
    if (reason) *reason = "nonfinite_loss";
    return std::nullopt;
  }
  grads.clear();
  t.backward(loss);
  t.collect_param_grads(grads);
  sgd_step(model.params(), grads, opt, tto.learning_rate, tto.momentum);
  return loss_value;
}

// Online adaptation over the first budget frames, then plain inference.
// Every recorded prediction comes from the forward pass that ran before that
// frame's own update. Heads stay frozen throughout.
inline TTOResult tto_online(PoseNet& model, const std::vector<Sample>& stream, const CameraIntrinsics& cam,
                            const TTOConfig& tto, bool use_virtual_depth, const VirtualCameraConfig& vc,
                            float background_fill) {
  tto.validate();
  if (stream.empty()) throw std::invalid_argument("tto_online: empty stream");
  const ModelConfig& cfg = model.config();
  TTOResult res;
  res.budget_frames = tto.budget_for(static_cast<int>(stream.size()));
  model.set_heads_trainable(false);
  OptimizerState opt;
  GradBuffer grads(model.params());
  Rng rng(tto.seed);
  for (int i = 0; i < static_cast<int>(stream.size()); ++i) {
    const Sample& sample = stream[static_cast<size_t>(i)];
    TTOTraceRow row;
    row.frame = i;
    if (i < res.budget_frames) {
      std::string reason;
      ForwardOutputs out;
      std::optional<double> loss =
          tto_update_frame(model, sample, tto, vc, background_fill, rng, opt, grads, &reason, &out);
      res.predictions.push_back(predict_pose_3d(out, cam, vc, use_virtual_depth, cfg));
      if (loss) {
        row.loss = *loss;
        row.updated = true;
        ++res.update_frames;
      } else {
        row.skip_reason = reason;
        ++res.skipped_frames;
      }
    } else {
      ForwardOutputs out = model.infer(sample.image);
      res.predictions.push_back(predict_pose_3d(out, cam, vc, use_virtual_depth, cfg));
    }
    res.trace.push_back(row);
  }
  model.set_heads_trainable(true);
  return res;
}

// Per-sample offline variant: weights are reset to the supplied snapshot for
// every sample, adapted for a fixed number of steps on that sample alone,
// then used for one prediction. Sample order cannot influence results.
inline TTOResult tto_offline(PoseNet& model, const std::vector<Sample>& stream, const CameraIntrinsics& cam,
                             const TTOConfig& tto, bool use_virtual_depth, const VirtualCameraConfig& vc,
                             float background_fill) {
  tto.validate();
  if (stream.empty()) throw std::invalid_argument("tto_offline: empty stream");
  if (tto.offline_steps < 0) throw std::invalid_argument("tto_offline: negative step count");
  const ModelConfig& cfg = model.config();
  std::vector<Tensor> snapshot = snapshot_params(model.params());
  TTOResult res;
  res.budget_frames = 0;
  model.set_heads_trainable(false);
  GradBuffer grads(model.params());
  for (int i = 0; i < static_cast<int>(stream.size()); ++i) {
    const Sample& sample = stream[static_cast<size_t>(i)];
    restore_params(model.params(), snapshot);
    OptimizerState opt;
    Rng rng(derive_seed(tto.seed, static_cast<uint64_t>(i)));
    TTOTraceRow row;
    row.frame = i;
    for (int k = 0; k < tto.offline_steps; ++k) {
      std::string reason;
      std::optional<double> loss = tto_update_frame(model, sample, tto, vc, background_fill, rng, opt, grads, &reason);
      if (loss) {
        row.loss = *loss;
        row.updated = true;
      } else {
        row.skip_reason = reason;
        break;
      }
    }
    if (row.updated) ++res.update_frames;
    if (!row.skip_reason.empty()) ++res.skipped_frames;
    ForwardOutputs out = model.infer(sample.image);
    res.predictions.push_back(predict_pose_3d(out, cam, vc, use_virtual_depth, cfg));
    res.trace.push_back(row);
  }
  restore_params(model.params(), snapshot);
  model.set_heads_trainable(true);
  return res;
}

}  // namespace vhpose

#pragma once

// The pose network. A shared convolutional trunk feeds per-hand heatmap
// upsamplers, per-hand depth regressors, per-hand presence classifiers, and
// an auxiliary full-resolution depth decoder. Parameter names are prefixed
// "backbone." / "head." so the test-time loop can freeze the heads.

#include <cmath>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "vhpose/autodiff.hpp"
#include "vhpose/geometry.hpp"
#include "vhpose/objectives.hpp"
#include "vhpose/rng.hpp"

namespace vhpose {

struct ModelConfig {
  int input_size = 64;    // px (reference design uses 224)
  int heatmap_size = 32;  // px, always input_size / 2
  int joints = kJoints;
  std::vector<int> backbone_channels = {16, 32, 64, 64};   // four stride-2 stages
  std::vector<int> upsampler_channels = {24, 24, 16, 12};  // four transposed-conv layers
  std::vector<int> depth_decoder_channels = {16, 8, 4, 1};
  int depth_hidden = 64;  // per-hand depth MLP width
  int hand_hidden = 16;   // presence classifier width
  float softargmax_temperature = 1.0f;
  float heatmap_logit_scale = 10.0f;  // sharpens softmax peaks before soft-argmax
  double depth_scale = 1000.0;        // mm per regressed unit
  double presence_threshold = 0.5;
  double heatmap_sigma = 1.4;  // px on the heatmap grid, for training targets

  void validate() const {
    if (joints != kJoints) throw std::invalid_argument("model: joint count must be 21");
    if (input_size <= 0 || heatmap_size * 2 != input_size || input_size % 16 != 0) {
      throw std::invalid_argument("model: heatmap must be input/2 and input divisible by 16");
    }
    if (backbone_channels.size() != 4 || upsampler_channels.size() != 4 || depth_decoder_channels.size() != 4) {
      throw std::invalid_argument("model: expected four stages per branch");
    }
    if (depth_decoder_channels.back() != 1) throw std::invalid_argument("model: depth decoder must end at one channel");
    if (!(softargmax_temperature > 0) || !(depth_scale > 0)) throw std::invalid_argument("model: bad scalar config");
  }
};

// Tape handles for one forward pass.
struct ForwardGraph {
  Val features;
  Val heatmaps_left, heatmaps_right;    // [J,h,h], in [0,1]
  Val keypoints_left, keypoints_right;  // [J,2], input-image pixels
  Val depth_left, depth_right;          // [J], units of depth_scale mm
  Val hand_left, hand_right;            // [2], (present, absent) probabilities
  Val depth_map;                        // [1,input,input]
};

// Plain-value snapshot of a forward pass.
struct ForwardOutputs {
  Tensor features;
  Tensor heatmaps_left, heatmaps_right;
  Tensor keypoints_left, keypoints_right;
  Tensor depth_left, depth_right;
  Tensor hand_left, hand_right;
  Tensor depth_map;
};

class PoseNet {
 public:
  PoseNet(ModelConfig cfg, uint64_t init_seed) : cfg_(std::move(cfg)) {
    cfg_.validate();
    Rng rng(init_seed);
    build_parameters(rng);
  }

  const ModelConfig& config() const { return cfg_; }
  ParameterSet& params() { return params_; }
  const ParameterSet& params() const { return params_; }

  ForwardGraph forward(Tape& t, const Tensor& image) {
    if (image.rank() != 3 || image.extent(0) != 3 || image.extent(1) != cfg_.input_size ||
        image.extent(2) != cfg_.input_size) {
      throw std::invalid_argument("forward: expected 3x" + std::to_string(cfg_.input_size) + "x" +
                                  std::to_string(cfg_.input_size) + " image, got " + Tensor::shape_str(image.shape()));
    }
    if (!image.all_finite()) throw std::invalid_argument("forward: non-finite image values");

    ForwardGraph g;
    Val x = reshape(constant(t, image), {1, 3, cfg_.input_size, cfg_.input_size});
    for (int s = 0; s < 4; ++s) {
      std::string base = "backbone.stage" + std::to_string(s);
      x = relu(add_channel_bias(conv2d(x, param(t, params_, base + ".weight"), 2, 1), param(t, params_, base + ".bias")));
    }
    g.features = x;
    int c4 = cfg_.backbone_channels[3];
    Val pooled = reshape(global_avg_pool(x), {c4});

    auto run_hand = [&](const char* side, Val& heatmaps, Val& kps, Val& depth, Val& hand) {
      std::string up = std::string("head.up_") + side;
      Val u = x;
      u = relu(add_channel_bias(conv_transpose2d(u, param(t, params_, up + ".t0.weight"), 2, 0),
                                param(t, params_, up + ".t0.bias")));
      u = relu(add_channel_bias(conv_transpose2d(u, param(t, params_, up + ".t1.weight"), 1, 1),
                                param(t, params_, up + ".t1.bias")));
      u = relu(add_channel_bias(conv_transpose2d(u, param(t, params_, up + ".t2.weight"), 2, 0),
                                param(t, params_, up + ".t2.bias")));
      u = relu(add_channel_bias(conv_transpose2d(u, param(t, params_, up + ".t3.weight"), 2, 0),
                                param(t, params_, up + ".t3.bias")));
      Val logits = add_channel_bias(pointwise_conv(u, param(t, params_, up + ".pw.weight")),
                                    param(t, params_, up + ".pw.bias"));
      heatmaps = sigmoid(reshape(logits, {cfg_.joints, cfg_.heatmap_size, cfg_.heatmap_size}));
      Val hm_coords = soft_argmax2d(mul_scalar(heatmaps, cfg_.heatmap_logit_scale), cfg_.softargmax_temperature);
      kps = mul_scalar(hm_coords, static_cast<float>(cfg_.input_size) / static_cast<float>(cfg_.heatmap_size));

      std::string zp = std::string("head.depth_") + side;
      Val zh = relu(linear(pooled, param(t, params_, zp + ".fc0.weight"), param(t, params_, zp + ".fc0.bias")));
      depth = linear(zh, param(t, params_, zp + ".fc1.weight"), param(t, params_, zp + ".fc1.bias"));

      std::string hp = std::string("head.hand_") + side;
      Val hh = relu(linear(pooled, param(t, params_, hp + ".fc0.weight"), param(t, params_, hp + ".fc0.bias")));
      hand = softmax1d(linear(hh, param(t, params_, hp + ".fc1.weight"), param(t, params_, hp + ".fc1.bias")));
    };
    run_hand("left", g.heatmaps_left, g.keypoints_left, g.depth_left, g.hand_left);
    run_hand("right", g.heatmaps_right, g.keypoints_right, g.depth_right, g.hand_right);

    Val d = x;
    for (int s = 0; s < 4; ++s) {
      std::string base = "head.depth_decoder.t" + std::to_string(s);
      d = add_channel_bias(conv_transpose2d(d, param(t, params_, base + ".weight"), 2, 0),
                           param(t, params_, base + ".bias"));
      if (s < 3) d = relu(d);
    }
    g.depth_map = reshape(d, {1, cfg_.input_size, cfg_.input_size});
    return g;
  }

  ForwardOutputs infer(const Tensor& image) {
    Tape t;
    ForwardGraph g = forward(t, image);
    return snapshot(t, g);
  }

  static ForwardOutputs snapshot(const Tape& t, const ForwardGraph& g) {
    ForwardOutputs o;
    o.features = t.val(g.features);
    o.heatmaps_left = t.val(g.heatmaps_left);
    o.heatmaps_right = t.val(g.heatmaps_right);
    o.keypoints_left = t.val(g.keypoints_left);
    o.keypoints_right = t.val(g.keypoints_right);
    o.depth_left = t.val(g.depth_left);
    o.depth_right = t.val(g.depth_right);
    o.hand_left = t.val(g.hand_left);
    o.hand_right = t.val(g.hand_right);
    o.depth_map = t.val(g.depth_map);
    return o;
  }

  // Backbone / head split used by the test-time loop. The two sets partition
  // the parameter names exactly.
  std::pair<std::vector<std::string>, std::vector<std::string>> partition_parameters() const {
    std::vector<std::string> backbone, heads;
    for (const std::string& n : params_.names()) {
      if (n.rfind("backbone.", 0) == 0) {
        backbone.push_back(n);
      } else {
        heads.push_back(n);
      }
    }
    return {backbone, heads};
  }

  void set_heads_trainable(bool trainable) {
    for (int i = 0; i < params_.size(); ++i) {
      Parameter& p = params_.at(i);
      if (p.name.rfind("backbone.", 0) != 0) p.trainable = trainable;
    }
  }

  void set_all_trainable(bool trainable) {
    for (int i = 0; i < params_.size(); ++i) params_.at(i).trainable = trainable;
  }

 private:
  void build_parameters(Rng& rng) {
    auto conv_init = [&](const std::string& name, int out_c, int in_c, int k) {
      Tensor w({out_c, in_c, k, k});
      double limit = std::sqrt(6.0 / (static_cast<double>(in_c) * k * k));
      for (int64_t i = 0; i < w.numel(); ++i) w[i] = static_cast<float>(rng.uniform(-limit, limit));
      params_.add(name + ".weight", std::move(w));
      params_.add(name + ".bias", Tensor({out_c}));
    };
    auto tconv_init = [&](const std::string& name, int in_c, int out_c, int k) {
      Tensor w({in_c, out_c, k, k});
      double limit = std::sqrt(6.0 / (static_cast<double>(in_c) * k * k));
      for (int64_t i = 0; i < w.numel(); ++i) w[i] = static_cast<float>(rng.uniform(-limit, limit));
      params_.add(name + ".weight", std::move(w));
      params_.add(name + ".bias", Tensor({out_c}));
    };
    auto fc_init = [&](const std::string& name, int out_n, int in_n, float bias_value = 0.0f) {
      Tensor w({out_n, in_n});
      double limit = std::sqrt(6.0 / static_cast<double>(in_n));
      for (int64_t i = 0; i < w.numel(); ++i) w[i] = static_cast<float>(rng.uniform(-limit, limit));
      params_.add(name + ".weight", std::move(w));
      params_.add(name + ".bias", Tensor::full({out_n}, bias_value));
    };

    const auto& bc = cfg_.backbone_channels;
    int in_c = 3;
    for (int s = 0; s < 4; ++s) {
      conv_init("backbone.stage" + std::to_string(s), bc[s], in_c, 3);
      in_c = bc[s];
    }
    const auto& uc = cfg_.upsampler_channels;
    for (const char* side : {"left", "right"}) {
      std::string up = std::string("head.up_") + side;
      tconv_init(up + ".t0", bc[3], uc[0], 2);
      tconv_init(up + ".t1", uc[0], uc[1], 3);
      tconv_init(up + ".t2", uc[1], uc[2], 2);
      tconv_init(up + ".t3", uc[2], uc[3], 2);
      conv_init(up + ".pw", cfg_.joints, uc[3], 1);
      std::string zp = std::string("head.depth_") + side;
      fc_init(zp + ".fc0", cfg_.depth_hidden, bc[3]);
      // Start the regressor near arm's length so the L1 term is well scaled.
      fc_init(zp + ".fc1", cfg_.joints, cfg_.depth_hidden, 0.6f);
      std::string hp = std::string("head.hand_") + side;
      fc_init(hp + ".fc0", cfg_.hand_hidden, bc[3]);
      fc_init(hp + ".fc1", 2, cfg_.hand_hidden);
    }
    const auto& dc = cfg_.depth_decoder_channels;
    in_c = bc[3];
    for (int s = 0; s < 4; ++s) {
      tconv_init("head.depth_decoder.t" + std::to_string(s), in_c, dc[s], 2);
      in_c = dc[s];
    }
  }

  ModelConfig cfg_;
  ParameterSet params_;
};

// Unnormalized Gaussian target heatmaps. Keypoints are given in input-image
// pixels and mapped onto the heatmap grid; joints far outside the image get
// an all-zero channel.
inline Tensor gaussian_heatmaps(const JointArray2& keypoints_px, int heatmap_size, int input_size, double sigma) {
  if (!(sigma > 0)) throw std::invalid_argument("gaussian_heatmaps: sigma must be positive");
  Tensor out({kJoints, heatmap_size, heatmap_size});
  double scale = static_cast<double>(heatmap_size) / static_cast<double>(input_size);
  double cutoff = 3.0 * sigma;
  for (int j = 0; j < kJoints; ++j) {
    double u = keypoints_px[j][0] * scale;
    double v = keypoints_px[j][1] * scale;
    if (u < -cutoff || u > heatmap_size - 1 + cutoff || v < -cutoff || v > heatmap_size - 1 + cutoff) continue;
    float* ch = out.data() + static_cast<int64_t>(j) * heatmap_size * heatmap_size;
    for (int y = 0; y < heatmap_size; ++y) {
      for (int x = 0; x < heatmap_size; ++x) {
        double d2 = (x - u) * (x - u) + (y - v) * (y - v);
        ch[y * heatmap_size + x] = static_cast<float>(std::exp(-d2 / (2.0 * sigma * sigma)));
      }
    }
  }
  return out;
}

// Assembles metric-space 3D poses from a forward snapshot. The regressed
// depth is interpreted as virtual when the model was trained with the
// virtual-camera transform, and metric otherwise.
inline FramePrediction predict_pose_3d(const ForwardOutputs& out, const CameraIntrinsics& cam,
                                       const VirtualCameraConfig& vc, bool use_virtual_depth, const ModelConfig& cfg) {
  FramePrediction pred;
  auto build = [&](const Tensor& hand, const Tensor& kps, const Tensor& depth, Side side) -> std::optional<HandPose3D> {
    if (!(hand[0] > cfg.presence_threshold)) return std::nullopt;
    HandPose2p5D p25;
    p25.side = side;
    p25.depth_space = DepthSpace::Metric;
    for (int j = 0; j < kJoints; ++j) {
      double z = static_cast<double>(depth[j]) * cfg.depth_scale;
      if (use_virtual_depth) z = from_virtual_depth(z, cam, vc);
      // An undertrained regressor can emit nonpositive depth; clamp so the
      // pose stays liftable and the error shows up in the metrics instead.
      z = std::max(z, 1.0);
      p25.joints[j] = {static_cast<double>(kps[static_cast<int64_t>(j) * 2 + 0]),
                       static_cast<double>(kps[static_cast<int64_t>(j) * 2 + 1]), z};
    }
    return lift_2p5d_to_3d(p25, cam);
  };
  pred.left = build(out.hand_left, out.keypoints_left, out.depth_left, Side::Left);
  pred.right = build(out.hand_right, out.keypoints_right, out.depth_right, Side::Right);
  return pred;
}

}  // namespace vhpose

#pragma once

// Closed-form pinhole camera math: the virtual-camera depth transform and
// its inverse, 2.5D <-> 3D conversion, and the depth-shift augmentation
// operators used by the test-time consistency loss.
//
// Conventions: lengths in millimetres, image coordinates in pixels with the
// origin at the top-left, +u right, +v down.

#include <array>
#include <cmath>
#include <stdexcept>

#include "vhpose/tensor.hpp"

namespace vhpose {

constexpr int kJoints = 21;
constexpr int kWristJoint = 0;  // root for root-aligned and relative-root metrics

struct CameraIntrinsics {
  double fx = 0.0;
  double fy = 0.0;
  double cx = 0.0;
  double cy = 0.0;
  int width = 0;
  int height = 0;

  bool valid() const {
    return fx > 0.0 && fy > 0.0 && width > 0 && height > 0 && cx >= 0.0 && cx <= static_cast<double>(width) &&
           cy >= 0.0 && cy <= static_cast<double>(height);
  }

  // Same physical camera expressed on a resized square pixel grid.
  CameraIntrinsics scaled_to(int new_size) const {
    double s = static_cast<double>(new_size) / static_cast<double>(height);
    CameraIntrinsics out;
    out.fx = fx * s;
    out.fy = fy * s;
    out.cx = cx * s;
    out.cy = cy * s;
    out.width = new_size;
    out.height = new_size;
    return out;
  }
};

struct VirtualCameraConfig {
  double focal = 512.0;   // virtual focal length, pixels
  double height = 720.0;  // virtual image height, pixels
  bool valid() const { return focal > 0.0 && height > 0.0; }
};

enum class Side { Left, Right };

enum class DepthSpace { Metric, Virtual };

// Depth-shift semantics for the consistency target. DepthScale moves the
// scene away from the camera (X, Y, S*Z), which matches what shrinking the
// image about the principal point does to the geometry. UniformScale scales
// the whole pose (S*X, S*Y, S*Z), which leaves the pinhole projection
// unchanged.
enum class AugmentMode { DepthScale, UniformScale };

using Vec3 = std::array<double, 3>;
using Vec2 = std::array<double, 2>;
using JointArray3 = std::array<Vec3, kJoints>;
using JointArray2 = std::array<Vec2, kJoints>;

struct HandPose3D {
  JointArray3 joints{};  // (X, Y, Z) mm in camera space
  Side side = Side::Left;
};

struct HandPose2p5D {
  JointArray3 joints{};  // (u px, v px, z)
  DepthSpace depth_space = DepthSpace::Metric;
  Side side = Side::Left;
};

namespace geomdetail {

inline void require(bool ok, const char* msg) {
  if (!ok) throw std::invalid_argument(msg);
}

}  // namespace geomdetail

// z_v = z * (f_v / f) * (H / H_v). The transform pairs the vertical focal
// length with the image height, so a consistent resize of the source camera
// leaves z_v unchanged.
inline double to_virtual_depth(double z, const CameraIntrinsics& cam, const VirtualCameraConfig& vc) {
  geomdetail::require(std::isfinite(z), "to_virtual_depth: non-finite depth");
  geomdetail::require(cam.valid(), "to_virtual_depth: invalid intrinsics");
  geomdetail::require(vc.valid(), "to_virtual_depth: invalid virtual camera");
  return z * (vc.focal / cam.fy) * (static_cast<double>(cam.height) / vc.height);
}

inline double from_virtual_depth(double zv, const CameraIntrinsics& cam, const VirtualCameraConfig& vc) {
  geomdetail::require(std::isfinite(zv), "from_virtual_depth: non-finite depth");
  geomdetail::require(cam.valid(), "from_virtual_depth: invalid intrinsics");
  geomdetail::require(vc.valid(), "from_virtual_depth: invalid virtual camera");
  return zv * (cam.fy / vc.focal) * (vc.height / static_cast<double>(cam.height));
}

// P = z * K^-1 [u v 1]^T per joint.
inline HandPose3D lift_2p5d_to_3d(const HandPose2p5D& pose, const CameraIntrinsics& cam) {
  geomdetail::require(cam.valid(), "lift_2p5d_to_3d: invalid intrinsics");
  if (pose.depth_space != DepthSpace::Metric) {
    throw std::invalid_argument("lift_2p5d_to_3d: depth must be metric, convert virtual depth first");
  }
  HandPose3D out;
  out.side = pose.side;
  for (int j = 0; j < kJoints; ++j) {
    double u = pose.joints[j][0], v = pose.joints[j][1], z = pose.joints[j][2];
    if (!(z > 0.0)) throw std::domain_error("lift_2p5d_to_3d: depth must be positive");
    out.joints[j] = {z * (u - cam.cx) / cam.fx, z * (v - cam.cy) / cam.fy, z};
  }
  return out;
}

inline Vec2 project_point(const Vec3& p, const CameraIntrinsics& cam) {
  if (!(p[2] > 0.0)) throw std::domain_error("project_3d_to_2d: point behind camera");
  return {cam.fx * p[0] / p[2] + cam.cx, cam.fy * p[1] / p[2] + cam.cy};
}

inline JointArray2 project_3d_to_2d(const HandPose3D& pose, const CameraIntrinsics& cam) {
  geomdetail::require(cam.valid(), "project_3d_to_2d: invalid intrinsics");
  JointArray2 out;
  for (int j = 0; j < kJoints; ++j) out[j] = project_point(pose.joints[j], cam);
  return out;
}

// Rescales image content by 1/S about the principal point, simulating a
// camera moved S times farther away. Exposed border regions are filled with
// the supplied background value. S = 1 returns the input bit-exactly.
inline Tensor depth_augment_image(const Tensor& image, double s, const CameraIntrinsics& cam, float fill) {
  if (!(s >= 1.0)) throw std::out_of_range("depth_augment_image: scale must be >= 1");
  geomdetail::require(image.rank() == 3, "depth_augment_image: expected C,H,W image");
  if (s == 1.0) return image;
  int C = image.extent(0), H = image.extent(1), W = image.extent(2);
  Tensor out({C, H, W});
  for (int y = 0; y < H; ++y) {
    double sy = cam.cy + (static_cast<double>(y) - cam.cy) * s;
    int y0 = static_cast<int>(std::floor(sy));
    double fy = sy - y0;
    bool y_in = sy >= 0.0 && sy <= static_cast<double>(H - 1);
    for (int x = 0; x < W; ++x) {
      double sx = cam.cx + (static_cast<double>(x) - cam.cx) * s;
      int x0 = static_cast<int>(std::floor(sx));
      double fx = sx - x0;
      if (!y_in || sx < 0.0 || sx > static_cast<double>(W - 1)) {
        for (int c = 0; c < C; ++c) out[(static_cast<int64_t>(c) * H + y) * W + x] = fill;
        continue;
      }
      int x1 = std::min(x0 + 1, W - 1);
      int y1 = std::min(y0 + 1, H - 1);
      double w00 = (1.0 - fx) * (1.0 - fy), w10 = fx * (1.0 - fy), w01 = (1.0 - fx) * fy, w11 = fx * fy;
      for (int c = 0; c < C; ++c) {
        const float* src = image.data() + static_cast<int64_t>(c) * H * W;
        double v = w00 * src[y0 * W + x0] + w10 * src[y0 * W + x1] + w01 * src[y1 * W + x0] + w11 * src[y1 * W + x1];
        out[(static_cast<int64_t>(c) * H + y) * W + x] = static_cast<float>(v);
      }
    }
  }
  return out;
}

inline HandPose3D depth_augment_pose(const HandPose3D& pose, double s, AugmentMode mode) {
  if (!(s >= 1.0)) throw std::out_of_range("depth_augment_pose: scale must be >= 1");
  HandPose3D out = pose;
  for (int j = 0; j < kJoints; ++j) {
    if (mode == AugmentMode::UniformScale) {
      out.joints[j][0] *= s;
      out.joints[j][1] *= s;
    }
    out.joints[j][2] *= s;
  }
  return out;
}

}  // namespace vhpose

#pragma once

// Procedural multi-domain hand data: a 21-joint kinematic hand sampled under
// per-domain camera intrinsics, a capsule renderer that produces images plus
// ground-truth depth maps, and a packed binary dataset format with per-sample
// checksums.

#include <zlib.h>

#include <array>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "vhpose/geometry.hpp"
#include "vhpose/rng.hpp"
#include "vhpose/tensor.hpp"

namespace vhpose {

struct FingerSpec {
  std::array<double, 4> bone_lengths;  // palm, proximal, middle, distal (mm)
  double spread;                       // base abduction angle, radians from straight ahead
};

struct HandSkeletonSpec {
  std::array<FingerSpec, 5> fingers;  // thumb, index, middle, ring, pinky
  double curl_max_mcp = 1.25;
  double curl_max_pip = 1.45;
  double curl_max_dip = 1.0;
  double spread_jitter = 0.20;
  double thumb_tilt = 0.55;  // out-of-plane rotation for the thumb chain
  std::array<double, 4> bone_radii = {13.0, 8.5, 7.0, 5.5};

  static HandSkeletonSpec defaults() {
    HandSkeletonSpec s;
    s.fingers = {FingerSpec{{38.0, 45.0, 35.0, 30.0}, 0.95}, FingerSpec{{88.0, 45.0, 28.0, 22.0}, 0.25},
                 FingerSpec{{92.0, 50.0, 30.0, 23.0}, 0.0}, FingerSpec{{90.0, 47.0, 29.0, 22.0}, -0.20},
                 FingerSpec{{83.0, 38.0, 24.0, 20.0}, -0.42}};
    return s;
  }
};

enum class ColorMode { Rgb, Mono };

struct DomainConfig {
  CameraIntrinsics intrinsics;  // at render resolution
  ColorMode color_mode = ColorMode::Rgb;
  double background_intensity = 0.25;
  double background_amplitude = 0.08;
  double background_freq = 0.35;
  double noise_sigma = 0.005;
  double blur_sigma = 0.0;
  double depth_min = 300.0;
  double depth_max = 900.0;
  double p_left = 0.25;
  double p_right = 0.25;
  double p_both = 0.5;

  void validate() const {
    if (!intrinsics.valid()) throw std::invalid_argument("domain: invalid intrinsics");
    if (!(depth_min > 0) || !(depth_max > depth_min)) throw std::invalid_argument("domain: bad depth range");
    if (std::fabs(p_left + p_right + p_both - 1.0) > 1e-9) {
      throw std::invalid_argument("domain: hand probabilities must sum to 1");
    }
  }

  static CameraIntrinsics native_camera(double focal, double native_height, int render_size) {
    CameraIntrinsics native{focal, focal, native_height / 2.0, native_height / 2.0, static_cast<int>(native_height),
                            static_cast<int>(native_height)};
    return native.scaled_to(render_size);
  }

  static DomainConfig source_default(int render_size) {
    DomainConfig d;
    d.intrinsics = native_camera(512.0, 720.0, render_size);
    return d;
  }

  // A different sensor: longer focal length, monochrome output, brighter and
  // busier background, more noise and slight blur.
  static DomainConfig target_default(int render_size) {
    DomainConfig d;
    d.intrinsics = native_camera(896.0, 720.0, render_size);
    d.color_mode = ColorMode::Mono;
    d.background_intensity = 0.45;
    d.background_amplitude = 0.12;
    d.background_freq = 0.8;
    d.noise_sigma = 0.03;
    d.blur_sigma = 0.7;
    d.depth_min = 450.0;
    d.depth_max = 1050.0;
    return d;
  }
};

struct Sample {
  Tensor image;      // 3 x S x S in [0,1]
  Tensor depth_map;  // S x S, mm, background at the far plane
  std::optional<HandPose3D> pose_left, pose_right;
  JointArray2 keypoints_left{}, keypoints_right{};
  bool present_left = false, present_right = false;
  CameraIntrinsics intrinsics;
};

constexpr double kBackgroundPlaneDepth = 3000.0;  // mm
constexpr double kFrameMargin = 0.2;              // joints stay inside this inner frame
constexpr uint32_t kDatasetVersion = 1;

// ---------------------------------------------------------------------------
// Pose sampling

namespace synthdetail {

inline std::array<std::array<double, 3>, 3> quat_to_matrix(double w, double x, double y, double z) {
  double n = std::sqrt(w * w + x * x + y * y + z * z);
  w /= n;
  x /= n;
  y /= n;
  z /= n;
  return {{{1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)},
           {2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)},
           {2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)}}};
}

inline Vec3 mat_mul(const std::array<std::array<double, 3>, 3>& m, const Vec3& v) {
  return {m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2], m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
          m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2]};
}

// Local-frame hand: wrist at the origin, fingers along +Y, palm normal +Z,
// curl bending toward -Z. Returns a right hand; the caller mirrors X for a
// left one.
inline JointArray3 hand_local(const HandSkeletonSpec& spec, Rng& rng) {
  JointArray3 joints{};
  joints[0] = {0, 0, 0};
  for (int f = 0; f < 5; ++f) {
    const FingerSpec& fs = spec.fingers[static_cast<size_t>(f)];
    double spread = fs.spread + rng.uniform(-spec.spread_jitter, spec.spread_jitter);
    double curls[4];
    curls[0] = 0.0;  // palm bone
    curls[1] = rng.uniform(0.0, spec.curl_max_mcp);
    curls[2] = rng.uniform(0.0, spec.curl_max_pip);
    curls[3] = rng.uniform(0.0, spec.curl_max_dip);
    double sa = std::sin(spread), ca = std::cos(spread);
    double tilt = (f == 0) ? spec.thumb_tilt : 0.0;
    double st = std::sin(tilt), ct = std::cos(tilt);
    Vec3 p = {0, 0, 0};
    double theta = 0.0;
    for (int k = 0; k < 4; ++k) {
      theta += curls[k];
      // direction after cumulative curl about the finger's abduction axis
      Vec3 d = {-sa * std::cos(theta), ca * std::cos(theta), -std::sin(theta)};
      // out-of-plane tilt (thumb only): rotate about the Y axis
      Vec3 dt = {ct * d[0] + st * d[2], d[1], -st * d[0] + ct * d[2]};
      double len = fs.bone_lengths[static_cast<size_t>(k)];
      p = {p[0] + len * dt[0], p[1] + len * dt[1], p[2] + len * dt[2]};
      joints[static_cast<size_t>(1 + 4 * f + k)] = p;
    }
  }
  return joints;
}

}  // namespace synthdetail

// Wrist placed uniformly in the visible frustum slab, random global
// orientation, random articulation within limits. Re-samples until every
// joint projects inside the margin frame (at most 100 tries).
inline HandPose3D sample_hand_pose(Rng& rng, const HandSkeletonSpec& spec, const DomainConfig& domain, Side side) {
  domain.validate();
  const CameraIntrinsics& cam = domain.intrinsics;
  double lo_u = kFrameMargin * cam.width, hi_u = (1.0 - kFrameMargin) * cam.width;
  double lo_v = kFrameMargin * cam.height, hi_v = (1.0 - kFrameMargin) * cam.height;
  for (int attempt = 0; attempt < 100; ++attempt) {
    double z = rng.uniform(domain.depth_min, domain.depth_max);
    double u = rng.uniform(lo_u, hi_u);
    double v = rng.uniform(lo_v, hi_v);
    Vec3 wrist = {z * (u - cam.cx) / cam.fx, z * (v - cam.cy) / cam.fy, z};
    auto rot = synthdetail::quat_to_matrix(rng.normal(0, 1), rng.normal(0, 1), rng.normal(0, 1), rng.normal(0, 1));
    JointArray3 local = synthdetail::hand_local(spec, rng);
    HandPose3D pose;
    pose.side = side;
    bool ok = true;
    for (int j = 0; j < kJoints; ++j) {
      Vec3 lj = local[static_cast<size_t>(j)];
      if (side == Side::Left) lj[0] = -lj[0];
      Vec3 r = synthdetail::mat_mul(rot, lj);
      Vec3 p = {wrist[0] + r[0], wrist[1] + r[1], wrist[2] + r[2]};
      pose.joints[static_cast<size_t>(j)] = p;
      if (!(p[2] > 0)) {
        ok = false;
        break;
      }
      Vec2 px = project_point(p, cam);
      if (px[0] < lo_u || px[0] > hi_u || px[1] < lo_v || px[1] > hi_v) {
        ok = false;
        break;
      }
    }
    if (ok) return pose;
  }
  throw std::runtime_error("sample_hand_pose: no in-frame pose found in 100 attempts");
}

// ---------------------------------------------------------------------------
// Rendering

namespace synthdetail {

struct BoneRef {
  int parent, child, level;
};

inline const std::array<BoneRef, 20>& bones() {
  static const std::array<BoneRef, 20> b = [] {
    std::array<BoneRef, 20> out{};
    int i = 0;
    for (int f = 0; f < 5; ++f) {
      out[static_cast<size_t>(i++)] = {0, 1 + 4 * f, 0};
      for (int k = 0; k < 3; ++k) out[static_cast<size_t>(i++)] = {1 + 4 * f + k, 2 + 4 * f + k, k + 1};
    }
    return out;
  }();
  return b;
}

inline void draw_hand(const HandPose3D& pose, const HandSkeletonSpec& spec, const DomainConfig& domain,
                      std::vector<double>& zbuf, std::vector<double>& rbuf, std::vector<double>& gbuf,
                      std::vector<double>& bbuf) {
  const CameraIntrinsics& cam = domain.intrinsics;
  int W = cam.width, H = cam.height;
  JointArray2 px = project_3d_to_2d(pose, cam);
  for (const BoneRef& bone : bones()) {
    const Vec3& a3 = pose.joints[static_cast<size_t>(bone.parent)];
    const Vec3& b3 = pose.joints[static_cast<size_t>(bone.child)];
    const Vec2& a = px[static_cast<size_t>(bone.parent)];
    const Vec2& b = px[static_cast<size_t>(bone.child)];
    double radius_mm = spec.bone_radii[static_cast<size_t>(bone.level)];
    double ra = radius_mm * cam.fx / a3[2];
    double rb = radius_mm * cam.fx / b3[2];
    double pad = std::max(ra, rb) + 1.5;
    int x0 = std::max(0, static_cast<int>(std::floor(std::min(a[0], b[0]) - pad)));
    int x1 = std::min(W - 1, static_cast<int>(std::ceil(std::max(a[0], b[0]) + pad)));
    int y0 = std::max(0, static_cast<int>(std::floor(std::min(a[1], b[1]) - pad)));
    int y1 = std::min(H - 1, static_cast<int>(std::ceil(std::max(a[1], b[1]) + pad)));
    double abx = b[0] - a[0], aby = b[1] - a[1];
    double len2 = abx * abx + aby * aby;
    // skin tone varies a little along the hand so the hand is not flat-shaded
    double tone = 1.0 + 0.05 * ((bone.child * 7919) % 11 - 5) / 5.0;
    for (int y = y0; y <= y1; ++y) {
      for (int x = x0; x <= x1; ++x) {
        double pxx = x - a[0], pyy = y - a[1];
        double t = len2 > 1e-12 ? (pxx * abx + pyy * aby) / len2 : 0.0;
        t = std::min(1.0, std::max(0.0, t));
        double dx = pxx - t * abx, dy = pyy - t * aby;
        double dist = std::sqrt(dx * dx + dy * dy);
        double r = ra + (rb - ra) * t;
        double alpha = std::min(1.0, std::max(0.0, 0.5 - (dist - r)));
        if (alpha <= 0.0) continue;
        double inv_z = (1.0 - t) / a3[2] + t / b3[2];
        double z = 1.0 / inv_z;
        size_t idx = static_cast<size_t>(y) * static_cast<size_t>(W) + static_cast<size_t>(x);
        if (z >= zbuf[idx]) continue;
        double shade = std::min(1.0, std::max(0.35, 1.15 - z / 3500.0)) * tone;
        double hr = 0.80 * shade, hg = 0.62 * shade, hb = 0.50 * shade;
        rbuf[idx] = rbuf[idx] * (1 - alpha) + hr * alpha;
        gbuf[idx] = gbuf[idx] * (1 - alpha) + hg * alpha;
        bbuf[idx] = bbuf[idx] * (1 - alpha) + hb * alpha;
        if (alpha >= 0.5) zbuf[idx] = z;
      }
    }
  }
}

inline void separable_blur(std::vector<double>& chan, int W, int H, double sigma) {
  int radius = static_cast<int>(std::ceil(2.0 * sigma));
  if (radius < 1) return;
  std::vector<double> kernel(static_cast<size_t>(2 * radius + 1));
  double ksum = 0;
  for (int i = -radius; i <= radius; ++i) {
    kernel[static_cast<size_t>(i + radius)] = std::exp(-0.5 * (i * i) / (sigma * sigma));
    ksum += kernel[static_cast<size_t>(i + radius)];
  }
  for (auto& k : kernel) k /= ksum;
  std::vector<double> tmp(chan.size());
  for (int y = 0; y < H; ++y) {
    for (int x = 0; x < W; ++x) {
      double acc = 0;
      for (int i = -radius; i <= radius; ++i) {
        int xx = std::min(W - 1, std::max(0, x + i));
        acc += kernel[static_cast<size_t>(i + radius)] * chan[static_cast<size_t>(y) * W + xx];
      }
      tmp[static_cast<size_t>(y) * W + x] = acc;
    }
  }
  for (int y = 0; y < H; ++y) {
    for (int x = 0; x < W; ++x) {
      double acc = 0;
      for (int i = -radius; i <= radius; ++i) {
        int yy = std::min(H - 1, std::max(0, y + i));
        acc += kernel[static_cast<size_t>(i + radius)] * tmp[static_cast<size_t>(yy) * W + x];
      }
      chan[static_cast<size_t>(y) * W + x] = acc;
    }
  }
}

}  // namespace synthdetail

inline Sample render_sample(const std::optional<HandPose3D>& left, const std::optional<HandPose3D>& right,
                            const DomainConfig& domain, Rng& rng,
                            const HandSkeletonSpec& spec = HandSkeletonSpec::defaults()) {
  domain.validate();
  const CameraIntrinsics& cam = domain.intrinsics;
  int W = cam.width, H = cam.height;
  size_t npx = static_cast<size_t>(W) * static_cast<size_t>(H);

  std::vector<double> zbuf(npx, kBackgroundPlaneDepth);
  std::vector<double> r(npx), g(npx), b(npx);
  double phase_u = rng.uniform(0, 6.2831853), phase_v = rng.uniform(0, 6.2831853);
  for (int y = 0; y < H; ++y) {
    for (int x = 0; x < W; ++x) {
      double tex = std::sin(x * domain.background_freq + phase_u) * std::sin(y * domain.background_freq * 1.3 + phase_v);
      double base = domain.background_intensity + domain.background_amplitude * tex;
      size_t i = static_cast<size_t>(y) * W + x;
      r[i] = base * 1.05;
      g[i] = base;
      b[i] = base * 0.92;
    }
  }

  // draw farther hand first so the nearer one wins the overlap
  std::vector<const HandPose3D*> order;
  if (left) order.push_back(&*left);
  if (right) order.push_back(&*right);
  if (order.size() == 2 && order[0]->joints[0][2] < order[1]->joints[0][2]) std::swap(order[0], order[1]);
  for (const HandPose3D* pose : order) synthdetail::draw_hand(*pose, spec, domain, zbuf, r, g, b);

  if (domain.blur_sigma > 0) {
    synthdetail::separable_blur(r, W, H, domain.blur_sigma);
    synthdetail::separable_blur(g, W, H, domain.blur_sigma);
    synthdetail::separable_blur(b, W, H, domain.blur_sigma);
  }
  if (domain.color_mode == ColorMode::Mono) {
    for (size_t i = 0; i < npx; ++i) {
      double gray = (r[i] + g[i] + b[i]) / 3.0;
      r[i] = g[i] = b[i] = gray;
    }
  }
  if (domain.noise_sigma > 0) {
    for (size_t i = 0; i < npx; ++i) {
      if (domain.color_mode == ColorMode::Mono) {
        double n = rng.normal(0, domain.noise_sigma);
        r[i] += n;
        g[i] += n;
        b[i] += n;
      } else {
        r[i] += rng.normal(0, domain.noise_sigma);
        g[i] += rng.normal(0, domain.noise_sigma);
        b[i] += rng.normal(0, domain.noise_sigma);
      }
    }
  }

  Sample s;
  s.intrinsics = cam;
  s.image = Tensor({3, H, W});
  s.depth_map = Tensor({H, W});
  for (size_t i = 0; i < npx; ++i) {
    s.image[static_cast<int64_t>(i)] = static_cast<float>(std::min(1.0, std::max(0.0, r[i])));
    s.image[static_cast<int64_t>(npx + i)] = static_cast<float>(std::min(1.0, std::max(0.0, g[i])));
    s.image[static_cast<int64_t>(2 * npx + i)] = static_cast<float>(std::min(1.0, std::max(0.0, b[i])));
    s.depth_map[static_cast<int64_t>(i)] = static_cast<float>(zbuf[i]);
  }
  if (left) {
    s.pose_left = left;
    s.present_left = true;
    s.keypoints_left = project_3d_to_2d(*left, cam);
  }
  if (right) {
    s.pose_right = right;
    s.present_right = true;
    s.keypoints_right = project_3d_to_2d(*right, cam);
  }
  return s;
}

// ---------------------------------------------------------------------------
// Dataset files: manifest.json plus samples.bin. Per sample the binary holds
// image floats, depth floats, 2 presence bytes, 2x21x3 pose floats (absent
// hand = quiet NaN), 2x21x2 keypoint floats, 6 intrinsics floats, then a
// CRC32 of the sample's bytes. All values little-endian float32.

struct DatasetManifest {
  uint32_t format_version = kDatasetVersion;
  int count = 0;
  int image_size = 0;
  uint64_t seed = 0;
  DomainConfig domain;
};

namespace synthdetail {

inline void put_f32(std::vector<unsigned char>& buf, float v) {
  uint32_t bits;
  std::memcpy(&bits, &v, 4);
  buf.push_back(static_cast<unsigned char>(bits));
  buf.push_back(static_cast<unsigned char>(bits >> 8));
  buf.push_back(static_cast<unsigned char>(bits >> 16));
  buf.push_back(static_cast<unsigned char>(bits >> 24));
}

inline float take_f32(const unsigned char* p) {
  uint32_t bits = static_cast<uint32_t>(p[0]) | (static_cast<uint32_t>(p[1]) << 8) |
                  (static_cast<uint32_t>(p[2]) << 16) | (static_cast<uint32_t>(p[3]) << 24);
  float v;
  std::memcpy(&v, &bits, 4);
  return v;
}

inline void encode_sample(const Sample& s, std::vector<unsigned char>& buf) {
  buf.clear();
  for (int64_t i = 0; i < s.image.numel(); ++i) put_f32(buf, s.image[i]);
  for (int64_t i = 0; i < s.depth_map.numel(); ++i) put_f32(buf, s.depth_map[i]);
  buf.push_back(s.present_left ? 1 : 0);
  buf.push_back(s.present_right ? 1 : 0);
  float qnan = std::numeric_limits<float>::quiet_NaN();
  for (int hand = 0; hand < 2; ++hand) {
    const std::optional<HandPose3D>& p = hand == 0 ? s.pose_left : s.pose_right;
    for (int j = 0; j < kJoints; ++j) {
      for (int k = 0; k < 3; ++k) {
        put_f32(buf, p ? static_cast<float>(p->joints[static_cast<size_t>(j)][static_cast<size_t>(k)]) : qnan);
      }
    }
  }
  for (int hand = 0; hand < 2; ++hand) {
    const JointArray2& kp = hand == 0 ? s.keypoints_left : s.keypoints_right;
    bool present = hand == 0 ? s.present_left : s.present_right;
    for (int j = 0; j < kJoints; ++j) {
      for (int k = 0; k < 2; ++k) {
        put_f32(buf, present ? static_cast<float>(kp[static_cast<size_t>(j)][static_cast<size_t>(k)]) : qnan);
      }
    }
  }
  put_f32(buf, static_cast<float>(s.intrinsics.fx));
  put_f32(buf, static_cast<float>(s.intrinsics.fy));
  put_f32(buf, static_cast<float>(s.intrinsics.cx));
  put_f32(buf, static_cast<float>(s.intrinsics.cy));
  put_f32(buf, static_cast<float>(s.intrinsics.width));
  put_f32(buf, static_cast<float>(s.intrinsics.height));
}

}  // namespace synthdetail

inline void to_json(nlohmann::json& j, const DomainConfig& d) {
  j = nlohmann::json{{"fx", d.intrinsics.fx},
                     {"fy", d.intrinsics.fy},
                     {"cx", d.intrinsics.cx},
                     {"cy", d.intrinsics.cy},
                     {"width", d.intrinsics.width},
                     {"height", d.intrinsics.height},
                     {"color_mode", d.color_mode == ColorMode::Mono ? "mono" : "rgb"},
                     {"background_intensity", d.background_intensity},
                     {"background_amplitude", d.background_amplitude},
                     {"background_freq", d.background_freq},
                     {"noise_sigma", d.noise_sigma},
                     {"blur_sigma", d.blur_sigma},
                     {"depth_min", d.depth_min},
                     {"depth_max", d.depth_max},
                     {"p_left", d.p_left},
                     {"p_right", d.p_right},
                     {"p_both", d.p_both}};
}

inline void domain_from_json(const nlohmann::json& j, DomainConfig& d) {
  d.intrinsics.fx = j.at("fx").get<double>();
  d.intrinsics.fy = j.at("fy").get<double>();
  d.intrinsics.cx = j.at("cx").get<double>();
  d.intrinsics.cy = j.at("cy").get<double>();
  d.intrinsics.width = j.at("width").get<int>();
  d.intrinsics.height = j.at("height").get<int>();
  d.color_mode = j.at("color_mode").get<std::string>() == "mono" ? ColorMode::Mono : ColorMode::Rgb;
  d.background_intensity = j.at("background_intensity").get<double>();
  d.background_amplitude = j.at("background_amplitude").get<double>();
  d.background_freq = j.at("background_freq").get<double>();
  d.noise_sigma = j.at("noise_sigma").get<double>();
  d.blur_sigma = j.at("blur_sigma").get<double>();
  d.depth_min = j.at("depth_min").get<double>();
  d.depth_max = j.at("depth_max").get<double>();
  d.p_left = j.at("p_left").get<double>();
  d.p_right = j.at("p_right").get<double>();
  d.p_both = j.at("p_both").get<double>();
}

inline void write_manifest(const DatasetManifest& m, const std::string& path) {
  nlohmann::json j;
  j["format_version"] = m.format_version;
  j["count"] = m.count;
  j["image_size"] = m.image_size;
  j["seed"] = m.seed;
  j["domain"] = m.domain;
  std::ofstream os(path);
  if (!os) throw std::runtime_error("dataset: cannot write manifest " + path);
  os << j.dump(2) << "\n";
}

inline void generate_dataset(int count, const DomainConfig& domain, uint64_t seed, const std::string& dir,
                             const HandSkeletonSpec& spec = HandSkeletonSpec::defaults()) {
  if (count <= 0) throw std::invalid_argument("generate_dataset: count must be positive");
  domain.validate();
  std::filesystem::create_directories(dir);
  std::string bin_path = dir + "/samples.bin";
  std::ofstream os(bin_path, std::ios::binary);
  if (!os) throw std::runtime_error("dataset: cannot open " + bin_path + " for writing");
  os.write("VHPT", 4);
  unsigned char ver[4] = {static_cast<unsigned char>(kDatasetVersion), static_cast<unsigned char>(kDatasetVersion >> 8),
                          static_cast<unsigned char>(kDatasetVersion >> 16),
                          static_cast<unsigned char>(kDatasetVersion >> 24)};
  os.write(reinterpret_cast<const char*>(ver), 4);
  std::vector<unsigned char> buf;
  for (int i = 0; i < count; ++i) {
    Rng rng(derive_seed(seed, static_cast<uint64_t>(i)));
    double pick = rng.uniform01();
    std::optional<HandPose3D> left, right;
    if (pick < domain.p_left) {
      left = sample_hand_pose(rng, spec, domain, Side::Left);
    } else if (pick < domain.p_left + domain.p_right) {
      right = sample_hand_pose(rng, spec, domain, Side::Right);
    } else {
      left = sample_hand_pose(rng, spec, domain, Side::Left);
      right = sample_hand_pose(rng, spec, domain, Side::Right);
    }
    Sample s = render_sample(left, right, domain, rng, spec);
    synthdetail::encode_sample(s, buf);
    uint32_t crc = static_cast<uint32_t>(crc32(0L, buf.data(), static_cast<uInt>(buf.size())));
    unsigned char cb[4] = {static_cast<unsigned char>(crc), static_cast<unsigned char>(crc >> 8),
                           static_cast<unsigned char>(crc >> 16), static_cast<unsigned char>(crc >> 24)};
    os.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
    os.write(reinterpret_cast<const char*>(cb), 4);
    if (!os) throw std::runtime_error("dataset: write failed for " + bin_path);
  }
  DatasetManifest m;
  m.count = count;
  m.image_size = domain.intrinsics.width;
  m.seed = seed;
  m.domain = domain;
  write_manifest(m, dir + "/manifest.json");
}

struct Dataset {
  DatasetManifest manifest;
  std::vector<Sample> samples;
};

inline Dataset load_dataset(const std::string& dir) {
  std::string man_path = dir + "/manifest.json";
  std::ifstream ms(man_path);
  if (!ms) throw std::runtime_error("dataset: missing manifest " + man_path);
  nlohmann::json j = nlohmann::json::parse(ms);
  Dataset ds;
  ds.manifest.format_version = j.at("format_version").get<uint32_t>();
  if (ds.manifest.format_version != kDatasetVersion) {
    throw std::runtime_error("dataset: unsupported format version in " + man_path);
  }
  ds.manifest.count = j.at("count").get<int>();
  ds.manifest.image_size = j.at("image_size").get<int>();
  ds.manifest.seed = j.at("seed").get<uint64_t>();
  domain_from_json(j.at("domain"), ds.manifest.domain);

  std::string bin_path = dir + "/samples.bin";
  std::ifstream is(bin_path, std::ios::binary);
  if (!is) throw std::runtime_error("dataset: missing " + bin_path);
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, "VHPT", 4) != 0) throw std::runtime_error("dataset: bad magic in " + bin_path);
  unsigned char ver[4];
  is.read(reinterpret_cast<char*>(ver), 4);
  uint32_t version = static_cast<uint32_t>(ver[0]) | (static_cast<uint32_t>(ver[1]) << 8) |
                     (static_cast<uint32_t>(ver[2]) << 16) | (static_cast<uint32_t>(ver[3]) << 24);
  if (!is || version != kDatasetVersion) throw std::runtime_error("dataset: version mismatch in " + bin_path);

  int S = ds.manifest.image_size;
  size_t record = static_cast<size_t>(3 * S * S + S * S) * 4 + 2 + static_cast<size_t>(2 * kJoints * 3) * 4 +
                  static_cast<size_t>(2 * kJoints * 2) * 4 + 6 * 4;
  std::vector<unsigned char> buf(record);
  ds.samples.reserve(static_cast<size_t>(ds.manifest.count));
  for (int i = 0; i < ds.manifest.count; ++i) {
    is.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(record));
    unsigned char cb[4];
    is.read(reinterpret_cast<char*>(cb), 4);
    if (!is) throw std::runtime_error("dataset: truncated sample " + std::to_string(i) + " in " + bin_path);
    uint32_t stored = static_cast<uint32_t>(cb[0]) | (static_cast<uint32_t>(cb[1]) << 8) |
                      (static_cast<uint32_t>(cb[2]) << 16) | (static_cast<uint32_t>(cb[3]) << 24);
    uint32_t actual = static_cast<uint32_t>(crc32(0L, buf.data(), static_cast<uInt>(buf.size())));
    if (stored != actual) {
      throw std::runtime_error("dataset: checksum failure at sample " + std::to_string(i) + " in " + bin_path);
    }
    const unsigned char* p = buf.data();
    Sample s;
    s.image = Tensor({3, S, S});
    for (int64_t k = 0; k < s.image.numel(); ++k, p += 4) s.image[k] = synthdetail::take_f32(p);
    s.depth_map = Tensor({S, S});
    for (int64_t k = 0; k < s.depth_map.numel(); ++k, p += 4) s.depth_map[k] = synthdetail::take_f32(p);
    s.present_left = *p++ != 0;
    s.present_right = *p++ != 0;
    for (int hand = 0; hand < 2; ++hand) {
      HandPose3D pose;
      pose.side = hand == 0 ? Side::Left : Side::Right;
      for (int jt = 0; jt < kJoints; ++jt) {
        for (int k = 0; k < 3; ++k, p += 4) {
          pose.joints[static_cast<size_t>(jt)][static_cast<size_t>(k)] = synthdetail::take_f32(p);
        }
      }
      bool present = hand == 0 ? s.present_left : s.present_right;
      if (present) (hand == 0 ? s.pose_left : s.pose_right) = pose;
    }
    for (int hand = 0; hand < 2; ++hand) {
      JointArray2& kp = hand == 0 ? s.keypoints_left : s.keypoints_right;
      for (int jt = 0; jt < kJoints; ++jt) {
        for (int k = 0; k < 2; ++k, p += 4) {
          kp[static_cast<size_t>(jt)][static_cast<size_t>(k)] = synthdetail::take_f32(p);
        }
      }
    }
    s.intrinsics.fx = synthdetail::take_f32(p);
    p += 4;
    s.intrinsics.fy = synthdetail::take_f32(p);
    p += 4;
    s.intrinsics.cx = synthdetail::take_f32(p);
    p += 4;
    s.intrinsics.cy = synthdetail::take_f32(p);
    p += 4;
    s.intrinsics.width = static_cast<int>(synthdetail::take_f32(p));
    p += 4;
    s.intrinsics.height = static_cast<int>(synthdetail::take_f32(p));
    p += 4;
    ds.samples.push_back(std::move(s));
  }
  return ds;
}

}  // namespace vhpose

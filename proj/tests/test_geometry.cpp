#include <catch2/catch_amalgamated.hpp>

#include "vhpose/geometry.hpp"
#include "vhpose/rng.hpp"

using namespace vhpose;

namespace {

CameraIntrinsics make_cam(double f, double height, double width = -1) {
  if (width < 0) width = height;
  return CameraIntrinsics{f, f, width / 2.0, height / 2.0, static_cast<int>(width), static_cast<int>(height)};
}

HandPose3D constant_pose(const Vec3& p) {
  HandPose3D pose;
  for (int j = 0; j < kJoints; ++j) pose.joints[static_cast<size_t>(j)] = p;
  return pose;
}

}  // namespace

TEST_CASE("virtual depth transform matches its definition") {
  VirtualCameraConfig vc;  // f_v = 512, H_v = 720
  CHECK(to_virtual_depth(1000.0, make_cam(512, 720), vc) == Catch::Approx(1000.0));
  CHECK(to_virtual_depth(800.0, make_cam(1024, 720), vc) == Catch::Approx(400.0));
  CHECK(to_virtual_depth(500.0, make_cam(512, 1440), vc) == Catch::Approx(1000.0));
}

TEST_CASE("virtual depth inverse") {
  VirtualCameraConfig vc;
  CHECK(from_virtual_depth(1000.0, make_cam(512, 720), vc) == Catch::Approx(1000.0));
  CHECK(from_virtual_depth(400.0, make_cam(1024, 720), vc) == Catch::Approx(800.0));
  CameraIntrinsics cam = make_cam(733.0, 640);
  double z = 333.3;
  CHECK(from_virtual_depth(to_virtual_depth(z, cam, vc), cam, vc) == Catch::Approx(z).epsilon(1e-12));
}

TEST_CASE("virtual depth round trip and resize invariance over random cameras") {
  VirtualCameraConfig vc;
  Rng rng(11);
  for (int i = 0; i < 10000; ++i) {
    double height = 2.0 * std::floor(rng.uniform(100, 1000));
    CameraIntrinsics cam = make_cam(rng.uniform(100, 2000), height);
    double z = rng.uniform(1.0, 5000.0);
    double zv = to_virtual_depth(z, cam, vc);
    double back = from_virtual_depth(zv, cam, vc);
    REQUIRE(std::fabs(back - z) / z <= 1e-9);
    // consistent resize of the source camera (f/2, H/2) leaves z_v unchanged
    CameraIntrinsics half = make_cam(cam.fy / 2.0, height / 2.0);
    double zv_half = to_virtual_depth(z, half, vc);
    REQUIRE(std::fabs(zv_half - zv) / zv <= 1e-9);
  }
}

TEST_CASE("non-finite depths are rejected") {
  VirtualCameraConfig vc;
  CameraIntrinsics cam = make_cam(512, 720);
  CHECK_THROWS_AS(to_virtual_depth(std::numeric_limits<double>::quiet_NaN(), cam, vc), std::invalid_argument);
  CHECK_THROWS_AS(from_virtual_depth(std::numeric_limits<double>::infinity(), cam, vc), std::invalid_argument);
}

TEST_CASE("lifting 2.5D to 3D applies the inverse pinhole model") {
  CameraIntrinsics cam{512, 512, 112, 112, 224, 224};
  HandPose2p5D p;
  p.depth_space = DepthSpace::Metric;
  for (int j = 0; j < kJoints; ++j) p.joints[static_cast<size_t>(j)] = {cam.cx, cam.cy, 1500.0};
  HandPose3D lifted = lift_2p5d_to_3d(p, cam);
  CHECK(lifted.joints[0][0] == Catch::Approx(0.0).margin(1e-12));
  CHECK(lifted.joints[0][1] == Catch::Approx(0.0).margin(1e-12));
  CHECK(lifted.joints[0][2] == Catch::Approx(1500.0));

  for (int j = 0; j < kJoints; ++j) p.joints[static_cast<size_t>(j)] = {100.0, 50.0, 2000.0};
  lifted = lift_2p5d_to_3d(p, cam);
  CHECK(lifted.joints[0][0] == Catch::Approx(-46.875));
  CHECK(lifted.joints[0][1] == Catch::Approx(-242.1875));
  CHECK(lifted.joints[0][2] == Catch::Approx(2000.0));
}

TEST_CASE("lift rejects virtual-tagged and nonpositive depth") {
  CameraIntrinsics cam{512, 512, 112, 112, 224, 224};
  HandPose2p5D p;
  p.depth_space = DepthSpace::Virtual;
  for (int j = 0; j < kJoints; ++j) p.joints[static_cast<size_t>(j)] = {10, 10, 100};
  CHECK_THROWS_AS(lift_2p5d_to_3d(p, cam), std::invalid_argument);
  p.depth_space = DepthSpace::Metric;
  p.joints[3][2] = -5.0;
  CHECK_THROWS_AS(lift_2p5d_to_3d(p, cam), std::domain_error);
}

TEST_CASE("projection basics") {
  CameraIntrinsics cam{512, 512, 112, 112, 224, 224};
  HandPose3D pose = constant_pose({0, 0, 777.0});
  JointArray2 px = project_3d_to_2d(pose, cam);
  CHECK(px[0][0] == Catch::Approx(112.0));
  CHECK(px[0][1] == Catch::Approx(112.0));

  pose = constant_pose({-46.875, -242.1875, 2000.0});
  px = project_3d_to_2d(pose, cam);
  CHECK(px[0][0] == Catch::Approx(100.0));
  CHECK(px[0][1] == Catch::Approx(50.0));

  pose.joints[5][2] = -1.0;
  CHECK_THROWS_AS(project_3d_to_2d(pose, cam), std::domain_error);
}

TEST_CASE("uniform 3D scaling leaves the projection unchanged") {
  CameraIntrinsics cam = make_cam(491.3, 640);
  Rng rng(5);
  for (int i = 0; i < 2000; ++i) {
    Vec3 p = {rng.uniform(-300, 300), rng.uniform(-300, 300), rng.uniform(200, 2500)};
    double s = rng.uniform(0.1, 10.0);
    Vec2 a = project_point(p, cam);
    Vec2 b = project_point({s * p[0], s * p[1], s * p[2]}, cam);
    REQUIRE(std::fabs(a[0] - b[0]) <= 1e-9);
    REQUIRE(std::fabs(a[1] - b[1]) <= 1e-9);
  }
}

TEST_CASE("lift then project is the identity on pixels") {
  Rng rng(29);
  VirtualCameraConfig vc;
  for (int i = 0; i < 10000; ++i) {
    CameraIntrinsics cam = make_cam(rng.uniform(200, 1500), std::floor(rng.uniform(100, 1500)));
    HandPose2p5D p;
    p.depth_space = DepthSpace::Metric;
    for (int j = 0; j < kJoints; ++j) {
      p.joints[static_cast<size_t>(j)] = {rng.uniform(0, cam.width), rng.uniform(0, cam.height),
                                          rng.uniform(50, 4000)};
    }
    JointArray2 px = project_3d_to_2d(lift_2p5d_to_3d(p, cam), cam);
    for (int j = 0; j < kJoints; ++j) {
      REQUIRE(std::fabs(px[static_cast<size_t>(j)][0] - p.joints[static_cast<size_t>(j)][0]) <= 1e-6);
      REQUIRE(std::fabs(px[static_cast<size_t>(j)][1] - p.joints[static_cast<size_t>(j)][1]) <= 1e-6);
    }
  }
}

TEST_CASE("depth augmentation of poses") {
  HandPose3D pose = constant_pose({10, 20, 500});
  HandPose3D same = depth_augment_pose(pose, 1.0, AugmentMode::DepthScale);
  CHECK(same.joints[0] == pose.joints[0]);
  same = depth_augment_pose(pose, 1.0, AugmentMode::UniformScale);
  CHECK(same.joints[0] == pose.joints[0]);

  HandPose3D d = depth_augment_pose(pose, 1.25, AugmentMode::DepthScale);
  CHECK(d.joints[0][0] == Catch::Approx(10.0));
  CHECK(d.joints[0][1] == Catch::Approx(20.0));
  CHECK(d.joints[0][2] == Catch::Approx(625.0));

  HandPose3D u = depth_augment_pose(pose, 1.25, AugmentMode::UniformScale);
  CHECK(u.joints[0][0] == Catch::Approx(12.5));
  CHECK(u.joints[0][1] == Catch::Approx(25.0));
  CHECK(u.joints[0][2] == Catch::Approx(625.0));

  CHECK_THROWS_AS(depth_augment_pose(pose, 0.9, AugmentMode::DepthScale), std::out_of_range);

  // scale-depth ambiguity: the uniformly scaled pose projects identically
  CameraIntrinsics cam = make_cam(512, 720);
  HandPose3D moved = constant_pose({-80, 40, 900});
  JointArray2 a = project_3d_to_2d(moved, cam);
  JointArray2 b = project_3d_to_2d(depth_augment_pose(moved, 1.21, AugmentMode::UniformScale), cam);
  for (int j = 0; j < kJoints; ++j) {
    CHECK(std::fabs(a[static_cast<size_t>(j)][0] - b[static_cast<size_t>(j)][0]) <= 1e-9);
    CHECK(std::fabs(a[static_cast<size_t>(j)][1] - b[static_cast<size_t>(j)][1]) <= 1e-9);
  }
}

TEST_CASE("depth augmentation of images") {
  CameraIntrinsics cam = make_cam(45.0, 64);
  SECTION("scale one is bit-identical") {
    Rng rng(3);
    Tensor img({3, 64, 64});
    for (int64_t i = 0; i < img.numel(); ++i) img[i] = static_cast<float>(rng.uniform01());
    Tensor out = depth_augment_image(img, 1.0, cam, 0.0f);
    for (int64_t i = 0; i < img.numel(); ++i) REQUIRE(out[i] == img[i]);
  }
  SECTION("scale below one is rejected") {
    Tensor img({1, 8, 8});
    CHECK_THROWS_AS(depth_augment_image(img, 0.99, cam, 0.0f), std::out_of_range);
  }
  SECTION("bright pixel moves toward the principal point") {
    Tensor img({1, 64, 64});
    int bx = static_cast<int>(cam.cx) + 10, by = static_cast<int>(cam.cy);
    img[by * 64 + bx] = 1.0f;
    Tensor out = depth_augment_image(img, 2.0, cam, 0.0f);
    int best = 0;
    for (int64_t i = 1; i < out.numel(); ++i) {
      if (out[i] > out[best]) best = static_cast<int>(i);
    }
    int best_x = best % 64, best_y = best / 64;
    CHECK(std::abs(best_x - (static_cast<int>(cam.cx) + 5)) <= 1);
    CHECK(std::abs(best_y - static_cast<int>(cam.cy)) <= 1);
  }
  SECTION("mean of non-background content is conserved within 5%") {
    const float fill = 0.125f;
    Tensor img = Tensor::full({1, 64, 64}, fill);
    // a soft blob away from the border
    for (int y = 20; y < 44; ++y) {
      for (int x = 20; x < 44; ++x) {
        double d2 = (x - 32.0) * (x - 32.0) + (y - 32.0) * (y - 32.0);
        img[y * 64 + x] = fill + 0.7f * static_cast<float>(std::exp(-d2 / 60.0));
      }
    }
    auto content_mean = [&](const Tensor& t) {
      double sum = 0;
      int count = 0;
      for (int64_t i = 0; i < t.numel(); ++i) {
        if (std::fabs(t[i] - fill) > 0.02) {
          sum += t[i];
          ++count;
        }
      }
      REQUIRE(count > 0);
      return sum / count;
    };
    Tensor out = depth_augment_image(img, 1.25, cam, fill);
    double before = content_mean(img), after = content_mean(out);
    CHECK(std::fabs(after - before) / before <= 0.05);
  }
}

#include <catch2/catch_amalgamated.hpp>
#include <cstring>
#include <filesystem>

#include "vhpose/autodiff.hpp"
#include "vhpose/rng.hpp"

using namespace vhpose;

namespace {

Tensor random_tensor(std::vector<int> shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(shape));
  for (int64_t i = 0; i < t.numel(); ++i) t[i] = static_cast<float>(rng.uniform(lo, hi));
  return t;
}

// Loss used by the finite-difference checks: a fixed random weighting of the
// output keeps every adjoint path exercised without cancellation.
double weighted_loss(Tape& t, Val out, uint64_t weight_seed, ParameterSet& ps) {
  Rng wr(weight_seed);
  const Tensor& ov = t.val(out);
  Tensor w(ov.shape());
  for (int64_t i = 0; i < w.numel(); ++i) w[i] = static_cast<float>(wr.uniform(0.5, 1.5));
  Val loss = sum(mul(out, constant(t, w)));
  double v = t.val(loss).item();
  backward(loss, ps);
  return v;
}

}  // namespace

TEST_CASE("conv2d forward basics") {
  Tape t;
  SECTION("all-ones 3x3 valid conv gives the element count") {
    Val x = constant(t, Tensor::full({1, 1, 3, 3}, 1.0f));
    Val w = constant(t, Tensor::full({1, 1, 3, 3}, 1.0f));
    Val y = conv2d(x, w, 1, 0);
    REQUIRE(t.val(y).shape() == std::vector<int>{1, 1, 1, 1});
    CHECK(t.val(y)[0] == Catch::Approx(9.0f));
  }
  SECTION("identity kernel with padding reproduces the input") {
    Rng rng(2);
    Tensor xin = random_tensor({1, 1, 5, 6}, rng);
    Tensor k({1, 1, 3, 3});
    k[4] = 1.0f;  // center tap
    Val y = conv2d(constant(t, xin), constant(t, k), 1, 1);
    const Tensor& yv = t.val(y);
    REQUIRE(yv.shape() == xin.shape());
    for (int64_t i = 0; i < xin.numel(); ++i) REQUIRE(yv[i] == Catch::Approx(xin[i]));
  }
  SECTION("channel mismatch is a shape error") {
    Val x = constant(t, Tensor({1, 2, 4, 4}));
    Val w = constant(t, Tensor({1, 3, 3, 3}));
    CHECK_THROWS_AS(conv2d(x, w, 1, 0), std::invalid_argument);
  }
}

TEST_CASE("conv_transpose2d forward basics") {
  Tape t;
  SECTION("stride-2 k2 single pixel expands to a 2x2 block") {
    Tensor x({1, 1, 1, 1});
    x[0] = 1.0f;
    Val y = conv_transpose2d(constant(t, x), constant(t, Tensor::full({1, 1, 2, 2}, 1.0f)), 2, 0);
    const Tensor& yv = t.val(y);
    REQUIRE(yv.shape() == std::vector<int>{1, 1, 2, 2});
    for (int64_t i = 0; i < 4; ++i) CHECK(yv[i] == Catch::Approx(1.0f));
  }
  SECTION("output extent follows (H-1)*s - 2p + k") {
    Val x = constant(t, Tensor({1, 2, 4, 4}));
    Val w = constant(t, random_tensor({2, 3, 4, 4}, *new Rng(1)));
    Val y = conv_transpose2d(x, w, 2, 1);
    CHECK(t.val(y).shape() == std::vector<int>{1, 3, 8, 8});
  }
}

TEST_CASE("conv_transpose2d is the exact adjoint of conv2d") {
  // <A x, y> == <x, A^T y> for the linear maps defined by a shared kernel.
  Rng rng(7);
  for (int stride : {1, 2}) {
    for (int pad : {0, 1}) {
      Tensor w = random_tensor({3, 2, 3, 3}, rng);
      Tensor x = random_tensor({1, 2, 6, 6}, rng);
      Tape t;
      Val ax = conv2d(constant(t, x), constant(t, w), stride, pad);
      const Tensor& axv = t.val(ax);
      Tensor y = random_tensor(axv.shape(), rng);
      Val aty = conv_transpose2d(constant(t, y), constant(t, w), stride, pad);
      const Tensor& atyv = t.val(aty);
      REQUIRE(atyv.shape() == x.shape());
      double lhs = 0, rhs = 0;
      for (int64_t i = 0; i < axv.numel(); ++i) lhs += static_cast<double>(axv[i]) * y[i];
      for (int64_t i = 0; i < x.numel(); ++i) rhs += static_cast<double>(atyv[i]) * x[i];
      REQUIRE(lhs == Catch::Approx(rhs).epsilon(1e-4));
    }
  }
}

TEST_CASE("transpose-then-conv equals the dense Gram operator on 4x4 inputs") {
  // Build the dense matrix of conv2d by probing unit vectors, then compare
  // conv2d(conv_transpose2d(x)) against A * (A^T x) computed densely.
  Rng rng(13);
  Tensor w = random_tensor({2, 1, 3, 3}, rng);
  const int in_h = 4, in_w = 4;
  const int stride = 1, pad = 0;
  // A maps 1x1x4x4 -> 1x2x2x2 (16 -> 8)
  int in_n = in_h * in_w;
  std::vector<std::vector<double>> A;
  for (int i = 0; i < in_n; ++i) {
    Tensor e({1, 1, in_h, in_w});
    e[i] = 1.0f;
    Tape t;
    const Tensor& out = t.val(conv2d(constant(t, e), constant(t, w), stride, pad));
    std::vector<double> col(static_cast<size_t>(out.numel()));
    for (int64_t k = 0; k < out.numel(); ++k) col[static_cast<size_t>(k)] = out[k];
    A.push_back(col);
  }
  int out_n = static_cast<int>(A[0].size());
  // x lives in the output space of A (2 channels of 2x2)
  Tensor x = random_tensor({1, 2, 2, 2}, rng);
  std::vector<double> atx(static_cast<size_t>(in_n), 0.0);
  for (int i = 0; i < in_n; ++i) {
    for (int k = 0; k < out_n; ++k) atx[static_cast<size_t>(i)] += A[static_cast<size_t>(i)][static_cast<size_t>(k)] * x[k];
  }
  std::vector<double> gram(static_cast<size_t>(out_n), 0.0);
  for (int k = 0; k < out_n; ++k) {
    for (int i = 0; i < in_n; ++i) gram[static_cast<size_t>(k)] += A[static_cast<size_t>(i)][static_cast<size_t>(k)] * atx[static_cast<size_t>(i)];
  }
  Tape t;
  Val composed = conv2d(conv_transpose2d(constant(t, x), constant(t, w), stride, pad), constant(t, w), stride, pad);
  const Tensor& cv = t.val(composed);
  REQUIRE(cv.numel() == out_n);
  for (int k = 0; k < out_n; ++k) REQUIRE(cv[k] == Catch::Approx(gram[static_cast<size_t>(k)]).epsilon(1e-4));
}

TEST_CASE("elementwise and reduction op values") {
  Tape t;
  Val x = constant(t, Tensor({4}, {-2.0f, 3.0f, 0.0f, -0.5f}));
  const Tensor& r = t.val(relu(x));
  CHECK(r[0] == 0.0f);
  CHECK(r[1] == 3.0f);
  CHECK(r[2] == 0.0f);
  CHECK(r[3] == 0.0f);

  // identity affine map
  Tensor eye({3, 3});
  eye[0] = eye[4] = eye[8] = 1.0f;
  Val in = constant(t, Tensor({3}, {1.5f, -2.5f, 0.25f}));
  const Tensor& out = t.val(linear(in, constant(t, eye), constant(t, Tensor({3}))));
  CHECK(out[0] == Catch::Approx(1.5f));
  CHECK(out[1] == Catch::Approx(-2.5f));
  CHECK(out[2] == Catch::Approx(0.25f));

  CHECK(t.val(sum(constant(t, Tensor({3}, {1, 2, 3})))).item() == Catch::Approx(6.0f));
  CHECK(t.val(mean(constant(t, Tensor({4}, {1, 2, 3, 6})))).item() == Catch::Approx(3.0f));
  CHECK(t.val(emin(constant(t, Tensor({2}, {1, 5})), constant(t, Tensor({2}, {3, 2}))))[1] == 2.0f);
  CHECK(t.val(emax(constant(t, Tensor({2}, {1, 5})), constant(t, Tensor({2}, {3, 2}))))[0] == 3.0f);
}

TEST_CASE("soft-argmax decodes peaks, uniformity, and symmetry") {
  SECTION("one-hot peak at low temperature") {
    Tensor hm({1, 12, 12});
    hm[7 * 12 + 5] = 1.0f;  // (x=5, y=7)
    Tape t;
    const Tensor& c = t.val(soft_argmax2d(constant(t, hm), 0.02f));
    CHECK(std::fabs(c[0] - 5.0f) <= 1e-3f);
    CHECK(std::fabs(c[1] - 7.0f) <= 1e-3f);
  }
  SECTION("uniform heatmap decodes to the center") {
    Tape t;
    const Tensor& c = t.val(soft_argmax2d(constant(t, Tensor::full({1, 9, 9}, 0.3f)), 1.0f));
    CHECK(c[0] == Catch::Approx(4.0f));
    CHECK(c[1] == Catch::Approx(4.0f));
  }
  SECTION("two equal peaks average") {
    Tensor hm({1, 9, 9});
    hm[2 * 9 + 2] = 5.0f;
    hm[6 * 9 + 6] = 5.0f;
    Tape t;
    const Tensor& c = t.val(soft_argmax2d(constant(t, hm), 1.0f));
    CHECK(c[0] == Catch::Approx(4.0f));
    CHECK(c[1] == Catch::Approx(4.0f));
  }
  SECTION("temperature must be positive") {
    Tape t;
    CHECK_THROWS_AS(soft_argmax2d(constant(t, Tensor({1, 4, 4})), 0.0f), std::invalid_argument);
  }
}

TEST_CASE("backward fundamentals") {
  SECTION("identity") {
    ParameterSet ps;
    ps.add("p", Tensor::scalar(4.0f));
    Tape t;
    Val out = param(t, ps, 0);
    backward(out, ps);
    CHECK(ps.at(0).grad[0] == 1.0f);
  }
  SECTION("sum of squares") {
    ParameterSet ps;
    ps.add("p", Tensor({3}, {1, 2, 3}));
    Tape t;
    Val p = param(t, ps, 0);
    backward(sum(mul(p, p)), ps);
    CHECK(ps.at(0).grad[0] == Catch::Approx(2.0f));
    CHECK(ps.at(0).grad[1] == Catch::Approx(4.0f));
    CHECK(ps.at(0).grad[2] == Catch::Approx(6.0f));
  }
  SECTION("fan-out adds exactly") {
    ParameterSet ps;
    ps.add("p", Tensor({3}, {0.3f, -1.2f, 2.0f}));
    Tape t1;
    Val p1 = param(t1, ps, 0);
    Val f1 = sum(mul(p1, p1));
    backward(f1, ps);
    Tensor single = ps.at(0).grad;
    ps.zero_grads();
    Tape t2;
    Val p2 = param(t2, ps, 0);
    Val f2 = sum(mul(p2, p2));
    backward(add(f2, f2), ps);
    for (int i = 0; i < 3; ++i) REQUIRE(ps.at(0).grad[i] == 2.0f * single[i]);
  }
  SECTION("repeated backward accumulates") {
    ParameterSet ps;
    ps.add("p", Tensor::scalar(1.0f));
    Tape t;
    Val out = param(t, ps, 0);
    backward(out, ps);
    backward(out, ps);
    CHECK(ps.at(0).grad[0] == 2.0f);
  }
  SECTION("non-trainable parameters receive no gradient") {
    ParameterSet ps;
    ps.add("frozen", Tensor::scalar(2.0f), false);
    ps.add("live", Tensor::scalar(3.0f), true);
    Tape t;
    Val f = param(t, ps, 0);
    Val l = param(t, ps, 1);
    backward(add(mul(f, l), l), ps);
    CHECK(ps.at(0).grad[0] == 0.0f);
    CHECK(ps.at(1).grad[0] == Catch::Approx(3.0f));
  }
  SECTION("non-scalar output is rejected") {
    ParameterSet ps;
    ps.add("p", Tensor({2}, {1, 2}));
    Tape t;
    Val p = param(t, ps, 0);
    CHECK_THROWS_AS(backward(p, ps), std::invalid_argument);
  }
  SECTION("detached output is rejected") {
    ParameterSet ps;
    Tape t;
    Val c = constant(t, Tensor::scalar(5.0f));
    CHECK_THROWS_AS(backward(sum(c), ps), std::invalid_argument);
  }
}

TEST_CASE("forward passes are deterministic") {
  Rng rng(31);
  Tensor x = random_tensor({1, 3, 8, 8}, rng);
  Tensor w = random_tensor({4, 3, 3, 3}, rng);
  auto run = [&]() {
    Tape t;
    Val y = sigmoid(conv2d(constant(t, x), constant(t, w), 2, 1));
    return t.val(y);
  };
  Tensor a = run(), b = run();
  for (int64_t i = 0; i < a.numel(); ++i) {
    uint32_t ba, bb;
    std::memcpy(&ba, &a[i], 4);
    std::memcpy(&bb, &b[i], 4);
    REQUIRE(ba == bb);
  }
}

TEST_CASE("finite differences agree with the adjoints for every op") {
  // 5 seeds, random small tensors, relative error <= 1e-3
  for (uint64_t seed : {101ULL, 102ULL, 103ULL, 104ULL, 105ULL}) {
    Rng rng(seed);
    Rng check_rng(seed + 7000);

    struct Case {
      const char* name;
      std::function<double(ParameterSet&)> f;
      ParameterSet ps;
    };
    std::vector<Case> cases;

    {
      Case c;
      c.name = "conv2d";
      c.ps.add("x", random_tensor({1, 2, 6, 6}, rng));
      c.ps.add("w", random_tensor({3, 2, 3, 3}, rng));
      c.f = [seed](ParameterSet& ps) {
        Tape t;
        Val y = conv2d(param(t, ps, 0), param(t, ps, 1), 2, 1);
        return weighted_loss(t, y, seed, ps);
      };
      cases.push_back(std::move(c));
    }
    {
      Case c;
      c.name = "conv_transpose2d";
      c.ps.add("x", random_tensor({1, 3, 4, 4}, rng));
      c.ps.add("w", random_tensor({3, 2, 2, 2}, rng));
      c.f = [seed](ParameterSet& ps) {
        Tape t;
        Val y = conv_transpose2d(param(t, ps, 0), param(t, ps, 1), 2, 0);
        return weighted_loss(t, y, seed, ps);
      };
      cases.push_back(std::move(c));
    }
    {
      Case c;
      c.name = "linear+bias";
      c.ps.add("x", random_tensor({6}, rng));
      c.ps.add("w", random_tensor({4, 6}, rng));
      c.ps.add("b", random_tensor({4}, rng));
      c.f = [seed](ParameterSet& ps) {
        Tape t;
        Val y = linear(param(t, ps, 0), param(t, ps, 1), param(t, ps, 2));
        return weighted_loss(t, y, seed, ps);
      };
      cases.push_back(std::move(c));
    }
    {
      Case c;
      c.name = "activations";
      c.ps.add("x", random_tensor({24}, rng, 0.2, 1.2));
      c.f = [seed](ParameterSet& ps) {
        Tape t;
        Val x = param(t, ps, 0);
        Val y = add(sigmoid(x), mul(relu(x), abs_elem(add_scalar(x, -0.7f))));
        y = add(y, log_elem(clamp_min(x, 0.3f)));
        return weighted_loss(t, y, seed, ps);
      };
      cases.push_back(std::move(c));
    }
    {
      Case c;
      c.name = "binary+reductions";
      c.ps.add("a", random_tensor({18}, rng, 0.5, 1.5));
      c.ps.add("b", random_tensor({18}, rng, 0.5, 1.5));
      c.f = [seed](ParameterSet& ps) {
        Tape t;
        Val a = param(t, ps, 0);
        Val b = param(t, ps, 1);
        Val y = add(ediv(a, b), add(emin(a, b), emax(mul_scalar(a, 0.5f), sub(b, a))));
        Val m = mean(mul(a, b));
        return weighted_loss(t, add(y, mul(a, m)), seed, ps);
      };
      cases.push_back(std::move(c));
    }
    {
      Case c;
      c.name = "pool+concat+pointwise+bias";
      c.ps.add("x", random_tensor({1, 2, 4, 4}, rng));
      c.ps.add("y", random_tensor({1, 3, 4, 4}, rng));
      c.ps.add("pw", random_tensor({2, 5, 1, 1}, rng));
      c.ps.add("bias", random_tensor({2}, rng));
      c.f = [seed](ParameterSet& ps) {
        Tape t;
        Val cat = concat_channels(param(t, ps, 0), param(t, ps, 1));
        Val y = add_channel_bias(pointwise_conv(cat, param(t, ps, 2)), param(t, ps, 3));
        return weighted_loss(t, global_avg_pool(y), seed, ps);
      };
      cases.push_back(std::move(c));
    }
    {
      Case c;
      c.name = "softmax+slice+interleave";
      c.ps.add("x", random_tensor({5}, rng));
      c.ps.add("m", random_tensor({4, 3}, rng));
      c.f = [seed](ParameterSet& ps) {
        Tape t;
        Val sm = softmax1d(param(t, ps, 0));
        Val m = param(t, ps, 1);
        Val tri = interleave3(slice_col(m, 0), slice_col(m, 2), slice_col(m, 1));
        return weighted_loss(t, add(sum(log_elem(clamp_min(sm, 1e-7f))), sum(tri)), seed, ps);
      };
      cases.push_back(std::move(c));
    }
    {
      Case c;
      c.name = "soft_argmax2d";
      c.ps.add("hm", random_tensor({3, 6, 6}, rng, 0.0, 2.0));
      c.f = [seed](ParameterSet& ps) {
        Tape t;
        Val y = soft_argmax2d(param(t, ps, 0), 0.8f);
        return weighted_loss(t, y, seed, ps);
      };
      cases.push_back(std::move(c));
    }

    for (auto& c : cases) {
      GradCheckResult r = grad_check(c.f, c.ps, 5e-3, 24, check_rng);
      INFO("op " << c.name << " seed " << seed << " rel err " << r.max_rel_error);
      REQUIRE(r.max_rel_error <= 1e-3);
    }
  }
}

TEST_CASE("grad_check is exact for linear maps and flags corrupted adjoints") {
  Rng rng(55);
  SECTION("linear function") {
    ParameterSet ps;
    ps.add("p", random_tensor({8}, rng));
    auto f = [](ParameterSet& ps2) {
      Tape t;
      Val y = sum(mul_scalar(param(t, ps2, 0), 3.25f));
      double v = t.val(y).item();
      backward(y, ps2);
      return v;
    };
    Rng cr(61);
    GradCheckResult r = grad_check(f, ps, 1e-3, 8, cr);
    CHECK(r.max_rel_error <= 1e-6);
  }
  SECTION("negative control: a corrupted gradient is detected") {
    ParameterSet ps;
    ps.add("p", random_tensor({8}, rng, 0.5, 1.5));
    auto f = [](ParameterSet& ps2) {
      Tape t;
      Val p = param(t, ps2, 0);
      Val y = sum(mul(p, p));
      double v = t.val(y).item();
      backward(y, ps2);
      // sabotage the recorded adjoint
      for (int64_t i = 0; i < ps2.at(0).grad.numel(); ++i) ps2.at(0).grad[i] *= 1.5f;
      return v;
    };
    Rng cr(62);
    GradCheckResult r = grad_check(f, ps, 5e-3, 8, cr);
    CHECK(r.max_rel_error > 1e-1);
  }
  SECTION("epsilon outside the float32 sweet spot is rejected") {
    ParameterSet ps;
    ps.add("p", Tensor::scalar(1.0f));
    auto f = [](ParameterSet&) { return 0.0; };
    Rng cr(63);
    CHECK_THROWS_AS(grad_check(f, ps, 1e-6, 1, cr), std::invalid_argument);
  }
}

TEST_CASE("checkpoints round trip bit-exactly") {
  Rng rng(77);
  ParameterSet ps;
  ps.add("backbone.stage0.weight", random_tensor({4, 3, 3, 3}, rng));
  ps.add("head.fc.bias", random_tensor({9}, rng));
  ps.add("scalar", Tensor::scalar(-0.125f));
  std::string path = (std::filesystem::temp_directory_path() / "vhpose_ckpt_test.bin").string();
  save_checkpoint(ps, path);
  ParameterSet loaded = load_checkpoint(path);
  REQUIRE(loaded.size() == ps.size());
  for (int i = 0; i < ps.size(); ++i) {
    REQUIRE(loaded.at(i).name == ps.at(i).name);
    REQUIRE(loaded.at(i).value.shape() == ps.at(i).value.shape());
    for (int64_t k = 0; k < ps.at(i).value.numel(); ++k) {
      uint32_t a, b;
      std::memcpy(&a, &ps.at(i).value[k], 4);
      std::memcpy(&b, &loaded.at(i).value[k], 4);
      REQUIRE(a == b);
    }
  }
  // corrupting the magic is rejected
  {
    std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(0);
    f.put('X');
  }
  CHECK_THROWS_AS(load_checkpoint(path), std::runtime_error);
  std::filesystem::remove(path);
}

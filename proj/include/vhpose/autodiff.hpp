#pragma once

// Reverse-mode automatic differentiation on dense float32 tensors.
// A Tape records each forward op together with a closure that scatters the
// node's adjoint into its parents; backward() replays closures in reverse
// creation order, which is a valid reverse topological order because every
// op's inputs precede it on the tape.

#include <array>
#include <cstring>
#include <fstream>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "vhpose/rng.hpp"
#include "vhpose/tensor.hpp"

namespace vhpose {

// ---------------------------------------------------------------------------
// Parameters

struct Parameter {
  std::string name;
  Tensor value;
  Tensor grad;  // accumulator, same shape as value
  bool trainable = true;
};

class ParameterSet {
 public:
  int add(const std::string& name, Tensor value, bool trainable = true) {
    if (index_.count(name)) throw std::invalid_argument("parameter name not unique: " + name);
    Parameter p;
    p.name = name;
    p.grad = Tensor(value.shape());
    p.value = std::move(value);
    p.trainable = trainable;
    params_.push_back(std::move(p));
    int id = static_cast<int>(params_.size()) - 1;
    index_[name] = id;
    return id;
  }

  int find(const std::string& name) const {
    auto it = index_.find(name);
    return it == index_.end() ? -1 : it->second;
  }

  Parameter& at(int i) { return params_[static_cast<size_t>(i)]; }
  const Parameter& at(int i) const { return params_[static_cast<size_t>(i)]; }
  Parameter& at(const std::string& name) {
    int i = find(name);
    if (i < 0) throw std::out_of_range("no parameter named " + name);
    return params_[static_cast<size_t>(i)];
  }

  int size() const { return static_cast<int>(params_.size()); }

  int64_t total_elements() const {
    int64_t n = 0;
    for (const auto& p : params_) n += p.value.numel();
    return n;
  }

  void zero_grads() {
    for (auto& p : params_) p.grad.fill(0.0f);
  }

  std::vector<std::string> names() const {
    std::vector<std::string> out;
    out.reserve(params_.size());
    for (const auto& p : params_) out.push_back(p.name);
    return out;
  }

 private:
  std::vector<Parameter> params_;
  std::unordered_map<std::string, int> index_;
};

// Flat per-worker gradient buffer aligned with a ParameterSet's layout.
// Lets a batch be differentiated in parallel with a deterministic,
// index-ordered final reduction.
class GradBuffer {
 public:
  GradBuffer() = default;
  explicit GradBuffer(const ParameterSet& ps) {
    offsets_.resize(static_cast<size_t>(ps.size()) + 1, 0);
    for (int i = 0; i < ps.size(); ++i) offsets_[static_cast<size_t>(i) + 1] = offsets_[static_cast<size_t>(i)] + ps.at(i).value.numel();
    data_.assign(static_cast<size_t>(offsets_.back()), 0.0f);
  }

  void clear() { std::fill(data_.begin(), data_.end(), 0.0f); }
  float* slot(int param_index) { return data_.data() + offsets_[static_cast<size_t>(param_index)]; }
  const float* slot(int param_index) const { return data_.data() + offsets_[static_cast<size_t>(param_index)]; }
  int64_t slot_size(int param_index) const { return offsets_[static_cast<size_t>(param_index) + 1] - offsets_[static_cast<size_t>(param_index)]; }
  int64_t size() const { return static_cast<int64_t>(data_.size()); }

  void add_from(const GradBuffer& o) {
    for (size_t i = 0; i < data_.size(); ++i) data_[i] += o.data_[i];
  }

  void scale(float s) {
    for (auto& v : data_) v *= s;
  }

 private:
  std::vector<float> data_;
  std::vector<int64_t> offsets_;
};

// ---------------------------------------------------------------------------
// Dense kernels. Inner loops are arranged so the vectorizable axis carries
// independent accumulators; reductions use a fixed 8-way partial-sum
// structure, keeping results bit-reproducible for a given platform.

namespace detail {

inline float dot(const float* a, const float* b, int n) {
  float acc[8] = {0, 0, 0, 0, 0, 0, 0, 0};
  int i = 0;
  for (; i + 8 <= n; i += 8) {
    for (int j = 0; j < 8; ++j) acc[j] += a[i + j] * b[i + j];
  }
  for (; i < n; ++i) acc[i & 7] += a[i] * b[i];
  return ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]));
}

inline void axpy(float* y, float a, const float* x, int n) {
  for (int i = 0; i < n; ++i) y[i] += a * x[i];
}

// y[n,o,oh,ow] += sum_{c,kh,kw} w[o,c,kh,kw] * x[n,c,oh*s+kh-p, ow*s+kw-p]
inline void conv_fwd_acc(const float* x, int N, int C, int H, int W, const float* w, int O, int K, int stride, int pad,
                         float* y, int Ho, int Wo) {
  for (int n = 0; n < N; ++n) {
    for (int o = 0; o < O; ++o) {
      float* ybase = y + (static_cast<int64_t>(n) * O + o) * Ho * Wo;
      for (int c = 0; c < C; ++c) {
        const float* xbase = x + (static_cast<int64_t>(n) * C + c) * H * W;
        const float* wbase = w + (static_cast<int64_t>(o) * C + c) * K * K;
        for (int kh = 0; kh < K; ++kh) {
          for (int kw = 0; kw < K; ++kw) {
            float wv = wbase[kh * K + kw];
            if (wv == 0.0f) continue;
            // valid output ranges so that ih,iw land inside the input
            int oh_lo = 0, oh_hi = Ho;
            while (oh_lo < Ho && oh_lo * stride + kh - pad < 0) ++oh_lo;
            while (oh_hi > oh_lo && (oh_hi - 1) * stride + kh - pad >= H) --oh_hi;
            int ow_lo = 0, ow_hi = Wo;
            while (ow_lo < Wo && ow_lo * stride + kw - pad < 0) ++ow_lo;
            while (ow_hi > ow_lo && (ow_hi - 1) * stride + kw - pad >= W) --ow_hi;
            for (int oh = oh_lo; oh < oh_hi; ++oh) {
              const float* xrow = xbase + (oh * stride + kh - pad) * W + (kw - pad);
              float* yrow = ybase + oh * Wo;
              if (stride == 1) {
                for (int ow = ow_lo; ow < ow_hi; ++ow) yrow[ow] += wv * xrow[ow];
              } else {
                for (int ow = ow_lo; ow < ow_hi; ++ow) yrow[ow] += wv * xrow[ow * stride];
              }
            }
          }
        }
      }
    }
  }
}

// dx[n,c,ih,iw] += sum_{o,kh,kw} w[o,c,kh,kw] * dy[n,o,oh,ow]; ih=oh*s+kh-p.
// Also serves as the transposed-convolution forward map.
inline void conv_scatter_acc(const float* dy, int N, int O, int Ho, int Wo, const float* w, int C, int K, int stride,
                             int pad, float* dx, int H, int W) {
  for (int n = 0; n < N; ++n) {
    for (int o = 0; o < O; ++o) {
      const float* dybase = dy + (static_cast<int64_t>(n) * O + o) * Ho * Wo;
      for (int c = 0; c < C; ++c) {
        float* dxbase = dx + (static_cast<int64_t>(n) * C + c) * H * W;
        const float* wbase = w + (static_cast<int64_t>(o) * C + c) * K * K;
        for (int kh = 0; kh < K; ++kh) {
          for (int kw = 0; kw < K; ++kw) {
            float wv = wbase[kh * K + kw];
            if (wv == 0.0f) continue;
            int oh_lo = 0, oh_hi = Ho;
            while (oh_lo < Ho && oh_lo * stride + kh - pad < 0) ++oh_lo;
            while (oh_hi > oh_lo && (oh_hi - 1) * stride + kh - pad >= H) --oh_hi;
            int ow_lo = 0, ow_hi = Wo;
            while (ow_lo < Wo && ow_lo * stride + kw - pad < 0) ++ow_lo;
            while (ow_hi > ow_lo && (ow_hi - 1) * stride + kw - pad >= W) --ow_hi;
            for (int oh = oh_lo; oh < oh_hi; ++oh) {
              float* dxrow = dxbase + (oh * stride + kh - pad) * W + (kw - pad);
              const float* dyrow = dybase + oh * Wo;
              if (stride == 1) {
                for (int ow = ow_lo; ow < ow_hi; ++ow) dxrow[ow] += wv * dyrow[ow];
              } else {
                for (int ow = ow_lo; ow < ow_hi; ++ow) dxrow[ow * stride] += wv * dyrow[ow];
              }
            }
          }
        }
      }
    }
  }
}

// dw[o,c,kh,kw] += sum_{n,oh,ow} x[n,c,oh*s+kh-p, ow*s+kw-p] * dy[n,o,oh,ow]
inline void conv_weight_grad_acc(const float* x, int N, int C, int H, int W, const float* dy, int O, int Ho, int Wo,
                                 int K, int stride, int pad, float* dw) {
  for (int n = 0; n < N; ++n) {
    for (int o = 0; o < O; ++o) {
      const float* dybase = dy + (static_cast<int64_t>(n) * O + o) * Ho * Wo;
      for (int c = 0; c < C; ++c) {
        const float* xbase = x + (static_cast<int64_t>(n) * C + c) * H * W;
        float* dwbase = dw + (static_cast<int64_t>(o) * C + c) * K * K;
        for (int kh = 0; kh < K; ++kh) {
          for (int kw = 0; kw < K; ++kw) {
            int oh_lo = 0, oh_hi = Ho;
            while (oh_lo < Ho && oh_lo * stride + kh - pad < 0) ++oh_lo;
            while (oh_hi > oh_lo && (oh_hi - 1) * stride + kh - pad >= H) --oh_hi;
            int ow_lo = 0, ow_hi = Wo;
            while (ow_lo < Wo && ow_lo * stride + kw - pad < 0) ++ow_lo;
            while (ow_hi > ow_lo && (ow_hi - 1) * stride + kw - pad >= W) --ow_hi;
            float acc = 0.0f;
            for (int oh = oh_lo; oh < oh_hi; ++oh) {
              const float* xrow = xbase + (oh * stride + kh - pad) * W + (kw - pad);
              const float* dyrow = dybase + oh * Wo;
              if (stride == 1) {
                acc += dot(xrow + ow_lo, dyrow + ow_lo, ow_hi - ow_lo);
              } else {
                float part = 0.0f;
                for (int ow = ow_lo; ow < ow_hi; ++ow) part += xrow[ow * stride] * dyrow[ow];
                acc += part;
              }
            }
            dwbase[kh * K + kw] += acc;
          }
        }
      }
    }
  }
}

inline int conv_out_extent(int in, int k, int stride, int pad) { return (in + 2 * pad - k) / stride + 1; }
inline int tconv_out_extent(int in, int k, int stride, int pad) { return (in - 1) * stride - 2 * pad + k; }

}  // namespace detail

// ---------------------------------------------------------------------------
// Tape

class Tape;

struct Val {
  Tape* tape = nullptr;
  int id = -1;
  bool valid() const { return tape != nullptr && id >= 0; }
};

class Tape {
 public:
  struct Node {
    Tensor owned;
    const Tensor* vptr = nullptr;
    Tensor grad;
    bool requires_grad = false;
    bool grad_live = false;
    int param_index = -1;
    std::function<void(Tape&)> backprop;
  };

  Val add(Tensor value, bool requires_grad) {
    Node n;
    n.owned = std::move(value);
    n.requires_grad = requires_grad;
    nodes_.push_back(std::move(n));
    nodes_.back().vptr = &nodes_.back().owned;
    return Val{this, static_cast<int>(nodes_.size()) - 1};
  }

  Val add_external(const Tensor* v, bool requires_grad, int param_index) {
    Node n;
    n.vptr = v;
    n.requires_grad = requires_grad;
    n.param_index = param_index;
    nodes_.push_back(std::move(n));
    Val out{this, static_cast<int>(nodes_.size()) - 1};
    if (param_index >= 0) param_nodes_.push_back(out.id);
    return out;
  }

  const Tensor& val(int id) const { return *nodes_[static_cast<size_t>(id)].vptr; }
  const Tensor& val(Val v) const { return val(v.id); }
  bool requires_grad(int id) const { return nodes_[static_cast<size_t>(id)].requires_grad; }

  // Adjoint storage for a node; allocated and zeroed on first touch per pass.
  Tensor& grad(int id) {
    Node& n = nodes_[static_cast<size_t>(id)];
    if (!n.requires_grad) throw std::logic_error("tape: gradient requested for non-grad node");
    if (!n.grad_live) {
      if (!n.grad.same_shape(*n.vptr)) {
        n.grad = Tensor(n.vptr->shape());
      } else {
        n.grad.fill(0.0f);
      }
      n.grad_live = true;
    }
    return n.grad;
  }

  bool grad_live(int id) const { return nodes_[static_cast<size_t>(id)].grad_live; }

  void set_backprop(int id, std::function<void(Tape&)> fn) { nodes_[static_cast<size_t>(id)].backprop = std::move(fn); }

  // Computes node adjoints for everything the output depends on.
  void backward(Val output) {
    if (output.tape != this) throw std::logic_error("tape: output belongs to another tape");
    const Node& out = nodes_[static_cast<size_t>(output.id)];
    if (out.vptr->numel() != 1) throw std::invalid_argument("backward: output is not a scalar");
    if (!out.requires_grad) throw std::invalid_argument("backward: output is detached from all trainable inputs");
    for (auto& n : nodes_) n.grad_live = false;
    grad(output.id)[0] = 1.0f;
    for (int id = output.id; id >= 0; --id) {
      Node& n = nodes_[static_cast<size_t>(id)];
      if (n.grad_live && n.backprop) n.backprop(*this);
    }
  }

  // Adds parameter-leaf adjoints into the ParameterSet accumulators.
  void collect_param_grads(ParameterSet& ps) {
    for (int id : param_nodes_) {
      Node& n = nodes_[static_cast<size_t>(id)];
      if (!n.grad_live || n.param_index < 0) continue;
      Parameter& p = ps.at(n.param_index);
      if (!p.trainable) continue;
      const Tensor& g = n.grad;
      for (int64_t i = 0; i < g.numel(); ++i) p.grad[i] += g[i];
    }
  }

  void collect_param_grads(GradBuffer& buf) {
    for (int id : param_nodes_) {
      Node& n = nodes_[static_cast<size_t>(id)];
      if (!n.grad_live || n.param_index < 0) continue;
      float* dst = buf.slot(n.param_index);
      const Tensor& g = n.grad;
      for (int64_t i = 0; i < g.numel(); ++i) dst[i] += g[i];
    }
  }

  size_t size() const { return nodes_.size(); }

 private:
  std::vector<Node> nodes_;
  std::vector<int> param_nodes_;
};

inline Val constant(Tape& t, Tensor v) { return t.add(std::move(v), false); }
inline Val leaf(Tape& t, Tensor v, bool requires_grad) { return t.add(std::move(v), requires_grad); }

inline Val param(Tape& t, ParameterSet& ps, int index) {
  const Parameter& p = ps.at(index);
  return t.add_external(&p.value, p.trainable, index);
}

inline Val param(Tape& t, ParameterSet& ps, const std::string& name) {
  int i = ps.find(name);
  if (i < 0) throw std::out_of_range("no parameter named " + name);
  return param(t, ps, i);
}

// ---------------------------------------------------------------------------
// Ops

namespace opdetail {

inline void require_same_tape(Val a, Val b) {
  if (a.tape != b.tape) throw std::logic_error("op: operands on different tapes");
}

inline void require_shape(bool ok, const std::string& what) {
  if (!ok) throw std::invalid_argument("shape error: " + what);
}

template <typename Fwd, typename Bwd>
Val unary_elementwise(Val x, Fwd f, Bwd dfdx_from_xy) {
  Tape& t = *x.tape;
  const Tensor& xv = t.val(x);
  Tensor out(xv.shape());
  for (int64_t i = 0; i < xv.numel(); ++i) out[i] = f(xv[i]);
  Val y = t.add(std::move(out), t.requires_grad(x.id));
  if (t.requires_grad(x.id)) {
    int xid = x.id, yid = y.id;
    t.set_backprop(y.id, [xid, yid, dfdx_from_xy](Tape& tp) {
      const Tensor& g = tp.grad(yid);
      const Tensor& xv2 = tp.val(xid);
      const Tensor& yv2 = tp.val(yid);
      Tensor& gx = tp.grad(xid);
      for (int64_t i = 0; i < g.numel(); ++i) gx[i] += g[i] * dfdx_from_xy(xv2[i], yv2[i]);
    });
  }
  return y;
}

}  // namespace opdetail

inline Val relu(Val x) {
  return opdetail::unary_elementwise(
      x, [](float v) { return v > 0.0f ? v : 0.0f; }, [](float xv, float) { return xv > 0.0f ? 1.0f : 0.0f; });
}

inline Val sigmoid(Val x) {
  return opdetail::unary_elementwise(
      x, [](float v) { return 1.0f / (1.0f + std::exp(-v)); }, [](float, float yv) { return yv * (1.0f - yv); });
}

// |x| with zero subgradient at 0, so an exactly-met target produces an
// exactly-zero gradient.
inline Val abs_elem(Val x) {
  return opdetail::unary_elementwise(
      x, [](float v) { return std::fabs(v); },
      [](float xv, float) { return xv > 0.0f ? 1.0f : (xv < 0.0f ? -1.0f : 0.0f); });
}

inline Val log_elem(Val x) {
  return opdetail::unary_elementwise(
      x, [](float v) { return std::log(v); }, [](float xv, float) { return 1.0f / xv; });
}

inline Val clamp_min(Val x, float lo) {
  return opdetail::unary_elementwise(
      x, [lo](float v) { return v < lo ? lo : v; }, [lo](float xv, float) { return xv < lo ? 0.0f : 1.0f; });
}

inline Val add_scalar(Val x, float s) {
  return opdetail::unary_elementwise(
      x, [s](float v) { return v + s; }, [](float, float) { return 1.0f; });
}

inline Val mul_scalar(Val x, float s) {
  return opdetail::unary_elementwise(
      x, [s](float v) { return v * s; }, [s](float, float) { return s; });
}

inline Val neg(Val x) { return mul_scalar(x, -1.0f); }

namespace opdetail {

template <typename Fwd, typename BwdA, typename BwdB>
Val binary_elementwise(Val a, Val b, const char* name, Fwd f, BwdA dfda, BwdB dfdb) {
  require_same_tape(a, b);
  Tape& t = *a.tape;
  const Tensor& av = t.val(a);
  const Tensor& bv = t.val(b);
  require_shape(av.same_shape(bv), std::string(name) + " operands " + Tensor::shape_str(av.shape()) + " vs " +
                                       Tensor::shape_str(bv.shape()));
  Tensor out(av.shape());
  for (int64_t i = 0; i < av.numel(); ++i) out[i] = f(av[i], bv[i]);
  bool rg = t.requires_grad(a.id) || t.requires_grad(b.id);
  Val y = t.add(std::move(out), rg);
  if (rg) {
    int aid = a.id, bid = b.id, yid = y.id;
    t.set_backprop(y.id, [aid, bid, yid, dfda, dfdb](Tape& tp) {
      const Tensor& g = tp.grad(yid);
      const Tensor& av2 = tp.val(aid);
      const Tensor& bv2 = tp.val(bid);
      if (tp.requires_grad(aid)) {
        Tensor& ga = tp.grad(aid);
        for (int64_t i = 0; i < g.numel(); ++i) ga[i] += g[i] * dfda(av2[i], bv2[i]);
      }
      if (tp.requires_grad(bid)) {
        Tensor& gb = tp.grad(bid);
        for (int64_t i = 0; i < g.numel(); ++i) gb[i] += g[i] * dfdb(av2[i], bv2[i]);
      }
    });
  }
  return y;
}

}  // namespace opdetail

inline Val add(Val a, Val b) {
  return opdetail::binary_elementwise(
      a, b, "add", [](float x, float y) { return x + y; }, [](float, float) { return 1.0f; },
      [](float, float) { return 1.0f; });
}

inline Val sub(Val a, Val b) {
  return opdetail::binary_elementwise(
      a, b, "sub", [](float x, float y) { return x - y; }, [](float, float) { return 1.0f; },
      [](float, float) { return -1.0f; });
}

inline Val mul(Val a, Val b) {
  return opdetail::binary_elementwise(
      a, b, "mul", [](float x, float y) { return x * y; }, [](float, float y) { return y; },
      [](float x, float) { return x; });
}

inline Val ediv(Val a, Val b) {
  return opdetail::binary_elementwise(
      a, b, "div", [](float x, float y) { return x / y; }, [](float, float y) { return 1.0f / y; },
      [](float x, float y) { return -x / (y * y); });
}

// Ties route gradient to both sides, which makes the IoU loss gradient
// vanish exactly when prediction equals target.
inline Val emin(Val a, Val b) {
  return opdetail::binary_elementwise(
      a, b, "min", [](float x, float y) { return x < y ? x : y; }, [](float x, float y) { return x <= y ? 1.0f : 0.0f; },
      [](float x, float y) { return y <= x ? 1.0f : 0.0f; });
}

inline Val emax(Val a, Val b) {
  return opdetail::binary_elementwise(
      a, b, "max", [](float x, float y) { return x > y ? x : y; }, [](float x, float y) { return x >= y ? 1.0f : 0.0f; },
      [](float x, float y) { return y >= x ? 1.0f : 0.0f; });
}

inline Val sum(Val x) {
  Tape& t = *x.tape;
  const Tensor& xv = t.val(x);
  float acc[8] = {0, 0, 0, 0, 0, 0, 0, 0};
  for (int64_t i = 0; i < xv.numel(); ++i) acc[i & 7] += xv[i];
  float s = ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]));
  Val y = t.add(Tensor::scalar(s), t.requires_grad(x.id));
  if (t.requires_grad(x.id)) {
    int xid = x.id, yid = y.id;
    t.set_backprop(y.id, [xid, yid](Tape& tp) {
      float g = tp.grad(yid)[0];
      Tensor& gx = tp.grad(xid);
      for (int64_t i = 0; i < gx.numel(); ++i) gx[i] += g;
    });
  }
  return y;
}

inline Val mean(Val x) {
  const Tensor& xv = x.tape->val(x);
  return mul_scalar(sum(x), 1.0f / static_cast<float>(xv.numel()));
}

// x: N,C,H,W; b: C
inline Val add_channel_bias(Val x, Val b) {
  opdetail::require_same_tape(x, b);
  Tape& t = *x.tape;
  const Tensor& xv = t.val(x);
  const Tensor& bv = t.val(b);
  opdetail::require_shape(xv.rank() == 4 && bv.rank() == 1 && bv.extent(0) == xv.extent(1),
                          "add_channel_bias expects NCHW input and C bias");
  int N = xv.extent(0), C = xv.extent(1), HW = xv.extent(2) * xv.extent(3);
  Tensor out(xv.shape());
  for (int n = 0; n < N; ++n) {
    for (int c = 0; c < C; ++c) {
      const float* src = xv.data() + (static_cast<int64_t>(n) * C + c) * HW;
      float* dst = out.data() + (static_cast<int64_t>(n) * C + c) * HW;
      float bc = bv[c];
      for (int i = 0; i < HW; ++i) dst[i] = src[i] + bc;
    }
  }
  bool rg = t.requires_grad(x.id) || t.requires_grad(b.id);
  Val y = t.add(std::move(out), rg);
  if (rg) {
    int xid = x.id, bid = b.id, yid = y.id;
    t.set_backprop(y.id, [xid, bid, yid, N, C, HW](Tape& tp) {
      const Tensor& g = tp.grad(yid);
      if (tp.requires_grad(xid)) {
        Tensor& gx = tp.grad(xid);
        for (int64_t i = 0; i < g.numel(); ++i) gx[i] += g[i];
      }
      if (tp.requires_grad(bid)) {
        Tensor& gb = tp.grad(bid);
        for (int n = 0; n < N; ++n) {
          for (int c = 0; c < C; ++c) {
            const float* grow = g.data() + (static_cast<int64_t>(n) * C + c) * HW;
            float acc = 0.0f;
            for (int i = 0; i < HW; ++i) acc += grow[i];
            gb[c] += acc;
          }
        }
      }
    });
  }
  return y;
}

// x: [in]; w: [out,in]; b: [out]
inline Val linear(Val x, Val w, Val b) {
  opdetail::require_same_tape(x, w);
  opdetail::require_same_tape(x, b);
  Tape& t = *x.tape;
  const Tensor& xv = t.val(x);
  const Tensor& wv = t.val(w);
  const Tensor& bv = t.val(b);
  opdetail::require_shape(xv.rank() == 1 && wv.rank() == 2 && bv.rank() == 1 && wv.extent(1) == xv.extent(0) &&
                              wv.extent(0) == bv.extent(0),
                          "linear expects x[in], w[out,in], b[out]");
  int in = xv.extent(0), outn = wv.extent(0);
  Tensor out({outn});
  for (int o = 0; o < outn; ++o) out[o] = bv[o] + detail::dot(wv.data() + static_cast<int64_t>(o) * in, xv.data(), in);
  bool rg = t.requires_grad(x.id) || t.requires_grad(w.id) || t.requires_grad(b.id);
  Val y = t.add(std::move(out), rg);
  if (rg) {
    int xid = x.id, wid = w.id, bid = b.id, yid = y.id;
    t.set_backprop(y.id, [xid, wid, bid, yid, in, outn](Tape& tp) {
      const Tensor& g = tp.grad(yid);
      const Tensor& xv2 = tp.val(xid);
      const Tensor& wv2 = tp.val(wid);
      if (tp.requires_grad(xid)) {
        Tensor& gx = tp.grad(xid);
        for (int o = 0; o < outn; ++o) detail::axpy(gx.data(), g[o], wv2.data() + static_cast<int64_t>(o) * in, in);
      }
      if (tp.requires_grad(wid)) {
        Tensor& gw = tp.grad(wid);
        for (int o = 0; o < outn; ++o) detail::axpy(gw.data() + static_cast<int64_t>(o) * in, g[o], xv2.data(), in);
      }
      if (tp.requires_grad(bid)) {
        Tensor& gb = tp.grad(bid);
        for (int o = 0; o < outn; ++o) gb[o] += g[o];
      }
    });
  }
  return y;
}

// x: N,C,H,W; w: O,C,k,k (cross-correlation)
inline Val conv2d(Val x, Val w, int stride, int padding) {
  opdetail::require_same_tape(x, w);
  if (stride < 1) throw std::invalid_argument("conv2d: stride must be >= 1");
  Tape& t = *x.tape;
  const Tensor& xv = t.val(x);
  const Tensor& wv = t.val(w);
  opdetail::require_shape(xv.rank() == 4 && wv.rank() == 4, "conv2d expects 4-D input and kernel");
  opdetail::require_shape(wv.extent(2) == wv.extent(3), "conv2d expects square kernel");
  opdetail::require_shape(xv.extent(1) == wv.extent(1),
                          "conv2d channels: input " + Tensor::shape_str(xv.shape()) + " kernel " + Tensor::shape_str(wv.shape()));
  int N = xv.extent(0), C = xv.extent(1), H = xv.extent(2), W = xv.extent(3);
  int O = wv.extent(0), K = wv.extent(2);
  int Ho = detail::conv_out_extent(H, K, stride, padding);
  int Wo = detail::conv_out_extent(W, K, stride, padding);
  opdetail::require_shape(Ho > 0 && Wo > 0, "conv2d output would be empty");
  Tensor out({N, O, Ho, Wo});
  detail::conv_fwd_acc(xv.data(), N, C, H, W, wv.data(), O, K, stride, padding, out.data(), Ho, Wo);
  bool rg = t.requires_grad(x.id) || t.requires_grad(w.id);
  Val y = t.add(std::move(out), rg);
  if (rg) {
    int xid = x.id, wid = w.id, yid = y.id;
    t.set_backprop(y.id, [xid, wid, yid, N, C, H, W, O, K, stride, padding, Ho, Wo](Tape& tp) {
      const Tensor& g = tp.grad(yid);
      if (tp.requires_grad(xid)) {
        Tensor& gx = tp.grad(xid);
        detail::conv_scatter_acc(g.data(), N, O, Ho, Wo, tp.val(wid).data(), C, K, stride, padding, gx.data(), H, W);
      }
      if (tp.requires_grad(wid)) {
        Tensor& gw = tp.grad(wid);
        detail::conv_weight_grad_acc(tp.val(xid).data(), N, C, H, W, g.data(), O, Ho, Wo, K, stride, padding, gw.data());
      }
    });
  }
  return y;
}

// Adjoint of conv2d's forward map: x has O channels, output has C channels,
// with the same O,C,k,k kernel layout.
inline Val conv_transpose2d(Val x, Val w, int stride, int padding) {
  opdetail::require_same_tape(x, w);
  if (stride < 1) throw std::invalid_argument("conv_transpose2d: stride must be >= 1");
  Tape& t = *x.tape;
  const Tensor& xv = t.val(x);
  const Tensor& wv = t.val(w);
  opdetail::require_shape(xv.rank() == 4 && wv.rank() == 4, "conv_transpose2d expects 4-D input and kernel");
  opdetail::require_shape(wv.extent(2) == wv.extent(3), "conv_transpose2d expects square kernel");
  opdetail::require_shape(xv.extent(1) == wv.extent(0),
                          "conv_transpose2d channels: input " + Tensor::shape_str(xv.shape()) + " kernel " +
                              Tensor::shape_str(wv.shape()));
  int N = xv.extent(0), O = xv.extent(1), Hi = xv.extent(2), Wi = xv.extent(3);
  int C = wv.extent(1), K = wv.extent(2);
  int Ho = detail::tconv_out_extent(Hi, K, stride, padding);
  int Wo = detail::tconv_out_extent(Wi, K, stride, padding);
  opdetail::require_shape(Ho > 0 && Wo > 0, "conv_transpose2d output would be empty");
  Tensor out({N, C, Ho, Wo});
  detail::conv_scatter_acc(xv.data(), N, O, Hi, Wi, wv.data(), C, K, stride, padding, out.data(), Ho, Wo);
  bool rg = t.requires_grad(x.id) || t.requires_grad(w.id);
  Val y = t.add(std::move(out), rg);
  if (rg) {
    int xid = x.id, wid = w.id, yid = y.id;
    t.set_backprop(y.id, [xid, wid, yid, N, O, Hi, Wi, C, K, stride, padding, Ho, Wo](Tape& tp) {
      const Tensor& g = tp.grad(yid);
      if (tp.requires_grad(xid)) {
        Tensor& gx = tp.grad(xid);
        detail::conv_fwd_acc(g.data(), N, C, Ho, Wo, tp.val(wid).data(), O, K, stride, padding, gx.data(), Hi, Wi);
      }
      if (tp.requires_grad(wid)) {
        Tensor& gw = tp.grad(wid);
        detail::conv_weight_grad_acc(g.data(), N, C, Ho, Wo, tp.val(xid).data(), O, Hi, Wi, K, stride, padding,
                                     gw.data());
      }
    });
  }
  return y;
}

inline Val pointwise_conv(Val x, Val w) {
  const Tensor& wv = x.tape->val(w);
  opdetail::require_shape(wv.rank() == 4 && wv.extent(2) == 1 && wv.extent(3) == 1, "pointwise_conv expects 1x1 kernel");
  return conv2d(x, w, 1, 0);
}

// N,C,H,W -> N,C
inline Val global_avg_pool(Val x) {
  Tape& t = *x.tape;
  const Tensor& xv = t.val(x);
  opdetail::require_shape(xv.rank() == 4, "global_avg_pool expects NCHW");
  int N = xv.extent(0), C = xv.extent(1), HW = xv.extent(2) * xv.extent(3);
  Tensor out({N, C});
  for (int n = 0; n < N; ++n) {
    for (int c = 0; c < C; ++c) {
      const float* src = xv.data() + (static_cast<int64_t>(n) * C + c) * HW;
      float acc = 0.0f;
      for (int i = 0; i < HW; ++i) acc += src[i];
      out[static_cast<int64_t>(n) * C + c] = acc / static_cast<float>(HW);
    }
  }
  Val y = t.add(std::move(out), t.requires_grad(x.id));
  if (t.requires_grad(x.id)) {
    int xid = x.id, yid = y.id;
    t.set_backprop(y.id, [xid, yid, N, C, HW](Tape& tp) {
      const Tensor& g = tp.grad(yid);
      Tensor& gx = tp.grad(xid);
      float inv = 1.0f / static_cast<float>(HW);
      for (int n = 0; n < N; ++n) {
        for (int c = 0; c < C; ++c) {
          float gv = g[static_cast<int64_t>(n) * C + c] * inv;
          float* dst = gx.data() + (static_cast<int64_t>(n) * C + c) * HW;
          for (int i = 0; i < HW; ++i) dst[i] += gv;
        }
      }
    });
  }
  return y;
}

inline Val concat_channels(Val a, Val b) {
  opdetail::require_same_tape(a, b);
  Tape& t = *a.tape;
  const Tensor& av = t.val(a);
  const Tensor& bv = t.val(b);
  opdetail::require_shape(av.rank() == 4 && bv.rank() == 4 && av.extent(0) == bv.extent(0) &&
                              av.extent(2) == bv.extent(2) && av.extent(3) == bv.extent(3),
                          "concat_channels expects matching N,H,W");
  int N = av.extent(0), Ca = av.extent(1), Cb = bv.extent(1), HW = av.extent(2) * av.extent(3);
  Tensor out({N, Ca + Cb, av.extent(2), av.extent(3)});
  for (int n = 0; n < N; ++n) {
    std::memcpy(out.data() + static_cast<int64_t>(n) * (Ca + Cb) * HW, av.data() + static_cast<int64_t>(n) * Ca * HW,
                sizeof(float) * static_cast<size_t>(Ca) * HW);
    std::memcpy(out.data() + (static_cast<int64_t>(n) * (Ca + Cb) + Ca) * HW,
                bv.data() + static_cast<int64_t>(n) * Cb * HW, sizeof(float) * static_cast<size_t>(Cb) * HW);
  }
  bool rg = t.requires_grad(a.id) || t.requires_grad(b.id);
  Val y = t.add(std::move(out), rg);
  if (rg) {
    int aid = a.id, bid = b.id, yid = y.id;
    t.set_backprop(y.id, [aid, bid, yid, N, Ca, Cb, HW](Tape& tp) {
      const Tensor& g = tp.grad(yid);
      if (tp.requires_grad(aid)) {
        Tensor& ga = tp.grad(aid);
        for (int n = 0; n < N; ++n) {
          const float* src = g.data() + static_cast<int64_t>(n) * (Ca + Cb) * HW;
          float* dst = ga.data() + static_cast<int64_t>(n) * Ca * HW;
          for (int64_t i = 0; i < static_cast<int64_t>(Ca) * HW; ++i) dst[i] += src[i];
        }
      }
      if (tp.requires_grad(bid)) {
        Tensor& gb = tp.grad(bid);
        for (int n = 0; n < N; ++n) {
          const float* src = g.data() + (static_cast<int64_t>(n) * (Ca + Cb) + Ca) * HW;
          float* dst = gb.data() + static_cast<int64_t>(n) * Cb * HW;
          for (int64_t i = 0; i < static_cast<int64_t>(Cb) * HW; ++i) dst[i] += src[i];
        }
      }
    });
  }
  return y;
}

inline Val reshape(Val x, std::vector<int> shape) {
  Tape& t = *x.tape;
  const Tensor& xv = t.val(x);
  Tensor out(std::move(shape));
  opdetail::require_shape(out.numel() == xv.numel(), "reshape must preserve element count");
  std::memcpy(out.data(), xv.data(), sizeof(float) * static_cast<size_t>(xv.numel()));
  Val y = t.add(std::move(out), t.requires_grad(x.id));
  if (t.requires_grad(x.id)) {
    int xid = x.id, yid = y.id;
    t.set_backprop(y.id, [xid, yid](Tape& tp) {
      const Tensor& g = tp.grad(yid);
      Tensor& gx = tp.grad(xid);
      for (int64_t i = 0; i < g.numel(); ++i) gx[i] += g[i];
    });
  }
  return y;
}

// x: [R,C] -> [R], picking one column.
inline Val slice_col(Val x, int col) {
  Tape& t = *x.tape;
  const Tensor& xv = t.val(x);
  opdetail::require_shape(xv.rank() == 2 && col >= 0 && col < xv.extent(1), "slice_col bounds");
  int R = xv.extent(0), C = xv.extent(1);
  Tensor out({R});
  for (int r = 0; r < R; ++r) out[r] = xv[static_cast<int64_t>(r) * C + col];
  Val y = t.add(std::move(out), t.requires_grad(x.id));
  if (t.requires_grad(x.id)) {
    int xid = x.id, yid = y.id;
    t.set_backprop(y.id, [xid, yid, R, C, col](Tape& tp) {
      const Tensor& g = tp.grad(yid);
      Tensor& gx = tp.grad(xid);
      for (int r = 0; r < R; ++r) gx[static_cast<int64_t>(r) * C + col] += g[r];
    });
  }
  return y;
}

// Three [J] vectors -> [J,3] rows (x,y,z).
inline Val interleave3(Val a, Val b, Val c) {
  opdetail::require_same_tape(a, b);
  opdetail::require_same_tape(a, c);
  Tape& t = *a.tape;
  const Tensor& av = t.val(a);
  const Tensor& bv = t.val(b);
  const Tensor& cv = t.val(c);
  opdetail::require_shape(av.rank() == 1 && av.same_shape(bv) && av.same_shape(cv), "interleave3 expects three equal vectors");
  int J = av.extent(0);
  Tensor out({J, 3});
  for (int j = 0; j < J; ++j) {
    out[static_cast<int64_t>(j) * 3 + 0] = av[j];
    out[static_cast<int64_t>(j) * 3 + 1] = bv[j];
    out[static_cast<int64_t>(j) * 3 + 2] = cv[j];
  }
  bool rg = t.requires_grad(a.id) || t.requires_grad(b.id) || t.requires_grad(c.id);
  Val y = t.add(std::move(out), rg);
  if (rg) {
    int aid = a.id, bid = b.id, cid = c.id, yid = y.id;
    t.set_backprop(y.id, [aid, bid, cid, yid, J](Tape& tp) {
      const Tensor& g = tp.grad(yid);
      int ids[3] = {aid, bid, cid};
      for (int k = 0; k < 3; ++k) {
        if (!tp.requires_grad(ids[k])) continue;
        Tensor& gk = tp.grad(ids[k]);
        for (int j = 0; j < J; ++j) gk[j] += g[static_cast<int64_t>(j) * 3 + k];
      }
    });
  }
  return y;
}

inline Val softmax1d(Val x) {
  Tape& t = *x.tape;
  const Tensor& xv = t.val(x);
  opdetail::require_shape(xv.rank() == 1, "softmax1d expects a vector");
  int n = xv.extent(0);
  Tensor out({n});
  float m = xv[0];
  for (int i = 1; i < n; ++i) m = std::max(m, xv[i]);
  float z = 0.0f;
  for (int i = 0; i < n; ++i) {
    out[i] = std::exp(xv[i] - m);
    z += out[i];
  }
  for (int i = 0; i < n; ++i) out[i] /= z;
  Val y = t.add(std::move(out), t.requires_grad(x.id));
  if (t.requires_grad(x.id)) {
    int xid = x.id, yid = y.id;
    t.set_backprop(y.id, [xid, yid, n](Tape& tp) {
      const Tensor& g = tp.grad(yid);
      const Tensor& p = tp.val(yid);
      Tensor& gx = tp.grad(xid);
      float dotgp = 0.0f;
      for (int i = 0; i < n; ++i) dotgp += g[i] * p[i];
      for (int i = 0; i < n; ++i) gx[i] += p[i] * (g[i] - dotgp);
    });
  }
  return y;
}

// Heatmaps J,h,w -> J,2 expected (x,y) in heatmap pixel coordinates.
// Probabilities are softmax(h / temperature) per joint.
inline Val soft_argmax2d(Val hm, float temperature) {
  if (!(temperature > 0.0f)) throw std::invalid_argument("soft_argmax2d: temperature must be positive");
  Tape& t = *hm.tape;
  const Tensor& hv = t.val(hm);
  opdetail::require_shape(hv.rank() == 3, "soft_argmax2d expects J,h,w heatmaps");
  int J = hv.extent(0), h = hv.extent(1), w = hv.extent(2);
  float invT = 1.0f / temperature;
  Tensor out({J, 2});
  Tensor probs({J, h, w});
  for (int j = 0; j < J; ++j) {
    const float* src = hv.data() + static_cast<int64_t>(j) * h * w;
    float* pj = probs.data() + static_cast<int64_t>(j) * h * w;
    float m = src[0];
    for (int i = 1; i < h * w; ++i) m = std::max(m, src[i]);
    float z = 0.0f;
    for (int i = 0; i < h * w; ++i) {
      pj[i] = std::exp((src[i] - m) * invT);
      z += pj[i];
    }
    float ex = 0.0f, ey = 0.0f;
    float invz = 1.0f / z;
    for (int yy = 0; yy < h; ++yy) {
      for (int xx = 0; xx < w; ++xx) {
        float p = pj[yy * w + xx] * invz;
        pj[yy * w + xx] = p;
        ex += p * static_cast<float>(xx);
        ey += p * static_cast<float>(yy);
      }
    }
    out[static_cast<int64_t>(j) * 2 + 0] = ex;
    out[static_cast<int64_t>(j) * 2 + 1] = ey;
  }
  bool rg = t.requires_grad(hm.id);
  Val probs_node = t.add(std::move(probs), false);  // cached for the adjoint
  Val y = t.add(std::move(out), rg);
  if (rg) {
    int hid = hm.id, pid = probs_node.id, yid = y.id;
    t.set_backprop(y.id, [hid, pid, yid, J, h, w, invT](Tape& tp) {
      const Tensor& g = tp.grad(yid);
      const Tensor& p = tp.val(pid);
      const Tensor& e = tp.val(yid);
      Tensor& gh = tp.grad(hid);
      for (int j = 0; j < J; ++j) {
        float gu = g[static_cast<int64_t>(j) * 2 + 0];
        float gv = g[static_cast<int64_t>(j) * 2 + 1];
        if (gu == 0.0f && gv == 0.0f) continue;
        float eu = e[static_cast<int64_t>(j) * 2 + 0];
        float ev = e[static_cast<int64_t>(j) * 2 + 1];
        const float* pj = p.data() + static_cast<int64_t>(j) * h * w;
        float* gj = gh.data() + static_cast<int64_t>(j) * h * w;
        for (int yy = 0; yy < h; ++yy) {
          for (int xx = 0; xx < w; ++xx) {
            float pv = pj[yy * w + xx];
            gj[yy * w + xx] += invT * pv * (gu * (static_cast<float>(xx) - eu) + gv * (static_cast<float>(yy) - ev));
          }
        }
      }
    });
  }
  return y;
}

// ---------------------------------------------------------------------------
// Driver-level backward and gradient checking

// Runs the adjoint pass and adds parameter gradients into the set's
// accumulators (trainable parameters only). Repeated calls accumulate.
inline void backward(Val scalar_output, ParameterSet& ps) {
  scalar_output.tape->backward(scalar_output);
  scalar_output.tape->collect_param_grads(ps);
}

struct GradCheckResult {
  double max_rel_error = 0.0;
  int64_t coords_checked = 0;
};

// f(params) must return the scalar loss and leave d loss / d params in the
// gradient accumulators (they are zeroed before the analytic call). Central
// differences are then compared coordinate-by-coordinate on a random sample.
inline GradCheckResult grad_check(const std::function<double(ParameterSet&)>& f, ParameterSet& ps, double epsilon,
                                  int max_coords_per_param, Rng& rng) {
  if (!(epsilon >= 1e-4 && epsilon <= 1e-2)) {
    throw std::invalid_argument("grad_check: epsilon must lie in [1e-4, 1e-2] for float32");
  }
  ps.zero_grads();
  (void)f(ps);
  std::vector<std::vector<float>> analytic(static_cast<size_t>(ps.size()));
  for (int i = 0; i < ps.size(); ++i) {
    const Tensor& g = ps.at(i).grad;
    analytic[static_cast<size_t>(i)].assign(g.data(), g.data() + g.numel());
  }
  GradCheckResult res;
  for (int i = 0; i < ps.size(); ++i) {
    Parameter& p = ps.at(i);
    if (!p.trainable) continue;
    int64_t n = p.value.numel();
    std::vector<int64_t> coords;
    if (n <= max_coords_per_param) {
      for (int64_t k = 0; k < n; ++k) coords.push_back(k);
    } else {
      for (int k = 0; k < max_coords_per_param; ++k) coords.push_back(rng.uniform_int(0, static_cast<int>(n - 1)));
    }
    for (int64_t k : coords) {
      float orig = p.value[k];
      p.value[k] = orig + static_cast<float>(epsilon);
      double lp = f(ps);
      p.value[k] = orig - static_cast<float>(epsilon);
      double lm = f(ps);
      p.value[k] = orig;
      double fd = (lp - lm) / (2.0 * epsilon);
      double an = analytic[static_cast<size_t>(i)][static_cast<size_t>(k)];
      double denom = std::max({std::fabs(fd), std::fabs(an), 1e-8});
      double rel = std::fabs(fd - an) / denom;
      if (rel > res.max_rel_error) res.max_rel_error = rel;
      ++res.coords_checked;
    }
  }
  ps.zero_grads();
  return res;
}

// ---------------------------------------------------------------------------
// Checkpoint format: "VHPT", u32 version, then per parameter
// (u32 name length, name bytes, u32 rank, u32 extents..., f32 data...),
// everything little-endian. Round trips bit-exactly.

namespace detail {

inline void write_u32(std::ostream& os, uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                        static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

inline uint32_t read_u32(std::istream& is) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  if (!is) throw std::runtime_error("checkpoint: truncated file");
  return static_cast<uint32_t>(b[0]) | (static_cast<uint32_t>(b[1]) << 8) | (static_cast<uint32_t>(b[2]) << 16) |
         (static_cast<uint32_t>(b[3]) << 24);
}

inline void write_f32(std::ostream& os, const float* data, int64_t n) {
  for (int64_t i = 0; i < n; ++i) {
    uint32_t bits;
    std::memcpy(&bits, &data[i], 4);
    write_u32(os, bits);
  }
}

inline void read_f32(std::istream& is, float* data, int64_t n) {
  for (int64_t i = 0; i < n; ++i) {
    uint32_t bits = read_u32(is);
    std::memcpy(&data[i], &bits, 4);
  }
}

}  // namespace detail

constexpr uint32_t kCheckpointVersion = 1;

inline void save_checkpoint(const ParameterSet& ps, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("checkpoint: cannot open for writing: " + path);
  os.write("VHPT", 4);
  detail::write_u32(os, kCheckpointVersion);
  for (int i = 0; i < ps.size(); ++i) {
    const Parameter& p = ps.at(i);
    detail::write_u32(os, static_cast<uint32_t>(p.name.size()));
    os.write(p.name.data(), static_cast<std::streamsize>(p.name.size()));
    detail::write_u32(os, static_cast<uint32_t>(p.value.rank()));
    for (int d = 0; d < p.value.rank(); ++d) detail::write_u32(os, static_cast<uint32_t>(p.value.extent(d)));
    detail::write_f32(os, p.value.data(), p.value.numel());
  }
  if (!os) throw std::runtime_error("checkpoint: write failed: " + path);
}

inline ParameterSet load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("checkpoint: cannot open: " + path);
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, "VHPT", 4) != 0) throw std::runtime_error("checkpoint: bad magic in " + path);
  uint32_t version = detail::read_u32(is);
  if (version != kCheckpointVersion) {
    throw std::runtime_error("checkpoint: unsupported version " + std::to_string(version) + " in " + path);
  }
  ParameterSet ps;
  while (true) {
    int peek = is.peek();
    if (peek == std::char_traits<char>::eof()) break;
    uint32_t name_len = detail::read_u32(is);
    if (name_len > 4096) throw std::runtime_error("checkpoint: implausible name length in " + path);
    std::string name(name_len, '\0');
    is.read(name.data(), name_len);
    uint32_t rank = detail::read_u32(is);
    if (rank > 8) throw std::runtime_error("checkpoint: implausible rank in " + path);
    std::vector<int> shape(rank);
    for (uint32_t d = 0; d < rank; ++d) shape[d] = static_cast<int>(detail::read_u32(is));
    Tensor t(shape);
    detail::read_f32(is, t.data(), t.numel());
    if (!is) throw std::runtime_error("checkpoint: truncated record in " + path);
    ps.add(name, std::move(t));
  }
  return ps;
}

// Restores values into an existing set; names and shapes must match.
inline void load_checkpoint_into(ParameterSet& ps, const std::string& path) {
  ParameterSet loaded = load_checkpoint(path);
  if (loaded.size() != ps.size()) throw std::runtime_error("checkpoint: parameter count mismatch for " + path);
  for (int i = 0; i < loaded.size(); ++i) {
    const Parameter& src = loaded.at(i);
    int j = ps.find(src.name);
    if (j < 0) throw std::runtime_error("checkpoint: unexpected parameter " + src.name);
    Parameter& dst = ps.at(j);
    if (!dst.value.same_shape(src.value)) throw std::runtime_error("checkpoint: shape mismatch for " + src.name);
    dst.value = src.value;
  }
}

}  // namespace vhpose

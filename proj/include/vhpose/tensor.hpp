#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace vhpose {

// Dense row-major float32 tensor. Image-like data uses N,C,H,W ordering.
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(std::vector<int> shape) : shape_(std::move(shape)) {
    data_.assign(checked_numel(shape_), 0.0f);
  }

  Tensor(std::vector<int> shape, std::vector<float> data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (static_cast<int64_t>(data_.size()) != checked_numel(shape_)) {
      throw std::invalid_argument("tensor: data length does not match shape");
    }
  }

  static Tensor full(std::vector<int> shape, float v) {
    Tensor t(std::move(shape));
    for (auto& x : t.data_) x = v;
    return t;
  }

  static Tensor scalar(float v) { return Tensor({1}, {v}); }

  const std::vector<int>& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  int extent(int d) const { return shape_[static_cast<size_t>(d)]; }
  int64_t numel() const { return static_cast<int64_t>(data_.size()); }
  bool empty() const { return data_.empty(); }

  float* data() { return data_.data(); }
  const float* data() const { return data_.data(); }
  float& operator[](int64_t i) { return data_[static_cast<size_t>(i)]; }
  float operator[](int64_t i) const { return data_[static_cast<size_t>(i)]; }

  float item() const {
    if (numel() != 1) throw std::logic_error("tensor: item() on non-scalar");
    return data_[0];
  }

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

  bool all_finite() const {
    for (float v : data_) {
      if (!std::isfinite(v)) return false;
    }
    return true;
  }

  void fill(float v) {
    for (auto& x : data_) x = v;
  }

  static std::string shape_str(const std::vector<int>& s) {
    std::string out = "(";
    for (size_t i = 0; i < s.size(); ++i) {
      out += std::to_string(s[i]);
      if (i + 1 < s.size()) out += ",";
    }
    return out + ")";
  }

 private:
  static int64_t checked_numel(const std::vector<int>& shape) {
    int64_t n = 1;
    for (int e : shape) {
      if (e <= 0) throw std::invalid_argument("tensor: nonpositive extent in shape " + shape_str(shape));
      n *= e;
    }
    return n;
  }

  std::vector<int> shape_;
  std::vector<float> data_;
};

}  // namespace vhpose

#pragma once

#include <cstdint>
#include <cstring>
#include <stdexcept>
#include <string>
#include <vector>

namespace poisonlab {

// Dense float32 tensor, row-major. Rank is at most 4; image batches use
// (N, C, H, W) and single images (C, H, W).
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::vector<int64_t> shape) { resize(std::move(shape)); }

  static Tensor zeros(std::vector<int64_t> shape) { return Tensor(std::move(shape)); }
  static Tensor full(std::vector<int64_t> shape, float v) {
    Tensor t(std::move(shape));
    t.fill(v);
    return t;
  }

  void resize(std::vector<int64_t> shape) {
    int64_t n = 1;
    for (int64_t d : shape) {
      if (d <= 0) throw std::invalid_argument("Tensor: nonpositive dimension");
      n *= d;
    }
    shape_ = std::move(shape);
    data_.assign(static_cast<size_t>(n), 0.0f);
  }

  bool empty() const { return data_.empty(); }
  int64_t size() const { return static_cast<int64_t>(data_.size()); }
  int rank() const { return static_cast<int>(shape_.size()); }
  const std::vector<int64_t>& shape() const { return shape_; }
  int64_t dim(int i) const { return shape_.at(static_cast<size_t>(i)); }

  float* data() { return data_.data(); }
  const float* data() const { return data_.data(); }

  float& operator[](int64_t i) { return data_[static_cast<size_t>(i)]; }
  float operator[](int64_t i) const { return data_[static_cast<size_t>(i)]; }

  // (n, c, h, w) indexing for rank-4, (c, h, w) for rank-3.
  float& at(int64_t n, int64_t c, int64_t h, int64_t w) {
    return data_[static_cast<size_t>(((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w)];
  }
  float at(int64_t n, int64_t c, int64_t h, int64_t w) const {
    return data_[static_cast<size_t>(((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w)];
  }
  float& at(int64_t c, int64_t h, int64_t w) {
    return data_[static_cast<size_t>((c * shape_[1] + h) * shape_[2] + w)];
  }
  float at(int64_t c, int64_t h, int64_t w) const {
    return data_[static_cast<size_t>((c * shape_[1] + h) * shape_[2] + w)];
  }

  void fill(float v) { std::fill(data_.begin(), data_.end(), v); }

  // Reinterpret the same buffer with a new shape of equal element count.
  Tensor reshaped(std::vector<int64_t> shape) const {
    Tensor t;
    t.shape_ = std::move(shape);
    int64_t n = 1;
    for (int64_t d : t.shape_) n *= d;
    if (n != size()) throw std::invalid_argument("Tensor::reshaped: element count mismatch");
    t.data_ = data_;
    return t;
  }

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

  double sum() const {
    double s = 0.0;
    for (float v : data_) s += v;
    return s;
  }
  float max_abs() const {
    float m = 0.0f;
    for (float v : data_) m = std::max(m, std::abs(v));
    return m;
  }
  double sq_norm() const {
    double s = 0.0;
    for (float v : data_) s += static_cast<double>(v) * v;
    return s;
  }

  void add_(const Tensor& o, float scale = 1.0f) {
    if (!same_shape(o)) throw std::invalid_argument("Tensor::add_: shape mismatch");
    for (int64_t i = 0; i < size(); ++i) data_[static_cast<size_t>(i)] += scale * o[i];
  }
  void scale_(float s) {
    for (float& v : data_) v *= s;
  }
  void clamp_(float lo, float hi) {
    for (float& v : data_) v = v < lo ? lo : (v > hi ? hi : v);
  }

  bool bitwise_equal(const Tensor& o) const {
    return same_shape(o) &&
           std::memcmp(data_.data(), o.data_.data(), data_.size() * sizeof(float)) == 0;
  }

 private:
  std::vector<int64_t> shape_;
  std::vector<float> data_;
};

inline std::string shape_str(const std::vector<int64_t>& s) {
  std::string out;
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) out += "x";
    out += std::to_string(s[i]);
  }
  return out;
}

// Column-major-free sgemm wrapper over CBLAS (row-major convention):
// C(MxN) = alpha * op(A) * op(B) + beta * C.
void sgemm(bool trans_a, bool trans_b, int m, int n, int k, float alpha, const float* a, int lda,
           const float* b, int ldb, float beta, float* c, int ldc);

}  // namespace poisonlab

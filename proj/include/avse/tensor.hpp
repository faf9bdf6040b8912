#pragma once

#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace avse {

// Dense row-major real tensor, 64-bit throughout. Shapes are fixed at
// construction; checkpoints may narrow to 32-bit on disk but everything
// in memory is double.
struct Tensor {
  std::vector<size_t> shape;
  std::vector<double> data;

  Tensor() = default;
  explicit Tensor(std::vector<size_t> s, double fill = 0.0)
      : shape(std::move(s)), data(numel(shape), fill) {}

  static size_t numel(const std::vector<size_t>& s) {
    size_t n = 1;
    for (size_t e : s) {
      if (e == 0) throw std::invalid_argument("tensor extent must be positive");
      n *= e;
    }
    return n;
  }

  static Tensor scalar(double v) {
    Tensor t({1});
    t.data[0] = v;
    return t;
  }

  static Tensor zeros_like(const Tensor& o) { return Tensor(o.shape); }

  size_t size() const { return data.size(); }
  size_t rank() const { return shape.size(); }
  size_t extent(size_t i) const { return shape.at(i); }

  double& operator[](size_t i) { return data[i]; }
  double operator[](size_t i) const { return data[i]; }

  // 2-D accessors (row-major)
  double& at(size_t i, size_t j) { return data[i * shape[1] + j]; }
  double at(size_t i, size_t j) const { return data[i * shape[1] + j]; }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }

  bool all_finite() const {
    for (double v : data)
      if (!std::isfinite(v)) return false;
    return true;
  }

  double max_abs() const {
    double m = 0.0;
    for (double v : data) m = std::max(m, std::abs(v));
    return m;
  }

  Tensor& fill(double v) {
    std::fill(data.begin(), data.end(), v);
    return *this;
  }
};

inline std::string shape_str(const std::vector<size_t>& s) {
  std::string out = "(";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + ")";
}

}  // namespace avse

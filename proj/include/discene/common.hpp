#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace discene {

struct Vec3 {
  double x = 0.0, y = 0.0, z = 0.0;

  double& operator[](int i) { return i == 0 ? x : (i == 1 ? y : z); }
  double operator[](int i) const { return i == 0 ? x : (i == 1 ? y : z); }

  Vec3 operator+(const Vec3& o) const { return {x + o.x, y + o.y, z + o.z}; }
  Vec3 operator-(const Vec3& o) const { return {x - o.x, y - o.y, z - o.z}; }
  Vec3 operator*(double s) const { return {x * s, y * s, z * s}; }
  Vec3 operator/(double s) const { return {x / s, y / s, z / s}; }

  double dot(const Vec3& o) const { return x * o.x + y * o.y + z * o.z; }
  Vec3 cross(const Vec3& o) const {
    return {y * o.z - z * o.y, z * o.x - x * o.z, x * o.y - y * o.x};
  }
  double norm() const { return std::sqrt(dot(*this)); }
  Vec3 normalized() const {
    const double n = norm();
    return n > 0.0 ? *this / n : Vec3{};
  }
  bool finite() const {
    return std::isfinite(x) && std::isfinite(y) && std::isfinite(z);
  }
};

inline double squared_dist(const Vec3& a, const Vec3& b) {
  const Vec3 d = a - b;
  return d.dot(d);
}

/// Dense rank-1/rank-2 tensor of doubles. Rank-2 tensors are row-major.
struct Tensor {
  std::vector<std::size_t> shape;
  std::vector<double> data;

  Tensor() = default;
  Tensor(std::initializer_list<std::size_t> s) : shape(s) {
    data.assign(numel(shape), 0.0);
  }
  explicit Tensor(std::vector<std::size_t> s) : shape(std::move(s)) {
    data.assign(numel(shape), 0.0);
  }

  static std::size_t numel(const std::vector<std::size_t>& s) {
    return std::accumulate(s.begin(), s.end(), std::size_t{1},
                           std::multiplies<>());
  }
  static Tensor zeros_like(const Tensor& t) { return Tensor(t.shape); }
  static Tensor scalar(double v) {
    Tensor t{std::vector<std::size_t>{}};
    t.data.assign(1, v);
    return t;
  }
  static Tensor from_rows(const std::vector<Vec3>& pts) {
    Tensor t{pts.size(), 3};
    for (std::size_t i = 0; i < pts.size(); ++i) {
      t.data[3 * i] = pts[i].x;
      t.data[3 * i + 1] = pts[i].y;
      t.data[3 * i + 2] = pts[i].z;
    }
    return t;
  }

  std::size_t size() const { return data.size(); }
  std::size_t rank() const { return shape.size(); }
  std::size_t rows() const { return shape.empty() ? 1 : shape[0]; }
  std::size_t cols() const { return shape.size() < 2 ? 1 : shape[1]; }

  double& operator[](std::size_t i) { return data[i]; }
  double operator[](std::size_t i) const { return data[i]; }
  double& operator()(std::size_t i, std::size_t j) {
    return data[i * cols() + j];
  }
  double operator()(std::size_t i, std::size_t j) const {
    return data[i * cols() + j];
  }

  Vec3 row3(std::size_t i) const {
    return {data[i * cols()], data[i * cols() + 1], data[i * cols() + 2]};
  }
  void set_row3(std::size_t i, const Vec3& v) {
    data[i * cols()] = v.x;
    data[i * cols() + 1] = v.y;
    data[i * cols() + 2] = v.z;
  }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }
  bool finite() const {
    return std::all_of(data.begin(), data.end(),
                       [](double v) { return std::isfinite(v); });
  }
};

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw std::invalid_argument(msg);
}

}  // namespace discene

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "genimg/errors.hpp"

namespace genimg {

// Dense row-major double tensor. Layout convention across the library is
// channel-first: (batch, channels, spatial...).
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(std::vector<int64_t> shape);
    Tensor(std::vector<int64_t> shape, double fill);
    Tensor(std::vector<int64_t> shape, std::vector<double> data);

    static Tensor scalar(double v);
    static Tensor zeros_like(const Tensor& t) { return Tensor(t.shape_); }

    const std::vector<int64_t>& shape() const { return shape_; }
    int rank() const { return static_cast<int>(shape_.size()); }
    int64_t numel() const { return static_cast<int64_t>(v_.size()); }
    bool defined() const { return !shape_.empty() || !v_.empty(); }
    int64_t dim(int i) const;  // negative indices count from the back

    double* data() { return v_.data(); }
    const double* data() const { return v_.data(); }
    double& operator[](int64_t i) { return v_[static_cast<size_t>(i)]; }
    double operator[](int64_t i) const { return v_[static_cast<size_t>(i)]; }
    double item() const;

    Tensor reshaped(std::vector<int64_t> shape) const;
    bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }
    std::string shape_str() const;

    bool all_finite() const;
    void fill(double v);

private:
    std::vector<int64_t> shape_;
    std::vector<double> v_;
};

int64_t shape_numel(const std::vector<int64_t>& shape);
std::string shape_to_string(const std::vector<int64_t>& shape);

// Elementwise helpers on plain tensors (shapes must match exactly).
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
Tensor add_scaled(const Tensor& a, double sa, const Tensor& b, double sb);
double mean_value(const Tensor& a);
double min_value(const Tensor& a);
double max_value(const Tensor& a);

// (M,K) x (K,N) -> (M,N), Eigen-backed.
Tensor matmul2d(const Tensor& a, const Tensor& b);

}  // namespace genimg

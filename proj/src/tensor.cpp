#include "genimg/tensor.hpp"

#include <Eigen/Dense>
#include <cmath>
#include <sstream>

#include "genimg/errors.hpp"

namespace genimg {

int64_t shape_numel(const std::vector<int64_t>& shape) {
    int64_t n = 1;
    for (int64_t d : shape) n *= d;
    return n;
}

std::string shape_to_string(const std::vector<int64_t>& shape) {
    std::ostringstream os;
    os << "(";
    for (size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ",";
        os << shape[i];
    }
    os << ")";
    return os.str();
}

Tensor::Tensor(std::vector<int64_t> shape)
    : shape_(std::move(shape)), v_(static_cast<size_t>(shape_numel(shape_)), 0.0) {}

Tensor::Tensor(std::vector<int64_t> shape, double fill)
    : shape_(std::move(shape)), v_(static_cast<size_t>(shape_numel(shape_)), fill) {}

Tensor::Tensor(std::vector<int64_t> shape, std::vector<double> data)
    : shape_(std::move(shape)), v_(std::move(data)) {
    if (shape_numel(shape_) != static_cast<int64_t>(v_.size()))
        throw ShapeMismatch("data size " + std::to_string(v_.size()) + " does not match shape " +
                            shape_to_string(shape_));
}

Tensor Tensor::scalar(double v) { return Tensor({}, std::vector<double>{v}); }

int64_t Tensor::dim(int i) const {
    int r = rank();
    if (i < 0) i += r;
    if (i < 0 || i >= r) throw RankError("dim index out of range for " + shape_str());
    return shape_[static_cast<size_t>(i)];
}

double Tensor::item() const {
    if (numel() != 1) throw ShapeMismatch("item() requires a single-element tensor, got " + shape_str());
    return v_[0];
}

Tensor Tensor::reshaped(std::vector<int64_t> shape) const {
    if (shape_numel(shape) != numel())
        throw ShapeMismatch("cannot reshape " + shape_str() + " to " + shape_to_string(shape));
    Tensor out;
    out.shape_ = std::move(shape);
    out.v_ = v_;
    return out;
}

std::string Tensor::shape_str() const { return shape_to_string(shape_); }

bool Tensor::all_finite() const {
    for (double x : v_)
        if (!std::isfinite(x)) return false;
    return true;
}

void Tensor::fill(double v) {
    for (double& x : v_) x = v;
}

static void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (!a.same_shape(b))
        throw ShapeMismatch(std::string(op) + ": " + a.shape_str() + " vs " + b.shape_str());
}

Tensor add(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "add");
    Tensor out(a.shape());
    for (int64_t i = 0; i < a.numel(); ++i) out[i] = a[i] + b[i];
    return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "sub");
    Tensor out(a.shape());
    for (int64_t i = 0; i < a.numel(); ++i) out[i] = a[i] - b[i];
    return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "mul");
    Tensor out(a.shape());
    for (int64_t i = 0; i < a.numel(); ++i) out[i] = a[i] * b[i];
    return out;
}

Tensor scale(const Tensor& a, double s) {
    Tensor out(a.shape());
    for (int64_t i = 0; i < a.numel(); ++i) out[i] = a[i] * s;
    return out;
}

Tensor add_scaled(const Tensor& a, double sa, const Tensor& b, double sb) {
    check_same_shape(a, b, "add_scaled");
    Tensor out(a.shape());
    for (int64_t i = 0; i < a.numel(); ++i) out[i] = sa * a[i] + sb * b[i];
    return out;
}

double mean_value(const Tensor& a) {
    if (a.numel() == 0) return 0.0;
    double s = 0.0;
    for (int64_t i = 0; i < a.numel(); ++i) s += a[i];
    return s / static_cast<double>(a.numel());
}

double min_value(const Tensor& a) {
    double m = a[0];
    for (int64_t i = 1; i < a.numel(); ++i) m = std::min(m, a[i]);
    return m;
}

double max_value(const Tensor& a) {
    double m = a[0];
    for (int64_t i = 1; i < a.numel(); ++i) m = std::max(m, a[i]);
    return m;
}

Tensor matmul2d(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
        throw ShapeMismatch("matmul2d: " + a.shape_str() + " x " + b.shape_str());
    using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
    Eigen::Map<const Mat> ma(a.data(), a.dim(0), a.dim(1));
    Eigen::Map<const Mat> mb(b.data(), b.dim(0), b.dim(1));
    Tensor out({a.dim(0), b.dim(1)});
    Eigen::Map<Mat> mo(out.data(), out.dim(0), out.dim(1));
    mo.noalias() = ma * mb;
    return out;
}

}  // namespace genimg

#pragma once

#include <functional>
#include <memory>
#include <vector>

#include "genimg/tensor.hpp"

namespace genimg {

namespace detail {
struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    bool grad_alloc = false;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward;

    Tensor& grad_ref();  // lazily allocate zeros of value's shape
};
}  // namespace detail

// Reverse-mode autodiff handle over a Tensor. Graphs are built dynamically by
// the free functions below; leaves created with requires_grad=true accumulate
// gradients across backward() calls until zero_grad().
class Var {
public:
    Var() = default;
    explicit Var(Tensor value, bool requires_grad = false);

    bool defined() const { return static_cast<bool>(n_); }
    const Tensor& val() const;
    Tensor& grad();
    bool requires_grad() const;

    void backward();    // this node must hold a scalar
    void zero_grad();   // reset accumulated gradient on this node

    std::shared_ptr<detail::Node> node() const { return n_; }

private:
    explicit Var(std::shared_ptr<detail::Node> n) : n_(std::move(n)) {}
    std::shared_ptr<detail::Node> n_;
    friend Var make_op(Tensor value, std::vector<Var> parents,
                       std::function<void(detail::Node&)> backward);
};

// While alive, ops produce detached constants (no tape). Used for sampling
// and evaluation paths.
struct NoGradGuard {
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool prev_;
};
bool grad_enabled();

Var constant(Tensor v);

// ---- elementwise ----
Var vadd(const Var& a, const Var& b);
Var vsub(const Var& a, const Var& b);
Var vmul(const Var& a, const Var& b);
Var vneg(const Var& a);
Var vscale(const Var& a, double s);
Var vshift(const Var& a, double s);            // a + s
Var vexp(const Var& a);
Var vexp_clamped(const Var& a, double lo, double hi);
Var vlog(const Var& a);
Var vsqrt(const Var& a);
Var vabs(const Var& a);
Var square(const Var& a);
Var sigmoid(const Var& a);
Var vtanh(const Var& a);
Var silu(const Var& a);
Var relu(const Var& a);
Var leaky_relu(const Var& a, double slope);
Var gelu(const Var& a);
Var softplus(const Var& a);

inline Var operator+(const Var& a, const Var& b) { return vadd(a, b); }
inline Var operator-(const Var& a, const Var& b) { return vsub(a, b); }
inline Var operator*(const Var& a, const Var& b) { return vmul(a, b); }
inline Var operator-(const Var& a) { return vneg(a); }

// ---- reductions ----
Var sum_all(const Var& a);
Var mean_all(const Var& a);
Var mse_loss(const Var& a, const Var& b);
Var l1_loss(const Var& a, const Var& b);

// ---- shape ----
Var reshape(const Var& a, std::vector<int64_t> shape);
Var permute(const Var& a, std::vector<int> axes);
Var slice_axis(const Var& a, int axis, int64_t start, int64_t len);
Var concat(const std::vector<Var>& parts, int axis);
Var detach(const Var& a);

// ---- linear algebra ----
Var matmul(const Var& a, const Var& b);                 // (M,K)x(K,N)
Var bmm(const Var& a, const Var& b);                    // (B,M,K)x(B,K,N)
Var affine(const Var& x, const Var& w, const Var& b);   // (N,K)x(K,M)+b

// ---- broadcast helpers ----
Var add_bias_channel(const Var& x, const Var& b);        // (B,C,S...) + (C)
Var add_spatial_broadcast(const Var& x, const Var& v);   // (B,C,S...) + (B,C)
Var mul_batch_scalars(const Var& x, const Tensor& s);    // (B,...) * s[b], s constant

// ---- nn ----
// w: (Cout, Cin, k,k) or (Cout, Cin, k,k,k); x: (B, Cin, spatial...)
Var conv_nd(const Var& x, const Var& w, const Var& b, int64_t stride, int64_t pad);
Var group_norm(const Var& x, const Var& gamma, const Var& beta, int groups, double eps = 1e-5);
Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps = 1e-5);
Var softmax_lastdim(const Var& x);
Var log_softmax_lastdim(const Var& x);
// (R, L, L) attention scores; row i attends to columns <= i only. Masked
// entries get exactly zero weight so later tokens can never perturb earlier
// positions, bitwise.
Var causal_masked_softmax(const Var& scores);
Var avg_pool_nd(const Var& x, int64_t k = 2);
Var global_avg_pool(const Var& x);  // (B,C,S...) -> (B,C), mean over spatial dims
Var upsample_nearest_nd(const Var& x, int64_t factor = 2);
Var embedding_lookup(const Var& table, const std::vector<int64_t>& idx);
Var pick_lastdim(const Var& x, const std::vector<int64_t>& idx);  // (N,V),(N) -> (N)
// mean over (b,c) of the total squared modulus of the orthonormal DFT of d
// over its spatial dims.
Var dft_energy(const Var& d);

// Plain-tensor utilities shared with non-autograd code paths.
Tensor permute_tensor(const Tensor& a, const std::vector<int>& axes);
Tensor upsample_nearest_tensor(const Tensor& x, int64_t factor);
Tensor avg_pool_tensor(const Tensor& x, int64_t k = 2);
Tensor concat_channels_tensor(const Tensor& a, const Tensor& b);
Tensor slice_tensor(const Tensor& a, int axis, int64_t start, int64_t len);

}  // namespace genimg

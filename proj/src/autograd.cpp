#include "genimg/autograd.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <unordered_set>

#include "genimg/errors.hpp"

namespace genimg {

using detail::Node;
using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapM = Eigen::Map<Mat>;
using CMapM = Eigen::Map<const Mat>;

namespace {
thread_local bool g_grad_enabled = true;
}

NoGradGuard::NoGradGuard() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev_; }
bool grad_enabled() { return g_grad_enabled; }

Tensor& Node::grad_ref() {
    if (!grad_alloc) {
        grad = Tensor(value.shape());
        grad_alloc = true;
    }
    return grad;
}

Var::Var(Tensor value, bool requires_grad) : n_(std::make_shared<Node>()) {
    n_->value = std::move(value);
    n_->requires_grad = requires_grad;
}

const Tensor& Var::val() const {
    if (!n_) throw Error("use of undefined Var");
    return n_->value;
}

Tensor& Var::grad() {
    if (!n_) throw Error("use of undefined Var");
    return n_->grad_ref();
}

bool Var::requires_grad() const { return n_ && n_->requires_grad; }

void Var::zero_grad() {
    if (n_ && n_->grad_alloc) n_->grad.fill(0.0);
}

void Var::backward() {
    if (!n_) throw Error("backward on undefined Var");
    if (n_->value.numel() != 1) throw ShapeMismatch("backward requires a scalar, got " + n_->value.shape_str());

    // iterative postorder DFS for a reverse topological order
    std::vector<Node*> order;
    std::unordered_set<Node*> visited;
    std::vector<std::pair<Node*, size_t>> stack;
    stack.emplace_back(n_.get(), 0);
    visited.insert(n_.get());
    while (!stack.empty()) {
        auto& [node, idx] = stack.back();
        if (idx < node->parents.size()) {
            Node* p = node->parents[idx++].get();
            if (p->requires_grad && !visited.count(p)) {
                visited.insert(p);
                stack.emplace_back(p, 0);
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    n_->grad_ref()[0] += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* node = *it;
        if (node->backward) node->backward(*node);
    }
}

Var make_op(Tensor value, std::vector<Var> parents, std::function<void(Node&)> backward) {
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    bool needs = false;
    if (g_grad_enabled) {
        for (const auto& p : parents)
            if (p.requires_grad()) {
                needs = true;
                break;
            }
    }
    if (needs) {
        n->requires_grad = true;
        n->parents.reserve(parents.size());
        for (auto& p : parents) n->parents.push_back(p.node());
        n->backward = std::move(backward);
    }
    return Var(std::move(n));
}

Var constant(Tensor v) { return Var(std::move(v), false); }

static void accum(const std::shared_ptr<Node>& p, const Tensor& contrib) {
    if (!p->requires_grad) return;
    Tensor& g = p->grad_ref();
    for (int64_t i = 0; i < g.numel(); ++i) g[i] += contrib[i];
}

static void check_same(const Var& a, const Var& b, const char* op) {
    if (!a.val().same_shape(b.val()))
        throw ShapeMismatch(std::string(op) + ": " + a.val().shape_str() + " vs " + b.val().shape_str());
}

// ---------------------------------------------------------------- elementwise

Var vadd(const Var& a, const Var& b) {
    check_same(a, b, "vadd");
    return make_op(add(a.val(), b.val()), {a, b}, [](Node& n) {
        accum(n.parents[0], n.grad);
        accum(n.parents[1], n.grad);
    });
}

Var vsub(const Var& a, const Var& b) {
    check_same(a, b, "vsub");
    return make_op(sub(a.val(), b.val()), {a, b}, [](Node& n) {
        accum(n.parents[0], n.grad);
        if (n.parents[1]->requires_grad) accum(n.parents[1], scale(n.grad, -1.0));
    });
}

Var vmul(const Var& a, const Var& b) {
    check_same(a, b, "vmul");
    return make_op(mul(a.val(), b.val()), {a, b}, [](Node& n) {
        if (n.parents[0]->requires_grad) accum(n.parents[0], mul(n.grad, n.parents[1]->value));
        if (n.parents[1]->requires_grad) accum(n.parents[1], mul(n.grad, n.parents[0]->value));
    });
}

Var vneg(const Var& a) { return vscale(a, -1.0); }

Var vscale(const Var& a, double s) {
    return make_op(scale(a.val(), s), {a}, [s](Node& n) { accum(n.parents[0], scale(n.grad, s)); });
}

Var vshift(const Var& a, double s) {
    Tensor out(a.val().shape());
    for (int64_t i = 0; i < out.numel(); ++i) out[i] = a.val()[i] + s;
    return make_op(std::move(out), {a}, [](Node& n) { accum(n.parents[0], n.grad); });
}

// unary op with dy/dx computable from (x, y)
template <class F, class DF>
static Var unary_op(const Var& a, F f, DF df) {
    Tensor out(a.val().shape());
    for (int64_t i = 0; i < out.numel(); ++i) out[i] = f(a.val()[i]);
    return make_op(std::move(out), {a}, [df](Node& n) {
        if (!n.parents[0]->requires_grad) return;
        const Tensor& x = n.parents[0]->value;
        Tensor contrib(x.shape());
        for (int64_t i = 0; i < x.numel(); ++i) contrib[i] = n.grad[i] * df(x[i], n.value[i]);
        accum(n.parents[0], contrib);
    });
}

Var vexp(const Var& a) {
    return unary_op(a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Var vexp_clamped(const Var& a, double lo, double hi) {
    return unary_op(
        a, [lo, hi](double x) { return std::clamp(std::exp(x), lo, hi); },
        [lo, hi](double, double y) { return (y > lo && y < hi) ? y : 0.0; });
}

Var vlog(const Var& a) {
    return unary_op(a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

Var vsqrt(const Var& a) {
    return unary_op(a, [](double x) { return std::sqrt(x); },
                    [](double, double y) { return 0.5 / y; });
}

Var vabs(const Var& a) {
    return unary_op(a, [](double x) { return std::fabs(x); },
                    [](double x, double) { return x > 0 ? 1.0 : (x < 0 ? -1.0 : 0.0); });
}

Var square(const Var& a) {
    return unary_op(a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

Var sigmoid(const Var& a) {
    return unary_op(a, [](double x) { return 1.0 / (1.0 + std::exp(-x)); },
                    [](double, double y) { return y * (1.0 - y); });
}

Var vtanh(const Var& a) {
    return unary_op(a, [](double x) { return std::tanh(x); },
                    [](double, double y) { return 1.0 - y * y; });
}

Var silu(const Var& a) {
    return unary_op(
        a, [](double x) { return x / (1.0 + std::exp(-x)); },
        [](double x, double) {
            double s = 1.0 / (1.0 + std::exp(-x));
            return s * (1.0 + x * (1.0 - s));
        });
}

Var relu(const Var& a) {
    return unary_op(a, [](double x) { return x > 0 ? x : 0.0; },
                    [](double x, double) { return x > 0 ? 1.0 : 0.0; });
}

Var leaky_relu(const Var& a, double slope) {
    return unary_op(a, [slope](double x) { return x > 0 ? x : slope * x; },
                    [slope](double x, double) { return x > 0 ? 1.0 : slope; });
}

namespace {
constexpr double inv_sqrt2 = 0.7071067811865475244;
constexpr double inv_sqrt2pi = 0.3989422804014326779;
}  // namespace

Var gelu(const Var& a) {
    return unary_op(
        a, [](double x) { return 0.5 * x * (1.0 + std::erf(x * inv_sqrt2)); },
        [](double x, double) {
            return 0.5 * (1.0 + std::erf(x * inv_sqrt2)) + x * inv_sqrt2pi * std::exp(-0.5 * x * x);
        });
}

Var softplus(const Var& a) {
    return unary_op(
        a, [](double x) { return x > 30.0 ? x : std::log1p(std::exp(x)); },
        [](double x, double) { return 1.0 / (1.0 + std::exp(-x)); });
}

// ---------------------------------------------------------------- reductions

Var sum_all(const Var& a) {
    double s = 0.0;
    for (int64_t i = 0; i < a.val().numel(); ++i) s += a.val()[i];
    return make_op(Tensor::scalar(s), {a}, [](Node& n) {
        if (!n.parents[0]->requires_grad) return;
        Tensor contrib(n.parents[0]->value.shape(), n.grad[0]);
        accum(n.parents[0], contrib);
    });
}

Var mean_all(const Var& a) {
    int64_t m = a.val().numel();
    return vscale(sum_all(a), 1.0 / static_cast<double>(m));
}

Var mse_loss(const Var& a, const Var& b) {
    Var d = vsub(a, b);
    return mean_all(square(d));
}

Var l1_loss(const Var& a, const Var& b) { return mean_all(vabs(vsub(a, b))); }

// ---------------------------------------------------------------- shape

Var reshape(const Var& a, std::vector<int64_t> shape) {
    Tensor out = a.val().reshaped(shape);
    return make_op(std::move(out), {a}, [](Node& n) {
        if (!n.parents[0]->requires_grad) return;
        accum(n.parents[0], n.grad.reshaped(n.parents[0]->value.shape()));
    });
}

static std::vector<int64_t> strides_of(const std::vector<int64_t>& shape) {
    std::vector<int64_t> st(shape.size(), 1);
    for (int i = static_cast<int>(shape.size()) - 2; i >= 0; --i) st[i] = st[i + 1] * shape[i + 1];
    return st;
}

Tensor permute_tensor(const Tensor& a, const std::vector<int>& axes) {
    int r = a.rank();
    if (static_cast<int>(axes.size()) != r) throw RankError("permute: axes size mismatch");
    std::vector<int64_t> out_shape(r);
    for (int i = 0; i < r; ++i) out_shape[i] = a.dim(axes[i]);
    Tensor out(out_shape);
    auto in_st = strides_of(a.shape());
    auto out_st = strides_of(out_shape);
    // stride of output axis i in the input buffer
    std::vector<int64_t> map_st(r);
    for (int i = 0; i < r; ++i) map_st[i] = in_st[axes[i]];
    int64_t n = a.numel();
    std::vector<int64_t> idx(r, 0);
    for (int64_t o = 0; o < n; ++o) {
        int64_t src = 0;
        for (int i = 0; i < r; ++i) src += idx[i] * map_st[i];
        out[o] = a[src];
        for (int i = r - 1; i >= 0; --i) {
            if (++idx[i] < out_shape[i]) break;
            idx[i] = 0;
        }
    }
    return out;
}

Var permute(const Var& a, std::vector<int> axes) {
    Tensor out = permute_tensor(a.val(), axes);
    std::vector<int> inv(axes.size());
    for (size_t i = 0; i < axes.size(); ++i) inv[axes[i]] = static_cast<int>(i);
    return make_op(std::move(out), {a}, [inv](Node& n) {
        if (!n.parents[0]->requires_grad) return;
        accum(n.parents[0], permute_tensor(n.grad, inv));
    });
}

Tensor slice_tensor(const Tensor& a, int axis, int64_t start, int64_t len) {
    int r = a.rank();
    if (axis < 0) axis += r;
    if (axis < 0 || axis >= r) throw RankError("slice: bad axis");
    if (start < 0 || len < 0 || start + len > a.dim(axis)) throw RangeError("slice out of bounds");
    std::vector<int64_t> out_shape = a.shape();
    out_shape[axis] = len;
    Tensor out(out_shape);
    int64_t outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= a.dim(i);
    for (int i = axis + 1; i < r; ++i) inner *= a.dim(i);
    int64_t in_axis = a.dim(axis);
    for (int64_t o = 0; o < outer; ++o)
        for (int64_t j = 0; j < len; ++j) {
            const double* src = a.data() + (o * in_axis + start + j) * inner;
            double* dst = out.data() + (o * len + j) * inner;
            std::copy(src, src + inner, dst);
        }
    return out;
}

Var slice_axis(const Var& a, int axis, int64_t start, int64_t len) {
    if (axis < 0) axis += a.val().rank();
    Tensor out = slice_tensor(a.val(), axis, start, len);
    return make_op(std::move(out), {a}, [axis, start, len](Node& n) {
        if (!n.parents[0]->requires_grad) return;
        Tensor& g = n.parents[0]->grad_ref();
        const Tensor& in = n.parents[0]->value;
        int r = in.rank();
        int64_t outer = 1, inner = 1;
        for (int i = 0; i < axis; ++i) outer *= in.dim(i);
        for (int i = axis + 1; i < r; ++i) inner *= in.dim(i);
        int64_t in_axis = in.dim(axis);
        for (int64_t o = 0; o < outer; ++o)
            for (int64_t j = 0; j < len; ++j) {
                double* dst = g.data() + (o * in_axis + start + j) * inner;
                const double* src = n.grad.data() + (o * len + j) * inner;
                for (int64_t i = 0; i < inner; ++i) dst[i] += src[i];
            }
    });
}

Var concat(const std::vector<Var>& parts, int axis) {
    if (parts.empty()) throw EmptyInput("concat of zero tensors");
    int r = parts[0].val().rank();
    if (axis < 0) axis += r;
    std::vector<int64_t> out_shape = parts[0].val().shape();
    int64_t total = 0;
    for (const auto& p : parts) {
        if (p.val().rank() != r) throw RankError("concat rank mismatch");
        for (int i = 0; i < r; ++i)
            if (i != axis && p.val().dim(i) != out_shape[i])
                throw ShapeMismatch("concat: " + p.val().shape_str());
        total += p.val().dim(axis);
    }
    out_shape[axis] = total;
    Tensor out(out_shape);
    int64_t outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= out_shape[i];
    for (int i = axis + 1; i < r; ++i) inner *= out_shape[i];
    std::vector<int64_t> lens;
    int64_t off = 0;
    for (const auto& p : parts) {
        int64_t len = p.val().dim(axis);
        lens.push_back(len);
        for (int64_t o = 0; o < outer; ++o) {
            const double* src = p.val().data() + o * len * inner;
            double* dst = out.data() + (o * total + off) * inner;
            std::copy(src, src + len * inner, dst);
        }
        off += len;
    }
    return make_op(std::move(out), parts, [axis, lens](Node& n) {
        const auto& out_shape = n.value.shape();
        int r = static_cast<int>(out_shape.size());
        int64_t outer = 1, inner = 1;
        for (int i = 0; i < axis; ++i) outer *= out_shape[i];
        for (int i = axis + 1; i < r; ++i) inner *= out_shape[i];
        int64_t total = out_shape[axis];
        int64_t off = 0;
        for (size_t pi = 0; pi < n.parents.size(); ++pi) {
            int64_t len = lens[pi];
            if (n.parents[pi]->requires_grad) {
                Tensor& g = n.parents[pi]->grad_ref();
                for (int64_t o = 0; o < outer; ++o) {
                    double* dst = g.data() + o * len * inner;
                    const double* src = n.grad.data() + (o * total + off) * inner;
                    for (int64_t i = 0; i < len * inner; ++i) dst[i] += src[i];
                }
            }
            off += len;
        }
    });
}

Var detach(const Var& a) { return constant(a.val()); }

// ---------------------------------------------------------------- linalg

Var matmul(const Var& a, const Var& b) {
    Tensor out = matmul2d(a.val(), b.val());
    return make_op(std::move(out), {a, b}, [](Node& n) {
        const Tensor& A = n.parents[0]->value;
        const Tensor& B = n.parents[1]->value;
        CMapM mA(A.data(), A.dim(0), A.dim(1));
        CMapM mB(B.data(), B.dim(0), B.dim(1));
        CMapM mG(n.grad.data(), n.grad.dim(0), n.grad.dim(1));
        if (n.parents[0]->requires_grad) {
            Tensor& gA = n.parents[0]->grad_ref();
            MapM m(gA.data(), gA.dim(0), gA.dim(1));
            m.noalias() += mG * mB.transpose();
        }
        if (n.parents[1]->requires_grad) {
            Tensor& gB = n.parents[1]->grad_ref();
            MapM m(gB.data(), gB.dim(0), gB.dim(1));
            m.noalias() += mA.transpose() * mG;
        }
    });
}

Var bmm(const Var& a, const Var& b) {
    const Tensor& A = a.val();
    const Tensor& B = b.val();
    if (A.rank() != 3 || B.rank() != 3 || A.dim(0) != B.dim(0) || A.dim(2) != B.dim(1))
        throw ShapeMismatch("bmm: " + A.shape_str() + " x " + B.shape_str());
    int64_t nb = A.dim(0), M = A.dim(1), K = A.dim(2), N = B.dim(2);
    Tensor out({nb, M, N});
    for (int64_t i = 0; i < nb; ++i) {
        CMapM mA(A.data() + i * M * K, M, K);
        CMapM mB(B.data() + i * K * N, K, N);
        MapM mO(out.data() + i * M * N, M, N);
        mO.noalias() = mA * mB;
    }
    return make_op(std::move(out), {a, b}, [nb, M, K, N](Node& n) {
        const Tensor& A = n.parents[0]->value;
        const Tensor& B = n.parents[1]->value;
        for (int64_t i = 0; i < nb; ++i) {
            CMapM mA(A.data() + i * M * K, M, K);
            CMapM mB(B.data() + i * K * N, K, N);
            CMapM mG(n.grad.data() + i * M * N, M, N);
            if (n.parents[0]->requires_grad) {
                MapM m(n.parents[0]->grad_ref().data() + i * M * K, M, K);
                m.noalias() += mG * mB.transpose();
            }
            if (n.parents[1]->requires_grad) {
                MapM m(n.parents[1]->grad_ref().data() + i * K * N, K, N);
                m.noalias() += mA.transpose() * mG;
            }
        }
    });
}

Var affine(const Var& x, const Var& w, const Var& b) {
    const Tensor& X = x.val();
    const Tensor& W = w.val();
    const Tensor& B = b.val();
    if (X.rank() != 2 || W.rank() != 2 || X.dim(1) != W.dim(0) || B.rank() != 1 ||
        B.dim(0) != W.dim(1))
        throw ShapeMismatch("affine: " + X.shape_str() + " x " + W.shape_str() + " + " + B.shape_str());
    Tensor out = matmul2d(X, W);
    int64_t N = out.dim(0), M = out.dim(1);
    for (int64_t i = 0; i < N; ++i)
        for (int64_t j = 0; j < M; ++j) out[i * M + j] += B[j];
    return make_op(std::move(out), {x, w, b}, [N, M](Node& n) {
        const Tensor& X = n.parents[0]->value;
        const Tensor& W = n.parents[1]->value;
        CMapM mX(X.data(), X.dim(0), X.dim(1));
        CMapM mW(W.data(), W.dim(0), W.dim(1));
        CMapM mG(n.grad.data(), N, M);
        if (n.parents[0]->requires_grad) {
            MapM m(n.parents[0]->grad_ref().data(), X.dim(0), X.dim(1));
            m.noalias() += mG * mW.transpose();
        }
        if (n.parents[1]->requires_grad) {
            MapM m(n.parents[1]->grad_ref().data(), W.dim(0), W.dim(1));
            m.noalias() += mX.transpose() * mG;
        }
        if (n.parents[2]->requires_grad) {
            Tensor& gb = n.parents[2]->grad_ref();
            for (int64_t i = 0; i < N; ++i)
                for (int64_t j = 0; j < M; ++j) gb[j] += n.grad[i * M + j];
        }
    });
}

// ---------------------------------------------------------------- broadcast

Var add_bias_channel(const Var& x, const Var& b) {
    const Tensor& X = x.val();
    const Tensor& B = b.val();
    if (B.rank() != 1 || X.rank() < 2 || X.dim(1) != B.dim(0))
        throw ShapeMismatch("add_bias_channel: " + X.shape_str() + " + " + B.shape_str());
    int64_t nb = X.dim(0), C = X.dim(1), S = X.numel() / (nb * C);
    Tensor out(X.shape());
    for (int64_t i = 0; i < nb; ++i)
        for (int64_t c = 0; c < C; ++c) {
            const double bias = B[c];
            const double* src = X.data() + (i * C + c) * S;
            double* dst = out.data() + (i * C + c) * S;
            for (int64_t s = 0; s < S; ++s) dst[s] = src[s] + bias;
        }
    return make_op(std::move(out), {x, b}, [nb, C, S](Node& n) {
        if (n.parents[0]->requires_grad) accum(n.parents[0], n.grad);
        if (n.parents[1]->requires_grad) {
            Tensor& gb = n.parents[1]->grad_ref();
            for (int64_t i = 0; i < nb; ++i)
                for (int64_t c = 0; c < C; ++c) {
                    const double* g = n.grad.data() + (i * C + c) * S;
                    double acc = 0.0;
                    for (int64_t s = 0; s < S; ++s) acc += g[s];
                    gb[c] += acc;
                }
        }
    });
}

Var add_spatial_broadcast(const Var& x, const Var& v) {
    const Tensor& X = x.val();
    const Tensor& V = v.val();
    if (V.rank() != 2 || X.dim(0) != V.dim(0) || X.dim(1) != V.dim(1))
        throw ShapeMismatch("add_spatial_broadcast: " + X.shape_str() + " + " + V.shape_str());
    int64_t nb = X.dim(0), C = X.dim(1), S = X.numel() / (nb * C);
    Tensor out(X.shape());
    for (int64_t i = 0; i < nb * C; ++i) {
        const double add = V[i];
        const double* src = X.data() + i * S;
        double* dst = out.data() + i * S;
        for (int64_t s = 0; s < S; ++s) dst[s] = src[s] + add;
    }
    return make_op(std::move(out), {x, v}, [nb, C, S](Node& n) {
        if (n.parents[0]->requires_grad) accum(n.parents[0], n.grad);
        if (n.parents[1]->requires_grad) {
            Tensor& gv = n.parents[1]->grad_ref();
            for (int64_t i = 0; i < nb * C; ++i) {
                const double* g = n.grad.data() + i * S;
                double acc = 0.0;
                for (int64_t s = 0; s < S; ++s) acc += g[s];
                gv[i] += acc;
            }
        }
    });
}

Var mul_batch_scalars(const Var& x, const Tensor& s) {
    const Tensor& X = x.val();
    if (s.rank() != 1 || s.dim(0) != X.dim(0))
        throw ShapeMismatch("mul_batch_scalars: " + X.shape_str() + " * " + s.shape_str());
    int64_t nb = X.dim(0), S = X.numel() / nb;
    Tensor out(X.shape());
    for (int64_t i = 0; i < nb; ++i)
        for (int64_t j = 0; j < S; ++j) out[i * S + j] = X[i * S + j] * s[i];
    Tensor scal = s;
    return make_op(std::move(out), {x}, [nb, S, scal](Node& n) {
        if (!n.parents[0]->requires_grad) return;
        Tensor& g = n.parents[0]->grad_ref();
        for (int64_t i = 0; i < nb; ++i)
            for (int64_t j = 0; j < S; ++j) g[i * S + j] += n.grad[i * S + j] * scal[i];
    });
}

}  // namespace genimg

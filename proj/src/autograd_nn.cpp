#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <numbers>

#include "genimg/autograd.hpp"
#include "genimg/errors.hpp"
#include "genimg/foundation.hpp"

namespace genimg {

using detail::Node;
using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapM = Eigen::Map<Mat>;
using CMapM = Eigen::Map<const Mat>;

Var make_op(Tensor value, std::vector<Var> parents, std::function<void(Node&)> backward);

namespace {

void accum(const std::shared_ptr<Node>& p, const Tensor& contrib) {
    if (!p->requires_grad) return;
    Tensor& g = p->grad_ref();
    for (int64_t i = 0; i < g.numel(); ++i) g[i] += contrib[i];
}

// ------------------------------------------------------------------- conv

struct ConvDims {
    int k = 2;  // spatial rank
    int64_t B = 0, Cin = 0, Cout = 0;
    int64_t in[3] = {1, 1, 1}, ker[3] = {1, 1, 1}, out[3] = {1, 1, 1};
    int64_t stride = 1, pad = 0;

    int64_t out_numel() const { return out[0] * out[1] * out[2]; }
    int64_t rows() const { return B * out_numel(); }
    int64_t cols() const { return Cin * ker[0] * ker[1] * ker[2]; }
};

ConvDims conv_dims(const Tensor& x, const Tensor& w, int64_t stride, int64_t pad) {
    ConvDims d;
    d.k = w.rank() - 2;
    if (d.k != 2 && d.k != 3) throw RankError("conv weight must have rank 4 or 5, got " + w.shape_str());
    if (x.rank() != w.rank())
        throw RankError("conv input rank " + x.shape_str() + " vs weight " + w.shape_str());
    if (x.dim(1) != w.dim(1))
        throw ShapeMismatch("conv channels: input " + x.shape_str() + " weight " + w.shape_str());
    if (stride < 1 || pad < 0) throw RangeError("conv: bad stride/pad");
    d.B = x.dim(0);
    d.Cin = x.dim(1);
    d.Cout = w.dim(0);
    d.stride = stride;
    d.pad = pad;
    for (int i = 0; i < d.k; ++i) {
        d.in[i] = x.dim(2 + i);
        d.ker[i] = w.dim(2 + i);
        int64_t span = d.in[i] + 2 * pad - d.ker[i];
        if (span < 0)
            throw InputTooSmall("conv: input " + x.shape_str() + " smaller than kernel " + w.shape_str());
        d.out[i] = span / stride + 1;
    }
    return d;
}

Tensor im2col(const Tensor& x, const ConvDims& d) {
    Tensor cols({d.rows(), d.cols()});
    const int64_t s = d.stride, p = d.pad;
    if (d.k == 2) {
        const int64_t S1 = d.in[0], S2 = d.in[1], K1 = d.ker[0], K2 = d.ker[1];
        int64_t row = 0;
        for (int64_t b = 0; b < d.B; ++b)
            for (int64_t o1 = 0; o1 < d.out[0]; ++o1)
                for (int64_t o2 = 0; o2 < d.out[1]; ++o2, ++row) {
                    double* dst = cols.data() + row * d.cols();
                    for (int64_t c = 0; c < d.Cin; ++c)
                        for (int64_t k1 = 0; k1 < K1; ++k1) {
                            int64_t i1 = o1 * s - p + k1;
                            const bool ok1 = i1 >= 0 && i1 < S1;
                            const double* base = ok1 ? x.data() + ((b * d.Cin + c) * S1 + i1) * S2 : nullptr;
                            for (int64_t k2 = 0; k2 < K2; ++k2, ++dst) {
                                int64_t i2 = o2 * s - p + k2;
                                *dst = (ok1 && i2 >= 0 && i2 < S2) ? base[i2] : 0.0;
                            }
                        }
                }
    } else {
        const int64_t S1 = d.in[0], S2 = d.in[1], S3 = d.in[2];
        const int64_t K1 = d.ker[0], K2 = d.ker[1], K3 = d.ker[2];
        int64_t row = 0;
        for (int64_t b = 0; b < d.B; ++b)
            for (int64_t o1 = 0; o1 < d.out[0]; ++o1)
                for (int64_t o2 = 0; o2 < d.out[1]; ++o2)
                    for (int64_t o3 = 0; o3 < d.out[2]; ++o3, ++row) {
                        double* dst = cols.data() + row * d.cols();
                        for (int64_t c = 0; c < d.Cin; ++c)
                            for (int64_t k1 = 0; k1 < K1; ++k1) {
                                int64_t i1 = o1 * s - p + k1;
                                const bool ok1 = i1 >= 0 && i1 < S1;
                                for (int64_t k2 = 0; k2 < K2; ++k2) {
                                    int64_t i2 = o2 * s - p + k2;
                                    const bool ok2 = ok1 && i2 >= 0 && i2 < S2;
                                    const double* base =
                                        ok2 ? x.data() + (((b * d.Cin + c) * S1 + i1) * S2 + i2) * S3
                                            : nullptr;
                                    for (int64_t k3 = 0; k3 < K3; ++k3, ++dst) {
                                        int64_t i3 = o3 * s - p + k3;
                                        *dst = (ok2 && i3 >= 0 && i3 < S3) ? base[i3] : 0.0;
                                    }
                                }
                            }
                    }
    }
    return cols;
}

void col2im_add(const Tensor& dcols, const ConvDims& d, Tensor& gx) {
    const int64_t s = d.stride, p = d.pad;
    if (d.k == 2) {
        const int64_t S1 = d.in[0], S2 = d.in[1], K1 = d.ker[0], K2 = d.ker[1];
        int64_t row = 0;
        for (int64_t b = 0; b < d.B; ++b)
            for (int64_t o1 = 0; o1 < d.out[0]; ++o1)
                for (int64_t o2 = 0; o2 < d.out[1]; ++o2, ++row) {
                    const double* src = dcols.data() + row * d.cols();
                    for (int64_t c = 0; c < d.Cin; ++c)
                        for (int64_t k1 = 0; k1 < K1; ++k1) {
                            int64_t i1 = o1 * s - p + k1;
                            const bool ok1 = i1 >= 0 && i1 < S1;
                            double* base = ok1 ? gx.data() + ((b * d.Cin + c) * S1 + i1) * S2 : nullptr;
                            for (int64_t k2 = 0; k2 < K2; ++k2, ++src) {
                                int64_t i2 = o2 * s - p + k2;
                                if (ok1 && i2 >= 0 && i2 < S2) base[i2] += *src;
                            }
                        }
                }
    } else {
        const int64_t S1 = d.in[0], S2 = d.in[1], S3 = d.in[2];
        const int64_t K1 = d.ker[0], K2 = d.ker[1], K3 = d.ker[2];
        int64_t row = 0;
        for (int64_t b = 0; b < d.B; ++b)
            for (int64_t o1 = 0; o1 < d.out[0]; ++o1)
                for (int64_t o2 = 0; o2 < d.out[1]; ++o2)
                    for (int64_t o3 = 0; o3 < d.out[2]; ++o3, ++row) {
                        const double* src = dcols.data() + row * d.cols();
                        for (int64_t c = 0; c < d.Cin; ++c)
                            for (int64_t k1 = 0; k1 < K1; ++k1) {
                                int64_t i1 = o1 * s - p + k1;
                                const bool ok1 = i1 >= 0 && i1 < S1;
                                for (int64_t k2 = 0; k2 < K2; ++k2) {
                                    int64_t i2 = o2 * s - p + k2;
                                    const bool ok2 = ok1 && i2 >= 0 && i2 < S2;
                                    double* base =
                                        ok2 ? gx.data() + (((b * d.Cin + c) * S1 + i1) * S2 + i2) * S3
                                            : nullptr;
                                    for (int64_t k3 = 0; k3 < K3; ++k3, ++src) {
                                        int64_t i3 = o3 * s - p + k3;
                                        if (ok2 && i3 >= 0 && i3 < S3) base[i3] += *src;
                                    }
                                }
                            }
                    }
    }
}

}  // namespace

Var conv_nd(const Var& x, const Var& w, const Var& b, int64_t stride, int64_t pad) {
    ConvDims d = conv_dims(x.val(), w.val(), stride, pad);
    if (b.val().rank() != 1 || b.val().dim(0) != d.Cout)
        throw ShapeMismatch("conv bias " + b.val().shape_str() + " for weight " + w.val().shape_str());

    Tensor cols = im2col(x.val(), d);
    std::vector<int64_t> out_shape = {d.B, d.Cout};
    for (int i = 0; i < d.k; ++i) out_shape.push_back(d.out[i]);
    Tensor out(out_shape);

    // columns (R, K) x weight^T (K, Cout) -> (R, Cout); rows are (b, o...) positions
    const int64_t R = d.rows(), K = d.cols();
    {
        CMapM mc(cols.data(), R, K);
        CMapM mw(w.val().data(), d.Cout, K);
        Mat prod = mc * mw.transpose();  // (R, Cout)
        const int64_t On = d.out_numel();
        for (int64_t bb = 0; bb < d.B; ++bb)
            for (int64_t o = 0; o < On; ++o) {
                const int64_t row = bb * On + o;
                for (int64_t co = 0; co < d.Cout; ++co)
                    out[(bb * d.Cout + co) * On + o] = prod(row, co) + b.val()[co];
            }
    }

    return make_op(std::move(out), {x, w, b}, [d, R, K](Node& n) {
        const int64_t On = d.out_numel();
        // regroup upstream grad (B, Cout, O...) as (R, Cout)
        Tensor gmat({R, d.Cout});
        for (int64_t bb = 0; bb < d.B; ++bb)
            for (int64_t co = 0; co < d.Cout; ++co)
                for (int64_t o = 0; o < On; ++o)
                    gmat[(bb * On + o) * d.Cout + co] = n.grad[(bb * d.Cout + co) * On + o];
        CMapM mg(gmat.data(), R, d.Cout);

        if (n.parents[2]->requires_grad) {
            Tensor& gb = n.parents[2]->grad_ref();
            for (int64_t r = 0; r < R; ++r)
                for (int64_t co = 0; co < d.Cout; ++co) gb[co] += gmat[r * d.Cout + co];
        }
        if (n.parents[1]->requires_grad) {
            Tensor cols = im2col(n.parents[0]->value, d);  // recomputed to save memory
            CMapM mc(cols.data(), R, K);
            MapM mw(n.parents[1]->grad_ref().data(), d.Cout, K);
            mw.noalias() += mg.transpose() * mc;
        }
        if (n.parents[0]->requires_grad) {
            CMapM mw(n.parents[1]->value.data(), d.Cout, K);
            Tensor dcols({R, K});
            MapM mdc(dcols.data(), R, K);
            mdc.noalias() = mg * mw;
            col2im_add(dcols, d, n.parents[0]->grad_ref());
        }
    });
}

// ------------------------------------------------------------------- norms

Var group_norm(const Var& x, const Var& gamma, const Var& beta, int groups, double eps) {
    const Tensor& X = x.val();
    if (X.rank() < 2) throw RankError("group_norm input " + X.shape_str());
    const int64_t B = X.dim(0), C = X.dim(1);
    if (groups < 1 || C % groups != 0)
        throw DivisibilityError("group_norm: " + std::to_string(C) + " channels, " +
                                std::to_string(groups) + " groups");
    if (gamma.val().rank() != 1 || gamma.val().dim(0) != C || !gamma.val().same_shape(beta.val()))
        throw ShapeMismatch("group_norm affine params for " + X.shape_str());
    const int64_t S = X.numel() / (B * C);
    const int64_t Cg = C / groups;
    const int64_t m = Cg * S;  // elements per (batch, group)

    Tensor xhat(X.shape());
    std::vector<double> inv_std(static_cast<size_t>(B) * groups);
    Tensor out(X.shape());
    for (int64_t bb = 0; bb < B; ++bb)
        for (int64_t g = 0; g < groups; ++g) {
            const double* src = X.data() + (bb * C + g * Cg) * S;
            double mu = 0.0;
            for (int64_t i = 0; i < m; ++i) mu += src[i];
            mu /= static_cast<double>(m);
            double var = 0.0;
            for (int64_t i = 0; i < m; ++i) {
                double dd = src[i] - mu;
                var += dd * dd;
            }
            var /= static_cast<double>(m);
            const double is = 1.0 / std::sqrt(var + eps);
            inv_std[bb * groups + g] = is;
            double* xh = xhat.data() + (bb * C + g * Cg) * S;
            double* dst = out.data() + (bb * C + g * Cg) * S;
            for (int64_t cg = 0; cg < Cg; ++cg) {
                const int64_t c = g * Cg + cg;
                const double ga = gamma.val()[c], be = beta.val()[c];
                for (int64_t i = 0; i < S; ++i) {
                    const double h = (src[cg * S + i] - mu) * is;
                    xh[cg * S + i] = h;
                    dst[cg * S + i] = ga * h + be;
                }
            }
        }

    return make_op(std::move(out), {x, gamma, beta},
                   [B, C, S, Cg, m, groups, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node& n) {
                       const Tensor& G = n.grad;
                       const Tensor& ga = n.parents[1]->value;
                       if (n.parents[2]->requires_grad) {
                           Tensor& gb = n.parents[2]->grad_ref();
                           for (int64_t bb = 0; bb < B; ++bb)
                               for (int64_t c = 0; c < C; ++c) {
                                   const double* g = G.data() + (bb * C + c) * S;
                                   double acc = 0.0;
                                   for (int64_t i = 0; i < S; ++i) acc += g[i];
                                   gb[c] += acc;
                               }
                       }
                       if (n.parents[1]->requires_grad) {
                           Tensor& gg = n.parents[1]->grad_ref();
                           for (int64_t bb = 0; bb < B; ++bb)
                               for (int64_t c = 0; c < C; ++c) {
                                   const double* g = G.data() + (bb * C + c) * S;
                                   const double* xh = xhat.data() + (bb * C + c) * S;
                                   double acc = 0.0;
                                   for (int64_t i = 0; i < S; ++i) acc += g[i] * xh[i];
                                   gg[c] += acc;
                               }
                       }
                       if (n.parents[0]->requires_grad) {
                           Tensor& gx = n.parents[0]->grad_ref();
                           std::vector<double> gh(static_cast<size_t>(m));
                           for (int64_t bb = 0; bb < B; ++bb)
                               for (int64_t g = 0; g < groups; ++g) {
                                   const int64_t base = (bb * C + g * Cg) * S;
                                   double sum_gh = 0.0, sum_ghx = 0.0;
                                   for (int64_t cg = 0; cg < Cg; ++cg) {
                                       const double gac = ga[g * Cg + cg];
                                       for (int64_t i = 0; i < S; ++i) {
                                           const int64_t k = cg * S + i;
                                           const double v = G[base + k] * gac;
                                           gh[k] = v;
                                           sum_gh += v;
                                           sum_ghx += v * xhat[base + k];
                                       }
                                   }
                                   const double mean_gh = sum_gh / static_cast<double>(m);
                                   const double mean_ghx = sum_ghx / static_cast<double>(m);
                                   const double is = inv_std[bb * groups + g];
                                   for (int64_t k = 0; k < m; ++k)
                                       gx[base + k] += is * (gh[k] - mean_gh - xhat[base + k] * mean_ghx);
                               }
                       }
                   });
}

Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps) {
    const Tensor& X = x.val();
    if (X.rank() < 1) throw RankError("layer_norm input " + X.shape_str());
    const int64_t D = X.dim(-1);
    const int64_t R = X.numel() / D;
    if (gamma.val().rank() != 1 || gamma.val().dim(0) != D || !gamma.val().same_shape(beta.val()))
        throw ShapeMismatch("layer_norm affine params for " + X.shape_str());

    Tensor xhat(X.shape());
    std::vector<double> inv_std(static_cast<size_t>(R));
    Tensor out(X.shape());
    for (int64_t r = 0; r < R; ++r) {
        const double* src = X.data() + r * D;
        double mu = 0.0;
        for (int64_t i = 0; i < D; ++i) mu += src[i];
        mu /= static_cast<double>(D);
        double var = 0.0;
        for (int64_t i = 0; i < D; ++i) {
            double dd = src[i] - mu;
            var += dd * dd;
        }
        var /= static_cast<double>(D);
        const double is = 1.0 / std::sqrt(var + eps);
        inv_std[r] = is;
        for (int64_t i = 0; i < D; ++i) {
            const double h = (src[i] - mu) * is;
            xhat[r * D + i] = h;
            out[r * D + i] = gamma.val()[i] * h + beta.val()[i];
        }
    }

    return make_op(std::move(out), {x, gamma, beta},
                   [R, D, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node& n) {
                       const Tensor& G = n.grad;
                       const Tensor& ga = n.parents[1]->value;
                       if (n.parents[2]->requires_grad) {
                           Tensor& gb = n.parents[2]->grad_ref();
                           for (int64_t r = 0; r < R; ++r)
                               for (int64_t i = 0; i < D; ++i) gb[i] += G[r * D + i];
                       }
                       if (n.parents[1]->requires_grad) {
                           Tensor& gg = n.parents[1]->grad_ref();
                           for (int64_t r = 0; r < R; ++r)
                               for (int64_t i = 0; i < D; ++i) gg[i] += G[r * D + i] * xhat[r * D + i];
                       }
                       if (n.parents[0]->requires_grad) {
                           Tensor& gx = n.parents[0]->grad_ref();
                           for (int64_t r = 0; r < R; ++r) {
                               double sum_gh = 0.0, sum_ghx = 0.0;
                               for (int64_t i = 0; i < D; ++i) {
                                   const double v = G[r * D + i] * ga[i];
                                   sum_gh += v;
                                   sum_ghx += v * xhat[r * D + i];
                               }
                               const double mean_gh = sum_gh / static_cast<double>(D);
                               const double mean_ghx = sum_ghx / static_cast<double>(D);
                               const double is = inv_std[r];
                               for (int64_t i = 0; i < D; ++i) {
                                   const double v = G[r * D + i] * ga[i];
                                   gx[r * D + i] += is * (v - mean_gh - xhat[r * D + i] * mean_ghx);
                               }
                           }
                       }
                   });
}

// ------------------------------------------------------------------- softmax

Var softmax_lastdim(const Var& x) {
    const Tensor& X = x.val();
    const int64_t D = X.dim(-1);
    const int64_t R = X.numel() / D;
    Tensor out(X.shape());
    for (int64_t r = 0; r < R; ++r) {
        const double* src = X.data() + r * D;
        double mx = src[0];
        for (int64_t i = 1; i < D; ++i) mx = std::max(mx, src[i]);
        double z = 0.0;
        for (int64_t i = 0; i < D; ++i) z += std::exp(src[i] - mx);
        for (int64_t i = 0; i < D; ++i) out[r * D + i] = std::exp(src[i] - mx) / z;
    }
    return make_op(std::move(out), {x}, [R, D](Node& n) {
        if (!n.parents[0]->requires_grad) return;
        Tensor& gx = n.parents[0]->grad_ref();
        for (int64_t r = 0; r < R; ++r) {
            const double* y = n.value.data() + r * D;
            const double* g = n.grad.data() + r * D;
            double dot = 0.0;
            for (int64_t i = 0; i < D; ++i) dot += g[i] * y[i];
            for (int64_t i = 0; i < D; ++i) gx[r * D + i] += y[i] * (g[i] - dot);
        }
    });
}

Var log_softmax_lastdim(const Var& x) {
    const Tensor& X = x.val();
    const int64_t D = X.dim(-1);
    const int64_t R = X.numel() / D;
    Tensor out(X.shape());
    for (int64_t r = 0; r < R; ++r) {
        const double* src = X.data() + r * D;
        double mx = src[0];
        for (int64_t i = 1; i < D; ++i) mx = std::max(mx, src[i]);
        double z = 0.0;
        for (int64_t i = 0; i < D; ++i) z += std::exp(src[i] - mx);
        const double lz = mx + std::log(z);
        for (int64_t i = 0; i < D; ++i) out[r * D + i] = src[i] - lz;
    }
    return make_op(std::move(out), {x}, [R, D](Node& n) {
        if (!n.parents[0]->requires_grad) return;
        Tensor& gx = n.parents[0]->grad_ref();
        for (int64_t r = 0; r < R; ++r) {
            const double* y = n.value.data() + r * D;
            const double* g = n.grad.data() + r * D;
            double gsum = 0.0;
            for (int64_t i = 0; i < D; ++i) gsum += g[i];
            for (int64_t i = 0; i < D; ++i) gx[r * D + i] += g[i] - std::exp(y[i]) * gsum;
        }
    });
}

Var causal_masked_softmax(const Var& x) {
    const Tensor& X = x.val();
    if (X.rank() != 3 || X.dim(1) != X.dim(2))
        throw ShapeMismatch("causal_masked_softmax expects (rows, L, L), got " + X.shape_str());
    const int64_t R = X.dim(0), L = X.dim(1);
    Tensor out(X.shape());  // zero-initialised; masked entries stay exactly 0
    for (int64_t r = 0; r < R; ++r)
        for (int64_t i = 0; i < L; ++i) {
            const double* src = X.data() + (r * L + i) * L;
            double* dst = out.data() + (r * L + i) * L;
            // softmax over the causal prefix j <= i only; future positions never
            // enter the arithmetic, so results are invariant to sequence extension
            double mx = src[0];
            for (int64_t j = 1; j <= i; ++j) mx = std::max(mx, src[j]);
            double z = 0.0;
            for (int64_t j = 0; j <= i; ++j) z += std::exp(src[j] - mx);
            for (int64_t j = 0; j <= i; ++j) dst[j] = std::exp(src[j] - mx) / z;
        }
    return make_op(std::move(out), {x}, [R, L](Node& n) {
        if (!n.parents[0]->requires_grad) return;
        Tensor& gx = n.parents[0]->grad_ref();
        for (int64_t r = 0; r < R; ++r)
            for (int64_t i = 0; i < L; ++i) {
                const double* y = n.value.data() + (r * L + i) * L;
                const double* g = n.grad.data() + (r * L + i) * L;
                double dot = 0.0;
                for (int64_t j = 0; j <= i; ++j) dot += g[j] * y[j];
                double* dst = gx.data() + (r * L + i) * L;
                for (int64_t j = 0; j <= i; ++j) dst[j] += y[j] * (g[j] - dot);
            }
    });
}

// ------------------------------------------------------------------- pool / resize

Tensor avg_pool_tensor(const Tensor& x, int64_t k) {
    int sr = spatial_rank(x);
    const int64_t B = x.dim(0), C = x.dim(1);
    int64_t in[3] = {1, 1, 1}, out[3] = {1, 1, 1};
    for (int i = 0; i < sr; ++i) {
        in[i] = x.dim(2 + i);
        out[i] = in[i] / k;
        if (out[i] < 1) throw InputTooSmall("avg_pool: " + x.shape_str());
    }
    std::vector<int64_t> out_shape = {B, C};
    for (int i = 0; i < sr; ++i) out_shape.push_back(out[i]);
    Tensor o(out_shape);
    const double inv = 1.0 / std::pow(static_cast<double>(k), sr);
    const int64_t in_sp = in[0] * in[1] * in[2];
    const int64_t out_sp = out[0] * out[1] * out[2];
    for (int64_t bc = 0; bc < B * C; ++bc) {
        const double* src = x.data() + bc * in_sp;
        double* dst = o.data() + bc * out_sp;
        if (sr == 2) {
            for (int64_t o1 = 0; o1 < out[0]; ++o1)
                for (int64_t o2 = 0; o2 < out[1]; ++o2) {
                    double acc = 0.0;
                    for (int64_t k1 = 0; k1 < k; ++k1)
                        for (int64_t k2 = 0; k2 < k; ++k2)
                            acc += src[(o1 * k + k1) * in[1] + o2 * k + k2];
                    dst[o1 * out[1] + o2] = acc * inv;
                }
        } else {
            for (int64_t o1 = 0; o1 < out[0]; ++o1)
                for (int64_t o2 = 0; o2 < out[1]; ++o2)
                    for (int64_t o3 = 0; o3 < out[2]; ++o3) {
                        double acc = 0.0;
                        for (int64_t k1 = 0; k1 < k; ++k1)
                            for (int64_t k2 = 0; k2 < k; ++k2)
                                for (int64_t k3 = 0; k3 < k; ++k3)
                                    acc += src[((o1 * k + k1) * in[1] + o2 * k + k2) * in[2] +
                                               o3 * k + k3];
                        dst[(o1 * out[1] + o2) * out[2] + o3] = acc * inv;
                    }
        }
    }
    return o;
}

Var avg_pool_nd(const Var& x, int64_t k) {
    Tensor out = avg_pool_tensor(x.val(), k);
    return make_op(std::move(out), {x}, [k](Node& n) {
        if (!n.parents[0]->requires_grad) return;
        const Tensor& X = n.parents[0]->value;
        Tensor& gx = n.parents[0]->grad_ref();
        int sr = spatial_rank(X);
        const int64_t B = X.dim(0), C = X.dim(1);
        int64_t in[3] = {1, 1, 1}, out[3] = {1, 1, 1};
        for (int i = 0; i < sr; ++i) {
            in[i] = X.dim(2 + i);
            out[i] = in[i] / k;
        }
        const double inv = 1.0 / std::pow(static_cast<double>(k), sr);
        const int64_t in_sp = in[0] * in[1] * in[2];
        const int64_t out_sp = out[0] * out[1] * out[2];
        for (int64_t bc = 0; bc < B * C; ++bc) {
            double* dst = gx.data() + bc * in_sp;
            const double* src = n.grad.data() + bc * out_sp;
            if (sr == 2) {
                for (int64_t o1 = 0; o1 < out[0]; ++o1)
                    for (int64_t o2 = 0; o2 < out[1]; ++o2) {
                        const double g = src[o1 * out[1] + o2] * inv;
                        for (int64_t k1 = 0; k1 < k; ++k1)
                            for (int64_t k2 = 0; k2 < k; ++k2)
                                dst[(o1 * k + k1) * in[1] + o2 * k + k2] += g;
                    }
            } else {
                for (int64_t o1 = 0; o1 < out[0]; ++o1)
                    for (int64_t o2 = 0; o2 < out[1]; ++o2)
                        for (int64_t o3 = 0; o3 < out[2]; ++o3) {
                            const double g = src[(o1 * out[1] + o2) * out[2] + o3] * inv;
                            for (int64_t k1 = 0; k1 < k; ++k1)
                                for (int64_t k2 = 0; k2 < k; ++k2)
                                    for (int64_t k3 = 0; k3 < k; ++k3)
                                        dst[((o1 * k + k1) * in[1] + o2 * k + k2) * in[2] + o3 * k +
                                            k3] += g;
                        }
            }
        }
    });
}

Var global_avg_pool(const Var& x) {
    const Tensor& X = x.val();
    spatial_rank(X);  // rank validation
    const int64_t B = X.dim(0), C = X.dim(1);
    const int64_t sp = X.numel() / (B * C);
    Tensor out({B, C});
    const double inv = 1.0 / static_cast<double>(sp);
    for (int64_t bc = 0; bc < B * C; ++bc) {
        double acc = 0.0;
        const double* src = X.data() + bc * sp;
        for (int64_t i = 0; i < sp; ++i) acc += src[i];
        out[bc] = acc * inv;
    }
    return make_op(std::move(out), {x}, [sp, inv](Node& n) {
        if (!n.parents[0]->requires_grad) return;
        Tensor& gx = n.parents[0]->grad_ref();
        const int64_t BC = n.grad.numel();
        for (int64_t bc = 0; bc < BC; ++bc) {
            const double g = n.grad[bc] * inv;
            double* dst = gx.data() + bc * sp;
            for (int64_t i = 0; i < sp; ++i) dst[i] += g;
        }
    });
}

Tensor upsample_nearest_tensor(const Tensor& x, int64_t f) {
    int sr = spatial_rank(x);
    const int64_t B = x.dim(0), C = x.dim(1);
    int64_t in[3] = {1, 1, 1}, out[3] = {1, 1, 1};
    for (int i = 0; i < sr; ++i) {
        in[i] = x.dim(2 + i);
        out[i] = in[i] * f;
    }
    std::vector<int64_t> out_shape = {B, C};
    for (int i = 0; i < sr; ++i) out_shape.push_back(out[i]);
    Tensor o(out_shape);
    const int64_t in_sp = in[0] * in[1] * in[2];
    const int64_t out_sp = out[0] * out[1] * out[2];
    for (int64_t bc = 0; bc < B * C; ++bc) {
        const double* src = x.data() + bc * in_sp;
        double* dst = o.data() + bc * out_sp;
        if (sr == 2) {
            for (int64_t o1 = 0; o1 < out[0]; ++o1)
                for (int64_t o2 = 0; o2 < out[1]; ++o2)
                    dst[o1 * out[1] + o2] = src[(o1 / f) * in[1] + o2 / f];
        } else {
            for (int64_t o1 = 0; o1 < out[0]; ++o1)
                for (int64_t o2 = 0; o2 < out[1]; ++o2)
                    for (int64_t o3 = 0; o3 < out[2]; ++o3)
                        dst[(o1 * out[1] + o2) * out[2] + o3] =
                            src[((o1 / f) * in[1] + o2 / f) * in[2] + o3 / f];
        }
    }
    return o;
}

Var upsample_nearest_nd(const Var& x, int64_t f) {
    Tensor out = upsample_nearest_tensor(x.val(), f);
    return make_op(std::move(out), {x}, [f](Node& n) {
        if (!n.parents[0]->requires_grad) return;
        const Tensor& X = n.parents[0]->value;
        Tensor& gx = n.parents[0]->grad_ref();
        int sr = spatial_rank(X);
        const int64_t B = X.dim(0), C = X.dim(1);
        int64_t in[3] = {1, 1, 1}, out[3] = {1, 1, 1};
        for (int i = 0; i < sr; ++i) {
            in[i] = X.dim(2 + i);
            out[i] = in[i] * f;
        }
        const int64_t in_sp = in[0] * in[1] * in[2];
        const int64_t out_sp = out[0] * out[1] * out[2];
        for (int64_t bc = 0; bc < B * C; ++bc) {
            double* dst = gx.data() + bc * in_sp;
            const double* src = n.grad.data() + bc * out_sp;
            if (sr == 2) {
                for (int64_t o1 = 0; o1 < out[0]; ++o1)
                    for (int64_t o2 = 0; o2 < out[1]; ++o2)
                        dst[(o1 / f) * in[1] + o2 / f] += src[o1 * out[1] + o2];
            } else {
                for (int64_t o1 = 0; o1 < out[0]; ++o1)
                    for (int64_t o2 = 0; o2 < out[1]; ++o2)
                        for (int64_t o3 = 0; o3 < out[2]; ++o3)
                            dst[((o1 / f) * in[1] + o2 / f) * in[2] + o3 / f] +=
                                src[(o1 * out[1] + o2) * out[2] + o3];
            }
        }
    });
}

Tensor concat_channels_tensor(const Tensor& a, const Tensor& b) {
    if (a.rank() != b.rank() || a.dim(0) != b.dim(0))
        throw ShapeMismatch("concat_channels: " + a.shape_str() + " vs " + b.shape_str());
    for (int i = 2; i < a.rank(); ++i)
        if (a.dim(i) != b.dim(i))
            throw ShapeMismatch("concat_channels: " + a.shape_str() + " vs " + b.shape_str());
    std::vector<int64_t> out_shape = a.shape();
    out_shape[1] = a.dim(1) + b.dim(1);
    Tensor out(out_shape);
    const int64_t B = a.dim(0);
    const int64_t sa = a.numel() / B, sb = b.numel() / B;
    for (int64_t i = 0; i < B; ++i) {
        std::copy(a.data() + i * sa, a.data() + (i + 1) * sa, out.data() + i * (sa + sb));
        std::copy(b.data() + i * sb, b.data() + (i + 1) * sb, out.data() + i * (sa + sb) + sa);
    }
    return out;
}

// ------------------------------------------------------------------- lookup

Var embedding_lookup(const Var& table, const std::vector<int64_t>& idx) {
    const Tensor& T = table.val();
    if (T.rank() != 2) throw RankError("embedding table " + T.shape_str());
    const int64_t V = T.dim(0), D = T.dim(1);
    const int64_t N = static_cast<int64_t>(idx.size());
    Tensor out({N, D});
    for (int64_t i = 0; i < N; ++i) {
        if (idx[i] < 0 || idx[i] >= V)
            throw RangeError("embedding index " + std::to_string(idx[i]) + " outside table of " +
                             std::to_string(V));
        std::copy(T.data() + idx[i] * D, T.data() + (idx[i] + 1) * D, out.data() + i * D);
    }
    auto ids = idx;
    return make_op(std::move(out), {table}, [ids = std::move(ids), D](Node& n) {
        if (!n.parents[0]->requires_grad) return;
        Tensor& gt = n.parents[0]->grad_ref();
        for (size_t i = 0; i < ids.size(); ++i) {
            const double* g = n.grad.data() + static_cast<int64_t>(i) * D;
            double* dst = gt.data() + ids[i] * D;
            for (int64_t j = 0; j < D; ++j) dst[j] += g[j];
        }
    });
}

Var pick_lastdim(const Var& x, const std::vector<int64_t>& idx) {
    const Tensor& X = x.val();
    if (X.rank() != 2) throw RankError("pick_lastdim input " + X.shape_str());
    const int64_t N = X.dim(0), V = X.dim(1);
    if (static_cast<int64_t>(idx.size()) != N) throw ShapeMismatch("pick_lastdim index count");
    Tensor out({N});
    for (int64_t i = 0; i < N; ++i) {
        if (idx[i] < 0 || idx[i] >= V)
            throw RangeError("pick index " + std::to_string(idx[i]) + " outside " + std::to_string(V));
        out[i] = X[i * V + idx[i]];
    }
    auto ids = idx;
    return make_op(std::move(out), {x}, [ids = std::move(ids), V](Node& n) {
        if (!n.parents[0]->requires_grad) return;
        Tensor& gx = n.parents[0]->grad_ref();
        for (size_t i = 0; i < ids.size(); ++i)
            gx[static_cast<int64_t>(i) * V + ids[i]] += n.grad[static_cast<int64_t>(i)];
    });
}

// ------------------------------------------------------------------- spectral

namespace {

// multiply along `axis`: out[..., k, ...] = sum_n M[k, n] * in[..., n, ...]
Tensor apply_axis_matrix(const Tensor& x, int axis, const std::vector<double>& M, int64_t N) {
    int64_t outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= x.dim(i);
    for (int i = axis + 1; i < x.rank(); ++i) inner *= x.dim(i);
    Tensor out(x.shape());
    for (int64_t o = 0; o < outer; ++o) {
        const double* src = x.data() + o * N * inner;
        double* dst = out.data() + o * N * inner;
        for (int64_t k = 0; k < N; ++k) {
            const double* mr = M.data() + k * N;
            for (int64_t i = 0; i < inner; ++i) {
                double acc = 0.0;
                for (int64_t n = 0; n < N; ++n) acc += mr[n] * src[n * inner + i];
                dst[k * inner + i] = acc;
            }
        }
    }
    return out;
}

}  // namespace

Var dft_energy(const Var& d) {
    const Tensor& D = d.val();
    int sr = spatial_rank(D);
    const int64_t B = D.dim(0), C = D.dim(1);

    // orthonormal DFT along every spatial axis, tracked as (re, im)
    Tensor re = D;
    Tensor im(D.shape());
    for (int a = 0; a < sr; ++a) {
        const int axis = 2 + a;
        const int64_t N = D.dim(axis);
        std::vector<double> Cr(static_cast<size_t>(N) * N), Ci(static_cast<size_t>(N) * N);
        const double norm = 1.0 / std::sqrt(static_cast<double>(N));
        for (int64_t k = 0; k < N; ++k)
            for (int64_t n = 0; n < N; ++n) {
                const double ang = -2.0 * std::numbers::pi * static_cast<double>(k * n) /
                                   static_cast<double>(N);
                Cr[k * N + n] = std::cos(ang) * norm;
                Ci[k * N + n] = std::sin(ang) * norm;
            }
        Tensor re2 = sub(apply_axis_matrix(re, axis, Cr, N), apply_axis_matrix(im, axis, Ci, N));
        Tensor im2 = add(apply_axis_matrix(im, axis, Cr, N), apply_axis_matrix(re, axis, Ci, N));
        re = std::move(re2);
        im = std::move(im2);
    }
    double energy = 0.0;
    for (int64_t i = 0; i < re.numel(); ++i) energy += re[i] * re[i] + im[i] * im[i];
    const double denom = static_cast<double>(B * C);
    Tensor out = Tensor::scalar(energy / denom);

    // the DFT is unitary, so d/dd of total spectral energy is 2*d / (B*C)
    return make_op(std::move(out), {d}, [denom](Node& n) {
        if (!n.parents[0]->requires_grad) return;
        const Tensor& X = n.parents[0]->value;
        Tensor& gx = n.parents[0]->grad_ref();
        const double g = n.grad[0] * 2.0 / denom;
        for (int64_t i = 0; i < X.numel(); ++i) gx[i] += g * X[i];
    });
}

}  // namespace genimg

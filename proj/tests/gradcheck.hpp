#pragma once

#include <doctest.h>

#include <cmath>
#include <functional>
#include <vector>

#include "genimg/autograd.hpp"
#include "genimg/random.hpp"

namespace genimg::testing {

// Central finite differences against reverse-mode gradients. `f` must build a
// scalar loss from the given leaves. Checks every coordinate unless the
// parameter is large, in which case a deterministic stride covers ~max_per
// coordinates. rel_tol follows |a - n| <= tol * max(1, |a|, |n|).
inline void expect_gradcheck(const std::function<Var(std::vector<Var>&)>& f,
                             std::vector<Tensor> inits, double rel_tol = 1e-3,
                             double eps = 1e-5, int64_t max_per = 64) {
    std::vector<Var> leaves;
    leaves.reserve(inits.size());
    for (auto& t : inits) leaves.emplace_back(t, /*requires_grad=*/true);

    Var loss = f(leaves);
    REQUIRE(loss.val().numel() == 1);
    loss.backward();

    for (size_t p = 0; p < leaves.size(); ++p) {
        Tensor analytic = leaves[p].grad();
        Tensor& x = inits[p];
        const int64_t n = x.numel();
        const int64_t stride = n <= max_per ? 1 : n / max_per;
        for (int64_t i = 0; i < n; i += stride) {
            const double orig = x[i];
            double fp, fm;
            {
                NoGradGuard ng;
                x[i] = orig + eps;
                std::vector<Var> lv;
                for (auto& t : inits) lv.emplace_back(t, false);
                fp = f(lv).val()[0];
                x[i] = orig - eps;
                lv.clear();
                for (auto& t : inits) lv.emplace_back(t, false);
                fm = f(lv).val()[0];
                x[i] = orig;
            }
            const double numeric = (fp - fm) / (2.0 * eps);
            const double a = analytic[i];
            const double denom = std::max({1.0, std::fabs(a), std::fabs(numeric)});
            INFO("param " << p << " index " << i << " analytic " << a << " numeric " << numeric);
            CHECK(std::fabs(a - numeric) <= rel_tol * denom);
        }
    }
}

inline Tensor random_tensor(std::vector<int64_t> shape, uint64_t seed, double lo = -1.0,
                            double hi = 1.0) {
    Rng rng(RandomSource{seed, 0});
    Tensor t(shape);
    for (int64_t i = 0; i < t.numel(); ++i) t[i] = lo + (hi - lo) * rng.uniform();
    return t;
}

}  // namespace genimg::testing

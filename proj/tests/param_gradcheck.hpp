#pragma once

#include <functional>
#include <string>
#include <vector>

#include "doctest.h"
#include "genimg/autograd.hpp"
#include "genimg/nn.hpp"
#include "genimg/random.hpp"

namespace genimg::testing {

// Central-difference check of analytic parameter gradients: sample n_coords
// coordinates across the whole parameter map, perturb each in place, and
// compare. loss_fn must be deterministic (fix any noise draws outside it).
inline void check_param_grads(const std::function<Var()>& loss_fn, ParamMap& pm, uint64_t seed,
                              int n_coords = 10, double tol = 1e-3, double fd_eps = 1e-4) {
    pm.zero_grad();
    Var loss = loss_fn();
    REQUIRE(loss.val().numel() == 1);
    loss.backward();

    struct Coord {
        std::string name;
        int64_t idx;
    };
    std::vector<Coord> all;
    for (const std::string& name : pm.names()) {
        const int64_t n = pm.at(name).val().numel();
        for (int64_t i = 0; i < n; ++i) all.push_back({name, i});
    }
    REQUIRE(!all.empty());

    Rng rng(RandomSource{seed, 424242});
    for (int c = 0; c < n_coords; ++c) {
        const Coord& coord = all[static_cast<size_t>(rng.below(all.size()))];
        Var& p = pm.at(coord.name);
        const double analytic = p.grad()[coord.idx];
        Tensor& value = p.node()->value;
        const double orig = value[coord.idx];

        double fplus, fminus;
        {
            NoGradGuard ng;
            value[coord.idx] = orig + fd_eps;
            fplus = loss_fn().val().item();
            value[coord.idx] = orig - fd_eps;
            fminus = loss_fn().val().item();
            value[coord.idx] = orig;
        }
        const double numeric = (fplus - fminus) / (2.0 * fd_eps);
        const double scale = std::max({1.0, std::abs(analytic), std::abs(numeric)});
        INFO("param " << coord.name << "[" << coord.idx << "] analytic " << analytic
                      << " numeric " << numeric);
        CHECK(std::abs(analytic - numeric) <= tol * scale);
    }
}

}  // namespace genimg::testing

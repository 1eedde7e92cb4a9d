#include <doctest.h>

#include <cmath>
#include <numbers>

#include "genimg/random.hpp"
#include "genimg/schedulers.hpp"
#include "gradcheck.hpp"

using namespace genimg;
using genimg::testing::random_tensor;

TEST_SUITE_BEGIN("schedulers");

TEST_CASE("linear schedule, hand-computed cumulative products") {
    NoiseSchedule s = build_schedule(ScheduleProfile::linear, 2, 0.5, 0.5);
    CHECK(s.beta(1) == 0.5);
    CHECK(s.beta(2) == 0.5);
    CHECK(s.alpha_bar(0) == 1.0);
    CHECK(s.alpha_bar(1) == 0.5);
    CHECK(s.alpha_bar(2) == 0.25);

    NoiseSchedule tiny = build_schedule(ScheduleProfile::linear, 4, 1e-12, 1e-12);
    CHECK(tiny.alpha_bar(4) >= 1.0 - 5e-12);

    NoiseSchedule lin = build_schedule(ScheduleProfile::linear, 10, 0.1, 0.4);
    CHECK(lin.beta(1) == doctest::Approx(0.1).epsilon(1e-15));
    CHECK(lin.beta(10) == doctest::Approx(0.4).epsilon(1e-15));
    CHECK(lin.beta(4) == doctest::Approx(0.1 + 0.3 * 3.0 / 9.0).epsilon(1e-15));
}

TEST_CASE("scaled-linear endpoints hit the requested beta range") {
    NoiseSchedule s = build_schedule(ScheduleProfile::scaled_linear, 1000, 0.0015, 0.0205);
    CHECK(s.beta(1) == doctest::Approx(0.0015).epsilon(1e-12));
    CHECK(s.beta(1000) == doctest::Approx(0.0205).epsilon(1e-12));
    for (int t = 2; t <= 1000; ++t) CHECK(s.alpha_bar(t) < s.alpha_bar(t - 1));
    // sqrt(beta) is the evenly spaced quantity
    const double mid = std::sqrt(0.0015) + (std::sqrt(0.0205) - std::sqrt(0.0015)) * 499.0 / 999.0;
    CHECK(s.beta(500) == doctest::Approx(mid * mid).epsilon(1e-12));
}

TEST_CASE("cosine profile follows the squared-cosine alpha_bar curve") {
    const int T = 100;
    NoiseSchedule s = build_schedule(ScheduleProfile::cosine, T, 1e-4, 0.02);
    auto f = [&](double t) {
        double c = std::cos((t / T + 0.008) / 1.008 * std::numbers::pi / 2.0);
        return c * c;
    };
    // before clipping bites, alpha_bar must match f(t)/f(0)
    for (int t = 1; t <= T / 2; ++t)
        CHECK(s.alpha_bar(t) == doctest::Approx(f(t) / f(0)).epsilon(1e-9));
    // the tail clips at 0.999 (the raw ratio would exceed it)
    CHECK(s.beta(T) == 0.999);
    for (int t = 1; t <= T; ++t) {
        CHECK(s.beta(t) <= 0.999);
        CHECK(s.beta(t) > 0.0);
        CHECK(s.alpha_bar(t) < s.alpha_bar(t - 1));
    }
}

TEST_CASE("alpha_bar is strictly decreasing across random configurations") {
    Rng rng(RandomSource{2024, 0});
    for (int trial = 0; trial < 60; ++trial) {
        const int T = 1 + static_cast<int>(rng.below(400));
        double b0 = 1e-5 + rng.uniform() * 0.4;
        double b1 = b0 + rng.uniform() * (0.95 - b0);
        auto profile = static_cast<ScheduleProfile>(rng.below(3));
        NoiseSchedule s = build_schedule(profile, T, b0, b1);
        for (int t = 1; t <= T; ++t) {
            CHECK(s.alpha_bar(t) < s.alpha_bar(t - 1));
            CHECK(s.alpha_bar(t) > 0.0);
            CHECK(s.alpha_bar(t) <= 1.0);
        }
    }
    CHECK_THROWS_AS(build_schedule(ScheduleProfile::linear, 0, 0.1, 0.2), RangeError);
    CHECK_THROWS_AS(build_schedule(ScheduleProfile::linear, 10, 0.0, 0.2), RangeError);
    CHECK_THROWS_AS(build_schedule(ScheduleProfile::linear, 10, 0.3, 0.2), RangeError);
    CHECK_THROWS_AS(build_schedule(ScheduleProfile::linear, 10, 0.3, 1.0), RangeError);
}

TEST_CASE("timestep subsequences are even, descending, and cover both ends") {
    auto ts = timestep_subsequence(1000, 4);
    REQUIRE(ts.size() == 4);
    CHECK(ts[0] == 1000);
    CHECK(ts[1] == 667);
    CHECK(ts[2] == 334);
    CHECK(ts[3] == 1);

    auto all = timestep_subsequence(7, 7);
    for (int i = 0; i < 7; ++i) CHECK(all[i] == 7 - i);

    CHECK(timestep_subsequence(50, 1) == std::vector<int>{50});
    auto two = timestep_subsequence(50, 2);
    CHECK(two[0] == 50);
    CHECK(two[1] == 1);
    CHECK_THROWS_AS(timestep_subsequence(10, 11), RangeError);
    CHECK_THROWS_AS(timestep_subsequence(10, 0), RangeError);
}

TEST_CASE("add_noise closed forms") {
    NoiseSchedule s = build_schedule(ScheduleProfile::linear, 2, 0.5, 0.5);
    Tensor x0({1, 1, 2, 2}, 1.0);
    Tensor noise({1, 1, 2, 2}, 0.0);
    Tensor out = add_noise(x0, noise, 2, s);  // alpha_bar(2) = 0.25
    for (int64_t i = 0; i < 4; ++i) CHECK(out[i] == 0.5);

    NoiseSchedule tiny = build_schedule(ScheduleProfile::linear, 4, 1e-12, 1e-12);
    Tensor n2 = random_tensor({1, 1, 2, 2}, 7);
    Tensor near_x0 = add_noise(x0, n2, 4, tiny);
    for (int64_t i = 0; i < 4; ++i) CHECK(near_x0[i] == doctest::Approx(x0[i]).epsilon(1e-5));

    CHECK_THROWS_AS(add_noise(x0, Tensor({1, 1, 3, 3}), 1, s), ShapeMismatch);
    CHECK_THROWS_AS(add_noise(x0, noise, 3, s), TimestepOutOfRange);
    CHECK_THROWS_AS(add_noise(x0, noise, 0, s), TimestepOutOfRange);

    // per-item overload agrees with the scalar one
    Tensor batch = random_tensor({2, 1, 2, 2}, 8);
    Tensor bnoise = random_tensor({2, 1, 2, 2}, 9);
    Tensor got = add_noise(batch, bnoise, std::vector<int>{1, 2}, s);
    Tensor r1 = add_noise(slice_tensor(batch, 0, 0, 1), slice_tensor(bnoise, 0, 0, 1), 1, s);
    Tensor r2 = add_noise(slice_tensor(batch, 0, 1, 1), slice_tensor(bnoise, 0, 1, 1), 2, s);
    for (int64_t i = 0; i < 4; ++i) {
        CHECK(got[i] == r1[i]);
        CHECK(got[4 + i] == r2[i]);
    }
}

TEST_CASE("prediction conversions invert the forward identity for every t") {
    NoiseSchedule s = build_schedule(ScheduleProfile::scaled_linear, 40, 0.0015, 0.0205);
    Tensor x0 = random_tensor({2, 1, 3, 3}, 21);
    Tensor eps = random_tensor({2, 1, 3, 3}, 22);
    for (int t = 1; t <= 40; ++t) {
        Tensor x_t = add_noise(x0, eps, t, s);
        const double sa = std::sqrt(s.alpha_bar(t)), sb = std::sqrt(1.0 - s.alpha_bar(t));

        Converted ce = convert_prediction(eps, PredictionType::epsilon, x_t, t, s);
        Converted cs = convert_prediction(x0, PredictionType::sample, x_t, t, s);
        Tensor v = add_scaled(eps, sa, x0, -sb);  // oracle: v = sqrt(abar) eps - sqrt(1-abar) x0
        Converted cv = convert_prediction(v, PredictionType::v_prediction, x_t, t, s);

        for (int64_t i = 0; i < x0.numel(); ++i) {
            CHECK(ce.pred_x0[i] == doctest::Approx(x0[i]).epsilon(1e-6));
            CHECK(cs.pred_eps[i] == doctest::Approx(eps[i]).epsilon(1e-6));
            CHECK(cv.pred_x0[i] == doctest::Approx(x0[i]).epsilon(1e-6));
            CHECK(cv.pred_eps[i] == doctest::Approx(eps[i]).epsilon(1e-6));
            // mutually converted outputs agree pointwise on pred_x0
            CHECK(ce.pred_x0[i] == doctest::Approx(cs.pred_x0[i]).epsilon(1e-9));
            CHECK(ce.pred_x0[i] == doctest::Approx(cv.pred_x0[i]).epsilon(1e-9));
        }
        Tensor vt = velocity_target(x0, eps, t, s);
        for (int64_t i = 0; i < v.numel(); ++i) CHECK(vt[i] == v[i]);
    }
    CHECK_THROWS_AS(
        convert_prediction(Tensor({1, 1, 2, 2}), PredictionType::epsilon, Tensor({1, 1, 3, 3}), 1, s),
        ShapeMismatch);
}

TEST_CASE("ddpm step matches the hand-rolled scalar posterior") {
    NoiseSchedule s = build_schedule(ScheduleProfile::linear, 2, 0.5, 0.5);
    s.prediction_type = PredictionType::epsilon;
    Tensor x_t({1, 1, 1, 1}, std::vector<double>{1.0});
    Tensor eps_hat({1, 1, 1, 1}, std::vector<double>{0.3});

    // hand computation at t = 2: abar2 = 0.25, abar1 = 0.5, beta2 = alpha2 = 0.5
    const double pred_x0 = (1.0 - std::sqrt(0.75) * 0.3) / std::sqrt(0.25);
    const double mean = std::sqrt(0.5) * 0.5 / 0.75 * pred_x0 + std::sqrt(0.5) * 0.5 / 0.75 * 1.0;
    const double var = 0.5 * 0.5 / 0.75;

    Rng impl_rng(RandomSource{5, 0});
    Tensor got = ddpm_step(eps_hat, 2, x_t, s, impl_rng);
    Rng oracle_rng(RandomSource{5, 0});
    const double want = mean + std::sqrt(var) * oracle_rng.normal();
    CHECK(got[0] == doctest::Approx(want).epsilon(1e-12));

    CHECK_THROWS_AS(ddpm_step(eps_hat, 3, x_t, s, impl_rng), TimestepOutOfRange);
}

TEST_CASE("ddpm final step is deterministic") {
    NoiseSchedule s = build_schedule(ScheduleProfile::linear, 2, 0.5, 0.5);
    s.prediction_type = PredictionType::epsilon;
    Tensor x_1 = random_tensor({1, 1, 2, 2}, 31);
    Tensor eps_hat = random_tensor({1, 1, 2, 2}, 32);
    Rng r1(RandomSource{1, 0});
    Rng r2(RandomSource{999, 7});
    Tensor a = ddpm_step(eps_hat, 1, x_1, s, r1);
    Tensor b = ddpm_step(eps_hat, 1, x_1, s, r2);
    for (int64_t i = 0; i < a.numel(); ++i) {
        CHECK(a[i] == b[i]);
        // at t=1 the posterior mean collapses onto pred_x0
        const double px0 = (x_1[i] - std::sqrt(0.5) * eps_hat[i]) / std::sqrt(0.5);
        CHECK(a[i] == doctest::Approx(px0).epsilon(1e-12));
    }
}

TEST_CASE("ddpm approaches identity in the zero-noise limit") {
    // the stochastic term is O(sqrt(beta)), so with beta = 1e-8 the step must
    // stay within ~1e-4 of the input
    NoiseSchedule s = build_schedule(ScheduleProfile::linear, 10, 1e-8, 1e-8);
    s.prediction_type = PredictionType::epsilon;
    Tensor x_t = random_tensor({1, 1, 2, 2}, 41);
    Tensor zero({1, 1, 2, 2}, 0.0);
    Rng rng(RandomSource{6, 0});
    Tensor out = ddpm_step(zero, 5, x_t, s, rng);
    for (int64_t i = 0; i < out.numel(); ++i)
        CHECK(std::fabs(out[i] - x_t[i]) < 1e-3);
}

TEST_CASE("ddim with eta=0 is deterministic and inverts a single perfect step") {
    NoiseSchedule s = build_schedule(ScheduleProfile::scaled_linear, 50, 0.0015, 0.0205);
    s.prediction_type = PredictionType::epsilon;
    Tensor x0 = random_tensor({1, 1, 3, 3}, 51);
    Tensor eps = random_tensor({1, 1, 3, 3}, 52);
    Tensor x_T = add_noise(x0, eps, 50, s);

    Rng r1(RandomSource{1, 0});
    Rng r2(RandomSource{2, 0});
    Tensor a = ddim_step(eps, 50, 0, x_T, s, 0.0, r1);
    Tensor b = ddim_step(eps, 50, 0, x_T, s, 0.0, r2);
    for (int64_t i = 0; i < a.numel(); ++i) {
        CHECK(a[i] == b[i]);  // rng untouched at eta=0
        CHECK(a[i] == doctest::Approx(x0[i]).epsilon(1e-12));
    }
    CHECK_THROWS_AS(ddim_step(eps, 10, 10, x_T, s, 0.0, r1), RangeError);
    CHECK_THROWS_AS(ddim_step(eps, 10, 5, x_T, s, 1.5, r1), RangeError);
}

TEST_CASE("ddim eta=1 reproduces the ddpm posterior spread at adjacent steps") {
    NoiseSchedule s = build_schedule(ScheduleProfile::linear, 30, 0.01, 0.3);
    s.prediction_type = PredictionType::epsilon;
    Tensor x_t({1, 1, 1, 1}, std::vector<double>{0.8});
    Tensor eps_hat({1, 1, 1, 1}, std::vector<double>{-0.2});
    for (int t : {2, 7, 15, 30}) {
        // recover sigma from two runs with known rng draws
        Rng ra(RandomSource{100, 0});
        Rng rb(RandomSource{200, 0});
        const double za = Rng(RandomSource{100, 0}).normal();
        const double zb = Rng(RandomSource{200, 0}).normal();
        Tensor xa = ddim_step(eps_hat, t, t - 1, x_t, s, 1.0, ra);
        Tensor xb = ddim_step(eps_hat, t, t - 1, x_t, s, 1.0, rb);
        const double sigma_impl = (xa[0] - xb[0]) / (za - zb);
        const double beta_tilde =
            s.beta(t) * (1.0 - s.alpha_bar(t - 1)) / (1.0 - s.alpha_bar(t));
        CHECK(sigma_impl == doctest::Approx(std::sqrt(beta_tilde)).epsilon(1e-9));
    }
}

TEST_CASE("pndm blend of four identical estimates is exactly that estimate") {
    Tensor e = random_tensor({1, 2, 3, 3}, 61, -2.0, 2.0);
    Tensor blended = pndm_ab4_blend({e, e, e, e});
    for (int64_t i = 0; i < e.numel(); ++i) CHECK(blended[i] == e[i]);  // bitwise

    // generic coefficients against a direct evaluation
    Tensor a = random_tensor({4}, 62), b = random_tensor({4}, 63), c = random_tensor({4}, 64),
           d = random_tensor({4}, 65);
    Tensor got = pndm_ab4_blend({d, c, b, a});  // newest last
    for (int64_t i = 0; i < 4; ++i) {
        const double want = (55.0 * a[i] - 59.0 * b[i] + 37.0 * c[i] - 9.0 * d[i]) / 24.0;
        CHECK(got[i] == doctest::Approx(want).epsilon(1e-13));
    }
    CHECK_THROWS_AS(pndm_ab4_blend({a, b, c}), BufferUnderflow);
}

namespace {

// exact eps for data ~ N(mu0, s0^2): x_t marginal is N(sqrt(ab) mu0, ab s0^2 + 1 - ab)
Tensor exact_eps(const Tensor& x, int t, const NoiseSchedule& s, double mu0, double s0) {
    const double ab = s.alpha_bar(t);
    const double denom = ab * s0 * s0 + 1.0 - ab;
    Tensor e(x.shape());
    for (int64_t i = 0; i < x.numel(); ++i)
        e[i] = (x[i] - std::sqrt(ab) * mu0) * std::sqrt(1.0 - ab) / denom;
    return e;
}

Tensor run_pndm(const NoiseSchedule& s, const Tensor& start, int n_steps, double mu0, double s0) {
    SamplerState st = make_sampler_state(s, n_steps);
    Tensor x = start;
    while (!st.finished) {
        const int t = st.next_eval_t;
        Tensor eps = exact_eps(x, t, s, mu0, s0);
        auto [xn, st2] = pndm_step(eps, t, x, std::move(st), s);
        x = std::move(xn);
        st = std::move(st2);
    }
    return x;
}

}  // namespace

TEST_CASE("pndm tracks the dense deterministic reference on an exact linear score") {
    const double mu0 = 0.7, s0 = 1.0;
    NoiseSchedule s = build_schedule(ScheduleProfile::scaled_linear, 1000, 0.0015, 0.0205);
    s.prediction_type = PredictionType::epsilon;
    Tensor start({1, 1, 1, 1}, std::vector<double>{1.3});

    // dense reference: 1000-step deterministic trajectory of the same reverse process
    Tensor xr = start;
    Rng rng(RandomSource{0, 0});
    for (int t = 1000; t >= 1; --t)
        xr = ddim_step(exact_eps(xr, t, s, mu0, s0), t, t - 1, xr, s, 0.0, rng);

    // analytic endpoint of the probability-flow map for Gaussian data:
    // (x - sqrt(ab) mu0) / sqrt(ab s0^2 + 1 - ab) is conserved
    const double abT = s.alpha_bar(1000);
    const double lamT = std::sqrt(abT * s0 * s0 + 1.0 - abT);
    const double analytic = mu0 + s0 * (1.3 - std::sqrt(abT) * mu0) / lamT;

    // the dense one-step-at-a-time trajectory is first-order accurate, so it
    // carries a few-1e-3 discretization bias of its own
    CHECK(xr[0] == doctest::Approx(analytic).epsilon(5e-3));

    // 50 PNDM evaluations land within 1e-3 of the exact endpoint and within
    // the dense reference's own accuracy envelope
    Tensor xp = run_pndm(s, start, 50, mu0, s0);
    CHECK(std::fabs(xp[0] - analytic) < 1e-3);
    CHECK(std::fabs(xp[0] - xr[0]) < 5e-3);

    // determinism: a second run is bit-identical
    Tensor xp2 = run_pndm(s, start, 50, mu0, s0);
    CHECK(xp[0] == xp2[0]);
}

TEST_CASE("pndm driver bookkeeping and validation") {
    NoiseSchedule s = build_schedule(ScheduleProfile::linear, 100, 1e-4, 0.02);
    s.prediction_type = PredictionType::epsilon;
    SamplerState st = make_sampler_state(s, 10);
    CHECK(st.next_eval_t == 100);
    CHECK(st.timestep_sequence.size() == 10);
    CHECK_FALSE(st.finished);

    Tensor x({1, 1, 1, 1}, std::vector<double>{0.5});
    Tensor e({1, 1, 1, 1}, std::vector<double>{0.1});
    CHECK_THROWS_AS(pndm_step(e, 55, x, st, s), TimestepOutOfRange);

    SamplerState small = make_sampler_state(s, 3);
    CHECK_THROWS_AS(pndm_step(e, 100, x, small, s), RangeError);

    // count the model evaluations of a full 10-step trajectory: 12 warm-up + 7
    int evals = 0;
    Tensor cur = x;
    while (!st.finished) {
        auto [xn, st2] = pndm_step(e, st.next_eval_t, cur, std::move(st), s);
        cur = std::move(xn);
        st = std::move(st2);
        ++evals;
    }
    CHECK(evals == 19);
    CHECK(st.eps_history.size() <= 4);
}

TEST_SUITE_END();

#include <algorithm>
#include <set>
#include <vector>

#include "doctest.h"
#include "genimg/errors.hpp"
#include "genimg/ordering.hpp"
#include "genimg/random.hpp"
#include "genimg/tensor.hpp"

using namespace genimg;

TEST_SUITE_BEGIN("ordering");

namespace {

std::vector<int64_t> coords_of(int64_t flat, const std::vector<int64_t>& shape) {
    std::vector<int64_t> c(shape.size());
    for (int i = static_cast<int>(shape.size()) - 1; i >= 0; --i) {
        c[i] = flat % shape[i];
        flat /= shape[i];
    }
    return c;
}

bool grid_adjacent(int64_t a, int64_t b, const std::vector<int64_t>& shape) {
    auto ca = coords_of(a, shape);
    auto cb = coords_of(b, shape);
    int64_t moved = 0;
    for (size_t i = 0; i < ca.size(); ++i) moved += std::abs(ca[i] - cb[i]);
    return moved == 1;
}

bool is_bijection(const std::vector<int64_t>& perm) {
    std::vector<int64_t> sorted = perm;
    std::sort(sorted.begin(), sorted.end());
    for (int64_t i = 0; i < static_cast<int64_t>(sorted.size()); ++i) {
        if (sorted[i] != i) return false;
    }
    return true;
}

}  // namespace

TEST_CASE("raster ordering is the row-major identity") {
    auto o = build_ordering(OrderingKind::raster, {2, 2});
    CHECK(o.permutation == std::vector<int64_t>{0, 1, 2, 3});

    // On arbitrary grids, apply == row-major flatten.
    Rng rng(RandomSource{77, 0});
    for (int trial = 0; trial < 1000; ++trial) {
        const int64_t h = 1 + static_cast<int64_t>(rng.below(6));
        const int64_t w = 1 + static_cast<int64_t>(rng.below(6));
        auto ord = build_ordering(OrderingKind::raster, {h, w});
        Tensor g = draw_uniform({h, w}, rng);
        Tensor s = apply_ordering(ord, g);
        REQUIRE(s.numel() == g.numel());
        for (int64_t i = 0; i < g.numel(); ++i) CHECK(s[i] == g[i]);
    }
}

TEST_CASE("s_curve reverses every other row") {
    auto o = build_ordering(OrderingKind::s_curve, {2, 2});
    CHECK(o.permutation == std::vector<int64_t>{0, 1, 3, 2});

    // [[a,b,c],[d,e,f]] -> a,b,c,f,e,d
    auto o23 = build_ordering(OrderingKind::s_curve, {2, 3});
    Tensor g({2, 3});
    for (int64_t i = 0; i < 6; ++i) g[i] = 10.0 + static_cast<double>(i);
    Tensor s = apply_ordering(o23, g);
    const double expect[6] = {10, 11, 12, 15, 14, 13};
    for (int64_t i = 0; i < 6; ++i) CHECK(s[i] == expect[i]);
}

TEST_CASE("s_curve volume path continues through slices") {
    auto o = build_ordering(OrderingKind::s_curve, {2, 2, 2});
    CHECK(o.permutation == std::vector<int64_t>{0, 1, 3, 2, 6, 7, 5, 4});
}

TEST_CASE("s_curve consecutive elements are always grid-adjacent") {
    const std::vector<std::vector<int64_t>> shapes = {
        {1, 1}, {1, 7}, {7, 1}, {3, 4}, {4, 3}, {8, 8},
        {1, 1, 1}, {2, 3, 4}, {3, 4, 5}, {5, 1, 3}, {4, 4, 4}, {8, 8, 8},
    };
    for (const auto& shape : shapes) {
        auto o = build_ordering(OrderingKind::s_curve, shape);
        INFO("shape " << shape_to_string(shape));
        for (size_t i = 1; i < o.permutation.size(); ++i) {
            REQUIRE(grid_adjacent(o.permutation[i - 1], o.permutation[i], shape));
        }
    }
}

TEST_CASE("random ordering is a seeded permutation") {
    auto o = build_ordering(OrderingKind::random_order, {4, 4}, 9);
    CHECK(is_bijection(o.permutation));
    CHECK(o.seed == 9);

    auto again = build_ordering(OrderingKind::random_order, {4, 4}, 9);
    CHECK(o.permutation == again.permutation);

    auto other = build_ordering(OrderingKind::random_order, {4, 4}, 10);
    CHECK(is_bijection(other.permutation));
    CHECK(o.permutation != other.permutation);

    // Seeded shuffles on a longer grid should not be the identity.
    auto big = build_ordering(OrderingKind::random_order, {8, 8}, 3);
    std::vector<int64_t> identity(64);
    for (int64_t i = 0; i < 64; ++i) identity[i] = i;
    CHECK(big.permutation != identity);
}

TEST_CASE("every ordering is bijective and round-trips exactly") {
    const std::vector<std::vector<int64_t>> shapes = {
        {1, 1}, {2, 2}, {3, 5}, {8, 8}, {1, 1, 1}, {2, 3, 4}, {8, 8, 8},
    };
    const OrderingKind kinds[] = {OrderingKind::raster, OrderingKind::s_curve,
                                  OrderingKind::random_order};
    Rng rng(RandomSource{5150, 0});
    for (const auto& shape : shapes) {
        for (OrderingKind kind : kinds) {
            auto o = build_ordering(kind, shape, 1234);
            INFO("kind " << to_string(kind) << " shape " << shape_to_string(shape));
            REQUIRE(is_bijection(o.permutation));

            Tensor g = draw_uniform(shape, rng, -3.0, 3.0);
            Tensor seq = apply_ordering(o, g);
            Tensor back = invert_ordering(o, seq);
            REQUIRE(back.shape() == g.shape());
            for (int64_t i = 0; i < g.numel(); ++i) REQUIRE(back[i] == g[i]);
        }
    }
}

TEST_CASE("ordering kind names round-trip") {
    for (OrderingKind kind : {OrderingKind::raster, OrderingKind::s_curve,
                              OrderingKind::random_order}) {
        CHECK(ordering_from_string(to_string(kind)) == kind);
    }
    CHECK_THROWS_AS(ordering_from_string("hilbert"), RangeError);
}

TEST_CASE("ordering validation errors") {
    CHECK_THROWS_AS(build_ordering(OrderingKind::raster, {0, 4}), RangeError);
    CHECK_THROWS_AS(build_ordering(OrderingKind::s_curve, {3, 0, 2}), RangeError);
    CHECK_THROWS_AS(build_ordering(OrderingKind::raster, {4}), RankError);
    CHECK_THROWS_AS(build_ordering(OrderingKind::raster, {2, 2, 2, 2}), RankError);

    auto o = build_ordering(OrderingKind::s_curve, {2, 3});
    Tensor wrong({3, 2});
    CHECK_THROWS_AS(apply_ordering(o, wrong), ShapeMismatch);
    Tensor short_seq({5});
    CHECK_THROWS_AS(invert_ordering(o, short_seq), ShapeMismatch);
    Tensor grid_not_seq({2, 3});
    CHECK_THROWS_AS(invert_ordering(o, grid_not_seq), ShapeMismatch);
}

TEST_SUITE_END();

#include "genimg/ordering.hpp"

#include <algorithm>
#include <numeric>

#include "genimg/errors.hpp"
#include "genimg/random.hpp"

namespace genimg {

std::string to_string(OrderingKind k) {
    switch (k) {
        case OrderingKind::raster: return "raster";
        case OrderingKind::s_curve: return "s_curve";
        case OrderingKind::random_order: return "random";
    }
    return "raster";
}

OrderingKind ordering_from_string(const std::string& s) {
    if (s == "raster") return OrderingKind::raster;
    if (s == "s_curve") return OrderingKind::s_curve;
    if (s == "random") return OrderingKind::random_order;
    throw RangeError("unknown ordering kind: " + s);
}

namespace {

void validate_shape(const std::vector<int64_t>& shape) {
    if (shape.size() != 2 && shape.size() != 3) {
        throw RankError("ordering expects a 2-D or 3-D spatial shape, got rank " +
                        std::to_string(shape.size()));
    }
    for (int64_t d : shape) {
        if (d < 1) throw RangeError("ordering spatial dims must be positive");
    }
}

// Boustrophedon walk: every step moves to a grid neighbour. The fast axis
// flips direction after each row; in 3-D the row order itself flips after
// each slice so the walk re-enters the next slice at the cell it just left.
std::vector<int64_t> s_curve_permutation(const std::vector<int64_t>& shape) {
    const bool vol = shape.size() == 3;
    const int64_t depth = vol ? shape[0] : 1;
    const int64_t height = shape[vol ? 1 : 0];
    const int64_t width = shape[vol ? 2 : 1];

    std::vector<int64_t> perm;
    perm.reserve(depth * height * width);
    int64_t rows_visited = 0;
    for (int64_t d = 0; d < depth; ++d) {
        const bool rows_down = (d % 2 == 0);
        for (int64_t r = 0; r < height; ++r) {
            const int64_t row = rows_down ? r : height - 1 - r;
            const bool left_to_right = (rows_visited % 2 == 0);
            for (int64_t c = 0; c < width; ++c) {
                const int64_t col = left_to_right ? c : width - 1 - c;
                perm.push_back((d * height + row) * width + col);
            }
            ++rows_visited;
        }
    }
    return perm;
}

}  // namespace

Ordering build_ordering(OrderingKind kind, const std::vector<int64_t>& spatial_shape,
                        uint64_t seed) {
    validate_shape(spatial_shape);
    const int64_t n = std::accumulate(spatial_shape.begin(), spatial_shape.end(), int64_t{1},
                                      std::multiplies<int64_t>());
    Ordering o;
    o.kind = kind;
    o.spatial_shape = spatial_shape;
    o.seed = seed;
    o.permutation.resize(n);
    std::iota(o.permutation.begin(), o.permutation.end(), int64_t{0});
    switch (kind) {
        case OrderingKind::raster:
            break;
        case OrderingKind::s_curve:
            o.permutation = s_curve_permutation(spatial_shape);
            break;
        case OrderingKind::random_order: {
            Rng rng(RandomSource{seed, /*stream_id=*/0x0dde4u});
            for (int64_t i = n - 1; i > 0; --i) {
                const int64_t j = static_cast<int64_t>(rng.below(static_cast<uint64_t>(i) + 1));
                std::swap(o.permutation[i], o.permutation[j]);
            }
            break;
        }
    }
    return o;
}

Tensor apply_ordering(const Ordering& o, const Tensor& grid) {
    if (grid.shape() != o.spatial_shape) {
        throw ShapeMismatch("apply_ordering: grid shape " + grid.shape_str() +
                            " does not match ordering shape " +
                            shape_to_string(o.spatial_shape));
    }
    const int64_t n = static_cast<int64_t>(o.permutation.size());
    Tensor seq({n});
    for (int64_t i = 0; i < n; ++i) seq[i] = grid[o.permutation[i]];
    return seq;
}

Tensor invert_ordering(const Ordering& o, const Tensor& seq) {
    const int64_t n = static_cast<int64_t>(o.permutation.size());
    if (seq.shape() != std::vector<int64_t>{n}) {
        throw ShapeMismatch("invert_ordering: sequence shape " + seq.shape_str() +
                            " does not match ordering length (" + std::to_string(n) + ")");
    }
    Tensor grid(o.spatial_shape);
    for (int64_t i = 0; i < n; ++i) grid[o.permutation[i]] = seq[i];
    return grid;
}

}  // namespace genimg

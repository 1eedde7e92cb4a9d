#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "genimg/tensor.hpp"

namespace genimg {

enum class OrderingKind { raster, s_curve, random_order };

std::string to_string(OrderingKind k);
OrderingKind ordering_from_string(const std::string& s);

// Bijective flattening of a 2-D/3-D index grid: sequence[i] = grid[permutation[i]]
// with flat indices row-major over spatial_shape.
struct Ordering {
    OrderingKind kind = OrderingKind::raster;
    std::vector<int64_t> spatial_shape;
    std::vector<int64_t> permutation;
    uint64_t seed = 0;  // meaningful for random_order only
};

Ordering build_ordering(OrderingKind kind, const std::vector<int64_t>& spatial_shape,
                        uint64_t seed = 0);

Tensor apply_ordering(const Ordering& o, const Tensor& grid);    // -> (N)
Tensor invert_ordering(const Ordering& o, const Tensor& seq);    // -> spatial_shape

}  // namespace genimg

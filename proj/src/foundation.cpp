#include "genimg/foundation.hpp"

#include "genimg/errors.hpp"

namespace genimg {

int spatial_rank(const Tensor& x) {
    int k = x.rank() - 2;
    if (k != 2 && k != 3)
        throw RankError("expected (B,C,spatial...) with 2 or 3 spatial dims, got " + x.shape_str());
    return k;
}

const ImageBatch& validate_batch(const ImageBatch& x) {
    spatial_rank(x);
    if (!x.all_finite()) throw NonFiniteValue("batch contains NaN or Inf");
    return x;
}

}  // namespace genimg

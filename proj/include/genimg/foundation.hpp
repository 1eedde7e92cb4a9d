#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "genimg/tensor.hpp"

namespace genimg {

// Image batches are plain tensors with layout (B, C, spatial...), spatial rank
// 2 or 3, values in a declared range (default [0,1]).
using ImageBatch = Tensor;
using LatentBatch = Tensor;

enum class LatentOrigin { kl_encoder, vq_prequant, vq_quantized };

// Discrete codebook indices of one image, in the order produced by an Ordering.
struct TokenSequence {
    std::vector<int64_t> tokens;
    int64_t vocab_size = 0;
    std::string ordering_id;
    int64_t bos_token() const { return vocab_size - 1; }
};

struct FeatureSet {
    Tensor features;  // (N, F)
    std::string extractor_id;
};

// Spatial rank of an image batch laid out (B, C, spatial...).
int spatial_rank(const Tensor& x);

// Identity pass-through when the batch invariants hold; throws NonFiniteValue
// or RankError otherwise.
const ImageBatch& validate_batch(const ImageBatch& x);

}  // namespace genimg

#pragma once

#include <cstdint>
#include <vector>

#include "genimg/tensor.hpp"

namespace genimg {

// Seed + stream pair. Identical (seed, stream_id) always yields the identical
// draw sequence; integer draws are additionally portable across platforms.
struct RandomSource {
    uint64_t seed = 0;
    uint64_t stream_id = 0;

    // Derived independent stream, e.g. per data item or per tile.
    RandomSource substream(uint64_t index) const;
};

// xoshiro256++ seeded via splitmix64, with explicit uniform/normal conversion
// so the draw sequence does not depend on the standard library.
class Rng {
public:
    explicit Rng(RandomSource src);

    uint64_t next_u64();
    double uniform();                       // [0, 1)
    double normal();                        // standard normal, Box-Muller pair cache
    int64_t below(int64_t n);               // unbiased integer in [0, n)
    int64_t uniform_int(int64_t lo, int64_t hi);  // inclusive range

    RandomSource source() const { return src_; }

private:
    RandomSource src_;
    uint64_t s_[4];
    bool has_cached_ = false;
    double cached_ = 0.0;
};

// i.i.d. standard normal entries; pure function of (shape, src).
Tensor draw_gaussian(const std::vector<int64_t>& shape, RandomSource src);
Tensor draw_gaussian(const std::vector<int64_t>& shape, Rng& rng);
Tensor draw_uniform(const std::vector<int64_t>& shape, Rng& rng, double lo = 0.0, double hi = 1.0);

}  // namespace genimg

#include "genimg/random.hpp"

#include <cmath>

#include "genimg/errors.hpp"

namespace genimg {

namespace {

uint64_t splitmix64(uint64_t& x) {
    x += 0x9E3779B97F4A7C15ULL;
    uint64_t z = x;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

uint64_t mix2(uint64_t a, uint64_t b) {
    uint64_t x = a ^ (b + 0x9E3779B97F4A7C15ULL + (a << 6) + (a >> 2));
    uint64_t dummy = x;
    return splitmix64(dummy);
}

uint64_t rotl(uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

}  // namespace

RandomSource RandomSource::substream(uint64_t index) const {
    return RandomSource{seed, mix2(stream_id, index + 1)};
}

Rng::Rng(RandomSource src) : src_(src) {
    uint64_t x = mix2(src.seed, src.stream_id);
    for (auto& w : s_) w = splitmix64(x);
    if ((s_[0] | s_[1] | s_[2] | s_[3]) == 0) s_[0] = 1;
}

uint64_t Rng::next_u64() {
    // xoshiro256++
    const uint64_t result = rotl(s_[0] + s_[3], 23) + s_[0];
    const uint64_t t = s_[1] << 17;
    s_[2] ^= s_[0];
    s_[3] ^= s_[1];
    s_[1] ^= s_[2];
    s_[0] ^= s_[3];
    s_[2] ^= t;
    s_[3] = rotl(s_[3], 45);
    return result;
}

double Rng::uniform() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

double Rng::normal() {
    if (has_cached_) {
        has_cached_ = false;
        return cached_;
    }
    // u1 in (0, 1] so log is finite
    double u1 = static_cast<double>((next_u64() >> 11) + 1) * 0x1.0p-53;
    double u2 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    double a = 2.0 * M_PI * u2;
    cached_ = r * std::sin(a);
    has_cached_ = true;
    return r * std::cos(a);
}

int64_t Rng::below(int64_t n) {
    if (n <= 0) throw RangeError("Rng::below requires n > 0");
    const uint64_t un = static_cast<uint64_t>(n);
    const uint64_t limit = UINT64_MAX - UINT64_MAX % un;
    uint64_t v;
    do {
        v = next_u64();
    } while (v >= limit);
    return static_cast<int64_t>(v % un);
}

int64_t Rng::uniform_int(int64_t lo, int64_t hi) {
    if (hi < lo) throw RangeError("Rng::uniform_int requires lo <= hi");
    return lo + below(hi - lo + 1);
}

Tensor draw_gaussian(const std::vector<int64_t>& shape, RandomSource src) {
    Rng rng(src);
    return draw_gaussian(shape, rng);
}

Tensor draw_gaussian(const std::vector<int64_t>& shape, Rng& rng) {
    Tensor out(shape);
    for (int64_t i = 0; i < out.numel(); ++i) out[i] = rng.normal();
    return out;
}

Tensor draw_uniform(const std::vector<int64_t>& shape, Rng& rng, double lo, double hi) {
    Tensor out(shape);
    for (int64_t i = 0; i < out.numel(); ++i) out[i] = lo + (hi - lo) * rng.uniform();
    return out;
}

}  // namespace genimg

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "genimg/foundation.hpp"
#include "genimg/random.hpp"
#include "genimg/tensor.hpp"

namespace genimg {

// One evaluation result, serializable as a single JSON line. `value` is finite
// except where a metric defines an infinity sentinel (psnr of identical
// images); infinities serialize as the string "inf".
struct MetricReport {
    std::string name;
    double value = 0.0;
    int64_t n_samples = 0;
    std::string extractor_id;  // empty = not feature-based, omitted from JSON
    uint64_t seed = 0;
    uint64_t config_hash = 0;

    std::string to_json_line() const;
    static MetricReport from_json_line(const std::string& line);
};

// Frechet distance between Gaussian fits of two feature sets (N, F):
// ||mu_a - mu_b||^2 + tr(S_a + S_b - 2 (S_a S_b)^{1/2}), with sample means and
// N-1 covariances; the trace of the matrix square root comes from the
// eigendecomposition of the symmetrized product S_a^{1/2} S_b S_a^{1/2}.
// Eigenvalues in (-1e-6, 0) clip to zero; anything below fails.
double fid(const FeatureSet& a, const FeatureSet& b);

// Gaussian kernel for mmd: k(x, y) = exp(-||x-y||^2 / (2 sigma^2)).
// bandwidth <= 0 selects the median heuristic: sigma = median pairwise
// Euclidean distance over the pooled set (falling back to 1 when the median
// is zero, i.e. all points coincide).
struct GaussianKernel {
    double bandwidth = 0.0;
};

// Unbiased estimator of squared maximum mean discrepancy (diagonal terms
// excluded). Being unbiased it can dip below zero on same-distribution sets.
double mmd(const FeatureSet& a, const FeatureSet& b, GaussianKernel kernel = {});

// Multiscale structural similarity on (B, C, spatial...) batches, spatial rank
// 2 or 3. Gaussian window 11, sigma 1.5, K1 = 0.01, K2 = 0.03; contrast-
// structure terms at every scale, luminance only at the coarsest, 2x average
// pooling between scales. The scale count shrinks to the largest feasible
// value for the input size (min spatial dim >= 11 * 2^(scales-1)) and the
// weights renormalize to sum 1; a negative per-scale mean clamps to zero
// before a fractional exponent (it has no real power) but keeps its sign
// under an integral one, so single-scale SSIM can go negative. Empty weights
// select the reference five (0.0448, 0.2856, 0.3001, 0.2363, 0.1333).
double ms_ssim(const Tensor& x, const Tensor& y, int scales = 5,
               std::vector<double> scale_weights = {}, double data_range = 1.0);

// Mean MS-SSIM over `pair_count` distinct random pairs of batch items (capped
// at the number of available pairs); lower = more diverse.
double pairwise_diversity(const ImageBatch& samples, int64_t pair_count, Rng& rng);

// 10 log10(range^2 / MSE); +infinity when x == y.
double psnr(const Tensor& x, const Tensor& y, double data_range = 1.0);

// Mean absolute error.
double mae(const Tensor& x, const Tensor& y);

// Mann-Whitney probability that an in-distribution score exceeds an
// out-of-distribution score, ties counted 1/2.
double auc(const std::vector<double>& scores_in, const std::vector<double>& scores_out);

// Mean over pairs of 100 * max(0, cosine similarity) between row-aligned
// embedding matrices (N, F). The embeddings come from an external embedder;
// passing an undefined tensor means no embedder was available. Zero-norm
// vectors score 0.
double alignment_score(const Tensor& image_embs, const Tensor& text_embs);

}  // namespace genimg

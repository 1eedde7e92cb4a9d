#include "genimg/metrics.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>

#include "genimg/autograd.hpp"
#include "genimg/errors.hpp"
#include "json.hpp"

namespace genimg {

// ---- reports -----------------------------------------------------------------

std::string MetricReport::to_json_line() const {
    nlohmann::json j;
    j["name"] = name;
    if (std::isfinite(value)) {
        j["value"] = value;
    } else {
        j["value"] = "inf";
    }
    j["n_samples"] = n_samples;
    if (!extractor_id.empty()) j["extractor_id"] = extractor_id;
    j["seed"] = seed;
    j["config_hash"] = config_hash;
    return j.dump();
}

MetricReport MetricReport::from_json_line(const std::string& line) {
    nlohmann::json j = nlohmann::json::parse(line);
    MetricReport r;
    r.name = j.at("name").get<std::string>();
    if (j.at("value").is_string()) {
        r.value = std::numeric_limits<double>::infinity();
    } else {
        r.value = j.at("value").get<double>();
    }
    r.n_samples = j.at("n_samples").get<int64_t>();
    if (j.contains("extractor_id")) r.extractor_id = j.at("extractor_id").get<std::string>();
    r.seed = j.at("seed").get<uint64_t>();
    r.config_hash = j.at("config_hash").get<uint64_t>();
    return r;
}

// ---- fid ----------------------------------------------------------------------

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

void fit_gaussian(const FeatureSet& s, Eigen::VectorXd& mu, Eigen::MatrixXd& cov) {
    if (s.features.rank() != 2) throw ShapeMismatch("features must be (N, F)");
    const int64_t N = s.features.dim(0);
    const int64_t F = s.features.dim(1);
    if (N < 2) throw DegenerateFeatures("need at least 2 feature rows, got " + std::to_string(N));
    Eigen::Map<const RowMat> X(s.features.data(), N, F);
    mu = X.colwise().mean();
    Eigen::MatrixXd centered = X.rowwise() - mu.transpose();
    cov = centered.transpose() * centered / double(N - 1);
}

// Clip the spectrum of a symmetric PSD-in-theory matrix; tiny negatives are
// roundoff, anything below the floor is a real failure.
Eigen::VectorXd clipped_eigenvalues(const Eigen::VectorXd& ev, const char* what) {
    Eigen::VectorXd out = ev;
    for (Eigen::Index i = 0; i < out.size(); ++i) {
        if (out[i] < -1e-6) {
            throw NumericalFailure(std::string(what) + " eigenvalue " +
                                   std::to_string(out[i]) + " below -1e-6");
        }
        if (out[i] < 0.0) out[i] = 0.0;
    }
    return out;
}

}  // namespace

double fid(const FeatureSet& a, const FeatureSet& b) {
    Eigen::VectorXd mu_a, mu_b;
    Eigen::MatrixXd cov_a, cov_b;
    fit_gaussian(a, mu_a, cov_a);
    fit_gaussian(b, mu_b, cov_b);
    if (mu_a.size() != mu_b.size()) throw ShapeMismatch("feature dims differ between sets");

    // sqrt(cov_a) through its own eigendecomposition, then the symmetrized
    // product carries the eigenvalues of cov_a * cov_b.
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es_a(cov_a);
    Eigen::VectorXd ev_a = clipped_eigenvalues(es_a.eigenvalues(), "covariance");
    Eigen::MatrixXd sqrt_a = es_a.eigenvectors() * ev_a.cwiseSqrt().asDiagonal() *
                             es_a.eigenvectors().transpose();

    Eigen::MatrixXd prod = sqrt_a * cov_b * sqrt_a;
    prod = 0.5 * (prod + prod.transpose());  // exact symmetry for the solver
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es_p(prod);
    Eigen::VectorXd ev_p = clipped_eigenvalues(es_p.eigenvalues(), "product");

    const double tr_sqrt = ev_p.cwiseSqrt().sum();
    return (mu_a - mu_b).squaredNorm() + cov_a.trace() + cov_b.trace() - 2.0 * tr_sqrt;
}

// ---- mmd ------------------------------------------------------------------------

namespace {

double sq_dist(const double* x, const double* y, int64_t F) {
    double s = 0.0;
    for (int64_t k = 0; k < F; ++k) {
        const double d = x[k] - y[k];
        s += d * d;
    }
    return s;
}

}  // namespace

double mmd(const FeatureSet& a, const FeatureSet& b, GaussianKernel kernel) {
    if (a.features.rank() != 2 || b.features.rank() != 2) {
        throw ShapeMismatch("features must be (N, F)");
    }
    const int64_t m = a.features.dim(0);
    const int64_t n = b.features.dim(0);
    const int64_t F = a.features.dim(1);
    if (b.features.dim(1) != F) throw ShapeMismatch("feature dims differ between sets");
    if (m < 2 || n < 2) throw DegenerateFeatures("mmd needs at least 2 rows per set");

    const double* A = a.features.data();
    const double* B = b.features.data();

    double sigma = kernel.bandwidth;
    if (!(sigma > 0.0)) {
        // Median pairwise Euclidean distance over the pooled set.
        std::vector<double> d2;
        d2.reserve(size_t((m + n) * (m + n - 1) / 2));
        auto row = [&](int64_t i) { return i < m ? A + i * F : B + (i - m) * F; };
        for (int64_t i = 0; i < m + n; ++i) {
            for (int64_t j = i + 1; j < m + n; ++j) d2.push_back(sq_dist(row(i), row(j), F));
        }
        auto mid = d2.begin() + d2.size() / 2;
        std::nth_element(d2.begin(), mid, d2.end());
        sigma = std::sqrt(*mid);
        if (!(sigma > 0.0)) sigma = 1.0;  // all points coincide; any bandwidth gives mmd 0
    }
    const double inv = -1.0 / (2.0 * sigma * sigma);

    double kaa = 0.0, kbb = 0.0, kab = 0.0;
    for (int64_t i = 0; i < m; ++i) {
        for (int64_t j = i + 1; j < m; ++j) kaa += std::exp(inv * sq_dist(A + i * F, A + j * F, F));
    }
    for (int64_t i = 0; i < n; ++i) {
        for (int64_t j = i + 1; j < n; ++j) kbb += std::exp(inv * sq_dist(B + i * F, B + j * F, F));
    }
    for (int64_t i = 0; i < m; ++i) {
        for (int64_t j = 0; j < n; ++j) kab += std::exp(inv * sq_dist(A + i * F, B + j * F, F));
    }
    return 2.0 * kaa / double(m * (m - 1)) + 2.0 * kbb / double(n * (n - 1)) -
           2.0 * kab / double(m * n);
}

// ---- ms-ssim -------------------------------------------------------------------

namespace {

constexpr int kWindow = 11;
constexpr double kSigma = 1.5;
constexpr double kK1 = 0.01;
constexpr double kK2 = 0.03;

const std::vector<double>& reference_weights() {
    static const std::vector<double> w = {0.0448, 0.2856, 0.3001, 0.2363, 0.1333};
    return w;
}

Tensor gaussian_window(int spatial_rank) {
    std::vector<double> g(kWindow);
    for (int i = 0; i < kWindow; ++i) {
        const double d = i - (kWindow - 1) / 2.0;
        g[size_t(i)] = std::exp(-d * d / (2.0 * kSigma * kSigma));
    }
    std::vector<int64_t> shape = {1, 1};
    for (int r = 0; r < spatial_rank; ++r) shape.push_back(kWindow);
    Tensor w(shape);
    double total = 0.0;
    for (int64_t i = 0; i < w.numel(); ++i) {
        double v = 1.0;
        int64_t rem = i;
        for (int r = spatial_rank - 1; r >= 0; --r) {
            v *= g[size_t(rem % kWindow)];
            rem /= kWindow;
        }
        w[i] = v;
        total += v;
    }
    for (int64_t i = 0; i < w.numel(); ++i) w[i] /= total;
    return w;
}

// Valid-mode Gaussian filtering of a (B, C, spatial...) batch, each channel
// treated independently.
Tensor window_filter(const Tensor& x, const Tensor& w) {
    std::vector<int64_t> flat = {x.dim(0) * x.dim(1), 1};
    for (int r = 2; r < x.rank(); ++r) flat.push_back(x.dim(r));
    NoGradGuard ng;
    Tensor out =
        conv_nd(constant(x.reshaped(flat)), constant(w), constant(Tensor({1})), 1, 0).val();
    return out;
}

struct ScaleTerms {
    double cs = 0.0;
    double full = 0.0;  // luminance * contrast-structure
};

ScaleTerms ssim_terms(const Tensor& x, const Tensor& y, const Tensor& w, double data_range) {
    Tensor mu_x = window_filter(x, w);
    Tensor mu_y = window_filter(y, w);
    Tensor mxx = window_filter(mul(x, x), w);
    Tensor myy = window_filter(mul(y, y), w);
    Tensor mxy = window_filter(mul(x, y), w);

    const double c1 = (kK1 * data_range) * (kK1 * data_range);
    const double c2 = (kK2 * data_range) * (kK2 * data_range);
    double cs_sum = 0.0, full_sum = 0.0;
    for (int64_t i = 0; i < mu_x.numel(); ++i) {
        const double vx = mxx[i] - mu_x[i] * mu_x[i];
        const double vy = myy[i] - mu_y[i] * mu_y[i];
        const double vxy = mxy[i] - mu_x[i] * mu_y[i];
        const double cs = (2.0 * vxy + c2) / (vx + vy + c2);
        const double lum = (2.0 * mu_x[i] * mu_y[i] + c1) /
                           (mu_x[i] * mu_x[i] + mu_y[i] * mu_y[i] + c1);
        cs_sum += cs;
        full_sum += lum * cs;
    }
    const double inv = 1.0 / double(mu_x.numel());
    return {cs_sum * inv, full_sum * inv};
}

}  // namespace

double ms_ssim(const Tensor& x, const Tensor& y, int scales, std::vector<double> scale_weights,
               double data_range) {
    if (!x.same_shape(y)) throw ShapeMismatch("ms_ssim inputs must share a shape");
    if (x.rank() != 4 && x.rank() != 5) throw RankError("ms_ssim expects (B, C, spatial...)");
    if (!(data_range > 0.0)) throw RangeError("data_range must be positive");
    if (scales < 1) throw RangeError("scales must be >= 1");

    int64_t min_dim = x.dim(2);
    for (int r = 3; r < x.rank(); ++r) min_dim = std::min(min_dim, x.dim(r));
    if (min_dim < kWindow) {
        throw InputTooSmall("spatial dims must be >= " + std::to_string(kWindow));
    }
    int feasible = 1;
    while (feasible < scales && min_dim >= int64_t(kWindow) * (int64_t(1) << feasible)) {
        ++feasible;
    }
    const int M = std::min(scales, feasible);

    if (scale_weights.empty()) {
        const auto& ref = reference_weights();
        scale_weights.assign(ref.begin(), ref.begin() + std::min<size_t>(ref.size(), size_t(scales)));
        while (scale_weights.size() < size_t(scales)) scale_weights.push_back(ref.back());
    }
    if (scale_weights.size() != size_t(scales)) {
        throw ConfigError("scale_weights must have one entry per requested scale");
    }
    scale_weights.resize(size_t(M));
    double wsum = 0.0;
    for (double w : scale_weights) wsum += w;
    if (!(wsum > 0.0)) throw RangeError("scale weights must sum to a positive value");
    for (double& w : scale_weights) w /= wsum;

    const Tensor window = gaussian_window(x.rank() - 2);
    Tensor cx = x, cy = y;
    double value = 1.0;
    for (int s = 0; s < M; ++s) {
        const ScaleTerms terms = ssim_terms(cx, cy, window, data_range);
        const double raw = s + 1 == M ? terms.full : terms.cs;
        const double w = scale_weights[size_t(s)];
        // A negative base under a fractional exponent has no real value; the
        // conventional fix clamps it. Integral exponents keep the sign so the
        // single-scale case reports true (possibly negative) SSIM.
        const double base = w == std::rint(w) ? raw : std::max(0.0, raw);
        value *= std::pow(base, w);
        if (s + 1 < M) {
            cx = avg_pool_tensor(cx, 2);
            cy = avg_pool_tensor(cy, 2);
        }
    }
    return value;
}

double pairwise_diversity(const ImageBatch& samples, int64_t pair_count, Rng& rng) {
    validate_batch(samples);
    const int64_t B = samples.dim(0);
    if (B < 2) throw NotEnoughSamples("pairwise_diversity needs at least 2 samples");
    if (pair_count < 1) throw RangeError("pair_count must be >= 1");

    const int64_t total = B * (B - 1) / 2;
    const int64_t k = std::min(pair_count, total);
    std::vector<int64_t> pool(static_cast<size_t>(total));
    for (int64_t i = 0; i < total; ++i) pool[size_t(i)] = i;
    for (int64_t i = 0; i < k; ++i) {
        const int64_t j = i + rng.below(total - i);
        std::swap(pool[size_t(i)], pool[size_t(j)]);
    }
    pool.resize(size_t(k));
    std::sort(pool.begin(), pool.end());  // fixed accumulation order

    std::vector<int64_t> item_shape = samples.shape();
    item_shape[0] = 1;
    const int64_t item = samples.numel() / B;
    auto take = [&](int64_t b) {
        Tensor t(item_shape);
        std::memcpy(t.data(), samples.data() + b * item, sizeof(double) * size_t(item));
        return t;
    };

    double sum = 0.0;
    for (int64_t flat : pool) {
        // Decode the flat pair index into (i, j), i < j, rows of the strictly
        // upper triangle enumerated i-major.
        int64_t i = 0, remaining = flat;
        while (remaining >= B - 1 - i) {
            remaining -= B - 1 - i;
            ++i;
        }
        const int64_t j = i + 1 + remaining;
        sum += ms_ssim(take(i), take(j));
    }
    return sum / double(k);
}

// ---- psnr / mae -------------------------------------------------------------------

double psnr(const Tensor& x, const Tensor& y, double data_range) {
    if (!x.same_shape(y)) throw ShapeMismatch("psnr inputs must share a shape");
    if (!(data_range > 0.0)) throw RangeError("data_range must be positive");
    double mse = 0.0;
    for (int64_t i = 0; i < x.numel(); ++i) {
        const double d = x[i] - y[i];
        mse += d * d;
    }
    mse /= double(x.numel());
    if (mse == 0.0) return std::numeric_limits<double>::infinity();
    return 10.0 * std::log10(data_range * data_range / mse);
}

double mae(const Tensor& x, const Tensor& y) {
    if (!x.same_shape(y)) throw ShapeMismatch("mae inputs must share a shape");
    double s = 0.0;
    for (int64_t i = 0; i < x.numel(); ++i) s += std::abs(x[i] - y[i]);
    return s / double(x.numel());
}

// ---- auc -----------------------------------------------------------------------------

double auc(const std::vector<double>& scores_in, const std::vector<double>& scores_out) {
    if (scores_in.empty() || scores_out.empty()) {
        throw EmptyInput("auc needs scores on both sides");
    }
    double wins = 0.0;
    for (double si : scores_in) {
        for (double so : scores_out) {
            if (si > so) {
                wins += 1.0;
            } else if (si == so) {
                wins += 0.5;
            }
        }
    }
    return wins / (double(scores_in.size()) * double(scores_out.size()));
}

// ---- alignment -------------------------------------------------------------------------

double alignment_score(const Tensor& image_embs, const Tensor& text_embs) {
    if (!image_embs.defined() || !text_embs.defined()) {
        throw EmbedderMissing("alignment_score needs embeddings from an external embedder");
    }
    if (image_embs.rank() != 2 || text_embs.rank() != 2 ||
        !image_embs.same_shape(text_embs)) {
        throw ShapeMismatch("embeddings must be matching (N, F) matrices");
    }
    const int64_t N = image_embs.dim(0);
    const int64_t F = image_embs.dim(1);
    if (N == 0) throw EmptyInput("alignment_score needs at least one pair");

    double sum = 0.0;
    for (int64_t i = 0; i < N; ++i) {
        const double* u = image_embs.data() + i * F;
        const double* v = text_embs.data() + i * F;
        double dot = 0.0, nu = 0.0, nv = 0.0;
        for (int64_t k = 0; k < F; ++k) {
            dot += u[k] * v[k];
            nu += u[k] * u[k];
            nv += v[k] * v[k];
        }
        const double denom = std::sqrt(nu) * std::sqrt(nv);
        const double cosine = denom < 1e-12 ? 0.0 : dot / denom;
        sum += 100.0 * std::max(0.0, cosine);
    }
    return sum / double(N);
}

}  // namespace genimg

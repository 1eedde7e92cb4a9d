#include "genimg/losses.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <memory>
#include <mutex>

#include "genimg/errors.hpp"
#include "genimg/foundation.hpp"

namespace genimg {

// ---- spectral ----------------------------------------------------------------

Var spectral_loss(const Var& x, const Var& y) {
    if (!x.val().same_shape(y.val())) {
        throw ShapeMismatch("spectral_loss inputs must share a shape");
    }
    return dft_energy(x - y);
}

double spectral_loss(const Tensor& x, const Tensor& y) {
    NoGradGuard ng;
    return spectral_loss(constant(x), constant(y)).val().item();
}

// ---- adversarial ---------------------------------------------------------------

std::string to_string(AdversarialCriterion c) {
    switch (c) {
        case AdversarialCriterion::least_squares: return "least_squares";
        case AdversarialCriterion::hinge: return "hinge";
        case AdversarialCriterion::bce: return "bce";
    }
    return "least_squares";
}

AdversarialCriterion criterion_from_string(const std::string& s) {
    if (s == "least_squares") return AdversarialCriterion::least_squares;
    if (s == "hinge") return AdversarialCriterion::hinge;
    if (s == "bce") return AdversarialCriterion::bce;
    throw UnknownCriterion("unknown adversarial criterion: " + s);
}

Var adversarial_loss(const std::vector<Var>& logits_maps, bool target_is_real,
                     bool for_discriminator, AdversarialCriterion criterion) {
    if (logits_maps.empty()) throw EmptyInput("adversarial_loss needs at least one logits map");
    const double label = target_is_real ? 1.0 : 0.0;

    Var total;
    for (const Var& logits : logits_maps) {
        if (!logits.val().all_finite()) throw NonFiniteValue("logits must be finite");
        Var term;
        switch (criterion) {
            case AdversarialCriterion::least_squares:
                term = mse_loss(logits, constant(Tensor(logits.val().shape(), label)));
                break;
            case AdversarialCriterion::hinge:
                if (for_discriminator) {
                    // real: mean max(0, 1 - logit); fake: mean max(0, 1 + logit)
                    Var margin = target_is_real ? vshift(vneg(logits), 1.0)
                                                : vshift(logits, 1.0);
                    term = mean_all(relu(margin));
                } else {
                    term = vneg(mean_all(logits));
                }
                break;
            case AdversarialCriterion::bce:
                // softplus(l) - y*l, elementwise-stable form of BCE-with-logits.
                term = mean_all(vsub(softplus(logits), vscale(logits, label)));
                break;
        }
        total = total.defined() ? total + term : term;
    }
    return vscale(total, 1.0 / static_cast<double>(logits_maps.size()));
}

// ---- perceptual -----------------------------------------------------------------

RandomConvExtractor::RandomConvExtractor(int64_t in_channels,
                                         std::vector<int64_t> layer_channels, uint64_t seed)
    : in_channels_(in_channels) {
    if (in_channels < 1 || layer_channels.empty()) {
        throw ConfigError("extractor needs input channels and at least one layer");
    }
    Rng rng(RandomSource{seed, 0x0f0f});
    int64_t ch = in_channels;
    for (int64_t out : layer_channels) {
        const int64_t fan_in = ch * 9;
        const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
        weights_.push_back(draw_uniform({out, ch, 3, 3}, rng, -bound, bound));
        biases_.push_back(draw_uniform({out}, rng, -bound, bound));
        ch = out;
    }
}

std::vector<Var> RandomConvExtractor::features(const Var& x) const {
    if (x.val().rank() != 4) throw ModeMismatch("the 2D extractor needs rank-4 input");
    if (x.val().dim(1) != in_channels_) {
        throw ShapeMismatch("extractor expects " + std::to_string(in_channels_) + " channels");
    }
    std::vector<Var> out;
    Var h = x;
    for (size_t l = 0; l < weights_.size(); ++l) {
        h = leaky_relu(conv_nd(h, constant(weights_[l]), constant(biases_[l]), /*stride=*/2,
                               /*pad=*/1),
                       0.2);
        out.push_back(h);
    }
    return out;
}

const RandomConvExtractor& get_extractor(const std::string& id, int64_t in_channels) {
    static std::mutex mu;
    static std::map<std::pair<std::string, int64_t>, std::unique_ptr<RandomConvExtractor>> cache;
    std::lock_guard<std::mutex> lock(mu);
    auto key = std::make_pair(id, in_channels);
    auto it = cache.find(key);
    if (it != cache.end()) return *it->second;
    std::unique_ptr<RandomConvExtractor> built;
    if (id == "rconv3") {
        built = std::make_unique<RandomConvExtractor>(in_channels,
                                                      std::vector<int64_t>{8, 16, 16}, 77001);
    } else {
        throw ExtractorMissing("no extractor registered under id '" + id + "'");
    }
    auto [pos, ok] = cache.emplace(std::move(key), std::move(built));
    return *pos->second;
}

namespace {

// Channel-wise unit normalization: f / sqrt(sum_c f^2 + eps).
Var unit_normalize(const Var& f) {
    const int64_t C = f.val().dim(1);
    Tensor ones_w({1, C, 1, 1}, 1.0);
    Var sumsq = conv_nd(square(f), constant(ones_w), constant(Tensor({1})), 1, 0);
    Var inv_norm = vexp(vscale(vlog(vshift(sumsq, 1e-10)), -0.5));
    Var tiled = concat(std::vector<Var>(static_cast<size_t>(C), inv_norm), /*axis=*/1);
    return vmul(f, tiled);
}

Var perceptual_2d(const Var& x, const Var& y, const RandomConvExtractor& ex,
                  const std::vector<double>& layer_weights) {
    std::vector<Var> fx = ex.features(x);
    std::vector<Var> fy = ex.features(y);
    Var total;
    for (size_t l = 0; l < fx.size(); ++l) {
        Var term = vscale(mse_loss(unit_normalize(fx[l]), unit_normalize(fy[l])),
                          layer_weights[l]);
        total = total.defined() ? total + term : term;
    }
    return total;
}

// Rank-4 view of one slice perpendicular to `axis` (2, 3 or 4) of a volume.
Var take_slice(const Var& v, int axis, int64_t index) {
    const auto& s = v.val().shape();
    Var cut = slice_axis(v, axis, index, 1);
    std::vector<int64_t> flat = {s[0], s[1], 0, 0};
    if (axis == 2) {
        flat[2] = s[3];
        flat[3] = s[4];
        return reshape(cut, flat);
    }
    if (axis == 3) {
        flat[2] = s[2];
        flat[3] = s[4];
        return reshape(cut, flat);
    }
    flat[2] = s[2];
    flat[3] = s[3];
    return reshape(cut, flat);
}

}  // namespace

std::vector<int64_t> perceptual_slice_indices(int64_t n, double fraction, Rng& rng) {
    const int64_t k = static_cast<int64_t>(std::ceil(fraction * static_cast<double>(n)));
    std::vector<int64_t> pool(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) pool[static_cast<size_t>(i)] = i;
    for (int64_t i = 0; i < k; ++i) {
        const int64_t j = i + rng.below(n - i);
        std::swap(pool[static_cast<size_t>(i)], pool[static_cast<size_t>(j)]);
    }
    pool.resize(static_cast<size_t>(k));
    std::sort(pool.begin(), pool.end());  // canonical evaluation order
    return pool;
}

Var perceptual_loss(const Var& x, const Var& y, const PerceptualConfig& cfg, RandomSource src) {
    if (!x.val().same_shape(y.val())) {
        throw ShapeMismatch("perceptual_loss inputs must share a shape");
    }
    const RandomConvExtractor& ex = get_extractor(cfg.extractor_id, x.val().dim(1));
    if (cfg.layer_weights.size() != ex.layer_count()) {
        throw ConfigError("layer_weights size must match the extractor layer count");
    }
    const int rank = x.val().rank();
    if (cfg.mode == PerceptualMode::full_2d) {
        if (rank != 4) throw ModeMismatch("full_2d mode requires 2D batches (rank 4)");
        return perceptual_2d(x, y, ex, cfg.layer_weights);
    }
    if (rank != 5) throw ModeMismatch("slice_2p5d mode requires 3D volumes (rank 5)");
    if (!(cfg.slice_fraction > 0.0 && cfg.slice_fraction <= 1.0)) {
        throw RangeError("slice_fraction must lie in (0, 1]");
    }

    Rng rng(src);
    Var total;
    int64_t n_terms = 0;
    for (int axis = 2; axis <= 4; ++axis) {
        const int64_t n = x.val().dim(axis);
        const std::vector<int64_t> picks = perceptual_slice_indices(n, cfg.slice_fraction, rng);
        for (int64_t idx : picks) {
            Var term = perceptual_2d(take_slice(x, axis, idx), take_slice(y, axis, idx), ex,
                                     cfg.layer_weights);
            total = total.defined() ? total + term : term;
            ++n_terms;
        }
    }
    return vscale(total, 1.0 / static_cast<double>(n_terms));
}

double perceptual_loss(const Tensor& x, const Tensor& y, const PerceptualConfig& cfg,
                       RandomSource src) {
    NoGradGuard ng;
    return perceptual_loss(constant(x), constant(y), cfg, src).val().item();
}

// ---- regularizers -----------------------------------------------------------------

Var kl_loss(const Var& mu, const Var& log_var) {
    if (!mu.val().same_shape(log_var.val())) {
        throw ShapeMismatch("kl_loss inputs must share a shape");
    }
    const int64_t B = mu.val().dim(0);
    Var density = vshift(vsub(vadd(square(mu), vexp_clamped(log_var, 1e-8, 1e8)), log_var),
                         -1.0);
    return vscale(sum_all(density), 0.5 / static_cast<double>(B));
}

double kl_loss(const Tensor& mu, const Tensor& log_var) {
    NoGradGuard ng;
    return kl_loss(constant(mu), constant(log_var)).val().item();
}

// ---- diffusion ----------------------------------------------------------------------

DiffusionBatch make_diffusion_training_batch(const Tensor& x0, const NoiseSchedule& schedule,
                                             Rng& rng, const Tensor* context,
                                             double cond_dropout_prob) {
    if (!(cond_dropout_prob >= 0.0 && cond_dropout_prob <= 1.0)) {
        throw RangeError("cond_dropout_prob must lie in [0, 1]");
    }
    validate_batch(x0);
    const int64_t B = x0.dim(0);
    const int64_t item = x0.numel() / B;

    DiffusionBatch batch;
    batch.t.resize(static_cast<size_t>(B));
    for (int64_t b = 0; b < B; ++b) {
        batch.t[static_cast<size_t>(b)] = static_cast<int>(rng.uniform_int(1, schedule.T));
    }
    batch.eps = draw_gaussian(x0.shape(), rng);
    batch.x_t = add_noise(x0, batch.eps, batch.t, schedule);

    batch.target = Tensor(x0.shape());
    for (int64_t b = 0; b < B; ++b) {
        const double ab = schedule.alpha_bar(batch.t[static_cast<size_t>(b)]);
        const double sa = std::sqrt(ab);
        const double sb = std::sqrt(1.0 - ab);
        for (int64_t i = b * item; i < (b + 1) * item; ++i) {
            switch (schedule.prediction_type) {
                case PredictionType::epsilon: batch.target[i] = batch.eps[i]; break;
                case PredictionType::sample: batch.target[i] = x0[i]; break;
                case PredictionType::v_prediction:
                    batch.target[i] = sa * batch.eps[i] - sb * x0[i];
                    break;
            }
        }
    }

    if (context != nullptr) {
        if (context->rank() != 3 || context->dim(0) != B) {
            throw ShapeMismatch("context must be (B, seq, dim)");
        }
        batch.context = *context;
        const int64_t row = context->numel() / B;
        for (int64_t b = 0; b < B; ++b) {
            if (rng.uniform() < cond_dropout_prob) {
                for (int64_t i = b * row; i < (b + 1) * row; ++i) batch.context[i] = 0.0;
            }
        }
    }
    return batch;
}

Var diffusion_training_loss(const DiffusionUNet& net, const Tensor& x0,
                            const NoiseSchedule& schedule, Rng& rng, const Tensor* context,
                            double cond_dropout_prob) {
    DiffusionBatch batch =
        make_diffusion_training_batch(x0, schedule, rng, context, cond_dropout_prob);
    Var ctx = batch.context.defined() ? constant(batch.context) : Var();
    Var out = net.forward(constant(batch.x_t), batch.t, ctx);
    return mse_loss(out, constant(batch.target));
}

// ---- token losses ----------------------------------------------------------------------

Var token_cross_entropy(const Var& logits, const std::vector<std::vector<int64_t>>& targets) {
    const int64_t B = logits.val().dim(0);
    const int64_t L = logits.val().dim(1);
    const int64_t V = logits.val().dim(2);
    if (static_cast<int64_t>(targets.size()) != B) {
        throw ShapeMismatch("target batch size does not match logits");
    }
    std::vector<int64_t> flat;
    flat.reserve(static_cast<size_t>(B * L));
    for (const auto& row : targets) {
        if (static_cast<int64_t>(row.size()) != L) {
            throw ShapeMismatch("target length does not match logits");
        }
        for (int64_t tok : row) {
            if (tok < 0 || tok >= V) throw TokenOutOfVocab("target token outside vocab");
            flat.push_back(tok);
        }
    }
    Var logp = log_softmax_lastdim(reshape(logits, {B * L, V}));
    return vneg(mean_all(pick_lastdim(logp, flat)));
}

}  // namespace genimg

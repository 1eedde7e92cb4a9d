#include "genimg/inferers.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <functional>
#include <utility>

#include "genimg/autograd.hpp"
#include "genimg/errors.hpp"

namespace genimg {

// ---- samplers ----------------------------------------------------------------

std::string to_string(SamplerKind k) {
    switch (k) {
        case SamplerKind::ddpm: return "ddpm";
        case SamplerKind::ddim: return "ddim";
        case SamplerKind::pndm: return "pndm";
    }
    return "?";
}

SamplerKind sampler_from_string(const std::string& s) {
    if (s == "ddpm") return SamplerKind::ddpm;
    if (s == "ddim") return SamplerKind::ddim;
    if (s == "pndm") return SamplerKind::pndm;
    throw RangeError("unknown sampler kind '" + s + "'");
}

namespace {

using PredictFn = std::function<Tensor(const Tensor&, int)>;

Tensor run_sampler(const PredictFn& predict, const NoiseSchedule& schedule, SamplerKind kind,
                   int n_steps, double eta, Tensor x, Rng& rng) {
    if (kind == SamplerKind::ddpm) {
        if (n_steps != schedule.T) {
            throw ConfigError("ddpm is ancestral over adjacent steps; n_steps must equal T");
        }
        for (int t = schedule.T; t >= 1; --t) {
            x = ddpm_step(predict(x, t), t, x, schedule, rng);
        }
        return x;
    }
    if (kind == SamplerKind::ddim) {
        const std::vector<int> seq = timestep_subsequence(schedule.T, n_steps);
        for (size_t i = 0; i < seq.size(); ++i) {
            const int t = seq[i];
            const int t_prev = i + 1 < seq.size() ? seq[i + 1] : 0;
            x = ddim_step(predict(x, t), t, t_prev, x, schedule, eta, rng);
        }
        return x;
    }
    SamplerState state = make_sampler_state(schedule, n_steps, eta);
    while (!state.finished) {
        const int t = state.next_eval_t;
        Tensor out = predict(x, t);
        auto [next, st] = pndm_step(out, t, x, std::move(state), schedule);
        x = std::move(next);
        state = std::move(st);
    }
    return x;
}

// Resolve the unconditioned embedding against the live context: undefined
// means zeros (what training-time conditioning dropout fed the net), batch-1
// broadcasts across the batch.
Tensor resolve_null_context(const Tensor& context, const Tensor& null_context) {
    if (!null_context.defined()) return Tensor(context.shape());
    if (null_context.same_shape(context)) return null_context;
    if (null_context.rank() == 3 && context.rank() == 3 && null_context.dim(0) == 1 &&
        null_context.dim(1) == context.dim(1) && null_context.dim(2) == context.dim(2)) {
        Tensor tiled(context.shape());
        const int64_t row = null_context.numel();
        for (int64_t b = 0; b < context.dim(0); ++b) {
            std::memcpy(tiled.data() + b * row, null_context.data(),
                        sizeof(double) * size_t(row));
        }
        return tiled;
    }
    throw ShapeMismatch("null_context shape " + null_context.shape_str() +
                        " incompatible with context " + context.shape_str());
}

void validate_guidance(const GuidanceConfig& g) {
    if (!std::isfinite(g.weight)) throw NonFiniteValue("guidance weight must be finite");
    if (g.weight < 0.0) throw RangeError("guidance weight must be >= 0");
}

// Raw-prediction guidance around an arbitrary conditional model. `forward`
// must run one network evaluation with the supplied context (undefined =
// the truly context-free path, used when no context was given at all).
PredictFn make_guided_predict(std::function<Tensor(const Tensor&, int, const Tensor*)> forward,
                              const SampleOptions& opts, int64_t* evals) {
    validate_guidance(opts.guidance);
    const Tensor context = opts.context;
    if (!context.defined()) {
        return [forward = std::move(forward), evals](const Tensor& x, int t) {
            if (evals) ++*evals;
            return forward(x, t, nullptr);
        };
    }
    const double w = opts.guidance.weight;
    const Tensor null_ctx = resolve_null_context(context, opts.guidance.null_context);
    return [forward = std::move(forward), context, null_ctx, w, evals](const Tensor& x, int t) {
        if (w == 0.0) {
            if (evals) ++*evals;
            return forward(x, t, &null_ctx);
        }
        if (w == 1.0) {
            if (evals) ++*evals;
            return forward(x, t, &context);
        }
        if (evals) *evals += 2;
        Tensor uncond = forward(x, t, &null_ctx);
        Tensor cond = forward(x, t, &context);
        Tensor diff = sub(cond, uncond);
        return add_scaled(uncond, 1.0, diff, w);
    };
}

}  // namespace

ImageBatch sample_images(const DiffusionUNet& unet, const NoiseSchedule& schedule,
                         const std::vector<int64_t>& shape, Rng& rng, const SampleOptions& opts,
                         int64_t* eval_count) {
    if (eval_count) *eval_count = 0;
    Tensor x = draw_gaussian(shape, rng);
    PredictFn predict = make_guided_predict(
        [&unet](const Tensor& x_t, int t, const Tensor* ctx) {
            return unet_forward(unet, x_t, {t}, ctx);
        },
        opts, eval_count);
    return run_sampler(predict, schedule, opts.sampler, opts.n_steps, opts.eta, std::move(x),
                       rng);
}

ImageBatch latent_sample(const DiffusionUNet& unet, const AutoencoderKL& decoder,
                         const NoiseSchedule& schedule, const std::vector<int64_t>& latent_shape,
                         double scale_factor, Rng& rng, const SampleOptions& opts) {
    if (!(scale_factor > 0.0)) throw RangeError("scale_factor must be positive");
    if (latent_shape.size() < 3 ||
        latent_shape[1] != decoder.config().latent_channels) {
        throw ShapeMismatch("latent shape must be (B, " +
                            std::to_string(decoder.config().latent_channels) + ", spatial...)");
    }
    Tensor z = sample_images(unet, schedule, latent_shape, rng, opts);
    return kl_decode(decoder, scale(z, 1.0 / scale_factor));
}

double compute_scale_factor(const AutoencoderKL& encoder, const ImageBatch& calibration) {
    if (!calibration.defined() || calibration.numel() == 0 || calibration.dim(0) == 0) {
        throw EmptyBatch("scale factor calibration needs a nonempty batch");
    }
    const KlMomentsT m = kl_encode(encoder, calibration);
    double mean = 0.0;
    for (int64_t i = 0; i < m.mu.numel(); ++i) mean += m.mu[i];
    mean /= double(m.mu.numel());
    double var = 0.0;
    for (int64_t i = 0; i < m.mu.numel(); ++i) {
        const double d = m.mu[i] - mean;
        var += d * d;
    }
    var /= double(m.mu.numel());
    const double sd = std::sqrt(var);
    if (!(sd > 1e-12)) throw NumericalFailure("calibration latents are (near) constant");
    return 1.0 / sd;
}

// ---- likelihoods ----------------------------------------------------------------

double sequence_log_likelihood(const TransformerDecoder& net, const TokenSequence& seq) {
    if (seq.tokens.empty()) throw EmptyInput("cannot score an empty token sequence");
    if (seq.vocab_size != net.config().vocab_size) {
        throw ConfigError("sequence vocab " + std::to_string(seq.vocab_size) +
                          " does not match transformer vocab " +
                          std::to_string(net.config().vocab_size));
    }
    const int64_t L = int64_t(seq.tokens.size());
    const int64_t V = net.config().vocab_size;

    // Teacher-forced scoring: feed [BOS, t_0 .. t_{L-2}]; logits at position i
    // then predict t_i.
    std::vector<int64_t> input(static_cast<size_t>(L));
    input[0] = seq.bos_token();
    for (int64_t i = 0; i + 1 < L; ++i) input[size_t(i + 1)] = seq.tokens[size_t(i)];

    NoGradGuard ng;
    Var logits = net.forward({input});
    Var logp = pick_lastdim(log_softmax_lastdim(reshape(logits, {L, V})), seq.tokens);
    double total = 0.0;
    for (int64_t i = 0; i < L; ++i) total += logp.val()[i];
    return total;
}

std::vector<double> transformer_log_likelihood(const VQVAE& vqvae, const TransformerDecoder& net,
                                               const Ordering& ordering, const ImageBatch& x) {
    const Tensor z = vq_encode(vqvae, x);
    std::vector<int64_t> latent_sp(z.shape().begin() + 2, z.shape().end());
    if (latent_sp != ordering.spatial_shape) {
        throw ShapeMismatch("ordering built for " + shape_to_string(ordering.spatial_shape) +
                            " but latents have spatial dims " + shape_to_string(latent_sp));
    }
    const std::vector<int64_t> indices =
        vq_nearest_indices(z, vqvae.codebook().entries.val());

    const int64_t B = z.dim(0);
    const int64_t sp = int64_t(ordering.permutation.size());
    std::vector<double> out(static_cast<size_t>(B));
    for (int64_t b = 0; b < B; ++b) {
        TokenSequence seq;
        seq.vocab_size = vqvae.config().num_embeddings + 1;  // + BOS
        seq.ordering_id = to_string(ordering.kind);
        seq.tokens.resize(size_t(sp));
        for (int64_t i = 0; i < sp; ++i) {
            seq.tokens[size_t(i)] = indices[size_t(b * sp + ordering.permutation[size_t(i)])];
        }
        out[size_t(b)] = sequence_log_likelihood(net, seq);
    }
    return out;
}

OodResult ood_score(const VQVAE& vqvae, const TransformerDecoder& net, const Ordering& ordering,
                    const ImageBatch& in_dist, const ImageBatch& out_dist) {
    OodResult r;
    for (double ll : transformer_log_likelihood(vqvae, net, ordering, in_dist)) {
        r.scores_in.push_back(-ll);
    }
    for (double ll : transformer_log_likelihood(vqvae, net, ordering, out_dist)) {
        r.scores_out.push_back(-ll);
    }
    // In-distribution is the low-score class: the AUC asks how often an OOD
    // image out-scores an in-distribution one.
    r.report.name = "ood_auc";
    r.report.value = auc(r.scores_out, r.scores_in);
    r.report.n_samples = int64_t(r.scores_in.size() + r.scores_out.size());
    return r;
}

// ---- translation --------------------------------------------------------------------

ImageBatch translate(const DiffusionUNet& unet, const ControlNet& ctrl,
                     const NoiseSchedule& schedule, const ImageBatch& conditioning_image,
                     Rng& rng, const SampleOptions& opts, int64_t* eval_count) {
    if (conditioning_image.rank() < 3) {
        throw ShapeMismatch("conditioning image must be (B, C, spatial...)");
    }
    if (eval_count) *eval_count = 0;
    std::vector<int64_t> shape = conditioning_image.shape();
    shape[1] = unet.config().in_channels;
    Tensor x = draw_gaussian(shape, rng);
    Var cond = constant(conditioning_image);
    PredictFn predict = make_guided_predict(
        [&unet, &ctrl, &cond](const Tensor& x_t, int t, const Tensor* ctx) {
            NoGradGuard ng;
            Var context = ctx ? constant(*ctx) : Var();
            return combined_forward(unet, ctrl, constant(x_t), {t}, cond, context).val();
        },
        opts, eval_count);
    return run_sampler(predict, schedule, opts.sampler, opts.n_steps, opts.eta, std::move(x),
                       rng);
}

// ---- tiled upscaling --------------------------------------------------------------------

Tensor nearest_resize(const Tensor& x, const std::vector<int64_t>& spatial_dims) {
    const int sr = x.rank() - 2;
    if (sr < 1 || size_t(sr) != spatial_dims.size()) {
        throw ShapeMismatch("nearest_resize needs one target size per spatial dim");
    }
    for (int64_t d : spatial_dims) {
        if (d < 1) throw RangeError("target dims must be positive");
    }
    std::vector<int64_t> out_shape = {x.dim(0), x.dim(1)};
    out_shape.insert(out_shape.end(), spatial_dims.begin(), spatial_dims.end());
    Tensor out(out_shape);

    std::vector<int64_t> src_sp(x.shape().begin() + 2, x.shape().end());
    int64_t out_sp = 1, in_sp = 1;
    for (int r = 0; r < sr; ++r) {
        out_sp *= spatial_dims[size_t(r)];
        in_sp *= src_sp[size_t(r)];
    }
    const int64_t planes = x.dim(0) * x.dim(1);
    for (int64_t p = 0; p < planes; ++p) {
        for (int64_t o = 0; o < out_sp; ++o) {
            int64_t rem = o, src_flat = 0;
            for (int r = sr - 1; r >= 0; --r) {
                const int64_t od = spatial_dims[size_t(r)];
                const int64_t id = src_sp[size_t(r)];
                const int64_t oc = rem % od;
                rem /= od;
                const int64_t ic = oc * id / od;  // floor nearest
                int64_t stride = 1;
                for (int rr = r + 1; rr < sr; ++rr) stride *= src_sp[size_t(rr)];
                src_flat += ic * stride;
            }
            out[p * out_sp + o] = x[p * in_sp + src_flat];
        }
    }
    return out;
}

ImageBatch augment_low_res(const ImageBatch& low_res, int noise_level,
                           const NoiseSchedule& aug_schedule, Rng& rng) {
    if (noise_level < 0 || noise_level > aug_schedule.T) {
        throw RangeError("noise_level must lie in [0, " + std::to_string(aug_schedule.T) + "]");
    }
    if (noise_level == 0) return low_res;  // clean conditioning, no rng draw
    Tensor eps = draw_gaussian(low_res.shape(), rng);
    return add_noise(low_res, eps, noise_level, aug_schedule);
}

ImageBatch upscale_tile(const DiffusionUNet& unet, const AutoencoderKL& decoder,
                        const NoiseSchedule& schedule, const UpscalerConditioning& cond,
                        double scale_factor, Rng& rng, const SampleOptions& opts) {
    if (!(scale_factor > 0.0)) throw RangeError("scale_factor must be positive");
    const ImageBatch& low = cond.low_res;
    if (low.rank() < 3) throw ShapeMismatch("low_res must be (B, C, spatial...)");
    const int sr = low.rank() - 2;
    const int64_t comp = decoder.config().compression_factor();

    std::vector<int64_t> latent_sp(static_cast<size_t>(sr));
    for (int r = 0; r < sr; ++r) {
        const int64_t target = low.dim(2 + r) * 2;
        if (target % comp != 0) {
            throw DivisibilityError("target dim " + std::to_string(target) +
                                    " not divisible by compression factor " +
                                    std::to_string(comp));
        }
        latent_sp[size_t(r)] = target / comp;
    }

    const int64_t expected_in =
        decoder.config().latent_channels + low.dim(1) + 1;  // state + low-res + level channel
    if (unet.config().in_channels != expected_in ||
        unet.config().out_channels != decoder.config().latent_channels) {
        throw ShapeMismatch("upscaler unet must take " + std::to_string(expected_in) +
                            " channels and emit " +
                            std::to_string(decoder.config().latent_channels));
    }

    // Draw order: augmentation noise first, then the start latent.
    Tensor aug = augment_low_res(low, cond.noise_level, cond.aug_schedule, rng);
    Tensor cond_lat = nearest_resize(aug, latent_sp);
    std::vector<int64_t> level_shape = {low.dim(0), 1};
    level_shape.insert(level_shape.end(), latent_sp.begin(), latent_sp.end());
    Tensor level(level_shape, double(cond.noise_level) / double(cond.aug_schedule.T));
    Tensor cond_stack = concat_channels_tensor(cond_lat, level);

    std::vector<int64_t> latent_shape = {low.dim(0), decoder.config().latent_channels};
    latent_shape.insert(latent_shape.end(), latent_sp.begin(), latent_sp.end());
    Tensor x = draw_gaussian(latent_shape, rng);

    int64_t* no_count = nullptr;
    PredictFn predict = make_guided_predict(
        [&unet, &cond_stack](const Tensor& x_t, int t, const Tensor* ctx) {
            return unet_forward(unet, concat_channels_tensor(x_t, cond_stack), {t}, ctx);
        },
        opts, no_count);
    Tensor z = run_sampler(predict, schedule, opts.sampler, opts.n_steps, opts.eta, std::move(x),
                           rng);
    return kl_decode(decoder, scale(z, 1.0 / scale_factor));
}

ImageBatch blend_tiles(const std::vector<int64_t>& target_shape,
                       const std::vector<PlacedTile>& tiles, const TileSpec& spec) {
    if (target_shape.size() < 3) throw ShapeMismatch("target shape must be (B, C, spatial...)");
    const int sr = int(target_shape.size()) - 2;
    if (spec.tile_dims.size() != size_t(sr) || spec.overlap.size() != size_t(sr)) {
        throw ShapeMismatch("tile spec rank does not match the target");
    }
    if (tiles.empty()) throw TilingMismatch("no tiles to blend");

    Tensor accum(target_shape);
    Tensor wsum(target_shape);
    std::vector<int64_t> target_sp(target_shape.begin() + 2, target_shape.end());
    int64_t target_plane = 1;
    for (int64_t d : target_sp) target_plane *= d;
    const int64_t planes = target_shape[0] * target_shape[1];

    for (const PlacedTile& tile : tiles) {
        if (tile.image.rank() != int(target_shape.size()) ||
            tile.image.dim(0) != target_shape[0] || tile.image.dim(1) != target_shape[1]) {
            throw ShapeMismatch("tile batch/channel dims do not match the target");
        }
        if (tile.offsets.size() != size_t(sr)) {
            throw ShapeMismatch("tile offsets rank does not match the target");
        }
        std::vector<int64_t> tile_sp(tile.image.shape().begin() + 2, tile.image.shape().end());
        int64_t tile_plane = 1;
        for (int r = 0; r < sr; ++r) {
            if (tile.offsets[size_t(r)] < 0 ||
                tile.offsets[size_t(r)] + tile_sp[size_t(r)] > target_sp[size_t(r)]) {
                throw TilingMismatch("tile extends outside the target");
            }
            tile_plane *= tile_sp[size_t(r)];
        }

        // Per-dimension blending weight profile.
        std::vector<std::vector<double>> ramps(static_cast<size_t>(sr));
        for (int r = 0; r < sr; ++r) {
            const int64_t n = tile_sp[size_t(r)];
            const int64_t o = spec.overlap[size_t(r)];
            std::vector<double>& ramp = ramps[size_t(r)];
            ramp.assign(size_t(n), 1.0);
            if (spec.blend == TileBlend::linear_ramp && o > 0) {
                for (int64_t i = 0; i < n; ++i) {
                    const double edge = double(std::min(i + 1, n - i));
                    ramp[size_t(i)] = std::min(1.0, edge / double(o + 1));
                }
            }
        }

        for (int64_t p = 0; p < planes; ++p) {
            for (int64_t i = 0; i < tile_plane; ++i) {
                int64_t rem = i, dst = 0;
                double w = 1.0;
                int64_t stride = 1;
                for (int r = sr - 1; r >= 0; --r) {
                    const int64_t c = rem % tile_sp[size_t(r)];
                    rem /= tile_sp[size_t(r)];
                    w *= ramps[size_t(r)][size_t(c)];
                    dst += (tile.offsets[size_t(r)] + c) * stride;
                    stride *= target_sp[size_t(r)];
                }
                accum[p * target_plane + dst] += w * tile.image[p * tile_plane + i];
                wsum[p * target_plane + dst] += w;
            }
        }
    }

    Tensor out(target_shape);
    for (int64_t i = 0; i < out.numel(); ++i) {
        if (wsum[i] <= 0.0) throw TilingMismatch("tiles leave part of the target uncovered");
        out[i] = accum[i] / wsum[i];
    }
    return out;
}

ImageBatch upscale(const DiffusionUNet& unet, const AutoencoderKL& decoder,
                   const NoiseSchedule& schedule, const UpscalerConditioning& cond,
                   const TileSpec& tiles, double scale_factor, RandomSource src,
                   const SampleOptions& opts) {
    const ImageBatch& low = cond.low_res;
    if (low.rank() < 3) throw ShapeMismatch("low_res must be (B, C, spatial...)");
    const int sr = low.rank() - 2;
    if (tiles.tile_dims.size() != size_t(sr) || tiles.overlap.size() != size_t(sr)) {
        throw ShapeMismatch("tile spec rank does not match the image");
    }
    const int64_t comp = decoder.config().compression_factor();

    std::vector<int64_t> target_sp(static_cast<size_t>(sr));
    std::vector<int64_t> counts(static_cast<size_t>(sr));
    for (int r = 0; r < sr; ++r) {
        target_sp[size_t(r)] = low.dim(2 + r) * 2;
        const int64_t tile = tiles.tile_dims[size_t(r)];
        const int64_t o = tiles.overlap[size_t(r)];
        if (tile < 1 || o < 0 || o >= tile) throw RangeError("need 0 <= overlap < tile_dims");
        if (tile > target_sp[size_t(r)]) throw TilingMismatch("tile larger than the target");
        const int64_t stride = tile - o;
        if ((target_sp[size_t(r)] - tile) % stride != 0) {
            throw TilingMismatch("tiles at stride " + std::to_string(stride) +
                                 " do not land on the target boundary");
        }
        if (tile % 2 != 0 || stride % 2 != 0 || tile % comp != 0) {
            throw TilingMismatch(
                "tile dims and strides must be even and divisible by the compression factor");
        }
        counts[size_t(r)] = (target_sp[size_t(r)] - tile) / stride + 1;
    }

    int64_t n_tiles = 1;
    for (int64_t c : counts) n_tiles *= c;

    std::vector<PlacedTile> placed;
    placed.reserve(size_t(n_tiles));
    for (int64_t idx = 0; idx < n_tiles; ++idx) {
        std::vector<int64_t> offsets(static_cast<size_t>(sr));
        int64_t rem = idx;
        for (int r = sr - 1; r >= 0; --r) {
            const int64_t stride = tiles.tile_dims[size_t(r)] - tiles.overlap[size_t(r)];
            offsets[size_t(r)] = (rem % counts[size_t(r)]) * stride;
            rem /= counts[size_t(r)];
        }

        // Low-res crop of this tile (target coords halve).
        Tensor low_tile = low;
        for (int r = 0; r < sr; ++r) {
            low_tile = slice_tensor(low_tile, 2 + r, offsets[size_t(r)] / 2,
                                    tiles.tile_dims[size_t(r)] / 2);
        }
        UpscalerConditioning tile_cond;
        tile_cond.low_res = std::move(low_tile);
        tile_cond.noise_level = cond.noise_level;
        tile_cond.aug_schedule = cond.aug_schedule;

        Rng tile_rng(src.substream(uint64_t(idx)));
        PlacedTile pt;
        pt.offsets = std::move(offsets);
        pt.image = upscale_tile(unet, decoder, schedule, tile_cond, scale_factor, tile_rng, opts);
        placed.push_back(std::move(pt));
    }

    std::vector<int64_t> target_shape = {low.dim(0), decoder.config().out_channels};
    target_shape.insert(target_shape.end(), target_sp.begin(), target_sp.end());
    return blend_tiles(target_shape, placed, tiles);
}

}  // namespace genimg

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "genimg/metrics.hpp"
#include "genimg/networks.hpp"
#include "genimg/ordering.hpp"
#include "genimg/random.hpp"
#include "genimg/schedulers.hpp"

namespace genimg {

// ---- samplers ---------------------------------------------------------------

enum class SamplerKind { ddpm, ddim, pndm };
std::string to_string(SamplerKind k);
SamplerKind sampler_from_string(const std::string& s);

// Classifier-free guidance: prediction = uncond + w (cond - uncond), applied
// to the raw model output before prediction-type conversion. w = 0 runs only
// the unconditioned pass, w = 1 only the conditioned one (both exact, one
// network evaluation per step); other weights cost two evaluations per step.
// An undefined null_context stands for the zero embedding (matching the
// training-time conditioning dropout); a batch-1 null_context broadcasts.
struct GuidanceConfig {
    double weight = 1.0;
    Tensor null_context;
};

struct SampleOptions {
    SamplerKind sampler = SamplerKind::ddim;
    int n_steps = 50;   // ddpm must run the full schedule (n_steps == T)
    double eta = 0.0;   // ddim only
    Tensor context;     // undefined = unconditional model
    GuidanceConfig guidance;
};

// Iterative denoising from pure noise. `eval_count`, when given, receives the
// number of network evaluations consumed.
ImageBatch sample_images(const DiffusionUNet& unet, const NoiseSchedule& schedule,
                         const std::vector<int64_t>& shape, Rng& rng,
                         const SampleOptions& opts = {}, int64_t* eval_count = nullptr);

// Sample in latent space, divide by scale_factor, decode.
ImageBatch latent_sample(const DiffusionUNet& unet, const AutoencoderKL& decoder,
                         const NoiseSchedule& schedule, const std::vector<int64_t>& latent_shape,
                         double scale_factor, Rng& rng, const SampleOptions& opts = {});

// 1 / standard deviation (population) of the encoder means over a calibration
// batch; multiplying encoded latents by this brings them to unit scale.
double compute_scale_factor(const AutoencoderKL& encoder, const ImageBatch& calibration);

// ---- likelihoods -------------------------------------------------------------

// Natural-log probability of a token sequence under the decoder: BOS is
// prepended, position i predicts tokens[i]. Always <= 0.
double sequence_log_likelihood(const TransformerDecoder& net, const TokenSequence& seq);

// Per-image log-likelihood: encode, quantize to indices, apply the ordering,
// score with sequence_log_likelihood. The token vocab is codebook size + 1
// (the BOS symbol).
std::vector<double> transformer_log_likelihood(const VQVAE& vqvae, const TransformerDecoder& net,
                                               const Ordering& ordering, const ImageBatch& x);

// Negative log-likelihood anomaly scores; in-distribution is the low-score
// class, so the reported AUC is the probability that an out-of-distribution
// image scores higher than an in-distribution one.
struct OodResult {
    std::vector<double> scores_in;
    std::vector<double> scores_out;
    MetricReport report;  // name "ood_auc"
};
OodResult ood_score(const VQVAE& vqvae, const TransformerDecoder& net, const Ordering& ordering,
                    const ImageBatch& in_dist, const ImageBatch& out_dist);

// ---- translation ----------------------------------------------------------------

// Image-to-image sampling: every network evaluation is the ControlNet
// combined forward conditioned on `conditioning_image`. Output shape is
// (B, unet out channels, conditioning spatial dims).
ImageBatch translate(const DiffusionUNet& unet, const ControlNet& ctrl,
                     const NoiseSchedule& schedule, const ImageBatch& conditioning_image,
                     Rng& rng, const SampleOptions& opts = {}, int64_t* eval_count = nullptr);

// ---- tiled upscaling ---------------------------------------------------------------

// Noise-augmentation level for the low-resolution conditioning; aug_schedule
// is the forward process the level indexes into (level 0 = clean).
struct UpscalerConditioning {
    ImageBatch low_res;
    int noise_level = 0;
    NoiseSchedule aug_schedule;
};

enum class TileBlend { average, linear_ramp };

// Tiling of the target image plane. Tiles are placed at stride
// (tile_dims - overlap) per dim and must cover the target exactly.
struct TileSpec {
    std::vector<int64_t> tile_dims;  // in target-image pixels, one per spatial dim
    std::vector<int64_t> overlap;    // >= 0, < tile_dims
    TileBlend blend = TileBlend::linear_ramp;
};

// add_noise at `noise_level` under the augmentation schedule; level 0 returns
// the input bitwise and draws nothing from rng.
ImageBatch augment_low_res(const ImageBatch& low_res, int noise_level,
                           const NoiseSchedule& aug_schedule, Rng& rng);

// One placed tile: spatial offsets (in target pixels) plus its content.
struct PlacedTile {
    std::vector<int64_t> offsets;
    Tensor image;
};

// Blend overlapping tiles into a (B, C, target_spatial) canvas. average
// weighs every covering tile equally; linear_ramp feathers tile borders
// across the overlap width. Throws TilingMismatch if any output pixel is
// uncovered.
ImageBatch blend_tiles(const std::vector<int64_t>& target_shape,
                       const std::vector<PlacedTile>& tiles, const TileSpec& spec);

// The single-tile core: 2x super-resolution of one low-res tile. The
// diffusion state runs at the decoder's latent resolution with the
// noise-augmented low-res tile (nearest-resampled to latent dims) and a
// constant noise-level channel concatenated to it; the final latent is
// scaled by 1/scale_factor and decoded.
ImageBatch upscale_tile(const DiffusionUNet& unet, const AutoencoderKL& decoder,
                        const NoiseSchedule& schedule, const UpscalerConditioning& cond,
                        double scale_factor, Rng& rng, const SampleOptions& opts = {});

// Tiled 2x upscaling: split the target plane per `tiles`, upscale each tile
// with its own rng substream (tile i uses src.substream(i)), blend. A single
// tile covering the whole image reproduces upscale_tile(src.substream(0))
// bitwise.
ImageBatch upscale(const DiffusionUNet& unet, const AutoencoderKL& decoder,
                   const NoiseSchedule& schedule, const UpscalerConditioning& cond,
                   const TileSpec& tiles, double scale_factor, RandomSource src,
                   const SampleOptions& opts = {});

// Nearest-neighbor resampling of the spatial dims to explicit target sizes.
Tensor nearest_resize(const Tensor& x, const std::vector<int64_t>& spatial_dims);

}  // namespace genimg

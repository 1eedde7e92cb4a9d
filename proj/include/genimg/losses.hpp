#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "genimg/autograd.hpp"
#include "genimg/networks.hpp"
#include "genimg/random.hpp"
#include "genimg/schedulers.hpp"

namespace genimg {

// ---- spectral --------------------------------------------------------------

// Mean (over batch and channels) squared modulus of the difference of the
// orthonormal DFTs of x and y over their spatial dims. >= 0, zero iff x == y,
// symmetric.
Var spectral_loss(const Var& x, const Var& y);
double spectral_loss(const Tensor& x, const Tensor& y);

// ---- adversarial -----------------------------------------------------------

enum class AdversarialCriterion { least_squares, hinge, bce };
std::string to_string(AdversarialCriterion c);
AdversarialCriterion criterion_from_string(const std::string& s);

// Real label 1, fake label 0. Averages across multiscale logits maps.
// least_squares: mean (logit - label)^2.
// hinge: discriminator mean max(0, 1 -/+ logit); generator -mean(logit)
//        (the one loss here that is unbounded below).
// bce: binary cross-entropy with logits.
Var adversarial_loss(const std::vector<Var>& logits_maps, bool target_is_real,
                     bool for_discriminator, AdversarialCriterion criterion);

// ---- perceptual -------------------------------------------------------------

enum class PerceptualMode { full_2d, slice_2p5d };

struct PerceptualConfig {
    std::string extractor_id = "rconv3";
    std::vector<double> layer_weights = {1.0, 1.0, 1.0};
    PerceptualMode mode = PerceptualMode::full_2d;
    double slice_fraction = 0.25;
};

// Frozen random convolutional feature stack (the desk-scale stand-in for a
// pretrained medical-image backbone; any substitute can be registered).
class RandomConvExtractor {
public:
    RandomConvExtractor(int64_t in_channels, std::vector<int64_t> layer_channels, uint64_t seed);
    std::vector<Var> features(const Var& x) const;  // one map per layer
    size_t layer_count() const { return weights_.size(); }
    int64_t in_channels() const { return in_channels_; }

private:
    int64_t in_channels_ = 1;
    std::vector<Tensor> weights_, biases_;
};

// Lazily builds and caches the named extractor for the given input channel
// count; throws ExtractorMissing for unknown ids.
const RandomConvExtractor& get_extractor(const std::string& id, int64_t in_channels);

// The 2.5D slice picker: ceil(fraction * n) distinct indices from [0, n),
// returned sorted. This is the routine perceptual_loss applies once per
// orientation (axes 2, 3, 4 in that order) from a single stream.
std::vector<int64_t> perceptual_slice_indices(int64_t n, double fraction, Rng& rng);

// Weighted sum over extractor layers of the mean squared distance between
// channel-unit-normalized features. full_2d takes rank-4 batches; slice_2p5d
// takes rank-5 volumes, samples ceil(fraction * n) distinct slices per
// orthogonal orientation (indices re-drawn per call from src, evaluated in
// sorted order) and averages their 2D scores.
Var perceptual_loss(const Var& x, const Var& y, const PerceptualConfig& cfg,
                    RandomSource src = RandomSource{0, 0});
double perceptual_loss(const Tensor& x, const Tensor& y, const PerceptualConfig& cfg,
                       RandomSource src = RandomSource{0, 0});

// ---- regularizers ------------------------------------------------------------

// Mean over batch of 1/2 * sum(mu^2 + exp(log_var) - log_var - 1).
Var kl_loss(const Var& mu, const Var& log_var);
double kl_loss(const Tensor& mu, const Tensor& log_var);

// ---- diffusion ---------------------------------------------------------------

// One training example for the denoising objective: t ~ U{1..T} per item,
// eps ~ N(0,1), x_t = add_noise(x0, eps, t), and the prediction-type target.
// Draw order from rng: timesteps, then noise, then per-item context dropout.
struct DiffusionBatch {
    Tensor x_t;
    Tensor target;
    std::vector<int> t;
    Tensor eps;
    Tensor context;  // undefined tensor when no context; zeroed rows when dropped
};
DiffusionBatch make_diffusion_training_batch(const Tensor& x0, const NoiseSchedule& schedule,
                                             Rng& rng, const Tensor* context = nullptr,
                                             double cond_dropout_prob = 0.0);

Var diffusion_training_loss(const DiffusionUNet& net, const Tensor& x0,
                            const NoiseSchedule& schedule, Rng& rng,
                            const Tensor* context = nullptr, double cond_dropout_prob = 0.0);

// ---- composite weights (autoencoder objective) --------------------------------

struct AutoencoderLossWeights {
    double reconstruction = 1.0;  // L1
    double adversarial = 0.005;
    double perceptual = 0.002;
    double kl = 1e-8;
};

// ---- token losses --------------------------------------------------------------

// Mean negative log-likelihood of targets under logits (B, L, V).
Var token_cross_entropy(const Var& logits, const std::vector<std::vector<int64_t>>& targets);

}  // namespace genimg

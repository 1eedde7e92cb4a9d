#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "genimg/foundation.hpp"
#include "genimg/nn_blocks.hpp"

namespace genimg {

// ---- diffusion UNet -------------------------------------------------------

class DiffusionUNet : public NetworkHandle {
public:
    DiffusionUNet(UNetConfig cfg, RandomSource src);

    // t: one timestep per batch item (a single value broadcasts).
    Var forward(const Var& x, const std::vector<int>& t, const Var& context = {},
                const ControlResiduals* extra = nullptr) const;

    const UNetConfig& config() const { return cfg_; }

private:
    UNetConfig cfg_;
    UNetTrunk trunk_;
    struct UpLevel {
        std::vector<ResBlock> res;
        std::vector<AttentionBlock> attn;
        bool has_up = false;
        Conv up;
    };
    std::vector<UpLevel> up_levels_;  // stored deepest level first
    GroupNormLayer out_norm_;
    Conv out_conv_;
};

// Inference convenience: runs without building a tape.
ImageBatch unet_forward(const DiffusionUNet& net, const ImageBatch& x_t, const std::vector<int>& t,
                        const Tensor* context = nullptr);

// ---- diffusion encoder ----------------------------------------------------

struct DiffusionEncoderConfig {
    int spatial_rank = 2;
    int64_t in_channels = 1;
    std::vector<int64_t> channels = {16, 32};
    int num_res_blocks = 1;
    int norm_groups = 8;
    int64_t latent_dim = 16;
};

class DiffusionModelEncoder : public NetworkHandle {
public:
    DiffusionModelEncoder(DiffusionEncoderConfig cfg, RandomSource src);

    Var forward(const Var& x, const std::vector<int>& t) const;  // -> (B, latent_dim)
    const DiffusionEncoderConfig& config() const { return cfg_; }

private:
    DiffusionEncoderConfig cfg_;
    int64_t temb_dim_ = 0;
    Linear time_fc1_, time_fc2_;
    Conv conv_in_;
    struct Level {
        std::vector<ResBlock> res;
        bool has_down = false;
        Conv down;
    };
    std::vector<Level> levels_;
    GroupNormLayer out_norm_;
    Linear head_;
};

Tensor diffusion_encoder_forward(const DiffusionModelEncoder& net, const ImageBatch& x_t,
                                 const std::vector<int>& t);

// ---- ControlNet -----------------------------------------------------------

struct ControlNetConfig {
    UNetConfig unet;                    // must mirror the paired UNet
    int64_t conditioning_channels = 1;  // channels of the conditioning image
    int64_t conditioning_embed_channels = 16;
};

class ControlNet : public NetworkHandle {
public:
    ControlNet(ControlNetConfig cfg, RandomSource src);

    ControlResiduals forward(const Var& x_t, const std::vector<int>& t,
                             const Var& conditioning_image, const Var& context = {}) const;

    // Copies every same-named, same-shaped trunk parameter from the UNet.
    void init_from(const DiffusionUNet& unet);

    const ControlNetConfig& config() const { return cfg_; }

private:
    ControlNetConfig cfg_;
    UNetTrunk trunk_;
    Conv cond_in_, cond_mid_, cond_out_;  // conditioning encoder; cond_out_ zero-init
    std::vector<Conv> zero_convs_;        // one 1x1 zero conv per skip
    Conv mid_zero_;
};

Var combined_forward(const DiffusionUNet& unet, const ControlNet& ctrl, const Var& x_t,
                     const std::vector<int>& t, const Var& conditioning_image,
                     const Var& context = {});

// ---- KL autoencoder -------------------------------------------------------

struct AutoencoderKLConfig {
    int spatial_rank = 2;
    int64_t in_channels = 1;
    int64_t out_channels = 1;
    std::vector<int64_t> channels = {16, 32};  // one entry per resolution level
    int64_t latent_channels = 4;
    int num_res_blocks = 1;
    int norm_groups = 8;

    int64_t compression_factor() const { return int64_t{1} << (channels.size() - 1); }
};

class AutoencoderKL : public NetworkHandle {
public:
    AutoencoderKL(AutoencoderKLConfig cfg, RandomSource src);

    struct Moments {
        Var mu, log_var;
    };
    Moments encode(const Var& x) const;
    Var decode(const Var& z) const;
    const AutoencoderKLConfig& config() const { return cfg_; }

private:
    AutoencoderKLConfig cfg_;
    Conv enc_in_, enc_out_, dec_in_, dec_out_;
    struct EncLevel {
        std::vector<ResBlock> res;
        bool has_down = false;
        Conv down;
    };
    struct DecLevel {
        std::vector<ResBlock> res;
        bool has_up = false;
        Conv up;
    };
    std::vector<EncLevel> enc_levels_;
    std::vector<DecLevel> dec_levels_;  // deepest first
    GroupNormLayer enc_norm_, dec_norm_;
};

// Reparameterized sample mu + exp(log_var/2) * eps; exp(log_var) is clamped
// to [1e-8, 1e8].
Var kl_sample(const Var& mu, const Var& log_var, Rng& rng);
Tensor kl_sample(const Tensor& mu, const Tensor& log_var, Rng& rng);

// Spec-shaped conveniences (no tape).
struct KlMomentsT {
    Tensor mu, log_var;
};
KlMomentsT kl_encode(const AutoencoderKL& net, const ImageBatch& x);
ImageBatch kl_decode(const AutoencoderKL& net, const LatentBatch& z);

// ---- VQ-VAE ---------------------------------------------------------------

struct CodebookState {
    Var entries;  // (K, d)
    std::vector<int64_t> usage_counts;
    double commitment_beta = 0.25;
};
CodebookState make_codebook(ParamMap& pm, const std::string& name, int64_t K, int64_t d,
                            double commitment_beta, Rng& rng);

struct QuantizeResult {
    Var z_q;                      // same shape as z; values are exact codebook entries;
                                  // gradients pass straight through to z
    std::vector<int64_t> indices; // row-major over (batch, spatial)
    Var loss;                     // codebook + commitment terms, mean-reduced
};
// Nearest codebook entry per spatial position (Euclidean; lowest index wins ties).
QuantizeResult vq_quantize(const Var& z, CodebookState& cb);

// The index assignment alone (row-major over batch then spatial), without
// touching usage counts; vq_quantize uses this same search.
std::vector<int64_t> vq_nearest_indices(const Tensor& z, const Tensor& entries);

struct VQVAEConfig {
    int spatial_rank = 2;
    int64_t in_channels = 1;
    int64_t out_channels = 1;
    std::vector<int64_t> channels = {16, 32};
    int64_t latent_channels = 4;   // codebook dim
    int64_t num_embeddings = 32;   // codebook size K
    double commitment_beta = 0.25;
    int num_res_blocks = 1;
    int norm_groups = 8;

    int64_t compression_factor() const { return int64_t{1} << (channels.size() - 1); }
};

class VQVAE : public NetworkHandle {
public:
    VQVAE(VQVAEConfig cfg, RandomSource src);

    Var encode(const Var& x) const;
    Var decode(const Var& z_q) const;
    CodebookState& codebook() { return codebook_; }
    const CodebookState& codebook() const { return codebook_; }
    const VQVAEConfig& config() const { return cfg_; }

private:
    VQVAEConfig cfg_;
    CodebookState codebook_;
    Conv enc_in_, enc_out_, dec_in_, dec_out_;
    struct EncLevel {
        std::vector<ResBlock> res;
        bool has_down = false;
        Conv down;
    };
    struct DecLevel {
        std::vector<ResBlock> res;
        bool has_up = false;
        Conv up;
    };
    std::vector<EncLevel> enc_levels_;
    std::vector<DecLevel> dec_levels_;
    GroupNormLayer enc_norm_, dec_norm_;
};

Tensor vq_encode(const VQVAE& net, const ImageBatch& x);
ImageBatch vq_decode(const VQVAE& net, const LatentBatch& z_q);

// ---- SPADE normalization --------------------------------------------------

struct SpadeConfig {
    int spatial_rank = 2;
    int64_t channels = 8;        // feature channels being normalized
    int64_t label_channels = 3;  // one-hot segmentation classes
    int64_t hidden_channels = 16;
};

class SpadeBlock : public NetworkHandle {
public:
    SpadeBlock(SpadeConfig cfg, RandomSource src);

    // segmentation_map: (B, label_channels, spatial...) one-hot, already at
    // the feature resolution. The modulation head (gamma/beta convs) is
    // zero-initialized, so a fresh block is a plain parameter-free
    // per-channel normalization.
    Var forward(const Var& features, const Tensor& segmentation_map) const;
    const SpadeConfig& config() const { return cfg_; }

private:
    SpadeConfig cfg_;
    Conv shared_, gamma_, beta_;
};

Tensor spade_norm(const SpadeBlock& block, const Tensor& features, const Tensor& segmentation_map);

// ---- patch discriminators -------------------------------------------------

struct DiscriminatorConfig {
    int spatial_rank = 2;
    int64_t in_channels = 1;
    int64_t base_channels = 64;
    int n_layers = 3;  // stride-2 stages
};

class PatchDiscriminator : public NetworkHandle {
public:
    PatchDiscriminator(DiscriminatorConfig cfg, RandomSource src);

    Var forward(const Var& x) const;  // -> (B, 1, spatial') logits map
    const DiscriminatorConfig& config() const { return cfg_; }
    int64_t min_input_size() const { return min_input_; }

private:
    DiscriminatorConfig cfg_;
    struct Stage {
        Conv conv;
        bool has_norm = false;
        GroupNormLayer norm;
    };
    std::vector<Stage> stages_;
    Conv final_;
    int64_t min_input_ = 1;
};

// nets[i] sees the input downsampled i times by average pooling.
std::vector<Var> multiscale_forward(const std::vector<PatchDiscriminator>& nets, const Var& x);

// ---- decoder-only transformer ---------------------------------------------

struct TransformerConfig {
    int64_t vocab_size = 513;
    int64_t max_seq_len = 4096;
    int depth = 8;
    int heads = 8;
    int64_t head_dim = 64;
    int64_t ff_mult = 4;

    int64_t embed_dim() const { return static_cast<int64_t>(heads) * head_dim; }
};

class TransformerDecoder : public NetworkHandle {
public:
    TransformerDecoder(TransformerConfig cfg, RandomSource src);

    // tokens: B sequences of equal length L. Logits (B, L, vocab_size);
    // position i only sees tokens at positions <= i.
    Var forward(const std::vector<std::vector<int64_t>>& tokens) const;
    const TransformerConfig& config() const { return cfg_; }

private:
    TransformerConfig cfg_;
    Var tok_emb_, pos_emb_;
    struct Block {
        LayerNormLayer ln1, ln2;
        Linear q, k, v, o, ff1, ff2;
    };
    std::vector<Block> blocks_;
    LayerNormLayer ln_f_;
    Linear head_;
};

Tensor transformer_forward(const TransformerDecoder& net, const TokenSequence& seq);

}  // namespace genimg

#include <cmath>
#include <functional>
#include <string>

#include "genimg/errors.hpp"
#include "genimg/networks.hpp"

namespace genimg {

Var make_op(Tensor value, std::vector<Var> parents,
            std::function<void(detail::Node&)> backward);

namespace {

// exp(log_var) is clamped to [1e-8, 1e8], so std = exp(log_var/2) is clamped
// to the square roots of those bounds.
constexpr double kStdLo = 1e-4;
constexpr double kStdHi = 1e4;

void check_compression(const Tensor& x, int64_t factor, int spatial_rank_want) {
    if (spatial_rank(x) != spatial_rank_want) {
        throw ShapeMismatch("input rank does not match the configured spatial rank");
    }
    for (int i = 2; i < x.rank(); ++i) {
        if (x.dim(i) % factor != 0) {
            throw DivisibilityError("spatial dim " + std::to_string(x.dim(i)) +
                                    " is not divisible by the compression factor " +
                                    std::to_string(factor));
        }
    }
}

}  // namespace

// ---- AutoencoderKL ---------------------------------------------------------

AutoencoderKL::AutoencoderKL(AutoencoderKLConfig cfg, RandomSource src)
    : NetworkHandle("autoencoder_kl"), cfg_(std::move(cfg)) {
    if (cfg_.spatial_rank != 2 && cfg_.spatial_rank != 3) {
        throw ConfigError("spatial_rank must be 2 or 3");
    }
    if (cfg_.channels.empty() || cfg_.latent_channels < 1 || cfg_.num_res_blocks < 1) {
        throw ConfigError("autoencoder config needs channels, latent_channels, res blocks");
    }
    for (int64_t c : cfg_.channels) {
        if (c < 1 || c % cfg_.norm_groups != 0) {
            throw ConfigError("level channels must be positive multiples of norm_groups");
        }
    }
    Rng rng(src);
    const size_t L = cfg_.channels.size();
    enc_in_ = make_conv(params_, "enc.in", cfg_.spatial_rank, cfg_.in_channels, cfg_.channels[0],
                        3, 1, 1, rng);
    int64_t ch = cfg_.channels[0];
    for (size_t lvl = 0; lvl < L; ++lvl) {
        EncLevel el;
        for (int j = 0; j < cfg_.num_res_blocks; ++j) {
            el.res.push_back(make_res_block(
                params_, "enc" + std::to_string(lvl) + ".res" + std::to_string(j),
                cfg_.spatial_rank, ch, cfg_.channels[lvl], /*temb_dim=*/0, cfg_.norm_groups, rng));
            ch = cfg_.channels[lvl];
        }
        if (lvl + 1 < L) {
            el.has_down = true;
            el.down = make_conv(params_, "enc" + std::to_string(lvl) + ".down", cfg_.spatial_rank,
                                ch, ch, 3, 2, 1, rng);
        }
        enc_levels_.push_back(std::move(el));
    }
    enc_norm_ = make_group_norm(params_, "enc.gn", ch, cfg_.norm_groups);
    enc_out_ = make_conv(params_, "enc.out", cfg_.spatial_rank, ch, 2 * cfg_.latent_channels, 3,
                         1, 1, rng);

    dec_in_ = make_conv(params_, "dec.in", cfg_.spatial_rank, cfg_.latent_channels,
                        cfg_.channels.back(), 3, 1, 1, rng);
    ch = cfg_.channels.back();
    for (size_t k = 0; k < L; ++k) {
        const size_t lvl = L - 1 - k;
        DecLevel dl;
        for (int j = 0; j < cfg_.num_res_blocks; ++j) {
            dl.res.push_back(make_res_block(
                params_, "dec" + std::to_string(lvl) + ".res" + std::to_string(j),
                cfg_.spatial_rank, ch, cfg_.channels[lvl], /*temb_dim=*/0, cfg_.norm_groups, rng));
            ch = cfg_.channels[lvl];
        }
        if (lvl > 0) {
            dl.has_up = true;
            dl.up = make_conv(params_, "dec" + std::to_string(lvl) + ".up", cfg_.spatial_rank, ch,
                              ch, 3, 1, 1, rng);
        }
        dec_levels_.push_back(std::move(dl));
    }
    dec_norm_ = make_group_norm(params_, "dec.gn", ch, cfg_.norm_groups);
    dec_out_ = make_conv(params_, "dec.out", cfg_.spatial_rank, ch, cfg_.out_channels, 3, 1, 1,
                         rng);
}

AutoencoderKL::Moments AutoencoderKL::encode(const Var& x) const {
    check_compression(x.val(), cfg_.compression_factor(), cfg_.spatial_rank);
    if (x.val().dim(1) != cfg_.in_channels) throw ShapeMismatch("unexpected input channels");
    Var h = enc_in_(x);
    for (const EncLevel& el : enc_levels_) {
        for (const ResBlock& rb : el.res) h = rb.forward(h, Var());
        if (el.has_down) h = el.down(h);
    }
    h = enc_out_(silu(enc_norm_(h)));
    Moments m;
    m.mu = slice_axis(h, 1, 0, cfg_.latent_channels);
    m.log_var = slice_axis(h, 1, cfg_.latent_channels, cfg_.latent_channels);
    return m;
}

Var AutoencoderKL::decode(const Var& z) const {
    if (spatial_rank(z.val()) != cfg_.spatial_rank || z.val().dim(1) != cfg_.latent_channels) {
        throw ShapeMismatch("latent shape does not match the decoder input");
    }
    Var h = dec_in_(z);
    for (const DecLevel& dl : dec_levels_) {
        for (const ResBlock& rb : dl.res) h = rb.forward(h, Var());
        if (dl.has_up) h = dl.up(upsample_nearest_nd(h, 2));
    }
    return dec_out_(silu(dec_norm_(h)));
}

Var kl_sample(const Var& mu, const Var& log_var, Rng& rng) {
    if (!mu.val().same_shape(log_var.val())) throw ShapeMismatch("mu/log_var shapes differ");
    Var std_dev = vexp_clamped(vscale(log_var, 0.5), kStdLo, kStdHi);
    Var eps = constant(draw_gaussian(mu.val().shape(), rng));
    return mu + std_dev * eps;
}

Tensor kl_sample(const Tensor& mu, const Tensor& log_var, Rng& rng) {
    NoGradGuard ng;
    return kl_sample(constant(mu), constant(log_var), rng).val();
}

KlMomentsT kl_encode(const AutoencoderKL& net, const ImageBatch& x) {
    NoGradGuard ng;
    AutoencoderKL::Moments m = net.encode(constant(x));
    return {m.mu.val(), m.log_var.val()};
}

ImageBatch kl_decode(const AutoencoderKL& net, const LatentBatch& z) {
    NoGradGuard ng;
    return net.decode(constant(z)).val();
}

// ---- VQ --------------------------------------------------------------------

CodebookState make_codebook(ParamMap& pm, const std::string& name, int64_t K, int64_t d,
                            double commitment_beta, Rng& rng) {
    if (K < 2) throw RangeError("codebook needs at least two entries");
    if (d < 1) throw RangeError("codebook dim must be positive");
    if (!(commitment_beta > 0.0)) throw RangeError("commitment_beta must be positive");
    CodebookState cb;
    const double bound = 1.0 / static_cast<double>(K);
    cb.entries = pm.declare(name + ".entries", draw_uniform({K, d}, rng, -bound, bound));
    cb.usage_counts.assign(static_cast<size_t>(K), 0);
    cb.commitment_beta = commitment_beta;
    return cb;
}

std::vector<int64_t> vq_nearest_indices(const Tensor& z, const Tensor& entries) {
    if (z.rank() < 3) throw RankError("vq_nearest_indices expects (B, d, spatial...)");
    const int64_t d = entries.dim(1), K = entries.dim(0);
    if (z.dim(1) != d) {
        throw DimMismatch("latent channel dim " + std::to_string(z.dim(1)) +
                          " does not match codebook dim " + std::to_string(d));
    }
    const int64_t B = z.dim(0);
    const int64_t sp = z.numel() / (B * d);
    std::vector<int64_t> indices(static_cast<size_t>(B * sp));
    for (int64_t b = 0; b < B; ++b) {
        for (int64_t pos = 0; pos < sp; ++pos) {
            int64_t best = 0;
            double best_dist = 0.0;
            for (int64_t k = 0; k < K; ++k) {
                double dist = 0.0;
                for (int64_t c = 0; c < d; ++c) {
                    const double diff = z[(b * d + c) * sp + pos] - entries[k * d + c];
                    dist += diff * diff;
                }
                if (k == 0 || dist < best_dist) {  // strict <: lowest index wins ties
                    best_dist = dist;
                    best = k;
                }
            }
            indices[static_cast<size_t>(b * sp + pos)] = best;
        }
    }
    return indices;
}

QuantizeResult vq_quantize(const Var& z, CodebookState& cb) {
    const Tensor& Z = z.val();
    const Tensor& E = cb.entries.val();
    const int64_t d = E.dim(1);
    const int64_t B = Z.dim(0);

    QuantizeResult out;
    out.indices = vq_nearest_indices(Z, E);
    const int64_t sp = Z.numel() / (B * d);
    Tensor zq_val(Z.shape());
    for (int64_t b = 0; b < B; ++b) {
        for (int64_t pos = 0; pos < sp; ++pos) {
            const int64_t best = out.indices[static_cast<size_t>(b * sp + pos)];
            cb.usage_counts[static_cast<size_t>(best)] += 1;
            for (int64_t c = 0; c < d; ++c) {
                zq_val[(b * d + c) * sp + pos] = E[best * d + c];
            }
        }
    }

    // Straight-through: the forward value is the exact codebook entry, the
    // gradient flows unchanged into z.
    out.z_q = make_op(std::move(zq_val), {z}, [](detail::Node& n) {
        auto& parent = *n.parents[0];
        if (!parent.requires_grad) return;
        Tensor& gx = parent.grad_ref();
        for (int64_t i = 0; i < gx.numel(); ++i) gx[i] += n.grad[i];
    });

    std::vector<int> to_last(Z.rank());
    to_last[0] = 0;
    for (int i = 1; i + 1 < Z.rank(); ++i) to_last[i] = i + 1;
    to_last[Z.rank() - 1] = 1;
    Var z_flat = reshape(permute(z, to_last), {B * sp, d});
    Var ze = embedding_lookup(cb.entries, out.indices);
    Var codebook_term = mse_loss(detach(z_flat), ze);
    Var commit_term = vscale(mse_loss(z_flat, detach(ze)), cb.commitment_beta);
    out.loss = codebook_term + commit_term;
    return out;
}

// ---- VQVAE -----------------------------------------------------------------

VQVAE::VQVAE(VQVAEConfig cfg, RandomSource src)
    : NetworkHandle("vqvae"), cfg_(std::move(cfg)) {
    if (cfg_.spatial_rank != 2 && cfg_.spatial_rank != 3) {
        throw ConfigError("spatial_rank must be 2 or 3");
    }
    if (cfg_.channels.empty() || cfg_.latent_channels < 1 || cfg_.num_res_blocks < 1) {
        throw ConfigError("vqvae config needs channels, latent_channels, res blocks");
    }
    for (int64_t c : cfg_.channels) {
        if (c < 1 || c % cfg_.norm_groups != 0) {
            throw ConfigError("level channels must be positive multiples of norm_groups");
        }
    }
    Rng rng(src);
    const size_t L = cfg_.channels.size();
    enc_in_ = make_conv(params_, "enc.in", cfg_.spatial_rank, cfg_.in_channels, cfg_.channels[0],
                        3, 1, 1, rng);
    int64_t ch = cfg_.channels[0];
    for (size_t lvl = 0; lvl < L; ++lvl) {
        EncLevel el;
        for (int j = 0; j < cfg_.num_res_blocks; ++j) {
            el.res.push_back(make_res_block(
                params_, "enc" + std::to_string(lvl) + ".res" + std::to_string(j),
                cfg_.spatial_rank, ch, cfg_.channels[lvl], 0, cfg_.norm_groups, rng));
            ch = cfg_.channels[lvl];
        }
        if (lvl + 1 < L) {
            el.has_down = true;
            el.down = make_conv(params_, "enc" + std::to_string(lvl) + ".down", cfg_.spatial_rank,
                                ch, ch, 3, 2, 1, rng);
        }
        enc_levels_.push_back(std::move(el));
    }
    enc_norm_ = make_group_norm(params_, "enc.gn", ch, cfg_.norm_groups);
    enc_out_ = make_conv(params_, "enc.out", cfg_.spatial_rank, ch, cfg_.latent_channels, 3, 1, 1,
                         rng);

    dec_in_ = make_conv(params_, "dec.in", cfg_.spatial_rank, cfg_.latent_channels,
                        cfg_.channels.back(), 3, 1, 1, rng);
    ch = cfg_.channels.back();
    for (size_t k = 0; k < L; ++k) {
        const size_t lvl = L - 1 - k;
        DecLevel dl;
        for (int j = 0; j < cfg_.num_res_blocks; ++j) {
            dl.res.push_back(make_res_block(
                params_, "dec" + std::to_string(lvl) + ".res" + std::to_string(j),
                cfg_.spatial_rank, ch, cfg_.channels[lvl], 0, cfg_.norm_groups, rng));
            ch = cfg_.channels[lvl];
        }
        if (lvl > 0) {
            dl.has_up = true;
            dl.up = make_conv(params_, "dec" + std::to_string(lvl) + ".up", cfg_.spatial_rank, ch,
                              ch, 3, 1, 1, rng);
        }
        dec_levels_.push_back(std::move(dl));
    }
    dec_norm_ = make_group_norm(params_, "dec.gn", ch, cfg_.norm_groups);
    dec_out_ = make_conv(params_, "dec.out", cfg_.spatial_rank, ch, cfg_.out_channels, 3, 1, 1,
                         rng);
    codebook_ = make_codebook(params_, "codebook", cfg_.num_embeddings, cfg_.latent_channels,
                              cfg_.commitment_beta, rng);
}

Var VQVAE::encode(const Var& x) const {
    check_compression(x.val(), cfg_.compression_factor(), cfg_.spatial_rank);
    if (x.val().dim(1) != cfg_.in_channels) throw ShapeMismatch("unexpected input channels");
    Var h = enc_in_(x);
    for (const EncLevel& el : enc_levels_) {
        for (const ResBlock& rb : el.res) h = rb.forward(h, Var());
        if (el.has_down) h = el.down(h);
    }
    return enc_out_(silu(enc_norm_(h)));
}

Var VQVAE::decode(const Var& z_q) const {
    if (spatial_rank(z_q.val()) != cfg_.spatial_rank ||
        z_q.val().dim(1) != cfg_.latent_channels) {
        throw ShapeMismatch("latent shape does not match the decoder input");
    }
    Var h = dec_in_(z_q);
    for (const DecLevel& dl : dec_levels_) {
        for (const ResBlock& rb : dl.res) h = rb.forward(h, Var());
        if (dl.has_up) h = dl.up(upsample_nearest_nd(h, 2));
    }
    return dec_out_(silu(dec_norm_(h)));
}

Tensor vq_encode(const VQVAE& net, const ImageBatch& x) {
    NoGradGuard ng;
    return net.encode(constant(x)).val();
}

ImageBatch vq_decode(const VQVAE& net, const LatentBatch& z_q) {
    NoGradGuard ng;
    return net.decode(constant(z_q)).val();
}

}  // namespace genimg

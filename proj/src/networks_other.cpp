#include <cmath>
#include <string>

#include "genimg/errors.hpp"
#include "genimg/networks.hpp"

namespace genimg {

// ---- SPADE ------------------------------------------------------------------

SpadeBlock::SpadeBlock(SpadeConfig cfg, RandomSource src)
    : NetworkHandle("spade"), cfg_(std::move(cfg)) {
    if (cfg_.spatial_rank != 2 && cfg_.spatial_rank != 3) {
        throw ConfigError("spatial_rank must be 2 or 3");
    }
    if (cfg_.channels < 1 || cfg_.label_channels < 1 || cfg_.hidden_channels < 1) {
        throw ConfigError("spade channel counts must be positive");
    }
    Rng rng(src);
    shared_ = make_conv(params_, "shared", cfg_.spatial_rank, cfg_.label_channels,
                        cfg_.hidden_channels, 3, 1, 1, rng);
    gamma_ = make_conv(params_, "gamma", cfg_.spatial_rank, cfg_.hidden_channels, cfg_.channels,
                       3, 1, 1, rng, /*zero_init=*/true);
    beta_ = make_conv(params_, "beta", cfg_.spatial_rank, cfg_.hidden_channels, cfg_.channels, 3,
                      1, 1, rng, /*zero_init=*/true);
}

Var SpadeBlock::forward(const Var& features, const Tensor& seg) const {
    const Tensor& X = features.val();
    if (spatial_rank(X) != cfg_.spatial_rank || X.dim(1) != cfg_.channels) {
        throw ShapeMismatch("features must be (B, " + std::to_string(cfg_.channels) +
                            ", spatial...)");
    }
    if (seg.rank() != X.rank() || seg.dim(0) != X.dim(0) || seg.dim(1) != cfg_.label_channels) {
        throw ShapeMismatch("segmentation map must be (B, " +
                            std::to_string(cfg_.label_channels) + ", spatial...)");
    }
    for (int i = 2; i < X.rank(); ++i) {
        if (seg.dim(i) != X.dim(i)) {
            throw ShapeMismatch("segmentation map must already be at the feature resolution");
        }
    }
    const int64_t B = seg.dim(0), S = seg.dim(1);
    const int64_t sp = seg.numel() / (B * S);
    for (int64_t b = 0; b < B; ++b) {
        for (int64_t pos = 0; pos < sp; ++pos) {
            double sum = 0.0;
            for (int64_t c = 0; c < S; ++c) {
                const double v = seg[(b * S + c) * sp + pos];
                if (v != 0.0 && v != 1.0) throw NotOneHot("segmentation values must be 0 or 1");
                sum += v;
            }
            if (sum != 1.0) throw NotOneHot("each pixel must have exactly one active class");
        }
    }

    // Parameter-free per-channel normalization: group norm with one group per
    // channel and fixed unit scale / zero shift.
    const int64_t C = cfg_.channels;
    Var ones = constant(Tensor({C}, 1.0));
    Var zeros = constant(Tensor({C}));
    Var normalized = group_norm(features, ones, zeros, static_cast<int>(C));

    Var h = relu(shared_(constant(seg)));
    Var modulated = vmul(normalized, gamma_(h)) + beta_(h);
    return normalized + modulated;
}

Tensor spade_norm(const SpadeBlock& block, const Tensor& features,
                  const Tensor& segmentation_map) {
    NoGradGuard ng;
    return block.forward(constant(features), segmentation_map).val();
}

// ---- patch discriminator ----------------------------------------------------

PatchDiscriminator::PatchDiscriminator(DiscriminatorConfig cfg, RandomSource src)
    : NetworkHandle("patch_discriminator"), cfg_(std::move(cfg)) {
    if (cfg_.spatial_rank != 2 && cfg_.spatial_rank != 3) {
        throw ConfigError("spatial_rank must be 2 or 3");
    }
    if (cfg_.in_channels < 1 || cfg_.base_channels < 1 || cfg_.n_layers < 1) {
        throw ConfigError("discriminator config values must be positive");
    }
    Rng rng(src);
    int64_t ch = cfg_.base_channels;
    {
        Stage s;
        s.conv = make_conv(params_, "stage0", cfg_.spatial_rank, cfg_.in_channels, ch, 4, 2, 1,
                           rng);
        stages_.push_back(std::move(s));
    }
    for (int i = 1; i < cfg_.n_layers; ++i) {
        const int64_t next = std::min<int64_t>(ch * 2, cfg_.base_channels * 8);
        Stage s;
        s.conv = make_conv(params_, "stage" + std::to_string(i), cfg_.spatial_rank, ch, next, 4,
                           2, 1, rng);
        s.has_norm = true;
        s.norm = make_group_norm(params_, "stage" + std::to_string(i) + ".norm", next,
                                 static_cast<int>(next));  // instance norm
        stages_.push_back(std::move(s));
        ch = next;
    }
    {
        const int64_t next = std::min<int64_t>(ch * 2, cfg_.base_channels * 8);
        Stage s;
        s.conv = make_conv(params_, "stage" + std::to_string(cfg_.n_layers), cfg_.spatial_rank,
                           ch, next, 4, 1, 1, rng);
        s.has_norm = true;
        s.norm = make_group_norm(params_, "stage" + std::to_string(cfg_.n_layers) + ".norm", next,
                                 static_cast<int>(next));
        stages_.push_back(std::move(s));
        ch = next;
    }
    final_ = make_conv(params_, "final", cfg_.spatial_rank, ch, 1, 4, 1, 1, rng);

    // Smallest input size whose logits map is non-empty.
    for (int64_t n = 1; n <= 4096; ++n) {
        int64_t v = n;
        bool ok = true;
        for (const Stage& s : stages_) {
            v = (v + 2 * s.conv.pad - 4) / s.conv.stride + 1;
            if (v < 1) {
                ok = false;
                break;
            }
        }
        if (ok) {
            v = (v + 2 * final_.pad - 4) / final_.stride + 1;
            ok = v >= 1;
        }
        if (ok) {
            min_input_ = n;
            break;
        }
    }
}

Var PatchDiscriminator::forward(const Var& x) const {
    const Tensor& X = x.val();
    if (spatial_rank(X) != cfg_.spatial_rank || X.dim(1) != cfg_.in_channels) {
        throw ShapeMismatch("unexpected discriminator input shape");
    }
    for (int i = 2; i < X.rank(); ++i) {
        if (X.dim(i) < min_input_) {
            throw InputTooSmall("discriminator needs spatial dims >= " +
                                std::to_string(min_input_) + ", got " + std::to_string(X.dim(i)));
        }
    }
    Var h = x;
    for (const Stage& s : stages_) {
        h = s.conv(h);
        if (s.has_norm) h = s.norm(h);
        h = leaky_relu(h, 0.2);
    }
    return final_(h);
}

std::vector<Var> multiscale_forward(const std::vector<PatchDiscriminator>& nets, const Var& x) {
    if (nets.empty()) throw ConfigError("multiscale_forward needs at least one discriminator");
    std::vector<Var> out;
    Var cur = x;
    for (size_t i = 0; i < nets.size(); ++i) {
        if (i > 0) cur = avg_pool_nd(cur, 2);
        out.push_back(nets[i].forward(cur));
    }
    return out;
}

// ---- transformer -------------------------------------------------------------

TransformerDecoder::TransformerDecoder(TransformerConfig cfg, RandomSource src)
    : NetworkHandle("transformer_decoder"), cfg_(std::move(cfg)) {
    if (cfg_.vocab_size < 2) throw ConfigError("vocab_size must be >= 2");
    if (cfg_.max_seq_len < 1) throw ConfigError("max_seq_len must be >= 1");
    if (cfg_.depth < 1 || cfg_.heads < 1 || cfg_.head_dim < 1 || cfg_.ff_mult < 1) {
        throw ConfigError("transformer depth/heads/head_dim/ff_mult must be positive");
    }
    Rng rng(src);
    const int64_t D = cfg_.embed_dim();
    tok_emb_ = params_.declare("tok_emb", normal_init({cfg_.vocab_size, D}, 0.02, rng));
    pos_emb_ = params_.declare("pos_emb", normal_init({cfg_.max_seq_len, D}, 0.02, rng));
    for (int i = 0; i < cfg_.depth; ++i) {
        const std::string p = "block" + std::to_string(i);
        Block b;
        b.ln1 = make_layer_norm(params_, p + ".ln1", D);
        b.ln2 = make_layer_norm(params_, p + ".ln2", D);
        b.q = make_linear(params_, p + ".q", D, D, rng);
        b.k = make_linear(params_, p + ".k", D, D, rng);
        b.v = make_linear(params_, p + ".v", D, D, rng);
        b.o = make_linear(params_, p + ".o", D, D, rng);
        b.ff1 = make_linear(params_, p + ".ff1", D, cfg_.ff_mult * D, rng);
        b.ff2 = make_linear(params_, p + ".ff2", cfg_.ff_mult * D, D, rng);
        blocks_.push_back(std::move(b));
    }
    ln_f_ = make_layer_norm(params_, "ln_f", D);
    head_ = make_linear(params_, "head", D, cfg_.vocab_size, rng);
}

Var TransformerDecoder::forward(const std::vector<std::vector<int64_t>>& tokens) const {
    if (tokens.empty()) throw EmptyBatch("transformer got an empty batch");
    const int64_t B = static_cast<int64_t>(tokens.size());
    const int64_t L = static_cast<int64_t>(tokens[0].size());
    if (L < 1) throw RangeError("sequences must be non-empty");
    if (L > cfg_.max_seq_len) {
        throw SequenceTooLong("sequence length " + std::to_string(L) + " exceeds maximum " +
                              std::to_string(cfg_.max_seq_len));
    }
    std::vector<int64_t> flat, pos;
    flat.reserve(static_cast<size_t>(B * L));
    pos.reserve(static_cast<size_t>(B * L));
    for (const auto& row : tokens) {
        if (static_cast<int64_t>(row.size()) != L) {
            throw ShapeMismatch("all sequences in the batch must share one length");
        }
        for (int64_t i = 0; i < L; ++i) {
            const int64_t tok = row[static_cast<size_t>(i)];
            if (tok < 0 || tok >= cfg_.vocab_size) {
                throw TokenOutOfVocab("token " + std::to_string(tok) + " outside vocab of " +
                                      std::to_string(cfg_.vocab_size));
            }
            flat.push_back(tok);
            pos.push_back(i);
        }
    }
    const int64_t D = cfg_.embed_dim();
    Var seq = reshape(embedding_lookup(tok_emb_, flat) + embedding_lookup(pos_emb_, pos),
                      {B, L, D});
    for (const Block& b : blocks_) {
        Var n1 = b.ln1(seq);
        seq = seq + multi_head_attention(n1, n1, b.q, b.k, b.v, b.o, cfg_.heads, /*causal=*/true);
        Var ff_in = reshape(b.ln2(seq), {B * L, D});
        seq = seq + reshape(b.ff2(gelu(b.ff1(ff_in))), {B, L, D});
    }
    Var normed = reshape(ln_f_(seq), {B * L, D});
    return reshape(head_(normed), {B, L, cfg_.vocab_size});
}

Tensor transformer_forward(const TransformerDecoder& net, const TokenSequence& seq) {
    if (seq.vocab_size != net.config().vocab_size) {
        throw ConfigError("token sequence vocab does not match the network");
    }
    NoGradGuard ng;
    return net.forward({seq.tokens}).val();
}

}  // namespace genimg

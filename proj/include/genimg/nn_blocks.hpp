#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "genimg/nn.hpp"

namespace genimg {

// Residual block: conv(silu(norm(x))) twice, with an optional additive
// timestep-embedding injection between the convs and a learned 1x1 skip
// projection when the channel count changes.
struct ResBlock {
    GroupNormLayer gn1, gn2;
    Conv conv1, conv2;
    Linear temb_proj;  // (temb_dim -> cout), only when has_temb
    bool has_temb = false;
    Conv skip;  // 1x1, only when has_skip
    bool has_skip = false;

    // temb: (B, temb_dim) activations; pass an undefined Var when has_temb=false.
    Var forward(const Var& x, const Var& temb) const;
};
ResBlock make_res_block(ParamMap& pm, const std::string& name, int spatial_rank, int64_t cin,
                        int64_t cout, int64_t temb_dim, int groups, Rng& rng);

// (B,C,spatial...) <-> (B,L,C) sequence views for attention.
Var spatial_to_seq(const Var& x);
Var seq_to_spatial(const Var& seq, const std::vector<int64_t>& like_shape);

// Multi-head attention: queries from q_in (B,Lq,C), keys/values from kv_in
// (B,Lk,Ck). Projections lq/lo map C->C, lk/lv map Ck->C.
Var multi_head_attention(const Var& q_in, const Var& kv_in, const Linear& lq, const Linear& lk,
                         const Linear& lv, const Linear& lo, int64_t heads, bool causal);

// Pre-norm transformer block over flattened spatial positions: self-attention,
// optional cross-attention against a context sequence, and a feed-forward,
// all residual, wrapped in a norm + linear in/out projection around the
// spatial map.
struct AttentionBlock {
    GroupNormLayer norm;
    Linear proj_in, proj_out;
    LayerNormLayer ln1, ln2, ln3;
    Linear q, k, v, o;              // self-attention
    Linear cq, ck, cv, co;          // cross-attention (when has_cross)
    Linear ff1, ff2;
    int64_t heads = 1;
    bool has_cross = false;

    Var forward(const Var& x, const Var& context) const;  // context may be undefined
};
AttentionBlock make_attention_block(ParamMap& pm, const std::string& name, int64_t channels,
                                    int64_t head_channels, int64_t cross_dim, int groups,
                                    Rng& rng);

// Residual features emitted by a ControlNet, consumed by the UNet up path.
struct ControlResiduals {
    std::vector<Var> skips;  // one per UNet skip connection, matching shapes
    Var mid;
};

struct UNetConfig {
    int spatial_rank = 2;
    int64_t in_channels = 1;
    int64_t out_channels = 1;
    std::vector<int64_t> channels = {32, 64};
    std::vector<bool> attention_levels = {false, true};
    std::vector<int64_t> head_channels = {0, 32};  // per-head width where attention is on
    int64_t cross_attention_dim = 0;               // 0 disables cross-attention
    int num_res_blocks = 1;
    int norm_groups = 8;

    void validate() const;
};

// Shared down path + mid block of the diffusion UNet; ControlNet clones this
// trunk and taps its skip stack.
struct UNetTrunk {
    UNetConfig cfg;
    int64_t temb_dim = 0;
    Linear time_fc1, time_fc2;
    Conv conv_in;
    struct DownLevel {
        std::vector<ResBlock> res;
        std::vector<AttentionBlock> attn;  // empty or one per res block
        bool has_down = false;
        Conv down;
    };
    std::vector<DownLevel> levels;
    ResBlock mid_res0, mid_res1;
    AttentionBlock mid_attn;
    bool has_mid_attn = false;
    std::vector<int64_t> skip_channels;  // channels of each pushed skip, in push order

    struct Forward {
        std::vector<Var> skips;
        Var h;
        Var temb;
    };
    // extra: per-skip additive residuals (applied to the saved copies) plus a
    // mid-feature residual, as produced by a ControlNet. input_add, when
    // given, is added to the conv_in features before the first skip is saved
    // (the ControlNet conditioning pathway).
    Forward run(const Var& x, const std::vector<int>& t, const Var& context,
                const ControlResiduals* extra, const Var* input_add = nullptr) const;
    Var time_embedding(const std::vector<int>& t, int64_t batch) const;
};
UNetTrunk make_unet_trunk(ParamMap& pm, const std::string& prefix, const UNetConfig& cfg,
                          Rng& rng);

}  // namespace genimg

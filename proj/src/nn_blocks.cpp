#include "genimg/nn_blocks.hpp"

#include <algorithm>
#include <cmath>

#include "genimg/errors.hpp"
#include "genimg/foundation.hpp"

namespace genimg {

Var ResBlock::forward(const Var& x, const Var& temb) const {
    Var h = conv1(silu(gn1(x)));
    if (has_temb) {
        if (!temb.defined()) throw ConfigError("res block built with temb but none supplied");
        h = add_spatial_broadcast(h, temb_proj(temb));
    }
    h = conv2(silu(gn2(h)));
    Var base = has_skip ? skip(x) : x;
    return base + h;
}

ResBlock make_res_block(ParamMap& pm, const std::string& name, int spatial_rank, int64_t cin,
                        int64_t cout, int64_t temb_dim, int groups, Rng& rng) {
    ResBlock b;
    b.gn1 = make_group_norm(pm, name + ".gn1", cin, groups);
    b.conv1 = make_conv(pm, name + ".conv1", spatial_rank, cin, cout, 3, 1, 1, rng);
    b.gn2 = make_group_norm(pm, name + ".gn2", cout, groups);
    b.conv2 = make_conv(pm, name + ".conv2", spatial_rank, cout, cout, 3, 1, 1, rng);
    if (temb_dim > 0) {
        b.temb_proj = make_linear(pm, name + ".temb", temb_dim, cout, rng);
        b.has_temb = true;
    }
    if (cin != cout) {
        b.skip = make_conv(pm, name + ".skip", spatial_rank, cin, cout, 1, 1, 0, rng);
        b.has_skip = true;
    }
    return b;
}

Var spatial_to_seq(const Var& x) {
    const int64_t B = x.val().dim(0), C = x.val().dim(1);
    const int64_t L = x.val().numel() / (B * C);
    return permute(reshape(x, {B, C, L}), {0, 2, 1});
}

Var seq_to_spatial(const Var& seq, const std::vector<int64_t>& like_shape) {
    return reshape(permute(seq, {0, 2, 1}), like_shape);
}

Var multi_head_attention(const Var& q_in, const Var& kv_in, const Linear& lq, const Linear& lk,
                         const Linear& lv, const Linear& lo, int64_t heads, bool causal) {
    const int64_t B = q_in.val().dim(0), Lq = q_in.val().dim(1), C = q_in.val().dim(2);
    const int64_t Lk = kv_in.val().dim(1), Ck = kv_in.val().dim(2);
    if (C % heads != 0) throw DivisibilityError("attention width not divisible by head count");
    const int64_t hd = C / heads;

    auto split_heads = [&](const Var& m, int64_t L) {
        return reshape(permute(reshape(m, {B, L, heads, hd}), {0, 2, 1, 3}), {B * heads, L, hd});
    };
    Var qh = split_heads(lq(reshape(q_in, {B * Lq, C})), Lq);
    Var kh = split_heads(lk(reshape(kv_in, {B * Lk, Ck})), Lk);
    Var vh = split_heads(lv(reshape(kv_in, {B * Lk, Ck})), Lk);

    Var scores = vscale(bmm(qh, permute(kh, {0, 2, 1})), 1.0 / std::sqrt(static_cast<double>(hd)));
    Var w = causal ? causal_masked_softmax(scores) : softmax_lastdim(scores);
    Var oh = bmm(w, vh);  // (B*heads, Lq, hd)
    Var merged = reshape(permute(reshape(oh, {B, heads, Lq, hd}), {0, 2, 1, 3}), {B * Lq, C});
    return reshape(lo(merged), {B, Lq, C});
}

Var AttentionBlock::forward(const Var& x, const Var& context) const {
    const std::vector<int64_t> shape = x.val().shape();
    const int64_t B = shape[0], C = shape[1];
    const int64_t L = x.val().numel() / (B * C);

    Var seq = spatial_to_seq(norm(x));
    seq = reshape(proj_in(reshape(seq, {B * L, C})), {B, L, C});
    Var n1 = ln1(seq);
    seq = seq + multi_head_attention(n1, n1, q, k, v, o, heads, /*causal=*/false);
    if (context.defined()) {
        if (!has_cross) throw ContextDimMismatch("attention block built without cross-attention");
        seq = seq + multi_head_attention(ln2(seq), context, cq, ck, cv, co, heads,
                                         /*causal=*/false);
    }
    Var ff_in = reshape(ln3(seq), {B * L, C});
    seq = seq + reshape(ff2(gelu(ff1(ff_in))), {B, L, C});
    Var out = reshape(proj_out(reshape(seq, {B * L, C})), {B, L, C});
    return x + seq_to_spatial(out, shape);
}

AttentionBlock make_attention_block(ParamMap& pm, const std::string& name, int64_t channels,
                                    int64_t head_channels, int64_t cross_dim, int groups,
                                    Rng& rng) {
    if (head_channels < 1 || channels % head_channels != 0) {
        throw ConfigError("attention head width must divide the channel count");
    }
    AttentionBlock b;
    b.heads = channels / head_channels;
    b.norm = make_group_norm(pm, name + ".norm", channels, groups);
    b.proj_in = make_linear(pm, name + ".proj_in", channels, channels, rng);
    b.proj_out = make_linear(pm, name + ".proj_out", channels, channels, rng);
    b.ln1 = make_layer_norm(pm, name + ".ln1", channels);
    b.q = make_linear(pm, name + ".q", channels, channels, rng);
    b.k = make_linear(pm, name + ".k", channels, channels, rng);
    b.v = make_linear(pm, name + ".v", channels, channels, rng);
    b.o = make_linear(pm, name + ".o", channels, channels, rng);
    if (cross_dim > 0) {
        b.has_cross = true;
        b.ln2 = make_layer_norm(pm, name + ".ln2", channels);
        b.cq = make_linear(pm, name + ".cq", channels, channels, rng);
        b.ck = make_linear(pm, name + ".ck", cross_dim, channels, rng);
        b.cv = make_linear(pm, name + ".cv", cross_dim, channels, rng);
        b.co = make_linear(pm, name + ".co", channels, channels, rng);
    }
    b.ln3 = make_layer_norm(pm, name + ".ln3", channels);
    const int64_t ff_hidden = 2 * channels;
    b.ff1 = make_linear(pm, name + ".ff1", channels, ff_hidden, rng);
    b.ff2 = make_linear(pm, name + ".ff2", ff_hidden, channels, rng);
    return b;
}

void UNetConfig::validate() const {
    if (spatial_rank != 2 && spatial_rank != 3) throw ConfigError("spatial_rank must be 2 or 3");
    if (in_channels < 1 || out_channels < 1) throw ConfigError("channel counts must be positive");
    const size_t L = channels.size();
    if (L == 0) throw ConfigError("need at least one resolution level");
    if (attention_levels.size() != L || head_channels.size() != L) {
        throw ConfigError("channels, attention_levels, head_channels must share one length");
    }
    if (num_res_blocks < 1) throw ConfigError("num_res_blocks must be >= 1");
    for (size_t i = 0; i < L; ++i) {
        if (channels[i] < 1) throw ConfigError("level channels must be positive");
        if (channels[i] % norm_groups != 0) {
            throw ConfigError("level channels must be divisible by norm_groups");
        }
        if (attention_levels[i]) {
            if (head_channels[i] < 1 || channels[i] % head_channels[i] != 0) {
                throw ConfigError("attention level needs head_channels dividing channels");
            }
        }
    }
    if (cross_attention_dim < 0) throw ConfigError("cross_attention_dim must be >= 0");
    if (cross_attention_dim > 0 &&
        std::none_of(attention_levels.begin(), attention_levels.end(), [](bool b) { return b; })) {
        throw ConfigError("cross-attention requires attention at some level");
    }
}

UNetTrunk make_unet_trunk(ParamMap& pm, const std::string& prefix, const UNetConfig& cfg,
                          Rng& rng) {
    cfg.validate();
    UNetTrunk t;
    t.cfg = cfg;
    t.temb_dim = 4 * cfg.channels[0];
    t.time_fc1 = make_linear(pm, prefix + "time.fc1", cfg.channels[0], t.temb_dim, rng);
    t.time_fc2 = make_linear(pm, prefix + "time.fc2", t.temb_dim, t.temb_dim, rng);
    t.conv_in =
        make_conv(pm, prefix + "in.conv", cfg.spatial_rank, cfg.in_channels, cfg.channels[0], 3, 1,
                  1, rng);
    t.skip_channels.push_back(cfg.channels[0]);

    int64_t ch = cfg.channels[0];
    const size_t L = cfg.channels.size();
    for (size_t lvl = 0; lvl < L; ++lvl) {
        UNetTrunk::DownLevel dl;
        for (int j = 0; j < cfg.num_res_blocks; ++j) {
            const std::string base =
                prefix + "down" + std::to_string(lvl) + ".res" + std::to_string(j);
            dl.res.push_back(make_res_block(pm, base, cfg.spatial_rank, ch, cfg.channels[lvl],
                                            t.temb_dim, cfg.norm_groups, rng));
            ch = cfg.channels[lvl];
            if (cfg.attention_levels[lvl]) {
                dl.attn.push_back(make_attention_block(
                    pm, prefix + "down" + std::to_string(lvl) + ".attn" + std::to_string(j), ch,
                    cfg.head_channels[lvl], cfg.cross_attention_dim, cfg.norm_groups, rng));
            }
            t.skip_channels.push_back(ch);
        }
        if (lvl + 1 < L) {
            dl.has_down = true;
            dl.down = make_conv(pm, prefix + "down" + std::to_string(lvl) + ".down",
                                cfg.spatial_rank, ch, ch, 3, 2, 1, rng);
            t.skip_channels.push_back(ch);
        }
        t.levels.push_back(std::move(dl));
    }

    t.mid_res0 = make_res_block(pm, prefix + "mid.res0", cfg.spatial_rank, ch, ch, t.temb_dim,
                                cfg.norm_groups, rng);
    if (cfg.attention_levels.back()) {
        t.has_mid_attn = true;
        t.mid_attn = make_attention_block(pm, prefix + "mid.attn", ch, cfg.head_channels.back(),
                                          cfg.cross_attention_dim, cfg.norm_groups, rng);
    }
    t.mid_res1 = make_res_block(pm, prefix + "mid.res1", cfg.spatial_rank, ch, ch, t.temb_dim,
                                cfg.norm_groups, rng);
    return t;
}

Var UNetTrunk::time_embedding(const std::vector<int>& t, int64_t batch) const {
    std::vector<int> ts = t;
    if (ts.size() == 1 && batch > 1) ts.assign(static_cast<size_t>(batch), t[0]);
    if (static_cast<int64_t>(ts.size()) != batch) {
        throw ShapeMismatch("timestep count does not match batch size");
    }
    Var sin_feat = constant(sinusoidal_embedding(ts, cfg.channels[0]));
    return time_fc2(silu(time_fc1(sin_feat)));
}

UNetTrunk::Forward UNetTrunk::run(const Var& x, const std::vector<int>& t, const Var& context,
                                  const ControlResiduals* extra, const Var* input_add) const {
    const Tensor& X = x.val();
    if (spatial_rank(X) != cfg.spatial_rank) {
        throw ShapeMismatch("input rank does not match the configured spatial rank");
    }
    if (X.dim(1) != cfg.in_channels) {
        throw ShapeMismatch("input has " + std::to_string(X.dim(1)) + " channels, expected " +
                            std::to_string(cfg.in_channels));
    }
    if (context.defined()) {
        if (cfg.cross_attention_dim == 0) {
            throw ContextDimMismatch("network was built without cross-attention");
        }
        if (context.val().rank() != 3 || context.val().dim(0) != X.dim(0) ||
            context.val().dim(2) != cfg.cross_attention_dim) {
            throw ContextDimMismatch("context must be (B, seq, " +
                                     std::to_string(cfg.cross_attention_dim) + ")");
        }
    }

    Forward f;
    f.temb = time_embedding(t, X.dim(0));
    size_t next_extra = 0;
    auto push_skip = [&](const Var& h) {
        if (extra == nullptr) {
            f.skips.push_back(h);
            return;
        }
        if (next_extra >= extra->skips.size()) {
            throw ShapeMismatch("control residual count does not match skip count");
        }
        f.skips.push_back(h + extra->skips[next_extra++]);
    };

    Var h = conv_in(x);
    if (input_add != nullptr) h = h + *input_add;
    push_skip(h);
    for (const DownLevel& dl : levels) {
        for (size_t j = 0; j < dl.res.size(); ++j) {
            h = dl.res[j].forward(h, f.temb);
            if (!dl.attn.empty()) h = dl.attn[j].forward(h, context);
            push_skip(h);
        }
        if (dl.has_down) {
            h = dl.down(h);
            push_skip(h);
        }
    }
    h = mid_res0.forward(h, f.temb);
    if (has_mid_attn) h = mid_attn.forward(h, context);
    h = mid_res1.forward(h, f.temb);
    if (extra != nullptr) {
        if (next_extra != extra->skips.size()) {
            throw ShapeMismatch("control residual count does not match skip count");
        }
        h = h + extra->mid;
    }
    f.h = h;
    return f;
}

}  // namespace genimg

#include <string>

#include "genimg/errors.hpp"
#include "genimg/networks.hpp"

namespace genimg {

// ---- DiffusionUNet ---------------------------------------------------------

DiffusionUNet::DiffusionUNet(UNetConfig cfg, RandomSource src)
    : NetworkHandle("diffusion_unet"), cfg_(std::move(cfg)) {
    Rng rng(src);
    trunk_ = make_unet_trunk(params_, "", cfg_, rng);

    std::vector<int64_t> skip_ch = trunk_.skip_channels;
    const size_t L = cfg_.channels.size();
    int64_t ch = cfg_.channels.back();
    for (size_t k = 0; k < L; ++k) {
        const size_t lvl = L - 1 - k;
        UpLevel ul;
        for (int j = 0; j <= cfg_.num_res_blocks; ++j) {
            const int64_t sc = skip_ch.back();
            skip_ch.pop_back();
            const std::string base =
                "up" + std::to_string(lvl) + ".res" + std::to_string(j);
            ul.res.push_back(make_res_block(params_, base, cfg_.spatial_rank, ch + sc,
                                            cfg_.channels[lvl], trunk_.temb_dim, cfg_.norm_groups,
                                            rng));
            ch = cfg_.channels[lvl];
            if (cfg_.attention_levels[lvl]) {
                ul.attn.push_back(make_attention_block(
                    params_, "up" + std::to_string(lvl) + ".attn" + std::to_string(j), ch,
                    cfg_.head_channels[lvl], cfg_.cross_attention_dim, cfg_.norm_groups, rng));
            }
        }
        if (lvl > 0) {
            ul.has_up = true;
            ul.up = make_conv(params_, "up" + std::to_string(lvl) + ".up", cfg_.spatial_rank, ch,
                              ch, 3, 1, 1, rng);
        }
        up_levels_.push_back(std::move(ul));
    }
    out_norm_ = make_group_norm(params_, "out.gn", cfg_.channels[0], cfg_.norm_groups);
    out_conv_ = make_conv(params_, "out.conv", cfg_.spatial_rank, cfg_.channels[0],
                          cfg_.out_channels, 3, 1, 1, rng);
}

Var DiffusionUNet::forward(const Var& x, const std::vector<int>& t, const Var& context,
                           const ControlResiduals* extra) const {
    UNetTrunk::Forward f = trunk_.run(x, t, context, extra);
    Var h = f.h;
    for (const UpLevel& ul : up_levels_) {
        for (size_t j = 0; j < ul.res.size(); ++j) {
            Var skip = f.skips.back();
            f.skips.pop_back();
            h = ul.res[j].forward(concat({h, skip}, /*axis=*/1), f.temb);
            if (!ul.attn.empty()) h = ul.attn[j].forward(h, context);
        }
        if (ul.has_up) h = ul.up(upsample_nearest_nd(h, 2));
    }
    return out_conv_(silu(out_norm_(h)));
}

ImageBatch unet_forward(const DiffusionUNet& net, const ImageBatch& x_t, const std::vector<int>& t,
                        const Tensor* context) {
    NoGradGuard ng;
    Var ctx = context != nullptr ? constant(*context) : Var();
    return net.forward(constant(x_t), t, ctx).val();
}

// ---- DiffusionModelEncoder -------------------------------------------------

DiffusionModelEncoder::DiffusionModelEncoder(DiffusionEncoderConfig cfg, RandomSource src)
    : NetworkHandle("diffusion_encoder"), cfg_(std::move(cfg)) {
    if (cfg_.spatial_rank != 2 && cfg_.spatial_rank != 3) {
        throw ConfigError("spatial_rank must be 2 or 3");
    }
    if (cfg_.channels.empty() || cfg_.latent_dim < 1 || cfg_.num_res_blocks < 1) {
        throw ConfigError("encoder config needs channels, latent_dim, num_res_blocks >= 1");
    }
    for (int64_t c : cfg_.channels) {
        if (c < 1 || c % cfg_.norm_groups != 0) {
            throw ConfigError("level channels must be positive multiples of norm_groups");
        }
    }
    Rng rng(src);
    temb_dim_ = 4 * cfg_.channels[0];
    time_fc1_ = make_linear(params_, "time.fc1", cfg_.channels[0], temb_dim_, rng);
    time_fc2_ = make_linear(params_, "time.fc2", temb_dim_, temb_dim_, rng);
    conv_in_ = make_conv(params_, "in.conv", cfg_.spatial_rank, cfg_.in_channels,
                         cfg_.channels[0], 3, 1, 1, rng);
    int64_t ch = cfg_.channels[0];
    for (size_t lvl = 0; lvl < cfg_.channels.size(); ++lvl) {
        Level lv;
        for (int j = 0; j < cfg_.num_res_blocks; ++j) {
            lv.res.push_back(make_res_block(
                params_, "down" + std::to_string(lvl) + ".res" + std::to_string(j),
                cfg_.spatial_rank, ch, cfg_.channels[lvl], temb_dim_, cfg_.norm_groups, rng));
            ch = cfg_.channels[lvl];
        }
        if (lvl + 1 < cfg_.channels.size()) {
            lv.has_down = true;
            lv.down = make_conv(params_, "down" + std::to_string(lvl) + ".down",
                                cfg_.spatial_rank, ch, ch, 3, 2, 1, rng);
        }
        levels_.push_back(std::move(lv));
    }
    out_norm_ = make_group_norm(params_, "out.gn", ch, cfg_.norm_groups);
    head_ = make_linear(params_, "out.head", ch, cfg_.latent_dim, rng);
}

Var DiffusionModelEncoder::forward(const Var& x, const std::vector<int>& t) const {
    const Tensor& X = x.val();
    if (spatial_rank(X) != cfg_.spatial_rank) {
        throw ShapeMismatch("input rank does not match the configured spatial rank");
    }
    if (X.dim(1) != cfg_.in_channels) throw ShapeMismatch("unexpected input channel count");

    std::vector<int> ts = t;
    if (ts.size() == 1 && X.dim(0) > 1) ts.assign(static_cast<size_t>(X.dim(0)), t[0]);
    if (static_cast<int64_t>(ts.size()) != X.dim(0)) {
        throw ShapeMismatch("timestep count does not match batch size");
    }
    Var temb = time_fc2_(silu(time_fc1_(constant(sinusoidal_embedding(ts, cfg_.channels[0])))));

    Var h = conv_in_(x);
    for (const Level& lv : levels_) {
        for (const ResBlock& rb : lv.res) h = rb.forward(h, temb);
        if (lv.has_down) h = lv.down(h);
    }
    return head_(global_avg_pool(silu(out_norm_(h))));
}

Tensor diffusion_encoder_forward(const DiffusionModelEncoder& net, const ImageBatch& x_t,
                                 const std::vector<int>& t) {
    NoGradGuard ng;
    return net.forward(constant(x_t), t).val();
}

// ---- ControlNet ------------------------------------------------------------

ControlNet::ControlNet(ControlNetConfig cfg, RandomSource src)
    : NetworkHandle("controlnet"), cfg_(std::move(cfg)) {
    if (cfg_.conditioning_channels < 1 || cfg_.conditioning_embed_channels < 1) {
        throw ConfigError("conditioning channel counts must be positive");
    }
    Rng rng(src);
    trunk_ = make_unet_trunk(params_, "", cfg_.unet, rng);
    cond_in_ = make_conv(params_, "cond.in", cfg_.unet.spatial_rank, cfg_.conditioning_channels,
                         cfg_.conditioning_embed_channels, 3, 1, 1, rng);
    cond_mid_ = make_conv(params_, "cond.mid", cfg_.unet.spatial_rank,
                          cfg_.conditioning_embed_channels, cfg_.unet.channels[0], 3, 1, 1, rng);
    cond_out_ = make_conv(params_, "cond.out", cfg_.unet.spatial_rank, cfg_.unet.channels[0],
                          cfg_.unet.channels[0], 1, 1, 0, rng, /*zero_init=*/true);
    for (size_t i = 0; i < trunk_.skip_channels.size(); ++i) {
        zero_convs_.push_back(make_conv(params_, "zero" + std::to_string(i),
                                        cfg_.unet.spatial_rank, trunk_.skip_channels[i],
                                        trunk_.skip_channels[i], 1, 1, 0, rng,
                                        /*zero_init=*/true));
    }
    mid_zero_ = make_conv(params_, "mid_zero", cfg_.unet.spatial_rank,
                          cfg_.unet.channels.back(), cfg_.unet.channels.back(), 1, 1, 0, rng,
                          /*zero_init=*/true);
}

ControlResiduals ControlNet::forward(const Var& x_t, const std::vector<int>& t,
                                     const Var& conditioning_image, const Var& context) const {
    const Tensor& X = x_t.val();
    const Tensor& C = conditioning_image.val();
    if (C.rank() != X.rank() || C.dim(0) != X.dim(0)) {
        throw ShapeMismatch("conditioning image batch/rank does not match the input");
    }
    for (int i = 2; i < X.rank(); ++i) {
        if (C.dim(i) != X.dim(i)) {
            throw ShapeMismatch("conditioning image spatial dims must equal the input's");
        }
    }
    if (C.dim(1) != cfg_.conditioning_channels) {
        throw ShapeMismatch("conditioning image has the wrong channel count");
    }

    Var cond = cond_out_(silu(cond_mid_(silu(cond_in_(conditioning_image)))));
    UNetTrunk::Forward f = trunk_.run(x_t, t, context, nullptr, &cond);

    ControlResiduals out;
    out.skips.reserve(f.skips.size());
    for (size_t i = 0; i < f.skips.size(); ++i) out.skips.push_back(zero_convs_[i](f.skips[i]));
    out.mid = mid_zero_(f.h);
    return out;
}

void ControlNet::init_from(const DiffusionUNet& unet) {
    const auto src = unet.params().state_dict();
    for (const std::string& name : params_.names()) {
        auto it = src.find(name);
        if (it == src.end()) continue;
        Var& dst = params_.at(name);
        if (it->second.shape() != dst.val().shape()) continue;
        Tensor& value = dst.node()->value;
        for (int64_t i = 0; i < value.numel(); ++i) value[i] = it->second[i];
    }
}

Var combined_forward(const DiffusionUNet& unet, const ControlNet& ctrl, const Var& x_t,
                     const std::vector<int>& t, const Var& conditioning_image,
                     const Var& context) {
    ControlResiduals res = ctrl.forward(x_t, t, conditioning_image, context);
    return unet.forward(x_t, t, context, &res);
}

}  // namespace genimg

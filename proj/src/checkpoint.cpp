#include "genimg/checkpoint.hpp"

#include <cstring>

#include "genimg/errors.hpp"
#include "genimg/io.hpp"

namespace genimg {

namespace {

template <typename T>
void put_le(std::vector<uint8_t>& out, T v) {
    uint8_t buf[sizeof(T)];
    std::memcpy(buf, &v, sizeof(T));
    out.insert(out.end(), buf, buf + sizeof(T));
}

template <typename T>
T get_le(const uint8_t* p) {
    T v;
    std::memcpy(&v, p, sizeof(T));
    return v;
}

std::vector<bool> bools_from_json(const nlohmann::json& j) {
    std::vector<bool> out;
    for (const auto& v : j) out.push_back(v.get<bool>());
    return out;
}

}  // namespace

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
    nlohmann::json index = nlohmann::json::array();
    for (const auto& [name, tensor] : ckpt.state) {
        index.push_back({{"name", name}, {"shape", tensor.shape()}});
    }
    nlohmann::json head = {
        {"model_kind", ckpt.model_kind},
        {"meta", ckpt.meta},
        {"arrays", index},
    };
    const std::string meta = head.dump();

    std::vector<uint8_t> out;
    const char magic[8] = {'G', 'I', 'M', 'G', 'C', 'K', 'P', 'T'};
    out.insert(out.end(), magic, magic + 8);
    put_le<uint32_t>(out, 1);
    put_le<uint32_t>(out, 0);
    put_le<uint64_t>(out, uint64_t(meta.size()));
    out.insert(out.end(), meta.begin(), meta.end());
    for (const auto& [name, tensor] : ckpt.state) {
        const size_t at = out.size();
        out.resize(at + size_t(tensor.numel()) * 8);
        std::memcpy(out.data() + at, tensor.data(), size_t(tensor.numel()) * 8);
    }
    write_file_bytes(path, out);
}

Checkpoint load_checkpoint(const std::string& path) {
    const std::vector<uint8_t> bytes = read_file_bytes(path);
    if (bytes.size() < 24 || std::memcmp(bytes.data(), "GIMGCKPT", 8) != 0) {
        throw IncompatibleCheckpoint("'" + path + "' is not a checkpoint");
    }
    if (get_le<uint32_t>(&bytes[8]) != 1) {
        throw IncompatibleCheckpoint("unsupported checkpoint version in '" + path + "'");
    }
    const uint64_t meta_len = get_le<uint64_t>(&bytes[16]);
    if (bytes.size() < 24 + meta_len) {
        throw IncompatibleCheckpoint("truncated checkpoint meta in '" + path + "'");
    }
    nlohmann::json head;
    try {
        head = nlohmann::json::parse(bytes.begin() + 24, bytes.begin() + 24 + long(meta_len));
    } catch (const nlohmann::json::exception& e) {
        throw IncompatibleCheckpoint("bad checkpoint meta in '" + path + "': " + e.what());
    }

    Checkpoint ckpt;
    ckpt.model_kind = head.at("model_kind").get<std::string>();
    ckpt.meta = head.at("meta");
    size_t at = 24 + size_t(meta_len);
    for (const auto& entry : head.at("arrays")) {
        const std::string name = entry.at("name").get<std::string>();
        const std::vector<int64_t> shape = entry.at("shape").get<std::vector<int64_t>>();
        Tensor t(shape);
        const size_t n_bytes = size_t(t.numel()) * 8;
        if (bytes.size() < at + n_bytes) {
            throw IncompatibleCheckpoint("truncated array '" + name + "' in '" + path + "'");
        }
        std::memcpy(t.data(), bytes.data() + at, n_bytes);
        at += n_bytes;
        ckpt.state.emplace(name, std::move(t));
    }
    if (at != bytes.size()) {
        throw IncompatibleCheckpoint("trailing bytes in checkpoint '" + path + "'");
    }
    return ckpt;
}

// ---- config from ini -------------------------------------------------------------

UNetConfig unet_config_from_ini(const IniConfig& ini, const std::string& s) {
    UNetConfig c;
    c.spatial_rank = int(ini.get_int_or(s, "spatial_rank", 2));
    c.in_channels = ini.get_int_or(s, "in_channels", 1);
    c.out_channels = ini.get_int_or(s, "out_channels", c.in_channels);
    c.channels = ini.get_int_list(s, "channels");
    c.num_res_blocks = int(ini.get_int_or(s, "num_res_blocks", 1));
    c.norm_groups = int(ini.get_int_or(s, "norm_groups", 8));
    c.cross_attention_dim = ini.get_int_or(s, "cross_attention_dim", 0);

    c.attention_levels.assign(c.channels.size(), false);
    c.head_channels.assign(c.channels.size(), 0);
    if (ini.has(s, "attention_levels")) {
        const std::vector<int64_t> flags = ini.get_int_list(s, "attention_levels");
        if (flags.size() != c.channels.size()) {
            throw ConfigError(s + ".attention_levels must have one flag per level");
        }
        for (size_t i = 0; i < flags.size(); ++i) c.attention_levels[i] = flags[i] != 0;
        const std::vector<int64_t> heads = ini.get_int_list(s, "head_channels");
        if (heads.size() != c.channels.size()) {
            throw ConfigError(s + ".head_channels must have one entry per level");
        }
        c.head_channels = heads;
    }
    c.validate();
    return c;
}

AutoencoderKLConfig aekl_config_from_ini(const IniConfig& ini, const std::string& s) {
    AutoencoderKLConfig c;
    c.spatial_rank = int(ini.get_int_or(s, "spatial_rank", 2));
    c.in_channels = ini.get_int_or(s, "in_channels", 1);
    c.out_channels = ini.get_int_or(s, "out_channels", c.in_channels);
    c.channels = ini.get_int_list(s, "channels");
    c.latent_channels = ini.get_int_or(s, "latent_channels", 4);
    c.num_res_blocks = int(ini.get_int_or(s, "num_res_blocks", 1));
    c.norm_groups = int(ini.get_int_or(s, "norm_groups", 8));
    return c;
}

VQVAEConfig vqvae_config_from_ini(const IniConfig& ini, const std::string& s) {
    VQVAEConfig c;
    c.spatial_rank = int(ini.get_int_or(s, "spatial_rank", 2));
    c.in_channels = ini.get_int_or(s, "in_channels", 1);
    c.out_channels = ini.get_int_or(s, "out_channels", c.in_channels);
    c.channels = ini.get_int_list(s, "channels");
    c.latent_channels = ini.get_int_or(s, "latent_channels", 4);
    c.num_embeddings = ini.get_int_or(s, "num_embeddings", 32);
    c.commitment_beta = ini.get_double_or(s, "commitment_beta", 0.25);
    c.num_res_blocks = int(ini.get_int_or(s, "num_res_blocks", 1));
    c.norm_groups = int(ini.get_int_or(s, "norm_groups", 8));
    return c;
}

TransformerConfig transformer_config_from_ini(const IniConfig& ini, const std::string& s) {
    TransformerConfig c;
    c.vocab_size = ini.get_int(s, "vocab_size");
    c.max_seq_len = ini.get_int(s, "max_seq_len");
    c.depth = int(ini.get_int_or(s, "depth", 8));
    c.heads = int(ini.get_int_or(s, "heads", 8));
    c.head_dim = ini.get_int_or(s, "head_dim", 64);
    c.ff_mult = ini.get_int_or(s, "ff_mult", 4);
    return c;
}

NoiseSchedule schedule_from_ini(const IniConfig& ini, const std::string& s) {
    const ScheduleProfile profile =
        profile_from_string(ini.get_or(s, "profile", "scaled_linear"));
    const int T = int(ini.get_int(s, "num_timesteps"));
    const double beta_start = ini.get_double_or(s, "beta_start", 0.0015);
    const double beta_end = ini.get_double_or(s, "beta_end", 0.0205);
    NoiseSchedule sched = build_schedule(profile, T, beta_start, beta_end);
    sched.prediction_type =
        prediction_from_string(ini.get_or(s, "prediction_type", "v_prediction"));
    return sched;
}

// ---- config json -----------------------------------------------------------------

nlohmann::json to_json(const UNetConfig& c) {
    return {{"spatial_rank", c.spatial_rank},
            {"in_channels", c.in_channels},
            {"out_channels", c.out_channels},
            {"channels", c.channels},
            {"attention_levels", c.attention_levels},
            {"head_channels", c.head_channels},
            {"cross_attention_dim", c.cross_attention_dim},
            {"num_res_blocks", c.num_res_blocks},
            {"norm_groups", c.norm_groups}};
}

UNetConfig unet_config_from_json(const nlohmann::json& j) {
    UNetConfig c;
    c.spatial_rank = j.at("spatial_rank").get<int>();
    c.in_channels = j.at("in_channels").get<int64_t>();
    c.out_channels = j.at("out_channels").get<int64_t>();
    c.channels = j.at("channels").get<std::vector<int64_t>>();
    c.attention_levels = bools_from_json(j.at("attention_levels"));
    c.head_channels = j.at("head_channels").get<std::vector<int64_t>>();
    c.cross_attention_dim = j.at("cross_attention_dim").get<int64_t>();
    c.num_res_blocks = j.at("num_res_blocks").get<int>();
    c.norm_groups = j.at("norm_groups").get<int>();
    return c;
}

nlohmann::json to_json(const AutoencoderKLConfig& c) {
    return {{"spatial_rank", c.spatial_rank}, {"in_channels", c.in_channels},
            {"out_channels", c.out_channels}, {"channels", c.channels},
            {"latent_channels", c.latent_channels}, {"num_res_blocks", c.num_res_blocks},
            {"norm_groups", c.norm_groups}};
}

AutoencoderKLConfig aekl_config_from_json(const nlohmann::json& j) {
    AutoencoderKLConfig c;
    c.spatial_rank = j.at("spatial_rank").get<int>();
    c.in_channels = j.at("in_channels").get<int64_t>();
    c.out_channels = j.at("out_channels").get<int64_t>();
    c.channels = j.at("channels").get<std::vector<int64_t>>();
    c.latent_channels = j.at("latent_channels").get<int64_t>();
    c.num_res_blocks = j.at("num_res_blocks").get<int>();
    c.norm_groups = j.at("norm_groups").get<int>();
    return c;
}

nlohmann::json to_json(const VQVAEConfig& c) {
    return {{"spatial_rank", c.spatial_rank}, {"in_channels", c.in_channels},
            {"out_channels", c.out_channels}, {"channels", c.channels},
            {"latent_channels", c.latent_channels}, {"num_embeddings", c.num_embeddings},
            {"commitment_beta", c.commitment_beta}, {"num_res_blocks", c.num_res_blocks},
            {"norm_groups", c.norm_groups}};
}

VQVAEConfig vqvae_config_from_json(const nlohmann::json& j) {
    VQVAEConfig c;
    c.spatial_rank = j.at("spatial_rank").get<int>();
    c.in_channels = j.at("in_channels").get<int64_t>();
    c.out_channels = j.at("out_channels").get<int64_t>();
    c.channels = j.at("channels").get<std::vector<int64_t>>();
    c.latent_channels = j.at("latent_channels").get<int64_t>();
    c.num_embeddings = j.at("num_embeddings").get<int64_t>();
    c.commitment_beta = j.at("commitment_beta").get<double>();
    c.num_res_blocks = j.at("num_res_blocks").get<int>();
    c.norm_groups = j.at("norm_groups").get<int>();
    return c;
}

nlohmann::json to_json(const TransformerConfig& c) {
    return {{"vocab_size", c.vocab_size}, {"max_seq_len", c.max_seq_len}, {"depth", c.depth},
            {"heads", c.heads},           {"head_dim", c.head_dim},       {"ff_mult", c.ff_mult}};
}

TransformerConfig transformer_config_from_json(const nlohmann::json& j) {
    TransformerConfig c;
    c.vocab_size = j.at("vocab_size").get<int64_t>();
    c.max_seq_len = j.at("max_seq_len").get<int64_t>();
    c.depth = j.at("depth").get<int>();
    c.heads = j.at("heads").get<int>();
    c.head_dim = j.at("head_dim").get<int64_t>();
    c.ff_mult = j.at("ff_mult").get<int64_t>();
    return c;
}

nlohmann::json to_json(const ControlNetConfig& c) {
    return {{"unet", to_json(c.unet)},
            {"conditioning_channels", c.conditioning_channels},
            {"conditioning_embed_channels", c.conditioning_embed_channels}};
}

ControlNetConfig controlnet_config_from_json(const nlohmann::json& j) {
    ControlNetConfig c;
    c.unet = unet_config_from_json(j.at("unet"));
    c.conditioning_channels = j.at("conditioning_channels").get<int64_t>();
    c.conditioning_embed_channels = j.at("conditioning_embed_channels").get<int64_t>();
    return c;
}

nlohmann::json schedule_to_json(const NoiseSchedule& s) {
    return {{"profile", to_string(s.profile)},
            {"num_timesteps", s.T},
            {"beta_start", s.beta_start},
            {"beta_end", s.beta_end},
            {"prediction_type", to_string(s.prediction_type)}};
}

NoiseSchedule schedule_from_json(const nlohmann::json& j) {
    NoiseSchedule s = build_schedule(profile_from_string(j.at("profile").get<std::string>()),
                                     j.at("num_timesteps").get<int>(),
                                     j.at("beta_start").get<double>(),
                                     j.at("beta_end").get<double>());
    s.prediction_type = prediction_from_string(j.at("prediction_type").get<std::string>());
    return s;
}

// ---- model reconstruction ---------------------------------------------------------

namespace {

void require_kind(const Checkpoint& ckpt, const std::string& kind) {
    if (ckpt.model_kind != kind) {
        throw IncompatibleCheckpoint("expected a " + kind + " checkpoint, found '" +
                                     ckpt.model_kind + "'");
    }
}

template <typename Net>
void restore(Net& net, const Checkpoint& ckpt) {
    net.params().load_state_dict(ckpt.state);
}

}  // namespace

DiffusionUNet load_unet(const Checkpoint& ckpt) {
    require_kind(ckpt, "diffusion");
    DiffusionUNet net(unet_config_from_json(ckpt.meta.at("config")), RandomSource{0, 0});
    restore(net, ckpt);
    return net;
}

AutoencoderKL load_aekl(const Checkpoint& ckpt) {
    require_kind(ckpt, "aekl");
    AutoencoderKL net(aekl_config_from_json(ckpt.meta.at("config")), RandomSource{0, 0});
    restore(net, ckpt);
    return net;
}

VQVAE load_vqvae(const Checkpoint& ckpt) {
    require_kind(ckpt, "vqvae");
    VQVAE net(vqvae_config_from_json(ckpt.meta.at("config")), RandomSource{0, 0});
    restore(net, ckpt);
    return net;
}

TransformerDecoder load_transformer(const Checkpoint& ckpt) {
    require_kind(ckpt, "transformer");
    TransformerDecoder net(transformer_config_from_json(ckpt.meta.at("config")),
                           RandomSource{0, 0});
    restore(net, ckpt);
    return net;
}

ControlNet load_controlnet(const Checkpoint& ckpt) {
    require_kind(ckpt, "controlnet");
    ControlNet net(controlnet_config_from_json(ckpt.meta.at("config")), RandomSource{0, 0});
    restore(net, ckpt);
    return net;
}

namespace {

template <typename Net>
Checkpoint snapshot(const Net& net, const std::string& kind) {
    Checkpoint ckpt;
    ckpt.model_kind = kind;
    ckpt.meta["config"] = to_json(net.config());
    ckpt.state = net.params().state_dict();
    return ckpt;
}

}  // namespace

Checkpoint checkpoint_of(const DiffusionUNet& net) { return snapshot(net, "diffusion"); }
Checkpoint checkpoint_of(const AutoencoderKL& net) { return snapshot(net, "aekl"); }
Checkpoint checkpoint_of(const VQVAE& net) { return snapshot(net, "vqvae"); }
Checkpoint checkpoint_of(const TransformerDecoder& net) { return snapshot(net, "transformer"); }
Checkpoint checkpoint_of(const ControlNet& net) { return snapshot(net, "controlnet"); }

}  // namespace genimg

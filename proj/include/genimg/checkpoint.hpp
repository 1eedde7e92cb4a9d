#pragma once

#include <map>
#include <string>

#include "json.hpp"

#include "genimg/config.hpp"
#include "genimg/networks.hpp"
#include "genimg/schedulers.hpp"
#include "genimg/tensor.hpp"

namespace genimg {

// On-disk model snapshot:
//   bytes 0..7  magic "GIMGCKPT"
//   u32 version (= 1), u32 reserved (= 0)
//   u64 meta length, meta JSON (model_kind, free-form meta, array index)
//   array payloads, raw row-major float64 in index order
// Parameters are copied raw, so save -> load -> forward is bitwise-identical.
struct Checkpoint {
    std::string model_kind;  // aekl | vqvae | diffusion | transformer | controlnet
    nlohmann::json meta;     // config snapshot, schedule metadata, companions
    std::map<std::string, Tensor> state;
};

void save_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::string& path);

// ---- config plumbing -----------------------------------------------------------

// [model] section -> architecture configs. Throws ConfigError on bad values.
UNetConfig unet_config_from_ini(const IniConfig& ini, const std::string& section = "model");
AutoencoderKLConfig aekl_config_from_ini(const IniConfig& ini,
                                         const std::string& section = "model");
VQVAEConfig vqvae_config_from_ini(const IniConfig& ini, const std::string& section = "model");
TransformerConfig transformer_config_from_ini(const IniConfig& ini,
                                              const std::string& section = "model");

// [schedule] section -> built noise schedule.
NoiseSchedule schedule_from_ini(const IniConfig& ini, const std::string& section = "schedule");

// Architecture configs <-> JSON (stored in checkpoint meta under "config").
nlohmann::json to_json(const UNetConfig& cfg);
nlohmann::json to_json(const AutoencoderKLConfig& cfg);
nlohmann::json to_json(const VQVAEConfig& cfg);
nlohmann::json to_json(const TransformerConfig& cfg);
nlohmann::json to_json(const ControlNetConfig& cfg);
UNetConfig unet_config_from_json(const nlohmann::json& j);
AutoencoderKLConfig aekl_config_from_json(const nlohmann::json& j);
VQVAEConfig vqvae_config_from_json(const nlohmann::json& j);
TransformerConfig transformer_config_from_json(const nlohmann::json& j);
ControlNetConfig controlnet_config_from_json(const nlohmann::json& j);

// Schedule metadata (profile/T/betas/prediction type) <-> JSON; the schedule
// is rebuilt, not stored numerically.
nlohmann::json schedule_to_json(const NoiseSchedule& s);
NoiseSchedule schedule_from_json(const nlohmann::json& j);

// ---- model reconstruction -------------------------------------------------------

// Each loader validates model_kind and the parameter index; mismatches throw
// IncompatibleCheckpoint.
DiffusionUNet load_unet(const Checkpoint& ckpt);
AutoencoderKL load_aekl(const Checkpoint& ckpt);
VQVAE load_vqvae(const Checkpoint& ckpt);
TransformerDecoder load_transformer(const Checkpoint& ckpt);
ControlNet load_controlnet(const Checkpoint& ckpt);

Checkpoint checkpoint_of(const DiffusionUNet& net);
Checkpoint checkpoint_of(const AutoencoderKL& net);
Checkpoint checkpoint_of(const VQVAE& net);
Checkpoint checkpoint_of(const TransformerDecoder& net);
Checkpoint checkpoint_of(const ControlNet& net);

}  // namespace genimg

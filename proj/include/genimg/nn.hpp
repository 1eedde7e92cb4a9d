#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "genimg/autograd.hpp"
#include "genimg/random.hpp"
#include "genimg/tensor.hpp"

namespace genimg {

// Named trainable parameters of one network. Declaration order is stable
// (alphabetical map order) so state_dict round-trips deterministically.
class ParamMap {
public:
    Var& declare(const std::string& name, Tensor init);
    Var& at(const std::string& name);
    const Var& at(const std::string& name) const;
    bool contains(const std::string& name) const { return params_.count(name) > 0; }

    std::vector<std::string> names() const;
    std::vector<Var> all() const;
    int64_t parameter_count() const;
    void zero_grad();

    std::map<std::string, Tensor> state_dict() const;
    // Validates that names and shapes match exactly; throws IncompatibleCheckpoint.
    void load_state_dict(const std::map<std::string, Tensor>& sd);

private:
    std::map<std::string, Var> params_;
};

// Base for every trainable model: a parameter map plus identity/config tags.
class NetworkHandle {
public:
    virtual ~NetworkHandle() = default;
    const std::string& architecture_id() const { return arch_id_; }
    ParamMap& params() { return params_; }
    const ParamMap& params() const { return params_; }

    bool train_mode = false;

protected:
    explicit NetworkHandle(std::string arch_id) : arch_id_(std::move(arch_id)) {}
    ParamMap params_;

private:
    std::string arch_id_;
};

// ---- initializers ----
Tensor kaiming_uniform(const std::vector<int64_t>& shape, int64_t fan_in, Rng& rng);
Tensor normal_init(const std::vector<int64_t>& shape, double stddev, Rng& rng);

// ---- layer bundles (hold Vars living in some ParamMap) ----
struct Conv {
    Var w, b;
    int64_t stride = 1, pad = 0;
    Var operator()(const Var& x) const { return conv_nd(x, w, b, stride, pad); }
};
// rank: spatial rank (2 or 3). zero_init makes this a "zero conv".
Conv make_conv(ParamMap& pm, const std::string& name, int spatial_rank, int64_t cin, int64_t cout,
               int64_t k, int64_t stride, int64_t pad, Rng& rng, bool zero_init = false);

struct Linear {
    Var w, b;
    Var operator()(const Var& x) const { return affine(x, w, b); }
};
Linear make_linear(ParamMap& pm, const std::string& name, int64_t in, int64_t out, Rng& rng,
                   bool zero_init = false);

struct GroupNormLayer {
    Var gamma, beta;
    int groups = 1;
    Var operator()(const Var& x) const { return group_norm(x, gamma, beta, groups); }
};
GroupNormLayer make_group_norm(ParamMap& pm, const std::string& name, int64_t channels,
                               int groups);

struct LayerNormLayer {
    Var gamma, beta;
    Var operator()(const Var& x) const { return layer_norm(x, gamma, beta); }
};
LayerNormLayer make_layer_norm(ParamMap& pm, const std::string& name, int64_t dim);

// Sinusoidal features for integer timesteps; dim must be even.
Tensor sinusoidal_embedding(const std::vector<int>& t, int64_t dim);

// ---- optimizer ----
struct AdamConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;  // decoupled (AdamW) when nonzero
};

class Adam {
public:
    Adam(std::vector<Var> params, AdamConfig cfg);
    void step();
    void zero_grad();
    int64_t steps_taken() const { return t_; }

private:
    std::vector<Var> params_;
    std::vector<Tensor> m_, v_;
    AdamConfig cfg_;
    int64_t t_ = 0;
};

}  // namespace genimg

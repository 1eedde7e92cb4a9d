#include "genimg/nn.hpp"

#include <cmath>

#include "genimg/errors.hpp"

namespace genimg {

Var& ParamMap::declare(const std::string& name, Tensor init) {
    auto [it, inserted] = params_.emplace(name, Var(std::move(init), /*requires_grad=*/true));
    if (!inserted) throw ConfigError("duplicate parameter name: " + name);
    return it->second;
}

Var& ParamMap::at(const std::string& name) {
    auto it = params_.find(name);
    if (it == params_.end()) throw ConfigError("unknown parameter: " + name);
    return it->second;
}

const Var& ParamMap::at(const std::string& name) const {
    auto it = params_.find(name);
    if (it == params_.end()) throw ConfigError("unknown parameter: " + name);
    return it->second;
}

std::vector<std::string> ParamMap::names() const {
    std::vector<std::string> out;
    out.reserve(params_.size());
    for (const auto& [k, v] : params_) out.push_back(k);
    return out;
}

std::vector<Var> ParamMap::all() const {
    std::vector<Var> out;
    out.reserve(params_.size());
    for (const auto& [k, v] : params_) out.push_back(v);
    return out;
}

int64_t ParamMap::parameter_count() const {
    int64_t n = 0;
    for (const auto& [k, v] : params_) n += v.val().numel();
    return n;
}

void ParamMap::zero_grad() {
    for (auto& [k, v] : params_) v.zero_grad();
}

std::map<std::string, Tensor> ParamMap::state_dict() const {
    std::map<std::string, Tensor> out;
    for (const auto& [k, v] : params_) out.emplace(k, v.val());
    return out;
}

void ParamMap::load_state_dict(const std::map<std::string, Tensor>& sd) {
    if (sd.size() != params_.size()) {
        throw IncompatibleCheckpoint("parameter count mismatch: have " +
                                     std::to_string(params_.size()) + ", checkpoint has " +
                                     std::to_string(sd.size()));
    }
    for (auto& [name, var] : params_) {
        auto it = sd.find(name);
        if (it == sd.end()) throw IncompatibleCheckpoint("checkpoint missing parameter " + name);
        if (it->second.shape() != var.val().shape()) {
            throw IncompatibleCheckpoint("shape mismatch for " + name + ": expected " +
                                         var.val().shape_str() + ", got " +
                                         it->second.shape_str());
        }
        // Write in place so existing graph references see the loaded values.
        Tensor& dst = var.node()->value;
        const Tensor& src = it->second;
        for (int64_t i = 0; i < dst.numel(); ++i) dst[i] = src[i];
    }
}

Tensor kaiming_uniform(const std::vector<int64_t>& shape, int64_t fan_in, Rng& rng) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in > 0 ? fan_in : 1));
    return draw_uniform(shape, rng, -bound, bound);
}

Tensor normal_init(const std::vector<int64_t>& shape, double stddev, Rng& rng) {
    Tensor out(shape);
    for (int64_t i = 0; i < out.numel(); ++i) out[i] = stddev * rng.normal();
    return out;
}

Conv make_conv(ParamMap& pm, const std::string& name, int spatial_rank, int64_t cin, int64_t cout,
               int64_t k, int64_t stride, int64_t pad, Rng& rng, bool zero_init) {
    std::vector<int64_t> wshape = {cout, cin, k, k};
    if (spatial_rank == 3) wshape.push_back(k);
    int64_t fan_in = cin;
    for (size_t i = 2; i < wshape.size(); ++i) fan_in *= wshape[i];
    Conv c;
    c.w = pm.declare(name + ".w",
                     zero_init ? Tensor(wshape) : kaiming_uniform(wshape, fan_in, rng));
    c.b = pm.declare(name + ".b",
                     zero_init ? Tensor({cout}) : kaiming_uniform({cout}, fan_in, rng));
    c.stride = stride;
    c.pad = pad;
    return c;
}

Linear make_linear(ParamMap& pm, const std::string& name, int64_t in, int64_t out, Rng& rng,
                   bool zero_init) {
    Linear l;
    l.w = pm.declare(name + ".w",
                     zero_init ? Tensor({in, out}) : kaiming_uniform({in, out}, in, rng));
    l.b = pm.declare(name + ".b", zero_init ? Tensor({out}) : kaiming_uniform({out}, in, rng));
    return l;
}

GroupNormLayer make_group_norm(ParamMap& pm, const std::string& name, int64_t channels,
                               int groups) {
    GroupNormLayer g;
    Tensor gamma({channels});
    for (int64_t i = 0; i < channels; ++i) gamma[i] = 1.0;
    g.gamma = pm.declare(name + ".gamma", std::move(gamma));
    g.beta = pm.declare(name + ".beta", Tensor({channels}));
    g.groups = groups;
    return g;
}

LayerNormLayer make_layer_norm(ParamMap& pm, const std::string& name, int64_t dim) {
    LayerNormLayer l;
    Tensor gamma({dim});
    for (int64_t i = 0; i < dim; ++i) gamma[i] = 1.0;
    l.gamma = pm.declare(name + ".gamma", std::move(gamma));
    l.beta = pm.declare(name + ".beta", Tensor({dim}));
    return l;
}

Tensor sinusoidal_embedding(const std::vector<int>& t, int64_t dim) {
    if (dim < 2 || dim % 2 != 0) throw RangeError("sinusoidal embedding dim must be even, >= 2");
    const int64_t half = dim / 2;
    const int64_t B = static_cast<int64_t>(t.size());
    Tensor out({B, dim});
    for (int64_t b = 0; b < B; ++b) {
        for (int64_t k = 0; k < half; ++k) {
            const double freq =
                std::exp(-std::log(10000.0) * static_cast<double>(k) /
                         static_cast<double>(half > 1 ? half - 1 : 1));
            const double arg = static_cast<double>(t[static_cast<size_t>(b)]) * freq;
            out[b * dim + k] = std::sin(arg);
            out[b * dim + half + k] = std::cos(arg);
        }
    }
    return out;
}

Adam::Adam(std::vector<Var> params, AdamConfig cfg) : params_(std::move(params)), cfg_(cfg) {
    m_.reserve(params_.size());
    v_.reserve(params_.size());
    for (const Var& p : params_) {
        if (!p.requires_grad()) throw ConfigError("Adam given a non-trainable parameter");
        m_.emplace_back(p.val().shape());
        v_.emplace_back(p.val().shape());
    }
}

void Adam::step() {
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (size_t i = 0; i < params_.size(); ++i) {
        Tensor& theta = params_[i].node()->value;
        const Tensor& g = params_[i].grad();
        Tensor& m = m_[i];
        Tensor& v = v_[i];
        for (int64_t j = 0; j < theta.numel(); ++j) {
            const double gj = g[j];
            m[j] = cfg_.beta1 * m[j] + (1.0 - cfg_.beta1) * gj;
            v[j] = cfg_.beta2 * v[j] + (1.0 - cfg_.beta2) * gj * gj;
            const double mhat = m[j] / bc1;
            const double vhat = v[j] / bc2;
            double update = mhat / (std::sqrt(vhat) + cfg_.eps);
            if (cfg_.weight_decay > 0.0) update += cfg_.weight_decay * theta[j];
            theta[j] -= cfg_.lr * update;
        }
    }
}

void Adam::zero_grad() {
    for (Var& p : params_) p.zero_grad();
}

}  // namespace genimg

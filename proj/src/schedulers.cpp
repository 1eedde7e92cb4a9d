#include "genimg/schedulers.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace genimg {

std::string to_string(ScheduleProfile p) {
    switch (p) {
        case ScheduleProfile::linear: return "linear";
        case ScheduleProfile::scaled_linear: return "scaled_linear";
        case ScheduleProfile::cosine: return "cosine";
    }
    return "?";
}

std::string to_string(PredictionType p) {
    switch (p) {
        case PredictionType::epsilon: return "epsilon";
        case PredictionType::sample: return "sample";
        case PredictionType::v_prediction: return "v_prediction";
    }
    return "?";
}

ScheduleProfile profile_from_string(const std::string& s) {
    if (s == "linear") return ScheduleProfile::linear;
    if (s == "scaled_linear") return ScheduleProfile::scaled_linear;
    if (s == "cosine") return ScheduleProfile::cosine;
    throw RangeError("unknown schedule profile '" + s + "'");
}

PredictionType prediction_from_string(const std::string& s) {
    if (s == "epsilon") return PredictionType::epsilon;
    if (s == "sample") return PredictionType::sample;
    if (s == "v_prediction") return PredictionType::v_prediction;
    throw UnknownPredictionType("unknown prediction type '" + s + "'");
}

double NoiseSchedule::beta(int t) const {
    if (t < 1 || t > T) throw TimestepOutOfRange("beta(" + std::to_string(t) + ") with T=" + std::to_string(T));
    return betas[static_cast<size_t>(t) - 1];
}

double NoiseSchedule::alpha(int t) const {
    if (t < 1 || t > T) throw TimestepOutOfRange("alpha(" + std::to_string(t) + ") with T=" + std::to_string(T));
    return alphas[static_cast<size_t>(t) - 1];
}

double NoiseSchedule::alpha_bar(int t) const {
    if (t == 0) return 1.0;
    if (t < 1 || t > T)
        throw TimestepOutOfRange("alpha_bar(" + std::to_string(t) + ") with T=" + std::to_string(T));
    return alpha_bars[static_cast<size_t>(t) - 1];
}

NoiseSchedule build_schedule(ScheduleProfile profile, int T, double beta_start, double beta_end) {
    if (T < 1) throw RangeError("schedule needs T >= 1, got " + std::to_string(T));
    if (!(beta_start > 0.0) || !(beta_start <= beta_end) || !(beta_end < 1.0))
        throw RangeError("schedule needs 0 < beta_start <= beta_end < 1");

    NoiseSchedule s;
    s.profile = profile;
    s.T = T;
    s.beta_start = beta_start;
    s.beta_end = beta_end;
    s.betas.resize(static_cast<size_t>(T));

    switch (profile) {
        case ScheduleProfile::linear:
            for (int t = 0; t < T; ++t)
                s.betas[t] = T == 1 ? beta_start
                                    : beta_start + (beta_end - beta_start) * t / double(T - 1);
            break;
        case ScheduleProfile::scaled_linear: {
            const double r0 = std::sqrt(beta_start), r1 = std::sqrt(beta_end);
            for (int t = 0; t < T; ++t) {
                const double r = T == 1 ? r0 : r0 + (r1 - r0) * t / double(T - 1);
                s.betas[t] = r * r;
            }
            break;
        }
        case ScheduleProfile::cosine: {
            // squared-cosine alpha_bar profile with offset 0.008, betas clipped
            // at 0.999; the requested beta range plays no role here
            const double off = 0.008;
            auto f = [&](double t) {
                const double a = std::cos((t / T + off) / (1.0 + off) * std::numbers::pi / 2.0);
                return a * a;
            };
            const double f0 = f(0.0);
            double prev = 1.0;
            for (int t = 1; t <= T; ++t) {
                const double ab = f(double(t)) / f0;
                s.betas[t - 1] = std::min(1.0 - ab / prev, 0.999);
                prev = ab;
            }
            break;
        }
    }

    s.alphas.resize(s.betas.size());
    s.alpha_bars.resize(s.betas.size());
    double bar = 1.0;
    for (size_t i = 0; i < s.betas.size(); ++i) {
        s.alphas[i] = 1.0 - s.betas[i];
        bar *= s.alphas[i];
        s.alpha_bars[i] = bar;
    }
    return s;
}

std::vector<int> timestep_subsequence(int T, int n) {
    if (T < 1 || n < 1 || n > T) throw RangeError("timestep_subsequence(T=" + std::to_string(T) +
                                                  ", n=" + std::to_string(n) + ")");
    std::vector<int> ts;
    ts.reserve(static_cast<size_t>(n));
    if (n == 1) {
        ts.push_back(T);
        return ts;
    }
    for (int k = n - 1; k >= 0; --k)
        ts.push_back(1 + static_cast<int>((static_cast<int64_t>(k) * (T - 1)) / (n - 1)));
    return ts;
}

ImageBatch add_noise(const ImageBatch& x0, const ImageBatch& noise, int t,
                     const NoiseSchedule& schedule) {
    if (!x0.same_shape(noise))
        throw ShapeMismatch("add_noise: " + x0.shape_str() + " vs " + noise.shape_str());
    if (t < 1) throw TimestepOutOfRange("add_noise t=" + std::to_string(t));
    const double ab = schedule.alpha_bar(t);  // validates the upper bound
    return add_scaled(x0, std::sqrt(ab), noise, std::sqrt(1.0 - ab));
}

ImageBatch add_noise(const ImageBatch& x0, const ImageBatch& noise, const std::vector<int>& t,
                     const NoiseSchedule& schedule) {
    if (!x0.same_shape(noise))
        throw ShapeMismatch("add_noise: " + x0.shape_str() + " vs " + noise.shape_str());
    const int64_t B = x0.dim(0);
    if (static_cast<int64_t>(t.size()) != B) throw ShapeMismatch("add_noise: one timestep per item");
    Tensor out(x0.shape());
    const int64_t S = x0.numel() / B;
    for (int64_t b = 0; b < B; ++b) {
        if (t[static_cast<size_t>(b)] < 1)
            throw TimestepOutOfRange("add_noise t=" + std::to_string(t[static_cast<size_t>(b)]));
        const double ab = schedule.alpha_bar(t[static_cast<size_t>(b)]);
        const double c0 = std::sqrt(ab), c1 = std::sqrt(1.0 - ab);
        for (int64_t i = 0; i < S; ++i)
            out[b * S + i] = c0 * x0[b * S + i] + c1 * noise[b * S + i];
    }
    return out;
}

Converted convert_prediction(const Tensor& model_out, PredictionType type, const Tensor& x_t,
                             int t, const NoiseSchedule& schedule) {
    if (!model_out.same_shape(x_t))
        throw ShapeMismatch("convert_prediction: " + model_out.shape_str() + " vs " +
                            x_t.shape_str());
    const double ab = schedule.alpha_bar(t);
    const double sa = std::sqrt(ab), sb = std::sqrt(1.0 - ab);
    Converted c;
    switch (type) {
        case PredictionType::epsilon:
            c.pred_eps = model_out;
            c.pred_x0 = add_scaled(x_t, 1.0 / sa, model_out, -sb / sa);
            break;
        case PredictionType::sample:
            c.pred_x0 = model_out;
            c.pred_eps = add_scaled(x_t, 1.0 / sb, model_out, -sa / sb);
            break;
        case PredictionType::v_prediction:
            c.pred_x0 = add_scaled(x_t, sa, model_out, -sb);
            c.pred_eps = add_scaled(model_out, sa, x_t, sb);
            break;
        default:
            throw UnknownPredictionType("convert_prediction: bad enum value");
    }
    return c;
}

Tensor velocity_target(const Tensor& x0, const Tensor& eps, int t, const NoiseSchedule& schedule) {
    if (!x0.same_shape(eps))
        throw ShapeMismatch("velocity_target: " + x0.shape_str() + " vs " + eps.shape_str());
    const double ab = schedule.alpha_bar(t);
    return add_scaled(eps, std::sqrt(ab), x0, -std::sqrt(1.0 - ab));
}

Tensor ddpm_step(const Tensor& model_out, int t, const Tensor& x_t, const NoiseSchedule& schedule,
                 Rng& rng) {
    if (t < 1 || t > schedule.T) throw TimestepOutOfRange("ddpm_step t=" + std::to_string(t));
    Converted c = convert_prediction(model_out, schedule.prediction_type, x_t, t, schedule);

    const double ab_t = schedule.alpha_bar(t);
    const double ab_prev = schedule.alpha_bar(t - 1);
    const double beta_t = schedule.beta(t);
    const double alpha_t = schedule.alpha(t);

    const double coef_x0 = std::sqrt(ab_prev) * beta_t / (1.0 - ab_t);
    const double coef_xt = std::sqrt(alpha_t) * (1.0 - ab_prev) / (1.0 - ab_t);
    Tensor mean = add_scaled(c.pred_x0, coef_x0, x_t, coef_xt);

    const double var = beta_t * (1.0 - ab_prev) / (1.0 - ab_t);
    if (var > 0.0 && t > 1) {
        const double sd = std::sqrt(var);
        for (int64_t i = 0; i < mean.numel(); ++i) mean[i] += sd * rng.normal();
    }
    return mean;
}

Tensor ddim_step(const Tensor& model_out, int t, int t_prev, const Tensor& x_t,
                 const NoiseSchedule& schedule, double eta, Rng& rng) {
    if (t < 1 || t > schedule.T) throw TimestepOutOfRange("ddim_step t=" + std::to_string(t));
    if (t_prev >= t || t_prev < 0) throw RangeError("ddim_step needs 0 <= t_prev < t");
    if (!(eta >= 0.0 && eta <= 1.0)) throw RangeError("ddim_step needs eta in [0, 1]");

    Converted c = convert_prediction(model_out, schedule.prediction_type, x_t, t, schedule);
    const double ab_t = schedule.alpha_bar(t);
    const double ab_prev = schedule.alpha_bar(t_prev);

    double sigma = 0.0;
    if (eta > 0.0 && t_prev > 0)
        sigma = eta * std::sqrt((1.0 - ab_prev) / (1.0 - ab_t)) * std::sqrt(1.0 - ab_t / ab_prev);

    const double dir = std::sqrt(std::max(0.0, 1.0 - ab_prev - sigma * sigma));
    Tensor out = add_scaled(c.pred_x0, std::sqrt(ab_prev), c.pred_eps, dir);
    if (sigma > 0.0)
        for (int64_t i = 0; i < out.numel(); ++i) out[i] += sigma * rng.normal();
    return out;
}

namespace {

// PNDM transfer map: advance x from t to t_prev assuming constant eps over the
// segment, in the variance-preserving reformulation of the PNDM paper
Tensor pndm_transfer(const Tensor& x, const Tensor& eps, int t, int t_prev,
                     const NoiseSchedule& schedule) {
    const double ab_t = schedule.alpha_bar(t);
    const double ab_prev = schedule.alpha_bar(t_prev);
    const double sample_coef = std::sqrt(ab_prev / ab_t);
    const double denom =
        ab_t * std::sqrt(1.0 - ab_prev) + std::sqrt(ab_t * (1.0 - ab_t) * ab_prev);
    const double eps_coef = -(ab_prev - ab_t) / denom;
    return add_scaled(x, sample_coef, eps, eps_coef);
}

}  // namespace

Tensor pndm_ab4_blend(const std::vector<Tensor>& eps_history) {
    if (eps_history.size() < 4)
        throw BufferUnderflow("pndm multistep needs 4 stored estimates, have " +
                              std::to_string(eps_history.size()));
    // (55 e1 - 59 e2 + 37 e3 - 9 e4)/24 with e1 newest, arranged around e1 so
    // that four identical histories reduce to e1 exactly
    const Tensor& e1 = eps_history[eps_history.size() - 1];
    const Tensor& e2 = eps_history[eps_history.size() - 2];
    const Tensor& e3 = eps_history[eps_history.size() - 3];
    const Tensor& e4 = eps_history[eps_history.size() - 4];
    Tensor out(e1.shape());
    for (int64_t i = 0; i < out.numel(); ++i) {
        const double a = e1[i];
        out[i] = a + (-59.0 * (e2[i] - a) + 37.0 * (e3[i] - a) - 9.0 * (e4[i] - a)) / 24.0;
    }
    return out;
}

SamplerState make_sampler_state(const NoiseSchedule& schedule, int n_steps, double eta) {
    if (!(eta >= 0.0 && eta <= 1.0)) throw RangeError("sampler eta must be in [0, 1]");
    SamplerState st;
    st.timestep_sequence = timestep_subsequence(schedule.T, n_steps);
    st.eta = eta;
    st.next_eval_t = st.timestep_sequence.front();
    return st;
}

std::pair<Tensor, SamplerState> pndm_step(const Tensor& model_out, int t, const Tensor& x_t,
                                          SamplerState state, const NoiseSchedule& schedule) {
    if (state.finished) throw RangeError("pndm_step on a finished trajectory");
    const auto& ts = state.timestep_sequence;
    const int n = static_cast<int>(ts.size());
    if (n < 4) throw RangeError("pndm needs at least 4 inference steps");
    if (t != state.next_eval_t)
        throw TimestepOutOfRange("pndm_step got t=" + std::to_string(t) + ", expected " +
                                 std::to_string(state.next_eval_t));

    Tensor eps = convert_prediction(model_out, schedule.prediction_type, x_t, t, schedule).pred_eps;

    constexpr int warmup_evals = 12;  // three pseudo-RK4 blocks of four
    Tensor x_next;
    if (state.call_index < warmup_evals) {
        const int anchor_t = ts[state.anchor_pos];
        const int target_t = ts[state.anchor_pos + 1];
        const int mid_t = (anchor_t + target_t) / 2;
        switch (state.call_index % 4) {
            case 0:
                state.prk_anchor_x = x_t;
                state.eps_history.push_back(eps);
                state.prk_acc = scale(eps, 1.0 / 6.0);
                x_next = pndm_transfer(state.prk_anchor_x, eps, anchor_t, mid_t, schedule);
                state.next_eval_t = mid_t;
                break;
            case 1:
                state.prk_acc = add_scaled(state.prk_acc, 1.0, eps, 1.0 / 3.0);
                x_next = pndm_transfer(state.prk_anchor_x, eps, anchor_t, mid_t, schedule);
                state.next_eval_t = mid_t;
                break;
            case 2:
                state.prk_acc = add_scaled(state.prk_acc, 1.0, eps, 1.0 / 3.0);
                x_next = pndm_transfer(state.prk_anchor_x, eps, anchor_t, target_t, schedule);
                state.next_eval_t = target_t;
                break;
            case 3: {
                Tensor blended = add_scaled(state.prk_acc, 1.0, eps, 1.0 / 6.0);
                x_next = pndm_transfer(state.prk_anchor_x, blended, anchor_t, target_t, schedule);
                state.anchor_pos += 1;
                state.next_eval_t = target_t;
                break;
            }
        }
        state.call_index += 1;
        return {std::move(x_next), std::move(state)};
    }

    // linear multistep phase: blend the current estimate with the previous
    // three and jump one segment (or to the data at the end of the sequence)
    state.eps_history.push_back(eps);
    while (state.eps_history.size() > 4) state.eps_history.erase(state.eps_history.begin());
    Tensor blended = pndm_ab4_blend(state.eps_history);

    const int target_t = state.anchor_pos + 1 < n ? ts[state.anchor_pos + 1] : 0;
    x_next = pndm_transfer(x_t, blended, t, target_t, schedule);
    state.anchor_pos += 1;
    state.call_index += 1;
    if (target_t == 0) {
        state.finished = true;
        state.next_eval_t = 0;
    } else {
        state.next_eval_t = target_t;
    }
    return {std::move(x_next), std::move(state)};
}

}  // namespace genimg

#pragma once

#include <string>
#include <utility>
#include <vector>

#include "genimg/foundation.hpp"
#include "genimg/random.hpp"
#include "genimg/tensor.hpp"

namespace genimg {

enum class ScheduleProfile { linear, scaled_linear, cosine };
enum class PredictionType { epsilon, sample, v_prediction };

std::string to_string(ScheduleProfile p);
std::string to_string(PredictionType p);
ScheduleProfile profile_from_string(const std::string& s);
PredictionType prediction_from_string(const std::string& s);

// Immutable forward-process description. Timesteps are 1-based: beta(t) for
// t in 1..T, alpha_bar(0) == 1 by convention.
struct NoiseSchedule {
    ScheduleProfile profile = ScheduleProfile::linear;
    int T = 0;
    double beta_start = 0.0, beta_end = 0.0;  // as requested, kept for serialization
    PredictionType prediction_type = PredictionType::v_prediction;
    std::vector<double> betas, alphas, alpha_bars;

    double beta(int t) const;       // t in 1..T
    double alpha(int t) const;      // t in 1..T
    double alpha_bar(int t) const;  // t in 0..T, alpha_bar(0) = 1
};

NoiseSchedule build_schedule(ScheduleProfile profile, int T, double beta_start, double beta_end);

// n evenly spaced inference timesteps from T down to 1 (n >= 2 covers both
// endpoints; n == 1 yields {T}).
std::vector<int> timestep_subsequence(int T, int n);

// x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) noise
ImageBatch add_noise(const ImageBatch& x0, const ImageBatch& noise, int t,
                     const NoiseSchedule& schedule);
// per-item timesteps for minibatch training
ImageBatch add_noise(const ImageBatch& x0, const ImageBatch& noise, const std::vector<int>& t,
                     const NoiseSchedule& schedule);

struct Converted {
    Tensor pred_x0;
    Tensor pred_eps;
};
Converted convert_prediction(const Tensor& model_out, PredictionType type, const Tensor& x_t,
                             int t, const NoiseSchedule& schedule);

// v target for training: v = sqrt(abar) eps - sqrt(1-abar) x0
Tensor velocity_target(const Tensor& x0, const Tensor& eps, int t, const NoiseSchedule& schedule);

// Ancestral DDPM step t -> t-1 using the posterior
// N(mu_t(x_t, pred_x0), beta_tilde_t); the terminal step (t == 1) is
// deterministic because beta_tilde_1 == 0.
Tensor ddpm_step(const Tensor& model_out, int t, const Tensor& x_t, const NoiseSchedule& schedule,
                 Rng& rng);

// DDIM step t -> t_prev (t_prev may be 0, meaning a jump to the data).
// eta = 0 is fully deterministic; eta = 1 matches the DDPM posterior variance
// at adjacent timesteps.
Tensor ddim_step(const Tensor& model_out, int t, int t_prev, const Tensor& x_t,
                 const NoiseSchedule& schedule, double eta, Rng& rng);

// Sampler bookkeeping shared by the inference loops. For PNDM it carries the
// pseudo-Runge-Kutta warm-up accumulator and the multistep eps history.
struct SamplerState {
    std::vector<int> timestep_sequence;  // descending, last entry is 1
    std::vector<Tensor> eps_history;     // newest last, at most 4 kept
    double eta = 0.0;

    // PNDM driver state
    int call_index = 0;    // model evaluations consumed
    int anchor_pos = 0;    // index into timestep_sequence of the current segment
    int next_eval_t = 0;   // timestep the next model_out must be computed at
    bool finished = false;
    Tensor prk_acc;        // k1/6 + k2/3 + k3/3 during a warm-up block
    Tensor prk_anchor_x;   // sample at the segment's anchor timestep
};

SamplerState make_sampler_state(const NoiseSchedule& schedule, int n_steps, double eta = 0.0);

// 4th-order multistep blend (55, -59, 37, -9)/24 over the newest-last eps
// history; four identical estimates reduce to that estimate exactly.
Tensor pndm_ab4_blend(const std::vector<Tensor>& eps_history);

// One PNDM model-feed. `model_out` must be evaluated at (x_t, t) where both
// are whatever the previous call returned (initially the start noise at
// state.next_eval_t). Returns the next sample to evaluate, or the final
// sample once state.finished flips.
std::pair<Tensor, SamplerState> pndm_step(const Tensor& model_out, int t, const Tensor& x_t,
                                          SamplerState state, const NoiseSchedule& schedule);

}  // namespace genimg

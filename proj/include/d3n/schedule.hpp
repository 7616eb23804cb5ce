#pragma once

#include <vector>

namespace d3n {

/// Per-step noise schedule of the forward diffusion process.
/// Timesteps are 1-based in the API; arrays are indexed t-1.
struct NoiseSchedule {
    int total_steps = 0;
    std::vector<double> betas;       // beta_t in (0,1)
    std::vector<double> alphas;      // 1 - beta_t
    std::vector<double> alpha_bars;  // prod_{s<=t} alpha_s, strictly decreasing

    double beta(int t) const { return betas[t - 1]; }
    double alpha(int t) const { return alphas[t - 1]; }
    double alpha_bar(int t) const { return alpha_bars[t - 1]; }
    /// alpha_bar at t-1, with the t=1 boundary value 1.
    double alpha_bar_prev(int t) const { return t > 1 ? alpha_bars[t - 2] : 1.0; }
};

/// Squared-cosine alpha-bar profile with offset s=0.008, betas clipped
/// to [1e-8, 0.999]; alpha_bars rebuilt as the running product so the
/// recurrence alpha_bar_t = alpha_bar_{t-1} * alpha_t holds exactly.
NoiseSchedule build_cosine_schedule(int total_steps, double offset = 0.008);

}  // namespace d3n

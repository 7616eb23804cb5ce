#include "d3n/schedule.hpp"

#include <algorithm>
#include <cmath>

#include "d3n/errors.hpp"

namespace d3n {

NoiseSchedule build_cosine_schedule(int total_steps, double offset) {
    if (total_steps < 1) throw InvalidArgument("total_steps must be >= 1");

    auto profile = [&](double t) {
        double v = std::cos((t / total_steps + offset) / (1.0 + offset) * M_PI / 2.0);
        return v * v;
    };
    const double f0 = profile(0.0);

    NoiseSchedule s;
    s.total_steps = total_steps;
    s.betas.resize(total_steps);
    s.alphas.resize(total_steps);
    s.alpha_bars.resize(total_steps);

    double prev_bar = 1.0;  // boundary value adjacent to t=0
    double running = 1.0;
    for (int t = 1; t <= total_steps; ++t) {
        double bar = profile(static_cast<double>(t)) / f0;
        double beta = 1.0 - bar / prev_bar;
        beta = std::clamp(beta, 1e-8, 0.999);
        prev_bar = bar;

        s.betas[t - 1] = beta;
        s.alphas[t - 1] = 1.0 - beta;
        running *= s.alphas[t - 1];
        s.alpha_bars[t - 1] = running;
    }
    return s;
}

}  // namespace d3n

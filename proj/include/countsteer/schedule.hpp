#pragma once

#include <span>
#include <vector>

namespace countsteer {

// Discrete DDPM noise schedule. Index t = 0 is the least noisy timestep.
struct NoiseSchedule {
    int steps = 0;
    std::vector<double> betas;
    std::vector<double> alphas;
    std::vector<double> alpha_bars;

    // Linear betas from beta_start to beta_end over `steps` entries.
    static NoiseSchedule linear(int steps, double beta_start, double beta_end);

    // Linear schedule whose endpoints are the classic 1e-4 / 0.02 pair
    // rescaled by 1000 / steps, so a short chain still ends near pure noise.
    static NoiseSchedule scaled_linear(int steps);
};

// Throws InvalidArgument if any invariant fails (0 < beta < 1, strictly
// decreasing alpha_bars).
void validate(const NoiseSchedule& schedule);

// x_t = sqrt(alpha_bar_t) * x0 + sqrt(1 - alpha_bar_t) * eps.
// Throws ShapeMismatch when sizes differ and InvalidArgument on a bad t.
std::vector<float> forward_diffuse(std::span<const float> x0, int t, std::span<const float> eps,
                                   const NoiseSchedule& schedule);

// Same formula with an explicit alpha_bar.
std::vector<float> forward_diffuse(std::span<const float> x0, double alpha_bar,
                                   std::span<const float> eps);

}  // namespace countsteer

#include "countsteer/schedule.hpp"

#include <cmath>
#include <string>

#include "countsteer/error.hpp"

namespace countsteer {

NoiseSchedule NoiseSchedule::linear(int steps, double beta_start, double beta_end) {
    if (steps < 1) throw InvalidArgument("schedule needs at least one step");
    NoiseSchedule s;
    s.steps = steps;
    s.betas.resize(steps);
    s.alphas.resize(steps);
    s.alpha_bars.resize(steps);
    double bar = 1.0;
    for (int t = 0; t < steps; ++t) {
        const double frac = steps == 1 ? 0.0 : static_cast<double>(t) / (steps - 1);
        s.betas[t] = beta_start + (beta_end - beta_start) * frac;
        s.alphas[t] = 1.0 - s.betas[t];
        bar *= s.alphas[t];
        s.alpha_bars[t] = bar;
    }
    validate(s);
    return s;
}

NoiseSchedule NoiseSchedule::scaled_linear(int steps) {
    const double scale = 1000.0 / steps;
    return linear(steps, 1e-4 * scale, 0.02 * scale);
}

void validate(const NoiseSchedule& s) {
    if (s.steps < 1 || static_cast<int>(s.betas.size()) != s.steps ||
        s.alphas.size() != s.betas.size() || s.alpha_bars.size() != s.betas.size()) {
        throw InvalidArgument("schedule arrays inconsistent with step count");
    }
    for (int t = 0; t < s.steps; ++t) {
        if (!(s.betas[t] > 0.0 && s.betas[t] < 1.0)) {
            throw InvalidArgument("beta_" + std::to_string(t) + " outside (0, 1)");
        }
        if (t > 0 && !(s.alpha_bars[t] < s.alpha_bars[t - 1])) {
            throw InvalidArgument("alpha_bars not strictly decreasing at t=" + std::to_string(t));
        }
    }
}

std::vector<float> forward_diffuse(std::span<const float> x0, double alpha_bar,
                                   std::span<const float> eps) {
    if (x0.size() != eps.size()) {
        throw ShapeMismatch("forward_diffuse: x0 has " + std::to_string(x0.size()) +
                            " values, eps has " + std::to_string(eps.size()));
    }
    const auto a = static_cast<float>(std::sqrt(alpha_bar));
    const auto b = static_cast<float>(std::sqrt(1.0 - alpha_bar));
    std::vector<float> out(x0.size());
    for (std::size_t i = 0; i < x0.size(); ++i) out[i] = a * x0[i] + b * eps[i];
    return out;
}

std::vector<float> forward_diffuse(std::span<const float> x0, int t, std::span<const float> eps,
                                   const NoiseSchedule& schedule) {
    if (t < 0 || t >= schedule.steps) {
        throw InvalidArgument("timestep " + std::to_string(t) + " outside [0, " +
                              std::to_string(schedule.steps) + ")");
    }
    return forward_diffuse(x0, schedule.alpha_bars[t], eps);
}

}  // namespace countsteer

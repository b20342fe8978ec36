#include "countsteer/sampler.hpp"

#include <algorithm>
#include <cmath>

#include "countsteer/common.hpp"
#include "countsteer/error.hpp"

namespace countsteer {

namespace {

Image to_image(std::span<const float> x, int side) {
    Image img(side, side);
    for (std::size_t i = 0; i < x.size(); ++i) img.pixels[i] = std::clamp((x[i] + 1.0f) * 0.5f, 0.0f, 1.0f);
    return img;
}

}  // namespace

std::vector<float> guided_noise(std::span<const float> eps_cond, std::span<const float> eps_uncond, double w) {
    if (eps_cond.size() != eps_uncond.size()) throw ShapeMismatch("guided_noise: branch sizes differ");
    const auto wf = static_cast<float>(w);
    std::vector<float> out(eps_cond.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = eps_uncond[i] + wf * (eps_cond[i] - eps_uncond[i]);
    return out;
}

SampleResult sample(const ModelState& model, const ConditionTokens& cond, const NoiseSchedule& schedule,
                    const SampleOptions& options) {
    if (!(options.guidance_scale >= 0.0)) throw InvalidArgument("guidance_scale must be >= 0");
    const int side = model.config().canvas;
    const std::size_t pixels = static_cast<std::size_t>(side) * side;
    Rng rng(options.seed);
    std::vector<float> x(pixels);
    for (float& v : x) v = static_cast<float>(standard_normal(rng));

    SampleResult result;
    std::vector<float> x0(pixels);
    for (int step = 0; step < schedule.steps; ++step) {
        const int t = schedule.steps - 1 - step;
        ForwardOptions cond_opt{options.interceptor, step, Branch::conditional};
        std::vector<float> eps = predict_noise(model, x, t, cond, cond_opt);
        if (options.guidance_scale != 1.0) {
            ForwardOptions uncond_opt{options.intercept_unconditional ? options.interceptor : nullptr, step,
                                      Branch::unconditional};
            const auto eps_u = predict_noise(model, x, t, unconditional_tokens(), uncond_opt);
            eps = guided_noise(eps, eps_u, options.guidance_scale);
        }

        const double ab = schedule.alpha_bars[t];
        const double ab_prev = t > 0 ? schedule.alpha_bars[t - 1] : 1.0;
        const double sqrt_ab = std::sqrt(ab);
        const double sqrt_1m_ab = std::sqrt(1.0 - ab);
        for (std::size_t i = 0; i < pixels; ++i) {
            const double est = (x[i] - sqrt_1m_ab * eps[i]) / sqrt_ab;
            x0[i] = static_cast<float>(std::clamp(est, -1.0, 1.0));
        }
        if (options.trajectory) result.trajectory.push_back(to_image(x0, side));

        if (t == 0) {
            x = x0;
            break;
        }
        // Posterior q(x_{t-1} | x_t, x0).
        const double beta = schedule.betas[t];
        const double coef_x0 = std::sqrt(ab_prev) * beta / (1.0 - ab);
        const double coef_xt = std::sqrt(schedule.alphas[t]) * (1.0 - ab_prev) / (1.0 - ab);
        const double sigma = std::sqrt(beta * (1.0 - ab_prev) / (1.0 - ab));
        for (std::size_t i = 0; i < pixels; ++i) {
            const double mean = coef_x0 * x0[i] + coef_xt * x[i];
            x[i] = static_cast<float>(mean + sigma * standard_normal(rng));
        }
        for (float v : x) {
            if (!std::isfinite(v)) throw NonFiniteActivation("non-finite sample state at step " + std::to_string(step));
        }
    }
    result.image = to_image(x, side);
    return result;
}

}  // namespace countsteer

#pragma once

#include <cstdint>
#include <vector>

#include "countsteer/model.hpp"
#include "countsteer/scene.hpp"
#include "countsteer/schedule.hpp"

namespace countsteer {

struct SampleOptions {
    double guidance_scale = 7.5;
    std::uint64_t seed = 0;
    QueryInterceptor* interceptor = nullptr;
    // Interceptors see the conditional branch; set to also route the
    // unconditional branch through them.
    bool intercept_unconditional = false;
    // Keep the predicted clean image of every step.
    bool trajectory = false;
};

struct SampleResult {
    Image image;                    // [0, 1]
    std::vector<Image> trajectory;  // x0 estimate per denoising step, [0, 1]
};

// eps = eps_uncond + w * (eps_cond - eps_uncond). With w == 1 only the
// conditional branch is evaluated, so the result matches it bit for bit.
std::vector<float> guided_noise(std::span<const float> eps_cond, std::span<const float> eps_uncond, double w);

// Ancestral DDPM sampling from pure noise over every schedule step. Step i
// of the loop runs diffusion timestep steps-1-i. Throws NonFiniteActivation.
SampleResult sample(const ModelState& model, const ConditionTokens& cond, const NoiseSchedule& schedule,
                    const SampleOptions& options);

}  // namespace countsteer

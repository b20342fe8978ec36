#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "countsteer/capture.hpp"
#include "countsteer/model.hpp"

namespace countsteer {

inline constexpr double default_steering_scale = 1.0;
// Scale the original method uses with Stable Diffusion activations.
inline constexpr double reference_steering_scale = 100.0;
// Sites whose direction is shorter than this are left alone.
inline constexpr double inert_norm = 1e-8;

struct SteeringEntry {
    int t = 0;
    int block = 0;
    std::vector<float> mu1, mu0, s;

    bool inert() const;
    bool operator==(const SteeringEntry&) const = default;
};

struct SteeringBank {
    int k = 0;
    int blocks = 0;
    double c = default_steering_scale;
    std::vector<SteeringEntry> entries;  // index t * blocks + block
    std::array<std::uint32_t, 2> samples{0, 0};  // [incorrect, correct] behind the means

    const SteeringEntry& at(int t, int block) const;
    bool operator==(const SteeringBank&) const = default;
};

struct SteeringConfig {
    int k = 10;
    double c = default_steering_scale;
    bool both_branches = false;  // default: conditional branch only
    std::array<bool, hooked_block_count> enabled_blocks{true, true, true};
};

void validate(const SteeringConfig& cfg, int steps);

// Class means per (t, block) in double, rounded to float; s = mu1 - mu0 in
// float. Throws EmptyClassAtSite.
SteeringBank build_bank(const BalancedCorpus& corpus, double c = default_steering_scale,
                        int blocks = hooked_block_count);

// alpha = cos(s, mu1 - h) * (1 - exp(-|mu1 - h| / |s|)) * c, with cos = 0
// when h == mu1. Requires |s| > 0.
double adaptive_alpha(std::span<const float> s, std::span<const float> mu1, std::span<const float> h, double c);

// h + alpha * s. Throws ShapeMismatch.
std::vector<float> apply_steering(std::span<const float> h, std::span<const float> s, double alpha);

// Steers pooled queries of the first cfg.k steps; the same alpha * s is
// added to every token. Throws BankMismatch when the bank does not fit the
// model's hook sites or does not cover cfg.k.
std::unique_ptr<QueryInterceptor> make_interceptor(const SteeringBank& bank, const SteeringConfig& cfg,
                                                   const ModelConfig& model);

// Bank file "CSBK" v1. Sample counts go to the .meta sidecar.
void write_bank(const std::filesystem::path& path, const SteeringBank& bank, const std::string& extra = {});
SteeringBank read_bank(const std::filesystem::path& path);

}  // namespace countsteer

#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "countsteer/analysis.hpp"
#include "countsteer/capture.hpp"
#include "countsteer/eval.hpp"
#include "countsteer/model.hpp"
#include "countsteer/oracle.hpp"
#include "countsteer/schedule.hpp"
#include "countsteer/steering.hpp"
#include "countsteer/train.hpp"

namespace countsteer {

// Plain `key = value` run configuration. Every key can also be set from the
// command line as --key (underscores become dashes).
struct RunConfig {
    std::uint64_t seed = 1;
    int threads = 1;
    std::string out = "run";

    // data
    int train_scenes = 8192;
    int prompts_per_cell = 50;
    double split_ratio = 2.0 / 3.0;  // construction share of the prompts

    // model
    ModelConfig model;

    // schedule and training
    std::string schedule = "scaled_linear";
    int diffusion_steps = 50;
    TrainHyper train{.ema_decay = 0.999};  // sampling uses the averaged weights

    // sampling and steering
    double guidance_scale = 7.5;
    int k = 10;
    double c = default_steering_scale;
    bool steer_both_branches = false;
    std::vector<int> steer_blocks{0, 1, 2};

    // capture
    int per_class = 200;
    int reseed_budget = 20;

    // calibration
    std::vector<double> calibrate_grid{0.1, 0.3, 1, 3, 10, 30, 100};
    double calibrate_holdout = 0.25;
    int calibrate_seeds = 1;

    // evaluation
    int seeds_per_prompt = 1;
    int eval_limit = 0;
    OracleConfig oracle;
};

std::vector<std::string> config_keys();

// Throws InvalidArgument naming the key for unknown keys or bad values.
void set_config_value(RunConfig& cfg, std::string_view key, std::string_view value);
std::string get_config_value(const RunConfig& cfg, std::string_view key);

// Parses a config file; `#` starts a comment. Keys set are appended to
// `seen` when given. Throws InvalidArgument, IoError.
void load_config(RunConfig& cfg, const std::filesystem::path& path, std::vector<std::string>* seen = nullptr);
void parse_config_text(RunConfig& cfg, std::string_view text, std::string_view origin = "<text>",
                       std::vector<std::string>* seen = nullptr);

// Cross-field checks.
void validate(const RunConfig& cfg);

// Canonical resolved form: one `key = value` line per key in a fixed order.
std::string config_text(const RunConfig& cfg);
std::string config_hash(const RunConfig& cfg);

NoiseSchedule make_schedule(const RunConfig& cfg);
SteeringConfig steering_config(const RunConfig& cfg);

}  // namespace countsteer

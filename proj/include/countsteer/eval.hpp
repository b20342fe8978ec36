#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "countsteer/model.hpp"
#include "countsteer/oracle.hpp"
#include "countsteer/sampler.hpp"
#include "countsteer/scene.hpp"
#include "countsteer/schedule.hpp"
#include "countsteer/steering.hpp"

namespace countsteer {

struct EvalSample {
    std::uint32_t prompt_id = 0;
    std::uint64_t seed = 0;
    int target = 0;
    Shape shape = Shape::disk;
    int predicted = 0;
    double shape_match = 0.0;

    bool correct() const { return predicted == target; }
    bool operator==(const EvalSample&) const = default;
};

struct EvalReport {
    std::vector<EvalSample> samples;
    double acc = 0.0;
    double mae = 0.0;
    double alignment = 0.0;
    std::string fingerprint;  // bank hash or "baseline", plus seeds

    bool operator==(const EvalReport&) const = default;
};

// Fills acc, mae and alignment from the samples (all zero when empty).
void compute_metrics(EvalReport& report);

struct EvalOptions {
    int seeds_per_prompt = 1;
    std::uint64_t base_seed = 0;
    double guidance_scale = 7.5;
    OracleConfig oracle;
    int threads = 1;
    int limit = 0;  // evaluate only the first `limit` prompts; 0 = all
};

// Seed of the j-th image for a prompt; identical across arms for pairing.
std::uint64_t eval_seed(std::uint64_t base_seed, std::uint32_t prompt_id, int j);

// Generates options.seeds_per_prompt images per prompt, steered iff `bank`
// is given. `construction`, when given, must be disjoint from `prompts`
// (DisjointnessViolation).
EvalReport evaluate(const ModelState& model, const NoiseSchedule& schedule, const SteeringBank* bank,
                    const SteeringConfig& steering, const PromptSet& prompts, const EvalOptions& options,
                    const PromptSet* construction = nullptr);

struct CountRow {
    int count = 0;
    int n = 0;
    int correct = 0;
    double accuracy = 0.0;
    double mae = 0.0;
};

std::vector<CountRow> per_count_breakdown(const EvalReport& report);

enum class Flip : std::uint8_t { fixed, broken, unchanged_correct, unchanged_incorrect };

std::string_view flip_name(Flip flip);

struct PairedReport {
    std::vector<Flip> flips;  // aligned with the samples
    int fixed = 0;
    int broken = 0;
    int unchanged_correct = 0;
    int unchanged_incorrect = 0;
};

// Throws InvalidArgument unless both arms cover the same (prompt, seed) pairs
// in the same order.
PairedReport compare_arms(const EvalReport& baseline, const EvalReport& steered);

// Table with the columns Method, ACC, MAE, Alignment.
std::string format_comparison_table(const EvalReport& baseline, const EvalReport& steered);
std::string format_comparison_table(double acc_baseline, double mae_baseline, double align_baseline,
                                    double acc_steered, double mae_steered, double align_steered);

void write_eval_csv(const std::filesystem::path& path, const EvalReport& report, const std::string& provenance = {});
EvalReport read_eval_csv(const std::filesystem::path& path);
void write_breakdown_csv(const std::filesystem::path& path, const std::vector<CountRow>& rows,
                         const std::string& provenance = {});
void write_breakdown_svg(const std::filesystem::path& path, const std::vector<CountRow>& baseline,
                         const std::vector<CountRow>& steered = {}, const std::string& provenance = {});

}  // namespace countsteer

#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "countsteer/model.hpp"
#include "countsteer/oracle.hpp"
#include "countsteer/sampler.hpp"
#include "countsteer/scene.hpp"
#include "countsteer/schedule.hpp"

namespace countsteer {

enum class Label : std::uint8_t { incorrect = 0, correct = 1, unlabeled = 255 };

std::string_view label_name(Label label);

struct HiddenStateRecord {
    std::uint32_t prompt_id = 0;
    std::uint64_t seed = 0;
    Label label = Label::unlabeled;
    std::uint16_t t = 0;  // denoising step index, 0 = noisiest
    std::uint16_t block = 0;
    std::vector<float> vector;

    bool operator==(const HiddenStateRecord&) const = default;
};

struct CorpusProvenance {
    std::string checkpoint_hash;
    std::string prompt_set_id;

    bool operator==(const CorpusProvenance&) const = default;
};

struct BalancedCorpus {
    std::vector<HiddenStateRecord> records;
    int k = 0;
    // Samples (not records) per label: [incorrect, correct].
    std::array<std::uint32_t, 2> counts{0, 0};
    CorpusProvenance provenance;

    bool operator==(const BalancedCorpus&) const = default;
};

// Recomputes k and per-label sample counts from the records.
void refresh_summary(BalancedCorpus& corpus);

// Throws unless the corpus is balanced, labeled, finite and covers every
// (t, block) with t < k for every sample.
void validate_balanced(const BalancedCorpus& corpus, int blocks = hooked_block_count);

// Spatial mean of the query tokens, accumulated in double.
std::vector<float> pool_queries(const QueryView& queries);

struct CaptureResult {
    Image image;
    std::vector<HiddenStateRecord> records;  // t-major, then block
};

// Samples with `options` while recording pooled conditional-branch queries
// for the first k steps. The interceptor only reads, so the image is the
// plain sample bit for bit.
CaptureResult capture_run(const ModelState& model, const NoiseSchedule& schedule, const PromptEntry& prompt,
                          std::uint64_t seed, int k, SampleOptions options = {});

Label label_sample(const Image& image, int target_count, const OracleConfig& cfg = {});

// One generation: image plus its unlabeled records.
using CaptureFn = std::function<CaptureResult(const PromptEntry& prompt, std::uint64_t seed)>;

struct BalanceOptions {
    int per_class = 200;
    std::uint64_t base_seed = 0;
    int reseed_budget = 20;  // attempts per prompt
    int k = 10;
    OracleConfig oracle;
    int threads = 1;
};

struct BalanceStats {
    int generations = 0;
    std::array<int, 2> generated{0, 0};  // labels seen, including discarded surplus
};

// Cycles round-robin over the prompts, attempt a = 0, 1, ... with seed
// mix_seed(base_seed, prompt_id, a), keeping a sample while its class is
// short. Results do not depend on `threads`. Throws BalanceUnreachable.
BalancedCorpus balance_corpus(const CaptureFn& generate, const PromptSet& prompts, const BalanceOptions& options,
                              BalanceStats* stats = nullptr);

BalancedCorpus balance_corpus(const ModelState& model, const NoiseSchedule& schedule, const PromptSet& prompts,
                              const BalanceOptions& options, const SampleOptions& sampling = {},
                              BalanceStats* stats = nullptr);

// Trace file "CSHS" v1. Provenance, plus any `extra` lines, goes to the
// .meta sidecar.
void write_trace(const std::filesystem::path& path, const BalancedCorpus& corpus, const std::string& extra = {});
BalancedCorpus read_trace(const std::filesystem::path& path);

}  // namespace countsteer

#include "countsteer/capture.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "countsteer/common.hpp"
#include "countsteer/error.hpp"

namespace countsteer {

namespace {

constexpr std::string_view trace_magic = "CSHS";
constexpr std::uint16_t trace_version = 1;
constexpr std::uint32_t max_record_dim = 1u << 20;

class RecordingInterceptor : public QueryInterceptor {
public:
    RecordingInterceptor(std::uint32_t prompt_id, std::uint64_t seed, int k)
        : prompt_id_(prompt_id), seed_(seed), k_(k) {}

    void intercept(const HookContext& ctx, QueryView queries) override {
        if (ctx.step >= k_ || ctx.branch != Branch::conditional) return;
        HiddenStateRecord r;
        r.prompt_id = prompt_id_;
        r.seed = seed_;
        r.t = static_cast<std::uint16_t>(ctx.step);
        r.block = static_cast<std::uint16_t>(ctx.site.block_id);
        r.vector = pool_queries(queries);
        records.push_back(std::move(r));
    }

    std::vector<HiddenStateRecord> records;

private:
    std::uint32_t prompt_id_;
    std::uint64_t seed_;
    int k_;
};

}  // namespace

std::string_view label_name(Label label) {
    switch (label) {
        case Label::incorrect: return "incorrect";
        case Label::correct: return "correct";
        case Label::unlabeled: return "unlabeled";
    }
    return "?";
}

void refresh_summary(BalancedCorpus& corpus) {
    int k = 0;
    corpus.counts = {0, 0};
    for (const auto& r : corpus.records) {
        k = std::max(k, r.t + 1);
        if (r.t == 0 && r.block == 0 && r.label != Label::unlabeled) {
            ++corpus.counts[static_cast<std::size_t>(r.label)];
        }
    }
    corpus.k = k;
}

void validate_balanced(const BalancedCorpus& corpus, int blocks) {
    if (corpus.records.empty()) throw InvalidArgument("corpus is empty");
    if (corpus.counts[0] != corpus.counts[1]) {
        throw InvalidArgument("corpus is unbalanced: " + std::to_string(corpus.counts[1]) + " correct vs " +
                              std::to_string(corpus.counts[0]) + " incorrect");
    }
    // Every sample must carry exactly the k * blocks sites.
    std::map<std::pair<std::uint32_t, std::uint64_t>, std::set<std::pair<int, int>>> sites;
    std::map<std::pair<std::uint32_t, std::uint64_t>, Label> labels;
    for (const auto& r : corpus.records) {
        if (r.label == Label::unlabeled) throw InvalidArgument("corpus contains unlabeled records");
        for (float v : r.vector) {
            if (!std::isfinite(v)) throw NonFiniteActivation("corpus contains non-finite values");
        }
        const auto key = std::make_pair(r.prompt_id, r.seed);
        auto [it, fresh] = labels.emplace(key, r.label);
        if (!fresh && it->second != r.label) throw InvalidArgument("sample carries two labels");
        if (r.t >= corpus.k || r.block >= blocks) throw InvalidArgument("record outside the (t, block) grid");
        if (!sites[key].emplace(r.t, r.block).second) throw InvalidArgument("duplicate (t, block) record");
    }
    for (const auto& [key, s] : sites) {
        if (s.size() != static_cast<std::size_t>(corpus.k) * blocks) {
            throw InvalidArgument("sample " + std::to_string(key.first) + "/" + std::to_string(key.second) +
                                  " misses sites");
        }
    }
}

std::vector<float> pool_queries(const QueryView& queries) {
    std::vector<double> acc(static_cast<std::size_t>(queries.dim), 0.0);
    for (int p = 0; p < queries.tokens; ++p) {
        const float* q = queries.token(p);
        for (int d = 0; d < queries.dim; ++d) acc[d] += q[d];
    }
    std::vector<float> out(acc.size());
    for (std::size_t d = 0; d < acc.size(); ++d) out[d] = static_cast<float>(acc[d] / queries.tokens);
    return out;
}

CaptureResult capture_run(const ModelState& model, const NoiseSchedule& schedule, const PromptEntry& prompt,
                          std::uint64_t seed, int k, SampleOptions options) {
    if (k < 0 || k > schedule.steps) throw InvalidArgument("capture horizon k must lie in [0, steps]");
    RecordingInterceptor rec(prompt.prompt_id, seed, k);
    options.seed = seed;
    options.interceptor = k > 0 ? &rec : nullptr;
    options.intercept_unconditional = false;
    CaptureResult out;
    out.image = sample(model, encode_condition(prompt.count, prompt.shape, true), schedule, options).image;
    out.records = std::move(rec.records);
    return out;
}

Label label_sample(const Image& image, int target_count, const OracleConfig& cfg) {
    return count_objects(image, cfg) == target_count ? Label::correct : Label::incorrect;
}

BalancedCorpus balance_corpus(const CaptureFn& generate, const PromptSet& prompts, const BalanceOptions& opt,
                              BalanceStats* stats) {
    if (opt.per_class < 1) throw InvalidArgument("per_class must be >= 1");
    if (opt.reseed_budget < 1) throw InvalidArgument("reseed_budget must be >= 1");
    if (prompts.entries.empty()) throw InvalidArgument("prompt set is empty");

    BalancedCorpus corpus;
    corpus.k = opt.k;
    BalanceStats local;
    BalanceStats& st = stats ? *stats : local;
    std::array<int, 2> tally{0, 0};
    const auto full = [&] { return tally[0] >= opt.per_class && tally[1] >= opt.per_class; };

    // Work list in acceptance order; generated in chunks of `threads`.
    const std::size_t n_prompts = prompts.entries.size();
    const std::size_t total = n_prompts * static_cast<std::size_t>(opt.reseed_budget);
    const std::size_t chunk = static_cast<std::size_t>(std::max(1, opt.threads));
    std::vector<std::pair<CaptureResult, Label>> results(chunk);
    for (std::size_t begin = 0; begin < total && !full(); begin += chunk) {
        const std::size_t n = std::min(chunk, total - begin);
        parallel_for(n, opt.threads, [&](std::size_t j) {
            const std::size_t w = begin + j;
            const PromptEntry& p = prompts.entries[w % n_prompts];
            const auto attempt = static_cast<std::uint64_t>(w / n_prompts);
            results[j].first = generate(p, mix_seed(opt.base_seed, p.prompt_id, attempt));
            results[j].second = label_sample(results[j].first.image, p.count, opt.oracle);
        });
        for (std::size_t j = 0; j < n && !full(); ++j) {
            auto& [res, label] = results[j];
            ++st.generations;
            ++st.generated[static_cast<std::size_t>(label)];
            int& slot = tally[static_cast<std::size_t>(label)];
            if (slot >= opt.per_class) continue;
            ++slot;
            for (auto& r : res.records) {
                r.label = label;
                corpus.records.push_back(std::move(r));
            }
        }
    }
    if (!full()) {
        throw BalanceUnreachable("reseed budget exhausted after " + std::to_string(st.generations) +
                                 " generations: " + std::to_string(tally[1]) + " correct, " +
                                 std::to_string(tally[0]) + " incorrect of " + std::to_string(opt.per_class) +
                                 " each");
    }
    corpus.counts = {static_cast<std::uint32_t>(tally[0]), static_cast<std::uint32_t>(tally[1])};
    return corpus;
}

BalancedCorpus balance_corpus(const ModelState& model, const NoiseSchedule& schedule, const PromptSet& prompts,
                              const BalanceOptions& options, const SampleOptions& sampling, BalanceStats* stats) {
    if (options.k < 0 || options.k > schedule.steps) throw InvalidArgument("capture horizon k must lie in [0, steps]");
    const CaptureFn fn = [&](const PromptEntry& p, std::uint64_t seed) {
        return capture_run(model, schedule, p, seed, options.k, sampling);
    };
    return balance_corpus(fn, prompts, options, stats);
}

void write_trace(const std::filesystem::path& path, const BalancedCorpus& corpus, const std::string& extra) {
    auto out = open_output(path);
    binio::write_magic(out, trace_magic);
    binio::write_u16(out, trace_version);
    binio::write_u32(out, static_cast<std::uint32_t>(corpus.records.size()));
    for (const auto& r : corpus.records) {
        binio::write_u32(out, r.prompt_id);
        binio::write_u64(out, r.seed);
        binio::write_u8(out, static_cast<std::uint8_t>(r.label));
        binio::write_u16(out, r.t);
        binio::write_u16(out, r.block);
        binio::write_u32(out, static_cast<std::uint32_t>(r.vector.size()));
        binio::write_f32s(out, r.vector);
    }
    out.flush();
    if (!out) throw IoError("failed writing trace " + path.string());

    std::string meta = "checkpoint_hash " + corpus.provenance.checkpoint_hash + "\nprompt_set_id " +
                       corpus.provenance.prompt_set_id + "\n";
    write_meta_sidecar(path, meta + extra);
}

BalancedCorpus read_trace(const std::filesystem::path& path) {
    auto in = open_input(path);
    binio::expect_magic(in, trace_magic);
    const std::uint16_t version = binio::read_u16(in, "version");
    if (version != trace_version) {
        throw FormatError("trace version " + std::to_string(version) + " unsupported (expected " +
                          std::to_string(trace_version) + ")");
    }
    const std::uint32_t count = binio::read_u32(in, "record count");
    BalancedCorpus corpus;
    for (std::uint32_t i = 0; i < count; ++i) {
        HiddenStateRecord r;
        r.prompt_id = binio::read_u32(in, "prompt_id");
        r.seed = binio::read_u64(in, "seed");
        const std::uint8_t label = binio::read_u8(in, "label");
        if (label != 0 && label != 1 && label != 255) throw FormatError("trace: invalid label " + std::to_string(label));
        r.label = static_cast<Label>(label);
        r.t = binio::read_u16(in, "t");
        r.block = binio::read_u16(in, "block");
        const std::uint32_t dim = binio::read_u32(in, "dim");
        if (dim > max_record_dim) throw FormatError("trace: implausible vector dim");
        r.vector.resize(dim);
        binio::read_f32s(in, r.vector, "vector");
        corpus.records.push_back(std::move(r));
    }
    binio::expect_eof(in);
    refresh_summary(corpus);

    std::istringstream meta(read_meta_sidecar(path));
    std::string line;
    while (std::getline(meta, line)) {
        const auto sp = line.find(' ');
        if (sp == std::string::npos) continue;
        const std::string key = line.substr(0, sp);
        if (key == "checkpoint_hash") corpus.provenance.checkpoint_hash = line.substr(sp + 1);
        if (key == "prompt_set_id") corpus.provenance.prompt_set_id = line.substr(sp + 1);
    }
    return corpus;
}

}  // namespace countsteer

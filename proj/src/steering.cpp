#include "countsteer/steering.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include "countsteer/common.hpp"
#include "countsteer/error.hpp"

namespace countsteer {

namespace {

constexpr std::string_view bank_magic = "CSBK";
constexpr std::uint16_t bank_version = 1;
constexpr std::uint32_t max_site_dim = 1u << 20;

double norm(std::span<const float> v) {
    double acc = 0.0;
    for (float x : v) acc += static_cast<double>(x) * x;
    return std::sqrt(acc);
}

class SteeringInterceptor : public QueryInterceptor {
public:
    SteeringInterceptor(const SteeringBank& bank, const SteeringConfig& cfg) : bank_(bank), cfg_(cfg) {}

    void intercept(const HookContext& ctx, QueryView queries) override {
        if (ctx.step >= cfg_.k) return;
        if (ctx.branch == Branch::unconditional && !cfg_.both_branches) return;
        const int block = ctx.site.block_id;
        if (!cfg_.enabled_blocks[static_cast<std::size_t>(block)]) return;
        const SteeringEntry& e = bank_.at(ctx.step, block);
        if (e.inert()) return;
        if (queries.dim != static_cast<int>(e.s.size())) throw BankMismatch("query dim differs from bank entry");
        const std::vector<float> h = pool_queries(queries);
        const double alpha = adaptive_alpha(e.s, e.mu1, h, cfg_.c);
        if (alpha == 0.0) return;
        for (int p = 0; p < queries.tokens; ++p) {
            float* q = queries.token(p);
            for (int d = 0; d < queries.dim; ++d) q[d] = static_cast<float>(q[d] + alpha * e.s[d]);
        }
    }

private:
    const SteeringBank& bank_;
    SteeringConfig cfg_;
};

}  // namespace

bool SteeringEntry::inert() const { return norm(s) < inert_norm; }

const SteeringEntry& SteeringBank::at(int t, int block) const {
    if (t < 0 || t >= k || block < 0 || block >= blocks) {
        throw BankMismatch("bank has no site (" + std::to_string(t) + ", " + std::to_string(block) + ")");
    }
    return entries[static_cast<std::size_t>(t) * blocks + block];
}

void validate(const SteeringConfig& cfg, int steps) {
    if (cfg.k < 0 || cfg.k > steps) throw InvalidArgument("steering k must lie in [0, " + std::to_string(steps) + "]");
    if (!(cfg.c >= 0.0) || !std::isfinite(cfg.c)) throw InvalidArgument("steering scale c must be finite and >= 0");
}

SteeringBank build_bank(const BalancedCorpus& corpus, double c, int blocks) {
    if (!(c >= 0.0) || !std::isfinite(c)) throw InvalidArgument("steering scale c must be finite and >= 0");
    const int k = corpus.k;
    std::vector<std::array<bool, 2>> present(static_cast<std::size_t>(k) * blocks, {false, false});
    for (const auto& r : corpus.records) {
        if (r.t < k && r.block < blocks && r.label != Label::unlabeled) {
            present[static_cast<std::size_t>(r.t) * blocks + r.block][static_cast<std::size_t>(r.label)] = true;
        }
    }
    for (std::size_t i = 0; i < present.size(); ++i) {
        if (!present[i][0] || !present[i][1]) {
            throw EmptyClassAtSite("site (" + std::to_string(i / blocks) + ", " + std::to_string(i % blocks) +
                                   ") lacks a class");
        }
    }
    validate_balanced(corpus, blocks);
    struct Acc {
        std::vector<double> sum[2];
        int n[2] = {0, 0};
    };
    std::vector<Acc> acc(static_cast<std::size_t>(k) * blocks);
    for (const auto& r : corpus.records) {
        Acc& a = acc[static_cast<std::size_t>(r.t) * blocks + r.block];
        const auto cls = static_cast<std::size_t>(r.label);
        auto& sum = a.sum[cls];
        if (sum.empty()) sum.assign(r.vector.size(), 0.0);
        if (sum.size() != r.vector.size()) throw ShapeMismatch("record dims differ within a site");
        for (std::size_t d = 0; d < sum.size(); ++d) sum[d] += r.vector[d];
        ++a.n[cls];
    }

    SteeringBank bank;
    bank.k = k;
    bank.blocks = blocks;
    bank.c = c;
    bank.samples = corpus.counts;
    for (int t = 0; t < k; ++t) {
        for (int b = 0; b < blocks; ++b) {
            const Acc& a = acc[static_cast<std::size_t>(t) * blocks + b];
            if (a.sum[0].size() != a.sum[1].size()) throw ShapeMismatch("class dims differ at a site");
            SteeringEntry e;
            e.t = t;
            e.block = b;
            const std::size_t dim = a.sum[1].size();
            e.mu1.resize(dim);
            e.mu0.resize(dim);
            e.s.resize(dim);
            for (std::size_t d = 0; d < dim; ++d) {
                e.mu1[d] = static_cast<float>(a.sum[1][d] / a.n[1]);
                e.mu0[d] = static_cast<float>(a.sum[0][d] / a.n[0]);
                e.s[d] = e.mu1[d] - e.mu0[d];
            }
            bank.entries.push_back(std::move(e));
        }
    }
    return bank;
}

double adaptive_alpha(std::span<const float> s, std::span<const float> mu1, std::span<const float> h, double c) {
    if (s.size() != mu1.size() || s.size() != h.size()) throw ShapeMismatch("adaptive_alpha: dims differ");
    double ss = 0.0, dd = 0.0, sd = 0.0;
    for (std::size_t i = 0; i < s.size(); ++i) {
        const double delta = static_cast<double>(mu1[i]) - h[i];
        ss += static_cast<double>(s[i]) * s[i];
        dd += delta * delta;
        sd += s[i] * delta;
    }
    if (dd == 0.0 || ss == 0.0) return 0.0;
    const double s_norm = std::sqrt(ss);
    const double delta_norm = std::sqrt(dd);
    const double cosine = sd / (s_norm * delta_norm);
    const double d = delta_norm / s_norm;
    return cosine * -std::expm1(-d) * c;
}

std::vector<float> apply_steering(std::span<const float> h, std::span<const float> s, double alpha) {
    if (h.size() != s.size()) throw ShapeMismatch("apply_steering: dims differ");
    std::vector<float> out(h.begin(), h.end());
    if (alpha == 0.0) return out;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<float>(h[i] + alpha * s[i]);
    return out;
}

std::unique_ptr<QueryInterceptor> make_interceptor(const SteeringBank& bank, const SteeringConfig& cfg,
                                                   const ModelConfig& model) {
    if (cfg.k > bank.k) {
        throw BankMismatch("bank covers " + std::to_string(bank.k) + " steps, steering asks for " +
                           std::to_string(cfg.k));
    }
    if (!(cfg.c >= 0.0)) throw InvalidArgument("steering scale c must be >= 0");
    if (cfg.k > 0) {
        if (bank.blocks != hooked_block_count) throw BankMismatch("bank block count differs from the model");
        for (const HookSite& site : hook_sites(model)) {
            for (int t = 0; t < cfg.k; ++t) {
                if (static_cast<int>(bank.at(t, site.block_id).s.size()) != site.query_dim) {
                    throw BankMismatch("bank dim differs from query dim at block " + std::string(site.name));
                }
            }
        }
    }
    return std::make_unique<SteeringInterceptor>(bank, cfg);
}

void write_bank(const std::filesystem::path& path, const SteeringBank& bank, const std::string& extra) {
    auto out = open_output(path);
    binio::write_magic(out, bank_magic);
    binio::write_u16(out, bank_version);
    binio::write_u16(out, static_cast<std::uint16_t>(bank.k));
    binio::write_u16(out, static_cast<std::uint16_t>(bank.blocks));
    binio::write_f64(out, bank.c);
    for (const auto& e : bank.entries) {
        binio::write_u16(out, static_cast<std::uint16_t>(e.t));
        binio::write_u16(out, static_cast<std::uint16_t>(e.block));
        binio::write_u32(out, static_cast<std::uint32_t>(e.s.size()));
        binio::write_f32s(out, e.mu1);
        binio::write_f32s(out, e.mu0);
        binio::write_f32s(out, e.s);
    }
    out.flush();
    if (!out) throw IoError("failed writing bank " + path.string());
    write_meta_sidecar(path, "samples_correct " + std::to_string(bank.samples[1]) + "\nsamples_incorrect " +
                                 std::to_string(bank.samples[0]) + "\n" + extra);
}

SteeringBank read_bank(const std::filesystem::path& path) {
    auto in = open_input(path);
    binio::expect_magic(in, bank_magic);
    const std::uint16_t version = binio::read_u16(in, "version");
    if (version != bank_version) {
        throw FormatError("bank version " + std::to_string(version) + " unsupported (expected " +
                          std::to_string(bank_version) + ")");
    }
    SteeringBank bank;
    bank.k = binio::read_u16(in, "k");
    bank.blocks = binio::read_u16(in, "block count");
    bank.c = binio::read_f64(in, "c");
    if (!std::isfinite(bank.c) || bank.c < 0.0) throw FormatError("bank: invalid scale c");
    for (int t = 0; t < bank.k; ++t) {
        for (int b = 0; b < bank.blocks; ++b) {
            SteeringEntry e;
            e.t = binio::read_u16(in, "t");
            e.block = binio::read_u16(in, "block");
            if (e.t != t || e.block != b) throw FormatError("bank: sites out of order");
            const std::uint32_t dim = binio::read_u32(in, "dim");
            if (dim > max_site_dim) throw FormatError("bank: implausible dim");
            for (auto* v : {&e.mu1, &e.mu0, &e.s}) {
                v->resize(dim);
                binio::read_f32s(in, *v, "site vector");
            }
            for (std::uint32_t d = 0; d < dim; ++d) {
                if (!std::isfinite(e.mu1[d]) || !std::isfinite(e.mu0[d]) || !std::isfinite(e.s[d])) {
                    throw FormatError("bank: non-finite values");
                }
                const double expect = static_cast<double>(e.mu1[d]) - e.mu0[d];
                const double tol = 1e-6 * std::max({1.0, std::abs(static_cast<double>(e.mu1[d])),
                                                    std::abs(static_cast<double>(e.mu0[d]))});
                if (std::abs(e.s[d] - expect) > tol) {
                    throw FormatError("bank: s != mu1 - mu0 at site (" + std::to_string(t) + ", " +
                                      std::to_string(b) + ")");
                }
            }
            bank.entries.push_back(std::move(e));
        }
    }
    binio::expect_eof(in);

    std::istringstream meta(read_meta_sidecar(path));
    std::string key;
    std::uint32_t value = 0;
    std::string line;
    while (std::getline(meta, line)) {
        std::istringstream ls(line);
        if (!(ls >> key >> value)) continue;
        if (key == "samples_correct") bank.samples[1] = value;
        if (key == "samples_incorrect") bank.samples[0] = value;
    }
    return bank;
}

}  // namespace countsteer

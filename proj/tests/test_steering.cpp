#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "countsteer/capture.hpp"
#include "countsteer/error.hpp"
#include "countsteer/steering.hpp"
#include "support.hpp"

using namespace countsteer;

namespace {

HiddenStateRecord rec(std::uint64_t seed, Label label, int t, int b, std::vector<float> v) {
    return {static_cast<std::uint32_t>(seed), seed, label, static_cast<std::uint16_t>(t),
            static_cast<std::uint16_t>(b), std::move(v)};
}

BalancedCorpus gaussian_corpus(std::uint64_t seed, int per_class, int k, int blocks, int dim, double offset) {
    Rng rng(seed);
    BalancedCorpus c;
    for (int s = 0; s < 2 * per_class; ++s) {
        const Label label = s % 2 ? Label::correct : Label::incorrect;
        for (int t = 0; t < k; ++t) {
            for (int b = 0; b < blocks; ++b) {
                auto v = testing::random_vector(rng, dim);
                if (label == Label::correct) v[0] += static_cast<float>(offset);
                c.records.push_back(rec(static_cast<std::uint64_t>(s), label, t, b, v));
            }
        }
    }
    refresh_summary(c);
    return c;
}

}  // namespace

TEST_CASE("build_bank on constant classes") {
    BalancedCorpus c;
    for (int s = 0; s < 4; ++s) {
        c.records.push_back(rec(s, s % 2 ? Label::correct : Label::incorrect, 0, 0,
                                s % 2 ? std::vector<float>{2, 0} : std::vector<float>{0, 0}));
    }
    refresh_summary(c);
    const SteeringBank bank = build_bank(c, 1.0, 1);
    CHECK(bank.k == 1);
    CHECK(bank.at(0, 0).mu1 == std::vector<float>{2, 0});
    CHECK(bank.at(0, 0).mu0 == std::vector<float>{0, 0});
    CHECK(bank.at(0, 0).s == std::vector<float>{2, 0});
    CHECK(bank.samples == std::array<std::uint32_t, 2>{2, 2});
}

TEST_CASE("build_bank means match a brute-force average") {
    const BalancedCorpus c = gaussian_corpus(3, 25, 2, 3, 6, 1.0);
    const SteeringBank bank = build_bank(c);
    for (int t = 0; t < 2; ++t) {
        for (int b = 0; b < 3; ++b) {
            std::vector<double> m1(6, 0.0), m0(6, 0.0);
            for (const auto& r : c.records) {
                if (r.t != t || r.block != b) continue;
                auto& m = r.label == Label::correct ? m1 : m0;
                for (int d = 0; d < 6; ++d) m[d] += r.vector[d] / 25.0;
            }
            const auto& e = bank.at(t, b);
            for (int d = 0; d < 6; ++d) {
                CHECK(std::abs(e.mu1[d] - m1[d]) <= 1e-6);
                CHECK(std::abs(e.mu0[d] - m0[d]) <= 1e-6);
                CHECK(e.s[d] == e.mu1[d] - e.mu0[d]);
            }
        }
    }
}

TEST_CASE("identical class distributions make a site inert") {
    BalancedCorpus c;
    c.records = {rec(0, Label::correct, 0, 0, {1, 1}), rec(1, Label::incorrect, 0, 0, {1, 1})};
    refresh_summary(c);
    const SteeringBank bank = build_bank(c, 1.0, 1);
    CHECK(bank.at(0, 0).inert());
}

TEST_CASE("a site without one of the classes is an error") {
    BalancedCorpus c;
    c.records = {rec(0, Label::correct, 0, 0, {1}), rec(1, Label::incorrect, 0, 0, {0}),
                 rec(0, Label::correct, 1, 0, {1})};
    refresh_summary(c);
    CHECK_THROWS_AS(build_bank(c, 1.0, 1), EmptyClassAtSite);

    // Both classes everywhere, but a sample misses a site.
    c.records.push_back(rec(2, Label::incorrect, 1, 0, {0}));
    refresh_summary(c);
    CHECK_THROWS_AS(build_bank(c, 1.0, 1), InvalidArgument);
}

TEST_CASE("adaptive_alpha examples") {
    const std::vector<float> s{1, 0}, mu1{2, 0};
    CHECK(adaptive_alpha(s, mu1, std::vector<float>{2, 0}, 1.0) == 0.0);
    CHECK(adaptive_alpha(s, mu1, std::vector<float>{0, 0}, 100.0) == doctest::Approx(86.466).epsilon(1e-4));
    CHECK(adaptive_alpha(s, mu1, std::vector<float>{4, 0}, 1.0) == doctest::Approx(-0.8647).epsilon(1e-4));
    CHECK(adaptive_alpha(s, mu1, std::vector<float>{0, 0}, 0.0) == 0.0);
}

TEST_CASE("apply_steering examples") {
    const std::vector<float> h{0, 0}, s{1, 0};
    CHECK(apply_steering(h, s, 0.0) == h);
    CHECK(apply_steering(h, s, 0.5) == std::vector<float>{0.5f, 0.0f});
    CHECK_THROWS_AS(apply_steering(h, std::vector<float>{1}, 0.5), ShapeMismatch);

    const std::vector<float> mu1{2, 0}, s2{2, 0};
    const double a = adaptive_alpha(s2, mu1, h, 1.0);
    CHECK(a == doctest::Approx(0.6321).epsilon(1e-4));
    const auto h2 = apply_steering(h, s2, a);
    CHECK(h2[0] == doctest::Approx(1.264).epsilon(1e-3));
    CHECK(std::abs(mu1[0] - h2[0]) == doctest::Approx(0.736).epsilon(1e-3));
}

TEST_CASE("scaling covariance: alpha is invariant, the update scales") {
    Rng rng(4);
    for (int trial = 0; trial < 50; ++trial) {
        const auto s = testing::random_vector(rng, 7);
        const auto mu1 = testing::random_vector(rng, 7);
        const auto h = testing::random_vector(rng, 7);
        const float lambda = 0.5f + static_cast<float>(uniform01(rng)) * 4.0f;
        auto scaled = [&](std::vector<float> v) {
            for (float& x : v) x *= lambda;
            return v;
        };
        const double a = adaptive_alpha(s, mu1, h, 2.0);
        const double b = adaptive_alpha(scaled(s), scaled(mu1), scaled(h), 2.0);
        CHECK(a == doctest::Approx(b).epsilon(1e-5));
        const auto h1 = apply_steering(h, s, a);
        const auto hl = apply_steering(scaled(h), scaled(s), b);
        for (int d = 0; d < 7; ++d) CHECK(hl[d] == doctest::Approx(lambda * h1[d]).epsilon(1e-4));
    }
}

TEST_CASE("distance term: closer states get smaller steps at fixed direction") {
    const std::vector<float> s{1, 0}, mu1{0, 0};
    const double near = adaptive_alpha(s, mu1, std::vector<float>{-0.5f, 0}, 1.0);
    const double far = adaptive_alpha(s, mu1, std::vector<float>{-3.0f, 0}, 1.0);
    CHECK(near > 0.0);
    CHECK(near < far);
    CHECK(far < 1.0);
}

TEST_CASE("bank round trip and corruption") {
    testing::TempDir dir("bank");
    const SteeringBank bank = build_bank(gaussian_corpus(9, 5, 3, 3, 4, 2.0), 2.5);
    write_bank(dir / "b.csbk", bank);
    CHECK(read_bank(dir / "b.csbk") == bank);

    const auto bytes = testing::read_bytes(dir / "b.csbk");
    // Flip one byte inside the first stored s vector: header is
    // 4 + 2 + 2 + 2 + 8, then t, b, dim and 2 * dim floats.
    auto tampered = bytes;
    const std::size_t s_offset = 18 + 2 + 2 + 4 + 2 * 4 * 4;
    tampered[s_offset + 1] ^= 0x40;
    testing::write_bytes(dir / "t.csbk", tampered);
    std::filesystem::copy_file(dir / "b.csbk.meta", dir / "t.csbk.meta");
    CHECK_THROWS_AS(read_bank(dir / "t.csbk"), FormatError);

    auto version = bytes;
    version[4] = 9;
    testing::write_bytes(dir / "v.csbk", version);
    try {
        read_bank(dir / "v.csbk");
        FAIL("expected FormatError");
    } catch (const FormatError& e) {
        const std::string what = e.what();
        CHECK(what.find('9') != std::string::npos);
        CHECK(what.find('1') != std::string::npos);
    }
}

TEST_CASE("interceptor validation") {
    const ModelConfig cfg = testing::small_config();
    const SteeringBank bank = build_bank(gaussian_corpus(1, 3, 4, 3, cfg.query_dim, 1.0));
    SteeringConfig sc;
    sc.k = 5;
    CHECK_THROWS_AS(make_interceptor(bank, sc, cfg), BankMismatch);
    sc.k = 4;
    CHECK_NOTHROW(make_interceptor(bank, sc, cfg));
    ModelConfig wide = cfg;
    wide.query_dim = cfg.query_dim + 1;
    CHECK_THROWS_AS(make_interceptor(bank, sc, wide), BankMismatch);
    sc.c = -1.0;
    CHECK_THROWS_AS(validate(sc, 50), InvalidArgument);
    sc.c = 1.0;
    sc.k = 51;
    CHECK_THROWS_AS(validate(sc, 50), InvalidArgument);
}

TEST_CASE("steering only touches the configured steps, branch and blocks") {
    const ModelConfig cfg = testing::small_config();
    const ModelState m = ModelState::initialize(cfg, 2);
    const SteeringBank bank = build_bank(gaussian_corpus(5, 4, 10, 3, cfg.query_dim, 3.0));
    Rng rng(1);
    const auto x = testing::random_vector(rng, 32 * 32);
    const ConditionTokens cond = encode_condition(2, Shape::disk);
    const auto base = predict_noise(m, x, 9, cond);

    SteeringConfig sc;
    sc.k = 3;
    sc.c = 5.0;
    auto steer = make_interceptor(bank, sc, cfg);
    CHECK(predict_noise(m, x, 9, cond, {.interceptor = steer.get(), .step = 2}) != base);
    CHECK(predict_noise(m, x, 9, cond, {.interceptor = steer.get(), .step = 3}) == base);
    CHECK(predict_noise(m, x, 9, cond, {.interceptor = steer.get(), .step = 0, .branch = Branch::unconditional}) ==
          base);
    sc.enabled_blocks = {false, false, false};
    auto off = make_interceptor(bank, sc, cfg);
    CHECK(predict_noise(m, x, 9, cond, {.interceptor = off.get(), .step = 0}) == base);
    sc.enabled_blocks = {true, true, true};
    sc.both_branches = true;
    auto both = make_interceptor(bank, sc, cfg);
    CHECK(predict_noise(m, x, 9, cond, {.interceptor = both.get(), .step = 0, .branch = Branch::unconditional}) !=
          base);
}

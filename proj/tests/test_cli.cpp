#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <sstream>

#include "countsteer/cli.hpp"
#include "countsteer/config.hpp"
#include "countsteer/error.hpp"
#include "countsteer/eval.hpp"
#include "support.hpp"

using namespace countsteer;

namespace {

struct Result {
    int code = 0;
    std::string out, err;
};

Result cli(std::vector<std::string> args) {
    args.insert(args.begin(), "countsteer");
    std::ostringstream out, err;
    const int code = run(args, out, err);
    return {code, out.str(), err.str()};
}

// Tiny but complete pipeline settings.
std::vector<std::string> tiny(const std::filesystem::path& out) {
    return {"--out", out.string(), "--prompts-per-cell", "4", "--train-scenes", "32", "--steps", "20",
            "--batch", "4", "--widths", "4,8,8,8,4", "--time-dim", "8", "--time-hidden", "16",
            "--token-dim", "8", "--query-dim", "8", "--diffusion-steps", "12", "--schedule", "linear", "--k", "4"};
}

std::vector<std::string> cat(std::vector<std::string> a, const std::vector<std::string>& b) {
    a.insert(a.end(), b.begin(), b.end());
    return a;
}

std::string slurp(const std::filesystem::path& p) {
    const auto b = testing::read_bytes(p);
    return {b.begin(), b.end()};
}

}  // namespace

TEST_CASE("config text round-trips and hashes stably") {
    RunConfig a;
    set_config_value(a, "k", "7");
    set_config_value(a, "c", "0.3");
    set_config_value(a, "steer_blocks", "0,2");
    set_config_value(a, "calibrate_grid", "1,2.5");
    set_config_value(a, "oracle_connectivity", "8");
    RunConfig preset;
    set_config_value(preset, "c", "reference");
    CHECK(preset.c == 100.0);

    RunConfig b;
    parse_config_text(b, config_text(a));
    CHECK(config_text(b) == config_text(a));
    CHECK(config_hash(b) == config_hash(a));
    CHECK(config_hash(a) != config_hash(RunConfig{}));
    CHECK(get_config_value(a, "c") == "0.3");
    CHECK(steering_config(a).enabled_blocks == std::array<bool, 3>{true, false, true});
    CHECK(steering_config(a).k == 7);
}

TEST_CASE("config errors name the key") {
    RunConfig c;
    try {
        set_config_value(c, "bogus_key", "1");
        FAIL("expected InvalidArgument");
    } catch (const InvalidArgument& e) {
        CHECK(std::string(e.what()).find("bogus_key") != std::string::npos);
    }
    CHECK_THROWS_AS(set_config_value(c, "k", "ten"), InvalidArgument);
    CHECK_THROWS_AS(set_config_value(c, "c", "nan"), InvalidArgument);
    CHECK_THROWS_AS(parse_config_text(c, "k 3\n"), InvalidArgument);
    std::vector<std::string> seen;
    parse_config_text(c, "# comment\n\nk = 3  # trailing\nguidance_scale=2\n", "t", &seen);
    CHECK(c.k == 3);
    CHECK(c.guidance_scale == 2.0);
    CHECK(seen == std::vector<std::string>{"k", "guidance_scale"});
    RunConfig bad;
    bad.k = 60;
    CHECK_THROWS_AS(validate(bad), InvalidArgument);
    CHECK(make_schedule(RunConfig{}).steps == 50);
}

TEST_CASE("usage errors exit 1 with usage text") {
    const Result unknown = cli({"eval", "--no-such-flag"});
    CHECK(unknown.code == 1);
    CHECK(unknown.err.find("Usage") != std::string::npos);
    CHECK(cli({}).code == 1);
    CHECK(cli({"frobnicate"}).code == 1);
    CHECK(cli({"train", "--k", "-1"}).code == 1);
    CHECK(cli({"--help"}).code == 0);
}

TEST_CASE("missing and malformed inputs exit 2") {
    testing::TempDir dir("cli_io");
    CHECK(cli({"build-bank", "--out", dir.path().string()}).code == 2);
    std::ofstream(dir / "corpus.cshs") << "not a trace";
    CHECK(cli({"build-bank", "--out", dir.path().string()}).code == 2);
}

TEST_CASE("divergent training exits 3") {
    testing::TempDir dir("cli_nan");
    const Result r = cli(cat(tiny(dir.path()), {"train", "--learning-rate", "1e30", "--steps", "30"}));
    CHECK(r.code == 3);
}

TEST_CASE("pipeline subcommands, provenance and determinism") {
    testing::TempDir dir("cli_pipe");
    const auto base = tiny(dir.path());
    REQUIRE(cli(cat(base, {"gen-data", "--previews", "2"})).code == 0);
    REQUIRE(cli(cat(base, {"train"})).code == 0);

    // Capture with an impossible budget is a feasibility failure.
    CHECK(cli(cat(base, {"capture", "--per-class", "500", "--reseed-budget", "1"})).code == 4);

    // Balanced capture needs both labels; an untrained model almost never
    // draws the right count, so use a bank built from a hand-made corpus.
    BalancedCorpus corpus;
    Rng rng(3);
    for (int s = 0; s < 4; ++s) {
        for (int t = 0; t < 4; ++t) {
            for (int b = 0; b < 3; ++b) {
                corpus.records.push_back({static_cast<std::uint32_t>(s), static_cast<std::uint64_t>(s),
                                          s % 2 ? Label::correct : Label::incorrect, static_cast<std::uint16_t>(t),
                                          static_cast<std::uint16_t>(b), testing::random_vector(rng, 8)});
            }
        }
    }
    refresh_summary(corpus);
    write_trace(dir / "corpus.cshs", corpus);
    REQUIRE(cli(cat(base, {"build-bank"})).code == 0);
    const std::string bank = (dir / "bank.csbk").string();

    // k = 0 with a bank reproduces the unsteered images.
    REQUIRE(cli(cat(base, {"sample", "--n", "2", "--count", "2"})).code == 0);
    const auto plain = testing::read_bytes(dir / "samples" / "sample_1.pgm");
    REQUIRE(cli(cat(base, {"sample", "--n", "2", "--count", "2", "--bank", bank, "--k", "0"})).code == 0);
    CHECK(testing::read_bytes(dir / "samples" / "sample_1.pgm") == plain);
    REQUIRE(cli(cat(base, {"sample", "--n", "2", "--count", "2", "--bank", bank, "--c", "50"})).code == 0);
    CHECK(testing::read_bytes(dir / "samples" / "sample_1.pgm") != plain);
    REQUIRE(cli(cat(base, {"sample", "--n", "1", "--trajectory"})).code == 0);
    CHECK(std::filesystem::exists(dir / "samples" / "sample_0_step11.pgm"));

    REQUIRE(cli(cat(base, {"calibrate-c", "--calibrate-grid", "0.5,2"})).code == 0);
    const Result eval = cli(cat(base, {"eval", "--bank", (dir / "bank_calibrated.csbk").string()}));
    REQUIRE(eval.code == 0);
    CHECK(eval.out.find("Baseline + CountSteer") != std::string::npos);
    const auto steered_first = testing::read_bytes(dir / "eval_steered.csv");
    REQUIRE(cli(cat(base, {"eval", "--bank", (dir / "bank_calibrated.csbk").string()})).code == 0);
    CHECK(testing::read_bytes(dir / "eval_steered.csv") == steered_first);

    const Result report = cli(cat(base, {"report"}));
    REQUIRE(report.code == 0);
    const EvalReport b = read_eval_csv(dir / "eval_baseline.csv");
    int rows = 0, categorized = 0;
    std::istringstream flips(slurp(dir / "flips.csv"));
    for (std::string line; std::getline(flips, line);) {
        if (line.empty() || line[0] == '#' || line.starts_with("prompt_id")) continue;
        ++rows;
        for (const char* name : {",fixed", ",broken", ",unchanged-correct", ",unchanged-incorrect"}) {
            categorized += line.ends_with(name);
        }
    }
    CHECK(rows == static_cast<int>(b.samples.size()));
    CHECK(categorized == rows);

    REQUIRE(cli(cat(base, {"analyze"})).code == 0);
    CHECK(std::filesystem::exists(dir / "analysis" / "separability.csv"));

    // Every artifact carries the config hash, inline or in a sidecar.
    for (const auto& entry : std::filesystem::recursive_directory_iterator(dir.path())) {
        if (!entry.is_regular_file()) continue;
        const auto& p = entry.path();
        const std::string ext = p.extension().string();
        if (p.filename() == "corpus.cshs" || p.filename() == "corpus.cshs.meta") continue;  // hand-made above
        if (ext == ".csck" || ext == ".csbk" || ext == ".cshs") {
            CHECK_MESSAGE(slurp(p.string() + ".meta").find("config_hash") != std::string::npos, p.string());
        } else if (ext == ".pgm") {
            if (p.filename().string().find("_step") != std::string::npos) continue;
            auto txt = p;
            txt.replace_extension(".txt");
            CHECK_MESSAGE(slurp(txt).find("config_hash") != std::string::npos, p.string());
        } else if (ext != ".meta" && ext != ".txt") {
            CHECK_MESSAGE(slurp(p).find("config_hash") != std::string::npos, p.string());
        }
    }
}

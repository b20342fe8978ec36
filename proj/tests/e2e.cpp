// Desk-scale end-to-end experiment with the default configuration, run twice
// to check that every artifact reproduces bit for bit.
//
//   e2e [out_dir]

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "countsteer/cli.hpp"
#include "countsteer/common.hpp"
#include "countsteer/eval.hpp"

namespace fs = std::filesystem;
using namespace countsteer;

namespace {

struct PipelineRun {
    bool ok = true;
    std::string failure;
    double train_seconds = 0.0;
    double total_seconds = 0.0;
    std::map<std::string, std::string> hashes;  // relative path -> hash
};

PipelineRun run_pipeline(const fs::path& out) {
    const std::vector<std::string> common{"countsteer", "--out", out.string(), "--threads", "1"};
    const std::vector<std::vector<std::string>> stages{
        {"gen-data"},
        {"train"},
        {"capture", "--per-class", "100"},
        {"build-bank"},
        {"calibrate-c"},
        {"eval", "--bank", (out / "bank_calibrated.csbk").string()},
        {"report"},
        {"analyze", "--bank", (out / "bank_calibrated.csbk").string()},
    };
    PipelineRun run;
    fs::remove_all(out);
    const auto start = std::chrono::steady_clock::now();
    for (const auto& stage : stages) {
        std::vector<std::string> args = common;
        args.insert(args.end(), stage.begin(), stage.end());
        std::ostringstream log;
        const auto t0 = std::chrono::steady_clock::now();
        const int code = countsteer::run(args, log, std::cerr);
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        std::printf("  %-12s exit %d  %.1fs\n", stage.front().c_str(), code, secs);
        std::fflush(stdout);
        if (stage.front() == "train") run.train_seconds = secs;
        if (code != 0) {
            run.ok = false;
            run.failure = stage.front() + " exited " + std::to_string(code) + ":\n" + log.str();
            return run;
        }
    }
    run.total_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    for (const auto& entry : fs::recursive_directory_iterator(out)) {
        if (!entry.is_regular_file()) continue;
        run.hashes[fs::relative(entry.path(), out).generic_string()] = hex64(hash_file(entry.path()));
    }
    return run;
}

void line(bool pass, int id, const std::string& text) {
    std::printf("%s criterion %d: %s\n", pass ? "PASS" : "FAIL", id, text.c_str());
    std::fflush(stdout);
}

}  // namespace

int main(int argc, char** argv) {
    const fs::path out = argc > 1 ? fs::path(argv[1]) : fs::temp_directory_path() / "countsteer_e2e";

    std::printf("first run in %s\n", out.string().c_str());
    const PipelineRun first = run_pipeline(out);
    if (!first.ok) {
        std::cerr << first.failure;
        line(false, 9, "pipeline failed");
        line(false, 10, "pipeline failed");
        return 1;
    }

    const EvalReport baseline = read_eval_csv(out / "eval_baseline.csv");
    const EvalReport steered = read_eval_csv(out / "eval_steered.csv");
    const PairedReport paired = compare_arms(baseline, steered);
    const bool paired_emitted = fs::exists(out / "flips.csv") && fs::exists(out / "summary.txt");
    const std::size_t n = baseline.samples.size();
    const bool mae_ok = steered.mae <= baseline.mae;
    const bool acc_ok = steered.acc >= baseline.acc - 0.01;
    const bool time_ok = first.train_seconds <= 30.0 * 60.0;
    char buf[512];
    std::snprintf(buf, sizeof buf,
                  "n=%zu paired; baseline ACC %.3f MAE %.3f; steered ACC %.3f MAE %.3f (delta ACC %+.1f%%p, delta MAE "
                  "%+.3f); fixed %d broken %d; training %.0fs",
                  n, baseline.acc, baseline.mae, steered.acc, steered.mae, 100.0 * (steered.acc - baseline.acc),
                  steered.mae - baseline.mae, paired.fixed, paired.broken, first.train_seconds);
    const bool pass9 = n >= 200 && mae_ok && acc_ok && time_ok && paired_emitted;
    std::string detail = buf;
    if (n < 200) detail += "; fewer than 200 paired samples";
    if (!mae_ok) detail += "; steered MAE above baseline";
    if (!acc_ok) detail += "; steered ACC more than 0.01 below baseline";
    if (!time_ok) detail += "; training over 30 min";
    if (!paired_emitted) detail += "; paired breakdown missing";
    line(pass9, 9, detail);

    std::printf("second run in %s\n", out.string().c_str());
    const PipelineRun second = run_pipeline(out);
    if (!second.ok) {
        std::cerr << second.failure;
        line(false, 10, "second run failed");
        return 1;
    }
    std::vector<std::string> differing;
    for (const auto& [path, hash] : first.hashes) {
        const auto it = second.hashes.find(path);
        if (it == second.hashes.end() || it->second != hash) differing.push_back(path);
    }
    for (const auto& [path, hash] : second.hashes) {
        if (!first.hashes.contains(path)) differing.push_back(path);
    }
    std::string d10 = std::to_string(first.hashes.size()) + " files, " + std::to_string(differing.size()) + " differ";
    for (std::size_t i = 0; i < std::min<std::size_t>(differing.size(), 5); ++i) d10 += " " + differing[i];
    line(differing.empty(), 10, d10);

    return pass9 && differing.empty() ? 0 : 1;
}

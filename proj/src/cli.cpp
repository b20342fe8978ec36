#include "countsteer/cli.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <sstream>

#include "countsteer/analysis.hpp"
#include "countsteer/capture.hpp"
#include "countsteer/common.hpp"
#include "countsteer/config.hpp"
#include "countsteer/error.hpp"
#include "countsteer/eval.hpp"
#include "countsteer/model.hpp"
#include "countsteer/oracle.hpp"
#include "countsteer/sampler.hpp"
#include "countsteer/scene.hpp"
#include "countsteer/steering.hpp"
#include "countsteer/train.hpp"

namespace countsteer {

namespace fs = std::filesystem;

namespace {

const std::vector<int> prompt_counts{1, 2, 3, 4};
const std::vector<Shape> prompt_shapes(all_shapes.begin(), all_shapes.end());

// Stream tags for seeds derived from the run seed.
enum SeedStream : std::uint64_t {
    seed_prompts = 1,
    seed_training_set,
    seed_init,
    seed_train,
    seed_capture,
    seed_calibrate,
    seed_eval,
    seed_sample,
    seed_preview,
};

std::uint64_t derived_seed(const RunConfig& cfg, SeedStream stream) { return mix_seed(cfg.seed, stream); }

std::string fmt(const char* pattern, double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, pattern, v);
    return buf;
}

struct Context {
    RunConfig cfg;
    std::vector<std::string> explicit_keys;
    std::ostream& out;

    fs::path out_dir() const { return cfg.out; }
    fs::path artifact(const std::string& name) const { return out_dir() / name; }

    bool is_explicit(std::string_view key) const {
        return std::find(explicit_keys.begin(), explicit_keys.end(), key) != explicit_keys.end();
    }

    // Command, config hash, input hashes, then the resolved config.
    std::string provenance(const std::string& command,
                           const std::vector<std::pair<std::string, fs::path>>& inputs = {}) const {
        std::string p = "countsteer " + command + "\nconfig_hash " + config_hash(cfg) + "\n";
        for (const auto& [label, path] : inputs) {
            p += "input " + label + " " + path.filename().string() + " " + hex64(hash_file(path)) + "\n";
        }
        std::istringstream lines(config_text(cfg));
        for (std::string line; std::getline(lines, line);) p += "config " + line + "\n";
        return p;
    }
};

fs::path resolve(const Context& ctx, const std::string& given, const std::string& fallback) {
    return given.empty() ? ctx.artifact(fallback) : fs::path(given);
}

void ensure_dir(const fs::path& dir) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw IoError("cannot create directory " + dir.string() + ": " + ec.message());
}

void write_text(const fs::path& path, const std::string& body, const std::string& provenance) {
    auto f = open_output(path, false);
    std::istringstream lines(provenance);
    for (std::string line; std::getline(lines, line);) f << "# " << line << '\n';
    f << body;
    if (!f) throw IoError("failed writing " + path.string());
}

void write_image_sidecar(const fs::path& pgm, std::uint32_t prompt_id, int count, Shape shape, std::uint64_t seed,
                         const std::string& provenance) {
    fs::path txt = pgm;
    txt.replace_extension(".txt");
    write_text(txt,
               std::to_string(prompt_id) + " " + std::to_string(count) + " " + std::string(shape_name(shape)) + " " +
                   std::to_string(seed) + "\n",
               provenance);
}

SampleOptions sampling_options(const RunConfig& cfg) {
    SampleOptions so;
    so.guidance_scale = cfg.guidance_scale;
    return so;
}

EvalOptions eval_options(const RunConfig& cfg, std::uint64_t base_seed, int seeds_per_prompt) {
    EvalOptions eo;
    eo.seeds_per_prompt = seeds_per_prompt;
    eo.base_seed = base_seed;
    eo.guidance_scale = cfg.guidance_scale;
    eo.oracle = cfg.oracle;
    eo.threads = cfg.threads;
    eo.limit = cfg.eval_limit;
    return eo;
}

// Loads a bank; unless c was set explicitly, the bank's own c is adopted.
SteeringBank load_bank(Context& ctx, const fs::path& path) {
    SteeringBank bank = read_bank(path);
    if (ctx.is_explicit("c")) {
        bank.c = ctx.cfg.c;
    } else {
        ctx.cfg.c = bank.c;
    }
    return bank;
}

// ---------------------------------------------------------------------------
// Subcommands
// ---------------------------------------------------------------------------

struct Paths {
    std::string checkpoint, prompts, construction, corpus, bank, baseline, steered;
};

struct SampleArgs {
    int count = 3;
    std::string shape = "disk";
    int n = 4;
    bool trajectory = false;
};

int cmd_gen_data(Context& ctx, int previews) {
    const RunConfig& cfg = ctx.cfg;
    ensure_dir(ctx.out_dir());
    auto [construction, evaluation] = generate_prompt_set(prompt_counts, prompt_shapes, cfg.prompts_per_cell,
                                                          derived_seed(cfg, seed_prompts), cfg.split_ratio);
    check_disjoint(construction, evaluation);
    const std::string prov = ctx.provenance("gen-data");
    write_prompt_set(ctx.artifact("construction.pset"), construction, prov);
    write_prompt_set(ctx.artifact("evaluation.pset"), evaluation, prov);

    const int n_previews = std::min<int>(previews, static_cast<int>(construction.entries.size()));
    if (n_previews > 0) ensure_dir(ctx.artifact("previews"));
    for (int i = 0; i < n_previews; ++i) {
        const PromptEntry& p = construction.entries[static_cast<std::size_t>(i)];
        SceneSpec spec;
        spec.count = p.count;
        spec.shape = p.shape;
        spec.canvas = cfg.model.canvas;
        spec.seed = mix_seed(derived_seed(cfg, seed_preview), p.prompt_id);
        const fs::path pgm = ctx.artifact("previews") / ("prompt_" + std::to_string(p.prompt_id) + ".pgm");
        write_pgm(pgm, render(generate_scene(spec)));
        write_image_sidecar(pgm, p.prompt_id, p.count, p.shape, spec.seed, prov);
    }
    ctx.out << "prompts: " << construction.entries.size() << " construction, " << evaluation.entries.size()
            << " evaluation (disjoint)\n"
            << "previews: " << n_previews << "\n"
            << "wrote " << ctx.artifact("construction.pset").string() << ", "
            << ctx.artifact("evaluation.pset").string() << "\n";
    return 0;
}

int cmd_train(Context& ctx) {
    const RunConfig& cfg = ctx.cfg;
    ensure_dir(ctx.out_dir());
    const NoiseSchedule schedule = make_schedule(cfg);
    const auto data = make_training_set(prompt_counts, prompt_shapes, cfg.train_scenes,
                                        derived_seed(cfg, seed_training_set), SceneSpec{.canvas = cfg.model.canvas});
    TrainHyper hyper = cfg.train;
    hyper.seed = derived_seed(cfg, seed_train);
    ModelState init = ModelState::initialize(cfg.model, derived_seed(cfg, seed_init));
    ctx.out << "training " << init.parameter_count() << " parameters for " << hyper.steps << " steps on "
            << data.size() << " scenes\n";
    const int every = std::max(1, hyper.steps / 20);
    double window = 0.0;
    int in_window = 0;
    TrainResult result = train(std::move(init), data, schedule, hyper, [&](int step, double loss) {
        window += loss;
        ++in_window;
        if (step % every == 0 || step == hyper.steps) {
            ctx.out << "step " << step << " loss " << fmt("%.5f", window / in_window) << "\n";
            ctx.out.flush();
            window = 0.0;
            in_window = 0;
        }
    });
    const std::string prov = ctx.provenance("train");
    const fs::path ckpt = ctx.artifact("model.csck");
    write_checkpoint(ckpt, result.model);
    write_meta_sidecar(ckpt, prov);
    std::string curve = "step,loss\n";
    for (std::size_t i = 0; i < result.loss_curve.size(); ++i) {
        curve += std::to_string(i + 1) + "," + fmt("%.9g", result.loss_curve[i]) + "\n";
    }
    write_text(ctx.artifact("loss.csv"), curve, prov);
    ctx.out << "wrote " << ckpt.string() << "\n";
    return 0;
}

int cmd_capture(Context& ctx, const Paths& paths) {
    const RunConfig& cfg = ctx.cfg;
    const fs::path ckpt = resolve(ctx, paths.checkpoint, "model.csck");
    const fs::path prompts_path = resolve(ctx, paths.prompts, "construction.pset");
    const ModelState model = read_checkpoint(ckpt);
    const PromptSet prompts = read_prompt_set(prompts_path);
    if (prompts.split != Split::construction) throw InvalidArgument("capture needs the construction prompt set");
    const PromptSet fit = split_holdout(prompts, cfg.calibrate_holdout).first;
    const NoiseSchedule schedule = make_schedule(cfg);

    BalanceOptions bo;
    bo.per_class = cfg.per_class;
    bo.base_seed = derived_seed(cfg, seed_capture);
    bo.reseed_budget = cfg.reseed_budget;
    bo.k = cfg.k;
    bo.oracle = cfg.oracle;
    bo.threads = cfg.threads;
    BalanceStats stats;
    BalancedCorpus corpus = balance_corpus(model, schedule, fit, bo, sampling_options(cfg), &stats);
    corpus.provenance.checkpoint_hash = hex64(hash_file(ckpt));
    corpus.provenance.prompt_set_id = hex64(hash_file(prompts_path));

    ensure_dir(ctx.out_dir());
    const fs::path trace = ctx.artifact("corpus.cshs");
    write_trace(trace, corpus, ctx.provenance("capture", {{"checkpoint", ckpt}, {"prompts", prompts_path}}));
    ctx.out << "capture: " << stats.generations << " generations over " << fit.entries.size()
            << " prompts, labels seen correct=" << stats.generated[1] << " incorrect=" << stats.generated[0]
            << "\nbalanced corpus: " << corpus.counts[1] << " correct / " << corpus.counts[0] << " incorrect, k=" << corpus.k
            << ", " << corpus.records.size() << " records\nwrote " << trace.string() << "\n";
    return 0;
}

int cmd_build_bank(Context& ctx, const Paths& paths) {
    const fs::path trace = resolve(ctx, paths.corpus, "corpus.cshs");
    const BalancedCorpus corpus = read_trace(trace);
    validate_balanced(corpus);
    const SteeringBank bank = build_bank(corpus, ctx.cfg.c);
    int inert = 0;
    for (const auto& e : bank.entries) inert += e.inert() ? 1 : 0;
    ensure_dir(ctx.out_dir());
    const fs::path path = ctx.artifact("bank.csbk");
    write_bank(path, bank, ctx.provenance("build-bank", {{"corpus", trace}}));
    ctx.out << "bank: k=" << bank.k << " blocks=" << bank.blocks << " c=" << fmt("%g", bank.c) << " sites=" << bank.entries.size()
            << " inert=" << inert << "\nwrote " << path.string() << "\n";
    return 0;
}

int cmd_calibrate(Context& ctx, const Paths& paths) {
    const fs::path ckpt = resolve(ctx, paths.checkpoint, "model.csck");
    const fs::path prompts_path = resolve(ctx, paths.prompts, "construction.pset");
    const fs::path bank_path = resolve(ctx, paths.bank, "bank.csbk");
    const ModelState model = read_checkpoint(ckpt);
    const PromptSet prompts = read_prompt_set(prompts_path);
    if (prompts.split != Split::construction) throw InvalidArgument("calibrate-c needs the construction prompt set");
    const PromptSet held = split_holdout(prompts, ctx.cfg.calibrate_holdout).second;
    SteeringBank bank = read_bank(bank_path);
    const RunConfig& cfg = ctx.cfg;
    const NoiseSchedule schedule = make_schedule(cfg);
    EvalOptions eo = eval_options(cfg, derived_seed(cfg, seed_calibrate), cfg.calibrate_seeds);
    eo.limit = 0;

    const EvalReport baseline = evaluate(model, schedule, nullptr, steering_config(cfg), held, eo);
    std::string table = "c,acc,mae,alignment\n";
    table += "baseline," + fmt("%.9g", baseline.acc) + "," + fmt("%.9g", baseline.mae) + "," +
             fmt("%.9g", baseline.alignment) + "\n";
    ctx.out << "calibrating c on " << held.entries.size() << " held-out construction prompts\n"
            << "  baseline      acc " << fmt("%.4f", baseline.acc) << "  mae " << fmt("%.4f", baseline.mae) << "\n";
    std::optional<std::size_t> best;
    std::vector<EvalReport> reports;
    for (std::size_t i = 0; i < cfg.calibrate_grid.size(); ++i) {
        SteeringConfig sc = steering_config(cfg);
        sc.c = cfg.calibrate_grid[i];
        const EvalReport r = evaluate(model, schedule, &bank, sc, held, eo);
        table += fmt("%.9g", sc.c) + "," + fmt("%.9g", r.acc) + "," + fmt("%.9g", r.mae) + "," +
                 fmt("%.9g", r.alignment) + "\n";
        ctx.out << "  c=" << fmt("%-10g", sc.c) << " acc " << fmt("%.4f", r.acc) << "  mae " << fmt("%.4f", r.mae)
                << "\n";
        // Highest ACC, then lowest MAE, then the earlier grid value.
        if (!best || r.acc > reports[*best].acc || (r.acc == reports[*best].acc && r.mae < reports[*best].mae)) {
            best = i;
        }
        reports.push_back(r);
    }
    bank.c = cfg.calibrate_grid[*best];
    ctx.cfg.c = bank.c;
    const std::string prov =
        ctx.provenance("calibrate-c", {{"checkpoint", ckpt}, {"prompts", prompts_path}, {"bank", bank_path}});
    ensure_dir(ctx.out_dir());
    write_text(ctx.artifact("calibration.csv"), table, prov + "selected_c " + fmt("%.9g", bank.c) + "\n");
    const fs::path out_bank = ctx.artifact("bank_calibrated.csbk");
    write_bank(out_bank, bank, prov);
    ctx.out << "selected c=" << fmt("%g", bank.c) << "\nwrote " << out_bank.string() << "\n";
    return 0;
}

int cmd_sample(Context& ctx, const Paths& paths, const SampleArgs& args) {
    const fs::path ckpt = resolve(ctx, paths.checkpoint, "model.csck");
    const ModelState model = read_checkpoint(ckpt);
    std::optional<SteeringBank> bank;
    std::vector<std::pair<std::string, fs::path>> inputs{{"checkpoint", ckpt}};
    if (!paths.bank.empty()) {
        bank = load_bank(ctx, paths.bank);
        inputs.emplace_back("bank", paths.bank);
    }
    const RunConfig& cfg = ctx.cfg;
    if (args.n < 1) throw InvalidArgument("--n must be >= 1");
    const Shape shape = parse_shape(args.shape);
    const ConditionTokens cond = encode_condition(args.count, shape, true);
    const NoiseSchedule schedule = make_schedule(cfg);
    const SteeringConfig sc = steering_config(cfg);
    std::unique_ptr<QueryInterceptor> steer;
    if (bank) {
        validate(sc, schedule.steps);
        steer = make_interceptor(*bank, sc, model.config());
    }
    const std::string prov = ctx.provenance("sample", inputs);
    const fs::path dir = ctx.artifact("samples");
    ensure_dir(dir);
    for (int i = 0; i < args.n; ++i) {
        SampleOptions so = sampling_options(cfg);
        so.seed = mix_seed(derived_seed(cfg, seed_sample), static_cast<std::uint64_t>(i));
        so.interceptor = steer.get();
        so.intercept_unconditional = sc.both_branches;
        so.trajectory = args.trajectory;
        const SampleResult r = sample(model, cond, schedule, so);
        const std::string stem = "sample_" + std::to_string(i);
        write_pgm(dir / (stem + ".pgm"), r.image);
        write_image_sidecar(dir / (stem + ".pgm"), 0, args.count, shape, so.seed, prov);
        for (std::size_t t = 0; t < r.trajectory.size(); ++t) {
            char name[64];
            std::snprintf(name, sizeof name, "%s_step%02zu.pgm", stem.c_str(), t);
            write_pgm(dir / name, r.trajectory[t]);
        }
        ctx.out << stem << " seed " << so.seed << " predicted " << count_objects(r.image, cfg.oracle) << " (target "
                << args.count << ")\n";
    }
    ctx.out << "wrote " << args.n << " samples to " << dir.string() << (bank ? " (steered)" : " (baseline)") << "\n";
    return 0;
}

std::string breakdown_text(const std::vector<CountRow>& rows) {
    std::string t = "count      n   accuracy      mae\n";
    for (const auto& r : rows) {
        char line[96];
        std::snprintf(line, sizeof line, "%5d  %5d  %8.1f%%  %7.3f\n", r.count, r.n, 100.0 * r.accuracy, r.mae);
        t += line;
    }
    return t;
}

std::string paired_text(const PairedReport& p) {
    return "paired flips: fixed " + std::to_string(p.fixed) + ", broken " + std::to_string(p.broken) +
           ", unchanged-correct " + std::to_string(p.unchanged_correct) + ", unchanged-incorrect " +
           std::to_string(p.unchanged_incorrect) + "\n";
}

int cmd_eval(Context& ctx, const Paths& paths) {
    const fs::path ckpt = resolve(ctx, paths.checkpoint, "model.csck");
    const fs::path prompts_path = resolve(ctx, paths.prompts, "evaluation.pset");
    const ModelState model = read_checkpoint(ckpt);
    const PromptSet prompts = read_prompt_set(prompts_path);
    std::vector<std::pair<std::string, fs::path>> inputs{{"checkpoint", ckpt}, {"prompts", prompts_path}};

    std::optional<PromptSet> construction;
    fs::path construction_path = paths.construction;
    if (construction_path.empty() && fs::exists(ctx.artifact("construction.pset"))) {
        construction_path = ctx.artifact("construction.pset");
    }
    if (!construction_path.empty()) {
        construction = read_prompt_set(construction_path);
        inputs.emplace_back("construction", construction_path);
    }
    std::optional<SteeringBank> bank;
    if (!paths.bank.empty()) {
        bank = load_bank(ctx, paths.bank);
        inputs.emplace_back("bank", paths.bank);
    }
    const RunConfig& cfg = ctx.cfg;
    const NoiseSchedule schedule = make_schedule(cfg);
    const EvalOptions eo = eval_options(cfg, derived_seed(cfg, seed_eval), cfg.seeds_per_prompt);
    const SteeringConfig sc = steering_config(cfg);
    const PromptSet* cons = construction ? &*construction : nullptr;

    const std::string prov = ctx.provenance("eval", inputs);
    ensure_dir(ctx.out_dir());
    const EvalReport baseline = evaluate(model, schedule, nullptr, sc, prompts, eo, cons);
    write_eval_csv(ctx.artifact("eval_baseline.csv"), baseline, prov);
    const auto rows_b = per_count_breakdown(baseline);
    write_breakdown_csv(ctx.artifact("breakdown_baseline.csv"), rows_b, prov);

    std::string summary = "evaluation prompts: " + std::to_string(prompts.entries.size()) +
                          ", seeds per prompt: " + std::to_string(cfg.seeds_per_prompt) +
                          ", samples per arm: " + std::to_string(baseline.samples.size()) + "\n";
    summary += "sample seeds: eval_seed(base_seed=" + std::to_string(eo.base_seed) +
               ", prompt_id, j), identical in both arms; guidance " + fmt("%g", cfg.guidance_scale) + "\n";
    summary += "baseline fingerprint: " + baseline.fingerprint + "\n";
    if (!bank) {
        write_breakdown_svg(ctx.artifact("breakdown.svg"), rows_b, {}, prov);
        char line[128];
        std::snprintf(line, sizeof line, "Baseline  ACC %.1f%%  MAE %.3f  Alignment %.3f\n", 100.0 * baseline.acc,
                      baseline.mae, baseline.alignment);
        summary += line;
        summary += "\nper-count accuracy (baseline)\n" + breakdown_text(rows_b);
        write_text(ctx.artifact("summary.txt"), summary, prov);
        ctx.out << summary;
        return 0;
    }

    const EvalReport steered = evaluate(model, schedule, &*bank, sc, prompts, eo, cons);
    write_eval_csv(ctx.artifact("eval_steered.csv"), steered, prov);
    const auto rows_s = per_count_breakdown(steered);
    write_breakdown_csv(ctx.artifact("breakdown_steered.csv"), rows_s, prov);
    write_breakdown_svg(ctx.artifact("breakdown.svg"), rows_b, rows_s, prov);
    const PairedReport paired = compare_arms(baseline, steered);

    summary += "steered fingerprint: " + steered.fingerprint + "\n\n";
    summary += format_comparison_table(baseline, steered);
    summary += "(Alignment is the geometric shape-match proxy, not a CLIP score)\n\n";
    summary += "delta ACC " + fmt("%+.1f", 100.0 * (steered.acc - baseline.acc)) + "%p, delta MAE " +
               fmt("%+.3f", steered.mae - baseline.mae) + "\n";
    summary += paired_text(paired);
    summary += "\nper-count accuracy (baseline)\n" + breakdown_text(rows_b);
    summary += "\nper-count accuracy (steered)\n" + breakdown_text(rows_s);
    write_text(ctx.artifact("summary.txt"), summary, prov);
    ctx.out << summary;
    return 0;
}

int cmd_analyze(Context& ctx, const Paths& paths) {
    const fs::path trace = resolve(ctx, paths.corpus, "corpus.cshs");
    const fs::path bank_path = resolve(ctx, paths.bank, "bank.csbk");
    const BalancedCorpus corpus = read_trace(trace);
    const SteeringBank bank = read_bank(bank_path);
    const SeparabilityReport rep = separability_report(corpus, bank);
    const std::string prov = ctx.provenance("analyze", {{"corpus", trace}, {"bank", bank_path}});
    const fs::path dir = ctx.artifact("analysis");
    ensure_dir(dir);
    write_separability_csv(dir / "separability.csv", rep, prov);
    for (const auto& site : rep.sites) {
        const std::string tag = "t" + std::to_string(site.t) + "_b" + std::to_string(site.block);
        write_density_svg(dir / ("density_" + tag + ".svg"), site, prov);
        write_pca_csv(dir / ("pca_" + tag + ".csv"), pca_project_2d(corpus, site.t, site.block), prov);
    }
    double best_d = 0.0, worst_ovl = 0.0;
    double sum_d = 0.0;
    for (const auto& s : rep.sites) {
        best_d = std::max(best_d, s.d_prime);
        worst_ovl = std::max(worst_ovl, s.ovl);
        sum_d += s.d_prime;
    }
    ctx.out << "sites analysed: " << rep.sites.size() << " (1D KDE along s and 2D PCA views)\n";
    if (!rep.sites.empty()) {
        ctx.out << "mean d' " << fmt("%.3f", sum_d / static_cast<double>(rep.sites.size())) << ", max d' "
                << fmt("%.3f", best_d) << ", max OVL " << fmt("%.3f", worst_ovl) << "\n";
    }
    ctx.out << "wrote " << dir.string() << "\n";
    return 0;
}

int cmd_report(Context& ctx, const Paths& paths) {
    const fs::path b_path = resolve(ctx, paths.baseline, "eval_baseline.csv");
    const fs::path s_path = resolve(ctx, paths.steered, "eval_steered.csv");
    EvalReport baseline = read_eval_csv(b_path);
    EvalReport steered = read_eval_csv(s_path);
    compute_metrics(baseline);
    compute_metrics(steered);
    const PairedReport paired = compare_arms(baseline, steered);
    const std::string prov = ctx.provenance("report", {{"baseline", b_path}, {"steered", s_path}});
    ensure_dir(ctx.out_dir());

    std::string flips = "prompt_id,seed,target,baseline,steered,flip\n";
    for (std::size_t i = 0; i < paired.flips.size(); ++i) {
        const auto& b = baseline.samples[i];
        flips += std::to_string(b.prompt_id) + "," + std::to_string(b.seed) + "," + std::to_string(b.target) + "," +
                 std::to_string(b.predicted) + "," + std::to_string(steered.samples[i].predicted) + "," +
                 std::string(flip_name(paired.flips[i])) + "\n";
    }
    write_text(ctx.artifact("flips.csv"), flips, prov);

    std::string text = "baseline: " + baseline.fingerprint + "\nsteered:  " + steered.fingerprint + "\n\n";
    text += format_comparison_table(baseline, steered);
    text += "\n" + paired_text(paired);
    text += "broken = regression from a correct to an incorrect count\n";
    text += "\nper-count accuracy (baseline)\n" + breakdown_text(per_count_breakdown(baseline));
    text += "\nper-count accuracy (steered)\n" + breakdown_text(per_count_breakdown(steered));
    write_text(ctx.artifact("report.txt"), text, prov);
    ctx.out << text;
    return 0;
}

std::string dashed(std::string key) {
    std::replace(key.begin(), key.end(), '_', '-');
    return key;
}

int dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"CountSteer desk-scale laboratory", "countsteer"};
    app.require_subcommand(1);
    app.set_help_all_flag("--help-all", "Show help for every subcommand");
    // A repeated option keeps its last value, so `--steps` may follow a preset.
    app.option_defaults()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);

    std::string config_path;
    app.add_option("--config", config_path, "key = value config file; flags override it");
    std::map<std::string, std::string> overrides;
    const RunConfig defaults;
    for (const auto& key : config_keys()) {
        app.add_option("--" + dashed(key), overrides[key], "default: " + get_config_value(defaults, key));
    }

    Paths paths;
    SampleArgs sample_args;
    int previews = 8;
    auto add = [&](const char* name, const char* help) {
        CLI::App* sub = app.add_subcommand(name, help);
        sub->fallthrough();
        return sub;
    };
    CLI::App* gen = add("gen-data", "write the construction/evaluation prompt sets and scene previews");
    gen->add_option("--previews", previews, "number of preview scenes")->check(CLI::NonNegativeNumber);
    add("train", "train the toy denoiser");
    CLI::App* capture = add("capture", "capture a balanced hidden-state corpus");
    CLI::App* bank = add("build-bank", "build the steering bank from a corpus");
    CLI::App* calibrate = add("calibrate-c", "sweep c on held-out construction prompts");
    CLI::App* sample_cmd = add("sample", "generate images, optionally steered");
    CLI::App* eval = add("eval", "evaluate the baseline and, with a bank, the steered arm");
    CLI::App* analyze = add("analyze", "separability analysis of a corpus along the bank directions");
    CLI::App* report = add("report", "paired flip report from two eval CSVs");

    for (CLI::App* sub : {capture, calibrate, sample_cmd, eval}) {
        sub->add_option("--checkpoint", paths.checkpoint, "model checkpoint (default <out>/model.csck)");
    }
    for (CLI::App* sub : {capture, calibrate, eval}) sub->add_option("--prompts", paths.prompts, "prompt set");
    for (CLI::App* sub : {bank, analyze}) {
        sub->add_option("--corpus", paths.corpus, "hidden-state trace (default <out>/corpus.cshs)");
    }
    for (CLI::App* sub : {calibrate, analyze}) {
        sub->add_option("--bank", paths.bank, "steering bank (default <out>/bank.csbk)");
    }
    for (CLI::App* sub : {sample_cmd, eval}) sub->add_option("--bank", paths.bank, "steering bank; omit for baseline");
    eval->add_option("--construction", paths.construction, "construction prompt set for the disjointness check");
    sample_cmd->add_option("--count", sample_args.count, "target count")->check(CLI::Range(1, max_count_token));
    sample_cmd->add_option("--shape", sample_args.shape, "disk, square or triangle");
    sample_cmd->add_option("--n", sample_args.n, "number of images");
    sample_cmd->add_flag("--trajectory", sample_args.trajectory, "also write the x0 estimate of every step");
    report->add_option("--baseline", paths.baseline, "baseline eval CSV (default <out>/eval_baseline.csv)");
    report->add_option("--steered", paths.steered, "steered eval CSV (default <out>/eval_steered.csv)");

    std::vector<std::string> reversed(args.rbegin(), args.rend());
    if (!reversed.empty()) reversed.pop_back();  // program name
    try {
        app.parse(reversed);
    } catch (const CLI::CallForHelp&) {
        out << app.help();
        return 0;
    } catch (const CLI::CallForAllHelp&) {
        out << app.help("", CLI::AppFormatMode::All);
        return 0;
    } catch (const CLI::ParseError& e) {
        err << "error: " << e.what() << "\n\n" << app.help();
        return 1;
    }

    Context ctx{RunConfig{}, {}, out};
    if (!config_path.empty()) load_config(ctx.cfg, config_path, &ctx.explicit_keys);
    for (const auto& key : config_keys()) {
        if (app.count("--" + dashed(key)) > 0) {
            set_config_value(ctx.cfg, key, overrides[key]);
            ctx.explicit_keys.push_back(key);
        }
    }
    validate(ctx.cfg);

    CLI::App* chosen = app.get_subcommands().front();
    const std::string name = chosen->get_name();
    if (name == "gen-data") return cmd_gen_data(ctx, previews);
    if (name == "train") return cmd_train(ctx);
    if (name == "capture") return cmd_capture(ctx, paths);
    if (name == "build-bank") return cmd_build_bank(ctx, paths);
    if (name == "calibrate-c") return cmd_calibrate(ctx, paths);
    if (name == "sample") return cmd_sample(ctx, paths, sample_args);
    if (name == "eval") return cmd_eval(ctx, paths);
    if (name == "analyze") return cmd_analyze(ctx, paths);
    return cmd_report(ctx, paths);
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    try {
        return dispatch(args, out, err);
    } catch (const Error& e) {
        err << "error: " << e.what() << "\n";
        return exit_code_for(e.kind());
    } catch (const fs::filesystem_error& e) {
        err << "error: " << e.what() << "\n";
        return exit_code_for(ErrorKind::io);
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return exit_code_for(ErrorKind::usage);
    }
}

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
    return run(std::vector<std::string>(argv, argv + argc), out, err);
}

}  // namespace countsteer

#include "countsteer/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>

#include "countsteer/common.hpp"
#include "countsteer/error.hpp"

namespace countsteer {

namespace {

std::string fmt9(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.9g", v);
    return buf;
}

std::string bank_fingerprint(const SteeringBank& bank) {
    Fnv1a h;
    const std::int64_t header[3] = {bank.k, bank.blocks, 0};
    h.update(header, sizeof header);
    h.update(&bank.c, sizeof bank.c);
    for (const auto& e : bank.entries) {
        for (const auto* v : {&e.mu1, &e.mu0, &e.s}) h.update(v->data(), v->size() * sizeof(float));
    }
    return "bank:" + hex64(h.digest());
}

void write_provenance(std::ostream& out, const std::string& provenance) {
    std::istringstream in(provenance);
    std::string line;
    while (std::getline(in, line)) out << "# " << line << '\n';
}

}  // namespace

void compute_metrics(EvalReport& r) {
    r.acc = r.mae = r.alignment = 0.0;
    if (r.samples.empty()) return;
    double hits = 0.0, err = 0.0, align = 0.0;
    for (const auto& s : r.samples) {
        hits += s.correct() ? 1.0 : 0.0;
        err += std::abs(s.predicted - s.target);
        align += s.shape_match;
    }
    const auto n = static_cast<double>(r.samples.size());
    r.acc = hits / n;
    r.mae = err / n;
    r.alignment = align / n;
}

std::uint64_t eval_seed(std::uint64_t base_seed, std::uint32_t prompt_id, int j) {
    return mix_seed(base_seed ^ 0x6576616cULL, prompt_id, static_cast<std::uint64_t>(j));
}

EvalReport evaluate(const ModelState& model, const NoiseSchedule& schedule, const SteeringBank* bank,
                    const SteeringConfig& steering, const PromptSet& prompts, const EvalOptions& opt,
                    const PromptSet* construction) {
    if (opt.seeds_per_prompt < 1) throw InvalidArgument("seeds_per_prompt must be >= 1");
    if (opt.limit < 0) throw InvalidArgument("limit must be >= 0");
    validate(opt.oracle);
    if (construction) check_disjoint(*construction, prompts);
    std::unique_ptr<QueryInterceptor> steer;
    if (bank) {
        validate(steering, schedule.steps);
        steer = make_interceptor(*bank, steering, model.config());
    }

    std::size_t n_prompts = prompts.entries.size();
    if (opt.limit > 0) n_prompts = std::min(n_prompts, static_cast<std::size_t>(opt.limit));
    const auto per = static_cast<std::size_t>(opt.seeds_per_prompt);
    EvalReport report;
    report.samples.resize(n_prompts * per);
    parallel_for(report.samples.size(), opt.threads, [&](std::size_t i) {
        const PromptEntry& p = prompts.entries[i / per];
        EvalSample& s = report.samples[i];
        s.prompt_id = p.prompt_id;
        s.seed = eval_seed(opt.base_seed, p.prompt_id, static_cast<int>(i % per));
        s.target = p.count;
        s.shape = p.shape;
        SampleOptions so;
        so.guidance_scale = opt.guidance_scale;
        so.seed = s.seed;
        so.interceptor = steer.get();
        so.intercept_unconditional = steering.both_branches;
        const Image img = sample(model, encode_condition(p.count, p.shape, true), schedule, so).image;
        s.predicted = count_objects(img, opt.oracle);
        s.shape_match = shape_alignment(img, p.shape, opt.oracle);
    });
    compute_metrics(report);
    std::ostringstream fp;
    fp << (bank ? bank_fingerprint(*bank) : std::string("baseline"));
    if (bank) fp << " k=" << steering.k << " c=" << fmt9(steering.c) << (steering.both_branches ? " both" : "");
    fp << " base_seed=" << opt.base_seed << " seeds_per_prompt=" << opt.seeds_per_prompt
       << " guidance=" << fmt9(opt.guidance_scale);
    report.fingerprint = fp.str();
    return report;
}

std::vector<CountRow> per_count_breakdown(const EvalReport& report) {
    std::map<int, CountRow> rows;
    std::map<int, double> err;
    for (const auto& s : report.samples) {
        CountRow& r = rows[s.target];
        r.count = s.target;
        ++r.n;
        r.correct += s.correct() ? 1 : 0;
        err[s.target] += std::abs(s.predicted - s.target);
    }
    std::vector<CountRow> out;
    for (auto& [count, r] : rows) {
        r.accuracy = static_cast<double>(r.correct) / r.n;
        r.mae = err[count] / r.n;
        out.push_back(r);
    }
    return out;
}

std::string_view flip_name(Flip flip) {
    switch (flip) {
        case Flip::fixed: return "fixed";
        case Flip::broken: return "broken";
        case Flip::unchanged_correct: return "unchanged-correct";
        case Flip::unchanged_incorrect: return "unchanged-incorrect";
    }
    return "?";
}

PairedReport compare_arms(const EvalReport& baseline, const EvalReport& steered) {
    if (baseline.samples.size() != steered.samples.size()) {
        throw InvalidArgument("arms differ in size: " + std::to_string(baseline.samples.size()) + " vs " +
                              std::to_string(steered.samples.size()));
    }
    PairedReport out;
    for (std::size_t i = 0; i < baseline.samples.size(); ++i) {
        const EvalSample& a = baseline.samples[i];
        const EvalSample& b = steered.samples[i];
        if (a.prompt_id != b.prompt_id || a.seed != b.seed || a.target != b.target) {
            throw InvalidArgument("arms are not paired at row " + std::to_string(i));
        }
        Flip f;
        if (a.correct()) {
            f = b.correct() ? Flip::unchanged_correct : Flip::broken;
        } else {
            f = b.correct() ? Flip::fixed : Flip::unchanged_incorrect;
        }
        out.flips.push_back(f);
        switch (f) {
            case Flip::fixed: ++out.fixed; break;
            case Flip::broken: ++out.broken; break;
            case Flip::unchanged_correct: ++out.unchanged_correct; break;
            case Flip::unchanged_incorrect: ++out.unchanged_incorrect; break;
        }
    }
    return out;
}

std::string format_comparison_table(double acc_b, double mae_b, double align_b, double acc_s, double mae_s,
                                    double align_s) {
    char buf[512];
    std::snprintf(buf, sizeof buf,
                  "%-22s %8s %8s %10s\n"
                  "%-22s %7.1f%% %8.3f %10.3f\n"
                  "%-22s %7.1f%% %8.3f %10.3f\n",
                  "Method", "ACC", "MAE", "Alignment", "Baseline", 100.0 * acc_b, mae_b, align_b,
                  "Baseline + CountSteer", 100.0 * acc_s, mae_s, align_s);
    return buf;
}

std::string format_comparison_table(const EvalReport& baseline, const EvalReport& steered) {
    return format_comparison_table(baseline.acc, baseline.mae, baseline.alignment, steered.acc, steered.mae,
                                   steered.alignment);
}

void write_eval_csv(const std::filesystem::path& path, const EvalReport& report, const std::string& provenance) {
    auto out = open_output(path, false);
    write_provenance(out, provenance);
    out << "# fingerprint " << report.fingerprint << '\n';
    out << "prompt_id,seed,target,shape,predicted,shape_match\n";
    for (const auto& s : report.samples) {
        out << s.prompt_id << ',' << s.seed << ',' << s.target << ',' << shape_name(s.shape) << ',' << s.predicted
            << ',' << fmt9(s.shape_match) << '\n';
    }
    if (!out) throw IoError("failed writing " + path.string());
}

EvalReport read_eval_csv(const std::filesystem::path& path) {
    auto in = open_input(path, false);
    EvalReport report;
    std::string line;
    bool header = false;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.starts_with("# fingerprint ")) {
            report.fingerprint = line.substr(14);
            continue;
        }
        if (line.empty() || line[0] == '#') continue;
        if (!header) {
            if (line != "prompt_id,seed,target,shape,predicted,shape_match") {
                throw FormatError(path.string() + ": unexpected header");
            }
            header = true;
            continue;
        }
        std::istringstream ls(line);
        std::string field[6];
        for (int i = 0; i < 6; ++i) {
            if (!std::getline(ls, field[i], ',')) {
                throw FormatError(path.string() + ":" + std::to_string(line_no) + ": expected 6 fields");
            }
        }
        try {
            EvalSample s;
            s.prompt_id = static_cast<std::uint32_t>(std::stoul(field[0]));
            s.seed = std::stoull(field[1]);
            s.target = std::stoi(field[2]);
            s.shape = parse_shape(field[3]);
            s.predicted = std::stoi(field[4]);
            s.shape_match = std::stod(field[5]);
            report.samples.push_back(s);
        } catch (const std::logic_error&) {
            throw FormatError(path.string() + ":" + std::to_string(line_no) + ": malformed row");
        } catch (const UnknownShape&) {
            throw FormatError(path.string() + ":" + std::to_string(line_no) + ": unknown shape");
        }
    }
    if (!header) throw FormatError(path.string() + ": missing header");
    compute_metrics(report);
    return report;
}

void write_breakdown_csv(const std::filesystem::path& path, const std::vector<CountRow>& rows,
                         const std::string& provenance) {
    auto out = open_output(path, false);
    write_provenance(out, provenance);
    out << "count,n,correct,accuracy,mae\n";
    for (const auto& r : rows) {
        out << r.count << ',' << r.n << ',' << r.correct << ',' << fmt9(r.accuracy) << ',' << fmt9(r.mae) << '\n';
    }
    if (!out) throw IoError("failed writing " + path.string());
}

void write_breakdown_svg(const std::filesystem::path& path, const std::vector<CountRow>& baseline,
                         const std::vector<CountRow>& steered, const std::string& provenance) {
    constexpr double height = 300, pad = 40, group = 60, bar = 24;
    const double width = 2 * pad + group * static_cast<double>(std::max<std::size_t>(baseline.size(), 1));
    const double plot = height - 2 * pad;
    auto out = open_output(path, false);
    out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << height << "\">\n";
    out << svg_comment(provenance);
    out << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    out << "<text x=\"" << pad << "\" y=\"20\" font-size=\"13\">accuracy per target count</text>\n";
    out << "<line x1=\"" << pad << "\" y1=\"" << height - pad << "\" x2=\"" << width - pad << "\" y2=\""
        << height - pad << "\" stroke=\"black\"/>\n";
    auto draw = [&](const CountRow& r, double x, const char* color) {
        const double h = r.accuracy * plot;
        out << "<rect x=\"" << fmt9(x) << "\" y=\"" << fmt9(height - pad - h) << "\" width=\"" << bar
            << "\" height=\"" << fmt9(h) << "\" fill=\"" << color << "\"/>\n";
    };
    for (std::size_t i = 0; i < baseline.size(); ++i) {
        const double x = pad + group * static_cast<double>(i) + 6;
        draw(baseline[i], x, "#7f7f7f");
        for (const auto& s : steered) {
            if (s.count == baseline[i].count) draw(s, x + bar, "#1f77b4");
        }
        out << "<text x=\"" << fmt9(x + bar - 4) << "\" y=\"" << height - pad + 16 << "\" font-size=\"12\">"
            << baseline[i].count << "</text>\n";
    }
    out << "<text x=\"" << width - pad - 110 << "\" y=\"40\" font-size=\"11\" fill=\"#7f7f7f\">baseline</text>\n";
    if (!steered.empty()) {
        out << "<text x=\"" << width - pad - 110 << "\" y=\"54\" font-size=\"11\" fill=\"#1f77b4\">steered</text>\n";
    }
    out << "</svg>\n";
    if (!out) throw IoError("failed writing " + path.string());
}

}  // namespace countsteer

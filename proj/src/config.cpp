#include "countsteer/config.hpp"

#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <sstream>

#include "countsteer/common.hpp"
#include "countsteer/error.hpp"

namespace countsteer {

namespace {

std::string trim(std::string_view s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string_view::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return std::string(s.substr(b, e - b + 1));
}

[[noreturn]] void bad_value(std::string_view key, std::string_view value, std::string_view expected) {
    throw InvalidArgument("config key '" + std::string(key) + "': cannot parse '" + std::string(value) + "' as " +
                          std::string(expected));
}

template <typename T>
T parse_int(std::string_view key, std::string_view v) {
    T out{};
    const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc{} || p != v.data() + v.size()) bad_value(key, v, "an integer");
    return out;
}

double parse_double(std::string_view key, std::string_view v) {
    const std::string s(v);
    char* end = nullptr;
    const double out = std::strtod(s.c_str(), &end);
    if (s.empty() || end != s.c_str() + s.size() || !std::isfinite(out)) bad_value(key, v, "a finite number");
    return out;
}

bool parse_bool(std::string_view key, std::string_view v) {
    if (v == "true" || v == "1" || v == "yes") return true;
    if (v == "false" || v == "0" || v == "no") return false;
    bad_value(key, v, "true/false");
}

std::vector<std::string> split_list(std::string_view v) {
    std::vector<std::string> out;
    std::string item;
    std::istringstream in{std::string(v)};
    while (std::getline(in, item, ',')) out.push_back(trim(item));
    return out;
}

// Shortest text that reads back to the same double.
std::string fmt_double(double v) {
    char buf[40];
    const auto res = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, res.ptr);
}

template <typename T>
std::string join(const std::vector<T>& xs, const std::function<std::string(const T&)>& f) {
    std::string out;
    for (std::size_t i = 0; i < xs.size(); ++i) out += (i ? "," : "") + f(xs[i]);
    return out;
}

struct Field {
    std::string_view key;
    std::function<void(RunConfig&, std::string_view key, std::string_view value)> set;
    std::function<std::string(const RunConfig&)> get;
};

#define INT_FIELD(name, member)                                                                        \
    Field {                                                                                            \
        name, [](RunConfig& c, std::string_view k, std::string_view v) { c.member = parse_int<int>(k, v); }, \
            [](const RunConfig& c) { return std::to_string(c.member); }                                \
    }
#define DOUBLE_FIELD(name, member)                                                                          \
    Field {                                                                                                 \
        name, [](RunConfig& c, std::string_view k, std::string_view v) { c.member = parse_double(k, v); }, \
            [](const RunConfig& c) { return fmt_double(c.member); }                                         \
    }
#define BOOL_FIELD(name, member)                                                                          \
    Field {                                                                                               \
        name, [](RunConfig& c, std::string_view k, std::string_view v) { c.member = parse_bool(k, v); }, \
            [](const RunConfig& c) { return std::string(c.member ? "true" : "false"); }                   \
    }

const std::vector<Field>& fields() {
    static const std::vector<Field> table = {
        Field{"seed", [](RunConfig& c, std::string_view k, std::string_view v) { c.seed = parse_int<std::uint64_t>(k, v); },
              [](const RunConfig& c) { return std::to_string(c.seed); }},
        INT_FIELD("threads", threads),
        Field{"out", [](RunConfig& c, std::string_view, std::string_view v) { c.out = std::string(v); },
              [](const RunConfig& c) { return c.out; }},
        INT_FIELD("train_scenes", train_scenes),
        INT_FIELD("prompts_per_cell", prompts_per_cell),
        DOUBLE_FIELD("split_ratio", split_ratio),
        INT_FIELD("canvas", model.canvas),
        INT_FIELD("time_dim", model.time_dim),
        INT_FIELD("time_hidden", model.time_hidden),
        INT_FIELD("token_dim", model.token_dim),
        INT_FIELD("query_dim", model.query_dim),
        Field{"widths",
              [](RunConfig& c, std::string_view k, std::string_view v) {
                  const auto items = split_list(v);
                  if (items.size() != c.model.widths.size()) bad_value(k, v, "5 comma-separated widths");
                  for (std::size_t i = 0; i < items.size(); ++i) c.model.widths[i] = parse_int<int>(k, items[i]);
              },
              [](const RunConfig& c) {
                  std::string out;
                  for (std::size_t i = 0; i < c.model.widths.size(); ++i) {
                      out += (i ? "," : "") + std::to_string(c.model.widths[i]);
                  }
                  return out;
              }},
        BOOL_FIELD("use_bias", model.use_bias),
        Field{"schedule",
              [](RunConfig& c, std::string_view k, std::string_view v) {
                  if (v != "linear" && v != "scaled_linear") bad_value(k, v, "linear or scaled_linear");
                  c.schedule = std::string(v);
              },
              [](const RunConfig& c) { return c.schedule; }},
        INT_FIELD("diffusion_steps", diffusion_steps),
        INT_FIELD("steps", train.steps),
        INT_FIELD("batch", train.batch),
        DOUBLE_FIELD("learning_rate", train.learning_rate),
        DOUBLE_FIELD("adam_beta1", train.beta1),
        DOUBLE_FIELD("adam_beta2", train.beta2),
        DOUBLE_FIELD("adam_epsilon", train.epsilon),
        DOUBLE_FIELD("p_uncond", train.p_uncond),
        DOUBLE_FIELD("ema_decay", train.ema_decay),
        DOUBLE_FIELD("guidance_scale", guidance_scale),
        INT_FIELD("k", k),
        // `reference` names the scale used with Stable Diffusion activations.
        Field{"c",
              [](RunConfig& c, std::string_view k, std::string_view v) {
                  c.c = v == "reference" ? reference_steering_scale : parse_double(k, v);
              },
              [](const RunConfig& c) { return fmt_double(c.c); }},
        Field{"steer_branch",
              [](RunConfig& c, std::string_view k, std::string_view v) {
                  if (v != "conditional" && v != "both") bad_value(k, v, "conditional or both");
                  c.steer_both_branches = v == "both";
              },
              [](const RunConfig& c) { return std::string(c.steer_both_branches ? "both" : "conditional"); }},
        Field{"steer_blocks",
              [](RunConfig& c, std::string_view k, std::string_view v) {
                  c.steer_blocks.clear();
                  if (trim(v).empty()) return;
                  for (const auto& item : split_list(v)) c.steer_blocks.push_back(parse_int<int>(k, item));
              },
              [](const RunConfig& c) {
                  return join<int>(c.steer_blocks, [](const int& b) { return std::to_string(b); });
              }},
        INT_FIELD("per_class", per_class),
        INT_FIELD("reseed_budget", reseed_budget),
        Field{"calibrate_grid",
              [](RunConfig& c, std::string_view k, std::string_view v) {
                  c.calibrate_grid.clear();
                  for (const auto& item : split_list(v)) c.calibrate_grid.push_back(parse_double(k, item));
              },
              [](const RunConfig& c) { return join<double>(c.calibrate_grid, fmt_double); }},
        DOUBLE_FIELD("calibrate_holdout", calibrate_holdout),
        INT_FIELD("calibrate_seeds", calibrate_seeds),
        INT_FIELD("seeds_per_prompt", seeds_per_prompt),
        INT_FIELD("eval_limit", eval_limit),
        DOUBLE_FIELD("oracle_threshold", oracle.threshold),
        Field{"oracle_connectivity",
              [](RunConfig& c, std::string_view k, std::string_view v) {
                  if (v == "4") {
                      c.oracle.connectivity = Connectivity::four;
                  } else if (v == "8") {
                      c.oracle.connectivity = Connectivity::eight;
                  } else {
                      bad_value(k, v, "4 or 8");
                  }
              },
              [](const RunConfig& c) {
                  return std::string(c.oracle.connectivity == Connectivity::four ? "4" : "8");
              }},
        INT_FIELD("oracle_min_area", oracle.min_area),
        Field{"compactness_reference",
              [](RunConfig& c, std::string_view k, std::string_view v) {
                  const auto items = split_list(v);
                  if (items.size() != 3) bad_value(k, v, "3 comma-separated values (disk, square, triangle)");
                  for (std::size_t i = 0; i < 3; ++i) c.oracle.compactness_reference[i] = parse_double(k, items[i]);
              },
              [](const RunConfig& c) {
                  return fmt_double(c.oracle.compactness_reference[0]) + "," +
                         fmt_double(c.oracle.compactness_reference[1]) + "," +
                         fmt_double(c.oracle.compactness_reference[2]);
              }},
    };
    return table;
}

#undef INT_FIELD
#undef DOUBLE_FIELD
#undef BOOL_FIELD

const Field& find_field(std::string_view key) {
    for (const auto& f : fields()) {
        if (f.key == key) return f;
    }
    throw InvalidArgument("unknown config key '" + std::string(key) + "'");
}

}  // namespace

std::vector<std::string> config_keys() {
    std::vector<std::string> out;
    for (const auto& f : fields()) out.emplace_back(f.key);
    return out;
}

void set_config_value(RunConfig& cfg, std::string_view key, std::string_view value) {
    find_field(key).set(cfg, key, trim(value));
}

std::string get_config_value(const RunConfig& cfg, std::string_view key) { return find_field(key).get(cfg); }

void parse_config_text(RunConfig& cfg, std::string_view text, std::string_view origin,
                       std::vector<std::string>* seen) {
    std::istringstream in{std::string(text)};
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (const auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
        if (trim(line).empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) {
            throw InvalidArgument(std::string(origin) + ":" + std::to_string(line_no) + ": expected key = value");
        }
        const std::string key = trim(std::string_view(line).substr(0, eq));
        try {
            set_config_value(cfg, key, std::string_view(line).substr(eq + 1));
        } catch (const InvalidArgument& e) {
            throw InvalidArgument(std::string(origin) + ":" + std::to_string(line_no) + ": " + e.what());
        }
        if (seen) seen->push_back(key);
    }
}

void load_config(RunConfig& cfg, const std::filesystem::path& path, std::vector<std::string>* seen) {
    auto in = open_input(path, false);
    std::ostringstream ss;
    ss << in.rdbuf();
    parse_config_text(cfg, ss.str(), path.string(), seen);
}

void validate(const RunConfig& cfg) {
    auto require = [](bool ok, const std::string& what) {
        if (!ok) throw InvalidArgument("config: " + what);
    };
    require(cfg.threads >= 1, "threads must be >= 1");
    require(!cfg.out.empty(), "out must not be empty");
    require(cfg.train_scenes >= 1, "train_scenes must be >= 1");
    require(cfg.prompts_per_cell >= 1, "prompts_per_cell must be >= 1");
    require(cfg.split_ratio > 0.0 && cfg.split_ratio < 1.0, "split_ratio must lie in (0, 1)");
    require(cfg.diffusion_steps >= 1 && cfg.diffusion_steps <= 65535, "diffusion_steps must lie in [1, 65535]");
    require(cfg.train.steps >= 0 && cfg.train.batch >= 1, "steps must be >= 0 and batch >= 1");
    require(cfg.train.learning_rate > 0.0, "learning_rate must be > 0");
    require(cfg.train.p_uncond >= 0.0 && cfg.train.p_uncond <= 1.0, "p_uncond must lie in [0, 1]");
    require(cfg.train.ema_decay >= 0.0 && cfg.train.ema_decay < 1.0, "ema_decay must lie in [0, 1)");
    require(cfg.guidance_scale >= 0.0, "guidance_scale must be >= 0");
    require(cfg.k >= 0 && cfg.k <= cfg.diffusion_steps, "k must lie in [0, diffusion_steps]");
    require(cfg.c >= 0.0, "c must be >= 0");
    for (int b : cfg.steer_blocks) require(b >= 0 && b < hooked_block_count, "steer_blocks entries must lie in [0, 3)");
    require(cfg.per_class >= 1, "per_class must be >= 1");
    require(cfg.reseed_budget >= 1, "reseed_budget must be >= 1");
    require(!cfg.calibrate_grid.empty(), "calibrate_grid must not be empty");
    for (double c : cfg.calibrate_grid) require(c >= 0.0, "calibrate_grid values must be >= 0");
    require(cfg.calibrate_holdout > 0.0 && cfg.calibrate_holdout < 1.0, "calibrate_holdout must lie in (0, 1)");
    require(cfg.calibrate_seeds >= 1, "calibrate_seeds must be >= 1");
    require(cfg.seeds_per_prompt >= 1, "seeds_per_prompt must be >= 1");
    require(cfg.eval_limit >= 0, "eval_limit must be >= 0");
    validate(cfg.oracle);
}

std::string config_text(const RunConfig& cfg) {
    std::string out;
    for (const auto& f : fields()) out += std::string(f.key) + " = " + f.get(cfg) + "\n";
    return out;
}

std::string config_hash(const RunConfig& cfg) {
    Fnv1a h;
    h.update(config_text(cfg));
    return hex64(h.digest());
}

NoiseSchedule make_schedule(const RunConfig& cfg) {
    NoiseSchedule s = cfg.schedule == "linear" ? NoiseSchedule::linear(cfg.diffusion_steps, 1e-4, 0.02)
                                               : NoiseSchedule::scaled_linear(cfg.diffusion_steps);
    validate(s);
    return s;
}

SteeringConfig steering_config(const RunConfig& cfg) {
    SteeringConfig s;
    s.k = cfg.k;
    s.c = cfg.c;
    s.both_branches = cfg.steer_both_branches;
    s.enabled_blocks = {false, false, false};
    for (int b : cfg.steer_blocks) s.enabled_blocks[static_cast<std::size_t>(b)] = true;
    return s;
}

}  // namespace countsteer

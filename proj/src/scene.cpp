#include "countsteer/scene.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numbers>
#include <set>
#include <sstream>
#include <tuple>

#include "countsteer/common.hpp"
#include "countsteer/error.hpp"

namespace countsteer {

namespace {

// Square half-side and triangle circumradius giving the area of a disk of
// radius `size`.
const double square_half_side_per_size = std::sqrt(std::numbers::pi) / 2.0;
const double triangle_circumradius_per_size =
    std::sqrt(4.0 * std::numbers::pi / (3.0 * std::sqrt(3.0)));

bool inside(Shape shape, const Placement& p, double x, double y) {
    const double dx = x - p.center_x;
    const double dy = y - p.center_y;
    switch (shape) {
        case Shape::disk:
            return dx * dx + dy * dy <= p.size * p.size;
        case Shape::square: {
            const double h = p.size * square_half_side_per_size;
            return std::abs(dx) <= h && std::abs(dy) <= h;
        }
        case Shape::triangle: {
            // Apex up (image y grows downward); vertices on the circumcircle.
            const double r = p.size * triangle_circumradius_per_size;
            double vx[3], vy[3];
            for (int i = 0; i < 3; ++i) {
                const double a = -std::numbers::pi / 2.0 + 2.0 * std::numbers::pi * i / 3.0;
                vx[i] = r * std::cos(a);
                vy[i] = r * std::sin(a);
            }
            for (int i = 0; i < 3; ++i) {
                const int j = (i + 1) % 3;
                const double cross = (vx[j] - vx[i]) * (dy - vy[i]) - (vy[j] - vy[i]) * (dx - vx[i]);
                if (cross < 0.0) return false;
            }
            return true;
        }
    }
    return false;
}

void shuffle(std::vector<std::pair<Shape, int>>& cells, Rng& rng) {
    for (std::size_t i = cells.size(); i > 1; --i) {
        const auto j = static_cast<std::size_t>(uniform01(rng) * static_cast<double>(i));
        std::swap(cells[i - 1], cells[std::min(j, i - 1)]);
    }
}

}  // namespace

std::string_view shape_name(Shape shape) {
    switch (shape) {
        case Shape::disk: return "disk";
        case Shape::square: return "square";
        case Shape::triangle: return "triangle";
    }
    throw UnknownShape("shape enum value " + std::to_string(static_cast<int>(shape)));
}

Shape parse_shape(std::string_view name) {
    for (Shape s : all_shapes) {
        if (shape_name(s) == name) return s;
    }
    throw UnknownShape("unknown shape \"" + std::string(name) + "\" (expected disk, square or triangle)");
}

void validate(const SceneSpec& spec) {
    if (spec.count < 1) throw InvalidArgument("scene count must be >= 1");
    if (spec.canvas < 1) throw InvalidArgument("canvas must be positive");
    if (!(spec.radius_range.first > 0.0) || spec.radius_range.first > spec.radius_range.second) {
        throw InvalidArgument("radius_range must satisfy 0 < min <= max");
    }
    if (spec.min_separation < 0.0) throw InvalidArgument("min_separation must be >= 0");
    shape_name(spec.shape);
}

double circumradius(Shape shape, double size) {
    switch (shape) {
        case Shape::disk: return size;
        case Shape::square: return size * square_half_side_per_size * std::numbers::sqrt2;
        case Shape::triangle: return size * triangle_circumradius_per_size;
    }
    return size;
}

Scene generate_scene(const SceneSpec& spec) {
    validate(spec);
    Rng rng(mix_seed(spec.seed, static_cast<std::uint64_t>(spec.count),
                     static_cast<std::uint64_t>(spec.shape)));
    const double lo = spec.radius_range.first;
    const double hi = spec.radius_range.second;
    const double canvas = spec.canvas;
    // Restart from an empty canvas when one object cannot be placed after
    // this many draws; every draw counts against the global budget.
    constexpr int per_object_tries = 500;

    int attempts = 0;
    Scene scene{spec, {}};
    while (attempts < max_placement_attempts) {
        scene.placements.clear();
        bool stuck = false;
        for (int obj = 0; obj < spec.count && !stuck; ++obj) {
            bool placed = false;
            for (int tries = 0; tries < per_object_tries; ++tries) {
                if (attempts >= max_placement_attempts) break;
                ++attempts;
                const double size = lo + (hi - lo) * uniform01(rng);
                const double r = circumradius(spec.shape, size);
                const double ux = uniform01(rng);
                const double uy = uniform01(rng);
                if (2.0 * r > canvas) continue;
                const Placement cand{r + ux * (canvas - 2.0 * r), r + uy * (canvas - 2.0 * r), size};
                const bool clear = std::all_of(
                    scene.placements.begin(), scene.placements.end(), [&](const Placement& p) {
                        const double need = r + circumradius(spec.shape, p.size) + spec.min_separation;
                        const double dx = p.center_x - cand.center_x;
                        const double dy = p.center_y - cand.center_y;
                        return dx * dx + dy * dy >= need * need;
                    });
                if (clear) {
                    scene.placements.push_back(cand);
                    placed = true;
                    break;
                }
            }
            stuck = !placed;
        }
        if (!stuck) return scene;
    }
    throw PlacementInfeasible("could not place " + std::to_string(spec.count) + " " +
                              std::string(shape_name(spec.shape)) + "(s) on a " +
                              std::to_string(spec.canvas) + "px canvas within " +
                              std::to_string(max_placement_attempts) + " attempts");
}

Image render(const Scene& scene) {
    Image img(scene.spec.canvas, scene.spec.canvas);
    for (const Placement& p : scene.placements) {
        const double r = circumradius(scene.spec.shape, p.size);
        const int x0 = std::max(0, static_cast<int>(std::floor(p.center_x - r - 1)));
        const int x1 = std::min(img.width - 1, static_cast<int>(std::ceil(p.center_x + r + 1)));
        const int y0 = std::max(0, static_cast<int>(std::floor(p.center_y - r - 1)));
        const int y1 = std::min(img.height - 1, static_cast<int>(std::ceil(p.center_y + r + 1)));
        for (int y = y0; y <= y1; ++y) {
            for (int x = x0; x <= x1; ++x) {
                if (inside(scene.spec.shape, p, x + 0.5, y + 0.5)) img.at(x, y) = 1.0f;
            }
        }
    }
    return img;
}

void write_pgm(const std::filesystem::path& path, const Image& image) {
    auto out = open_output(path);
    out << "P5\n" << image.width << ' ' << image.height << "\n255\n";
    std::vector<unsigned char> bytes(image.pixels.size());
    for (std::size_t i = 0; i < bytes.size(); ++i) {
        const float v = std::clamp(image.pixels[i], 0.0f, 1.0f);
        bytes[i] = static_cast<unsigned char>(std::lround(v * 255.0f));
    }
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("failed writing " + path.string());
}

Image read_pgm(const std::filesystem::path& path) {
    auto in = open_input(path);
    std::string magic;
    int w = 0, h = 0, maxval = 0;
    in >> magic >> w >> h >> maxval;
    if (magic != "P5" || w <= 0 || h <= 0 || maxval != 255) {
        throw FormatError("expected P5 graymap with maxval 255: " + path.string());
    }
    in.get();
    Image img(w, h);
    std::vector<unsigned char> bytes(img.pixels.size());
    in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (in.gcount() != static_cast<std::streamsize>(bytes.size())) {
        throw FormatError("truncated graymap: " + path.string());
    }
    for (std::size_t i = 0; i < bytes.size(); ++i) img.pixels[i] = bytes[i] / 255.0f;
    return img;
}

std::string_view split_name(Split split) {
    return split == Split::construction ? "construction" : "evaluation";
}

std::pair<PromptSet, PromptSet> generate_prompt_set(const std::vector<int>& counts,
                                                    const std::vector<Shape>& shapes,
                                                    int per_cell, std::uint64_t seed,
                                                    double split_ratio) {
    if (!(split_ratio > 0.0 && split_ratio < 1.0)) {
        throw InvalidRatio("split_ratio must lie strictly between 0 and 1, got " +
                           std::to_string(split_ratio));
    }
    if (per_cell < 1) throw InvalidArgument("per_cell must be >= 1");
    if (counts.empty() || shapes.empty()) throw InvalidArgument("counts and shapes must be non-empty");

    std::map<std::tuple<int, int, int>, std::uint32_t> ids;
    std::uint32_t next_id = 0;
    for (int c : counts) {
        for (Shape s : shapes) {
            for (int i = 0; i < per_cell; ++i) ids[{c, static_cast<int>(s), i}] = next_id++;
        }
    }

    std::vector<std::vector<PromptEntry>> construct(counts.size()), evaluate(counts.size());
    for (std::size_t ci = 0; ci < counts.size(); ++ci) {
        std::vector<std::pair<Shape, int>> cells;
        for (Shape s : shapes) {
            for (int i = 0; i < per_cell; ++i) cells.emplace_back(s, i);
        }
        Rng rng(mix_seed(seed, static_cast<std::uint64_t>(counts[ci])));
        shuffle(cells, rng);
        const auto n_construct =
            static_cast<std::size_t>(std::llround(static_cast<double>(cells.size()) * split_ratio));
        for (std::size_t k = 0; k < cells.size(); ++k) {
            const auto [s, i] = cells[k];
            PromptEntry e{ids.at({counts[ci], static_cast<int>(s), i}), counts[ci], s, i};
            (k < n_construct ? construct : evaluate)[ci].push_back(e);
        }
    }

    auto interleave = [&](const std::vector<std::vector<PromptEntry>>& per_count, Split split) {
        PromptSet set{split, {}};
        std::size_t longest = 0;
        for (const auto& v : per_count) longest = std::max(longest, v.size());
        for (std::size_t r = 0; r < longest; ++r) {
            for (const auto& v : per_count) {
                if (r < v.size()) set.entries.push_back(v[r]);
            }
        }
        return set;
    };
    return {interleave(construct, Split::construction), interleave(evaluate, Split::evaluation)};
}

void check_disjoint(const PromptSet& a, const PromptSet& b) {
    std::set<std::uint32_t> ids;
    std::set<std::tuple<int, int, int>> cells;
    for (const auto& e : a.entries) {
        ids.insert(e.prompt_id);
        cells.insert({e.count, static_cast<int>(e.shape), e.index});
    }
    for (const auto& e : b.entries) {
        if (ids.contains(e.prompt_id) || cells.contains({e.count, static_cast<int>(e.shape), e.index})) {
            throw DisjointnessViolation("prompt " + std::to_string(e.prompt_id) + " (" +
                                        std::to_string(e.count) + " " +
                                        std::string(shape_name(e.shape)) +
                                        ") appears in both prompt sets");
        }
    }
}

std::pair<PromptSet, PromptSet> split_holdout(const PromptSet& set, double holdout) {
    if (!(holdout > 0.0 && holdout < 1.0)) throw InvalidRatio("holdout must lie in (0, 1)");
    const auto n = set.entries.size();
    const auto held = static_cast<std::size_t>(std::llround(holdout * static_cast<double>(n)));
    PromptSet fit{set.split, {set.entries.begin(), set.entries.end() - static_cast<std::ptrdiff_t>(held)}};
    PromptSet tail{set.split, {set.entries.end() - static_cast<std::ptrdiff_t>(held), set.entries.end()}};
    return {std::move(fit), std::move(tail)};
}

void write_prompt_set(const std::filesystem::path& path, const PromptSet& set,
                      const std::string& provenance) {
    auto out = open_output(path, false);
    out << "# countsteer prompt set\n";
    std::istringstream prov(provenance);
    for (std::string line; std::getline(prov, line);) out << "# " << line << '\n';
    out << "split " << split_name(set.split) << '\n';
    out << "entries " << set.entries.size() << '\n';
    for (const auto& e : set.entries) {
        out << e.prompt_id << ' ' << e.count << ' ' << shape_name(e.shape) << ' ' << e.index << '\n';
    }
    if (!out) throw IoError("failed writing " + path.string());
}

PromptSet read_prompt_set(const std::filesystem::path& path) {
    auto in = open_input(path, false);
    PromptSet set;
    std::size_t expected = 0;
    bool have_split = false, have_count = false;
    for (std::string line; std::getline(in, line);) {
        if (line.empty() || line[0] == '#') continue;
        std::istringstream ls(line);
        if (!have_split) {
            std::string key, value;
            ls >> key >> value;
            if (key != "split" || (value != "construction" && value != "evaluation")) {
                throw FormatError("prompt set: expected 'split construction|evaluation'");
            }
            set.split = value == "construction" ? Split::construction : Split::evaluation;
            have_split = true;
        } else if (!have_count) {
            std::string key;
            if (!(ls >> key >> expected) || key != "entries") {
                throw FormatError("prompt set: expected 'entries <n>'");
            }
            have_count = true;
        } else {
            PromptEntry e;
            std::string shape;
            if (!(ls >> e.prompt_id >> e.count >> shape >> e.index)) {
                throw FormatError("prompt set: malformed entry line: " + line);
            }
            try {
                e.shape = parse_shape(shape);
            } catch (const UnknownShape& err) {
                throw FormatError(std::string("prompt set: ") + err.what());
            }
            set.entries.push_back(e);
        }
    }
    if (!have_count || set.entries.size() != expected) {
        throw FormatError("prompt set: entry count mismatch in " + path.string());
    }
    return set;
}

ConditionTokens encode_condition(int count, Shape shape, bool extended_range) {
    const int max_count = extended_range ? max_count_token : 4;
    if (count < 1 || count > max_count) {
        throw InvalidArgument("count " + std::to_string(count) + " outside [1, " +
                              std::to_string(max_count) + "]");
    }
    shape_name(shape);
    return ConditionTokens{{count, shape_token_base + static_cast<int>(shape)}};
}

ConditionTokens encode_condition(int count, std::string_view shape, bool extended_range) {
    return encode_condition(count, parse_shape(shape), extended_range);
}

ConditionTokens unconditional_tokens() { return ConditionTokens{{null_token, null_token}}; }

}  // namespace countsteer

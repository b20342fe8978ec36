#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace countsteer {

enum class Shape : std::uint8_t { disk = 0, square = 1, triangle = 2 };

inline constexpr std::array<Shape, 3> all_shapes{Shape::disk, Shape::square, Shape::triangle};

std::string_view shape_name(Shape shape);
// Throws UnknownShape.
Shape parse_shape(std::string_view name);

struct SceneSpec {
    int count = 1;
    Shape shape = Shape::disk;
    std::uint64_t seed = 0;
    int canvas = 32;
    std::pair<double, double> radius_range{2.5, 4.5};
    double min_separation = 2.0;
};

// Throws InvalidArgument when the spec violates its invariants.
void validate(const SceneSpec& spec);

struct Placement {
    double center_x = 0.0;
    double center_y = 0.0;
    double size = 0.0;  // disk radius; square and triangle are sized to the same area

    bool operator==(const Placement&) const = default;
};

struct Scene {
    SceneSpec spec;
    std::vector<Placement> placements;
};

// Radius of the smallest circle around `center` enclosing the shape.
double circumradius(Shape shape, double size);

inline constexpr int max_placement_attempts = 10'000;

// Rejection sampling, pure in `spec`. Throws PlacementInfeasible once the
// attempt budget is spent.
Scene generate_scene(const SceneSpec& spec);

// Grayscale raster, row-major, values in [0, 1].
struct Image {
    int width = 0;
    int height = 0;
    std::vector<float> pixels;

    Image() = default;
    Image(int w, int h) : width(w), height(h), pixels(static_cast<std::size_t>(w) * h, 0.0f) {}

    float& at(int x, int y) { return pixels[static_cast<std::size_t>(y) * width + x]; }
    float at(int x, int y) const { return pixels[static_cast<std::size_t>(y) * width + x]; }

    bool operator==(const Image&) const = default;
};

// Hard-edged render: a pixel is 1 iff its center lies inside some object.
Image render(const Scene& scene);

// P5 graymap, maxval 255.
void write_pgm(const std::filesystem::path& path, const Image& image);
Image read_pgm(const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Prompt corpus
// ---------------------------------------------------------------------------

enum class Split : std::uint8_t { construction = 0, evaluation = 1 };

std::string_view split_name(Split split);

struct PromptEntry {
    std::uint32_t prompt_id = 0;
    int count = 1;
    Shape shape = Shape::disk;
    int index = 0;  // position inside its (count, shape) cell

    bool operator==(const PromptEntry&) const = default;
};

struct PromptSet {
    Split split = Split::construction;
    std::vector<PromptEntry> entries;

    bool operator==(const PromptSet&) const = default;
};

// Splits every count's (shape, index) cells with a seeded shuffle so each
// count contributes round(|shapes| * per_cell * split_ratio) construction
// entries. Entries are ordered round-robin across counts.
// Throws InvalidRatio unless 0 < split_ratio < 1.
std::pair<PromptSet, PromptSet> generate_prompt_set(const std::vector<int>& counts,
                                                    const std::vector<Shape>& shapes,
                                                    int per_cell, std::uint64_t seed,
                                                    double split_ratio);

// Throws DisjointnessViolation if the sets share a prompt id or a
// (count, shape, index) cell.
void check_disjoint(const PromptSet& a, const PromptSet& b);

// Last round(holdout * n) entries go to the second set; both keep the split
// tag. Entries are round-robin across counts, so the tail stays balanced.
// Throws InvalidRatio unless 0 < holdout < 1.
std::pair<PromptSet, PromptSet> split_holdout(const PromptSet& set, double holdout);

void write_prompt_set(const std::filesystem::path& path, const PromptSet& set,
                      const std::string& provenance = {});
PromptSet read_prompt_set(const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Condition tokens
// ---------------------------------------------------------------------------

inline constexpr int null_token = 0;
inline constexpr int max_count_token = 10;
inline constexpr int shape_token_base = max_count_token + 1;
inline constexpr int token_vocab_size = shape_token_base + static_cast<int>(all_shapes.size());

struct ConditionTokens {
    std::array<int, 2> ids{null_token, null_token};

    bool is_unconditional() const { return ids[0] == null_token && ids[1] == null_token; }
    bool operator==(const ConditionTokens&) const = default;
};

// counts 1-4 by default; `extended_range` admits 1-10 for sweeps.
ConditionTokens encode_condition(int count, Shape shape, bool extended_range = false);
ConditionTokens encode_condition(int count, std::string_view shape, bool extended_range = false);
ConditionTokens unconditional_tokens();

}  // namespace countsteer

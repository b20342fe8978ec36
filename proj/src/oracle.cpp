#include "countsteer/oracle.hpp"

#include <cmath>
#include <limits>
#include <numbers>

#include "countsteer/error.hpp"

namespace countsteer {

void validate(const OracleConfig& cfg) {
    if (!(cfg.threshold > 0.0 && cfg.threshold < 1.0)) throw InvalidArgument("oracle threshold must lie in (0, 1)");
    if (cfg.min_area < 1) throw InvalidArgument("oracle min_area must be >= 1");
    if (cfg.connectivity != Connectivity::four && cfg.connectivity != Connectivity::eight) {
        throw InvalidArgument("oracle connectivity must be four or eight");
    }
}

double Component::compactness() const {
    if (perimeter == 0) return 0.0;
    return 4.0 * std::numbers::pi * area / (static_cast<double>(perimeter) * perimeter);
}

std::vector<Component> find_components(const Image& image, const OracleConfig& cfg) {
    validate(cfg);
    const int w = image.width;
    const int h = image.height;
    const auto thr = static_cast<float>(cfg.threshold);
    std::vector<int> label(static_cast<std::size_t>(w) * h, -1);
    auto on = [&](int x, int y) { return x >= 0 && y >= 0 && x < w && y < h && image.at(x, y) >= thr; };

    static constexpr int dx4[] = {1, -1, 0, 0};
    static constexpr int dy4[] = {0, 0, 1, -1};
    static constexpr int dx8[] = {1, -1, 0, 0, 1, 1, -1, -1};
    static constexpr int dy8[] = {0, 0, 1, -1, 1, -1, 1, -1};
    const int n_neighbors = cfg.connectivity == Connectivity::four ? 4 : 8;

    std::vector<Component> out;
    std::vector<std::pair<int, int>> stack;
    int next_label = 0;
    for (int y0 = 0; y0 < h; ++y0) {
        for (int x0 = 0; x0 < w; ++x0) {
            if (!on(x0, y0) || label[static_cast<std::size_t>(y0) * w + x0] >= 0) continue;
            const int id = next_label++;
            Component comp;
            stack.clear();
            stack.emplace_back(x0, y0);
            label[static_cast<std::size_t>(y0) * w + x0] = id;
            while (!stack.empty()) {
                const auto [x, y] = stack.back();
                stack.pop_back();
                ++comp.area;
                for (int k = 0; k < 4; ++k) {
                    if (!on(x + dx4[k], y + dy4[k])) ++comp.perimeter;
                }
                for (int k = 0; k < n_neighbors; ++k) {
                    const int nx = x + dx8[k];
                    const int ny = y + dy8[k];
                    if (!on(nx, ny)) continue;
                    int& l = label[static_cast<std::size_t>(ny) * w + nx];
                    if (l < 0) {
                        l = id;
                        stack.emplace_back(nx, ny);
                    }
                }
            }
            if (comp.area >= cfg.min_area) out.push_back(comp);
        }
    }
    return out;
}

int count_objects(const Image& image, const OracleConfig& cfg) {
    return static_cast<int>(find_components(image, cfg).size());
}

Shape classify_component(const Component& c, const OracleConfig& cfg) {
    const double value = c.compactness();
    Shape best = Shape::disk;
    double best_dist = std::numeric_limits<double>::infinity();
    for (Shape s : all_shapes) {
        const double d = std::abs(value - cfg.compactness_reference[static_cast<std::size_t>(s)]);
        if (d < best_dist) {
            best_dist = d;
            best = s;
        }
    }
    return best;
}

double shape_alignment(const Image& image, Shape shape, const OracleConfig& cfg) {
    const auto comps = find_components(image, cfg);
    if (comps.empty()) return 0.0;
    int match = 0;
    for (const auto& c : comps) match += classify_component(c, cfg) == shape ? 1 : 0;
    return static_cast<double>(match) / static_cast<double>(comps.size());
}

}  // namespace countsteer

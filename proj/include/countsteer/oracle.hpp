#pragma once

#include <array>
#include <vector>

#include "countsteer/scene.hpp"

namespace countsteer {

enum class Connectivity : std::uint8_t { four = 4, eight = 8 };

struct OracleConfig {
    double threshold = 0.5;
    Connectivity connectivity = Connectivity::four;
    int min_area = 4;
    // Compactness references for disk, square, triangle, calibrated on
    // hard-edged renders at the default radius range (crack-length perimeter).
    std::array<double, 3> compactness_reference{0.624, 0.785398, 0.443};
};

// Throws InvalidArgument on an invalid configuration.
void validate(const OracleConfig& cfg);

struct Component {
    int area = 0;
    int perimeter = 0;  // pixel edges between the component and background
    double compactness() const;
};

// Connected components of {pixel >= threshold} with area >= min_area.
std::vector<Component> find_components(const Image& image, const OracleConfig& cfg = {});

int count_objects(const Image& image, const OracleConfig& cfg = {});

// Nearest compactness reference for a component.
Shape classify_component(const Component& c, const OracleConfig& cfg = {});

// Fraction of components classified as `shape`; 0 with no components.
double shape_alignment(const Image& image, Shape shape, const OracleConfig& cfg = {});

}  // namespace countsteer

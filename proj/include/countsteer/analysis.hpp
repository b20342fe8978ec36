#pragma once

#include <array>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "countsteer/capture.hpp"
#include "countsteer/steering.hpp"

namespace countsteer {

struct Projections {
    std::vector<double> correct;
    std::vector<double> incorrect;
};

// Dot products with s / |s| at site (t, block). Throws InertSite.
Projections project_onto_direction(const BalancedCorpus& corpus, const SteeringBank& bank, int t, int block);

struct Density {
    std::vector<double> grid;
    std::vector<double> values;
    double bandwidth = 0.0;
    bool degenerate = false;  // zero-variance sample, fallback bandwidth used
};

inline constexpr int default_kde_points = 256;

// Gaussian KDE, Scott bandwidth sigma * n^(-1/5), on `grid_points` points
// spanning [min - 3 sigma, max + 3 sigma]. A zero-variance sample falls back
// to bandwidth 1e-3 |mean| + 1e-6 over +-6 bandwidths and is flagged.
Density kde_1d(std::span<const double> samples, int grid_points = default_kde_points);
// Same estimator evaluated on a caller-provided grid.
Density kde_on_grid(std::span<const double> samples, std::span<const double> grid);
// Grid covering both samples with the margins kde_1d would use.
std::vector<double> common_grid(std::span<const double> a, std::span<const double> b,
                                int grid_points = default_kde_points);

double trapezoid(std::span<const double> grid, std::span<const double> values);

// Trapezoid integral of min(f1, f0), clamped to [0, 1]. Throws GridMismatch.
double overlap_coefficient(const Density& f1, const Density& f0);

struct PcaPoint {
    double x = 0.0;
    double y = 0.0;
    Label label = Label::unlabeled;
};

struct PcaResult {
    std::array<std::vector<double>, 2> components;
    std::array<double, 2> variances{0.0, 0.0};
    std::vector<PcaPoint> points;
    int iterations = 0;
};

inline constexpr double pca_tolerance = 1e-9;
inline constexpr int pca_max_iterations = 10'000;

// Top two principal components of mean-centered vectors by block power
// iteration (two vectors, re-orthonormalized each sweep) with Rayleigh-Ritz
// on the 2x2 projection. Throws ConvergenceFailure, InvalidArgument (< 3 rows).
PcaResult pca_2d(const std::vector<std::vector<double>>& rows, double tolerance = pca_tolerance,
                 int max_iterations = pca_max_iterations);
PcaResult pca_project_2d(const BalancedCorpus& corpus, int t, int block);

struct SiteSeparability {
    int t = 0;
    int block = 0;
    double d_prime = 0.0;
    double ovl = 0.0;
    double m1 = 0.0, m0 = 0.0;  // class means along the unit direction
    double v1 = 0.0, v0 = 0.0;  // unbiased class variances
    Density f1, f0;             // on a common grid
};

struct SeparabilityReport {
    std::vector<SiteSeparability> sites;  // non-inert sites, t-major
};

// |m1 - m0| / sqrt((v1 + v0) / 2); 0 when both variances vanish and the means agree.
double d_prime(double m1, double m0, double v1, double v0);

SeparabilityReport separability_report(const BalancedCorpus& corpus, const SteeringBank& bank);

void write_separability_csv(const std::filesystem::path& path, const SeparabilityReport& report,
                            const std::string& provenance = {});
// One SVG with both class densities of a site.
void write_density_svg(const std::filesystem::path& path, const SiteSeparability& site,
                       const std::string& provenance = {});
void write_pca_csv(const std::filesystem::path& path, const PcaResult& pca, const std::string& provenance = {});

}  // namespace countsteer

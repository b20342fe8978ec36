#include "countsteer/analysis.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <numbers>

#include "countsteer/common.hpp"
#include "countsteer/error.hpp"

namespace countsteer {

namespace {

struct Moments {
    double mean = 0.0;
    double var = 0.0;  // unbiased
};

Moments moments(std::span<const double> x) {
    Moments m;
    if (x.empty()) return m;
    double sum = 0.0;
    for (double v : x) sum += v;
    m.mean = sum / static_cast<double>(x.size());
    if (x.size() < 2) return m;
    double ss = 0.0;
    for (double v : x) ss += (v - m.mean) * (v - m.mean);
    m.var = ss / static_cast<double>(x.size() - 1);
    return m;
}

// Scott bandwidth, or the documented fallback for zero spread.
std::pair<double, bool> bandwidth(std::span<const double> x) {
    const Moments m = moments(x);
    const double sigma = std::sqrt(m.var);
    if (sigma > 0.0) return {sigma * std::pow(static_cast<double>(x.size()), -0.2), false};
    return {1e-3 * std::abs(m.mean) + 1e-6, true};
}

std::pair<double, double> support(std::span<const double> x) {
    const auto [lo, hi] = std::minmax_element(x.begin(), x.end());
    const Moments m = moments(x);
    const double sigma = std::sqrt(m.var);
    if (sigma > 0.0) return {*lo - 3.0 * sigma, *hi + 3.0 * sigma};
    const double h = bandwidth(x).first;
    return {*lo - 6.0 * h, *hi + 6.0 * h};
}

std::vector<double> linspace(double lo, double hi, int n) {
    std::vector<double> g(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) g[i] = lo + (hi - lo) * i / (n - 1);
    return g;
}

void check_samples(std::span<const double> samples) {
    if (samples.size() < 2) throw InvalidArgument("kde needs at least 2 samples");
    for (double v : samples) {
        if (!std::isfinite(v)) throw InvalidArgument("kde samples must be finite");
    }
}

std::string fmt9(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.9g", v);
    return buf;
}

void write_provenance(std::ostream& out, const std::string& provenance) {
    std::size_t pos = 0;
    while (pos < provenance.size()) {
        auto end = provenance.find('\n', pos);
        if (end == std::string::npos) end = provenance.size();
        out << "# " << provenance.substr(pos, end - pos) << '\n';
        pos = end + 1;
    }
}

}  // namespace

Projections project_onto_direction(const BalancedCorpus& corpus, const SteeringBank& bank, int t, int block) {
    const SteeringEntry& e = bank.at(t, block);
    if (e.inert()) throw InertSite("site (" + std::to_string(t) + ", " + std::to_string(block) + ") is inert");
    double norm = 0.0;
    for (float v : e.s) norm += static_cast<double>(v) * v;
    norm = std::sqrt(norm);
    Projections out;
    for (const auto& r : corpus.records) {
        if (r.t != t || r.block != block || r.label == Label::unlabeled) continue;
        if (r.vector.size() != e.s.size()) throw ShapeMismatch("record dim differs from bank");
        double dot = 0.0;
        for (std::size_t d = 0; d < e.s.size(); ++d) dot += static_cast<double>(r.vector[d]) * e.s[d];
        (r.label == Label::correct ? out.correct : out.incorrect).push_back(dot / norm);
    }
    return out;
}

Density kde_on_grid(std::span<const double> samples, std::span<const double> grid) {
    check_samples(samples);
    Density d;
    std::tie(d.bandwidth, d.degenerate) = bandwidth(samples);
    d.grid.assign(grid.begin(), grid.end());
    d.values.assign(grid.size(), 0.0);
    const double norm = 1.0 / (static_cast<double>(samples.size()) * d.bandwidth * std::sqrt(2.0 * std::numbers::pi));
    for (std::size_t i = 0; i < grid.size(); ++i) {
        double acc = 0.0;
        for (double s : samples) {
            const double z = (grid[i] - s) / d.bandwidth;
            acc += std::exp(-0.5 * z * z);
        }
        d.values[i] = acc * norm;
    }
    return d;
}

Density kde_1d(std::span<const double> samples, int grid_points) {
    check_samples(samples);
    if (grid_points < 2) throw InvalidArgument("kde needs at least 2 grid points");
    const auto [lo, hi] = support(samples);
    return kde_on_grid(samples, linspace(lo, hi, grid_points));
}

std::vector<double> common_grid(std::span<const double> a, std::span<const double> b, int grid_points) {
    check_samples(a);
    check_samples(b);
    if (grid_points < 2) throw InvalidArgument("kde needs at least 2 grid points");
    const auto [lo_a, hi_a] = support(a);
    const auto [lo_b, hi_b] = support(b);
    return linspace(std::min(lo_a, lo_b), std::max(hi_a, hi_b), grid_points);
}

double trapezoid(std::span<const double> grid, std::span<const double> values) {
    if (grid.size() != values.size()) throw GridMismatch("trapezoid: grid and values differ in length");
    double acc = 0.0;
    for (std::size_t i = 1; i < grid.size(); ++i) acc += 0.5 * (values[i] + values[i - 1]) * (grid[i] - grid[i - 1]);
    return acc;
}

double overlap_coefficient(const Density& f1, const Density& f0) {
    if (f1.grid != f0.grid || f1.values.size() != f1.grid.size() || f0.values.size() != f0.grid.size()) {
        throw GridMismatch("densities are not on a common grid");
    }
    std::vector<double> lower(f1.values.size());
    for (std::size_t i = 0; i < lower.size(); ++i) lower[i] = std::min(f1.values[i], f0.values[i]);
    return std::clamp(trapezoid(f1.grid, lower), 0.0, 1.0);
}

PcaResult pca_2d(const std::vector<std::vector<double>>& rows, double tolerance, int max_iterations) {
    if (rows.size() < 3) throw InvalidArgument("pca needs at least 3 samples");
    const auto dim = static_cast<Eigen::Index>(rows.front().size());
    if (dim < 2) throw InvalidArgument("pca needs vectors of dim >= 2");
    const auto n = static_cast<Eigen::Index>(rows.size());
    Eigen::MatrixXd x(n, dim);
    for (Eigen::Index i = 0; i < n; ++i) {
        if (static_cast<Eigen::Index>(rows[i].size()) != dim) throw ShapeMismatch("pca rows differ in dim");
        for (Eigen::Index j = 0; j < dim; ++j) x(i, j) = rows[i][j];
    }
    x.rowwise() -= x.colwise().mean();
    const Eigen::MatrixXd cov = (x.transpose() * x) / static_cast<double>(n - 1);
    const double scale = std::max(cov.diagonal().sum(), std::numeric_limits<double>::min());

    // Deterministic start away from any axis.
    Rng rng(0x70636132ULL);
    Eigen::MatrixXd v(dim, 2);
    for (Eigen::Index j = 0; j < dim; ++j) {
        v(j, 0) = standard_normal(rng);
        v(j, 1) = standard_normal(rng);
    }
    auto orthonormalize = [&](Eigen::MatrixXd& m) {
        m.col(0).normalize();
        const double before = m.col(1).norm();
        // Two Gram-Schmidt passes; one loses orthogonality when the columns
        // are nearly parallel.
        for (int pass = 0; pass < 2; ++pass) m.col(1) -= m.col(0).dot(m.col(1)) * m.col(0);
        if (m.col(1).norm() <= 1e-10 * before || m.col(1).norm() < 1e-150) {
            // Rank one: take the axis least aligned with the first column.
            Eigen::Index j = 0;
            m.col(0).cwiseAbs().minCoeff(&j);
            m.col(1).setZero();
            m(j, 1) = 1.0;
            m.col(1) -= m.col(0).dot(m.col(1)) * m.col(0);
        }
        m.col(1).normalize();
    };
    orthonormalize(v);

    PcaResult out;
    std::array<double, 2> lambda{0.0, 0.0};
    bool converged = false;
    for (int it = 1; it <= max_iterations && !converged; ++it) {
        Eigen::MatrixXd w = cov * v;
        if (w.col(0).norm() < 1e-300) w.col(0) = v.col(0);  // zero covariance
        orthonormalize(w);
        // Rayleigh-Ritz on span(w).
        const Eigen::Matrix2d h = w.transpose() * cov * w;
        const double theta = 0.5 * std::atan2(2.0 * h(0, 1), h(0, 0) - h(1, 1));
        const double c = std::cos(theta), s = std::sin(theta);
        v.col(0) = c * w.col(0) + s * w.col(1);
        v.col(1) = -s * w.col(0) + c * w.col(1);
        for (int k = 0; k < 2; ++k) lambda[k] = v.col(k).dot(cov * v.col(k));
        if (lambda[1] > lambda[0]) {
            v.col(0).swap(v.col(1));
            std::swap(lambda[0], lambda[1]);
        }
        converged = true;
        for (int k = 0; k < 2; ++k) {
            const double residual = (cov * v.col(k) - lambda[k] * v.col(k)).norm();
            if (residual > tolerance * scale) converged = false;
        }
        out.iterations = it;
    }
    if (!converged) {
        throw ConvergenceFailure("pca did not converge within " + std::to_string(max_iterations) + " iterations");
    }
    for (int k = 0; k < 2; ++k) {
        Eigen::Index j = 0;
        v.col(k).cwiseAbs().maxCoeff(&j);
        if (v(j, k) < 0.0) v.col(k) = -v.col(k);
        out.components[k].assign(v.col(k).data(), v.col(k).data() + dim);
        out.variances[k] = std::max(lambda[k], 0.0);
    }
    const Eigen::MatrixXd proj = x * v;
    out.points.resize(rows.size());
    for (Eigen::Index i = 0; i < n; ++i) out.points[i] = {proj(i, 0), proj(i, 1), Label::unlabeled};
    return out;
}

PcaResult pca_project_2d(const BalancedCorpus& corpus, int t, int block) {
    std::vector<std::vector<double>> rows;
    std::vector<Label> labels;
    for (const auto& r : corpus.records) {
        if (r.t != t || r.block != block) continue;
        rows.emplace_back(r.vector.begin(), r.vector.end());
        labels.push_back(r.label);
    }
    PcaResult out = pca_2d(rows);
    for (std::size_t i = 0; i < labels.size(); ++i) out.points[i].label = labels[i];
    return out;
}

double d_prime(double m1, double m0, double v1, double v0) {
    const double pooled = std::sqrt(0.5 * (v1 + v0));
    if (pooled == 0.0) return m1 == m0 ? 0.0 : std::numeric_limits<double>::infinity();
    return std::abs(m1 - m0) / pooled;
}

SeparabilityReport separability_report(const BalancedCorpus& corpus, const SteeringBank& bank) {
    SeparabilityReport report;
    for (int t = 0; t < bank.k; ++t) {
        for (int b = 0; b < bank.blocks; ++b) {
            if (bank.at(t, b).inert()) continue;
            const Projections p = project_onto_direction(corpus, bank, t, b);
            SiteSeparability site;
            site.t = t;
            site.block = b;
            const Moments a = moments(p.correct);
            const Moments z = moments(p.incorrect);
            site.m1 = a.mean;
            site.m0 = z.mean;
            site.v1 = a.var;
            site.v0 = z.var;
            site.d_prime = d_prime(a.mean, z.mean, a.var, z.var);
            const auto grid = common_grid(p.correct, p.incorrect);
            site.f1 = kde_on_grid(p.correct, grid);
            site.f0 = kde_on_grid(p.incorrect, grid);
            site.ovl = overlap_coefficient(site.f1, site.f0);
            report.sites.push_back(std::move(site));
        }
    }
    return report;
}

void write_separability_csv(const std::filesystem::path& path, const SeparabilityReport& report,
                            const std::string& provenance) {
    auto out = open_output(path, false);
    write_provenance(out, provenance);
    out << "t,block,d_prime,ovl,m1,m0,v1,v0\n";
    for (const auto& s : report.sites) {
        out << s.t << ',' << s.block << ',' << fmt9(s.d_prime) << ',' << fmt9(s.ovl) << ',' << fmt9(s.m1) << ','
            << fmt9(s.m0) << ',' << fmt9(s.v1) << ',' << fmt9(s.v0) << '\n';
    }
    if (!out) throw IoError("failed writing " + path.string());
}

void write_density_svg(const std::filesystem::path& path, const SiteSeparability& site,
                       const std::string& provenance) {
    constexpr double width = 480, height = 300, pad = 40;
    const auto& grid = site.f1.grid;
    double peak = 0.0;
    for (double v : site.f1.values) peak = std::max(peak, v);
    for (double v : site.f0.values) peak = std::max(peak, v);
    if (peak <= 0.0) peak = 1.0;
    const double x0 = grid.front(), x1 = grid.back();
    auto px = [&](double x) { return pad + (x - x0) / (x1 - x0) * (width - 2 * pad); };
    auto py = [&](double y) { return height - pad - y / peak * (height - 2 * pad); };
    auto polygon = [&](const Density& f, const char* color) {
        std::string pts = fmt9(px(grid.front())) + "," + fmt9(py(0.0));
        for (std::size_t i = 0; i < grid.size(); ++i) pts += " " + fmt9(px(grid[i])) + "," + fmt9(py(f.values[i]));
        pts += " " + fmt9(px(grid.back())) + "," + fmt9(py(0.0));
        return "<polygon points=\"" + pts + "\" fill=\"" + color + "\" fill-opacity=\"0.4\" stroke=\"" + color +
               "\"/>\n";
    };
    auto out = open_output(path, false);
    out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << height << "\">\n";
    out << svg_comment(provenance);
    out << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    out << polygon(site.f1, "#1f77b4") << polygon(site.f0, "#d62728");
    out << "<line x1=\"" << pad << "\" y1=\"" << height - pad << "\" x2=\"" << width - pad << "\" y2=\""
        << height - pad << "\" stroke=\"black\"/>\n";
    out << "<text x=\"" << pad << "\" y=\"20\" font-size=\"13\">step " << site.t << ", block " << site.block
        << ": projection on unit steering direction (d'=" << fmt9(site.d_prime) << ", OVL=" << fmt9(site.ovl)
        << ")</text>\n";
    out << "<text x=\"" << width - 150 << "\" y=\"40\" font-size=\"12\" fill=\"#1f77b4\">class 1 (correct)</text>\n";
    out << "<text x=\"" << width - 150 << "\" y=\"56\" font-size=\"12\" fill=\"#d62728\">class 0 (incorrect)</text>\n";
    out << "<text x=\"" << pad << "\" y=\"" << height - 12 << "\" font-size=\"11\">" << fmt9(x0) << "</text>\n";
    out << "<text x=\"" << width - pad - 60 << "\" y=\"" << height - 12 << "\" font-size=\"11\">" << fmt9(x1)
        << "</text>\n";
    out << "</svg>\n";
    if (!out) throw IoError("failed writing " + path.string());
}

void write_pca_csv(const std::filesystem::path& path, const PcaResult& pca, const std::string& provenance) {
    auto out = open_output(path, false);
    write_provenance(out, provenance);
    out << "# explained variance: " << fmt9(pca.variances[0]) << ' ' << fmt9(pca.variances[1]) << '\n';
    out << "x,y,label\n";
    for (const auto& p : pca.points) {
        out << fmt9(p.x) << ',' << fmt9(p.y) << ',' << static_cast<int>(p.label) << '\n';
    }
    if (!out) throw IoError("failed writing " + path.string());
}

}  // namespace countsteer
